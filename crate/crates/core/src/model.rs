//! The full matching model: image encoder, caption encoder and pair scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Precision, TrainConfig};
use crate::cross_modal::{score_matrix, similarity, similarity_node};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};
use crate::text_pipeline::{TextParams, PAD_ID};
use crate::visual_relation::{ObjectSet, VisualRelationParams};

#[derive(Clone, Debug)]
pub struct ParNet {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub image: VisualRelationParams,
    pub text: TextParams,
}

/// Every intermediate weight of one image-caption pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInspection {
    pub omega_p: Vec<Tensor>,
    pub omega_i: Vec<Tensor>,
    pub omega_t: Vec<Tensor>,
    pub u: Tensor,
    pub w: Tensor,
    pub score: f64,
}

impl ParNet {
    /// Initializes parameters from `config.seed`. With 32-bit precision the
    /// initial values are rounded through `f32`.
    pub fn init(config: &TrainConfig, vocab_size: usize) -> Result<(ParNet, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let image = VisualRelationParams::init(&mut store, config, &mut rng)?;
        let text = TextParams::init(&mut store, config, vocab_size, &mut rng)?;
        let mut config = config.clone();
        config.vocab_size = vocab_size;
        let model = ParNet { config, vocab_size, image, text };
        if model.config.precision == Precision::F32 {
            for (_, p) in store.iter_mut() {
                p.value.round_to_f32();
            }
        }
        Ok((model, store))
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    /// Restores parameter constraints after an update.
    pub fn project(&self, store: &mut ParamStore) {
        if let Some(sp) = &self.image.spatial {
            sp.project(store);
        }
    }

    fn check_caption(&self, tokens: &[u32]) -> Result<()> {
        if !tokens.iter().any(|&t| t != PAD_ID) {
            return Err(Error::invalid("caption has no non-padding tokens"));
        }
        Ok(())
    }

    /// `B_i x B_t` score node over every image-caption combination.
    pub fn batch_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[&ObjectSet],
        captions: &[&[u32]],
    ) -> Result<NodeId> {
        if images.is_empty() || captions.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let v: Vec<NodeId> = images
            .iter()
            .map(|o| Ok(self.image.encode(g, store, o)?.v_r))
            .collect::<Result<_>>()?;
        let t: Vec<NodeId> = captions
            .iter()
            .map(|c| Ok(self.text.encode(g, store, c)?.t_r))
            .collect::<Result<_>>()?;
        let mut scores = Vec::with_capacity(v.len() * t.len());
        for &vi in &v {
            for &tj in &t {
                scores.push(similarity_node(g, vi, tj, self.lambda())?.score);
            }
        }
        g.stack(&scores, v.len(), t.len())
    }

    pub fn encode_images(&self, store: &ParamStore, images: &[&ObjectSet]) -> Result<Vec<Tensor>> {
        images
            .par_iter()
            .map(|o| Ok(self.image.encode_image(store, o)?.v_r))
            .collect()
    }

    pub fn encode_captions(&self, store: &ParamStore, captions: &[&[u32]]) -> Result<Vec<Tensor>> {
        captions
            .par_iter()
            .map(|c| {
                self.check_caption(c)?;
                Ok(self.text.encode_text(store, c)?.t_r)
            })
            .collect()
    }

    /// Scores of every image against every caption, encoding each once.
    pub fn score_matrix(
        &self,
        store: &ParamStore,
        images: &[&ObjectSet],
        captions: &[&[u32]],
    ) -> Result<Tensor> {
        let v = self.encode_images(store, images)?;
        let t = self.encode_captions(store, captions)?;
        score_matrix(&v, &t, self.lambda())
    }

    pub fn score(&self, store: &ParamStore, image: &ObjectSet, caption: &[u32]) -> Result<f64> {
        Ok(self.inspect(store, image, caption)?.score)
    }

    pub fn inspect(&self, store: &ParamStore, image: &ObjectSet, caption: &[u32]) -> Result<PairInspection> {
        self.check_caption(caption)?;
        let img = self.image.encode_image(store, image)?;
        let txt = self.text.encode_text(store, caption)?;
        let (attended, score) = similarity(&img.v_r, &txt.t_r, self.lambda())?;
        Ok(PairInspection {
            omega_p: img.omega_p,
            omega_i: img.omega_i,
            omega_t: txt.omega_t,
            u: attended.u,
            w: attended.w,
            score,
        })
    }
}

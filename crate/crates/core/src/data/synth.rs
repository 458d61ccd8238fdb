use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::captions::{write_captions, Caption};
use super::features::{write_features, FeatureSet, ImageRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spatial::BoxMatrix;
use crate::text_pipeline::Vocabulary;
use crate::visual_relation::ObjectSet;

const OBJECT_NAMES: [&str; 16] = [
    "dog", "cat", "chair", "table", "lamp", "sink", "toilet", "shelf", "bed", "sofa", "plant",
    "clock", "bottle", "cup", "book", "vase",
];
const FUNCTION_WORDS: [&str; 7] = ["the", "is", "left", "of", "above", "between", "and"];
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    Above,
    Between,
}

impl Relation {
    fn roles(self) -> usize {
        match self {
            Relation::Between => 3,
            _ => 2,
        }
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub object_vocab: usize,
    pub scenes: usize,
    pub objects_per_scene: usize,
    pub d_v: usize,
    pub relations: Vec<Relation>,
    /// Number of scene pairs sharing objects but not arrangement; `None`
    /// uses a quarter of the scenes.
    pub contrast_pairs: Option<usize>,
    /// Standard deviation of per-object feature noise around the prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            object_vocab: 8,
            scenes: 32,
            objects_per_scene: 3,
            d_v: 32,
            relations: vec![Relation::LeftOf, Relation::Above, Relation::Between],
            contrast_pairs: None,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("synthetic spec JSON: {e}")))
    }

    fn pair_count(&self) -> usize {
        self.contrast_pairs.unwrap_or(self.scenes / 4)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.objects_per_scene < 2 {
            return fail("objects_per_scene must be at least 2".into());
        }
        if self.object_vocab < self.objects_per_scene {
            return fail("object_vocab must cover objects_per_scene distinct objects".into());
        }
        if self.scenes == 0 || self.d_v == 0 {
            return fail("scenes and d_v must be positive".into());
        }
        if 2 * self.pair_count() > self.scenes {
            return fail("contrast pairs need two scenes each".into());
        }
        if !(self.noise >= 0.0) {
            return fail("noise must be non-negative".into());
        }
        if !self.relations.iter().any(|r| r.roles() <= self.objects_per_scene) {
            return fail("no relation fits objects_per_scene".into());
        }
        Ok(())
    }
}

/// Ground truth of one generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub image_id: u64,
    pub relation: Relation,
    /// Object type of every feature row, sorted ascending.
    pub objects: Vec<usize>,
    pub caption: String,
    /// The other scene of a contrast pair.
    pub partner: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub features: FeatureSet,
    pub captions: Vec<Caption>,
    pub vocab: Vocabulary,
    pub scenes: Vec<SceneInfo>,
}

impl SyntheticData {
    /// Writes `features.parf`, `captions.jsonl`, `vocab.txt` and `scenes.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_features(&self.features, &dir.join("features.parf"))?;
        write_captions(&self.captions, &dir.join("captions.jsonl"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        fs::write(dir.join("scenes.json"), serde_json::to_string_pretty(&self.scenes)?)?;
        Ok(())
    }
}

fn object_name(k: usize) -> String {
    OBJECT_NAMES.get(k).map_or_else(|| format!("object{k}"), |s| s.to_string())
}

fn caption_text(rel: Relation, roles: &[usize]) -> String {
    let n = |i: usize| object_name(roles[i]);
    match rel {
        Relation::LeftOf => format!("the {} is left of the {}", n(0), n(1)),
        Relation::Above => format!("the {} is above the {}", n(0), n(1)),
        Relation::Between => format!("the {} is between the {} and the {}", n(0), n(1), n(2)),
    }
}

/// Object types in role order followed by distractors, with one box each.
struct Layout {
    relation: Relation,
    types: Vec<usize>,
    boxes: Vec<[f64; 4]>,
}

impl Layout {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Layout {
        let fitting: Vec<Relation> = spec
            .relations
            .iter()
            .copied()
            .filter(|r| r.roles() <= spec.objects_per_scene)
            .collect();
        let relation = *fitting.choose(rng).unwrap();
        let mut all: Vec<usize> = (0..spec.object_vocab).collect();
        all.shuffle(rng);
        let types = all[..spec.objects_per_scene].to_vec();

        let size = |rng: &mut ChaCha8Rng| [rng.gen_range(0.1..0.2), rng.gen_range(0.1..0.2)];
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.05..0.05);
        let mut centers: Vec<(f64, f64)> = match relation {
            Relation::LeftOf => {
                let y = rng.gen_range(0.3..0.7);
                vec![
                    (rng.gen_range(0.1..0.35), y + jitter(rng)),
                    (rng.gen_range(0.65..0.9), y + jitter(rng)),
                ]
            }
            Relation::Above => {
                let x = rng.gen_range(0.3..0.7);
                vec![
                    (x + jitter(rng), rng.gen_range(0.1..0.35)),
                    (x + jitter(rng), rng.gen_range(0.65..0.9)),
                ]
            }
            Relation::Between => {
                let y = rng.gen_range(0.3..0.7);
                vec![
                    (rng.gen_range(0.4..0.6), y + jitter(rng)),
                    (rng.gen_range(0.05..0.25), y + jitter(rng)),
                    (rng.gen_range(0.75..0.95), y + jitter(rng)),
                ]
            }
        };
        while centers.len() < types.len() {
            centers.push((rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)));
        }
        let boxes = centers
            .into_iter()
            .map(|(x, y)| {
                let [w, h] = size(rng);
                [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0), w, h].map(|v| v as f32 as f64)
            })
            .collect();
        Layout { relation, types, boxes }
    }

    fn caption(&self) -> String {
        caption_text(self.relation, &self.types[..self.relation.roles()])
    }

    /// Same objects with the first two roles trading places; the caption
    /// changes with them.
    fn contrast(&self) -> Layout {
        let mut types = self.types.clone();
        types.swap(0, 1);
        Layout { relation: self.relation, types, boxes: self.boxes.clone() }
    }
}

/// Generates scenes deterministically from `spec`, including its seed.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // unit expected norm, so no prototype swamps the attention logits
    let scale = (spec.d_v as f64).sqrt().recip();
    let prototypes: Vec<Vec<f64>> = (0..spec.object_vocab)
        .map(|_| (0..spec.d_v).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    words.extend((0..spec.object_vocab).map(object_name));
    let vocab = Vocabulary::from_tokens(words)?;

    let mut seen = HashSet::new();
    let fresh = |layout: &Layout, seen: &HashSet<String>| !seen.contains(&layout.caption());
    let mut layouts: Vec<(Layout, Option<usize>)> = Vec::with_capacity(spec.scenes);
    let pairs = spec.pair_count();
    while layouts.len() < spec.scenes {
        let paired = layouts.len() < 2 * pairs;
        let mut attempts = 0;
        let layout = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Config(format!(
                    "cannot generate {} distinct captions from this spec",
                    spec.scenes
                )));
            }
            let l = Layout::sample(spec, &mut rng);
            if fresh(&l, &seen) && (!paired || fresh(&l.contrast(), &seen)) {
                break l;
            }
        };
        seen.insert(layout.caption());
        if paired {
            let twin = layout.contrast();
            seen.insert(twin.caption());
            let i = layouts.len();
            layouts.push((layout, Some(i + 1)));
            layouts.push((twin, Some(i)));
        } else {
            layouts.push((layout, None));
        }
    }

    let mut images = Vec::with_capacity(spec.scenes);
    let mut captions = Vec::with_capacity(spec.scenes);
    let mut scenes = Vec::with_capacity(spec.scenes);
    for (i, (layout, partner)) in layouts.iter().enumerate() {
        let id = i as u64 + 1;
        let mut order: Vec<usize> = (0..layout.types.len()).collect();
        order.sort_by_key(|&k| layout.types[k]);
        let mut values = Vec::with_capacity(order.len() * spec.d_v);
        for &k in &order {
            for &p in &prototypes[layout.types[k]] {
                let noise = if spec.noise > 0.0 {
                    spec.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                values.push((p + noise) as f32 as f64);
            }
        }
        let boxes = BoxMatrix::new(order.iter().map(|&k| layout.boxes[k]).collect())?;
        let objects = ObjectSet::new(Tensor::matrix(order.len(), spec.d_v, values), boxes)?;
        images.push(ImageRecord { id, objects });

        let text = layout.caption();
        captions.push(Caption { image_id: id, caption_id: id, tokens: vocab.encode(&text) });
        scenes.push(SceneInfo {
            image_id: id,
            relation: layout.relation,
            objects: order.iter().map(|&k| layout.types[k]).collect(),
            caption: text,
            partner: partner.map(|p| p as u64 + 1),
        });
    }
    Ok(SyntheticData {
        features: FeatureSet { d_v: spec.d_v, images },
        captions,
        vocab,
        scenes,
    })
}

//! On-disk datasets: object features, captions, and a synthetic scene
//! generator with planted spatial relations.

mod captions;
mod features;
mod synth;

use std::collections::HashMap;

pub use captions::{load_captions, parse_captions, write_captions, Caption};
pub use features::{load_features, read_features, write_features, FeatureSet, ImageRecord, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{generate, Relation, SceneInfo, SyntheticData, SyntheticSpec};

use crate::error::{Error, Result};
use crate::text_pipeline::Vocabulary;

/// Images plus the captions that describe them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: FeatureSet,
    pub captions: Vec<Caption>,
    image_index: HashMap<u64, usize>,
}

impl Dataset {
    /// Checks that every caption refers to a known image and every image has
    /// at least one caption.
    pub fn new(features: FeatureSet, captions: Vec<Caption>) -> Result<Self> {
        if features.images.is_empty() {
            return Err(Error::Format("dataset has no images".into()));
        }
        let mut image_index = HashMap::new();
        for (i, img) in features.images.iter().enumerate() {
            if image_index.insert(img.id, i).is_some() {
                return Err(Error::Format(format!("duplicate image id {}", img.id)));
            }
        }
        let mut covered = vec![false; features.images.len()];
        let mut caption_ids = HashMap::new();
        for c in &captions {
            let &i = image_index
                .get(&c.image_id)
                .ok_or(Error::UnknownId { kind: "image", id: c.image_id })?;
            covered[i] = true;
            if caption_ids.insert(c.caption_id, ()).is_some() {
                return Err(Error::Format(format!("duplicate caption id {}", c.caption_id)));
            }
        }
        if let Some(i) = covered.iter().position(|&c| !c) {
            return Err(Error::Format(format!(
                "image {} has no caption",
                features.images[i].id
            )));
        }
        Ok(Dataset { features, captions, image_index })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.features.images
    }

    pub fn image_position(&self, id: u64) -> Result<usize> {
        self.image_index
            .get(&id)
            .copied()
            .ok_or(Error::UnknownId { kind: "image", id })
    }

    pub fn caption(&self, id: u64) -> Result<&Caption> {
        self.captions
            .iter()
            .find(|c| c.caption_id == id)
            .ok_or(Error::UnknownId { kind: "caption", id })
    }

    /// Image row of every caption, in caption order.
    pub fn caption_owners(&self) -> Vec<usize> {
        self.captions.iter().map(|c| self.image_index[&c.image_id]).collect()
    }

    /// Largest token id plus one, at least the reserved ids.
    pub fn min_vocab_size(&self) -> usize {
        self.captions
            .iter()
            .flat_map(|c| c.tokens.iter())
            .map(|&t| t as usize + 1)
            .max()
            .unwrap_or(0)
            .max(2)
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for c in &self.captions {
            if let Some(&t) = c.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Format(format!(
                    "caption {} has token {t} outside vocabulary of {vocab_size}",
                    c.caption_id
                )));
            }
        }
        Ok(())
    }

    /// Subset with the given image rows and all their captions.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let images: Vec<ImageRecord> = rows.iter().map(|&r| self.features.images[r].clone()).collect();
        let keep: HashMap<u64, ()> = images.iter().map(|i| (i.id, ())).collect();
        let captions = self
            .captions
            .iter()
            .filter(|c| keep.contains_key(&c.image_id))
            .cloned()
            .collect();
        Dataset::new(FeatureSet { d_v: self.features.d_v, images }, captions)
    }
}

/// Loads a features file, a captions file and optionally checks tokens
/// against a vocabulary.
pub fn load_dataset(
    features: &std::path::Path,
    captions: &std::path::Path,
    expected_d_v: Option<usize>,
    vocab: Option<&Vocabulary>,
) -> Result<Dataset> {
    let features = load_features(features, expected_d_v)?;
    let captions = load_captions(captions)?;
    let data = Dataset::new(features, captions)?;
    if let Some(v) = vocab {
        data.check_vocab(v.len())?;
    }
    Ok(data)
}

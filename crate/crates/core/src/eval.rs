//! Recall@K retrieval evaluation and attention inspection records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::cross_modal::ScoreMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ParNet;
use crate::numerics::{ParamStore, Tensor};
use crate::visual_relation::ObjectSet;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Candidate indices of one query ordered by descending score, ties by
/// ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn hits_at_k(scores: &Tensor, truth: &[Vec<usize>], k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > scores.cols() {
        return Err(Error::invalid(format!(
            "K = {k} exceeds the {} candidates",
            scores.cols()
        )));
    }
    if truth.len() != scores.rows() {
        return Err(Error::shape("recall_at_k", scores.shape(), &[truth.len()]));
    }
    (0..scores.rows())
        .into_par_iter()
        .map(|q| {
            let relevant = &truth[q];
            if relevant.is_empty() {
                return Err(Error::invalid(format!("query {q} has no relevant candidate")));
            }
            let row = scores.row(q);
            // Count candidates that outrank the best relevant one.
            let best = relevant
                .iter()
                .map(|&r| {
                    let s = row[r];
                    row.iter()
                        .enumerate()
                        .filter(|&(c, &x)| x > s || (x == s && c < r))
                        .count()
                })
                .min()
                .unwrap();
            Ok(best < k)
        })
        .collect()
}

/// Percentage of queries (rows) whose top `k` candidates contain a relevant
/// index.
pub fn recall_at_k(scores: &Tensor, truth: &[Vec<usize>], k: usize) -> Result<f64> {
    let hits = hits_at_k(scores, truth, k)?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::ImageToText => "image-to-text",
            Direction::TextToImage => "text-to-image",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recalls: Vec<Recall>,
    pub queries: usize,
    pub config: TrainConfig,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|r| r.k == k).map(|r| r.percent)
    }
}

/// Aligned plain-text table of one or more reports.
pub fn report_table(reports: &[RetrievalReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.recalls.iter().map(|x| x.k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = format!("{:<14} {:>7}", "direction", "queries");
    for k in &ks {
        write!(out, " {:>7}", format!("R@{k}")).unwrap();
    }
    out.push('\n');
    for r in reports {
        write!(out, "{:<14} {:>7}", r.direction.label(), r.queries).unwrap();
        for &k in &ks {
            match r.recall(k) {
                Some(p) => write!(out, " {p:>7.2}").unwrap(),
                None => write!(out, " {:>7}", "-").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

/// Both retrieval directions from one full score matrix.
pub fn reports_from_scores(
    scores: &ScoreMatrix,
    ks: &[usize],
    config: &TrainConfig,
) -> Result<[RetrievalReport; 2]> {
    let i2t_truth = scores.image_truth();
    let t2i_truth = scores.caption_truth();
    let transposed = scores.scores.transpose();
    let build = |direction, s: &Tensor, truth: &[Vec<usize>]| -> Result<RetrievalReport> {
        let recalls = ks
            .iter()
            .map(|&k| Ok(Recall { k, percent: recall_at_k(s, truth, k)? }))
            .collect::<Result<_>>()?;
        Ok(RetrievalReport { direction, recalls, queries: s.rows(), config: config.clone() })
    };
    Ok([
        build(Direction::ImageToText, &scores.scores, &i2t_truth)?,
        build(Direction::TextToImage, &transposed, &t2i_truth)?,
    ])
}

/// Scores every image against every caption of the dataset.
pub fn dataset_scores(model: &ParNet, store: &ParamStore, data: &Dataset) -> Result<ScoreMatrix> {
    let images: Vec<&ObjectSet> = data.images().iter().map(|i| &i.objects).collect();
    let captions: Vec<&[u32]> = data.captions.iter().map(|c| c.tokens.as_slice()).collect();
    let scores = model.score_matrix(store, &images, &captions)?;
    ScoreMatrix::new(scores, data.caption_owners())
}

/// Image-to-text treats every caption of an image as relevant.
pub fn evaluate(
    model: &ParNet,
    store: &ParamStore,
    data: &Dataset,
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    let scores = dataset_scores(model, store, data)?;
    reports_from_scores(&scores, ks, &model.config)
}

/// Attention weights of one image-caption pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub image_id: u64,
    pub caption_id: u64,
    pub omega_p: Vec<Vec<Vec<f64>>>,
    pub omega_i: Vec<Vec<Vec<f64>>>,
    pub omega_t: Vec<Vec<Vec<f64>>>,
    /// Object-word cosines.
    pub u: Vec<Vec<f64>>,
    /// Per-word attention over objects; columns sum to 1.
    pub w: Vec<Vec<f64>>,
    pub score: f64,
}

impl AttentionRecord {
    /// Largest deviation from 1 over all stochastic rows, and `w` columns.
    pub fn max_stochastic_error(&self) -> f64 {
        let rows = self.omega_p.iter().chain(&self.omega_i).chain(&self.omega_t).flatten();
        let row_err = rows.map(|r| (r.iter().sum::<f64>() - 1.0).abs());
        let cols = self.w.first().map_or(0, Vec::len);
        let col_err = (0..cols).map(|j| (self.w.iter().map(|r| r[j]).sum::<f64>() - 1.0).abs());
        row_err.chain(col_err).fold(0.0, f64::max)
    }
}

pub fn attention_record(
    model: &ParNet,
    store: &ParamStore,
    data: &Dataset,
    image_id: u64,
    caption_id: u64,
) -> Result<AttentionRecord> {
    let image = &data.images()[data.image_position(image_id)?];
    let caption = data.caption(caption_id)?;
    let p = model.inspect(store, &image.objects, &caption.tokens)?;
    let nested = |ts: &[Tensor]| ts.iter().map(Tensor::to_rows).collect();
    Ok(AttentionRecord {
        image_id,
        caption_id,
        omega_p: nested(&p.omega_p),
        omega_i: nested(&p.omega_i),
        omega_t: nested(&p.omega_t),
        u: p.u.to_rows(),
        w: p.w.to_rows(),
        score: p.score,
    })
}

/// Computes the record and writes it as pretty JSON.
pub fn dump_attention(
    model: &ParNet,
    store: &ParamStore,
    data: &Dataset,
    image_id: u64,
    caption_id: u64,
    out: &Path,
) -> Result<AttentionRecord> {
    let record = attention_record(model, store, data, image_id, caption_id)?;
    fs::write(out, serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_dominant(n: usize) -> Tensor {
        let mut t = Tensor::filled(&[n, n], 0.1);
        for i in 0..n {
            t.set(i, i, 0.9);
        }
        t
    }

    /// Sorts each row and checks the first `k` entries for membership.
    fn oracle(scores: &Tensor, truth: &[Vec<usize>], k: usize) -> f64 {
        let mut hits = 0;
        for q in 0..scores.rows() {
            let mut idx: Vec<usize> = (0..scores.cols()).collect();
            let row = scores.row(q);
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if idx[..k].iter().any(|c| truth[q].contains(c)) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / scores.rows() as f64
    }

    #[test]
    fn recall_examples() {
        let s = diag_dominant(4);
        let diag: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let anti: Vec<Vec<usize>> = (0..4).map(|i| vec![3 - i]).collect();
        assert_eq!(recall_at_k(&s, &diag, 1).unwrap(), 100.0);
        assert_eq!(recall_at_k(&s, &anti, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&s, &anti, 4).unwrap(), 100.0);
        assert!(recall_at_k(&s, &diag, 5).is_err());
        assert!(recall_at_k(&s, &diag, 0).is_err());
        assert!(recall_at_k(&s, &[vec![0], vec![], vec![2], vec![3]], 1).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = Tensor::filled(&[2, 3], 0.5);
        assert_eq!(recall_at_k(&s, &[vec![0], vec![1]], 1).unwrap(), 50.0);
        assert_eq!(ranking(&[0.5, 0.7, 0.5]), vec![1, 0, 2]);
    }

    #[test]
    fn multiple_ground_truths() {
        let s = Tensor::from_rows(&[[0.1, 0.9, 0.5], [0.8, 0.2, 0.3]]).unwrap();
        let truth = vec![vec![0, 2], vec![1, 2]];
        assert_eq!(recall_at_k(&s, &truth, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&s, &truth, 2).unwrap(), 100.0);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..20 {
            let s = Tensor::matrix(20, 20, (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let truth: Vec<Vec<usize>> = (0..20)
                .map(|q| if trial % 2 == 0 { vec![q] } else { vec![q, (q * 7 + 3) % 20] })
                .collect();
            for k in [1, 5, 10, 20] {
                assert_eq!(recall_at_k(&s, &truth, k).unwrap(), oracle(&s, &truth, k));
            }
        }
    }

    #[test]
    fn report_table_lists_every_k() {
        let s = ScoreMatrix::diagonal(diag_dominant(4)).unwrap();
        let reports = reports_from_scores(&s, &[1, 2], &TrainConfig::default()).unwrap();
        assert_eq!(reports[0].recall(1), Some(100.0));
        assert_eq!(reports[1].direction, Direction::TextToImage);
        let table = report_table(&reports);
        assert!(table.contains("R@2"));
        assert!(table.lines().nth(1).unwrap().starts_with("image-to-text"));
        let json = serde_json::to_string(&reports[0]).unwrap();
        assert_eq!(serde_json::from_str::<RetrievalReport>(&json).unwrap(), reports[0]);
    }

    proptest::proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..1000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let truth: Vec<Vec<usize>> = (0..n).map(|q| vec![q]).collect();
            let recalls: Vec<f64> = (1..=n).map(|k| recall_at_k(&s, &truth, k).unwrap()).collect();
            proptest::prop_assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
            proptest::prop_assert_eq!(recalls[n - 1], 100.0);
        }
    }
}

//! Sentence-conditioned object weighting and the image-caption score.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{cosine, Graph, NodeId, Tensor, EPS_NORM};

/// Attended objects of one image for one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendedImage {
    /// `N x d_model` re-weighted object vectors.
    pub alpha: Tensor,
    /// `N x M` object-word cosines.
    pub u: Tensor,
    /// `N x M` attention over objects for each word; columns sum to 1.
    pub w: Tensor,
}

/// All-pairs scores between a list of images (rows) and captions (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor,
    /// Row index of the image each caption column belongs to.
    pub caption_image: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, caption_image: Vec<usize>) -> Result<Self> {
        if caption_image.len() != scores.cols() {
            return Err(Error::shape("score matrix", scores.shape(), &[scores.rows(), caption_image.len()]));
        }
        if let Some(&bad) = caption_image.iter().find(|&&i| i >= scores.rows()) {
            return Err(Error::invalid(format!("caption owner {bad} out of range")));
        }
        Ok(ScoreMatrix { scores, caption_image })
    }

    /// Square matrix whose diagonal holds the matched pairs.
    pub fn diagonal(scores: Tensor) -> Result<Self> {
        let n = scores.cols();
        ScoreMatrix::new(scores, (0..n).collect())
    }

    /// Relevant captions of every image row.
    pub fn image_truth(&self) -> Vec<Vec<usize>> {
        let mut truth = vec![Vec::new(); self.scores.rows()];
        for (c, &i) in self.caption_image.iter().enumerate() {
            truth[i].push(c);
        }
        truth
    }

    /// The single relevant image of every caption.
    pub fn caption_truth(&self) -> Vec<Vec<usize>> {
        self.caption_image.iter().map(|&i| vec![i]).collect()
    }
}

/// `u[i][j] = cos(v_r_i, t_r_j)`.
pub fn relevance(v_r: &Tensor, t_r: &Tensor) -> Result<Tensor> {
    if v_r.cols() != t_r.cols() {
        return Err(Error::shape("relevance", v_r.shape(), t_r.shape()));
    }
    let mut u = Tensor::zeros(&[v_r.rows(), t_r.rows()]);
    for i in 0..v_r.rows() {
        for j in 0..t_r.rows() {
            u.set(i, j, cosine(v_r.row(i), t_r.row(j))?);
        }
    }
    Ok(u)
}

/// Softmax of `lambda * u` over objects for every word, then each object
/// vector scaled by its word-averaged weight.
pub fn attend_objects(u: &Tensor, v_r: &Tensor, lambda: f64) -> Result<AttendedImage> {
    if u.rows() != v_r.rows() {
        return Err(Error::shape("attend_objects", u.shape(), v_r.shape()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let w = u.scale(lambda).transpose().softmax_rows().transpose();
    let m = u.cols() as f64;
    let mut alpha = v_r.clone();
    for i in 0..alpha.rows() {
        let total = w.row(i).iter().sum::<f64>() / m;
        alpha.row_mut(i).iter_mut().for_each(|x| *x *= total);
    }
    Ok(AttendedImage { alpha, u: u.clone(), w })
}

/// Mean cosine between every attended object and every word.
pub fn pair_similarity(alpha: &AttendedImage, t_r: &Tensor) -> Result<f64> {
    let a = &alpha.alpha;
    if a.rows() == 0 || t_r.rows() == 0 {
        return Err(Error::invalid("pair similarity needs objects and words"));
    }
    if a.cols() != t_r.cols() {
        return Err(Error::shape("pair_similarity", a.shape(), t_r.shape()));
    }
    let mut total = 0.0;
    for i in 0..a.rows() {
        for j in 0..t_r.rows() {
            total += cosine(a.row(i), t_r.row(j))?;
        }
    }
    Ok(total / (a.rows() * t_r.rows()) as f64)
}

/// Relevance, attention and score for one encoded pair.
pub fn similarity(v_r: &Tensor, t_r: &Tensor, lambda: f64) -> Result<(AttendedImage, f64)> {
    let u = relevance(v_r, t_r)?;
    let attended = attend_objects(&u, v_r, lambda)?;
    let s = pair_similarity(&attended, t_r)?;
    Ok((attended, s))
}

/// Scores of already encoded images against already encoded captions.
/// Rows are computed in parallel; every entry is evaluated exactly as the
/// sequential [`similarity`] would.
pub fn score_matrix(images: &[Tensor], texts: &[Tensor], lambda: f64) -> Result<Tensor> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::invalid("score matrix needs images and captions"));
    }
    let rows = images
        .par_iter()
        .map(|v| texts.iter().map(|t| similarity(v, t, lambda).map(|r| r.1)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Tensor::from_rows(&rows)
}

/// Graph handles of one pair's similarity.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityNodes {
    pub u: NodeId,
    pub w: NodeId,
    pub score: NodeId,
}

pub fn similarity_node(g: &mut Graph, v_r: NodeId, t_r: NodeId, lambda: f64) -> Result<SimilarityNodes> {
    let vn = g.l2_normalize_rows(v_r, EPS_NORM);
    let tn = g.l2_normalize_rows(t_r, EPS_NORM);
    let u = g.matmul_t(vn, tn)?;
    let m = g.value(u).cols() as f64;

    let logits = g.scale(u, lambda);
    let per_word = g.transpose(logits);
    let per_word = g.softmax_rows(per_word);
    let w = g.transpose(per_word);
    let total = g.sum_rows(w);
    let total = g.scale(total, 1.0 / m);
    let alpha = g.mul_col(v_r, total)?;

    let an = g.l2_normalize_rows(alpha, EPS_NORM);
    let cos = g.matmul_t(an, tn)?;
    let score = g.mean_all(cos);
    Ok(SimilarityNodes { u, w, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn relevance_examples() {
        let v = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(relevance(&v, &v).unwrap().data(), &[1.0]);
        let t = Tensor::from_rows(&[[4.0, 3.0]]).unwrap();
        assert!((relevance(&v, &t).unwrap().get(0, 0) - 0.96).abs() < 1e-15);
        let o = Tensor::from_rows(&[[-4.0, 3.0]]).unwrap();
        assert_eq!(relevance(&v, &o).unwrap().data(), &[0.0]);
        assert!(relevance(&v, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn attend_examples() {
        let v = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let u = Tensor::from_rows(&[[0.3, -0.2, 0.9]]).unwrap();
        let a = attend_objects(&u, &v, 9.0).unwrap();
        assert_eq!(a.w.data(), &[1.0, 1.0, 1.0]);
        assert!(a.alpha.zip_map(&v, |x, y| x - y).max_abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random(&mut rng, 4, 3);
        let u = random(&mut rng, 4, 5);
        let a = attend_objects(&u, &v, 0.0).unwrap();
        assert!(a.w.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(a.alpha.zip_map(&v.scale(0.25), |x, y| x - y).max_abs() < 1e-15);

        let v = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let u = Tensor::from_rows(&[[2f64.ln()], [0.0]]).unwrap();
        let a = attend_objects(&u, &v, 1.0).unwrap();
        assert!((a.w.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.w.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.alpha.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.alpha.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!(attend_objects(&u, &v, -1.0).is_err());
    }

    fn attended(alpha: Tensor) -> AttendedImage {
        let n = alpha.rows();
        AttendedImage { alpha, u: Tensor::zeros(&[n, 1]), w: Tensor::zeros(&[n, 1]) }
    }

    #[test]
    fn pair_similarity_examples() {
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!((pair_similarity(&attended(same.clone()), &same).unwrap() - 1.0).abs() < 1e-15);
        let a = Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[[0.0, 1.0], [0.0, -3.0], [0.0, 0.5]]).unwrap();
        assert_eq!(pair_similarity(&attended(a), &t).unwrap(), 0.0);
        let a = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        let t = Tensor::from_rows(&[[4.0, 3.0]]).unwrap();
        assert!((pair_similarity(&attended(a), &t).unwrap() - 0.96).abs() < 1e-15);
    }

    #[test]
    fn score_matrix_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images: Vec<Tensor> = (0..4).map(|i| random(&mut rng, 2 + i, 6)).collect();
        let texts: Vec<Tensor> = (0..5).map(|i| random(&mut rng, 1 + i, 6)).collect();
        let s = score_matrix(&images, &texts, 9.0).unwrap();
        assert_eq!(s.shape(), &[4, 5]);
        for (a, v) in images.iter().enumerate() {
            for (b, t) in texts.iter().enumerate() {
                let u = relevance(v, t).unwrap();
                let att = attend_objects(&u, v, 9.0).unwrap();
                let direct = pair_similarity(&att, t).unwrap();
                assert!((s.get(a, b) - direct).abs() <= 1e-6);

                let mut g = Graph::new();
                let vn = g.constant(v.clone());
                let tn = g.constant(t.clone());
                let nodes = similarity_node(&mut g, vn, tn, 9.0).unwrap();
                assert!((g.scalar(nodes.score) - direct).abs() <= 1e-12);
                assert!(g.value(nodes.u).zip_map(&u, |x, y| x - y).max_abs() <= 1e-12);
            }
        }
        let one = score_matrix(&images[..1], &texts[..1], 9.0).unwrap();
        assert_eq!(one.get(0, 0), s.get(0, 0));

        let same = vec![images[0].clone(); 3];
        let s = score_matrix(&same, &texts, 9.0).unwrap();
        assert_eq!(s.row(0), s.row(1));
        assert_eq!(s.row(1), s.row(2));
    }

    #[test]
    fn score_matrix_truth_sets() {
        let s = ScoreMatrix::new(Tensor::zeros(&[2, 3]), vec![0, 0, 1]).unwrap();
        assert_eq!(s.image_truth(), vec![vec![0, 1], vec![2]]);
        assert_eq!(s.caption_truth(), vec![vec![0], vec![0], vec![1]]);
        assert!(ScoreMatrix::new(Tensor::zeros(&[2, 3]), vec![0, 2, 1]).is_err());
    }

    #[test]
    fn similarity_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let v = store.insert("v", random(&mut rng, 4, 5)).unwrap();
        let t = store.insert("t", random(&mut rng, 3, 5)).unwrap();
        let report = grad_check(
            &mut store,
            |p, g| {
                let vn = g.param(p, v);
                let tn = g.param(p, t);
                Ok(similarity_node(g, vn, tn, 9.0)?.score)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    mod props {
        use super::super::{attend_objects, pair_similarity, similarity};
        use super::random;
        use crate::numerics::Tensor;
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
            let rows: Vec<&[f64]> = order.iter().map(|&i| t.row(i)).collect();
            Tensor::from_rows(&rows).unwrap()
        }

        proptest! {
            #[test]
            fn score_bounded_scale_and_order_free(
                seed in any::<u64>(),
                n in 1usize..6,
                m in 1usize..6,
                c in 0.01f64..100.0,
                shuffle in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = random(&mut rng, n, 4);
                let t = random(&mut rng, m, 4);
                let (att, s) = similarity(&v, &t, 9.0).unwrap();
                prop_assert!((-1.0..=1.0).contains(&s));
                prop_assert!(att.u.data().iter().all(|x| (-1.0..=1.0).contains(x)));

                let mut scaled = att.clone();
                scaled.alpha = att.alpha.scale(c);
                prop_assert!((pair_similarity(&scaled, &t).unwrap() - s).abs() <= 1e-12);

                let mut prng = ChaCha8Rng::seed_from_u64(shuffle);
                let mut on: Vec<usize> = (0..n).collect();
                let mut om: Vec<usize> = (0..m).collect();
                rand::seq::SliceRandom::shuffle(&mut on[..], &mut prng);
                rand::seq::SliceRandom::shuffle(&mut om[..], &mut prng);
                let (_, sp) = similarity(&permute_rows(&v, &on), &permute_rows(&t, &om), 9.0).unwrap();
                prop_assert!((sp - s).abs() <= 1e-9);

                let w_cols = attend_objects(&att.u, &v, 3.0).unwrap().w;
                for j in 0..m {
                    let col: f64 = (0..n).map(|i| w_cols.get(i, j)).sum();
                    prop_assert!((col - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}

//! Position-aware intra-image relation: semantic dot-product weights fused
//! with the spatial kernel prior, aggregated over heads with a residual.

use rand::Rng;

use crate::config::{ScaleDim, TrainConfig};
use crate::error::{Error, Result};
use crate::heads::{aggregate, scaled_dot, MultiHead};
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};
use crate::spatial::{relative_polar, BoxMatrix, SpatialParams};

/// Detected objects of one image: `N x d_v` features and their boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSet {
    pub features: Tensor,
    pub boxes: BoxMatrix,
}

impl ObjectSet {
    pub fn new(features: Tensor, boxes: BoxMatrix) -> Result<Self> {
        if features.rows() != boxes.len() {
            return Err(Error::shape(
                "object set",
                features.shape(),
                &[boxes.len(), 4],
            ));
        }
        Ok(ObjectSet { features, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Applies the same reordering to features and boxes.
    pub fn permuted(&self, order: &[usize]) -> ObjectSet {
        let rows: Vec<&[f64]> = order.iter().map(|&i| self.features.row(i)).collect();
        ObjectSet {
            features: Tensor::from_rows(&rows).unwrap(),
            boxes: self.boxes.permuted(order),
        }
    }

    pub fn with_boxes(&self, boxes: BoxMatrix) -> Result<ObjectSet> {
        ObjectSet::new(self.features.clone(), boxes)
    }
}

#[derive(Clone, Debug)]
pub struct VisualRelationParams {
    pub heads: MultiHead,
    /// Present only when the position branch is enabled.
    pub spatial: Option<SpatialParams>,
    pub d_v: usize,
    pub d_model: usize,
    pub d_scale: usize,
}

/// Graph handles produced by [`VisualRelationParams::encode`].
#[derive(Clone, Debug)]
pub struct ImageNodes {
    pub v_r: NodeId,
    pub omega_i: Vec<NodeId>,
    pub omega_p: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub v_r: Tensor,
    pub omega_i: Vec<Tensor>,
    pub omega_p: Vec<Tensor>,
}

/// `omega_s = V_h V_h^T / sqrt(d_scale)`, unnormalized.
pub fn semantic_weights(vh: &Tensor, d_scale: usize) -> Tensor {
    let s = vh.matmul_t(vh).expect("square product");
    s.scale(1.0 / (d_scale as f64).sqrt())
}

/// `omega_p * exp(omega_s)`, normalized over each row.
pub fn fuse_weights(omega_p: &Tensor, omega_s: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(omega_p.clone());
    let s = g.constant(omega_s.clone());
    let out = fuse_node(&mut g, p, s)?;
    Ok(g.value(out).clone())
}

/// Evaluated as `softmax_rows(omega_s + ln omega_p)`, which carries the
/// per-row max shift for free. Requires `omega_p > 0`.
pub(crate) fn fuse_node(g: &mut Graph, omega_p: NodeId, omega_s: NodeId) -> Result<NodeId> {
    let log_p = g.ln(omega_p);
    let logits = g.add(omega_s, log_p)?;
    Ok(g.softmax_rows(logits))
}

impl VisualRelationParams {
    pub fn init(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let heads = MultiHead::init(store, "image", cfg.heads, cfg.d_v, cfg.d_head(), rng)?;
        let spatial = if cfg.position_enabled {
            Some(SpatialParams::init(store, "spatial", cfg.d_p, cfg.heads, rng)?)
        } else {
            None
        };
        let d_scale = match cfg.scale_dim {
            ScaleDim::Head => cfg.d_head(),
            ScaleDim::Input => cfg.d_v,
        };
        Ok(VisualRelationParams {
            heads,
            spatial,
            d_v: cfg.d_v,
            d_model: cfg.d_model,
            d_scale,
        })
    }

    pub fn position_enabled(&self) -> bool {
        self.spatial.is_some()
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, objects: &ObjectSet) -> Result<ImageNodes> {
        if objects.is_empty() {
            return Err(Error::invalid("image without objects"));
        }
        if objects.dim() != self.d_v {
            return Err(Error::shape(
                "encode_image",
                objects.features.shape(),
                &[objects.len(), self.d_v],
            ));
        }
        let v = g.constant(objects.features.clone());
        let projected = self.heads.project(g, store, v)?;
        let omega_p = match &self.spatial {
            Some(sp) => sp.weights(g, store, &relative_polar(&objects.boxes))?,
            None => Vec::new(),
        };
        let mut omega_i = Vec::with_capacity(projected.len());
        for (k, &vh) in projected.iter().enumerate() {
            let omega_s = scaled_dot(g, vh, self.d_scale)?;
            let w = match omega_p.get(k) {
                Some(&p) => fuse_node(g, p, omega_s)?,
                None => g.softmax_rows(omega_s),
            };
            omega_i.push(w);
        }
        let v_r = aggregate(g, &projected, &omega_i)?;
        Ok(ImageNodes {
            v_r,
            omega_i,
            omega_p,
        })
    }

    pub fn encode_image(&self, store: &ParamStore, objects: &ObjectSet) -> Result<EncodedImage> {
        let mut g = Graph::new();
        let nodes = self.encode(&mut g, store, objects)?;
        Ok(EncodedImage {
            v_r: g.value(nodes.v_r).clone(),
            omega_i: nodes.omega_i.iter().map(|&n| g.value(n).clone()).collect(),
            omega_p: nodes.omega_p.iter().map(|&n| g.value(n).clone()).collect(),
        })
    }

    /// Concatenated per-head projections `F(V)`, the residual branch.
    pub fn project_all(&self, store: &ParamStore, objects: &ObjectSet) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(objects.features.clone());
        let heads = self.heads.project(&mut g, store, v)?;
        let cat = g.concat_cols(&heads)?;
        Ok(g.value(cat).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, softmax_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(position: bool) -> TrainConfig {
        TrainConfig {
            d_v: 6,
            d_model: 12,
            heads: 3,
            d_p: 8,
            position_enabled: position,
            ..TrainConfig::default()
        }
    }

    fn random_objects(rng: &mut ChaCha8Rng, n: usize, d_v: usize) -> ObjectSet {
        let features = Tensor::matrix(n, d_v, (0..n * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let boxes = BoxMatrix::new(
            (0..n)
                .map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), 0.1, 0.2])
                .collect(),
        )
        .unwrap();
        ObjectSet::new(features, boxes).unwrap()
    }

    fn setup(position: bool, seed: u64) -> (ParamStore, VisualRelationParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = VisualRelationParams::init(&mut store, &small_config(position), &mut rng).unwrap();
        (store, params, rng)
    }

    fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.zip_map(b, |x, y| x - y).max_abs() / a.max_abs().max(1e-300)
    }

    #[test]
    fn semantic_weight_examples() {
        let vh = Tensor::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let s = semantic_weights(&vh, 2);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);

        let vh = Tensor::from_rows(&[[2.0, 0.0], [2.0, 0.0]]).unwrap();
        let s = semantic_weights(&vh, 2);
        for v in s.data() {
            assert!((v - 2.8284271247461903).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vh = random_objects(&mut rng, 5, 4).features;
        let s = semantic_weights(&vh, 4);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn fuse_weight_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_objects(&mut rng, 4, 4).features.matmul_t(&Tensor::filled(&[4, 4], 0.7)).unwrap();
        let uniform = Tensor::filled(&[4, 4], 0.25);
        let fused = fuse_weights(&uniform, &s).unwrap();
        assert!(rel_diff(&fused, &softmax_rows(&s).unwrap()) <= 1e-12);

        let p = Tensor::from_rows(&[[0.8, 0.2], [0.5, 0.5]]).unwrap();
        let fused = fuse_weights(&p, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(rel_diff(&fused, &p) <= 1e-15);

        let fused = fuse_weights(
            &Tensor::from_rows(&[[0.5, 0.5]]).unwrap(),
            &Tensor::from_rows(&[[2f64.ln(), 0.0]]).unwrap(),
        )
        .unwrap();
        assert!((fused.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((fused.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_object_doubles_projection() {
        let (store, params, mut rng) = setup(true, 3);
        let objects = random_objects(&mut rng, 1, 6);
        let enc = params.encode_image(&store, &objects).unwrap();
        for w in &enc.omega_i {
            assert_eq!(w.data(), &[1.0]);
        }
        let f = params.project_all(&store, &objects).unwrap();
        assert!(rel_diff(&enc.v_r, &f.scale(2.0)) <= 1e-15);
    }

    #[test]
    fn disabled_position_ignores_boxes() {
        let (store, params, mut rng) = setup(false, 4);
        let objects = random_objects(&mut rng, 4, 6);
        let moved = objects.with_boxes(random_objects(&mut rng, 4, 6).boxes).unwrap();
        let a = params.encode_image(&store, &objects).unwrap();
        let b = params.encode_image(&store, &moved).unwrap();
        assert_eq!(a.v_r, b.v_r);
        assert!(a.omega_p.is_empty());
    }

    #[test]
    fn identical_features_distinct_positions_differ() {
        let (store, params, mut rng) = setup(true, 5);
        let features = random_objects(&mut rng, 2, 6).features;
        let left_right = BoxMatrix::new(vec![[0.1, 0.5, 0.1, 0.1], [0.7, 0.5, 0.1, 0.1]]).unwrap();
        let right_left = BoxMatrix::new(vec![[0.7, 0.5, 0.1, 0.1], [0.1, 0.5, 0.1, 0.1]]).unwrap();
        let a = params.encode_image(&store, &ObjectSet::new(features.clone(), left_right).unwrap()).unwrap();
        let b = params.encode_image(&store, &ObjectSet::new(features, right_left).unwrap()).unwrap();
        assert!(rel_diff(&a.omega_p[0], &b.omega_p[0]) > 1e-6);
        assert!(rel_diff(&a.v_r, &b.v_r) > 1e-6);
    }

    #[test]
    fn identical_rows_in_one_scene_stay_identical() {
        // any row-stochastic mix of equal rows is that row
        let (store, params, mut rng) = setup(true, 5);
        let feature: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::from_rows(&[feature.clone(), feature.clone(), feature]).unwrap();
        let boxes = BoxMatrix::new(vec![
            [0.1, 0.5, 0.1, 0.1],
            [0.2, 0.5, 0.1, 0.1],
            [0.9, 0.5, 0.1, 0.1],
        ])
        .unwrap();
        let enc = params.encode_image(&store, &ObjectSet::new(features, boxes).unwrap()).unwrap();
        let r0 = Tensor::row_vector(enc.v_r.row(0));
        let r2 = Tensor::row_vector(enc.v_r.row(2));
        assert!(rel_diff(&r0, &r2) < 1e-12);
    }

    #[test]
    fn rows_stochastic_and_permutation_equivariant() {
        let (store, params, mut rng) = setup(true, 6);
        let objects = random_objects(&mut rng, 5, 6);
        let order = [3, 0, 4, 1, 2];
        let a = params.encode_image(&store, &objects).unwrap();
        let b = params.encode_image(&store, &objects.permuted(&order)).unwrap();
        for w in a.omega_i.iter().chain(&a.omega_p) {
            for r in 0..5 {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let rows: Vec<&[f64]> = order.iter().map(|&i| a.v_r.row(i)).collect();
        let expected = Tensor::from_rows(&rows).unwrap();
        assert!(rel_diff(&expected, &b.v_r) <= 1e-9);
    }

    #[test]
    fn wrong_feature_dim_is_error() {
        let (store, params, mut rng) = setup(true, 7);
        let objects = random_objects(&mut rng, 3, 5);
        assert!(params.encode_image(&store, &objects).is_err());
    }

    #[test]
    fn gradients_pass_check() {
        for position in [true, false] {
            let (mut store, params, mut rng) = setup(position, 8);
            let objects = random_objects(&mut rng, 4, 6);
            let probe = Tensor::matrix(4, 12, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let report = grad_check(
                &mut store,
                |p, g| {
                    let nodes = params.encode(g, p, &objects)?;
                    let c = g.constant(probe.clone());
                    let y = g.mul(nodes.v_r, c)?;
                    Ok(g.sum_all(y))
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{report:#?}");
        }
    }
}

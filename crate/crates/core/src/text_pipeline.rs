//! Caption side: vocabulary, word embeddings, a bidirectional GRU and the
//! multi-head textual self-relation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::{ScaleDim, TrainConfig};
use crate::error::{Error, Result};
use crate::heads::{aggregate, scaled_dot, MultiHead};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Token strings to dense ids. Ids 0 and 1 are padding and unknown; the
/// vocabulary file lists the remaining tokens one per line starting at id 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (i, t) in RESERVED.iter().enumerate() {
            vocab.index.insert(t.to_string(), i as u32);
        }
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {t:?}")));
            }
            if vocab.index.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.index.insert(t.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let text = text.strip_suffix('\n').unwrap_or(text);
        if text.is_empty() {
            return Vocabulary::from_tokens(Vec::<String>::new());
        }
        Vocabulary::from_tokens(text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::parse(&fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unseen words map to the unknown id.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }
}

/// Gate weights of one GRU direction: input maps `d_e -> d_t`, recurrent
/// maps `d_t -> d_t`, one bias row per gate.
#[derive(Clone, Debug)]
pub struct GruDirection {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruDirection {
    fn init(store: &mut ParamStore, prefix: &str, d_e: usize, d_t: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (d_t as f64).sqrt();
        let mut mat = |name: &str, r: usize, c: usize, store: &mut ParamStore| {
            let v = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(format!("{prefix}.{name}"), Tensor::matrix(r, c, v))
        };
        Ok(GruDirection {
            w_update: mat("w_update", d_e, d_t, store)?,
            u_update: mat("u_update", d_t, d_t, store)?,
            b_update: mat("b_update", 1, d_t, store)?,
            w_reset: mat("w_reset", d_e, d_t, store)?,
            u_reset: mat("u_reset", d_t, d_t, store)?,
            b_reset: mat("b_reset", 1, d_t, store)?,
            w_cand: mat("w_cand", d_e, d_t, store)?,
            u_cand: mat("u_cand", d_t, d_t, store)?,
            b_cand: mat("b_cand", 1, d_t, store)?,
        })
    }

    /// Hidden states for every step, in input order when `reverse` is false
    /// and aligned back to input order when it is true.
    fn run(&self, g: &mut Graph, store: &ParamStore, x: NodeId, reverse: bool) -> Result<NodeId> {
        let steps = g.value(x).rows();
        let p = |g: &mut Graph, id| g.param(store, id);
        let (wz, uz, bz) = (p(g, self.w_update), p(g, self.u_update), p(g, self.b_update));
        let (wr, ur, br) = (p(g, self.w_reset), p(g, self.u_reset), p(g, self.b_reset));
        let (wh, uh, bh) = (p(g, self.w_cand), p(g, self.u_cand), p(g, self.b_cand));
        let d_t = g.value(uz).rows();

        let xz = g.matmul(x, wz)?;
        let xz = g.add_row(xz, bz)?;
        let xr = g.matmul(x, wr)?;
        let xr = g.add_row(xr, br)?;
        let xh = g.matmul(x, wh)?;
        let xh = g.add_row(xh, bh)?;

        let mut h = g.constant(Tensor::zeros(&[1, d_t]));
        let mut states = vec![h; steps];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let xz_t = g.slice_rows(xz, t, 1);
            let xr_t = g.slice_rows(xr, t, 1);
            let xh_t = g.slice_rows(xh, t, 1);

            let hz = g.matmul(h, uz)?;
            let z = g.add(xz_t, hz)?;
            let z = g.sigmoid(z);
            let hr = g.matmul(h, ur)?;
            let r = g.add(xr_t, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, h)?;
            let rh = g.matmul(rh, uh)?;
            let cand = g.add(xh_t, rh)?;
            let cand = g.tanh(cand);
            // h_t = (1 - z) h_{t-1} + z cand = h_{t-1} + z (cand - h_{t-1})
            let delta = g.sub(cand, h)?;
            let delta = g.mul(z, delta)?;
            h = g.add(h, delta)?;
            states[t] = h;
        }
        g.concat_rows(&states)
    }
}

#[derive(Clone, Debug)]
pub struct TextParams {
    pub embedding: ParamId,
    pub forward: GruDirection,
    pub backward: GruDirection,
    pub heads: MultiHead,
    pub d_e: usize,
    pub d_t: usize,
    pub d_scale: usize,
}

/// Graph handles produced by [`TextParams::encode`].
#[derive(Clone, Debug)]
pub struct TextNodes {
    pub t_r: NodeId,
    pub omega_t: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    pub t_r: Tensor,
    pub omega_t: Vec<Tensor>,
}

impl TextParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: &TrainConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if vocab_size < RESERVED.len() {
            return Err(Error::Config(format!("vocabulary size {vocab_size} too small")));
        }
        // unit variance per entry
        let bound = 3f64.sqrt();
        let table = (0..vocab_size * cfg.d_e)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let embedding = store.insert("text.embedding", Tensor::matrix(vocab_size, cfg.d_e, table))?;
        let forward = GruDirection::init(store, "text.gru.fwd", cfg.d_e, cfg.d_t, rng)?;
        let backward = GruDirection::init(store, "text.gru.bwd", cfg.d_e, cfg.d_t, rng)?;
        let heads = MultiHead::init(store, "text", cfg.heads, cfg.d_t, cfg.d_head(), rng)?;
        let d_scale = match cfg.scale_dim {
            ScaleDim::Head => cfg.d_head(),
            ScaleDim::Input => cfg.d_t,
        };
        Ok(TextParams {
            embedding,
            forward,
            backward,
            heads,
            d_e: cfg.d_e,
            d_t: cfg.d_t,
            d_scale,
        })
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.value(self.embedding).rows()
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<NodeId> {
        let table = g.param(store, self.embedding);
        let rows = g.value(table).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {rows}"
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather_rows(table, &idx)
    }

    /// Average of forward and backward hidden states, `M x d_t`.
    pub fn bigru_node(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if g.value(x).rows() == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        let fwd = self.forward.run(g, store, x, false)?;
        let bwd = self.backward.run(g, store, x, true)?;
        let sum = g.add(fwd, bwd)?;
        Ok(g.scale(sum, 0.5))
    }

    /// Encodes a caption. Padding ids are dropped before encoding, which
    /// masks them out of the recurrence, the relation weights and pooling.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<TextNodes> {
        let ids: Vec<u32> = ids.iter().copied().filter(|&i| i != PAD_ID).collect();
        if ids.is_empty() {
            return Err(Error::invalid("caption has no non-padding tokens"));
        }
        let x = self.embed(g, store, &ids)?;
        let t = self.bigru_node(g, store, x)?;
        let projected = self.heads.project(g, store, t)?;
        let omega_t = projected
            .iter()
            .map(|&th| {
                let s = scaled_dot(g, th, self.d_scale)?;
                Ok(g.softmax_rows(s))
            })
            .collect::<Result<Vec<_>>>()?;
        let t_r = aggregate(g, &projected, &omega_t)?;
        Ok(TextNodes { t_r, omega_t })
    }

    pub fn encode_text(&self, store: &ParamStore, ids: &[u32]) -> Result<EncodedText> {
        let mut g = Graph::new();
        let nodes = self.encode(&mut g, store, ids)?;
        Ok(EncodedText {
            t_r: g.value(nodes.t_r).clone(),
            omega_t: nodes.omega_t.iter().map(|&n| g.value(n).clone()).collect(),
        })
    }

    pub fn embed_tokens(&self, store: &ParamStore, ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = self.embed(&mut g, store, ids)?;
        Ok(g.value(e).clone())
    }

    pub fn bigru(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d_e {
            return Err(Error::shape("bigru", x.shape(), &[x.rows(), self.d_e]));
        }
        let mut g = Graph::new();
        let x = g.constant(x.clone());
        let out = self.bigru_node(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }

    /// Concatenated per-head projections `G(T)` of the contextual word matrix.
    pub fn project_all(&self, store: &ParamStore, t: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.constant(t.clone());
        let heads = self.heads.project(&mut g, store, t)?;
        let cat = g.concat_cols(&heads)?;
        Ok(g.value(cat).clone())
    }
}

/// `softmax_rows(T_h T_h^T / sqrt(d_scale))`.
pub fn text_weights(th: &Tensor, d_scale: usize) -> Tensor {
    th.matmul_t(th)
        .expect("square product")
        .scale(1.0 / (d_scale as f64).sqrt())
        .softmax_rows()
}

/// [`text_weights`] with masked key columns receiving weight 0.
pub fn text_weights_masked(th: &Tensor, d_scale: usize, keep: &[bool]) -> Result<Tensor> {
    if keep.len() != th.rows() {
        return Err(Error::shape("text_weights_masked", th.shape(), &[keep.len()]));
    }
    if !keep.iter().any(|&k| k) {
        return Err(Error::invalid("mask removes every token"));
    }
    let mut s = th.matmul_t(th)?.scale(1.0 / (d_scale as f64).sqrt());
    let m = th.rows();
    for i in 0..m {
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                s.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    Ok(s.softmax_rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> TrainConfig {
        TrainConfig {
            d_e: 5,
            d_t: 6,
            d_model: 12,
            heads: 3,
            ..TrainConfig::default()
        }
    }

    fn setup(seed: u64) -> (ParamStore, TextParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = TextParams::init(&mut store, &small_config(), 10, &mut rng).unwrap();
        (store, params)
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.zip_map(b, |x, y| x - y).max_abs()
    }

    #[test]
    fn vocabulary_file_layout() {
        let v = Vocabulary::parse("a\ndog\nleft\n").unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("left"), 4);
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.encode("a dog  left cat"), vec![2, 3, 4, UNK_ID]);
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::parse("a\na\n").is_err());
        assert!(Vocabulary::parse("a\n\nb\n").is_err());
        assert_eq!(Vocabulary::parse("").unwrap().len(), 2);
    }

    #[test]
    fn embed_examples() {
        let (store, params) = setup(1);
        let e = params.embed_tokens(&store, &[7]).unwrap();
        assert_eq!(e.data(), store.value(params.embedding).row(7));
        assert_eq!(params.embed_tokens(&store, &[2, 3, 4, 5]).unwrap().shape(), &[4, 5]);
        assert!(params.embed_tokens(&store, &[10]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let (mut store, params) = setup(2);
        for (name, p) in store.iter_mut() {
            if name.starts_with("text.gru") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = params.embed_tokens(&store, &[2, 3, 4]).unwrap();
        let h = params.bigru(&store, &x).unwrap();
        assert_eq!(h, Tensor::zeros(&[3, 6]));
    }

    #[test]
    fn bigru_shape_order_and_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = TrainConfig {
            d_e: 8,
            d_t: 16,
            ..small_config()
        };
        let params = TextParams::init(&mut store, &cfg, 10, &mut rng).unwrap();
        let ids = [2, 5, 7, 3];
        let h = params.bigru(&store, &params.embed_tokens(&store, &ids).unwrap()).unwrap();
        assert_eq!(h.shape(), &[4, 16]);

        let rev: Vec<u32> = ids.iter().rev().copied().collect();
        let hr = params.bigru(&store, &params.embed_tokens(&store, &rev).unwrap()).unwrap();
        assert!(max_diff(&h, &hr) > 0.0);

        // the last token reaches the first position through the backward pass
        let changed = [2, 5, 7, 9];
        let hc = params.bigru(&store, &params.embed_tokens(&store, &changed).unwrap()).unwrap();
        let d0 = max_diff(&Tensor::row_vector(h.row(0)), &Tensor::row_vector(hc.row(0)));
        assert!(d0 > 1e-9, "row 0 unchanged");
    }

    #[test]
    fn text_weight_examples() {
        let one = Tensor::from_rows(&[[0.3, -1.0]]).unwrap();
        assert_eq!(text_weights(&one, 2).data(), &[1.0]);

        let same = Tensor::from_rows(&[[0.3, 1.0], [0.3, 1.0], [0.3, 1.0]]).unwrap();
        for v in text_weights(&same, 2).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let basis = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let w = text_weights(&basis, 2);
        assert!((w.get(0, 0) - 0.6697615493266569).abs() < 1e-12);
        assert!((w.get(0, 1) - 0.3302384506733431).abs() < 1e-12);
    }

    #[test]
    fn masked_weights_zero_padding_columns() {
        let th = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap();
        let w = text_weights_masked(&th, 2, &[true, true, false]).unwrap();
        let unmasked = text_weights(&th.slice_rows(0, 2), 2);
        for r in 0..3 {
            assert_eq!(w.get(r, 2), 0.0);
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((w.get(0, 0) - unmasked.get(0, 0)).abs() < 1e-15);
        assert!(text_weights_masked(&th, 2, &[false; 3]).is_err());
    }

    #[test]
    fn encode_text_examples() {
        let (store, params) = setup(4);
        let one = params.encode_text(&store, &[6]).unwrap();
        let t = params.bigru(&store, &params.embed_tokens(&store, &[6]).unwrap()).unwrap();
        let gt = params.project_all(&store, &t).unwrap();
        assert!(max_diff(&one.t_r, &gt.scale(2.0)) <= 1e-15);

        let a = params.encode_text(&store, &[2, 3, 4, 5, 6]).unwrap();
        assert_eq!(a.t_r.shape(), &[5, 12]);
        for w in &a.omega_t {
            for r in 0..5 {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let b = params.encode_text(&store, &[3, 2, 4, 5, 6]).unwrap();
        assert!(max_diff(&a.t_r, &b.t_r) > 1e-9);

        let padded = params.encode_text(&store, &[2, 3, 4, 5, 6, PAD_ID, PAD_ID]).unwrap();
        assert_eq!(padded, a);
        assert!(params.encode_text(&store, &[PAD_ID]).is_err());
    }

    #[test]
    fn gradients_pass_check() {
        let (mut store, params) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let probe = Tensor::matrix(4, 12, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ids = [2, 9, 4, 2];
        let report = grad_check(
            &mut store,
            |p, g| {
                let nodes = params.encode(g, p, &ids)?;
                let c = g.constant(probe.clone());
                let y = g.mul(nodes.t_r, c)?;
                Ok(g.sum_all(y))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }
}

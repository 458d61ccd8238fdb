//! Hard-negative ranking loss, Adam updates and the epoch loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{AdamState, Checkpoint};
use crate::config::{Precision, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::ParNet;
use crate::numerics::{grad_check, GradCheckReport, Graph, NodeId, ParamStore, Tensor};
use crate::visual_relation::ObjectSet;

/// Stream of the shuffling generator; parameter init uses stream 0.
const SHUFFLE_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

/// Whether entry `(a, b)` may serve as a negative for row/column `a`.
fn is_negative(a: usize, b: usize, groups: Option<&[usize]>) -> bool {
    a != b && groups.map_or(true, |g| g[a] != g[b])
}

/// Hardest text negative of row `a` and hardest image negative of column
/// `a`; ties go to the lowest index.
fn hardest(s: &Tensor, a: usize, groups: Option<&[usize]>) -> (Option<usize>, Option<usize>) {
    let b = s.rows();
    let pick = |score: &dyn Fn(usize) -> f64| {
        let mut best: Option<usize> = None;
        for c in (0..b).filter(|&c| is_negative(a, c, groups)) {
            if best.map_or(true, |o| score(c) > score(o)) {
                best = Some(c);
            }
        }
        best
    };
    (pick(&|c| s.get(a, c)), pick(&|c| s.get(c, a)))
}

fn check_square(s: &Tensor, groups: Option<&[usize]>) -> Result<()> {
    if s.rows() != s.cols() || s.shape().len() != 2 {
        return Err(Error::shape("triplet_loss", s.shape(), &[s.rows(), s.rows()]));
    }
    if s.rows() < 2 {
        return Err(Error::invalid("triplet loss needs a batch of at least 2"));
    }
    if let Some(g) = groups {
        if g.len() != s.rows() {
            return Err(Error::shape("triplet_loss groups", s.shape(), &[g.len()]));
        }
    }
    Ok(())
}

/// Mean over positives of the two hinges against the hardest negatives.
/// Pairs sharing a group id (same image) never count as negatives.
pub fn triplet_loss_grouped(s: &Tensor, beta: f64, groups: Option<&[usize]>) -> Result<f64> {
    check_square(s, groups)?;
    let b = s.rows();
    let mut total = 0.0;
    for a in 0..b {
        let pos = s.get(a, a);
        let (t_neg, i_neg) = hardest(s, a, groups);
        if let Some(c) = t_neg {
            total += (beta - pos + s.get(a, c)).max(0.0);
        }
        if let Some(c) = i_neg {
            total += (beta - pos + s.get(c, a)).max(0.0);
        }
    }
    Ok(total / b as f64)
}

/// [`triplet_loss_grouped`] with the diagonal as the only positives.
pub fn triplet_loss(s: &Tensor, beta: f64) -> Result<f64> {
    triplet_loss_grouped(s, beta, None)
}

pub fn triplet_loss_node(g: &mut Graph, s: NodeId, beta: f64, groups: Option<&[usize]>) -> Result<NodeId> {
    let values = g.value(s).clone();
    check_square(&values, groups)?;
    let b = values.rows();
    let mut hinges = Vec::new();
    for a in 0..b {
        let pos = g.element(s, a, a);
        let (t_neg, i_neg) = hardest(&values, a, groups);
        for (r, c) in [t_neg.map(|c| (a, c)), i_neg.map(|c| (c, a))].into_iter().flatten() {
            let neg = g.element(s, r, c);
            let diff = g.sub(neg, pos)?;
            let h = g.add_scalar(diff, beta);
            hinges.push(g.relu(h));
        }
    }
    if hinges.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = hinges.len();
    let stacked = g.stack(&hinges, 1, n)?;
    let sum = g.sum_all(stacked);
    Ok(g.scale(sum, 1.0 / b as f64))
}

/// Matched pairs of one mini-batch. `groups[i]` identifies the image of pair
/// `i`, so captions of the same image are not used as each other's negatives.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub images: Vec<&'a ObjectSet>,
    pub captions: Vec<&'a [u32]>,
    pub groups: Vec<usize>,
}

impl<'a> Batch<'a> {
    /// Pairs of the given caption rows of a dataset.
    pub fn from_dataset(data: &'a Dataset, caption_rows: &[usize]) -> Self {
        let owners = data.caption_owners();
        Batch {
            images: caption_rows.iter().map(|&c| &data.images()[owners[c]].objects).collect(),
            captions: caption_rows.iter().map(|&c| data.captions[c].tokens.as_slice()).collect(),
            groups: caption_rows.iter().map(|&c| owners[c]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loss node of a batch: score matrix, then the grouped triplet loss.
pub fn batch_loss(model: &ParNet, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<NodeId> {
    let s = model.batch_scores(g, store, &batch.images, &batch.captions)?;
    triplet_loss_node(g, s, model.config.margin, Some(&batch.groups))
}

fn round_all(t: &mut [Tensor]) {
    t.iter_mut().for_each(Tensor::round_to_f32);
}

/// One Adam update from the gradients held in `store`, with global norm
/// clipping. Returns the pre-clip gradient norm.
pub fn adam_update(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> f64 {
    let norm = store.grad_norm();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.data();
        for (k, x) in p.value.data_mut().iter_mut().enumerate() {
            let gk = grad[k] * clip;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model, parameters, optimizer state and data cursor of a training run.
pub struct Trainer {
    pub model: ParNet,
    pub store: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub best_score: Option<f64>,
    rng: ChaCha8Rng,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

impl Trainer {
    pub fn new(config: &TrainConfig, vocab_size: usize) -> Result<Trainer> {
        let (model, store) = ParNet::init(config, vocab_size)?;
        let adam = AdamState::new(&store);
        Ok(Trainer {
            rng: shuffle_rng(config.seed),
            model,
            store,
            adam,
            epoch: 0,
            step: 0,
            best_score: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        let (model, store) = ck.model()?;
        let mut rng = shuffle_rng(ck.config.seed);
        rng.set_word_pos(ck.rng_word_pos);
        Ok(Trainer {
            model,
            store,
            adam: ck.adam.clone(),
            epoch: ck.epoch,
            step: ck.step,
            best_score: ck.best_score,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_word_pos: self.rng.get_word_pos(),
            best_score: self.best_score,
            params: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Loss of a batch at the current parameters, without updating.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let loss = batch_loss(&self.model, &mut g, &self.store, batch)?;
        Ok(g.scalar(loss))
    }

    /// Forward, backward, clipped Adam update, constraint projection and,
    /// at 32-bit precision, rounding of all state through `f32`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        self.store.zero_grad();
        let mut g = Graph::new();
        let loss_node = batch_loss(&self.model, &mut g, &self.store, batch)?;
        let loss = g.scalar(loss_node);
        if !loss.is_finite() {
            let culprit = self
                .store
                .iter()
                .find(|(_, p)| !p.value.is_finite())
                .map_or("none of the parameters".to_string(), |(n, _)| format!("parameter {n}"));
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {}; non-finite values in {culprit}",
                self.step
            )));
        }
        g.backward(loss_node, &mut self.store);
        if let Some(name) = self.store.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", self.step)));
        }
        let grad_norm = adam_update(&mut self.store, &mut self.adam, &self.model.config);
        self.model.project(&mut self.store);
        if self.model.config.precision == Precision::F32 {
            for (_, p) in self.store.iter_mut() {
                p.value.round_to_f32();
            }
            round_all(&mut self.adam.m);
            round_all(&mut self.adam.v);
        }
        if let Some(name) = self.store.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter {name} after step {}", self.step)));
        }
        self.step += 1;
        Ok(StepReport { loss, grad_norm })
    }

    /// Shuffled caption rows split into batches; a trailing batch of a
    /// single pair is dropped since it has no negative.
    pub fn epoch_batches(&mut self, data: &Dataset) -> Vec<Vec<usize>> {
        let mut rows: Vec<usize> = (0..data.captions.len()).collect();
        rows.shuffle(&mut self.rng);
        rows.chunks(self.model.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn steps_left(&self) -> bool {
        self.model.config.max_steps.map_or(true, |m| self.step < m as u64)
    }

    /// Runs one epoch, stopping early at `max_steps`. Returns the mean loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<Option<f64>> {
        let mut losses = Vec::new();
        for rows in self.epoch_batches(data) {
            if !self.steps_left() {
                break;
            }
            let batch = Batch::from_dataset(data, &rows);
            let r = self.train_step(&batch)?;
            debug!("step {} loss {:.6} grad norm {:.4}", self.step, r.loss, r.grad_norm);
            losses.push(r.loss);
        }
        self.epoch += 1;
        Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
    }

    /// Mean of the image-to-text and text-to-image R@1.
    pub fn validation_score(&self, data: &Dataset) -> Result<f64> {
        let [i2t, t2i] = evaluate(&self.model, &self.store, data, &[1])?;
        Ok((i2t.recalls[0].percent + t2i.recalls[0].percent) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: Option<f64>,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validation checkpoint, or the last one without validation.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochSummary>,
}

/// Deterministic split of image rows into training and validation sets.
pub fn split_dataset(config: &TrainConfig, data: &Dataset) -> Result<(Dataset, Option<Dataset>)> {
    if config.val_fraction <= 0.0 {
        return Ok((data.clone(), None));
    }
    let n = data.images().len();
    let held = ((n as f64 * config.val_fraction).ceil() as usize).clamp(1, n.saturating_sub(2));
    if n < 3 {
        return Err(Error::Config("validation split needs at least 3 images".into()));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SPLIT_STREAM);
    rows.shuffle(&mut rng);
    let (val, train) = rows.split_at(held);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train)?, Some(data.subset(&val)?)))
}

/// Trains from a fresh initialization.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let vocab = if config.vocab_size == 0 { data.min_vocab_size() } else { config.vocab_size };
    let trainer = Trainer::new(config, vocab)?;
    continue_training(trainer, data)
}

/// Runs the remaining epochs of `trainer.model.config.epochs`.
pub fn continue_training(mut trainer: Trainer, data: &Dataset) -> Result<TrainOutcome> {
    let config = trainer.model.config.clone();
    if config.d_v != data.features.d_v {
        return Err(Error::Config(format!(
            "dataset d_v {} does not match configured d_v {}",
            data.features.d_v, config.d_v
        )));
    }
    data.check_vocab(trainer.model.vocab_size)?;
    let (train_set, val_set) = split_dataset(&config, data)?;
    let val_set = val_set.as_ref().unwrap_or(&train_set);
    let mut best = trainer.checkpoint();
    let mut history = Vec::new();
    while trainer.epoch < config.epochs && trainer.steps_left() {
        let mean_loss = trainer.run_epoch(&train_set)?;
        let validate = config.validate_every > 0
            && (trainer.epoch % config.validate_every == 0
                || trainer.epoch == config.epochs
                || !trainer.steps_left());
        let mut validation = None;
        if validate {
            let score = trainer.validation_score(val_set)?;
            validation = Some(score);
            if trainer.best_score.map_or(true, |b| score > b) {
                trainer.best_score = Some(score);
                best = trainer.checkpoint();
            }
        }
        info!(
            "epoch {} step {} loss {} validation R@1 {}",
            trainer.epoch,
            trainer.step,
            mean_loss.map_or("-".into(), |l| format!("{l:.5}")),
            validation.map_or("-".into(), |v| format!("{v:.2}"))
        );
        history.push(EpochSummary { epoch: trainer.epoch, steps: trainer.step, mean_loss, validation });
    }
    let last = trainer.checkpoint();
    if config.validate_every == 0 {
        best = last.clone();
    }
    Ok(TrainOutcome { best, last, history })
}

/// Shape of the random problem used by [`pipeline_grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeShape {
    pub objects: usize,
    pub words: usize,
    pub batch: usize,
    pub vocab: usize,
}

impl Default for ProbeShape {
    fn default() -> Self {
        ProbeShape { objects: 5, words: 4, batch: 3, vocab: 16 }
    }
}

/// Central-difference check of the batch loss with respect to every model
/// parameter, on random scenes and captions drawn from `config.seed`.
pub fn pipeline_grad_check(
    config: &TrainConfig,
    shape: ProbeShape,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    use crate::spatial::BoxMatrix;
    use rand::Rng;

    let config = TrainConfig { precision: Precision::F64, ..config.clone() };
    let (model, mut store) = ParNet::init(&config, shape.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SPLIT_STREAM + 1);
    let mut images = Vec::with_capacity(shape.batch);
    let mut captions = Vec::with_capacity(shape.batch);
    for _ in 0..shape.batch {
        let n = shape.objects;
        let feats = (0..n * config.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let boxes = (0..n)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)])
            .collect();
        images.push(ObjectSet::new(Tensor::matrix(n, config.d_v, feats), BoxMatrix::new(boxes)?)?);
        captions.push((0..shape.words).map(|_| rng.gen_range(2..shape.vocab as u32)).collect::<Vec<u32>>());
    }
    let batch = Batch {
        images: images.iter().collect(),
        captions: captions.iter().map(Vec::as_slice).collect(),
        groups: (0..shape.batch).collect(),
    };
    grad_check(&mut store, |p, g| batch_loss(&model, g, p, &batch), h, tol)
}

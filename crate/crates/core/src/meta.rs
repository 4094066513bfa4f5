//! Meta-training: each sampled window is adapted IM-style from `theta0`, and
//! the outer loss differentiates through those inner updates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_values, Tape, Var};
use crate::config::{parse_value, KeyValueConfig};
use crate::data::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::model::{self, Dims, FusedInput, MetaParams};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{stream, Stream};
use crate::sampling::{candidate_windows, select_diverse, SelectionMode, WindowFeature};
use crate::tensor::Matrix;
use crate::ttt::{inner_update_with_loss, MetaGradMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the mean self-loss in the window objective.
    pub self_weight: f64,
    pub window_len: usize,
    pub stride: usize,
    pub windows_per_traj: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Longer trajectories are cut to their first `max_len` frames.
    pub max_len: usize,
    pub seed: u64,
    pub meta_grad_mode: MetaGradMode,
    pub selection: SelectionMode,
    pub window_feature: WindowFeature,
    pub inner_lr: f64,
    pub inner_epochs: usize,
    pub adapt_dim: usize,
    pub head_hidden: usize,
    /// CLIP-FT projection width as a multiple of `adapt_dim`.
    pub clipft_dim_factor: usize,
    /// CLIP-FT optimizer steps as a multiple of the meta-training steps.
    pub clipft_step_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            self_weight: 0.5,
            window_len: 8,
            stride: 4,
            windows_per_traj: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            epochs: 5,
            batch_size: 32,
            max_len: 120,
            seed: 0,
            meta_grad_mode: MetaGradMode::Exact,
            selection: SelectionMode::Exact,
            window_feature: WindowFeature::Flat,
            inner_lr: 0.1,
            inner_epochs: 1,
            adapt_dim: 64,
            head_hidden: 64,
            clipft_dim_factor: 8,
            clipft_step_factor: 10,
        }
    }
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<bool> {
        let v = value;
        match key {
            "self_weight" | "lambda" => self.self_weight = parse_value(key, v, line)?,
            "window_len" => self.window_len = parse_value(key, v, line)?,
            "stride" => self.stride = parse_value(key, v, line)?,
            "windows_per_traj" => self.windows_per_traj = parse_value(key, v, line)?,
            "lr" => self.lr = parse_value(key, v, line)?,
            "weight_decay" => self.weight_decay = parse_value(key, v, line)?,
            "warmup_frac" => self.warmup_frac = parse_value(key, v, line)?,
            "epochs" => self.epochs = parse_value(key, v, line)?,
            "batch_size" => self.batch_size = parse_value(key, v, line)?,
            "max_len" => self.max_len = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "meta_grad_mode" => self.meta_grad_mode = parse_value(key, v, line)?,
            "selection" => self.selection = parse_value(key, v, line)?,
            "window_feature" => self.window_feature = parse_value(key, v, line)?,
            "inner_lr" => self.inner_lr = parse_value(key, v, line)?,
            "inner_epochs" => self.inner_epochs = parse_value(key, v, line)?,
            "adapt_dim" => self.adapt_dim = parse_value(key, v, line)?,
            "head_hidden" => self.head_hidden = parse_value(key, v, line)?,
            "clipft_dim_factor" => self.clipft_dim_factor = parse_value(key, v, line)?,
            "clipft_step_factor" => self.clipft_step_factor = parse_value(key, v, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.self_weight >= 0.0 && self.self_weight.is_finite()) {
            return fail("self_weight must be >= 0");
        }
        if self.window_len == 0 || self.stride == 0 || self.windows_per_traj == 0 || self.batch_size == 0 {
            return fail("window_len, stride, windows_per_traj and batch_size must be >= 1");
        }
        if self.max_len == 0 || self.epochs == 0 || self.inner_epochs == 0 {
            return fail("max_len, epochs and inner_epochs must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return fail("learning rates must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return fail("warmup_frac must lie in [0, 1]");
        }
        if self.adapt_dim == 0 || self.head_hidden == 0 || self.clipft_dim_factor == 0 || self.clipft_step_factor == 0 {
            return fail("adapt_dim, head_hidden and the clipft factors must be >= 1");
        }
        Ok(())
    }

    fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        line("self_weight", self.self_weight.to_string());
        line("window_len", self.window_len.to_string());
        line("stride", self.stride.to_string());
        line("windows_per_traj", self.windows_per_traj.to_string());
        line("lr", self.lr.to_string());
        line("weight_decay", self.weight_decay.to_string());
        line("warmup_frac", self.warmup_frac.to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("max_len", self.max_len.to_string());
        line("seed", self.seed.to_string());
        line("meta_grad_mode", self.meta_grad_mode.to_string());
        line("selection", self.selection.to_string());
        line("window_feature", self.window_feature.to_string());
        line("inner_lr", self.inner_lr.to_string());
        line("inner_epochs", self.inner_epochs.to_string());
        line("adapt_dim", self.adapt_dim.to_string());
        line("head_hidden", self.head_hidden.to_string());
        line("clipft_dim_factor", self.clipft_dim_factor.to_string());
        line("clipft_step_factor", self.clipft_step_factor.to_string());
        s
    }
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn dims(&self, encoder: usize) -> Result<Dims> {
        Dims::new(encoder, self.adapt_dim, self.head_hidden)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Scalar objective for one window plus its two components as plain values.
pub struct WindowLoss<'t> {
    pub total: Var<'t>,
    pub pred: f64,
    pub self_loss: f64,
}

/// IM-style pass over `frames` starting at `theta0`: at each frame the
/// self-loss is taken at the current parameters, the parameters are updated
/// on that frame, and the frame is scored with the result.
///
/// Returns `mean pred_loss + self_weight * mean self_loss`.
pub fn window_loss<'t>(
    meta: &MetaParams<Var<'t>>,
    frames: &[Var<'t>],
    labels: &[f64],
    cfg: &TrainConfig,
) -> Result<WindowLoss<'t>> {
    if frames.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if frames.len() != labels.len() {
        return Err(Error::MissingLabels(format!(
            "{} frames but {} labels",
            frames.len(),
            labels.len()
        )));
    }
    let mut theta = meta.theta0.clone();
    let mut pred_sum: Option<Var<'t>> = None;
    let mut self_sum: Option<Var<'t>> = None;
    for (&x, &y) in frames.iter().zip(labels) {
        let (next, ls) = inner_update_with_loss(
            theta,
            std::slice::from_ref(&x),
            cfg.inner_lr,
            cfg.inner_epochs,
            &meta.proj,
            cfg.meta_grad_mode,
        )?;
        theta = next;
        let lp = model::pred_loss(model::predict(x, &theta, &meta.proj, &meta.head), y)?;
        pred_sum = Some(pred_sum.map_or(lp, |a| a + lp));
        self_sum = Some(self_sum.map_or(ls, |a| a + ls));
    }
    let n = frames.len() as f64;
    let pred = pred_sum.expect("non-empty").scale(1.0 / n);
    let self_mean = self_sum.expect("non-empty").scale(1.0 / n);
    let total = pred + self_mean.scale(cfg.self_weight);
    Ok(WindowLoss {
        total,
        pred: pred.item(),
        self_loss: self_mean.item(),
    })
}

/// A labeled trajectory ready for training, possibly padded to a batch length.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    frames: Vec<FusedInput>,
    labels: Vec<f64>,
    mask: Vec<bool>,
}

impl TrainingExample {
    /// Keeps the first `max_len` frames. Labels stay `t / T` of the full trajectory.
    pub fn from_record(record: &TrajectoryRecord, max_len: usize) -> Result<Self> {
        let labels = record
            .labels_f64()
            .map_err(|_| Error::MissingLabels(format!("trajectory {:?} has no progress labels", record.id)))?;
        let keep = record.len().min(max_len);
        let frames = record.fused_inputs()?.into_iter().take(keep).collect();
        Ok(Self {
            id: record.id.clone(),
            frames,
            labels: labels[..keep].to_vec(),
            mask: vec![true; keep],
        })
    }

    /// Extends to `len` frames with masked zero frames.
    pub fn padded(mut self, len: usize) -> Self {
        let dim = self.frames[0].dim();
        while self.frames.len() < len {
            let zero = vec![0.0; dim / 2];
            self.frames.push(model::fuse(&zero, &zero).expect("equal halves"));
            self.labels.push(0.0);
            self.mask.push(false);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of real (unmasked) frames.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn frames(&self) -> &[FusedInput] {
        &self.frames
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Window start offsets chosen for this example.
    pub fn select_windows(&self, cfg: &TrainConfig) -> Result<Vec<(usize, usize)>> {
        let valid: Vec<FusedInput> = self
            .frames
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x.clone())
            .collect();
        let candidates = candidate_windows(&valid, cfg.window_len, cfg.stride, cfg.window_feature)?;
        let feats: Vec<&[f64]> = candidates.iter().map(|w| w.feature.as_slice()).collect();
        let chosen = select_diverse(&feats, cfg.windows_per_traj, cfg.selection);
        Ok(chosen
            .indices
            .iter()
            .map(|&i| (candidates[i].start, candidates[i].len))
            .collect())
    }
}

/// Pads every example to the longest one in the batch.
pub fn pad_batch(batch: Vec<TrainingExample>) -> Vec<TrainingExample> {
    let len = batch.iter().map(TrainingExample::len).max().unwrap_or(0);
    batch.into_iter().map(|e| e.padded(len)).collect()
}

/// Gradient of one window objective with respect to every meta-parameter.
pub struct WindowGrad {
    pub grads: Vec<Matrix>,
    pub total: f64,
    pub pred: f64,
    pub self_loss: f64,
}

/// Window loss and gradient for frames `start..start + len` of `example`;
/// masked frames are dropped.
pub fn window_gradient(
    meta: &MetaParams,
    example: &TrainingExample,
    start: usize,
    len: usize,
    cfg: &TrainConfig,
) -> Result<WindowGrad> {
    let tape = Tape::new();
    let params = meta.lift(&tape);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for t in start..(start + len).min(example.len()) {
        if example.mask[t] {
            xs.push(example.frames[t].lift(&tape));
            ys.push(example.labels[t]);
        }
    }
    let loss = window_loss(&params, &xs, &ys, cfg)?;
    let total = loss.total.item();
    let grads = grad_values(loss.total, &params.to_vec())?;
    Ok(WindowGrad {
        grads,
        total,
        pred: loss.pred,
        self_loss: loss.self_loss,
    })
}

/// Mean window loss and gradient over a batch, reduced in batch order.
pub struct BatchGrad {
    pub grads: Vec<Matrix>,
    pub windows: usize,
    pub total: f64,
    pub pred: f64,
    pub self_loss: f64,
}

pub fn batch_gradient(meta: &MetaParams, batch: &[TrainingExample], cfg: &TrainConfig) -> Result<BatchGrad> {
    let mut jobs = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        for (start, len) in ex.select_windows(cfg)? {
            jobs.push((i, start, len));
        }
    }
    let results: Vec<WindowGrad> = jobs
        .par_iter()
        .map(|&(i, start, len)| window_gradient(meta, &batch[i], start, len, cfg))
        .collect::<Result<_>>()?;
    for (&(i, start, _), r) in jobs.iter().zip(&results) {
        if !r.total.is_finite() || r.grads.iter().any(|g| g.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient in trajectory {:?}, window starting at frame {} (loss {})",
                batch[i].id,
                start + 1,
                r.total
            )));
        }
    }
    let n = results.len() as f64;
    let mut grads: Vec<Matrix> = meta.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let (mut total, mut pred, mut self_loss) = (0.0, 0.0, 0.0);
    for r in &results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            *acc = acc.add(g);
        }
        total += r.total;
        pred += r.pred;
        self_loss += r.self_loss;
    }
    for g in &mut grads {
        *g = g.scale(1.0 / n);
    }
    Ok(BatchGrad {
        grads,
        windows: results.len(),
        total: total / n,
        pred: pred / n,
        self_loss: self_loss / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub pred_loss: f64,
    pub self_loss: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

impl EpochLog {
    /// The objective being minimized, given the self-loss weight.
    pub fn total(&self, self_weight: f64) -> f64 {
        self.pred_loss + self_weight * self.self_loss
    }
}

pub fn render_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,pred_loss,self_loss,lr\n");
    for e in log {
        writeln!(s, "{},{:.9},{:.9},{:e}", e.epoch, e.pred_loss, e.self_loss, e.lr).expect("string write");
    }
    s
}

pub struct TrainOutcome {
    pub params: MetaParams,
    pub log: Vec<EpochLog>,
}

/// Initial parameters for a run: drawn from the seed's init stream.
pub fn initial_params(encoder_dim: usize, cfg: &TrainConfig) -> Result<MetaParams> {
    Ok(MetaParams::init(
        cfg.dims(encoder_dim)?,
        &mut stream(cfg.seed, Stream::Init),
    ))
}

pub(crate) fn training_examples(dataset: &[TrajectoryRecord], max_len: usize) -> Result<Vec<TrainingExample>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = dataset[0].dim();
    if let Some(r) = dataset.iter().find(|r| r.dim() != d) {
        return Err(Error::DimensionMismatch(format!(
            "trajectory {:?} has d = {}, expected {d}",
            r.id,
            r.dim()
        )));
    }
    dataset
        .iter()
        .map(|r| TrainingExample::from_record(r, max_len))
        .collect()
}

/// Number of optimizer updates for `n` trajectories.
pub fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    n.div_ceil(batch_size) * epochs
}

/// Meta-trains from the seed's initialization.
pub fn train(dataset: &[TrajectoryRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.check()?;
    let examples = training_examples(dataset, cfg.max_len)?;
    let mut params = initial_params(dataset[0].dim(), cfg)?;
    let mut opt = AdamW::new(cfg.adamw(), &params.to_vec());
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let total = total_steps(examples.len(), cfg.batch_size, cfg.epochs);
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle);
        let (mut pred, mut self_loss, mut windows, mut lr) = (0.0, 0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            lr = cosine_lr(step, total, cfg.warmup_frac, cfg.lr);
            let batch = pad_batch(chunk.iter().map(|&i| examples[i].clone()).collect());
            let g = batch_gradient(&params, &batch, cfg).map_err(|e| annotate(e, epoch, step))?;
            opt.step(params.iter_mut(), &g.grads, lr);
            pred += g.pred * g.windows as f64;
            self_loss += g.self_loss * g.windows as f64;
            windows += g.windows;
        }
        log.push(EpochLog {
            epoch,
            pred_loss: pred / windows as f64,
            self_loss: self_loss / windows as f64,
            lr,
        });
    }
    Ok(TrainOutcome { params, log })
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, update {step}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, relative_error};
    use crate::model::{fuse, AdaptParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_meta(seed: u64) -> MetaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MetaParams::init(Dims::new(2, 3, 4).unwrap(), &mut rng);
        let mut jitter = |x: &Matrix| Matrix::from_fn(x.rows(), x.cols(), |_, _| rng.random_range(-0.4..0.4));
        m.theta0 = AdaptParams {
            w1: m.theta0.w1.clone(),
            b1: jitter(&m.theta0.b1),
            w2: jitter(&m.theta0.w2),
            b2: jitter(&m.theta0.b2),
        };
        m
    }

    fn toy_frames(seed: u64, n: usize) -> Vec<FusedInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                fuse(
                    &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    &[0.3, -0.7],
                )
                .unwrap()
            })
            .collect()
    }

    fn loss_value(meta: &MetaParams, frames: &[FusedInput], labels: &[f64], cfg: &TrainConfig) -> f64 {
        let tape = Tape::new();
        let xs: Vec<_> = frames.iter().map(|x| x.lift(&tape)).collect();
        window_loss(&meta.lift(&tape), &xs, labels, cfg).unwrap().total.item()
    }

    #[test]
    fn no_adaptation_is_supervised_loss() {
        let meta = toy_meta(1);
        let frames = toy_frames(2, 4);
        let labels = [0.25, 0.5, 0.75, 1.0];
        let cfg = TrainConfig {
            self_weight: 0.0,
            inner_lr: 0.0,
            ..TrainConfig::default()
        };
        let mut expected = 0.0;
        for (x, &y) in frames.iter().zip(&labels) {
            let p = model::eval::predict(x, &meta.theta0, &meta.proj, &meta.head);
            expected += model::eval::pred_loss(p, y).unwrap();
        }
        expected /= 4.0;
        assert_eq!(loss_value(&meta, &frames, &labels, &cfg), expected);
    }

    #[test]
    fn exact_meta_gradient_matches_finite_differences() {
        let meta = toy_meta(3);
        let frames = toy_frames(4, 2);
        let labels = [0.5, 1.0];
        let cfg = TrainConfig {
            inner_lr: 0.3,
            ..TrainConfig::default()
        };
        let tape = Tape::new();
        let params = meta.lift(&tape);
        let xs: Vec<_> = frames.iter().map(|x| x.lift(&tape)).collect();
        let loss = window_loss(&params, &xs, &labels, &cfg).unwrap().total;
        let analytic = grad_values(loss, &params.to_vec()).unwrap();
        let numeric = finite_diff_grad(
            |p| loss_value(&MetaParams::from_tensors(p.to_vec()).unwrap(), &frames, &labels, &cfg),
            &meta.to_vec(),
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(a, n) < 1e-6, "{}", relative_error(a, n));
        }
    }

    #[test]
    fn first_order_mode_differs_from_exact() {
        let meta = toy_meta(5);
        let frames = toy_frames(6, 3);
        let labels = [0.2, 0.4, 0.6];
        let grads = |mode| {
            let cfg = TrainConfig {
                meta_grad_mode: mode,
                inner_lr: 0.3,
                ..TrainConfig::default()
            };
            let tape = Tape::new();
            let params = meta.lift(&tape);
            let xs: Vec<_> = frames.iter().map(|x| x.lift(&tape)).collect();
            let loss = window_loss(&params, &xs, &labels, &cfg).unwrap();
            (loss.total.item(), grad_values(loss.total, &params.to_vec()).unwrap())
        };
        let (le, ge) = grads(MetaGradMode::Exact);
        let (lf, gf) = grads(MetaGradMode::FirstOrder);
        assert_eq!(le, lf);
        assert_ne!(ge, gf);
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = TrainConfig {
            lr: 3e-3,
            selection: SelectionMode::Greedy,
            meta_grad_mode: MetaGradMode::FirstOrder,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&cfg.render()).unwrap(), cfg);
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("stride = 0").is_err());
        assert!(TrainConfig::from_text("lambda = -1").is_err());
    }

    #[test]
    fn log_csv_header() {
        let csv = render_log_csv(&[EpochLog {
            epoch: 1,
            pred_loss: 0.5,
            self_loss: 0.25,
            lr: 1e-4,
        }]);
        assert!(csv.starts_with("epoch,pred_loss,self_loss,lr\n1,0.5"));
    }
}

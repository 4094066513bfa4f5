//! Reference estimators: embedding cosine similarity, direction projection,
//! and a supervised regressor without test-time adaptation.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{grad_values, Tape};
use crate::data::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::meta::{total_steps, training_examples, EpochLog, TrainConfig, TrainOutcome, TrainingExample};
use crate::model::{self, Dims, MetaParams};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{stream, Stream};
use crate::tensor::Matrix;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of `a` and `b`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm embedding".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Per-frame cosine similarity between the frame embedding and the goal embedding.
pub fn clip_similarity(traj: &TrajectoryRecord) -> Result<Vec<f64>> {
    let goal = traj.goal_f64();
    (0..traj.len())
        .map(|t| {
            cosine(&traj.frame_f64(t), &goal).map_err(|_| {
                Error::Degenerate(format!(
                    "zero-norm embedding in trajectory {:?} at frame {}",
                    traj.id,
                    t + 1
                ))
            })
        })
        .collect()
}

/// Projection of each normalized frame embedding onto the unit direction
/// from the normalized baseline embedding to the normalized goal embedding.
pub fn vlmrm_projection(traj: &TrajectoryRecord, baseline: &[f64]) -> Result<Vec<f64>> {
    let goal = traj.goal_f64();
    if baseline.len() != goal.len() {
        return Err(Error::DimensionMismatch(format!(
            "baseline embedding has d = {}, trajectory {:?} has d = {}",
            baseline.len(),
            traj.id,
            goal.len()
        )));
    }
    let (ng, nb) = (norm(&goal), norm(baseline));
    if ng == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm goal or baseline embedding".into()));
    }
    let mut dir: Vec<f64> = goal.iter().zip(baseline).map(|(g, b)| g / ng - b / nb).collect();
    let nd = norm(&dir);
    if nd == 0.0 {
        return Err(Error::Degenerate(format!(
            "goal and baseline embeddings point the same way for trajectory {:?}",
            traj.id
        )));
    }
    dir.iter_mut().for_each(|x| *x /= nd);
    (0..traj.len())
        .map(|t| {
            let v = traj.frame_f64(t);
            let nv = norm(&v);
            if nv == 0.0 {
                return Err(Error::Degenerate(format!(
                    "zero-norm frame {} in trajectory {:?}",
                    t + 1,
                    traj.id
                )));
            }
            Ok(dot(&v, &dir) / nv)
        })
        .collect()
}

/// Indices into [`MetaParams::iter`] order that the regressor trains:
/// the query projection and the four head tensors.
const CLIPFT_TRAINABLE: [usize; 5] = [4, 7, 8, 9, 10];

/// Architecture of the supervised regressor for encoder dimension `d`.
pub fn clipft_dims(encoder: usize, cfg: &TrainConfig) -> Result<Dims> {
    Dims::new(encoder, cfg.adapt_dim * cfg.clipft_dim_factor, cfg.head_hidden)
}

/// Initialization with the adaptation MLP and the key/value projections at zero,
/// so the forward pass reduces to `head(P_Q x)`.
pub fn clipft_initial_params(encoder: usize, cfg: &TrainConfig) -> Result<MetaParams> {
    let mut p = MetaParams::init(clipft_dims(encoder, cfg)?, &mut stream(cfg.seed, Stream::Init));
    p.theta0 = p.theta0.map(|m| Matrix::zeros(m.rows(), m.cols()));
    p.proj.key = Matrix::zeros(p.proj.key.rows(), p.proj.key.cols());
    p.proj.value = Matrix::zeros(p.proj.value.rows(), p.proj.value.cols());
    Ok(p)
}

struct FrameGrad {
    grads: Vec<Matrix>,
    loss_sum: f64,
    frames: usize,
}

fn example_gradient(params: &MetaParams, ex: &TrainingExample) -> Result<FrameGrad> {
    let tape = Tape::new();
    let p = params.lift(&tape);
    let mut sum = None;
    let mut frames = 0;
    for ((x, &y), &m) in ex.frames().iter().zip(ex.labels()).zip(ex.mask()) {
        if !m {
            continue;
        }
        let l = model::pred_loss(model::predict(x.lift(&tape), &p.theta0, &p.proj, &p.head), y)?;
        sum = Some(match sum {
            Some(a) => a + l,
            None => l,
        });
        frames += 1;
    }
    let loss = sum.ok_or(Error::EmptyWindow)?;
    let all = p.to_vec();
    let targets: Vec<_> = CLIPFT_TRAINABLE.iter().map(|&i| all[i]).collect();
    Ok(FrameGrad {
        grads: grad_values(loss, &targets)?,
        loss_sum: loss.item(),
        frames,
    })
}

/// Supervised MSE training of `head(P_Q x)`. Runs `clipft_step_factor` times
/// as many updates as meta-training would on the same data.
pub fn train_clipft(dataset: &[TrajectoryRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    use crate::config::KeyValueConfig;
    cfg.check()?;
    let examples = training_examples(dataset, cfg.max_len)?;
    let mut params = clipft_initial_params(dataset[0].dim(), cfg)?;
    let trainable = |p: &MetaParams| -> Vec<Matrix> {
        let all = p.to_vec();
        CLIPFT_TRAINABLE.iter().map(|&i| all[i].clone()).collect()
    };
    let mut opt = AdamW::new(cfg.adamw(), &trainable(&params));
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let epochs = cfg.epochs * cfg.clipft_step_factor;
    let total = total_steps(examples.len(), cfg.batch_size, epochs);
    let mut step = 0;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut frame_count, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            lr = cosine_lr(step, total, cfg.warmup_frac, cfg.lr);
            let parts: Vec<FrameGrad> = chunk
                .par_iter()
                .map(|&i| example_gradient(&params, &examples[i]))
                .collect::<Result<_>>()?;
            let frames: usize = parts.iter().map(|g| g.frames).sum();
            let mut grads: Vec<Matrix> = trainable(&params)
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect();
            let mut batch_loss = 0.0;
            for part in &parts {
                for (acc, g) in grads.iter_mut().zip(&part.grads) {
                    *acc = acc.add(g);
                }
                batch_loss += part.loss_sum;
            }
            let scale = 1.0 / frames as f64;
            let grads: Vec<Matrix> = grads.iter().map(|g| g.scale(scale)).collect();
            if !batch_loss.is_finite() || grads.iter().any(|g| g.as_slice().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, update {step}: non-finite regression loss {batch_loss}"
                )));
            }
            let mut all: Vec<&mut Matrix> = params.iter_mut().collect();
            let mut targets = Vec::with_capacity(CLIPFT_TRAINABLE.len());
            for (i, m) in all.drain(..).enumerate() {
                if CLIPFT_TRAINABLE.contains(&i) {
                    targets.push(m);
                }
            }
            opt.step(targets, &grads, lr);
            loss_sum += batch_loss;
            frame_count += frames;
        }
        log.push(EpochLog {
            epoch,
            pred_loss: loss_sum / frame_count as f64,
            self_loss: 0.0,
            lr,
        });
    }
    Ok(TrainOutcome { params, log })
}

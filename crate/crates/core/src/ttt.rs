//! Online test-time adaptation.
//!
//! At every step the adaptation parameters take `epochs` gradient steps on the
//! summed reconstruction loss over a context window, then the current frame is
//! scored with the updated parameters. The projections and head never change.
//!
//! | variant | context            | start of each step          |
//! |---------|--------------------|-----------------------------|
//! | IM      | current frame      | previous step's parameters  |
//! | EX      | last `k + 1` frames| `theta0`                    |
//! | RS      | current frame      | `theta0`                    |
//! | TR      | whole trajectory, one update before the first prediction |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Tape, Var};
use crate::data::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::model::{self, AdaptParams, FusedInput, HeadParams, MetaParams, ProjectionSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Implicit memory: sequential updates, never reset.
    #[serde(rename = "ttt-im")]
    Implicit,
    /// Explicit memory: reset every step, adapt on a sliding window.
    #[serde(rename = "ttt-ex")]
    Explicit,
    /// One update per trajectory.
    #[serde(rename = "ttt-tr")]
    Trajectory,
    /// Reset every step, adapt on the current frame only.
    #[serde(rename = "ttt-rs")]
    Reset,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Implicit,
        Variant::Explicit,
        Variant::Trajectory,
        Variant::Reset,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Implicit => "ttt-im",
            Variant::Explicit => "ttt-ex",
            Variant::Trajectory => "ttt-tr",
            Variant::Reset => "ttt-rs",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Implicit => "TTT-IM",
            Variant::Explicit => "TTT-EX",
            Variant::Trajectory => "TTT-TR",
            Variant::Reset => "TTT-RS",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let short = s.strip_prefix("ttt-").unwrap_or(&s);
        Ok(match short {
            "im" => Variant::Implicit,
            "ex" => Variant::Explicit,
            "tr" => Variant::Trajectory,
            "rs" => Variant::Reset,
            _ => return Err(Error::UnknownEstimator(s)),
        })
    }
}

/// How the outer objective treats the inner gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaGradMode {
    /// Differentiate through the inner gradients (second order).
    #[default]
    Exact,
    /// Treat inner gradients as constants.
    FirstOrder,
}

impl FromStr for MetaGradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(MetaGradMode::Exact),
            "first_order" | "first-order" => Ok(MetaGradMode::FirstOrder),
            _ => Err(Error::InvalidConfig(format!("unknown meta_grad_mode {s:?}"))),
        }
    }
}

impl fmt::Display for MetaGradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaGradMode::Exact => "exact",
            MetaGradMode::FirstOrder => "first_order",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub variant: Variant,
    /// Frames of context before the current one (`k`); only EX may use `k > 0`.
    pub context: usize,
    /// Inner learning rate.
    pub lr: f64,
    /// Gradient steps per update.
    pub epochs: usize,
    /// Start each trajectory from the previous trajectory's final IM state
    /// instead of `theta0`.
    pub carry_across_episodes: bool,
}

impl AdaptConfig {
    /// Defaults: IM `eta = 0.1`, EX `eta = 1.0` with `k = 7`, one step per update.
    pub fn for_variant(variant: Variant) -> Self {
        let (context, lr) = match variant {
            Variant::Explicit => (7, 1.0),
            _ => (0, 0.1),
        };
        Self {
            variant,
            context,
            lr,
            epochs: 1,
            carry_across_episodes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant != Variant::Explicit && self.context != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} uses no context window; got k = {}",
                self.variant, self.context
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "inner learning rate {} must be >= 0",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("inner epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Live adaptation parameters and how many frames they have seen.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState {
    pub theta: AdaptParams,
    pub step: usize,
}

impl AdaptState {
    pub fn initial(meta: &MetaParams) -> Self {
        Self {
            theta: meta.theta0.clone(),
            step: 0,
        }
    }
}

/// `epochs` repetitions of `theta <- theta - lr * sum_x grad self_loss(x; theta)`
/// on the tape. With [`MetaGradMode::Exact`] the result stays differentiable
/// through the gradients.
pub fn inner_update_on_tape<'t>(
    theta: AdaptParams<Var<'t>>,
    window: &[Var<'t>],
    lr: f64,
    epochs: usize,
    proj: &ProjectionSet<Var<'t>>,
    mode: MetaGradMode,
) -> Result<AdaptParams<Var<'t>>> {
    Ok(inner_update_with_loss(theta, window, lr, epochs, proj, mode)?.0)
}

/// Like [`inner_update_on_tape`], also returning the summed self-loss at the
/// starting parameters.
pub fn inner_update_with_loss<'t>(
    mut theta: AdaptParams<Var<'t>>,
    window: &[Var<'t>],
    lr: f64,
    epochs: usize,
    proj: &ProjectionSet<Var<'t>>,
    mode: MetaGradMode,
) -> Result<(AdaptParams<Var<'t>>, Var<'t>)> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if epochs == 0 {
        return Err(Error::InvalidConfig("inner epochs must be >= 1".into()));
    }
    let mut first = None;
    for _ in 0..epochs {
        let loss = window
            .iter()
            .map(|&x| model::self_loss(x, &theta, proj))
            .reduce(|a, b| a + b)
            .expect("non-empty window");
        first.get_or_insert(loss);
        let params = theta.to_vec();
        let grads = grad(loss, &params)?;
        let mut updated = params.iter().zip(grads).map(|(&p, g)| {
            let g = match mode {
                MetaGradMode::Exact => g,
                MetaGradMode::FirstOrder => g.detach(),
            };
            p - g.scale(lr)
        });
        theta = AdaptParams::from_tensors(&mut updated).expect("four tensors");
    }
    Ok((theta, first.expect("at least one epoch")))
}

/// Value-level inner update.
pub fn inner_update(
    theta: &AdaptParams,
    window: &[FusedInput],
    lr: f64,
    epochs: usize,
    proj: &ProjectionSet,
) -> Result<AdaptParams> {
    let tape = Tape::new();
    let xs: Vec<_> = window.iter().map(|x| x.lift(&tape)).collect();
    let proj = proj.map(|m| tape.var(m.clone()));
    let out = inner_update_on_tape(theta.lift(&tape), &xs, lr, epochs, &proj, MetaGradMode::FirstOrder)?;
    Ok(out.values())
}

struct Frozen<'t> {
    proj: ProjectionSet<Var<'t>>,
    head: HeadParams<Var<'t>>,
}

impl<'t> Frozen<'t> {
    fn lift(tape: &'t Tape, meta: &MetaParams) -> Self {
        Self {
            proj: meta.proj.map(|m| tape.var(m.clone())),
            head: meta.head.map(|m| tape.var(m.clone())),
        }
    }
}

/// Adapts `theta` on `window`, then scores `current` with the result.
fn adapt_and_predict(
    theta: &AdaptParams,
    window: &[FusedInput],
    current: &FusedInput,
    meta: &MetaParams,
    cfg: &AdaptConfig,
) -> Result<(f64, AdaptParams)> {
    let tape = Tape::new();
    let frozen = Frozen::lift(&tape, meta);
    let xs: Vec<_> = window.iter().map(|x| x.lift(&tape)).collect();
    let theta = inner_update_on_tape(
        theta.lift(&tape),
        &xs,
        cfg.lr,
        cfg.epochs,
        &frozen.proj,
        MetaGradMode::FirstOrder,
    )?;
    let p = model::predict(current.lift(&tape), &theta, &frozen.proj, &frozen.head).item();
    Ok((p, theta.values()))
}

fn check_prediction(p: f64, t: usize) -> Result<f64> {
    if p.is_finite() {
        Ok(p)
    } else {
        Err(Error::Numerical(format!("prediction at frame {} is {p}", t + 1)))
    }
}

/// Runs the adaptation loop over `frames`, starting from `start` (or `theta0`).
///
/// Returns one prediction per frame and the final state. For IM the final
/// state is the last adapted parameters; for the resetting variants it is
/// the starting state.
pub fn run_frames(
    frames: &[FusedInput],
    meta: &MetaParams,
    cfg: &AdaptConfig,
    start: Option<AdaptState>,
) -> Result<(Vec<f64>, AdaptState)> {
    cfg.validate()?;
    let dims = meta.dims();
    if let Some(x) = frames.iter().find(|x| x.dim() != dims.fused) {
        return Err(Error::DimensionMismatch(format!(
            "input dimension {} does not match model input dimension {}",
            x.dim(),
            dims.fused
        )));
    }
    let start = start.unwrap_or_else(|| AdaptState::initial(meta));
    let mut preds = Vec::with_capacity(frames.len());
    match cfg.variant {
        Variant::Implicit => {
            let mut state = start;
            for (t, x) in frames.iter().enumerate() {
                let (p, theta) = adapt_and_predict(&state.theta, std::slice::from_ref(x), x, meta, cfg)?;
                preds.push(check_prediction(p, t)?);
                state = AdaptState {
                    theta,
                    step: state.step + 1,
                };
            }
            Ok((preds, state))
        }
        Variant::Explicit | Variant::Reset => {
            for (t, x) in frames.iter().enumerate() {
                let lo = t.saturating_sub(cfg.context);
                let (p, _) = adapt_and_predict(&start.theta, &frames[lo..=t], x, meta, cfg)?;
                preds.push(check_prediction(p, t)?);
            }
            Ok((preds, start))
        }
        Variant::Trajectory => {
            if frames.is_empty() {
                return Ok((preds, start));
            }
            let theta = inner_update(&start.theta, frames, cfg.lr, cfg.epochs, &meta.proj)?;
            let tape = Tape::new();
            let frozen = Frozen::lift(&tape, meta);
            let theta = theta.lift(&tape);
            for (t, x) in frames.iter().enumerate() {
                let p = model::predict(x.lift(&tape), &theta, &frozen.proj, &frozen.head).item();
                preds.push(check_prediction(p, t)?);
            }
            Ok((preds, start))
        }
    }
}

/// Per-frame progress predictions for one trajectory, starting from `theta0`.
pub fn run_ttt(traj: &TrajectoryRecord, meta: &MetaParams, cfg: &AdaptConfig) -> Result<Vec<f64>> {
    check_dim(traj, meta)?;
    Ok(run_frames(&traj.fused_inputs()?, meta, cfg, None)?.0)
}

pub(crate) fn check_dim(traj: &TrajectoryRecord, meta: &MetaParams) -> Result<()> {
    let d = meta.dims().encoder;
    if traj.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "trajectory {:?} has d = {}, model expects {d}",
            traj.id,
            traj.dim()
        )));
    }
    Ok(())
}

/// Frozen forward pass with `theta0` and no adaptation.
pub fn run_frozen(traj: &TrajectoryRecord, meta: &MetaParams) -> Result<Vec<f64>> {
    check_dim(traj, meta)?;
    let tape = Tape::new();
    let frozen = Frozen::lift(&tape, meta);
    let theta = meta.theta0.lift(&tape);
    traj.fused_inputs()?
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let p = model::predict(x.lift(&tape), &theta, &frozen.proj, &frozen.head).item();
            check_prediction(p, t)
        })
        .collect()
}

/// Runs a sequence of trajectories, optionally carrying the IM state from
/// one to the next.
pub fn run_episodes(trajs: &[TrajectoryRecord], meta: &MetaParams, cfg: &AdaptConfig) -> Result<Vec<Vec<f64>>> {
    let mut carried: Option<AdaptState> = None;
    let mut out = Vec::with_capacity(trajs.len());
    for traj in trajs {
        check_dim(traj, meta)?;
        let start = if cfg.carry_across_episodes {
            carried.take()
        } else {
            None
        };
        let (preds, state) = run_frames(&traj.fused_inputs()?, meta, cfg, start)?;
        carried = Some(state);
        out.push(preds);
    }
    Ok(out)
}

//! The progress-estimation network.
//!
//! A fused input `x = [visual; goal]` is projected three ways. The key and value
//! projections define the self-supervised reconstruction loss that drives
//! adaptation; the query projection feeds the adapted representation to the
//! frozen progression head:
//!
//! ```text
//! self_loss(x; theta) = | f_adapt(P_K x; theta) - P_V x |^2
//! predict(x; theta)   = head(f_adapt(P_Q x; theta))
//! f_adapt(z; theta)   = z + W2 gelu(W1 z + b1) + b2
//! ```

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Network dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Encoder embedding dimension `d`.
    pub encoder: usize,
    /// Fused input dimension, always `2 * encoder`.
    pub fused: usize,
    /// Adaptation space dimension `d'`.
    pub adapt: usize,
    /// Hidden width of the progression head.
    pub head_hidden: usize,
}

impl Dims {
    pub fn new(encoder: usize, adapt: usize, head_hidden: usize) -> Result<Self> {
        if encoder == 0 || adapt == 0 || head_hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be positive (d={encoder}, d'={adapt}, d_h={head_hidden})"
            )));
        }
        Ok(Self {
            encoder,
            fused: 2 * encoder,
            adapt,
            head_hidden,
        })
    }
}

/// One timestep's input: visual embedding followed by goal embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedInput(Matrix);

impl FusedInput {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    /// Splits back into `(visual, goal)`.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let half = self.0.rows() / 2;
        let s = self.0.as_slice();
        (s[..half].to_vec(), s[half..].to_vec())
    }

    pub fn lift<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.var(self.0.clone())
    }
}

/// Concatenates visual and goal embeddings, visual first.
pub fn fuse(visual: &[f64], goal: &[f64]) -> Result<FusedInput> {
    if visual.len() != goal.len() {
        return Err(Error::DimensionMismatch(format!(
            "visual embedding has {} entries, goal embedding {}",
            visual.len(),
            goal.len()
        )));
    }
    let mut data = Vec::with_capacity(visual.len() * 2);
    data.extend_from_slice(visual);
    data.extend_from_slice(goal);
    Ok(FusedInput(Matrix::column(&data)?))
}

/// Weights of the residual adaptation MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptParams<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T = Matrix> {
    pub query: T,
    pub key: T,
    pub value: T,
}

/// Two-layer MLP head `d' -> d_h -> 1` with a logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Everything learned in the outer loop.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams<T = Matrix> {
    /// Initialization of the adaptation parameters for every trajectory.
    pub theta0: AdaptParams<T>,
    pub proj: ProjectionSet<T>,
    pub head: HeadParams<T>,
}

impl<T> AdaptParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AdaptParams<U> {
        AdaptParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn zip_map<U, V>(&self, other: &AdaptParams<U>, mut f: impl FnMut(&T, &U) -> V) -> AdaptParams<V> {
        AdaptParams {
            w1: f(&self.w1, &other.w1),
            b1: f(&self.b1, &other.b1),
            w2: f(&self.w2, &other.w2),
            b2: f(&self.b2, &other.b2),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.w1, &self.b1, &self.w2, &self.b2].into_iter()
    }

    pub fn from_tensors(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

impl<T: Clone> AdaptParams<T> {
    pub fn to_vec(&self) -> Vec<T> {
        self.iter().cloned().collect()
    }
}

impl AdaptParams<Matrix> {
    pub fn lift<'t>(&self, tape: &'t Tape) -> AdaptParams<Var<'t>> {
        self.map(|m| tape.var(m.clone()))
    }
}

impl<'t> AdaptParams<Var<'t>> {
    pub fn values(&self) -> AdaptParams<Matrix> {
        self.map(|v| (*v.value()).clone())
    }
}

impl<T> ProjectionSet<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ProjectionSet<U> {
        ProjectionSet {
            query: f(&self.query),
            key: f(&self.key),
            value: f(&self.value),
        }
    }
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

/// Names of the parameter tensors in storage order.
pub const PARAM_NAMES: [&str; 11] = [
    "theta0.w1",
    "theta0.b1",
    "theta0.w2",
    "theta0.b2",
    "proj.query",
    "proj.key",
    "proj.value",
    "head.w1",
    "head.b1",
    "head.w2",
    "head.b2",
];

impl<T> MetaParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MetaParams<U> {
        MetaParams {
            theta0: self.theta0.map(&mut f),
            proj: self.proj.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    /// Tensors in storage order (see [`PARAM_NAMES`]).
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [
            &self.theta0.w1,
            &self.theta0.b1,
            &self.theta0.w2,
            &self.theta0.b2,
            &self.proj.query,
            &self.proj.key,
            &self.proj.value,
            &self.head.w1,
            &self.head.b1,
            &self.head.w2,
            &self.head.b2,
        ]
        .into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [
            &mut self.theta0.w1,
            &mut self.theta0.b1,
            &mut self.theta0.w2,
            &mut self.theta0.b2,
            &mut self.proj.query,
            &mut self.proj.key,
            &mut self.proj.value,
            &mut self.head.w1,
            &mut self.head.b1,
            &mut self.head.w2,
            &mut self.head.b2,
        ]
        .into_iter()
    }

    /// Rebuilds from tensors in storage order.
    pub fn from_tensors(it: impl IntoIterator<Item = T>) -> Option<Self> {
        let mut it = it.into_iter();
        let theta0 = AdaptParams::from_tensors(&mut it)?;
        let proj = ProjectionSet {
            query: it.next()?,
            key: it.next()?,
            value: it.next()?,
        };
        let head = HeadParams {
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        };
        if it.next().is_some() {
            return None;
        }
        Some(Self { theta0, proj, head })
    }
}

impl<T: Clone> MetaParams<T> {
    pub fn to_vec(&self) -> Vec<T> {
        self.iter().cloned().collect()
    }
}

impl MetaParams<Matrix> {
    /// Random initialization.
    ///
    /// Projections and first-layer weights are uniform in `+-1/sqrt(fan_in)`.
    /// `b1`, `W2` and `b2` of the adaptation MLP start at zero so `f_adapt` is
    /// the identity.
    pub fn init(dims: Dims, rng: &mut impl Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        let (dd, da, dh) = (dims.fused, dims.adapt, dims.head_hidden);
        let query = uniform(da, dd);
        let key = uniform(da, dd);
        let value = uniform(da, dd);
        let w1 = uniform(da, da);
        let head_w1 = uniform(dh, da);
        let head_w2 = uniform(1, dh);
        Self {
            theta0: AdaptParams {
                w1,
                b1: Matrix::zeros(da, 1),
                w2: Matrix::zeros(da, da),
                b2: Matrix::zeros(da, 1),
            },
            proj: ProjectionSet { query, key, value },
            head: HeadParams {
                w1: head_w1,
                b1: Matrix::zeros(dh, 1),
                w2: head_w2,
                b2: Matrix::zeros(1, 1),
            },
        }
    }

    pub fn dims(&self) -> Dims {
        let fused = self.proj.query.cols();
        Dims {
            encoder: fused / 2,
            fused,
            adapt: self.proj.query.rows(),
            head_hidden: self.head.w1.rows(),
        }
    }

    /// Checks that every tensor has the shape implied by the projection and head sizes.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.fused == 0 || !d.fused.is_multiple_of(2) || d.adapt == 0 || d.head_hidden == 0 {
            return Err(Error::DimensionMismatch(format!("invalid dimensions {d:?}")));
        }
        let expected = [
            (d.adapt, d.adapt),
            (d.adapt, 1),
            (d.adapt, d.adapt),
            (d.adapt, 1),
            (d.adapt, d.fused),
            (d.adapt, d.fused),
            (d.adapt, d.fused),
            (d.head_hidden, d.adapt),
            (d.head_hidden, 1),
            (1, d.head_hidden),
            (1, 1),
        ];
        for ((m, want), name) in self.iter().zip(expected).zip(PARAM_NAMES) {
            if m.shape() != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn lift<'t>(&self, tape: &'t Tape) -> MetaParams<Var<'t>> {
        self.map(|m| tape.var(m.clone()))
    }

    /// Order-sensitive FNV-1a digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.iter() {
            for v in m.as_slice() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// `f_adapt(z; theta) = z + W2 gelu(W1 z + b1) + b2`.
pub fn f_adapt<'t>(z: Var<'t>, theta: &AdaptParams<Var<'t>>) -> Var<'t> {
    let hidden = (theta.w1.matmul(z) + theta.b1).gelu();
    z + theta.w2.matmul(hidden) + theta.b2
}

/// Reconstruction loss `|f_adapt(P_K x) - P_V x|^2`.
pub fn self_loss<'t>(x: Var<'t>, theta: &AdaptParams<Var<'t>>, proj: &ProjectionSet<Var<'t>>) -> Var<'t> {
    let reconstruction = f_adapt(proj.key.matmul(x), theta);
    (reconstruction - proj.value.matmul(x)).sq_norm()
}

/// Pre-logistic output of the progression head.
pub fn head_logit<'t>(z: Var<'t>, head: &HeadParams<Var<'t>>) -> Var<'t> {
    let hidden = (head.w1.matmul(z) + head.b1).gelu();
    head.w2.matmul(hidden) + head.b2
}

/// Progress estimate `head(f_adapt(P_Q x; theta))`, strictly inside `(0, 1)`
/// for moderate logits.
pub fn predict<'t>(
    x: Var<'t>,
    theta: &AdaptParams<Var<'t>>,
    proj: &ProjectionSet<Var<'t>>,
    head: &HeadParams<Var<'t>>,
) -> Var<'t> {
    head_logit(f_adapt(proj.query.matmul(x), theta), head).sigmoid()
}

/// Squared error against a progress label in `[0, 1]`.
pub fn pred_loss<'t>(prediction: Var<'t>, label: f64) -> Result<Var<'t>> {
    check_label(label)?;
    let diff = prediction.affine(1.0, -label);
    Ok(diff * diff)
}

pub fn check_label(label: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&label) {
        return Err(Error::LabelOutOfRange(label));
    }
    Ok(())
}

/// Value-level helpers that record on a private tape.
pub mod eval {
    use super::*;

    pub fn f_adapt(z: &Matrix, theta: &AdaptParams) -> Matrix {
        let tape = Tape::new();
        (*super::f_adapt(tape.var(z.clone()), &theta.lift(&tape)).value()).clone()
    }

    pub fn self_loss(x: &FusedInput, theta: &AdaptParams, proj: &ProjectionSet) -> f64 {
        let tape = Tape::new();
        let proj = proj.map(|m| tape.var(m.clone()));
        super::self_loss(x.lift(&tape), &theta.lift(&tape), &proj).item()
    }

    pub fn predict(x: &FusedInput, theta: &AdaptParams, proj: &ProjectionSet, head: &HeadParams) -> f64 {
        let tape = Tape::new();
        let proj = proj.map(|m| tape.var(m.clone()));
        let head = head.map(|m| tape.var(m.clone()));
        super::predict(x.lift(&tape), &theta.lift(&tape), &proj, &head).item()
    }

    pub fn pred_loss(prediction: f64, label: f64) -> Result<f64> {
        check_label(label)?;
        Ok((prediction - label).powi(2))
    }
}

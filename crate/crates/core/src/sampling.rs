//! Sub-trajectory windows and dissimilarity-based subset selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FusedInput;

/// Exact enumeration is used only while the number of subsets stays at or below this.
pub const EXACT_SUBSET_LIMIT: u64 = 100_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    #[default]
    Exact,
    Greedy,
}

impl FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SelectionMode::Exact),
            "greedy" => Ok(SelectionMode::Greedy),
            _ => Err(Error::InvalidConfig(format!("unknown selection mode {s:?}"))),
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Exact => "exact",
            SelectionMode::Greedy => "greedy",
        })
    }
}

/// How a window is embedded for the dissimilarity objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowFeature {
    /// Concatenation of the window's fused inputs.
    #[default]
    Flat,
    /// Mean of the window's fused inputs.
    Mean,
}

impl FromStr for WindowFeature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(WindowFeature::Flat),
            "mean" => Ok(WindowFeature::Mean),
            _ => Err(Error::InvalidConfig(format!("unknown window feature {s:?}"))),
        }
    }
}

impl fmt::Display for WindowFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowFeature::Flat => "flat",
            WindowFeature::Mean => "mean",
        })
    }
}

/// A contiguous run of frames. `start` is 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub feature: Vec<f64>,
}

impl Window {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Start offsets of every window of length `len` at `stride`, or `[0]` when
/// the trajectory is shorter than one window.
pub fn window_starts(total: usize, len: usize, stride: usize) -> Vec<usize> {
    if total <= len {
        return vec![0];
    }
    (0..=total - len).step_by(stride.max(1)).collect()
}

fn feature(frames: &[FusedInput], kind: WindowFeature) -> Vec<f64> {
    match kind {
        WindowFeature::Flat => frames
            .iter()
            .flat_map(|x| x.as_matrix().as_slice().iter().copied())
            .collect(),
        WindowFeature::Mean => {
            let mut acc = vec![0.0; frames[0].dim()];
            for x in frames {
                for (a, v) in acc.iter_mut().zip(x.as_matrix().as_slice()) {
                    *a += v;
                }
            }
            let n = frames.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
    }
}

/// Sliding windows over `frames`, in ascending start order. A trajectory
/// shorter than `len` yields one window covering all of it.
pub fn candidate_windows(frames: &[FusedInput], len: usize, stride: usize, kind: WindowFeature) -> Result<Vec<Window>> {
    if frames.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if len == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window length and stride must be >= 1".into()));
    }
    Ok(window_starts(frames.len(), len, stride)
        .into_iter()
        .map(|start| {
            let end = (start + len).min(frames.len());
            Window {
                start,
                len: end - start,
                feature: feature(&frames[start..end], kind),
            }
        })
        .collect())
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of pairwise squared distances over `indices` (pairs taken in index order).
pub fn subset_objective(features: &[&[f64]], indices: &[usize]) -> f64 {
    let mut total = 0.0;
    for (n, &i) in indices.iter().enumerate() {
        for &j in &indices[n + 1..] {
            total += squared_distance(features[i], features[j]);
        }
    }
    total
}

/// Binomial coefficient, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Chosen candidate indices, ascending.
    pub indices: Vec<usize>,
    pub objective: f64,
    /// Mode that actually ran (exact falls back to greedy on large instances).
    pub mode: SelectionMode,
}

/// Picks `b` candidates maximizing the summed pairwise squared distance.
///
/// Exact mode enumerates subsets in lexicographic order and keeps the first
/// maximum; it falls back to greedy when there are more than
/// [`EXACT_SUBSET_LIMIT`] subsets.
pub fn select_diverse(features: &[&[f64]], b: usize, mode: SelectionMode) -> Selection {
    let n = features.len();
    if b >= n {
        let indices: Vec<usize> = (0..n).collect();
        let objective = subset_objective(features, &indices);
        return Selection {
            indices,
            objective,
            mode,
        };
    }
    if b == 0 {
        return Selection {
            indices: Vec::new(),
            objective: 0.0,
            mode,
        };
    }
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| squared_distance(features[i], features[j])).collect())
        .collect();
    if mode == SelectionMode::Exact && binomial(n, b) <= EXACT_SUBSET_LIMIT {
        exact(&dist, b)
    } else {
        greedy(&dist, b)
    }
}

fn pair_sum(dist: &[Vec<f64>], indices: &[usize]) -> f64 {
    let mut total = 0.0;
    for (n, &i) in indices.iter().enumerate() {
        for &j in &indices[n + 1..] {
            total += dist[i][j];
        }
    }
    total
}

fn exact(dist: &[Vec<f64>], b: usize) -> Selection {
    let n = dist.len();
    let mut combo: Vec<usize> = (0..b).collect();
    let mut best = combo.clone();
    let mut best_value = pair_sum(dist, &combo);
    // advance through combinations in lexicographic order
    while let Some(pos) = (0..b).rev().find(|&i| combo[i] < n - b + i) {
        combo[pos] += 1;
        for i in pos + 1..b {
            combo[i] = combo[i - 1] + 1;
        }
        let value = pair_sum(dist, &combo);
        if value > best_value {
            best_value = value;
            best.clone_from(&combo);
        }
    }
    Selection {
        indices: best,
        objective: best_value,
        mode: SelectionMode::Exact,
    }
}

fn greedy(dist: &[Vec<f64>], b: usize) -> Selection {
    let n = dist.len();
    let mut seed = (0, 1);
    for i in 0..n {
        for j in i + 1..n {
            if dist[i][j] > dist[seed.0][seed.1] {
                seed = (i, j);
            }
        }
    }
    let mut chosen = vec![seed.0, seed.1];
    chosen.truncate(b);
    while chosen.len() < b {
        let next = (0..n)
            .filter(|k| !chosen.contains(k))
            .map(|k| (k, chosen.iter().map(|&c| dist[k][c]).sum::<f64>()))
            .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k, v)),
            })
            .expect("fewer chosen than candidates")
            .0;
        chosen.push(next);
    }
    chosen.sort_unstable();
    let objective = pair_sum(dist, &chosen);
    Selection {
        indices: chosen,
        objective,
        mode: SelectionMode::Greedy,
    }
}

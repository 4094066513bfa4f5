//! Value-order correlation and per-dataset evaluation reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::data::{load_container, Manifest, Shift, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::model::MetaParams;
use crate::ttt::{self, AdaptConfig, Variant};

/// Spearman correlation with the time axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voc {
    pub value: f64,
    /// All predictions were equal; `value` is then 0.
    pub degenerate: bool,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation between `preds` and the frame order `1..=T`.
pub fn spearman_voc(preds: &[f64]) -> Result<Voc> {
    if preds.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: preds.len(),
        });
    }
    if let Some(t) = preds.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!("prediction {} is {}", t + 1, preds[t])));
    }
    let time: Vec<f64> = (1..=preds.len()).map(|t| t as f64).collect();
    Ok(match pearson(&average_ranks(preds), &time) {
        Some(value) => Voc {
            value,
            degenerate: false,
        },
        None => Voc {
            value: 0.0,
            degenerate: true,
        },
    })
}

/// Estimator names accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    Ttt(Variant),
    Clip,
    VlmRm,
    ClipFt,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ttt(v) => v.display_name(),
            EstimatorKind::Clip => "CLIP",
            EstimatorKind::VlmRm => "VLM-RM",
            EstimatorKind::ClipFt => "CLIP-FT",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clip" => Ok(EstimatorKind::Clip),
            "vlmrm" | "vlm-rm" => Ok(EstimatorKind::VlmRm),
            "clipft" | "clip-ft" => Ok(EstimatorKind::ClipFt),
            other => other
                .parse()
                .map(EstimatorKind::Ttt)
                .map_err(|_| Error::UnknownEstimator(s.to_string())),
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

type PredictFn<'a> = dyn Fn(&TrajectoryRecord) -> Result<Vec<f64>> + Sync + 'a;

/// Something that maps a trajectory to per-frame progress scores.
pub enum Estimator<'a> {
    Ttt {
        meta: &'a MetaParams,
        cfg: AdaptConfig,
    },
    Clip,
    VlmRm {
        baseline: &'a [f64],
    },
    /// Frozen forward pass of a supervised regressor.
    ClipFt {
        meta: &'a MetaParams,
    },
    Custom {
        name: String,
        predict: Box<PredictFn<'a>>,
    },
}

impl Estimator<'_> {
    pub fn name(&self) -> String {
        match self {
            Estimator::Ttt { cfg, .. } => cfg.variant.display_name().to_string(),
            Estimator::Clip => EstimatorKind::Clip.name().into(),
            Estimator::VlmRm { .. } => EstimatorKind::VlmRm.name().into(),
            Estimator::ClipFt { .. } => EstimatorKind::ClipFt.name().into(),
            Estimator::Custom { name, .. } => name.clone(),
        }
    }

    pub fn predict(&self, traj: &TrajectoryRecord) -> Result<Vec<f64>> {
        match self {
            Estimator::Ttt { meta, cfg } => ttt::run_ttt(traj, meta, cfg),
            Estimator::Clip => baselines::clip_similarity(traj),
            Estimator::VlmRm { baseline } => baselines::vlmrm_projection(traj, baseline),
            Estimator::ClipFt { meta } => ttt::run_frozen(traj, meta),
            Estimator::Custom { predict, .. } => predict(traj),
        }
    }

    fn carries_state(&self) -> bool {
        matches!(self, Estimator::Ttt { cfg, .. } if cfg.carry_across_episodes)
    }
}

/// One evaluation split held in memory.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub name: String,
    pub shift: Shift,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub id: String,
    pub voc: f64,
    pub degenerate: bool,
    #[serde(skip)]
    pub predictions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub split: String,
    /// Dataset tag shared by the split's records, or the split name if mixed.
    pub dataset: String,
    pub shift: Shift,
    /// Mean VOC over non-degenerate trajectories (0 if there are none).
    pub mean_voc: f64,
    pub trajectories: usize,
    pub degenerate: usize,
    pub scores: Vec<TrajectoryScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimator: String,
    pub datasets: Vec<DatasetReport>,
}

impl EvalReport {
    pub fn dataset(&self, split: &str) -> Option<&DatasetReport> {
        self.datasets.iter().find(|d| d.split == split)
    }

    /// Mean VOC over every non-degenerate trajectory of every split.
    pub fn pooled_mean(&self) -> f64 {
        let vocs: Vec<f64> = self
            .datasets
            .iter()
            .flat_map(|d| d.scores.iter().filter(|s| !s.degenerate).map(|s| s.voc))
            .collect();
        if vocs.is_empty() {
            0.0
        } else {
            vocs.iter().sum::<f64>() / vocs.len() as f64
        }
    }

    /// `split,trajectory,frame,label,prediction` rows for curve plotting.
    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("split,trajectory,frame,label,prediction\n");
        for d in &self.datasets {
            for score in &d.scores {
                let n = score.predictions.len();
                for (t, p) in score.predictions.iter().enumerate() {
                    let label = (t + 1) as f64 / n as f64;
                    writeln!(s, "{},{},{},{:.6},{:.9}", d.split, score.id, t + 1, label, p).expect("string write");
                }
            }
        }
        s
    }
}

/// Loads every evaluation split of a manifest, in manifest order.
pub fn load_splits(manifest: &Manifest) -> Result<Vec<EvalSplit>> {
    let splits: Vec<EvalSplit> = manifest
        .eval_splits()
        .map(|e| {
            Ok(EvalSplit {
                name: e.name.clone(),
                shift: e.shift,
                records: load_container(&e.path)?,
            })
        })
        .collect::<Result<_>>()?;
    if splits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(splits)
}

fn dataset_name(split: &EvalSplit) -> String {
    match split.records.first() {
        Some(first) if split.records.iter().all(|r| r.dataset_tag == first.dataset_tag) => first.dataset_tag.clone(),
        _ => split.name.clone(),
    }
}

/// Scores every trajectory of every split. Trajectories run in parallel
/// unless the estimator carries state across them; results keep split and
/// record order either way.
pub fn evaluate(splits: &[EvalSplit], estimator: &Estimator) -> Result<EvalReport> {
    let mut datasets = Vec::with_capacity(splits.len());
    for split in splits {
        if split.records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let preds: Vec<Vec<f64>> = if estimator.carries_state() {
            let Estimator::Ttt { meta, cfg } = estimator else {
                unreachable!("only TTT carries state")
            };
            ttt::run_episodes(&split.records, meta, cfg)?
        } else {
            split
                .records
                .par_iter()
                .map(|r| estimator.predict(r))
                .collect::<Result<_>>()?
        };
        let scores = split
            .records
            .iter()
            .zip(preds)
            .map(|(r, p)| {
                let voc = spearman_voc(&p)?;
                Ok(TrajectoryScore {
                    id: r.id.clone(),
                    voc: voc.value,
                    degenerate: voc.degenerate,
                    predictions: p,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let valid: Vec<f64> = scores.iter().filter(|s| !s.degenerate).map(|s| s.voc).collect();
        let mean_voc = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        datasets.push(DatasetReport {
            split: split.name.clone(),
            dataset: dataset_name(split),
            shift: split.shift,
            mean_voc,
            trajectories: scores.len(),
            degenerate: scores.len() - valid.len(),
            scores,
        });
    }
    Ok(EvalReport {
        estimator: estimator.name(),
        datasets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Markdown,
    Json,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "md" | "markdown" => Ok(Format::Markdown),
            "json" => Ok(Format::Json),
            _ => Err(Error::InvalidConfig(format!("unknown format {s:?}"))),
        }
    }
}

/// Rows `(dataset, shift)` by estimator columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub estimators: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub dataset: String,
    pub shift: Shift,
    pub values: Vec<Option<f64>>,
}

impl Table {
    /// Rows follow first appearance across the reports.
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let mut keys: Vec<(String, Shift)> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (col, report) in reports.iter().enumerate() {
            for d in &report.datasets {
                let key = (d.dataset.clone(), d.shift);
                let row = match keys.iter().position(|k| *k == key) {
                    Some(r) => r,
                    None => {
                        keys.push(key);
                        keys.len() - 1
                    }
                };
                cells.insert((row, col), d.mean_voc);
            }
        }
        let rows = keys
            .into_iter()
            .enumerate()
            .map(|(r, (dataset, shift))| TableRow {
                dataset,
                shift,
                values: (0..reports.len()).map(|c| cells.get(&(r, c)).copied()).collect(),
            })
            .collect();
        Table {
            estimators: reports.iter().map(|r| r.estimator.clone()).collect(),
            rows,
        }
    }

    pub fn render_tsv(&self) -> String {
        let mut s = String::from("dataset\tshift");
        for e in &self.estimators {
            write!(s, "\t{e}").expect("string write");
        }
        s.push('\n');
        for row in &self.rows {
            write!(s, "{}\t{}", row.dataset, row.shift).expect("string write");
            for v in &row.values {
                match v {
                    Some(v) => write!(s, "\t{v:.4}"),
                    None => write!(s, "\t-"),
                }
                .expect("string write");
            }
            s.push('\n');
        }
        s
    }

    /// Markdown table with the best value of each row in bold.
    pub fn render_markdown(&self) -> String {
        let mut s = String::from("| Dataset | Shift |");
        for e in &self.estimators {
            write!(s, " {e} |").expect("string write");
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---:|".repeat(self.estimators.len()));
        s.push('\n');
        for row in &self.rows {
            let best = row.values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            write!(s, "| {} | {} |", row.dataset, row.shift).expect("string write");
            for v in &row.values {
                match v {
                    Some(v) if *v == best => write!(s, " **{v:.4}** |"),
                    Some(v) => write!(s, " {v:.4} |"),
                    None => write!(s, " - |"),
                }
                .expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// Renders reports in the requested format; JSON keeps per-trajectory scores.
pub fn render(reports: &[EvalReport], format: Format) -> String {
    match format {
        Format::Tsv => Table::from_reports(reports).render_tsv(),
        Format::Markdown => Table::from_reports(reports).render_markdown(),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            s
        }
    }
}

/// Parses reports written with [`Format::Json`].
pub fn parse_reports(text: &str) -> Result<Vec<EvalReport>> {
    serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("malformed report JSON: {e}")))
}

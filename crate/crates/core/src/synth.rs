//! Seeded synthetic demonstrations with environment and embodiment shifts.
//!
//! A frame of task `k` at progress `p` is
//!
//! ```text
//! v = R_emb (A_env u_k(p) + b_env + n_t)
//! u_k(p) = s + p^gamma (g_k - s)
//! ```
//!
//! where `g_k` is the task's goal embedding, `s` a per-rollout start state
//! near the task's start, `gamma` a per-rollout pacing exponent, and `n_t`
//! stationary AR(1) noise. `A_env`, `b_env` mix and offset the scene;
//! `R_emb` is an orthogonal observation transform.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KeyValueConfig};
use crate::data::{save_container, save_vector, Manifest, Shift, SplitEntry, TrajectoryRecord, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Encoder dimension `d`.
    pub dim: usize,
    pub tasks: usize,
    pub train_envs: usize,
    pub shift_envs: usize,
    pub train_embodiments: usize,
    pub shift_embodiments: usize,
    pub train_trajectories: usize,
    /// Trajectories in each evaluation split.
    pub eval_trajectories: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Expected norm of the stationary noise vector.
    pub noise_scale: f64,
    /// AR(1) coefficient of the noise.
    pub noise_corr: f64,
    /// Spread of the mixing matrices around the identity.
    pub env_scale: f64,
    /// Expected norm of the per-environment offset.
    pub background_scale: f64,
    /// Largest Givens angle (radians) of an embodiment transform.
    pub embodiment_angle: f64,
    /// Expected norm of the per-rollout start perturbation.
    pub start_jitter: f64,
    /// Pacing exponents are `exp(U(-pace_jitter, pace_jitter))`.
    pub pace_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            tasks: 6,
            train_envs: 4,
            shift_envs: 3,
            train_embodiments: 2,
            shift_embodiments: 2,
            train_trajectories: 192,
            eval_trajectories: 48,
            min_len: 16,
            max_len: 48,
            noise_scale: 1.0,
            noise_corr: 0.6,
            env_scale: 0.5,
            background_scale: 0.5,
            embodiment_angle: 0.8,
            start_jitter: 0.3,
            pace_jitter: 0.4,
            seed: 42,
        }
    }
}

impl KeyValueConfig for SynthSpec {
    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<bool> {
        match key {
            "dim" => self.dim = parse_value(key, v, line)?,
            "tasks" => self.tasks = parse_value(key, v, line)?,
            "train_envs" => self.train_envs = parse_value(key, v, line)?,
            "shift_envs" => self.shift_envs = parse_value(key, v, line)?,
            "train_embodiments" => self.train_embodiments = parse_value(key, v, line)?,
            "shift_embodiments" => self.shift_embodiments = parse_value(key, v, line)?,
            "train_trajectories" => self.train_trajectories = parse_value(key, v, line)?,
            "eval_trajectories" => self.eval_trajectories = parse_value(key, v, line)?,
            "min_len" => self.min_len = parse_value(key, v, line)?,
            "max_len" => self.max_len = parse_value(key, v, line)?,
            "noise_scale" => self.noise_scale = parse_value(key, v, line)?,
            "noise_corr" => self.noise_corr = parse_value(key, v, line)?,
            "env_scale" => self.env_scale = parse_value(key, v, line)?,
            "background_scale" => self.background_scale = parse_value(key, v, line)?,
            "embodiment_angle" => self.embodiment_angle = parse_value(key, v, line)?,
            "start_jitter" => self.start_jitter = parse_value(key, v, line)?,
            "pace_jitter" => self.pace_jitter = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.tasks == 0 || self.train_envs == 0 || self.shift_envs == 0 {
            return fail("tasks and environment counts must be >= 1".into());
        }
        if self.train_embodiments == 0 || self.shift_embodiments == 0 {
            return fail("embodiment counts must be >= 1".into());
        }
        if self.train_trajectories == 0 || self.eval_trajectories == 0 {
            return fail("trajectory counts must be >= 1".into());
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return fail(format!(
                "length range [{}, {}] must satisfy 2 <= min_len <= max_len",
                self.min_len, self.max_len
            ));
        }
        let non_negative = [
            ("noise_scale", self.noise_scale),
            ("env_scale", self.env_scale),
            ("background_scale", self.background_scale),
            ("embodiment_angle", self.embodiment_angle),
            ("start_jitter", self.start_jitter),
            ("pace_jitter", self.pace_jitter),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.noise_corr > -1.0 && self.noise_corr < 1.0) {
            return fail(format!("noise_corr must lie in (-1, 1), got {}", self.noise_corr));
        }
        Ok(())
    }

    fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        line("dim", self.dim.to_string());
        line("tasks", self.tasks.to_string());
        line("train_envs", self.train_envs.to_string());
        line("shift_envs", self.shift_envs.to_string());
        line("train_embodiments", self.train_embodiments.to_string());
        line("shift_embodiments", self.shift_embodiments.to_string());
        line("train_trajectories", self.train_trajectories.to_string());
        line("eval_trajectories", self.eval_trajectories.to_string());
        line("min_len", self.min_len.to_string());
        line("max_len", self.max_len.to_string());
        line("noise_scale", self.noise_scale.to_string());
        line("noise_corr", self.noise_corr.to_string());
        line("env_scale", self.env_scale.to_string());
        line("background_scale", self.background_scale.to_string());
        line("embodiment_angle", self.embodiment_angle.to_string());
        line("start_jitter", self.start_jitter.to_string());
        line("pace_jitter", self.pace_jitter.to_string());
        line("seed", self.seed.to_string());
        s
    }
}

impl SynthSpec {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }
}

/// Scene mixing `A_env` and offset `b_env`.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub mixing: Matrix,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

/// Provenance of one generated trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutInfo {
    pub task: usize,
    pub env: usize,
    pub embodiment: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplit {
    pub name: String,
    pub shift: Option<Shift>,
    pub records: Vec<TrajectoryRecord>,
    pub info: Vec<RolloutInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthBundle {
    pub spec: SynthSpec,
    pub tasks: Vec<Task>,
    /// Training environments first, then the held-out ones.
    pub environments: Vec<Environment>,
    /// Training embodiments first, then the held-out ones.
    pub embodiments: Vec<Matrix>,
    /// `train`, `id`, `es`, `em`, `es_em`.
    pub splits: Vec<SynthSplit>,
    /// Reference-prompt embedding: the normalized mean goal direction.
    pub baseline: Vec<f32>,
}

impl SynthBundle {
    pub fn split(&self, name: &str) -> Option<&SynthSplit> {
        self.splits.iter().find(|s| s.name == name)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Product of `2 d` Givens rotations over random coordinate pairs.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize, max_angle: f64) -> Matrix {
    let mut r = Matrix::identity(d);
    if max_angle == 0.0 {
        return r;
    }
    for _ in 0..2 * d {
        let i = rng.random_range(0..d);
        let mut j = rng.random_range(0..d - 1);
        if j >= i {
            j += 1;
        }
        let angle = rng.random_range(-max_angle..=max_angle);
        let (c, s) = (angle.cos(), angle.sin());
        for col in 0..d {
            let (a, b) = (r.get(i, col), r.get(j, col));
            r.set(i, col, c * a - s * b);
            r.set(j, col, s * a + c * b);
        }
    }
    r
}

fn environment(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Environment {
    let d = spec.dim;
    let std = spec.env_scale / (d as f64).sqrt();
    let noise = gaussian_vec(rng, d * d, std);
    let mixing = Matrix::from_fn(d, d, |i, j| f64::from(i == j) + noise[i * d + j]);
    let offset = gaussian_vec(rng, d, spec.background_scale / (d as f64).sqrt());
    Environment { mixing, offset }
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn rollout(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    task: &Task,
    env: &Environment,
    embodiment: &Matrix,
) -> (Vec<f32>, usize) {
    let d = spec.dim;
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let jitter = gaussian_vec(rng, d, spec.start_jitter / (d as f64).sqrt());
    let start: Vec<f64> = task.start.iter().zip(&jitter).map(|(s, j)| s + j).collect();
    let gamma = if spec.pace_jitter > 0.0 {
        rng.random_range(-spec.pace_jitter..=spec.pace_jitter).exp()
    } else {
        1.0
    };
    let sigma = spec.noise_scale / (d as f64).sqrt();
    let rho = spec.noise_corr;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut noise = gaussian_vec(rng, d, sigma);
    let mut visual = Vec::with_capacity(len * d);
    for t in 1..=len {
        if t > 1 {
            let fresh = gaussian_vec(rng, d, sigma);
            for (n, f) in noise.iter_mut().zip(fresh) {
                *n = rho * *n + innovation * f;
            }
        }
        let psi = (t as f64 / len as f64).powf(gamma);
        let u: Vec<f64> = start.iter().zip(&task.goal).map(|(s, g)| s + psi * (g - s)).collect();
        let scene: Vec<f64> = mat_vec(&env.mixing, &u)
            .iter()
            .zip(&env.offset)
            .zip(&noise)
            .map(|((a, b), n)| a + b + n)
            .collect();
        visual.extend(mat_vec(embodiment, &scene).iter().map(|&x| x as f32));
    }
    (visual, len)
}

/// Split name, shift tag, allowed environments, allowed embodiments, rollout count.
type SplitLayout<'a> = (&'a str, Option<Shift>, &'a [usize], &'a [usize], usize);

/// Generates the full bundle. Identical specs give identical bundles.
pub fn generate(spec: &SynthSpec) -> Result<SynthBundle> {
    spec.check()?;
    let mut rng = stream(spec.seed, Stream::Synth);
    let d = spec.dim;
    // goal = C * one_hot(task): the task's column of a random code matrix
    let code = Matrix::from_fn(d, spec.tasks, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let tasks: Vec<Task> = (0..spec.tasks)
        .map(|k| {
            let col: Vec<f64> = (0..d).map(|i| code.get(i, k)).collect();
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            Task {
                goal: col.iter().map(|x| x / norm).collect(),
                start: unit_vec(&mut rng, d),
            }
        })
        .collect();
    let n_env = spec.train_envs + spec.shift_envs;
    let environments: Vec<Environment> = (0..n_env).map(|_| environment(&mut rng, spec)).collect();
    let n_emb = spec.train_embodiments + spec.shift_embodiments;
    let embodiments: Vec<Matrix> = (0..n_emb)
        .map(|_| random_rotation(&mut rng, d, spec.embodiment_angle))
        .collect();

    let train_envs: Vec<usize> = (0..spec.train_envs).collect();
    let shift_envs: Vec<usize> = (spec.train_envs..n_env).collect();
    let train_embs: Vec<usize> = (0..spec.train_embodiments).collect();
    let shift_embs: Vec<usize> = (spec.train_embodiments..n_emb).collect();
    let layout: [SplitLayout; 5] = [
        (TRAIN_SPLIT, None, &train_envs, &train_embs, spec.train_trajectories),
        (
            "id",
            Some(Shift::InDistribution),
            &train_envs,
            &train_embs,
            spec.eval_trajectories,
        ),
        (
            "es",
            Some(Shift::Environment),
            &shift_envs,
            &train_embs,
            spec.eval_trajectories,
        ),
        (
            "em",
            Some(Shift::Embodiment),
            &train_envs,
            &shift_embs,
            spec.eval_trajectories,
        ),
        (
            "es_em",
            Some(Shift::EnvironmentEmbodiment),
            &shift_envs,
            &shift_embs,
            spec.eval_trajectories,
        ),
    ];
    let mut splits = Vec::with_capacity(layout.len());
    for (name, shift, envs, embs, count) in layout {
        let mut records = Vec::with_capacity(count);
        let mut info = Vec::with_capacity(count);
        for i in 0..count {
            let ro = RolloutInfo {
                task: i % spec.tasks,
                env: envs[rng.random_range(0..envs.len())],
                embodiment: embs[rng.random_range(0..embs.len())],
            };
            let task = &tasks[ro.task];
            let (visual, len) = rollout(&mut rng, spec, task, &environments[ro.env], &embodiments[ro.embodiment]);
            let goal: Vec<f32> = task.goal.iter().map(|&x| x as f32).collect();
            let record = TrajectoryRecord::new(
                format!("{name}-{i:04}"),
                format!("task {}", ro.task),
                format!("synth_{name}"),
                goal,
                visual,
                Some(TrajectoryRecord::progress_labels(len)),
            )?;
            records.push(record);
            info.push(ro);
        }
        splits.push(SynthSplit {
            name: name.to_string(),
            shift,
            records,
            info,
        });
    }
    let mut mean = vec![0.0; d];
    for t in &tasks {
        for (m, g) in mean.iter_mut().zip(&t.goal) {
            *m += g;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let baseline = mean.iter().map(|x| (x / norm) as f32).collect();
    Ok(SynthBundle {
        spec: spec.clone(),
        tasks,
        environments,
        embodiments,
        splits,
        baseline,
    })
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BASELINE_FILE: &str = "baseline.ttpv";
pub const SPEC_FILE: &str = "synth_spec.txt";

/// Writes every split as a container, the baseline vector, the spec and a
/// manifest into `dir`. Returns the manifest path.
pub fn write_bundle(bundle: &SynthBundle, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for split in &bundle.splits {
        let path = dir.join(format!("{}.ttpe", split.name));
        save_container(&path, &split.records)?;
        manifest.splits.push(SplitEntry {
            name: split.name.clone(),
            path,
            shift: split.shift.unwrap_or(Shift::InDistribution),
        });
    }
    let baseline = dir.join(BASELINE_FILE);
    save_vector(&baseline, &bundle.baseline)?;
    manifest.baseline = Some(baseline);
    fs::write(dir.join(SPEC_FILE), bundle.spec.render())?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.render(dir))?;
    Ok(manifest_path)
}

//! The `run` and `bounds` commands: execute a config and write its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use gmeta::data::{partition_dirichlet, ClientDataset};
use gmeta::fedsim::run_experiment_with;
use gmeta::nn::ModelSpec;
use rayon::prelude::*;

use crate::bounds::{compute_bounds, BoundsFile};
use crate::config::{ExperimentConfig, Manifest, ModelConfig};
use crate::metrics::{write_rows, MetricsRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BOUNDS_FILE: &str = "bounds.json";

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Overrides `output.dir`.
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub force: bool,
    /// Print per-run progress on standard error.
    pub progress: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out: None,
            workers: 1,
            force: false,
            progress: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub bounds: Option<BoundsFile>,
}

/// Files written into an output directory; removed again on drop unless
/// the write completed.
struct OutputGuard {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    done: bool,
}

impl OutputGuard {
    fn open(dir: &Path, names: &[&str], force: bool) -> anyhow::Result<Self> {
        let existing: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).filter(|p| p.exists()).collect();
        if !existing.is_empty() {
            if !force {
                bail!(
                    "{} already contains {}; pass --force to overwrite",
                    dir.display(),
                    existing
                        .iter()
                        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                        .collect::<Vec<_>>()
                        .join(", ")
                );
            }
            for p in &existing {
                fs::remove_file(p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            done: false,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        self.files.push(path.clone());
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    fn commit(mut self) {
        self.done = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> anyhow::Result<PathBuf> {
    match opts.out.clone().or_else(|| cfg.output.dir.clone()) {
        Some(d) => Ok(d),
        None => bail!("no output directory: pass --out or set output.dir"),
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    clients: &[ClientDataset],
    seed: u64,
    scenario: usize,
    workers: usize,
) -> anyhow::Result<Vec<MetricsRow>> {
    let s = &cfg.scenarios[scenario];
    let fed = cfg.fed_config(s, seed, workers);
    let start = Instant::now();
    let mut rows = Vec::with_capacity((fed.rounds + 1) * s.eval_nu.len());
    run_experiment_with(spec, clients, &fed, |rec| {
        let wall_ms = if cfg.output.timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        for e in &rec.evaluations {
            rows.push(MetricsRow {
                seed,
                engine: s.label.clone(),
                round: rec.round,
                eval_nu: e.eval_nu,
                mean_accuracy: e.mean_accuracy,
                wall_ms,
            });
        }
    })
    .with_context(|| format!("seed {seed}, scenario {:?}", s.label))?;
    Ok(rows)
}

/// Every seed × scenario run, rows ordered by seed, then scenario, round and
/// eval_nu regardless of how many workers ran them.
pub fn execute(cfg: &ExperimentConfig, workers: usize, progress: bool) -> anyhow::Result<Vec<MetricsRow>> {
    if let ModelConfig::Quadratic { .. } = cfg.model {
        bail!("model.kind: quadratic models have no accuracy; use the bounds command");
    }
    let workers = workers.max(1);
    let master = cfg.load_master().context("loading dataset")?;
    let spec = cfg.model_spec(master.n_features(), master.classes())?;
    let partitions: Vec<Vec<ClientDataset>> = cfg
        .seeds
        .iter()
        .map(|&seed| partition_dirichlet(&master, &cfg.partition_config(seed)))
        .collect::<gmeta::Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.seeds.len())
        .flat_map(|i| (0..cfg.scenarios.len()).map(move |j| (i, j)))
        .collect();
    let outer = workers.min(jobs.len());
    let inner = (workers / outer).max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(outer).build()?;
    let results: Vec<anyhow::Result<Vec<MetricsRow>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, j)| {
                let seed = cfg.seeds[i];
                let rows = run_one(cfg, &spec, &partitions[i], seed, j, inner)?;
                if progress {
                    let last: Vec<String> = rows
                        .iter()
                        .rev()
                        .take(cfg.scenarios[j].eval_nu.len())
                        .rev()
                        .map(|r| format!("eval_nu={} acc={:.4}", r.eval_nu, r.mean_accuracy))
                        .collect();
                    eprintln!("seed {seed} {}: {}", cfg.scenarios[j].label, last.join(" "));
                }
                Ok(rows)
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Runs the config and writes metrics.csv, manifest.json and, when the
/// theory section is enabled, bounds.json.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> anyhow::Result<RunOutcome> {
    let dir = output_dir(cfg, opts)?;
    let mut guard = OutputGuard::open(&dir, &[METRICS_FILE, MANIFEST_FILE, BOUNDS_FILE], opts.force)?;
    let manifest = serde_json::to_string_pretty(&Manifest::new(cfg.clone()))?;
    guard.write(MANIFEST_FILE, manifest.as_bytes())?;
    let rows = execute(cfg, opts.workers, opts.progress)?;
    let mut csv = Vec::new();
    write_rows(&mut csv, &rows)?;
    guard.write(METRICS_FILE, &csv)?;
    let bounds = if cfg.theory.enabled {
        let b = compute_bounds(cfg)?;
        guard.write(BOUNDS_FILE, serde_json::to_string_pretty(&b)?.as_bytes())?;
        Some(b)
    } else {
        None
    };
    guard.commit();
    Ok(RunOutcome { dir, rows, bounds })
}

/// Writes bounds.json only.
pub fn report_bounds(cfg: &ExperimentConfig, opts: &RunOptions) -> anyhow::Result<(PathBuf, BoundsFile)> {
    let dir = output_dir(cfg, opts)?;
    let mut guard = OutputGuard::open(&dir, &[BOUNDS_FILE], opts.force)?;
    let b = compute_bounds(cfg)?;
    guard.write(BOUNDS_FILE, serde_json::to_string_pretty(&b)?.as_bytes())?;
    guard.commit();
    Ok((dir.join(BOUNDS_FILE), b))
}

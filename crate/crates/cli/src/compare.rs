//! The `compare` command: final accuracy across seeds and a
//! convergence-speed proxy per scenario.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context};

use crate::metrics::{read_rows, MetricsRow};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub file: String,
    pub engine: String,
    pub eval_nu: usize,
    pub seeds: usize,
    pub final_mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub final_std: f64,
    /// First round whose seed-mean accuracy reaches the target.
    pub first_round: Option<usize>,
}

/// Accuracy by round, per seed.
type SeedCurves = BTreeMap<u64, Vec<(usize, f64)>>;

fn summarize(file: &str, rows: &[MetricsRow], target: f64) -> anyhow::Result<(usize, Vec<SummaryRow>)> {
    let mut groups: BTreeMap<(String, usize), SeedCurves> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.engine.clone(), r.eval_nu))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r.round, r.mean_accuracy));
    }
    if groups.is_empty() {
        bail!("{file}: no metrics rows");
    }
    let mut rounds = None;
    let mut out = Vec::new();
    for ((engine, eval_nu), seeds) in groups {
        let mut curves = Vec::new();
        for (seed, mut points) in seeds {
            points.sort_by_key(|p| p.0);
            let contiguous = points.iter().enumerate().all(|(i, p)| p.0 == i);
            if !contiguous {
                bail!("{file}: rounds for seed {seed}, {engine}, eval_nu={eval_nu} are not contiguous from 0");
            }
            let k = points.len() - 1;
            match rounds {
                None => rounds = Some(k),
                Some(prev) if prev != k => {
                    bail!("{file}: {engine} eval_nu={eval_nu} seed {seed} has K={k}, expected K={prev}")
                }
                _ => {}
            }
            curves.push(points.into_iter().map(|p| p.1).collect::<Vec<f64>>());
        }
        let n = curves.len() as f64;
        let k = rounds.unwrap_or(0);
        let mean_at = |t: usize| curves.iter().map(|c| c[t]).sum::<f64>() / n;
        let final_mean = mean_at(k);
        let final_std = if curves.len() > 1 {
            (curves.iter().map(|c| (c[k] - final_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.push(SummaryRow {
            file: file.to_string(),
            engine,
            eval_nu,
            seeds: curves.len(),
            final_mean,
            final_std,
            first_round: (0..=k).find(|&t| mean_at(t) >= target),
        });
    }
    out.sort_by(|a, b| b.final_mean.total_cmp(&a.final_mean));
    Ok((rounds.unwrap_or(0), out))
}

/// Summaries for every metrics file, each file's rows sorted by final mean
/// accuracy, best first. All files must share the same round count K.
pub fn compare(paths: &[PathBuf], target: f64) -> anyhow::Result<Vec<SummaryRow>> {
    if paths.is_empty() {
        bail!("compare needs at least one metrics file");
    }
    let mut all = Vec::new();
    let mut k_seen: Option<(usize, String)> = None;
    for p in paths {
        let name = p.display().to_string();
        let f = File::open(p).with_context(|| format!("opening {name}"))?;
        let rows = read_rows(f).with_context(|| format!("reading {name}"))?;
        let (k, summary) = summarize(&name, &rows, target)?;
        match &k_seen {
            None => k_seen = Some((k, name)),
            Some((k0, first)) if *k0 != k => bail!("mismatched round counts: {first} has K={k0}, {name} has K={k}"),
            _ => {}
        }
        all.extend(summary);
    }
    Ok(all)
}

pub fn render(rows: &[SummaryRow], target: f64) -> String {
    let mut s = String::new();
    let reach = format!("first>={target}");
    let _ = writeln!(
        s,
        "{:<28} {:<20} {:>7} {:>5} {:>10} {:>9} {:>12}",
        "file", "engine", "eval_nu", "seeds", "final_mean", "final_std", reach
    );
    for r in rows {
        let first = r.first_round.map_or_else(|| "-".to_string(), |k| k.to_string());
        let _ = writeln!(
            s,
            "{:<28} {:<20} {:>7} {:>5} {:>10.4} {:>9.4} {:>12}",
            r.file, r.engine, r.eval_nu, r.seeds, r.final_mean, r.final_std, first
        );
    }
    s
}

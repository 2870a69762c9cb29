//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line with
//! its measurement and runtime; the process exits non-zero if any fails.
//! Runs as a plain binary so the lines appear without `--nocapture`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gmeta::data::{generate_synthetic, partition_dirichlet, ClientDataset, PartitionConfig};
use gmeta::linalg::{self, distance, mat_vec, norm};
use gmeta::metagrad::{
    exact_local_update, exact_meta_gradient_oracle, fo_local_update, hf_local_update, local_update, meta_loss,
    BatchPlan, Engine, FullBatches, HessianApplication, HyperParams, LocalStreams, StochasticBatches,
};
use gmeta::nn::{ModelParams, ModelSpec};
use gmeta::rng::{Purpose, RngStream};
use gmeta::theory::{
    estimate_constants_at, fo_moments, fourth_moment_bound, hessian_noise, hf_moments, hf_truncation_bias,
    meta_grad_moments_exact, model_error_bounds, report::bound_row, smoothness_lf, Moments, ProbeConfig,
    TheoremSetting, TheoryConstants,
};
use gmeta_cli::compare::{compare, render};
use gmeta_cli::metrics::MetricsRow;
use gmeta_cli::run::{execute, run, RunOptions, METRICS_FILE};
use gmeta_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = fn() -> Result<String, String>;

fn preset(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn client(features: usize, classes: usize, samples: usize, seed: u64) -> ClientDataset {
    let master = generate_synthetic(features, classes, 0.2, 4 * samples, seed).unwrap();
    let mut cfg = PartitionConfig::new(1, 1.0, seed);
    cfg.samples_per_client = samples;
    partition_dirichlet(&master, &cfg).unwrap().remove(0)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    distance(a, b) / norm(b)
}

fn meta_gradient_matches_finite_differences() -> Result<String, String> {
    let spec = ModelSpec::mlp(6, &[10, 8], 4).unwrap();
    if spec.dim() > 200 {
        return Err(format!("model too large: d={}", spec.dim()));
    }
    let c = client(6, 4, 80, 21);
    let w = spec.init_params(5);
    let alpha = 0.4;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for nu in 1..=3 {
        let g = exact_meta_gradient_oracle(&spec, &w, &c.train, alpha, nu, 512).map_err(|e| e.to_string())?;
        let fd: Vec<f64> = (0..w.dim())
            .map(|j| {
                let mut p = w.values().to_vec();
                let mut m = p.clone();
                p[j] += h;
                m[j] -= h;
                let lp = meta_loss(&spec, &w.with_values(p).unwrap(), &c.train, alpha, nu).unwrap();
                let lm = meta_loss(&spec, &w.with_values(m).unwrap(), &c.train, alpha, nu).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel(&g, &fd));
    }
    let msg = format!(
        "d={}, nu=1..3, worst relative error {worst:.2e} (limit 1e-5)",
        spec.dim()
    );
    if worst <= 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn quadratic_closed_forms() -> Result<String, String> {
    let d = 50;
    let alpha = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let x = rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt();
            a[i * d + j] = x;
            a[j * d + i] = x;
        }
    }
    let spec = ModelSpec::quadratic(a.clone(), vec![0.0; d]).unwrap();
    let w0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let w = spec.init_params(0).with_values(w0.clone()).unwrap();
    let batch = client(2, 2, 10, 1).train;
    // A(I − αA)^k w
    let closed = |k: usize| {
        let mut v = w0.clone();
        for _ in 0..k {
            let av = mat_vec(&a, &v);
            v = linalg::add_scaled(&v, -alpha, &av);
        }
        mat_vec(&a, &v)
    };
    let (mut e_exact, mut e_fo, mut e_hf) = (0.0f64, 0.0f64, 0.0f64);
    for nu in 1..=5 {
        let mut hp = HyperParams::new(alpha, 0.1, nu, 1, 1);
        let want = closed(2 * nu);
        for mode in [HessianApplication::Dense, HessianApplication::Hvp] {
            let got = exact_local_update(&spec, &w, &hp, mode, &mut FullBatches(&batch)).unwrap();
            e_exact = e_exact.max(rel(&got.direction, &want));
        }
        let fo = fo_local_update(&spec, &w, &hp, &mut FullBatches(&batch)).unwrap();
        e_fo = e_fo.max(rel(&fo.direction, &closed(nu)));
        for delta in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1] {
            hp.delta = delta;
            let hf = hf_local_update(&spec, &w, &hp, &mut FullBatches(&batch)).unwrap();
            e_hf = e_hf.max(rel(&hf.direction, &want));
        }
    }
    let msg = format!(
        "d={d}, nu<=5: exact {e_exact:.1e} (1e-12), first-order {e_fo:.1e} (1e-12), hessian-free {e_hf:.1e} (1e-10)"
    );
    if e_exact <= 1e-12 && e_fo <= 1e-12 && e_hf <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn hessian_free_error_scaling() -> Result<String, String> {
    let spec = ModelSpec::mlp(5, &[8], 3).unwrap();
    let c = client(5, 3, 100, 8);
    let w = spec.init_params(4);
    let mut hp = HyperParams::new(0.5, 0.1, 3, 1, 1);
    let exact = exact_local_update(&spec, &w, &hp, HessianApplication::Hvp, &mut FullBatches(&c.train))
        .unwrap()
        .direction;
    let mut errors = Vec::new();
    for delta in [1e-2, 5e-3, 2.5e-3, 1.25e-3] {
        hp.delta = delta;
        let hf = hf_local_update(&spec, &w, &hp, &mut FullBatches(&c.train))
            .unwrap()
            .direction;
        errors.push(distance(&hf, &exact));
    }
    let ratios: Vec<f64> = errors.windows(2).map(|p| p[0] / p[1]).collect();
    let msg = format!(
        "errors {:?}, ratios per halving {:?} (limit >= 1.5)",
        errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
    );
    if ratios.iter().all(|&r| r >= 1.5) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bias_and_variance_within_bounds() -> Result<String, String> {
    const DRAWS: usize = 6000;
    let spec = ModelSpec::mlp(4, &[6], 3).unwrap();
    let c = client(4, 3, 200, 12);
    let w = spec.init_params(3);
    let alpha = 0.3;
    let nu = 2;
    let batch = 8;
    let mut hp = HyperParams::new(alpha, 0.1, nu, 1, batch);
    hp.delta = 1e-3;
    let truth = exact_meta_gradient_oracle(&spec, &w, &c.train, alpha, nu, 512).map_err(|e| e.to_string())?;
    let mut probe = ProbeConfig::new(8, 3);
    probe.sample_cap = c.train.len();
    probe.hessian_samples = c.train.len();
    probe.radius = 0.25;
    let k = estimate_constants_at(&spec, std::slice::from_ref(&c), &w, &probe).map_err(|e| e.to_string())?;
    let plan = BatchPlan::uniform(nu, batch);
    let bounds: [(Engine, Moments); 3] = [
        (Engine::Exact, meta_grad_moments_exact(&k, alpha, &plan).unwrap()),
        (Engine::FirstOrder, fo_moments(&k, alpha, &plan).unwrap()),
        (Engine::HessianFree, hf_moments(&k, alpha, hp.delta, &plan).unwrap()),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (engine, bound) in bounds {
        let mut mean = vec![0.0; spec.dim()];
        let mut mse = 0.0;
        for draw in 0..DRAWS {
            let mut streams = LocalStreams {
                grad: RngStream::derive(99, draw as u64, 0, Purpose::GradientBatches),
                hess: RngStream::derive(99, draw as u64, 0, Purpose::HessianBatches),
            };
            let mut src = StochasticBatches {
                client: &c,
                plan: &hp.batch_plan,
                streams: &mut streams,
            };
            let t =
                local_update(&spec, &w, &hp, engine, HessianApplication::Dense, &mut src).map_err(|e| e.to_string())?;
            mean.iter_mut()
                .zip(&t.direction)
                .for_each(|(m, x)| *m += x / DRAWS as f64);
            mse += distance(&t.direction, &truth).powi(2) / DRAWS as f64;
        }
        let bias = distance(&mean, &truth);
        let pass = bias <= 1.5 * bound.bias && mse <= 1.5 * bound.second_moment;
        ok &= pass;
        lines.push(format!(
            "{}: bias {bias:.3e} vs bound {:.3e}, mse {mse:.3e} vs bound {:.3e}",
            engine.name(),
            bound.bias,
            bound.second_moment
        ));
    }
    let msg = format!("{DRAWS} draws each; {}", lines.join("; "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn theory_spot_checks() -> Result<String, String> {
    let c = TheoryConstants {
        b: 2.0,
        l: 3.0,
        rho: 0.7,
        sigma_g: 1.3,
        sigma_h: 0.9,
        kappa_g: 5.0,
        kappa_h: 2.0,
        gamma_g: 0.4,
        gamma_h: 0.6,
    };
    let alpha = 0.05;
    let mut failures = Vec::new();
    let lf1 = smoothness_lf(&c, alpha, 1);
    let want = c.l * (1.0 + alpha * c.l).powi(2) + c.b * alpha * c.rho;
    if (lf1 - want).abs() > 1e-15 * want {
        failures.push(format!("L_F(1) {lf1} != {want}"));
    }
    let plan = BatchPlan {
        d_sizes: vec![10, 20, 30],
        dprime_sizes: vec![7, 11],
    };
    let errs = model_error_bounds(&c, alpha, &plan).unwrap();
    let h1 = alpha * c.sigma_g / 10f64.sqrt();
    if (errs.h[1] - h1).abs() > 1e-15 * h1 {
        failures.push(format!("h_1 {} != {h1}", errs.h[1]));
    }
    let noise = hessian_noise(&c, alpha, &plan, &errs).unwrap();
    let d1 = alpha * alpha * c.sigma_h * c.sigma_h / 7.0;
    if (noise.d[1] - d1).abs() > 1e-15 * d1 {
        failures.push(format!("d_1 {} != {d1}", noise.d[1]));
    }
    if fourth_moment_bound(0.0, 1.0, 4) != 9.0 / 64.0 {
        failures.push("fourth_moment_bound(0,1,4) != 9/64".into());
    }
    let q = |delta: f64| hf_truncation_bias(&c, alpha, delta, 3).unwrap();
    let slope = q(1e-3) / 1e-3;
    if [1e-6, 1e-2, 0.5]
        .iter()
        .any(|&d| (q(d) - slope * d).abs() > 1e-12 * q(d))
    {
        failures.push("q not linear in delta".into());
    }
    let setting = TheoremSetting {
        beta: 1e-3,
        tau: 4,
        rounds: 100,
        participation: 0.2,
        n_clients: 50,
        f0_gap: 2.0,
        big_o_const: 1.0,
    };
    let rows: Vec<_> = (1..=6)
        .map(|nu| bound_row(&c, alpha, 1e-3, &BatchPlan::uniform(nu, 40), &setting).unwrap())
        .collect();
    let columns = |r: &gmeta::theory::BoundRow| {
        vec![
            r.meta_smoothness,
            r.finetuned_model_error.h[r.nu],
            r.finetuned_model_error.h_sq[r.nu],
            r.finetuned_model_error.h_quad[r.nu],
            r.hessian_estimate_noise.d[r.nu],
            r.hessian_estimate_noise.d_quad[r.nu],
            r.meta_gradient_similarity.gamma_f_sq,
            r.meta_gradient_similarity.g_nu,
            r.exact.gradient_estimate.bias,
            r.exact.gradient_estimate.second_moment,
            r.exact.stationarity.rhs,
            r.first_order.gradient_estimate.bias,
            r.first_order.gradient_estimate.second_moment,
            r.first_order.stationarity.rhs,
            r.hessian_free.gradient_estimate.bias,
            r.hessian_free.gradient_estimate.second_moment,
            r.hessian_free.stationarity.rhs,
        ]
    };
    for pair in rows.windows(2) {
        let (a, b) = (columns(&pair[0]), columns(&pair[1]));
        if let Some(i) = (0..a.len()).find(|&i| b[i] < a[i]) {
            failures.push(format!(
                "column {i} decreases from nu={} to nu={}",
                pair[0].nu, pair[1].nu
            ));
        }
    }
    if failures.is_empty() {
        Ok("L_F(1), h_1, d_1, M(0,1,4)=9/64, q linear in delta, 17 bound columns monotone over nu=1..6".into())
    } else {
        Err(failures.join("; "))
    }
}

/// Final-round accuracy per (label, eval_nu) and seed.
fn finals(rows: &[MetricsRow]) -> BTreeMap<(String, usize), BTreeMap<u64, f64>> {
    let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
    let mut out: BTreeMap<(String, usize), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.round == last) {
        out.entry((r.engine.clone(), r.eval_nu))
            .or_default()
            .insert(r.seed, r.mean_accuracy);
    }
    out
}

fn print_table(cfg: &ExperimentConfig, rows: &[MetricsRow], name: &str) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    let mut csv = Vec::new();
    gmeta_cli::metrics::write_rows(&mut csv, rows).unwrap();
    std::fs::write(&path, csv).unwrap();
    let table = render(&compare(&[path], 0.8).unwrap(), 0.8);
    println!("    {} seeds, K={}", cfg.seeds.len(), cfg.federation.rounds);
    for line in table.lines() {
        println!("    {line}");
    }
}

fn ordered(f: &BTreeMap<(String, usize), BTreeMap<u64, f64>>, chain: [&str; 3], eval_nu: usize) -> (bool, String) {
    let get = |l: &str| &f[&(l.to_string(), eval_nu)];
    let seeds: Vec<u64> = get(chain[0]).keys().copied().collect();
    let mean = |l: &str| get(l).values().sum::<f64>() / seeds.len() as f64;
    let mut ok = true;
    let mut parts = Vec::new();
    for pair in chain.windows(2) {
        let (hi, lo) = (pair[0], pair[1]);
        let wins = seeds.iter().filter(|s| get(hi)[s] >= get(lo)[s]).count();
        let gap = mean(hi) - mean(lo);
        ok &= wins * 3 >= seeds.len() * 2 && gap >= 0.0;
        parts.push(format!("{hi}-{lo}: mean gap {gap:+.4}, >=0 in {wins}/{}", seeds.len()));
    }
    (ok, parts.join(", "))
}

fn fig1_ordering() -> Result<String, String> {
    let cfg = preset("fig1.json");
    if cfg.seeds.len() < 3 {
        return Err("fewer than 3 seeds".into());
    }
    let rows = execute(&cfg, 1, false).map_err(|e| format!("{e:#}"))?;
    print_table(&cfg, &rows, "fig1.csv");
    let f = finals(&rows);
    let (hf_ok, hf) = ordered(&f, ["gmeta_hf", "per_fedavg_hf", "fedavg"], 3);
    let (fo_ok, fo) = ordered(&f, ["gmeta_fo", "per_fedavg_fo", "fedavg"], 3);
    let msg = format!("hessian-free [{hf}]; first-order [{fo}]");
    if hf_ok && fo_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fig4_more_finetuning_steps_help() -> Result<String, String> {
    let mut cfg = preset("fig4.json");
    cfg.scenarios.retain(|s| s.label.ends_with("_b40"));
    let rows = execute(&cfg, 1, false).map_err(|e| format!("{e:#}"))?;
    print_table(&cfg, &rows, "fig4.csv");
    let f = finals(&rows);
    let mut ok = !cfg.scenarios.is_empty();
    let mut parts = Vec::new();
    for s in &cfg.scenarios {
        let mean = |nu: usize| {
            let m = &f[&(s.label.clone(), nu)];
            m.values().sum::<f64>() / m.len() as f64
        };
        let (one, three) = (mean(1), mean(3));
        ok &= three > one;
        parts.push(format!("{}: eval_nu=3 {three:.4} vs eval_nu=1 {one:.4}", s.label));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism_across_workers() -> Result<String, String> {
    let mut cfg = preset("fig1.json");
    cfg.federation.rounds = 25;
    cfg.seeds = vec![1, 2];
    cfg.scenarios.retain(|s| s.label == "fedavg" || s.label == "gmeta_hf");
    let workers = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name);
    let go = |cfg: &ExperimentConfig, path: PathBuf, workers: usize| {
        let opts = RunOptions {
            out: Some(path.clone()),
            workers,
            ..RunOptions::default()
        };
        run(cfg, &opts).map_err(|e| format!("{e:#}"))?;
        std::fs::read(path.join(METRICS_FILE)).map_err(|e| e.to_string())
    };
    let one = go(&cfg, out("w1"), 1)?;
    let many = go(&cfg, out("wn"), workers)?;
    let replay_cfg = ExperimentConfig::load(&out("w1").join("manifest.json")).map_err(|e| e.to_string())?;
    let replay = go(&replay_cfg, out("replay"), workers)?;
    let msg = format!(
        "{} bytes; 1 worker vs {workers} workers identical: {}; manifest replay identical: {}",
        one.len(),
        one == many,
        one == replay
    );
    if one == many && one == replay {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn batch_accounting() -> Result<String, String> {
    let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
    let c = client(3, 2, 50, 2);
    let w: ModelParams = spec.init_params(1);
    let mut seen = Vec::new();
    for nu in 0..=4 {
        for engine in [Engine::Exact, Engine::FirstOrder, Engine::HessianFree] {
            let hp = HyperParams::new(0.1, 0.1, nu, 1, 5);
            if hp.validate(engine).is_err() {
                continue;
            }
            let mut streams = LocalStreams {
                grad: RngStream::derive(1, 0, nu as u64, Purpose::GradientBatches),
                hess: RngStream::derive(1, 0, nu as u64, Purpose::HessianBatches),
            };
            let mut src = StochasticBatches {
                client: &c,
                plan: &hp.batch_plan,
                streams: &mut streams,
            };
            local_update(&spec, &w, &hp, engine, HessianApplication::Auto { cap: 512 }, &mut src)
                .map_err(|e| e.to_string())?;
            let want = match engine {
                Engine::FirstOrder => (nu + 1, 0),
                Engine::Exact | Engine::HessianFree => (nu + 1, nu),
            };
            let got = (streams.grad.batches_drawn(), streams.hess.batches_drawn());
            if got != want {
                return Err(format!("{} nu={nu}: drew {got:?}, expected {want:?}", engine.name()));
            }
            seen.push(format!("{}/{nu}={}", engine.name(), got.0 + got.1));
        }
    }
    Ok(format!("gradient + Hessian batches per update: {}", seen.join(" ")))
}

fn main() {
    let checks: [(&str, Check, u64); 9] = [
        (
            "meta-gradient vs finite differences",
            meta_gradient_matches_finite_differences,
            30,
        ),
        ("quadratic closed forms", quadratic_closed_forms, 5),
        ("hessian-free error scaling in delta", hessian_free_error_scaling, 60),
        (
            "monte-carlo bias and variance within bounds",
            bias_and_variance_within_bounds,
            600,
        ),
        ("theory formula spot checks", theory_spot_checks, 1),
        ("fig1 ordering gmeta >= per-fedavg >= fedavg", fig1_ordering, 2700),
        ("fig4 eval_nu=3 beats eval_nu=1", fig4_more_finetuning_steps_help, 900),
        ("determinism across worker counts", determinism_across_workers, 300),
        ("batch accounting per local update", batch_accounting, 5),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check, limit_s) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit_s);
        let (pass, detail) = match outcome {
            Ok(d) if in_time => (true, d),
            Ok(d) => (false, format!("{d}; over the {limit_s}s limit")),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name} [{:.1}s, limit {limit_s}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

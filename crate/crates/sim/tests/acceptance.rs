//! The acceptance criteria, one test per criterion. Each prints a PASS/FAIL
//! line straight to stderr so the verdicts show up in normal test output.

use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use fedeq_core::deq::{solve_anderson, solve_plain, SolverMethod};
use fedeq_core::projection::{project_l1_row, project_inf_matrix};
use fedeq_core::tensor::inf_norm;
use fedeq_core::{Activation, DeqParams, Matrix, ProjectionSettings, SolverSettings, Vector};
use fedeq_sim::config::{Experiment, RunConfig};
use fedeq_sim::fed::{adapt_unseen, mean_std, BaselineModel, EvalMode, FedAvg, Federation};
use fedeq_sim::gradcheck::{run_gradcheck, GradcheckSpec};
use fedeq_sim::metrics::{trailing_accuracy, RoundMetrics};
use fedeq_sim::run::{build_shards, Shards};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, started: Instant, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance] {id:>2} {verdict} {name} ({:.1}s): {detail}\n",
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn experiment(json: &str) -> Experiment {
    RunConfig::from_json(json).unwrap().resolve().unwrap()
}

fn federation(exp: &Experiment, shards: &Shards) -> Federation {
    Federation::new(exp.fed.clone(), exp.model.clone(), shards.training.clone(), shards.num_classes, 0).unwrap()
}

fn fedavg(exp: &Experiment, shards: &Shards, kind: BaselineModel) -> FedAvg {
    FedAvg::new(exp.fed.clone(), &exp.model, kind, shards.training.clone(), shards.num_classes, 0).unwrap()
}

#[test]
fn c01_gradient_exactness() {
    let t = Instant::now();
    let r = run_gradcheck(&GradcheckSpec::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "gradient exactness",
        r.passed && r.trials.len() == 100 && secs < 60.0,
        t,
        format!("{} trials, max rel error {:.2e} (seed {}), limit 1e-5", r.trials.len(), r.max_error, r.worst_seed),
    );
}

/// Sort-based ℓ1-ball projection, independent of the bisection code.
fn sort_projection(v: &[f64], kappa: f64) -> Vec<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= kappa {
        return v.to_vec();
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let (mut cum, mut theta) = (0.0, 0.0);
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - kappa) / (j + 1) as f64;
        if uj > t {
            theta = t;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

#[test]
fn c02_projection_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let settings = ProjectionSettings::default();
    let (mut worst, mut infeasible, mut not_idempotent) = (0.0f64, 0, 0);
    for _ in 0..200 {
        let len = rng.random_range(1..=6);
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let kappa = rng.random_range(0.05..2.0);
        let ours = project_l1_row(&Vector::from(v.clone()), kappa, &settings).unwrap();
        let oracle = sort_projection(&v, kappa);
        worst = ours.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        if ours.iter().map(|x| x.abs()).sum::<f64>() > kappa + 1e-12 {
            infeasible += 1;
        }
        let again = project_l1_row(&ours, kappa, &settings).unwrap();
        if again.dist_inf(&ours) > 1e-12 {
            not_idempotent += 1;
        }
    }
    report(
        2,
        "projection oracle",
        worst <= 1e-8 && infeasible == 0 && not_idempotent == 0 && t.elapsed().as_secs_f64() < 10.0,
        t,
        format!("max deviation {worst:.2e}, infeasible {infeasible}, non-idempotent {not_idempotent}"),
    );
}

#[test]
fn c03_contraction_and_solver_parity() {
    let t = Instant::now();
    let tol = 1e-8;
    let plain = SolverSettings::plain(tol, 5000);
    let anderson = SolverSettings {
        method: SolverMethod::Anderson,
        max_iters: 5000,
        ..SolverSettings::training().with_tol(tol)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut plain_iters, mut aa_iters) = (Vec::new(), Vec::new());
    let (mut failures, mut worst_gap) = (0, 0.0f64);
    for k in 0..50 {
        let act = Activation::ALL[k % 4];
        let mut theta = DeqParams::random(5, 8, act, rng.random_range(0.5..3.0), &mut rng);
        theta.recurrent = project_inf_matrix(&theta.recurrent, &ProjectionSettings::with_kappa(0.95)).unwrap();
        theta.bias = Vector::from_vec((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        assert!(inf_norm(&theta.recurrent) <= 0.95);
        let x = Vector::from_vec((0..5).map(|_| rng.random_range(-2.0..2.0)).collect());
        let z0 = Vector::zeros(8);
        let p = solve_plain(&theta, &x, &z0, &plain).unwrap();
        let a = solve_anderson(&theta, &x, &z0, &anderson).unwrap();
        failures += usize::from(!p.converged) + usize::from(!a.converged);
        worst_gap = worst_gap.max(p.z_star.dist_inf(&a.z_star));
        plain_iters.push(p.iterations);
        aa_iters.push(a.iterations);
    }
    let median = |v: &mut Vec<usize>| {
        v.sort_unstable();
        (v[v.len() / 2 - 1] + v[v.len() / 2]) as f64 / 2.0
    };
    let (mp, ma) = (median(&mut plain_iters), median(&mut aa_iters));
    report(
        3,
        "contraction and solver parity",
        failures == 0 && worst_gap <= 10.0 * tol && ma <= mp && t.elapsed().as_secs_f64() < 30.0,
        t,
        format!("non-converged {failures}, max gap {worst_gap:.2e} (limit {:.0e}), median iterations anderson {ma} vs plain {mp}", 10.0 * tol),
    );
}

const MONITOR_TASK: &str = r#"{
    "rho": 0.1, "n_nodes": 8, "num_classes": 4, "classes_per_node": 2, "heterogeneity": 0.5,
    "dim": 6, "samples_per_node": 40, "state_dim": 8, "head_hidden": [8], "activation": "softplus",
    "sampler": "period_cyclic", "sample_fraction": 0.25, "grad_mode": "full_batch",
    "loss": "mean_squared_error", "eta_rep": 0.2, "epochs_rep": 50, "eta_per": 0.2, "max_iters": 1000,
    "rounds": 200, "seed": 4
}"#;

fn monitor_run() -> &'static (Vec<RoundMetrics>, f64) {
    static RUN: OnceLock<(Vec<RoundMetrics>, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let exp = experiment(MONITOR_TASK);
        let shards = build_shards(&exp).unwrap();
        let mut fed = federation(&exp, &shards);
        let metrics = fed.run(exp.fed.rounds, |_| Ok(())).unwrap();
        (metrics, t.elapsed().as_secs_f64())
    })
}

#[test]
fn c04_lagrangian_monitor() {
    let t = Instant::now();
    let (metrics, secs) = monitor_run();
    let period = 4;
    let values: Vec<f64> = metrics.iter().map(|m| m.global_aug_lagrangian).collect();
    // L̃ at round r + T must not exceed L̃ at round r, for every r after warm-up
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for r in 2 * period..values.len() - period {
        let rise = values[r + period] - values[r];
        worst = worst.max(rise);
        violations += usize::from(rise > 1e-6);
    }
    report(
        4,
        "augmented Lagrangian monitor",
        violations == 0 && *secs < 300.0,
        t,
        format!(
            "{violations} windows rose by more than 1e-6 (largest rise {worst:.2e}); L̃ {:.4} -> {:.4} over {} rounds",
            values[2 * period],
            values[values.len() - 1],
            values.len()
        ),
    );
}

#[test]
fn c05_consensus() {
    let t = Instant::now();
    let (metrics, _) = monitor_run();
    let at20 = metrics[19].consensus_residual_max;
    let at200 = metrics[199].consensus_residual_max;
    report(
        5,
        "consensus",
        at200 < 0.1 * at20 && at200 < 1e-2,
        t,
        format!("residual max at round 20 {at20:.3e}, at round 200 {at200:.3e}"),
    );
}

#[test]
fn c06_rho_ordering() {
    let t = Instant::now();
    let run = |rho: f64| {
        let json = MONITOR_TASK
            .replace("\"rho\": 0.1", &format!("\"rho\": {rho}"))
            .replace("\"eta_rep\": 0.2", "\"eta_rep\": 0.05")
            .replace("\"rounds\": 200", "\"rounds\": 100");
        let exp = experiment(&json);
        let shards = build_shards(&exp).unwrap();
        federation(&exp, &shards).run(exp.fed.rounds, |_| Ok(())).unwrap()
    };
    let (low, high) = (run(0.001), run(10.0));
    let (l, h) = (&low[99], &high[99]);
    report(
        6,
        "rho ordering",
        h.consensus_residual_mean < l.consensus_residual_mean
            && l.mean_train_loss <= h.mean_train_loss
            && t.elapsed().as_secs_f64() < 600.0,
        t,
        format!(
            "residual mean rho=10 {:.3e} vs rho=0.001 {:.3e}; train loss rho=0.001 {:.4} vs rho=10 {:.4}",
            h.consensus_residual_mean, l.consensus_residual_mean, l.mean_train_loss, h.mean_train_loss
        ),
    );
}

const PERSONAL_TASK: &str = r#"{
    "rho": 0.01, "n_nodes": 20, "num_classes": 10, "classes_per_node": 2, "heterogeneity": 0.8,
    "dim": 10, "samples_per_node": 60, "unseen_node_fraction": 0.1,
    "sample_fraction": 0.2, "rounds": 100, "eta_rep": 0.05, "eta_per": 0.05, "batch_size": 10
}"#;

struct PersonalRun {
    seed: u64,
    fedeq: f64,
    fedavg: f64,
    training_nodes: f64,
    unseen: f64,
}

fn personal_runs() -> &'static (Vec<PersonalRun>, f64) {
    static RUNS: OnceLock<(Vec<PersonalRun>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let runs = (0..3)
            .map(|seed| {
                let exp = experiment(&PERSONAL_TASK.replace("\"rho\"", &format!("\"seed\": {seed}, \"rho\"")));
                let shards = build_shards(&exp).unwrap();
                let mut fed = federation(&exp, &shards);
                let metrics = fed.run(exp.fed.rounds, |_| Ok(())).unwrap();
                let base = fedavg(&exp, &shards, BaselineModel::Deq).run(exp.fed.rounds, |_| Ok(())).unwrap();
                let theta = fed.pending_theta().unwrap();
                let unseen = adapt_unseen(&theta, &exp.model, shards.num_classes, &shards.unseen, &exp.fed, 0).unwrap();
                PersonalRun {
                    seed,
                    fedeq: trailing_accuracy(&metrics, 10).unwrap(),
                    fedavg: trailing_accuracy(&base.metrics, 10).unwrap(),
                    training_nodes: fed.evaluate(EvalMode::Personalized).unwrap().0,
                    unseen: mean_std(&unseen).0,
                }
            })
            .collect();
        (runs, t.elapsed().as_secs_f64())
    })
}

#[test]
fn c07_personalization_beats_fedavg() {
    let t = Instant::now();
    let (runs, secs) = personal_runs();
    let gap = runs.iter().map(|r| r.fedeq - r.fedavg).sum::<f64>() / runs.len() as f64;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.1}% vs {:.1}%", r.seed, 100.0 * r.fedeq, 100.0 * r.fedavg))
        .collect();
    report(
        7,
        "personalization beats FedAvg",
        gap >= 0.05 && *secs < 600.0,
        t,
        format!("mean gap {:.1} points ({})", 100.0 * gap, per_seed.join("; ")),
    );
}

#[test]
fn c08_unseen_node_adaptation() {
    let t = Instant::now();
    let (runs, _) = personal_runs();
    let unseen = runs.iter().map(|r| r.unseen).sum::<f64>() / runs.len() as f64;
    let seen = runs.iter().map(|r| r.training_nodes).sum::<f64>() / runs.len() as f64;
    report(
        8,
        "unseen-node adaptation",
        (seen - unseen).abs() <= 0.10,
        t,
        format!("unseen {:.1}% vs training nodes {:.1}%", 100.0 * unseen, 100.0 * seen),
    );
}

#[test]
fn c09_projection_ablation() {
    let t = Instant::now();
    let task = r#"{
        "rho": 0.01, "n_nodes": 10, "num_classes": 4, "classes_per_node": 4, "heterogeneity": 0.0,
        "dim": 6, "samples_per_node": 40, "state_dim": 8, "activation": "tanh",
        "recurrent_init_norm": 1.2, "solver": "plain", "backward_mode": "jfb",
        "sample_fraction": 0.3, "rounds": 20, "seed": 9
    }"#;
    let run = |project: &str| {
        let exp = experiment(&task.replace("\"rounds\"", &format!("\"project_every\": \"{project}\", \"rounds\"")));
        let shards = build_shards(&exp).unwrap();
        let mut f = fedavg(&exp, &shards, BaselineModel::Deq);
        if let fedeq_sim::fed::GlobalModel::Deq { theta, .. } = &mut f.model {
            let d1 = theta.state_dim();
            theta.recurrent = Matrix::from_fn(d1, d1, |i, j| if i == j { -1.2 } else { 0.0 });
        }
        f.run(exp.fed.rounds, |_| Ok(())).unwrap()
    };
    let (free, projected) = (run("never"), run("step"));
    let (rf, rp) = (free.failure_rate(), projected.failure_rate());
    report(
        9,
        "projection ablation",
        rf > 10.0 * rp && rf > 0.0 && t.elapsed().as_secs_f64() < 180.0,
        t,
        format!(
            "non-convergence without projection {:.2}% ({}/{}), with projection {:.2}% ({}/{})",
            100.0 * rf,
            free.fp_failures,
            free.fp_solves,
            100.0 * rp,
            projected.fp_failures,
            projected.fp_solves
        ),
    );
}

#[test]
fn c10_deq_explicit_parity() {
    let t = Instant::now();
    let task = r#"{
        "rho": 0.01, "n_nodes": 10, "num_classes": 4, "classes_per_node": 4, "heterogeneity": 0.0,
        "dim": 8, "samples_per_node": 60, "state_dim": 16,
        "sample_fraction": 0.3, "rounds": 60, "eta_rep": 0.05, "eta_per": 0.05
    }"#;
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let exp = experiment(&task.replace("\"rho\"", &format!("\"seed\": {seed}, \"rho\"")));
        let shards = build_shards(&exp).unwrap();
        let deq = fedavg(&exp, &shards, BaselineModel::Deq).run(exp.fed.rounds, |_| Ok(())).unwrap();
        let mlp = fedavg(&exp, &shards, BaselineModel::ExplicitMlp).run(exp.fed.rounds, |_| Ok(())).unwrap();
        let (a, b) = (trailing_accuracy(&deq.metrics, 10).unwrap(), trailing_accuracy(&mlp.metrics, 10).unwrap());
        gaps.push(a - b);
        lines.push(format!("seed {seed}: {:.1}% vs {:.1}%", 100.0 * a, 100.0 * b));
    }
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    report(
        10,
        "DEQ vs explicit parity",
        gap.abs() <= 0.02 && t.elapsed().as_secs_f64() < 600.0,
        t,
        format!("mean gap {:.2} points ({})", 100.0 * gap, lines.join("; ")),
    );
}

#[test]
fn c11_determinism_across_threads() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"rho": 0.01, "n_nodes": 8, "num_classes": 4, "classes_per_node": 2, "dim": 6,
            "samples_per_node": 30, "sample_fraction": 0.5, "rounds": 6, "seed": 11, "emit": "both"}"#,
    )
    .unwrap();
    let run = |threads: &str| {
        let out = dir.path().join(format!("out-{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_fedeq"))
            .args(["train", "--config"])
            .arg(&config)
            .arg("--output")
            .arg(&out)
            .env("FEDEQ_THREADS", threads)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        (std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("metrics.jsonl")).unwrap())
    };
    let one = run("1");
    let identical = ["2", "4", "7"].iter().all(|n| run(n) == one);
    report(
        11,
        "determinism across thread counts",
        identical && t.elapsed().as_secs_f64() < 120.0,
        t,
        format!("metrics.csv with FEDEQ_THREADS=1,2,4,7 byte-identical: {identical}"),
    );
}

use fedeq_core::admm::{GradMode, Sampler};
use fedeq_core::model::full_gradient;
use fedeq_core::tensor::inf_norm;
use fedeq_core::{DeqParams, SolverSettings};
use fedeq_sim::config::{Experiment, RunConfig};
use fedeq_sim::data::NodeShard;
use fedeq_sim::fed::{adapt_unseen, BaselineModel, EvalMode, FedAvg, Federation, GlobalModel};
use fedeq_sim::run::build_shards;

const TASK: &str = r#"{
    "rho": 0.05, "n_nodes": 6, "num_classes": 3, "classes_per_node": 2, "dim": 4,
    "samples_per_node": 20, "state_dim": 5, "head_hidden": [6], "sample_fraction": 0.5,
    "epochs_rep": 2, "epochs_per": 1, "batch_size": 5, "rounds": 5, "seed": 21"#;

fn experiment(extra: &str) -> Experiment {
    let mut base: serde_json::Value = serde_json::from_str(&format!("{TASK}}}")).unwrap();
    let extra: serde_json::Value = serde_json::from_str(&format!("{{{extra}}}")).unwrap();
    let map = base.as_object_mut().unwrap();
    map.extend(extra.as_object().unwrap().clone());
    RunConfig::from_json(&base.to_string()).unwrap().resolve().unwrap()
}

fn federation(exp: &Experiment) -> Federation {
    let shards = build_shards(exp).unwrap();
    Federation::new(exp.fed.clone(), exp.model.clone(), shards.training, shards.num_classes, 1).unwrap()
}

fn flat(p: &DeqParams) -> Vec<f64> {
    p.recurrent
        .as_slice()
        .iter()
        .chain(p.input.as_slice())
        .chain(p.bias.as_slice())
        .copied()
        .collect()
}

#[test]
fn dual_identity_holds_and_idle_nodes_stay_frozen() {
    let mut fed = federation(&experiment(""));
    let rho = fed.cfg.rho;
    for _ in 0..5 {
        let before = fed.nodes.clone();
        let m = fed.run_round().unwrap();
        let theta = flat(&fed.theta);
        for (old, new) in before.iter().zip(&fed.nodes) {
            if m.participating_nodes.contains(&old.node_id) {
                let expected: Vec<f64> = old
                    .dual
                    .iter()
                    .zip(flat(&new.theta))
                    .zip(&theta)
                    .map(|((l, ti), t)| l + rho * (ti - t))
                    .collect();
                assert_eq!(new.dual.iter().collect::<Vec<_>>(), expected);
            } else {
                assert_eq!(old, new, "node {} changed while idle", old.node_id);
            }
        }
    }
}

#[test]
fn recurrent_weights_stay_contractive() {
    let exp = experiment(r#""recurrent_init_norm": 0.94, "eta_rep": 0.5"#);
    let kappa = exp.fed.projection.kappa;
    let mut fed = federation(&exp);
    for _ in 0..4 {
        fed.run_round().unwrap();
        for node in &fed.nodes {
            assert!(inf_norm(&node.theta.recurrent) <= kappa + 1e-12);
        }
    }
}

#[test]
fn no_representation_steps_means_perfect_consensus() {
    let mut fed = federation(&experiment(r#""epochs_rep": 0"#));
    for m in fed.run(3, |_| Ok(())).unwrap() {
        assert_eq!(m.consensus_residual_max, 0.0);
        assert_eq!(m.consensus_residual_mean, 0.0);
    }
}

#[test]
fn participant_count_follows_fraction() {
    for (fraction, expected) in [(0.5, 3), (0.34, 2), (1.0, 6)] {
        let mut fed = federation(&experiment(&format!(r#""sample_fraction": {fraction}"#)));
        for m in fed.run(2, |_| Ok(())).unwrap() {
            assert_eq!(m.participating_nodes.len(), expected);
        }
    }
}

#[test]
fn zero_rounds_leave_initial_state() {
    let exp = experiment("");
    let mut fed = federation(&exp);
    let initial = fed.nodes.clone();
    assert!(fed.run(0, |_| Ok(())).unwrap().is_empty());
    assert_eq!(fed.nodes, initial);
}

#[test]
fn same_seed_same_metrics_regardless_of_threads() {
    let exp = experiment("");
    let shards = build_shards(&exp).unwrap();
    let run = |threads| {
        let mut fed = Federation::new(exp.fed.clone(), exp.model.clone(), shards.training.clone(), shards.num_classes, threads).unwrap();
        fed.run(4, |_| Ok(())).unwrap()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn single_node_trains_against_its_own_average() {
    let exp = experiment(r#""n_nodes": 1, "classes_per_node": 3, "sample_fraction": 1.0"#);
    let mut fed = federation(&exp);
    for m in fed.run(3, |_| Ok(())).unwrap() {
        assert_eq!(m.participating_nodes, vec![0]);
        assert_eq!(m.consensus_residual_max, 0.0);
    }
}

/// Probability mass within three binomial standard deviations of `n·p`.
fn within_binomial_band(correct: f64, n: f64, p: f64) -> bool {
    let sd = (n * p * (1.0 - p)).sqrt();
    (correct - n * p).abs() <= 3.0 * sd
}

#[test]
fn random_labels_score_near_chance() {
    let exp = experiment(
        r#""n_nodes": 4, "classes_per_node": 3, "heterogeneity": 0.0, "class_separation": 0.0, "samples_per_node": 300"#,
    );
    let fed = federation(&exp);
    let accs = fed.node_accuracies(EvalMode::Personalized).unwrap();
    let tests: f64 = fed.nodes.iter().map(|n| n.test.len() as f64).sum();
    let correct: f64 = fed.nodes.iter().zip(&accs).map(|(n, a)| a * n.test.len() as f64).sum();
    assert!(within_binomial_band(correct, tests, 1.0 / 3.0), "{correct} of {tests}");
}

#[test]
fn evaluation_mean_ignores_node_order() {
    let exp = experiment("");
    let mut fed = federation(&exp);
    fed.run(2, |_| Ok(())).unwrap();
    let (mean, std) = fed.evaluate(EvalMode::Personalized).unwrap();
    fed.nodes.reverse();
    let (m2, s2) = fed.evaluate(EvalMode::Personalized).unwrap();
    assert!((mean - m2).abs() < 1e-12 && (std - s2).abs() < 1e-12);
    assert!(fed.evaluate(EvalMode::GlobalThetaLocalHead).is_ok());
}

fn fresh_shards(exp: &Experiment) -> (Vec<NodeShard>, usize) {
    let shards = build_shards(exp).unwrap();
    assert!(!shards.unseen.is_empty());
    (shards.unseen, shards.num_classes)
}

#[test]
fn untrained_heads_on_fresh_nodes_score_near_chance() {
    let exp = experiment(
        r#""n_nodes": 8, "classes_per_node": 3, "heterogeneity": 0.0, "class_separation": 0.0, "samples_per_node": 300, "unseen_node_fraction": 0.5, "epochs_per": 0"#,
    );
    let (fresh, k) = fresh_shards(&exp);
    let theta = exp.model.init_theta(fresh[0].train.inputs[0].len(), exp.fed.seed);
    let accs = adapt_unseen(&theta, &exp.model, k, &fresh, &exp.fed, 1).unwrap();
    let tests: f64 = fresh.iter().map(|s| s.test.len() as f64).sum();
    let correct: f64 = fresh.iter().zip(&accs).map(|(s, a)| a * s.test.len() as f64).sum();
    assert!(within_binomial_band(correct, tests, 1.0 / k as f64), "{correct} of {tests}");
}

#[test]
fn adaptation_leaves_theta_untouched() {
    let exp = experiment(r#""n_nodes": 8, "unseen_node_fraction": 0.25"#);
    let (fresh, k) = fresh_shards(&exp);
    let theta = exp.model.init_theta(fresh[0].train.inputs[0].len(), exp.fed.seed);
    let copy = theta.clone();
    let accs = adapt_unseen(&theta, &exp.model, k, &fresh, &exp.fed, 1).unwrap();
    assert_eq!(accs.len(), 2);
    assert_eq!(flat(&theta), flat(&copy));
}

#[test]
fn fresh_copy_of_a_training_node_matches_its_accuracy() {
    let exp = experiment(
        r#""n_nodes": 4, "samples_per_node": 400, "sample_fraction": 1.0, "epochs_per": 3, "eta_per": 0.1, "eta_rep": 0.1"#,
    );
    let shards = build_shards(&exp).unwrap();
    let mut fed = Federation::new(exp.fed.clone(), exp.model.clone(), shards.training.clone(), shards.num_classes, 1).unwrap();
    fed.run(10, |_| Ok(())).unwrap();
    let theta = fed.nodes[0].theta.clone();
    let trained = fed.node_accuracies(EvalMode::Personalized).unwrap()[0];
    let accs = adapt_unseen(&theta, &exp.model, shards.num_classes, &shards.training[..1], &exp.fed, 1).unwrap();
    assert!((accs[0] - trained).abs() <= 0.05 + 1e-12, "fresh {} vs trained {trained}", accs[0]);
}

#[test]
fn single_node_fedavg_is_centralized_gradient_descent() {
    let exp = experiment(
        r#""n_nodes": 1, "classes_per_node": 3, "sample_fraction": 1.0, "grad_mode": "full_batch", "tol": 1e-12, "max_iters": 5000"#,
    );
    assert_eq!(exp.fed.grad_mode, GradMode::FullBatch);
    let shards = build_shards(&exp).unwrap();
    let mut fedavg = FedAvg::new(exp.fed.clone(), &exp.model, BaselineModel::Deq, shards.training.clone(), shards.num_classes, 1).unwrap();
    let GlobalModel::Deq { theta: mut theta, head: mut head } = fedavg.model.clone() else {
        panic!("deq baseline");
    };
    fedavg.run(3, |_| Ok(())).unwrap();

    let data = &shards.training[0].train;
    let solver = SolverSettings { tol: 1e-12, max_iters: 5000, ..exp.fed.solver.clone() };
    for _ in 0..3 * exp.fed.epochs_rep {
        let g = full_gradient(&theta, &head, data, exp.fed.loss, exp.fed.backward_mode, &solver, None).unwrap();
        theta.axpy(-exp.fed.eta_rep, &g.theta);
        head.axpy(-exp.fed.eta_per, &g.head);
    }
    let GlobalModel::Deq { theta: fed_theta, head: fed_head } = &fedavg.model else {
        panic!("deq baseline");
    };
    let gap = flat(fed_theta).iter().zip(flat(&theta)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let head_gap = fed_head.iter().zip(head.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-8 && head_gap < 1e-8, "theta gap {gap}, head gap {head_gap}");
}

#[test]
fn cyclic_sampler_visits_everyone_each_period() {
    let exp = experiment(r#""sampler": "period_cyclic""#);
    assert_eq!(exp.fed.sampler, Sampler::PeriodCyclic);
    let mut fed = federation(&exp);
    let metrics = fed.run(4, |_| Ok(())).unwrap();
    for pair in metrics.chunks(2) {
        let mut seen: Vec<usize> = pair.iter().flat_map(|m| m.participating_nodes.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }
}

#[test]
fn fedeq_learns_a_separable_task() {
    let exp = experiment(r#""class_separation": 4.0, "heterogeneity": 0.0, "sample_fraction": 1.0, "eta_rep": 0.1, "eta_per": 0.1"#);
    let mut fed = federation(&exp);
    let metrics = fed.run(15, |_| Ok(())).unwrap();
    let last = metrics.last().unwrap();
    assert!(last.mean_test_accuracy > 0.9, "accuracy {}", last.mean_test_accuracy);
    assert!(last.mean_train_loss < metrics[0].mean_train_loss);
}

//! End-to-end protocol behavior: determinism, phase structure, degenerate
//! cases, baselines, and the dishonest/unstable variants.

use fedfair::orchestrator::{run_experiment, ExperimentConfig};

fn config(toml: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(toml).expect("test config must validate")
}

const BASE: &str = r#"
[experiment]
mode = "ours"
n_nodes = 6
k = 3
beta = 0.05
t_max = 120
master_seed = 11

[model]
task = "classification"
input_dim = 4
n_classes = 4
batch_size = 16
learning_rate = 0.01
l2_reg = 0.0001

[stopping]
alpha = 0.5
tau = 12

[data]
kind = "label_noise"
zeta = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
"#;

#[test]
fn identical_configs_reproduce_identical_reports() {
    let cfg = config(BASE);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
}

#[test]
fn explore_precedes_exploit_and_freezes_psi() {
    let report = run_experiment(&config(BASE)).unwrap();
    let t_alpha = report.aggregate.t_alpha.expect("ours mode records t_alpha");
    assert!(t_alpha < report.aggregate.t_total);
    for row in &report.trajectories {
        if row.iteration <= t_alpha {
            assert_eq!(row.phase, "explore");
        } else {
            assert_eq!(row.phase, "exploit");
            // Contribution estimates are frozen: no fluctuation diagnostic.
            assert!(row.delta_psi.is_none());
            assert!(row.p_value.is_none());
        }
    }
}

#[test]
fn exploit_selection_bookkeeping_is_conserved() {
    let cfg = config(BASE);
    let report = run_experiment(&cfg).unwrap();
    let t_alpha = report.aggregate.t_alpha.unwrap();
    let k = cfg.experiment.k;
    let mut selections = 0usize;
    for row in &report.trajectories {
        if row.iteration > t_alpha {
            // A zero-staleness entry is exactly a selection event.
            let selected = row.node_staleness.iter().filter(|&&g| g == 0).count();
            assert!(selected >= 1 && selected <= k, "selected {selected} of k={k}");
            selections += selected;
        }
    }
    let exploit_iters = (report.aggregate.t_total - t_alpha) as usize;
    assert!(selections <= k * exploit_iters);
}

#[test]
fn full_size_subset_degenerates_to_fedavg() {
    // k = N synchronizes everyone each iteration, so the coordinator
    // trajectory matches uniform FedAvg with full participation bit for bit
    // (valuation runs alongside but never touches the model).
    let ours = config(&BASE.replace("k = 3", "k = 6"));
    let fedavg = config(
        &BASE
            .replace("k = 3", "k = 6")
            .replace("mode = \"ours\"", "mode = \"fedavg_uniform\""),
    );
    let a = run_experiment(&ours).unwrap();
    let b = run_experiment(&fedavg).unwrap();
    assert_eq!(a.trajectories.len(), b.trajectories.len());
    for (ra, rb) in a.trajectories.iter().zip(&b.trajectories) {
        assert_eq!(ra.global_loss, rb.global_loss);
        assert_eq!(ra.node_loss, rb.node_loss);
        assert!(ra.node_staleness.iter().all(|&g| g == 0));
    }
    for node in &a.per_node {
        assert_eq!(node.avg_staleness, Some(0.0));
    }
}

#[test]
fn standalone_single_node_matches_fedavg_single_node() {
    let shared = r#"
[experiment]
n_nodes = 1
k = 1
beta = 0.05
t_max = 60
master_seed = 3

[model]
task = "regression"
input_dim = 3
batch_size = 12
learning_rate = 0.02

[data]
kind = "clean"
"#;
    let standalone = config(&format!("[experiment]\nmode = \"standalone\"{}", &shared[13..]));
    let fedavg = config(&format!("[experiment]\nmode = \"fedavg_uniform\"{}", &shared[13..]));
    let a = run_experiment(&standalone).unwrap();
    let b = run_experiment(&fedavg).unwrap();
    for (ra, rb) in a.trajectories.iter().zip(&b.trajectories) {
        assert_eq!(ra.node_loss, rb.node_loss);
    }
    assert_eq!(a.per_node[0].online_loss, b.per_node[0].online_loss);
}

#[test]
fn standalone_clean_node_beats_noisy_node() {
    let base = r#"
[experiment]
mode = "standalone"
n_nodes = 2
k = 1
beta = 0.05
t_max = 150
master_seed = 0

[model]
task = "classification"
input_dim = 4
n_classes = 4
batch_size = 16
learning_rate = 0.01

[data]
kind = "label_noise"
zeta = [0.0, 0.5]
"#;
    let mut wins = 0;
    for seed in 1..=5u64 {
        let toml = base.replace("master_seed = 0", &format!("master_seed = {seed}"));
        let report = run_experiment(&config(&toml)).unwrap();
        if report.per_node[0].final_loss < report.per_node[1].final_loss {
            wins += 1;
        }
    }
    assert!(wins >= 4, "clean node won only {wins}/5 seeds");
}

#[test]
fn fedavg_clean_nodes_are_exchangeable() {
    let base = BASE
        .replace("mode = \"ours\"", "mode = \"fedavg_uniform\"")
        .replace("kind = \"label_noise\"", "kind = \"clean\"")
        .replace("zeta = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]", "");
    let mut all_losses = Vec::new();
    for seed in [21u64, 22, 23] {
        let toml = base.replace("master_seed = 11", &format!("master_seed = {seed}"));
        let report = run_experiment(&config(&toml)).unwrap();
        all_losses.extend(report.per_node.iter().map(|n| n.online_loss));
    }
    let n = all_losses.len() as f64;
    let mean = all_losses.iter().sum::<f64>() / n;
    let std =
        (all_losses.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in &all_losses {
        assert!(
            (v - mean).abs() <= 2.0 * std + 1e-12,
            "online loss {v} strays beyond 2 pooled std of {mean} (std {std})"
        );
    }
}

#[test]
fn tiny_alpha_stops_at_first_armed_iteration() {
    let toml = BASE.replace("alpha = 0.5", "alpha = 1e-12");
    let cfg = config(&toml);
    let report = run_experiment(&cfg).unwrap();
    // min_iterations defaults to tau + N + 2 = 12 + 6 + 2.
    assert_eq!(report.aggregate.t_alpha, Some(20));
    assert!(!report.aggregate.exploration_truncated);
}

#[test]
fn truncated_exploration_is_flagged() {
    let toml = BASE
        .replace("alpha = 0.5", "alpha = 0.999999")
        .replace("t_max = 120", "t_max = 40");
    let report = run_experiment(&config(&toml)).unwrap();
    assert!(report.aggregate.exploration_truncated);
    assert_eq!(report.aggregate.t_alpha, Some(40));
    assert_eq!(report.aggregate.t_total, 40);
}

#[test]
fn unstable_participation_ages_absent_nodes_during_explore() {
    let toml = BASE.replace("master_seed = 11", "master_seed = 11\nparticipation_prob = 0.5");
    let report = run_experiment(&config(&toml)).unwrap();
    let explore_rows: Vec<_> =
        report.trajectories.iter().filter(|r| r.phase == "explore").collect();
    assert!(!explore_rows.is_empty());
    // With Bernoulli(0.5) participation some node misses some iteration.
    let any_stale = explore_rows.iter().any(|r| r.node_staleness.iter().any(|&g| g > 0));
    assert!(any_stale, "expected nonzero staleness under partial participation");
    // Determinism still holds for the variant.
    let again = run_experiment(&config(&toml)).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
}

#[test]
fn nonstop_dishonest_node_is_bit_identical_to_honest() {
    let honest = config(BASE);
    let nonstop = config(&format!(
        "{BASE}\n[dishonest]\nnode_id = 0\nstrategy = \"nonstop\"\n"
    ));
    let a = run_experiment(&honest).unwrap();
    let b = run_experiment(&nonstop).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
}

#[test]
fn early_stopping_dishonest_node_collapses_its_contribution() {
    // Seed chosen so the RANDOM prediction lands well inside exploration:
    // the zero uploads from then on drag the node's running mean down.
    let base = r#"
[experiment]
mode = "ours"
n_nodes = 10
k = 4
beta = 0.05
t_max = 400
master_seed = 2

[model]
task = "classification"
input_dim = 5
n_classes = 5
batch_size = 24
learning_rate = 0.01
l2_reg = 0.0001

[stopping]
alpha = 0.5
tau = 20

[data]
kind = "label_noise"
zeta = [0.0, 0.0556, 0.1111, 0.1667, 0.2222, 0.2778, 0.3333, 0.3889, 0.4444, 0.5]
"#;
    let honest = run_experiment(&config(base)).unwrap();
    let dishonest = run_experiment(&config(&format!(
        "{base}\n[dishonest]\nnode_id = 0\nstrategy = \"random\"\n"
    )))
    .unwrap();
    let honest_psi = honest.per_node[0].psi_final.unwrap();
    let dishonest_psi = dishonest.per_node[0].psi_final.unwrap();
    assert!(
        dishonest_psi < 0.5 * honest_psi,
        "expected contribution collapse: honest {honest_psi}, dishonest {dishonest_psi}"
    );
}

const FAIRNESS_BASE: &str = r#"
[experiment]
mode = "ours"
n_nodes = 10
k = 4
beta = 0.05
t_max = 400
master_seed = 1

[model]
task = "classification"
input_dim = 5
n_classes = 5
batch_size = 24
learning_rate = 0.01
l2_reg = 0.0001

[stopping]
alpha = 0.5
tau = 20

[data]
kind = "label_noise"
zeta = [0.0, 0.0556, 0.1111, 0.1667, 0.2222, 0.2778, 0.3333, 0.3889, 0.4444, 0.5]
"#;

#[test]
fn clean_iid_exploration_terminates() {
    let base = r#"
[experiment]
mode = "ours"
n_nodes = 5
k = 2
beta = 0.05
t_max = 500
master_seed = 0

[model]
task = "classification"
input_dim = 5
n_classes = 5
batch_size = 24
learning_rate = 0.01
l2_reg = 0.0001

[stopping]
alpha = 0.5
tau = 10

[data]
kind = "clean"
"#;
    let mut stopped = 0;
    for seed in 1..=20u64 {
        let toml = base.replace("master_seed = 0", &format!("master_seed = {seed}"));
        let report = run_experiment(&config(&toml)).unwrap();
        if !report.aggregate.exploration_truncated {
            stopped += 1;
        }
    }
    assert!(stopped >= 19, "exploration stopped in only {stopped}/20 runs");
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut ranks = vec![0.0; v.len()];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r as f64;
        }
        ranks
    };
    fedfair::metrics::pearson(&rank(x), &rank(y)).unwrap()
}

#[test]
fn fairness_directions_hold_across_seeds() {
    let mut psi_negative = 0;
    let mut staleness_positive = 0;
    let mut rank_reversed = 0;
    for seed in 1..=5u64 {
        let toml = FAIRNESS_BASE.replace("master_seed = 1", &format!("master_seed = {seed}"));
        let report = run_experiment(&config(&toml)).unwrap();
        let zeta: Vec<f64> = report.per_node.iter().map(|n| n.zeta).collect();
        let psi: Vec<f64> = report.per_node.iter().map(|n| n.psi_final.unwrap()).collect();
        let stale: Vec<f64> =
            report.per_node.iter().map(|n| n.avg_staleness.unwrap()).collect();
        if fedfair::metrics::pearson(&psi, &zeta).unwrap() < 0.0 {
            psi_negative += 1;
        }
        if fedfair::metrics::pearson(&stale, &zeta).unwrap() > 0.0 {
            staleness_positive += 1;
        }
        // Higher contribution estimates earn lower realized staleness; one
        // adjacent swap between near-tied nodes is within sampling noise.
        if spearman(&psi, &stale) <= -0.95 {
            rank_reversed += 1;
        }
    }
    assert!(psi_negative >= 4, "pearson(psi, zeta) < 0 in only {psi_negative}/5");
    assert!(staleness_positive >= 4, "pearson(stale, zeta) > 0 in only {staleness_positive}/5");
    assert!(rank_reversed >= 4, "psi/staleness rank reversal in only {rank_reversed}/5");
}

#[test]
fn reports_round_trip_through_the_filesystem() {
    let report = run_experiment(&config(BASE)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write_to_dir(dir.path()).unwrap();
    let json = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let back = fedfair::metrics::RunReport::from_json(&json).unwrap();
    assert_eq!(report, back);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, report.to_csv().unwrap());
}

use specfair_core::fairness::{family_metrics, task_metrics};
use specfair_core::mitigation::{
    acceptance_proxy, data_balance_finetune, estimate_task_ce, run_scdf, Batch, MemorySink, TrainerConfig,
};
use specfair_core::model::{Context, ContextKey, Role, TabularSoftmaxModel};
use specfair_core::stats::spearman;
use specfair_core::synthetic::{make_synthetic_family, FamilySpec, SyntheticFamily, TaskSpec};
use specfair_core::task::{Task, TaskFamily};
use specfair_core::{RngStreams, SpecConfig};

fn spread_family(r_q: &[f64], block: usize, seed: u64) -> SyntheticFamily {
    let spec = FamilySpec {
        vocab_size: block * r_q.len(),
        context_order: 1,
        concentration: 0.9,
        tasks: r_q
            .iter()
            .enumerate()
            .map(|(i, &r_q)| TaskSpec {
                id: format!("t{i}"),
                support_size: 8,
                r_p: 0.02,
                r_q,
                prior_weight: 1.0,
            })
            .collect(),
    };
    make_synthetic_family(&spec, seed).unwrap()
}

fn five_tasks() -> SyntheticFamily {
    spread_family(&[0.05, 0.1375, 0.225, 0.3125, 0.4], 6, 1)
}

fn spec() -> SpecConfig {
    SpecConfig::new(5, 0.1).unwrap()
}

#[test]
fn full_support_batch_matches_exact_ce() {
    let fam = five_tasks();
    for task in fam.family.tasks() {
        let est = estimate_task_ce(&fam.drafter, &fam.verifier, &Batch::full_support(task)).unwrap();
        let exact = task_metrics(&fam.verifier, &fam.drafter, task, &spec()).unwrap().ce;
        assert!((est.d_hat - exact).abs() <= 1e-12, "{} vs {}", est.d_hat, exact);
    }
}

#[test]
fn star_weight_is_zero_and_verifier_frozen() {
    let fam = five_tasks();
    let before = fam.verifier.parameter_hash();
    let cfg = TrainerConfig {
        steps: 300,
        tasks_per_step: Some(3),
        ..TrainerConfig::default()
    };
    let mut sink = MemorySink::default();
    let out = run_scdf(&fam.verifier, &fam.drafter, &fam.family, &spec(), &cfg, &mut sink).unwrap();
    assert_eq!(fam.verifier.parameter_hash(), before);
    assert_eq!(out.history.len(), 300);
    assert_eq!(sink.rows.len(), 900, "one row per sampled task per step");
    for rec in &out.history {
        assert_eq!(rec.sampled.len(), 3);
        let k = rec.sampled.iter().position(|&t| t == rec.star).unwrap();
        assert_eq!(rec.weights[k], 0.0);
        assert!(rec.weights.iter().all(|&w| w >= 0.0));
    }
    assert!(sink.rows.iter().all(|r| (0.0..=1.0).contains(&r.acceptance)));
}

#[test]
fn best_fit_task_is_star_most_often() {
    let fam = five_tasks();
    let cfg = TrainerConfig {
        steps: 500,
        ..TrainerConfig::default()
    };
    let out = run_scdf(&fam.verifier, &fam.drafter, &fam.family, &spec(), &cfg, &mut MemorySink::default()).unwrap();
    let d0: Vec<f64> = out.initial.iter().map(|m| m.ce).collect();
    let best = (0..d0.len()).min_by(|&a, &b| d0[a].total_cmp(&d0[b])).unwrap();
    let counts = out.star_counts(fam.family.len());
    let freq = counts[best] as f64 / out.history.len() as f64;
    assert!(freq > 1.0 / fam.family.len() as f64, "star frequency {freq} ({counts:?})");
}

#[test]
fn small_step_full_support_descends() {
    let fam = five_tasks();
    let cfg = TrainerConfig {
        steps: 600,
        step_size: 1e-3,
        full_support_batches: true,
        ..TrainerConfig::default()
    };
    let out = run_scdf(&fam.verifier, &fam.drafter, &fam.family, &spec(), &cfg, &mut MemorySink::default()).unwrap();
    let mut u = vec![out.initial_u];
    u.extend(out.history.iter().map(|r| r.exact_u));
    for t in 0..u.len() - 100 {
        assert!(u[t + 100] <= u[t], "U rose over window starting at {t}: {} -> {}", u[t], u[t + 100]);
    }
    assert!(out.final_u() < out.initial_u);
}

#[test]
fn identical_tasks_stay_fair() {
    let mut rng = RngStreams::new(4).stream("model", 0, 0);
    let keys: Vec<ContextKey> = (0..4).map(|t| ContextKey::from_context(&[t], 1, 4)).collect();
    let p = TabularSoftmaxModel::with_random_rows(4, 1, Role::Verifier, keys.clone(), 1.0, &mut rng).unwrap();
    let q = TabularSoftmaxModel::with_random_rows(4, 1, Role::Drafter, keys.clone(), 1.0, &mut rng).unwrap();
    let prefixes: Vec<(Context, f64)> = (0..4).map(|t| (Context::new(vec![t], 4).unwrap(), 0.25)).collect();
    let family = TaskFamily::new(vec![
        Task::new("a", prefixes.clone(), None).unwrap(),
        Task::new("b", prefixes, None).unwrap(),
    ])
    .unwrap();
    let cfg = TrainerConfig {
        steps: 50,
        full_support_batches: true,
        ..TrainerConfig::default()
    };
    let out = run_scdf(&p, &q, &family, &spec(), &cfg, &mut MemorySink::default()).unwrap();
    assert_eq!(out.initial_u, 0.0);
    assert!(out.history.iter().all(|r| r.exact_u == 0.0 && r.direction_norm == 0.0));
    assert_eq!(out.drafter.parameter_hash(), q.parameter_hash());
}

#[test]
fn runs_are_deterministic() {
    let fam = five_tasks();
    let cfg = TrainerConfig {
        steps: 100,
        tasks_per_step: Some(2),
        seed: 17,
        ..TrainerConfig::default()
    };
    let mut s1 = MemorySink::default();
    let mut s2 = MemorySink::default();
    let a = run_scdf(&fam.verifier, &fam.drafter, &fam.family, &spec(), &cfg, &mut s1).unwrap();
    let b = run_scdf(&fam.verifier, &fam.drafter, &fam.family, &spec(), &cfg, &mut s2).unwrap();
    assert_eq!(s1.rows, s2.rows);
    assert_eq!(a.drafter.parameter_hash(), b.drafter.parameter_hash());
}

#[test]
fn proxy_tracks_exact_acceptance() {
    let r_q: Vec<f64> = (0..10).map(|i| 0.04 * i as f64 + 0.02).collect();
    let fam = spread_family(&r_q, 4, 8);
    let metrics = family_metrics(&fam.verifier, &fam.drafter, &fam.family, &spec()).unwrap();
    let streams = RngStreams::new(8);
    let proxy: Vec<f64> = fam
        .family
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = streams.stream("proxy", i as u64, 0);
            acceptance_proxy(&fam.verifier, &fam.drafter, t, 5, 4000, &mut rng)
        })
        .collect();
    let alpha: Vec<f64> = metrics.iter().map(|m| m.alpha).collect();
    let rho = spearman(&proxy, &alpha);
    assert!(rho > 0.0, "spearman {rho}, proxy {proxy:?}, alpha {alpha:?}");
}

#[test]
fn balancing_toward_weak_task_helps_it() {
    let spec_b = FamilySpec {
        vocab_size: 16,
        context_order: 1,
        concentration: 0.9,
        tasks: vec![
            TaskSpec { id: "a".into(), support_size: 8, r_p: 0.02, r_q: 0.05, prior_weight: 0.8 },
            TaskSpec { id: "b".into(), support_size: 8, r_p: 0.02, r_q: 0.35, prior_weight: 0.2 },
        ],
    };
    let fam = make_synthetic_family(&spec_b, 2).unwrap();
    let [a, b] = fam.family.tasks() else { unreachable!() };
    let cfg = TrainerConfig { steps: 300, ..TrainerConfig::default() };
    let before = task_metrics(&fam.verifier, &fam.drafter, b, &spec()).unwrap().ce;
    let r = data_balance_finetune(&fam.verifier, &fam.drafter, a, b, &[0.0, 1.0], &cfg, &spec()).unwrap();
    assert!((r[0].d_b - before).abs() < 1e-12, "no task_b data, no task_b change");
    assert!(r[1].d_b < r[0].d_b);
}

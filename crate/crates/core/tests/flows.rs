use signflow_core::analysis::{characterize, verify_all, Tolerances};
use signflow_core::dynamics::{detect_stages, integrate, Algorithm, IntegratorOptions, Sample};
use signflow_core::problem::{admissible_instance, build_dataset, HyperParams, RawBlock};

fn stacked(s: &Sample) -> Vec<f64> {
    s.w_plus.iter().chain(&s.w_minus).copied().collect()
}

#[test]
fn halving_rel_tol_moves_results_less_than_tolerance_scale() {
    let inst = admissible_instance(11, 3, 3).unwrap();
    let (ds, hp) = (inst.dataset, inst.hyper);
    let run = |rel_tol: f64| {
        let opts = IntegratorOptions { rel_tol, ..IntegratorOptions::default() };
        let traj = integrate(&ds, Algorithm::Ssd, &hp, &opts).unwrap();
        let stages = detect_stages(&traj, &ds, hp.epsilon, opts.event_tol).unwrap();
        let kkt = characterize(&ds, &hp, &traj).unwrap();
        (stages.t0.unwrap(), stages.t.unwrap(), kkt.delta_bar, kkt.beta_inf)
    };
    let coarse = run(1e-8);
    let fine = run(5e-9);
    assert!((coarse.0 - fine.0).abs() < 1e-6, "T0 {} vs {}", coarse.0, fine.0);
    assert!((coarse.1 - fine.1).abs() < 1e-6, "T {} vs {}", coarse.1, fine.1);
    assert!((coarse.2 - fine.2).abs() < 1e-6, "delta_bar {} vs {}", coarse.2, fine.2);
    for (a, b) in coarse.3.iter().zip(&fine.3) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn derived_series_recompute_from_weights() {
    let inst = admissible_instance(4, 0, 3).unwrap();
    for algorithm in [Algorithm::Ssd, Algorithm::Gd] {
        let traj = integrate(&inst.dataset, algorithm, &inst.hyper, &IntegratorOptions::default()).unwrap();
        for s in &traj.samples {
            let again = Sample::from_state(&inst.dataset, algorithm, &inst.hyper, s.t, &stacked(s));
            let pairs = [
                (&s.beta, &again.beta),
                (&s.residuals, &again.residuals),
                (&s.f, &again.f),
                (&s.h, &again.h),
                (&s.dual, &again.dual),
            ];
            for (a, b) in pairs {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12, "{algorithm:?} t={}: {x} vs {y}", s.t);
                }
            }
        }
    }
}

#[test]
fn example_block_runs_clean_under_both_flows() {
    let ds = build_dataset(&[RawBlock { xs: vec![0.8, 0.6], y: 1.0 }]).unwrap();
    let hp = HyperParams::new(0.01, 0.1).unwrap();
    for algorithm in [Algorithm::Ssd, Algorithm::Gd] {
        let traj = integrate(&ds, algorithm, &hp, &IntegratorOptions::default()).unwrap();
        let report = verify_all(&ds, &hp, &traj, &Tolerances::default());
        let failed: Vec<_> = report.claims.iter().filter(|c| c.is_hard_failure()).collect();
        assert!(failed.is_empty(), "{algorithm:?}: {failed:?}");
    }
}

#[test]
fn batch_instances_are_reproducible_and_order_free() {
    let a = admissible_instance(99, 17, 3).unwrap();
    let _ = admissible_instance(99, 3, 3).unwrap();
    let b = admissible_instance(99, 17, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, admissible_instance(100, 17, 3).unwrap());
}

use surgift_core::harness::theory::{run_theorem1, FLOW_MAX_STEPS};
use surgift_core::shift::{make_theorem1_instance_with, Theorem1Config};

fn config() -> Theorem1Config {
    Theorem1Config::new(64, 40, 1, 35)
}

#[test]
fn target_sample_usually_spans_the_orthogonal_subspace() {
    let c = config();
    let threshold = 10.0 * c.d_orth as f64 * (2.0 / c.delta).ln();
    assert!(c.n as f64 > threshold);
    let hits = (0..200)
        .filter(|&s| {
            let inst = make_theorem1_instance_with(&c, 1000 + s).unwrap();
            inst.target_from_orth.iter().filter(|&&o| o).count() >= c.d_orth
        })
        .count();
    assert!(hits as f64 >= (1.0 - c.delta) * 200.0, "{hits}/200");
}

#[test]
fn first_layer_flow_converges_and_full_tuning_stays_above() {
    for s in 0..10 {
        let run = run_theorem1(&config(), s, FLOW_MAX_STEPS).unwrap();
        assert!(run.fl.final_train_loss() < 1e-12, "seed {s}: {}", run.fl.final_train_loss());
        let fl = run.summary.fl_final_heldout;
        assert!(fl < 1e-6);
        assert!(run.summary.ft_min_heldout > fl, "seed {s}");
        assert!(run.summary.fl_projection_drift < 1e-9 && run.summary.ft_projection_drift < 1e-9);
    }
}

#[test]
fn fl_keeps_the_head_fixed() {
    let run = run_theorem1(&config(), 3, FLOW_MAX_STEPS).unwrap();
    assert!(run.fl.v.iter().all(|v| v == &run.fl.v[0]));
    assert!(run.ft.v.iter().any(|v| v != &run.ft.v[0]));
}

//! Checks on a full-stack trace that do not go through the library's replay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dit_accel::harness::{run_benchmark, RunConfig};
use dit_accel::scheduler::{Action, Toggles};

fn outcome(seed: u64) -> dit_accel::harness::BenchOutcome {
    let mut cfg = RunConfig::from_json(&format!(
        r#"{{"seed": {seed},
            "model": {{"num_blocks": 4, "model_dim": 16, "num_heads": 2, "tokens_per_frame": 4,
                       "frames": 2, "cond_dim": 8, "cond_tokens": 2}},
            "schedule": {{"steps": 10}},
            "calibration": {{"batch_timesteps": 3, "rotation_block": 8}}}}"#
    ))
    .unwrap();
    cfg.toggles = Toggles::all();
    run_benchmark(&cfg).unwrap()
}

#[test]
fn draws_come_from_the_keyed_stream() {
    for seed in 0..4 {
        let o = outcome(seed);
        let prune_seed = o.run.trace.header.prune_seed;
        assert_eq!(prune_seed, seed + 2);
        let mut candidates = 0;
        for r in &o.run.trace.records {
            let (Some(p), Some(draw)) = (r.p_prune, r.draw) else {
                assert_ne!(
                    r.action,
                    Action::Prune,
                    "prune without a draw at t={} l={}",
                    r.t,
                    r.layer
                );
                continue;
            };
            candidates += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(prune_seed);
            rng.set_stream(((r.t as u64) << 32) | r.layer as u64);
            assert_eq!(draw, rng.random::<f64>());
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(
                r.action == Action::Prune,
                draw < p,
                "t={} l={}",
                r.t,
                r.layer
            );
        }
        assert!(candidates > 0);
    }
}

#[test]
fn layout_protection_and_accounting() {
    let o = outcome(1);
    let trace = &o.run.trace;
    let (layers, steps) = (trace.header.layers, trace.header.timesteps);
    assert_eq!(trace.records.len(), steps * (layers + 1));
    for (i, r) in trace.records.iter().enumerate() {
        assert_eq!(r.t, steps - 1 - i / (layers + 1));
        assert_eq!(r.layer, i % (layers + 1));
        if r.layer == layers {
            assert_eq!(r.action, Action::Head);
            assert_eq!(r.macs, trace.header.head_macs);
        } else if r.t == steps - 1 || r.t == 0 {
            assert_eq!(r.action, Action::Recompute, "protected step t={}", r.t);
        }
        match r.action {
            Action::Recompute => assert_eq!(r.macs, trace.header.block_macs),
            Action::Reuse | Action::Prune => assert_eq!(r.macs, 0),
            Action::Head => {}
        }
    }
    let reused = trace
        .records
        .iter()
        .filter(|r| r.action == Action::Reuse)
        .count();
    assert!(reused > 0);
    assert_eq!(
        o.metrics.executed_macs,
        trace.records.iter().map(|r| r.macs).sum::<u64>()
    );
}

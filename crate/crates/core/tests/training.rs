mod common;

use common::{synthetic_envelopes, synthetic_truth};
use lfm_audio::inference::marginal_loglik;
use lfm_audio::lfm::build_layout;
use lfm_audio::training::{fd_gradient, init_params, optimize, optimize_with_forces, skip_mask, ParamSpace, TrainConfig};
use nalgebra::DVector;

fn small_config() -> TrainConfig {
    TrainConfig {
        forces: Some(1),
        history: 2,
        active_feedback: vec![1, 2],
        active_lags: vec![0, 1],
        max_iters: 3,
        ..Default::default()
    }
}

#[test]
fn central_and_one_sided_gradients_agree_at_the_start() {
    let env = synthetic_envelopes(600, 2);
    let cfg = small_config();
    let params = init_params(&env, &cfg, 1).unwrap();
    let layout = build_layout(3, 1, 2, 2).unwrap();
    let skip = skip_mask(&env, cfg.skip_threshold_db);
    let space = ParamSpace::new(&params, &[0, 1, 2], true);
    let f = |v: &DVector<f64>| -marginal_loglik(&env, &space.unpack(v, &params), &layout, &skip).unwrap().loglik;
    let x = space.pack(&params);
    let fx = f(&x);
    let central = fd_gradient(&f, &x, fx, cfg.fd_step, true);
    let forward = fd_gradient(&f, &x, fx, cfg.fd_step, false);
    for i in 0..x.len() {
        let rel = (central[i] - forward[i]).abs() / central[i].abs();
        assert!(rel < 0.01, "coordinate {i}: central {} one-sided {}", central[i], forward[i]);
    }
}

#[test]
fn stage_two_leaves_stage_one_values_untouched() {
    let (truth, _) = synthetic_truth();
    let env = synthetic_envelopes(400, 6);
    let cfg = TrainConfig {
        stage1_channels: 2,
        ..small_config()
    };
    let report = optimize(&env, &cfg).unwrap();
    assert_eq!(report.stages.len(), 2);
    let first = &report.stages[0];
    assert_eq!(first.channels.len(), 2);
    let (before, after) = (&first.params, &report.params);
    for &m in &first.channels {
        assert_eq!(before.damping[m].to_bits(), after.damping[m].to_bits());
        assert_eq!(before.gamma[m].to_bits(), after.gamma[m].to_bits());
        assert_eq!(before.feedback[m], after.feedback[m]);
        assert_eq!(before.sensitivity[m], after.sensitivity[m]);
    }
    assert_eq!(before.kernels, after.kernels);
    assert_eq!(before.sigma2.to_bits(), after.sigma2.to_bits());
    let moved = report.stages[1].channels[0];
    assert_ne!(before.damping[moved], after.damping[moved]);
    // inactive entries never move
    assert!(after.sensitivity.iter().all(|s| s[0][2] == 0.0));
    assert_eq!(truth.channels(), after.channels());
}

#[test]
fn training_is_deterministic() {
    let env = synthetic_envelopes(300, 7);
    let mut a = optimize(&env, &small_config()).unwrap();
    let mut b = optimize(&env, &small_config()).unwrap();
    a.wall_time_s = 0.0;
    b.wall_time_s = 0.0;
    assert_eq!(a, b);
    assert!(a.loglik_trace().windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn iteration_cap_is_reported() {
    let env = synthetic_envelopes(300, 8);
    let report = optimize_with_forces(&env, &TrainConfig { max_iters: 1, ..small_config() }, 1).unwrap();
    assert!(report.stages[0].hit_iteration_cap);
    assert!(report.warnings.iter().any(|w| w.contains("iteration cap")));
}

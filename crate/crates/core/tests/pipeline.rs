use hjreach_core::grid::{self, Grid};
use hjreach_core::io::{self, SliceSpec};
use hjreach_core::rng::{self, Stream};
use hjreach_core::systems::Mode;
use hjreach_core::train::{run_pretrain, run_train};
use hjreach_core::verify::{self, VerifyConfig};
use hjreach_core::{LearnedValue, SystemSpec, TrainConfig, ValueFunction, Variant};

fn small_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        hidden_width: 16,
        hidden_layers: 2,
        batch_size: 256,
        iters: 200,
        pretrain_iters: 50,
        lr: 1e-3,
        omega0: 5.0,
        deterministic: true,
        chunk_size: 128,
        ..TrainConfig::new(variant)
    }
}

#[test]
fn trained_integrator_tracks_the_grid_and_verifies() {
    // The run-away system keeps V = l, so the trained model has a sharp target.
    let sys = SystemSpec::integrator(Mode::Avoid, 0.25, 1.0, 0.5);
    let cfg = small_cfg(Variant::Exact);
    let mut params = cfg.init_params(&sys).unwrap();
    run_pretrain(&mut params, &sys, &cfg, None).unwrap();
    let stats = run_train(&mut params, &sys, &cfg, 0, None).unwrap();
    assert_eq!(stats.len(), cfg.iters);
    assert!(stats.iter().all(|s| s.pde_loss.is_finite()));

    let vf = LearnedValue::new(Variant::Exact, params, sys.clone());
    let g = Grid::for_system(&sys, vec![201]).unwrap();
    let truth = grid::solve(&sys, &g, sys.horizon, grid::DEFAULT_CFL).unwrap();
    let learned = vf.values_at(&g.nodes(), 0.0).unwrap();
    let err = learned
        .iter()
        .zip(&truth.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 0.05, "max error {err}");

    let vcfg = VerifyConfig {
        epsilon: 0.1,
        calib_samples: 200,
        volume_samples: 5000,
        ..Default::default()
    };
    let cal = verify::calibrate(&vf, &vcfg, &mut rng::stream(1, Stream::Calibration)).unwrap();
    assert!(cal.delta >= 0.0 && cal.delta < 0.05, "delta {}", cal.delta);
    let xs = verify::sample_states(&sys, 5000, &mut rng::stream(1, Stream::Volume));
    let base = verify::safe_flags(&vf, &xs, 0.0).unwrap();
    let corrected = verify::safe_flags(&vf, &xs, cal.delta).unwrap();
    assert!(corrected.iter().zip(&base).all(|(c, b)| !c || *b));
}

#[test]
fn field_slice_survives_a_disk_round_trip() {
    let sys = SystemSpec::rimless_wheel();
    let g = Grid::for_system(&sys, vec![41, 41]).unwrap();
    let field = grid::solve(&sys, &g, 1.0, grid::DEFAULT_CFL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.grid");
    io::save_field(&path, &field).unwrap();
    let back = io::load_field(&path).unwrap();
    let spec = SliceSpec {
        dims: [1, 0],
        fixed: vec![0.0, 0.0],
        resolution: 33,
        time: 0.0,
        delta: 0.01,
    };
    let (mut a, mut b) = (Vec::new(), Vec::new());
    io::export_field_slice(&field, &sys, &spec, &mut a).unwrap();
    io::export_field_slice(&back, &sys, &spec, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 33 * 33);
}

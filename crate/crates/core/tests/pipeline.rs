use hsi_paws::config::TrainConfig;
use hsi_paws::data::generate_synthetic;
use hsi_paws::downstream::EvalMode;
use hsi_paws::pipeline::{evaluate, pretrain};

fn setup(seed: u64) -> (hsi_paws::data::HsiCube, TrainConfig) {
    let mut cfg = TrainConfig::parse(
        "[data]\nsupport_per_class = 6\nunlabeled_count = 64\n[paws]\nepochs = 2\npairs_per_batch = 32\n\
         [encoder]\nconv3d_channels = 4\nds_widths = [16, 16, 16]\nembedding_dim = 16\n\
         [downstream]\nepochs = 2\n[synth]\nrows = 28\ncols = 28\nbands = 16\n",
    )
    .unwrap();
    cfg.seed = seed;
    let mut cube = generate_synthetic(&cfg.synthetic_spec()).unwrap();
    cube.normalize_bands();
    (cube, cfg)
}

#[test]
fn pretraining_is_deterministic_and_finite() {
    let (cube, cfg) = setup(3);
    let a = pretrain(&cube, &cfg, 3).unwrap();
    let b = pretrain(&cube, &cfg, 3).unwrap();
    assert!(a.params.values_bit_identical(&b.params));
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.epoch_losses.len(), 2);
    assert!(a.epoch_losses.iter().all(|l| l.is_finite() && *l >= -(4f64.ln()) - 1e-9));

    let c = pretrain(&cube, &cfg, 4).unwrap();
    assert!(!a.params.values_bit_identical(&c.params));
}

#[test]
fn every_mode_reports_consistent_counts() {
    let (cube, cfg) = setup(8);
    let trained = pretrain(&cube, &cfg, 8).unwrap().params;
    for mode in EvalMode::ALL {
        let r = evaluate(&cube, &cfg, &trained, mode, 8).unwrap();
        assert_eq!(r.mode, mode);
        assert_eq!(r.per_class_count.iter().sum::<usize>(), r.sample_count);
        assert!((r.overall_accuracy - r.correct as f64 / r.sample_count as f64).abs() < 1e-12);
        assert_eq!(r.config_digest, cfg.digest());
        let again = evaluate(&cube, &cfg, &trained, mode, 8).unwrap();
        assert_eq!(r.to_csv(), again.to_csv());
    }
}

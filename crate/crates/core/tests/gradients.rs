use negotiated::gradcheck::{check_layer_suite, check_spec, GradCheckOptions};
use negotiated::nn::{preset_cifar10, preset_mnist};

const SEEDS: u64 = 20;

#[test]
fn every_layer_kind_matches_finite_differences() {
    for seed in 0..SEEDS {
        let opts = GradCheckOptions { seed, ..Default::default() };
        let report = check_layer_suite(&opts).unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
    }
}

#[test]
fn mnist_preset_matches_finite_differences() {
    let mut skipped = 0;
    let mut checked = 0;
    for seed in 0..SEEDS {
        let opts = GradCheckOptions { seed, ..Default::default() };
        let report = check_spec(&preset_mnist(), 4, &opts).unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
        for e in &report.entries {
            skipped += e.skipped;
            checked += e.checked;
        }
    }
    // Kink skips must stay the exception, or the check proves little.
    assert!(skipped * 4 < checked, "{skipped} skipped vs {checked} checked");
}

#[test]
fn cifar10_preset_matches_finite_differences() {
    let opts = GradCheckOptions { seed: 7, checks_per_tensor: 4, ..Default::default() };
    let report = check_spec(&preset_cifar10(), 2, &opts).unwrap();
    assert!(report.passed(), "{report}");
}

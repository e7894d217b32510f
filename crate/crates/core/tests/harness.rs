//! Calibrating every transform site of a toy block lowers its output error.

use bat_core::calib::CalibConfig;
use bat_core::harness::{build_toy_block, outlier_activations, simulate_block, Template, ToyBlockSpec};
use bat_core::io::BitConfig;

fn block_mse(r: &bat_core::harness::SimReport) -> f64 {
    r.site_mse.iter().find(|(n, _)| n == "block_output").unwrap().1
}

#[test]
fn calibration_lowers_block_error() {
    for (template, bits) in [(Template::Text, "W4A4KV4"), (Template::Vit, "W4A4KV16")] {
        let spec = ToyBlockSpec {
            template,
            ..ToyBlockSpec::default()
        };
        let mut block = build_toy_block(&spec).unwrap();
        let x = outlier_activations(48, spec.hidden, &[5, 77], 50.0, 3);
        let bits = BitConfig::parse(bits).unwrap();
        let before = simulate_block(&block, &x, &bits).unwrap();
        let cfg = CalibConfig {
            lr: 1e-2,
            epochs: 3,
            ..CalibConfig::default()
        };
        block.calibrate(&x, &bits, &cfg).unwrap();
        let after = simulate_block(&block, &x, &bits).unwrap();
        assert!(
            block_mse(&after) < 0.9 * block_mse(&before),
            "{template:?}: {} -> {}",
            block_mse(&before),
            block_mse(&after)
        );
        // every quantized site improves or holds
        for ((name, b), (_, a)) in before.site_mse.iter().zip(&after.site_mse) {
            assert!(a <= &(b * 1.05), "{template:?} {name}: {b} -> {a}");
        }
    }
}

#[test]
fn full_precision_config_is_lossless() {
    let spec = ToyBlockSpec::default();
    let block = build_toy_block(&spec).unwrap();
    let x = outlier_activations(8, spec.hidden, &[1], 50.0, 0);
    let r = simulate_block(&block, &x, &BitConfig::parse("W16A16KV16").unwrap()).unwrap();
    assert!(r.site_mse.iter().all(|(_, m)| *m == 0.0));
}

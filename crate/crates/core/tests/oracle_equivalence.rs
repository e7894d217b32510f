//! Fast kernels against the brute-force references.

use bat_core::mxfp::{dequantize_block, quantize_block, quantize_tensor};
use bat_core::oracle::{dense_inverse_oracle, dense_transform_oracle, max_rel_error, nearest_mx_oracle};
use bat_core::transform::{gpk_forward, gpk_inverse_forward, kron, materialize};
use bat_core::verify::{check_inverse_roundtrip, check_quantizer, check_transform_dense};
use bat_core::{GpkTransform, Mat, MxFormat};
use proptest::prelude::*;

#[test]
fn quantizer_codes_match_oracle() {
    for fmt in [MxFormat::e2m1(), MxFormat::e4m3()] {
        let r = check_quantizer(&fmt, 5000, 7);
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn transform_and_inverse_match_dense() {
    let r = check_transform_dense(100, 3);
    assert!(r.pass, "{r:?}");
    let r = check_inverse_roundtrip(100, 3);
    assert!(r.pass, "{r:?}");
}

#[test]
fn kron_inverse_factorizes() {
    let a = Mat::from_vec(2, 2, vec![2.0, 1.0, 0.5, 3.0]).unwrap();
    let b = Mat::from_vec(3, 3, vec![1.0, 0.2, 0.0, -0.3, 2.0, 0.1, 0.0, 0.4, 1.5]).unwrap();
    let lhs = dense_inverse_oracle(&kron(&b, &a)).unwrap();
    let rhs = kron(&dense_inverse_oracle(&b).unwrap(), &dense_inverse_oracle(&a).unwrap());
    assert!(max_rel_error(&lhs.data, &rhs.data) < 1e-12);
}

#[test]
fn materialized_blocks_match_oracle_columns() {
    let a = Mat::from_vec(8, 8, (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect()).unwrap();
    let b: Vec<Mat> = (0..2)
        .map(|s| Mat::from_vec(4, 4, (0..16).map(|i| ((i * 5 + s) % 11) as f64 / 4.0 - 1.0).collect()).unwrap())
        .collect();
    let t = GpkTransform::from_factors(64, a.clone(), b.clone()).unwrap();
    let dense = materialize(&t);
    let x: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
    assert!(max_rel_error(&dense_transform_oracle(&x, &a, &b), &dense.apply(&x)) < 1e-12);
}

fn block_strategy() -> impl Strategy<Value = Vec<f64>> {
    (-40i32..40, prop::collection::vec(-1000.0f64..1000.0, 32)).prop_map(|(e, v)| {
        let s = 2f64.powi(e);
        v.into_iter().map(|x| x * s).collect()
    })
}

proptest! {
    #[test]
    fn dequantized_block_equals_oracle(v in block_strategy(), wide in any::<bool>()) {
        let fmt = if wide { MxFormat::e4m3() } else { MxFormat::e2m1() };
        let b = quantize_block(&v, &fmt).unwrap();
        prop_assert_eq!(dequantize_block(&b, &fmt).to_vec(), nearest_mx_oracle(&v, &fmt));
    }

    #[test]
    fn tensor_quantization_is_blockwise(rows in 1usize..4, v in prop::collection::vec(-50.0f64..50.0, 256)) {
        let fmt = MxFormat::e2m1();
        let data = &v[..rows * 64];
        let t = quantize_tensor(&[rows, 64], data, &fmt).unwrap();
        let want: Vec<f64> = data.chunks(32).flat_map(|c| nearest_mx_oracle(c, &fmt)).collect();
        prop_assert_eq!(t.dequantize(), want);
    }

    #[test]
    fn inverse_forward_undoes_forward(seed in 0u64..1000, k in 1usize..5) {
        let mut a = Mat::identity(8);
        let mut bs = vec![Mat::identity(4); k];
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.3 };
        for v in &mut a.data { *v += next(); }
        for b in &mut bs { for v in &mut b.data { *v += next(); } }
        let t = GpkTransform::from_factors(32 * k, a, bs).unwrap();
        let x: Vec<f64> = (0..64 * k).map(|i| (i as f64).cos() * 3.0).collect();
        let back = gpk_inverse_forward(&gpk_forward(&x, &t).unwrap(), &t).unwrap();
        prop_assert!(max_rel_error(&x, &back) < 1e-10);
    }
}

//! Cross-checks of the fast kernels against the brute-force references in
//! [`crate::oracle`]. Used by `batq verify` and the acceptance tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calib::{calibrate_layer, loss, loss_and_grad, quantized_forward, CalibConfig, QuantSpec, Theta};
use crate::clipping::SATURATED;
use crate::error::Result;
use crate::linalg::Mat;
use crate::mxfp::{fake_quantize, quantize_block, MxFormat, BLOCK_SIZE};
use crate::oracle::{
    decoded_grid, dense_inverse_oracle, dense_transform_oracle, max_rel_error, nearest_mx_oracle_codes,
    piecewise_finite_diff_oracle,
};
use crate::transform::{
    gpk_forward, gpk_forward_counted, gpk_inverse_forward, param_count, DecompositionKind, GpkTransform,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// First failing case, if any.
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            cases,
            max_error,
            tolerance,
            pass: max_error <= tolerance && detail.is_empty(),
            detail,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Blocks that exercise wide scale ranges, exact ties, zeros and saturation.
pub fn random_quant_block(rng: &mut impl Rng, fmt: &MxFormat) -> Vec<f64> {
    let grid = decoded_grid(fmt);
    let top = *grid.last().unwrap();
    match rng.gen_range(0..6) {
        0 => {
            let s = 2f64.powi(rng.gen_range(-30..30));
            (0..BLOCK_SIZE).map(|_| normal(rng) * s).collect()
        }
        1 => {
            let s = 2f64.powi(rng.gen_range(-10..10));
            let mut v: Vec<f64> = (0..BLOCK_SIZE).map(|_| rng.gen_range(-1.0..1.0) * s).collect();
            v[rng.gen_range(0..BLOCK_SIZE)] = s * rng.gen_range(10.0..1000.0);
            v
        }
        2 => {
            // midpoints between neighbouring grid values, pinned to a known scale
            let s = 2f64.powi(rng.gen_range(-20..20));
            let mut v: Vec<f64> = (0..BLOCK_SIZE)
                .map(|_| {
                    let j = rng.gen_range(0..grid.len() - 1);
                    let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
                    sign * 0.5 * (grid[j] + grid[j + 1]) * s
                })
                .collect();
            v[0] = top * s;
            v
        }
        3 => {
            let s = 2f64.powi(rng.gen_range(-20..20));
            (0..BLOCK_SIZE)
                .map(|_| match rng.gen_range(0..3) {
                    0 => 0.0,
                    1 => grid[rng.gen_range(0..grid.len())] * s,
                    _ => -grid[rng.gen_range(0..grid.len())] * s,
                })
                .collect()
        }
        4 => {
            // shared exponent pushed against its clamp
            let e = if rng.gen_bool(0.5) {
                rng.gen_range(-160..-120)
            } else {
                rng.gen_range(120..135)
            };
            let s = 2f64.powi(e);
            (0..BLOCK_SIZE).map(|_| normal(rng) * s).collect()
        }
        _ => {
            if rng.gen_bool(0.1) {
                vec![0.0; BLOCK_SIZE]
            } else {
                (0..BLOCK_SIZE).map(|_| rng.gen_range(-8.0..8.0)).collect()
            }
        }
    }
}

/// `quantize_block` against the exhaustive oracle on the given blocks;
/// exponents and every code must agree exactly.
pub fn check_quantizer_on(name: &str, fmt: &MxFormat, blocks: &[Vec<f64>]) -> CheckResult {
    let mut mismatches = 0usize;
    let mut detail = String::new();
    for (i, v) in blocks.iter().enumerate() {
        let (exp, codes) = nearest_mx_oracle_codes(v, fmt);
        let ok = match quantize_block(v, fmt) {
            Ok(b) => b.scale_exp as i32 == exp && b.codes[..] == codes[..],
            Err(_) => false,
        };
        if !ok {
            mismatches += 1;
            if detail.is_empty() {
                detail = format!("block {i} differs from the oracle");
            }
        }
    }
    CheckResult::new(name, blocks.len(), mismatches as f64, 0.0, detail)
}

pub fn check_quantizer(fmt: &MxFormat, blocks: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..blocks).map(|_| random_quant_block(&mut rng, fmt)).collect();
    check_quantizer_on(&format!("quantizer {:?}", fmt.kind), fmt, &data)
}

const SPLITS: [(usize, usize); 6] = [(1, 32), (2, 16), (4, 8), (8, 4), (16, 2), (32, 1)];

/// Identity plus a perturbation small enough to keep factors well conditioned.
fn near_identity(rng: &mut impl Rng, n: usize, eps: f64) -> Mat {
    let mut m = Mat::identity(n);
    for v in &mut m.data {
        *v += rng.gen_range(-eps..eps) / (n as f64).sqrt();
    }
    m
}

fn random_transform(rng: &mut impl Rng, max_k: usize) -> GpkTransform {
    let (g1, g2) = SPLITS[rng.gen_range(0..SPLITS.len())];
    let k = rng.gen_range(1..=max_k);
    let eps = rng.gen_range(0.05..1.0);
    let a = near_identity(rng, g1, eps);
    let b = (0..k).map(|_| near_identity(rng, g2, eps)).collect();
    GpkTransform::from_factors(k * BLOCK_SIZE, a, b).expect("square factors")
}

/// Forward pass against the dense oracle on random shapes with `N <= 512`.
pub fn check_transform_dense(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = random_transform(&mut rng, 16);
        let rows = rng.gen_range(1..=4);
        let x: Vec<f64> = (0..rows * t.n).map(|_| normal(&mut rng)).collect();
        let fast = gpk_forward(&x, &t).expect("valid shapes");
        worst = worst.max(max_rel_error(&dense_transform_oracle(&x, &t.a, &t.b), &fast));
    }
    CheckResult::new("transform vs dense", cases, worst, 1e-6, String::new())
}

/// `gpk_inverse_forward(gpk_forward(x))` returns `x`, and the inverse agrees
/// with the dense per-block inverse. Cases with condition >= 1e4 are skipped.
pub fn check_inverse_roundtrip(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut used = 0;
    let mut detail = String::new();
    while used < cases {
        let t = random_transform(&mut rng, 16);
        if t.condition() >= 1e4 {
            continue;
        }
        used += 1;
        let rows = rng.gen_range(1..=4);
        let x: Vec<f64> = (0..rows * t.n).map(|_| normal(&mut rng)).collect();
        let y = gpk_forward(&x, &t).expect("valid shapes");
        let back = match gpk_inverse_forward(&y, &t) {
            Ok(b) => b,
            Err(e) => {
                detail = format!("inverse failed: {e}");
                break;
            }
        };
        worst = worst.max(max_rel_error(&x, &back));
        // dense check on the first block only: y_0 P_0^{-1}
        let g = t.g();
        let p0 = Mat::from_vec(
            g,
            g,
            (0..g)
                .flat_map(|r| {
                    let mut e = vec![0.0; g];
                    e[r] = 1.0;
                    dense_transform_oracle(&e, &t.a, &t.b[..1])
                })
                .collect(),
        )
        .expect("g x g");
        let inv = dense_inverse_oracle(&p0).expect("well conditioned");
        let y0 = Mat::from_vec(1, g, y[..g].to_vec()).expect("one row");
        worst = worst.max(max_rel_error(&y0.matmul(&inv).data, &back[..g]));
    }
    CheckResult::new("inverse round trip", used, worst, 1e-5, detail)
}

/// `rowvec(V) (B ⊗ A) = rowvec(B^T V A)` for `V` of shape `g2 x g1`, with the
/// Kronecker product from nalgebra. The right side is also produced by
/// `gpk_forward` with stored factor `B^T`.
pub fn check_vec_identity(cases: usize, seed: u64) -> CheckResult {
    let (g1, g2) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let a = Mat::from_vec(g1, g1, (0..g1 * g1).map(|_| normal(&mut rng)).collect()).unwrap();
        let b = Mat::from_vec(g2, g2, (0..g2 * g2).map(|_| normal(&mut rng)).collect()).unwrap();
        let v = Mat::from_vec(g2, g1, (0..g2 * g1).map(|_| normal(&mut rng)).collect()).unwrap();
        let kb = DMatrix::from_row_slice(g2, g2, &b.data);
        let ka = DMatrix::from_row_slice(g1, g1, &a.data);
        let lhs = DMatrix::from_row_slice(1, g1 * g2, &v.data) * kb.kronecker(&ka);
        let lhs: Vec<f64> = lhs.iter().copied().collect();
        let rhs = b.transpose().matmul(&v).matmul(&a);
        worst = worst.max(max_rel_error(&lhs, &rhs.data));
        let t = GpkTransform::from_factors(g1 * g2, a, vec![b.transpose()]).unwrap();
        worst = worst.max(max_rel_error(&lhs, &gpk_forward(&v.data, &t).unwrap()));
    }
    CheckResult::new("vec identity", cases, worst, 1e-6, String::new())
}

/// Factors moved off identity and clip logits in a range where some
/// elements are clamped.
pub fn random_theta(rng: &mut impl Rng, n: usize, g1: usize, g2: usize) -> Theta {
    let mut theta = Theta::identity(n, g1, g2, 0.0).expect("valid dims");
    let mut flat = theta.to_flat();
    let factors = g1 * g1 + (n / BLOCK_SIZE) * g2 * g2;
    for v in &mut flat[..factors] {
        *v += rng.gen_range(-0.2..0.2);
    }
    for v in &mut flat[factors..] {
        *v = rng.gen_range(1.0..3.0);
    }
    theta.set_flat(&flat);
    theta
}

/// Largest relative error per parameter group: A, B, activation clip,
/// weight clip. Each group is normalised by its largest numeric entry.
pub fn gradient_group_errors(theta: &Theta, analytic: &[f64], numeric: &[f64]) -> Vec<(&'static str, f64)> {
    let t = &theta.transform;
    let (na, nb, k) = (t.g1 * t.g1, t.g2 * t.g2 * t.k(), t.k());
    let groups = [
        ("A", 0, na),
        ("B", na, na + nb),
        ("act_clip", na + nb, na + nb + 2 * k),
        ("weight_clip", na + nb + 2 * k, na + nb + 4 * k),
    ];
    groups
        .iter()
        .map(|&(name, lo, hi)| {
            let scale = numeric[lo..hi].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            let err = analytic[lo..hi]
                .iter()
                .zip(&numeric[lo..hi])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            (name, err / scale)
        })
        .collect()
}

/// Initial central-difference step. Clip bounds follow block extrema and
/// clamp elements, so the loss has kinks; the piecewise oracle shrinks the
/// step where one is straddled.
pub const FD_STEP: f64 = 1e-4;

/// Analytic gradients on the unquantized path against central differences
/// of the forward loss, one random problem per seed.
pub fn check_gradients(seeds: usize, seed: u64) -> CheckResult {
    let spec = QuantSpec::default();
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let n = 64;
        let x = Mat::from_vec(6, n, (0..6 * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Mat::from_vec(5, n, (0..5 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let theta = random_theta(&mut rng, n, 8, 4);
        let (_, grad) = loss_and_grad(&x, &w, &theta, &spec).expect("valid problem");
        let y_ref = x.matmul_t(&w);
        let numeric = piecewise_finite_diff_oracle(
            |p| {
                let mut t = theta.clone();
                t.set_flat(p);
                let yq = quantized_forward(&x, &w, &t, &spec).expect("valid problem");
                loss(&y_ref, &yq).expect("same shape")
            },
            &theta.to_flat(),
            FD_STEP,
        );
        for (name, err) in gradient_group_errors(&theta, &grad.to_flat(), &numeric) {
            if err > worst {
                worst = err;
                if err > 1e-4 {
                    detail = format!("seed {s} group {name}");
                }
            }
        }
    }
    CheckResult::new("gradients vs finite differences", seeds, worst, 1e-4, detail)
}

/// Plain round-to-nearest simulation: quantize activations and weights
/// block-wise, then multiply.
pub fn plain_rtn(x: &Mat, w: &Mat, fmt: &MxFormat) -> Result<Mat> {
    let mut xq = vec![0.0; x.data.len()];
    fake_quantize(&x.data, fmt, &mut xq, None)?;
    let mut wq = vec![0.0; w.data.len()];
    fake_quantize(&w.data, fmt, &mut wq, None)?;
    Ok(Mat::from_vec(x.rows, x.cols, xq)?.matmul_t(&Mat::from_vec(w.rows, w.cols, wq)?))
}

/// Identity transforms, saturated clips and `lr = 0`: the calibrated and
/// fused layer must reproduce [`plain_rtn`] bit for bit.
pub fn check_identity_baseline(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (128, 48);
    let w = Mat::from_vec(m, n, (0..m * n).map(|_| normal(&mut rng) * 0.1).collect()).unwrap();
    let xs: Vec<Mat> = (0..8)
        .map(|_| Mat::from_vec(4, n, (0..4 * n).map(|_| normal(&mut rng) * 3.0).collect()).unwrap())
        .collect();
    let cfg = CalibConfig {
        lr: 0.0,
        epochs: 2,
        clip_init: SATURATED,
        seed,
        ..CalibConfig::default()
    };
    let fmt = MxFormat::e2m1();
    let mut mismatched = 0usize;
    let mut detail = String::new();
    match calibrate_layer(w.clone(), xs.clone(), cfg, QuantSpec::w4a4()) {
        Ok(out) => {
            for (i, x) in xs.iter().enumerate() {
                let want = plain_rtn(x, &w, &fmt).expect("valid shapes");
                let fused = out.fused.forward(x).expect("valid shapes");
                let online = quantized_forward(x, &w, &out.run.theta, &QuantSpec::w4a4()).expect("valid shapes");
                let bad = want
                    .data
                    .iter()
                    .zip(fused.data.iter().zip(&online.data))
                    .filter(|(a, (b, c))| a.to_bits() != b.to_bits() || a.to_bits() != c.to_bits())
                    .count();
                if bad > 0 && detail.is_empty() {
                    detail = format!("sample {i}: {bad} outputs differ");
                }
                mismatched += bad;
            }
        }
        Err(e) => detail = format!("calibration failed: {e}"),
    }
    CheckResult::new("identity baseline = RTN", xs.len(), mismatched as f64, 0.0, detail)
}

/// Multiply-add count of `gpk_forward` equals `S * N * (g1 + g2)`.
pub fn check_mac_count(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut detail = String::new();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = random_transform(&mut rng, 16);
        let s = rng.gen_range(1..=8);
        let x: Vec<f64> = (0..s * t.n).map(|_| normal(&mut rng)).collect();
        let (_, macs) = gpk_forward_counted(&x, &t).expect("valid shapes");
        let want = (s * t.n * (t.g1 + t.g2)) as u64;
        let diff = macs.abs_diff(want) as f64;
        if diff > worst {
            worst = diff;
            detail = format!("S={s} N={} g1={} g2={}: {macs} != {want}", t.n, t.g1, t.g2);
        }
    }
    CheckResult::new("multiply-add count", cases, worst, 0.0, detail)
}

/// Reference parameter counts at `N = 4096, g = 32, g1 = 8, g2 = 4`.
pub const PARAM_TABLE: [(DecompositionKind, usize); 4] = [
    (DecompositionKind::GlobalKronecker, 8192),
    (DecompositionKind::Full, 131072),
    (DecompositionKind::NaiveKronecker, 10240),
    (DecompositionKind::Gpk, 2112),
];

pub fn check_param_table() -> CheckResult {
    let mut detail = String::new();
    for (kind, want) in PARAM_TABLE {
        match param_count(kind, 4096, 32, 8, 4) {
            Ok(got) if got == want => {}
            Ok(got) => {
                detail = format!("{}: {got} != {want}", kind.label());
                break;
            }
            Err(e) => {
                detail = format!("{}: {e}", kind.label());
                break;
            }
        }
    }
    CheckResult::new("parameter counts", PARAM_TABLE.len(), 0.0, 0.0, detail)
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub e2m1: MxFormat,
    pub e4m3: MxFormat,
    pub quant_blocks: usize,
    pub transform_cases: usize,
    pub gradient_seeds: usize,
    pub seed: u64,
    /// Extra blocks checked against the oracle in both formats.
    pub fixture_blocks: Vec<Vec<f64>>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            e2m1: MxFormat::e2m1(),
            e4m3: MxFormat::e4m3(),
            quant_blocks: 10_000,
            transform_cases: 200,
            gradient_seeds: 3,
            seed: 0,
            fixture_blocks: Vec::new(),
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = vec![
        check_param_table(),
        check_quantizer(&opts.e2m1, opts.quant_blocks, opts.seed),
        check_quantizer(&opts.e4m3, opts.quant_blocks, opts.seed + 1),
    ];
    if !opts.fixture_blocks.is_empty() {
        out.push(check_quantizer_on("fixtures E2M1", &opts.e2m1, &opts.fixture_blocks));
        out.push(check_quantizer_on("fixtures E4M3", &opts.e4m3, &opts.fixture_blocks));
    }
    out.extend([
        check_transform_dense(opts.transform_cases, opts.seed),
        check_inverse_roundtrip(opts.transform_cases, opts.seed),
        check_vec_identity(100, opts.seed),
        check_mac_count(opts.transform_cases, opts.seed),
        check_gradients(opts.gradient_seeds, opts.seed),
        check_identity_baseline(opts.seed),
    ]);
    out
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<34} {:>7} {:>11} {:>9}  status\n",
        "check", "cases", "max error", "tol"
    );
    for r in results {
        s.push_str(&format!(
            "{:<34} {:>7} {:>11.3e} {:>9.1e}  {}{}\n",
            r.name,
            r.cases,
            r.max_error,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" },
            if r.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", r.detail)
            },
        ));
    }
    s
}

//! Block-wise learnable clipping.
//!
//! Block `i` of a row is clamped to `[σ(α_min[i])·min(x_i), σ(α_max[i])·max(x_i)]`
//! where the extrema are taken over that block's own values. Logits are
//! shared by every row's block `i`.

/// Logit used at initialization (σ(4) ≈ 0.982).
pub const DEFAULT_INIT: f64 = 4.0;

/// Logit large enough that σ rounds to exactly 1.0 in f64.
pub const SATURATED: f64 = 40.0;

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[inline]
pub fn sigmoid_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub alpha_min: Vec<f64>,
    pub alpha_max: Vec<f64>,
}

impl ClipParams {
    pub fn new(k: usize, init: f64) -> Self {
        ClipParams {
            alpha_min: vec![init; k],
            alpha_max: vec![init; k],
        }
    }

    pub fn saturated(k: usize) -> Self {
        Self::new(k, SATURATED)
    }

    pub fn k(&self) -> usize {
        self.alpha_min.len()
    }

    pub fn bounds(&self, i: usize, x: &[f64]) -> ClipBounds {
        ClipBounds::new(x, self.alpha_min[i], self.alpha_max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBounds {
    pub beta_min: f64,
    pub beta_max: f64,
    argmin: usize,
    argmax: usize,
}

impl ClipBounds {
    pub fn new(x: &[f64], alpha_min: f64, alpha_max: f64) -> Self {
        let (mut argmin, mut argmax) = (0, 0);
        for (j, &v) in x.iter().enumerate() {
            if v < x[argmin] {
                argmin = j;
            }
            if v > x[argmax] {
                argmax = j;
            }
        }
        ClipBounds {
            beta_min: sigmoid(alpha_min) * x[argmin],
            beta_max: sigmoid(alpha_max) * x[argmax],
            argmin,
            argmax,
        }
    }

    /// Upper bound wins if the bounds cross.
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        if v > self.beta_max {
            self.beta_max
        } else if v < self.beta_min {
            self.beta_min
        } else {
            v
        }
    }
}

pub fn clip_block(x: &[f64], alpha_min: f64, alpha_max: f64) -> Vec<f64> {
    let b = ClipBounds::new(x, alpha_min, alpha_max);
    x.iter().map(|&v| b.apply(v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipGrad {
    pub d_alpha_min: f64,
    pub d_alpha_max: f64,
    /// Gradient w.r.t. the block input. Clamped elements route their
    /// gradient to the block extremum that defines the bound.
    pub d_x: Vec<f64>,
    /// `true` where the element passed through unclamped. Elements exactly on
    /// a bound count as unclamped.
    pub pass: Vec<bool>,
}

/// Reverse pass of [`clip_block`] given the upstream gradient `d_out`.
pub fn clip_gradients(x: &[f64], alpha_min: f64, alpha_max: f64, d_out: &[f64]) -> ClipGrad {
    let b = ClipBounds::new(x, alpha_min, alpha_max);
    let mut g = ClipGrad {
        d_alpha_min: 0.0,
        d_alpha_max: 0.0,
        d_x: vec![0.0; x.len()],
        pass: vec![true; x.len()],
    };
    let (s_min, s_max) = (sigmoid(alpha_min), sigmoid(alpha_max));
    let (ds_min, ds_max) = (sigmoid_grad(alpha_min), sigmoid_grad(alpha_max));
    let (x_min, x_max) = (x[b.argmin], x[b.argmax]);
    for (j, (&v, &d)) in x.iter().zip(d_out).enumerate() {
        if v > b.beta_max {
            g.pass[j] = false;
            g.d_alpha_max += d * ds_max * x_max;
            g.d_x[b.argmax] += d * s_max;
        } else if v < b.beta_min {
            g.pass[j] = false;
            g.d_alpha_min += d * ds_min * x_min;
            g.d_x[b.argmin] += d * s_min;
        } else {
            g.d_x[j] += d;
        }
    }
    g
}

/// Clips every `g`-wide block of every `n`-wide row.
pub fn clip_rows(x: &[f64], n: usize, g: usize, p: &ClipParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        for (i, blk) in row.chunks_exact(g).enumerate() {
            let b = p.bounds(i, blk);
            out.extend(blk.iter().map(|&v| b.apply(v)));
        }
    }
    out
}

/// Reverse of [`clip_rows`]: returns `d_x` and accumulates logit gradients
/// into `d_params` (row order, then block order).
pub fn clip_rows_backward(
    x: &[f64],
    n: usize,
    g: usize,
    p: &ClipParams,
    d_out: &[f64],
    d_params: &mut ClipParams,
) -> Vec<f64> {
    let mut d_x = Vec::with_capacity(x.len());
    for (row, drow) in x.chunks_exact(n).zip(d_out.chunks_exact(n)) {
        for (i, (blk, dblk)) in row.chunks_exact(g).zip(drow.chunks_exact(g)).enumerate() {
            let cg = clip_gradients(blk, p.alpha_min[i], p.alpha_max[i], dblk);
            d_params.alpha_min[i] += cg.d_alpha_min;
            d_params.alpha_max[i] += cg.d_alpha_max;
            d_x.extend_from_slice(&cg.d_x);
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mxfp::{shared_exponent, MxFormat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(rng: &mut impl Rng) -> Vec<f64> {
        (0..32).map(|_| rng.gen_range(-4.0..4.0)).collect()
    }

    #[test]
    fn saturated_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = block(&mut rng);
        assert_eq!(sigmoid(SATURATED), 1.0);
        assert_eq!(clip_block(&x, SATURATED, SATURATED), x);
    }

    #[test]
    fn half_ratio_at_zero_logit() {
        let mut x = vec![0.0; 32];
        x[3] = 10.0;
        x[4] = -2.0;
        let y = clip_block(&x, 0.0, 0.0);
        assert_eq!(y[3], 5.0);
        assert_eq!(y[4], -1.0);
    }

    #[test]
    fn clipping_never_raises_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = MxFormat::e2m1();
        for _ in 0..500 {
            let x = block(&mut rng);
            let (a, b) = (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
            let y = clip_block(&x, a, b);
            let m0 = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let m1 = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(m1 <= m0);
            assert!(shared_exponent(m1, &f) <= shared_exponent(m0, &f));
        }
    }

    #[test]
    fn outputs_stay_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = block(&mut rng);
            let (a, b) = (rng.gen_range(-3.0..6.0), rng.gen_range(-3.0..6.0));
            let bd = ClipBounds::new(&x, a, b);
            assert!(bd.beta_min <= 0.0 && bd.beta_max >= 0.0);
            for v in clip_block(&x, a, b) {
                assert!(v >= bd.beta_min && v <= bd.beta_max);
            }
        }
    }

    #[test]
    fn no_clip_no_logit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = block(&mut rng);
        let d = vec![1.0; 32];
        let g = clip_gradients(&x, SATURATED, SATURATED, &d);
        assert_eq!((g.d_alpha_min, g.d_alpha_max), (0.0, 0.0));
        assert_eq!(g.d_x, d);
        assert!(g.pass.iter().all(|&p| p));
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 50 {
            let x = block(&mut rng);
            let (a, b) = (rng.gen_range(-1.0..3.0), rng.gen_range(-1.0..3.0));
            let w: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |a: f64, b: f64| -> f64 { clip_block(&x, a, b).iter().zip(&w).map(|(u, v)| u * v).sum() };
            // skip blocks with an element within reach of a bound
            let bd = ClipBounds::new(&x, a, b);
            let near = x.iter().any(|&v| {
                let d = (v - bd.beta_max).abs().min((v - bd.beta_min).abs());
                d > 0.0 && d < 1e-3
            });
            if near {
                continue;
            }
            let g = clip_gradients(&x, a, b, &w);
            let na = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
            let nb = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
            assert!((g.d_alpha_min - na).abs() <= 1e-4 * na.abs().max(1e-3));
            assert!((g.d_alpha_max - nb).abs() <= 1e-4 * nb.abs().max(1e-3));
            checked += 1;
        }
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let mut x = vec![0.5; 32];
        x[0] = 3.0;
        let d = vec![1.0; 32];
        for a in [5.0, 10.0, 20.0] {
            // force a clip on the max side by shrinking below the element
            let g = clip_gradients(&x, a, a, &d);
            assert!(g.d_alpha_max.abs() <= sigmoid_grad(a) * 3.0 * 32.0);
        }
        assert!(sigmoid_grad(30.0) < 1e-12);
    }

    #[test]
    fn repeated_clipping_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = block(&mut rng);
        // ratio 1: a second pass changes nothing
        let once = clip_block(&x, SATURATED, SATURATED);
        assert_eq!(clip_block(&once, SATURATED, SATURATED), once);
        // ratio < 1: max-abs contracts geometrically
        let mut y = x.clone();
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            y = clip_block(&y, 0.0, 0.0);
            let m = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(m <= prev);
            prev = m;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn rows_clip_per_block() {
        let mut x = vec![1.0; 64];
        x[0] = 100.0;
        let p = ClipParams::new(2, 0.0);
        let y = clip_rows(&x, 64, 32, &p);
        assert_eq!(y[0], 50.0);
        // block 1 bounds come from block 1's own extrema
        assert_eq!(y[32], 0.5);
    }
}

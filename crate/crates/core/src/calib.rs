//! Layer-wise calibration of the block transform and clip logits.
//!
//! For a linear layer `Y = X W^T` the quantized path is
//!
//! ```text
//! X~ = Q(clip_a(X P))        W~ = Q(clip_w(W P^{-T}))        Y~ = X~ W~^T
//! ```
//!
//! and the loss is `||Y - Y~||_F^2`. Gradients are hand-derived for this
//! fixed graph: `Q` is a clipped straight-through estimator (identity inside
//! the representable range, zero where the scaled value saturated) with the
//! shared exponent held constant; clip and sigmoid use exact derivatives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clipping::{clip_rows, clip_rows_backward, ClipParams, DEFAULT_INIT};
use crate::error::{BatError, Result};
use crate::linalg::Mat;
use crate::mxfp::{fake_quantize, quantize_tensor, MxFormat, MxTensor, BLOCK_SIZE};
use crate::transform::{gpk_forward, GpkTransform, DEFAULT_G1, DEFAULT_G2};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Calibration samples per optimizer step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Initial value of every clip logit.
    pub clip_init: f64,
    pub g1: usize,
    pub g2: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            lr: 2e-3,
            epochs: 5,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            clip_init: DEFAULT_INIT,
            g1: DEFAULT_G1,
            g2: DEFAULT_G2,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(BatError::Invalid(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(BatError::Invalid("epochs and batch_size must be >= 1".into()));
        }
        if self.g1 * self.g2 != BLOCK_SIZE {
            return Err(BatError::Invalid(format!(
                "g1 * g2 must equal the block size {BLOCK_SIZE}, got {}",
                self.g1 * self.g2
            )));
        }
        Ok(())
    }
}

/// Element formats on each side of the matmul; `None` leaves it unquantized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantSpec {
    pub weight: Option<MxFormat>,
    pub act: Option<MxFormat>,
}

impl QuantSpec {
    pub fn new(weight: Option<MxFormat>, act: Option<MxFormat>) -> Self {
        QuantSpec { weight, act }
    }

    pub fn w4a4() -> Self {
        Self::new(Some(MxFormat::e2m1()), Some(MxFormat::e2m1()))
    }
}

/// Learnable state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub transform: GpkTransform,
    pub act_clip: ClipParams,
    pub weight_clip: ClipParams,
}

impl Theta {
    pub fn identity(n: usize, g1: usize, g2: usize, clip_init: f64) -> Result<Self> {
        let transform = GpkTransform::identity(n, g1, g2)?;
        let k = transform.k();
        Ok(Theta {
            transform,
            act_clip: ClipParams::new(k, clip_init),
            weight_clip: ClipParams::new(k, clip_init),
        })
    }

    fn zeros_like(&self) -> Theta {
        let t = &self.transform;
        let k = t.k();
        Theta {
            transform: GpkTransform {
                n: t.n,
                g1: t.g1,
                g2: t.g2,
                a: Mat::zeros(t.g1, t.g1),
                b: vec![Mat::zeros(t.g2, t.g2); k],
            },
            act_clip: ClipParams::new(k, 0.0),
            weight_clip: ClipParams::new(k, 0.0),
        }
    }

    /// Flat parameter order: `A`, `B_0..B_{k-1}`, activation `α_min`, `α_max`,
    /// weight `α_min`, `α_max`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.transform.a.data.clone();
        for b in &self.transform.b {
            v.extend_from_slice(&b.data);
        }
        for c in [&self.act_clip, &self.weight_clip] {
            v.extend_from_slice(&c.alpha_min);
            v.extend_from_slice(&c.alpha_max);
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().expect("flat length"));
        fill(&mut self.transform.a.data);
        for b in &mut self.transform.b {
            fill(&mut b.data);
        }
        for c in [&mut self.act_clip, &mut self.weight_clip] {
            fill(&mut c.alpha_min);
            fill(&mut c.alpha_max);
        }
    }
}

/// Gradients of the loss with respect to every parameter group.
pub type ThetaGrad = Theta;

fn fake_q(values: &[f64], fmt: Option<&MxFormat>, with_mask: bool) -> Result<(Vec<f64>, Vec<bool>)> {
    match fmt {
        None => Ok((values.to_vec(), vec![true; if with_mask { values.len() } else { 0 }])),
        Some(f) => {
            let mut out = vec![0.0; values.len()];
            let mut mask = vec![true; if with_mask { values.len() } else { 0 }];
            fake_quantize(values, f, &mut out, with_mask.then_some(mask.as_mut_slice()))?;
            Ok((out, mask))
        }
    }
}

fn check_shapes(x: &Mat, w: &Mat, theta: &Theta) -> Result<()> {
    let n = theta.transform.n;
    if x.cols != n || w.cols != n {
        return Err(BatError::Mismatch(format!(
            "activation width {} and weight width {} must both equal transform width {n}",
            x.cols, w.cols
        )));
    }
    Ok(())
}

/// Intermediates of one forward pass, kept for the reverse pass.
struct Trace {
    weight_transform: GpkTransform,
    xt: Vec<f64>,
    xq: Mat,
    mask_x: Vec<bool>,
    wt: Vec<f64>,
    wq: Mat,
    mask_w: Vec<bool>,
    yq: Mat,
}

fn forward_trace(x: &Mat, w: &Mat, theta: &Theta, spec: &QuantSpec, with_mask: bool) -> Result<Trace> {
    check_shapes(x, w, theta)?;
    let t = &theta.transform;
    let (n, g) = (t.n, t.g());
    let weight_transform = t.inverse_transpose()?;

    let xt = gpk_forward(&x.data, t)?;
    let xc = clip_rows(&xt, n, g, &theta.act_clip);
    let (xq, mask_x) = fake_q(&xc, spec.act.as_ref(), with_mask)?;

    let wt = gpk_forward(&w.data, &weight_transform)?;
    let wc = clip_rows(&wt, n, g, &theta.weight_clip);
    let (wq, mask_w) = fake_q(&wc, spec.weight.as_ref(), with_mask)?;

    let xq = Mat::from_vec(x.rows, n, xq)?;
    let wq = Mat::from_vec(w.rows, n, wq)?;
    let yq = xq.matmul_t(&wq);
    Ok(Trace {
        weight_transform,
        xt,
        xq,
        mask_x,
        wt,
        wq,
        mask_w,
        yq,
    })
}

/// `Y~ = Q(clip(X P)) Q(clip(W P^{-T}))^T`.
pub fn quantized_forward(x: &Mat, w: &Mat, theta: &Theta, spec: &QuantSpec) -> Result<Mat> {
    Ok(forward_trace(x, w, theta, spec, false)?.yq)
}

/// Plain round-to-nearest simulation `Q(X) Q(W)^T` with no transform or clipping.
pub fn rtn_forward(x: &Mat, w: &Mat, spec: &QuantSpec) -> Result<Mat> {
    let (xq, _) = fake_q(&x.data, spec.act.as_ref(), false)?;
    let (wq, _) = fake_q(&w.data, spec.weight.as_ref(), false)?;
    Ok(Mat::from_vec(x.rows, x.cols, xq)?.matmul_t(&Mat::from_vec(w.rows, w.cols, wq)?))
}

/// Sum of squared differences.
pub fn loss(y_ref: &Mat, y_q: &Mat) -> Result<f64> {
    if (y_ref.rows, y_ref.cols) != (y_q.rows, y_q.cols) {
        return Err(BatError::Mismatch(format!(
            "loss operands {}x{} and {}x{}",
            y_ref.rows, y_ref.cols, y_q.rows, y_q.cols
        )));
    }
    Ok(y_ref.data.iter().zip(&y_q.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Accumulates `dB_i += G (V A)^T` and `dA += (B_i V)^T G` for every block of
/// every row, where `V` is the block input and `G` the output gradient.
fn transform_backward(input: &[f64], d_out: &[f64], a: &Mat, bs: &[Mat], d_a: &mut Mat, d_b: &mut [Mat]) {
    let (g1, g2) = (a.rows, bs[0].rows);
    let g = g1 * g2;
    let n = g * bs.len();
    let mut va = vec![0.0; g];
    let mut bv = vec![0.0; g];
    for (row, drow) in input.chunks_exact(n).zip(d_out.chunks_exact(n)) {
        for (i, b) in bs.iter().enumerate() {
            let v = &row[i * g..(i + 1) * g];
            let gr = &drow[i * g..(i + 1) * g];
            // va = V A ; bv = B V
            for p in 0..g2 {
                for s in 0..g1 {
                    va[p * g1 + s] = (0..g1).map(|q| v[p * g1 + q] * a.get(q, s)).sum();
                    bv[p * g1 + s] = (0..g2).map(|r| b.get(p, r) * v[r * g1 + s]).sum();
                }
            }
            let db = &mut d_b[i];
            for p in 0..g2 {
                for r in 0..g2 {
                    let acc: f64 = (0..g1).map(|s| gr[p * g1 + s] * va[r * g1 + s]).sum();
                    db.data[p * g2 + r] += acc;
                }
            }
            for q in 0..g1 {
                for s in 0..g1 {
                    let acc: f64 = (0..g2).map(|p| bv[p * g1 + q] * gr[p * g1 + s]).sum();
                    d_a.data[q * g1 + s] += acc;
                }
            }
        }
    }
}

/// Chain rule through `C = M^{-T}`: `dL/dM = -C (dL/dC)^T C`.
fn through_inverse_transpose(c: &Mat, d_c: &Mat) -> Mat {
    c.matmul(&d_c.transpose()).matmul(c).scale(-1.0)
}

/// Loss and gradient for one batch.
pub fn loss_and_grad(x: &Mat, w: &Mat, theta: &Theta, spec: &QuantSpec) -> Result<(f64, ThetaGrad)> {
    let tr = forward_trace(x, w, theta, spec, true)?;
    let t = &theta.transform;
    let (n, g) = (t.n, t.g());
    let y = x.matmul_t(w);
    let l = loss(&y, &tr.yq)?;

    let gy = tr.yq.sub(&y).scale(2.0);
    let mut d_xq = gy.matmul(&tr.wq);
    let mut d_wq = gy.transpose().matmul(&tr.xq);
    for (d, &m) in d_xq.data.iter_mut().zip(&tr.mask_x) {
        if !m {
            *d = 0.0;
        }
    }
    for (d, &m) in d_wq.data.iter_mut().zip(&tr.mask_w) {
        if !m {
            *d = 0.0;
        }
    }

    let mut grad = theta.zeros_like();
    let d_xt = clip_rows_backward(&tr.xt, n, g, &theta.act_clip, &d_xq.data, &mut grad.act_clip);
    let d_wt = clip_rows_backward(&tr.wt, n, g, &theta.weight_clip, &d_wq.data, &mut grad.weight_clip);

    let GpkTransform { a: d_a, b: d_b, .. } = &mut grad.transform;
    transform_backward(&x.data, &d_xt, &t.a, &t.b, d_a, d_b);

    let wtf = &tr.weight_transform;
    let mut d_wa = Mat::zeros(t.g1, t.g1);
    let mut d_wb = vec![Mat::zeros(t.g2, t.g2); t.k()];
    transform_backward(&w.data, &d_wt, &wtf.a, &wtf.b, &mut d_wa, &mut d_wb);
    let extra = through_inverse_transpose(&wtf.a, &d_wa);
    d_a.data.iter_mut().zip(&extra.data).for_each(|(d, e)| *d += e);
    for ((db, c), dc) in d_b.iter_mut().zip(&wtf.b).zip(&d_wb) {
        let extra = through_inverse_transpose(c, dc);
        db.data.iter_mut().zip(&extra.data).for_each(|(d, e)| *d += e);
    }
    Ok((l, grad))
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &CalibConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * cfg.weight_decay * *p;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// One calibration job.
#[derive(Debug, Clone)]
pub struct CalibRun {
    pub weights: Mat,
    pub calib_set: Vec<Mat>,
    pub theta: Theta,
    pub loss_trace: Vec<LossRecord>,
    pub optimizer_state: AdamState,
    pub config: CalibConfig,
    pub spec: QuantSpec,
}

#[derive(Debug, Clone)]
pub enum FusedWeights {
    Quantized(MxTensor),
    Full(Mat),
}

impl FusedWeights {
    pub fn dense(&self) -> Mat {
        match self {
            FusedWeights::Quantized(t) => Mat {
                rows: t.shape[0],
                cols: t.shape[1],
                data: t.dequantize(),
            },
            FusedWeights::Full(m) => m.clone(),
        }
    }
}

/// Deployment form: pre-quantized weights plus the online activation path.
#[derive(Debug, Clone)]
pub struct FusedLayer {
    pub weights: FusedWeights,
    pub theta: Theta,
    pub act_format: Option<MxFormat>,
}

impl FusedLayer {
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let t = &self.theta.transform;
        if x.cols != t.n {
            return Err(BatError::Mismatch(format!("input width {} != {}", x.cols, t.n)));
        }
        let xt = gpk_forward(&x.data, t)?;
        let xc = clip_rows(&xt, t.n, t.g(), &self.theta.act_clip);
        let (xq, _) = fake_q(&xc, self.act_format.as_ref(), false)?;
        Ok(Mat::from_vec(x.rows, t.n, xq)?.matmul_t(&self.weights.dense()))
    }
}

/// Result of [`calibrate_layer`].
#[derive(Debug, Clone)]
pub struct CalibOutcome {
    pub fused: FusedLayer,
    pub run: CalibRun,
    /// Loss over the whole calibration set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Training ended worse than it started and the initial parameters were kept.
    pub reverted: bool,
}

fn stack_rows(mats: &[&Mat]) -> Mat {
    let cols = mats[0].cols;
    let mut data = Vec::with_capacity(mats.iter().map(|m| m.data.len()).sum());
    for m in mats {
        data.extend_from_slice(&m.data);
    }
    Mat {
        rows: data.len() / cols,
        cols,
        data,
    }
}

impl CalibRun {
    pub fn new(weights: Mat, calib_set: Vec<Mat>, config: CalibConfig, spec: QuantSpec) -> Result<Self> {
        config.validate()?;
        if calib_set.is_empty() {
            return Err(BatError::Invalid("calibration set is empty".into()));
        }
        let n = weights.cols;
        if let Some(bad) = calib_set.iter().find(|x| x.cols != n) {
            return Err(BatError::Mismatch(format!(
                "activation batch width {} != weight width {n}",
                bad.cols
            )));
        }
        for (i, x) in calib_set.iter().enumerate() {
            if let Some(p) = x.data.iter().position(|v| !v.is_finite()) {
                return Err(BatError::NonFinite {
                    index: i * x.data.len() + p,
                });
            }
        }
        if !n.is_multiple_of(BLOCK_SIZE) {
            return Err(BatError::Shape {
                dim: 1,
                size: n,
                reason: format!("feature dimension must be a multiple of {BLOCK_SIZE}"),
            });
        }
        let theta = Theta::identity(n, config.g1, config.g2, config.clip_init)?;
        let optimizer_state = AdamState::new(theta.to_flat().len());
        Ok(CalibRun {
            weights,
            calib_set,
            theta,
            loss_trace: Vec::new(),
            optimizer_state,
            config,
            spec,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.calib_set.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.config.epochs
    }

    /// Loss summed over every calibration sample at the current parameters.
    pub fn dataset_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for x in &self.calib_set {
            let yq = quantized_forward(x, &self.weights, &self.theta, &self.spec)?;
            total += loss(&x.matmul_t(&self.weights), &yq)?;
        }
        Ok(total)
    }

    /// Runs every epoch; each step is forward, loss, backward, AdamW.
    pub fn train(&mut self) -> Result<()> {
        let total = self.total_steps();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..self.calib_set.len()).collect();
        let mut step = 0;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                let parts: Vec<&Mat> = chunk.iter().map(|&i| &self.calib_set[i]).collect();
                let batch = stack_rows(&parts);
                let (l, grad) = loss_and_grad(&batch, &self.weights, &self.theta, &self.spec)?;
                if !l.is_finite() {
                    return Err(BatError::Diverged { step, loss: l });
                }
                let grads = grad.to_flat();
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(BatError::NonFiniteGradient { step });
                }
                let lr = cosine_lr(step, total, self.config.lr);
                self.loss_trace.push(LossRecord { step, lr, loss: l });
                let mut params = self.theta.to_flat();
                adamw_step(&mut params, &grads, &mut self.optimizer_state, &self.config, lr);
                self.theta.set_flat(&params);
                step += 1;
            }
        }
        // surfaces a transform that became singular on the last update
        self.theta.transform.inverse_transpose()?;
        Ok(())
    }

    /// Offline fusion: transform, clip and quantize the weights once.
    pub fn fuse(&self) -> Result<FusedLayer> {
        let t = &self.theta.transform;
        let wt = gpk_forward(&self.weights.data, &t.inverse_transpose()?)?;
        let wc = clip_rows(&wt, t.n, t.g(), &self.theta.weight_clip);
        let weights = match &self.spec.weight {
            Some(f) => FusedWeights::Quantized(quantize_tensor(&[self.weights.rows, t.n], &wc, f)?),
            None => FusedWeights::Full(Mat::from_vec(self.weights.rows, t.n, wc)?),
        };
        Ok(FusedLayer {
            weights,
            theta: self.theta.clone(),
            act_format: self.spec.act.clone(),
        })
    }

    /// Mean batch loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let spe = self.steps_per_epoch();
        self.loss_trace
            .chunks(spe)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Calibrates one layer end to end and fuses the result.
///
/// If the trained parameters score worse on the calibration set than the
/// initial ones, the initial parameters are kept.
pub fn calibrate_layer(
    weights: Mat,
    calib_set: Vec<Mat>,
    config: CalibConfig,
    spec: QuantSpec,
) -> Result<CalibOutcome> {
    let mut run = CalibRun::new(weights, calib_set, config, spec)?;
    let initial_theta = run.theta.clone();
    let initial_loss = run.dataset_loss()?;
    run.train()?;
    let mut final_loss = run.dataset_loss()?;
    let reverted = final_loss > initial_loss;
    if reverted {
        run.theta = initial_theta;
        final_loss = initial_loss;
    }
    let fused = run.fuse()?;
    Ok(CalibOutcome {
        fused,
        run,
        initial_loss,
        final_loss,
        reverted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipping::SATURATED;
    use rand::Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-3), 2e-3);
        assert!(cosine_lr(100, 100, 2e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 2e-3) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_noop() {
        let cfg = CalibConfig::default();
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut st, &cfg, 1e-2);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let cfg = CalibConfig::default();
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        let lr = 1e-2;
        adamw_step(&mut p, &g, &mut st, &cfg, lr);
        // bias-corrected moments on step 1 are g and g^2
        for (pi, gi) in p.iter().zip(g) {
            let expect = -lr * gi / (gi.abs() + cfg.eps);
            assert!((pi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_decoupled_decay() {
        let cfg = CalibConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec![2.0];
        let mut st = AdamState::new(1);
        for _ in 0..3 {
            adamw_step(&mut p, &[0.0], &mut st, &cfg, 0.5);
        }
        assert!((p[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn loss_basics() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data[2] += 1.0;
        assert_eq!(loss(&a, &b).unwrap(), 1.0);
        assert!(loss(&a, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn unquantized_identity_pipeline_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 5, 64);
        let w = rand_mat(&mut rng, 3, 64);
        let theta = Theta::identity(64, 8, 4, SATURATED).unwrap();
        let y = quantized_forward(&x, &w, &theta, &QuantSpec::default()).unwrap();
        assert_eq!(y, x.matmul_t(&w));
    }

    #[test]
    fn identity_pipeline_equals_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 6, 64).scale(7.0);
        let w = rand_mat(&mut rng, 4, 64);
        let theta = Theta::identity(64, 8, 4, SATURATED).unwrap();
        let spec = QuantSpec::w4a4();
        assert_eq!(
            quantized_forward(&x, &w, &theta, &spec).unwrap(),
            rtn_forward(&x, &w, &spec).unwrap()
        );
    }

    #[test]
    fn zero_batch_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::zeros(4, 64);
        let w = rand_mat(&mut rng, 3, 64);
        let theta = Theta::identity(64, 8, 4, DEFAULT_INIT).unwrap();
        let (l, g) = loss_and_grad(&x, &w, &theta, &QuantSpec::w4a4()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let mut theta = Theta::identity(64, 8, 4, 1.0).unwrap();
        let mut v = theta.to_flat();
        assert_eq!(v.len(), 64 + 2 * 16 + 4 * 2);
        v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64);
        theta.set_flat(&v);
        assert_eq!(theta.to_flat(), v);
        assert_eq!(theta.transform.b[1].data[0], 80.0);
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_mat(&mut rng, 8, 64);
        let set: Vec<Mat> = (0..6).map(|_| rand_mat(&mut rng, 2, 64)).collect();
        let cfg = CalibConfig {
            lr: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let out = calibrate_layer(w.clone(), set, cfg.clone(), QuantSpec::w4a4()).unwrap();
        assert_eq!(out.run.theta, Theta::identity(64, 8, 4, cfg.clip_init).unwrap());
        assert_eq!(out.run.loss_trace.len(), 4);
        // fused weights are RTN of the clipped, untransformed weights
        let clipped = clip_rows(&w.data, 64, 32, &ClipParams::new(2, cfg.clip_init));
        let expect = quantize_tensor(&[8, 64], &clipped, &MxFormat::e2m1()).unwrap();
        match &out.fused.weights {
            FusedWeights::Quantized(t) => assert_eq!(t, &expect),
            FusedWeights::Full(_) => panic!("expected quantized weights"),
        }
    }

    #[test]
    fn fused_inference_matches_training_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_mat(&mut rng, 8, 64);
        let set: Vec<Mat> = (0..8).map(|_| rand_mat(&mut rng, 2, 64).scale(3.0)).collect();
        let cfg = CalibConfig {
            lr: 1e-2,
            epochs: 2,
            ..Default::default()
        };
        let spec = QuantSpec::w4a4();
        let out = calibrate_layer(w.clone(), set.clone(), cfg, spec.clone()).unwrap();
        for x in &set {
            let online = quantized_forward(x, &w, &out.run.theta, &spec).unwrap();
            assert_eq!(out.fused.forward(x).unwrap(), online);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Mat::zeros(4, 64);
        assert!(CalibRun::new(w.clone(), vec![], CalibConfig::default(), QuantSpec::w4a4()).is_err());
        assert!(CalibRun::new(
            w.clone(),
            vec![Mat::zeros(2, 32)],
            CalibConfig::default(),
            QuantSpec::w4a4()
        )
        .is_err());
        let mut bad = Mat::zeros(2, 64);
        bad.data[3] = f64::NAN;
        assert!(matches!(
            CalibRun::new(w.clone(), vec![bad], CalibConfig::default(), QuantSpec::w4a4()),
            Err(BatError::NonFinite { .. })
        ));
        let cfg = CalibConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(CalibRun::new(w, vec![Mat::zeros(2, 64)], cfg, QuantSpec::w4a4()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_mat(&mut rng, 4, 64);
        let set = vec![rand_mat(&mut rng, 2, 64).scale(1e300); 2];
        let err = calibrate_layer(w, set, CalibConfig::default(), QuantSpec::default()).unwrap_err();
        assert!(matches!(
            err,
            BatError::Diverged { .. } | BatError::NonFiniteGradient { .. }
        ));
    }
}

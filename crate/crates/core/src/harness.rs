//! Toy transformer blocks with transforms attached at every quantized matmul.
//!
//! Text blocks use `P_qkv` (shared by q/k/v projections), `P_o`, `P_up`
//! (shared by gate/up), `P_down`, plus per-head `P_k`/`P_v` on the KV cache.
//! ViT blocks use `P_qkv`, `P_o`, `P_fc1`, `P_fc2` and no KV quantization.
//! Normalization, attention scores and softmax stay in full precision; RoPE is
//! not modeled.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calib::{calibrate_layer, quantized_forward, CalibConfig, QuantSpec, Theta};
use crate::clipping::SATURATED;
use crate::error::{BatError, Result};
use crate::io::BitConfig;
use crate::linalg::Mat;
use crate::mxfp::BLOCK_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Qkv,
    O,
    Up,
    Down,
    K,
    V,
    Fc1,
    Fc2,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Qkv => "P_qkv",
            Site::O => "P_o",
            Site::Up => "P_up",
            Site::Down => "P_down",
            Site::K => "P_k",
            Site::V => "P_v",
            Site::Fc1 => "P_fc1",
            Site::Fc2 => "P_fc2",
        }
    }

    fn is_kv(self) -> bool {
        matches!(self, Site::K | Site::V)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformPlacement {
    pub site: Site,
    /// Linear layers (or cache tensors) whose input passes through the site.
    pub applies_to: Vec<&'static str>,
    pub per_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Text,
    Vit,
}

impl Template {
    pub fn placements(self) -> Vec<TransformPlacement> {
        let p = |site, applies_to: &[&'static str], per_head| TransformPlacement {
            site,
            applies_to: applies_to.to_vec(),
            per_head,
        };
        match self {
            Template::Text => vec![
                p(Site::Qkv, &["q_proj", "k_proj", "v_proj"], false),
                p(Site::O, &["o_proj"], false),
                p(Site::K, &["k_cache"], true),
                p(Site::V, &["v_cache"], true),
                p(Site::Up, &["gate_proj", "up_proj"], false),
                p(Site::Down, &["down_proj"], false),
            ],
            Template::Vit => vec![
                p(Site::Qkv, &["q_proj", "k_proj", "v_proj"], false),
                p(Site::O, &["o_proj"], false),
                p(Site::Fc1, &["fc1"], false),
                p(Site::Fc2, &["fc2"], false),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlockSpec {
    pub hidden: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub mlp: usize,
    pub template: Template,
    pub seed: u64,
}

impl Default for ToyBlockSpec {
    fn default() -> Self {
        ToyBlockSpec {
            hidden: 128,
            head_dim: 32,
            heads: 4,
            mlp: 256,
            template: Template::Text,
            seed: 0,
        }
    }
}

impl ToyBlockSpec {
    pub fn validate(&self) -> Result<()> {
        for (dim, (name, v)) in [("hidden", self.hidden), ("head_dim", self.head_dim), ("mlp", self.mlp)]
            .into_iter()
            .enumerate()
        {
            if v == 0 || v % BLOCK_SIZE != 0 {
                return Err(BatError::Shape {
                    dim,
                    size: v,
                    reason: format!("`{name}` must be a positive multiple of {BLOCK_SIZE}"),
                });
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(BatError::Invalid(format!(
                "heads * head_dim = {} must equal hidden = {}",
                self.heads * self.head_dim,
                self.hidden
            )));
        }
        Ok(())
    }

    /// Reads `hidden`, `head_dim`, `heads`, `mlp`, `template` (text|vit) and
    /// `seed` from a key-value map; missing keys keep their defaults.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = ToyBlockSpec::default();
        let num = |k: &str, d: usize| -> Result<usize> {
            map.get(k).map_or(Ok(d), |v| {
                v.parse()
                    .map_err(|_| BatError::Invalid(format!("`{k}` must be an integer, got `{v}`")))
            })
        };
        s.hidden = num("hidden", s.hidden)?;
        s.head_dim = num("head_dim", s.head_dim)?;
        s.heads = num("heads", s.heads)?;
        s.mlp = num("mlp", s.mlp)?;
        s.seed = num("seed", s.seed as usize)? as u64;
        if let Some(t) = map.get("template") {
            s.template = match t.as_str() {
                "text" => Template::Text,
                "vit" => Template::Vit,
                other => return Err(BatError::Invalid(format!("unknown template `{other}`"))),
            };
        }
        s.validate()?;
        Ok(s)
    }
}

/// Random-weight block with one parameter set per placement.
#[derive(Debug, Clone)]
pub struct ToyBlock {
    pub spec: ToyBlockSpec,
    pub weights: BTreeMap<&'static str, Mat>,
    pub placements: Vec<TransformPlacement>,
    pub thetas: BTreeMap<Site, Theta>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect(),
    }
}

fn identity_theta(n: usize) -> Result<Theta> {
    Theta::identity(n, 8, 4, SATURATED)
}

pub fn build_toy_block(spec: &ToyBlockSpec) -> Result<ToyBlock> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, m) = (spec.hidden, spec.mlp);
    let mut weights = BTreeMap::new();
    let mut add = |name, rows, cols: usize, rng: &mut ChaCha8Rng| {
        weights.insert(name, gaussian(rng, rows, cols, 1.0 / (cols as f64).sqrt()));
    };
    for name in ["q_proj", "k_proj", "v_proj", "o_proj"] {
        add(name, h, h, &mut rng);
    }
    match spec.template {
        Template::Text => {
            add("gate_proj", m, h, &mut rng);
            add("up_proj", m, h, &mut rng);
            add("down_proj", h, m, &mut rng);
        }
        Template::Vit => {
            add("fc1", m, h, &mut rng);
            add("fc2", h, m, &mut rng);
        }
    }
    let placements = spec.template.placements();
    let mut thetas = BTreeMap::new();
    for p in &placements {
        let n = match p.site {
            Site::Down | Site::Fc2 => m,
            _ => h,
        };
        thetas.insert(p.site, identity_theta(n)?);
    }
    Ok(ToyBlock {
        spec: spec.clone(),
        weights,
        placements,
        thetas,
    })
}

/// Activations with a few large channels, the pattern block transforms target.
pub fn outlier_activations(rows: usize, hidden: usize, channels: &[usize], scale: f64, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(&mut rng, rows, hidden, 1.0);
    for r in 0..rows {
        for &c in channels {
            let v = x.get(r, c);
            x.set(r, c, v * scale);
        }
    }
    x
}

fn rms_norm(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v)).tanh())
}

fn vstack(mats: &[&Mat]) -> Mat {
    let mut data = Vec::new();
    for m in mats {
        data.extend_from_slice(&m.data);
    }
    Mat {
        rows: mats.iter().map(|m| m.rows).sum(),
        cols: mats[0].cols,
        data,
    }
}

fn split_cols(y: &Mat, widths: &[usize]) -> Vec<Mat> {
    let mut out = Vec::new();
    let mut off = 0;
    for &w in widths {
        let mut m = Mat::zeros(y.rows, w);
        for r in 0..y.rows {
            m.row_mut(r).copy_from_slice(&y.row(r)[off..off + w]);
        }
        out.push(m);
        off += w;
    }
    out
}

/// Softmax attention per head; causal for text blocks.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, head_dim: usize, causal: bool) -> Mat {
    let s = q.rows;
    let mut out = Mat::zeros(s, q.cols);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut w = vec![0.0; s];
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        for i in 0..s {
            let last = if causal { i + 1 } else { s };
            let qi = &q.row(i)[cols.clone()];
            let mut mx = f64::NEG_INFINITY;
            for (j, wj) in w.iter_mut().enumerate().take(last) {
                *wj = scale * qi.iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>();
                mx = mx.max(*wj);
            }
            let mut z = 0.0;
            for wj in w.iter_mut().take(last) {
                *wj = (*wj - mx).exp();
                z += *wj;
            }
            let o = &mut out.row_mut(i)[cols.clone()];
            for (j, wj) in w.iter().enumerate().take(last) {
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *oc += wj / z * vc;
                }
            }
        }
    }
    out
}

/// Inputs seen by each site and outputs of each linear in one pass.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace {
    pub site_inputs: BTreeMap<Site, Mat>,
    pub outputs: BTreeMap<&'static str, Mat>,
    pub output: Mat,
}

impl ToyBlock {
    /// Concatenated weights of every linear behind a site.
    pub fn site_weights(&self, site: Site) -> Mat {
        let p = self
            .placements
            .iter()
            .find(|p| p.site == site)
            .expect("site in template");
        let mats: Vec<&Mat> = p.applies_to.iter().map(|n| &self.weights[n]).collect();
        vstack(&mats)
    }

    fn linear(&self, site: Site, x: &Mat, bits: Option<&BitConfig>, trace: &mut BlockTrace) -> Result<Vec<Mat>> {
        trace.site_inputs.insert(site, x.clone());
        let p = self
            .placements
            .iter()
            .find(|p| p.site == site)
            .expect("site in template");
        let w = self.site_weights(site);
        let y = match bits {
            None => x.matmul_t(&w),
            Some(b) => quantized_forward(
                x,
                &w,
                &self.thetas[&site],
                &QuantSpec::new(b.weight_format(), b.act_format()),
            )?,
        };
        let widths: Vec<usize> = p.applies_to.iter().map(|n| self.weights[n].rows).collect();
        let parts = split_cols(&y, &widths);
        for (name, part) in p.applies_to.iter().zip(&parts) {
            trace.outputs.insert(name, part.clone());
        }
        Ok(parts)
    }

    /// KV cache round trip through the per-head transform and quantizer.
    fn cache(&self, site: Site, x: &Mat, bits: Option<&BitConfig>, trace: &mut BlockTrace) -> Result<Mat> {
        trace.site_inputs.insert(site, x.clone());
        let fmt = bits.and_then(|b| b.kv_format());
        let y = match fmt {
            None => x.clone(),
            Some(f) => quantized_forward(
                x,
                &Mat::identity(x.cols),
                &self.thetas[&site],
                &QuantSpec::new(None, Some(f)),
            )?,
        };
        let name = if site == Site::K { "k_cache" } else { "v_cache" };
        trace.outputs.insert(name, y.clone());
        Ok(y)
    }

    /// Runs the block; `bits = None` is the full-precision reference.
    pub fn run(&self, x: &Mat, bits: Option<&BitConfig>) -> Result<BlockTrace> {
        let spec = &self.spec;
        if x.cols != spec.hidden {
            return Err(BatError::Mismatch(format!(
                "input width {} != hidden {}",
                x.cols, spec.hidden
            )));
        }
        let mut tr = BlockTrace::default();
        let h = rms_norm(x);
        let qkv = self.linear(Site::Qkv, &h, bits, &mut tr)?;
        let (q, mut k, mut v) = (qkv[0].clone(), qkv[1].clone(), qkv[2].clone());
        let causal = spec.template == Template::Text;
        if causal {
            k = self.cache(Site::K, &k, bits, &mut tr)?;
            v = self.cache(Site::V, &v, bits, &mut tr)?;
        }
        let attn = attention(&q, &k, &v, spec.heads, spec.head_dim, causal);
        let o = self.linear(Site::O, &attn, bits, &mut tr)?.remove(0);
        let x1 = add(x, &o);
        let h2 = rms_norm(&x1);
        let mlp_out = match spec.template {
            Template::Text => {
                let gu = self.linear(Site::Up, &h2, bits, &mut tr)?;
                let act = Mat {
                    rows: gu[0].rows,
                    cols: gu[0].cols,
                    data: gu[0].data.iter().zip(&gu[1].data).map(|(g, u)| silu(*g) * u).collect(),
                };
                self.linear(Site::Down, &act, bits, &mut tr)?.remove(0)
            }
            Template::Vit => {
                let f1 = self.linear(Site::Fc1, &h2, bits, &mut tr)?.remove(0);
                let act = Mat {
                    rows: f1.rows,
                    cols: f1.cols,
                    data: f1.data.iter().map(|&v| gelu(v)).collect(),
                };
                self.linear(Site::Fc2, &act, bits, &mut tr)?.remove(0)
            }
        };
        tr.output = add(&x1, &mlp_out);
        Ok(tr)
    }

    /// Resets every site to the identity transform with saturated clips.
    pub fn reset(&mut self) -> Result<()> {
        for theta in self.thetas.values_mut() {
            *theta = identity_theta(theta.transform.n)?;
        }
        Ok(())
    }

    /// Calibrates every quantized site on the full-precision inputs it sees
    /// for `x`, one row per calibration sample. Sites whose matmul is not
    /// quantized under `bits` keep their current parameters.
    pub fn calibrate(&mut self, x: &Mat, bits: &BitConfig, cfg: &CalibConfig) -> Result<()> {
        let reference = self.run(x, None)?;
        let sites: Vec<Site> = self.placements.iter().map(|p| p.site).collect();
        for site in sites {
            let input = &reference.site_inputs[&site];
            let samples: Vec<Mat> = (0..input.rows)
                .map(|r| Mat::from_vec(1, input.cols, input.row(r).to_vec()))
                .collect::<Result<_>>()?;
            let (w, spec) = if site.is_kv() {
                match bits.kv_format() {
                    None => continue,
                    f => (Mat::identity(input.cols), QuantSpec::new(None, f)),
                }
            } else {
                let spec = QuantSpec::new(bits.weight_format(), bits.act_format());
                if spec.weight.is_none() && spec.act.is_none() {
                    continue;
                }
                (self.site_weights(site), spec)
            };
            let out = calibrate_layer(w, samples, cfg.clone(), spec)?;
            self.thetas.insert(site, out.run.theta);
        }
        Ok(())
    }
}

/// Mean squared error between two equally shaped matrices.
pub fn mse(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub output: Mat,
    /// Per linear (and cache) output MSE against the full-precision block,
    /// followed by `block_output`.
    pub site_mse: Vec<(String, f64)>,
}

pub fn simulate_block(block: &ToyBlock, x: &Mat, bits: &BitConfig) -> Result<SimReport> {
    let reference = block.run(x, None)?;
    let quant = block.run(x, Some(bits))?;
    let mut site_mse: Vec<(String, f64)> = reference
        .outputs
        .iter()
        .map(|(name, r)| (name.to_string(), mse(r, &quant.outputs[name])))
        .collect();
    site_mse.push(("block_output".into(), mse(&reference.output, &quant.output)));
    Ok(SimReport {
        output: quant.output,
        site_mse,
    })
}

/// `site,mse_before,mse_after` rows for an RTN run and a calibrated run.
pub fn error_report_csv(before: &SimReport, after: &SimReport) -> String {
    let mut s = String::from("site,mse_before,mse_after\n");
    for ((name, b), (_, a)) in before.site_mse.iter().zip(&after.site_mse) {
        s.push_str(&format!("{name},{b},{a}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    #[test]
    fn placement_counts() {
        assert_eq!(Template::Text.placements().len(), 6);
        let vit = Template::Vit.placements();
        assert_eq!(vit.len(), 4);
        assert!(vit.iter().all(|p| !p.per_head));
        let text = Template::Text.placements();
        for p in &text {
            assert_eq!(p.per_head, matches!(p.site, Site::K | Site::V));
        }
        // every linear is behind exactly one placement
        let mut seen: Vec<&str> = text.iter().flat_map(|p| p.applies_to.clone()).collect();
        let len = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), len);
    }

    #[test]
    fn kv_transform_has_one_block_per_head() {
        let block = build_toy_block(&ToyBlockSpec::default()).unwrap();
        let t = &block.thetas[&Site::K].transform;
        assert_eq!(t.k(), block.spec.heads);
        assert_eq!(block.spec.head_dim / 32, 1);
    }

    #[test]
    fn misaligned_dims_rejected() {
        let spec = ToyBlockSpec {
            mlp: 100,
            ..Default::default()
        };
        assert!(build_toy_block(&spec).is_err());
        let spec = ToyBlockSpec {
            heads: 3,
            ..Default::default()
        };
        assert!(build_toy_block(&spec).is_err());
    }

    #[test]
    fn unquantized_run_is_exact() {
        for template in [Template::Text, Template::Vit] {
            let block = build_toy_block(&ToyBlockSpec {
                template,
                ..Default::default()
            })
            .unwrap();
            let x = outlier_activations(8, 128, &[], 1.0, 1);
            let bits = BitConfig::parse("W16A16KV16").unwrap();
            let r = simulate_block(&block, &x, &bits).unwrap();
            assert!(r.site_mse.iter().all(|(_, e)| *e == 0.0));
            assert_eq!(r.output, block.run(&x, None).unwrap().output);
        }
    }

    #[test]
    fn e2m1_worse_than_e4m3() {
        let block = build_toy_block(&ToyBlockSpec::default()).unwrap();
        let x = outlier_activations(8, 128, &[3, 70], 20.0, 2);
        let r4 = simulate_block(&block, &x, &BitConfig::parse("W4A4KV4").unwrap()).unwrap();
        let r8 = simulate_block(&block, &x, &BitConfig::parse("W8A8KV8").unwrap()).unwrap();
        for ((name, e4), (_, e8)) in r4.site_mse.iter().zip(&r8.site_mse) {
            assert!(e4 > e8, "{name}: {e4} vs {e8}");
        }
    }

    #[test]
    fn per_head_kv_independence() {
        let mut block = build_toy_block(&ToyBlockSpec::default()).unwrap();
        let x = outlier_activations(6, 128, &[], 1.0, 3);
        let bits = BitConfig::parse("W16A16KV4").unwrap();
        let before = block.run(&x, Some(&bits)).unwrap();
        let theta = block.thetas.get_mut(&Site::K).unwrap();
        theta.transform.b[2] =
            Mat::from_vec(4, 4, (0..16).map(|i| if i % 5 == 0 { 1.3 } else { 0.1 }).collect()).unwrap();
        let after = block.run(&x, Some(&bits)).unwrap();
        let (kb, ka) = (&before.outputs["k_cache"], &after.outputs["k_cache"]);
        for r in 0..kb.rows {
            for c in 0..128 {
                if c / 32 != 2 {
                    assert_eq!(kb.get(r, c), ka.get(r, c));
                }
            }
        }
        assert_ne!(kb, ka);
    }

    #[test]
    fn spec_from_kv() {
        let map = crate::io::parse_kv("hidden = 64\nheads = 2\ntemplate = vit\nmlp = 128").unwrap();
        let s = ToyBlockSpec::from_kv(&map).unwrap();
        assert_eq!((s.hidden, s.heads, s.mlp, s.template), (64, 2, 128, Template::Vit));
        let bad = crate::io::parse_kv("template = conv").unwrap();
        assert!(ToyBlockSpec::from_kv(&bad).is_err());
    }
}

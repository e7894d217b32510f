//! On-disk formats.
//!
//! All integers and floats are little-endian.
//!
//! Tensor file:
//!
//! ```text
//! "MXBT" | version u16 = 1 | dtype u8 (0 f32, 1 mx4, 2 mx8) | rank u8 | dims u32 x rank
//! f32 payload: numel x f32
//! mx payload:  numel/32 block records, each scale_exp i8 followed by
//!              mx4: 16 bytes, two codes per byte, low nibble first
//!              mx8: 32 bytes, one code per byte
//! ```
//!
//! Transform record:
//!
//! ```text
//! "GPKT" | version u16 = 1 | N u32 | g u32 | g1 u32 | g2 u32 | k u32
//! A (g1*g1 f32, row-major) | B_1 .. B_k (g2*g2 f32 each, row-major)
//! optional clip section: "CLIP" | k u32 | act α_min[k] | act α_max[k]
//!                                        | weight α_min[k] | weight α_max[k]   (f32)
//! ```
//!
//! Config and block-spec files are flat text, one `key = value` per line,
//! `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::calib::{LossRecord, Theta};
use crate::clipping::ClipParams;
use crate::error::{BatError, Result};
use crate::linalg::Mat;
use crate::mxfp::{FormatKind, MxBlock, MxFormat, MxTensor, BLOCK_SIZE};
use crate::transform::GpkTransform;

/// Reads a whole file, naming the path in the error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| BatError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub const TENSOR_MAGIC: &[u8; 4] = b"MXBT";
pub const TRANSFORM_MAGIC: &[u8; 4] = b"GPKT";
pub const CLIP_MAGIC: &[u8; 4] = b"CLIP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Mx(MxTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(BatError::Mismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(TensorFile {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_mat(m: &Mat) -> Self {
        TensorFile {
            shape: vec![m.rows, m.cols],
            data: TensorData::F32(m.data.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_mx(t: MxTensor) -> Self {
        TensorFile {
            shape: t.shape.clone(),
            data: TensorData::Mx(t),
        }
    }

    /// Dense values, dequantizing MX payloads.
    pub fn values(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::Mx(t) => t.dequantize(),
        }
    }

    /// Views the tensor as a matrix over its innermost axis.
    pub fn to_mat(&self) -> Result<Mat> {
        let cols = *self
            .shape
            .last()
            .ok_or_else(|| BatError::Format("rank-0 tensor".into()))?;
        let v = self.values();
        Mat::from_vec(v.len().checked_div(cols).unwrap_or(0), cols, v)
    }

    fn dtype_tag(&self) -> u8 {
        match &self.data {
            TensorData::F32(_) => 0,
            TensorData::Mx(t) => match t.format.kind {
                FormatKind::E2M1 => 1,
                FormatKind::E4M3 => 2,
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype_tag());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Mx(t) => {
                let packed = t.format.kind == FormatKind::E2M1;
                for b in &t.blocks {
                    out.push(b.scale_exp as u8);
                    if packed {
                        for pair in b.codes.chunks_exact(2) {
                            out.push((pair[0] & 0x0f) | (pair[1] << 4));
                        }
                    } else {
                        out.extend_from_slice(&b.codes);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TENSOR_MAGIC {
            return Err(BatError::Format("bad tensor magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(BatError::Format(format!("unsupported tensor version {version}")));
        }
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = match tag {
            0 => TensorData::F32((0..numel).map(|_| r.f32()).collect::<Result<_>>()?),
            1 | 2 => {
                let format = if tag == 1 { MxFormat::e2m1() } else { MxFormat::e4m3() };
                if shape.last().is_none_or(|&d| d % BLOCK_SIZE != 0) {
                    return Err(BatError::Format("mx tensor innermost dim not a multiple of 32".into()));
                }
                let code_limit = 1usize << format.bits();
                let mut blocks = Vec::with_capacity(numel / BLOCK_SIZE);
                for _ in 0..numel / BLOCK_SIZE {
                    let scale_exp = r.u8()? as i8;
                    let mut codes = [0u8; BLOCK_SIZE];
                    if tag == 1 {
                        for (pair, byte) in codes.chunks_exact_mut(2).zip(r.take(16)?) {
                            pair[0] = byte & 0x0f;
                            pair[1] = byte >> 4;
                        }
                    } else {
                        codes.copy_from_slice(r.take(32)?);
                        // 0x7f / 0xff are NaN in E4M3 and never produced
                        if codes.iter().any(|&c| (c & 0x7f) as usize >= code_limit / 2 - 1) {
                            return Err(BatError::Format("E4M3 NaN code in payload".into()));
                        }
                    }
                    blocks.push(MxBlock { scale_exp, codes });
                }
                TensorData::Mx(MxTensor {
                    shape: shape.clone(),
                    blocks,
                    format,
                })
            }
            other => return Err(BatError::Format(format!("unknown dtype tag {other}"))),
        };
        if !r.is_empty() {
            return Err(BatError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(TensorFile { shape, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(BatError::Format(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32().map(|v| v as f64)).collect()
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Transform factors plus optional clip logits, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRecord {
    pub transform: GpkTransform,
    /// `(activation, weight)` clip logits.
    pub clips: Option<(ClipParams, ClipParams)>,
}

impl TransformRecord {
    pub fn from_theta(theta: &Theta) -> Self {
        TransformRecord {
            transform: theta.transform.clone(),
            clips: Some((theta.act_clip.clone(), theta.weight_clip.clone())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.transform;
        let mut out = Vec::new();
        out.extend_from_slice(TRANSFORM_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [t.n, t.g(), t.g1, t.g2, t.k()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        push_f32s(&mut out, &t.a.data);
        for b in &t.b {
            push_f32s(&mut out, &b.data);
        }
        if let Some((act, w)) = &self.clips {
            out.extend_from_slice(CLIP_MAGIC);
            out.extend_from_slice(&(act.k() as u32).to_le_bytes());
            for v in [&act.alpha_min, &act.alpha_max, &w.alpha_min, &w.alpha_max] {
                push_f32s(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TRANSFORM_MAGIC {
            return Err(BatError::Format("bad transform magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(BatError::Format(format!("unsupported transform version {version}")));
        }
        let [n, g, g1, g2, k] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        if g1 * g2 != g || k * g != n {
            return Err(BatError::Format(format!(
                "inconsistent header N={n} g={g} g1={g1} g2={g2} k={k}"
            )));
        }
        let a = Mat::from_vec(g1, g1, r.f32s(g1 * g1)?)?;
        let b = (0..k)
            .map(|_| Mat::from_vec(g2, g2, r.f32s(g2 * g2)?))
            .collect::<Result<Vec<_>>>()?;
        let transform = GpkTransform::from_factors(n, a, b)?;
        let clips = if r.is_empty() {
            None
        } else {
            if r.take(4)? != CLIP_MAGIC {
                return Err(BatError::Format("bad clip section magic".into()));
            }
            let ck = r.u32()? as usize;
            if ck != k {
                return Err(BatError::Format(format!("clip section has {ck} blocks, expected {k}")));
            }
            let act = ClipParams {
                alpha_min: r.f32s(k)?,
                alpha_max: r.f32s(k)?,
            };
            let w = ClipParams {
                alpha_min: r.f32s(k)?,
                alpha_max: r.f32s(k)?,
            };
            Some((act, w))
        };
        if !r.is_empty() {
            return Err(BatError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(TransformRecord { transform, clips })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Parses `key = value` lines. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BatError::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(BatError::Format(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(map)
}

/// Bit-widths per site, written `W{b}A{b}KV{b}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitConfig {
    pub w: u32,
    pub a: u32,
    pub kv: u32,
}

impl BitConfig {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || BatError::Invalid(format!("format `{s}` is not of the form W{{b}}A{{b}}KV{{b}}"));
        let rest = s.trim().strip_prefix('W').ok_or_else(bad)?;
        let (w, rest) = rest.split_once('A').ok_or_else(bad)?;
        let (a, kv) = rest.split_once("KV").ok_or_else(bad)?;
        let parse = |t: &str| -> Result<u32> {
            let b: u32 = t.parse().map_err(|_| bad())?;
            if ![4, 8, 16].contains(&b) {
                return Err(BatError::Invalid(format!("bit-width {b} not in {{4, 8, 16}}")));
            }
            Ok(b)
        };
        Ok(BitConfig {
            w: parse(w)?,
            a: parse(a)?,
            kv: parse(kv)?,
        })
    }

    pub fn weight_format(&self) -> Option<MxFormat> {
        MxFormat::from_bits(self.w).expect("validated")
    }

    pub fn act_format(&self) -> Option<MxFormat> {
        MxFormat::from_bits(self.a).expect("validated")
    }

    pub fn kv_format(&self) -> Option<MxFormat> {
        MxFormat::from_bits(self.kv).expect("validated")
    }
}

impl std::fmt::Display for BitConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "W{}A{}KV{}", self.w, self.a, self.kv)
    }
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,lr,loss")?;
    for r in trace {
        writeln!(f, "{},{},{}", r.step, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

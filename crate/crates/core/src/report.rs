//! Per-block value histograms after shared-scale division, the quantity the
//! quantizer actually rounds.

use crate::error::{BatError, Result};
use crate::linalg::Mat;
use crate::mxfp::{shared_exponent, MxFormat, BLOCK_SIZE};
use crate::oracle::bimodality_score;

pub const HIST_BINS: usize = 64;
/// Histograms cover `[-HIST_RANGE, HIST_RANGE]`.
pub const HIST_RANGE: f64 = 8.0;

/// Each 32-element run divided by its power-of-two shared scale.
pub fn scale_divided(values: &[f64], fmt: &MxFormat) -> Result<Vec<f64>> {
    if !values.len().is_multiple_of(BLOCK_SIZE) {
        return Err(BatError::Shape {
            dim: 0,
            size: values.len(),
            reason: format!("must be a multiple of {BLOCK_SIZE}"),
        });
    }
    let mut out = Vec::with_capacity(values.len());
    for chunk in values.chunks_exact(BLOCK_SIZE) {
        let max_abs = chunk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = 2f64.powi(shared_exponent(max_abs, fmt) as i32);
        out.extend(chunk.iter().map(|v| v / scale));
    }
    Ok(out)
}

/// 64 equal bins over `[-8, 8]`; values outside land in the edge bins.
pub fn histogram(values: &[f64]) -> [u64; HIST_BINS] {
    let mut h = [0u64; HIST_BINS];
    let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
    for &v in values {
        let i = ((v + HIST_RANGE) / width).floor().clamp(0.0, (HIST_BINS - 1) as f64) as usize;
        h[i] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub block: usize,
    pub pre: [u64; HIST_BINS],
    pub post: [u64; HIST_BINS],
    pub pre_bimodality: f64,
    pub post_bimodality: f64,
}

fn column_block(m: &[f64], cols: usize, b: usize) -> Vec<f64> {
    m.chunks_exact(cols)
        .flat_map(|row| row[b * BLOCK_SIZE..(b + 1) * BLOCK_SIZE].iter().copied())
        .collect()
}

/// Statistics of every block column of `pre` and its transformed `post`,
/// pooled over rows.
pub fn block_stats(pre: &Mat, post: &Mat, fmt: &MxFormat) -> Result<Vec<BlockStats>> {
    if pre.rows != post.rows || pre.cols != post.cols {
        return Err(BatError::Mismatch(format!(
            "pre {}x{} vs post {}x{}",
            pre.rows, pre.cols, post.rows, post.cols
        )));
    }
    let a = scale_divided(&pre.data, fmt)?;
    let b = scale_divided(&post.data, fmt)?;
    (0..pre.cols / BLOCK_SIZE)
        .map(|blk| {
            let (va, vb) = (column_block(&a, pre.cols, blk), column_block(&b, pre.cols, blk));
            Ok(BlockStats {
                block: blk,
                pre: histogram(&va),
                post: histogram(&vb),
                pre_bimodality: bimodality_score(&va)?,
                post_bimodality: bimodality_score(&vb)?,
            })
        })
        .collect()
}

/// Two lines per block (`pre`, `post`): block, stage, bimodality, then the
/// 64 bin counts. Bin `i` covers `[-8 + i/4, -8 + (i+1)/4)`.
pub fn stats_csv(stats: &[BlockStats]) -> String {
    let mut s = String::from("block,stage,bimodality");
    for i in 0..HIST_BINS {
        s.push_str(&format!(",bin_{i}"));
    }
    s.push('\n');
    for st in stats {
        for (stage, h, bm) in [
            ("pre", &st.pre, st.pre_bimodality),
            ("post", &st.post, st.post_bimodality),
        ] {
            s.push_str(&format!("{},{stage},{bm}", st.block));
            for c in h {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
    }
    s
}

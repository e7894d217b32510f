//! `batq` command implementations.
//!
//! Every command returns the text it would print so tests can drive them
//! without spawning a process. [`main_with_args`] maps errors to exit codes:
//! 0 success, 1 usage, 2 data, 3 numerical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::calib::{calibrate_layer, rtn_forward, CalibConfig, FusedWeights, QuantSpec};
use crate::error::{BatError, Result};
use crate::harness::{build_toy_block, error_report_csv, outlier_activations, simulate_block, ToyBlockSpec};
use crate::io::{parse_kv, read_file, write_loss_csv, BitConfig, TensorFile, TransformRecord};
use crate::linalg::Mat;
use crate::mxfp::{MxFormat, BLOCK_SIZE};
use crate::report::{block_stats, stats_csv};
use crate::synth::{outlier_layer, OutlierLayerSpec};
use crate::transform::{block_hadamard, gpk_forward, param_count, DecompositionKind};
use crate::verify::{format_table, run_all, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "batq", version, about = "Block-wise affine transforms for MX quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings that override the config file when given.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bit-widths as W{b}A{b}KV{b}, each 4, 8 or 16.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub g: Option<usize>,
    #[arg(long)]
    pub g1: Option<usize>,
    #[arg(long)]
    pub g2: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate one linear layer and write the transform, fused weights and loss trace.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-block histograms after scale division, before and after a transform.
    Stats {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, conflicts_with = "hadamard")]
        transform: Option<PathBuf>,
        /// Use a 32-point block Hadamard rotation as the transform.
        #[arg(long)]
        hadamard: bool,
        /// Element format used for the shared scale: 4 (E2M1) or 8 (E4M3).
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count of each transform decomposition.
    ParamCount {
        #[arg(long = "n")]
        n: usize,
        #[arg(long, default_value_t = 32)]
        g: usize,
        #[arg(long, default_value_t = 8)]
        g1: usize,
        #[arg(long, default_value_t = 4)]
        g2: usize,
    },
    /// Cross-check kernels against brute-force references.
    Verify {
        /// Directory of f32 tensors whose blocks are added to the quantizer check.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        blocks: usize,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic outlier layer and a matching calibration config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a toy transformer block and report per-site error before and after calibration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
    },
}

/// Parses and runs; prints results to stdout and a single `CODE: message`
/// line to stderr on failure. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return 1;
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Calibrate { config, overrides } => cmd_calibrate(&config, &overrides).map(|s| s.summary()),
        Command::Stats {
            tensor,
            transform,
            hadamard,
            bits,
            out,
        } => {
            let csv = cmd_stats(&tensor, transform.as_deref(), hadamard, bits)?;
            match out {
                Some(p) => {
                    fs::write(&p, &csv)?;
                    Ok(format!("wrote {}\n", p.display()))
                }
                None => Ok(csv),
            }
        }
        Command::ParamCount { n, g, g1, g2 } => cmd_param_count(n, g, g1, g2),
        Command::Verify {
            fixtures,
            blocks,
            cases,
            seed,
        } => cmd_verify(fixtures.as_deref(), blocks, cases, seed),
        Command::Synth { out, seed } => cmd_synth(&out, seed),
        Command::Simulate { config, out, format } => {
            let csv = cmd_simulate(&config, format.as_deref())?;
            match out {
                Some(p) => {
                    fs::write(&p, &csv)?;
                    Ok(format!("wrote {}\n", p.display()))
                }
                None => Ok(csv),
            }
        }
    }
}

fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read_file(path)?;
    let text =
        String::from_utf8(bytes).map_err(|_| BatError::Format(format!("{} is not valid UTF-8", path.display())))?;
    parse_kv(&text)
}

fn reject_unknown(map: &BTreeMap<String, String>, known: &[&str]) -> Result<()> {
    match map.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(BatError::Invalid(format!("unknown config key `{k}`"))),
        None => Ok(()),
    }
}

fn parse_value<T: FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| BatError::Invalid(format!("config key `{key}` has invalid value `{v}`"))),
    }
}

const CALIB_KEYS: [&str; 11] = [
    "lr",
    "epochs",
    "batch_size",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "seed",
    "clip_init",
    "g1",
    "g2",
];

/// Optimizer and transform settings from a key-value map; absent keys keep
/// the defaults.
pub fn calib_config_from_kv(map: &BTreeMap<String, String>) -> Result<CalibConfig> {
    let d = CalibConfig::default();
    let cfg = CalibConfig {
        lr: parse_value(map, "lr", d.lr)?,
        epochs: parse_value(map, "epochs", d.epochs)?,
        batch_size: parse_value(map, "batch_size", d.batch_size)?,
        beta1: parse_value(map, "beta1", d.beta1)?,
        beta2: parse_value(map, "beta2", d.beta2)?,
        eps: parse_value(map, "eps", d.eps)?,
        weight_decay: parse_value(map, "weight_decay", d.weight_decay)?,
        seed: parse_value(map, "seed", d.seed)?,
        clip_init: parse_value(map, "clip_init", d.clip_init)?,
        g1: parse_value(map, "g1", d.g1)?,
        g2: parse_value(map, "g2", d.g2)?,
    };
    Ok(cfg)
}

fn check_g(g: usize) -> Result<()> {
    if g != BLOCK_SIZE {
        return Err(BatError::Invalid(format!(
            "g must equal the MX block size {BLOCK_SIZE}, got {g}"
        )));
    }
    Ok(())
}

/// Summary of one `calibrate` run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateSummary {
    pub out_dir: PathBuf,
    pub format: BitConfig,
    pub samples: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub reverted: bool,
    pub rtn_mse: f64,
    pub calibrated_mse: f64,
}

impl CalibrateSummary {
    pub fn reduction(&self) -> f64 {
        if self.rtn_mse == 0.0 {
            0.0
        } else {
            1.0 - self.calibrated_mse / self.rtn_mse
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = {}", self.format);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "initial_loss = {}", self.initial_loss);
        let _ = writeln!(s, "final_loss = {}", self.final_loss);
        let _ = writeln!(s, "reverted = {}", self.reverted);
        let _ = writeln!(s, "rtn_mse = {}", self.rtn_mse);
        let _ = writeln!(s, "calibrated_mse = {}", self.calibrated_mse);
        let _ = writeln!(s, "reduction = {}", self.reduction());
        s
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn split_rows(x: &Mat, per_sample: usize) -> Result<Vec<Mat>> {
    if per_sample == 0 || !x.rows.is_multiple_of(per_sample) {
        return Err(BatError::Shape {
            dim: 0,
            size: x.rows,
            reason: format!("activation rows must split evenly into samples of {per_sample}"),
        });
    }
    x.data
        .chunks(per_sample * x.cols)
        .map(|c| Mat::from_vec(per_sample, x.cols, c.to_vec()))
        .collect()
}

/// Calibrates the layer described by `config` and writes `transform.gpk`
/// (factors and clip logits), `fused_weights.mxbt`, `loss.csv` and
/// `report.txt` into the output directory.
///
/// Config keys: `weights` (M x N tensor), `activations` (comma-separated
/// tensors of rows x N), `rows_per_sample`, `out`, `format`, `g`, and the
/// optimizer keys of [`calib_config_from_kv`]. Relative paths are taken from
/// the config file's directory. The KV bit-width does not apply to a single
/// linear layer and is ignored here.
pub fn cmd_calibrate(config: &Path, ov: &Overrides) -> Result<CalibrateSummary> {
    let map = read_kv_file(config)?;
    let mut known = vec!["weights", "activations", "rows_per_sample", "out", "format", "g"];
    known.extend(CALIB_KEYS);
    reject_unknown(&map, &known)?;
    let base = config.parent().unwrap_or(Path::new("."));

    let mut cfg = calib_config_from_kv(&map)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(g1) = ov.g1 {
        cfg.g1 = g1;
    }
    if let Some(g2) = ov.g2 {
        cfg.g2 = g2;
    }
    check_g(ov.g.unwrap_or(parse_value(&map, "g", BLOCK_SIZE)?))?;
    cfg.validate()?;
    let fmt_text = ov
        .format
        .clone()
        .unwrap_or_else(|| map.get("format").cloned().unwrap_or_else(|| "W4A4KV16".into()));
    let bits = BitConfig::parse(&fmt_text)?;
    let spec = QuantSpec::new(bits.weight_format(), bits.act_format());

    let weights_path = map
        .get("weights")
        .ok_or_else(|| BatError::Invalid("config is missing `weights`".into()))?;
    let weights = TensorFile::read(&resolve(base, weights_path))?.to_mat()?;
    let acts = map
        .get("activations")
        .ok_or_else(|| BatError::Invalid("config is missing `activations`".into()))?;
    let per_sample = parse_value(&map, "rows_per_sample", 1usize)?;
    let mut calib_set = Vec::new();
    for p in acts.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let x = TensorFile::read(&resolve(base, p))?.to_mat()?;
        calib_set.extend(split_rows(&x, per_sample)?);
    }
    let out_dir = match &ov.out {
        Some(p) => p.clone(),
        None => resolve(base, map.get("out").map(String::as_str).unwrap_or("out")),
    };

    let samples = calib_set.len();
    let outcome = calibrate_layer(weights.clone(), calib_set, cfg, spec.clone())?;
    let (mut rtn_sse, mut cal_sse, mut count) = (0.0, 0.0, 0usize);
    for x in &outcome.run.calib_set {
        let y = x.matmul_t(&weights);
        let rtn = rtn_forward(x, &weights, &spec)?;
        let cal = outcome.fused.forward(x)?;
        for ((r, a), b) in y.data.iter().zip(&rtn.data).zip(&cal.data) {
            rtn_sse += (r - a) * (r - a);
            cal_sse += (r - b) * (r - b);
        }
        count += y.data.len();
    }

    fs::create_dir_all(&out_dir)?;
    TransformRecord::from_theta(&outcome.run.theta).write(&out_dir.join("transform.gpk"))?;
    let fused = match &outcome.fused.weights {
        FusedWeights::Quantized(t) => TensorFile::from_mx(t.clone()),
        FusedWeights::Full(m) => TensorFile::from_mat(m),
    };
    fused.write(&out_dir.join("fused_weights.mxbt"))?;
    write_loss_csv(&out_dir.join("loss.csv"), &outcome.run.loss_trace)?;
    let summary = CalibrateSummary {
        out_dir: out_dir.clone(),
        format: bits,
        samples,
        steps: outcome.run.loss_trace.len(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        reverted: outcome.reverted,
        rtn_mse: rtn_sse / count as f64,
        calibrated_mse: cal_sse / count as f64,
    };
    fs::write(out_dir.join("report.txt"), summary.summary())?;
    Ok(summary)
}

/// Histogram CSV for every block column of a tensor (innermost axis), before
/// and after the chosen transform. With neither a transform nor `hadamard`
/// the post columns repeat the pre columns.
pub fn cmd_stats(tensor: &Path, transform: Option<&Path>, hadamard: bool, bits: u32) -> Result<String> {
    let fmt = match bits {
        4 => MxFormat::e2m1(),
        8 => MxFormat::e4m3(),
        b => return Err(BatError::Invalid(format!("--bits must be 4 or 8, got {b}"))),
    };
    let x = TensorFile::read(tensor)?.to_mat()?;
    if x.cols == 0 || x.cols % BLOCK_SIZE != 0 {
        return Err(BatError::Shape {
            dim: 1,
            size: x.cols,
            reason: format!("innermost axis must be a positive multiple of {BLOCK_SIZE}"),
        });
    }
    let post = if hadamard {
        block_hadamard(&x.data, BLOCK_SIZE)?
    } else if let Some(p) = transform {
        let rec = TransformRecord::read(p)?;
        if rec.transform.n != x.cols {
            return Err(BatError::Mismatch(format!(
                "transform width {} != tensor width {}",
                rec.transform.n, x.cols
            )));
        }
        gpk_forward(&x.data, &rec.transform)?
    } else {
        x.data.clone()
    };
    let post = Mat::from_vec(x.rows, x.cols, post)?;
    Ok(stats_csv(&block_stats(&x, &post, &fmt)?))
}

pub fn cmd_param_count(n: usize, g: usize, g1: usize, g2: usize) -> Result<String> {
    let mut s = format!("{:<22} {:<28} {:>12}\n", "decomposition", "formula", "params");
    for kind in DecompositionKind::ALL {
        let c = param_count(kind, n, g, g1, g2)?;
        let _ = writeln!(s, "{:<22} {:<28} {:>12}", kind.label(), kind.formula(), c);
    }
    Ok(s)
}

/// Reads every `.mxbt` file in `dir` and splits its values into 32-element
/// blocks. An empty directory is a usage error.
pub fn load_fixture_blocks(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mxbt"))
        .collect();
    if paths.is_empty() {
        return Err(BatError::Invalid(format!("no .mxbt fixtures in {}", dir.display())));
    }
    paths.sort();
    let mut blocks = Vec::new();
    for p in paths {
        let v = TensorFile::read(&p)?.values();
        if v.len() % BLOCK_SIZE != 0 {
            return Err(BatError::Shape {
                dim: 0,
                size: v.len(),
                reason: format!("fixture {} is not a whole number of blocks", p.display()),
            });
        }
        blocks.extend(v.chunks(BLOCK_SIZE).map(<[f64]>::to_vec));
    }
    Ok(blocks)
}

pub fn cmd_verify(fixtures: Option<&Path>, blocks: usize, cases: usize, seed: u64) -> Result<String> {
    let opts = VerifyOptions {
        quant_blocks: blocks,
        transform_cases: cases,
        seed,
        fixture_blocks: match fixtures {
            Some(d) => load_fixture_blocks(d)?,
            None => Vec::new(),
        },
        ..VerifyOptions::default()
    };
    verify_with(&opts)
}

/// Runs the suite with explicit options; fails with the table text when any
/// check fails.
pub fn verify_with(opts: &VerifyOptions) -> Result<String> {
    let results = run_all(opts);
    let table = format_table(&results);
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        eprint!("{table}");
        Err(BatError::CheckFailed(failed.join(", ")))
    }
}

/// Writes `weights.mxbt`, `activations.mxbt` and `calib.cfg` for the default
/// synthetic outlier layer.
pub fn cmd_synth(out: &Path, seed: u64) -> Result<String> {
    let spec = OutlierLayerSpec {
        seed,
        ..OutlierLayerSpec::default()
    };
    let layer = outlier_layer(&spec);
    fs::create_dir_all(out)?;
    TensorFile::from_mat(&layer.weights).write(&out.join("weights.mxbt"))?;
    let mut data = Vec::with_capacity(spec.rows * spec.n);
    for x in &layer.calib_set {
        data.extend_from_slice(&x.data);
    }
    TensorFile::from_mat(&Mat::from_vec(spec.rows, spec.n, data)?).write(&out.join("activations.mxbt"))?;
    let channels: Vec<String> = layer.outlier_channels.iter().map(|c| c.to_string()).collect();
    let cfg = format!(
        "# synthetic layer: N={} M={} rows={}, outlier channels {} scaled by {}\n\
         weights = weights.mxbt\n\
         activations = activations.mxbt\n\
         rows_per_sample = {}\n\
         format = W4A4KV16\n\
         out = run\n\
         lr = 0.01\n\
         epochs = 5\n\
         batch_size = 4\n\
         seed = {seed}\n",
        spec.n,
        spec.m,
        spec.rows,
        channels.join(" "),
        spec.outlier_scale,
        spec.rows_per_sample,
    );
    fs::write(out.join("calib.cfg"), cfg)?;
    Ok(format!("wrote {}\n", out.display()))
}

/// Builds a toy block from a spec file, runs it with identity transforms and
/// again after calibrating every site, and returns the per-site error CSV.
///
/// Keys: the block keys of [`ToyBlockSpec::from_kv`], `format`, `rows`,
/// `outlier_channels` (comma-separated), `outlier_scale`, `data_seed`, and
/// the optimizer keys of [`calib_config_from_kv`]. `seed` drives both the
/// block weights and the optimizer.
pub fn cmd_simulate(config: &Path, format: Option<&str>) -> Result<String> {
    let map = read_kv_file(config)?;
    let mut known = vec![
        "hidden",
        "head_dim",
        "heads",
        "mlp",
        "template",
        "format",
        "rows",
        "outlier_channels",
        "outlier_scale",
        "data_seed",
    ];
    known.extend(CALIB_KEYS);
    reject_unknown(&map, &known)?;
    let spec = ToyBlockSpec::from_kv(&map)?;
    let cfg = calib_config_from_kv(&map)?;
    cfg.validate()?;
    let bits = BitConfig::parse(format.unwrap_or(map.get("format").map(String::as_str).unwrap_or("W4A4KV4")))?;
    let rows = parse_value(&map, "rows", 64usize)?;
    let channels: Vec<usize> = match map.get("outlier_channels") {
        Some(s) => s
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| BatError::Invalid(format!("bad outlier channel `{c}`")))
            })
            .collect::<Result<_>>()?,
        None => vec![5, 77],
    };
    if let Some(&c) = channels.iter().find(|&&c| c >= spec.hidden) {
        return Err(BatError::Invalid(format!(
            "outlier channel {c} >= hidden {}",
            spec.hidden
        )));
    }
    let scale = parse_value(&map, "outlier_scale", 50.0)?;
    let data_seed = parse_value(&map, "data_seed", 1u64)?;
    let x = outlier_activations(rows, spec.hidden, &channels, scale, data_seed);
    let mut block = build_toy_block(&spec)?;
    let before = simulate_block(&block, &x, &bits)?;
    block.calibrate(&x, &bits, &cfg)?;
    let after = simulate_block(&block, &x, &bits)?;
    Ok(error_report_csv(&before, &after))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_table_rows() {
        let t = cmd_param_count(4096, 32, 8, 4).unwrap();
        let counts: Vec<&str> = t
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().last().unwrap())
            .collect();
        assert_eq!(counts, ["8192", "131072", "10240", "2112"]);
        let small = cmd_param_count(32, 32, 8, 4).unwrap();
        assert!(small.lines().last().unwrap().ends_with(" 80"));
    }

    #[test]
    fn bad_args_are_usage_errors() {
        assert_eq!(main_with_args(["batq", "param-count"]), 1);
        assert_eq!(main_with_args(["batq", "param-count", "--n", "100"]), 1);
        assert_eq!(main_with_args(["batq", "frobnicate"]), 1);
        assert_eq!(main_with_args(["batq", "--help"]), 0);
    }

    #[test]
    fn unknown_config_key_rejected() {
        let mut m = BTreeMap::new();
        m.insert("lr".to_string(), "0.1".to_string());
        m.insert("lrr".to_string(), "0.1".to_string());
        assert!(matches!(reject_unknown(&m, &CALIB_KEYS), Err(BatError::Invalid(_))));
        m.remove("lrr");
        assert_eq!(calib_config_from_kv(&m).unwrap().lr, 0.1);
    }
}

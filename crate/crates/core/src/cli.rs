//! Command-line front end. Machine-readable results go to stdout (JSON, or
//! CSV for tables), human summaries to stderr.
//!
//! Exit codes: 0 success, 1 a check failed, 2 a domain error (no overlap,
//! degenerate geometry, divergence), 3 a usage, parse or I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bench::{scaling_study, BenchConfig, BenchPath};
use crate::checks::{run_gradchecks, CheckModule};
use crate::error::{Error, Result};
use crate::estimator::{register_oracle, register_pair, Diagnostics};
use crate::geom::{metrics, registration_recall, PointCloud, RegistrationMetrics, RigidTransform, SuccessThresholds};
use crate::io::synth::{synth_pair, SynthConfig};
use crate::io::{read_points, read_transform, write_transform, write_xyz};
use crate::numeric::params::Params;
use crate::pipeline::{toy_dataset, train_toy, Model, ModelConfig};
use crate::serialize::{serialize, Curve};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_DOMAIN: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pcreg", version, about = "Point cloud registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Model configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained parameters; a freshly initialized model is used otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Replace learned descriptors by ground-truth coordinates.
        #[arg(long)]
        oracle_features: bool,
        /// Ground truth for the oracle; identity when omitted.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Generate a synthetic pair with known ground truth.
    Synth {
        #[arg(long, default_value = "highoverlap")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the space-filling-curve code of every point.
    Serialize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "zorder")]
        curve: String,
        #[arg(long, default_value_t = 16)]
        depth: u32,
    },
    /// FLOPs and peak memory of the encoder paths over sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,1536")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "ssm,attn,hybrid")]
        paths: Vec<String>,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// losses, ssm, attention, backbone, pipeline or all.
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Train the toy model on synthetic pairs.
    TrainToy {
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Model configuration JSON; the toy configuration when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Registration recall and errors over a directory of pairs.
    Eval {
        /// A pair directory (src.xyz, tgt.xyz, gt.json) or a directory of them.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Model configuration JSON; the toy configuration when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        oracle_features: bool,
        #[arg(long, default_value_t = 5.0)]
        rot_thresh: f64,
        #[arg(long, default_value_t = 0.1)]
        trans_thresh: f64,
    },
}

/// Why a command stopped, mapped onto an exit code.
enum Failure {
    Check(String),
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::Parse { .. }
            | Error::UnsupportedPlyFeature(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::InvalidDepth(_) => Failure::Usage(e.to_string()),
            other => Failure::Domain(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Register {
            src,
            tgt,
            config,
            params,
            oracle_features,
            gt,
        } => cmd_register(&src, &tgt, config.as_deref(), params.as_deref(), oracle_features, gt.as_deref(), out, err),
        Command::Synth { preset, seed, out: dir } => cmd_synth(&preset, seed, &dir, out),
        Command::Serialize { input, curve, depth } => cmd_serialize(&input, &curve, depth, out),
        Command::Bench {
            lengths,
            paths,
            width,
            state,
            blocks,
        } => cmd_bench(&lengths, &paths, width, state, blocks, out, err),
        Command::Gradcheck { module } => cmd_gradcheck(&module, out),
        Command::TrainToy {
            pairs,
            steps,
            seed,
            out: path,
            config,
        } => cmd_train(pairs, steps, seed, &path, config.as_deref(), out, err),
        Command::Eval {
            pairs,
            params,
            config,
            oracle_features,
            rot_thresh,
            trans_thresh,
        } => {
            let th = SuccessThresholds {
                rot_deg: rot_thresh,
                trans: trans_thresh,
            };
            cmd_eval(&pairs, params.as_deref(), config.as_deref(), oracle_features, th, out, err)
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            EXIT_CHECK_FAILED
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Domain(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn load_config(path: Option<&Path>, fallback: ModelConfig) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p),
        None => Ok(fallback),
    }
}

fn load_model(cfg: &ModelConfig, params: Option<&Path>, err: &mut dyn Write) -> Result<(Model, Params)> {
    let (model, mut fresh) = Model::init(cfg)?;
    match params {
        Some(p) => {
            let stored = Params::load(p)?;
            let matched = fresh.load_matching(&stored);
            if matched != fresh.len() {
                return Err(Error::InvalidConfig(format!(
                    "parameter file matches {matched} of {} tensors; check --config",
                    fresh.len()
                )));
            }
        }
        None => {
            let _ = writeln!(err, "warning: no --params given, using untrained weights");
        }
    }
    Ok((model, fresh))
}

fn registration_json(t: &RigidTransform, diag: &Diagnostics) -> serde_json::Value {
    let mut v = serde_json::to_value(t).expect("transform serializes");
    v["diagnostics"] = diag.to_json();
    v
}

fn print_json(out: &mut dyn Write, v: &impl Serialize) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json output"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_register(
    src: &Path,
    tgt: &Path,
    config: Option<&Path>,
    params: Option<&Path>,
    oracle: bool,
    gt: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let cfg = load_config(config, ModelConfig::default())?;
    let (src, tgt) = (read_points(src)?, read_points(tgt)?);
    let (t, diag) = if oracle {
        let gt = gt.map(read_transform).transpose()?.unwrap_or_else(RigidTransform::identity);
        register_oracle(&src, &tgt, &gt, &cfg)?
    } else {
        let (model, params) = load_model(&cfg, params, err)?;
        register_pair(&src, &tgt, &model, &params)?
    };
    print_json(out, &registration_json(&t, &diag))?;
    Ok(())
}

fn cmd_synth(preset: &str, seed: u64, dir: &Path, out: &mut dyn Write) -> CmdResult {
    let cfg = SynthConfig::preset(preset)?;
    let pair = synth_pair(&cfg, seed)?;
    fs::create_dir_all(dir)?;
    write_xyz(&dir.join("src.xyz"), &pair.src)?;
    write_xyz(&dir.join("tgt.xyz"), &pair.tgt)?;
    write_transform(&dir.join("gt.json"), &pair.gt)?;
    print_json(
        out,
        &json!({
            "preset": preset,
            "seed": seed,
            "src_points": pair.src.len(),
            "tgt_points": pair.tgt.len(),
            "overlap": pair.overlap,
            "radius": pair.radius,
        }),
    )?;
    Ok(())
}

fn cmd_serialize(input: &Path, curve: &str, depth: u32, out: &mut dyn Write) -> CmdResult {
    let curve: Curve = curve.parse()?;
    let cloud = read_points(input)?;
    let code = serialize(&cloud, curve, depth)?;
    let ranks = code.ranks();
    writeln!(out, "index,code,rank")?;
    for (i, c) in code.codes.iter().enumerate() {
        writeln!(out, "{i},{c},{}", ranks[i])?;
    }
    Ok(())
}

fn cmd_bench(
    lengths: &[usize],
    paths: &[String],
    width: usize,
    state: usize,
    blocks: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let paths = paths.iter().map(|p| p.parse()).collect::<Result<Vec<BenchPath>>>()?;
    let cfg = BenchConfig {
        width,
        state,
        blocks,
        ..BenchConfig::default()
    };
    let table = scaling_study(lengths, &paths, &cfg)?;
    write!(out, "{}", table.to_csv())?;
    for &p in &paths {
        let fmt = |v: Vec<f64>| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
        writeln!(err, "{:<6} adjacent FLOPs ratios: {}", p.name(), fmt(table.ratios(p)))?;
        writeln!(err, "{:<6} per doubling:          {}", p.name(), fmt(table.ratios_per_doubling(p)))?;
        if let Ok(fit) = table.fit(p) {
            writeln!(
                err,
                "{:<6} linear R² {:.6}, quadratic share at max length {:.4}",
                p.name(),
                fit.linear_r2,
                fit.quadratic_share()
            )?;
        }
    }
    if let Some(&l) = lengths.last()
        && let Some(s) = table.hybrid_saving(l) {
            writeln!(err, "attention / hybrid FLOPs at {l}: {s:.2}x")?;
        }
    Ok(())
}

fn cmd_gradcheck(module: &str, out: &mut dyn Write) -> CmdResult {
    let module: CheckModule = module.parse()?;
    let results = run_gradchecks(module)?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    pairs: usize,
    steps: usize,
    seed: u64,
    path: &Path,
    config: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let mut cfg = load_config(config, ModelConfig::toy())?;
    cfg.seed = seed;
    let data = toy_dataset(pairs, seed)?;
    let (_, params, report) = train_toy(&data, &cfg, steps)?;
    params.save(path)?;
    write!(out, "{}", report.to_csv())?;
    if let Some((a, b)) = report.smoothed() {
        writeln!(err, "smoothed loss {a:.4} -> {b:.4} ({:.3}x)", b / a)?;
    }
    Ok(())
}

struct PairFiles {
    name: String,
    src: PointCloud,
    tgt: PointCloud,
    gt: RigidTransform,
}

fn read_pair_dir(dir: &Path) -> Result<PairFiles> {
    let find = |stem: &str| -> PathBuf {
        let ply = dir.join(format!("{stem}.ply"));
        if ply.exists() { ply } else { dir.join(format!("{stem}.xyz")) }
    };
    Ok(PairFiles {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        src: read_points(&find("src"))?,
        tgt: read_points(&find("tgt"))?,
        gt: read_transform(&dir.join("gt.json"))?,
    })
}

/// `dir` itself when it holds `gt.json`, else its subdirectories by name.
fn load_pairs(dir: &Path) -> Result<Vec<PairFiles>> {
    if dir.join("gt.json").exists() {
        return Ok(vec![read_pair_dir(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("gt.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::InvalidConfig(format!("no pairs under {}", dir.display())));
    }
    subdirs.iter().map(|d| read_pair_dir(d)).collect()
}

#[derive(Serialize)]
struct PairResult {
    name: String,
    rre: Option<f64>,
    rte: Option<f64>,
    success: bool,
    error: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    dir: &Path,
    params: Option<&Path>,
    config: Option<&Path>,
    oracle: bool,
    th: SuccessThresholds,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let cfg = load_config(config, ModelConfig::toy())?;
    let pairs = load_pairs(dir)?;
    let model = if oracle { None } else { Some(load_model(&cfg, params, err)?) };
    let mut rows = Vec::new();
    let mut scored: Vec<RegistrationMetrics> = Vec::new();
    for p in &pairs {
        let est = match &model {
            None => register_oracle(&p.src, &p.tgt, &p.gt, &cfg),
            Some((m, w)) => register_pair(&p.src, &p.tgt, m, w),
        };
        rows.push(match est {
            Ok((t, _)) => {
                let m = metrics(&t, &p.gt, th);
                scored.push(m);
                PairResult {
                    name: p.name.clone(),
                    rre: Some(m.rre),
                    rte: Some(m.rte),
                    success: m.success,
                    error: None,
                }
            }
            Err(e) => PairResult {
                name: p.name.clone(),
                rre: None,
                rte: None,
                success: false,
                error: Some(e.to_string()),
            },
        });
    }
    let n = scored.len().max(1) as f64;
    let successes = scored.iter().filter(|m| m.success).count();
    let summary = json!({
        "pairs": pairs.len(),
        "registration_recall": successes as f64 / pairs.len() as f64,
        "recall_over_completed": registration_recall(&scored),
        "mean_rre_deg": scored.iter().map(|m| m.rre).sum::<f64>() / n,
        "mean_rte": scored.iter().map(|m| m.rte).sum::<f64>() / n,
        "failures": pairs.len() - scored.len(),
        "thresholds": th,
        "per_pair": rows,
    });
    print_json(out, &summary)?;
    Ok(())
}

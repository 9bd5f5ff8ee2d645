use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pointspot::annotations::{base_dir, read_annotations};
use pointspot::config::RunConfig;
use pointspot::dataset::Dataset;
use pointspot::decode::{bench, Forcing};
use pointspot::error::{Error, Result};
use pointspot::eval::EvalMode;
use pointspot::geometry::PointMode;
use pointspot::image::Image;
use pointspot::model::Weights;
use pointspot::pipeline::{infer_annotations, read_predictions, score_lines, write_predictions, PredictionLine};
use pointspot::seqcodec::{loop_counts, LoopCounts};
use pointspot::synth::generate_dataset;
use pointspot::train::{checkpoint, EvalSet, FitOptions, Trainer};
use pointspot::viz;

#[derive(Parser)]
#[command(name = "pointspot", version, about = "Single-point text spotting: data, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, env = "POINTSPOT_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct DecodeFlags {
    /// Drop predictions scoring below this.
    #[arg(long)]
    threshold: Option<f64>,
    /// central, top-left or random.
    #[arg(long)]
    point_mode: Option<PointMode>,
    /// Transcription-only decoding and scoring.
    #[arg(long)]
    npts: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train a model, writing checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training annotations.
        #[arg(long)]
        data: PathBuf,
        /// Held-out annotations for periodic evaluation.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Decode every image of an annotation file.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictions file, one JSON line per image.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Score predictions (or a checkpoint) against annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Ground-truth annotations.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
        /// Word list, one per line.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Count and time decoding loops, split versus single-stream.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Randomly initialized from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Images to decode; without it only the capacity formulas are reported.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Let the model choose instance counts and lengths instead of
        /// taking them from the annotations.
        #[arg(long)]
        free: bool,
    },
    /// Draw predictions and annotations over the images.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Output pixels per image pixel.
        #[arg(long, default_value_t = 4)]
        zoom: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    log::debug!("resolved config:\n{}", cfg.to_toml());
    Ok(cfg)
}

fn apply_decode_flags(cfg: &mut RunConfig, flags: &DecodeFlags) {
    if let Some(t) = flags.threshold {
        cfg.decode.threshold = t;
    }
    if let Some(p) = flags.point_mode {
        cfg.decode.point_mode = p;
        cfg.eval.point_mode = p;
    }
    if flags.npts {
        cfg.decode.npts = true;
        cfg.eval.mode = EvalMode::Npts;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("document serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let text: String = rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(common: &Common, out: &Path, count: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let m = generate_dataset(&cfg.synth, count, out)?;
    log::info!("wrote {} scenes to {}", m.count, out.display());
    Ok(())
}

fn train(
    common: &Common,
    data: &Path,
    eval_data: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::from_checkpoint(checkpoint::load(dir)?)?;
            log::info!("resuming at step {}", t.step);
            t
        }
        None => Trainer::new(&cfg.model, cfg.train.clone())?,
    };
    cfg.model = trainer.weights.config.clone();
    cfg.train = trainer.cfg.clone();
    create_dir(out)?;
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;

    let side = cfg.model.image_side;
    let train_set = Dataset::load(data, side)?;
    let eval_set = eval_data.map(|p| Dataset::load(p, side)).transpose()?;
    let opts = FitOptions {
        eval: eval_set.as_ref().map(|d| EvalSet { data: d, decode: cfg.decode.clone(), eval: cfg.eval.clone() }),
        out_dir: Some(out.to_path_buf()),
        max_steps,
    };
    let stats = trainer.fit(&train_set, &opts)?;
    if let Some(last) = stats.last() {
        log::info!("finished at step {} loss {:.5}", trainer.step, last.loss);
    }
    Ok(())
}

fn infer(common: &Common, ck: &Path, data: &Path, out: &Path, flags: &DecodeFlags) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_decode_flags(&mut cfg, flags);
    cfg.decode.validate()?;
    let weights = checkpoint::load_weights(ck)?;
    let lines = read_annotations(data)?;
    let preds = infer_annotations(&weights, data, &lines, &cfg.decode)?;
    write_predictions(out, &preds)
}

fn read_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    common: &Common,
    data: &Path,
    predictions: Option<&Path>,
    ck: Option<&Path>,
    out: &Path,
    lexicon: Option<&Path>,
    flags: &DecodeFlags,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_decode_flags(&mut cfg, flags);
    if let Some(p) = lexicon {
        cfg.eval.lexicon = Some(read_lexicon(p)?);
    }
    cfg.eval.validate()?;
    let gt = read_annotations(data)?;
    let preds = match (predictions, ck) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(ck)) => infer_annotations(&checkpoint::load_weights(ck)?, data, &gt, &cfg.decode)?,
        (None, None) => return Err(Error::invalid("either --predictions or --checkpoint is required")),
    };
    let report = score_lines(&gt, &preds, &cfg.eval)?;
    log::info!("precision {:.4} recall {:.4} hmean {:.4}", report.precision, report.recall, report.hmean);
    write_json(out, &report)
}

#[derive(Serialize)]
struct LoopRow<'a> {
    image: &'a str,
    n_instances: usize,
    split_loops: usize,
    joint_loops: usize,
    predicted_split: usize,
    predicted_joint: usize,
    within_bound: bool,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    image: &'a str,
    encode_ms: f64,
    split_ms: f64,
    joint_ms: f64,
}

#[derive(Serialize)]
struct BenchSummary {
    /// Formulas at the model's instance and length capacity.
    capacity: Capacity,
    images: usize,
    split_loops: usize,
    joint_loops: usize,
    predicted_split: usize,
    predicted_joint: usize,
    measured_reduction_rate: f64,
    all_within_bound: bool,
}

#[derive(Serialize)]
struct Capacity {
    max_instances: usize,
    max_chars: usize,
    #[serde(flatten)]
    counts: LoopCounts,
}

#[derive(Serialize)]
struct TimingSummary {
    split_ms: f64,
    joint_ms: f64,
    speedup: f64,
}

fn bench_cmd(common: &Common, ck: Option<&Path>, data: Option<&Path>, out: &Path, free: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let weights = match ck {
        Some(p) => checkpoint::load_weights(p)?,
        None => Weights::init(&cfg.model, cfg.train.seed)?,
    };
    let mc = &weights.config;
    let k = cfg.decode.max_chars.min(mc.max_chars);
    let n_max = cfg.decode.max_instances.min(mc.max_instances);
    create_dir(out)?;
    let mut summary = BenchSummary {
        capacity: Capacity { max_instances: n_max, max_chars: k, counts: loop_counts(n_max, k) },
        images: 0,
        split_loops: 0,
        joint_loops: 0,
        predicted_split: 0,
        predicted_joint: 0,
        measured_reduction_rate: 0.0,
        all_within_bound: true,
    };
    if let Some(data) = data {
        let set = Dataset::load(data, mc.image_side)?;
        let mut loops = Vec::new();
        let mut timings = Vec::new();
        for s in &set.samples {
            let forcing = if free {
                Forcing::default()
            } else {
                let scored: Vec<_> = s.instances.iter().filter(|t| !t.dont_care).take(n_max).collect();
                Forcing {
                    instances: Some(scored.len()),
                    lengths: Some(scored.iter().map(|t| t.transcript.chars().count().min(k)).collect()),
                }
            };
            let r = bench(&weights, &s.image, &cfg.decode, &forcing)?;
            let bound = 2 * r.n_instances + k + 1;
            loops.push(LoopRow {
                image: &s.name,
                n_instances: r.n_instances,
                split_loops: r.split_loops,
                joint_loops: r.joint_loops,
                predicted_split: r.predicted_split,
                predicted_joint: r.predicted_joint,
                within_bound: r.split_loops <= bound,
            });
            timings.push(TimingRow { image: &s.name, encode_ms: r.encode_ms, split_ms: r.split_ms, joint_ms: r.joint_ms });
        }
        summary.images = loops.len();
        summary.split_loops = loops.iter().map(|r| r.split_loops).sum();
        summary.joint_loops = loops.iter().map(|r| r.joint_loops).sum();
        summary.predicted_split = loops.iter().map(|r| r.predicted_split).sum();
        summary.predicted_joint = loops.iter().map(|r| r.predicted_joint).sum();
        summary.all_within_bound = loops.iter().all(|r| r.within_bound);
        if summary.joint_loops > 0 {
            summary.measured_reduction_rate =
                (summary.joint_loops - summary.split_loops.min(summary.joint_loops)) as f64 / summary.joint_loops as f64;
        }
        let split_ms: f64 = timings.iter().map(|t| t.split_ms).sum();
        let joint_ms: f64 = timings.iter().map(|t| t.joint_ms).sum();
        write_lines(&out.join("loops.jsonl"), &loops)?;
        write_lines(&out.join("timings.jsonl"), &timings)?;
        let speedup = if split_ms > 0.0 { joint_ms / split_ms } else { 0.0 };
        log::info!("decode speedup {:.2}x over {} images", speedup, summary.images);
        write_json(&out.join("timing_summary.json"), &TimingSummary { split_ms, joint_ms, speedup })?;
    }
    let c = &summary.capacity.counts;
    println!(
        "N={} K={}: joint {} split {} reduction {} ({:.1}%)",
        n_max,
        k,
        c.joint,
        c.split,
        c.reduction,
        100.0 * c.reduction_rate
    );
    write_json(&out.join("summary.json"), &summary)
}

fn viz_cmd(data: &Path, predictions: Option<&Path>, out: &Path, zoom: usize) -> Result<()> {
    if zoom == 0 {
        return Err(Error::invalid("zoom must be positive"));
    }
    let gt = read_annotations(data)?;
    let preds: Vec<PredictionLine> = match predictions {
        Some(p) => read_predictions(p)?,
        None => Vec::new(),
    };
    create_dir(out)?;
    let base = base_dir(data);
    for line in &gt {
        let image = Image::load_gray(&line.image_path(&base))?;
        let p = preds.iter().find(|p| p.image == line.image).map(|p| p.predictions.as_slice()).unwrap_or(&[]);
        let canvas = viz::overlay(&image, &line.instances, p, zoom);
        let stem = Path::new(&line.image).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        viz::save_png(&canvas, &out.join(format!("{}.png", stem)))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common, out, count } => synth(common, out, *count),
        Command::Train { common, data, eval_data, out, resume, max_steps } => {
            train(common, data, eval_data.as_deref(), out, resume.as_deref(), *max_steps)
        }
        Command::Infer { common, checkpoint, data, out, decode } => infer(common, checkpoint, data, out, decode),
        Command::Eval { common, data, predictions, checkpoint, out, lexicon, decode } => {
            eval(common, data, predictions.as_deref(), checkpoint.as_deref(), out, lexicon.as_deref(), decode)
        }
        Command::Bench { common, checkpoint, data, out, free } => {
            bench_cmd(common, checkpoint.as_deref(), data.as_deref(), out, *free)
        }
        Command::Viz { data, predictions, out, zoom } => viz_cmd(data, predictions.as_deref(), out, *zoom),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

//! The `mcfr` command line: scene synthesis, event simulation, stacking,
//! offline training, tracking, evaluation and gradient checking.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mcfr_core::events::{load_events, save_events};
use mcfr_core::frames::{load_boxes, load_sequence, save_sequence, FrameSequence};
use mcfr_core::metrics::EvalReport;
use mcfr_core::net::{check_model_gradients, load_checkpoint, save_checkpoint, AblationFlags, McfrConfig, McfrModel, ModelInput};
use mcfr_core::repr::{save_stacked, stack_events};
use mcfr_core::simulator::{
    frames_to_events, gen_synthetic_sequence, perturb_exposure, ExposureConfig, ExposureMode, Motion, SceneSpec,
};
use mcfr_core::snn::SpikeTensor;
use mcfr_core::tracker::{track_sequence, train_multi_domain, Domain};
use mcfr_core::{BBox, EventStream, Tensor, TimeWindow};

pub use config::{Paths, RunConfig, Seeds};

/// Frame + event object tracking laboratory.
#[derive(Debug, Parser)]
#[command(name = "mcfr", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a frame sequence into an event stream.
    Simulate(SimulateArgs),
    /// Render a synthetic moving-object sequence with ground truth.
    Synth(SynthArgs),
    /// Apply random under- or over-exposure to every frame.
    Perturb(PerturbArgs),
    /// Stack one time window of events into count and timestamp images.
    Stack(StackArgs),
    /// Train a multi-domain model offline, one domain per sequence.
    Train(TrainArgs),
    /// Track the object in a sequence, starting from its first box.
    Track(TrackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Sequence directory (numbered PGM/PPM frames plus timestamps.txt).
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    /// Event CSV to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Positive contrast threshold in log intensity.
    #[arg(long, default_value_t = 0.15)]
    pub c_pos: f64,
    /// Negative contrast threshold in log intensity.
    #[arg(long, default_value_t = 0.15)]
    pub c_neg: f64,
    /// Std of per-pixel Gaussian threshold noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
    /// Seed for threshold noise.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MotionKind {
    /// Constant horizontal velocity.
    Linear,
    /// Horizontal drift plus a vertical sinusoid.
    Sine,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output sequence directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of frames.
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    /// Frame width and height in pixels.
    #[arg(long, num_args = 2, value_names = ["W", "H"], default_values_t = [64, 64])]
    pub size: Vec<u32>,
    /// Object trajectory.
    #[arg(long, value_enum, default_value_t = MotionKind::Linear)]
    pub motion: MotionKind,
    /// Render RGB frames instead of grayscale.
    #[arg(long)]
    pub color: bool,
    /// Seed for the background texture.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExposureKind {
    /// Darken every frame.
    Under,
    /// Brighten every frame.
    Over,
    /// Pick the direction independently per frame.
    Random,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Input sequence directory.
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    /// Output sequence directory; ground truth is copied along.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Exposure direction.
    #[arg(long, value_enum)]
    pub mode: ExposureKind,
    /// Seed for the per-frame gains.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StackArgs {
    /// Event CSV.
    #[arg(long, value_name = "FILE")]
    pub events: PathBuf,
    /// Half-open window [T0, T1) in microseconds.
    #[arg(long, num_args = 2, value_names = ["T0", "T1"], required = true)]
    pub window: Vec<u64>,
    /// Binary stacked-frame file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Sensor size, when the event file has no geometry line.
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    pub size: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training sequence directories, each with ground truth and events.
    #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Run configuration (JSON).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Overrides the training seed; weights use the configured model seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Trained checkpoint. Without it a fresh model is built from the config.
    #[arg(long, value_name = "CKPT")]
    pub model: Option<PathBuf>,
    /// Run configuration (JSON) for the tracker and, without --model, the network.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Sequence directory to track.
    #[arg(long, value_name = "DIR")]
    pub seq: PathBuf,
    /// Event CSV; defaults to the configured file name inside the sequence directory.
    #[arg(long, value_name = "FILE")]
    pub events: Option<PathBuf>,
    /// Initial box "x,y,w,h"; defaults to the first ground-truth box.
    #[arg(long, value_name = "X,Y,W,H")]
    pub init: Option<String>,
    /// Per-frame "x,y,w,h,score" output.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Evaluation report (JSON) written when ground truth is available.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Overrides the tracker seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable branches or inputs, e.g. "no-uee" or "mcfr-c,no-timestamps".
    #[arg(long, value_name = "FLAGS")]
    pub ablate: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Precision at 20 px and success-curve area for one sequence.
    Prsr,
    /// Average precision and robustness over repeated runs.
    Apar,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction files; for apar give rounds x sequences files, round-major.
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth files, one per sequence.
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
    /// Which protocol to run.
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Repeat count for apar.
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write the curves as CSV.
    #[arg(long, value_name = "FILE")]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Number of random models checked.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

/// Sizes the global thread pool from `MCFR_THREADS` (unset or 0: one thread
/// per core).
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MCFR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| mcfr_core::Error::Config(format!("MCFR_THREADS must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

/// One-line machine-readable description of a failure.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e.chain().find_map(|c| c.downcast_ref::<mcfr_core::Error>()).map_or("cli", |e| e.kind());
    // Library errors already print their source, so skip links the previous
    // message contains.
    let mut parts: Vec<String> = Vec::new();
    for c in e.chain() {
        let text = c.to_string().replace('\n', " ");
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    let message = parts.join(": ");
    json!({ "error": kind, "message": message }).to_string()
}

/// The clap command tree, for help rendering and introspection.
pub fn cli_command() -> clap::Command {
    <Cli as clap::CommandFactory>::command()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Synth(a) => synth(a),
        Command::Perturb(a) => perturb(a),
        Command::Stack(a) => stack(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn pair<T: Copy>(v: &[T]) -> (T, T) {
    (v[0], v[1])
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| mcfr_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_seq(dir: &Path) -> Result<(FrameSequence, Option<Vec<BBox>>)> {
    load_sequence(dir).with_context(|| format!("sequence {}", dir.display()))
}

fn load_stream(path: &Path, seq: &FrameSequence) -> Result<EventStream> {
    load_events(path, Some((seq.width(), seq.height()))).with_context(|| format!("events {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let (seq, _) = load_seq(&a.frames)?;
    let cfg = mcfr_core::simulator::SimConfig {
        c_pos: a.c_pos,
        c_neg: a.c_neg,
        threshold_noise_std: a.noise_std,
        ..Default::default()
    };
    let events = frames_to_events(&seq, &cfg, a.seed)?;
    save_events(&events, &a.out)?;
    println!("{}", json!({ "events": events.len(), "width": events.width(), "height": events.height() }));
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let (w, h) = pair(&a.size);
    if a.frames == 0 || w < 8 || h < 8 {
        bail!(mcfr_core::Error::Invalid(format!("need at least one frame of 8x8 or more, got {} of {w}x{h}", a.frames)));
    }
    let side = (f64::from(w.min(h)) * 0.1875).round().max(3.0);
    let x0 = (f64::from(w) / 16.0).round();
    let room = f64::from(w) - side - 2.0 * x0;
    let vx = if a.frames > 1 { (room / (a.frames - 1) as f64).min(0.75) } else { 0.0 };
    let y0 = ((f64::from(h) - side) / 2.0).round();
    let motion = match a.motion {
        MotionKind::Linear => Motion::Linear { vx, vy: 0.0 },
        MotionKind::Sine => Motion::Sine {
            vx,
            amplitude: (y0 / 2.0).min(6.0),
            period: 20.0,
        },
    };
    let spec = SceneSpec {
        width: w,
        height: h,
        object_w: side,
        object_h: side,
        x0,
        y0,
        motion,
        frames: a.frames,
        color: a.color,
        ..SceneSpec::default()
    };
    let (seq, gt) = gen_synthetic_sequence(&spec, a.seed)?;
    save_sequence(&a.out, &seq, Some(&gt))?;
    println!("{}", json!({ "frames": seq.len(), "width": w, "height": h }));
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let (seq, gt) = load_seq(&a.frames)?;
    let mode = match a.mode {
        ExposureKind::Under => ExposureMode::Under,
        ExposureKind::Over => ExposureMode::Over,
        ExposureKind::Random => ExposureMode::Random { group_len: 1 },
    };
    let out = perturb_exposure(&seq, &ExposureConfig::with_mode(mode), a.seed)?;
    save_sequence(&a.out, &out, gt.as_deref())?;
    println!("{}", json!({ "frames": out.len() }));
    Ok(())
}

fn stack(a: StackArgs) -> Result<()> {
    let events = load_events(&a.events, a.size.as_deref().map(pair))
        .with_context(|| format!("events {}", a.events.display()))?;
    let (t0, t1) = pair(&a.window);
    let f = stack_events(&events, TimeWindow::new(t0, t1)?);
    save_stacked(&f, &a.out)?;
    println!("{}", json!({ "events": f.total_count(), "width": f.width, "height": f.height }));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut data = Vec::new();
    for dir in &a.data {
        let (seq, gt) = load_seq(dir)?;
        let gt = gt.ok_or_else(|| {
            mcfr_core::Error::Invalid(format!("{} has no groundtruth.txt", dir.display()))
        })?;
        let events = load_stream(&dir.join(&cfg.paths.events), &seq)?;
        data.push((seq, gt, events));
    }
    let domains: Vec<Domain> = data
        .iter()
        .map(|(seq, gt, events)| Domain { seq, gt, events })
        .collect();
    let mut model = McfrModel::new(cfg.model.clone().with_domains(domains.len()), cfg.seeds.model)?;
    let losses = train_multi_domain(&mut model, &domains, &cfg.training, a.seed.unwrap_or(cfg.seeds.training))?;
    save_checkpoint(&model, &a.out)?;
    println!(
        "{}",
        json!({
            "domains": domains.len(),
            "iterations": losses.len(),
            "first_loss": losses.first(),
            "last_loss": losses.last(),
            "fingerprint": model.fingerprint(),
        })
    );
    Ok(())
}

fn parse_box(text: &str) -> Result<BBox> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| mcfr_core::Error::Invalid(format!("bad box {text:?}, expected x,y,w,h")))?;
    match v[..] {
        [x, y, w, h] => Ok(BBox::new(x, y, w, h).validated()?),
        _ => bail!(mcfr_core::Error::Invalid(format!("bad box {text:?}, expected x,y,w,h"))),
    }
}

fn track(a: TrackArgs) -> Result<()> {
    if a.model.is_none() && a.config.is_none() {
        bail!(mcfr_core::Error::Invalid("track needs --model or --config".into()));
    }
    let cfg = load_config(a.config.as_deref())?;
    let flags = a.ablate.as_deref().map(AblationFlags::parse).transpose()?;
    let model = match &a.model {
        Some(path) => {
            let m = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
            match flags {
                Some(f) => m.ablate(f)?,
                None => m,
            }
        }
        None => {
            let mut mc = cfg.model.clone();
            if let Some(f) = flags {
                mc = mc.with_ablation(f);
            }
            McfrModel::new(mc, cfg.seeds.model)?
        }
    };
    let fingerprint = model.fingerprint();
    let (seq, gt) = load_seq(&a.seq)?;
    let events_path = a.events.clone().unwrap_or_else(|| a.seq.join(&cfg.paths.events));
    let events = load_stream(&events_path, &seq)?;
    let init = match (&a.init, &gt) {
        (Some(text), _) => parse_box(text)?,
        (None, Some(gt)) => gt[0],
        (None, None) => bail!(mcfr_core::Error::Invalid(format!(
            "{} has no groundtruth.txt; pass --init",
            a.seq.display()
        ))),
    };
    let name = a.seq.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let seed = a.seed.unwrap_or(cfg.seeds.tracker);
    let result = track_sequence(model, &seq, &events, init, cfg.tracker.clone(), seed, &name)?;
    write(&a.out, &result.to_lines())?;
    let summary = match &gt {
        Some(gt) => {
            let report = EvalReport::prsr(&result.boxes, gt)?.with_fingerprint(fingerprint.clone());
            if let Some(path) = &a.report {
                write(path, &report.to_json())?;
            }
            json!({
                "frames": result.boxes.len(),
                "fingerprint": fingerprint,
                "pr_at_20": report.pr_at_20,
                "sr_auc": report.sr_auc,
            })
        }
        None => json!({ "frames": result.boxes.len(), "fingerprint": fingerprint }),
    };
    println!("{summary}");
    Ok(())
}

fn load_box_file(path: &Path) -> Result<Vec<BBox>> {
    load_boxes(path).with_context(|| format!("boxes {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let gts: Vec<Vec<BBox>> = a.gt.iter().map(|p| load_box_file(p)).collect::<Result<_>>()?;
    let preds: Vec<Vec<BBox>> = a.pred.iter().map(|p| load_box_file(p)).collect::<Result<_>>()?;
    let report = match a.metric {
        Metric::Prsr => {
            if preds.len() != 1 || gts.len() != 1 {
                bail!(mcfr_core::Error::Invalid("prsr takes exactly one --pred and one --gt".into()));
            }
            EvalReport::prsr(&preds[0], &gts[0])?
        }
        Metric::Apar => {
            if a.rounds == 0 || preds.len() != a.rounds * gts.len() {
                bail!(mcfr_core::Error::Invalid(format!(
                    "apar with {} rounds over {} sequences needs {} --pred files, got {}",
                    a.rounds,
                    gts.len(),
                    a.rounds * gts.len(),
                    preds.len()
                )));
            }
            let rounds: Vec<Vec<Vec<BBox>>> = preds.chunks(gts.len()).map(<[_]>::to_vec).collect();
            EvalReport::apar(&rounds, &gts)?
        }
    };
    if let Some(path) = &a.curves {
        write(path, &report.curves_csv())?;
    }
    match &a.out {
        Some(path) => write(path, &report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = McfrConfig::reduced();
    let (n, t) = (cfg.input_crop, cfg.uee.params.t_bins);
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    for seed in 0..a.seeds {
        let mut model = McfrModel::new(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // zero biases would park dead units on the ReLU kink
        model.for_each_param_mut(|name, _, t| {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        });
        let input = ModelInput {
            x7: Tensor::from_vec(&[7, n, n], (0..7 * n * n).map(|_| rng.gen()).collect())?,
            spikes: Some(SpikeTensor::from_vec(
                [2, n, n, t],
                (0..2 * n * n * t).map(|_| u8::from(rng.gen_bool(0.15))).collect(),
            )?),
        };
        let p = model.prepare(&input)?;
        let domain = (seed % cfg.num_domains as u64) as usize;
        for (name, r) in check_model_gradients(&model, &p, (seed % 2) as usize, domain, a.step)? {
            tensors += 1;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("seed {seed} {name}"));
            }
        }
    }
    let pass = worst.0 < a.tolerance;
    println!(
        "{}",
        json!({
            "seeds": a.seeds,
            "tensors": tensors,
            "max_rel_error": worst.0,
            "worst": worst.1,
            "tolerance": a.tolerance,
            "pass": pass,
        })
    );
    if !pass {
        bail!(mcfr_core::Error::Invalid(format!(
            "gradient check failed: {} has relative error {:.3e} >= {:.1e}",
            worst.1, worst.0, a.tolerance
        )));
    }
    Ok(())
}

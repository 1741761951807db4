use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};

use forestvid::dataset::{compute_stats, load_manifest, ClassVocabulary, Manifest, Split};
use forestvid::resnet::{ResNet3d, ResNetConfig};
use forestvid::synth::{generate_dataset, generate_long_video, sha256_hex, SynthSpec, TimelineScript};
use forestvid::train::{evaluate, fit, load_checkpoint, Adam, CheckpointConfig, ClipDataset, EpochRecord, TrainConfig};
use forestvid::video::{load_clip, write_rvf, TransformConfig};
use forestvid::Error;

use crate::segment::{segment_clip, SegmenterConfig};
use crate::CliError;

type CmdResult = Result<(), CliError>;

fn require_exists(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { context: format!("creating {}", dir.display()), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { context: format!("writing {}", path.display()), source: e })?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-width network at 244x244 crops.
    Full,
    /// Quarter-width network at 56x56 crops for 64x64 footage.
    Small,
}

impl Preset {
    fn configs(self, classes: usize) -> (ResNetConfig, TransformConfig) {
        let (mut model, transform) = match self {
            Preset::Full => (ResNetConfig::default(), TransformConfig::default()),
            Preset::Small => (ResNetConfig::width_reduced(4), TransformConfig::small()),
        };
        model.num_classes = classes;
        (model, transform)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest CSV with train and val rows.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the checkpoint and epoch log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4.0)]
    pub clip_seconds: f64,
}

fn open_splits(
    manifest: &Manifest,
    vocab: &ClassVocabulary,
    transform: &TransformConfig,
    clip_seconds: f64,
) -> Result<(ClipDataset, ClipDataset), CliError> {
    let train = ClipDataset::from_manifest(manifest, Split::Train, vocab, transform.clone(), clip_seconds)?;
    let val = ClipDataset::from_manifest(manifest, Split::Val, vocab, transform.clone(), clip_seconds)?;
    for (name, ds) in [("train", &train), ("val", &val)] {
        for (c, label) in vocab.active().iter().enumerate() {
            if !ds.labels().contains(&c) {
                return Err(Error::Empty(format!("class {label} has no {name} clips")).into());
            }
        }
    }
    Ok((train, val))
}

fn epoch_row(r: &EpochRecord, elapsed: f64) -> String {
    format!(
        "{:>5}  {:>8.4}  {:>6.3}  {:>6.3}  {:>8.4}  {:>6.3}  {:>6.3}  {:>7.1}",
        r.epoch, r.train.ce_loss_mean, r.train.accuracy, r.train.f1_macro, r.val.ce_loss_mean, r.val.accuracy,
        r.val.f1_macro, elapsed
    )
}

pub fn train(args: &TrainArgs, seed: u64) -> CmdResult {
    require_exists(&args.manifest, "manifest")?;
    let vocab = ClassVocabulary::default();
    let manifest = load_manifest(&args.manifest, &vocab)?;
    let (model_cfg, transform) = args.preset.configs(vocab.num_active());
    let (train_ds, val_ds) = open_splits(&manifest, &vocab, &transform, args.clip_seconds)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        clip_seconds: args.clip_seconds,
        seed,
        checkpoint_dir: args.out.clone(),
        log_path: args.out.join("train_log.jsonl"),
    };
    cfg.validate()?;
    let mut model = ResNet3d::<f32>::build(&model_cfg, seed)?;
    let mut opt = Adam::new(model.parameters());
    let ck = CheckpointConfig {
        model: model_cfg,
        transform,
        classes: vocab.active().to_vec(),
        clip_seconds: args.clip_seconds,
    };
    println!(
        "{} train / {} val clips, {} parameters",
        train_ds.len(),
        val_ds.len(),
        model.count_parameters()
    );
    println!("epoch  trn_loss  trn_acc  trn_f1  val_loss  val_acc  val_f1  seconds");
    let start = Instant::now();
    let outcome = fit(&mut model, &mut opt, &train_ds, &val_ds, &cfg, &ck, |r| {
        println!("{}", epoch_row(r, start.elapsed().as_secs_f64()));
        let _ = std::io::stdout().flush();
    })?;
    if let (Some(path), Some(epoch)) = (&outcome.best_checkpoint, outcome.best_epoch) {
        println!("best checkpoint (epoch {epoch}): {}", path.display());
    }
    println!("epoch log: {}", cfg.log_path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the metrics report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate the training rows instead of the validation rows.
    #[arg(long)]
    pub train_split: bool,
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    require_exists(&args.manifest, "manifest")?;
    require_exists(&args.checkpoint, "checkpoint")?;
    let vocab = ClassVocabulary::default();
    let ck = load_checkpoint::<f32>(&args.checkpoint)?;
    if ck.config.classes != vocab.active() {
        return Err(Error::Checkpoint(format!(
            "checkpoint classes {:?} differ from {:?}",
            ck.config.classes,
            vocab.active()
        ))
        .into());
    }
    let manifest = load_manifest(&args.manifest, &vocab)?;
    let split = if args.train_split { Split::Train } else { Split::Val };
    let ds = ClipDataset::from_manifest(&manifest, split, &vocab, ck.config.transform.clone(), ck.config.clip_seconds)?;
    let report = evaluate(&ck.model, &ds, 8)?;
    println!("f1_macro         {:.4}", report.f1_macro);
    println!("precision_macro  {:.4}", report.precision_macro);
    println!("recall_macro     {:.4}", report.recall_macro);
    println!("accuracy         {:.4}", report.accuracy);
    let json = to_json(&report);
    match &args.out {
        Some(p) => write_file(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// `.rvf` file or directory of PPM frames.
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub window: f64,
    #[arg(long, default_value_t = 1.0)]
    pub stride: f64,
    #[arg(long, default_value_t = 3)]
    pub smoothing: usize,
    /// Frame rate of a PPM directory.
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn segment(args: &SegmentArgs) -> CmdResult {
    require_exists(&args.video, "video")?;
    require_exists(&args.checkpoint, "checkpoint")?;
    let cfg = SegmenterConfig { window_seconds: args.window, stride_seconds: args.stride, smoothing: args.smoothing };
    cfg.validate()?;
    let ck = load_checkpoint::<f32>(&args.checkpoint)?;
    let clip = load_clip(&args.video, args.fps)?;
    let (_, timeline) = segment_clip(&ck.model, &clip, &ck.config.transform, &cfg, &ck.config.classes)?;
    let csv = timeline.to_csv();
    if let Some(p) = &args.json {
        write_file(p, to_json(&timeline).as_bytes())?;
    }
    if let Some(p) = &args.csv {
        write_file(p, csv.as_bytes())?;
    }
    println!("# {}", timeline.note);
    print!("{csv}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Histogram bin width in frames.
    #[arg(long, default_value_t = 30)]
    pub bin_width: usize,
    /// Write the JSON document here instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn stats(args: &StatsArgs) -> CmdResult {
    require_exists(&args.manifest, "manifest")?;
    if args.bin_width == 0 {
        return Err(CliError::Usage("--bin-width must be at least 1".into()));
    }
    let vocab = ClassVocabulary::default();
    let manifest = load_manifest(&args.manifest, &vocab)?;
    let stats = compute_stats(&manifest.entries, &vocab, args.bin_width)?;
    print!("{}", stats.render_table());
    let json = to_json(&stats);
    match &args.json {
        Some(p) => write_file(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    /// Render one long video from a JSON script of `{class, seconds}` items.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 16.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

pub fn synthgen(args: &SynthArgs, seed: u64) -> CmdResult {
    let template = SynthSpec {
        width: args.width,
        height: args.height,
        fps: args.fps,
        noise_level: args.noise,
        ..SynthSpec::default()
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { context: format!("creating {}", args.out.display()), source: e })?;
    if let Some(script_path) = &args.script {
        require_exists(script_path, "script")?;
        let script = TimelineScript::load(script_path)?;
        let (clip, truth) = generate_long_video(&script, &template, seed)?;
        let video = args.out.join("video.rvf");
        write_rvf(&video, &clip)?;
        let truth_path = args.out.join("segments.json");
        write_file(&truth_path, to_json(&truth).as_bytes())?;
        let bytes = fs::read(&video).map_err(|e| Error::Io { context: format!("reading {}", video.display()), source: e })?;
        println!("video: {} ({} frames)", video.display(), clip.num_frames());
        println!("ground truth: {}", truth_path.display());
        println!("{}  video.rvf", sha256_hex(&bytes));
        return Ok(());
    }
    let generated = generate_dataset(&args.out, args.per_class, &template, seed)?;
    println!("manifest: {}", generated.manifest_path.display());
    for (path, sum) in &generated.checksums {
        println!("{sum}  {path}");
    }
    Ok(())
}

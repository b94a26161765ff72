//! `mambavad` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure (non-finite loss).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mambavad::checkpoint;
use mambavad::config::{AblationFlags, Normalization, RunConfig};
use mambavad::data::{index_dataset, load_frame_folder, load_videos, DatasetIndex, Split, Video};
use mambavad::model::{count_parameters, Model};
use mambavad::pipeline::{
    k_sweep, measure_videos, parse_range, run_training, score_and_auc, tau_sweep, with_k_percent, Measurement,
    RunManifest,
};
use mambavad::render;
use mambavad::score::{records, score_csv_row, score_videos, RawScores, SCORE_CSV_HEADER};
use mambavad::synth::{synthesize_dataset, SynthSpec, METADATA_FILE};
use mambavad::{Error, ParamStore};

const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("MAMBAVAD_GIT_DESCRIBE"));

#[derive(Parser)]
#[command(name = "mambavad", version = CODE_VERSION, about = "Spatial-temporal state-space video anomaly detection")]
struct Cli {
    /// Root for run directories when --out is omitted.
    #[arg(long, global = true, env = "MAMBAVAD_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic moving-sprite dataset.
    Synth(SynthArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Score the test split and report frame-level AUC.
    Eval(EvalArgs),
    /// Score an unlabeled frame folder and render curves and error maps.
    Score(ScoreArgs),
    /// Train and evaluate several ablation variants with identical settings.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON generator spec; defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace a previously generated dataset in --out.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// JSON run configuration; defaults to the desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override model and training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant, repeatable (e.g. memory_off, bottleneck_only).
    #[arg(long = "ablate")]
    ablate: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from <out>/last.ckpt.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Tau,
    K,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    PerVideo,
    Global,
}

impl From<Scope> for Normalization {
    fn from(s: Scope) -> Self {
        match s {
            Scope::PerVideo => Normalization::PerVideo,
            Scope::Global => Normalization::Global,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "untrained")]
    ckpt: Option<PathBuf>,
    /// Evaluate a freshly initialized model built from --config.
    #[arg(long, conflicts_with = "ckpt")]
    untrained: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Percentage of memory items kept on read.
    #[arg(long)]
    kpercent: Option<f64>,
    #[arg(long, value_enum)]
    normalization: Option<Scope>,
    /// Sweep one hyperparameter over start:end:step, e.g. `--sweep tau 0:1:0.1`.
    #[arg(long, num_args = 2, value_names = ["PARAM", "RANGE"])]
    sweep: Option<Vec<String>>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated variants; `full` is the unablated model.
    #[arg(long, value_delimiter = ',', default_value = "full,memory_off,bottleneck_only")]
    variants: Vec<String>,
    #[arg(long)]
    force: bool,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    let root = cli.output_root.clone();
    let result = match cli.cmd {
        Cmd::Synth(a) => synth(a, &root),
        Cmd::Train(a) => train(a, &root, &argv),
        Cmd::Eval(a) => eval(a, &root, &argv),
        Cmd::Score(a) => score(a, &root, &argv),
        Cmd::Ablate(a) => ablate(a, &root, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::NonFinite { .. }) { 3 } else { 2 })
        }
    }
}

fn out_dir(out: Option<PathBuf>, root: &Path, cmd: &str) -> PathBuf {
    out.unwrap_or_else(|| root.join(cmd))
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Outcome {
    if is_nonempty_dir(dir) && !force {
        return Err(Failure::Usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e))
}

fn run_config(m: &ModelArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &m.config {
        Some(p) => read_json(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = m.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    for name in &m.ablate {
        cfg.model.ablation.apply(name)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ablation_names(flags: &AblationFlags, requested: &[String]) -> Vec<String> {
    if *flags == AblationFlags::default() {
        Vec::new()
    } else {
        requested.to_vec()
    }
}

fn manifest(cfg: &RunConfig, out: &Path, argv: &[String], ablations: Vec<String>) -> RunManifest {
    RunManifest {
        code_version: CODE_VERSION.to_string(),
        command_line: argv.to_vec(),
        out_dir: out.to_path_buf(),
        seed: cfg.train.seed,
        ablations,
        config: cfg.clone(),
    }
}

fn load_split(data: &Path, split: Split, size: usize) -> Result<(DatasetIndex, Vec<Video>), Error> {
    let index = index_dataset(data, split)?;
    let videos = load_videos(&index, size)?;
    Ok((index, videos))
}

fn synth(a: SynthArgs, root: &Path) -> Outcome {
    let out = out_dir(a.out, root, "synth");
    let spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    spec.validate()?;
    if is_nonempty_dir(&out) {
        if !a.force {
            return Err(Failure::Usage(format!(
                "output directory {} is not empty; pass --force to regenerate",
                out.display()
            )));
        }
        for sub in ["training", "testing"] {
            let p = out.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::file(&p, e))?;
            }
        }
    }
    fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
    let meta = synthesize_dataset(&out, &spec, a.seed)?;
    println!("wrote {} ({} videos, seed {}, {METADATA_FILE})", out.display(), meta.videos.len(), a.seed);
    for v in &meta.videos {
        match &v.anomaly {
            Some(iv) => println!(
                "  {}/{}: {} frames, {:?} anomaly at frames {}-{}",
                v.split,
                v.name,
                v.frames.len(),
                iv.kind,
                iv.start + 1,
                iv.end + 1
            ),
            None => println!("  {}/{}: {} frames", v.split, v.name, v.frames.len()),
        }
    }
    Ok(())
}

fn apply_train_overrides(cfg: &mut RunConfig, steps: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> Result<(), Error> {
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(b) = batch {
        cfg.train.batch_size = b;
    }
    if let Some(l) = lr {
        cfg.train.lr = l;
    }
    cfg.validate()
}

/// Trains into `out`, printing progress every `every` steps.
fn train_into(out: &Path, cfg: &RunConfig, videos: &[Video], resume: bool) -> Result<(Model, ParamStore<f32>), Error> {
    let total = cfg.train.steps;
    let every = (total / 20).max(1);
    let (model, state) = run_training(out, cfg, videos, resume, |step, l| {
        if step % every == 0 || step == total {
            println!(
                "step {step}/{total}  L_p {:.5}  L_c {:.5}  L_s {:.5}  total {:.5}",
                l.prediction,
                l.compactness_total(),
                l.sparsity_total(),
                l.total
            );
            let _ = std::io::stdout().flush();
        }
    })?;
    Ok((model, state.store))
}

fn train(a: TrainArgs, root: &Path, argv: &[String]) -> Outcome {
    let out = out_dir(a.out, root, "train");
    let mut cfg = run_config(&a.model)?;
    apply_train_overrides(&mut cfg, a.steps, a.batch_size, a.lr)?;
    let ablations = ablation_names(&cfg.model.ablation, &a.model.ablate);
    let (index, videos) = load_split(&a.data, Split::Training, cfg.model.image_size)?;
    print!("training split: {}", index.report());

    if a.resume && RunManifest::path(&out).exists() {
        let old = RunManifest::read(&out)?;
        let mut expect = old.config.clone();
        expect.train.steps = cfg.train.steps;
        if expect != cfg {
            return Err(Failure::Run(Error::Config(
                "--resume: configuration differs from the run manifest".into(),
            )));
        }
    } else if !a.resume {
        prepare_out(&out, a.force)?;
        let ck = out.join(mambavad::pipeline::CHECKPOINT_DIR);
        if ck.exists() {
            fs::remove_dir_all(&ck).map_err(|e| Error::file(&ck, e))?;
        }
        let last = out.join(mambavad::pipeline::LAST_CHECKPOINT);
        if last.exists() {
            fs::remove_file(&last).map_err(|e| Error::file(&last, e))?;
        }
    } else {
        fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
    }
    manifest(&cfg, &out, argv, ablations).write(&out)?;
    let (_, store) = train_into(&out, &cfg, &videos, a.resume)?;
    println!(
        "{} parameters; checkpoints in {}",
        count_parameters(&store),
        out.display()
    );
    Ok(())
}

fn write_scores(out: &Path, index_names: &[String], raw: &[RawScores], scores: &[Vec<f64>], curves: bool) -> Result<(), Error> {
    let sdir = out.join("scores");
    fs::create_dir_all(&sdir).map_err(|e| Error::file(&sdir, e))?;
    let cdir = out.join("curves");
    if curves {
        fs::create_dir_all(&cdir).map_err(|e| Error::file(&cdir, e))?;
    }
    for ((name, r), s) in index_names.iter().zip(raw).zip(scores) {
        let mut text = format!("{SCORE_CSV_HEADER}\n");
        for rec in records(r, s) {
            text += &score_csv_row(&rec);
            text.push('\n');
        }
        let p = sdir.join(format!("{name}.csv"));
        fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
        if curves {
            let normality: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
            let img = render::normality_curve(&normality, r.labels.as_deref())?;
            render::save_png(&img, &cdir.join(format!("{name}.png")))?;
        }
    }
    Ok(())
}

fn load_model(ckpt: Option<&Path>, m: &ModelArgs) -> Result<(Model, ParamStore<f32>, RunConfig), Error> {
    match ckpt {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let mut cfg = RunConfig::desk();
            if let Some(c) = &m.config {
                cfg = read_json(c)?;
            }
            cfg.model = ck.config.clone();
            let (model, store) = checkpoint::restore(&ck)?;
            Ok((model, store, cfg))
        }
        None => {
            let cfg = run_config(m)?;
            let (model, store) = Model::build::<f32>(&cfg.model)?;
            Ok((model, store, cfg))
        }
    }
}

fn eval(a: EvalArgs, root: &Path, argv: &[String]) -> Outcome {
    let out = out_dir(a.out, root, "eval");
    if a.ckpt.is_some() && (!a.model.ablate.is_empty() || a.model.seed.is_some()) {
        return Err(Failure::Usage("--ablate and --seed apply to --untrained only".into()));
    }
    let (mut model, store, mut cfg) = load_model(a.ckpt.as_deref(), &a.model)?;
    if let Some(k) = a.kpercent {
        model = with_k_percent(&model, k)?;
        cfg.model = model.config.clone();
    }
    if let Some(t) = a.tau {
        cfg.score.tau = t;
    }
    if let Some(s) = a.normalization {
        cfg.score.normalization = s.into();
    }
    cfg.validate()?;
    let sweep = match a.sweep.as_deref() {
        None => None,
        Some([p, r]) => {
            let param = SweepParam::from_str(p, true).map_err(|_| Failure::Usage(format!("unknown sweep parameter '{p}' (tau or k)")))?;
            Some((param, parse_range(r)?))
        }
        Some(_) => return Err(Failure::Usage("--sweep takes PARAM RANGE".into())),
    };
    prepare_out(&out, a.force)?;
    let (index, videos) = load_split(&a.data, Split::Testing, cfg.model.image_size)?;
    print!("test split: {}", index.report());
    let names: Vec<String> = index.videos.iter().map(|v| v.name.clone()).collect();

    let ablations = ablation_names(&cfg.model.ablation, &a.model.ablate);
    manifest(&cfg, &out, argv, ablations).write(&out)?;
    let (raw, _) = measure_videos(&model, &store, &videos, false)?;
    let (scores, auc) = score_and_auc(&raw, cfg.score.tau, cfg.score.normalization)?;
    write_scores(&out, &names, &raw, &scores, true)?;
    let report = serde_json::json!({
        "auc": auc,
        "tau": cfg.score.tau,
        "k_percent": cfg.model.k_percent,
        "normalization": cfg.score.normalization,
        "videos": videos.len(),
        "frames": raw.iter().map(|r| r.psnr.len()).sum::<usize>(),
    });
    let p = out.join("auc.json");
    fs::write(&p, serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n").map_err(|e| Error::file(&p, e))?;
    println!("frame-level AUC: {auc:.4} (tau {}, k {}%)", cfg.score.tau, cfg.model.k_percent);

    if let Some((param, grid)) = sweep {
        let (name, rows) = match param {
            SweepParam::Tau => ("tau", tau_sweep(&raw, &grid, cfg.score.normalization)?),
            SweepParam::K => (
                "k_percent",
                k_sweep(&model, &store, &videos, &grid, cfg.score.tau, cfg.score.normalization)?,
            ),
        };
        let mut text = format!("{name},auc\n");
        for (x, auc) in &rows {
            text += &format!("{x:.8e},{auc:.8e}\n");
            println!("  {name} = {x:.3}: AUC {auc:.4}");
        }
        let p = out.join(format!("sweep_{name}.csv"));
        fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
    }
    Ok(())
}

fn score(a: ScoreArgs, root: &Path, argv: &[String]) -> Outcome {
    let out = out_dir(a.out, root, "score");
    let ck = checkpoint::load(&a.ckpt)?;
    let mut cfg = RunConfig::desk();
    cfg.model = ck.config.clone();
    cfg.score.tau = a.tau;
    cfg.validate()?;
    let (model, store) = checkpoint::restore(&ck)?;
    let (video, paths) = load_frame_folder(&a.frames, cfg.model.image_size)?;
    let k = cfg.model.frames;
    if video.frames.len() < k + 1 {
        return Err(Failure::Run(Error::Data(format!(
            "{} holds {} frames; scoring needs at least {}",
            a.frames.display(),
            video.frames.len(),
            k + 1
        ))));
    }
    prepare_out(&out, a.force)?;
    manifest(&cfg, &out, argv, Vec::new()).write(&out)?;
    let (raw, measured) = measure_videos(&model, &store, std::slice::from_ref(&video), true)?;
    let scores = score_videos(&raw, cfg.score.tau, Normalization::PerVideo)?;
    let mut text = format!("{SCORE_CSV_HEADER}\n");
    for rec in records(&raw[0], &scores[0]) {
        text += &score_csv_row(&rec);
        text.push('\n');
    }
    let p = out.join("scores.csv");
    fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
    let normality: Vec<f64> = scores[0].iter().map(|s| 1.0 - s).collect();
    render::save_png(&render::normality_curve(&normality, None)?, &out.join("normality.png"))?;
    let edir = out.join("error_maps");
    fs::create_dir_all(&edir).map_err(|e| Error::file(&edir, e))?;
    for (frame, m) in raw[0].frames.iter().zip(&measured[0]) {
        write_error_map(&edir, &paths[*frame], m)?;
    }
    println!(
        "scored {} frames of {}; outputs in {}",
        scores[0].len(),
        a.frames.display(),
        out.display()
    );
    Ok(())
}

/// Error map at the source frame's own resolution.
fn write_error_map(dir: &Path, source: &Path, m: &Measurement) -> Result<(), Error> {
    let (pred, target) = (m.prediction.as_ref().expect("kept"), m.target.as_ref().expect("kept"));
    let mut img = render::error_map(pred, target)?;
    let (w, h) = image::image_dimensions(source).map_err(|e| Error::file(source, e))?;
    if (w, h) != img.dimensions() {
        img = image::imageops::resize(&img, w, h, image::imageops::FilterType::Triangle);
    }
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
    render::save_png(&img, &dir.join(format!("{stem}.png")))
}

fn ablate(a: AblateArgs, root: &Path, argv: &[String]) -> Outcome {
    let out = out_dir(a.out, root, "ablate");
    let mut base = run_config(&a.model)?;
    apply_train_overrides(&mut base, a.steps, a.batch_size, None)?;
    let mut variants = Vec::new();
    for v in &a.variants {
        let mut cfg = base.clone();
        if v != "full" {
            cfg.model.ablation.apply(v)?;
        }
        cfg.validate()?;
        variants.push((v.clone(), cfg));
    }
    prepare_out(&out, a.force)?;
    manifest(&base, &out, argv, a.model.ablate.clone()).write(&out)?;
    let (_, train_videos) = load_split(&a.data, Split::Training, base.model.image_size)?;
    let (index, test_videos) = load_split(&a.data, Split::Testing, base.model.image_size)?;
    let names: Vec<String> = index.videos.iter().map(|v| v.name.clone()).collect();
    let mut table = String::from("variant,parameters,auc\n");
    for (name, cfg) in &variants {
        println!("== {name}");
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        manifest(cfg, &dir, argv, vec![name.clone()]).write(&dir)?;
        let (model, store) = train_into(&dir, cfg, &train_videos, false)?;
        let (raw, _) = measure_videos(&model, &store, &test_videos, false)?;
        let (scores, auc) = score_and_auc(&raw, cfg.score.tau, cfg.score.normalization)?;
        write_scores(&dir, &names, &raw, &scores, false)?;
        println!("{name}: AUC {auc:.4}");
        table += &format!("{name},{},{auc:.8e}\n", count_parameters(&store));
    }
    let p = out.join("ablation.csv");
    fs::write(&p, table).map_err(|e| Error::file(&p, e))?;
    Ok(())
}

//! `stylenet`: synthesize data, train, evaluate, search, and inspect
//! style-based weather classifiers.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::warn;

use stylenet::data::synth::{generate, SynthConfig};
use stylenet::data::{load_dataset, load_dataset_resized, ppm, CLASS_NAMES};
use stylenet::interpret::{grad_cam, silhouette, tsne, write_projection, TsneOptions};
use stylenet::receptive_field::{parse_layers, render_machine, render_table};
use stylenet::search::{evolve, Genome, SearchConfig};
use stylenet::train::{checkpoint, evaluate, train_with, Control, EpochStats, TrainConfig};
use stylenet::{ArchConfig, Error, Result, Variant};

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "stylenet",
    version,
    about = "Style-based weather image classifiers"
)]
struct Cli {
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic four-class weather corpus as PPM files.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled directory.
    Eval(EvalArgs),
    /// Evolutionary search over truncation, learning rate and head shape.
    Search(SearchArgs),
    /// Receptive-field table and disjointness verdict for a layer list.
    Rf(RfArgs),
    /// Grad-CAM heatmap and overlay for one image.
    Gradcam(GradcamArgs),
    /// t-SNE projection of model embeddings.
    Project(ProjectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Text,
    Machine,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share one content layout per index across the four classes.
    #[arg(long)]
    paired: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// truncated-resnet, gram-attention or multi-patch.
    #[arg(long, value_parser = parse_variant)]
    arch: Variant,
    #[arg(long, default_value_t = 9)]
    truncation: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Share of the data held out for per-epoch validation.
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
    /// Share of the data held out for the final test report.
    #[arg(long, default_value_t = 0.15)]
    test_fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    report: Report,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    arch: Variant,
    #[arg(long, default_value_t = 8)]
    pop: usize,
    #[arg(long, default_value_t = 5)]
    gens: usize,
    #[arg(long, default_value_t = 3)]
    budget_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Truncation of the starting genome.
    #[arg(long, default_value_t = 9)]
    truncation: usize,
    /// Learning rate of the starting genome.
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Directory for the history and best genome.
    #[arg(long, default_value = "search-out")]
    out: PathBuf,
}

#[derive(Args)]
struct RfArgs {
    /// Layer list, one `k s [p]` or `k=.. s=.. p=..` per line.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    report: Report,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Conv layer to explain (default: last conv, or last conv per branch).
    #[arg(long)]
    layer: Option<String>,
    /// Class index or name.
    #[arg(long)]
    class: String,
    /// Heatmap PPM; the overlay goes next to it as `<stem>.overlay.ppm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output rows `x,y,label,path`.
    #[arg(long)]
    out: PathBuf,
}

/// Resolved flags (defaults included) of the chosen subcommand, in
/// declaration order.
fn resolved_flags(name: &str, m: &ArgMatches) -> Vec<(String, String)> {
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    sub.get_arguments()
        .filter_map(|arg| {
            let long = arg.get_long()?;
            if long == "manifest" {
                return None;
            }
            let raw = m.get_raw(arg.get_id().as_str())?;
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            Some((long.to_string(), vals.join(",")))
        })
        .collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn square_size(ds: &stylenet::data::Dataset) -> Result<usize> {
    match ds.image_size() {
        Some((h, w)) if h == w => Ok(h),
        Some((h, w)) => Err(Error::data(
            &ds.samples[0].path,
            format!("images must be square, got {h}x{w}"),
        )),
        None => Err(Error::config("dataset is empty")),
    }
}

fn run_synth(a: &SynthArgs, man: &mut RunManifest) -> Result<PathBuf> {
    let cfg = SynthConfig {
        per_class: a.per_class,
        size: a.size,
        seed: a.seed,
        paired: a.paired,
        ..Default::default()
    };
    let ds = generate(&cfg, &a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    man.artifacts.push(a.out.clone());
    Ok(with_suffix(&a.out, ".manifest"))
}

fn epoch_line(s: &EpochStats, total: usize) -> String {
    let mut line = format!(
        "epoch {}/{total} train_loss={:.5} train_accuracy={:.4}",
        s.epoch + 1,
        s.train_loss,
        s.train_accuracy
    );
    if let (Some(l), Some(acc)) = (s.val_loss, s.val_accuracy) {
        line += &format!(" val_loss={l:.5} val_accuracy={acc:.4}");
    }
    line
}

fn run_train(a: &TrainArgs, man: &mut RunManifest) -> Result<PathBuf> {
    let data = load_dataset(&a.data)?;
    let size = square_size(&data)?;
    let (train_set, val, test) = data.split(
        a.seed,
        1.0 - a.val_fraction - a.test_fraction,
        a.val_fraction,
    )?;
    let mut arch = ArchConfig::new(a.arch)
        .with_truncation(a.truncation)
        .with_seed(a.seed);
    arch.input_size = size;
    arch.num_classes = data.num_classes();
    let mut model = stylenet::Model::<f32>::build(&arch)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let val_ref = (!val.is_empty()).then_some(&val);
    let curves = train_with(&mut model, &train_set, val_ref, &tc, |s, _| {
        eprintln!("{}", epoch_line(s, a.epochs));
        Control::Continue
    })?;
    checkpoint::save(&model, &a.out)?;
    man.artifacts.push(a.out.clone());

    let curve_path = with_suffix(&a.out, ".curves.csv");
    let mut csv = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    for s in &curves {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        csv += &format!(
            "{},{:?},{:?},{},{}\n",
            s.epoch + 1,
            s.train_loss,
            s.train_accuracy,
            opt(s.val_loss),
            opt(s.val_accuracy)
        );
    }
    write_file(&curve_path, &csv)?;
    man.artifacts.push(curve_path);
    println!(
        "{} ({} parameters) trained on {} images, saved to {}",
        arch.variant,
        model.parameter_count(),
        train_set.len(),
        a.out.display()
    );
    if !test.is_empty() {
        println!("held-out test split ({} images):", test.len());
        print!("{}", evaluate(&model, &test)?.to_text());
    }
    Ok(with_suffix(&a.out, ".manifest"))
}

fn run_eval(a: &EvalArgs, _man: &mut RunManifest) -> Result<PathBuf> {
    let model = checkpoint::load(&a.model)?;
    let data = load_dataset_resized(&a.data, model.config().input_size)?;
    let report = evaluate(&model, &data)?;
    match a.report {
        Report::Text => print!("{}", report.to_text()),
        Report::Machine => print!("{}", report.to_machine()),
    }
    Ok(with_suffix(&a.model, ".eval.manifest"))
}

fn run_search(a: &SearchArgs, man: &mut RunManifest) -> Result<PathBuf> {
    let data = load_dataset(&a.data)?;
    let size = square_size(&data)?;
    let (train_set, val, _) = data.split(a.seed, 0.70, 0.15)?;
    let mut arch = ArchConfig::new(a.arch)
        .with_truncation(a.truncation)
        .with_seed(a.seed);
    arch.input_size = size;
    arch.num_classes = data.num_classes();
    let base = Genome::new(arch, a.lr, a.budget_epochs);
    let cfg = SearchConfig {
        population: a.pop,
        generations: a.gens,
        seed: a.seed,
        ..Default::default()
    };
    let result = evolve(&cfg, &base, &train_set, &val, a.batch)?;
    let history: String = result.history.iter().map(|h| format!("{h}\n")).collect();
    print!("{history}");
    println!("best {}", result.best.to_line());
    let hist_path = a.out.join("history.txt");
    let best_path = a.out.join("best.txt");
    write_file(&hist_path, &history)?;
    write_file(&best_path, &format!("{}\n", result.best.to_line()))?;
    man.artifacts.extend([hist_path, best_path]);
    Ok(a.out.join("manifest.txt"))
}

fn run_rf(a: &RfArgs, _man: &mut RunManifest) -> Result<PathBuf> {
    let text =
        std::fs::read_to_string(&a.config).map_err(|e| Error::data(&a.config, e.to_string()))?;
    let layers = parse_layers(&text)?;
    match a.report {
        Report::Text => print!("{}", render_table(&layers)?),
        Report::Machine => print!("{}", render_machine(&layers)?),
    }
    Ok(with_suffix(&a.config, ".rf.manifest"))
}

fn parse_class(s: &str, k: usize) -> Result<usize> {
    let idx = s
        .parse::<usize>()
        .ok()
        .or_else(|| CLASS_NAMES.iter().position(|&n| n == s))
        .ok_or_else(|| {
            Error::usage(format!(
                "unknown class `{s}` (use 0..{k} or one of {CLASS_NAMES:?})"
            ))
        })?;
    if idx >= k {
        return Err(Error::usage(format!(
            "class {idx} out of range for {k} classes"
        )));
    }
    Ok(idx)
}

fn run_gradcam(a: &GradcamArgs, man: &mut RunManifest) -> Result<PathBuf> {
    let model = checkpoint::load(&a.model)?;
    let size = model.config().input_size;
    let mut image = ppm::read(&a.image)?;
    if image.shape()[1..] != [size, size] {
        warn!("resizing {} to {size}x{size}", a.image.display());
        image = ppm::resize(&image, size, size)?;
    }
    let class = parse_class(&a.class, model.config().num_classes)?;
    let heat = grad_cam(&model, &image, a.layer.as_deref(), class)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    heat.write(&a.out)?;
    let overlay = a.out.with_extension("overlay.ppm");
    heat.write_overlay(&image, &overlay)?;
    println!(
        "class {class} from {}: heatmap {}, overlay {}",
        heat.layers.join(", "),
        a.out.display(),
        overlay.display()
    );
    man.artifacts.extend([a.out.clone(), overlay]);
    Ok(with_suffix(&a.out, ".manifest"))
}

fn run_project(a: &ProjectArgs, man: &mut RunManifest) -> Result<PathBuf> {
    let model = checkpoint::load(&a.model)?;
    let data = load_dataset_resized(&a.data, model.config().input_size)?;
    let vectors = data
        .samples
        .iter()
        .map(|s| Ok(model.embed(&s.image)?.iter().map(|&v| v as f64).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let opts = TsneOptions {
        perplexity: a.perplexity,
        iterations: a.iters,
        seed: a.seed,
        ..Default::default()
    };
    let proj = tsne(&vectors, &opts)?;
    let labels: Vec<String> = data
        .samples
        .iter()
        .map(|s| data.class_names[s.label].clone())
        .collect();
    let paths: Vec<String> = data
        .samples
        .iter()
        .map(|s| s.path.display().to_string())
        .collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_projection(&a.out, &proj, &labels, &paths)?;
    let pts: Vec<Vec<f64>> = proj.points.iter().map(|p| p.to_vec()).collect();
    let sil = silhouette(&pts, &data.labels())?;
    println!(
        "projected {} points: kl={:.4} perplexity={} silhouette={sil:.4}",
        pts.len(),
        proj.kl,
        proj.perplexity
    );
    man.artifacts.push(a.out.clone());
    Ok(with_suffix(&a.out, ".manifest"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Data { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
        Error::NumericOverflow { .. } | Error::Diverged { .. } => 3,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("STYLENET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::usage(format!("STYLENET_THREADS must be a count, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    configure_threads()?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let seed = match &cli.command {
        Command::Synth(a) => Some(a.seed),
        Command::Train(a) => Some(a.seed),
        Command::Search(a) => Some(a.seed),
        Command::Project(a) => Some(a.seed),
        _ => None,
    };
    let mut man = RunManifest::new(name, resolved_flags(name, sub), seed);
    let default_path = match &cli.command {
        Command::Synth(a) => run_synth(a, &mut man)?,
        Command::Train(a) => run_train(a, &mut man)?,
        Command::Eval(a) => run_eval(a, &mut man)?,
        Command::Search(a) => run_search(a, &mut man)?,
        Command::Rf(a) => run_rf(a, &mut man)?,
        Command::Gradcam(a) => run_gradcam(a, &mut man)?,
        Command::Project(a) => run_project(a, &mut man)?,
    };
    man.write(cli.manifest.as_deref().unwrap_or(&default_path))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

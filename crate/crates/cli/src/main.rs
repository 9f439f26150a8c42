use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adast::checkpoint::Checkpoint;
use adast::config::ExperimentConfig;
use adast::data::{generate_synthetic, Domain, DomainDataset};
use adast::experiment::{self, PreparedData, SeedResult, Summary};
use adast::metrics::{self, STAGE_NAMES};
use adast::train::TrainMode;
use adast::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "adast",
    version,
    about = "Adversarial domain adaptation for EEG sleep staging"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, for dump-embeddings).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single run seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated run seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    mode: Option<ModeArg>,
    /// Seeds trained concurrently.
    #[arg(long, global = true)]
    parallel_seeds: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adast,
    SourceOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target pair of epoch files.
    GenData(GenData),
    /// Train one configuration over all seeds.
    Train(DataFiles),
    /// Score a checkpoint on a labeled epoch file.
    Eval(Eval),
    /// Run the five ablation variants over all seeds.
    Ablation(DataFiles),
    /// Sweep lambda1 or lambda2 over the configured grid.
    Sweep(DataFiles),
    /// Write post-attention features of every record as CSV.
    DumpEmbeddings(Dump),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    epochs_per_subject: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    shift_scale: Option<f64>,
    #[arg(long)]
    shift_freq: Option<f64>,
    #[arg(long)]
    shift_noise: Option<f64>,
    #[arg(long)]
    resample: Option<f64>,
}

#[derive(Args)]
struct DataFiles {
    /// Source epoch file; synthetic data is generated when omitted.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled epoch file.
    #[arg(long)]
    data: PathBuf,
    /// Domain of the data, which selects the attention path.
    #[arg(long, default_value = "target")]
    domain: DomainArg,
}

#[derive(Args)]
struct Dump {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::Format { .. }
        | Error::Io { .. }
        | Error::Split(_)
        | Error::Unlabeled(_)
        | Error::Compatibility { .. }
        | Error::Label { .. }
        | Error::EmptyEvaluation => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut sets = Vec::new();
    if let Some(out) = &g.out {
        sets.push(format!("run.out={}", out.display()));
    }
    if let Some(s) = g.seed {
        sets.push(format!("run.seeds={s}"));
    }
    if let Some(s) = &g.seeds {
        let list: Vec<String> = s.iter().map(u64::to_string).collect();
        sets.push(format!("run.seeds={}", list.join(",")));
    }
    if let Some(m) = g.mode {
        let mode = match m {
            ModeArg::Adast => TrainMode::Adast,
            ModeArg::SourceOnly => TrainMode::SourceOnly,
        };
        sets.push(format!("train.mode={}", mode.name()));
    }
    if let Some(n) = g.parallel_seeds {
        sets.push(format!("run.parallel_seeds={n}"));
    }
    sets.extend(g.overrides.iter().cloned());
    cfg.apply_overrides(&sets)?;
    Ok(cfg)
}

fn with_files(mut cfg: ExperimentConfig, files: &DataFiles) -> Result<ExperimentConfig> {
    if let (Some(s), Some(t)) = (&files.source, &files.target) {
        cfg.data.source = Some(s.clone());
        cfg.data.target = Some(t.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, &a),
        Command::Train(f) => train(with_files(cfg, &f)?),
        Command::Eval(a) => eval(&a),
        Command::Ablation(f) => ablation(with_files(cfg, &f)?),
        Command::Sweep(f) => sweep(with_files(cfg, &f)?),
        Command::DumpEmbeddings(a) => dump(&cli.global, &a),
    }
}

fn describe(name: &str, ds: &DomainDataset) -> String {
    let hist = ds.class_histogram();
    let parts: Vec<String> = hist
        .iter()
        .enumerate()
        .map(|(c, n)| format!("{}={n}", STAGE_NAMES.get(c).copied().unwrap_or("?")))
        .collect();
    format!(
        "{name}: n={} T={} K={} subjects={} classes [{}]",
        ds.len(),
        ds.epoch_len,
        ds.n_classes,
        ds.subjects().len(),
        parts.join(" ")
    )
}

fn gen_data(mut cfg: ExperimentConfig, a: &GenData) -> Result<()> {
    let syn = &mut cfg.data.synthetic;
    if let Some(s) = cli_seed(&cfg.seeds) {
        syn.seed = s;
    }
    let syn = &mut cfg.data.synthetic;
    if let Some(v) = a.subjects {
        syn.n_subjects = v;
    }
    if let Some(v) = a.epochs_per_subject {
        syn.epochs_per_subject = v;
    }
    if let Some(v) = a.t {
        syn.epoch_len = v;
    }
    if let Some(v) = a.shift_scale {
        syn.amplitude_scale = v;
    }
    if let Some(v) = a.shift_freq {
        syn.frequency_offset_hz = v;
    }
    if let Some(v) = a.shift_noise {
        syn.noise_sigma = v;
    }
    if let Some(v) = a.resample {
        syn.resample_factor = v;
    }
    syn.validate()
        .map_err(|e| Error::Config(vec![e.to_string()]))?;
    let out = &cfg.out;
    experiment::create_dir(out)?;
    for (domain, file) in [
        (Domain::Source, "source.adst"),
        (Domain::Target, "target.adst"),
    ] {
        let ds = generate_synthetic(&cfg.data.synthetic, domain)?;
        let path = out.join(file);
        ds.save(&path)?;
        println!("{}", describe(&path.display().to_string(), &ds));
    }
    Ok(())
}

/// `--seed` doubles as the generator seed for gen-data.
fn cli_seed(seeds: &[u64]) -> Option<u64> {
    match seeds {
        [s] => Some(*s),
        _ => None,
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    experiment::write_config(&cfg.out, cfg)?;
    let data = PreparedData::from_config(cfg)?;
    println!("{}", describe("source", &data.source));
    println!("{}", describe("target", &data.target));
    Ok(data)
}

fn write_results(dir: &Path, results: &[SeedResult]) -> Result<()> {
    for r in results {
        experiment::write_seed(dir, r)?;
        println!(
            "seed {}: target ACC {:.4} MF1 {:.4}  source ACC {:.4}",
            r.seed, r.target_test.acc, r.target_test.mf1, r.source_test.acc
        );
    }
    Ok(())
}

fn train(cfg: ExperimentConfig) -> Result<()> {
    let data = prepare(&cfg)?;
    let results = experiment::run_training(&cfg, &data)?;
    write_results(&cfg.out, &results)?;
    let summary = Summary::of(cfg.train.mode.name(), &results);
    experiment::write_summaries(&cfg.out, std::slice::from_ref(&summary))?;
    println!("{}", summary.text());
    Ok(())
}

fn ablation(cfg: ExperimentConfig) -> Result<()> {
    let data = prepare(&cfg)?;
    let rows = experiment::run_ablation_study(&cfg, &data)?;
    let mut summaries = Vec::new();
    for (toggles, results) in &rows {
        let label = toggles.label();
        write_results(&cfg.out.join(&label), results)?;
        let s = Summary::of(label, results);
        println!("{}", s.text());
        summaries.push(s);
    }
    experiment::write_summaries(&cfg.out, &summaries)
}

fn sweep(cfg: ExperimentConfig) -> Result<()> {
    let data = prepare(&cfg)?;
    let points = experiment::run_sweep(&cfg, &data)?;
    let csv = experiment::sweep_csv(cfg.sweep_param, &points);
    let path = cfg.out.join("sweep.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::Io { path, source: e })?;
    print!("{csv}");
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let ds = DomainDataset::load(&a.data)?;
    if ds.epoch_len != ck.model.arch().epoch_len {
        return Err(Error::Compatibility {
            what: "dataset",
            msg: format!(
                "T={} but checkpoint expects {}",
                ds.epoch_len,
                ck.model.arch().epoch_len
            ),
        });
    }
    let split = adast::data::LabeledSplit::from_all(&ds)?;
    let route = match Domain::from(a.domain) {
        Domain::Source => Domain::Source,
        Domain::Target => ck.target_route,
    };
    let ev = metrics::evaluate(&mut ck.model, &split, route)?;
    print!("{}", ev.confusion.report(&STAGE_NAMES)?);
    Ok(())
}

fn dump(g: &Global, a: &Dump) -> Result<()> {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let mut sets = Vec::new();
    if let Some(p) = &a.source {
        sets.push((Domain::Source, DomainDataset::load(p)?));
    }
    if let Some(p) = &a.target {
        sets.push((Domain::Target, DomainDataset::load(p)?));
    }
    if sets.is_empty() {
        return Err(Error::Config(vec![
            "dump-embeddings needs --source and/or --target".into(),
        ]));
    }
    let refs: Vec<(Domain, &DomainDataset)> = sets.iter().map(|(d, ds)| (*d, ds)).collect();
    let csv = experiment::embeddings_csv(&mut ck, &refs)?;
    match &g.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        }),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

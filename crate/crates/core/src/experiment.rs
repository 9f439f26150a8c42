//! Multi-seed experiments and their on-disk outputs.
//!
//! Ablation variants that share an architecture, and λ1 sweep points,
//! differ only after pretraining, so each seed pretrains once per
//! architecture and forks the trainer. The forks are bit-identical to
//! independent runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, SweepParam};
use crate::data::{generate_synthetic, Domain, DomainDataset, LabeledSplit, Split, UnlabeledSplit};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{Evaluation, STAGE_NAMES};
use crate::nn::Mode;
use crate::tensor::Tape;
use crate::train::{
    AblationToggles, EpochMetrics, RunOutput, TrainConfig, TrainData, TrainMode, Trainer,
};

/// Source and target datasets with subject splits assigned.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub source: DomainDataset,
    pub target: DomainDataset,
}

impl PreparedData {
    pub fn new(
        source: DomainDataset,
        target: DomainDataset,
        split: [f64; 3],
        split_seed: u64,
    ) -> Result<Self> {
        if source.epoch_len != target.epoch_len || source.n_classes != target.n_classes {
            return Err(Error::Compatibility {
                what: "datasets",
                msg: format!(
                    "source has T={} K={}, target T={} K={}",
                    source.epoch_len, source.n_classes, target.epoch_len, target.n_classes
                ),
            });
        }
        Ok(Self {
            source: source.with_subject_split(split, split_seed)?,
            target: target.with_subject_split(split, split_seed)?,
        })
    }

    /// Loads the configured epoch files, or generates the synthetic pair.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (source, target) = match (&cfg.data.source, &cfg.data.target) {
            (Some(s), Some(t)) => (DomainDataset::load(s)?, DomainDataset::load(t)?),
            _ => (
                generate_synthetic(&cfg.data.synthetic, Domain::Source)?,
                generate_synthetic(&cfg.data.synthetic, Domain::Target)?,
            ),
        };
        Self::new(source, target, cfg.data.split, cfg.data.split_seed)
    }

    pub fn epoch_len(&self) -> usize {
        self.source.epoch_len
    }

    /// Training inputs. Target training records are stripped of labels
    /// before the split is built.
    pub fn train_data(&self) -> Result<TrainData> {
        Ok(TrainData {
            source_train: LabeledSplit::from_dataset(&self.source, Split::Train)?,
            target_train: UnlabeledSplit::from_dataset(
                &self.target.without_labels(),
                Split::Train,
            )?,
            target_val: LabeledSplit::from_dataset(&self.target, Split::Val)?,
        })
    }

    pub fn test_split(&self, domain: Domain) -> Result<LabeledSplit> {
        match domain {
            Domain::Source => LabeledSplit::from_dataset(&self.source, Split::Test),
            Domain::Target => LabeledSplit::from_dataset(&self.target, Split::Test),
        }
    }
}

/// One seed's trained model and held-out scores.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub run: RunOutput,
    pub target_test: Evaluation,
    pub source_test: Evaluation,
}

impl SeedResult {
    fn score(seed: u64, mut run: RunOutput, data: &PreparedData) -> Result<Self> {
        let target_test = crate::train::evaluate_run(
            &mut run,
            &data.test_split(Domain::Target)?,
            Domain::Target,
        )?;
        let source_test = crate::train::evaluate_run(
            &mut run,
            &data.test_split(Domain::Source)?,
            Domain::Source,
        )?;
        Ok(Self {
            seed,
            run,
            target_test,
            source_test,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.run.model.clone(), self.run.mode.target_route())
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Target-test accuracy and macro-F1 over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub label: String,
    pub n: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub mf1_mean: f64,
    pub mf1_std: f64,
}

impl Summary {
    pub const CSV_HEADER: &'static str = "label,n,acc_mean,acc_std,mf1_mean,mf1_std";

    pub fn of(label: impl Into<String>, results: &[SeedResult]) -> Self {
        let acc: Vec<f64> = results.iter().map(|r| r.target_test.acc).collect();
        let mf1: Vec<f64> = results.iter().map(|r| r.target_test.mf1).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (mf1_mean, mf1_std) = mean_std(&mf1);
        Self {
            label: label.into(),
            n: results.len(),
            acc_mean,
            acc_std,
            mf1_mean,
            mf1_std,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.label, self.n, self.acc_mean, self.acc_std, self.mf1_mean, self.mf1_std
        )
    }

    /// `label: ACC 74.00 ± 1.23  MF1 60.39 ± 0.85` in percent.
    pub fn text(&self) -> String {
        format!(
            "{}: ACC {:.2} ± {:.2}  MF1 {:.2} ± {:.2}  (n={})",
            self.label,
            100.0 * self.acc_mean,
            100.0 * self.acc_std,
            100.0 * self.mf1_mean,
            100.0 * self.mf1_std,
            self.n
        )
    }
}

/// Training configuration for one seed.
pub fn seed_config(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.arch.epoch_len = data.epoch_len();
    t.arch.n_classes = data.source.n_classes;
    t.seed = seed;
    t
}

/// Applies `job` to every seed, `workers` seeds at a time. Results are in
/// seed order regardless of `workers`.
pub fn for_each_seed<T: Send>(
    seeds: &[u64],
    workers: usize,
    job: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers.max(1)) {
        let results: Vec<Result<T>> = if chunk.len() == 1 {
            vec![job(chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&seed| {
                        let job = &job;
                        s.spawn(move || job(seed))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("seed worker panicked"))
                    .collect()
            })
        };
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Trains with the configured mode and toggles, one run per seed.
pub fn run_training(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<SeedResult>> {
    cfg.validate()?;
    let train = data.train_data()?;
    for_each_seed(&cfg.seeds, cfg.parallel_seeds, |seed| {
        let tc = seed_config(cfg, data, seed);
        let run = match tc.mode {
            TrainMode::Adast => crate::train::run_adast(&tc, &train)?,
            TrainMode::SourceOnly => crate::train::run_source_only(&tc, &train)?,
        };
        SeedResult::score(seed, run, data)
    })
}

/// Runs `variants` for one configuration, pretraining once per
/// architecture. Outputs follow the order of `variants`.
pub fn run_variants(
    base: &TrainConfig,
    train: &TrainData,
    variants: &[AblationToggles],
) -> Result<Vec<RunOutput>> {
    let mut out: Vec<Option<RunOutput>> = vec![None; variants.len()];
    for (i, v) in variants.iter().enumerate() {
        if out[i].is_some() {
            continue;
        }
        let same_arch: Vec<usize> = (i..variants.len())
            .filter(|&j| {
                variants[j].use_attention == v.use_attention
                    && variants[j].use_dual_classifiers == v.use_dual_classifiers
            })
            .collect();
        let mut trainer = Trainer::new(TrainConfig {
            toggles: AblationToggles {
                use_self_training: true,
                ..*v
            },
            ..base.clone()
        })?;
        trainer.pretrain(train)?;
        let (without, with): (Vec<usize>, Vec<usize>) = same_arch
            .into_iter()
            .partition(|&j| !variants[j].use_self_training);
        for j in without {
            let mut fork = trainer.clone();
            fork.config.toggles = variants[j];
            out[j] = Some(fork.finish());
        }
        if !with.is_empty() {
            trainer.self_train(train)?;
            let finished = trainer.finish();
            for j in with {
                let mut run = finished.clone();
                run.model.params.zero_all_grads();
                out[j] = Some(run);
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|r| r.expect("every variant assigned"))
        .collect())
}

/// The five ablation rows, per seed. Outer index: variant; inner: seed.
pub fn run_ablation_study(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<Vec<(AblationToggles, Vec<SeedResult>)>> {
    cfg.validate()?;
    let train = data.train_data()?;
    let variants = AblationToggles::STUDY;
    let per_seed = for_each_seed(&cfg.seeds, cfg.parallel_seeds, |seed| {
        let tc = TrainConfig {
            mode: TrainMode::Adast,
            ..seed_config(cfg, data, seed)
        };
        run_variants(&tc, &train, &variants)?
            .into_iter()
            .map(|run| SeedResult::score(seed, run, data))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, &toggles)| {
            (
                toggles,
                per_seed.iter().map(|runs| runs[v].clone()).collect(),
            )
        })
        .collect())
}

/// One grid point of a sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub results: Vec<SeedResult>,
}

/// Runs one seed over the whole grid. A λ1 sweep shares pretraining,
/// which never uses λ1.
pub fn sweep_seed(
    base: &TrainConfig,
    train: &TrainData,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<RunOutput>> {
    let with = |v: f64| {
        let mut c = base.clone();
        match param {
            SweepParam::Lambda1 => c.weights.lambda1 = v,
            SweepParam::Lambda2 => c.weights.lambda2 = v,
        }
        c
    };
    match param {
        SweepParam::Lambda1 => {
            let mut pre = Trainer::new(base.clone())?;
            pre.pretrain(train)?;
            grid.iter()
                .map(|&v| {
                    let mut t = pre.clone();
                    t.config = with(v);
                    t.self_train(train)?;
                    Ok(t.finish())
                })
                .collect()
        }
        SweepParam::Lambda2 => grid
            .iter()
            .map(|&v| crate::train::run_adast(&with(v), train))
            .collect(),
    }
}

pub fn run_sweep(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let train = data.train_data()?;
    let per_seed = for_each_seed(&cfg.seeds, cfg.parallel_seeds, |seed| {
        let tc = TrainConfig {
            mode: TrainMode::Adast,
            ..seed_config(cfg, data, seed)
        };
        sweep_seed(&tc, &train, cfg.sweep_param, &cfg.sweep_grid)?
            .into_iter()
            .map(|run| SeedResult::score(seed, run, data))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(cfg
        .sweep_grid
        .iter()
        .enumerate()
        .map(|(i, &value)| SweepPoint {
            value,
            results: per_seed.iter().map(|r| r[i].clone()).collect(),
        })
        .collect())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{}\n", EpochMetrics::CSV_HEADER);
    for h in history {
        writeln!(s, "{}", h.csv_row()).unwrap();
    }
    s
}

pub fn losses_csv(losses: &[LossReport]) -> String {
    let mut s = format!("{}\n", LossReport::CSV_HEADER);
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{}", l.csv_row(i)).unwrap();
    }
    s
}

fn confusion_csv(ev: &Evaluation) -> String {
    let k = ev.confusion.n_classes();
    let mut s = String::from("true\\pred");
    for c in 0..k {
        write!(s, ",{}", STAGE_NAMES.get(c).copied().unwrap_or("?")).unwrap();
    }
    s.push('\n');
    for (c, row) in ev.confusion.counts().iter().enumerate() {
        write!(s, "{}", STAGE_NAMES.get(c).copied().unwrap_or("?")).unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `dir/seed-<seed>/` with the metrics history, loss history,
/// best checkpoint and held-out scores.
pub fn write_seed(dir: &Path, r: &SeedResult) -> Result<()> {
    let d = dir.join(format!("seed-{}", r.seed));
    create_dir(&d)?;
    write(&d.join("history.csv"), &history_csv(&r.run.history))?;
    write(&d.join("losses.csv"), &losses_csv(&r.run.losses))?;
    r.checkpoint().save(d.join("checkpoint.bin"))?;
    write(
        &d.join("target_test.csv"),
        &r.target_test.confusion.to_csv()?,
    )?;
    write(
        &d.join("target_confusion.csv"),
        &confusion_csv(&r.target_test),
    )?;
    write(
        &d.join("source_test.csv"),
        &r.source_test.confusion.to_csv()?,
    )?;
    let mut report = format!(
        "seed {}\nbest epoch {} (target val acc {:.4})\n\ntarget test\n",
        r.seed, r.run.best_epoch, r.run.best_val_acc
    );
    report.push_str(&r.target_test.confusion.report(&STAGE_NAMES)?);
    report.push_str("\nsource test\n");
    report.push_str(&r.source_test.confusion.report(&STAGE_NAMES)?);
    write(&d.join("report.txt"), &report)
}

/// Writes `summary.csv` and `summary.txt` for the given rows.
pub fn write_summaries(dir: &Path, rows: &[Summary]) -> Result<()> {
    let mut csv = format!("{}\n", Summary::CSV_HEADER);
    let mut txt = String::new();
    for r in rows {
        writeln!(csv, "{}", r.csv_row()).unwrap();
        writeln!(txt, "{}", r.text()).unwrap();
    }
    write(&dir.join("summary.csv"), &csv)?;
    write(&dir.join("summary.txt"), &txt)
}

/// `<param>,acc_mean,acc_std,mf1_mean,mf1_std`, one row per grid point.
pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut s = format!("{},n,acc_mean,acc_std,mf1_mean,mf1_std\n", param.name());
    for p in points {
        let sm = Summary::of("", &p.results);
        writeln!(
            s,
            "{},{},{},{},{},{}",
            p.value, sm.n, sm.acc_mean, sm.acc_std, sm.mf1_mean, sm.mf1_std
        )
        .unwrap();
    }
    s
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("config.kv"), &cfg.to_kv_string())
}

/// CSV of post-attention features: `domain,subject,label,pred,f0,…`. The
/// label column is empty for unlabeled records.
pub fn embeddings_csv(ck: &mut Checkpoint, sets: &[(Domain, &DomainDataset)]) -> Result<String> {
    let arch = ck.model.arch().clone();
    let (d, l) = ck.model.feature_shape();
    let mut s = String::from("domain,subject,label,pred");
    for i in 0..d * l {
        write!(s, ",f{i}").unwrap();
    }
    s.push('\n');
    for &(domain, ds) in sets {
        if ds.epoch_len != arch.epoch_len || ds.n_classes != arch.n_classes {
            return Err(Error::Compatibility {
                what: "dataset",
                msg: format!(
                    "{domain} data has T={} K={}, checkpoint expects T={} K={}",
                    ds.epoch_len, ds.n_classes, arch.epoch_len, arch.n_classes
                ),
            });
        }
        let route = match domain {
            Domain::Source => Domain::Source,
            Domain::Target => ck.target_route,
        };
        let mut row = 0;
        for x in ds.signal_batches(256) {
            let tape = Tape::new();
            let out = ck.model.forward(tape.var(&x), route, Mode::Eval)?;
            let feats = out.features.value();
            let preds = out.probs.argmax(1)?;
            for (b, pred) in preds.into_iter().enumerate() {
                let rec = &ds.records[row];
                let label = rec.stage.map_or_else(String::new, |v| v.to_string());
                write!(s, "{domain},{},{label},{pred}", rec.subject_id).unwrap();
                for v in &feats[b * d * l..(b + 1) * d * l] {
                    write!(s, ",{v}").unwrap();
                }
                s.push('\n');
                row += 1;
            }
        }
    }
    Ok(s)
}

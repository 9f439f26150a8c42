//! Training procedure.
//!
//! Every step makes two sequential updates:
//!
//! 1. the discriminator alone, on detached features, with its own Adam;
//! 2. extractor, attentions and classifiers on
//!    `l_adv + l_cls_s + λ1·l_cls_t + λ2·reg` with a second Adam.
//!
//! A run first trains without the pseudo-label term, then performs `r`
//! rounds of self-training: freeze the model, label the whole target
//! training split with the averaged classifiers, train with those labels.
//! The returned model is the checkpoint with the best target-validation
//! accuracy.

use crate::data::{Batch, Domain, LabeledSplit, UnlabeledSplit};
use crate::error::{Error, Result};
use crate::losses::{self, Components, LossReport, LossWeights};
use crate::metrics::{self, Evaluation};
use crate::model::{AdastModel, ArchConfig};
use crate::nn::{Group, Mode, ParamStore};
use crate::optim::{Adam, AdamConfig, StepSchedule};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainSchedule {
    /// Epochs before the first pseudo-labels exist.
    pub pretrain_epochs: usize,
    pub epochs_per_round: usize,
    pub self_train_rounds: usize,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 15,
            epochs_per_round: 10,
            self_train_rounds: 2,
            batch_size: 32,
        }
    }
}

impl TrainSchedule {
    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.self_train_rounds * self.epochs_per_round
    }
}

/// Component switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationToggles {
    pub use_attention: bool,
    pub use_dual_classifiers: bool,
    pub use_self_training: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationToggles {
    pub const FULL: Self = Self {
        use_attention: true,
        use_dual_classifiers: true,
        use_self_training: true,
    };

    /// The five configurations compared in the ablation study, in order:
    /// none, ATT, ATT+DC, ATT+ST, ATT+DC+ST.
    pub const STUDY: [Self; 5] = [
        Self::new(false, false, false),
        Self::new(true, false, false),
        Self::new(true, true, false),
        Self::new(true, false, true),
        Self::FULL,
    ];

    pub const fn new(
        use_attention: bool,
        use_dual_classifiers: bool,
        use_self_training: bool,
    ) -> Self {
        Self {
            use_attention,
            use_dual_classifiers,
            use_self_training,
        }
    }

    /// Short label such as `ATT+DC` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.use_attention, "ATT"),
            (self.use_dual_classifiers, "DC"),
            (self.use_self_training, "ST"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Adast,
    /// Source classification loss only; target data is routed through the
    /// source attention at evaluation.
    SourceOnly,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Adast => "adast",
            TrainMode::SourceOnly => "source-only",
        }
    }

    /// Attention path used for target-domain evaluation.
    pub fn target_route(&self) -> Domain {
        match self {
            TrainMode::Adast => Domain::Target,
            TrainMode::SourceOnly => Domain::Source,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub lr_schedule: StepSchedule,
    pub schedule: TrainSchedule,
    pub toggles: AblationToggles,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lr_schedule: StepSchedule::default(),
            schedule: TrainSchedule::default(),
            toggles: AblationToggles::FULL,
            mode: TrainMode::Adast,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Architecture with the ablation switches applied.
    pub fn effective_arch(&self) -> ArchConfig {
        ArchConfig {
            use_attention: self.toggles.use_attention,
            dual_classifiers: self.toggles.use_dual_classifiers,
            ..self.arch.clone()
        }
    }

    pub fn effective_rounds(&self) -> usize {
        if self.toggles.use_self_training && self.mode == TrainMode::Adast {
            self.schedule.self_train_rounds
        } else {
            0
        }
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.arch.feature_shape() {
            p.push(format!("arch: {e}"));
        }
        if self.schedule.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if self.schedule.total_epochs() == 0 {
            p.push("training needs at least one epoch".into());
        }
        for (name, v) in [
            ("loss.lambda1", self.weights.lambda1),
            ("loss.lambda2", self.weights.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let a = &self.adam;
        if !(self.lr_schedule.base_lr > 0.0) {
            p.push("optim.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            p.push("optim.beta1 and optim.beta2 must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            p.push("optim.eps must be positive and optim.weight_decay non-negative".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Data visible to training. Target training data carries no labels;
/// the labeled target validation split is used only for checkpoint
/// selection.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source_train: LabeledSplit,
    pub target_train: UnlabeledSplit,
    pub target_val: LabeledSplit,
}

impl TrainData {
    fn check(&self, arch: &ArchConfig) -> Result<()> {
        if self.source_train.is_empty()
            || self.target_train.is_empty()
            || self.target_val.is_empty()
        {
            return Err(Error::Config(vec![
                "source train, target train and target val splits must be non-empty".into(),
            ]));
        }
        for (what, t) in [
            ("source train", self.source_train.epoch_len()),
            ("target train", self.target_train.epoch_len()),
            ("target val", self.target_val.epoch_len()),
        ] {
            if t != arch.epoch_len {
                return Err(Error::Compatibility {
                    what: "epoch length",
                    msg: format!("{what} has T={t}, model expects {}", arch.epoch_len),
                });
            }
        }
        if self.source_train.n_classes() != arch.n_classes {
            return Err(Error::Compatibility {
                what: "class count",
                msg: format!(
                    "data has {} classes, model {}",
                    self.source_train.n_classes(),
                    arch.n_classes
                ),
            });
        }
        Ok(())
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub acc: f64,
    pub mf1: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,split,acc,mf1";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.split, self.acc, self.mf1)
    }
}

/// Which half of a training step just finished.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStep {
    Discriminator,
    Main,
}

/// Pseudo-labels frozen for one self-training round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub round: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: AdastModel,
    opt_disc: Adam,
    opt_main: Adam,
    epoch: usize,
    step: usize,
    losses: Vec<LossReport>,
    history: Vec<EpochMetrics>,
    pseudo: Option<PseudoLabels>,
    best: Option<(f64, usize, ParamStore)>,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Parameters from the epoch with the best target-validation accuracy.
    pub model: AdastModel,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub history: Vec<EpochMetrics>,
    pub losses: Vec<LossReport>,
    pub mode: TrainMode,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = AdastModel::new(config.effective_arch(), config.seed)?;
        let disc = model.param_ids(&[Group::Discriminator]);
        // Source-only training never touches the target attention.
        let mut main_groups = vec![
            Group::Extractor,
            Group::AttentionSource,
            Group::Classifier1,
            Group::Classifier2,
        ];
        if config.mode == TrainMode::Adast {
            main_groups.push(Group::AttentionTarget);
        }
        let main = model.param_ids(&main_groups);
        let opt_disc = Adam::new(&model.params, disc, config.adam);
        let opt_main = Adam::new(&model.params, main, config.adam);
        Ok(Self {
            config,
            model,
            opt_disc,
            opt_main,
            epoch: 0,
            step: 0,
            losses: Vec::new(),
            history: Vec::new(),
            pseudo: None,
            best: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn losses(&self) -> &[LossReport] {
        &self.losses
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// The pseudo-labels of the current round, if one is active.
    pub fn pseudo_labels(&self) -> Option<&PseudoLabels> {
        self.pseudo.as_ref()
    }

    pub fn discriminator_optimizer(&self) -> &Adam {
        &self.opt_disc
    }

    pub fn main_optimizer(&self) -> &Adam {
        &self.opt_main
    }

    fn adversarial(&self) -> bool {
        self.config.mode == TrainMode::Adast
    }

    pub fn train_step(
        &mut self,
        src: &Batch,
        trg: &Batch,
        pseudo: Option<&[usize]>,
    ) -> Result<LossReport> {
        self.train_step_observed(src, trg, pseudo, &mut |_, _| {})
    }

    /// [`Trainer::train_step`] with a callback after each of the two updates.
    pub fn train_step_observed(
        &mut self,
        src: &Batch,
        trg: &Batch,
        pseudo: Option<&[usize]>,
        observe: &mut dyn FnMut(SubStep, &ParamStore),
    ) -> Result<LossReport> {
        let labels = src
            .labels
            .as_deref()
            .ok_or_else(|| Error::Unlabeled("source batch".into()))?;
        if let Some(p) = pseudo {
            if p.len() != trg.positions.len() {
                return Err(Error::shape(
                    "pseudo labels",
                    &[p.len()],
                    &[trg.positions.len()],
                ));
            }
        }
        let step = self.step;
        let fail = |e: Error| match e {
            Error::Numeric { what, msg } => Error::Numeric {
                what: format!("{what} at step {step}"),
                msg,
            },
            other => other,
        };

        let tape = Tape::new();
        let xs = tape.var(&src.signals);
        let fs = {
            let f = self.model.extract(xs, Mode::Train)?;
            self.model.attend(f, Domain::Source)?
        };
        let mut report = LossReport::default();

        let mut l_adv = None;
        let mut ft = None;
        if self.adversarial() {
            let xt = tape.var(&trg.signals);
            let f = self.model.extract(xt, Mode::Train)?;
            let target_features = self.model.attend(f, Domain::Target)?;
            ft = Some(target_features);

            let dtape = Tape::new();
            let fs_c = dtape.var(&fs.to_tensor());
            let ft_c = dtape.var(&target_features.to_tensor());
            let l_d = losses::discriminator_loss(
                self.model.discriminate(fs_c)?,
                self.model.discriminate(ft_c)?,
            )
            .map_err(fail)?;
            report.l_d = finite("l_d", l_d.item()).map_err(fail)?;
            self.opt_disc.zero_grads(&mut self.model.params);
            l_d.backward()?;
            self.model.params.absorb_grads(&dtape);
            self.opt_disc.step(&mut self.model.params).map_err(fail)?;
            observe(SubStep::Discriminator, &self.model.params);

            let d_src = self.model.discriminate(fs)?;
            let d_trg = self.model.discriminate(target_features)?;
            l_adv = Some(losses::adversarial_loss(d_src, d_trg).map_err(fail)?);
        }

        let p_s = self.model.classify(fs)?;
        let l_cls_s = losses::source_cls_loss(p_s, labels)?;
        let l_cls_t = match (pseudo, ft) {
            (Some(p), Some(ft)) => Some(losses::target_cls_loss(self.model.classify(ft)?, p)?),
            _ => None,
        };
        let reg = if self.adversarial() {
            match self.model.classifier_param_vectors(&tape)? {
                Some((a, b)) => Some(losses::classifier_regularizer(a, b)?),
                None => None,
            }
        } else {
            None
        };
        let comps = Components {
            l_adv,
            l_cls_s,
            l_cls_t,
            reg,
        };
        let total = losses::overall_loss(&comps, self.config.weights).map_err(fail)?;
        report.l_adv = l_adv.map_or(0.0, |v| v.item());
        report.l_cls_s = l_cls_s.item();
        report.l_cls_t = l_cls_t.map_or(0.0, |v| v.item());
        report.reg = reg.map_or(0.0, |v| v.item());
        report.l_overall = finite("l_overall", total.item()).map_err(fail)?;

        self.opt_main.zero_grads(&mut self.model.params);
        total.backward()?;
        self.model.params.absorb_grads(&tape);
        self.opt_main.step(&mut self.model.params).map_err(fail)?;
        observe(SubStep::Main, &self.model.params);

        self.step += 1;
        self.losses.push(report);
        Ok(report)
    }

    /// One pass over the source training split, cycling target batches (or
    /// the reverse when the target split is longer).
    pub fn train_epoch(&mut self, data: &TrainData, pseudo: Option<&PseudoLabels>) -> Result<()> {
        let lr = self.config.lr_schedule.lr(self.epoch);
        self.opt_disc.set_lr(lr);
        self.opt_main.set_lr(lr);
        let bs = self.config.schedule.batch_size;
        let seed = self.config.seed;
        let src = data.source_train.batches(bs, stream(seed, 1), self.epoch);
        let trg = if self.adversarial() {
            data.target_train.batches(bs, stream(seed, 2), self.epoch)
        } else {
            Vec::new()
        };
        let steps = src.len().max(trg.len());
        let empty_target = Batch {
            positions: Vec::new(),
            signals: src[0].signals.clone(),
            labels: None,
        };
        for i in 0..steps {
            let s = &src[i % src.len()];
            let t = if trg.is_empty() {
                &empty_target
            } else {
                &trg[i % trg.len()]
            };
            let labels: Option<Vec<usize>> =
                pseudo.map(|p| t.positions.iter().map(|&k| p.labels[k]).collect());
            self.train_step(s, t, labels.as_deref())?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Labels the whole target training split with the current model in
    /// evaluation mode.
    pub fn generate_pseudo_labels(
        &mut self,
        target: &UnlabeledSplit,
        round: usize,
    ) -> Result<PseudoLabels> {
        let mut labels = Vec::with_capacity(target.len());
        for b in target.ordered_batches(256) {
            let tape = Tape::new();
            let x = tape.var(&b.signals);
            let out = self.model.forward(x, Domain::Target, Mode::Eval)?;
            labels.extend(losses::pseudo_labels(
                &out.probs.value(),
                self.config.arch.n_classes,
            ));
        }
        Ok(PseudoLabels { round, labels })
    }

    fn validate_epoch(&mut self, data: &TrainData) -> Result<()> {
        let route = self.config.mode.target_route();
        let ev = metrics::evaluate(&mut self.model, &data.target_val, route)?;
        self.history.push(EpochMetrics {
            epoch: self.epoch - 1,
            split: "target_val",
            acc: ev.acc,
            mf1: ev.mf1,
        });
        if self.best.as_ref().map_or(true, |(acc, _, _)| ev.acc > *acc) {
            self.best = Some((ev.acc, self.epoch - 1, self.model.params.clone()));
        }
        Ok(())
    }

    /// Training without pseudo-labels.
    pub fn pretrain(&mut self, data: &TrainData) -> Result<()> {
        data.check(&self.model.arch().clone())?;
        for _ in 0..self.config.schedule.pretrain_epochs {
            self.train_epoch(data, None)?;
            self.validate_epoch(data)?;
        }
        Ok(())
    }

    /// The self-training rounds; a no-op when self-training is off.
    pub fn self_train(&mut self, data: &TrainData) -> Result<()> {
        data.check(&self.model.arch().clone())?;
        for round in 1..=self.config.effective_rounds() {
            let pseudo = self.generate_pseudo_labels(&data.target_train, round)?;
            self.pseudo = Some(pseudo.clone());
            for _ in 0..self.config.schedule.epochs_per_round {
                self.train_epoch(data, Some(&pseudo))?;
                self.validate_epoch(data)?;
            }
        }
        self.pseudo = None;
        Ok(())
    }

    /// Restores the best validation checkpoint.
    pub fn finish(mut self) -> RunOutput {
        let (best_val_acc, best_epoch) = match self.best.take() {
            Some((acc, epoch, params)) => {
                self.model.params = params;
                (acc, epoch)
            }
            None => (f64::NAN, 0),
        };
        self.model.params.zero_all_grads();
        RunOutput {
            model: self.model,
            best_epoch,
            best_val_acc,
            history: self.history,
            losses: self.losses,
            mode: self.config.mode,
        }
    }
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(what, format!("non-finite loss {v}")))
    }
}

/// Independent seed for a named purpose.
pub(crate) fn stream(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(purpose.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Full ADAST training: pretraining, then the self-training rounds.
pub fn run_adast(config: &TrainConfig, data: &TrainData) -> Result<RunOutput> {
    let config = TrainConfig {
        mode: TrainMode::Adast,
        ..config.clone()
    };
    let mut t = Trainer::new(config)?;
    t.pretrain(data)?;
    t.self_train(data)?;
    Ok(t.finish())
}

/// Lower-bound baseline: source classification only, for the same number
/// of epochs.
pub fn run_source_only(config: &TrainConfig, data: &TrainData) -> Result<RunOutput> {
    let mut config = TrainConfig {
        mode: TrainMode::SourceOnly,
        ..config.clone()
    };
    config.schedule.pretrain_epochs = config.schedule.total_epochs();
    config.schedule.self_train_rounds = 0;
    let mut t = Trainer::new(config)?;
    t.pretrain(data)?;
    Ok(t.finish())
}

/// One ablation variant.
pub fn run_ablation(
    config: &TrainConfig,
    data: &TrainData,
    toggles: AblationToggles,
) -> Result<RunOutput> {
    run_adast(
        &TrainConfig {
            toggles,
            ..config.clone()
        },
        data,
    )
}

/// Target-test style evaluation of a finished run.
pub fn evaluate_run(
    run: &mut RunOutput,
    split: &LabeledSplit,
    domain: Domain,
) -> Result<Evaluation> {
    let route = match (domain, run.mode) {
        (Domain::Target, mode) => mode.target_route(),
        (Domain::Source, _) => Domain::Source,
    };
    metrics::evaluate(&mut run.model, split, route)
}

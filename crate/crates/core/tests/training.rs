use adast::data::{generate_synthetic, Batch, Domain, LabeledSplit, Split, SyntheticShiftSpec};
use adast::experiment::PreparedData;
use adast::losses;
use adast::model::AdastModel;
use adast::nn::{Group, Mode, ParamStore};
use adast::train::{
    evaluate_run, run_adast, run_source_only, SubStep, TrainConfig, TrainData, TrainMode,
    TrainSchedule, Trainer,
};
use adast::{Error, Tape};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prepared(spec: &SyntheticShiftSpec) -> PreparedData {
    PreparedData::new(
        generate_synthetic(spec, Domain::Source).unwrap(),
        generate_synthetic(spec, Domain::Target).unwrap(),
        [0.6, 0.2, 0.2],
        0,
    )
    .unwrap()
}

fn small_data() -> PreparedData {
    prepared(&SyntheticShiftSpec {
        n_subjects: 5,
        epochs_per_subject: 16,
        ..Default::default()
    })
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: TrainSchedule {
            pretrain_epochs: 2,
            epochs_per_round: 1,
            self_train_rounds: 2,
            batch_size: 16,
        },
        seed,
        ..TrainConfig::default()
    }
}

fn first_batches(data: &TrainData) -> (Batch, Batch) {
    (
        data.source_train.batches(16, 0, 0).remove(0),
        data.target_train.batches(16, 0, 0).remove(0),
    )
}

fn changed(a: &ParamStore, b: &ParamStore, groups: &[Group]) -> Vec<String> {
    a.entries()
        .iter()
        .zip(b.entries())
        .filter(|(x, _)| x.trainable() && groups.contains(&x.group))
        .filter(|(x, y)| x.tensor.data() != y.tensor.data())
        .map(|(x, _)| x.name.clone())
        .collect()
}

const MAIN: [Group; 5] = [
    Group::Extractor,
    Group::AttentionSource,
    Group::AttentionTarget,
    Group::Classifier1,
    Group::Classifier2,
];

#[test]
fn each_sub_step_moves_only_its_own_parameters() {
    let data = small_data().train_data().unwrap();
    let mut trainer = Trainer::new(quick(5)).unwrap();
    let pseudo = trainer
        .generate_pseudo_labels(&data.target_train, 1)
        .unwrap();
    let src = data.source_train.batches(16, 1, 0);
    let trg = data.target_train.batches(16, 2, 0);
    for (step, (s, t)) in src.iter().zip(&trg).enumerate() {
        let labels: Vec<usize> = t.positions.iter().map(|&i| pseudo.labels[i]).collect();
        let use_pseudo = step % 2 == 1;
        let mut prev = trainer.model.params.clone();
        let mut seen = Vec::new();
        trainer
            .train_step_observed(
                s,
                t,
                use_pseudo.then_some(&labels[..]),
                &mut |sub, params| {
                    match sub {
                        SubStep::Discriminator => {
                            assert!(
                                changed(&prev, params, &MAIN).is_empty(),
                                "step {step}: D step moved {:?}",
                                changed(&prev, params, &MAIN)
                            );
                            assert!(!changed(&prev, params, &[Group::Discriminator]).is_empty());
                        }
                        SubStep::Main => {
                            assert!(
                                changed(&prev, params, &[Group::Discriminator]).is_empty(),
                                "step {step}: main step moved D"
                            );
                            assert!(!changed(&prev, params, &[Group::Extractor]).is_empty());
                        }
                    }
                    prev = params.clone();
                    seen.push(sub);
                },
            )
            .unwrap();
        assert_eq!(seen, [SubStep::Discriminator, SubStep::Main]);
    }
}

#[test]
fn source_only_never_touches_target_attention_or_discriminator() {
    let data = small_data().train_data().unwrap();
    let config = TrainConfig {
        mode: TrainMode::SourceOnly,
        ..quick(2)
    };
    let mut trainer = Trainer::new(config).unwrap();
    let before = trainer.model.params.clone();
    let (s, t) = first_batches(&data);
    let mut subs = Vec::new();
    trainer
        .train_step_observed(&s, &t, None, &mut |sub, _| subs.push(sub))
        .unwrap();
    assert_eq!(subs, [SubStep::Main]);
    let after = &trainer.model.params;
    assert!(changed(
        &before,
        after,
        &[Group::AttentionTarget, Group::Discriminator]
    )
    .is_empty());
    assert!(!changed(&before, after, &[Group::AttentionSource]).is_empty());
}

#[test]
fn discriminator_step_descends_on_its_batch() {
    let data = small_data().train_data().unwrap();
    let mut config = quick(11);
    config.adam.lr = 1e-4;
    config.lr_schedule.base_lr = 1e-4;
    let mut trainer = Trainer::new(config).unwrap();
    let (s, t) = first_batches(&data);

    let l_d = |model: &mut AdastModel| -> f64 {
        let tape = Tape::new();
        let fs = model
            .forward_source(tape.var(&s.signals), Mode::Train)
            .unwrap()
            .features;
        let ft = model
            .forward_target(tape.var(&t.signals), Mode::Train)
            .unwrap()
            .features;
        losses::discriminator_loss(
            model.discriminate(fs).unwrap(),
            model.discriminate(ft).unwrap(),
        )
        .unwrap()
        .item()
    };
    let mut probe = trainer.model.clone();
    let before = l_d(&mut probe);
    let mut after = f64::NAN;
    trainer
        .train_step_observed(&s, &t, None, &mut |sub, params| {
            if sub == SubStep::Discriminator {
                probe.params = params.clone();
                after = l_d(&mut probe);
            }
        })
        .unwrap();
    assert!(after < before, "L_D {before} -> {after}");
    assert_eq!(trainer.losses()[0].l_d, before);
}

#[test]
fn confused_discriminator_gives_two_ln_two() {
    let data = small_data().train_data().unwrap();
    let mut trainer = Trainer::new(quick(4)).unwrap();
    for id in trainer.model.param_ids(&[Group::Discriminator]) {
        trainer.model.params.get_mut(id).data_mut().fill(0.0);
    }
    let (s, t) = first_batches(&data);
    let r = trainer.train_step(&s, &t, None).unwrap();
    let ln4 = 2.0 * std::f64::consts::LN_2;
    assert!((r.l_d - ln4).abs() < 1e-12);
    assert!((r.l_adv - ln4).abs() < 1e-12);
}

#[test]
fn overall_loss_is_the_weighted_sum_of_its_parts() {
    let data = small_data().train_data().unwrap();
    let mut config = quick(6);
    config.weights.lambda1 = 0.0;
    let mut trainer = Trainer::new(config).unwrap();
    let pseudo = trainer
        .generate_pseudo_labels(&data.target_train, 1)
        .unwrap();
    let (s, t) = first_batches(&data);
    let labels: Vec<usize> = t.positions.iter().map(|&i| pseudo.labels[i]).collect();
    let r = trainer.train_step(&s, &t, Some(&labels)).unwrap();
    assert!(r.l_cls_t > 0.0);
    assert!(r.reg > 0.0);
    let want = r.l_adv + r.l_cls_s + 0.001 * r.reg;
    assert!((r.l_overall - want).abs() < 1e-12);
}

#[test]
fn source_only_reports_only_source_classification() {
    let data = small_data().train_data().unwrap();
    let run = run_source_only(&quick(3), &data).unwrap();
    assert!(!run.losses.is_empty());
    for r in &run.losses {
        assert_eq!((r.l_d, r.l_adv, r.l_cls_t, r.reg), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.l_overall, r.l_cls_s);
    }
    // the same number of epochs as the adaptive run
    assert_eq!(run.history.len(), quick(3).schedule.total_epochs());
}

#[test]
fn runs_are_bit_reproducible() {
    let data = small_data().train_data().unwrap();
    for mode in [TrainMode::Adast, TrainMode::SourceOnly] {
        let config = TrainConfig { mode, ..quick(9) };
        let a = run(&config, &data).unwrap();
        let b = run(&config, &data).unwrap();
        assert_eq!(a.losses, b.losses, "{mode:?}");
        assert_eq!(a.history, b.history);
        assert!(a.model == b.model);
    }
    let other = run_adast(&quick(10), &data).unwrap();
    assert_ne!(other.losses, run_adast(&quick(9), &data).unwrap().losses);
}

fn run(config: &TrainConfig, data: &TrainData) -> adast::Result<adast::train::RunOutput> {
    match config.mode {
        TrainMode::Adast => run_adast(config, data),
        TrainMode::SourceOnly => run_source_only(config, data),
    }
}

#[test]
fn target_training_labels_are_never_read() {
    let mut prepared = small_data();
    let data = prepared.train_data().unwrap();
    // training targets carry the sentinel
    let stripped = prepared.target.without_labels();
    assert!(matches!(
        LabeledSplit::from_dataset(&stripped, Split::Train),
        Err(Error::Unlabeled(_))
    ));

    let baseline = run_adast(&quick(12), &data).unwrap();
    let train_idx = prepared.target.indices(Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for &i in &train_idx {
        let stages = [0u8, 1, 2, 3, 4];
        prepared.target.records[i].stage = stages.choose(&mut rng).copied();
    }
    let scrambled = run_adast(&quick(12), &prepared.train_data().unwrap()).unwrap();
    assert_eq!(baseline.losses, scrambled.losses);
    assert_eq!(baseline.history, scrambled.history);
}

#[test]
fn zero_rounds_match_pretraining_alone() {
    let data = small_data().train_data().unwrap();
    let mut config = quick(7);
    config.schedule.self_train_rounds = 0;
    let a = run_adast(&config, &data).unwrap();
    let mut t = Trainer::new(config).unwrap();
    t.pretrain(&data).unwrap();
    let b = t.finish();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.history, b.history);
    assert!(a.model == b.model);
}

#[test]
fn pseudo_labels_stay_frozen_within_a_round() {
    let data = small_data().train_data().unwrap();
    let mut config = quick(8);
    config.schedule.self_train_rounds = 1;
    config.schedule.epochs_per_round = 2;

    let mut auto = Trainer::new(config.clone()).unwrap();
    auto.pretrain(&data).unwrap();
    let mut manual = auto.clone();
    auto.self_train(&data).unwrap();
    assert!(auto.pseudo_labels().is_none());

    let frozen = manual
        .generate_pseudo_labels(&data.target_train, 1)
        .unwrap();
    assert_eq!(frozen.labels.len(), data.target_train.len());
    manual.train_epoch(&data, Some(&frozen)).unwrap();
    manual.train_epoch(&data, Some(&frozen)).unwrap();
    assert_eq!(auto.losses(), manual.losses());
    assert!(auto.model.params == manual.model.params);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn dual_classifiers_stay_distinct() {
    let data = small_data().train_data().unwrap();
    let mut trainer = Trainer::new(quick(13)).unwrap();
    let check = |model: &AdastModel| {
        let ids = model.classifier_weight_ids();
        assert_eq!(ids.len(), 2);
        let c = cosine(
            &model.params.flat_values(&ids[0]),
            &model.params.flat_values(&ids[1]),
        );
        assert!(c < 0.999, "cosine {c}");
    };
    check(&trainer.model);
    for _ in 0..3 {
        trainer.train_epoch(&data, None).unwrap();
        check(&trainer.model);
    }
    check(&trainer.finish().model);
}

#[test]
fn without_shift_source_only_transfers() {
    let spec = SyntheticShiftSpec {
        epochs_per_subject: 60,
        ..Default::default()
    };
    let prepared = prepared(&spec.neutral());
    let config = TrainConfig {
        schedule: TrainSchedule {
            pretrain_epochs: 6,
            epochs_per_round: 0,
            self_train_rounds: 0,
            batch_size: 32,
        },
        seed: 1,
        ..TrainConfig::default()
    };
    let mut run = run_source_only(&config, &prepared.train_data().unwrap()).unwrap();
    let src = evaluate_run(
        &mut run,
        &prepared.test_split(Domain::Source).unwrap(),
        Domain::Source,
    )
    .unwrap();
    let trg = evaluate_run(
        &mut run,
        &prepared.test_split(Domain::Target).unwrap(),
        Domain::Target,
    )
    .unwrap();
    assert!(src.acc > 0.8, "source acc {}", src.acc);
    assert!(
        (src.acc - trg.acc).abs() <= 0.03,
        "source {} target {}",
        src.acc,
        trg.acc
    );
}

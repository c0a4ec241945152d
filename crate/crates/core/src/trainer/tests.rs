use super::*;
use crate::data::SyntheticConfig;

fn tiny_corpus() -> Corpus {
    Corpus::generate(&SyntheticConfig {
        train_speakers: 3,
        dev_speakers: 2,
        test_speakers: 2,
        utterances_per_speaker: 4,
        mean_duration: 1.0,
        duration_jitter: 0.3,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        grl_hold: 1,
        grl_end: 3,
        ..TrainConfig::for_profile(Profile::Desk)
    }
}

fn run(variant: u8, corpus: &Corpus, cfg: &TrainConfig) -> TrainOutcome {
    train(
        VariantSpec::from_number(variant).unwrap(),
        corpus,
        &ModelConfig::for_profile(Profile::Desk),
        &FeatureConfig::desk(),
        cfg,
        None,
    )
    .unwrap()
}

#[test]
fn profile_defaults() {
    let paper = TrainConfig::for_profile(Profile::Paper);
    assert_eq!((paper.epochs, paper.batch_size, paper.lr, paper.momentum), (120, 8, 0.001, 0.9));
    assert_eq!((paper.grl_hold, paper.grl_end, paper.plateau_patience), (10, 60, 5));
    let desk = TrainConfig::for_profile(Profile::Desk);
    assert_eq!((desk.epochs, desk.grl_hold, desk.grl_end), (40, 3, 20));
    assert!(TrainConfig { batch_size: 1, ..desk.clone() }.validate().is_err());
    assert!(TrainConfig { grl_end: 3, ..desk }.validate().is_err());
}

#[test]
fn run_is_deterministic_and_best_is_trace_max() {
    let corpus = tiny_corpus();
    let cfg = tiny_cfg(3);
    let a = run(7, &corpus, &cfg);
    let b = run(7, &corpus, &cfg);
    assert_eq!(a.record, b.record);
    assert_eq!(a.best, b.best);
    let r = &a.record;
    assert_eq!(r.monitor_c_hat.len(), 3);
    assert_eq!(r.lambda, [-1.0, -1.0, 0.0]);
    assert_eq!(r.multiplier, [1.0, 1.0, -0.0]);
    let max = r.monitor_c_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_c_hat, max);
    assert_eq!(r.monitor_c_hat[r.best_epoch], max);
    assert_eq!(a.best.epoch, r.best_epoch);
    assert!(r.train_loss.iter().all(|l| l.is_finite()));
}

#[test]
fn variant_one_ignores_the_reversal_schedule() {
    let corpus = tiny_corpus();
    let a = run(1, &corpus, &tiny_cfg(2));
    let b = run(1, &corpus, &TrainConfig { grl_hold: 0, grl_end: 1, grl_raw_sign: true, ..tiny_cfg(2) });
    assert_eq!(a.last.model.params, b.last.model.params);
    assert_eq!(a.record.monitor_c_hat, b.record.monitor_c_hat);
}

#[test]
fn evaluation_is_reproducible_and_matches_monitor() {
    let corpus = tiny_corpus();
    let out = run(3, &corpus, &tiny_cfg(2));
    let r1 = evaluate(&out.best, &corpus, Split::Dev, 200, 7).unwrap();
    let r2 = evaluate(&out.best, &corpus, Split::Dev, 200, 7).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.variant, Some(3));
    assert_eq!(r1.n_utterances, corpus.split(Split::Dev).len());
    let mean = r1.per_emotion_ccc.iter().sum::<f64>() / 10.0;
    assert!((r1.c_hat - mean).abs() < 1e-12);
    assert!((r1.c_hat - out.record.best_c_hat).abs() < 1e-9);
    assert!(r1.ci_low <= r1.c_hat && r1.c_hat <= r1.ci_high);
}

#[test]
fn best_checkpoint_is_written() {
    let corpus = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        VariantSpec::from_number(1).unwrap(),
        &corpus,
        &ModelConfig::for_profile(Profile::Desk),
        &FeatureConfig::desk(),
        &tiny_cfg(2),
        Some(dir.path()),
    )
    .unwrap();
    let loaded = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(loaded, out.best);
}

#[test]
fn missing_monitor_split_is_a_config_error() {
    let corpus = Corpus::generate(&SyntheticConfig {
        dev_speakers: 0,
        utterances_per_speaker: 4,
        mean_duration: 1.0,
        ..SyntheticConfig::default()
    });
    if let Ok(corpus) = corpus {
        let err = train(
            VariantSpec::from_number(1).unwrap(),
            &corpus,
            &ModelConfig::for_profile(Profile::Desk),
            &FeatureConfig::desk(),
            &tiny_cfg(1),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

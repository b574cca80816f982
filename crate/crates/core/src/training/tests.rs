use super::*;
use crate::synthdata::{make_corpus, SynthSpec};

fn small_corpus(num_utts: usize) -> Corpus {
    make_corpus(&SynthSpec {
        num_utts,
        vocab_size: 6,
        num_units: 9,
        video_dim: 5,
        min_phonemes: 3,
        max_phonemes: 5,
        min_duration: 1,
        max_duration: 3,
        test_fraction: 0.25,
        seed: 7,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_model(corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        vocab_size: corpus.metadata.vocab_size,
        num_units: corpus.metadata.num_units,
        video_dim: corpus.metadata.video_dim,
        text_blocks: 1,
        video_blocks: 1,
        predictor_blocks: 1,
        attention_heads: 2,
        ..ModelConfig::default()
    }
}

fn train_cfg(max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        max_steps,
        log_every: 2,
        learning_rate: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_runs_are_bitwise_equal() {
    let corpus = small_corpus(8);
    let mc = small_model(&corpus);
    let a = train(&corpus, &mc, &train_cfg(4), None).unwrap();
    let b = train(&corpus, &mc, &train_cfg(4), None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
}

#[test]
fn loss_decreases_on_a_single_utterance() {
    let mut corpus = small_corpus(1);
    corpus.splits = vec!["train".into()];
    let mc = ModelConfig {
        dropout: 0.0,
        ..small_model(&corpus)
    };
    let cfg = TrainConfig {
        batch_size: 1,
        ..train_cfg(200)
    };
    let mut trainer = Trainer::new(&corpus, &mc, &cfg).unwrap();
    let first = trainer.step().unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = trainer.step().unwrap().loss;
    }
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn batches_follow_seeded_epoch_permutations() {
    let corpus = small_corpus(8);
    let mc = small_model(&corpus);
    let mut t = Trainer::new(&corpus, &mc, &train_cfg(1)).unwrap();
    let train_idx = corpus.split_indices("train");
    // One epoch covers every train utterance exactly once.
    let mut seen: Vec<usize> = (0..2).flat_map(|s| t.batch_indices(s)).collect();
    seen.sort();
    assert_eq!(seen, train_idx);
    // Revisiting an earlier step gives the same batch.
    let later = t.batch_indices(5);
    assert_eq!(t.batch_indices(0), t.batch_indices(0));
    assert_eq!(t.batch_indices(5), later);
}

#[test]
fn resume_reproduces_the_trajectory() {
    let corpus = small_corpus(8);
    let mc = small_model(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&corpus, &mc, &train_cfg(6), None).unwrap();

    let part = train(&corpus, &mc, &train_cfg(2), Some(dir.path())).unwrap();
    assert_eq!(part.checkpoint.manifest.step, 2);
    let ckpt = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(ckpt, part.checkpoint);
    let resumed = Trainer::resume(&corpus, ckpt, &train_cfg(6))
        .unwrap()
        .run(Some(dir.path()))
        .unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(&full.history[1..], &resumed.history[..]);

    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let records: Vec<MetricsRecord> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records, full.history);
}

#[test]
fn rejects_bad_corpora() {
    let corpus = small_corpus(4);
    let mc = small_model(&corpus);
    let mut empty = corpus.clone();
    empty.utterances.clear();
    empty.splits.clear();
    assert!(Trainer::new(&empty, &mc, &train_cfg(1))
        .err()
        .unwrap()
        .is_validation());

    let mut no_units = corpus.clone();
    no_units.utterances[0].units = None;
    let err = train(&no_units, &mc, &train_cfg(2), None).err().unwrap();
    assert!(err.is_validation(), "{err}");

    let wrong = ModelConfig {
        num_units: 3,
        ..mc.clone()
    };
    assert!(Trainer::new(&corpus, &wrong, &train_cfg(1))
        .err()
        .unwrap()
        .is_validation());
}

#[test]
fn sequence_gradient_of_logits_is_softmax_minus_onehot() {
    let (ce, g) = cross_entropy_with_grad(
        &Matrix::from_rows(&[vec![0.5f64, -1.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap(),
        &[2, 0],
        None,
    )
    .unwrap();
    let z = 0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp();
    let expected0 = [
        0.5f64.exp() / z,
        (-1.0f64).exp() / z,
        2.0f64.exp() / z - 1.0,
    ];
    for (c, e) in expected0.iter().enumerate() {
        assert!((g.get(0, c) - e / 2.0).abs() < 1e-12);
    }
    assert!((g.get(1, 0) - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
    let want = ((z.ln() - 2.0) + 3.0f64.ln()) / 2.0;
    assert!((ce - want).abs() < 1e-12);
}

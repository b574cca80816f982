use avo::eval::argmax_monotone_fraction;
use avo::inference::{infer_units, OracleMode, OracleVocoder, Vocoder, VocoderOutput};
use avo::model::ModelConfig;
use avo::synthdata::{make_corpus_with_inventory, SynthSpec};
use avo::tokenizer::Codebook;
use avo::training::{train, TrainConfig};
use avo::Matrix;

#[test]
fn overfit_model_reproduces_training_units() {
    let spec = SynthSpec {
        num_utts: 8,
        vocab_size: 10,
        num_units: 20,
        video_dim: 16,
        feature_noise_std: 0.0,
        unit_corruption_prob: 0.0,
        seed: 19,
        ..SynthSpec::default()
    };
    let (corpus, _) = make_corpus_with_inventory(&spec).unwrap();
    let mc = ModelConfig {
        d_model: 32,
        vocab_size: 10,
        num_units: 20,
        video_dim: 16,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        max_steps: 1500,
        log_every: 25,
        target_accuracy: Some(1.0),
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&corpus, &mc, &tc, None).unwrap();
    assert!(
        out.stopped_early,
        "did not reach 100% in {} steps",
        out.checkpoint.manifest.step
    );

    // Centroids far apart in one dimension per unit.
    let codebook = Codebook::new(
        Matrix::from_fn(20, 20, |r, c| if r == c { 1.0 } else { 0.0 }),
        0,
    )
    .unwrap();
    let vocoder = OracleVocoder::new(codebook, OracleMode::Features);
    for utt in &corpus.utterances {
        let (units, trace) =
            infer_units(&out.checkpoint.params, &utt.phonemes, &utt.video, 2).unwrap();
        assert_eq!(Some(&units), utt.units.as_ref(), "{}", utt.id);
        assert!(
            argmax_monotone_fraction(&trace.attention) >= 0.8,
            "{}",
            utt.id
        );
        let VocoderOutput::Features(f) = vocoder.synthesize(&units).unwrap() else {
            panic!("features mode returns features");
        };
        assert_eq!(
            vocoder
                .codebook
                .encode_units(&f, units.unit_rate_hz())
                .unwrap(),
            units
        );
    }
}

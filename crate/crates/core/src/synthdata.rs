//! Synthetic corpora with known phoneme → video → unit correspondence.
//!
//! Each phoneme id owns a prototype video feature vector and a base pattern of
//! four units. An utterance samples phonemes and integer durations (in video
//! frames); every frame carries its phoneme's prototype plus Gaussian noise, and
//! the phoneme emits its base pattern cyclically at `n` units per frame.
//! Adjacent phonemes are always distinct so segment boundaries are visible in
//! the video stream.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    Corpus, CorpusMetadata, PhonemeSequence, UnitSequence, Utterance, VideoFeatureSequence,
    DEFAULT_FRAME_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

const STREAM_INVENTORY: u64 = 1;
const STREAM_UTTERANCE: u64 = 2;

/// Length of each phoneme's cyclic unit pattern.
pub const PATTERN_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_utts: usize,
    pub vocab_size: usize,
    pub num_units: usize,
    pub video_dim: usize,
    /// Units per video frame.
    pub upsample_ratio: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub feature_noise_std: f64,
    pub unit_corruption_prob: f64,
    /// Fraction of utterances (taken from the end) assigned to the "test" split.
    pub test_fraction: f64,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_utts: 64,
            vocab_size: 40,
            num_units: 100,
            video_dim: 32,
            upsample_ratio: 2,
            min_duration: 2,
            max_duration: 6,
            min_phonemes: 4,
            max_phonemes: 10,
            feature_noise_std: 0.1,
            unit_corruption_prob: 0.0,
            test_fraction: 0.0,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(format!("synth spec: {m}")));
        if self.upsample_ratio < 1 {
            return fail("upsample_ratio must be at least 1");
        }
        if self.min_duration < 1 || self.max_duration < self.min_duration {
            return fail("durations must satisfy 1 <= min_duration <= max_duration");
        }
        if self.min_phonemes < 1 || self.max_phonemes < self.min_phonemes {
            return fail("phoneme counts must satisfy 1 <= min_phonemes <= max_phonemes");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.num_units < 1 || self.video_dim < 1 {
            return fail("num_units and video_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.unit_corruption_prob) {
            return fail("unit_corruption_prob must lie in [0, 1)");
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return fail("feature_noise_std must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return fail("test_fraction must lie in [0, 1]");
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return fail("frame_rate_hz must be positive");
        }
        Ok(())
    }

    pub fn unit_rate_hz(&self) -> f64 {
        self.frame_rate_hz * self.upsample_ratio as f64
    }

    pub fn metadata(&self) -> CorpusMetadata {
        CorpusMetadata {
            vocab_size: self.vocab_size,
            num_units: self.num_units,
            video_dim: self.video_dim,
            frame_rate_hz: self.frame_rate_hz,
            unit_rate_hz: self.unit_rate_hz(),
            seed: self.seed,
        }
    }
}

/// Per-phoneme prototypes and unit patterns shared by every utterance of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInventory {
    pub prototypes: Matrix<f32>,
    pub patterns: Vec<[usize; PATTERN_LEN]>,
}

impl PhonemeInventory {
    pub fn sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let prototypes =
            Matrix::from_fn(spec.vocab_size, spec.video_dim, |_, _| normal.sample(rng));
        let patterns = (0..spec.vocab_size)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..spec.num_units)))
            .collect();
        Self {
            prototypes,
            patterns,
        }
    }

    /// Clean unit sequence implied by a frame-level alignment.
    pub fn units_from_alignment(
        &self,
        phonemes: &[usize],
        alignment: &[usize],
        upsample_ratio: usize,
    ) -> Vec<usize> {
        let mut out = Vec::with_capacity(alignment.len() * upsample_ratio);
        let mut pos = 0;
        for (t, &p) in alignment.iter().enumerate() {
            if t > 0 && alignment[t - 1] != p {
                pos = 0;
            }
            for _ in 0..upsample_ratio {
                out.push(self.patterns[phonemes[p]][pos % PATTERN_LEN]);
                pos += 1;
            }
        }
        out
    }
}

pub fn make_utterance(
    spec: &SynthSpec,
    inventory: &PhonemeInventory,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    spec.validate()?;
    let t_p = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
    let mut phonemes = Vec::with_capacity(t_p);
    for i in 0..t_p {
        let p = if i == 0 {
            rng.random_range(0..spec.vocab_size)
        } else {
            let prev = phonemes[i - 1];
            let draw = rng.random_range(0..spec.vocab_size - 1);
            if draw >= prev {
                draw + 1
            } else {
                draw
            }
        };
        phonemes.push(p);
    }
    let mut alignment = Vec::new();
    for i in 0..t_p {
        let d = rng.random_range(spec.min_duration..=spec.max_duration);
        alignment.extend(std::iter::repeat_n(i, d));
    }

    let noise = Normal::new(0.0f64, spec.feature_noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::validation(e.to_string()))?;
    let mut frames = Matrix::<f32>::zeros(alignment.len(), spec.video_dim);
    for (t, &p) in alignment.iter().enumerate() {
        let proto = inventory.prototypes.row(phonemes[p]);
        for (dst, &v) in frames.row_mut(t).iter_mut().zip(proto) {
            let eps = if spec.feature_noise_std > 0.0 {
                noise.sample(rng) as f32
            } else {
                0.0
            };
            *dst = v + eps;
        }
    }

    let mut units = inventory.units_from_alignment(&phonemes, &alignment, spec.upsample_ratio);
    if spec.unit_corruption_prob > 0.0 {
        for u in &mut units {
            if rng.random::<f64>() < spec.unit_corruption_prob {
                *u = rng.random_range(0..spec.num_units);
            }
        }
    }

    let utt = Utterance {
        id,
        phonemes: PhonemeSequence::new(phonemes, spec.vocab_size)?,
        video: VideoFeatureSequence::new(frames, spec.frame_rate_hz)?,
        units: Some(UnitSequence::new(
            units,
            spec.num_units,
            spec.unit_rate_hz(),
        )?),
        gt_alignment: Some(alignment),
    };
    utt.validate()?;
    Ok(utt)
}

/// Generates the corpus and the inventory it was drawn from.
pub fn make_corpus_with_inventory(spec: &SynthSpec) -> Result<(Corpus, PhonemeInventory)> {
    spec.validate()?;
    let mut corpus_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, STREAM_INVENTORY, 0));
    let inventory = PhonemeInventory::sample(spec, &mut corpus_rng);
    let num_test = (spec.num_utts as f64 * spec.test_fraction).round() as usize;
    let mut utterances = Vec::with_capacity(spec.num_utts);
    let mut splits = Vec::with_capacity(spec.num_utts);
    for i in 0..spec.num_utts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, STREAM_UTTERANCE, i as u64));
        utterances.push(make_utterance(
            spec,
            &inventory,
            format!("utt{i:05}"),
            &mut rng,
        )?);
        let split = if i >= spec.num_utts - num_test {
            "test"
        } else {
            "train"
        };
        splits.push(split.to_string());
    }
    let corpus = Corpus::new(spec.metadata(), utterances, splits)?;
    Ok((corpus, inventory))
}

pub fn make_corpus(spec: &SynthSpec) -> Result<Corpus> {
    make_corpus_with_inventory(spec).map(|(c, _)| c)
}

/// Generates a corpus and writes it to `dir`.
pub fn write_corpus(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Corpus> {
    let corpus = make_corpus(spec)?;
    corpus.save(dir)?;
    Ok(corpus)
}

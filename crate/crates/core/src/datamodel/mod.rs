//! Sequence types, corpus containers and their on-disk formats.

mod corpus;
mod formats;

pub use corpus::{Corpus, CorpusMetadata, UtteranceEntry, CORPUS_INDEX_FILE};
pub use formats::{
    read_features, read_phonemes, read_units, write_features, write_phonemes, write_units,
    FEATURE_FORMAT_VERSION, FEATURE_MAGIC,
};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_FRAME_RATE_HZ: f64 = 25.0;
pub const DEFAULT_UNIT_RATE_HZ: f64 = 50.0;
pub const DEFAULT_NUM_UNITS: usize = 100;

/// Integer-coded phoneme ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("phoneme sequence is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::validation(format!(
                "phoneme id {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Real-valued feature frames at the video rate (stand-in for lip features).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureSequence {
    frames: Matrix<f32>,
    frame_rate_hz: f64,
}

impl VideoFeatureSequence {
    pub fn new(frames: Matrix<f32>, frame_rate_hz: f64) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::validation("video feature sequence has no frames"));
        }
        if !frames.is_finite() {
            return Err(Error::validation(
                "video features contain non-finite values",
            ));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::validation("frame rate must be positive"));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn frames(&self) -> &Matrix<f32> {
        &self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Discrete speech units in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    units: Vec<usize>,
    num_units: usize,
    unit_rate_hz: f64,
}

impl UnitSequence {
    pub fn new(units: Vec<usize>, num_units: usize, unit_rate_hz: f64) -> Result<Self> {
        if num_units == 0 {
            return Err(Error::validation("codebook size K must be positive"));
        }
        if let Some(&bad) = units.iter().find(|&&u| u >= num_units) {
            return Err(Error::validation(format!(
                "unit {bad} out of range for K={num_units}"
            )));
        }
        if !(unit_rate_hz > 0.0 && unit_rate_hz.is_finite()) {
            return Err(Error::validation("unit rate must be positive"));
        }
        Ok(Self {
            units,
            num_units,
            unit_rate_hz,
        })
    }

    pub fn units(&self) -> &[usize] {
        &self.units
    }

    /// Codebook size K.
    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn unit_rate_hz(&self) -> f64 {
        self.unit_rate_hz
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// One aligned (phonemes, video, units) example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub video: VideoFeatureSequence,
    pub units: Option<UnitSequence>,
    /// Owning phoneme index of every video frame (synthetic data only).
    pub gt_alignment: Option<Vec<usize>>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::validation(format!(
                "invalid utterance id {:?}",
                self.id
            )));
        }
        let t_v = self.video.len();
        if let Some(units) = &self.units {
            if units.is_empty() || units.len() % t_v != 0 {
                return Err(Error::validation(format!(
                    "utterance {}: {} units is not a positive multiple of {t_v} video frames",
                    self.id,
                    units.len()
                )));
            }
        }
        if let Some(align) = &self.gt_alignment {
            if align.len() != t_v {
                return Err(Error::validation(format!(
                    "utterance {}: alignment has {} entries for {t_v} frames",
                    self.id,
                    align.len()
                )));
            }
            if align.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::validation(format!(
                    "utterance {}: alignment is not monotone",
                    self.id
                )));
            }
            if align.iter().any(|&p| p >= self.phonemes.len()) {
                return Err(Error::validation(format!(
                    "utterance {}: alignment points past the last phoneme",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Units per video frame, `T_z / T_v`, when units are present.
    pub fn upsample_ratio(&self) -> Option<usize> {
        self.units.as_ref().map(|u| u.len() / self.video.len())
    }
}

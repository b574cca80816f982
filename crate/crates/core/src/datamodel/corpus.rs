//! Corpus directories: `corpus.json` plus per-utterance `.phon`, `.feat`,
//! `.units` and optional `.align` files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::formats::{read_index_list, write_index_list};
use super::{
    read_features, read_phonemes, read_units, write_features, write_phonemes, write_units,
    Utterance, VideoFeatureSequence,
};
use crate::error::{Error, Result};

pub const CORPUS_INDEX_FILE: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    /// Phoneme vocabulary size `V_p`.
    pub vocab_size: usize,
    /// Codebook size `K`.
    pub num_units: usize,
    /// Video feature dimension `d_v`.
    pub video_dim: usize,
    pub frame_rate_hz: f64,
    pub unit_rate_hz: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub id: String,
    pub split: String,
    pub has_units: bool,
    pub has_alignment: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusIndex {
    metadata: CorpusMetadata,
    utterances: Vec<UtteranceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub metadata: CorpusMetadata,
    pub utterances: Vec<Utterance>,
    /// Split name of each utterance, parallel to `utterances`.
    pub splits: Vec<String>,
}

impl Corpus {
    pub fn new(
        metadata: CorpusMetadata,
        utterances: Vec<Utterance>,
        splits: Vec<String>,
    ) -> Result<Self> {
        let corpus = Self {
            metadata,
            utterances,
            splits,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.metadata;
        if self.splits.len() != self.utterances.len() {
            return Err(Error::validation("split list does not match utterances"));
        }
        let mut seen = std::collections::HashSet::new();
        for utt in &self.utterances {
            utt.validate()?;
            if !seen.insert(utt.id.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate utterance id {}",
                    utt.id
                )));
            }
            let mismatch = |what: &str| {
                Error::validation(format!(
                    "utterance {}: {what} differs from corpus metadata",
                    utt.id
                ))
            };
            if utt.phonemes.vocab_size() != m.vocab_size {
                return Err(mismatch("phoneme vocabulary"));
            }
            if utt.video.dim() != m.video_dim {
                return Err(mismatch("video feature dimension"));
            }
            if utt.video.frame_rate_hz() != m.frame_rate_hz {
                return Err(mismatch("frame rate"));
            }
            if let Some(units) = &utt.units {
                if units.num_units() != m.num_units {
                    return Err(mismatch("codebook size"));
                }
                if units.unit_rate_hz() != m.unit_rate_hz {
                    return Err(mismatch("unit rate"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Indices of utterances in the named split.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_str() == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Corpus-wide units-per-frame ratio; errors if utterances disagree or lack units.
    pub fn upsample_ratio(&self) -> Result<usize> {
        let mut ratio = None;
        for utt in &self.utterances {
            let n = utt
                .upsample_ratio()
                .ok_or_else(|| Error::validation(format!("utterance {} has no units", utt.id)))?;
            match ratio {
                None => ratio = Some(n),
                Some(r) if r != n => {
                    return Err(Error::validation(format!(
                        "inconsistent units per video frame: {r} vs {n} (utterance {})",
                        utt.id
                    )))
                }
                _ => {}
            }
        }
        ratio.ok_or_else(|| Error::validation("corpus is empty"))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.utterances.len());
        for (utt, split) in self.utterances.iter().zip(&self.splits) {
            write_phonemes(&utt.phonemes, dir.join(format!("{}.phon", utt.id)))?;
            write_features(utt.video.frames(), dir.join(format!("{}.feat", utt.id)))?;
            if let Some(units) = &utt.units {
                write_units(units, dir.join(format!("{}.units", utt.id)))?;
            }
            if let Some(align) = &utt.gt_alignment {
                write_index_list(align, &dir.join(format!("{}.align", utt.id)))?;
            }
            entries.push(UtteranceEntry {
                id: utt.id.clone(),
                split: split.clone(),
                has_units: utt.units.is_some(),
                has_alignment: utt.gt_alignment.is_some(),
            });
        }
        let index = CorpusIndex {
            metadata: self.metadata.clone(),
            utterances: entries,
        };
        let path = dir.join(CORPUS_INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CORPUS_INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CorpusIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let m = &index.metadata;
        let mut utterances = Vec::with_capacity(index.utterances.len());
        let mut splits = Vec::with_capacity(index.utterances.len());
        for entry in &index.utterances {
            let phonemes = read_phonemes(dir.join(format!("{}.phon", entry.id)), m.vocab_size)?;
            let frames = read_features(dir.join(format!("{}.feat", entry.id)))?;
            let video = VideoFeatureSequence::new(frames, m.frame_rate_hz)?;
            let units = if entry.has_units {
                Some(read_units(dir.join(format!("{}.units", entry.id)))?)
            } else {
                None
            };
            let gt_alignment = if entry.has_alignment {
                Some(read_index_list(&dir.join(format!("{}.align", entry.id)))?)
            } else {
                None
            };
            utterances.push(Utterance {
                id: entry.id.clone(),
                phonemes,
                video,
                units,
                gt_alignment,
            });
            splits.push(entry.split.clone());
        }
        Self::new(index.metadata, utterances, splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{PhonemeSequence, UnitSequence};
    use crate::matrix::Matrix;

    fn meta() -> CorpusMetadata {
        CorpusMetadata {
            vocab_size: 5,
            num_units: 10,
            video_dim: 2,
            frame_rate_hz: 25.0,
            unit_rate_hz: 50.0,
            seed: 1,
        }
    }

    fn utt(id: &str, t_v: usize, t_z: usize, align: Option<Vec<usize>>) -> Utterance {
        Utterance {
            id: id.into(),
            phonemes: PhonemeSequence::new(vec![1, 2], 5).unwrap(),
            video: VideoFeatureSequence::new(Matrix::filled(t_v, 2, 0.5), 25.0).unwrap(),
            units: Some(UnitSequence::new(vec![3; t_z], 10, 50.0).unwrap()),
            gt_alignment: align,
        }
    }

    #[test]
    fn rejects_non_integer_ratio() {
        let err = Corpus::new(meta(), vec![utt("a", 3, 7, None)], vec!["train".into()]);
        assert!(err.unwrap_err().is_validation());
    }

    #[test]
    fn rejects_non_monotone_alignment() {
        let err = Corpus::new(
            meta(),
            vec![utt("a", 3, 6, Some(vec![0, 1, 0]))],
            vec!["train".into()],
        );
        assert!(err.unwrap_err().to_string().contains("monotone"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::new(
            meta(),
            vec![utt("a", 3, 6, Some(vec![0, 0, 1])), utt("b", 2, 4, None)],
            vec!["train".into(), "test".into()],
        )
        .unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.split_indices("test"), vec![1]);
        assert_eq!(back.upsample_ratio().unwrap(), 2);
    }
}

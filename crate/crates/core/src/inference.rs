//! Generation: phonemes + video → units → optional audio through a vocoder.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::datamodel::{write_units, PhonemeSequence, UnitSequence, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{self, ForwardTrace, Mode, ModelParams};
use crate::tokenizer::Codebook;

pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// 20 ms per unit frame at 16 kHz.
pub const SAMPLES_PER_UNIT: usize = 320;
/// 2 ms linear crossfade between unit frames.
pub const CROSSFADE_SAMPLES: usize = 32;

/// Predicts `n · T_v` units for one utterance in eval mode.
pub fn infer_units(
    params: &ModelParams<f32>,
    phonemes: &PhonemeSequence,
    video: &VideoFeatureSequence,
    n: usize,
) -> Result<(UnitSequence, ForwardTrace<f32>)> {
    let trace = model::forward(params, phonemes, video, n, &mut Mode::Eval)?;
    let units = model::decode_units(&trace.logits, video.frame_rate_hz() * n as f64)?;
    Ok((units, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub enum VocoderOutput {
    Waveform {
        samples: Vec<f32>,
        sample_rate_hz: u32,
    },
    Features(Matrix<f32>),
}

/// Maps a unit sequence to audio or to acoustic features.
pub trait Vocoder {
    fn produces_waveform(&self) -> bool;
    fn synthesize(&self, units: &UnitSequence) -> Result<VocoderOutput>;

    /// Like [`Vocoder::synthesize`] but insists on a waveform.
    fn synthesize_waveform(&self, units: &UnitSequence) -> Result<(Vec<f32>, u32)> {
        if !self.produces_waveform() {
            return Err(Error::validation("vocoder does not produce waveforms"));
        }
        match self.synthesize(units)? {
            VocoderOutput::Waveform {
                samples,
                sample_rate_hz,
            } => Ok((samples, sample_rate_hz)),
            VocoderOutput::Features(_) => Err(Error::validation("vocoder returned features")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Centroid lookup.
    Features,
    /// One fixed sinusoid per unit id.
    Sine,
}

/// Codebook-backed stand-in for a neural vocoder.
#[derive(Debug, Clone)]
pub struct OracleVocoder {
    pub codebook: Codebook,
    pub mode: OracleMode,
}

impl OracleVocoder {
    pub fn new(codebook: Codebook, mode: OracleMode) -> Self {
        Self { codebook, mode }
    }
}

/// Frequency of unit `k` in sine mode.
pub fn unit_frequency_hz(k: usize) -> f64 {
    100.0 + 8.0 * k as f64
}

/// Sine rendering: each unit owns `SAMPLES_PER_UNIT` samples plus a
/// `CROSSFADE_SAMPLES` tail that overlaps the next unit's fade-in.
/// Total length is `T_z · 320 + 32` samples.
pub fn render_sine(units: &[usize]) -> Vec<f32> {
    if units.is_empty() {
        return Vec::new();
    }
    let seg = SAMPLES_PER_UNIT + CROSSFADE_SAMPLES;
    let mut out = vec![0.0f32; units.len() * SAMPLES_PER_UNIT + CROSSFADE_SAMPLES];
    let sr = SAMPLE_RATE_HZ as f64;
    for (i, &u) in units.iter().enumerate() {
        let f = unit_frequency_hz(u);
        let start = i * SAMPLES_PER_UNIT;
        for k in 0..seg {
            let gain = if k < CROSSFADE_SAMPLES {
                k as f64 / CROSSFADE_SAMPLES as f64
            } else if k >= SAMPLES_PER_UNIT {
                1.0 - (k - SAMPLES_PER_UNIT) as f64 / CROSSFADE_SAMPLES as f64
            } else {
                1.0
            };
            let t = (start + k) as f64 / sr;
            out[start + k] += (0.5 * gain * (2.0 * std::f64::consts::PI * f * t).sin()) as f32;
        }
    }
    out
}

impl Vocoder for OracleVocoder {
    fn produces_waveform(&self) -> bool {
        self.mode == OracleMode::Sine
    }

    fn synthesize(&self, units: &UnitSequence) -> Result<VocoderOutput> {
        if units.is_empty() {
            return Err(Error::validation(
                "cannot synthesize an empty unit sequence",
            ));
        }
        if let Some(&bad) = units.units().iter().find(|&&u| u >= self.codebook.k()) {
            return Err(Error::validation(format!(
                "unit {bad} out of range for codebook of {}",
                self.codebook.k()
            )));
        }
        Ok(match self.mode {
            OracleMode::Features => VocoderOutput::Features(self.codebook.centroid_lookup(units)?),
            OracleMode::Sine => VocoderOutput::Waveform {
                samples: render_sine(units.units()),
                sample_rate_hz: SAMPLE_RATE_HZ,
            },
        })
    }
}

/// A vocoder run as `<program> [args…] <units_path> <wav_path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalVocoder {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalVocoder {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    /// Invokes the backend on an existing units file.
    pub fn run(&self, units_path: &Path, wav_path: &Path) -> Result<()> {
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(units_path)
            .arg(wav_path)
            .status()
            .map_err(|e| Error::External(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::External(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        if !wav_path.exists() {
            return Err(Error::External(format!(
                "{} did not write {}",
                self.program.display(),
                wav_path.display()
            )));
        }
        Ok(())
    }
}

impl Vocoder for ExternalVocoder {
    fn produces_waveform(&self) -> bool {
        true
    }

    fn synthesize(&self, units: &UnitSequence) -> Result<VocoderOutput> {
        if units.is_empty() {
            return Err(Error::validation(
                "cannot synthesize an empty unit sequence",
            ));
        }
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let units_path = dir.path().join("input.units");
        let wav_path = dir.path().join("output.wav");
        write_units(units, &units_path)?;
        self.run(&units_path, &wav_path)?;
        let (samples, sample_rate_hz) = read_wav(&wav_path)?;
        Ok(VocoderOutput::Waveform {
            samples,
            sample_rate_hz,
        })
    }
}

fn wav_error(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
pub fn write_wav(samples: &[f32], sample_rate_hz: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Reads a mono integer-PCM WAV into samples in [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "expected mono integer PCM"));
    }
    let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
    let samples = r
        .samples::<i32>()
        .map(|s| s.map(|v| v as f32 / scale))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codebook(k: usize) -> Codebook {
        let c = Matrix::from_fn(k, 3, |r, c| (r * 3 + c) as f32 * 0.5);
        Codebook::new(c, 0).unwrap()
    }

    #[test]
    fn features_mode_round_trips_units() {
        let voc = OracleVocoder::new(codebook(6), OracleMode::Features);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let len = rng.random_range(1..30);
            let u: Vec<usize> = (0..len).map(|_| rng.random_range(0..6)).collect();
            let seq = UnitSequence::new(u, 6, 50.0).unwrap();
            let VocoderOutput::Features(f) = voc.synthesize(&seq).unwrap() else {
                panic!("expected features");
            };
            assert_eq!(voc.codebook.encode_units(&f, 50.0).unwrap(), seq);
        }
        assert!(voc
            .synthesize_waveform(&UnitSequence::new(vec![1], 6, 50.0).unwrap())
            .is_err());
    }

    #[test]
    fn sine_duration_and_errors() {
        let voc = OracleVocoder::new(codebook(6), OracleMode::Sine);
        let seq = UnitSequence::new(vec![2; 50], 6, 50.0).unwrap();
        let (w, sr) = voc.synthesize_waveform(&seq).unwrap();
        assert_eq!(sr, 16_000);
        let secs = w.len() as f64 / sr as f64;
        assert!((secs - 1.0).abs() <= 0.002 + 1e-12);
        assert!(w.iter().all(|s| s.abs() <= 0.5 + 1e-6));
        let empty = UnitSequence::new(vec![], 6, 50.0).unwrap();
        assert!(voc.synthesize(&empty).unwrap_err().is_validation());
        let big = UnitSequence::new(vec![7], 10, 50.0).unwrap();
        assert!(voc.synthesize(&big).unwrap_err().is_validation());
    }

    #[test]
    fn crossfade_preserves_a_constant_tone() {
        // Same unit on both sides: the overlapping ramps sum to unit gain.
        let w = render_sine(&[3, 3, 3]);
        let f = unit_frequency_hz(3);
        for i in CROSSFADE_SAMPLES..2 * SAMPLES_PER_UNIT + CROSSFADE_SAMPLES {
            let t = i as f64 / SAMPLE_RATE_HZ as f64;
            let want = 0.5 * (2.0 * std::f64::consts::PI * f * t).sin();
            assert!((w[i] as f64 - want).abs() < 1e-5, "sample {i}");
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = render_sine(&[0, 5, 9]);
        write_wav(&w, SAMPLE_RATE_HZ, &p).unwrap();
        let (r, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, SAMPLE_RATE_HZ);
        assert_eq!(r.len(), w.len());
        assert!(r.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn infer_units_shape_and_determinism() {
        let cfg = ModelConfig {
            d_model: 16,
            vocab_size: 5,
            num_units: 7,
            video_dim: 3,
            text_blocks: 1,
            video_blocks: 1,
            attention_heads: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f32>::init(&cfg, 9).unwrap();
        let ph = PhonemeSequence::new(vec![0, 4, 2], 5).unwrap();
        let video =
            VideoFeatureSequence::new(Matrix::from_fn(6, 3, |r, c| (r + c) as f32 * 0.1), 25.0)
                .unwrap();
        for n in [1, 2, 4] {
            let (u, trace) = infer_units(&params, &ph, &video, n).unwrap();
            assert_eq!(u.len(), n * 6);
            assert!(u.units().iter().all(|&x| x < 7));
            assert_eq!(u.unit_rate_hz(), 25.0 * n as f64);
            let (again, _) = infer_units(&params, &ph, &video, n).unwrap();
            assert_eq!(u, again);
            assert_eq!(trace.attention.shape(), (6, 3));
        }
        let wrong = PhonemeSequence::new(vec![0, 9], 10).unwrap();
        assert!(infer_units(&params, &wrong, &video, 2)
            .unwrap_err()
            .is_validation());
    }

    #[cfg(unix)]
    #[test]
    fn external_vocoder_protocol() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        // Backend that copies a fixed wav to the requested output path.
        let fixed = dir.path().join("fixed.wav");
        write_wav(&[0.0, 0.25, -0.25], SAMPLE_RATE_HZ, &fixed).unwrap();
        let script = dir.path().join("voc.sh");
        std::fs::write(
            &script,
            format!(
                "#!/bin/sh\ntest -s \"$1\" || exit 3\ncp '{}' \"$2\"\n",
                fixed.display()
            ),
        )
        .unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        let voc = ExternalVocoder::new(&script);
        let seq = UnitSequence::new(vec![1, 2], 4, 50.0).unwrap();
        let (w, sr) = voc.synthesize_waveform(&seq).unwrap();
        assert_eq!((w.len(), sr), (3, SAMPLE_RATE_HZ));

        let failing = ExternalVocoder::new("/bin/false");
        assert!(matches!(failing.synthesize(&seq), Err(Error::External(_))));
    }
}

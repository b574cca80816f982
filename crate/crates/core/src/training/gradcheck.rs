//! Central finite-difference check of the analytic gradients in 64-bit.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy_sum, diag_loss};
use super::sequence_gradients;
use crate::datamodel::{PhonemeSequence, UnitSequence, Utterance, VideoFeatureSequence};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::{self, Mode, ModelConfig, ModelParams};
use crate::seed;

/// The tiny model used by the default check.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        vocab_size: 5,
        num_units: 7,
        video_dim: 3,
        text_blocks: 1,
        video_blocks: 1,
        predictor_blocks: 1,
        attention_heads: 1,
        conv_filter_size: Some(16),
        dropout: 0.0,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Entries probed per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    /// Relative error is `|a − f| / max(|a|, |f|, floor)`.
    pub relative_floor: f64,
    pub diag_weight: f64,
    pub diag_bandwidth: f64,
    pub phoneme_len: usize,
    pub video_len: usize,
    pub upsample_ratio: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 24,
            relative_floor: 1e-6,
            diag_weight: 1.0,
            diag_bandwidth: 0.2,
            phoneme_len: 3,
            video_len: 4,
            upsample_ratio: 2,
            seed: 0,
        }
    }
}

/// Inputs and targets of the single sequence the objective is evaluated on.
#[derive(Debug, Clone)]
pub struct GradCheckExample {
    pub utterance: Utterance,
    pub n: usize,
}

impl GradCheckExample {
    pub fn random(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, 21, 0));
        let ids = (0..opts.phoneme_len)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        let frames = Matrix::from_fn(opts.video_len, cfg.video_dim, |_, _| {
            rng.sample::<f32, _>(StandardNormal)
        });
        let units = (0..opts.video_len * opts.upsample_ratio)
            .map(|_| rng.random_range(0..cfg.num_units))
            .collect();
        let utterance = Utterance {
            id: "gradcheck".into(),
            phonemes: PhonemeSequence::new(ids, cfg.vocab_size)?,
            video: VideoFeatureSequence::new(frames, 25.0)?,
            units: Some(UnitSequence::new(
                units,
                cfg.num_units,
                25.0 * opts.upsample_ratio as f64,
            )?),
            gt_alignment: None,
        };
        Ok(Self {
            utterance,
            n: opts.upsample_ratio,
        })
    }
}

/// `L_pred + λ · L_diag` with mean frame reduction, evaluated without dropout.
pub fn objective(
    params: &ModelParams<f64>,
    ex: &GradCheckExample,
    opts: &GradCheckOptions,
) -> Result<f64> {
    let utt = &ex.utterance;
    let trace = model::forward(params, &utt.phonemes, &utt.video, ex.n, &mut Mode::Eval)?;
    let targets = utt.units.as_ref().expect("example has units").units();
    let (ce, _) = cross_entropy_sum(&trace.logits, targets, None, None)?;
    let l_diag = diag_loss(&trace.attention, opts.diag_bandwidth)?;
    Ok(ce.sum / ce.frames as f64 + opts.diag_weight * l_diag)
}

/// Backprop gradients of [`objective`].
pub fn analytic_gradients(
    params: &ModelParams<f64>,
    ex: &GradCheckExample,
    opts: &GradCheckOptions,
) -> Result<Vec<Matrix<f64>>> {
    let frames = ex.utterance.video.len() * ex.n;
    let out = sequence_gradients(
        params,
        &ex.utterance,
        ex.n,
        1.0 / frames as f64,
        opts.diag_weight,
        opts.diag_bandwidth,
        &mut Mode::Eval,
    )?;
    Ok(out.grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    /// Names of tensors that exceeded the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }
}

/// Compares `analytic` against central differences on sampled entries.
pub fn compare_gradients(
    params: &ModelParams<f64>,
    analytic: &[Matrix<f64>],
    ex: &GradCheckExample,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let loss = objective(params, ex, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, 22, 0));
    let probes: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| {
            let picks = if t.len() <= opts.samples_per_tensor {
                (0..t.len()).collect::<Vec<_>>()
            } else {
                index::sample(&mut rng, t.len(), opts.samples_per_tensor).into_vec()
            };
            picks.into_iter().map(move |k| (ti, k))
        })
        .collect();
    let numeric: Vec<f64> = probes
        .par_iter()
        .map(|&(ti, k)| {
            let mut p = params.clone();
            let orig = p.tensor(ti).as_slice()[k];
            p.tensors_mut()[ti].as_mut_slice()[k] = orig + opts.epsilon;
            let plus = objective(&p, ex, opts)?;
            p.tensors_mut()[ti].as_mut_slice()[k] = orig - opts.epsilon;
            let minus = objective(&p, ex, opts)?;
            Ok((plus - minus) / (2.0 * opts.epsilon))
        })
        .collect::<Result<_>>()?;

    let mut tensors: Vec<TensorCheck> = params
        .names()
        .iter()
        .map(|name| TensorCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            passed: true,
        })
        .collect();
    for (&(ti, k), &f) in probes.iter().zip(&numeric) {
        let a = analytic[ti].as_slice()[k];
        let abs = (a - f).abs();
        let rel = abs / a.abs().max(f.abs()).max(opts.relative_floor);
        let t = &mut tensors[ti];
        t.checked += 1;
        t.max_abs_error = t.max_abs_error.max(abs);
        t.max_rel_error = t.max_rel_error.max(rel);
    }
    for t in &mut tensors {
        t.passed = t.max_rel_error < opts.tolerance;
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
        loss,
        max_rel_error,
        passed: tensors.iter().all(|t| t.passed),
        tensors,
    })
}

/// Fresh random init of `model_cfg`, one random example, full comparison.
pub fn grad_check(model_cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let params = ModelParams::<f64>::init(model_cfg, seed::derive(opts.seed, 20, 0))?;
    let ex = GradCheckExample::random(model_cfg, opts)?;
    let analytic = analytic_gradients(&params, &ex, opts)?;
    compare_gradients(&params, &analytic, &ex, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_init_passes() {
        let report = grad_check(&grad_check_config(), &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{report:#?}");
        assert!(report.tensors.iter().all(|t| t.checked > 0));
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let cfg = grad_check_config();
        let opts = GradCheckOptions::default();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let ex = GradCheckExample::random(&cfg, &opts).unwrap();
        let mut analytic = analytic_gradients(&params, &ex, &opts).unwrap();
        let ti = params.index_of("predictor.classifier.w").unwrap();
        // corrupt the largest entry so it is certainly probed (tensor is sampled)
        let all = GradCheckOptions {
            samples_per_tensor: usize::MAX,
            ..opts.clone()
        };
        let slice = analytic[ti].as_mut_slice();
        let k = (0..slice.len())
            .max_by(|&a, &b| slice[a].abs().total_cmp(&slice[b].abs()))
            .unwrap();
        slice[k] *= 1.1;
        let report = compare_gradients(&params, &analytic, &ex, &all).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures(), vec!["predictor.classifier.w"]);
    }

    #[test]
    fn error_shrinks_quadratically_with_epsilon() {
        // ε = 1e-3 and 5e-4 keep truncation error well above round-off.
        let cfg = grad_check_config();
        let opts = GradCheckOptions::default();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let ex = GradCheckExample::random(&cfg, &opts).unwrap();
        let analytic = analytic_gradients(&params, &ex, &opts).unwrap();
        let ti = params.index_of("text.block0.attn.qkv.w").unwrap();
        let k = 3;
        let fd = |eps: f64| {
            let mut p = params.clone();
            let orig = p.tensor(ti).as_slice()[k];
            p.tensors_mut()[ti].as_mut_slice()[k] = orig + eps;
            let plus = objective(&p, &ex, &opts).unwrap();
            p.tensors_mut()[ti].as_mut_slice()[k] = orig - eps;
            let minus = objective(&p, &ex, &opts).unwrap();
            (plus - minus) / (2.0 * eps)
        };
        let a = analytic[ti].as_slice()[k];
        let e1 = (fd(1e-3) - a).abs();
        let e2 = (fd(5e-4) - a).abs();
        let ratio = e1 / e2;
        assert!(
            (3.0..5.0).contains(&ratio),
            "ratio {ratio} (e1 {e1}, e2 {e2})"
        );
    }
}

//! Objective metrics: unit accuracy, DTW frame disturbance and attention
//! diagonality, plus the per-split evaluation report.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, UnitSequence};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::model::{self, Mode, ModelParams};
use crate::tokenizer::Codebook;
use crate::training::diagonal_band;

/// Bandwidth `g` shared by the diagonal loss and the diagonality score.
pub const DEFAULT_DIAG_BANDWIDTH: f64 = 0.2;

/// Fraction of positions where `pred` and `gt` agree.
pub fn unit_accuracy(pred: &UnitSequence, gt: &UnitSequence) -> Result<f64> {
    unit_accuracy_ids(pred.units(), gt.units())
}

pub fn unit_accuracy_ids(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "unit sequences differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::validation("unit accuracy of empty sequences"));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// A monotone warping path from `(0, 0)` to `(T_a − 1, T_b − 1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
}

impl DtwPath {
    /// Checks the boundary and step conditions.
    pub fn is_valid(&self, t_a: usize, t_b: usize) -> bool {
        let (Some(&first), Some(&last)) = (self.pairs.first(), self.pairs.last()) else {
            return false;
        };
        first == (0, 0)
            && last == (t_a - 1, t_b - 1)
            && self.pairs.windows(2).all(|w| {
                let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
                matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
            })
    }
}

pub fn squared_euclidean<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// DTW over the rows of `a` and `b` with squared-Euclidean local cost.
pub fn dtw<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<(f64, DtwPath)> {
    if a.cols() != b.cols() {
        return Err(Error::validation(format!(
            "DTW inputs differ in dimension: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    dtw_with(a.rows(), b.rows(), |i, j| {
        squared_euclidean(a.row(i), b.row(j))
    })
}

/// DTW on an arbitrary local cost `dist(i, j)`. Backtracking ties prefer
/// the diagonal step, then `(1, 0)`, then `(0, 1)`.
pub fn dtw_with(
    t_a: usize,
    t_b: usize,
    mut dist: impl FnMut(usize, usize) -> f64,
) -> Result<(f64, DtwPath)> {
    if t_a == 0 || t_b == 0 {
        return Err(Error::validation("DTW of an empty sequence"));
    }
    let idx = |i: usize, j: usize| i * t_b + j;
    let mut acc = vec![f64::INFINITY; t_a * t_b];
    for i in 0..t_a {
        for j in 0..t_b {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(acc[idx(i - 1, j - 1)]);
                }
                if i > 0 {
                    b = b.min(acc[idx(i - 1, j)]);
                }
                if j > 0 {
                    b = b.min(acc[idx(i, j - 1)]);
                }
                b
            };
            acc[idx(i, j)] = best + dist(i, j);
        }
    }
    let cost = acc[idx(t_a - 1, t_b - 1)];
    if !cost.is_finite() {
        return Err(Error::numeric("dtw", "non-finite alignment cost"));
    }
    let (mut i, mut j) = (t_a - 1, t_b - 1);
    let mut pairs = vec![(i, j)];
    while (i, j) != (0, 0) {
        // A forward step (1,0) arrives from (i−1, j); prefer diagonal, then that.
        let mut cands = Vec::with_capacity(3);
        if i > 0 && j > 0 {
            cands.push((i - 1, j - 1));
        }
        if i > 0 {
            cands.push((i - 1, j));
        }
        if j > 0 {
            cands.push((i, j - 1));
        }
        let mut pick = cands[0];
        for &c in &cands[1..] {
            if acc[idx(c.0, c.1)] < acc[idx(pick.0, pick.1)] {
                pick = c;
            }
        }
        (i, j) = pick;
        pairs.push(pick);
    }
    pairs.reverse();
    Ok((cost, DtwPath { pairs }))
}

/// RMS of `i − j` over the DTW path between `gen` and `gt`, in frames.
pub fn frame_disturbance<T: Real>(gen: &Matrix<T>, gt: &Matrix<T>) -> Result<f64> {
    let (_, path) = dtw(gen, gt)?;
    Ok(path_rms_deviation(&path))
}

pub fn path_rms_deviation(path: &DtwPath) -> f64 {
    let sq: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| {
            let d = i as f64 - j as f64;
            d * d
        })
        .sum();
    (sq / path.pairs.len() as f64).sqrt()
}

fn check_stochastic<T: Real>(a: &Matrix<T>) -> Result<()> {
    if a.is_empty() {
        return Err(Error::validation("attention matrix is empty"));
    }
    for t in 0..a.rows() {
        let row = a.row(t);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| v.as_f64() < -1e-12) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::validation(format!(
                "attention row {t} is not stochastic (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Attention mass inside the Gaussian diagonal band, averaged over rows.
pub fn diagonality_score<T: Real>(attention: &Matrix<T>) -> Result<f64> {
    diagonality_score_with(attention, DEFAULT_DIAG_BANDWIDTH)
}

pub fn diagonality_score_with<T: Real>(attention: &Matrix<T>, bandwidth: f64) -> Result<f64> {
    check_stochastic(attention)?;
    let (t_v, t_p) = attention.shape();
    let band = diagonal_band(t_v, t_p, bandwidth)?;
    let mut s = 0.0;
    for t in 0..t_v {
        for (a, w) in attention.row(t).iter().zip(band.row(t)) {
            s += a.as_f64() * w;
        }
    }
    Ok(s / t_v as f64)
}

/// Fraction of adjacent row pairs whose argmax does not move backwards.
pub fn argmax_monotone_fraction<T: Real>(attention: &Matrix<T>) -> f64 {
    let arg = attention.argmax_rows();
    if arg.len() < 2 {
        return 1.0;
    }
    let ok = arg.windows(2).filter(|w| w[1] >= w[0]).count();
    ok as f64 / (arg.len() - 1) as f64
}

/// Metrics of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    pub frames: usize,
    pub unit_accuracy: f64,
    pub frame_disturbance: f64,
    pub diagonality_score: f64,
    pub monotone_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub utterances: usize,
    pub unit_accuracy: f64,
    /// Frame-weighted accuracy over all units of the split.
    pub pooled_unit_accuracy: f64,
    pub frame_disturbance: f64,
    pub diagonality_score: f64,
    pub monotone_fraction: f64,
    /// Externally computed lip-sync confidence, if supplied.
    pub lse_c: Option<f64>,
    /// Externally computed lip-sync distance, if supplied.
    pub lse_d: Option<f64>,
    /// Externally computed word error rate, if supplied.
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    /// `codebook` when FD compares centroid features, `one-hot` otherwise.
    pub fd_features: String,
    pub diag_bandwidth: f64,
    pub aggregate: AggregateReport,
    pub per_utterance: Vec<UtteranceReport>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn one_hot(units: &[usize], k: usize) -> Matrix<f32> {
    Matrix::from_fn(units.len(), k, |t, c| if units[t] == c { 1.0 } else { 0.0 })
}

/// Scores a unit prediction against ground truth. FD compares centroid
/// lookups when a codebook is given, one-hot unit vectors otherwise.
pub fn score_prediction(
    id: &str,
    pred: &UnitSequence,
    gt: &UnitSequence,
    attention: &Matrix<f32>,
    codebook: Option<&Codebook>,
    bandwidth: f64,
) -> Result<UtteranceReport> {
    let acc = unit_accuracy(pred, gt)?;
    let fd = match codebook {
        Some(cb) => frame_disturbance(&cb.centroid_lookup(pred)?, &cb.centroid_lookup(gt)?)?,
        None => {
            let k = gt.num_units().max(pred.num_units());
            frame_disturbance(&one_hot(pred.units(), k), &one_hot(gt.units(), k))?
        }
    };
    Ok(UtteranceReport {
        id: id.to_string(),
        frames: gt.len(),
        unit_accuracy: acc,
        frame_disturbance: fd,
        diagonality_score: diagonality_score_with(attention, bandwidth)?,
        monotone_fraction: argmax_monotone_fraction(attention),
    })
}

pub fn aggregate(per_utterance: &[UtteranceReport]) -> Result<AggregateReport> {
    if per_utterance.is_empty() {
        return Err(Error::validation("no utterances to aggregate"));
    }
    let n = per_utterance.len() as f64;
    let mean = |f: fn(&UtteranceReport) -> f64| per_utterance.iter().map(f).sum::<f64>() / n;
    let frames: usize = per_utterance.iter().map(|u| u.frames).sum();
    let hits: f64 = per_utterance
        .iter()
        .map(|u| u.unit_accuracy * u.frames as f64)
        .sum();
    Ok(AggregateReport {
        utterances: per_utterance.len(),
        unit_accuracy: mean(|u| u.unit_accuracy),
        pooled_unit_accuracy: hits / frames as f64,
        frame_disturbance: mean(|u| u.frame_disturbance),
        diagonality_score: mean(|u| u.diagonality_score),
        monotone_fraction: mean(|u| u.monotone_fraction),
        lse_c: None,
        lse_d: None,
        wer: None,
    })
}

/// Runs the model on every utterance of `split` and scores it.
pub fn evaluate(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    split: &str,
    codebook: Option<&Codebook>,
) -> Result<EvalReport> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::validation(format!(
            "split {split:?} has no utterances"
        )));
    }
    if let Some(cb) = codebook {
        if cb.k() != corpus.metadata.num_units {
            return Err(Error::validation(format!(
                "codebook has K={} but the corpus uses K={}",
                cb.k(),
                corpus.metadata.num_units
            )));
        }
    }
    let n = corpus.upsample_ratio()?;
    let unit_rate = corpus.metadata.unit_rate_hz;
    let bandwidth = DEFAULT_DIAG_BANDWIDTH;
    let per_utterance = idx
        .par_iter()
        .map(|&i| {
            let utt = &corpus.utterances[i];
            let gt = utt.units.as_ref().ok_or_else(|| {
                Error::validation(format!("utterance {} has no ground-truth units", utt.id))
            })?;
            let trace = model::forward(params, &utt.phonemes, &utt.video, n, &mut Mode::Eval)?;
            let pred = model::decode_units(&trace.logits, unit_rate)?;
            score_prediction(&utt.id, &pred, gt, &trace.attention, codebook, bandwidth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        split: split.to_string(),
        fd_features: if codebook.is_some() {
            "codebook"
        } else {
            "one-hot"
        }
        .into(),
        diag_bandwidth: bandwidth,
        aggregate: aggregate(&per_utterance)?,
        per_utterance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::diag_loss;
    use proptest::prelude::*;

    fn scalars(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    fn us(v: &[usize]) -> UnitSequence {
        UnitSequence::new(v.to_vec(), 10, 50.0).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(
            unit_accuracy(&us(&[1, 2, 3]), &us(&[1, 2, 3])).unwrap(),
            1.0
        );
        assert_eq!(unit_accuracy(&us(&[1, 2]), &us(&[3, 4])).unwrap(), 0.0);
        assert_eq!(
            unit_accuracy(&us(&[1, 2, 3, 4]), &us(&[1, 2, 0, 0])).unwrap(),
            0.5
        );
        assert!(unit_accuracy(&us(&[1]), &us(&[1, 2]))
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn dtw_degenerate_and_identity() {
        let (c, p) = dtw(&scalars(&[0.0]), &scalars(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(p.pairs, vec![(0, 0), (0, 1), (0, 2)]);
        let x = scalars(&[1.0, -2.0, 0.5, 3.0]);
        let (c, p) = dtw(&x, &x).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(p.pairs, (0..4).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(dtw(&Matrix::<f64>::zeros(0, 1), &x).is_err());
    }

    #[test]
    fn one_frame_lag_has_unit_disturbance() {
        // gen repeats the first frame, then follows gt shifted by one.
        let t = 50;
        let gt = scalars(&(0..t).map(|i| i as f64).collect::<Vec<_>>());
        let mut g = vec![0.0];
        g.extend((0..t - 1).map(|i| i as f64));
        let gen = scalars(&g);
        let (cost, path) = dtw(&gen, &gt).unwrap();
        // Hand-built optimal path: (0,0), (1,0), (2,1), …, (49,48), (49,49).
        let mut expected = vec![(0, 0)];
        expected.extend((1..t).map(|i| (i, i - 1)));
        expected.push((t - 1, t - 1));
        assert_eq!(cost, 1.0);
        assert_eq!(path.pairs, expected);
        let fd = frame_disturbance(&gen, &gt).unwrap();
        let exact = ((t - 1) as f64 / (t + 1) as f64).sqrt();
        assert!((fd - exact).abs() < 1e-12);
        assert!((fd - 1.0).abs() < 0.02);
    }

    #[test]
    fn diagonal_and_uniform_scores() {
        let eye = Matrix::from_fn(8, 8, |r, c| if r == c { 1.0f64 } else { 0.0 });
        assert!(diagonality_score(&eye).unwrap() >= 0.99);
        let uni = Matrix::filled(8, 8, 1.0f64 / 8.0);
        let mut grid = 0.0;
        for t in 0..8 {
            for s in 0..8 {
                let d = s as f64 / 8.0 - t as f64 / 8.0;
                grid += (-d * d / (2.0 * 0.04)).exp();
            }
        }
        let score = diagonality_score(&uni).unwrap();
        assert!((score - grid / 64.0).abs() < 1e-12);
        let bad = Matrix::filled(2, 2, 0.4f64);
        assert!(diagonality_score(&bad).unwrap_err().is_validation());
    }

    #[test]
    fn monotone_fraction_counts_pairs() {
        let a = Matrix::from_rows(&[
            vec![1.0f64, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!((argmax_monotone_fraction(&a) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_prediction_scores_perfectly() {
        let gt = us(&[3, 3, 1, 4, 4, 4]);
        let a = Matrix::from_fn(3, 3, |r, c| if r == c { 1.0f32 } else { 0.0 });
        let r = score_prediction("u", &gt, &gt, &a, None, 0.2).unwrap();
        assert_eq!(r.unit_accuracy, 1.0);
        assert_eq!(r.frame_disturbance, 0.0);
        let agg = aggregate(&[r]).unwrap();
        let json = serde_json::to_string(&agg).unwrap();
        assert_eq!(serde_json::from_str::<AggregateReport>(&json).unwrap(), agg);
    }

    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
            let d = (a[i] - b[j]).powi(2);
            if i + 1 == a.len() && j + 1 == b.len() {
                return d;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            d + best
        }
        go(a, b, 0, 0)
    }

    proptest! {
        #[test]
        fn dtw_matches_enumeration(
            a in prop::collection::vec(-3.0f64..3.0, 1..7),
            b in prop::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            prop_assume!(a.len() * b.len() <= 30);
            let (cost, path) = dtw(&scalars(&a), &scalars(&b)).unwrap();
            prop_assert!(path.is_valid(a.len(), b.len()));
            let along: f64 = path.pairs.iter().map(|&(i, j)| (a[i] - b[j]).powi(2)).sum();
            prop_assert!((along - cost).abs() < 1e-9);
            prop_assert!((cost - brute_force(&a, &b)).abs() < 1e-9);
            let (rev, _) = dtw(&scalars(&b), &scalars(&a)).unwrap();
            prop_assert!((rev - cost).abs() < 1e-9);
        }

        #[test]
        fn score_complements_diag_loss(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() + 1e-3);
            for r in 0..rows {
                let s: f64 = a.row(r).iter().sum();
                a.row_mut(r).iter_mut().for_each(|v| *v /= s);
            }
            let total = diagonality_score(&a).unwrap() + diag_loss(&a, 0.2).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn fd_is_zero_on_identity_and_reversal_invariant(
            pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
        ) {
            // Reversal maps i − j to (T−1−i) − (T−1−j), so equal lengths keep FD.
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert_eq!(frame_disturbance(&scalars(&a), &scalars(&a)).unwrap(), 0.0);
            let fwd = frame_disturbance(&scalars(&a), &scalars(&b)).unwrap();
            let ra: Vec<f64> = a.iter().rev().copied().collect();
            let rb: Vec<f64> = b.iter().rev().copied().collect();
            let back = frame_disturbance(&scalars(&ra), &scalars(&rb)).unwrap();
            prop_assert!((fwd - back).abs() < 1e-9, "{} vs {}", fwd, back);
        }
    }
}

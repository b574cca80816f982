//! k-means unit tokenizer.
//!
//! Fits a codebook on feature frames with seeded k-means++ initialisation and
//! Lloyd iterations, then maps frames to the index of their nearest centroid.
//! Distances are squared Euclidean, accumulated in f64; ties go to the
//! smallest centroid index.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{read_features, write_features, UnitSequence};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

const CENTROIDS_FILE: &str = "centroids.feat";
const SIDECAR_FILE: &str = "codebook.json";

/// K centroids of dimension `d_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Matrix<f32>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodebookSidecar {
    #[serde(rename = "K")]
    k: usize,
    d_f: usize,
    seed: u64,
}

/// Trace of a k-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean squared distance to the assigned centroid, one entry per Lloyd iteration.
    pub distortions: Vec<f64>,
    pub iterations: usize,
    pub reseeded_clusters: usize,
}

impl Codebook {
    pub fn new(centroids: Matrix<f32>, seed: u64) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::validation(
                "codebook must have at least one centroid",
            ));
        }
        if !centroids.is_finite() {
            return Err(Error::validation("codebook contains non-finite values"));
        }
        for i in 0..centroids.rows() {
            for j in 0..i {
                if centroids.row(i) == centroids.row(j) {
                    return Err(Error::validation(format!(
                        "centroids {j} and {i} are identical"
                    )));
                }
            }
        }
        Ok(Self { centroids, seed })
    }

    /// Number of clusters K.
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &Matrix<f32> {
        &self.centroids
    }

    pub fn nearest(&self, frame: &[f32]) -> usize {
        nearest_centroid(&self.centroids, frame).0
    }

    /// Maps each frame to its nearest centroid.
    pub fn encode_units(&self, features: &Matrix<f32>, unit_rate_hz: f64) -> Result<UnitSequence> {
        if features.cols() != self.dim() {
            return Err(Error::validation(format!(
                "feature dimension {} does not match codebook dimension {}",
                features.cols(),
                self.dim()
            )));
        }
        let units = (0..features.rows())
            .map(|t| self.nearest(features.row(t)))
            .collect();
        UnitSequence::new(units, self.k(), unit_rate_hz)
    }

    /// Row `t` of the result is the centroid of `units[t]`.
    pub fn centroid_lookup(&self, units: &UnitSequence) -> Result<Matrix<f32>> {
        let mut out = Matrix::zeros(units.len(), self.dim());
        for (t, &u) in units.units().iter().enumerate() {
            if u >= self.k() {
                return Err(Error::validation(format!(
                    "unit {u} out of range for codebook of {}",
                    self.k()
                )));
            }
            out.row_mut(t).copy_from_slice(self.centroids.row(u));
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_features(&self.centroids, dir.join(CENTROIDS_FILE))?;
        let sidecar = CodebookSidecar {
            k: self.k(),
            d_f: self.dim(),
            seed: self.seed,
        };
        let path = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: CodebookSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let centroids = read_features(dir.join(CENTROIDS_FILE))?;
        if centroids.shape() != (sidecar.k, sidecar.d_f) {
            return Err(Error::format(
                dir,
                format!(
                    "centroids are {:?} but sidecar says K={} d_f={}",
                    centroids.shape(),
                    sidecar.k,
                    sidecar.d_f
                ),
            ));
        }
        Self::new(centroids, sidecar.seed)
    }
}

fn squared_distance<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum()
}

fn nearest_centroid<C>(centroids: &Matrix<C>, frame: &[f32]) -> (usize, f64)
where
    C: crate::matrix::Real + Into<f64>,
{
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = squared_distance(frame, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Fits a codebook with default iteration limits.
pub fn fit_kmeans(features: &Matrix<f32>, k: usize, seed: u64) -> Result<Codebook> {
    fit_kmeans_with(features, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL).map(|(cb, _)| cb)
}

/// Seeded k-means++ followed by Lloyd iterations.
///
/// Stops after `max_iters` iterations or once the relative distortion
/// improvement drops below `tol`. Empty clusters are reseeded with the point
/// farthest from its assigned centroid.
pub fn fit_kmeans_with(
    features: &Matrix<f32>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(Codebook, FitReport)> {
    let m = features.rows();
    let dim = features.cols();
    if k == 0 {
        return Err(Error::validation("K must be positive"));
    }
    if m < k {
        return Err(Error::validation(format!(
            "need at least K={k} feature frames, got {m}"
        )));
    }
    if dim == 0 {
        return Err(Error::validation("features have zero dimension"));
    }
    if !features.is_finite() {
        return Err(Error::validation("features contain non-finite values"));
    }
    if max_iters == 0 {
        return Err(Error::validation("max_iters must be at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng)?;
    let mut assignment = vec![0usize; m];
    let mut dists = vec![0f64; m];
    let mut distortions: Vec<f64> = Vec::new();
    let mut reseeded_clusters = 0;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        for i in 0..m {
            let (a, d) = nearest_centroid(&centroids, features.row(i));
            assignment[i] = a;
            dists[i] = d;
        }

        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point whose cluster would not become empty by moving it.
            let far = (0..m)
                .filter(|&i| !taken[i] && counts[assignment[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::validation("too few distinct points for K clusters"))?;
            taken[far] = true;
            counts[assignment[far]] -= 1;
            counts[c] = 1;
            assignment[far] = c;
            dists[far] = 0.0;
            centroids.row_mut(c).copy_from_slice(
                &features
                    .row(far)
                    .iter()
                    .map(|&v| v as f64)
                    .collect::<Vec<_>>(),
            );
            reseeded_clusters += 1;
        }

        let distortion = dists.iter().sum::<f64>() / m as f64;
        if let Some(&prev) = distortions.last() {
            debug_assert!(
                distortion <= prev * (1.0 + 1e-12) + 1e-300,
                "distortion increased from {prev} to {distortion}"
            );
        }
        distortions.push(distortion);

        let mut sums = Matrix::<f64>::zeros(k, dim);
        for i in 0..m {
            let row = sums.row_mut(assignment[i]);
            for (s, &v) in row.iter_mut().zip(features.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }

        if distortions.len() >= 2 {
            let prev = distortions[distortions.len() - 2];
            if prev <= 0.0 || (prev - distortion) / prev < tol {
                break;
            }
        } else if distortion == 0.0 {
            break;
        }
    }

    let codebook = Codebook::new(centroids.cast::<f32>(), seed)?;
    Ok((
        codebook,
        FitReport {
            distortions,
            iterations,
            reseeded_clusters,
        },
    ))
}

fn kmeans_plus_plus(features: &Matrix<f32>, k: usize, rng: &mut ChaCha8Rng) -> Result<Matrix<f64>> {
    let m = features.rows();
    let dim = features.cols();
    let mut centroids = Matrix::<f64>::zeros(k, dim);
    let first = rng.random_range(0..m);
    let copy_row = |dst: &mut [f64], src: &[f32]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s as f64;
        }
    };
    copy_row(centroids.row_mut(0), features.row(first));
    let mut closest: Vec<f64> = (0..m)
        .map(|i| squared_distance(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        if total <= 0.0 {
            return Err(Error::validation(format!(
                "features contain fewer than K={k} distinct points"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in closest.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total weight implies a candidate");
        copy_row(centroids.row_mut(c), features.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(squared_distance(features.row(i), centroids.row(c)));
        }
    }
    Ok(centroids)
}

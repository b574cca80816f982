//! Trainable weights and their named layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: usize,
    pub beta: usize,
}

/// Parameter indices of one feed-forward Transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FftBlockParams {
    /// Fused query/key/value projection, `d × 3d`.
    pub qkv: Linear,
    pub out: Linear,
    pub attn_norm: LayerNormParams,
    /// `(k1 · d) × filter`.
    pub conv1: Linear,
    /// `(k2 · filter) × d`.
    pub conv2: Linear,
    pub ff_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub phoneme_embedding: usize,
    pub video_proj: Linear,
    pub text_blocks: Vec<FftBlockParams>,
    pub video_blocks: Vec<FftBlockParams>,
    pub predictor_blocks: Vec<FftBlockParams>,
    pub classifier: Linear,
}

enum Init {
    Normal(f64),
    Xavier { fan_in: usize, fan_out: usize },
    Const(f64),
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rows: usize,
        cols: usize,
    ) -> Linear {
        Linear {
            w: self.add(
                format!("{prefix}.w"),
                rows,
                cols,
                Init::Xavier { fan_in, fan_out },
            ),
            b: self.add(format!("{prefix}.b"), 1, cols, Init::Const(0.0)),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.add(format!("{prefix}.gamma"), 1, d, Init::Const(1.0)),
            beta: self.add(format!("{prefix}.beta"), 1, d, Init::Const(0.0)),
        }
    }

    fn fft_block(&mut self, prefix: &str, cfg: &ModelConfig) -> FftBlockParams {
        let d = cfg.d_model;
        let f = cfg.filter_size();
        let [k1, k2] = cfg.conv_kernel_sizes;
        FftBlockParams {
            qkv: self.linear(&format!("{prefix}.attn.qkv"), d, d, d, 3 * d),
            out: self.linear(&format!("{prefix}.attn.out"), d, d, d, d),
            attn_norm: self.norm(&format!("{prefix}.attn_norm"), d),
            conv1: self.linear(&format!("{prefix}.conv1"), k1 * d, k1 * f, k1 * d, f),
            conv2: self.linear(&format!("{prefix}.conv2"), k2 * f, k2 * d, k2 * f, d),
            ff_norm: self.norm(&format!("{prefix}.ff_norm"), d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, Vec<Spec>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let phoneme_embedding = b.add(
        "text.embedding".into(),
        cfg.vocab_size,
        d,
        Init::Normal(1.0),
    );
    let text_blocks = (0..cfg.text_blocks)
        .map(|i| b.fft_block(&format!("text.block{i}"), cfg))
        .collect();
    let video_proj = b.linear("video.proj", cfg.video_dim, d, cfg.video_dim, d);
    let video_blocks = (0..cfg.video_blocks)
        .map(|i| b.fft_block(&format!("video.block{i}"), cfg))
        .collect();
    let predictor_blocks = (0..cfg.predictor_blocks)
        .map(|i| b.fft_block(&format!("predictor.block{i}"), cfg))
        .collect();
    let classifier = b.linear("predictor.classifier", d, cfg.num_units, d, cfg.num_units);
    (
        ParamLayout {
            phoneme_embedding,
            video_proj,
            text_blocks,
            video_blocks,
            predictor_blocks,
            classifier,
        },
        b.specs,
    )
}

/// Sinusoidal position table, `max_len × d`.
pub fn sinusoidal_positions<T: Real>(max_len: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(max_len, d, |pos, c| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        T::from_f64_lossy(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// All weights of the model plus the fixed positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    positions: Matrix<T>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialisation: Xavier-uniform weights, N(0, 1) embeddings,
    /// zero biases and unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let m = match spec.init {
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Matrix::from_fn(spec.rows, spec.cols, |_, _| {
                        T::from_f64_lossy(normal.sample(&mut rng))
                    })
                }
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Matrix::from_fn(spec.rows, spec.cols, |_, _| {
                        T::from_f64_lossy(rng.random_range(-a..a))
                    })
                }
                Init::Const(v) => Matrix::filled(spec.rows, spec.cols, T::from_f64_lossy(v)),
            };
            names.push(spec.name);
            tensors.push(m);
        }
        Ok(Self {
            positions: sinusoidal_positions(config.max_seq_len, config.d_model),
            config: config.clone(),
            layout,
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors (e.g. loaded from a checkpoint).
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        if specs.len() != tensors.len() {
            return Err(Error::validation(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if t.shape() != (spec.rows, spec.cols) {
                return Err(Error::validation(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    (spec.rows, spec.cols)
                )));
            }
            if !t.is_finite() {
                return Err(Error::validation(format!(
                    "tensor {} is not finite",
                    spec.name
                )));
            }
        }
        Ok(Self {
            positions: sinusoidal_positions(config.max_seq_len, config.d_model),
            config: config.clone(),
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Tensor names in layout order for a configuration.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        build_layout(config).1.into_iter().map(|s| s.name).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Matrix<T> {
        &self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn positions(&self) -> &Matrix<T> {
        &self.positions
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Zero-valued tensors shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
            positions: sinusoidal_positions(self.config.max_seq_len, self.config.d_model),
        }
    }
}

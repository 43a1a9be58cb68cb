//! Desk-scale experiments: run configuration, synthetic datasets, IDX
//! ingestion, the training loop, method sweeps and reconstruction dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{
    adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, DiffError, ParamVector,
};
use crate::dist::{stream_rng, Dist, DistError, GaussianKde, Rng64};
use crate::losses::{
    batch_deltas, evaluate, reconstruct, reconstruction_log_likelihood, Batch, Diagnostics,
    LossConfig, LossError, Networks, Objective, Term,
};
use crate::matrix::Matrix;
use crate::nnmodel::{
    Activation, DeterministicEncoder, Encoder, GaussianLatentModel, ModelError, StochasticEncoder,
};
use crate::psr::{CurveRow, DEFAULT_CLIP_THRESHOLD};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown dataset generator {0:?}")]
    UnknownGenerator(String),
    #[error("IDX file: {0}")]
    Idx(String),
    #[error(
        "non-finite loss at epoch {epoch}, step {step}: mean delta on data {mean_delta_data}, \
         on noise {mean_delta_noise}, {clip_count} clipped exponentials"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        mean_delta_data: f64,
        mean_delta_noise: f64,
        clip_count: usize,
    },
    #[error("dimension mismatch: model expects {expected} inputs, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ae,
    Vae,
    Rvae,
    Fvnce,
    J01,
    J10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianMixture,
    BinaryPatterns,
    Idx,
}

impl std::str::FromStr for Generator {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" => Ok(Generator::GaussianMixture),
            "binary-patterns" => Ok(Generator::BinaryPatterns),
            "idx" => Ok(Generator::Idx),
            other => Err(ExperimentError::UnknownGenerator(other.to_string())),
        }
    }
}

/// Flat run configuration. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the configured term; the remainder goes to the `(0, 0)` term.
    pub mix_weight: f64,
    pub drop_constant_term: bool,
    pub normalized: bool,
    pub tie_encoders: bool,
    pub mc_samples: usize,
    pub clip_threshold: f64,

    pub encoder: EncoderKind,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma_dec: f64,
    /// Defaults to `2 * sigma_dec`.
    pub sigma_kde: Option<f64>,

    pub dataset: String,
    pub components: usize,
    /// Mixture means are drawn uniformly from `mean_center +- mean_spread`.
    pub mean_center: f64,
    pub mean_spread: f64,
    pub manifold_rank: usize,
    pub manifold_scale: f64,
    pub data_noise: f64,
    pub flip_prob: f64,
    pub idx_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Restrict the KDE centers to validation samples of this component.
    pub noise_cluster: Option<usize>,
    pub kde_centers: usize,
    pub eval_samples: usize,

    pub epochs: usize,
    pub batch_size: usize,
    /// Noise rows drawn per data row in each training step.
    pub noise_ratio: usize,
    pub lr: f64,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    /// Write measured seconds into the `wall_time` column (otherwise 0).
    pub record_wall_time: bool,
    /// Method names for `sweep`, e.g. `"ae"`, `"vae"`, `"(1/64,0)"`.
    pub variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Vae,
            alpha: 0.0,
            beta: 0.0,
            mix_weight: 1.0,
            drop_constant_term: true,
            normalized: true,
            tie_encoders: true,
            mc_samples: 1,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
            encoder: EncoderKind::Stochastic,
            data_dim: 64,
            latent_dim: 8,
            hidden: vec![32],
            activation: Activation::Relu,
            sigma_dec: 0.125,
            sigma_kde: None,
            dataset: "gaussian-mixture".into(),
            components: 8,
            mean_center: 0.5,
            mean_spread: 0.3,
            manifold_rank: 3,
            manifold_scale: 0.15,
            data_noise: 0.02,
            flip_prob: 0.05,
            idx_path: None,
            n_train: 5000,
            n_valid: 1000,
            n_test: 1000,
            noise_cluster: None,
            kde_centers: 500,
            eval_samples: 1000,
            epochs: 100,
            batch_size: 128,
            noise_ratio: 1,
            lr: 1e-3,
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("runs/default"),
            record_wall_time: false,
            variants: table_variant_names(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sigma_kde(&self) -> f64 {
        self.sigma_kde.unwrap_or(2.0 * self.sigma_dec)
    }

    pub fn generator(&self) -> Result<Generator> {
        self.dataset.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        let positive = [
            ("sigma_dec", self.sigma_dec),
            ("sigma_kde", self.sigma_kde()),
            ("lr", self.lr),
            ("clip_threshold", self.clip_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        let counts = [
            ("data_dim", self.data_dim),
            ("latent_dim", self.latent_dim),
            ("n_train", self.n_train),
            ("n_valid", self.n_valid),
            ("n_test", self.n_test),
            ("kde_centers", self.kde_centers),
            ("eval_samples", self.eval_samples),
            ("batch_size", self.batch_size),
            ("noise_ratio", self.noise_ratio),
            ("threads", self.threads),
            ("mc_samples", self.mc_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.mix_weight > 0.0 && self.mix_weight <= 1.0) {
            return bad(format!(
                "mix_weight = {} must lie in (0, 1]",
                self.mix_weight
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(self.data_noise >= 0.0)
            || !(self.manifold_scale >= 0.0)
            || !(self.mean_spread >= 0.0)
            || !self.mean_center.is_finite()
        {
            return bad("flip_prob, data_noise, manifold_scale or mean_spread out of range".into());
        }
        match self.generator()? {
            Generator::Idx if self.idx_path.is_none() => {
                return bad("idx dataset needs idx_path".into())
            }
            Generator::GaussianMixture | Generator::BinaryPatterns if self.components == 0 => {
                return bad("components must be at least 1".into())
            }
            _ => {}
        }
        if let Some(c) = self.noise_cluster {
            if self.generator()? != Generator::Idx && c >= self.components {
                return bad(format!(
                    "noise_cluster {c} but only {} components",
                    self.components
                ));
            }
        }
        if self.loss == LossKind::Fvnce {
            crate::psr::Atom::new(self.alpha, self.beta, 1.0)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.loss_config().validate()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        let objective = match self.loss {
            LossKind::Ae => Objective::Ae,
            LossKind::Vae => Objective::Vae,
            LossKind::Rvae => Objective::Rvae,
            LossKind::J01 => Objective::J01,
            LossKind::J10 => Objective::J10,
            LossKind::Fvnce => Objective::Fvnce {
                alpha: self.alpha,
                beta: self.beta,
            },
        };
        let mut terms = vec![Term {
            objective,
            weight: self.mix_weight,
        }];
        if self.mix_weight < 1.0 {
            terms.push(Term {
                objective: Objective::Fvnce {
                    alpha: 0.0,
                    beta: 0.0,
                },
                weight: 1.0 - self.mix_weight,
            });
        }
        let mut cfg = LossConfig::mix(terms);
        cfg.tie_encoders = self.tie_encoders;
        cfg.drop_constant_term = self.drop_constant_term;
        cfg.normalized = self.normalized;
        cfg.mc_samples = self.mc_samples;
        cfg.clip_threshold = self.clip_threshold;
        cfg
    }

    /// Build the networks and register their parameters (all zero).
    pub fn networks(&self) -> Result<(Networks, ParamVector)> {
        let mut params = ParamVector::new();
        let decoder_hidden: Vec<usize> = self.hidden.iter().rev().copied().collect();
        let model = GaussianLatentModel::register(
            &mut params,
            &decoder_hidden,
            self.latent_dim,
            self.data_dim,
            self.sigma_dec,
            self.activation,
        )?;
        let make = |params: &mut ParamVector, prefix: &str| -> Result<Encoder> {
            Ok(match self.encoder {
                EncoderKind::Stochastic => Encoder::Stochastic(StochasticEncoder::register(
                    params,
                    prefix,
                    self.data_dim,
                    &self.hidden,
                    self.latent_dim,
                    self.activation,
                )?),
                EncoderKind::Deterministic => {
                    Encoder::Deterministic(DeterministicEncoder::register(
                        params,
                        prefix,
                        self.data_dim,
                        &self.hidden,
                        self.latent_dim,
                        self.activation,
                    )?)
                }
            })
        };
        let enc1 = make(&mut params, "enc1")?;
        let enc0 = if self.tie_encoders {
            None
        } else {
            Some(make(&mut params, "enc0")?)
        };
        Ok((Networks { model, enc1, enc0 }, params))
    }

    /// Networks with Glorot-initialized weights drawn from the init stream.
    pub fn initial_networks(&self) -> Result<(Networks, ParamVector)> {
        let (nets, mut params) = self.networks()?;
        let mut rng = stream_rng(self.seed, STREAM_INIT);
        nets.model.decoder.init(&mut params, &mut rng)?;
        nets.enc1.mlp().init(&mut params, &mut rng)?;
        if let Some(e) = &nets.enc0 {
            e.mlp().init(&mut params, &mut rng)?;
        }
        Ok((nets, params))
    }
}

const STREAM_DATA: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TRAIN: u64 = 3;

/// Train/validation/test splits with the generating component of each row
/// (all zero for unlabeled data).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Matrix,
    pub train_labels: Vec<usize>,
    pub valid: Matrix,
    pub valid_labels: Vec<usize>,
    pub test: Matrix,
    pub test_labels: Vec<usize>,
}

impl Dataset {
    pub fn total(&self) -> usize {
        self.train.rows() + self.valid.rows() + self.test.rows()
    }

    fn split(all: Matrix, labels: Vec<usize>, n_train: usize, n_valid: usize) -> Self {
        let n = all.rows();
        let a = n_train.min(n);
        let b = (a + n_valid).min(n);
        Self {
            train: all.slice_rows(0, a),
            train_labels: labels[..a].to_vec(),
            valid: all.slice_rows(a, b),
            valid_labels: labels[a..b].to_vec(),
            test: all.slice_rows(b, n),
            test_labels: labels[b..].to_vec(),
        }
    }
}

/// Parameters of the synthetic generators.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub generator: Generator,
    pub dim: usize,
    pub components: usize,
    pub mean_center: f64,
    pub mean_spread: f64,
    pub manifold_rank: usize,
    pub manifold_scale: f64,
    pub noise: f64,
    pub flip_prob: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl SynthSpec {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            generator: cfg.generator()?,
            dim: cfg.data_dim,
            components: cfg.components,
            mean_center: cfg.mean_center,
            mean_spread: cfg.mean_spread,
            manifold_rank: cfg.manifold_rank,
            manifold_scale: cfg.manifold_scale,
            noise: cfg.data_noise,
            flip_prob: cfg.flip_prob,
            n_train: cfg.n_train,
            n_valid: cfg.n_valid,
            n_test: cfg.n_test,
        })
    }
}

fn normal(rng: &mut Rng64) -> f64 {
    StandardNormal.sample(rng)
}

/// Sample a labeled dataset and split it into train/validation/test.
///
/// `gaussian-mixture`: component `c` has a mean uniform in
/// `mean_center +- mean_spread` per coordinate and a
/// random rank-`manifold_rank` loading matrix; a row is
/// `mean + A u + noise * e` with `u, e` standard normal.
///
/// `binary-patterns`: component `c` is an on/off prototype made of bars on
/// the `sqrt(d) x sqrt(d)` grid (or random blocks when `d` is not square);
/// each pixel flips with `flip_prob`, then Gaussian noise is added.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut Rng64) -> Result<Dataset> {
    let d = spec.dim;
    let k = spec.components;
    if d == 0 || k == 0 {
        return Err(ExperimentError::Config(
            "dataset needs positive dim and components".into(),
        ));
    }
    let n = spec.n_train + spec.n_valid + spec.n_test;
    let mut x = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    match spec.generator {
        Generator::GaussianMixture => {
            let means: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    (0..d)
                        .map(|_| spec.mean_center + spec.mean_spread * rng.random_range(-1.0..=1.0))
                        .collect()
                })
                .collect();
            let loadings: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    (0..d * spec.manifold_rank)
                        .map(|_| spec.manifold_scale * normal(rng))
                        .collect()
                })
                .collect();
            for i in 0..n {
                let c = rng.random_range(0..k);
                labels.push(c);
                let u: Vec<f64> = (0..spec.manifold_rank).map(|_| normal(rng)).collect();
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    let a = &loadings[c][j * spec.manifold_rank..(j + 1) * spec.manifold_rank];
                    let low: f64 = a.iter().zip(&u).map(|(a, u)| a * u).sum();
                    *v = means[c][j] + low + spec.noise * normal(rng);
                }
            }
        }
        Generator::BinaryPatterns => {
            let prototypes: Vec<Vec<f64>> = (0..k).map(|_| bar_prototype(d, rng)).collect();
            for i in 0..n {
                let c = rng.random_range(0..k);
                labels.push(c);
                for (v, &p) in x.row_mut(i).iter_mut().zip(&prototypes[c]) {
                    let flip = rng.random_bool(spec.flip_prob);
                    let bit = if flip { 1.0 - p } else { p };
                    *v = bit + spec.noise * normal(rng);
                }
            }
        }
        Generator::Idx => {
            return Err(ExperimentError::Config(
                "idx data is loaded, not synthesized".into(),
            ));
        }
    }
    Ok(Dataset::split(x, labels, spec.n_train, spec.n_valid))
}

fn bar_prototype(d: usize, rng: &mut Rng64) -> Vec<f64> {
    let side = (d as f64).sqrt().round() as usize;
    let mut p = vec![0.0; d];
    if side * side == d {
        let bars = rng.random_range(2..=3);
        for _ in 0..bars {
            let at = rng.random_range(0..side);
            let horizontal = rng.random_bool(0.5);
            for t in 0..side {
                let (r, c) = if horizontal { (at, t) } else { (t, at) };
                p[r * side + c] = 1.0;
            }
        }
    } else {
        let block = (d / 8).max(1);
        for start in (0..d).step_by(block) {
            if rng.random_bool(0.4) {
                p[start..(start + block).min(d)].fill(1.0);
            }
        }
    }
    p
}

/// Read an unsigned-byte image file (`0x00000803`), one flattened image per
/// row, scaled to `[0, 1]`.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_idx(&fs::read(path)?)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Matrix> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| ExperimentError::Idx("header truncated".into()))
    };
    let magic = word(0)?;
    if magic != 0x0000_0803 {
        return Err(ExperimentError::Idx(format!("bad magic {magic:#010x}")));
    }
    let (n, rows, cols) = (word(1)?, word(2)?, word(3)?);
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(ExperimentError::Idx(format!(
            "truncated: {n} images of {d} pixels need {} bytes, found {}",
            n * d,
            body.len()
        )));
    }
    if n == 0 || d == 0 {
        return Err(ExperimentError::Idx("no images".into()));
    }
    let values = body[..n * d].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Matrix::from_vec(n, d, values))
}

/// Load or synthesize the dataset described by `cfg`.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut rng = stream_rng(cfg.seed, STREAM_DATA);
    match cfg.generator()? {
        Generator::Idx => {
            let path = cfg
                .idx_path
                .as_ref()
                .ok_or_else(|| ExperimentError::Config("idx_path".into()))?;
            let all = load_idx(path)?;
            if all.cols() != cfg.data_dim {
                return Err(ExperimentError::Dimension {
                    expected: cfg.data_dim,
                    got: all.cols(),
                });
            }
            let mut order: Vec<usize> = (0..all.rows()).collect();
            order.shuffle(&mut rng);
            let labels = vec![0; all.rows()];
            Ok(Dataset::split(
                all.select_rows(&order),
                labels,
                cfg.n_train,
                cfg.n_valid,
            ))
        }
        _ => synth_dataset(&SynthSpec::from_config(cfg)?, &mut rng),
    }
}

/// KDE over validation rows (optionally one component only), capped at
/// `kde_centers` rows.
pub fn noise_distribution(cfg: &RunConfig, data: &Dataset) -> Result<Dist> {
    let idx: Vec<usize> = (0..data.valid.rows())
        .filter(|&i| cfg.noise_cluster.is_none_or(|c| data.valid_labels[i] == c))
        .take(cfg.kde_centers)
        .collect();
    if idx.is_empty() {
        return Err(ExperimentError::Config(
            "no validation samples for the noise KDE".into(),
        ));
    }
    Ok(GaussianKde::new(data.valid.select_rows(&idx), cfg.sigma_kde())?.into())
}

/// Row-wise log-density, parallel over rows.
pub fn log_pdf_rows_par(dist: &Dist, x: &Matrix) -> Result<Vec<f64>> {
    (0..x.rows())
        .into_par_iter()
        .map(|i| dist.log_pdf(x.row(i)).map_err(ExperimentError::from))
        .collect()
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Negated objective on the fixed evaluation batch.
    pub loss: f64,
    /// Mean `log p(x | g(x))` on held-out data, in nats.
    pub data_loglik: f64,
    /// Mean `log p(x | g(x))` on noise samples.
    pub noise_loglik: f64,
    pub difference: f64,
    /// Clipped exponentials during this epoch's training steps.
    pub clip_count: usize,
    pub mean_delta_data: f64,
    pub mean_delta_noise: f64,
    pub wall_time: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Everything a run needs besides the parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub data: Dataset,
    pub noise: Dist,
    pub train_log_pn: Vec<f64>,
    pub eval_data: Matrix,
    pub eval_noise: Matrix,
    eval_batch: Batch,
}

impl Prepared {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = build_dataset(cfg)?;
        Self::with_dataset(cfg, data)
    }

    pub fn with_dataset(cfg: &RunConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.train.cols() != cfg.data_dim {
            return Err(ExperimentError::Dimension {
                expected: cfg.data_dim,
                got: data.train.cols(),
            });
        }
        if data.train.is_empty() {
            return Err(ExperimentError::Config("empty training split".into()));
        }
        let noise = noise_distribution(cfg, &data)?;
        let train_log_pn = log_pdf_rows_par(&noise, &data.train)?;
        let held_out = if data.test.is_empty() {
            &data.valid
        } else {
            &data.test
        };
        let eval_data = held_out.slice_rows(0, cfg.eval_samples.min(held_out.rows()));
        let mut rng = stream_rng(cfg.seed, STREAM_NOISE);
        let eval_noise = noise.sample(&mut rng, cfg.eval_samples);
        let eval_batch = Batch::new(
            &eval_data,
            &log_pdf_rows_par(&noise, &eval_data)?,
            &eval_noise,
            &log_pdf_rows_par(&noise, &eval_noise)?,
            cfg.latent_dim,
            cfg.mc_samples,
            &mut rng,
        )?;
        Ok(Self {
            config: cfg.clone(),
            data,
            noise,
            train_log_pn,
            eval_data,
            eval_noise,
            eval_batch,
        })
    }

    /// Copy of this preparation evaluated under another loss configuration.
    pub fn with_config(&self, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut out = self.clone();
        out.config = cfg.clone();
        Ok(out)
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub nets: Networks,
    pub params: ParamVector,
    pub metrics: Vec<MetricsRow>,
    pub init_fingerprint: u64,
    pub steps: u64,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?)
}

fn metrics_row(
    prep: &Prepared,
    nets: &Networks,
    params: &ParamVector,
    epoch: usize,
    clip_count: usize,
    wall_time: f64,
) -> Result<MetricsRow> {
    let loss_cfg = prep.config.loss_config();
    let ev = evaluate(nets, params, &loss_cfg, &prep.eval_batch, false)?;
    let (delta_data, delta_noise) = batch_deltas(nets, params, &loss_cfg, &prep.eval_batch)?;
    let data = mean(&reconstruction_log_likelihood(
        nets,
        params,
        &prep.eval_data,
    )?);
    let noise = mean(&reconstruction_log_likelihood(
        nets,
        params,
        &prep.eval_noise,
    )?);
    Ok(MetricsRow {
        epoch,
        loss: -ev.value,
        data_loglik: data,
        noise_loglik: noise,
        difference: data - noise,
        clip_count,
        mean_delta_data: mean(&delta_data),
        mean_delta_noise: mean(&delta_noise),
        wall_time: if prep.config.record_wall_time {
            wall_time
        } else {
            0.0
        },
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Train from the given initial parameters. Deterministic for a fixed seed
/// at any thread count.
pub fn train_from(prep: &Prepared, nets: &Networks, init: &ParamVector) -> Result<TrainOutput> {
    pool(prep.config.threads)?.install(|| train_inner(prep, nets, init))
}

fn train_inner(prep: &Prepared, nets: &Networks, init: &ParamVector) -> Result<TrainOutput> {
    let cfg = &prep.config;
    let loss_cfg = cfg.loss_config();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let start = Instant::now();
    let mut params = init.clone();
    let mut state = AdamState::new(params.len());
    let mut rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let mut metrics = vec![metrics_row(prep, nets, &params, 0, 0, 0.0)?];
    let n = prep.data.train.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut clips = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let data_x = prep.data.train.select_rows(idx);
            let data_lpn: Vec<f64> = idx.iter().map(|&i| prep.train_log_pn[i]).collect();
            let noise_x = prep.noise.sample(&mut rng, idx.len() * cfg.noise_ratio);
            let noise_lpn = log_pdf_rows_par(&prep.noise, &noise_x)?;
            let batch = Batch::new(
                &data_x,
                &data_lpn,
                &noise_x,
                &noise_lpn,
                cfg.latent_dim,
                cfg.mc_samples,
                &mut rng,
            )?;
            let ev = evaluate(nets, &params, &loss_cfg, &batch, true)?;
            if !ev.value.is_finite() || ev.grad.iter().any(|g| !g.is_finite()) {
                return Err(non_finite(epoch, step, &ev.diagnostics));
            }
            clips += ev.diagnostics.clip_count;
            let neg: Vec<f64> = ev.grad.iter().map(|g| -g).collect();
            let (next, s) = adam_step(params.values(), &neg, &state, &adam)?;
            params.set_values(next)?;
            state = s;
        }
        let row = metrics_row(
            prep,
            nets,
            &params,
            epoch,
            clips,
            start.elapsed().as_secs_f64(),
        )?;
        if !row.loss.is_finite() {
            let ev = evaluate(nets, &params, &loss_cfg, &prep.eval_batch, false)?;
            return Err(non_finite(epoch, 0, &ev.diagnostics));
        }
        metrics.push(row);
    }
    Ok(TrainOutput {
        nets: nets.clone(),
        init_fingerprint: init.fingerprint(),
        params,
        metrics,
        steps: state.t,
    })
}

fn non_finite(epoch: usize, step: usize, d: &Diagnostics) -> ExperimentError {
    ExperimentError::NonFinite {
        epoch,
        step,
        mean_delta_data: d.mean_delta_data(),
        mean_delta_noise: d.mean_delta_noise(),
        clip_count: d.clip_count,
    }
}

/// Prepare, initialize and train.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    let prep = Prepared::new(cfg)?;
    let (nets, params) = cfg.initial_networks()?;
    train_from(&prep, &nets, &params)
}

/// Header payload stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointModel {
    pub networks: Networks,
    pub config: RunConfig,
}

pub fn save_run(dir: &Path, cfg: &RunConfig, out: &TrainOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(dir.join("metrics.csv"), &out.metrics)?;
    let model = serde_json::to_value(CheckpointModel {
        networks: out.nets.clone(),
        config: cfg.clone(),
    })?;
    write_checkpoint(
        dir.join("checkpoint.bin"),
        &out.params,
        cfg.seed,
        out.steps,
        model,
    )?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Train and write `metrics.csv`, `checkpoint.bin` and `config.json` into
/// `cfg.out_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let out = train(cfg)?;
    save_run(&cfg.out_dir, cfg, &out)?;
    Ok(out)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<(CheckpointModel, ParamVector)> {
    let (header, params) = read_checkpoint(path)?;
    let model: CheckpointModel = serde_json::from_value(header.model)?;
    Ok((model, params))
}

/// One method of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub mix_weight: f64,
}

/// Weight of the `(alpha, beta)` term in sweep variants; `(0, 0)` gets the rest.
pub const PAIR_MIX_WEIGHT: f64 = 0.9;

pub fn table_variant_names() -> Vec<String> {
    ["ae", "vae", "(1/256,0)", "(1/64,0)", "(1/16,0)", "(0,1)"]
        .map(String::from)
        .to_vec()
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    match s.split_once('/') {
        Some((a, b)) => Some(a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?),
        None => s.parse().ok(),
    }
}

impl Variant {
    /// `ae`, `vae`, `rvae`, `j01`, `j10`, or `(alpha,beta)` with optional
    /// fractions. Pairs other than `(0, 0)` are mixed with `(0, 0)`.
    pub fn parse(name: &str) -> Result<Self> {
        let simple = |loss| Variant {
            loss,
            alpha: 0.0,
            beta: 0.0,
            mix_weight: 1.0,
        };
        let t = name.trim().to_ascii_lowercase();
        match t.as_str() {
            "ae" => return Ok(simple(LossKind::Ae)),
            "vae" => return Ok(simple(LossKind::Vae)),
            "rvae" => return Ok(simple(LossKind::Rvae)),
            "j01" => return Ok(simple(LossKind::J01)),
            "j10" => return Ok(simple(LossKind::J10)),
            _ => {}
        }
        let inner = t
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| ExperimentError::Config(format!("unknown method {name:?}")))?;
        let (a, b) = inner.split_once(',').ok_or_else(|| {
            ExperimentError::Config(format!("method {name:?} needs (alpha,beta)"))
        })?;
        let (alpha, beta) = match (parse_number(a), parse_number(b)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ExperimentError::Config(format!("bad numbers in {name:?}"))),
        };
        Ok(Variant {
            loss: LossKind::Fvnce,
            alpha,
            beta,
            mix_weight: if alpha > 0.0 || beta > 0.0 {
                PAIR_MIX_WEIGHT
            } else {
                1.0
            },
        })
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            loss: self.loss,
            alpha: self.alpha,
            beta: self.beta,
            mix_weight: self.mix_weight,
            ..base.clone()
        }
    }
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub data_loglik: f64,
    pub noise_loglik: f64,
    pub difference: f64,
    pub init_fingerprint: String,
}

/// Train every method from the same initial weights on the same data and
/// noise; returns one row per method with the final metrics.
pub fn sweep(base: &RunConfig, methods: &[String]) -> Result<Vec<SweepRow>> {
    let variants: Vec<(String, Variant)> = methods
        .iter()
        .map(|m| Ok((m.clone(), Variant::parse(m)?)))
        .collect::<Result<_>>()?;
    let prep = Prepared::new(base)?;
    let (nets, init) = base.initial_networks()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (name, v) in variants {
        let cfg = v.apply(base);
        let out = train_from(&prep.with_config(&cfg)?, &nets, &init)?;
        let last = out.metrics.last().expect("initial row");
        rows.push(SweepRow {
            method: name.clone(),
            data_loglik: last.data_loglik,
            noise_loglik: last.noise_loglik,
            difference: last.difference,
            init_fingerprint: format!("{:016x}", out.init_fingerprint),
        });
        save_run(&base.out_dir.join(sanitize(&name)), &cfg, &out)?;
    }
    let mut w = csv::Writer::from_path(base.out_dir.join("table.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

/// Height and width of the patch a `d`-vector is drawn as: square when
/// possible, otherwise a single row.
pub fn patch_shape(d: usize) -> (usize, usize) {
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        (side, side)
    } else {
        (1, d)
    }
}

/// Lay rows out left to right, top to bottom, `cols` patches per grid row.
/// Values in `[0, 1]` map to `0..=255`; anything outside is clamped.
pub fn render_grid(x: &Matrix, cols: usize) -> Pgm {
    let (ph, pw) = patch_shape(x.cols());
    let cols = cols.clamp(1, x.rows().max(1));
    let grid_rows = x.rows().div_ceil(cols);
    let width = cols * pw;
    let height = grid_rows * ph;
    let mut pixels = vec![0u8; width * height];
    for (i, row) in x.iter_rows().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        for (j, &v) in row.iter().enumerate() {
            let (r, c) = (j / pw, j % pw);
            let y = gr * ph + r;
            let xpix = gc * pw + c;
            pixels[y * width + xpix] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Pgm {
        width,
        height,
        pixels,
    }
}

/// Where reconstruction inputs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Held-out test rows of the checkpoint's dataset.
    Test,
    /// Draws from the checkpoint's noise distribution.
    Noise,
    /// Headerless CSV, one input per line.
    Csv(PathBuf),
}

impl std::str::FromStr for InputSource {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "test" => InputSource::Test,
            "noise" => InputSource::Noise,
            path => InputSource::Csv(PathBuf::from(path)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub inputs: Matrix,
    pub outputs: Matrix,
    pub log_likelihood: Vec<f64>,
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let row = rec?
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| ExperimentError::Config(format!("bad number {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(ExperimentError::Dimension {
                    expected: first.len(),
                    got: row.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ExperimentError::Config("no input rows".into()));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Decoder means at the deterministic code plus per-row `log p(x | g(x))`.
pub fn reconstruct_inputs(
    nets: &Networks,
    params: &ParamVector,
    x: &Matrix,
) -> Result<Reconstruction> {
    let d = nets.model.data_dim();
    if x.cols() != d {
        return Err(ExperimentError::Dimension {
            expected: d,
            got: x.cols(),
        });
    }
    Ok(Reconstruction {
        inputs: x.clone(),
        outputs: reconstruct(nets, params, x)?,
        log_likelihood: reconstruction_log_likelihood(nets, params, x)?,
    })
}

/// Reconstruct `count` inputs from a checkpoint and write `inputs.pgm`,
/// `reconstructions.pgm` and `loglik.csv` into `out_dir`.
pub fn run_reconstruct(
    checkpoint: &Path,
    source: &InputSource,
    count: usize,
    out_dir: &Path,
) -> Result<Reconstruction> {
    let (model, params) = load_run(checkpoint)?;
    let x = match source {
        InputSource::Csv(p) => read_matrix_csv(p)?,
        InputSource::Test | InputSource::Noise => {
            let prep = Prepared::new(&model.config)?;
            let pool = if *source == InputSource::Test {
                &prep.eval_data
            } else {
                &prep.eval_noise
            };
            pool.slice_rows(0, count.min(pool.rows()))
        }
    };
    let rec = reconstruct_inputs(&model.networks, &params, &x)?;
    fs::create_dir_all(out_dir)?;
    let cols = (rec.inputs.rows() as f64).sqrt().ceil() as usize;
    render_grid(&rec.inputs, cols).write(out_dir.join("inputs.pgm"))?;
    render_grid(&rec.outputs, cols).write(out_dir.join("reconstructions.pgm"))?;
    let mut w = csv::Writer::from_path(out_dir.join("loglik.csv"))?;
    w.write_record(["index", "loglik"])?;
    for (i, ll) in rec.log_likelihood.iter().enumerate() {
        w.write_record([i.to_string(), ll.to_string()])?;
    }
    w.flush()?;
    Ok(rec)
}

/// Write a curve table with columns `r, f1, f0, S1, S0, loss1, loss0`.
pub fn write_curves_csv(path: impl AsRef<Path>, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean squared error per row, averaged over coordinates.
pub fn reconstruction_mse(nets: &Networks, params: &ParamVector, x: &Matrix) -> Result<Vec<f64>> {
    let y = reconstruct(nets, params, x)?;
    Ok(x.iter_rows()
        .zip(y.iter_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / a.len() as f64)
        .collect())
}

/// Outcome of the noise-penalization demo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyDemo {
    pub vae_mse_noise_cluster: f64,
    pub vae_mse_rest: f64,
    pub rvae_mse_noise_cluster: f64,
    pub rvae_mse_rest: f64,
}

impl PenaltyDemo {
    pub fn noise_cluster_ratio(&self) -> f64 {
        self.rvae_mse_noise_cluster / self.vae_mse_noise_cluster
    }

    pub fn rest_ratio(&self) -> f64 {
        self.rvae_mse_rest / self.vae_mse_rest
    }
}

/// Train the VAE objective and the noise-penalized objective from the same
/// initial weights, with the KDE built from `cfg.noise_cluster`, and compare
/// test-set reconstruction error on that cluster and on the others.
pub fn penalty_demo(cfg: &RunConfig) -> Result<PenaltyDemo> {
    let cluster = cfg
        .noise_cluster
        .ok_or_else(|| ExperimentError::Config("the penalty demo needs noise_cluster".into()))?;
    let prep = Prepared::new(cfg)?;
    let (nets, init) = cfg.initial_networks()?;
    let test = &prep.data.test;
    let (inside, outside): (Vec<usize>, Vec<usize>) =
        (0..test.rows()).partition(|&i| prep.data.test_labels[i] == cluster);
    if inside.is_empty() || outside.is_empty() {
        return Err(ExperimentError::Config(
            "test split needs rows in and outside the noise cluster".into(),
        ));
    }
    let (xin, xout) = (test.select_rows(&inside), test.select_rows(&outside));
    let mut mse = Vec::new();
    for loss in [LossKind::Vae, LossKind::Rvae] {
        let run_cfg = RunConfig {
            loss,
            mix_weight: 1.0,
            ..cfg.clone()
        };
        let out = train_from(&prep.with_config(&run_cfg)?, &nets, &init)?;
        mse.push((
            mean(&reconstruction_mse(&out.nets, &out.params, &xin)?),
            mean(&reconstruction_mse(&out.nets, &out.params, &xout)?),
        ));
    }
    Ok(PenaltyDemo {
        vae_mse_noise_cluster: mse[0].0,
        vae_mse_rest: mse[0].1,
        rvae_mse_noise_cluster: mse[1].0,
        rvae_mse_rest: mse[1].1,
    })
}

/// Median of a non-empty slice.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

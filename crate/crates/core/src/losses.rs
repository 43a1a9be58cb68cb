//! Training objectives and Monte-Carlo estimators.
//!
//! Every objective is a value `J` to be *maximized*. Neural objectives are
//! recorded on a [`Tape`] so gradients with respect to all network parameters
//! come from one backward pass. Log-ratios are formed in the log domain as
//! `delta = log p(x, z) - log p_n(x) - log q(z | x)` and mapped through the
//! logit-domain scoring functions with a clipped exponential.
//!
//! Batches are split into fixed-size row chunks that are evaluated
//! independently (possibly in parallel) and summed in chunk order, so results
//! do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, ParamVector, Tape, Var};
use crate::dist::{standard_normal_matrix, Dist, DistError, Rng64, TabularDistribution, LN_2PI};
use crate::matrix::Matrix;
use crate::nnmodel::{Encoder, GaussianLatentModel, ModelError, TabularEncoder, TabularJointModel};
use crate::psr::{Atom, Outcome, PsrError, ScoringPair, DEFAULT_CLIP_THRESHOLD};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Psr(#[from] PsrError),
    #[error("model has no tractable marginal likelihood")]
    IntractableMarginal,
    #[error("objective `{objective}` needs {needs}")]
    EncoderKind {
        objective: &'static str,
        needs: &'static str,
    },
    #[error("objective `{0}` requires tied encoders")]
    Untied(&'static str),
    #[error("untied encoders requested but no noise encoder was given")]
    MissingNoiseEncoder,
    #[error("loss mixture is empty")]
    EmptyMix,
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// A model whose marginal `log p(x)` can be evaluated.
pub trait LatentModel {
    fn log_marginal(&self, x: &[f64]) -> Result<f64>;
}

impl LatentModel for TabularJointModel {
    /// `x` holds a single support index.
    fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        let i = tabular_index(x, self.nx())?;
        Ok(self.log_marginals()[i])
    }
}

impl LatentModel for GaussianLatentModel {
    fn log_marginal(&self, _x: &[f64]) -> Result<f64> {
        Err(LossError::IntractableMarginal)
    }
}

fn tabular_index(x: &[f64], n: usize) -> Result<usize> {
    match x {
        [v] if *v >= 0.0 && v.fract() == 0.0 && (*v as usize) < n => Ok(*v as usize),
        _ => Err(LossError::Config(format!(
            "{x:?} is not an index below {n}"
        ))),
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            value: mean,
            std_err: (var / n).sqrt(),
        }
    }

    /// Sum of two independent estimates.
    fn plus(self, other: Self) -> Self {
        Self {
            value: self.value + other.value,
            std_err: self.std_err.hypot(other.std_err),
        }
    }
}

fn stream_deltas(model: &impl LatentModel, noise: &Dist, x: &Matrix) -> Result<Vec<f64>> {
    let log_pn = noise.log_pdf_rows(x)?;
    x.iter_rows()
        .zip(log_pn)
        .map(|(row, lpn)| Ok(model.log_marginal(row)? - lpn))
        .collect()
}

/// Logistic NCE: mean log-posterior of the correct class on both streams.
pub fn nce_loss(
    model: &impl LatentModel,
    noise: &Dist,
    data_x: &Matrix,
    noise_x: &Matrix,
) -> Result<Estimate> {
    if data_x.is_empty() || noise_x.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let log_sigmoid = |u: f64| -softplus(-u);
    let d: Vec<f64> = stream_deltas(model, noise, data_x)?
        .into_iter()
        .map(log_sigmoid)
        .collect();
    let n: Vec<f64> = stream_deltas(model, noise, noise_x)?
        .into_iter()
        .map(|u| log_sigmoid(-u))
        .collect();
    Ok(Estimate::of(&d).plus(Estimate::of(&n)))
}

/// NCE with the scoring rule induced by `pair`: `E_d f1(r) + E_n f0(r)`.
pub fn snce_loss(
    model: &impl LatentModel,
    noise: &Dist,
    pair: &ScoringPair,
    data_x: &Matrix,
    noise_x: &Matrix,
) -> Result<Estimate> {
    if data_x.is_empty() || noise_x.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let score = |o: Outcome, u: f64| -pair.logit_loss_clipped(o, u, f64::INFINITY).0;
    let d: Vec<f64> = stream_deltas(model, noise, data_x)?
        .into_iter()
        .map(|u| score(Outcome::Data, u))
        .collect();
    let n: Vec<f64> = stream_deltas(model, noise, noise_x)?
        .into_iter()
        .map(|u| score(Outcome::Noise, u))
        .collect();
    Ok(Estimate::of(&d).plus(Estimate::of(&n)))
}

/// Sampled fvNCE on a tabular model: `n` draws of `(x, z)` per stream.
#[allow(clippy::too_many_arguments)]
pub fn fvnce_tabular_estimate(
    model: &TabularJointModel,
    data: &TabularDistribution,
    noise: &TabularDistribution,
    enc1: &TabularEncoder,
    enc0: &TabularEncoder,
    pair: &ScoringPair,
    n: usize,
    rng: &mut Rng64,
) -> Result<Estimate> {
    let nx = model.nx();
    if data.len() != nx || noise.len() != nx || enc1.nx() != nx || enc0.nx() != nx {
        return Err(LossError::Config("tabular supports differ".into()));
    }
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let log_joint = model.log_joint_table();
    let log_pn = noise.log_masses();
    let nz = model.nz();
    let term =
        |dist: &TabularDistribution, enc: &TabularEncoder, outcome: Outcome, rng: &mut Rng64| {
            let xs = dist.sample_indices(rng, n);
            let vals: Vec<f64> = xs
                .into_iter()
                .map(|x| {
                    let z = enc.sample(x, rng);
                    let delta = log_joint[x * nz + z] - log_pn[x] - enc.log_q(x, z);
                    -pair.logit_loss_clipped(outcome, delta, f64::INFINITY).0
                })
                .collect();
            Estimate::of(&vals)
        };
    let a = term(data, enc1, Outcome::Data, rng);
    let b = term(noise, enc0, Outcome::Noise, rng);
    Ok(a.plus(b))
}

/// Importance estimate of `sum_x p(x, g(x))` from draws `x ~ p_n`.
pub fn restricted_mass_estimate(
    model: &TabularJointModel,
    noise: &TabularDistribution,
    code: &[usize],
    n: usize,
    rng: &mut Rng64,
) -> Result<Estimate> {
    if code.len() != model.nx()
        || noise.len() != model.nx()
        || code.iter().any(|&z| z >= model.nz())
    {
        return Err(LossError::Config(
            "code map does not match the model".into(),
        ));
    }
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let log_joint = model.log_joint_table();
    let vals: Vec<f64> = noise
        .sample_indices(rng, n)
        .into_iter()
        .map(|x| (log_joint[x * model.nz() + code[x]] - noise.log_masses()[x]).exp())
        .collect();
    Ok(Estimate::of(&vals))
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// `log(e^delta + beta)` on the tape.
fn log_shift(tape: &mut Tape, delta: Var, beta: f64) -> Var {
    if beta == 0.0 {
        return delta;
    }
    let lb = beta.ln();
    let shifted = tape.add_scalar(delta, -lb);
    let sp = tape.softplus(shifted);
    tape.add_scalar(sp, lb)
}

/// Elementwise negated score `-f_k(e^delta)` of `pair` on the tape.
///
/// With `drop_linear`, the noise-side term of every `alpha = 0` atom has its
/// part linear in `r` replaced by the value it takes in expectation when the
/// model's support lies inside the noise support.
pub fn neg_score(
    tape: &mut Tape,
    pair: &ScoringPair,
    outcome: Outcome,
    delta: Var,
    threshold: f64,
    drop_linear: bool,
) -> Result<Var> {
    let normalized = pair.is_normalized();
    let mut total: Option<Var> = None;
    for atom in pair.atoms() {
        let term = atom_neg_score(
            tape,
            atom,
            normalized,
            outcome,
            delta,
            threshold,
            drop_linear,
        );
        let weighted = tape.scale(term, atom.weight);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    total.ok_or(LossError::Psr(PsrError::Empty))
}

fn atom_neg_score(
    tape: &mut Tape,
    atom: &Atom,
    normalized: bool,
    outcome: Outcome,
    delta: Var,
    t: f64,
    drop_linear: bool,
) -> Var {
    let (a, b) = (atom.alpha, atom.beta);
    let l = log_shift(tape, delta, b);
    // e^delta, or its expectation 1 when dropped
    let linear = |tape: &mut Tape| {
        if drop_linear {
            let z = tape.scale(delta, 0.0);
            tape.add_scalar(z, 1.0)
        } else {
            tape.exp_clipped(delta, t)
        }
    };
    match (a == 0.0, normalized, outcome) {
        (true, false, Outcome::Data) => tape.neg(l),
        (true, false, Outcome::Noise) => {
            let r = linear(tape);
            if b == 0.0 {
                r
            } else {
                let bl = tape.scale(l, -b);
                tape.add(r, bl).expect("same shape")
            }
        }
        (true, true, Outcome::Data) => {
            let c = tape.add_scalar(l, -b.ln_1p());
            tape.scale(c, -(1.0 + b))
        }
        (true, true, Outcome::Noise) => {
            let r = linear(tape);
            let r1 = tape.add_scalar(r, -1.0);
            let c = if b == 0.0 {
                r1
            } else {
                let ln = tape.add_scalar(l, -b.ln_1p());
                let bl = tape.scale(ln, -b);
                tape.add(r1, bl).expect("same shape")
            };
            tape.scale(c, 1.0 + b)
        }
        (false, false, Outcome::Data) => {
            let al = tape.scale(l, a);
            let e = tape.exp_clipped(al, t);
            tape.scale(e, -1.0 / a)
        }
        (false, false, Outcome::Noise) => {
            let al = tape.scale(l, a);
            let s = tape.add(delta, al).expect("same shape");
            let e1 = tape.exp_clipped(s, t);
            let first = tape.scale(e1, 1.0 / (a + 1.0));
            if b == 0.0 {
                first
            } else {
                let e2 = tape.exp_clipped(al, t);
                let second = tape.scale(e2, -b / (a * (a + 1.0)));
                tape.add(first, second).expect("same shape")
            }
        }
        (false, true, Outcome::Data) => {
            let ln = tape.add_scalar(l, -b.ln_1p());
            let al = tape.scale(ln, a);
            let e = tape.exp_clipped(al, t);
            let e1 = tape.add_scalar(e, -1.0);
            tape.scale(e1, -(1.0 + b) / a)
        }
        (false, true, Outcome::Noise) => {
            let ln = tape.add_scalar(l, -b.ln_1p());
            let al = tape.scale(ln, a);
            let s = tape.add(delta, al).expect("same shape");
            let e1 = tape.exp_clipped(s, t);
            let first = tape.add_scalar(e1, -1.0);
            let c = if b == 0.0 {
                first
            } else {
                let e2 = tape.exp_clipped(al, t);
                let e2 = tape.add_scalar(e2, -1.0);
                let second = tape.scale(e2, -b / a);
                tape.add(first, second).expect("same shape")
            };
            tape.scale(c, (1.0 + b) / (a + 1.0))
        }
    }
}

/// Decoder plus the data-side encoder `q1` and an optional noise-side `q0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub model: GaussianLatentModel,
    pub enc1: Encoder,
    #[serde(default)]
    pub enc0: Option<Encoder>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    /// Fully variational NCE with the `(alpha, beta)` pair.
    Fvnce { alpha: f64, beta: f64 },
    /// ELBO; analytic KL for stochastic encoders, `log p_Z(g) - gamma` for deterministic ones.
    Vae,
    /// Reconstruction log-likelihood at the deterministic code.
    Ae,
    /// ELBO minus the importance-weighted noise penalty at the deterministic code.
    Rvae,
    /// Tied-encoder `(0, 1)` instance: softplus of delta on both streams.
    J01,
    /// `(1, 0)` instance with the encoder-free first term.
    J10,
}

impl Objective {
    pub fn name(&self) -> String {
        match self {
            Objective::Fvnce { alpha, beta } => format!("fvnce({alpha},{beta})"),
            Objective::Vae => "vae".into(),
            Objective::Ae => "ae".into(),
            Objective::Rvae => "rvae".into(),
            Objective::J01 => "j01".into(),
            Objective::J10 => "j10".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub objective: Objective,
    pub weight: f64,
}

fn default_true() -> bool {
    true
}

fn default_mc() -> usize {
    1
}

fn default_threshold() -> f64 {
    DEFAULT_CLIP_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weighted objectives summed on the same batch and the same latent draws.
    pub terms: Vec<Term>,
    #[serde(default = "default_true")]
    pub tie_encoders: bool,
    #[serde(default = "default_true")]
    pub drop_constant_term: bool,
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_threshold")]
    pub clip_threshold: f64,
}

impl LossConfig {
    pub fn single(objective: Objective) -> Self {
        Self::mix(vec![Term {
            objective,
            weight: 1.0,
        }])
    }

    pub fn mix(terms: Vec<Term>) -> Self {
        Self {
            terms,
            tie_encoders: true,
            drop_constant_term: true,
            normalized: true,
            mc_samples: 1,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(LossError::EmptyMix);
        }
        for term in &self.terms {
            if !(term.weight > 0.0 && term.weight.is_finite()) {
                return Err(LossError::Config(format!(
                    "weight {} of {}",
                    term.weight,
                    term.objective.name()
                )));
            }
            if let Objective::Fvnce { alpha, beta } = term.objective {
                Atom::new(alpha, beta, 1.0)?;
            }
        }
        if self.mc_samples == 0 {
            return Err(LossError::Config("mc_samples must be at least 1".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(LossError::Config(format!(
                "clip threshold {}",
                self.clip_threshold
            )));
        }
        Ok(())
    }

    fn pair(&self, alpha: f64, beta: f64) -> Result<ScoringPair> {
        Ok(if self.normalized {
            ScoringPair::normalized(alpha, beta)?
        } else {
            ScoringPair::raw(alpha, beta)?
        })
    }
}

/// One minibatch: data and noise inputs, their noise log-densities, and the
/// standard-normal draws that drive every latent sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data_x: Matrix,
    pub data_log_pn: Vec<f64>,
    pub noise_x: Matrix,
    pub noise_log_pn: Vec<f64>,
    /// Reparametrization noise for `z ~ q1(. | x)` on data rows.
    pub eps_data: Matrix,
    /// Reparametrization noise for `z ~ q0(. | x)` on noise rows.
    pub eps_noise: Matrix,
    /// Prior draws `z ~ p_Z` paired with data rows.
    pub z_prior: Matrix,
}

impl Batch {
    /// Rows are repeated `mc_samples` times, each copy with its own draws.
    pub fn new(
        data_x: &Matrix,
        data_log_pn: &[f64],
        noise_x: &Matrix,
        noise_log_pn: &[f64],
        latent_dim: usize,
        mc_samples: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if data_x.rows() != data_log_pn.len() || noise_x.rows() != noise_log_pn.len() {
            return Err(LossError::Config(
                "noise log-densities do not match rows".into(),
            ));
        }
        if data_x.is_empty() || noise_x.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if mc_samples == 0 {
            return Err(LossError::Config("mc_samples must be at least 1".into()));
        }
        let repeat = |m: &Matrix| {
            let idx: Vec<usize> = (0..m.rows())
                .flat_map(|i| std::iter::repeat_n(i, mc_samples))
                .collect();
            m.select_rows(&idx)
        };
        let repeat_vec = |v: &[f64]| {
            v.iter()
                .flat_map(|&x| std::iter::repeat_n(x, mc_samples))
                .collect()
        };
        let data_x = repeat(data_x);
        let noise_x = repeat(noise_x);
        let eps_data = standard_normal_matrix(rng, data_x.rows(), latent_dim);
        let eps_noise = standard_normal_matrix(rng, noise_x.rows(), latent_dim);
        let z_prior = standard_normal_matrix(rng, data_x.rows(), latent_dim);
        Ok(Self {
            data_log_pn: repeat_vec(data_log_pn),
            noise_log_pn: repeat_vec(noise_log_pn),
            data_x,
            noise_x,
            eps_data,
            eps_noise,
            z_prior,
        })
    }

    /// Same as [`Batch::new`], evaluating `noise` at both streams.
    pub fn with_noise(
        data_x: &Matrix,
        noise_x: &Matrix,
        noise: &Dist,
        latent_dim: usize,
        mc_samples: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let d = noise.log_pdf_rows(data_x)?;
        let n = noise.log_pdf_rows(noise_x)?;
        Self::new(data_x, &d, noise_x, &n, latent_dim, mc_samples, rng)
    }

    fn chunk(&self, start: usize, len: usize) -> Option<ChunkData> {
        let part = |x: &Matrix, lpn: &[f64], eps: &Matrix, prior: Option<&Matrix>| {
            let end = (start + len).min(x.rows());
            (start < end).then(|| StreamData {
                x: x.slice_rows(start, end),
                log_pn: Matrix::column(lpn[start..end].to_vec()),
                eps: eps.slice_rows(start, end),
                z_prior: prior.map(|p| p.slice_rows(start, end)),
            })
        };
        let data = part(
            &self.data_x,
            &self.data_log_pn,
            &self.eps_data,
            Some(&self.z_prior),
        );
        let noise = part(&self.noise_x, &self.noise_log_pn, &self.eps_noise, None);
        (data.is_some() || noise.is_some()).then_some(ChunkData { data, noise })
    }
}

struct StreamData {
    x: Matrix,
    log_pn: Matrix,
    eps: Matrix,
    z_prior: Option<Matrix>,
}

struct ChunkData {
    data: Option<StreamData>,
    noise: Option<StreamData>,
}

/// Auxiliary statistics accumulated over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub delta_data_sum: f64,
    pub delta_data_count: usize,
    pub delta_noise_sum: f64,
    pub delta_noise_count: usize,
    pub clip_count: usize,
}

impl Diagnostics {
    pub fn mean_delta_data(&self) -> f64 {
        self.delta_data_sum / self.delta_data_count as f64
    }

    pub fn mean_delta_noise(&self) -> f64 {
        self.delta_noise_sum / self.delta_noise_count as f64
    }

    pub fn merge(&mut self, other: &Diagnostics) {
        self.delta_data_sum += other.delta_data_sum;
        self.delta_data_count += other.delta_data_count;
        self.delta_noise_sum += other.delta_noise_sum;
        self.delta_noise_count += other.delta_noise_count;
        self.clip_count += other.clip_count;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Objective value `J`.
    pub value: f64,
    /// `dJ / dparams`; empty when gradients were not requested.
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Value of each configured term, unweighted.
    pub term_values: Vec<f64>,
}

/// Rows per independently evaluated chunk.
pub const CHUNK_ROWS: usize = 32;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stream {
    Data,
    Noise,
}

struct Ctx<'a> {
    tape: Tape,
    params: &'a ParamVector,
    nets: &'a Networks,
    cfg: &'a LossConfig,
    chunk: &'a ChunkData,
    scale: [f64; 2],
    x: [Option<Var>; 2],
    log_pn: [Option<Var>; 2],
    sample: [Option<(Var, Var)>; 2],
    code: [Option<Var>; 2],
    delta: [Option<Var>; 2],
    code_delta: [Option<Var>; 2],
}

fn slot(s: Stream) -> usize {
    match s {
        Stream::Data => 0,
        Stream::Noise => 1,
    }
}

impl<'a> Ctx<'a> {
    fn new(
        params: &'a ParamVector,
        nets: &'a Networks,
        cfg: &'a LossConfig,
        chunk: &'a ChunkData,
        scale: [f64; 2],
    ) -> Self {
        Self {
            tape: Tape::new(params.len()),
            params,
            nets,
            cfg,
            chunk,
            scale,
            x: [None; 2],
            log_pn: [None; 2],
            sample: [None; 2],
            code: [None; 2],
            delta: [None; 2],
            code_delta: [None; 2],
        }
    }

    fn stream(&self, s: Stream) -> Option<&'a StreamData> {
        match s {
            Stream::Data => self.chunk.data.as_ref(),
            Stream::Noise => self.chunk.noise.as_ref(),
        }
    }

    fn encoder(&self, s: Stream) -> Result<&'a Encoder> {
        match s {
            Stream::Data => Ok(&self.nets.enc1),
            Stream::Noise if self.cfg.tie_encoders => Ok(&self.nets.enc1),
            Stream::Noise => self
                .nets
                .enc0
                .as_ref()
                .ok_or(LossError::MissingNoiseEncoder),
        }
    }

    fn x(&mut self, s: Stream) -> Var {
        let i = slot(s);
        if let Some(v) = self.x[i] {
            return v;
        }
        let v = self
            .tape
            .constant(self.stream(s).expect("stream present").x.clone());
        self.x[i] = Some(v);
        v
    }

    fn log_pn(&mut self, s: Stream) -> Var {
        let i = slot(s);
        if let Some(v) = self.log_pn[i] {
            return v;
        }
        let v = self
            .tape
            .constant(self.stream(s).expect("stream present").log_pn.clone());
        self.log_pn[i] = Some(v);
        v
    }

    /// Reparametrized `(z, log q(z | x))` from the stream's encoder.
    fn sample(&mut self, s: Stream, objective: &'static str) -> Result<(Var, Var)> {
        let i = slot(s);
        if let Some(v) = self.sample[i] {
            return Ok(v);
        }
        let enc = match self.encoder(s)? {
            Encoder::Stochastic(e) => e,
            Encoder::Deterministic(_) => {
                return Err(LossError::EncoderKind {
                    objective,
                    needs: "a stochastic encoder",
                })
            }
        };
        let x = self.x(s);
        let eps = &self.stream(s).expect("stream present").eps;
        let v = enc.encode_sample(&mut self.tape, self.params, x, eps)?;
        self.sample[i] = Some(v);
        Ok(v)
    }

    fn code(&mut self, s: Stream) -> Result<Var> {
        let i = slot(s);
        if let Some(v) = self.code[i] {
            return Ok(v);
        }
        let enc = self.encoder(s)?;
        let x = self.x(s);
        let v = enc.code(&mut self.tape, self.params, x)?;
        self.code[i] = Some(v);
        Ok(v)
    }

    /// `log p(x, z) - log p_n(x) - log q(z | x)` at the encoder sample.
    fn delta(&mut self, s: Stream, objective: &'static str) -> Result<Var> {
        let i = slot(s);
        if let Some(v) = self.delta[i] {
            return Ok(v);
        }
        let (z, log_q) = self.sample(s, objective)?;
        let x = self.x(s);
        let lj = self
            .nets
            .model
            .log_joint(&mut self.tape, self.params, x, z)?;
        let lpn = self.log_pn(s);
        let a = self.tape.sub(lj, lpn)?;
        let v = self.tape.sub(a, log_q)?;
        self.delta[i] = Some(v);
        Ok(v)
    }

    /// `log p(x, g(x)) - log p_n(x)` at the deterministic code.
    fn code_delta(&mut self, s: Stream) -> Result<Var> {
        let i = slot(s);
        if let Some(v) = self.code_delta[i] {
            return Ok(v);
        }
        let g = self.code(s)?;
        let x = self.x(s);
        let lj = self
            .nets
            .model
            .log_joint(&mut self.tape, self.params, x, g)?;
        let lpn = self.log_pn(s);
        let v = self.tape.sub(lj, lpn)?;
        self.code_delta[i] = Some(v);
        Ok(v)
    }

    /// Chunk contribution to the batch mean of a per-row column.
    fn mean(&mut self, s: Stream, col: Var) -> Var {
        let total = self.tape.sum(col);
        self.tape.scale(total, self.scale[slot(s)])
    }

    fn has(&self, s: Stream) -> bool {
        self.stream(s).is_some()
    }

    fn add_opt(&mut self, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(self.tape.add(a, b)?),
            (a, None) => a,
            (None, b) => b,
        })
    }

    fn vae_data_term(&mut self) -> Result<Option<Var>> {
        if !self.has(Stream::Data) {
            return Ok(None);
        }
        let x = self.x(Stream::Data);
        let per_row = match self.encoder(Stream::Data)? {
            Encoder::Stochastic(enc) => {
                let (z, _) = self.sample(Stream::Data, "vae")?;
                let ll = self
                    .nets
                    .model
                    .log_likelihood(&mut self.tape, self.params, x, z)?;
                let kl = enc.kl_to_standard(&mut self.tape, self.params, x)?;
                self.tape.sub(ll, kl)?
            }
            Encoder::Deterministic(_) => {
                let g = self.code(Stream::Data)?;
                let ll = self
                    .nets
                    .model
                    .log_likelihood(&mut self.tape, self.params, x, g)?;
                let lp = self.nets.model.log_prior(&mut self.tape, g);
                let gamma = -0.5 * self.nets.model.latent_dim() as f64 * LN_2PI;
                let lp = self.tape.add_scalar(lp, -gamma);
                self.tape.add(ll, lp)?
            }
        };
        Ok(Some(self.mean(Stream::Data, per_row)))
    }

    fn objective(&mut self, objective: Objective) -> Result<Option<Var>> {
        let t = self.cfg.clip_threshold;
        match objective {
            Objective::Fvnce { alpha, beta } => {
                let pair = self.cfg.pair(alpha, beta)?;
                let mut acc = None;
                if self.has(Stream::Data) {
                    let d = self.delta(Stream::Data, "fvnce")?;
                    let ns = neg_score(&mut self.tape, &pair, Outcome::Data, d, t, false)?;
                    let m = self.mean(Stream::Data, ns);
                    acc = Some(self.tape.neg(m));
                }
                if self.has(Stream::Noise) {
                    let drop = self.cfg.drop_constant_term;
                    let d = self.delta(Stream::Noise, "fvnce")?;
                    let ns = neg_score(&mut self.tape, &pair, Outcome::Noise, d, t, drop)?;
                    let m = self.mean(Stream::Noise, ns);
                    let v = self.tape.neg(m);
                    acc = self.add_opt(acc, Some(v))?;
                }
                Ok(acc)
            }
            Objective::Vae => self.vae_data_term(),
            Objective::Ae => {
                if !self.has(Stream::Data) {
                    return Ok(None);
                }
                let x = self.x(Stream::Data);
                let g = self.code(Stream::Data)?;
                let ll = self
                    .nets
                    .model
                    .log_likelihood(&mut self.tape, self.params, x, g)?;
                Ok(Some(self.mean(Stream::Data, ll)))
            }
            Objective::Rvae => {
                let vae = self.vae_data_term()?;
                let penalty = if self.has(Stream::Noise) {
                    let d = self.code_delta(Stream::Noise)?;
                    let ratio = self.tape.exp_clipped(d, t);
                    let m = self.mean(Stream::Noise, ratio);
                    Some(self.tape.neg(m))
                } else {
                    None
                };
                self.add_opt(vae, penalty)
            }
            Objective::J01 => {
                if !self.cfg.tie_encoders {
                    return Err(LossError::Untied("j01"));
                }
                let mut acc = None;
                for s in [Stream::Data, Stream::Noise] {
                    if !self.has(s) {
                        continue;
                    }
                    let d = self.delta(s, "j01")?;
                    let sp = self.tape.softplus(d);
                    let mut v = self.mean(s, sp);
                    if s == Stream::Noise && !self.cfg.drop_constant_term {
                        let r = self.tape.exp_clipped(d, t);
                        let mr = self.mean(s, r);
                        v = self.tape.sub(v, mr)?;
                    }
                    acc = self.add_opt(acc, Some(v))?;
                }
                Ok(acc)
            }
            Objective::J10 => {
                let mut acc = None;
                if let Some(data) = self.stream(Stream::Data) {
                    let x = self.x(Stream::Data);
                    let z = self
                        .tape
                        .constant(data.z_prior.clone().expect("data stream has prior draws"));
                    let ll = self
                        .nets
                        .model
                        .log_likelihood(&mut self.tape, self.params, x, z)?;
                    let lpn = self.log_pn(Stream::Data);
                    let u = self.tape.sub(ll, lpn)?;
                    let r = self.tape.exp_clipped(u, t);
                    acc = Some(self.mean(Stream::Data, r));
                }
                if self.has(Stream::Noise) {
                    let d = self.delta(Stream::Noise, "j10")?;
                    let d2 = self.tape.scale(d, 2.0);
                    let r2 = self.tape.exp_clipped(d2, t);
                    let m = self.mean(Stream::Noise, r2);
                    let v = self.tape.scale(m, -0.5);
                    acc = self.add_opt(acc, Some(v))?;
                }
                Ok(acc)
            }
        }
    }
}

struct ChunkResult {
    value: f64,
    term_values: Vec<f64>,
    grad: Vec<f64>,
    diagnostics: Diagnostics,
}

fn eval_chunk(
    nets: &Networks,
    params: &ParamVector,
    cfg: &LossConfig,
    chunk: &ChunkData,
    scale: [f64; 2],
    want_grad: bool,
) -> Result<ChunkResult> {
    let mut ctx = Ctx::new(params, nets, cfg, chunk, scale);
    let mut total: Option<Var> = None;
    let mut term_values = Vec::with_capacity(cfg.terms.len());
    for term in &cfg.terms {
        match ctx.objective(term.objective)? {
            Some(v) => {
                term_values.push(ctx.tape.scalar(v));
                let w = ctx.tape.scale(v, term.weight);
                total = ctx.add_opt(total, Some(w))?;
            }
            None => term_values.push(0.0),
        }
    }
    let mut diagnostics = Diagnostics {
        clip_count: ctx.tape.clip_count(),
        ..Default::default()
    };
    let delta_of = |s: Stream| ctx.delta[slot(s)].or(ctx.code_delta[slot(s)]);
    if let Some(d) = delta_of(Stream::Data) {
        diagnostics.delta_data_sum = ctx.tape.value(d).as_slice().iter().sum();
        diagnostics.delta_data_count = ctx.tape.value(d).len();
    }
    if let Some(d) = delta_of(Stream::Noise) {
        diagnostics.delta_noise_sum = ctx.tape.value(d).as_slice().iter().sum();
        diagnostics.delta_noise_count = ctx.tape.value(d).len();
    }
    let (value, grad) = match total {
        Some(v) => (
            ctx.tape.scalar(v),
            if want_grad {
                ctx.tape.backward(v)?
            } else {
                Vec::new()
            },
        ),
        None => (
            0.0,
            if want_grad {
                vec![0.0; params.len()]
            } else {
                Vec::new()
            },
        ),
    };
    Ok(ChunkResult {
        value,
        term_values,
        grad,
        diagnostics,
    })
}

/// Evaluate the configured objective (and optionally its gradient) on a batch.
///
/// Chunks of [`CHUNK_ROWS`] rows run on the current rayon pool and are
/// reduced in chunk order.
pub fn evaluate(
    nets: &Networks,
    params: &ParamVector,
    cfg: &LossConfig,
    batch: &Batch,
    want_grad: bool,
) -> Result<Evaluation> {
    cfg.validate()?;
    if batch.data_x.is_empty() || batch.noise_x.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let rows = batch.data_x.rows().max(batch.noise_x.rows());
    let scale = [
        1.0 / batch.data_x.rows() as f64,
        1.0 / batch.noise_x.rows() as f64,
    ];
    let chunks: Vec<ChunkData> = (0..rows.div_ceil(CHUNK_ROWS))
        .filter_map(|k| batch.chunk(k * CHUNK_ROWS, CHUNK_ROWS))
        .collect();
    let results: Vec<ChunkResult> = chunks
        .par_iter()
        .map(|c| eval_chunk(nets, params, cfg, c, scale, want_grad))
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut grad = if want_grad {
        vec![0.0; params.len()]
    } else {
        Vec::new()
    };
    let mut term_values = vec![0.0; cfg.terms.len()];
    let mut diagnostics = Diagnostics::default();
    for r in &results {
        value += r.value;
        for (g, rg) in grad.iter_mut().zip(&r.grad) {
            *g += rg;
        }
        for (t, rt) in term_values.iter_mut().zip(&r.term_values) {
            *t += rt;
        }
        diagnostics.merge(&r.diagnostics);
    }
    Ok(Evaluation {
        value,
        grad,
        diagnostics,
        term_values,
    })
}

/// Per-row log-ratios on the data and noise streams: `delta` at the encoder
/// sample for stochastic encoders, `log p(x, g(x)) - log p_n(x)` otherwise.
pub fn batch_deltas(
    nets: &Networks,
    params: &ParamVector,
    cfg: &LossConfig,
    batch: &Batch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = batch.data_x.rows().max(batch.noise_x.rows());
    let chunk = batch.chunk(0, rows).ok_or(LossError::EmptyBatch)?;
    let mut ctx = Ctx::new(params, nets, cfg, &chunk, [1.0, 1.0]);
    let mut out = [Vec::new(), Vec::new()];
    for s in [Stream::Data, Stream::Noise] {
        if !ctx.has(s) {
            continue;
        }
        let d = match ctx.encoder(s)? {
            Encoder::Stochastic(_) => ctx.delta(s, "deltas")?,
            Encoder::Deterministic(_) => ctx.code_delta(s)?,
        };
        out[slot(s)] = ctx.tape.value(d).as_slice().to_vec();
    }
    let [d, n] = out;
    Ok((d, n))
}

/// Per-row `log p(x | g(x))` with `g` the data-side deterministic code.
pub fn reconstruction_log_likelihood(
    nets: &Networks,
    params: &ParamVector,
    x: &Matrix,
) -> Result<Vec<f64>> {
    let rows: Vec<Result<Vec<f64>>> = (0..x.rows().div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|k| {
            let part = x.slice_rows(k * CHUNK_ROWS, ((k + 1) * CHUNK_ROWS).min(x.rows()));
            let mut tape = Tape::new(params.len());
            let xv = tape.constant(part);
            let g = nets.enc1.code(&mut tape, params, xv)?;
            let ll = nets.model.log_likelihood(&mut tape, params, xv, g)?;
            Ok(tape.value(ll).as_slice().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(x.rows());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Decoder means `f(g(x))` for every row.
pub fn reconstruct(nets: &Networks, params: &ParamVector, x: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new(params.len());
    let xv = tape.constant(x.clone());
    let g = nets.enc1.code(&mut tape, params, xv)?;
    let mean = nets.model.decode(&mut tape, params, g)?;
    Ok(tape.value(mean).clone())
}

/// Random subset of `n` distinct indices below `len`, in draw order.
pub fn minibatch_indices(rng: &mut Rng64, len: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, n.min(len)).into_vec()
}

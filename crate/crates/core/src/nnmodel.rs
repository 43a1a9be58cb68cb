//! Latent-variable generative models and encoders.
//!
//! Continuous models are MLPs recorded on a [`Tape`]; their parameters live in
//! a shared [`ParamVector`] under name prefixes. Tabular models keep an
//! unconstrained table `theta` with `p(x, z) = softmax(theta)[x, z]`, which
//! makes every sum exact.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, ParamVector, Tape, Var};
use crate::dist::{log_sum_exp, Rng64, LN_2PI};
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {0} of the joint table has zero mass")]
    ZeroMarginal(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network with a linear output layer. Layer `i` owns the
/// slices `{prefix}.w{i}` (`in x out`) and `{prefix}.b{i}` (`1 x out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn register(
        params: &mut ParamVector,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ModelError::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        for (i, w) in sizes.windows(2).enumerate() {
            params.add(&format!("{prefix}.w{i}"), w[0], w[1])?;
            params.add(&format!("{prefix}.b{i}"), 1, w[1])?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(&self, params: &mut ParamVector, rng: &mut Rng64) -> Result<()> {
        for (i, w) in self.sizes.windows(2).enumerate() {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for v in params.get_mut(&format!("{}.w{i}", self.prefix))? {
                *v = rng.random_range(-limit..limit);
            }
            params.get_mut(&format!("{}.b{i}", self.prefix))?.fill(0.0);
        }
        Ok(())
    }

    /// Zero every weight and bias.
    pub fn zero(&self, params: &mut ParamVector) -> Result<()> {
        for i in 0..self.sizes.len() - 1 {
            params.get_mut(&format!("{}.w{i}", self.prefix))?.fill(0.0);
            params.get_mut(&format!("{}.b{i}", self.prefix))?.fill(0.0);
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamVector, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "{} expects {} inputs, got {cols}",
                self.prefix,
                self.input_dim()
            )));
        }
        let n_layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..n_layers {
            let w = params.bind(tape, &format!("{}.w{i}", self.prefix))?;
            let b = params.bind(tape, &format!("{}.b{i}", self.prefix))?;
            let hw = tape.matmul(h, w)?;
            h = tape.add(hw, b)?;
            if i + 1 < n_layers {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }
}

/// `p(x, z) = N(x; decoder(z), sigma_dec^2 I) N(z; 0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatentModel {
    pub decoder: Mlp,
    pub sigma_dec: f64,
}

impl GaussianLatentModel {
    pub fn register(
        params: &mut ParamVector,
        hidden: &[usize],
        latent_dim: usize,
        data_dim: usize,
        sigma_dec: f64,
        activation: Activation,
    ) -> Result<Self> {
        if !(sigma_dec > 0.0) {
            return Err(ModelError::Invalid(format!("sigma_dec = {sigma_dec}")));
        }
        let sizes: Vec<usize> = std::iter::once(latent_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(data_dim))
            .collect();
        Ok(Self {
            decoder: Mlp::register(params, "dec", &sizes, activation)?,
            sigma_dec,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn decode(&self, tape: &mut Tape, params: &ParamVector, z: Var) -> Result<Var> {
        self.decoder.forward(tape, params, z)
    }

    /// Per-row `log p(x | z)`.
    pub fn log_likelihood(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        let mean = self.decode(tape, params, z)?;
        gaussian_log_pdf_rows(tape, x, mean, self.sigma_dec)
    }

    /// Per-row `log p_Z(z)` for the standard normal prior.
    pub fn log_prior(&self, tape: &mut Tape, z: Var) -> Var {
        std_normal_rows(tape, z)
    }

    /// Per-row `log p(x, z) = log p(x | z) + log p_Z(z)`.
    pub fn log_joint(&self, tape: &mut Tape, params: &ParamVector, x: Var, z: Var) -> Result<Var> {
        let ll = self.log_likelihood(tape, params, x, z)?;
        let lp = self.log_prior(tape, z);
        Ok(tape.add(ll, lp)?)
    }
}

/// `log N(x; mean, sigma^2 I)` per row.
pub fn gaussian_log_pdf_rows(tape: &mut Tape, x: Var, mean: Var, sigma: f64) -> Result<Var> {
    let (xs, ms) = (tape.value(x).shape(), tape.value(mean).shape());
    if xs != ms {
        return Err(ModelError::Shape(format!("x {xs:?} vs mean {ms:?}")));
    }
    let d = xs.1 as f64;
    let diff = tape.sub(x, mean)?;
    let sq = tape.square(diff);
    let ssq = tape.sum_rows(sq);
    let scaled = tape.scale(ssq, -0.5 / (sigma * sigma));
    Ok(tape.add_scalar(scaled, -0.5 * d * (LN_2PI + 2.0 * sigma.ln())))
}

fn std_normal_rows(tape: &mut Tape, z: Var) -> Var {
    let d = tape.value(z).cols() as f64;
    let sq = tape.square(z);
    let ssq = tape.sum_rows(sq);
    let s = tape.scale(ssq, -0.5);
    tape.add_scalar(s, -0.5 * d * LN_2PI)
}

/// Diagonal Gaussian `q(z | x)` whose MLP outputs `[mean, log_var]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticEncoder {
    pub mlp: Mlp,
}

impl StochasticEncoder {
    pub fn register(
        params: &mut ParamVector,
        prefix: &str,
        data_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(data_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(2 * latent_dim))
            .collect();
        Ok(Self {
            mlp: Mlp::register(params, prefix, &sizes, activation)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.output_dim() / 2
    }

    /// `(mean, log_var)`, each `n x latent_dim`.
    pub fn moments(&self, tape: &mut Tape, params: &ParamVector, x: Var) -> Result<(Var, Var)> {
        let out = self.mlp.forward(tape, params, x)?;
        let k = self.latent_dim();
        Ok((tape.slice_cols(out, 0, k)?, tape.slice_cols(out, k, 2 * k)?))
    }

    /// Reparametrized draw `z = mean + exp(log_var / 2) eps` and `log q(z | x)`.
    pub fn encode_sample(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        x: Var,
        eps: &Matrix,
    ) -> Result<(Var, Var)> {
        let (mean, log_var) = self.moments(tape, params, x)?;
        if tape.value(mean).shape() != eps.shape() {
            return Err(ModelError::Shape(format!(
                "noise {:?} vs codes {:?}",
                eps.shape(),
                tape.value(mean).shape()
            )));
        }
        let half = tape.scale(log_var, 0.5);
        let std = tape.exp(half);
        let e = tape.constant(eps.clone());
        let spread = tape.mul(std, e)?;
        let z = tape.add(mean, spread)?;
        // log q at the sample: -1/2 sum(log 2 pi + log_var + eps^2)
        let lv_sum = tape.sum_rows(log_var);
        let k = self.latent_dim() as f64;
        let eps_sq: Vec<f64> = eps
            .iter_rows()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let c = tape.constant(Matrix::column(eps_sq));
        let inner = tape.add(lv_sum, c)?;
        let s = tape.scale(inner, -0.5);
        let log_q = tape.add_scalar(s, -0.5 * k * LN_2PI);
        Ok((z, log_q))
    }

    /// `log q(z | x)` per row for given codes.
    pub fn log_density(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        z: Var,
        x: Var,
    ) -> Result<Var> {
        let (mean, log_var) = self.moments(tape, params, x)?;
        let diff = tape.sub(z, mean)?;
        let sq = tape.square(diff);
        let neg_lv = tape.neg(log_var);
        let prec = tape.exp(neg_lv);
        let quad = tape.mul(sq, prec)?;
        let inner = tape.add(quad, log_var)?;
        let s = tape.sum_rows(inner);
        let s = tape.scale(s, -0.5);
        Ok(tape.add_scalar(s, -0.5 * self.latent_dim() as f64 * LN_2PI))
    }

    /// `KL(q(. | x) || N(0, I))` per row.
    pub fn kl_to_standard(&self, tape: &mut Tape, params: &ParamVector, x: Var) -> Result<Var> {
        let (mean, log_var) = self.moments(tape, params, x)?;
        let var = tape.exp(log_var);
        let m2 = tape.square(mean);
        let a = tape.add(var, m2)?;
        let b = tape.sub(a, log_var)?;
        let s = tape.sum_rows(b);
        let s = tape.add_scalar(s, -(self.latent_dim() as f64));
        Ok(tape.scale(s, 0.5))
    }
}

/// Deterministic code map `x -> g(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicEncoder {
    pub mlp: Mlp,
}

impl DeterministicEncoder {
    pub fn register(
        params: &mut ParamVector,
        prefix: &str,
        data_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(data_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(latent_dim))
            .collect();
        Ok(Self {
            mlp: Mlp::register(params, prefix, &sizes, activation)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamVector, x: Var) -> Result<Var> {
        self.mlp.forward(tape, params, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Encoder {
    Stochastic(StochasticEncoder),
    Deterministic(DeterministicEncoder),
}

impl Encoder {
    pub fn latent_dim(&self) -> usize {
        match self {
            Encoder::Stochastic(e) => e.latent_dim(),
            Encoder::Deterministic(e) => e.latent_dim(),
        }
    }

    pub fn mlp(&self) -> &Mlp {
        match self {
            Encoder::Stochastic(e) => &e.mlp,
            Encoder::Deterministic(e) => &e.mlp,
        }
    }

    /// Deterministic code: `g(x)`, or the posterior mean of a stochastic encoder.
    pub fn code(&self, tape: &mut Tape, params: &ParamVector, x: Var) -> Result<Var> {
        match self {
            Encoder::Stochastic(e) => Ok(e.moments(tape, params, x)?.0),
            Encoder::Deterministic(e) => e.encode(tape, params, x),
        }
    }
}

/// Finite joint `p(x, z) = softmax(theta)[x, z]` over an `nx x nz` grid.
/// Entries of `theta` may be `-inf` to remove points from the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularJointModel {
    params: ParamVector,
    nx: usize,
    nz: usize,
}

impl TabularJointModel {
    pub const SLICE: &'static str = "theta";

    pub fn new(nx: usize, nz: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != nx * nz || nx == 0 || nz == 0 {
            return Err(ModelError::Shape(format!(
                "theta has {} entries for a {nx} x {nz} table",
                theta.len()
            )));
        }
        if theta.iter().all(|&t| t == f64::NEG_INFINITY)
            || theta.iter().any(|t| t.is_nan() || *t == f64::INFINITY)
        {
            return Err(ModelError::Invalid("theta must have finite entries".into()));
        }
        let mut params = ParamVector::new();
        params.add(Self::SLICE, nx, nz)?;
        params.set_values(theta)?;
        Ok(Self { params, nx, nz })
    }

    /// `theta` with i.i.d. `N(0, scale^2)` entries.
    pub fn random(nx: usize, nz: usize, scale: f64, rng: &mut Rng64) -> Self {
        let theta = (0..nx * nz)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                scale * e
            })
            .collect::<Vec<f64>>();
        Self::new(nx, nz, theta).expect("finite random table")
    }

    /// Joint from explicit probabilities (zeros allowed).
    pub fn from_probs(nx: usize, nz: usize, probs: &[f64]) -> Result<Self> {
        Self::new(nx, nz, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn theta(&self) -> &[f64] {
        self.params.values()
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        *self = Self::new(self.nx, self.nz, theta)?;
        Ok(())
    }

    /// `log p(x, z)` for every cell, row-major.
    pub fn log_joint_table(&self) -> Vec<f64> {
        let lse = log_sum_exp(self.theta());
        self.theta().iter().map(|t| t - lse).collect()
    }

    pub fn joint_table(&self) -> Vec<f64> {
        self.log_joint_table().into_iter().map(f64::exp).collect()
    }

    pub fn log_joint(&self, x: usize, z: usize) -> f64 {
        self.log_joint_table()[x * self.nz + z]
    }

    /// `log p(x) = log sum_z p(x, z)` for every `x`.
    pub fn log_marginals(&self) -> Vec<f64> {
        let t = self.log_joint_table();
        t.chunks_exact(self.nz).map(log_sum_exp).collect()
    }

    /// `p(z | x)` as an encoder table.
    pub fn exact_posterior(&self) -> Result<TabularEncoder> {
        let t = self.log_joint_table();
        let marg = self.log_marginals();
        let mut log_q = Vec::with_capacity(t.len());
        for (x, row) in t.chunks_exact(self.nz).enumerate() {
            if marg[x] == f64::NEG_INFINITY {
                return Err(ModelError::ZeroMarginal(x));
            }
            log_q.extend(row.iter().map(|l| l - marg[x]));
        }
        Ok(TabularEncoder {
            nx: self.nx,
            nz: self.nz,
            log_q,
        })
    }

    /// Record `log p(x, z)` as an `nx x nz` tape node.
    pub fn log_joint_on_tape(&self, tape: &mut Tape) -> Result<Var> {
        let theta = self.params.bind(tape, Self::SLICE)?;
        let flat = tape.reshape(theta, 1, self.nx * self.nz)?;
        let lse = tape.logsumexp(flat);
        Ok(tape.sub(theta, lse)?)
    }
}

fn dirichlet_row(rng: &mut Rng64, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / s).collect()
}

/// Symmetric Dirichlet(1) probability vector.
pub fn dirichlet_uniform(rng: &mut Rng64, n: usize) -> Vec<f64> {
    dirichlet_row(rng, n)
}

/// Tabular `q(z | x)`; each row is a distribution over `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    nx: usize,
    nz: usize,
    log_q: Vec<f64>,
}

impl TabularEncoder {
    /// Rows are renormalized.
    pub fn from_probs(nx: usize, nz: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != nx * nz {
            return Err(ModelError::Shape(format!(
                "{} entries for {nx} x {nz}",
                probs.len()
            )));
        }
        let mut log_q = Vec::with_capacity(probs.len());
        for (x, row) in probs.chunks_exact(nz).enumerate() {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || row.iter().any(|p| *p < 0.0) {
                return Err(ModelError::ZeroMarginal(x));
            }
            log_q.extend(row.iter().map(|p| (p / s).ln()));
        }
        Ok(Self { nx, nz, log_q })
    }

    /// Rows drawn from a symmetric Dirichlet(1).
    pub fn random(nx: usize, nz: usize, rng: &mut Rng64) -> Self {
        let probs: Vec<f64> = (0..nx).flat_map(|_| dirichlet_row(rng, nz)).collect();
        Self::from_probs(nx, nz, &probs).expect("dirichlet rows are valid")
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn log_q(&self, x: usize, z: usize) -> f64 {
        self.log_q[x * self.nz + z]
    }

    pub fn q(&self, x: usize, z: usize) -> f64 {
        self.log_q(x, z).exp()
    }

    pub fn row(&self, x: usize) -> Vec<f64> {
        (0..self.nz).map(|z| self.q(x, z)).collect()
    }

    pub fn sample(&self, x: usize, rng: &mut Rng64) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for z in 0..self.nz {
            acc += self.q(x, z);
            if u < acc {
                return z;
            }
        }
        // rounding: fall back to the last supported code
        (0..self.nz)
            .rev()
            .find(|&z| self.q(x, z) > 0.0)
            .unwrap_or(self.nz - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::seeded_rng;

    fn net(
        act: Activation,
    ) -> (
        ParamVector,
        GaussianLatentModel,
        StochasticEncoder,
        DeterministicEncoder,
    ) {
        let mut p = ParamVector::new();
        let m = GaussianLatentModel::register(&mut p, &[5], 2, 4, 0.5, act).unwrap();
        let q = StochasticEncoder::register(&mut p, "enc", 4, &[5], 2, act).unwrap();
        let g = DeterministicEncoder::register(&mut p, "det", 4, &[3], 2, act).unwrap();
        (p, m, q, g)
    }

    #[test]
    fn zero_decoder_log_joint() {
        let (mut p, m, _, _) = net(Activation::Tanh);
        m.decoder.zero(&mut p).unwrap();
        let mut t = Tape::new(p.len());
        let x = t.constant(Matrix::zeros(1, 4));
        let z = t.constant(Matrix::zeros(1, 2));
        let lj = m.log_joint(&mut t, &p, x, z).unwrap();
        let expected = -2.0 * (LN_2PI + 2.0 * 0.5f64.ln()) - 1.0 * LN_2PI;
        assert!((t.value(lj).as_slice()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (p, m, q, _) = net(Activation::Tanh);
        let mut t = Tape::new(p.len());
        let x = t.constant(Matrix::zeros(1, 3));
        let z = t.constant(Matrix::zeros(1, 2));
        assert!(m.log_joint(&mut t, &p, x, z).is_err());
        assert!(q
            .encode_sample(&mut t, &p, x, &Matrix::zeros(1, 2))
            .is_err());
        let x4 = t.constant(Matrix::zeros(2, 4));
        assert!(q
            .encode_sample(&mut t, &p, x4, &Matrix::zeros(1, 2))
            .is_err());
    }

    #[test]
    fn zero_encoder_samples_are_the_noise() {
        let (p, _, q, _) = net(Activation::Tanh);
        let mut t = Tape::new(p.len());
        let x = t.constant(Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.1]));
        let eps = Matrix::from_vec(1, 2, vec![0.7, -1.3]);
        let (z, lq) = q.encode_sample(&mut t, &p, x, &eps).unwrap();
        assert_eq!(t.value(z), &eps);
        let expected = -0.5 * (2.0 * LN_2PI + 0.49 + 1.69);
        assert!((t.value(lq).as_slice()[0] - expected).abs() < 1e-14);
        // log_density at the sample agrees with the reparametrized value
        let ld = q.log_density(&mut t, &p, z, x).unwrap();
        assert!((t.value(ld).as_slice()[0] - expected).abs() < 1e-14);
        let kl = q.kl_to_standard(&mut t, &p, x).unwrap();
        assert_eq!(t.value(kl).as_slice()[0], 0.0);
    }

    #[test]
    fn encoder_density_integrates_to_one_in_1d() {
        let mut p = ParamVector::new();
        let q = StochasticEncoder::register(&mut p, "enc", 1, &[3], 1, Activation::Tanh).unwrap();
        q.mlp.init(&mut p, &mut seeded_rng(3)).unwrap();
        let n = 4000;
        let (a, b) = (-15.0, 15.0);
        let h = (b - a) / n as f64;
        let zs: Vec<f64> = (0..=n).map(|i| a + h * i as f64).collect();
        let mut t = Tape::new(p.len());
        let x = t.constant(Matrix::filled(n + 1, 1, 0.8));
        let z = t.constant(Matrix::column(zs));
        let ld = q.log_density(&mut t, &p, z, x).unwrap();
        let f: Vec<f64> = t.value(ld).as_slice().iter().map(|l| l.exp()).collect();
        let mut s = f[0] + f[n];
        for (i, v) in f.iter().enumerate().take(n).skip(1) {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * v;
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn reparametrized_moments() {
        let (mut p, _, q, _) = net(Activation::Tanh);
        let mut rng = seeded_rng(9);
        q.mlp.init(&mut p, &mut rng).unwrap();
        let n = 10_000;
        let xrow = [0.5, -0.2, 0.9, 0.0];
        let x = Matrix::from_vec(n, 4, xrow.repeat(n));
        let eps = crate::dist::standard_normal_matrix(&mut rng, n, 2);
        let mut t = Tape::new(p.len());
        let xv = t.constant(x);
        let (mean, lv) = q.moments(&mut t, &p, xv).unwrap();
        let (m0, lv0) = (t.value(mean).row(0).to_vec(), t.value(lv).row(0).to_vec());
        let (z, _) = q.encode_sample(&mut t, &p, xv, &eps).unwrap();
        let zm = t.value(z).clone();
        for k in 0..2 {
            let col: Vec<f64> = zm.iter_rows().map(|r| r[k]).collect();
            let mu = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
            let true_sd = (0.5 * lv0[k]).exp();
            assert!((mu - m0[k]).abs() < 0.05 * true_sd.max(m0[k].abs()));
            assert!((sd - true_sd).abs() < 0.05 * true_sd);
        }
    }

    #[test]
    fn deterministic_encoder_is_deterministic() {
        let (mut p, _, _, g) = net(Activation::Relu);
        g.mlp.init(&mut p, &mut seeded_rng(1)).unwrap();
        let x = Matrix::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5]);
        let run = || {
            let mut t = Tape::new(p.len());
            let xv = t.constant(x.clone());
            let z = g.encode(&mut t, &p, xv).unwrap();
            t.value(z).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tabular_normalization_and_lookup() {
        let m = TabularJointModel::random(5, 3, 1.5, &mut seeded_rng(2));
        let total: f64 = m.joint_table().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut m2 = m.clone();
        m2.set_theta(m.theta().iter().map(|t| t * 3.0 - 1.0).collect())
            .unwrap();
        assert!((m2.joint_table().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lt = m.log_joint_table();
        assert_eq!(m.log_joint(2, 1), lt[2 * 3 + 1]);
        let mut t = Tape::new(m.params().len());
        let v = m.log_joint_on_tape(&mut t).unwrap();
        for (a, b) in t.value(v).as_slice().iter().zip(&lt) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_posterior_examples() {
        let m = TabularJointModel::from_probs(2, 2, &[0.4, 0.1, 0.2, 0.3]).unwrap();
        let q = m.exact_posterior().unwrap();
        assert!((q.q(0, 0) - 0.8).abs() < 1e-14);
        for x in 0..2 {
            assert!((q.row(x).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        // independent joint: posterior rows equal the z marginal
        let (px, pz) = ([0.3, 0.7], [0.1, 0.6, 0.3]);
        let probs: Vec<f64> = px
            .iter()
            .flat_map(|a| pz.iter().map(move |b| a * b))
            .collect();
        let q = TabularJointModel::from_probs(2, 3, &probs)
            .unwrap()
            .exact_posterior()
            .unwrap();
        for x in 0..2 {
            for (a, b) in q.row(x).iter().zip(pz) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let dead = TabularJointModel::from_probs(2, 2, &[0.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(matches!(
            dead.exact_posterior(),
            Err(ModelError::ZeroMarginal(0))
        ));
    }

    #[test]
    fn tabular_encoder_sampling_frequencies() {
        let q = TabularEncoder::from_probs(1, 3, &[0.2, 0.0, 0.8]).unwrap();
        let mut rng = seeded_rng(4);
        let n = 20_000;
        let hits = (0..n).filter(|_| q.sample(0, &mut rng) == 0).count();
        assert!(((hits as f64 / n as f64) - 0.2).abs() < 0.015);
        assert!((0..1000).all(|_| q.sample(0, &mut rng) != 1));
    }
}

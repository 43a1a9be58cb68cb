//! The double-ELBO family of binary proper scoring rules.
//!
//! A scoring pair `(f1, f0)` maps a density ratio `r = p_model / p_noise` to the
//! score of a data sample (`f1`) and of a noise sample (`f0`). Every atom of the
//! family satisfies `f0'(r) = -r f1'(r)`, both functions are concave, and the
//! induced generator
//!
//! ```text
//! G(mu) = mu f1(mu / (1 - mu)) + (1 - mu) f0(mu / (1 - mu))
//! ```
//!
//! is strictly convex on `(0, 1)`. Atoms are indexed by `(alpha, beta)`:
//!
//! * `alpha = 0`: `f1(r) = log(r + beta)`, `f0(r) = beta log(r + beta) - r`
//! * `alpha > 0`: `f1(r) = (r + beta)^alpha / alpha`,
//!   `f0(r) = -(alpha r - beta)(r + beta)^alpha / (alpha (alpha + 1))`
//!
//! Non-negative combinations of atoms stay in the family, so a [`ScoringPair`]
//! is a weighted list of atoms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp for `r` inside `log r` of a `(0, 0)` atom.
pub const R_MIN: f64 = 1e-30;
/// Open-interval guard for posterior values `mu`.
pub const MU_MIN: f64 = 1e-9;
/// Default threshold of the clipped exponential.
pub const DEFAULT_CLIP_THRESHOLD: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsrError {
    #[error("{what} = {value} is outside the domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("invalid atom (alpha = {alpha}, beta = {beta}, weight = {weight}): {reason}")]
    InvalidAtom {
        alpha: f64,
        beta: f64,
        weight: f64,
        reason: &'static str,
    },
    #[error("length mismatch: {pairs} pairs but {weights} weights")]
    LengthMismatch { pairs: usize, weights: usize },
    #[error("weight {0} must be positive and finite")]
    NonPositiveWeight(f64),
    #[error("cannot combine raw and normalized pairs")]
    MixedNormalization,
    #[error("a scoring pair needs at least one atom")]
    Empty,
}

pub type Result<T> = std::result::Result<T, PsrError>;

/// Which of the two classes a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    /// `x = 1`: the sample came from the data (model) side.
    Data,
    /// `x = 0`: the sample came from the noise distribution.
    Noise,
}

impl From<bool> for Outcome {
    fn from(bit: bool) -> Self {
        if bit {
            Outcome::Data
        } else {
            Outcome::Noise
        }
    }
}

/// One `(alpha, beta)` member of the family with a positive cone weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub alpha: f64,
    pub beta: f64,
    pub weight: f64,
}

impl Atom {
    pub fn new(alpha: f64, beta: f64, weight: f64) -> Result<Self> {
        let bad = |reason| PsrError::InvalidAtom {
            alpha,
            beta,
            weight,
            reason,
        };
        if !(0.0..=1.0).contains(&alpha) {
            return Err(bad("alpha must lie in [0, 1]"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(bad("beta must be finite and non-negative"));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(bad("weight must be finite and positive"));
        }
        Ok(Self {
            alpha,
            beta,
            weight,
        })
    }

    /// `f1` has a log singularity at `r = 0`.
    fn is_log_singular(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }

    fn f1(&self, r: f64, normalized: bool) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        match (a == 0.0, normalized) {
            (true, false) => {
                if b == 0.0 {
                    r.max(R_MIN).ln()
                } else {
                    (r + b).ln()
                }
            }
            (false, false) => (r + b).powf(a) / a,
            (true, true) => (1.0 + b) * norm_log(r.max(R_MIN), b),
            (false, true) => (1.0 + b) * expm1_over(a, norm_log(r, b)),
        }
    }

    fn f0(&self, r: f64, normalized: bool) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        match (a == 0.0, normalized) {
            (true, false) => {
                if b == 0.0 {
                    -r
                } else {
                    b * (r + b).ln() - r
                }
            }
            (false, false) => -(a * r - b) * (r + b).powf(a) / (a * (a + 1.0)),
            (true, true) => -(1.0 + b) * ((r - 1.0) - b * norm_log(r, b)),
            (false, true) => {
                let l = norm_log(r, b);
                -(1.0 + b) / (a + 1.0) * (r * (a * l).exp() - 1.0 - b * expm1_over(a, l))
            }
        }
    }

    fn df1(&self, r: f64, normalized: bool) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let r = if self.is_log_singular() {
            r.max(R_MIN)
        } else {
            r
        };
        if normalized {
            // ((r + b) / (1 + b))^(a - 1)
            ((a - 1.0) * norm_log(r, b)).exp()
        } else if a == 0.0 {
            1.0 / (r + b)
        } else {
            (r + b).powf(a - 1.0)
        }
    }

    /// Negated score in the logit parametrization `r = exp(delta)`.
    fn neg_logit(&self, outcome: Outcome, delta: f64, normalized: bool, clip: &mut Clip) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        // log(r + b)
        let log_rb = if b == 0.0 {
            delta
        } else {
            log_add_exp(delta, b.ln())
        };
        match (a == 0.0, normalized, outcome) {
            (true, false, Outcome::Data) => -log_rb,
            (true, false, Outcome::Noise) => {
                clip.exp(delta) - if b == 0.0 { 0.0 } else { b * log_rb }
            }
            (true, true, Outcome::Data) => -(1.0 + b) * (log_rb - b.ln_1p()),
            (true, true, Outcome::Noise) => {
                (1.0 + b) * (clip.exp(delta) - 1.0 - b * (log_rb - b.ln_1p()))
            }
            (false, false, Outcome::Data) => -clip.exp(a * log_rb) / a,
            (false, false, Outcome::Noise) => {
                let second = if b == 0.0 {
                    0.0
                } else {
                    b * clip.exp(a * log_rb)
                };
                (a * clip.exp(delta + a * log_rb) - second) / (a * (a + 1.0))
            }
            (false, true, Outcome::Data) => {
                let l = log_rb - b.ln_1p();
                -(1.0 + b) * (clip.exp(a * l) - 1.0) / a
            }
            (false, true, Outcome::Noise) => {
                let l = log_rb - b.ln_1p();
                let second = if b == 0.0 {
                    0.0
                } else {
                    b * (clip.exp(a * l) - 1.0) / a
                };
                (1.0 + b) / (a + 1.0) * (clip.exp(delta + a * l) - 1.0 - second)
            }
        }
    }
}

/// `log((r + b) / (1 + b))`, accurate near `r = 1`.
fn norm_log(r: f64, b: f64) -> f64 {
    ((r - 1.0) / (1.0 + b)).ln_1p()
}

/// `(exp(a x) - 1) / a`, continuous as `a -> 0`.
fn expm1_over(a: f64, x: f64) -> f64 {
    (a * x).exp_m1() / a
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `exp(u)` for `u <= t`, the tangent line `e^t (u - t + 1)` beyond.
///
/// Value and first derivative are continuous at `u = t`.
pub fn exp_clipped(u: f64, t: f64) -> f64 {
    if u > t {
        t.exp() * (u - t + 1.0)
    } else {
        u.exp()
    }
}

struct Clip {
    threshold: f64,
    count: usize,
}

impl Clip {
    fn exp(&mut self, u: f64) -> f64 {
        if u > self.threshold {
            self.count += 1;
        }
        exp_clipped(u, self.threshold)
    }
}

/// The three equivalent parametrizations of a binary posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioPoint {
    /// Density ratio `p_model / p_noise`.
    pub r: f64,
    /// Posterior `r / (1 + r)`.
    pub mu: f64,
    /// Logit `log r`.
    pub delta: f64,
}

impl RatioPoint {
    pub fn from_ratio(r: f64) -> Result<Self> {
        check_ratio(r)?;
        Ok(Self {
            r,
            mu: r / (1.0 + r),
            delta: r.ln(),
        })
    }

    pub fn from_mu(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(PsrError::Domain {
                what: "mu",
                value: mu,
                domain: "(0, 1)",
            });
        }
        Ok(Self {
            r: mu / (1.0 - mu),
            mu,
            delta: mu.ln() - (-mu).ln_1p(),
        })
    }

    pub fn from_delta(delta: f64) -> Self {
        // logistic sigmoid, evaluated without overflow
        let mu = if delta >= 0.0 {
            1.0 / (1.0 + (-delta).exp())
        } else {
            let e = delta.exp();
            e / (1.0 + e)
        };
        Self {
            r: delta.exp(),
            mu,
            delta,
        }
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(PsrError::Domain {
            what: "r",
            value: r,
            domain: "(0, inf)",
        })
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > MU_MIN && mu < 1.0 - MU_MIN {
        Ok(())
    } else {
        Err(PsrError::Domain {
            what: "mu",
            value: mu,
            domain: "(mu_min, 1 - mu_min)",
        })
    }
}

/// A non-negative combination of `(alpha, beta)` atoms, in either the raw form
/// or the form pinned by `f1(1) = f0(1) = 0`, `f1'(1) = 1` per unit weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringPair {
    atoms: Vec<Atom>,
    normalized: bool,
}

impl ScoringPair {
    /// Single raw atom of unit weight.
    pub fn raw(alpha: f64, beta: f64) -> Result<Self> {
        Self::from_atoms(vec![Atom::new(alpha, beta, 1.0)?], false)
    }

    /// Single normalized atom of unit weight.
    pub fn normalized(alpha: f64, beta: f64) -> Result<Self> {
        Self::from_atoms(vec![Atom::new(alpha, beta, 1.0)?], true)
    }

    pub fn from_atoms(atoms: Vec<Atom>, normalized: bool) -> Result<Self> {
        if atoms.is_empty() {
            return Err(PsrError::Empty);
        }
        for a in &atoms {
            Atom::new(a.alpha, a.beta, a.weight)?;
        }
        Ok(Self { atoms, normalized })
    }

    /// The logarithmic `(0, 0)` pair, `f1 = log r`, `f0 = -r`.
    pub fn log_ratio() -> Self {
        Self {
            atoms: vec![Atom {
                alpha: 0.0,
                beta: 0.0,
                weight: 1.0,
            }],
            normalized: false,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Same atoms, other parametrization.
    pub fn with_normalization(&self, normalized: bool) -> Self {
        Self {
            atoms: self.atoms.clone(),
            normalized,
        }
    }

    /// True when `f1(r)` is being evaluated at the clamp `R_MIN`.
    pub fn is_clamped(&self, r: f64) -> bool {
        r < R_MIN && self.atoms.iter().any(Atom::is_log_singular)
    }

    fn sum(&self, f: impl Fn(&Atom) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(a)).sum()
    }

    pub fn eval_f1(&self, r: f64) -> Result<f64> {
        check_ratio(r)?;
        Ok(self.sum(|a| a.f1(r, self.normalized)))
    }

    pub fn eval_f0(&self, r: f64) -> Result<f64> {
        check_ratio(r)?;
        Ok(self.sum(|a| a.f0(r, self.normalized)))
    }

    pub fn grad_f1(&self, r: f64) -> Result<f64> {
        check_ratio(r)?;
        Ok(self.sum(|a| a.df1(r, self.normalized)))
    }

    pub fn grad_f0(&self, r: f64) -> Result<f64> {
        check_ratio(r)?;
        Ok(self.sum(|a| -r * a.df1(r, self.normalized)))
    }

    /// The convex generator `G(mu)`.
    pub fn eval_g(&self, mu: f64) -> Result<f64> {
        check_mu(mu)?;
        let r = mu / (1.0 - mu);
        Ok(mu * self.eval_f1(r)? + (1.0 - mu) * self.eval_f0(r)?)
    }

    /// `G'(mu) = f1(r) - f0(r)`, which follows from `f0' = -r f1'`.
    pub fn eval_g_prime(&self, mu: f64) -> Result<f64> {
        check_mu(mu)?;
        let r = mu / (1.0 - mu);
        Ok(self.eval_f1(r)? - self.eval_f0(r)?)
    }

    /// `G''(mu) = (1 + r)^3 f1'(r)` with `r = mu / (1 - mu)`.
    pub fn eval_g_second(&self, mu: f64) -> Result<f64> {
        check_mu(mu)?;
        let r = mu / (1.0 - mu);
        Ok((1.0 + r).powi(3) * self.grad_f1(r)?)
    }

    /// `S(1, mu)` for data, `S(0, 1 - mu)` for noise, where `mu` is the
    /// predicted probability of the data class.
    pub fn score(&self, outcome: Outcome, mu: f64) -> Result<f64> {
        check_mu(mu)?;
        let r = mu / (1.0 - mu);
        match outcome {
            Outcome::Data => self.eval_f1(r),
            Outcome::Noise => self.eval_f0(r),
        }
    }

    /// Binary Bregman divergence `D_G(mu || nu)`.
    pub fn bregman(&self, mu: f64, nu: f64) -> Result<f64> {
        Ok(self.eval_g(mu)? - self.eval_g(nu)? - (mu - nu) * self.eval_g_prime(nu)?)
    }

    /// Negated score as a classification loss of the logit `delta = log r`,
    /// with exponentials clipped at [`DEFAULT_CLIP_THRESHOLD`].
    pub fn logit_loss(&self, outcome: Outcome, delta: f64) -> f64 {
        self.logit_loss_clipped(outcome, delta, DEFAULT_CLIP_THRESHOLD)
            .0
    }

    /// Like [`logit_loss`](Self::logit_loss) with an explicit threshold; also
    /// returns how many exponentials hit the linear extension.
    pub fn logit_loss_clipped(&self, outcome: Outcome, delta: f64, threshold: f64) -> (f64, usize) {
        let mut clip = Clip {
            threshold,
            count: 0,
        };
        let v = self
            .atoms
            .iter()
            .map(|a| a.weight * a.neg_logit(outcome, delta, self.normalized, &mut clip))
            .sum();
        (v, clip.count)
    }

    /// Cone combination `sum_i w_i pair_i`.
    pub fn combine(pairs: &[ScoringPair], weights: &[f64]) -> Result<Self> {
        if pairs.len() != weights.len() {
            return Err(PsrError::LengthMismatch {
                pairs: pairs.len(),
                weights: weights.len(),
            });
        }
        let first = pairs.first().ok_or(PsrError::Empty)?;
        let mut atoms = Vec::new();
        for (p, &w) in pairs.iter().zip(weights) {
            if !(w > 0.0 && w.is_finite()) {
                return Err(PsrError::NonPositiveWeight(w));
            }
            if p.normalized != first.normalized {
                return Err(PsrError::MixedNormalization);
            }
            for a in &p.atoms {
                atoms.push(Atom {
                    weight: a.weight * w,
                    ..*a
                });
            }
        }
        Self::from_atoms(atoms, first.normalized)
    }
}

/// The standard ratio grid: 33 log-spaced points on `[1e-2, 1e2]`.
pub fn r_grid() -> Vec<f64> {
    (0..33)
        .map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / 32.0))
        .collect()
}

/// The `(alpha, beta)` grid used for certification.
pub fn alpha_beta_grid() -> Vec<(f64, f64)> {
    const ALPHAS: [f64; 7] = [0.0, 1.0 / 256.0, 1.0 / 64.0, 1.0 / 16.0, 0.25, 0.5, 1.0];
    const BETAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
    ALPHAS
        .iter()
        .flat_map(|&a| BETAS.iter().map(move |&b| (a, b)))
        .collect()
}

/// One row of the curve table: `(r, f1, f0, S1, S0, loss1, loss0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub r: f64,
    pub f1: f64,
    pub f0: f64,
    #[serde(rename = "S1")]
    pub s1: f64,
    #[serde(rename = "S0")]
    pub s0: f64,
    pub loss1: f64,
    pub loss0: f64,
}

/// Tabulate a pair over [`r_grid`]. `S1`/`S0` are the scores at the posterior
/// `mu = r / (1 + r)`; the losses are the logit-domain negated scores.
pub fn curves(pair: &ScoringPair) -> Result<Vec<CurveRow>> {
    r_grid()
        .into_iter()
        .map(|r| {
            let p = RatioPoint::from_ratio(r)?;
            Ok(CurveRow {
                r,
                f1: pair.eval_f1(r)?,
                f0: pair.eval_f0(r)?,
                s1: pair.score(Outcome::Data, p.mu)?,
                s0: pair.score(Outcome::Noise, p.mu)?,
                loss1: pair.logit_loss(Outcome::Data, p.delta),
                loss0: pair.logit_loss(Outcome::Noise, p.delta),
            })
        })
        .collect()
}

//! Exact evaluation of objectives on finite models.
//!
//! Every expectation here is a literal sum over `x_support x z_support`,
//! evaluated in the ratio domain with [`ScoringPair::eval_f1`] and
//! [`ScoringPair::eval_f0`]. Nothing in this module goes through the tape or
//! the logit-domain losses, so it serves as an independent reference for
//! both.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{seeded_rng, DistError, Rng64, TabularDistribution};
use crate::nnmodel::{dirichlet_uniform, ModelError, TabularEncoder, TabularJointModel};
use crate::psr::{alpha_beta_grid, r_grid, PsrError, ScoringPair};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("support mismatch: {0}")]
    Support(String),
    #[error(transparent)]
    Psr(#[from] PsrError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Data, noise, model, and both encoders on a shared finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularInstance {
    pub data: TabularDistribution,
    pub noise: TabularDistribution,
    pub model: TabularJointModel,
    pub enc1: TabularEncoder,
    pub enc0: TabularEncoder,
}

impl TabularInstance {
    pub fn new(
        data: TabularDistribution,
        noise: TabularDistribution,
        model: TabularJointModel,
        enc1: TabularEncoder,
        enc0: TabularEncoder,
    ) -> Result<Self> {
        let nx = model.nx();
        let nz = model.nz();
        if data.len() != nx || noise.len() != nx {
            return Err(OracleError::Support(format!(
                "data/noise have {}/{} points, model has {nx}",
                data.len(),
                noise.len()
            )));
        }
        for enc in [&enc1, &enc0] {
            if enc.nx() != nx || enc.nz() != nz {
                return Err(OracleError::Support(format!(
                    "encoder is {} x {}, model is {nx} x {nz}",
                    enc.nx(),
                    enc.nz()
                )));
            }
        }
        Ok(Self {
            data,
            noise,
            model,
            enc1,
            enc0,
        })
    }

    /// Instance with `|X|` in `3..=8`, `|Z|` in `2..=4` and every mass vector
    /// drawn from a symmetric Dirichlet(1).
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let nx = rng.random_range(3..=8);
        let nz = rng.random_range(2..=4);
        Self::random_sized(&mut rng, nx, nz)
    }

    pub fn random_sized(rng: &mut Rng64, nx: usize, nz: usize) -> Self {
        let data = TabularDistribution::over_indices(&dirichlet_uniform(rng, nx))
            .expect("positive masses");
        let noise = TabularDistribution::over_indices(&dirichlet_uniform(rng, nx))
            .expect("positive masses");
        let model = TabularJointModel::from_probs(nx, nz, &dirichlet_uniform(rng, nx * nz))
            .expect("valid joint");
        let enc1 = TabularEncoder::random(nx, nz, rng);
        let enc0 = TabularEncoder::random(nx, nz, rng);
        Self {
            data,
            noise,
            model,
            enc1,
            enc0,
        }
    }

    pub fn nx(&self) -> usize {
        self.model.nx()
    }

    pub fn nz(&self) -> usize {
        self.model.nz()
    }

    /// Same instance with both encoders set to the model posterior.
    pub fn with_posterior_encoders(&self) -> Result<Self> {
        let post = self.model.exact_posterior()?;
        Ok(Self {
            enc1: post.clone(),
            enc0: post,
            ..self.clone()
        })
    }

    /// Same instance with a different model table.
    pub fn with_model(&self, model: TabularJointModel) -> Result<Self> {
        Self::new(
            self.data.clone(),
            self.noise.clone(),
            model,
            self.enc1.clone(),
            self.enc0.clone(),
        )
    }

    fn pd(&self) -> Vec<f64> {
        self.data.masses()
    }

    fn pn(&self) -> Vec<f64> {
        self.noise.masses()
    }
}

/// Per-term values behind an [`ExactReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactTerms {
    pub snce_data: f64,
    pub snce_noise: f64,
    pub fvnce_data: f64,
    pub fvnce_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportFlags {
    /// `supp(p_theta) ⊆ supp(p_n q0)`.
    pub model_within_noise: bool,
    /// `supp(p_d) ⊆ supp(p_n)`.
    pub data_within_noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub snce_value: f64,
    pub fvnce_value: f64,
    /// `snce_value - fvnce_value`.
    pub gap: f64,
    pub terms: ExactTerms,
    pub support: SupportFlags,
}

/// Exact S-NCE: `sum_x p_d f1(r(x)) + sum_x p_n f0(r(x))`, `r = p(x) / p_n(x)`.
pub fn exact_snce(pair: &ScoringPair, inst: &TabularInstance) -> Result<(f64, f64)> {
    let marg: Vec<f64> = inst
        .model
        .log_marginals()
        .into_iter()
        .map(f64::exp)
        .collect();
    let (pd, pn) = (inst.pd(), inst.pn());
    let mut data = 0.0;
    let mut noise = 0.0;
    for x in 0..inst.nx() {
        if pn[x] == 0.0 {
            if pd[x] > 0.0 {
                return Err(OracleError::Support(format!(
                    "data point {x} outside the noise support"
                )));
            }
            continue;
        }
        let r = marg[x] / pn[x];
        if pd[x] > 0.0 {
            data += pd[x] * pair.eval_f1(r.max(f64::MIN_POSITIVE))?;
        }
        noise += pn[x] * pair.eval_f0(r.max(f64::MIN_POSITIVE))?;
    }
    Ok((data, noise))
}

/// Exact fvNCE: the two encoder-weighted sums with `r = p(x, z) / (p_n(x) q(z | x))`.
pub fn exact_fvnce(pair: &ScoringPair, inst: &TabularInstance) -> Result<(f64, f64)> {
    let joint = inst.model.joint_table();
    let (pd, pn) = (inst.pd(), inst.pn());
    let nz = inst.nz();
    let mut data = 0.0;
    let mut noise = 0.0;
    for x in 0..inst.nx() {
        for z in 0..nz {
            let p = joint[x * nz + z];
            let w1 = pd[x] * inst.enc1.q(x, z);
            if w1 > 0.0 {
                let base = pn[x] * inst.enc1.q(x, z);
                if base == 0.0 {
                    return Err(OracleError::Support(format!(
                        "data cell ({x}, {z}) outside the noise support"
                    )));
                }
                data += w1 * pair.eval_f1((p / base).max(f64::MIN_POSITIVE))?;
            }
            let w0 = pn[x] * inst.enc0.q(x, z);
            if w0 > 0.0 {
                noise += w0 * pair.eval_f0((p / w0).max(f64::MIN_POSITIVE))?;
            }
        }
    }
    Ok((data, noise))
}

/// Both objectives, their gap, and support diagnostics.
pub fn exact_report(pair: &ScoringPair, inst: &TabularInstance) -> Result<ExactReport> {
    let (sd, sn) = exact_snce(pair, inst)?;
    let (fd, fn_) = exact_fvnce(pair, inst)?;
    let joint = inst.model.joint_table();
    let (pd, pn) = (inst.pd(), inst.pn());
    let nz = inst.nz();
    let model_within_noise = (0..inst.nx())
        .all(|x| (0..nz).all(|z| joint[x * nz + z] == 0.0 || pn[x] * inst.enc0.q(x, z) > 0.0));
    let data_within_noise = (0..inst.nx()).all(|x| pd[x] == 0.0 || pn[x] > 0.0);
    Ok(ExactReport {
        snce_value: sd + sn,
        fvnce_value: fd + fn_,
        gap: (sd + sn) - (fd + fn_),
        terms: ExactTerms {
            snce_data: sd,
            snce_noise: sn,
            fvnce_data: fd,
            fvnce_noise: fn_,
        },
        support: SupportFlags {
            model_within_noise,
            data_within_noise,
        },
    })
}

/// Logistic NCE: `sum_x p_d log(p / (p + p_n)) + sum_x p_n log(p_n / (p + p_n))`.
pub fn exact_nce(inst: &TabularInstance) -> f64 {
    let marg: Vec<f64> = inst
        .model
        .log_marginals()
        .into_iter()
        .map(f64::exp)
        .collect();
    let (pd, pn) = (inst.pd(), inst.pn());
    (0..inst.nx())
        .map(|x| {
            let s = marg[x] + pn[x];
            let a = if pd[x] > 0.0 {
                pd[x] * (marg[x] / s).ln()
            } else {
                0.0
            };
            let b = if pn[x] > 0.0 {
                pn[x] * (pn[x] / s).ln()
            } else {
                0.0
            };
            a + b
        })
        .sum()
}

/// `sum_{x, z : p_n(x) q0(z | x) > 0} p(x, z)`.
pub fn mass_check(
    model: &TabularJointModel,
    noise: &TabularDistribution,
    enc0: &TabularEncoder,
) -> Result<f64> {
    if noise.len() != model.nx() || enc0.nx() != model.nx() || enc0.nz() != model.nz() {
        return Err(OracleError::Support(
            "mass check operands differ in size".into(),
        ));
    }
    let joint = model.joint_table();
    let pn = noise.masses();
    let nz = model.nz();
    let mut total = 0.0;
    for x in 0..model.nx() {
        for z in 0..nz {
            if pn[x] * enc0.q(x, z) > 0.0 {
                total += joint[x * nz + z];
            }
        }
    }
    Ok(total)
}

/// ELBO: `sum_x p_d sum_z q1 (log p(x, z) - log q1(z | x))`.
pub fn exact_vae(inst: &TabularInstance) -> f64 {
    let lj = inst.model.log_joint_table();
    let pd = inst.pd();
    let nz = inst.nz();
    let mut total = 0.0;
    for x in 0..inst.nx() {
        for z in 0..nz {
            let q = inst.enc1.q(x, z);
            if pd[x] > 0.0 && q > 0.0 {
                total += pd[x] * q * (lj[x * nz + z] - q.ln());
            }
        }
    }
    total
}

/// `(0, 0)` fvNCE in raw form: `E_{d,1} log r - E_{n,0} r`.
pub fn exact_j00(inst: &TabularInstance) -> Result<f64> {
    let (d, n) = exact_fvnce(&ScoringPair::raw(0.0, 0.0)?, inst)?;
    Ok(d + n)
}

/// `(1, 0)` fvNCE: `E_{d,1} r - 1/2 E_{n,0} r^2`.
pub fn exact_j10(inst: &TabularInstance) -> Result<f64> {
    let (d, n) = exact_fvnce(&ScoringPair::raw(1.0, 0.0)?, inst)?;
    Ok(d + n)
}

/// `1/2 sum (p(x, z) - p_d(x) q0(z | x))^2 / (p_n(x) q0(z | x))`.
pub fn weighted_squared_distance(inst: &TabularInstance) -> f64 {
    let joint = inst.model.joint_table();
    let (pd, pn) = (inst.pd(), inst.pn());
    let nz = inst.nz();
    let mut total = 0.0;
    for x in 0..inst.nx() {
        for z in 0..nz {
            let q = inst.enc0.q(x, z);
            let w = pn[x] * q;
            if w > 0.0 {
                total += (joint[x * nz + z] - pd[x] * q).powi(2) / w;
            }
        }
    }
    0.5 * total
}

/// Tied-encoder `(0, 1)` objective with the linear noise term dropped:
/// `E_{d,1} softplus(delta) + E_{n,1} softplus(delta)`.
pub fn exact_j01(inst: &TabularInstance) -> f64 {
    let joint = inst.model.joint_table();
    let (pd, pn) = (inst.pd(), inst.pn());
    let nz = inst.nz();
    let mut total = 0.0;
    for x in 0..inst.nx() {
        for z in 0..nz {
            let q = inst.enc1.q(x, z);
            let w = pn[x] * q;
            if w > 0.0 {
                let v = (1.0 + joint[x * nz + z] / w).ln();
                total += (pd[x] + pn[x]) * q * v;
            }
        }
    }
    total
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed violation (or spread) in the check's own units.
    pub residual: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckResult {
    fn at_most(name: &str, residual: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            name: name.to_string(),
            passed: residual <= tolerance,
            residual,
            tolerance,
            cases,
        }
    }

    fn flag(name: &str, passed: bool, residual: f64, cases: usize) -> Self {
        Self {
            name: name.to_string(),
            passed,
            residual,
            tolerance: 0.0,
            cases,
        }
    }
}

/// Collection of checks with an overall verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    fn new(checks: Vec<CheckResult>) -> Self {
        Self {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const SEEDS: std::ops::Range<u64> = 0..50;

fn grid_pairs(normalized: bool) -> Vec<ScoringPair> {
    alpha_beta_grid()
        .into_iter()
        .map(|(a, b)| {
            ScoringPair::raw(a, b)
                .expect("grid pair")
                .with_normalization(normalized)
        })
        .collect()
}

fn spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// `G''(mu) = 1 / ((1 - mu)^2 (mu + beta (1 - mu)))` for raw `(0, beta)` atoms.
pub fn log_family_g_second(beta: f64, mu: f64) -> f64 {
    1.0 / ((1.0 - mu).powi(2) * (mu + beta * (1.0 - mu)))
}

/// Richardson-extrapolated second central difference of `G` with a step
/// proportional to the distance from the interval ends.
pub fn g_second_fd(pair: &ScoringPair, mu: f64) -> Result<f64> {
    let h = 1e-2 * mu.min(1.0 - mu);
    let d = |h: f64| -> Result<f64> {
        Ok((pair.eval_g(mu + h)? - 2.0 * pair.eval_g(mu)? + pair.eval_g(mu - h)?) / (h * h))
    };
    Ok((4.0 * d(h / 2.0)? - d(h)?) / 3.0)
}

fn mu_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Closed-form identities and shape properties of the scoring-pair family.
pub fn psr_checks() -> Result<Vec<CheckResult>> {
    let rs = r_grid();
    let mut out = Vec::new();
    let mut pairs = grid_pairs(false);
    pairs.extend(grid_pairs(true));
    let mix = ScoringPair::combine(
        &[
            ScoringPair::normalized(1.0 / 16.0, 0.0)?,
            ScoringPair::normalized(0.0, 0.0)?,
        ],
        &[0.9, 0.1],
    )?;
    pairs.push(mix.clone());
    let n = pairs.len();

    let mut compat: f64 = 0.0;
    let mut deriv: f64 = 0.0;
    let mut concave: f64 = f64::NEG_INFINITY;
    let mut monotone = true;
    for p in &pairs {
        for &r in &rs {
            compat = compat.max((p.grad_f0(r)? + r * p.grad_f1(r)?).abs());
            let h = 1e-5 * r.max(1.0);
            let fd1 = (p.eval_f1(r + h)? - p.eval_f1(r - h)?) / (2.0 * h);
            let fd0 = (p.eval_f0(r + h)? - p.eval_f0(r - h)?) / (2.0 * h);
            let (g1, g0) = (p.grad_f1(r)?, p.grad_f0(r)?);
            deriv = deriv.max((fd1 - g1).abs() / g1.abs().max(1e-12));
            deriv = deriv.max((fd0 - g0).abs() / g0.abs().max(1e-12));
            let h2 = 1e-3 * r;
            for f in [ScoringPair::eval_f1, ScoringPair::eval_f0] {
                let sd = f(p, r + h2)? - 2.0 * f(p, r)? + f(p, r - h2)?;
                concave = concave.max(sd);
            }
        }
        for w in rs.windows(2) {
            monotone &=
                p.eval_f1(w[1])? > p.eval_f1(w[0])? && p.eval_f0(w[1])? < p.eval_f0(w[0])?;
        }
    }
    out.push(CheckResult::at_most(
        "compatibility",
        compat,
        1e-10,
        n * rs.len(),
    ));
    out.push(CheckResult::at_most(
        "derivative_consistency",
        deriv,
        1e-5,
        n * rs.len(),
    ));
    out.push(CheckResult::at_most(
        "concavity",
        concave,
        1e-8,
        n * rs.len(),
    ));
    out.push(CheckResult::flag(
        "monotonicity",
        monotone,
        0.0,
        n * rs.len(),
    ));

    let mus = mu_grid();
    let mut min_g2 = f64::INFINITY;
    let mut lemma_rel: f64 = 0.0;
    let mut fd_rel: f64 = 0.0;
    for p in &pairs {
        for &mu in &mus {
            min_g2 = min_g2.min(p.eval_g_second(mu)?);
        }
    }
    for p in grid_pairs(false) {
        let atom = p.atoms()[0];
        if atom.alpha != 0.0 {
            continue;
        }
        for &mu in &mus {
            let closed = log_family_g_second(atom.beta, mu);
            lemma_rel = lemma_rel.max((p.eval_g_second(mu)? - closed).abs() / closed);
            fd_rel = fd_rel.max((g_second_fd(&p, mu)? - closed).abs() / closed);
        }
    }
    out.push(CheckResult::flag(
        "g_second_positive",
        min_g2 > 0.0,
        min_g2,
        n * mus.len(),
    ));
    out.push(CheckResult::at_most(
        "g_second_closed_form",
        lemma_rel,
        1e-12,
        4 * mus.len(),
    ));
    out.push(CheckResult::at_most(
        "g_second_finite_difference",
        fd_rel,
        1e-6,
        4 * mus.len(),
    ));

    let mut min_asym = f64::INFINITY;
    for p in &pairs {
        let mut best: f64 = 0.0;
        for &mu in &mus {
            let s1 = p.score(crate::psr::Outcome::Data, mu)?;
            let s0 = p.score(crate::psr::Outcome::Noise, 1.0 - mu)?;
            best = best.max((s1 - s0).abs());
        }
        min_asym = min_asym.min(best);
    }
    out.push(CheckResult::flag("asymmetry", min_asym > 1e-3, min_asym, n));

    let mut limit: f64 = 0.0;
    for beta in [0.0, 0.5, 1.0, 2.0] {
        let near = ScoringPair::normalized(1e-6, beta)?;
        let zero = ScoringPair::normalized(0.0, beta)?;
        for &r in &rs {
            limit = limit.max((near.eval_f1(r)? - zero.eval_f1(r)?).abs());
        }
    }
    out.push(CheckResult::at_most(
        "alpha_zero_limit",
        limit,
        1e-4,
        4 * rs.len(),
    ));

    let mut breg_min = f64::INFINITY;
    let mut breg_diag: f64 = 0.0;
    for p in &pairs {
        for &mu in mus.iter().step_by(7) {
            breg_diag = breg_diag.max(p.bregman(mu, mu)?.abs());
            for &nu in mus.iter().step_by(5) {
                breg_min = breg_min.min(p.bregman(mu, nu)?);
            }
        }
    }
    out.push(CheckResult::at_most(
        "bregman_nonnegative",
        (-breg_min).max(0.0),
        1e-12,
        n,
    ));
    out.push(CheckResult::at_most(
        "bregman_diagonal",
        breg_diag,
        1e-12,
        n,
    ));

    let mut normal: f64 = 0.0;
    for p in grid_pairs(true) {
        normal = normal
            .max(p.eval_f1(1.0)?.abs())
            .max(p.eval_f0(1.0)?.abs())
            .max((p.grad_f1(1.0)? - 1.0).abs());
    }
    out.push(CheckResult::at_most("normalized_pins", normal, 1e-12, 28));
    Ok(out)
}

/// Double-ELBO bound and tightness over [`SEEDS`] for every grid pair.
pub fn bound_checks() -> Result<Vec<CheckResult>> {
    let pairs = grid_pairs(false);
    let mut worst_slack = f64::INFINITY;
    let mut worst_tight: f64 = 0.0;
    let mut cases = 0;
    for seed in SEEDS {
        let inst = TabularInstance::random(seed);
        let post = inst.with_posterior_encoders()?;
        for p in &pairs {
            worst_slack = worst_slack.min(exact_report(p, &inst)?.gap);
            worst_tight = worst_tight.max(exact_report(p, &post)?.gap.abs());
            cases += 1;
        }
    }
    Ok(vec![
        CheckResult::at_most("double_elbo_bound", (-worst_slack).max(0.0), 1e-12, cases),
        CheckResult::at_most("double_elbo_tight_at_posterior", worst_tight, 1e-10, cases),
    ])
}

/// Five extra model tables for an instance, drawn from its own stream.
fn theta_draws(inst: &TabularInstance, seed: u64) -> Result<Vec<TabularInstance>> {
    let mut rng = crate::dist::stream_rng(seed, 1);
    (0..5)
        .map(|_| {
            let m = TabularJointModel::random(inst.nx(), inst.nz(), 1.0, &mut rng);
            inst.with_model(m)
        })
        .collect()
}

/// Identities that hold exactly on finite models.
pub fn identity_checks() -> Result<Vec<CheckResult>> {
    let mut vae_spread: f64 = 0.0;
    let mut quad_spread: f64 = 0.0;
    let mut ratio_residual: f64 = 0.0;
    let mut mass_full: f64 = 0.0;
    let mut lower_bound_ok = true;
    let mut cases = 0;
    for seed in SEEDS {
        let inst = TabularInstance::random(seed);
        let draws = theta_draws(&inst, seed)?;
        let mut diffs = Vec::new();
        let mut quads = Vec::new();
        for d in &draws {
            diffs.push(exact_j00(d)? - exact_vae(d));
            quads.push(exact_j10(d)? + weighted_squared_distance(d));
            let m = mass_check(&d.model, &d.noise, &d.enc0)?;
            mass_full = mass_full.max((m - 1.0).abs());
            let (_, noise_term) = exact_fvnce(&ScoringPair::raw(0.0, 0.0)?, d)?;
            lower_bound_ok &= noise_term >= -1.0 - 1e-12;
            cases += 1;
        }
        vae_spread = vae_spread.max(spread(&diffs));
        quad_spread = quad_spread.max(spread(&quads));

        let post = inst.with_posterior_encoders()?;
        let lj = post.model.log_joint_table();
        let marg = post.model.log_marginals();
        let lpn = post.noise.log_masses();
        for x in 0..post.nx() {
            for z in 0..post.nz() {
                let delta = lj[x * post.nz() + z] - lpn[x] - post.enc1.log_q(x, z);
                ratio_residual = ratio_residual.max((delta - (marg[x] - lpn[x])).abs());
            }
        }
    }
    Ok(vec![
        CheckResult::at_most("vae_equivalence", vae_spread, 1e-10, cases),
        CheckResult::at_most("quadratic_identity", quad_spread, 1e-10, cases),
        CheckResult::at_most("j01_posterior_ratio", ratio_residual, 1e-10, SEEDS.count()),
        CheckResult::at_most("restricted_mass_full_support", mass_full, 1e-12, cases),
        CheckResult::flag("noise_term_lower_bound", lower_bound_ok, 0.0, cases),
    ])
}

/// Restricted mass under constructed support deficiency and shrinking noise supports.
pub fn mass_checks() -> Result<Vec<CheckResult>> {
    let mut deficient_max: f64 = 0.0;
    let mut monotone = true;
    let mut zero_overlap: f64 = 0.0;
    let mut cases = 0;
    for seed in SEEDS {
        let inst = TabularInstance::random(seed);
        let mut pn = inst.noise.masses();
        let mut last = mass_check(&inst.model, &inst.noise, &inst.enc0)?;
        // remove noise points one at a time, keeping at least one
        for x in 0..inst.nx() - 1 {
            pn[x] = 0.0;
            let noise = TabularDistribution::over_indices(&pn)?;
            let m = mass_check(&inst.model, &noise, &inst.enc0)?;
            monotone &= m <= last + 1e-15;
            deficient_max = deficient_max.max(m);
            last = m;
            cases += 1;
        }
        // model mass only where the noise has none
        let nz = inst.nz();
        let mut probs = vec![0.0; inst.nx() * nz];
        probs[..nz].fill(1.0);
        let mut pn = inst.noise.masses();
        pn[0] = 0.0;
        let m = mass_check(
            &TabularJointModel::from_probs(inst.nx(), nz, &probs)?,
            &TabularDistribution::over_indices(&pn)?,
            &inst.enc0,
        )?;
        zero_overlap = zero_overlap.max(m);
    }
    Ok(vec![
        CheckResult::flag(
            "restricted_mass_deficient",
            deficient_max < 1.0,
            deficient_max,
            cases,
        ),
        CheckResult::flag("restricted_mass_monotone", monotone, 0.0, cases),
        CheckResult::at_most(
            "restricted_mass_zero_overlap",
            zero_overlap,
            0.0,
            SEEDS.count(),
        ),
    ])
}

/// Every check above in one report.
pub fn verify_all() -> Result<VerifyReport> {
    let mut checks = psr_checks()?;
    checks.extend(bound_checks()?);
    checks.extend(identity_checks()?);
    checks.extend(mass_checks()?);
    Ok(VerifyReport::new(checks))
}

//! Data, noise, prior and likelihood distributions.
//!
//! Everything is evaluated in the log domain. Sampling takes an explicit
//! [`Rng64`]; parallel callers derive independent streams with [`stream_rng`].

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Seedable, splittable generator used everywhere in the crate.
pub type Rng64 = ChaCha8Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

pub fn seeded_rng(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng64 {
    let mut rng = Rng64::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum DistError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("enumeration requires a tabular distribution")]
    NotTabular,
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DistError>;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DistError::Dimension { expected, got })
    }
}

/// Stable `log sum exp` of a slice; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn standard_normal_matrix(rng: &mut Rng64, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), log_var.len())?;
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let lv = 2.0 * std.ln();
        let d = mean.len();
        Self {
            mean,
            log_var: vec![lv; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_var)
            .map(|((x, m), lv)| -0.5 * (LN_2PI + lv + (x - m).powi(2) * (-lv).exp()))
            .sum())
    }

    pub fn sample(&self, rng: &mut Rng64, n: usize) -> Matrix {
        let mut out = standard_normal_matrix(rng, n, self.dim());
        for i in 0..n {
            for ((v, m), lv) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.log_var) {
                *v = m + (0.5 * lv).exp() * *v;
            }
        }
        out
    }
}

/// Equal-weight mixture of isotropic Gaussians `N(c_i, bandwidth^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKde {
    centers: Matrix,
    bandwidth: f64,
}

impl GaussianKde {
    pub fn new(centers: Matrix, bandwidth: f64) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(DistError::Invalid("KDE needs at least one center".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(DistError::Invalid(format!(
                "bandwidth {bandwidth} must be positive"
            )));
        }
        Ok(Self { centers, bandwidth })
    }

    /// Load centers from a headerless CSV matrix, one center per line.
    pub fn from_csv(path: impl AsRef<Path>, bandwidth: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| DistError::Invalid(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                let first: &Vec<f64> = first;
                check_dim(first.len(), row.len())?;
            }
            rows.push(row);
        }
        Self::new(Matrix::from_rows(&rows), bandwidth)
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let inv_var = 1.0 / (self.bandwidth * self.bandwidth);
        let exps: Vec<f64> = self
            .centers
            .iter_rows()
            .map(|c| {
                let d2: f64 = c.iter().zip(x).map(|(c, x)| (c - x) * (c - x)).sum();
                -0.5 * d2 * inv_var
            })
            .collect();
        let d = self.dim() as f64;
        let norm = -0.5 * d * (LN_2PI + 2.0 * self.bandwidth.ln());
        Ok(log_sum_exp(&exps) - (self.centers.rows() as f64).ln() + norm)
    }

    /// Pick a center uniformly, then add isotropic Gaussian noise.
    pub fn sample(&self, rng: &mut Rng64, n: usize) -> Matrix {
        let m = self.centers.rows();
        let mut out = Matrix::zeros(n, self.dim());
        for i in 0..n {
            let c = rng.random_range(0..m);
            for (v, c) in out.row_mut(i).iter_mut().zip(self.centers.row(c)) {
                let e: f64 = StandardNormal.sample(rng);
                *v = c + self.bandwidth * e;
            }
        }
        out
    }
}

/// A distribution over a finite list of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularJson", into = "TabularJson")]
pub struct TabularDistribution {
    support: Vec<Vec<f64>>,
    log_mass: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TabularJson {
    support: Vec<Vec<f64>>,
    mass: Vec<f64>,
}

impl TryFrom<TabularJson> for TabularDistribution {
    type Error = DistError;
    fn try_from(j: TabularJson) -> Result<Self> {
        Self::from_masses(j.support, &j.mass)
    }
}

impl From<TabularDistribution> for TabularJson {
    fn from(t: TabularDistribution) -> Self {
        let mass = t.masses();
        TabularJson {
            support: t.support,
            mass,
        }
    }
}

impl TabularDistribution {
    /// Masses are renormalized; they must be non-negative with positive total.
    pub fn from_masses(support: Vec<Vec<f64>>, mass: &[f64]) -> Result<Self> {
        check_dim(support.len(), mass.len())?;
        if let Some(first) = support.first() {
            for p in &support {
                check_dim(first.len(), p.len())?;
            }
        }
        if mass.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(DistError::Invalid(
                "masses must be finite and non-negative".into(),
            ));
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(DistError::Invalid("total mass must be positive".into()));
        }
        let log_total = total.ln();
        let log_mass = mass.iter().map(|m| m.ln() - log_total).collect();
        Ok(Self { support, log_mass })
    }

    /// Points `0, 1, ..., n-1` on the real line with the given masses.
    pub fn over_indices(mass: &[f64]) -> Result<Self> {
        let support = (0..mass.len()).map(|i| vec![i as f64]).collect();
        Self::from_masses(support, mass)
    }

    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let n = support.len();
        Self::from_masses(support, &vec![1.0; n])
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn log_masses(&self) -> &[f64] {
        &self.log_mass
    }

    pub fn masses(&self) -> Vec<f64> {
        self.log_mass.iter().map(|l| l.exp()).collect()
    }

    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        self.support.iter().position(|p| p.as_slice() == x)
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self
            .index_of(x)
            .map_or(f64::NEG_INFINITY, |i| self.log_mass[i]))
    }

    pub fn sample_indices(&self, rng: &mut Rng64, n: usize) -> Vec<usize> {
        let w = WeightedIndex::new(self.masses()).expect("masses validated at construction");
        (0..n).map(|_| w.sample(rng)).collect()
    }

    pub fn sample(&self, rng: &mut Rng64, n: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = self
            .sample_indices(rng, n)
            .into_iter()
            .map(|i| self.support[i].clone())
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn enumerate(&self) -> Vec<(Vec<f64>, f64)> {
        self.support.iter().cloned().zip(self.masses()).collect()
    }
}

/// Any of the supported distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum Dist {
    Gaussian(DiagonalGaussian),
    Kde(GaussianKde),
    Tabular(TabularDistribution),
}

impl Dist {
    pub fn dim(&self) -> usize {
        match self {
            Dist::Gaussian(g) => g.dim(),
            Dist::Kde(k) => k.dim(),
            Dist::Tabular(t) => t.dim(),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        match self {
            Dist::Gaussian(g) => g.log_pdf(x),
            Dist::Kde(k) => k.log_pdf(x),
            Dist::Tabular(t) => t.log_pdf(x),
        }
    }

    /// Log-density of every row of `x`.
    pub fn log_pdf_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.log_pdf(r)).collect()
    }

    pub fn sample(&self, rng: &mut Rng64, n: usize) -> Matrix {
        match self {
            Dist::Gaussian(g) => g.sample(rng, n),
            Dist::Kde(k) => k.sample(rng, n),
            Dist::Tabular(t) => t.sample(rng, n),
        }
    }

    pub fn enumerate(&self) -> Result<Vec<(Vec<f64>, f64)>> {
        match self {
            Dist::Tabular(t) => Ok(t.enumerate()),
            _ => Err(DistError::NotTabular),
        }
    }
}

impl From<DiagonalGaussian> for Dist {
    fn from(g: DiagonalGaussian) -> Self {
        Dist::Gaussian(g)
    }
}

impl From<GaussianKde> for Dist {
    fn from(k: GaussianKde) -> Self {
        Dist::Kde(k)
    }
}

impl From<TabularDistribution> for Dist {
    fn from(t: TabularDistribution) -> Self {
        Dist::Tabular(t)
    }
}

/// Standard normal log-density of a `d`-vector with squared norm `sq`.
pub fn std_normal_log_pdf(sq: f64, d: usize) -> f64 {
    -0.5 * (d as f64 * LN_2PI + sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn log_pdf_examples() {
        let g = DiagonalGaussian::standard(1);
        assert!((g.log_pdf(&[0.0]).unwrap() + 0.9189385).abs() < 1e-7);
        assert!((LN_2PI - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        for d in 1..4 {
            let kde = GaussianKde::new(Matrix::zeros(1, d), 1.0).unwrap();
            let v = kde.log_pdf(&vec![0.0; d]).unwrap();
            assert!((v + 0.9189385 * d as f64).abs() < 1e-6);
        }
        let t =
            TabularDistribution::uniform(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        for i in 0..4 {
            assert!((t.log_pdf(&[i as f64]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        }
        assert_eq!(t.log_pdf(&[9.0]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(
            g.log_pdf(&[0.0, 1.0]),
            Err(DistError::Dimension { .. })
        ));
    }

    #[test]
    fn gaussian_integrates_to_one() {
        let g = DiagonalGaussian::new(vec![0.4], vec![0.7f64.ln()]).unwrap();
        let (a, b, n) = (-12.0, 12.0, 20000);
        let h = (b - a) / n as f64;
        let f = |x: f64| g.log_pdf(&[x]).unwrap().exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + h * i as f64);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_at_mean() {
        let g = DiagonalGaussian::new(vec![1.0, -2.0], vec![0.3, -1.2]).unwrap();
        let expected = -0.5 * (2.0 * LN_2PI + 0.3 - 1.2);
        assert!((g.log_pdf(&[1.0, -2.0]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn kde_matches_direct_summation() {
        let centers = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]);
        let kde = GaussianKde::new(centers.clone(), 0.8).unwrap();
        for x in [[0.1, 0.2], [1.0, -0.3], [3.0, 3.0]] {
            let direct: f64 = centers
                .iter_rows()
                .map(|c| {
                    DiagonalGaussian::isotropic(c.to_vec(), 0.8)
                        .log_pdf(&x)
                        .unwrap()
                        .exp()
                })
                .sum::<f64>()
                / 3.0;
            assert!((kde.log_pdf(&x).unwrap() - direct.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn kde_far_from_centers_stays_finite() {
        let kde = GaussianKde::new(Matrix::zeros(2, 3), 0.1).unwrap();
        let v = kde.log_pdf(&[50.0, 0.0, 0.0]).unwrap();
        assert!(v.is_finite() && v < -1e4);
    }

    #[test]
    fn sample_mean_standard_normal() {
        let mut rng = seeded_rng(7);
        let s = DiagonalGaussian::standard(1).sample(&mut rng, 100_000);
        assert!(s.mean().abs() < 0.02);
    }

    #[test]
    fn point_mass_samples() {
        let t = TabularDistribution::from_masses(vec![vec![1.0, 2.0], vec![3.0, 4.0]], &[1.0, 0.0])
            .unwrap();
        let s = t.sample(&mut seeded_rng(1), 50);
        assert!(s.iter_rows().all(|r| r == [1.0, 2.0]));
    }

    #[test]
    fn kde_symmetric_centers_mean() {
        let kde = GaussianKde::new(Matrix::from_rows(&[vec![-2.0], vec![2.0]]), 0.5).unwrap();
        let n = 40_000;
        let s = kde.sample(&mut seeded_rng(3), n);
        // std of the mixture: sqrt(c^2 + sigma^2)
        let sd = (4.0f64 + 0.25).sqrt();
        assert!(s.mean().abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn sampling_is_reproducible() {
        let g = DiagonalGaussian::standard(3);
        assert_eq!(
            g.sample(&mut seeded_rng(5), 10),
            g.sample(&mut seeded_rng(5), 10)
        );
        assert_ne!(
            g.sample(&mut stream_rng(5, 0), 10),
            g.sample(&mut stream_rng(5, 1), 10)
        );
    }

    #[test]
    fn ks_statistic_gaussian() {
        let g = DiagonalGaussian::new(vec![1.5], vec![2f64.ln()]).unwrap();
        let mut xs = g.sample(&mut seeded_rng(11), 10_000).into_vec();
        xs.sort_by(f64::total_cmp);
        let normal = Normal::new(1.5, 2f64.sqrt()).unwrap();
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = normal.cdf(x);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS = {ks}");
    }

    #[test]
    fn enumerate_examples() {
        let t = TabularDistribution::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
        let e = Dist::from(t).enumerate().unwrap();
        assert_eq!(e, vec![(vec![0.0], 0.5), (vec![1.0], 0.5)]);
        let t = TabularDistribution::over_indices(&[0.2, 3.0, 1.1, 0.0]).unwrap();
        let total: f64 = t.enumerate().iter().map(|(_, m)| m).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let kde = GaussianKde::new(Matrix::zeros(1, 1), 1.0).unwrap();
        assert!(matches!(
            Dist::from(kde).enumerate(),
            Err(DistError::NotTabular)
        ));
    }

    #[test]
    fn tabular_json_round_trip() {
        let t =
            TabularDistribution::from_masses(vec![vec![0.0, 1.0], vec![2.0, 3.0]], &[0.25, 0.75])
                .unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"mass\""));
        let back: TabularDistribution = serde_json::from_str(&s).unwrap();
        for (a, b) in back.masses().iter().zip(t.masses()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(
            serde_json::from_str::<TabularDistribution>(r#"{"support":[[0]],"mass":[-1]}"#)
                .is_err()
        );
    }

    #[test]
    fn kde_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "0.0, 1.0\n2.0,3.0\n").unwrap();
        let kde = GaussianKde::from_csv(&path, 0.5).unwrap();
        assert_eq!(kde.centers().shape(), (2, 2));
        std::fs::write(&path, "0.0,1.0\n2.0\n").unwrap();
        assert!(GaussianKde::from_csv(&path, 0.5).is_err());
    }
}

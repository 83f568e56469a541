//! Full- or diagonal-covariance Gaussian mixtures fitted by EM.
//!
//! The covariance update is the MAP estimate under an inverse-Wishart-style
//! prior with scale `Ψ = ρ·I`: `Σ_k = (S_k + Ψ) / N_k`, where `S_k` is the
//! responsibility-weighted scatter. EM then increases the penalized
//! objective `Σ log p(x) − ½ Σ_k tr(Ψ Σ_k⁻¹)` monotonically; that objective
//! is what [`FitLog::objective`] records.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GMM_MAGIC: &[u8; 8] = b"MCTLGMM\0";
pub const GMM_VERSION: u32 = 1;
const KIND: &str = "gmm";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: usize,
    pub max_iter: usize,
    /// Stop once the per-sample objective improves by less than this.
    pub tol: f64,
    pub seed: u64,
    pub covariance: CovarianceKind,
    /// Ridge as a fraction of the mean per-channel data variance.
    pub ridge_scale: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 50,
            max_iter: 1000,
            tol: 1e-7,
            seed: 0,
            covariance: CovarianceKind::Full,
            ridge_scale: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>, index: usize) -> Result<Self> {
        let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance(index))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::SingularCovariance(index));
        }
        Ok(Self {
            weight,
            mean,
            cov,
            chol,
            log_det,
        })
    }

    fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x.len() as f64;
        -0.5 * (d * LN_2PI + self.log_det + self.mahalanobis_sq(x))
    }
}

/// A fitted mixture. Immutable once built.
#[derive(Debug, Clone)]
pub struct GmmModel {
    dim: usize,
    components: Vec<Component>,
}

/// Per-iteration trace of a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    /// Total data log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    /// Penalized objective that EM increases monotonically.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl GmmModel {
    /// Build from explicit parameters; weights are renormalized.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("mixture weights must be non-negative with a positive sum".into()));
        }
        let mut components = Vec::with_capacity(k);
        for (i, ((w, m), c)) in weights.iter().zip(means).zip(covariances).enumerate() {
            if m.len() != dim || c.shape() != (dim, dim) {
                return Err(Error::ShapeMismatch(format!("component {i} does not have dimension {dim}")));
            }
            components.push(Component::new(w / total, DVector::from_vec(m), c, i)?);
        }
        Ok(Self { dim, components })
    }

    /// A single unit-covariance component at `point`.
    pub fn point_mass(point: &[f64]) -> Self {
        let dim = point.len();
        Self::new(vec![1.0], vec![point.to_vec()], vec![DMatrix::identity(dim, dim)])
            .expect("identity covariance is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.components[k].mean.as_slice()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].cov
    }

    /// Squared Mahalanobis distance from `x` to component `k`.
    pub fn mahalanobis_sq(&self, x: &[f64], k: usize) -> f64 {
        self.components[k].mahalanobis_sq(&DVector::from_column_slice(x))
    }

    /// Index of the Mahalanobis-nearest component; ties go to the lower index.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let x = DVector::from_column_slice(x);
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.components.iter().enumerate() {
            let d = c.mahalanobis_sq(&x);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Mixture log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(&x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(GMM_MAGIC)?;
        w.write_all(&GMM_VERSION.to_le_bytes())?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for c in &self.components {
            w.write_all(&c.weight.to_le_bytes())?;
        }
        for c in &self.components {
            for v in c.mean.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for c in &self.components {
            // Row-major; the matrix is symmetric so the order is moot.
            for r in 0..self.dim {
                for col in 0..self.dim {
                    w.write_all(&c.cov[(r, col)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::format(KIND, e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != GMM_MAGIC {
            return Err(Error::format(KIND, "bad magic"));
        }
        let mut u = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u).map_err(bad)?;
            Ok(u32::from_le_bytes(u))
        };
        let version = read_u32(r)?;
        if version != GMM_VERSION {
            return Err(Error::format(KIND, format!("unsupported version {version}")));
        }
        let k = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        if k == 0 || dim == 0 || k > 100_000 || dim > 10_000 {
            return Err(Error::format(KIND, format!("implausible size K={k}, dim={dim}")));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(bad)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights = read_f64s(k)?;
        let means = (0..k).map(|_| read_f64s(dim)).collect::<Result<Vec<_>>>()?;
        let covs = (0..k)
            .map(|_| read_f64s(dim * dim).map(|v| DMatrix::from_row_slice(dim, dim, &v)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, means, covs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// k-means++ seeding: indices of `k` distinct-ish starting points.
fn kmeans_pp(x: &[DVector<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = x.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = x.iter().map(|p| (p - &x[chosen[0]]).norm_squared()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, p) in x.iter().enumerate() {
            d2[i] = d2[i].min((p - &x[next]).norm_squared());
        }
    }
    chosen
}

/// Weights, means and MAP covariances from responsibilities `resp` (n × k).
fn m_step(
    x: &[DVector<f64>],
    resp: &DMatrix<f64>,
    psi: f64,
    kind: CovarianceKind,
) -> Result<Vec<Component>> {
    let (n, k) = resp.shape();
    let dim = x[0].len();
    let data = DMatrix::from_fn(n, dim, |i, j| x[i][j]);
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let r = resp.column(c);
        let nk = r.sum().max(1e-12);
        let mean = data.tr_mul(&r) / nk;
        let mut centred = data.clone();
        for i in 0..n {
            let s = r[i].sqrt();
            for j in 0..dim {
                centred[(i, j)] = (centred[(i, j)] - mean[j]) * s;
            }
        }
        let mut cov = match kind {
            CovarianceKind::Full => centred.tr_mul(&centred),
            CovarianceKind::Diagonal => {
                DMatrix::from_diagonal(&DVector::from_fn(dim, |j, _| centred.column(j).norm_squared()))
            }
        };
        for j in 0..dim {
            cov[(j, j)] += psi;
        }
        cov /= nk;
        // Exact symmetry keeps the factorization and the file format clean.
        let cov = (&cov + cov.transpose()) * 0.5;
        out.push(Component::new(nk / n as f64, mean, cov, c)?);
    }
    Ok(out)
}

/// E-step: responsibilities, total log-likelihood.
fn e_step(x: &[DVector<f64>], comps: &[Component]) -> (DMatrix<f64>, f64) {
    let (n, k) = (x.len(), comps.len());
    let mut resp = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    let mut terms = vec![0.0; k];
    for (i, p) in x.iter().enumerate() {
        for (c, comp) in comps.iter().enumerate() {
            terms[c] = comp.weight.ln() + comp.log_density(p);
        }
        let lse = log_sum_exp(&terms);
        ll += lse;
        for c in 0..k {
            resp[(i, c)] = (terms[c] - lse).exp();
        }
    }
    (resp, ll)
}

fn penalty(comps: &[Component], psi: f64) -> f64 {
    // −½ Σ_k tr(Ψ Σ_k⁻¹) with Ψ = ψ·I.
    let mut s = 0.0;
    for c in comps {
        let inv = c.chol.inverse();
        s += inv.trace();
    }
    -0.5 * psi * s
}

/// Fit a mixture to `features` (one row per sample).
pub fn fit_gmm(features: &[Vec<f64>], cfg: &GmmConfig) -> Result<(GmmModel, FitLog)> {
    let k = cfg.components;
    let n = features.len();
    if k == 0 {
        return Err(Error::Config("GMM needs at least one component".into()));
    }
    if n < k {
        return Err(Error::TooFewSamples {
            samples: n,
            components: k,
        });
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch("GMM features must share one positive dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("GMM features contain non-finite values".into()));
    }
    let x: Vec<DVector<f64>> = features.iter().map(|f| DVector::from_column_slice(f)).collect();

    // Ridge scale from the mean channel variance of the data.
    let mean = x.iter().fold(DVector::zeros(dim), |a, p| a + p) / n as f64;
    let mean_var = x.iter().map(|p| (p - &mean).norm_squared()).sum::<f64>() / (n * dim) as f64;
    let ridge = cfg.ridge_scale * mean_var.max(1e-12);
    // Prior scale sized so a component holding n/k samples gets `ridge`.
    let psi = ridge * n as f64 / k as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeans_pp(&x, k, &mut rng);
    let mut resp = DMatrix::zeros(n, k);
    for (i, p) in x.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, s) in seeds.iter().enumerate() {
            let d = (p - &x[*s]).norm_squared();
            if d < best.1 {
                best = (c, d);
            }
        }
        resp[(i, best.0)] = 1.0;
    }
    let mut comps = m_step(&x, &resp, psi, cfg.covariance)?;
    let mut log = FitLog::default();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iter.max(1) {
        let (r, ll) = e_step(&x, &comps);
        let objective = ll + penalty(&comps, psi);
        log.log_likelihood.push(ll);
        log.objective.push(objective);
        log.iterations += 1;
        if (objective - prev) / (n as f64) < cfg.tol {
            log.converged = true;
            break;
        }
        prev = objective;
        comps = m_step(&x, &r, psi, cfg.covariance)?;
    }
    Ok((GmmModel { dim, components: comps }, log))
}

//! Gaussian mixtures with fixed uniform mixing weights, fit by EM.
//!
//! Only means and covariances move during fitting. Every covariance is the
//! (responsibility-weighted) population covariance plus `eps_reg · I`, so
//! eigenvalues never drop below `eps_reg`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    add_outer, axpy, cholesky, forward_substitute, logsumexp_unchecked, squared_distance, DenseMatrix,
    RngStream,
};

/// Dimensions above which the default covariance representation is diagonal.
pub const FULL_COVARIANCE_MAX_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Full,
    Diagonal,
}

impl CovMode {
    /// Full covariances up to 128 dimensions, diagonal beyond.
    pub fn auto(dim: usize) -> Self {
        if dim > FULL_COVARIANCE_MAX_DIM {
            CovMode::Diagonal
        } else {
            CovMode::Full
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Full(DenseMatrix),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn mode(&self) -> CovMode {
        match self {
            Covariance::Full(_) => CovMode::Full,
            Covariance::Diagonal(_) => CovMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.rows(),
            Covariance::Diagonal(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
    pub weights: Vec<f64>,
    pub cov_mode: CovMode,
    pub eps_reg: f64,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Posterior component memberships, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponsibilityMatrix(pub DenseMatrix);

impl ResponsibilityMatrix {
    pub fn values(&self) -> &DenseMatrix {
        &self.0
    }

    /// Most probable component for each point.
    pub fn hard_assignment(&self) -> Vec<usize> {
        self.0
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmConfig {
    pub components: usize,
    /// `None` picks [`CovMode::auto`] from the data dimension.
    pub cov_mode: Option<CovMode>,
    pub eps_reg: f64,
    pub max_iter: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig { components: 16, cov_mode: None, eps_reg: 1e-6, max_iter: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub responsibilities: ResponsibilityMatrix,
    /// Log-likelihood of every model state visited, initial state first.
    pub log_likelihood_trace: Vec<f64>,
}

/// Number of components actually fit for `patches` points: each component
/// needs at least two points.
pub fn effective_components(requested: usize, patches: usize) -> usize {
    requested.min((patches / 2).max(1)).max(1)
}

/// Per-component quantities needed to evaluate log-densities.
enum Factor {
    Full { chol: DenseMatrix, log_norm: f64 },
    Diagonal { inv_var: Vec<f64>, log_norm: f64 },
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn factorize(c: &GaussianComponent) -> Factor {
    let d = c.mean.len() as f64;
    match &c.cov {
        Covariance::Full(cov) => {
            let mut jitter = 0.0;
            let mut scale = cov.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0) * 1e-12;
            loop {
                let mut a = cov.clone();
                a.add_diagonal(jitter);
                if let Some(chol) = cholesky(&a) {
                    let log_det: f64 = (0..chol.rows()).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
                    return Factor::Full { chol, log_norm: -0.5 * (d * LN_2PI + log_det) };
                }
                jitter = scale;
                scale *= 10.0;
            }
        }
        Covariance::Diagonal(var) => {
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            Factor::Diagonal {
                inv_var: var.iter().map(|v| 1.0 / v).collect(),
                log_norm: -0.5 * (d * LN_2PI + log_det),
            }
        }
    }
}

fn log_density(f: &Factor, mean: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
    match f {
        Factor::Full { chol, log_norm } => {
            for ((s, xi), mi) in scratch.iter_mut().zip(x).zip(mean) {
                *s = xi - mi;
            }
            forward_substitute(chol, scratch);
            log_norm - 0.5 * scratch.iter().map(|v| v * v).sum::<f64>()
        }
        Factor::Diagonal { inv_var, log_norm } => {
            let q: f64 = x.iter().zip(mean).zip(inv_var).map(|((xi, mi), iv)| (xi - mi) * (xi - mi) * iv).sum();
            log_norm - 0.5 * q
        }
    }
}

fn check_dims(model: &GmmModel, points: &DenseMatrix) -> Result<()> {
    if model.dim() != points.cols() {
        return Err(Error::DimensionMismatch { expected: model.dim(), actual: points.cols() });
    }
    Ok(())
}

/// E-step: responsibilities and total log-likelihood in one pass.
fn e_step(model: &GmmModel, points: &DenseMatrix) -> (ResponsibilityMatrix, f64) {
    let m = model.components.len();
    let factors: Vec<Factor> = model.components.iter().map(factorize).collect();
    let log_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let mut resp = DenseMatrix::zeros(points.rows(), m);
    let mut scratch = vec![0.0; points.cols()];
    let mut ll = 0.0;
    let mut terms = vec![0.0; m];
    for (k, x) in points.row_iter().enumerate() {
        for (j, (f, c)) in factors.iter().zip(&model.components).enumerate() {
            terms[j] = log_w[j] + log_density(f, &c.mean, x, &mut scratch);
        }
        let lse = logsumexp_unchecked(&terms);
        ll += lse;
        for (r, t) in resp.row_mut(k).iter_mut().zip(&terms) {
            *r = (t - lse).exp();
        }
    }
    (ResponsibilityMatrix(resp), ll)
}

pub fn responsibilities(model: &GmmModel, points: &DenseMatrix) -> Result<ResponsibilityMatrix> {
    check_dims(model, points)?;
    Ok(e_step(model, points).0)
}

pub fn log_likelihood(model: &GmmModel, points: &DenseMatrix) -> Result<f64> {
    check_dims(model, points)?;
    Ok(e_step(model, points).1)
}

/// Per-component `(mean, covariance)` pairs.
pub fn component_moments(model: &GmmModel) -> &[GaussianComponent] {
    &model.components
}

fn global_covariance(points: &DenseMatrix, mode: CovMode, eps_reg: f64) -> Covariance {
    match mode {
        CovMode::Full => {
            let mut c = points.population_covariance();
            c.add_diagonal(eps_reg);
            Covariance::Full(c)
        }
        CovMode::Diagonal => {
            let mean = points.column_means();
            let mut var = vec![0.0; points.cols()];
            for r in points.row_iter() {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            let n = points.rows() as f64;
            Covariance::Diagonal(var.into_iter().map(|v| v / n + eps_reg).collect())
        }
    }
}

/// k-means++ seeding (first mean uniform over points, later ones with
/// probability proportional to squared distance from the nearest chosen
/// mean), then Lloyd refinement. Raw point seeds alone are too noisy once
/// the first E-step measures distance under the global covariance.
fn seed_means(points: &DenseMatrix, m: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let k = points.rows();
    // greedy k-means++: several D² candidates per step, keep the one that
    // lowers the total potential most
    let trials = 2 + (m as f64).ln().floor() as usize;
    let mut means = vec![points.row(rng.uniform_int(0, k - 1)).to_vec()];
    let mut dist: Vec<f64> = points.row_iter().map(|x| squared_distance(x, &means[0])).collect();
    while means.len() < m {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 { rng.weighted_index(&dist) } else { rng.uniform_int(0, k - 1) };
            let updated: Vec<f64> =
                dist.iter().zip(points.row_iter()).map(|(d, x)| d.min(squared_distance(x, points.row(cand)))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, next, updated) = best.expect("at least one trial");
        dist = updated;
        means.push(points.row(next).to_vec());
    }
    lloyd(points, &mut means, LLOYD_MAX_ITER);
    means
}

const LLOYD_MAX_ITER: usize = 25;

/// Euclidean k-means refinement of the seeds. An empty cluster keeps its
/// center.
fn lloyd(points: &DenseMatrix, means: &mut [Vec<f64>], max_iter: usize) {
    let d = points.cols();
    let mut labels = vec![usize::MAX; points.rows()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (label, x) in labels.iter_mut().zip(points.row_iter()) {
            let best = (0..means.len())
                .min_by(|&a, &b| squared_distance(x, &means[a]).total_cmp(&squared_distance(x, &means[b])))
                .expect("at least one mean");
            changed |= *label != best;
            *label = best;
        }
        if !changed {
            return;
        }
        let mut sums = vec![vec![0.0; d]; means.len()];
        let mut counts = vec![0usize; means.len()];
        for (&label, x) in labels.iter().zip(points.row_iter()) {
            axpy(1.0, x, &mut sums[label]);
            counts[label] += 1;
        }
        for ((mean, sum), &n) in means.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *mean = sum.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
}

/// M-step with weights held fixed. A component with (numerically) no
/// responsibility mass keeps its previous parameters.
fn m_step(model: &mut GmmModel, points: &DenseMatrix, resp: &ResponsibilityMatrix) {
    let d = points.cols();
    let r = resp.values();
    let mut centered = vec![0.0; d];
    for (j, comp) in model.components.iter_mut().enumerate() {
        let mass: f64 = (0..points.rows()).map(|k| r[(k, j)]).sum();
        if mass < 1e-10 {
            continue;
        }
        let mut mean = vec![0.0; d];
        for (k, x) in points.row_iter().enumerate() {
            axpy(r[(k, j)], x, &mut mean);
        }
        mean.iter_mut().for_each(|v| *v /= mass);
        comp.cov = match model.cov_mode {
            CovMode::Full => {
                let mut cov = DenseMatrix::zeros(d, d);
                for (k, x) in points.row_iter().enumerate() {
                    for ((c, xi), mi) in centered.iter_mut().zip(x).zip(&mean) {
                        *c = xi - mi;
                    }
                    add_outer(&mut cov, r[(k, j)], &centered);
                }
                cov.scale(1.0 / mass);
                // symmetrize against accumulated rounding
                for a in 0..d {
                    for b in (a + 1)..d {
                        let s = 0.5 * (cov[(a, b)] + cov[(b, a)]);
                        cov[(a, b)] = s;
                        cov[(b, a)] = s;
                    }
                }
                cov.add_diagonal(model.eps_reg);
                Covariance::Full(cov)
            }
            CovMode::Diagonal => {
                let mut var = vec![0.0; d];
                for (k, x) in points.row_iter().enumerate() {
                    for ((v, xi), mi) in var.iter_mut().zip(x).zip(&mean) {
                        *v += r[(k, j)] * (xi - mi) * (xi - mi);
                    }
                }
                Covariance::Diagonal(var.into_iter().map(|v| v / mass + model.eps_reg).collect())
            }
        };
        comp.mean = mean;
    }
}

/// Fits a fixed-weight mixture to `points` (one row per patch).
pub fn fit_gmm(points: &DenseMatrix, cfg: &GmmConfig, rng: &mut RngStream) -> Result<GmmFit> {
    let k = points.rows();
    if k < 2 {
        return Err(Error::InsufficientPatches(k));
    }
    if points.cols() == 0 {
        return Err(Error::Config("points must have at least one column".into()));
    }
    if let Some(index) = points.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if !(cfg.eps_reg > 0.0) {
        return Err(Error::Config(format!("eps_reg must be positive, got {}", cfg.eps_reg)));
    }
    if cfg.components == 0 {
        return Err(Error::Config("component count must be at least 1".into()));
    }
    let m = effective_components(cfg.components, k);
    let mode = cfg.cov_mode.unwrap_or_else(|| CovMode::auto(points.cols()));
    let init_cov = global_covariance(points, mode, cfg.eps_reg);
    let components = seed_means(points, m, rng)
        .into_iter()
        .map(|mean| GaussianComponent { mean, cov: init_cov.clone() })
        .collect();
    let mut model = GmmModel { components, weights: vec![1.0 / m as f64; m], cov_mode: mode, eps_reg: cfg.eps_reg };

    let mut trace = Vec::new();
    let mut iter = 0;
    loop {
        let (resp, ll) = e_step(&model, points);
        let converged = trace.last().is_some_and(|&prev: &f64| (ll - prev).abs() < cfg.tol * prev.abs().max(1.0));
        trace.push(ll);
        if converged || iter >= cfg.max_iter {
            return Ok(GmmFit { model, responsibilities: resp, log_likelihood_trace: trace });
        }
        m_step(&mut model, points, &resp);
        iter += 1;
    }
}

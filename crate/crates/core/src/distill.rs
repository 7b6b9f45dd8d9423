//! Per-slide synthetic distillation by Gaussian-mixture moment alignment.
//!
//! Each real slide gets a GMM; a synthetic slide of `T` free embeddings is
//! split across the mixture components at initialization and optimized so
//! that every group's population mean and covariance match its component.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, CovMode, Covariance, GaussianComponent, GmmConfig, GmmModel};
use crate::numeric::{add_outer, axpy, spawn_stream, Adam, DenseMatrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct RealSlide {
    pub slide_id: String,
    pub label: usize,
    /// One patch embedding per row.
    pub features: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub source_slide_id: String,
    pub label: usize,
    pub features: DenseMatrix,
    /// Component index of every synthetic embedding; fixed after init.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Draw each embedding from its component's fitted Gaussian.
    ComponentSample,
    /// Independent standard-normal entries.
    RandomNormal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Synthetic embeddings per slide (`T`).
    pub synthetic_patches: usize,
    /// Mixture components (`M`).
    pub components: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub init_strategy: InitStrategy,
    pub cov_mode: Option<CovMode>,
    pub eps_reg: f64,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    /// One synthetic slide per real slide; when off, `slides_per_class`
    /// slides per class are distilled from the pooled class features.
    pub o2o: bool,
    pub slides_per_class: usize,
    /// Mixture alignment; when off the loss matches a single global
    /// mean and covariance (M = 1).
    pub gma: bool,
    /// Include the covariance term of the loss.
    pub match_covariance: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            synthetic_patches: 1000,
            components: 16,
            iterations: 1000,
            learning_rate: 0.01,
            init_strategy: InitStrategy::ComponentSample,
            cov_mode: None,
            eps_reg: 1e-6,
            gmm_max_iter: 100,
            gmm_tol: 1e-6,
            o2o: true,
            slides_per_class: 10,
            gma: true,
            match_covariance: true,
        }
    }
}

impl DistillConfig {
    pub fn effective_components(&self) -> usize {
        if self.gma {
            self.components
        } else {
            1
        }
    }

    fn gmm_config(&self) -> GmmConfig {
        GmmConfig {
            components: self.effective_components(),
            cov_mode: self.cov_mode,
            eps_reg: self.eps_reg,
            max_iter: self.gmm_max_iter,
            tol: self.gmm_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be at least 1".into()));
        }
        let min = 2 * self.effective_components();
        if self.synthetic_patches < min {
            return Err(Error::InsufficientBudget { patches: self.synthetic_patches, min });
        }
        if !self.o2o && self.slides_per_class == 0 {
            return Err(Error::Config("slides_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform allocation of `t` embeddings over `m` components: `⌊t/m⌋` each,
/// the remainder handed out round-robin from component 0.
pub fn allocate(t: usize, m: usize) -> Vec<usize> {
    (0..t).map(|j| j % m).collect()
}

pub fn init_synthetic(
    model: &GmmModel,
    label: usize,
    t: usize,
    strategy: InitStrategy,
    rng: &mut RngStream,
) -> Result<SyntheticSlide> {
    let m = model.component_count();
    if t < 2 * m {
        return Err(Error::InsufficientBudget { patches: t, min: 2 * m });
    }
    let d = model.dim();
    let assignment = allocate(t, m);
    let mut features = DenseMatrix::zeros(t, d);
    for (j, &comp) in assignment.iter().enumerate() {
        let row = features.row_mut(j);
        match strategy {
            InitStrategy::RandomNormal => row.iter_mut().for_each(|v| *v = rng.standard_normal()),
            InitStrategy::ComponentSample => sample_component(&model.components[comp], row, rng),
        }
    }
    Ok(SyntheticSlide { slide_id: String::new(), source_slide_id: String::new(), label, features, assignment })
}

fn sample_component(c: &GaussianComponent, out: &mut [f64], rng: &mut RngStream) {
    let z: Vec<f64> = (0..out.len()).map(|_| rng.standard_normal()).collect();
    match &c.cov {
        Covariance::Diagonal(var) => {
            for (((o, m), v), zi) in out.iter_mut().zip(&c.mean).zip(var).zip(&z) {
                *o = m + v.sqrt() * zi;
            }
        }
        Covariance::Full(cov) => {
            let chol = crate::numeric::cholesky(cov).unwrap_or_else(|| {
                let mut reg = cov.clone();
                reg.add_diagonal(1e-9 * cov.as_slice().iter().fold(1.0f64, |a, v| a.max(v.abs())));
                crate::numeric::cholesky(&reg).unwrap_or_else(|| DenseMatrix::identity(cov.rows()))
            });
            let lz = chol.matvec(&z);
            for ((o, m), v) in out.iter_mut().zip(&c.mean).zip(lz) {
                *o = m + v;
            }
        }
    }
}

/// Members of every component, validated to hold at least two embeddings.
fn groups(syn: &SyntheticSlide, m: usize) -> Result<Vec<Vec<usize>>> {
    let mut g = vec![Vec::new(); m];
    for (j, &c) in syn.assignment.iter().enumerate() {
        if c >= m {
            return Err(Error::SparseComponent { component: c, members: 0 });
        }
        g[c].push(j);
    }
    if let Some((component, members)) = g.iter().enumerate().map(|(i, v)| (i, v.len())).find(|&(_, n)| n < 2) {
        return Err(Error::SparseComponent { component, members });
    }
    Ok(g)
}

/// Mean, centered rows and the covariance residual `Σ̂ − Σ` of one group.
struct GroupStats {
    mean_residual: Vec<f64>,
    centered: Vec<Vec<f64>>,
    cov_residual: Covariance,
}

fn group_stats(real: &GaussianComponent, syn: &DenseMatrix, members: &[usize]) -> Result<GroupStats> {
    let d = real.mean.len();
    if syn.cols() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: syn.cols() });
    }
    let n = members.len() as f64;
    let mut mean = vec![0.0; d];
    for &j in members {
        axpy(1.0 / n, syn.row(j), &mut mean);
    }
    let centered: Vec<Vec<f64>> =
        members.iter().map(|&j| syn.row(j).iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let cov_residual = match &real.cov {
        Covariance::Full(target) => {
            let mut c = DenseMatrix::zeros(d, d);
            for x in &centered {
                add_outer(&mut c, 1.0 / n, x);
            }
            Covariance::Full(c.sub(target))
        }
        Covariance::Diagonal(target) => {
            let mut v = vec![0.0; d];
            for x in &centered {
                v.iter_mut().zip(x).for_each(|(vi, xi)| *vi += xi * xi / n);
            }
            Covariance::Diagonal(v.iter().zip(target).map(|(a, b)| a - b).collect())
        }
    };
    let mean_residual = mean.iter().zip(&real.mean).map(|(a, b)| a - b).collect();
    Ok(GroupStats { mean_residual, centered, cov_residual })
}

fn check_components(real: &[GaussianComponent]) -> Result<()> {
    if real.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(())
}

/// `Σ_m ‖μ_m − μ̂_m‖² + ‖Σ_m − Σ̂_m‖_F²` over the synthetic groups.
pub fn align_loss(real: &[GaussianComponent], syn: &SyntheticSlide) -> Result<f64> {
    align_loss_with(real, syn, true)
}

/// As [`align_loss`]; `match_covariance = false` drops the covariance term.
pub fn align_loss_with(real: &[GaussianComponent], syn: &SyntheticSlide, match_covariance: bool) -> Result<f64> {
    check_components(real)?;
    let g = groups(syn, real.len())?;
    let mut loss = 0.0;
    for (comp, members) in real.iter().zip(&g) {
        let s = group_stats(comp, &syn.features, members)?;
        loss += s.mean_residual.iter().map(|v| v * v).sum::<f64>();
        if match_covariance {
            loss += match &s.cov_residual {
                Covariance::Full(r) => r.frobenius_sq(),
                Covariance::Diagonal(r) => r.iter().map(|v| v * v).sum(),
            };
        }
    }
    Ok(loss)
}

pub fn align_loss_grad(real: &[GaussianComponent], syn: &SyntheticSlide) -> Result<DenseMatrix> {
    align_loss_grad_with(real, syn, true)
}

/// Gradient with respect to every synthetic embedding, assignments held
/// fixed. For a group of `n` members with residuals `δμ = μ̂ − μ` and
/// `D = Σ̂ − Σ`, member `p` receives `(2/n) δμ + (4/n) D (p − μ̂)`.
pub fn align_loss_grad_with(
    real: &[GaussianComponent],
    syn: &SyntheticSlide,
    match_covariance: bool,
) -> Result<DenseMatrix> {
    check_components(real)?;
    let g = groups(syn, real.len())?;
    let mut grad = DenseMatrix::zeros(syn.features.rows(), syn.features.cols());
    for (comp, members) in real.iter().zip(&g) {
        let s = group_stats(comp, &syn.features, members)?;
        let n = members.len() as f64;
        for (&j, x) in members.iter().zip(&s.centered) {
            let row = grad.row_mut(j);
            axpy(2.0 / n, &s.mean_residual, row);
            if match_covariance {
                match &s.cov_residual {
                    Covariance::Full(r) => axpy(4.0 / n, &r.matvec(x), row),
                    Covariance::Diagonal(r) => {
                        for ((o, ri), xi) in row.iter_mut().zip(r).zip(x) {
                            *o += 4.0 / n * ri * xi;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub synthetic: SyntheticSlide,
    pub model: GmmModel,
    pub initial_loss: f64,
    /// Loss after each optimizer step.
    pub loss_trace: Vec<f64>,
    /// Loss of the returned synthetic slide (the best iterate seen).
    pub final_loss: f64,
}

fn optimize(
    target: &[GaussianComponent],
    mut syn: SyntheticSlide,
    cfg: &DistillConfig,
) -> Result<(SyntheticSlide, f64, Vec<f64>, f64)> {
    let initial = align_loss_with(target, &syn, cfg.match_covariance)?;
    let mut best = syn.features.clone();
    let mut best_loss = initial;
    let mut adam = Adam::new(syn.features.as_slice().len(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let grad = align_loss_grad_with(target, &syn, cfg.match_covariance)?;
        adam.step(syn.features.as_mut_slice(), grad.as_slice());
        let loss = align_loss_with(target, &syn, cfg.match_covariance)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { index: trace.len() });
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best.as_mut_slice().copy_from_slice(syn.features.as_slice());
        }
    }
    syn.features = best;
    Ok((syn, initial, trace, best_loss))
}

/// Fits the slide's mixture, initializes its synthetic counterpart and runs
/// `cfg.iterations` optimizer steps on the alignment loss.
pub fn distill_slide(real: &RealSlide, cfg: &DistillConfig, rng: &mut RngStream) -> Result<DistillOutput> {
    cfg.validate()?;
    let fit = fit_gmm(&real.features, &cfg.gmm_config(), rng)?;
    let t = cfg.synthetic_patches;
    let mut syn = init_synthetic(&fit.model, real.label, t, cfg.init_strategy, rng)?;
    syn.slide_id = format!("{}-syn", real.slide_id);
    syn.source_slide_id = real.slide_id.clone();
    let (synthetic, initial_loss, loss_trace, final_loss) = optimize(&fit.model.components, syn, cfg)?;
    Ok(DistillOutput { synthetic, model: fit.model, initial_loss, loss_trace, final_loss })
}

/// Stream id used for the pooled per-class mixture when O2O is off.
const CLASS_POOL_STREAM: u64 = 1 << 32;

/// Distills a client's slides. With O2O on, slide `i` uses the stream
/// `(master_seed, i)`, so results do not depend on scheduling.
pub fn distill_client(slides: &[RealSlide], cfg: &DistillConfig, master_seed: u64) -> Result<Vec<DistillOutput>> {
    if slides.is_empty() {
        return Err(Error::TooFewSlides("no slides to distill".into()));
    }
    cfg.validate()?;
    if cfg.o2o {
        slides
            .par_iter()
            .enumerate()
            .map(|(i, s)| distill_slide(s, cfg, &mut spawn_stream(master_seed, i as u64)).map_err(|e| e.in_slide(&s.slide_id)))
            .collect()
    } else {
        distill_pooled(slides, cfg, master_seed)
    }
}

/// Fixed-budget compression: `slides_per_class` synthetic slides per class,
/// all aligned to one mixture fit on the class's pooled patches.
fn distill_pooled(slides: &[RealSlide], cfg: &DistillConfig, master_seed: u64) -> Result<Vec<DistillOutput>> {
    let mut by_class: BTreeMap<usize, Vec<&DenseMatrix>> = BTreeMap::new();
    for s in slides {
        by_class.entry(s.label).or_default().push(&s.features);
    }
    let mut out = Vec::new();
    for (label, parts) in by_class {
        let pooled = DenseMatrix::vstack(&parts)?;
        let mut rng = spawn_stream(master_seed, CLASS_POOL_STREAM + label as u64);
        let fit = fit_gmm(&pooled, &cfg.gmm_config(), &mut rng)?;
        let class_out: Vec<DistillOutput> = (0..cfg.slides_per_class)
            .into_par_iter()
            .map(|j| {
                let mut rng = spawn_stream(master_seed, (label * cfg.slides_per_class + j) as u64);
                let mut syn = init_synthetic(&fit.model, label, cfg.synthetic_patches, cfg.init_strategy, &mut rng)?;
                syn.slide_id = format!("class{label}-syn{j}");
                syn.source_slide_id = format!("class{label}-pool");
                let (synthetic, initial_loss, loss_trace, final_loss) = optimize(&fit.model.components, syn, cfg)?;
                Ok(DistillOutput { synthetic, model: fit.model.clone(), initial_loss, loss_trace, final_loss })
            })
            .collect::<Result<_>>()?;
        out.extend(class_out);
    }
    Ok(out)
}

/// Upload size of one client's synthetic slides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Payload {
    pub slides: usize,
    pub patches_per_slide: usize,
    pub dim: usize,
}

impl Payload {
    pub fn of(slides: &[SyntheticSlide]) -> Self {
        let first = slides.first();
        Payload {
            slides: slides.len(),
            patches_per_slide: first.map_or(0, |s| s.features.rows()),
            dim: first.map_or(0, |s| s.features.cols()),
        }
    }

    /// `N · T · d` feature values.
    pub fn floats(&self) -> usize {
        self.slides * self.patches_per_slide * self.dim
    }

    pub fn labels(&self) -> usize {
        self.slides
    }

    /// Bytes of the feature tensor at 32-bit precision.
    pub fn bytes_f32(&self) -> usize {
        4 * self.floats()
    }

    pub fn mebibytes_f32(&self) -> f64 {
        self.bytes_f32() as f64 / (1024.0 * 1024.0)
    }
}

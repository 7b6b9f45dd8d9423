//! Membership inference against released synthetic embeddings.
//!
//! The attacker holds the released pool and a candidate real slide, and
//! scores the slide by how closely its patches are matched by any released
//! embedding under cosine similarity. No shadow models are trained; the raw
//! similarity is the test statistic.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::distill::{distill_client, DistillConfig, RealSlide};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::numeric::{dot, norm, spawn_stream, DenseMatrix, RngStream};

/// Minimum slides on each side of the member/non-member split.
pub const MIN_SPLIT_SLIDES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Aggregation {
    Max,
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// What the attacked client releases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Release {
    /// Distilled synthetic slides of the members.
    Distilled,
    /// For each member, `T` of its real patches drawn without replacement.
    CopySubsample,
    /// Standard normal embeddings unrelated to any real slide.
    Independent,
}

impl fmt::Display for Release {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Release::Distilled => "distilled",
            Release::CopySubsample => "copy",
            Release::Independent => "independent",
        })
    }
}

impl FromStr for Release {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distilled" => Ok(Release::Distilled),
            "copy" => Ok(Release::CopySubsample),
            "independent" => Ok(Release::Independent),
            other => Err(Error::Config(format!("unknown release {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaConfig {
    pub member_fraction: f64,
    pub aggregation: Aggregation,
    pub seeds: usize,
    pub release: Release,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig { member_fraction: 0.8, aggregation: Aggregation::Max, seeds: 10, release: Release::Distilled }
    }
}

impl MiaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.member_fraction > 0.0 && self.member_fraction < 1.0) {
            return Err(Error::Config(format!("member_fraction must lie in (0, 1), got {}", self.member_fraction)));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiaReport {
    /// `(seed index, AUC)` pairs.
    pub per_seed: Vec<(usize, f64)>,
    pub max_auc: f64,
    pub mean_auc: f64,
}

impl MiaReport {
    fn from_aucs(per_seed: Vec<(usize, f64)>) -> Self {
        let max_auc = per_seed.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let mean_auc = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
        MiaReport { per_seed, max_auc, mean_auc }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
        w.write_record(["seed", "auc"])?;
        for (s, a) in &self.per_seed {
            w.write_record([s.to_string(), format!("{a:.6}")])?;
        }
        w.write_record(["max".to_string(), format!("{:.6}", self.max_auc)])?;
        w.write_record(["mean".to_string(), format!("{:.6}", self.mean_auc)])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Config("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn unit_rows(m: &DenseMatrix) -> Result<Vec<Vec<f64>>> {
    m.row_iter()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                return Err(Error::Config("cosine similarity of a zero vector".into()));
            }
            Ok(r.iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Score of each candidate slide against the released pool.
pub fn attack_scores(candidates: &[&DenseMatrix], pool: &[&DenseMatrix], aggregation: Aggregation) -> Result<Vec<f64>> {
    let released: Vec<Vec<f64>> =
        pool.iter().map(|m| unit_rows(m)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if released.is_empty() {
        return Err(Error::EmptyVector);
    }
    candidates
        .par_iter()
        .map(|slide| {
            let patches = unit_rows(slide)?;
            if patches.is_empty() {
                return Err(Error::EmptyBag);
            }
            let best = patches.iter().map(|p| {
                released.iter().map(|r| dot(p, r)).fold(f64::NEG_INFINITY, f64::max).clamp(-1.0, 1.0)
            });
            Ok(match aggregation {
                Aggregation::Max => best.fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Mean => best.sum::<f64>() / patches.len() as f64,
            })
        })
        .collect()
}

fn copy_subsample(slide: &RealSlide, t: usize, rng: &mut RngStream) -> DenseMatrix {
    let mut idx: Vec<usize> = (0..slide.features.rows()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(t.min(idx.len()));
    slide.features.select_rows(&idx)
}

fn independent(t: usize, d: usize, rng: &mut RngStream) -> DenseMatrix {
    let data = (0..t * d).map(|_| rng.standard_normal()).collect();
    DenseMatrix::from_vec(t, d, data).expect("finite normal draws")
}

/// Builds the released pool for one member set.
pub fn release(members: &[RealSlide], kind: Release, cfg: &DistillConfig, seed: u64) -> Result<Vec<DenseMatrix>> {
    let mut rng = spawn_stream(seed, 0x5E1E_A5E0);
    let d = members.first().map_or(0, |s| s.features.cols());
    Ok(match kind {
        Release::Distilled => distill_client(members, cfg, seed)?.into_iter().map(|o| o.synthetic.features).collect(),
        Release::CopySubsample => members.iter().map(|s| copy_subsample(s, cfg.synthetic_patches, &mut rng)).collect(),
        Release::Independent => members.iter().map(|_| independent(cfg.synthetic_patches, d, &mut rng)).collect(),
    })
}

/// One partition: AUC of member-vs-non-member discrimination.
pub fn attack_once(slides: &[RealSlide], distill: &DistillConfig, cfg: &MiaConfig, master_seed: u64, seed_index: usize) -> Result<f64> {
    cfg.validate()?;
    let n = slides.len();
    let n_members = ((n as f64) * cfg.member_fraction).round() as usize;
    if n_members < MIN_SPLIT_SLIDES || n - n_members.min(n) < MIN_SPLIT_SLIDES {
        return Err(Error::TooFewSlides(format!(
            "{n} slides at member fraction {} leave fewer than {MIN_SPLIT_SLIDES} per split",
            cfg.member_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = spawn_stream(master_seed, 0x4D1A_0000 + seed_index as u64);
    rng.shuffle(&mut order);
    let members: Vec<RealSlide> = order[..n_members].iter().map(|&i| slides[i].clone()).collect();
    let released = release(&members, cfg.release, distill, rng.child(1).master_seed())?;

    let candidates: Vec<&DenseMatrix> = order.iter().map(|&i| &slides[i].features).collect();
    let pool: Vec<&DenseMatrix> = released.iter().collect();
    let scores = attack_scores(&candidates, &pool, cfg.aggregation)?;
    let is_member: Vec<bool> = (0..n).map(|k| k < n_members).collect();
    auc(&scores, &is_member)
}

/// Repeats the attack over `cfg.seeds` random partitions.
pub fn mia_attack(slides: &[RealSlide], distill: &DistillConfig, cfg: &MiaConfig, master_seed: u64) -> Result<MiaReport> {
    cfg.validate()?;
    let per_seed = (0..cfg.seeds)
        .map(|s| Ok((s, attack_once(slides, distill, cfg, master_seed, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MiaReport::from_aucs(per_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert_relative_eq!(cosine_similarity(&v, &v).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(MiaConfig { member_fraction: f, ..MiaConfig::default() }.validate().is_err());
        }
        assert!(MiaConfig::default().validate().is_ok());
    }

    fn slides(n: usize, seed: u64) -> Vec<RealSlide> {
        (0..n)
            .map(|i| {
                let mut rng = spawn_stream(seed, i as u64);
                let data = (0..30 * 4).map(|_| rng.standard_normal()).collect();
                RealSlide { slide_id: format!("s{i}"), label: i % 2, features: DenseMatrix::from_vec(30, 4, data).unwrap() }
            })
            .collect()
    }

    #[test]
    fn too_few_slides() {
        let cfg = MiaConfig { seeds: 1, ..MiaConfig::default() };
        let err = mia_attack(&slides(12, 0), &DistillConfig::default(), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewSlides(_)));
    }

    #[test]
    fn verbatim_copies_are_detected() {
        let all = slides(30, 1);
        let members: Vec<&DenseMatrix> = all[..24].iter().map(|s| &s.features).collect();
        let candidates: Vec<&DenseMatrix> = all.iter().map(|s| &s.features).collect();
        let scores = attack_scores(&candidates, &members, Aggregation::Mean).unwrap();
        let labels: Vec<bool> = (0..30).map(|i| i < 24).collect();
        assert!(auc(&scores, &labels).unwrap() > 0.9);
    }
}

//! Run configuration: `key = value` lines grouped under `[section]`
//! headers. Every key is optional and falls back to the desk preset.

use std::fmt;
use std::path::{Path, PathBuf};

use fedhd_core::cohort::CohortParams;
use fedhd_core::distill::{DistillConfig, InitStrategy};
use fedhd_core::federation::{CurriculumConfig, MilSpec, ProtocolConfig, Trigger};
use fedhd_core::gmm::CovMode;
use fedhd_core::mil::{LossKind, MilVariant, TrainConfig};
use fedhd_core::presets;
use fedhd_core::privacy::{Aggregation, MiaConfig, Release};
use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;

use crate::CliError;

/// Number, or the string `"none"`.
fn optional_number<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    struct V;
    impl Visitor<'_> for V {
        type Value = Option<f64>;
        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a number or \"none\"")
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
            Ok(Some(v))
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
            Ok(Some(v as f64))
        }
        fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
            match v {
                "none" => Ok(None),
                other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
            }
        }
    }
    d.deserialize_any(V)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seeds: (0..5).collect(), out: None, threads: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    pub components_per_class: usize,
    pub mean_radius: f64,
    pub component_variance: f64,
    pub variance_decay: f64,
    #[serde(deserialize_with = "optional_number")]
    pub class_separation: Option<f64>,
    pub shift_norm: f64,
    pub client_priors: Vec<Vec<f64>>,
    pub slides_per_client: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub test_fraction: f64,
    #[serde(deserialize_with = "optional_number")]
    pub slide_weight_concentration: Option<f64>,
    pub slide_shift_std: f64,
    /// Seed of the mixture geometry; the run seed draws the slides.
    pub spec_seed: u64,
}

impl Default for CohortSection {
    fn default() -> Self {
        let p = presets::desk_cohort();
        CohortSection {
            clients: p.clients,
            classes: p.classes,
            dim: p.dim,
            components_per_class: p.components_per_class,
            mean_radius: p.mean_radius,
            component_variance: p.component_variance,
            variance_decay: p.variance_decay,
            class_separation: p.class_separation,
            shift_norm: p.shift_norm,
            client_priors: p.client_priors,
            slides_per_client: p.slides_per_client,
            patches_min: p.patches_min,
            patches_max: p.patches_max,
            test_fraction: p.test_fraction,
            slide_weight_concentration: p.slide_weight_concentration,
            slide_shift_std: p.slide_shift_std,
            spec_seed: presets::DESK_SPEC_SEED,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum InitName {
    ComponentSample,
    RandomNormal,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CovName {
    Auto,
    Full,
    Diagonal,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub synthetic_patches: usize,
    pub components: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub init: InitName,
    pub cov_mode: CovName,
    pub eps_reg: f64,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub slides_per_class: usize,
    pub match_covariance: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = presets::desk_distill();
        DistillSection {
            synthetic_patches: d.synthetic_patches,
            components: d.components,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            init: match d.init_strategy {
                InitStrategy::ComponentSample => InitName::ComponentSample,
                InitStrategy::RandomNormal => InitName::RandomNormal,
            },
            cov_mode: match d.cov_mode {
                None => CovName::Auto,
                Some(CovMode::Full) => CovName::Full,
                Some(CovMode::Diagonal) => CovName::Diagonal,
            },
            eps_reg: d.eps_reg,
            gmm_max_iter: d.gmm_max_iter,
            gmm_tol: d.gmm_tol,
            slides_per_class: d.slides_per_class,
            match_covariance: d.match_covariance,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    MeanPool,
    GatedAttention,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    Ce,
    Gce,
}

impl From<LossName> for LossKind {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Ce => LossKind::Ce,
            LossName::Gce => LossKind::Gce,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub variant: VariantName,
    pub hidden_dim: usize,
    pub real_loss: LossName,
    pub synthetic_loss: LossName,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = presets::desk_train();
        let m = presets::desk_mil();
        TrainSection {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            variant: match m.variant {
                MilVariant::MeanPool => VariantName::MeanPool,
                MilVariant::GatedAttention => VariantName::GatedAttention,
            },
            hidden_dim: m.hidden_dim,
            real_loss: LossName::Ce,
            synthetic_loss: LossName::Gce,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerName {
    Fixed,
    Plateau,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub t0: usize,
    pub q: f64,
    pub trigger: TriggerName,
    pub patience: usize,
    pub min_delta: f64,
    pub synthetic_weight: f64,
    pub class_reweight: bool,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        let c = presets::desk_curriculum();
        CurriculumSection {
            t0: c.t0,
            q: c.q,
            trigger: TriggerName::Fixed,
            patience: 5,
            min_delta: 1e-3,
            synthetic_weight: c.synthetic_weight,
            class_reweight: c.class_reweight,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationName {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ReleaseName {
    Distilled,
    Copy,
    Independent,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiaSection {
    pub member_fraction: f64,
    pub aggregation: AggregationName,
    pub seeds: usize,
    pub release: ReleaseName,
    /// Client whose slides are attacked.
    pub client: usize,
}

impl Default for MiaSection {
    fn default() -> Self {
        let m = presets::desk_mia();
        MiaSection {
            member_fraction: m.member_fraction,
            aggregation: match m.aggregation {
                Aggregation::Max => AggregationName::Max,
                Aggregation::Mean => AggregationName::Mean,
            },
            seeds: m.seeds,
            release: ReleaseName::Distilled,
            client: 0,
        }
    }
}

/// Component switches; `fdd_only` turns off O2O, GMA and CBF together.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub fdd_only: bool,
    pub o2o: bool,
    pub gma: bool,
    pub cbf: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { fdd_only: false, o2o: true, gma: true, cbf: true }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub cohort: CohortSection,
    pub distill: DistillSection,
    pub train: TrainSection,
    pub curriculum: CurriculumSection,
    pub mia: MiaSection,
    pub ablation: AblationSection,
}

/// Configuration with every component built and validated.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub cohort: CohortParams,
    pub spec_seed: u64,
    /// Protocol with seed 0; callers set the run seed.
    pub protocol: ProtocolConfig,
    pub mia: MiaConfig,
    pub mia_client: usize,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let c = &self.cohort;
        let cohort = CohortParams {
            clients: c.clients,
            classes: c.classes,
            dim: c.dim,
            components_per_class: c.components_per_class,
            mean_radius: c.mean_radius,
            component_variance: c.component_variance,
            variance_decay: c.variance_decay,
            class_separation: c.class_separation,
            shift_norm: c.shift_norm,
            client_priors: c.client_priors.clone(),
            slides_per_client: c.slides_per_client,
            patches_min: c.patches_min,
            patches_max: c.patches_max,
            test_fraction: c.test_fraction,
            slide_weight_concentration: c.slide_weight_concentration,
            slide_shift_std: c.slide_shift_std,
        };
        let a = &self.ablation;
        let d = &self.distill;
        let distill = DistillConfig {
            synthetic_patches: d.synthetic_patches,
            components: d.components,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            init_strategy: match d.init {
                InitName::ComponentSample => InitStrategy::ComponentSample,
                InitName::RandomNormal => InitStrategy::RandomNormal,
            },
            cov_mode: match d.cov_mode {
                CovName::Auto => None,
                CovName::Full => Some(CovMode::Full),
                CovName::Diagonal => Some(CovMode::Diagonal),
            },
            eps_reg: d.eps_reg,
            gmm_max_iter: d.gmm_max_iter,
            gmm_tol: d.gmm_tol,
            o2o: a.o2o && !a.fdd_only,
            slides_per_class: d.slides_per_class,
            gma: a.gma && !a.fdd_only,
            match_covariance: d.match_covariance,
        };
        distill.validate().map_err(CliError::invalid)?;
        let t = &self.train;
        let train = TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            q: self.curriculum.q,
            real_loss: t.real_loss.into(),
            synthetic_loss: t.synthetic_loss.into(),
        };
        train.validate().map_err(CliError::invalid)?;
        let cu = &self.curriculum;
        let curriculum = CurriculumConfig {
            t0: cu.t0,
            q: cu.q,
            trigger: match cu.trigger {
                TriggerName::Fixed => Trigger::Fixed,
                TriggerName::Plateau => Trigger::Plateau { patience: cu.patience, min_delta: cu.min_delta },
            },
            synthetic_weight: cu.synthetic_weight,
            class_reweight: cu.class_reweight,
        };
        curriculum.validate(train.epochs).map_err(CliError::invalid)?;
        let mil = MilSpec {
            variant: match t.variant {
                VariantName::MeanPool => MilVariant::MeanPool,
                VariantName::GatedAttention => MilVariant::GatedAttention,
            },
            hidden_dim: match t.variant {
                VariantName::MeanPool => 0,
                VariantName::GatedAttention => t.hidden_dim,
            },
        };
        if mil.variant == MilVariant::GatedAttention && mil.hidden_dim == 0 {
            return Err(CliError::Config("train.hidden_dim must be at least 1 for gated-attention".into()));
        }
        let m = &self.mia;
        let mia = MiaConfig {
            member_fraction: m.member_fraction,
            aggregation: match m.aggregation {
                AggregationName::Max => Aggregation::Max,
                AggregationName::Mean => Aggregation::Mean,
            },
            seeds: m.seeds,
            release: match m.release {
                ReleaseName::Distilled => Release::Distilled,
                ReleaseName::Copy => Release::CopySubsample,
                ReleaseName::Independent => Release::Independent,
            },
        };
        mia.validate().map_err(CliError::invalid)?;
        if m.client >= cohort.clients {
            return Err(CliError::Config(format!("mia.client = {} but the cohort has {} clients", m.client, cohort.clients)));
        }
        if self.run.seeds.is_empty() {
            return Err(CliError::Config("run.seeds must list at least one seed".into()));
        }
        // surfaces cohort errors before any work starts
        cohort.build(c.spec_seed).map_err(CliError::invalid)?;
        Ok(Resolved {
            seeds: self.run.seeds.clone(),
            out: self.run.out.clone(),
            threads: self.run.threads,
            cohort,
            spec_seed: c.spec_seed,
            protocol: ProtocolConfig {
                classes: c.classes,
                distill,
                train,
                curriculum,
                mil: vec![mil],
                cbf: a.cbf && !a.fdd_only,
                seed: 0,
                ..ProtocolConfig::default()
            },
            mia,
            mia_client: m.client,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_desk_preset() {
        let r = RunConfig::parse("").unwrap().resolve().unwrap();
        assert_eq!(r.cohort, presets::desk_cohort());
        assert_eq!(r.protocol, presets::desk_protocol(0));
        assert_eq!(r.mia, presets::desk_mia());
        assert_eq!(r.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shipped_config_matches_preset() {
        let text = include_str!("../../../configs/desk.toml");
        let r = RunConfig::parse(text).unwrap().resolve().unwrap();
        assert_eq!(r.cohort, presets::desk_cohort());
        assert_eq!(r.protocol, presets::desk_protocol(0));
        assert_eq!(r.mia, presets::desk_mia());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = RunConfig::parse("[train]\nepochs = 3\nepoch = 4\n").unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        let err = RunConfig::parse("[cohort]\n\n\nclients = \"three\"\n").unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("clients"), "{err}");
        let err = RunConfig::parse("[nope]\nx = 1\n").unwrap_err().to_string();
        assert!(err.contains("nope") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn ablation_flags() {
        let r = RunConfig::parse("[ablation]\nfdd_only = true\n").unwrap().resolve().unwrap();
        assert!(!r.protocol.distill.o2o && !r.protocol.distill.gma && !r.protocol.cbf);
        let r = RunConfig::parse("[ablation]\ngma = false\n").unwrap().resolve().unwrap();
        assert!(r.protocol.distill.o2o && !r.protocol.distill.gma && r.protocol.cbf);
        assert_eq!(r.protocol.distill.effective_components(), 1);
    }

    #[test]
    fn none_and_semantic_errors() {
        let r = RunConfig::parse("[cohort]\nclass_separation = \"none\"\n").unwrap().resolve().unwrap();
        assert_eq!(r.cohort.class_separation, None);
        assert!(RunConfig::parse("[curriculum]\nt0 = 99\n").unwrap().resolve().is_err());
        assert!(RunConfig::parse("[mia]\nmember_fraction = 1.0\n").unwrap().resolve().is_err());
        assert!(RunConfig::parse("[distill]\nsynthetic_patches = 4\n").unwrap().resolve().is_err());
    }
}

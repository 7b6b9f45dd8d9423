//! The standard desk-scale setup: three clients, two classes, 32-dimensional
//! features, small enough that a full run takes minutes on one core.

use crate::cohort::CohortParams;
use crate::distill::DistillConfig;
use crate::federation::{CurriculumConfig, MilSpec, ProtocolConfig};
use crate::gmm::CovMode;
use crate::mil::{MilVariant, TrainConfig};
use crate::privacy::MiaConfig;

/// Seed from which the desk cohort's mixtures and client shifts are drawn.
pub const DESK_SPEC_SEED: u64 = 0;

pub fn desk_cohort() -> CohortParams {
    CohortParams {
        clients: 3,
        classes: 2,
        dim: 32,
        components_per_class: 4,
        mean_radius: 3.0,
        component_variance: 1.0,
        variance_decay: 1.0,
        class_separation: Some(0.8),
        shift_norm: 1.0,
        client_priors: vec![vec![0.5, 0.5]],
        slides_per_client: 40,
        patches_min: 150,
        patches_max: 250,
        test_fraction: 0.3,
        slide_weight_concentration: Some(1.0),
        slide_shift_std: 0.0,
    }
}

pub fn desk_distill() -> DistillConfig {
    DistillConfig {
        synthetic_patches: 64,
        components: 4,
        iterations: 300,
        // about 50 patches per component cannot support a 32×32 covariance
        cov_mode: Some(CovMode::Diagonal),
        ..DistillConfig::default()
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig { learning_rate: 2e-3, epochs: 30, ..TrainConfig::default() }
}

pub fn desk_curriculum() -> CurriculumConfig {
    CurriculumConfig { t0: 10, q: 0.7, ..CurriculumConfig::default() }
}

pub fn desk_mil() -> MilSpec {
    MilSpec { variant: MilVariant::GatedAttention, hidden_dim: 8 }
}

pub fn desk_protocol(seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        classes: 2,
        distill: desk_distill(),
        train: desk_train(),
        curriculum: desk_curriculum(),
        mil: vec![desk_mil()],
        seed,
        ..ProtocolConfig::default()
    }
}

pub fn desk_mia() -> MiaConfig {
    MiaConfig::default()
}

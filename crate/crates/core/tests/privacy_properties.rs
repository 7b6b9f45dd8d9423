use fedhd_core::distill::{DistillConfig, RealSlide};
use fedhd_core::numeric::{spawn_stream, DenseMatrix};
use fedhd_core::privacy::{cosine_similarity, mia_attack, MiaConfig, Release};
use proptest::prelude::*;

fn slides(n: usize, d: usize, seed: u64) -> Vec<RealSlide> {
    (0..n)
        .map(|i| {
            let mut rng = spawn_stream(seed, i as u64);
            let data = (0..40 * d).map(|_| rng.standard_normal()).collect();
            RealSlide { slide_id: format!("s{i}"), label: i % 2, features: DenseMatrix::from_vec(40, d, data).unwrap() }
        })
        .collect()
}

fn distill() -> DistillConfig {
    DistillConfig { synthetic_patches: 8, components: 2, iterations: 20, ..DistillConfig::default() }
}

#[test]
fn independent_release_is_chance() {
    let cfg = MiaConfig { release: Release::Independent, seeds: 10, ..MiaConfig::default() };
    let report = mia_attack(&slides(40, 4, 3), &distill(), &cfg, 7).unwrap();
    assert_eq!(report.per_seed.len(), 10);
    assert!((report.mean_auc - 0.5).abs() <= 0.1, "mean AUC {}", report.mean_auc);
}

#[test]
fn copy_release_is_detected() {
    let cfg = MiaConfig { release: Release::CopySubsample, seeds: 3, ..MiaConfig::default() };
    let report = mia_attack(&slides(30, 4, 5), &distill(), &cfg, 1).unwrap();
    assert!(report.mean_auc > 0.9, "mean AUC {}", report.mean_auc);
}

#[test]
fn attack_is_deterministic_and_csv_shaped() {
    let cfg = MiaConfig { seeds: 3, ..MiaConfig::default() };
    let all = slides(25, 3, 2);
    let a = mia_attack(&all, &distill(), &cfg, 4).unwrap();
    assert_eq!(a, mia_attack(&all, &distill(), &cfg, 4).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mia.csv");
    a.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed,auc");
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert!(lines[4].starts_with("max,") && lines[5].starts_with("mean,"));
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant_and_bounded(
        v in prop::collection::vec(-5.0f64..5.0, 1..10), s in 0.01f64..100.0, seed: u64,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let mut rng = spawn_stream(seed, 0);
        let u: Vec<f64> = v.iter().map(|_| rng.standard_normal()).collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_similarity(&u, &scaled).unwrap()).abs() < 1e-12);
        prop_assert!((cosine_similarity(&v, &scaled).unwrap() - 1.0).abs() < 1e-12);
    }
}

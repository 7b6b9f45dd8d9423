use fedhd_core::cohort::{generate_cohort, read_bag, write_bag, CohortParams, FeatureBag, BAG_HEADER_LEN};
use fedhd_core::numeric::{spawn_stream, DenseMatrix};
use proptest::prelude::*;

fn slide_means(slides: &[fedhd_core::distill::RealSlide], j: usize) -> Vec<f64> {
    slides.iter().map(|s| s.features.row_iter().map(|r| r[j]).sum::<f64>() / s.features.rows() as f64).collect()
}

fn welch_z(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    (ma - mb) / (va / na + vb / nb).sqrt()
}

/// Without domain shift every client draws from one distribution; per
/// class and dimension the slide means of two clients pass a two-sample
/// test at α = 0.01, Bonferroni-corrected over all comparisons.
#[test]
fn clients_without_shift_are_exchangeable() {
    let params = CohortParams { shift_norm: 0.0, dim: 6, slides_per_client: 60, ..CohortParams::default() };
    let spec = params.build(11).unwrap();
    let tests = params.clients * (params.clients - 1) / 2 * params.classes * params.dim;
    // two-sided normal quantile at 0.01 / tests
    let z_crit = 3.63;
    assert!(tests <= 36);
    for seed in 0..3 {
        let clients = generate_cohort(&spec, seed).unwrap();
        for a in 0..clients.len() {
            for b in a + 1..clients.len() {
                for y in 0..params.classes {
                    let pick = |c: usize| -> Vec<_> {
                        clients[c].train.iter().chain(&clients[c].test).filter(|s| s.label == y).cloned().collect()
                    };
                    let (sa, sb) = (pick(a), pick(b));
                    for j in 0..params.dim {
                        let z = welch_z(&slide_means(&sa, j), &slide_means(&sb, j));
                        assert!(z.abs() < z_crit, "seed {seed}, clients {a}/{b}, class {y}, dim {j}: z = {z:.2}");
                    }
                }
            }
        }
    }
}

#[test]
fn class_counts_within_binomial_bound() {
    let priors = vec![vec![0.5, 0.5], vec![0.7, 0.3], vec![0.2, 0.8]];
    let params = CohortParams { dim: 4, patches_min: 10, patches_max: 20, client_priors: priors.clone(), ..CohortParams::default() };
    for seed in 0..5 {
        let spec = params.build(seed).unwrap();
        for c in generate_cohort(&spec, seed).unwrap() {
            let n = (c.train.len() + c.test.len()) as f64;
            for (y, &p) in priors[c.client_id].iter().enumerate() {
                let count = c.train.iter().chain(&c.test).filter(|s| s.label == y).count() as f64;
                let bound = 2.0 * (n * p * (1.0 - p)).sqrt();
                assert!((count - n * p).abs() <= bound, "client {} class {y}: {count} vs {}", c.client_id, n * p);
            }
        }
    }
}

#[test]
fn generation_is_a_function_of_spec_and_seed() {
    let params = CohortParams { dim: 5, slides_per_client: 10, patches_min: 8, patches_max: 12, ..CohortParams::default() };
    assert_eq!(params.build(4).unwrap(), params.build(4).unwrap());
    assert_ne!(params.build(4).unwrap(), params.build(5).unwrap());
    let spec = params.build(4).unwrap();
    let a = generate_cohort(&spec, 9).unwrap();
    assert_eq!(a, generate_cohort(&spec, 9).unwrap());
    let ids: Vec<&str> = a.iter().flat_map(|c| c.train.iter().chain(&c.test)).map(|s| s.slide_id.as_str()).collect();
    let mut unique = ids.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), ids.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bag_file_size_and_round_trip(k in 1usize..40, d in 1usize..20, label in 0usize..5, flags in 0u16..2, seed: u64) {
        let mut rng = spawn_stream(seed, 0);
        let features = DenseMatrix::from_vec(k, d, (0..k * d).map(|_| 10.0 * rng.standard_normal()).collect()).unwrap();
        let bag = FeatureBag { features, label, flags };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bag");
        write_bag(&path, &bag).unwrap();
        prop_assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, BAG_HEADER_LEN + 4 * k * d);
        let back = read_bag(&path).unwrap();
        prop_assert_eq!(back.label, label);
        prop_assert_eq!(back.flags, flags);
        for (a, b) in back.features.as_slice().iter().zip(bag.features.as_slice()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

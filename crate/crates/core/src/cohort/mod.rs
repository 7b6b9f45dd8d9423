//! Synthetic multi-client cohorts with known generative mixtures, plus the
//! bag file and manifest formats used to move cohorts on and off disk.

mod bagfile;
mod manifest;

pub use bagfile::{read_bag, write_bag, FeatureBag, BAG_HEADER_LEN, BAG_MAGIC, BAG_VERSION, FLAG_SYNTHETIC};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, Split};

use crate::distill::RealSlide;
use crate::error::{Error, Result};
use crate::numeric::{norm, spawn_stream, DenseMatrix, RngStream};

/// Generative mixture of one class: equal-weight axis-aligned Gaussian
/// components.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMixture {
    pub means: Vec<Vec<f64>>,
    /// Per-component, per-dimension variances.
    pub variances: Vec<Vec<f64>>,
}

/// Fully explicit cohort description.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortSpec {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    pub mixtures: Vec<ClassMixture>,
    /// Additive per-client feature offset.
    pub client_shifts: Vec<Vec<f64>>,
    /// Per-client class priors, each summing to one.
    pub client_priors: Vec<Vec<f64>>,
    pub slides_per_client: Vec<usize>,
    pub patches_min: usize,
    pub patches_max: usize,
    pub test_fraction: f64,
    /// Dirichlet concentration of per-slide component weights; `None`
    /// samples components uniformly.
    pub slide_weight_concentration: Option<f64>,
    /// Standard deviation of a per-slide additive offset (stain-like
    /// slide effect).
    pub slide_shift_std: f64,
}

/// Scalar knobs from which a [`CohortSpec`] is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortParams {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    /// Components per class (`M_gen`).
    pub components_per_class: usize,
    /// Component means lie on a sphere of this radius.
    pub mean_radius: f64,
    pub component_variance: f64,
    /// Per-dimension variances of a component are `component_variance ·
    /// decay^r` over a random ordering `r` of the dimensions; 1 gives
    /// isotropic components.
    pub variance_decay: f64,
    /// When set, every class perturbs one shared set of component means by
    /// this distance instead of drawing its own.
    pub class_separation: Option<f64>,
    /// Norm of each client's offset.
    pub shift_norm: f64,
    /// One prior per client; a single entry is broadcast to all clients.
    pub client_priors: Vec<Vec<f64>>,
    pub slides_per_client: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub test_fraction: f64,
    pub slide_weight_concentration: Option<f64>,
    pub slide_shift_std: f64,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            clients: 3,
            classes: 2,
            dim: 32,
            components_per_class: 3,
            mean_radius: 3.0,
            component_variance: 1.0,
            variance_decay: 1.0,
            class_separation: None,
            shift_norm: 1.0,
            client_priors: vec![vec![0.5, 0.5]],
            slides_per_client: 40,
            patches_min: 150,
            patches_max: 250,
            test_fraction: 0.3,
            slide_weight_concentration: None,
            slide_shift_std: 0.0,
        }
    }
}

fn random_direction(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl CohortParams {
    /// Draws component means and client offsets from `seed`.
    pub fn build(&self, seed: u64) -> Result<CohortSpec> {
        if self.clients == 0 || self.classes < 2 || self.dim == 0 || self.components_per_class == 0 {
            return Err(Error::Config("cohort needs ≥1 client, ≥2 classes, dim ≥1 and ≥1 component".into()));
        }
        if !(self.component_variance > 0.0 && self.variance_decay > 0.0 && self.variance_decay <= 1.0) {
            return Err(Error::Config("component variance must be positive and decay in (0, 1]".into()));
        }
        let mut rng = spawn_stream(seed, u64::MAX);
        let scaled = |v: Vec<f64>, s: f64| -> Vec<f64> { v.into_iter().map(|x| x * s).collect() };
        let mut variances = Vec::with_capacity(self.components_per_class);
        for _ in 0..self.components_per_class {
            let mut order: Vec<usize> = (0..self.dim).collect();
            rng.shuffle(&mut order);
            variances.push(order.iter().map(|&r| self.component_variance * self.variance_decay.powi(r as i32)).collect::<Vec<f64>>());
        }
        let mixtures = match self.class_separation {
            None => (0..self.classes)
                .map(|_| ClassMixture {
                    means: (0..self.components_per_class)
                        .map(|_| scaled(random_direction(self.dim, &mut rng), self.mean_radius))
                        .collect(),
                    variances: variances.clone(),
                })
                .collect(),
            Some(sep) => {
                let base: Vec<Vec<f64>> = (0..self.components_per_class)
                    .map(|_| scaled(random_direction(self.dim, &mut rng), self.mean_radius))
                    .collect();
                (0..self.classes)
                    .map(|_| ClassMixture {
                        means: base
                            .iter()
                            .map(|b| {
                                let u = random_direction(self.dim, &mut rng);
                                b.iter().zip(u).map(|(x, ui)| x + sep * ui).collect()
                            })
                            .collect(),
                        variances: variances.clone(),
                    })
                    .collect()
            }
        };
        let client_shifts =
            (0..self.clients).map(|_| scaled(random_direction(self.dim, &mut rng), self.shift_norm)).collect();
        let client_priors = match self.client_priors.len() {
            1 => vec![self.client_priors[0].clone(); self.clients],
            n if n == self.clients => self.client_priors.clone(),
            n => return Err(Error::Config(format!("expected 1 or {} client priors, got {n}", self.clients))),
        };
        let spec = CohortSpec {
            clients: self.clients,
            classes: self.classes,
            dim: self.dim,
            mixtures,
            client_shifts,
            client_priors,
            slides_per_client: vec![self.slides_per_client; self.clients],
            patches_min: self.patches_min,
            patches_max: self.patches_max,
            test_fraction: self.test_fraction,
            slide_weight_concentration: self.slide_weight_concentration,
            slide_shift_std: self.slide_shift_std,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mixtures.len() != self.classes {
            return bad(format!("{} mixtures for {} classes", self.mixtures.len(), self.classes));
        }
        if self.client_shifts.len() != self.clients
            || self.client_priors.len() != self.clients
            || self.slides_per_client.len() != self.clients
        {
            return bad("per-client vectors must have one entry per client".into());
        }
        for (c, p) in self.client_priors.iter().enumerate() {
            if p.len() != self.classes || p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("client {c} priors must be {} non-negative values summing to 1", self.classes));
            }
        }
        let max_components = self.mixtures.iter().map(|m| m.means.len()).max().unwrap_or(0);
        if self.patches_min < 2 * max_components.max(1) || self.patches_max < self.patches_min {
            return bad(format!(
                "patch range [{}, {}] must satisfy 2·M_gen ≤ min ≤ max",
                self.patches_min, self.patches_max
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        for m in &self.mixtures {
            if m.means.is_empty()
                || m.means.len() != m.variances.len()
                || m.means.iter().chain(&m.variances).any(|v| v.len() != self.dim)
                || m.variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite()))
            {
                return bad("mixture means/variances inconsistent with dim".into());
            }
        }
        Ok(())
    }
}

/// One client's real slides after the stratified split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Vec<RealSlide>,
    pub test: Vec<RealSlide>,
}

/// Largest-remainder allocation of `n` slides over `priors`; every class
/// with positive prior receives at least two slides (one per split).
fn class_counts(n: usize, priors: &[f64], client: usize) -> Result<Vec<usize>> {
    if let Some(class) = priors.iter().position(|&p| p == 0.0) {
        return Err(Error::ClassUnrepresentable { client, class });
    }
    if n < 2 * priors.len() {
        return Err(Error::TooFewSlides(format!("client {client} needs at least {} slides", 2 * priors.len())));
    }
    let exact: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    while let Some(short) = counts.iter().position(|&c| c < 2) {
        let donor = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
        counts[donor] -= 1;
        counts[short] += 1;
    }
    Ok(counts)
}

fn dirichlet(alpha: f64, k: usize, rng: &mut RngStream) -> Vec<f64> {
    use rand_distr::{Distribution, Gamma};
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

fn generate_slide(
    spec: &CohortSpec,
    client: usize,
    label: usize,
    slide_id: String,
    rng: &mut RngStream,
) -> RealSlide {
    let mix = &spec.mixtures[label];
    let m = mix.means.len();
    let k = rng.uniform_int(spec.patches_min, spec.patches_max);
    let weights = match spec.slide_weight_concentration {
        Some(alpha) => dirichlet(alpha, m, rng),
        None => vec![1.0 / m as f64; m],
    };
    let slide_shift: Vec<f64> = (0..spec.dim).map(|_| spec.slide_shift_std * rng.standard_normal()).collect();
    let shift = &spec.client_shifts[client];
    let mut features = DenseMatrix::zeros(k, spec.dim);
    for r in 0..k {
        let g = rng.weighted_index(&weights);
        for (j, x) in features.row_mut(r).iter_mut().enumerate() {
            *x = mix.means[g][j] + shift[j] + slide_shift[j] + mix.variances[g][j].sqrt() * rng.standard_normal();
        }
    }
    RealSlide { slide_id, label, features }
}

/// Generates every client's slides and splits them, stratified by class.
/// A pure function of `(spec, seed)`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Vec<ClientData>> {
    spec.validate()?;
    (0..spec.clients)
        .map(|c| {
            let n = spec.slides_per_client[c];
            let counts = class_counts(n, &spec.client_priors[c], c)?;
            let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(y, &k)| std::iter::repeat_n(y, k)).collect();
            let mut order_rng = spawn_stream(seed, (c as u64) << 32);
            order_rng.shuffle(&mut labels);
            let slides: Vec<RealSlide> = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let mut rng = spawn_stream(seed, ((c as u64) << 32) | (i as u64 + 1));
                    generate_slide(spec, c, y, format!("c{c}-s{i:04}"), &mut rng)
                })
                .collect();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (y, &count) in counts.iter().enumerate() {
                let n_test = ((count as f64 * spec.test_fraction).round() as usize).clamp(1, count - 1);
                for (seen, s) in slides.iter().filter(|s| s.label == y).enumerate() {
                    if seen < n_test {
                        test.push(s.clone());
                    } else {
                        train.push(s.clone());
                    }
                }
            }
            train.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
            test.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
            Ok(ClientData { client_id: c, train, test })
        })
        .collect()
}

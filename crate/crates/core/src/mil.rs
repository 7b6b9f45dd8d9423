//! Bag classifiers: mean pooling and gated attention pooling, each followed
//! by a linear softmax head. Parameters live in one flat vector so the
//! optimizer and the gradient checks can treat them uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, softmax_in_place, Adam, DenseMatrix, RngStream};

/// Floor applied to the target-class probability before either loss.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MilVariant {
    MeanPool,
    GatedAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Gce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    variant: MilVariant,
    input_dim: usize,
    hidden_dim: usize,
    classes: usize,
    params: Vec<f64>,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    w: usize,
    c: usize,
    v: usize,
    u: usize,
    a: usize,
    len: usize,
}

impl MilModel {
    /// Zero biases; weights normal with standard deviation `1/√fan_in`.
    pub fn new(variant: MilVariant, input_dim: usize, hidden_dim: usize, classes: usize, rng: &mut RngStream) -> Self {
        let mut model = Self::zeros(variant, input_dim, hidden_dim, classes);
        let l = model.layout();
        let d = input_dim as f64;
        for i in l.w..l.c {
            model.params[i] = rng.standard_normal() / d.sqrt();
        }
        if variant == MilVariant::GatedAttention {
            for i in l.v..l.a {
                model.params[i] = rng.standard_normal() / d.sqrt();
            }
            for i in l.a..l.len {
                model.params[i] = rng.standard_normal() / (hidden_dim as f64).sqrt();
            }
        }
        model
    }

    pub fn zeros(variant: MilVariant, input_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        let hidden_dim = if variant == MilVariant::MeanPool { 0 } else { hidden_dim };
        let mut m = MilModel { variant, input_dim, hidden_dim, classes, params: Vec::new() };
        m.params = vec![0.0; m.layout().len];
        m
    }

    fn layout(&self) -> Layout {
        let (d, l, k) = (self.input_dim, self.hidden_dim, self.classes);
        let w = 0;
        let c = w + k * d;
        let v = c + k;
        let u = v + l * d;
        let a = u + l * d;
        Layout { w, c, v, u, a, len: a + l }
    }

    pub fn variant(&self) -> MilVariant {
        self.variant
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), actual: p.len() });
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn check_bag(&self, bag: &DenseMatrix) -> Result<()> {
        if bag.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if bag.cols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, actual: bag.cols() });
        }
        Ok(())
    }

    /// Class probabilities and, for the attention variant, the attention
    /// weights over patches.
    pub fn forward(&self, bag: &DenseMatrix) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_bag(bag)?;
        let cache = self.forward_cache(bag);
        Ok((cache.probs, cache.attention))
    }

    pub fn predict(&self, bag: &DenseMatrix) -> Result<usize> {
        let (p, _) = self.forward(bag)?;
        Ok(argmax(&p))
    }

    fn forward_cache(&self, bag: &DenseMatrix) -> ForwardCache {
        let l = self.layout();
        let (d, h) = (self.input_dim, self.hidden_dim);
        let (pooled, attention, hidden) = match self.variant {
            MilVariant::MeanPool => (bag.column_means(), None, None),
            MilVariant::GatedAttention => {
                let v = &self.params[l.v..l.u];
                let u = &self.params[l.u..l.a];
                let wa = &self.params[l.a..l.len];
                let mut tanh_a = vec![0.0; bag.rows() * h];
                let mut sig_g = vec![0.0; bag.rows() * h];
                let mut scores = Vec::with_capacity(bag.rows());
                for (k, x) in bag.row_iter().enumerate() {
                    let ta = &mut tanh_a[k * h..(k + 1) * h];
                    let sg = &mut sig_g[k * h..(k + 1) * h];
                    for j in 0..h {
                        ta[j] = dot(&v[j * d..(j + 1) * d], x).tanh();
                        sg[j] = sigmoid(dot(&u[j * d..(j + 1) * d], x));
                    }
                    scores.push(ta.iter().zip(sg.iter()).zip(wa).map(|((t, s), w)| t * s * w).sum());
                }
                softmax_in_place(&mut scores);
                let mut z = vec![0.0; d];
                for (x, &att) in bag.row_iter().zip(&scores) {
                    axpy(att, x, &mut z);
                }
                (z, Some(scores), Some((tanh_a, sig_g)))
            }
        };
        let w = &self.params[l.w..l.c];
        let c = &self.params[l.c..l.v];
        let mut probs: Vec<f64> = (0..self.classes).map(|i| dot(&w[i * d..(i + 1) * d], &pooled) + c[i]).collect();
        softmax_in_place(&mut probs);
        ForwardCache { pooled, attention, hidden, probs }
    }

    /// Loss value and its gradient with respect to the flat parameters.
    pub fn backward(&self, bag: &DenseMatrix, label: usize, kind: LossKind, q: f64) -> Result<(f64, Vec<f64>)> {
        self.check_bag(bag)?;
        check_label(label, self.classes)?;
        let cache = self.forward_cache(bag);
        let loss = loss_value(&cache.probs, label, kind, q)?;
        let dlogits = logit_grad(&cache.probs, label, kind, q);

        let l = self.layout();
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut grad = vec![0.0; l.len];
        let w = &self.params[l.w..l.c];
        let mut dz = vec![0.0; d];
        for (i, &g) in dlogits.iter().enumerate() {
            axpy(g, &cache.pooled, &mut grad[l.w + i * d..l.w + (i + 1) * d]);
            grad[l.c + i] = g;
            axpy(g, &w[i * d..(i + 1) * d], &mut dz);
        }

        if let (Some(att), Some((tanh_a, sig_g))) = (&cache.attention, &cache.hidden) {
            let v_off = l.v;
            let u_off = l.u;
            let wa = &self.params[l.a..l.len];
            let datt: Vec<f64> = bag.row_iter().map(|x| dot(&dz, x)).collect();
            let mean_datt = dot(att, &datt);
            let (head, tail) = grad.split_at_mut(l.a);
            let dwa = &mut tail[..h];
            for (k, x) in bag.row_iter().enumerate() {
                let ds = att[k] * (datt[k] - mean_datt);
                if ds == 0.0 {
                    continue;
                }
                let ta = &tanh_a[k * h..(k + 1) * h];
                let sg = &sig_g[k * h..(k + 1) * h];
                for j in 0..h {
                    dwa[j] += ds * ta[j] * sg[j];
                    let dh = ds * wa[j];
                    let da = dh * sg[j] * (1.0 - ta[j] * ta[j]);
                    let dg = dh * ta[j] * sg[j] * (1.0 - sg[j]);
                    axpy(da, x, &mut head[v_off + j * d..v_off + (j + 1) * d]);
                    axpy(dg, x, &mut head[u_off + j * d..u_off + (j + 1) * d]);
                }
            }
        }
        Ok((loss, grad))
    }

    /// Flat little-endian checkpoint: magic `MILM`, version, variant tag,
    /// input dim, hidden dim, classes, parameter count, then the parameters
    /// as 64-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(self.variant as u16).to_le_bytes());
        for v in [self.input_dim, self.hidden_dim, self.classes, self.params.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Config(format!("model checkpoint: {reason}"));
        if bytes.len() < 24 {
            return Err(bad(format!("expected at least 24 header bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if u16_at(4) != 1 {
            return Err(bad(format!("unsupported version {}", u16_at(4))));
        }
        let variant = match u16_at(6) {
            0 => MilVariant::MeanPool,
            1 => MilVariant::GatedAttention,
            t => return Err(bad(format!("unknown variant tag {t}"))),
        };
        let mut model = Self::zeros(variant, u32_at(8), u32_at(12), u32_at(16));
        let n = u32_at(20);
        if n != model.params.len() {
            return Err(bad(format!("parameter count {n} inconsistent with dims ({})", model.params.len())));
        }
        let expected = 24 + 8 * n;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        for (p, chunk) in model.params.iter_mut().zip(bytes[24..].chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MILM";

struct ForwardCache {
    pooled: Vec<f64>,
    attention: Option<Vec<f64>>,
    hidden: Option<(Vec<f64>, Vec<f64>)>,
    probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `−log p_y`, with `p_y` floored at [`PROB_FLOOR`].
pub fn loss_ce(probs: &[f64], label: usize) -> Result<f64> {
    check_label(label, probs.len())?;
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// Generalized cross-entropy `(1 − p_y^q)/q`, `q ∈ (0, 1]`.
pub fn loss_gce(probs: &[f64], label: usize, q: f64) -> Result<f64> {
    check_label(label, probs.len())?;
    check_q(q)?;
    Ok((1.0 - probs[label].max(PROB_FLOOR).powf(q)) / q)
}

/// `∂L_GCE/∂p_y = −p_y^(q−1)`.
pub fn gce_prob_grad(p_y: f64, q: f64) -> f64 {
    -p_y.max(PROB_FLOOR).powf(q - 1.0)
}

pub fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("GCE exponent q must lie in (0, 1], got {q}")));
    }
    Ok(())
}

fn loss_value(probs: &[f64], label: usize, kind: LossKind, q: f64) -> Result<f64> {
    match kind {
        LossKind::Ce => loss_ce(probs, label),
        LossKind::Gce => loss_gce(probs, label, q),
    }
}

/// Gradient of the loss with respect to the logits. Zero when the floor is
/// active, since the clamped loss is flat there.
fn logit_grad(probs: &[f64], label: usize, kind: LossKind, q: f64) -> Vec<f64> {
    let p_y = probs[label];
    if p_y < PROB_FLOOR {
        return vec![0.0; probs.len()];
    }
    // dL/dz_j = dL/dp_y · p_y (δ_jy − p_j)
    let scale = match kind {
        LossKind::Ce => 1.0,
        LossKind::Gce => p_y.powf(q),
    };
    probs.iter().enumerate().map(|(j, &p)| scale * (p - if j == label { 1.0 } else { 0.0 })).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// GCE exponent.
    pub q: f64,
    pub real_loss: LossKind,
    pub synthetic_loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, epochs: 50, q: 0.7, real_loss: LossKind::Ce, synthetic_loss: LossKind::Gce }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A bag with its label and how it enters the objective.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub bag: &'a DenseMatrix,
    pub label: usize,
    pub loss: LossKind,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the bags visited this epoch.
    pub loss: f64,
    /// Accuracy on the real training bags after the epoch.
    pub train_accuracy: f64,
    /// Whether non-real (synthetic) bags were part of this epoch.
    pub synthetic_active: bool,
}

/// Per-bag Adam updates; the optimizer state persists across epochs.
pub struct Trainer {
    pub model: MilModel,
    adam: Adam,
    q: f64,
}

impl Trainer {
    pub fn new(model: MilModel, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(model.params.len(), cfg.learning_rate);
        Trainer { model, adam, q: cfg.q }
    }

    /// One pass over `items` in a seeded shuffled order. Returns the mean
    /// weighted loss.
    pub fn epoch(&mut self, items: &[TrainItem<'_>], rng: &mut RngStream) -> Result<f64> {
        let mut order: Vec<usize> = (0..items.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for i in order {
            let it = items[i];
            let (loss, mut grad) = self.model.backward(it.bag, it.label, it.loss, self.q)?;
            if it.weight != 1.0 {
                grad.iter_mut().for_each(|g| *g *= it.weight);
            }
            self.adam.step(&mut self.model.params, &grad);
            total += it.weight * loss;
        }
        Ok(total / items.len().max(1) as f64)
    }

    pub fn accuracy(&self, bags: &[(&DenseMatrix, usize)]) -> Result<f64> {
        let mut correct = 0;
        for (bag, label) in bags {
            if self.model.predict(bag)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / bags.len().max(1) as f64)
    }
}

/// Trains on labeled bags with the real-data loss for `cfg.epochs` epochs.
pub fn train(
    model: MilModel,
    bags: &[(&DenseMatrix, usize)],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(MilModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(Error::TooFewSlides("empty training set".into()));
    }
    let items: Vec<TrainItem<'_>> =
        bags.iter().map(|&(bag, label)| TrainItem { bag, label, loss: cfg.real_loss, weight: 1.0 }).collect();
    let mut trainer = Trainer::new(model, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = trainer.epoch(&items, rng)?;
        let train_accuracy = trainer.accuracy(bags)?;
        history.push(EpochRecord { epoch, loss, train_accuracy, synthetic_active: false });
    }
    Ok((trainer.model, history))
}

//! Single-round federation: every client distills its training slides once,
//! the server hands each client the union of everybody else's synthetic
//! slides, and clients train locally with those slides phased in by a
//! curriculum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::cohort::ClientData;
use crate::distill::{distill_client, DistillConfig, Payload, RealSlide, SyntheticSlide};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, weighted_average, EvalResult};
use crate::mil::{check_q, EpochRecord, LossKind, MilModel, MilVariant, TrainConfig, TrainItem, Trainer};
use crate::numeric::{spawn_stream, DenseMatrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MilSpec {
    pub variant: MilVariant,
    pub hidden_dim: usize,
}

impl Default for MilSpec {
    fn default() -> Self {
        MilSpec { variant: MilVariant::GatedAttention, hidden_dim: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub train: Vec<RealSlide>,
    pub test: Vec<RealSlide>,
    pub mil: MilSpec,
    pub synthetic: Vec<SyntheticSlide>,
}

impl ClientState {
    pub fn new(data: ClientData, mil: MilSpec) -> Self {
        ClientState { client_id: data.client_id, train: data.train, test: data.test, mil, synthetic: Vec::new() }
    }

    pub fn dim(&self) -> Option<usize> {
        self.train.first().map(|s| s.features.cols())
    }

    pub fn payload(&self) -> Payload {
        Payload::of(&self.synthetic)
    }
}

#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub origin: usize,
    pub slide: Arc<SyntheticSlide>,
}

/// Synthetic slides received by one client; never its own.
#[derive(Clone, Debug)]
pub struct GlobalPool {
    pub client_id: usize,
    pub slides: Vec<PoolEntry>,
}

impl GlobalPool {
    pub fn empty(client_id: usize) -> Self {
        GlobalPool { client_id, slides: Vec::new() }
    }

    pub fn passes_exclusion(&self) -> bool {
        self.slides.iter().all(|e| e.origin != self.client_id)
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Redistribution {
    pub pools: BTreeMap<usize, GlobalPool>,
    pub warnings: Vec<String>,
}

/// Builds every client's pool as the union of all other clients' synthetic
/// slides. Clients without synthetic slides produce a warning only.
pub fn aggregate_and_redistribute(clients: &[ClientState]) -> Redistribution {
    let shared: Vec<(usize, Vec<Arc<SyntheticSlide>>)> = clients
        .iter()
        .map(|c| (c.client_id, c.synthetic.iter().cloned().map(Arc::new).collect()))
        .collect();
    let warnings = clients
        .iter()
        .filter(|c| c.synthetic.is_empty())
        .map(|c| format!("client {} uploaded no synthetic slides", c.client_id))
        .collect();
    let pools = clients
        .iter()
        .map(|c| {
            let slides = shared
                .iter()
                .filter(|(origin, _)| *origin != c.client_id)
                .flat_map(|(origin, s)| s.iter().map(|slide| PoolEntry { origin: *origin, slide: Arc::clone(slide) }))
                .collect();
            (c.client_id, GlobalPool { client_id: c.client_id, slides })
        })
        .collect();
    Redistribution { pools, warnings }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trigger {
    /// Synthetic slides join from epoch `t0` on.
    Fixed,
    /// Synthetic slides join once training accuracy has failed to improve by
    /// `min_delta` for `patience` consecutive epochs.
    Plateau { patience: usize, min_delta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub t0: usize,
    pub q: f64,
    pub trigger: Trigger,
    /// Loss weight of each pool slide; real slides weigh 1.
    pub synthetic_weight: f64,
    /// Reweight synthetic slides inversely to their class frequency in the
    /// pool.
    pub class_reweight: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { t0: 30, q: 0.7, trigger: Trigger::Fixed, synthetic_weight: 1.0, class_reweight: false }
    }
}

impl CurriculumConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        check_q(self.q)?;
        if self.t0 > epochs {
            return Err(Error::Config(format!("t0 = {} exceeds epochs = {epochs}", self.t0)));
        }
        if !(self.synthetic_weight >= 0.0) {
            return Err(Error::Config("synthetic_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// How pool slides enter local training.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    RealOnly,
    /// Cross-entropy on pool slides from the first epoch, equal weight.
    NaiveConcat,
    Curriculum(CurriculumConfig),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MilModel,
    pub history: Vec<EpochRecord>,
    /// First epoch that included pool slides.
    pub activation_epoch: Option<usize>,
}

fn labeled(slides: &[RealSlide]) -> Vec<(&DenseMatrix, usize)> {
    slides.iter().map(|s| (&s.features, s.label)).collect()
}

fn class_count(client: &ClientState, pool: &GlobalPool) -> usize {
    client
        .train
        .iter()
        .chain(&client.test)
        .map(|s| s.label)
        .chain(pool.slides.iter().map(|e| e.slide.label))
        .max()
        .map_or(0, |m| m + 1)
}

/// Local training of one client against its pool. `observer` sees the model
/// after every epoch.
pub fn train_client_observed(
    client: &ClientState,
    pool: &GlobalPool,
    classes: usize,
    cfg: &TrainConfig,
    schedule: &Schedule,
    rng: &mut RngStream,
    observer: &mut dyn FnMut(usize, &MilModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if client.train.is_empty() {
        return Err(Error::TooFewSlides(format!("client {} has no training slides", client.client_id)));
    }
    let d = client.dim().unwrap_or(0);
    let classes = classes.max(class_count(client, pool));
    let model = MilModel::new(client.mil.variant, d, client.mil.hidden_dim, classes, rng);
    let mut trainer = Trainer::new(model, cfg);

    let real = labeled(&client.train);
    let mut items: Vec<TrainItem<'_>> =
        real.iter().map(|&(bag, label)| TrainItem { bag, label, loss: cfg.real_loss, weight: 1.0 }).collect();
    let synthetic: Vec<TrainItem<'_>> = match schedule {
        Schedule::RealOnly => Vec::new(),
        Schedule::NaiveConcat => pool
            .slides
            .iter()
            .map(|e| TrainItem { bag: &e.slide.features, label: e.slide.label, loss: LossKind::Ce, weight: 1.0 })
            .collect(),
        Schedule::Curriculum(cc) => {
            cc.validate(cfg.epochs)?;
            let base = cc.synthetic_weight;
            let mut per_class = vec![0usize; classes];
            pool.slides.iter().for_each(|e| per_class[e.slide.label] += 1);
            let present = per_class.iter().filter(|&&n| n > 0).count().max(1) as f64;
            pool.slides
                .iter()
                .map(|e| {
                    let w = if cc.class_reweight {
                        base * pool.len() as f64 / (present * per_class[e.slide.label] as f64)
                    } else {
                        base
                    };
                    TrainItem { bag: &e.slide.features, label: e.slide.label, loss: cfg.synthetic_loss, weight: w }
                })
                .collect()
        }
    };
    for it in &synthetic {
        if it.label >= classes {
            return Err(Error::LabelOutOfRange { label: it.label, classes });
        }
    }
    let trainer_q = match schedule {
        Schedule::Curriculum(cc) => cc.q,
        _ => cfg.q,
    };
    if trainer_q != cfg.q {
        trainer = Trainer::new(trainer.model, &TrainConfig { q: trainer_q, ..cfg.clone() });
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut activation_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut plateau_fired = false;
    for epoch in 0..cfg.epochs {
        let active = !synthetic.is_empty()
            && match schedule {
                Schedule::RealOnly => false,
                Schedule::NaiveConcat => true,
                Schedule::Curriculum(cc) => match cc.trigger {
                    Trigger::Fixed => epoch >= cc.t0,
                    Trigger::Plateau { .. } => plateau_fired,
                },
            };
        if active && activation_epoch.is_none() {
            activation_epoch = Some(epoch);
            items.extend_from_slice(&synthetic);
        }
        let loss = trainer.epoch(&items, rng)?;
        let train_accuracy = trainer.accuracy(&real)?;
        history.push(EpochRecord { epoch, loss, train_accuracy, synthetic_active: active });
        observer(epoch, &trainer.model);

        if let Schedule::Curriculum(CurriculumConfig { trigger: Trigger::Plateau { patience, min_delta }, .. }) = schedule {
            if train_accuracy > best_acc + min_delta {
                best_acc = train_accuracy;
                stale = 0;
            } else {
                stale += 1;
                if stale >= *patience {
                    plateau_fired = true;
                }
            }
        }
    }
    Ok(TrainOutcome { model: trainer.model, history, activation_epoch })
}

/// Real slides with cross-entropy; pool slides with GCE once the curriculum
/// activates.
pub fn curriculum_train(
    client: &ClientState,
    pool: &GlobalPool,
    classes: usize,
    cfg: &TrainConfig,
    cc: &CurriculumConfig,
    rng: &mut RngStream,
) -> Result<TrainOutcome> {
    train_client_observed(client, pool, classes, cfg, &Schedule::Curriculum(cc.clone()), rng, &mut |_, _| {})
}

/// Pool slides concatenated to the real data with cross-entropy from epoch 0.
pub fn naive_concat_train(
    client: &ClientState,
    pool: &GlobalPool,
    classes: usize,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainOutcome> {
    train_client_observed(client, pool, classes, cfg, &Schedule::NaiveConcat, rng, &mut |_, _| {})
}

pub fn local_train(client: &ClientState, classes: usize, cfg: &TrainConfig, rng: &mut RngStream) -> Result<TrainOutcome> {
    let pool = GlobalPool::empty(client.client_id);
    train_client_observed(client, &pool, classes, cfg, &Schedule::RealOnly, rng, &mut |_, _| {})
}

/// Trains a fresh model on the client's own synthetic slides only (no real
/// data), for judging how much of the real signal survives distillation.
pub fn synthetic_only_train(
    client: &ClientState,
    classes: usize,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainOutcome> {
    let proxy = ClientState {
        train: client
            .synthetic
            .iter()
            .map(|s| RealSlide { slide_id: s.slide_id.clone(), label: s.label, features: s.features.clone() })
            .collect(),
        ..client.clone()
    };
    local_train(&proxy, classes, cfg, rng)
}

pub fn evaluate_model(model: &MilModel, slides: &[RealSlide], classes: usize) -> Result<EvalResult> {
    let probs: Vec<Vec<f64>> = slides.iter().map(|s| model.forward(&s.features).map(|p| p.0)).collect::<Result<_>>()?;
    let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
    evaluate(&probs, &labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Arm {
    LocalOnly,
    NaiveConcat,
    FedHd,
    /// Own synthetic slides only.
    SyntheticOnly,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::LocalOnly => "local-only",
            Arm::NaiveConcat => "naive-concat",
            Arm::FedHd => "fedhd",
            Arm::SyntheticOnly => "synthetic-only",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local-only" => Ok(Arm::LocalOnly),
            "naive-concat" => Ok(Arm::NaiveConcat),
            "fedhd" => Ok(Arm::FedHd),
            "synthetic-only" => Ok(Arm::SyntheticOnly),
            other => Err(Error::Config(format!("unknown arm {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub classes: usize,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    /// One entry per client, or a single entry shared by all.
    pub mil: Vec<MilSpec>,
    /// Curriculum-based federation for the `fedhd` arm; when off, the arm
    /// concatenates pool slides naively.
    pub cbf: bool,
    pub arms: Vec<Arm>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            classes: 2,
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            curriculum: CurriculumConfig::default(),
            mil: vec![MilSpec::default()],
            cbf: true,
            arms: vec![Arm::LocalOnly, Arm::NaiveConcat, Arm::FedHd],
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    fn mil_for(&self, index: usize) -> Result<MilSpec> {
        match self.mil.len() {
            0 => Ok(MilSpec::default()),
            1 => Ok(self.mil[0]),
            n if index < n => Ok(self.mil[index]),
            n => Err(Error::Config(format!("{n} MIL specs for client index {index}"))),
        }
    }

    pub fn fedhd_schedule(&self) -> Schedule {
        if self.cbf {
            Schedule::Curriculum(self.curriculum.clone())
        } else {
            Schedule::NaiveConcat
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub client_id: usize,
    pub arm: Arm,
    pub seed: u64,
    pub accuracy: f64,
    pub mcc: f64,
    pub auc: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub accuracy: f64,
    pub mcc: f64,
    /// Plain mean of per-client accuracies.
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FederationReport {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<ArmSummary>,
    pub payloads: BTreeMap<usize, Payload>,
    pub pool_sizes: BTreeMap<usize, usize>,
    pub warnings: Vec<String>,
    /// Number of aggregation rounds performed.
    pub rounds: usize,
}

impl FederationReport {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

/// Distillation seed for client `index` under run seed `seed`.
pub fn distill_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    spawn_stream(seed, 0xD157_0000 + index as u64).next_u64()
}

/// Stream used for a client's local training; shared by every arm so the
/// arms differ only in what data they see.
pub fn training_stream(seed: u64, index: usize) -> RngStream {
    spawn_stream(seed, 0x7EA1_0000 + index as u64)
}

/// Runs distillation on every client.
pub fn distill_all(clients: &mut [ClientState], cfg: &DistillConfig, seed: u64) -> Result<()> {
    clients.par_iter_mut().enumerate().try_for_each(|(i, c)| {
        let out = distill_client(&c.train, cfg, distill_seed(seed, i)).map_err(|e| e.in_client(c.client_id))?;
        c.synthetic = out.into_iter().map(|o| o.synthetic).collect();
        Ok(())
    })
}

/// Full single-round protocol for one seed.
pub fn run_federation(data: Vec<ClientData>, cfg: &ProtocolConfig) -> Result<FederationReport> {
    if data.is_empty() {
        return Err(Error::TooFewSlides("no clients".into()));
    }
    cfg.train.validate()?;
    cfg.curriculum.validate(cfg.train.epochs)?;
    let mut clients: Vec<ClientState> =
        data.into_iter().enumerate().map(|(i, d)| Ok(ClientState::new(d, cfg.mil_for(i)?))).collect::<Result<_>>()?;
    let dim = clients[0].dim();
    if clients.iter().any(|c| c.dim() != dim || c.test.iter().any(|s| Some(s.features.cols()) != dim)) {
        return Err(Error::Config("all clients must share one feature dimension".into()));
    }

    let needs_synthetic = cfg.arms.iter().any(|a| matches!(a, Arm::NaiveConcat | Arm::FedHd | Arm::SyntheticOnly));
    if needs_synthetic {
        distill_all(&mut clients, &cfg.distill, cfg.seed)?;
    }
    let redistribution = aggregate_and_redistribute(&clients);

    let per_client: Vec<Vec<MetricRow>> = clients
        .par_iter()
        .enumerate()
        .map(|(i, client)| {
            let pool = &redistribution.pools[&client.client_id];
            cfg.arms
                .iter()
                .map(|&arm| {
                    let mut rng = training_stream(cfg.seed, i);
                    let outcome = match arm {
                        Arm::LocalOnly => local_train(client, cfg.classes, &cfg.train, &mut rng),
                        Arm::NaiveConcat => naive_concat_train(client, pool, cfg.classes, &cfg.train, &mut rng),
                        Arm::FedHd => train_client_observed(
                            client,
                            pool,
                            cfg.classes,
                            &cfg.train,
                            &cfg.fedhd_schedule(),
                            &mut rng,
                            &mut |_, _| {},
                        ),
                        Arm::SyntheticOnly => synthetic_only_train(client, cfg.classes, &cfg.train, &mut rng),
                    }
                    .map_err(|e| e.in_client(client.client_id))?;
                    let eval = evaluate_model(&outcome.model, &client.test, cfg.classes)?;
                    Ok(MetricRow {
                        client_id: client.client_id,
                        arm,
                        seed: cfg.seed,
                        accuracy: eval.accuracy,
                        mcc: eval.mcc,
                        auc: eval.auc,
                        support: eval.support,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricRow> = per_client.into_iter().flatten().collect();
    let summaries = cfg.arms.iter().map(|&arm| summarize(&rows, arm)).collect();

    Ok(FederationReport {
        seed: cfg.seed,
        summaries,
        payloads: clients.iter().map(|c| (c.client_id, c.payload())).collect(),
        pool_sizes: redistribution.pools.iter().map(|(&id, p)| (id, p.len())).collect(),
        warnings: redistribution.warnings,
        rounds: 1,
        rows,
    })
}

/// Support-weighted accuracy and MCC of one arm.
pub fn summarize(rows: &[MetricRow], arm: Arm) -> ArmSummary {
    let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.arm == arm).collect();
    let w: Vec<f64> = sel.iter().map(|r| r.support as f64).collect();
    let acc: Vec<f64> = sel.iter().map(|r| r.accuracy).collect();
    let mcc: Vec<f64> = sel.iter().map(|r| r.mcc).collect();
    ArmSummary {
        arm,
        accuracy: weighted_average(&acc, &w),
        mcc: weighted_average(&mcc, &w),
        mean_accuracy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
    }
}

//! The five subcommands. Every command computes its full result in memory
//! and writes each output file once, so a failed run never leaves a
//! partially written CSV behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedhd_core::cohort::{
    generate_cohort, read_manifest, write_bag, write_manifest, ClientData, FeatureBag, ManifestEntry, Split,
    FLAG_SYNTHETIC,
};
use fedhd_core::distill::{distill_client, DistillOutput, Payload, SyntheticSlide};
use fedhd_core::federation::{distill_seed, run_federation, Arm, FederationReport, ProtocolConfig};
use fedhd_core::mil::check_q;
use fedhd_core::privacy::mia_attack;
use rayon::prelude::*;

use crate::config::Resolved;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Options shared by every subcommand after the config is resolved.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: Resolved,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub force: bool,
}

impl Context {
    /// First seed; single-seed commands use only this one.
    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    fn protocol(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig { seed, ..self.cfg.protocol.clone() }
    }

    fn prepare(&self, outputs: &[&str]) -> Result<()> {
        if !self.force {
            if let Some(p) = outputs.iter().map(|o| self.out.join(o)).find(|p| p.exists()) {
                return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    /// The cohort from `manifest`, or generated in memory from the config.
    fn cohort(&self, manifest: Option<&Path>, seed: u64) -> Result<Vec<ClientData>> {
        match manifest {
            Some(m) => load_cohort(m),
            None => Ok(generate_cohort(&self.cfg.cohort.build(self.cfg.spec_seed)?, seed)?),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn csv_bytes<R: IntoIterator<Item = Vec<String>>>(header: &[&str], rows: R) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))
}

/// Groups manifest rows into clients ordered by id; synthetic rows are
/// ignored.
pub fn load_cohort(manifest: &Path) -> Result<Vec<ClientData>> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut clients: BTreeMap<usize, ClientData> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if e.split == Split::Synthetic {
            continue;
        }
        let bag = e.load(base, i + 1)?;
        if bag.label != e.label {
            return Err(CliError::Core(fedhd_core::Error::Manifest(format!(
                "row {} (slide {}): manifest label {} but bag label {}",
                i + 1,
                e.slide_id,
                e.label,
                bag.label
            ))));
        }
        let slide = fedhd_core::distill::RealSlide { slide_id: e.slide_id.clone(), label: e.label, features: bag.features };
        let c = clients.entry(e.client_id).or_insert_with(|| ClientData { client_id: e.client_id, train: vec![], test: vec![] });
        match e.split {
            Split::Train => c.train.push(slide),
            _ => c.test.push(slide),
        }
    }
    if clients.is_empty() {
        return Err(CliError::Core(fedhd_core::Error::Manifest("no real slides".into())));
    }
    Ok(clients.into_values().collect())
}

fn real_entry(client: usize, split: Split, s: &fedhd_core::distill::RealSlide) -> ManifestEntry {
    ManifestEntry {
        slide_id: s.slide_id.clone(),
        client_id: client,
        label: s.label,
        split,
        source_slide_id: String::new(),
        path: format!("bags/{}.bag", s.slide_id),
    }
}

pub fn gen_cohort(ctx: &Context) -> Result<()> {
    ctx.prepare(&["manifest.csv"])?;
    let clients = ctx.cohort(None, ctx.seed())?;
    let bags = ctx.out.join("bags");
    fs::create_dir_all(&bags).map_err(|e| CliError::io(&bags, e))?;
    let mut entries = Vec::new();
    for c in &clients {
        for (split, slides) in [(Split::Train, &c.train), (Split::Test, &c.test)] {
            for s in slides {
                entries.push(real_entry(c.client_id, split, s));
            }
        }
    }
    entries.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let by_id: BTreeMap<&str, &fedhd_core::distill::RealSlide> =
        clients.iter().flat_map(|c| c.train.iter().chain(&c.test)).map(|s| (s.slide_id.as_str(), s)).collect();
    entries.par_iter().try_for_each(|e| {
        let s = by_id[e.slide_id.as_str()];
        write_bag(ctx.out.join(&e.path), &FeatureBag { features: s.features.clone(), label: s.label, flags: 0 })
    })?;
    write_manifest(ctx.out.join("manifest.csv"), &entries)?;
    println!("wrote {} slides for {} clients to {}", entries.len(), clients.len(), ctx.out.display());
    Ok(())
}

fn synthetic_entry(client: usize, s: &SyntheticSlide) -> ManifestEntry {
    ManifestEntry {
        slide_id: s.slide_id.clone(),
        client_id: client,
        label: s.label,
        split: Split::Synthetic,
        source_slide_id: s.source_slide_id.clone(),
        path: format!("synthetic/{}.bag", s.slide_id),
    }
}

pub fn distill(ctx: &Context, manifest: Option<&Path>) -> Result<()> {
    ctx.prepare(&["synthetic_manifest.csv", "loss_traces.csv"])?;
    let seed = ctx.seed();
    let clients = ctx.cohort(manifest, seed)?;
    let dcfg = &ctx.cfg.protocol.distill;
    // same seeds as the federated run, so the slides written here are the
    // ones a `federate` run with this seed shares
    let mut outputs: Vec<Vec<DistillOutput>> = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| distill_client(&c.train, dcfg, distill_seed(seed, i)).map_err(CliError::Core))
        .collect::<Result<_>>()?;
    if !dcfg.o2o {
        // pooled slides are named per class; one manifest needs client-unique ids
        for (c, outs) in clients.iter().zip(&mut outputs) {
            for o in outs {
                let s = &mut o.synthetic;
                s.slide_id = format!("c{}-{}", c.client_id, s.slide_id);
                s.source_slide_id = format!("c{}-{}", c.client_id, s.source_slide_id);
            }
        }
    }

    let dir = ctx.out.join("synthetic");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut entries = Vec::new();
    let mut traces = Vec::new();
    for (c, outs) in clients.iter().zip(&outputs) {
        for o in outs {
            let s = &o.synthetic;
            let e = synthetic_entry(c.client_id, s);
            write_bag(ctx.out.join(&e.path), &FeatureBag { features: s.features.clone(), label: s.label, flags: FLAG_SYNTHETIC })?;
            entries.push(e);
            let mut best = o.initial_loss;
            traces.push(vec![c.client_id.to_string(), s.slide_id.clone(), "0".into(), fmt(o.initial_loss), fmt(best)]);
            for (it, &loss) in o.loss_trace.iter().enumerate() {
                best = best.min(loss);
                traces.push(vec![c.client_id.to_string(), s.slide_id.clone(), (it + 1).to_string(), fmt(loss), fmt(best)]);
            }
        }
        let synthetic: Vec<SyntheticSlide> = outs.iter().map(|o| o.synthetic.clone()).collect();
        let p = Payload::of(&synthetic);
        println!(
            "client {}: {} slides x {} patches x {} dims = {} floats ({:.3} MiB at f32)",
            c.client_id,
            p.slides,
            p.patches_per_slide,
            p.dim,
            p.floats(),
            p.mebibytes_f32()
        );
    }
    let traces = csv_bytes(&["client", "slide_id", "iteration", "loss", "best_loss"], traces)?;
    write_manifest(ctx.out.join("synthetic_manifest.csv"), &entries)?;
    write_atomic(&ctx.out.join("loss_traces.csv"), &traces)?;
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_seeds(ctx: &Context, manifest: Option<&Path>, protocol: impl Fn(u64) -> ProtocolConfig + Sync) -> Result<Vec<FederationReport>> {
    ctx.seeds
        .par_iter()
        .map(|&seed| Ok(run_federation(ctx.cohort(manifest, seed)?, &protocol(seed))?))
        .collect()
}

pub fn federate(ctx: &Context, manifest: Option<&Path>) -> Result<()> {
    ctx.prepare(&["metrics.csv", "summary.csv"])?;
    let reports = run_seeds(ctx, manifest, |s| ctx.protocol(s))?;
    let rows = reports.iter().flat_map(|r| &r.rows).map(|m| {
        vec![
            m.seed.to_string(),
            m.client_id.to_string(),
            m.arm.to_string(),
            fmt(m.accuracy),
            fmt(m.mcc),
            m.auc.map_or(String::new(), fmt),
            m.support.to_string(),
        ]
    });
    let metrics = csv_bytes(&["seed", "client", "arm", "accuracy", "mcc", "auc", "support"], rows.collect::<Vec<_>>())?;

    let mut summary = Vec::new();
    for &arm in &ctx.cfg.protocol.arms {
        let acc: Vec<f64> = reports.iter().filter_map(|r| r.summary(arm)).map(|s| s.accuracy).collect();
        let mcc: Vec<f64> = reports.iter().filter_map(|r| r.summary(arm)).map(|s| s.mcc).collect();
        let (am, asd) = mean_std(&acc);
        let (mm, msd) = mean_std(&mcc);
        println!("{arm:<14} accuracy {am:.4} ± {asd:.4}  mcc {mm:.4} ± {msd:.4}  ({} seeds)", acc.len());
        summary.push(vec![arm.to_string(), acc.len().to_string(), fmt(am), fmt(asd), fmt(mm), fmt(msd)]);
    }
    let summary = csv_bytes(&["arm", "seeds", "accuracy_mean", "accuracy_std", "mcc_mean", "mcc_std"], summary)?;
    for w in reports.iter().flat_map(|r| &r.warnings) {
        eprintln!("warning: {w}");
    }
    write_atomic(&ctx.out.join("metrics.csv"), &metrics)?;
    write_atomic(&ctx.out.join("summary.csv"), &summary)
}

pub fn mia(ctx: &Context, manifest: Option<&Path>) -> Result<()> {
    ctx.prepare(&["mia.csv"])?;
    let seed = ctx.seed();
    let clients = ctx.cohort(manifest, seed)?;
    let client = clients
        .iter()
        .find(|c| c.client_id == ctx.cfg.mia_client)
        .ok_or_else(|| CliError::Config(format!("no client {} in the cohort", ctx.cfg.mia_client)))?;
    let slides: Vec<_> = client.train.iter().chain(&client.test).cloned().collect();
    let report = mia_attack(&slides, &ctx.cfg.protocol.distill, &ctx.cfg.mia, seed)?;
    let mut rows: Vec<Vec<String>> = report.per_seed.iter().map(|(s, a)| vec![s.to_string(), fmt(*a)]).collect();
    rows.push(vec!["max".into(), fmt(report.max_auc)]);
    rows.push(vec!["mean".into(), fmt(report.mean_auc)]);
    let bytes = csv_bytes(&["seed", "auc"], rows)?;
    println!(
        "release {}: max AUC {:.4}, mean AUC {:.4} over {} partitions",
        ctx.cfg.mia.release,
        report.max_auc,
        report.mean_auc,
        report.per_seed.len()
    );
    write_atomic(&ctx.out.join("mia.csv"), &bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    /// Synthetic patches per slide.
    #[value(name = "T")]
    T,
    /// Mixture components.
    #[value(name = "M")]
    M,
    /// Curriculum activation epoch.
    #[value(name = "t0")]
    T0,
    /// GCE exponent.
    #[value(name = "q")]
    Q,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::T => "T",
            SweepParam::M => "M",
            SweepParam::T0 => "t0",
            SweepParam::Q => "q",
        }
    }

    /// `base` with the parameter set to `value`, validated.
    pub fn apply(self, base: &ProtocolConfig, value: &str) -> Result<ProtocolConfig> {
        let bad = |why: String| CliError::Config(format!("{} = {value:?}: {why}", self.name()));
        let int = || value.parse::<usize>().map_err(|e| bad(e.to_string()));
        let mut p = base.clone();
        match self {
            SweepParam::T => p.distill.synthetic_patches = int()?,
            SweepParam::M => p.distill.components = int()?,
            SweepParam::T0 => p.curriculum.t0 = int()?,
            SweepParam::Q => {
                let q = value.parse::<f64>().map_err(|e| bad(e.to_string()))?;
                check_q(q).map_err(|e| bad(e.to_string()))?;
                p.curriculum.q = q;
                p.train.q = q;
            }
        }
        p.distill.validate().map_err(|e| bad(e.to_string()))?;
        p.curriculum.validate(p.train.epochs).map_err(|e| bad(e.to_string()))?;
        Ok(p)
    }
}

pub fn sweep(ctx: &Context, manifest: Option<&Path>, param: SweepParam, values: &[String]) -> Result<()> {
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let base = ProtocolConfig { arms: vec![Arm::FedHd], ..ctx.cfg.protocol.clone() };
    let cells: Vec<(String, ProtocolConfig)> =
        values.iter().map(|v| Ok((v.clone(), param.apply(&base, v)?))).collect::<Result<_>>()?;
    ctx.prepare(&["sweep.csv"])?;
    let mut rows = Vec::new();
    for (value, protocol) in &cells {
        let reports = run_seeds(ctx, manifest, |seed| ProtocolConfig { seed, ..protocol.clone() })?;
        let acc: Vec<f64> = reports.iter().filter_map(|r| r.summary(Arm::FedHd)).map(|s| s.accuracy).collect();
        let (m, sd) = mean_std(&acc);
        println!("{} = {value:<8} fedhd accuracy {m:.4} ± {sd:.4}", param.name());
        for r in reports.iter().flat_map(|r| &r.rows) {
            rows.push(vec![
                param.name().to_string(),
                value.clone(),
                r.seed.to_string(),
                r.client_id.to_string(),
                fmt(r.accuracy),
                fmt(r.mcc),
            ]);
        }
    }
    let bytes = csv_bytes(&["param", "value", "seed", "client", "accuracy", "mcc"], rows)?;
    write_atomic(&ctx.out.join("sweep.csv"), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_values_validated() {
        let base = fedhd_core::presets::desk_protocol(0);
        assert_eq!(SweepParam::M.apply(&base, "1").unwrap().distill.components, 1);
        assert_eq!(SweepParam::Q.apply(&base, "0.5").unwrap().train.q, 0.5);
        assert!(SweepParam::T.apply(&base, "7").is_err());
        assert!(SweepParam::T0.apply(&base, "31").is_err());
        assert!(SweepParam::Q.apply(&base, "0").is_err());
        assert!(SweepParam::M.apply(&base, "four").is_err());
    }
}

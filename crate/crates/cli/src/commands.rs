//! One function per subcommand. Each reads the run configuration, performs
//! its step and writes its outputs atomically.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use pairpose::body::{body_json, forward_kinematics, write_obj, KinematicTree, PARAM_DIM};
use pairpose::config::RunConfig;
use pairpose::contact::{threshold_contacts, ContactInput, ContactPredictor};
use pairpose::data::{
    build_dataset, load_dataset, save_dataset, validate_dataset, Dataset, DatasetManifest, InteractionLabel,
    InteractionSample, Split,
};
use pairpose::denoiser::Denoiser;
use pairpose::io::{atomic_write, write_json};
use pairpose::metrics::{
    contact_score, evaluate, non_collision_score, top1_accuracy, EvalSample, FeatureClassifier, RegionStats,
};
use pairpose::pipeline::{
    check_finite_losses, classifier_data, contact_detection, contact_examples, eval_samples, region_stats,
    train_classifier_from, train_contact_from, train_denoiser_from, training_triples, Generator,
};
use pairpose::selftest::run_selftest;

use crate::artifacts::{
    file_hash, load_model, read_json, save_model, ExportedBody, ExportedSample, GeneratedSample, Layout, ModelKind,
    ModelMeta, SampleMetrics, SampleSet,
};
use crate::error::{CliError, CliResult};

/// Resolved configuration plus where artifacts live.
pub struct Context {
    pub cfg: RunConfig,
    pub tree: KinematicTree,
    pub layout: Layout,
}

impl Context {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        let tree = cfg.tree()?;
        let layout = Layout { root: cfg.out_dir() };
        Ok(Self { cfg, tree, layout })
    }

    fn data(&self, dir: Option<&Path>) -> CliResult<(Dataset, DatasetManifest)> {
        let dir = dir.map_or_else(|| self.layout.data(), Path::to_path_buf);
        if !dir.join(pairpose::data::MANIFEST_FILE).exists() {
            return Err(CliError::validation(format!("no dataset at {}; run gen-data first", dir.display())));
        }
        Ok(load_dataset(&dir, self.tree.num_regions())?)
    }

    fn meta(&self, kind: ModelKind, manifest: &DatasetManifest, step: usize, summary: Value) -> CliResult<ModelMeta> {
        let (network, training, diffusion) = match kind {
            ModelKind::Denoiser => (
                serde_json::to_value(self.cfg.networks.denoiser)?,
                serde_json::to_value(self.cfg.training.denoiser)?,
                self.schedule_value()?,
            ),
            ModelKind::Contact => {
                (serde_json::to_value(self.cfg.networks.contact)?, serde_json::to_value(self.cfg.training.contact)?, Value::Null)
            }
            ModelKind::Classifier => (
                serde_json::to_value(self.cfg.networks.classifier)?,
                serde_json::to_value(self.cfg.training.classifier)?,
                Value::Null,
            ),
        };
        Ok(ModelMeta {
            kind: kind.name().into(),
            config_hash: self.cfg.hash(),
            network,
            diffusion,
            training,
            dataset_manifest: manifest.hash(),
            step,
            summary,
        })
    }

    /// Schedule fields that must match between training and sampling; the
    /// sampling stride may differ.
    fn schedule_value(&self) -> CliResult<Value> {
        let d = self.cfg.diffusion;
        Ok(json!({ "steps": d.steps, "beta_start": d.beta_start, "beta_end": d.beta_end }))
    }

    fn network_value(&self, kind: ModelKind) -> CliResult<Value> {
        Ok(match kind {
            ModelKind::Denoiser => serde_json::to_value(self.cfg.networks.denoiser)?,
            ModelKind::Contact => serde_json::to_value(self.cfg.networks.contact)?,
            ModelKind::Classifier => serde_json::to_value(self.cfg.networks.classifier)?,
        })
    }

    fn load(&self, kind: ModelKind, path: Option<&Path>) -> CliResult<(pairpose::autodiff::ParameterStore, PathBuf)> {
        let path = path.map_or_else(|| self.layout.model(kind), Path::to_path_buf);
        let diffusion = match kind {
            ModelKind::Denoiser => Some(self.schedule_value()?),
            _ => None,
        };
        let (store, _) = load_model(&path, kind, &self.network_value(kind)?, diffusion.as_ref())?;
        Ok((store, path))
    }
}

/// Emits the machine-readable result line on stdout.
fn report(value: Value) {
    println!("{value}");
}

pub struct GenDataArgs {
    pub labels: Option<Vec<InteractionLabel>>,
    pub count: Option<usize>,
    pub test_count: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn gen_data(ctx: &Context, a: GenDataArgs) -> CliResult<()> {
    let mut data = ctx.cfg.data.clone();
    if let Some(l) = a.labels {
        data.labels = l;
    }
    if let Some(c) = a.count {
        data.count = c;
        data.test_count = data.test_count.min(c / 2);
    }
    if let Some(t) = a.test_count {
        data.test_count = t;
    }
    if let Some(s) = a.seed {
        data.seed = s;
    }
    data.validate()?;
    let dir = a.out.unwrap_or_else(|| ctx.layout.data());
    log::info!("event=gen-data count={} seed={} out={}", data.count, data.seed, dir.display());
    let ds = build_dataset(&ctx.tree, &data)?;
    let manifest = save_dataset(&dir, &ds, &data)?;
    report(json!({
        "command": "gen-data",
        "out": dir,
        "rows": manifest.count,
        "train": manifest.train_count,
        "test": manifest.test_count,
        "labels": manifest.label_histogram,
        "data_hash": manifest.config_hash,
        "manifest_hash": manifest.hash(),
    }));
    Ok(())
}

pub fn validate_data(ctx: &Context, input: &Path) -> CliResult<()> {
    if input.is_dir() {
        let r = validate_dataset(input, &ctx.tree)?;
        report(json!({
            "command": "validate-data",
            "kind": "dataset",
            "rows": r.count,
            "train": r.train_count,
            "test": r.test_count,
            "contact_pairs": r.contact_pairs,
            "failures": r.failures.len(),
        }));
        return match r.failures.first() {
            None => Ok(()),
            Some(first) => Err(CliError::validation(format!("{} of {} rows failed; first: {first}", r.failures.len(), r.count))),
        };
    }
    let value: Value = read_json(input)?;
    if value.get("samples").is_some() {
        let set: SampleSet = serde_json::from_value(value)?;
        for s in &set.samples {
            check_params(&s.partner, s.index)?;
            check_params(&s.interactive, s.index)?;
        }
        report(json!({ "command": "validate-data", "kind": "samples", "samples": set.samples.len() }));
        return Ok(());
    }
    let e: ExportedSample = serde_json::from_value(value)?;
    for body in [&e.partner, &e.interactive] {
        check_params(&body.params, e.index)?;
        let posed = forward_kinematics(&ctx.tree, &body.params)?;
        if body.mesh != body_json(&posed) {
            return Err(CliError::validation(format!("sample {}: stored mesh differs from the posed parameters", e.index)));
        }
    }
    let n = ctx.tree.num_regions();
    if let Some(&(i, j)) = e.contact_pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(CliError::validation(format!("sample {}: contact pair ({i}, {j}) outside {n} regions", e.index)));
    }
    report(json!({ "command": "validate-data", "kind": "export", "index": e.index, "contact_pairs": e.contact_pairs.len() }));
    Ok(())
}

fn check_params(x: &[f64], index: u64) -> CliResult<()> {
    if x.len() != PARAM_DIM {
        return Err(CliError::validation(format!("sample {index}: {} parameters, expected {PARAM_DIM}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CliError::numerical(format!("sample {index}: non-finite parameter")));
    }
    Ok(())
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn train_rows(ds: &Dataset) -> Vec<&InteractionSample> {
    ds.split(Split::Train).collect()
}

pub fn train_diffusion(ctx: &mut Context, a: TrainArgs) -> CliResult<()> {
    let t = &mut ctx.cfg.training.denoiser;
    t.steps = a.steps.unwrap_or(t.steps);
    t.seed = a.seed.unwrap_or(t.seed);
    let (ds, manifest) = ctx.data(a.data.as_deref())?;
    let out = a.out.unwrap_or_else(|| ctx.layout.model(ModelKind::Denoiser));
    let triples = training_triples(train_rows(&ds));
    log::info!("event=train-diffusion examples={} steps={}", triples.len(), ctx.cfg.training.denoiser.steps);
    let ctx_ref = &*ctx;
    let (_, store, rep) = train_denoiser_from(&ctx_ref.cfg, &triples, |step, store| {
        let meta = ctx_ref.meta(ModelKind::Denoiser, &manifest, step, json!({ "partial": true })).map_err(|e| {
            pairpose::diffusion::DiffusionError::Config(e.reason)
        })?;
        save_model(&out, store, &meta).map_err(|e| pairpose::diffusion::DiffusionError::Config(e.reason))?;
        log::info!("event=checkpoint step={step}");
        Ok(())
    })?;
    check_finite_losses("denoiser", &rep.losses)?;
    let summary = json!({
        "final_loss": rep.losses.last(),
        "epoch_losses": rep.epoch_losses,
        "condition_draws": rep.draws,
        "partner_hidden": rep.partner_hidden,
        "both_hidden": rep.both_hidden,
    });
    save_model(&out, &store, &ctx.meta(ModelKind::Denoiser, &manifest, rep.losses.len(), summary.clone())?)?;
    report(json!({ "command": "train-diffusion", "out": out, "config_hash": ctx.cfg.hash(), "final_loss": rep.losses.last() }));
    Ok(())
}

pub fn train_contact(ctx: &mut Context, a: TrainArgs) -> CliResult<()> {
    let t = &mut ctx.cfg.training.contact;
    t.steps = a.steps.unwrap_or(t.steps);
    t.seed = a.seed.unwrap_or(t.seed);
    let (ds, manifest) = ctx.data(a.data.as_deref())?;
    let out = a.out.unwrap_or_else(|| ctx.layout.model(ModelKind::Contact));
    let train = contact_examples(&ctx.tree, train_rows(&ds))?;
    let test = contact_examples(&ctx.tree, ds.split(Split::Test))?;
    log::info!("event=train-contact examples={} steps={}", train.len(), ctx.cfg.training.contact.steps);
    let (net, store, rep) = train_contact_from(&ctx.cfg, &ctx.tree, &train)?;
    check_finite_losses("contact", &rep.losses)?;
    let det = contact_detection(&net, &store, &test, ctx.cfg.networks.contact.tau)?;
    let summary = json!({
        "final_loss": rep.losses.last(),
        "epoch_losses": rep.epoch_losses,
        "test_f1": det.f1(),
        "test_precision": det.precision(),
        "test_recall": det.recall(),
    });
    save_model(&out, &store, &ctx.meta(ModelKind::Contact, &manifest, rep.losses.len(), summary)?)?;
    report(json!({ "command": "train-contact", "out": out, "config_hash": ctx.cfg.hash(), "test_f1": det.f1() }));
    Ok(())
}

/// Accuracy of `pred` against a seeded permutation of `labels`.
pub fn shuffled_accuracy(pred: &[usize], labels: &[usize], seed: u64) -> f64 {
    let mut shuffled = labels.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    100.0 * pred.iter().zip(&shuffled).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

pub fn train_classifier(ctx: &mut Context, a: TrainArgs) -> CliResult<()> {
    let t = &mut ctx.cfg.training.classifier;
    t.steps = a.steps.unwrap_or(t.steps);
    t.seed = a.seed.unwrap_or(t.seed);
    let (ds, manifest) = ctx.data(a.data.as_deref())?;
    let out = a.out.unwrap_or_else(|| ctx.layout.model(ModelKind::Classifier));
    let train = classifier_data(train_rows(&ds));
    log::info!("event=train-classifier examples={} steps={}", train.len(), ctx.cfg.training.classifier.steps);
    let (net, store, rep) = train_classifier_from(&ctx.cfg, &train)?;
    check_finite_losses("classifier", &rep.losses)?;
    let test = eval_samples(ds.split(Split::Test));
    let (top1, shuffled) = if test.is_empty() {
        (None, None)
    } else {
        let pred = net.predict(&store, &test.iter().map(EvalSample::input).collect::<Vec<_>>())?;
        let labels: Vec<usize> = test.iter().map(|s| s.label.code()).collect();
        (Some(top1_accuracy(&net, &store, &test)?), Some(shuffled_accuracy(&pred, &labels, ctx.cfg.training.classifier.seed)))
    };
    let summary = json!({
        "final_loss": rep.losses.last(),
        "epoch_losses": rep.epoch_losses,
        "test_top1": top1,
        "shuffled_top1": shuffled,
    });
    save_model(&out, &store, &ctx.meta(ModelKind::Classifier, &manifest, rep.losses.len(), summary)?)?;
    report(json!({ "command": "train-classifier", "out": out, "config_hash": ctx.cfg.hash(), "test_top1": top1 }));
    Ok(())
}

pub struct SampleArgs {
    pub label: Option<InteractionLabel>,
    pub count: usize,
    pub seed: u64,
    pub lambda: Option<[f64; 4]>,
    pub unguided: bool,
    pub tau: Option<f64>,
    pub batch: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn sample(ctx: &mut Context, a: SampleArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    if let Some(l) = a.lambda {
        ctx.cfg.guidance.lambda = l;
    }
    if let Some(t) = a.tau {
        ctx.cfg.networks.contact.tau = t;
    }
    ctx.cfg.validate()?;
    let (ds, _) = ctx.data(a.data.as_deref())?;
    let rows: Vec<usize> = ds
        .splits
        .iter()
        .enumerate()
        .filter(|&(r, s)| *s == Split::Test && a.label.is_none_or(|l| ds.samples[r].label == l))
        .map(|(r, _)| r)
        .collect();
    if rows.is_empty() {
        return Err(CliError::validation(format!(
            "the test split has no partner for label {}",
            a.label.map_or("any".into(), |l| l.to_string())
        )));
    }
    let picks: Vec<usize> = (0..a.count).map(|i| rows[i % rows.len()]).collect();
    let partners: Vec<Vec<f64>> = picks.iter().map(|&r| ds.samples[r].partner.clone()).collect();
    let labels: Vec<InteractionLabel> = picks.iter().map(|&r| a.label.unwrap_or(ds.samples[r].label)).collect();
    let codes: Vec<usize> = labels.iter().map(|l| l.code()).collect();

    let (dstore, dpath) = ctx.load(ModelKind::Denoiser, None)?;
    let denoiser = Denoiser::new(ctx.cfg.networks.denoiser);
    denoiser.check_store(&dstore)?;
    let contact = if a.unguided {
        None
    } else {
        let (store, path) = ctx.load(ModelKind::Contact, None)?;
        let net = ContactPredictor::new(ctx.cfg.networks.contact, ctx.tree.num_regions());
        net.check_store(&store)?;
        Some((net, store, path))
    };
    log::info!("event=sample count={} seed={} guided={} stride={}", a.count, a.seed, contact.is_some(), ctx.cfg.diffusion.stride);
    let gen = Generator {
        cfg: &ctx.cfg,
        tree: &ctx.tree,
        denoiser: &denoiser,
        denoiser_store: &dstore,
        contact: contact.as_ref().map(|(n, s, _)| (n, s)),
    };
    let out = gen.generate(&partners, &codes, 0, a.seed, a.batch)?;
    let samples = out
        .samples
        .into_iter()
        .zip(out.guidance_evals)
        .enumerate()
        .map(|(i, (x, evals))| GeneratedSample {
            index: i as u64,
            label: labels[i],
            source_row: picks[i],
            partner: partners[i].clone(),
            interactive: x,
            guidance_evals: evals,
        })
        .collect();
    let set = SampleSet {
        config_hash: ctx.cfg.hash(),
        denoiser: file_hash(&dpath)?,
        contact: contact.as_ref().map(|(_, _, p)| file_hash(p)).transpose()?,
        seed: a.seed,
        guided: contact.is_some(),
        lambda: ctx.cfg.guidance.lambda,
        inner_iters: ctx.cfg.guidance.inner_iters,
        tau: ctx.cfg.networks.contact.tau,
        stride: ctx.cfg.diffusion.stride,
        samples,
    };
    let path = a.out.unwrap_or_else(|| ctx.layout.samples());
    write_json(&path, &set)?;
    report(json!({ "command": "sample", "out": path, "count": a.count, "guided": set.guided, "config_hash": set.config_hash }));
    Ok(())
}

fn load_samples(ctx: &Context, path: Option<&Path>) -> CliResult<(SampleSet, PathBuf)> {
    let path = path.map_or_else(|| ctx.layout.samples(), Path::to_path_buf);
    let set: SampleSet = read_json(&path)?;
    if set.samples.is_empty() {
        return Err(CliError::validation(format!("{} holds no samples", path.display())));
    }
    for s in &set.samples {
        check_params(&s.partner, s.index)?;
        check_params(&s.interactive, s.index)?;
    }
    Ok((set, path))
}

fn stats(ctx: &Context, ds: &Dataset) -> CliResult<RegionStats> {
    Ok(region_stats(&ctx.cfg, &ctx.tree, ds.split(Split::Train))?)
}

pub fn evaluate_cmd(ctx: &Context, samples: Option<&Path>, data: Option<&Path>, out: Option<PathBuf>) -> CliResult<()> {
    let (set, spath) = load_samples(ctx, samples)?;
    let (ds, manifest) = ctx.data(data)?;
    let (store, _) = ctx.load(ModelKind::Classifier, None)?;
    let net = FeatureClassifier::new(ctx.cfg.networks.classifier);
    net.check_store(&store)?;
    let generated: Vec<EvalSample> = set
        .samples
        .iter()
        .map(|s| EvalSample { partner: s.partner.clone(), interactive: s.interactive.clone(), label: s.label })
        .collect();
    let reference = eval_samples(ds.split(Split::Test));
    let r = evaluate(&ctx.tree, &net, &store, &stats(ctx, &ds)?, &generated, &reference)?;
    let dir = out.unwrap_or_else(|| ctx.layout.eval());
    let table = r.to_table();
    write_json(
        &dir.join("report.json"),
        &json!({
            "config_hash": ctx.cfg.hash(),
            "samples": file_hash(&spath)?,
            "dataset_manifest": manifest.hash(),
            "guided": set.guided,
            "rows": r.rows,
        }),
    )?;
    atomic_write(&dir.join("report.txt"), format!("# config {}\n{table}", ctx.cfg.hash()).as_bytes())?;
    eprint!("{table}");
    let o = r.overall();
    report(json!({
        "command": "evaluate",
        "out": dir,
        "fhid": o.fhid,
        "top1": o.top1,
        "contact": o.contact,
        "non_collision": o.non_collision,
    }));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Obj,
    Json,
}

pub fn export(ctx: &Context, samples: Option<&Path>, data: Option<&Path>, format: ExportFormat, out: Option<PathBuf>) -> CliResult<()> {
    let (set, _) = load_samples(ctx, samples)?;
    let (ds, _) = ctx.data(data)?;
    let stats = stats(ctx, &ds)?;
    let (store, _) = ctx.load(ModelKind::Contact, None)?;
    let net = ContactPredictor::new(ctx.cfg.networks.contact, ctx.tree.num_regions());
    net.check_store(&store)?;
    let dir = out.unwrap_or_else(|| ctx.layout.export());
    let hash = ctx.cfg.hash();
    let mut written = Vec::with_capacity(set.samples.len());
    for s in &set.samples {
        let h = forward_kinematics(&ctx.tree, &s.interactive)?;
        let p = forward_kinematics(&ctx.tree, &s.partner)?;
        let map = &net.predict(&store, &[ContactInput::from_bodies(&h, &p, s.label.code())?])?[0];
        let pairs = threshold_contacts(map, ctx.cfg.networks.contact.tau)?;
        let metrics = SampleMetrics {
            contact_score: contact_score(&h, &p, &stats.potential(s.label)?)?,
            non_collision: non_collision_score(&h, &p),
        };
        let path = match format {
            ExportFormat::Obj => {
                let mut header = vec![
                    format!("config {hash}"),
                    format!("sample {} label {}", s.index, s.label),
                    format!("contact_score {} non_collision {}", metrics.contact_score, metrics.non_collision),
                ];
                header.extend(pairs.iter().map(|(i, j)| format!("contact {i} {j}")));
                let path = dir.join(format!("sample_{:05}.obj", s.index));
                atomic_write(&path, write_obj(&[("partner", &p), ("interactive", &h)], &header).as_bytes())?;
                path
            }
            ExportFormat::Json => {
                let e = ExportedSample {
                    config_hash: hash.clone(),
                    index: s.index,
                    label: s.label,
                    partner: ExportedBody { params: s.partner.clone(), mesh: body_json(&p) },
                    interactive: ExportedBody { params: s.interactive.clone(), mesh: body_json(&h) },
                    contact_pairs: pairs,
                    metrics,
                };
                let path = dir.join(format!("sample_{:05}.json", s.index));
                write_json(&path, &e)?;
                path
            }
        };
        written.push(path);
    }
    report(json!({ "command": "export", "out": dir, "files": written.len() }));
    Ok(())
}

pub fn selftest() -> CliResult<()> {
    let checks = run_selftest();
    for c in &checks {
        log::info!("event=check name={} passed={} {}", c.name, c.passed, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    report(json!({ "command": "selftest", "checks": checks.len(), "failed": failed }));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!("self-test failed: {}", failed.join(", "))))
    }
}

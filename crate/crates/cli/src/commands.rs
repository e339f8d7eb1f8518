//! Command implementations. Each one reads a [`RunConfig`], writes only
//! deterministic artefacts (no timestamps, no absolute paths) and returns
//! the directory it wrote to.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use ductms::dualdomain::{DualDomain, SolverMode};
use ductms::io::{read_array, write_array, write_pgm, Units};
use ductms::physics::{to_hu, DoseLevel, Projector};
use ductms::training::dataset::Split;
use ductms::training::{
    curve_csv, evaluate_fbp, load_checkpoint, make_dataset, prepare_samples, read_manifest, read_split, write_dataset,
    Manifest, Metrics, Prepped, Sample, Scored, Trainer, Variant,
};
use ductms::CoreError;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tensor::ParamStore;

use crate::config::RunConfig;
use crate::report;

pub const TRAIN_SUMMARY: &str = "train.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CoreError::io(path, e).into())
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e).into())
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

/// Solver for `variant`, with the stage count and mode overridden if given.
pub fn build_solver(cfg: &RunConfig, variant: Variant, stages: Option<usize>, mode: SolverMode) -> Result<DualDomain> {
    solver_on(Arc::new(Projector::new(&cfg.geometry()?)?), cfg, variant, stages, mode)
}

fn solver_on(
    proj: Arc<Projector>,
    cfg: &RunConfig,
    variant: Variant,
    stages: Option<usize>,
    mode: SolverMode,
) -> Result<DualDomain> {
    let mut net = cfg.model.network.clone();
    let mut solver = cfg.solver.clone();
    variant.configure(&mut net, &mut solver);
    if let Some(t) = stages {
        solver.stages = t;
    }
    solver.mode = mode;
    Ok(DualDomain::new(proj, net, cfg.model.prompt.clone(), solver)?)
}

// ---------------------------------------------------------------- simulate

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let g = cfg.geometry()?;
    let proj = Projector::new(&g)?;
    let ds = make_dataset(&proj, &cfg.dataset_config()?)?;
    mkdir(out)?;
    let m = write_dataset(out, &ds, &g, cfg.io.pgm_window)?;
    log::info!("wrote {} samples to {} (hash {})", m.samples.len(), out.display(), &m.hash[..12]);
    Ok(m)
}

fn load_data(dir: &Path) -> Result<(Manifest, Vec<Sample>, Vec<Sample>)> {
    let m = read_manifest(dir).with_context(|| format!("no dataset at {} (run `ductms simulate` first)", dir.display()))?;
    let train = read_split(dir, &m, Split::Train)?;
    let test = read_split(dir, &m, Split::Test)?;
    Ok((m, train, test))
}

// ------------------------------------------------------------------- train

/// One trained model within a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    /// `None` for models that serve every dose.
    pub dose: Option<DoseLevel>,
    pub checkpoint: String,
    pub bytes: usize,
    pub params: usize,
    pub epochs: usize,
    pub val: Option<Metrics>,
    pub fbp_val: Option<Metrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub stages: usize,
    pub dataset_hash: String,
    pub models: Vec<ModelSummary>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub variant: Option<Variant>,
    pub stages: Option<usize>,
    pub epochs: Option<usize>,
    /// Stop after this many completed epochs (resumable later).
    pub until: Option<usize>,
    pub resume: bool,
}

fn file_names(dose: Option<DoseLevel>) -> [String; 3] {
    match dose {
        None => ["model.ckpt".into(), "state.ckpt".into(), "curve.csv".into()],
        Some(d) => [format!("model_{}.ckpt", d), format!("state_{}.ckpt", d), format!("curve_{}.csv", d)],
    }
}

fn mean_metrics(scores: &[Scored]) -> Option<Metrics> {
    (!scores.is_empty()).then(|| Metrics::mean(&scores.iter().map(|s| s.metrics).collect::<Vec<_>>()))
}

fn train_one(
    cfg: &RunConfig,
    opts: &TrainOptions,
    solver: DualDomain,
    dose: Option<DoseLevel>,
    train: &[Prepped],
    val: &[Prepped],
    out: &Path,
) -> Result<ModelSummary> {
    let variant = opts.variant.unwrap_or(cfg.variant());
    let mut tcfg = cfg.train_config();
    if let Some(e) = opts.epochs {
        tcfg.epochs = e;
    }
    let mut trainer = Trainer::new(solver, tcfg, cfg.loss.clone())?;
    let [model_name, state_name, curve_name] = file_names(dose);
    let (model_path, state_path, curve_path) = (out.join(&model_name), out.join(&state_name), out.join(&curve_name));
    if opts.resume {
        if model_path.exists() && state_path.exists() {
            let model = ParamStore::load(&model_path)?;
            let state = ParamStore::load(&state_path)?;
            trainer.resume(model, &state)?;
            log::info!("resuming {} at epoch {}", model_name, trainer.epoch);
        } else {
            log::warn!("nothing to resume in {}; starting fresh", out.display());
        }
    }
    let mut io_err = None;
    trainer.fit_until(opts.until.unwrap_or(usize::MAX), train, val, |t, row| {
        log::info!("{} epoch {}: loss {:.4e}, val PSNR {:.3} dB", variant.label(), row.epoch, row.train_loss, row.val_psnr);
        let r = t
            .store
            .save(&model_path)
            .and_then(|_| t.state().save(&state_path))
            .map_err(anyhow::Error::from)
            .and_then(|_| write(&curve_path, curve_csv(&t.curve)));
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    // Covers zero-epoch runs and resumes that were already complete.
    trainer.store.save(&model_path)?;
    trainer.state().save(&state_path)?;
    write(&curve_path, curve_csv(&trainer.curve))?;
    let val_scores = trainer.evaluate(val)?;
    Ok(ModelSummary {
        dose,
        checkpoint: model_name,
        bytes: trainer.store.to_bytes().len(),
        params: trainer.num_params(),
        epochs: trainer.epoch,
        val: mean_metrics(&val_scores),
        fbp_val: mean_metrics(&evaluate_fbp(val)?),
    })
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let variant = opts.variant.unwrap_or(cfg.variant());
    let (m, train, test) = load_data(data)?;
    check_geometry(cfg, &m)?;
    mkdir(out)?;
    let solver = build_solver(cfg, variant, opts.stages, SolverMode::Learned)?;
    let stages = solver.cfg.stages;
    let opts = &TrainOptions {
        variant: Some(variant),
        ..opts.clone()
    };
    let mut models = Vec::new();
    if variant == Variant::PerDose {
        for d in m.doses.iter().map(|d| d.label) {
            let tr: Vec<Sample> = train.iter().filter(|s| s.dose == d).cloned().collect();
            let te: Vec<Sample> = test.iter().filter(|s| s.dose == d).cloned().collect();
            if tr.is_empty() {
                bail!(CoreError::Config(format!("no training samples at dose '{}'", d)));
            }
            let (tr, te) = (prepare_samples(&solver, &tr)?, prepare_samples(&solver, &te)?);
            let fresh = solver_on(solver.projector().clone(), cfg, variant, opts.stages, SolverMode::Learned)?;
            models.push(train_one(cfg, opts, fresh, Some(d), &tr, &te, out)?);
        }
    } else {
        let (tr, te) = (prepare_samples(&solver, &train)?, prepare_samples(&solver, &test)?);
        models.push(train_one(cfg, opts, solver, None, &tr, &te, out)?);
    }
    let summary = TrainSummary {
        variant,
        stages,
        dataset_hash: m.hash.clone(),
        models,
    };
    write(&out.join(TRAIN_SUMMARY), pretty(&summary))?;
    Ok(summary)
}

fn check_geometry(cfg: &RunConfig, m: &Manifest) -> Result<()> {
    if cfg.geometry()? != m.geometry {
        bail!(CoreError::Config(format!(
            "dataset geometry ({}² image, {}×{} sinogram) differs from the configured preset '{}'",
            m.geometry.image_size, m.geometry.n_views, m.geometry.n_detectors, cfg.geometry.preset
        )));
    }
    Ok(())
}

// ------------------------------------------------------------- reconstruct

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconMode {
    Learned,
    Classical,
    Fbp,
}

impl ReconMode {
    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "learned" => Ok(ReconMode::Learned),
            "classical" => Ok(ReconMode::Classical),
            "fbp" => Ok(ReconMode::Fbp),
            _ => Err(CoreError::Usage(format!("unknown mode '{}' (expected learned, classical or fbp)", s))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ReconMode::Learned => "learned",
            ReconMode::Classical => "classical",
            ReconMode::Fbp => "fbp",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReconOptions {
    pub checkpoint: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub stages: Option<usize>,
    pub dose: Option<DoseLevel>,
    pub split: Option<Split>,
}

/// Where learned-mode parameters come from.
enum Weights {
    None,
    Shared(ParamStore),
    PerDose(Vec<(DoseLevel, ParamStore)>),
}

impl Weights {
    fn for_dose(&self, d: DoseLevel) -> Result<Option<&ParamStore>> {
        match self {
            Weights::None => Ok(None),
            Weights::Shared(s) => Ok(Some(s)),
            Weights::PerDose(v) => match v.iter().find(|(x, _)| *x == d) {
                Some((_, s)) => Ok(Some(s)),
                None => bail!(CoreError::Usage(format!("no per-dose checkpoint for dose '{}'", d))),
            },
        }
    }
}

fn load_weights(cfg: &RunConfig, mode: ReconMode, opts: &ReconOptions) -> Result<(DualDomain, Weights)> {
    let solver_mode = match mode {
        ReconMode::Classical => SolverMode::Classical,
        _ => SolverMode::Learned,
    };
    let stages = if mode == ReconMode::Fbp { Some(0) } else { opts.stages };
    if mode != ReconMode::Learned {
        let variant = opts.variant.unwrap_or(cfg.variant());
        return Ok((build_solver(cfg, variant, stages, solver_mode)?, Weights::None));
    }
    let Some(ck) = &opts.checkpoint else {
        bail!(CoreError::Usage("learned mode requires --checkpoint (a model file or a training output directory)".into()));
    };
    if !ck.exists() {
        bail!(CoreError::Usage(format!("checkpoint {} does not exist", ck.display())));
    }
    if ck.is_file() {
        let variant = opts.variant.unwrap_or(cfg.variant());
        let solver = build_solver(cfg, variant, stages, solver_mode)?;
        let store = load_checkpoint(&solver, ck)?;
        return Ok((solver, Weights::Shared(store)));
    }
    let path = ck.join(TRAIN_SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let summary: TrainSummary =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: {}", path.display(), e)))?;
    if let Some(v) = opts.variant {
        if v != summary.variant {
            bail!(CoreError::Usage(format!(
                "--variant {} conflicts with the checkpoint's variant {}",
                v.label(),
                summary.variant.label()
            )));
        }
    }
    let solver = build_solver(cfg, summary.variant, stages.or(Some(summary.stages)), solver_mode)?;
    let mut per_dose = Vec::new();
    for m in &summary.models {
        let store = load_checkpoint(&solver, &ck.join(&m.checkpoint))?;
        match m.dose {
            None => return Ok((solver, Weights::Shared(store))),
            Some(d) => per_dose.push((d, store)),
        }
    }
    if per_dose.is_empty() {
        bail!(CoreError::Format(format!("{} lists no models", path.display())));
    }
    Ok((solver, Weights::PerDose(per_dose)))
}

#[derive(Serialize)]
struct ReportFile<'a> {
    id: &'a str,
    dose: DoseLevel,
    mode: &'static str,
    stages: usize,
    objectives: &'a [f64],
}

fn write_recon(
    cfg: &RunConfig,
    solver: &DualDomain,
    weights: &Weights,
    mode: ReconMode,
    id: &str,
    y: &tensor::Tensor,
    dose: DoseLevel,
    dir: &Path,
) -> Result<()> {
    let r = solver.run(weights.for_dose(dose)?, y, &[dose])?;
    let x = r.x.reshape(solver.geometry().image_shape().to_vec())?;
    x.ensure_finite("reconstruction")?;
    mkdir(dir)?;
    write_array(dir.join("x"), &x, Units::Attenuation)?;
    write_pgm(dir.join("x.pgm"), &to_hu(&x), cfg.io.pgm_window[0], cfg.io.pgm_window[1])?;
    let stem = ReportFile {
        id,
        dose,
        mode: mode.label(),
        stages: r.stages,
        objectives: &r.objectives,
    };
    write(&dir.join("report.json"), pretty(&stem))?;
    if mode == ReconMode::Classical {
        let mut csv = String::from("stage,objective\n");
        for (k, o) in r.objectives.iter().enumerate() {
            csv.push_str(&format!("{},{:.17e}\n", k, o));
        }
        write(&dir.join("objectives.csv"), csv)?;
    }
    Ok(())
}

fn strip_array_ext(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f64") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

/// Reconstructs a dataset split (`input` holds a manifest) or a single
/// sinogram array (`input` is an array stem).
pub fn reconstruct(cfg: &RunConfig, input: &Path, out: &Path, mode: ReconMode, opts: &ReconOptions) -> Result<usize> {
    let (solver, weights) = load_weights(cfg, mode, opts)?;
    mkdir(out)?;
    if input.is_dir() {
        let m = read_manifest(input)?;
        check_geometry(cfg, &m)?;
        let split = opts.split.unwrap_or(Split::Test);
        let entries: Vec<_> = m.samples.iter().filter(|e| e.split == split).collect();
        for e in &entries {
            let s = ductms::training::manifest::read_sample(input, e, &m.geometry)?;
            write_recon(cfg, &solver, &weights, mode, &e.id, &s.y, e.dose, &out.join(e.rel_dir()))?;
        }
        log::info!("reconstructed {} samples ({})", entries.len(), mode.label());
        return Ok(entries.len());
    }
    let stem = strip_array_ext(input);
    let (y, units) = read_array(&stem)?;
    if units != Units::LineIntegral {
        bail!(CoreError::Usage(format!("{} holds {:?} data, expected a line-integral sinogram", stem.display(), units)));
    }
    let dose = match (opts.dose, cfg.doses()?.as_slice()) {
        (Some(d), _) => d,
        (None, [d]) => *d,
        _ => bail!(CoreError::Usage("--dose is required when the config lists several dose levels".into())),
    };
    let id = stem.file_name().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    write_recon(cfg, &solver, &weights, mode, &id, &y, dose, out)?;
    Ok(1)
}

// ---------------------------------------------------------------- evaluate

/// Scores `<pred>/test/<id>/x` against the reference test split in `gt`.
pub fn score(pred: &Path, gt: &Path) -> Result<(Manifest, Vec<Scored>)> {
    let m = read_manifest(gt)?;
    let mut scores = Vec::new();
    for s in read_split(gt, &m, Split::Test)? {
        let stem = pred.join("test").join(&s.id).join("x");
        let (x, units) = read_array(&stem).with_context(|| format!("missing prediction for {}", s.id))?;
        if units != Units::Attenuation || x.shape() != s.x.shape() {
            bail!(CoreError::Format(format!(
                "{}: expected a {:?} attenuation image, found {:?} {:?}",
                stem.display(),
                s.x.shape(),
                units,
                x.shape()
            )));
        }
        scores.push(Scored {
            metrics: Metrics::evaluate(&x, &s.x, Some(&s.non_metal))?,
            id: s.id,
            dose: s.dose,
            bin: s.bin,
        });
    }
    Ok((m, scores))
}

pub fn write_tables(out: &Path, m: &Manifest, scores: &[Scored]) -> Result<Vec<report::Row>> {
    mkdir(out)?;
    let doses: Vec<DoseLevel> = m.doses.iter().map(|d| d.label).collect();
    let rows = report::table(scores, &doses);
    write(&out.join("table.csv"), report::table_csv(&rows))?;
    write(&out.join("per_sample.csv"), report::per_sample_csv(scores))?;
    write(&out.join("table.json"), pretty(&report::table_json(&rows, scores)))?;
    Ok(rows)
}

pub fn evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<Vec<report::Row>> {
    let (m, scores) = score(pred, gt)?;
    let rows = write_tables(out, &m, &scores)?;
    println!("{}", report::render(&rows));
    Ok(rows)
}

// ------------------------------------------------------------------ ablate

/// Trains each variant on the same data and tabulates the validation scores.
pub fn ablate(cfg: &RunConfig, data: &Path, out: &Path, variants: &[Variant], epochs: Option<usize>) -> Result<()> {
    let m = read_manifest(data)?;
    let mut summary = Vec::new();
    let mut csv = String::from("variant,");
    csv.push_str(report::TABLE_HEADER);
    csv.push('\n');
    let mut add = |label: &str, rows: &[report::Row], scores: &[Scored]| {
        for line in report::table_csv(rows).lines().skip(1) {
            csv.push_str(label);
            csv.push(',');
            csv.push_str(line);
            csv.push('\n');
        }
        summary.push(json!({ "variant": label, "table": report::table_json(rows, scores) }));
    };
    let fbp_dir = out.join("fbp");
    reconstruct(cfg, data, &fbp_dir.join("recon"), ReconMode::Fbp, &ReconOptions::default())?;
    let (_, fbp) = score(&fbp_dir.join("recon"), data)?;
    add("fbp", &write_tables(&fbp_dir, &m, &fbp)?, &fbp);
    for &v in variants {
        let dir = out.join(v.label());
        let opts = TrainOptions {
            variant: Some(v),
            epochs,
            ..Default::default()
        };
        train(cfg, data, &dir, &opts)?;
        let ropts = ReconOptions {
            checkpoint: Some(dir.clone()),
            ..Default::default()
        };
        reconstruct(cfg, data, &dir.join("recon"), ReconMode::Learned, &ropts)?;
        let (_, scores) = score(&dir.join("recon"), data)?;
        add(v.label(), &write_tables(&dir, &m, &scores)?, &scores);
    }
    write(&out.join("ablation.csv"), &csv)?;
    write(&out.join("ablation.json"), pretty(&summary))?;
    print!("{}", csv);
    Ok(())
}

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use noduleclip_core::calibrate::{BetaCalibrator, NoduleRisk};
use noduleclip_core::data_ingest::{load_manifest, resolve_uri, CohortManifest, NoduleRecord};
use noduleclip_core::evaluate::metrics_report;
use noduleclip_core::infer::{
    calibrated_ensemble, encode_query, infer_many, read_patient_predictions, write_nodule_predictions,
    write_patient_predictions, write_zero_shot, zero_shot_nodule, ZeroShotQuery,
};
use noduleclip_core::model::{BaseSource, ModelBundle, ModelConfig, Preset};
use noduleclip_core::nifti::read_nifti;
use noduleclip_core::preprocess::{load_view_stack, save_view_stack, ChannelStats, ViewStack};
use noduleclip_core::semantics::{render_report, AnnotationFile, SemanticFeatureSet};
use noduleclip_core::synth::{generate, write_cohort, SynthConfig};
use noduleclip_core::train::{run_cv, Checkpoint, Dataset, Sample};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{require, RunConfig};
use crate::failure::{Classify, Failure, Outcome};
use crate::run_dir::{RunDir, CONFIG_SNAPSHOT, MANIFEST};

/// Records handled per forward pass in `infer` and `zeroshot`.
const CHUNK: usize = 16;

#[derive(Args, Debug, Default)]
pub struct OverwriteFlag {
    /// Replace an existing output. Accepts `--overwrite` or `--overwrite=false`.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub overwrite: Option<bool>,
}

impl OverwriteFlag {
    fn get(&self) -> bool {
        self.overwrite.unwrap_or(false)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub prevalence: Option<f64>,
    #[command(flatten)]
    pub overwrite: OverwriteFlag,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[command(flatten)]
    pub overwrite: OverwriteFlag,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub overwrite: OverwriteFlag,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub train_run: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub stacks: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[command(flatten)]
    pub overwrite: OverwriteFlag,
}

#[derive(Args, Debug)]
pub struct ZeroShotArgs {
    #[arg(long)]
    pub train_run: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub stacks: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub unit_temperature: bool,
    #[command(flatten)]
    pub overwrite: OverwriteFlag,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub bootstrap_draws: Option<usize>,
    #[command(flatten)]
    pub overwrite: OverwriteFlag,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "toy" => Ok(Preset::Toy),
        "pretrained-compatible" => Ok(Preset::PretrainedCompatible),
        _ => Err(format!("unknown preset `{s}`; expected `toy` or `pretrained-compatible`")),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

/// Validated manifest plus the directory its relative URIs resolve against.
struct Cohort {
    manifest: CohortManifest,
    root: PathBuf,
}

fn open_cohort(path: &Path) -> Outcome<Cohort> {
    if !path.is_file() {
        return Err(Failure::Validation(anyhow!("manifest {} not found", path.display())));
    }
    let manifest = load_manifest(path)
        .with_context(|| format!("invalid manifest {}", path.display()))
        .invalid()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Cohort { manifest, root })
}

fn file_stem(record: &NoduleRecord) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect()
    };
    format!("{}__{}", clean(&record.patient_id), clean(&record.nodule_id))
}

fn stack_path(dir: &Path, record: &NoduleRecord) -> PathBuf {
    dir.join("stacks").join(format!("{}.views", file_stem(record)))
}

fn report_path(dir: &Path, record: &NoduleRecord) -> PathBuf {
    dir.join("reports").join(format!("{}.txt", file_stem(record)))
}

fn compute_stack(cohort: &Cohort, record: &NoduleRecord, image_size: usize, stats: &ChannelStats) -> anyhow::Result<ViewStack> {
    let path = resolve_uri(&cohort.root, &record.volume_uri);
    let volume = read_nifti(&path)?;
    Ok(Sample::new(record, &volume, SemanticFeatureSet::new())?.eval_stack(image_size, stats)?)
}

fn cached_stack(path: &Path, image_size: usize, stats: &ChannelStats) -> Option<ViewStack> {
    match load_view_stack(path, stats) {
        Ok(Some(s)) if s.image_size() == image_size => Some(s),
        _ => None,
    }
}

/// Model inputs for `records`, from the cache when valid and from the
/// volumes otherwise.
fn stacks_for(
    cohort: &Cohort,
    records: &[NoduleRecord],
    cache: Option<&Path>,
    image_size: usize,
    stats: &ChannelStats,
) -> Outcome<Vec<ViewStack>> {
    records
        .iter()
        .map(|r| {
            if let Some(s) = cache.and_then(|dir| cached_stack(&stack_path(dir, r), image_size, stats)) {
                return Ok(s);
            }
            compute_stack(cohort, r, image_size, stats)
                .with_context(|| format!("{}/{}", r.patient_id, r.nodule_id))
                .runtime()
        })
        .collect()
}

/// Annotation files loaded on first use.
struct Annotations<'a> {
    root: &'a Path,
    files: BTreeMap<String, AnnotationFile>,
}

impl Annotations<'_> {
    fn semantics(&mut self, record: &NoduleRecord) -> anyhow::Result<SemanticFeatureSet> {
        let Some(uri) = &record.semantics_uri else {
            return Ok(SemanticFeatureSet::new());
        };
        if !self.files.contains_key(uri) {
            let file = AnnotationFile::load(&resolve_uri(self.root, uri))?;
            self.files.insert(uri.clone(), file);
        }
        Ok(self.files[uri]
            .get(&record.patient_id, &record.nodule_id)
            .cloned()
            .unwrap_or_default())
    }
}

fn snapshot(run: &RunDir, config: &RunConfig) -> Outcome<()> {
    run.write(CONFIG_SNAPSHOT, config.to_toml().runtime()?).runtime()
}

fn write_json<T: serde::Serialize>(run: &RunDir, rel: &str, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    run.write(rel, text + "\n").runtime()
}

pub fn synth(mut config: RunConfig, seed: u64, args: &SynthArgs) -> Outcome<()> {
    let s = &mut config.synth;
    set_path(&mut s.output, &args.output);
    set(&mut s.n_patients, args.n_patients);
    set(&mut s.prevalence, args.prevalence);
    config.seed = Some(seed);
    let output = require(&config.synth.output, "synth.output", "--output").invalid()?;
    let params = SynthConfig {
        n_patients: config.synth.n_patients,
        prevalence: config.synth.prevalence,
        seed,
        ..SynthConfig::default()
    };
    params.validate().invalid()?;
    let run = RunDir::prepare(&output, args.overwrite.get()).invalid()?;
    let cohort = generate(&params).runtime()?;
    run.create().runtime()?;
    write_cohort(run.root(), &cohort).runtime()?;
    snapshot(&run, &config)?;
    run.finish().runtime()?;
    println!(
        "synthesized {} patients ({} label-1) into {}",
        cohort.manifest.records.len(),
        cohort.manifest.patient_labels().values().filter(|&&l| l == 1).count(),
        output.display()
    );
    Ok(())
}

enum RecordStatus {
    Written { report: bool },
    Cached,
}

pub fn preprocess(mut config: RunConfig, seed: u64, args: &PreprocessArgs) -> Outcome<()> {
    let p = &mut config.preprocess;
    set_path(&mut p.manifest, &args.manifest);
    set_path(&mut p.output, &args.output);
    set(&mut p.image_size, args.image_size);
    config.seed = Some(seed);
    let section = config.preprocess.clone();
    let manifest_path = require(&section.manifest, "preprocess.manifest", "--manifest").invalid()?;
    let output = require(&section.output, "preprocess.output", "--output").invalid()?;
    if section.image_size == 0 {
        return Err(Failure::Validation(anyhow!("`preprocess.image_size` must be positive")));
    }
    let cohort = open_cohort(&manifest_path)?;
    let overwrite = args.overwrite.get();
    for sub in ["stacks", "reports"] {
        fs::create_dir_all(output.join(sub))
            .with_context(|| format!("cannot create {}", output.display()))
            .runtime()?;
    }

    let mut annotations = Annotations {
        root: &cohort.root,
        files: BTreeMap::new(),
    };
    let (mut written, mut cached, mut without_report) = (0, 0, 0);
    let mut failures = Vec::new();
    for (i, record) in cohort.manifest.records.iter().enumerate() {
        let stack_file = stack_path(&output, record);
        let report_file = report_path(&output, record);
        let status = (|| -> anyhow::Result<RecordStatus> {
            let semantics = annotations.semantics(record)?;
            let fresh = cached_stack(&stack_file, section.image_size, &section.channel_stats).is_some()
                && (semantics.is_empty() || report_file.is_file());
            if fresh && !overwrite {
                return Ok(RecordStatus::Cached);
            }
            let stack = compute_stack(&cohort, record, section.image_size, &section.channel_stats)?;
            save_view_stack(&stack_file, &stack, &section.channel_stats)?;
            if semantics.is_empty() {
                return Ok(RecordStatus::Written { report: false });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let report = render_report(&semantics, &mut rng)?;
            fs::write(&report_file, report.to_text() + "\n")
                .with_context(|| format!("cannot write {}", report_file.display()))?;
            Ok(RecordStatus::Written { report: true })
        })();
        match status {
            Ok(RecordStatus::Cached) => cached += 1,
            Ok(RecordStatus::Written { report }) => {
                written += 1;
                if !report {
                    without_report += 1;
                }
            }
            Err(e) => failures.push(format!("{}/{}: {e:#}", record.patient_id, record.nodule_id)),
        }
    }

    let failures_file = output.join("failures.txt");
    if failures.is_empty() {
        let _ = fs::remove_file(&failures_file);
    } else {
        fs::write(&failures_file, failures.join("\n") + "\n").runtime()?;
    }
    let run = RunDir::reuse(&output);
    snapshot(&run, &config)?;
    run.finish().runtime()?;

    println!(
        "preprocessed {written}, cached {cached}, failed {} of {} records ({without_report} without semantics, no report)",
        failures.len(),
        cohort.manifest.records.len()
    );
    if failures.is_empty() {
        return Ok(());
    }
    for f in &failures {
        eprintln!("  {f}");
    }
    Err(Failure::Runtime(anyhow!("{} records failed; see {}", failures.len(), failures_file.display())))
}

pub fn train(mut config: RunConfig, seed: u64, args: &TrainArgs) -> Outcome<()> {
    let t = &mut config.train;
    set_path(&mut t.manifest, &args.manifest);
    set_path(&mut t.run_dir, &args.run_dir);
    set(&mut t.preset, args.preset);
    set(&mut t.params.epochs, args.epochs);
    set(&mut t.params.folds, args.folds);
    set(&mut t.params.learning_rate, args.learning_rate);
    set(&mut t.params.batch_size, args.batch_size);
    t.params.seed = seed;
    if t.base.is_none() {
        t.base = Some(BaseSource::Random { seed });
    }
    config.seed = Some(seed);
    let section = config.train.clone();
    let manifest_path = require(&section.manifest, "train.manifest", "--manifest").invalid()?;
    let run_path = require(&section.run_dir, "train.run_dir", "--run-dir").invalid()?;
    section.params.validate().context("invalid `train.params`").invalid()?;
    let model = section.params.apply_to(match section.preset {
        Preset::Toy => ModelConfig::toy(),
        Preset::PretrainedCompatible => ModelConfig::pretrained_compatible(),
    });
    model.validate().context("invalid model settings").invalid()?;
    if let Some(BaseSource::Archive { path, .. }) = &section.base {
        if !path.is_file() {
            return Err(Failure::Validation(anyhow!("weight archive {} not found", path.display())));
        }
    }
    let cohort = open_cohort(&manifest_path)?;
    let patients = cohort.manifest.patients().len();
    if patients < section.params.folds {
        return Err(Failure::Validation(anyhow!(
            "{patients} patients cannot fill {} folds",
            section.params.folds
        )));
    }
    let run = RunDir::prepare(&run_path, args.overwrite.get()).invalid()?;

    let data = Dataset::load(&cohort.manifest, &cohort.root).runtime()?;
    let base = section.base.clone().expect("defaulted above");
    let init = ModelBundle::new(model, base, section.tokenizer.clone()).runtime()?;
    run.create().runtime()?;
    snapshot(&run, &config)?;
    let log_path = run.file("train_log.ndjson").runtime()?;
    let mut log = BufWriter::new(File::create(&log_path).runtime()?);
    eprintln!(
        "training {} folds x {} epochs on {} nodules from {patients} patients",
        section.params.folds,
        section.params.epochs,
        data.len()
    );
    let cv = run_cv(&cohort.manifest, &data, &section.params, &init, &mut log).runtime()?;
    log.flush().runtime()?;

    for f in &cv.folds {
        let dir = format!("fold_{}", f.split.fold_index);
        f.outcome.checkpoint.save(&run.root().join(&dir).join("checkpoint")).runtime()?;
        write_json(&run, &format!("{dir}/calibrator.json"), &f.calibrator)?;
        write_json(&run, &format!("{dir}/history.json"), &f.outcome.history)?;
        write_nodule_predictions(&run.file(format!("{dir}/val_predictions.csv")).runtime()?, &f.val_predictions)
            .runtime()?;
    }
    write_json(&run, "cv_summary.json", &cv.summary)?;
    run.finish().runtime()?;

    for f in &cv.folds {
        let info = &f.outcome.checkpoint.info;
        println!(
            "fold {}: best epoch {}, val AUROC {}",
            f.split.fold_index,
            info.epoch,
            info.val_auroc.map_or("undefined".to_string(), |v| format!("{v:.3}"))
        );
    }
    match (cv.summary.mean, cv.summary.std) {
        (Some(m), Some(s)) => println!("mean val AUROC {m:.3} ± {s:.3}"),
        (Some(m), None) => println!("mean val AUROC {m:.3}"),
        _ => println!("val AUROC undefined in every fold"),
    }
    Ok(())
}

/// Fold checkpoints of a completed training run, ordered by fold index.
fn fold_dirs(train_run: &Path) -> Outcome<Vec<(usize, PathBuf)>> {
    if !train_run.join(MANIFEST).is_file() {
        return Err(Failure::Validation(anyhow!(
            "{} is not a completed training run (no {MANIFEST})",
            train_run.display()
        )));
    }
    let mut folds = Vec::new();
    for entry in fs::read_dir(train_run).runtime()? {
        let path = entry.runtime()?.path();
        let index = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("fold_"))
            .and_then(|k| k.parse::<usize>().ok());
        if let (Some(k), true) = (index, path.is_dir()) {
            folds.push((k, path));
        }
    }
    if folds.is_empty() {
        return Err(Failure::Validation(anyhow!("no fold_<k> checkpoints under {}", train_run.display())));
    }
    folds.sort();
    Ok(folds)
}

fn load_checkpoint(dir: &Path) -> Outcome<Checkpoint> {
    Checkpoint::load(&dir.join("checkpoint"))
        .with_context(|| format!("cannot load checkpoint in {}", dir.display()))
        .runtime()
}

pub fn infer(mut config: RunConfig, seed: u64, args: &InferArgs) -> Outcome<()> {
    let s = &mut config.infer;
    set_path(&mut s.train_run, &args.train_run);
    set_path(&mut s.manifest, &args.manifest);
    set_path(&mut s.stacks, &args.stacks);
    set_path(&mut s.run_dir, &args.run_dir);
    config.seed = Some(seed);
    let section = config.infer.clone();
    let train_run = require(&section.train_run, "infer.train_run", "--train-run").invalid()?;
    let manifest_path = require(&section.manifest, "infer.manifest", "--manifest").invalid()?;
    let run_path = require(&section.run_dir, "infer.run_dir", "--run-dir").invalid()?;
    let folds = fold_dirs(&train_run)?;
    let cohort = open_cohort(&manifest_path)?;
    let run = RunDir::prepare(&run_path, args.overwrite.get()).invalid()?;

    let mut bundles = Vec::new();
    let mut calibrators = Vec::new();
    for (_, dir) in &folds {
        bundles.push(load_checkpoint(dir)?);
        let path = dir.join("calibrator.json");
        let text = fs::read_to_string(&path)
            .with_context(|| format!("missing calibrator {}", path.display()))
            .invalid()?;
        calibrators.push(serde_json::from_str::<BetaCalibrator>(&text).runtime()?);
    }
    let model = *bundles[0].bundle.config();
    let image_size = model.encoder.vision.image_size;
    let mut per_fold: Vec<Vec<NoduleRisk>> = vec![Vec::new(); folds.len()];
    for chunk in cohort.manifest.records.chunks(CHUNK) {
        let stacks = stacks_for(&cohort, chunk, section.stacks.as_deref(), image_size, &model.channel_stats)?;
        let refs: Vec<&ViewStack> = stacks.iter().collect();
        for (((k, _), ckpt), out) in folds.iter().zip(&bundles).zip(per_fold.iter_mut()) {
            let p = infer_many(&ckpt.bundle, &refs).runtime()?;
            out.extend(chunk.iter().zip(p).map(|(r, probability)| NoduleRisk {
                patient_id: r.patient_id.clone(),
                nodule_id: r.nodule_id.clone(),
                probability,
                fold_index: *k,
            }));
        }
    }
    let patients = calibrated_ensemble(&per_fold, &calibrators).runtime()?;

    run.create().runtime()?;
    snapshot(&run, &config)?;
    let all: Vec<NoduleRisk> = per_fold.concat();
    write_nodule_predictions(&run.file("nodule_predictions.csv").runtime()?, &all).runtime()?;
    write_patient_predictions(&run.file("patient_predictions.csv").runtime()?, &patients).runtime()?;
    run.finish().runtime()?;
    println!(
        "scored {} nodules with {} folds; {} patient risks in {}",
        cohort.manifest.records.len(),
        folds.len(),
        patients.len(),
        run_path.display()
    );
    Ok(())
}

pub fn zeroshot(mut config: RunConfig, seed: u64, args: &ZeroShotArgs) -> Outcome<()> {
    let z = &mut config.zeroshot;
    set_path(&mut z.train_run, &args.train_run);
    set_path(&mut z.manifest, &args.manifest);
    set_path(&mut z.stacks, &args.stacks);
    set_path(&mut z.run_dir, &args.run_dir);
    set(&mut z.fold, args.fold);
    z.unit_temperature |= args.unit_temperature;
    config.seed = Some(seed);
    let section = config.zeroshot.clone();
    let train_run = require(&section.train_run, "zeroshot.train_run", "--train-run").invalid()?;
    let manifest_path = require(&section.manifest, "zeroshot.manifest", "--manifest").invalid()?;
    let run_path = require(&section.run_dir, "zeroshot.run_dir", "--run-dir").invalid()?;
    let folds = fold_dirs(&train_run)?;
    let Some((_, dir)) = folds.iter().find(|(k, _)| *k == section.fold) else {
        return Err(Failure::Validation(anyhow!(
            "fold {} not found under {}",
            section.fold,
            train_run.display()
        )));
    };
    let cohort = open_cohort(&manifest_path)?;
    let run = RunDir::prepare(&run_path, args.overwrite.get()).invalid()?;

    let bundle = load_checkpoint(dir)?.bundle;
    let model = *bundle.config();
    let queries = ZeroShotQuery::standard()
        .iter()
        .map(|q| encode_query(&bundle, q))
        .collect::<Result<Vec<_>, _>>()
        .runtime()?;
    let mut rows = Vec::new();
    for chunk in cohort.manifest.records.chunks(CHUNK) {
        let stacks = stacks_for(
            &cohort,
            chunk,
            section.stacks.as_deref(),
            model.encoder.vision.image_size,
            &model.channel_stats,
        )?;
        let refs: Vec<&ViewStack> = stacks.iter().collect();
        let outputs = bundle.image_outputs(&refs).runtime()?;
        for (r, out) in chunk.iter().zip(&outputs) {
            rows.extend(
                zero_shot_nodule(&bundle, &r.patient_id, &r.nodule_id, &out.embedding, &queries, section.unit_temperature)
                    .runtime()?,
            );
        }
    }

    run.create().runtime()?;
    snapshot(&run, &config)?;
    write_zero_shot(&run.file("zero_shot.csv").runtime()?, &rows).runtime()?;
    run.finish().runtime()?;
    println!(
        "{} zero-shot rows for {} nodules and {} features in {}",
        rows.len(),
        cohort.manifest.records.len(),
        queries.len(),
        run_path.display()
    );
    Ok(())
}

pub fn evaluate(mut config: RunConfig, seed: u64, args: &EvaluateArgs) -> Outcome<()> {
    let e = &mut config.evaluate;
    set_path(&mut e.predictions, &args.predictions);
    set_path(&mut e.manifest, &args.manifest);
    set_path(&mut e.run_dir, &args.run_dir);
    set(&mut e.params.bootstrap_draws, args.bootstrap_draws);
    e.params.seed = seed;
    config.seed = Some(seed);
    let section = config.evaluate.clone();
    let predictions = require(&section.predictions, "evaluate.predictions", "--predictions").invalid()?;
    let manifest_path = require(&section.manifest, "evaluate.manifest", "--manifest").invalid()?;
    let run_path = require(&section.run_dir, "evaluate.run_dir", "--run-dir").invalid()?;
    if !predictions.is_file() {
        return Err(Failure::Validation(anyhow!("predictions {} not found", predictions.display())));
    }
    let risks = read_patient_predictions(&predictions)
        .with_context(|| format!("invalid predictions {}", predictions.display()))
        .invalid()?;
    let labels = open_cohort(&manifest_path)?.manifest.patient_labels();
    let mut scores = Vec::with_capacity(risks.len());
    let mut y = Vec::with_capacity(risks.len());
    for r in &risks {
        let label = labels
            .get(&r.patient_id)
            .ok_or_else(|| anyhow!("patient {} has no label in {}", r.patient_id, manifest_path.display()))
            .invalid()?;
        scores.push(r.probability);
        y.push(*label);
    }
    let run = RunDir::prepare(&run_path, args.overwrite.get()).invalid()?;
    let report = metrics_report(&scores, &y, &section.params).invalid()?;

    run.create().runtime()?;
    snapshot(&run, &config)?;
    write_json(&run, "metrics.json", &report)?;
    let mut table = String::from("metric,point,ci_lower,ci_upper\n");
    table += &format!("AUROC,{},{},{}\n", report.auroc, report.auroc_ci.lower, report.auroc_ci.upper);
    table += &format!("AUPRC,{},{},{}\n", report.auprc, report.auprc_ci.lower, report.auprc_ci.upper);
    run.write("metrics.csv", table).runtime()?;
    let mut ops = String::from("target_recall,achieved_recall,fpr,precision,threshold\n");
    for op in &report.operating_points {
        ops += &format!(
            "{},{},{},{},{}\n",
            op.target_recall, op.achieved_recall, op.fpr, op.precision, op.threshold
        );
    }
    run.write("operating_points.csv", ops).runtime()?;
    run.finish().runtime()?;
    println!(
        "n={} positives={} AUROC {:.3} [{:.3}, {:.3}] AUPRC {:.3} [{:.3}, {:.3}]",
        report.n,
        report.n_positive,
        report.auroc,
        report.auroc_ci.lower,
        report.auroc_ci.upper,
        report.auprc,
        report.auprc_ci.lower,
        report.auprc_ci.upper
    );
    Ok(())
}

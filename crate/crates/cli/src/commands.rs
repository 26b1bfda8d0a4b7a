//! One function per subcommand. Each writes its human-readable report to
//! `out` and returns whether its check passed.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ovhar_core::clients::{
    ClassMappingClient, ClientConfig, HttpClient, StubInversion, StubMapping, TextInversionClient,
};
use ovhar_core::data::{fit_normalization, load_manifest, read_sequence, DatasetManifest, ManifestRecord, Normalization};
use ovhar_core::decode::{predict_activity, DecodeError};
use ovhar_core::eval::{evaluate, EvalSplit};
use ovhar_core::lexicon::Lexicon;
use ovhar_core::nn::{grad_check, load_checkpoint, save_checkpoint, BackwardFault, GradCheckOptions, RegressorModel};
use ovhar_core::par::Exec;
use ovhar_core::synth::{generate, make_open_vocab_split, SynthSpec};
use ovhar_core::table::{build_table, load_table, save_table, Embedder, EmbeddingTable};
use ovhar_core::trainer::{check_leakage, make_examples, train, TrainError};
use ovhar_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::config::{EmbedderChoice, RunConfig};
use crate::{CliError, ResultExt};

pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const SPEC_FILE: &str = "spec.json";

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::Failed(format!("writing output: {e}")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).failed(&format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).failed(&format!("writing {}", path.display()))
}

fn ensure_run_dir(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.paths.run_dir).failed(&format!("creating run dir {}", cfg.paths.run_dir.display()))
}

fn load_lexicon(cfg: &RunConfig) -> Result<Lexicon, CliError> {
    let path = cfg.require(&cfg.paths.lexicon, "lexicon")?;
    let lexicon = Lexicon::load(path).usage(&format!("lexicon {}", path.display()))?;
    lexicon.validate().usage(&format!("lexicon {}", path.display()))?;
    Ok(lexicon)
}

fn load_split(cfg: &RunConfig, lexicon: &Lexicon) -> Result<EvalSplit, CliError> {
    let path = cfg.require(&cfg.paths.split, "split")?;
    let split = EvalSplit::load(path).usage(&format!("split {}", path.display()))?;
    split.validate(lexicon).usage(&format!("split {}", path.display()))?;
    Ok(split)
}

fn load_data(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let path = cfg.require(&cfg.paths.manifest, "manifest")?;
    let mut manifest = load_manifest(path).usage(&format!("manifest {}", path.display()))?;
    if cfg.normalize {
        let norm_path = cfg.run_path(NORMALIZATION_FILE);
        let text = std::fs::read_to_string(&norm_path)
            .usage(&format!("normalization {} (run `train` first)", norm_path.display()))?;
        let norm: Normalization = serde_json::from_str(&text).usage(&format!("normalization {}", norm_path.display()))?;
        manifest.normalization = Some(norm);
    }
    Ok(manifest)
}

fn load_model(cfg: &RunConfig) -> Result<RegressorModel, CliError> {
    let path = cfg.checkpoint_path();
    load_checkpoint(&path).usage(&format!("checkpoint {}", path.display()))
}

fn load_any_table(cfg: &RunConfig) -> Result<EmbeddingTable, CliError> {
    let path = cfg.table_path();
    load_table(&path).usage(&format!("table {}", path.display()))
}

pub fn embed_table(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool, CliError> {
    let lexicon = load_lexicon(cfg)?;
    let embedder = match cfg.embedder {
        EmbedderChoice::Test => Embedder::Test,
        EmbedderChoice::File => {
            let path = cfg.require(&cfg.paths.embeddings, "embeddings")?;
            Embedder::Imported(load_table(path).usage(&format!("embeddings {}", path.display()))?)
        }
    };
    let table = build_table(&lexicon, &lexicon.class_ids(), &embedder).failed("building table")?;
    let path = cfg.table_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).failed(&format!("creating {}", dir.display()))?;
    }
    save_table(&table, &path).failed(&format!("writing {}", path.display()))?;
    emit(out, format!("table={}", path.display()))?;
    emit(out, format!("entries={} encoder={}", table.len(), table.encoder_name))?;
    Ok(true)
}

pub fn synth(cfg: &RunConfig, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<bool, CliError> {
    let mut spec = match &cfg.paths.synth_spec {
        Some(path) => SynthSpec::load(path).usage(&format!("synth spec {}", path.display()))?,
        None => SynthSpec::default_spec(cfg.seed),
    };
    spec.seed = cfg.seed;
    spec.validate().usage("synth spec")?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_path("data"));
    let dataset = generate(&spec, &dir, Exec::Parallel).failed("generating dataset")?;
    let split = make_open_vocab_split(&spec.classes, cfg.synth.m_test, cfg.seed).failed("choosing split")?;
    let split_path = dir.join(SPLIT_FILE);
    split.save(&split_path).failed(&format!("writing {}", split_path.display()))?;
    spec.save(dir.join(SPEC_FILE)).failed("writing spec")?;
    emit(out, format!("manifest={}", dataset.manifest_path.display()))?;
    emit(out, format!("lexicon={}", dataset.lexicon_path.display()))?;
    emit(out, format!("split={}", split_path.display()))?;
    emit(
        out,
        format!(
            "records={} classes={} test_classes={}",
            dataset.manifest.records.len(),
            spec.classes.len(),
            split.test_class_ids.join(",")
        ),
    )?;
    Ok(true)
}

pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool, CliError> {
    let lexicon = load_lexicon(cfg)?;
    let split = load_split(cfg, &lexicon)?;
    let manifest_path = cfg.require(&cfg.paths.manifest, "manifest")?;
    let mut manifest = load_manifest(manifest_path).usage(&format!("manifest {}", manifest_path.display()))?;
    let table = load_any_table(cfg)?;
    ensure_run_dir(cfg)?;

    let train_classes: HashSet<&str> = split.train_class_ids.iter().map(String::as_str).collect();
    let record_ids: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| r.class_id.as_deref().is_some_and(|c| train_classes.contains(c)))
        .map(|r| r.id.clone())
        .collect();
    if record_ids.is_empty() {
        return Err(CliError::Usage("no records belong to the training classes".into()));
    }
    if cfg.normalize {
        let norm = fit_normalization(&manifest, &record_ids).failed("fitting normalization")?;
        let text = serde_json::to_string_pretty(&norm).expect("normalization serializes") + "\n";
        write_file(&cfg.run_path(NORMALIZATION_FILE), text)?;
        manifest.normalization = Some(norm);
    }
    let train_table = table.subset(&split.train_class_ids).usage("table")?;
    let examples = make_examples(&manifest, &record_ids, &train_table, &cfg.window).failed("building examples")?;
    match check_leakage(&examples, &split.test_class_ids) {
        Err(e @ TrainError::Leakage(_)) => return Err(CliError::Failed(format!("leakage guard: {e}"))),
        other => other.failed("leakage guard")?,
    }

    let model_cfg = cfg.model.apply(manifest.channels);
    let mut model = RegressorModel::new(model_cfg, cfg.seed).usage("model config")?;
    log::info!(
        "training on {} windows from {} records ({} parameters)",
        examples.len(),
        record_ids.len(),
        model.parameter_count()
    );
    let report = train(&mut model, &examples, &cfg.train, Exec::Parallel, |e| {
        log::info!("epoch {} train_mse {:.6} val_mse {:?} lr {}", e.epoch, e.train_mse, e.val_mse, e.lr);
    })
    .failed("training")?;

    let checkpoint = cfg.checkpoint_path();
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).failed(&format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&model, &checkpoint).failed(&format!("writing {}", checkpoint.display()))?;
    write_file(&cfg.run_path(EPOCH_LOG_FILE), report.epoch_log())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&cfg.run_path(TRAIN_REPORT_FILE), json)?;

    emit(out, format!("checkpoint={}", checkpoint.display()))?;
    emit(
        out,
        format!(
            "epochs={} best_epoch={} best_{}={} stop={}",
            report.epochs.len(),
            report.best_epoch,
            report.monitor,
            report.best_loss,
            serde_json::to_value(report.stop_reason).expect("serializes").as_str().unwrap_or_default()
        ),
    )?;
    Ok(true)
}

pub fn eval_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool, CliError> {
    let lexicon = load_lexicon(cfg)?;
    let split = load_split(cfg, &lexicon)?;
    let manifest = load_data(cfg)?;
    let table = load_any_table(cfg)?;
    let model = load_model(cfg)?;
    ensure_run_dir(cfg)?;
    let report = evaluate(
        &model,
        &manifest,
        &split,
        &table,
        cfg.candidates,
        &cfg.window,
        cfg.aggregation,
        Exec::Parallel,
    )
    .failed("evaluation")?;
    let report_path = cfg.run_path(EVAL_REPORT_FILE);
    write_file(&report_path, report.to_json() + "\n")?;
    write_file(&cfg.run_path(CONFUSION_FILE), report.confusion_csv())?;
    for line in report.summary_table().lines() {
        emit(out, line)?;
    }
    emit(out, format!("report={}", report_path.display()))?;
    emit(out, format!("macro_f1={}", report.macro_f1))?;
    Ok(true)
}

/// Where `infer` reads its input.
#[derive(Clone, Debug)]
pub enum InferInput {
    Record(String),
    /// Raw little-endian f32 rows with the model's channel count.
    File { path: PathBuf, rate_hz: Option<f64> },
}

fn raw_file_manifest(path: &Path, channels: usize, rate_hz: f64) -> Result<DatasetManifest, CliError> {
    let bytes = std::fs::metadata(path)
        .usage(&format!("input {}", path.display()))?
        .len() as usize;
    let row = channels * 4;
    if bytes == 0 || !bytes.is_multiple_of(row) {
        return Err(CliError::Usage(format!(
            "input {} holds {bytes} bytes, not a whole number of {channels}-channel f32 rows",
            path.display()
        )));
    }
    let id = path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    Ok(DatasetManifest {
        name: "infer".into(),
        modality: ovhar_core::data::Modality::Other,
        rate_hz,
        channels,
        normalization: None,
        records: vec![ManifestRecord {
            id,
            class_id: None,
            path: path.to_path_buf(),
            length: bytes / row,
        }],
        base_dir: PathBuf::new(),
    })
}

fn inversion(cfg: &RunConfig, table: &EmbeddingTable, h: &[f64]) -> Result<String, CliError> {
    match &cfg.clients.inversion {
        ClientConfig::Stub => StubInversion { table }.invert(h),
        ClientConfig::Endpoint(e) => HttpClient { endpoint: e.clone() }.invert(h),
    }
    .failed("text inversion")
}

fn mapping(cfg: &RunConfig, text: &str, candidates: &[String]) -> Result<String, CliError> {
    match &cfg.clients.mapping {
        ClientConfig::Stub => StubMapping::with_aliases(cfg.clients.aliases.clone()).map(text, candidates),
        ClientConfig::Endpoint(e) => HttpClient { endpoint: e.clone() }.map(text, candidates),
    }
    .failed("class mapping")
}

pub fn infer(cfg: &RunConfig, input: &InferInput, top: usize, out: &mut dyn Write) -> Result<bool, CliError> {
    let model = load_model(cfg)?;
    let table = load_any_table(cfg)?;
    let seq = match input {
        InferInput::Record(id) => {
            let manifest = load_data(cfg)?;
            read_sequence(&manifest, id).usage(&format!("record {id}"))?.sequence
        }
        InferInput::File { path, rate_hz } => {
            let rate = match rate_hz {
                Some(r) => *r,
                None => load_data(cfg)?.rate_hz,
            };
            let manifest = raw_file_manifest(path, model.conv.in_channels, rate)?;
            let id = manifest.records[0].id.clone();
            read_sequence(&manifest, &id).usage(&format!("input {}", path.display()))?.sequence
        }
    };
    if seq.channels() != model.conv.in_channels {
        return Err(CliError::Usage(format!(
            "input has {} channels, the model expects {}",
            seq.channels(),
            model.conv.in_channels
        )));
    }
    let prediction = match predict_activity(&model, &seq, &cfg.window, &table, cfg.aggregation, Exec::Parallel) {
        Ok(p) => p,
        Err(DecodeError::Undecodable(_)) => {
            emit(out, format!("input={} undecodable: predicted embedding has zero norm", seq.id))?;
            for (i, class) in table.entries.keys().enumerate() {
                emit(out, format!("{:>3}. {class:<24} undefined", i + 1))?;
            }
            return Ok(true);
        }
        Err(e) => return Err(CliError::Failed(format!("inference: {e}"))),
    };
    let p = &prediction.prediction;
    emit(
        out,
        format!(
            "input={} windows={} top={}",
            seq.id,
            prediction.window_predictions.len(),
            p.top
        ),
    )?;
    for (i, (class, sim)) in p.ranked.iter().take(top).enumerate() {
        emit(out, format!("{:>3}. {class:<24} {sim:.6}", i + 1))?;
    }
    if p.is_tie() {
        emit(out, format!("ties={} (within {:e})", p.tie_set.join(","), ovhar_core::decode::DEFAULT_TIE_EPS))?;
    } else {
        emit(out, "ties=none")?;
    }
    let sentence = inversion(cfg, &table, &prediction.aggregate)?;
    emit(out, format!("sentence={sentence}"))?;
    let candidates: Vec<String> = table.entries.keys().cloned().collect();
    emit(out, format!("mapped={}", mapping(cfg, &sentence, &candidates)?))?;
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FaultArg {
    ConvSignFlip,
}

pub struct GradCheckArgs {
    pub seeds: u64,
    pub channels: usize,
    pub rows: usize,
    pub fault: Option<FaultArg>,
}

pub fn gradcheck(cfg: &RunConfig, args: &GradCheckArgs, out: &mut dyn Write) -> Result<bool, CliError> {
    if args.seeds == 0 || args.channels == 0 || args.rows == 0 {
        return Err(CliError::Usage("--seeds, --channels and --rows must be positive".into()));
    }
    let model_cfg = cfg.model.apply(args.channels);
    let mut all_passed = true;
    let mut worst: f64 = 0.0;
    for seed in cfg.seed..cfg.seed + args.seeds {
        let mut model = RegressorModel::new(model_cfg, seed).usage("model config")?;
        model.inject_fault(args.fault.map(|FaultArg::ConvSignFlip| BackwardFault::ConvSignFlip));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x6772_6164);
        let window: Vec<f64> = (0..args.rows * args.channels).map(|_| rng.sample(StandardNormal)).collect();
        let target: Vec<f64> = (0..model_cfg.out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let window = Tensor::from_vec(&[args.rows, args.channels], window).expect("sized");
        let target = Tensor::from_vec(&[model_cfg.out_dim], target).expect("sized");
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        let r = grad_check(&model, &window, &target, opts).failed("gradient check")?;
        worst = worst.max(r.max_rel_error);
        all_passed &= r.passed;
        emit(
            out,
            format!(
                "seed={seed} max_rel_err={:.3e} worst={} checked={} kinks={} {}",
                r.max_rel_error,
                r.worst_tensor.unwrap_or("-"),
                r.checked,
                r.kinks,
                if r.passed { "pass" } else { "FAIL" }
            ),
        )?;
    }
    emit(
        out,
        format!(
            "gradcheck {} seeds={} max_rel_err={worst:.3e} tol={:e}",
            if all_passed { "passed" } else { "failed" },
            args.seeds,
            GradCheckOptions::default().tol
        ),
    )?;
    Ok(all_passed)
}

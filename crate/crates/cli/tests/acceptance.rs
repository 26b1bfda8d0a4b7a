//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! The criteria run one after another inside a single test so that the
//! timed ones are not competing with each other for CPU. Lines go straight
//! to the stderr handle, so they show up even when the harness captures
//! output.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ovhar_core::contrast::{evaluate_classifier, ClassifierConfig, SoftmaxClassifier};
use ovhar_core::data::{read_sequence, Modality, SensorSequence};
use ovhar_core::decode::{decode, predict_activity, Aggregation, DEFAULT_TIE_EPS};
use ovhar_core::eval::classification_metrics;
use ovhar_core::nn::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ModelConfig, NnError, RegressorModel};
use ovhar_core::par::Exec;
use ovhar_core::synth::{generate, make_open_vocab_split, SynthSpec};
use ovhar_core::table::{build_table, load_table, save_table, Embedder, EmbeddingTable, TableEntry, TableError};
use ovhar_core::trainer::{make_examples, mean_loss, train, Example, TrainConfig};
use ovhar_core::windowing::{segment, WindowConfig};
use ovhar_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check);

fn announce(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut full = vec!["ovhar"];
    full.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = ovhar_cli::run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn cli_ok(args: &[&str]) -> Result<String, String> {
    let (code, out, err) = cli(args);
    ensure(code == 0, || format!("`ovhar {}` exited {code}: {err}", args.join(" ")))?;
    Ok(out)
}

fn write_config(dir: &Path, seed: u64, extra: serde_json::Value) -> String {
    let mut cfg = serde_json::json!({
        "seed": seed,
        "paths": {
            "manifest": dir.join("data/manifest.json"),
            "lexicon": dir.join("data/lexicon.json"),
            "split": dir.join("data/split.json"),
            "run_dir": dir.join("run"),
        },
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn gradient_correctness() -> Check {
    let started = Instant::now();
    let out = cli_ok(&["gradcheck", "--seeds", "10"])?;
    let elapsed = started.elapsed();
    let per_seed: Vec<&str> = out.lines().filter(|l| l.starts_with("seed=")).collect();
    ensure(per_seed.len() == 10, || format!("expected 10 seed lines:\n{out}"))?;
    ensure(per_seed.iter().all(|l| l.ends_with(" pass")), || out.clone())?;
    let summary = out.lines().last().unwrap_or_default();
    ensure(summary.starts_with("gradcheck passed"), || summary.to_string())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{summary} in {:.1}s", elapsed.as_secs_f64()))
}

fn sequence(length: usize, rate: f64) -> SensorSequence {
    let data = (0..length).map(|i| i as f64 + 1.0).collect();
    SensorSequence::new("s", None, Modality::Imu, rate, Tensor::from_vec(&[length, 1], data).unwrap()).unwrap()
}

/// Start offsets by direct enumeration.
fn oracle_starts(length: usize, t: usize, s: usize) -> Vec<usize> {
    if length <= t {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut k = 0;
    while k + t <= length {
        starts.push(k);
        k += s;
    }
    if *starts.last().unwrap() + t < length {
        starts.push(length - t);
    }
    starts
}

fn windowing_exactness() -> Check {
    let cfg = WindowConfig::default();
    let w = segment(&sequence(250, 50.0), &cfg).map_err(|e| e.to_string())?;
    ensure(w.len() == 1 && w[0].start_sample == 0 && w[0].padded_tail == 0, || format!("250 samples: {:?}", starts_of(&w)))?;
    let w = segment(&sequence(100, 50.0), &cfg).map_err(|e| e.to_string())?;
    ensure(w.len() == 1 && w[0].padded_tail == 150, || "100 samples did not pad 150 rows".into())?;
    ensure(w[0].samples.data()[100..].iter().all(|&v| v == 0.0), || "padding is not zero".into())?;
    let w = segment(&sequence(400, 50.0), &cfg).map_err(|e| e.to_string())?;
    ensure(starts_of(&w) == vec![0, 125, 150], || format!("400 samples: {:?}", starts_of(&w)))?;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let rates = [10.0, 20.0, 25.0, 50.0, 60.0, 100.0];
    for case in 0..10_000 {
        let rate = rates[rng.gen_range(0..rates.len())];
        let window_seconds = rng.gen_range(0.5..8.0);
        let cfg = WindowConfig {
            window_seconds,
            stride_seconds: window_seconds * rng.gen_range(0.05..=1.0),
            pad_value: -1.0,
        };
        let length = rng.gen_range(1..1500);
        let t = (window_seconds * rate + 0.5).floor() as usize;
        let s = ((cfg.stride_seconds * rate + 0.5).floor() as usize).max(1);
        let seq = sequence(length, rate);
        let windows = segment(&seq, &cfg).map_err(|e| e.to_string())?;
        let expected = oracle_starts(length, t, s);
        ensure(starts_of(&windows) == expected, || format!("case {case}: starts differ for L={length} T={t} S={s}"))?;
        let mut covered = vec![false; length];
        for w in &windows {
            let real = (length - w.start_sample).min(t);
            ensure(w.samples.shape() == [t, 1] && w.padded_tail == t - real, || format!("case {case}: bad window shape"))?;
            for k in 0..t {
                let want = if k < real { (w.start_sample + k) as f64 + 1.0 } else { -1.0 };
                ensure(w.samples.data()[k] == want, || format!("case {case}: sample {k} of window at {}", w.start_sample))?;
            }
            covered[w.start_sample..w.start_sample + real].iter_mut().for_each(|c| *c = true);
        }
        ensure(covered.iter().all(|&c| c), || format!("case {case}: samples left uncovered"))?;
    }
    Ok("3 examples exact, 10000 randomized cases".into())
}

fn starts_of(w: &[ovhar_core::windowing::Window]) -> Vec<usize> {
    w.iter().map(|w| w.start_sample).collect()
}

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn decode_equivalence() -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let dim = 768;
    for case in 0..100 {
        let n = rng.gen_range(1..=100);
        let mut table = EmbeddingTable::new(dim, "random");
        let mut rows = BTreeMap::new();
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let id = format!("c{:03}", rng.gen_range(0..1000) * 1000 + i);
            rows.insert(id.clone(), v.clone());
            table.insert(id, TableEntry { sentence: String::new(), embedding: v }).map_err(|e| e.to_string())?;
        }
        let h: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut oracle: Vec<(String, f64)> = rows.iter().map(|(id, v)| (id.clone(), brute_cosine(&h, v))).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let p = decode(&h, &table, DEFAULT_TIE_EPS).map_err(|e| e.to_string())?;
        let got: Vec<&String> = p.ranked.iter().map(|(id, _)| id).collect();
        let want: Vec<&String> = oracle.iter().map(|(id, _)| id).collect();
        ensure(got == want, || format!("case {case}: ranking differs"))?;
        for ((_, a), (_, b)) in p.ranked.iter().zip(&oracle) {
            ensure((a - b).abs() <= 1e-12, || format!("case {case}: similarity {a} vs {b}"))?;
        }
        ensure(p.top == oracle[0].0, || format!("case {case}: top {} vs {}", p.top, oracle[0].0))?;
        for scale in [1e-6, 0.37, 5.0, 1e8] {
            let scaled: Vec<f64> = h.iter().map(|x| x * scale).collect();
            let q = decode(&scaled, &table, DEFAULT_TIE_EPS).map_err(|e| e.to_string())?;
            ensure(q.top == p.top, || format!("case {case}: argmax changed at scale {scale}"))?;
        }
    }
    Ok("100 tables match brute force; argmax scale-invariant".into())
}

fn small_dataset(spec: &SynthSpec, dir: &Path) -> Result<ovhar_core::synth::GeneratedDataset, String> {
    generate(spec, dir, Exec::Parallel).map_err(|e| e.to_string())
}

fn memorization() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::default_spec(4);
    spec.classes.truncate(2);
    spec.records_per_class = 10;
    let ds = small_dataset(&spec, dir.path())?;
    ensure(ds.manifest.records.len() == 20, || format!("{} records", ds.manifest.records.len()))?;
    let classes: Vec<String> = spec.classes.iter().map(|c| c.id.clone()).collect();
    let table = build_table(&ds.lexicon, &classes, &Embedder::Test).map_err(|e| e.to_string())?;
    let ids: Vec<String> = ds.manifest.records.iter().map(|r| r.id.clone()).collect();
    let wc = WindowConfig::default();
    let examples = make_examples(&ds.manifest, &ids, &table, &wc).map_err(|e| e.to_string())?;
    let mut model = RegressorModel::new(ModelConfig::new(spec.channels), 4).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        max_epochs: 150,
        seed: 4,
        ..Default::default()
    };
    let report = train(&mut model, &examples, &tc, Exec::Parallel, |_| {}).map_err(|e| e.to_string())?;
    let trained = &report.split.train;
    let refs: Vec<&Example> = examples.iter().filter(|e| trained.contains(&e.record_id)).collect();
    let mse = mean_loss(&model, &refs, Exec::Parallel).map_err(|e| e.to_string())?;
    let mut pairs = Vec::new();
    for r in ds.manifest.records.iter().filter(|r| trained.contains(&r.id)) {
        let seq = read_sequence(&ds.manifest, &r.id).map_err(|e| e.to_string())?.sequence;
        let p = predict_activity(&model, &seq, &wc, &table, Aggregation::Mean, Exec::Sequential).map_err(|e| e.to_string())?;
        pairs.push((r.class_id.clone().unwrap(), p.prediction.top));
    }
    let f1 = classification_metrics(&pairs).macro_f1;
    let elapsed = started.elapsed();
    let detail = format!(
        "train_mse={mse:.3e} macro_f1={f1:.3} on {} training records, epochs={} in {:.1}s",
        pairs.len(),
        report.epochs.len(),
        elapsed.as_secs_f64()
    );
    ensure(mse < 1e-3 && f1 == 1.0 && elapsed < Duration::from_secs(120), || detail.clone())?;
    Ok(detail)
}

fn open_vocabulary() -> Check {
    let started = Instant::now();
    let mut scores = Vec::new();
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), seed, serde_json::json!({"train": {"max_epochs": 40}}));
        let data = dir.path().join("data");
        let synth = cli_ok(&["--config", &cfg, "synth", "--out", data.to_str().unwrap()])?;
        ensure(synth.contains("classes=11 "), || synth.clone())?;
        cli_ok(&["--config", &cfg, "embed-table"])?;
        cli_ok(&["--config", &cfg, "train"])?;
        let eval = cli_ok(&["--config", &cfg, "--candidates", "all", "eval"])?;
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/eval_report.json")).unwrap()).unwrap();
        ensure(report["candidate_class_ids"].as_array().map(Vec::len) == Some(11), || "candidate table is not all 11 classes".into())?;
        ensure(report["test_class_ids"].as_array().map(Vec::len) == Some(3), || "expected 3 test classes".into())?;
        let last = eval.lines().last().unwrap_or_default();
        let f1: f64 = last
            .strip_prefix("macro_f1=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("unexpected last line {last:?}"))?;
        announce(&format!("  seed {seed}: macro_f1={f1:.3} ({:.0}s)", started.elapsed().as_secs_f64()));
        scores.push(f1);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let elapsed = started.elapsed();
    let detail = format!("mean macro_f1={mean:.3} over 5 seeds in {:.0}s", elapsed.as_secs_f64());
    ensure(mean >= 0.60 && elapsed < Duration::from_secs(15 * 60), || detail.clone())?;
    Ok(detail)
}

fn classifier_contrast() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default_spec(0);
    let ds = small_dataset(&spec, dir.path())?;
    let split = make_open_vocab_split(&spec.classes, 3, 0).map_err(|e| e.to_string())?;
    let table = build_table(&ds.lexicon, &split.train_class_ids, &Embedder::Test).map_err(|e| e.to_string())?;
    let ids: Vec<String> = ds
        .manifest
        .records
        .iter()
        .filter(|r| split.train_class_ids.contains(r.class_id.as_ref().unwrap()))
        .map(|r| r.id.clone())
        .collect();
    let wc = WindowConfig::default();
    let examples = make_examples(&ds.manifest, &ids, &table, &wc).map_err(|e| e.to_string())?;
    let cc = ClassifierConfig {
        epochs: 5,
        ..Default::default()
    };
    let (clf, _) = SoftmaxClassifier::fit(&examples, ModelConfig::new(spec.channels), &cc, Exec::Parallel).map_err(|e| e.to_string())?;
    let mut expected = split.train_class_ids.clone();
    expected.sort();
    ensure(clf.classes == expected, || format!("classifier outputs {:?}", clf.classes))?;
    let report = evaluate_classifier(&clf, &ds.manifest, &split, &wc, Exec::Parallel).map_err(|e| e.to_string())?;
    let detail = format!("macro_f1={} on held-out {:?}", report.macro_f1, split.test_class_ids);
    ensure(report.macro_f1 == 0.0, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        11,
        serde_json::json!({"train": {"max_epochs": 3}, "model": {"filters": 16, "hidden": 16}}),
    );
    let data = dir.path().join("data");
    cli_ok(&["--config", &cfg, "synth", "--out", data.to_str().unwrap()])?;
    cli_ok(&["--config", &cfg, "embed-table"])?;
    let table = dir.path().join("run/table.ovht");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        std::fs::create_dir_all(&run_dir).unwrap();
        std::fs::copy(&table, run_dir.join("table.ovht")).unwrap();
        cli_ok(&["--config", &cfg, "--run-dir", run_dir.to_str().unwrap(), "train"])?;
        let ckpt = std::fs::read(run_dir.join("model.ovhr")).map_err(|e| e.to_string())?;
        let log = std::fs::read(run_dir.join("epochs.csv")).map_err(|e| e.to_string())?;
        runs.push((ckpt, log));
    }
    ensure(runs[0].0 == runs[1].0, || "checkpoints differ".into())?;
    ensure(runs[0].1 == runs[1].1, || "epoch logs differ".into())?;
    Ok(format!("checkpoint {} bytes and epoch log identical across runs", runs[0].0.len()))
}

fn format_round_trips() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default_spec(0);
    let lexicon = spec.lexicon();
    let table = build_table(&lexicon, &lexicon.class_ids(), &Embedder::Test).map_err(|e| e.to_string())?;
    let path = dir.path().join("table.ovht");
    save_table(&table, &path).map_err(|e| e.to_string())?;
    let back = load_table(&path).map_err(|e| e.to_string())?;
    ensure(back.encoder_name == table.encoder_name && back.dim == table.dim, || "table header changed".into())?;
    for (id, e) in &table.entries {
        let b = back.get(id).ok_or_else(|| format!("{id} lost"))?;
        ensure(b.sentence == e.sentence, || format!("{id} sentence changed"))?;
        ensure(
            b.embedding.iter().map(|v| v.to_bits()).eq(e.embedding.iter().map(|v| v.to_bits())),
            || format!("{id} embedding bits changed"),
        )?;
    }
    let text = std::fs::read_to_string(&path).unwrap();
    ensure(back.to_text() == text, || "re-serialized table differs".into())?;
    for cut in (0..text.len() - 1).step_by(97) {
        ensure(matches!(EmbeddingTable::from_text(&text[..cut]), Err(TableError::Parse { .. } | TableError::Dimension { .. })), || {
            format!("table truncated at {cut} accepted")
        })?;
    }
    let nan = format!("{:016x}", f64::NAN.to_bits());
    let first_value = text.find("embedding ").unwrap() + "embedding ".len();
    let damaged = [
        text.replacen("OVHT", "OVHX", 1),
        text.replacen("OVHT 1", "OVHT 2", 1),
        text.replacen("count 11", "count 12", 1),
        format!("{}g{}", &text[..first_value], &text[first_value + 1..]),
        format!("{}{nan}{}", &text[..first_value], &text[first_value + 16..]),
        format!("{text}class extra\n"),
    ];
    for (i, d) in damaged.iter().enumerate() {
        ensure(EmbeddingTable::from_text(d).is_err(), || format!("damaged table #{i} accepted"))?;
    }

    let mut cfg = ModelConfig::new(6);
    cfg.filters = 8;
    cfg.hidden = 8;
    cfg.out_dim = 16;
    let model = RegressorModel::new(cfg, 5).map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("model.ovhr");
    save_checkpoint(&model, &ckpt).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&ckpt).unwrap();
    ensure(encode_checkpoint(&loaded) == bytes, || "checkpoint re-encoding differs".into())?;
    for ((name, a), (_, b)) in model.named_parameters().into_iter().zip(loaded.named_parameters()) {
        ensure(
            a.shape() == b.shape() && a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())),
            || format!("{name} changed"),
        )?;
    }
    for cut in 0..bytes.len() {
        ensure(
            matches!(decode_checkpoint(&bytes[..cut]), Err(NnError::Truncated { .. } | NnError::BadMagic { .. } | NnError::Corrupt(_))),
            || format!("checkpoint truncated at {cut} accepted"),
        )?;
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    let mut bad_rank = bytes.clone();
    let name_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    bad_rank[12 + name_len..16 + name_len].copy_from_slice(&0u32.to_le_bytes());
    let mut bad_extent = bytes.clone();
    bad_extent[16 + name_len..24 + name_len].copy_from_slice(&u64::MAX.to_le_bytes());
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[1, 0, 0, 0]);
    for (i, d) in [bad_magic, bad_version, bad_rank, bad_extent, extra].iter().enumerate() {
        ensure(decode_checkpoint(d).is_err(), || format!("damaged checkpoint #{i} accepted"))?;
    }
    Ok(format!(
        "table ({} entries) and checkpoint ({} bytes) bit-exact; {} truncations and 11 damaged files rejected",
        table.len(),
        bytes.len(),
        bytes.len() + (0..text.len() - 1).step_by(97).count()
    ))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "windowing exactness", windowing_exactness),
        (3, "decode oracle equivalence", decode_equivalence),
        (4, "memorization", memorization),
        (5, "open-vocabulary generalization", open_vocabulary),
        (6, "closed-vocabulary classifier contrast", classifier_contrast),
        (7, "training determinism", determinism),
        (8, "format round-trips", format_round_trips),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => announce(&format!("criterion {n} PASS {name}: {detail}")),
            Err(why) => {
                announce(&format!("criterion {n} FAIL {name}: {why}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

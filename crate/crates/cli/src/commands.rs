//! Implementations of the subcommands. Each takes resolved inputs and
//! returns a JSON-serializable report; argument parsing lives in `cli`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, ensure, Context, Result};
use co2_core::data::{generate_synthetic, read_dataset, write_dataset, Sample};
use co2_core::encoder::EncoderParams;
use co2_core::eval::{
    compare_runs, comparison_csv, probe_dataset, semi_supervised_finetune, stratified_split,
    summarize_run, Direction, FinetuneResult, RunSummary,
};
use co2_core::trainer::{run_training, JsonlSink, MetricsRecord, TrainConfig, TrainState};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Environment variable that caps worker threads for `sweep`.
pub const THREADS_ENV: &str = "CO2_THREADS";

/// sha256 over `blob <len>\0<bytes>`, the way git names objects.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        CliError::BadPath {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

/// Writes through a sibling temp file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub role: &'static str,
    pub path: String,
    pub sha256: String,
}

/// Samples plus a record of where they came from.
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input: Option<InputRecord>,
}

/// Loads `path`, or synthesizes the dataset described by the `[data]` section.
pub fn load_dataset(path: Option<&Path>, cfg: &ExperimentConfig) -> Result<Dataset> {
    match path {
        Some(p) => {
            let bytes = read_input(p)?;
            let samples = read_dataset(&mut bytes.as_slice())
                .with_context(|| format!("reading dataset {}", p.display()))?;
            Ok(Dataset {
                samples,
                input: Some(InputRecord {
                    role: "data",
                    path: p.display().to_string(),
                    sha256: content_hash(&bytes),
                }),
            })
        }
        None => Ok(Dataset {
            samples: generate_synthetic(&cfg.data)?,
            input: None,
        }),
    }
}

fn load_params(path: &Path) -> Result<(EncoderParams, InputRecord)> {
    let bytes = read_input(path)?;
    // a training checkpoint starts with the query encoder's parameter block
    let params = EncoderParams::read_from(&mut bytes.as_slice())
        .with_context(|| format!("reading encoder parameters from {}", path.display()))?;
    Ok((
        params,
        InputRecord {
            role: "checkpoint",
            path: path.display().to_string(),
            sha256: content_hash(&bytes),
        },
    ))
}

fn config_input(path: Option<&Path>) -> Result<Option<InputRecord>> {
    path.map(|p| {
        Ok(InputRecord {
            role: "config",
            path: p.display().to_string(),
            sha256: content_hash(&read_input(p)?),
        })
    })
    .transpose()
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateReport {
    pub path: String,
    pub samples: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub sha256: String,
}

pub fn generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GenerateReport> {
    ensure_dir(out_dir)?;
    let samples = generate_synthetic(&cfg.data)?;
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &samples)?;
    let path = out_dir.join(DATASET_FILE);
    write_atomic(&path, &bytes)?;
    Ok(GenerateReport {
        path: path.display().to_string(),
        samples: samples.len(),
        classes: cfg.data.num_classes,
        input_dim: cfg.data.input_dim,
        sha256: content_hash(&bytes),
    })
}

/// The provenance of each headline hyperparameter: value used here next to
/// the value of the original ImageNet-scale recipe.
fn defaults_provenance(train: &TrainConfig) -> serde_json::Value {
    let reference = TrainConfig::imagenet_recipe();
    let entry = |used: f64, reference: f64| {
        json!({
            "used": used,
            "reference": reference,
            "origin": if used == reference { "imagenet recipe" } else { "desk-scale override" },
        })
    };
    json!({
        "train.alpha": entry(train.alpha, reference.alpha),
        "train.tau_con": entry(train.tau_con, reference.tau_con),
        "train.tau_ins": entry(train.tau_ins, reference.tau_ins),
        "train.ema_m": entry(train.ema_m, reference.ema_m),
        "train.base_lr": entry(train.base_lr, reference.base_lr),
        "train.sgd_momentum": entry(train.sgd_momentum, reference.sgd_momentum),
        "train.weight_decay": entry(train.weight_decay, reference.weight_decay),
        "train.queue_k": entry(train.queue_k as f64, reference.queue_k as f64),
        "train.batch_size": entry(train.batch_size as f64, reference.batch_size as f64),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub out_dir: String,
    pub steps: u64,
    pub resumed_from_step: Option<u64>,
    pub summary: RunSummary,
}

pub struct PretrainArgs<'a> {
    pub config_path: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub resume: bool,
}

/// Keeps the first `keep` lines of the metrics file and returns their records.
fn truncate_metrics(path: &Path, keep: u64) -> Result<Vec<MetricsRecord>> {
    let records = read_metrics(path)?;
    ensure!(
        records.len() as u64 >= keep,
        "{} has {} records but the checkpoint is at step {keep}",
        path.display(),
        records.len()
    );
    let kept = records[..keep as usize].to_vec();
    let mut sink = JsonlSink::new(Vec::new());
    for r in &kept {
        co2_core::trainer::MetricsSink::record(&mut sink, r)?;
    }
    write_atomic(path, &sink.into_inner())?;
    Ok(kept)
}

/// Sink that mirrors records into memory while appending them to a file.
struct TeeSink<W: Write> {
    file: JsonlSink<W>,
    records: Vec<MetricsRecord>,
}

impl<W: Write> co2_core::trainer::MetricsSink for TeeSink<W> {
    fn record(&mut self, metrics: &MetricsRecord) -> co2_core::Result<()> {
        self.file.record(metrics)?;
        self.records.push(*metrics);
        Ok(())
    }
}

pub fn pretrain(cfg: &ExperimentConfig, args: &PretrainArgs<'_>) -> Result<PretrainReport> {
    let dataset = load_dataset(args.data, cfg)?;
    let out = args.out_dir;
    ensure_dir(out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let (mut state, previous) = if args.resume && ckpt_path.exists() {
        let state = TrainState::load(&ckpt_path)
            .with_context(|| format!("loading {}", ckpt_path.display()))?;
        ensure!(
            state.config == cfg.train,
            "the configuration differs from the one stored in {}",
            ckpt_path.display()
        );
        let previous = truncate_metrics(&metrics_path, state.step)?;
        (state, previous)
    } else {
        let _ = File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?;
        (TrainState::new(&cfg.train, dataset.samples.len())?, Vec::new())
    };
    let resumed_from_step = args.resume.then_some(state.step).filter(|&s| s > 0);

    let file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut sink = TeeSink {
        file: JsonlSink::new(LineWriter::new(file)),
        records: previous,
    };
    state.run(&dataset.samples, &mut sink, None, &mut |s| {
        let mut buf = Vec::new();
        s.write_to(&mut buf)?;
        write_atomic(&ckpt_path, &buf).map_err(|e| co2_core::Co2Error::SinkFailure(format!("{e:#}")))
    })?;
    sink.file.into_inner().flush()?;

    let mut ckpt = Vec::new();
    state.write_to(&mut ckpt)?;
    write_atomic(&ckpt_path, &ckpt)?;
    let summary = summarize_run(&sink.records)?;

    let inputs: Vec<InputRecord> = config_input(args.config_path)?
        .into_iter()
        .chain(dataset.input.clone())
        .collect();
    let manifest = json!({
        "tool": "co2",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "pretrain",
        "config": cfg,
        "inputs": inputs,
        "dataset": {
            "source": if dataset.input.is_some() { "file" } else { "synthetic" },
            "samples": dataset.samples.len(),
        },
        "defaults": defaults_provenance(&cfg.train),
        "outputs": {
            "checkpoint": CHECKPOINT_FILE,
            "checkpoint_sha256": content_hash(&ckpt),
            "metrics": METRICS_FILE,
            "metrics_sha256": content_hash(&fs::read(&metrics_path)?),
        },
        "summary": summary,
    });
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(PretrainReport {
        out_dir: out.display().to_string(),
        steps: state.step,
        resumed_from_step,
        summary,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub features: &'static str,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
}

pub fn probe(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
) -> Result<ProbeReport> {
    let dataset = load_dataset(data, cfg)?;
    let loaded = checkpoint.map(load_params).transpose()?;
    let seed = cfg.train.seed;
    let result = probe_dataset(loaded.as_ref().map(|(p, _)| p), &dataset.samples, &cfg.probe, seed)?;
    Ok(ProbeReport {
        features: if loaded.is_some() { "encoder" } else { "raw" },
        accuracy: result.accuracy,
        train_accuracy: result.train_accuracy,
        seed,
        inputs: loaded.map(|(_, r)| r).into_iter().chain(dataset.input).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    #[serde(flatten)]
    pub result: FinetuneResult,
    pub num_test: usize,
    pub inputs: Vec<InputRecord>,
}

pub fn finetune(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>) -> Result<FinetuneReport> {
    let dataset = load_dataset(data, cfg)?;
    let (params, record) = load_params(checkpoint)?;
    let labelled: Vec<Sample> = dataset.samples.into_iter().filter(|s| s.label.is_some()).collect();
    let (train_idx, test_idx) = stratified_split(&labelled, 0.2, cfg.finetune.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labelled[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&train_idx), pick(&test_idx));
    let result = semi_supervised_finetune(&params, &train, &test, &cfg.finetune)?;
    Ok(FinetuneReport {
        result,
        num_test: test.len(),
        inputs: std::iter::once(record).chain(dataset.input).collect(),
    })
}

/// Outcome of one pretrain-then-probe run.
#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub probe_acc: f64,
    pub summary: RunSummary,
    #[serde(skip)]
    pub metrics: Vec<MetricsRecord>,
}

pub fn pretrain_and_probe(cfg: &ExperimentConfig, samples: &[Sample]) -> Result<ArmResult> {
    let mut metrics = Vec::new();
    let state = run_training(&cfg.train, samples, &mut metrics)?;
    let probe = probe_dataset(Some(&state.query), samples, &cfg.probe, cfg.train.seed)?;
    Ok(ArmResult {
        probe_acc: probe.accuracy,
        summary: summarize_run(&metrics)?,
        metrics,
    })
}

/// Worker count: the requested parallelism, capped by `CO2_THREADS`.
pub fn worker_count(requested: usize, jobs: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(usize::MAX);
    requested.max(1).min(cap).min(jobs.max(1))
}

/// Runs `f` over `0..jobs` on `workers` threads; results come back in job order.
fn run_pool<T: Send>(jobs: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub tau_con: f64,
    pub result: std::result::Result<ArmResult, String>,
}

pub const GRID_FILE: &str = "grid.csv";
pub const GRID_HEADER: &str = "alpha,tau_con,probe_acc,final_l_con,final_inst_acc,error";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn grid_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for c in cells {
        let _ = match &c.result {
            Ok(r) => writeln!(
                out,
                "{},{},{},{},{},",
                c.alpha, c.tau_con, r.probe_acc, r.summary.final_l_con, r.summary.final_inst_acc
            ),
            Err(e) => writeln!(out, "{},{},,,,{}", c.alpha, c.tau_con, csv_field(e)),
        };
    }
    out
}

/// Pretrains and probes every `(alpha, tau_con)` pair and writes `grid.csv`
/// plus per-cell metrics. A failing cell is recorded in the CSV.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out_dir: &Path,
    parallel: Option<usize>,
) -> Result<Vec<SweepCell>> {
    let grid: Vec<(f64, f64)> = cfg
        .sweep
        .alpha
        .iter()
        .flat_map(|&a| cfg.sweep.tau_con.iter().map(move |&t| (a, t)))
        .collect();
    ensure!(!grid.is_empty(), "the sweep grid is empty");
    let dataset = load_dataset(data, cfg)?;
    ensure_dir(out_dir)?;
    let cells_dir = out_dir.join("cells");
    ensure_dir(&cells_dir)?;

    let workers = worker_count(parallel.unwrap_or(cfg.sweep.parallel), grid.len());
    let cells = run_pool(grid.len(), workers, |i| {
        let (alpha, tau_con) = grid[i];
        let mut cell_cfg = cfg.clone();
        cell_cfg.train.alpha = alpha;
        cell_cfg.train.tau_con = tau_con;
        let result = pretrain_and_probe(&cell_cfg, &dataset.samples).map_err(|e| format!("{e:#}"));
        SweepCell {
            alpha,
            tau_con,
            result,
        }
    });
    for c in &cells {
        if let Ok(r) = &c.result {
            let mut sink = JsonlSink::new(Vec::new());
            for m in &r.metrics {
                co2_core::trainer::MetricsSink::record(&mut sink, m)?;
            }
            let name = format!("alpha={}_tau_con={}.jsonl", c.alpha, c.tau_con);
            write_atomic(&cells_dir.join(name), &sink.into_inner())?;
        }
    }
    write_atomic(&out_dir.join(GRID_FILE), grid_csv(&cells).as_bytes())?;
    Ok(cells)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| CliError::BadPath {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CliError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub const CURVES_HEADER: &str = "run,step,metric,value";

/// Long-format CSV of the three training curves; the run id is the path.
pub fn curves(paths: &[PathBuf]) -> Result<String> {
    ensure!(!paths.is_empty(), "at least one metrics file is required");
    let mut out = format!("{CURVES_HEADER}\n");
    for p in paths {
        let run = csv_field(&p.display().to_string());
        for r in read_metrics(p)? {
            for (name, v) in [("l_ins", r.l_ins), ("l_con", r.l_con), ("inst_acc", r.inst_acc)] {
                let _ = writeln!(out, "{run},{},{name},{v}", r.step);
            }
        }
    }
    Ok(out)
}

/// Gap by which label smoothing trailed plain MoCo at full scale, in points.
pub const SMOOTHING_REFERENCE_GAP: f64 = 2.4;

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub arm: &'static str,
    pub alpha: f64,
    pub smoothing_eps: f64,
    #[serde(flatten)]
    pub result: ArmResult,
}

/// MoCo, MoCo with label smoothing and MoCo with the consistency term, all
/// from the same seed and data. Writes `summary.json` and `comparison.csv`.
pub fn ablate_smoothing(
    cfg: &ExperimentConfig,
    eps: f64,
    data: Option<&Path>,
    out_dir: &Path,
) -> Result<serde_json::Value> {
    ensure!((0.0..1.0).contains(&eps), "eps must lie in [0, 1), got {eps}");
    if cfg.train.alpha <= 0.0 {
        bail!("train.alpha must be positive for the consistency arm");
    }
    let dataset = load_dataset(data, cfg)?;
    ensure_dir(out_dir)?;
    let arms = [
        ("moco", 0.0, 0.0),
        ("moco+ls", 0.0, eps),
        ("moco+co2", cfg.train.alpha, 0.0),
    ];
    let mut reports = Vec::new();
    for (arm, alpha, smoothing_eps) in arms {
        let mut c = cfg.clone();
        c.train.alpha = alpha;
        c.train.smoothing_eps = smoothing_eps;
        let result = pretrain_and_probe(&c, &dataset.samples).with_context(|| format!("arm {arm}"))?;
        reports.push(ArmReport {
            arm,
            alpha,
            smoothing_eps,
            result,
        });
    }
    let (moco, ls, co2) = (&reports[0].result, &reports[1].result, &reports[2].result);
    let rows = compare_runs(&moco.summary, &co2.summary, Some((moco.probe_acc, co2.probe_acc)));
    write_atomic(&out_dir.join("comparison.csv"), comparison_csv(&rows).as_bytes())?;

    let ls_delta = ls.probe_acc - moco.probe_acc;
    let summary = json!({
        "eps": eps,
        "seed": cfg.train.seed,
        "arms": reports,
        "expectation": {
            "metric": "probe_acc",
            "moco+ls_vs_moco": Direction::Decrease,
            "reference_gap_points": SMOOTHING_REFERENCE_GAP,
            "reference_scale": "ImageNet-100, full training",
        },
        "observed": {
            "moco+ls_vs_moco_delta_points": 100.0 * ls_delta,
            "moco+ls_vs_moco": Direction::of(ls_delta),
            "moco+co2_vs_moco_delta_points": 100.0 * (co2.probe_acc - moco.probe_acc),
        },
        "inputs": dataset.input.into_iter().collect::<Vec<_>>(),
    });
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

//! End-to-end commands: pretrain, stream, report and ablate.
//!
//! Run directory layout:
//!
//! ```text
//! config.txt            resolved configuration
//! pretrain_log.jsonl    per-batch pretraining log      (pretrain)
//! pretrain_metrics.json                                (pretrain)
//! checkpoint/           learner after pretraining      (pretrain)
//! log.jsonl             per-batch stream log           (stream)
//! tasks/task_<t>/       learner, buffer and rng after task t
//! accuracy.csv          run_id,task,eval_task,accuracy
//! summary.json          final metrics and the paired-test batch series
//! activations/          block activation maps as CSV grids
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{is_known_key, RunConfig, OUT_ROOT_ENV};
use crate::error::{Error, Result};
use crate::eval::{
    batch_paired_ttest, block_activation_map, correctness, filter_runs, top1_all_seen, write_activation_csv,
    write_ttest_csv, AccuracyMatrix, BatchPartition, TTest, FILTER_THRESHOLDS,
};
use crate::stream::{build_tasks, load_manifest, synth_stream_generate, Dataset, Sample, TaskSchedule};
use crate::trainer::{offline_task, pretrain, stream_task, BatchLog, Learner, Mode, StreamState};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn append_log(path: &Path, lines: &[BatchLog]) -> Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        for (name, v) in [("loss_direct", line.loss_direct), ("loss_codebook", line.loss_codebook)] {
            if v.is_some_and(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{name} at task {} batch {}",
                    line.task, line.batch
                )));
            }
        }
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Relative paths resolve under `$CRUMB_OUT_ROOT`, like `run.out_dir`.
fn rooted(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    }
}

/// Training and test samples for the stream (or pretraining) phase.
pub fn load_dataset(cfg: &RunConfig, pretrain_phase: bool) -> Result<Dataset> {
    match cfg.raw("data.source")? {
        "synthetic" => synth_stream_generate(&cfg.synth(pretrain_phase)?),
        "manifest" => {
            let frames: u32 = cfg.get("data.frames_per_instance")?;
            let frames = (frames > 0).then_some(frames);
            let (train_key, test_key) = if pretrain_phase {
                ("data.pretrain_manifest", "data.pretrain_test_manifest")
            } else {
                ("data.train_manifest", "data.test_manifest")
            };
            let train_path = cfg.raw(train_key)?;
            if train_path.is_empty() {
                return Err(Error::Config(format!("missing required key `{train_key}`")));
            }
            let train = load_manifest(Path::new(train_path), frames)?;
            let test_path = cfg.raw(test_key)?;
            let test = if test_path.is_empty() {
                if !pretrain_phase {
                    return Err(Error::Config(format!("missing required key `{test_key}`")));
                }
                Vec::new()
            } else {
                load_manifest(Path::new(test_path), frames)?
            };
            Ok(Dataset { train, test })
        }
        other => Err(Error::Config(format!(
            "invalid value `{other}` for `data.source` (synthetic, manifest)"
        ))),
    }
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.check_required()?;
    let out = cfg.out_dir()?;
    create_dir(&out)?;
    write_text(&out.join("config.txt"), &cfg.resolved_text())?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epochs: usize,
    pub steps: u64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Pretrains on the held-out classes and writes `checkpoint/`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainMetrics> {
    let train_cfg = cfg.train()?;
    let book_cfg = cfg.codebook()?;
    let out = prepare_out_dir(cfg)?;
    let data = load_dataset(cfg, true)?;
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Data("empty pretraining set".into()))?;
    let spec = cfg.network(first.image.shape())?;
    let mut learner = Learner::init(&spec, &book_cfg, &data.train, train_cfg.seed)?;
    let log = pretrain(&mut learner, &data.train, &train_cfg)?;
    let log_path = out.join("pretrain_log.jsonl");
    write_text(&log_path, "")?;
    append_log(&log_path, &log)?;
    let metrics = PretrainMetrics {
        epochs: train_cfg.pretrain_epochs,
        steps: learner.steps,
        train_accuracy: top1_all_seen(&learner, &data.train)?,
        test_accuracy: if data.test.is_empty() {
            None
        } else {
            Some(top1_all_seen(&learner, &data.test)?)
        },
    };
    write_json(&out.join("pretrain_metrics.json"), &metrics)?;
    learner.save(&out.join("checkpoint"))?;
    Ok(metrics)
}

/// Identifies the test set and batch split the paired series were drawn on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionKey {
    pub seed: u64,
    pub batch_size: usize,
    pub test_count: usize,
    /// FNV-1a over the test labels in order.
    pub label_digest: u64,
}

fn label_digest(samples: &[&Sample]) -> u64 {
    samples.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, s| {
        s.class_id
            .to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub run_id: String,
    pub label: String,
    pub mode: String,
    pub seed: u64,
    pub tasks: usize,
    pub tasks_completed: usize,
    pub first_task_accuracy: f64,
    pub final_all_seen: f64,
    pub matrix: AccuracyMatrix,
    pub partition: PartitionKey,
    pub batch_accuracies: Vec<f64>,
    pub buffer_len: usize,
    pub buffer_bytes: usize,
}

/// Progress saved next to each task checkpoint.
#[derive(Serialize, Deserialize)]
struct Progress {
    matrix: AccuracyMatrix,
}

fn task_dir(out: &Path, t: usize) -> PathBuf {
    out.join("tasks").join(format!("task_{t}"))
}

/// The most recent complete task checkpoint, if any.
fn latest_checkpoint(out: &Path, tasks: usize) -> Option<usize> {
    (1..=tasks)
        .rev()
        .find(|&t| task_dir(out, t).join("progress.json").exists())
}

fn truncate_log(path: &Path, tasks_done: usize) -> Result<()> {
    if !path.exists() {
        return write_text(path, "");
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let entry: BatchLog = serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
        if entry.task <= tasks_done {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

/// Unique training indices of tasks `0..=t`.
fn seen_indices(schedule: &TaskSchedule, t: usize) -> Vec<usize> {
    let mut seen: Vec<usize> = schedule.tasks[..=t]
        .iter()
        .flat_map(|task| task.order.iter().copied())
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen
}

pub struct StreamOutcome {
    pub out_dir: PathBuf,
    /// `None` when the run stopped early via `run.stop_after_task`.
    pub summary: Option<RunSummary>,
}

/// Runs the stream schedule from the pretrained checkpoint, resuming from
/// the latest task checkpoint in the output directory.
pub fn run_stream(cfg: &RunConfig) -> Result<StreamOutcome> {
    let train_cfg = cfg.train()?;
    cfg.check_required()?;
    let pretrain_dir = cfg.raw("run.pretrain_dir")?;
    if pretrain_dir.is_empty() {
        return Err(Error::Config("missing required key `run.pretrain_dir`".into()));
    }
    let pretrained = Learner::load(&rooted(pretrain_dir).join("checkpoint"))?;
    let book_cfg = cfg.codebook()?;
    if (book_cfg.blocks, book_cfg.block_dim) != (pretrained.codebook.n(), pretrained.codebook.d()) {
        return Err(Error::Data(format!(
            "checkpoint/geometry mismatch: configured codebook {}x{} but checkpoint holds {}x{} for feature map {:?}",
            book_cfg.blocks,
            book_cfg.block_dim,
            pretrained.codebook.n(),
            pretrained.codebook.d(),
            pretrained.net.feature_shape()
        )));
    }
    let data = load_dataset(cfg, false)?;
    if let Some(s) = data
        .train
        .iter()
        .chain(&data.test)
        .find(|s| s.image.shape() != pretrained.net.input_shape())
    {
        return Err(Error::Data(format!(
            "image shape {:?} does not match the network input {:?}",
            s.image.shape(),
            pretrained.net.input_shape()
        )));
    }
    let epochs: usize = cfg.get("protocol.first_task_epochs")?;
    let schedule = build_tasks(
        &data.train,
        cfg.get("protocol.classes_per_task")?,
        cfg.protocol()?,
        epochs,
        train_cfg.seed,
    )?;
    let task_classes: Vec<Vec<u32>> = schedule.tasks.iter().map(|t| t.classes.clone()).collect();
    let out = prepare_out_dir(cfg)?;
    let log_path = out.join("log.jsonl");

    let (mut state, mut matrix) = match latest_checkpoint(&out, schedule.tasks.len()) {
        Some(t) => {
            let dir = task_dir(&out, t);
            let progress: Progress = read_json(&dir.join("progress.json"))?;
            (StreamState::load(&dir)?, progress.matrix)
        }
        None => (StreamState::new(pretrained, &train_cfg)?, AccuracyMatrix::default()),
    };
    truncate_log(&log_path, state.tasks_done)?;

    let stop_after: usize = cfg.get("run.stop_after_task")?;
    for t in state.tasks_done..schedule.tasks.len() {
        let task = &schedule.tasks[t];
        let log = if train_cfg.mode == Mode::UpperBound {
            offline_task(
                &mut state,
                &data.train,
                &task.classes,
                &seen_indices(&schedule, t),
                &train_cfg,
            )?
        } else {
            let first_pass = if t == 0 {
                task.order.len() / epochs
            } else {
                task.order.len()
            };
            stream_task(&mut state, &data.train, task, first_pass, &train_cfg)?
        };
        append_log(&log_path, &log)?;
        matrix.record(&state.learner, &data.test, &task_classes)?;

        let dir = task_dir(&out, t + 1);
        let tmp = out.join("tasks").join(format!(".task_{}.partial", t + 1));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        state.save(&tmp)?;
        write_json(&tmp.join("progress.json"), &Progress { matrix: matrix.clone() })?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;

        if stop_after > 0 && t + 1 == stop_after && t + 1 < schedule.tasks.len() {
            return Ok(StreamOutcome {
                out_dir: out,
                summary: None,
            });
        }
    }

    let run_id = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let csv_path = out.join("accuracy.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    matrix.write_csv(BufWriter::new(file), &run_id, true)?;

    let seen_test: Vec<&Sample> = data
        .test
        .iter()
        .filter(|s| state.learner.classes.contains(&s.class_id))
        .collect();
    let partition = BatchPartition::new(
        seen_test.len(),
        cfg.get("eval.batch_size")?,
        cfg.get("eval.partition_seed")?,
    )?;
    let batch_accuracies = partition.accuracies(&correctness(&state.learner, &seen_test)?)?;

    let shown: usize = cfg.get("eval.activation_images")?;
    if shown > 0 {
        let dir = out.join("activations");
        create_dir(&dir)?;
        let slot: usize = cfg.get("eval.activation_slot")?;
        for (i, s) in data.test.iter().take(shown).enumerate() {
            let grid = block_activation_map(&state.learner, &s.image, slot)?;
            let path = dir.join(format!("test_{i}_class_{}_slot_{slot}.csv", s.class_id));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_activation_csv(BufWriter::new(file), &grid)?;
        }
    }

    let summary = RunSummary {
        format_version: 1,
        run_id,
        label: cfg.label()?,
        mode: train_cfg.mode.to_string(),
        seed: train_cfg.seed,
        tasks: schedule.tasks.len(),
        tasks_completed: matrix.tasks(),
        first_task_accuracy: matrix.rows[0][0],
        final_all_seen: *matrix.all_seen.last().expect("at least one task"),
        matrix,
        partition: PartitionKey {
            seed: partition.seed,
            batch_size: partition.batch_size,
            test_count: partition.test_count,
            label_digest: label_digest(&seen_test),
        },
        batch_accuracies,
        buffer_len: state.buffer.as_ref().map_or(0, |b| b.len()),
        buffer_bytes: state.buffer.as_ref().map_or(0, |b| b.stored_bytes()),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(StreamOutcome {
        out_dir: out,
        summary: Some(summary),
    })
}

pub struct ReportOutcome {
    pub runs: Vec<RunSummary>,
    pub kept: Vec<bool>,
    pub comparisons: Vec<(String, TTest)>,
}

fn paired_series(a: &[&RunSummary], b: &[&RunSummary]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ra in a {
        if let Some(rb) = b.iter().find(|r| r.seed == ra.seed) {
            xs.extend_from_slice(&ra.batch_accuracies);
            ys.extend_from_slice(&rb.batch_accuracies);
        }
    }
    (xs, ys)
}

/// Aggregates finished runs: concatenated accuracy matrices, a run table, and
/// paired t-tests between labels (runs paired by seed), or between individual
/// runs when all share one label.
pub fn run_report(run_dirs: &[PathBuf], out: &Path, filter: bool) -> Result<ReportOutcome> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let mut runs: Vec<RunSummary> = run_dirs
        .iter()
        .map(|d| read_json(&d.join("summary.json")))
        .collect::<Result<_>>()?;
    runs.sort_by(|a, b| (&a.label, a.seed, &a.run_id).cmp(&(&b.label, b.seed, &b.run_id)));
    let reference = &runs[0];
    if let Some(bad) = runs.iter().find(|r| r.partition != reference.partition) {
        return Err(Error::Data(format!(
            "incompatible batch partitions: run `{}` {:?} vs run `{}` {:?}",
            bad.run_id, bad.partition, reference.run_id, reference.partition
        )));
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        groups.entry(r.label.as_str()).or_default().push(i);
    }
    let mut kept = vec![!filter; runs.len()];
    if filter {
        for members in groups.values() {
            let firsts: Vec<f64> = members.iter().map(|&i| runs[i].first_task_accuracy).collect();
            for j in filter_runs(&firsts, &FILTER_THRESHOLDS) {
                kept[members[j]] = true;
            }
        }
    }

    let mut comparisons = Vec::new();
    let members =
        |label: &str| -> Vec<&RunSummary> { groups[label].iter().filter(|&&i| kept[i]).map(|&i| &runs[i]).collect() };
    let labels: Vec<&str> = groups.keys().copied().collect();
    if labels.len() >= 2 {
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                let (xs, ys) = paired_series(&members(a), &members(b));
                if xs.len() >= 2 {
                    comparisons.push((format!("{a} vs {b}"), batch_paired_ttest(&xs, &ys)?));
                }
            }
        }
    } else {
        let only = members(labels[0]);
        for (i, a) in only.iter().enumerate() {
            for b in &only[i + 1..] {
                if a.batch_accuracies.len() >= 2 {
                    comparisons.push((
                        format!("{} vs {}", a.run_id, b.run_id),
                        batch_paired_ttest(&a.batch_accuracies, &b.batch_accuracies)?,
                    ));
                }
            }
        }
    }

    create_dir(out)?;
    let acc_path = out.join("accuracy.csv");
    let mut acc = BufWriter::new(File::create(&acc_path).map_err(|e| Error::io(&acc_path, e))?);
    for (i, r) in runs.iter().enumerate() {
        r.matrix.write_csv(&mut acc, &r.run_id, i == 0)?;
    }
    acc.flush().map_err(|e| Error::io(&acc_path, e))?;

    let runs_path = out.join("runs.csv");
    let mut table = csv::Writer::from_path(&runs_path).map_err(|e| Error::format(&runs_path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Data(format!("writing run table: {e}"));
    table
        .write_record([
            "run_id",
            "label",
            "seed",
            "first_task_accuracy",
            "final_all_seen",
            "kept",
        ])
        .map_err(csv_err)?;
    for (r, k) in runs.iter().zip(&kept) {
        table
            .write_record([
                r.run_id.as_str(),
                &r.label,
                &r.seed.to_string(),
                &format!("{:.6}", r.first_task_accuracy),
                &format!("{:.6}", r.final_all_seen),
                &k.to_string(),
            ])
            .map_err(csv_err)?;
    }
    table.flush().map_err(|e| Error::io(&runs_path, e))?;

    if !comparisons.is_empty() {
        let path = out.join("ttest.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_ttest_csv(BufWriter::new(file), &comparisons)?;
    }
    Ok(ReportOutcome {
        runs,
        kept,
        comparisons,
    })
}

/// Keys whose change invalidates a shared pretraining checkpoint.
fn affects_pretraining(key: &str) -> bool {
    [
        "net.",
        "codebook.",
        "synth.",
        "data.pretrain",
        "train.pretrain_",
        "train.learning_rate",
        "train.batch_size",
    ]
    .iter()
    .any(|p| key.starts_with(p))
}

/// One `key=v1,v2,...` axis of an ablation grid.
pub fn parse_grid_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis `{spec}` is not `key=v1,v2`")))?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid axis `{key}` has no values")));
    }
    Ok((key.trim().to_string(), values))
}

/// Expands the Cartesian product of `axes` into child runs under
/// `run.out_dir`, runs each, and reports them into `<out_dir>/report`.
/// Children pretrain for themselves when no shared checkpoint is configured
/// or an axis changes pretraining.
pub fn run_ablate(cfg: &RunConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<PathBuf>> {
    if axes.is_empty() {
        return Err(Error::Config("ablate needs at least one --grid axis".into()));
    }
    let base = prepare_out_dir(cfg)?;
    let own_pretrain = cfg.raw("run.pretrain_dir")?.is_empty() || axes.iter().any(|(k, _)| affects_pretraining(k));
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        if !is_known_key(key) {
            return Err(Error::Config(format!("unknown grid key `{key}`")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    let mut grid = String::from("child");
    for (k, _) in axes {
        grid.push(',');
        grid.push_str(k);
    }
    grid.push('\n');
    let mut children = Vec::new();
    for combo in combos {
        let name: String = combo
            .iter()
            .map(|(k, v)| {
                let short = k.rsplit('.').next().unwrap_or(k);
                format!("{short}-{v}")
            })
            .collect::<Vec<_>>()
            .join("__")
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let dir = base.join(&name);
        let mut child = cfg.clone();
        for (k, v) in &combo {
            child.set(k, v.clone())?;
        }
        child.set("run.out_dir", dir.to_string_lossy().into_owned())?;
        if own_pretrain {
            let pre = dir.join("pretrain");
            let mut pre_cfg = child.clone();
            pre_cfg.set("run.out_dir", pre.to_string_lossy().into_owned())?;
            run_pretrain(&pre_cfg)?;
            child.set("run.pretrain_dir", pre.to_string_lossy().into_owned())?;
        }
        run_stream(&child)?;
        grid.push_str(&name);
        for (_, v) in &combo {
            grid.push(',');
            grid.push_str(v);
        }
        grid.push('\n');
        children.push(dir);
    }
    write_text(&base.join("grid.csv"), &grid)?;
    run_report(&children, &base.join("report"), false)?;
    Ok(children)
}

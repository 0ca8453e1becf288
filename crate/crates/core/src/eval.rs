//! Accuracy bookkeeping, the batch-paired t-test, run filtering, and block
//! activation maps.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::stream::{fisher_yates, Sample};
use crate::tensor::Tensor;
use crate::trainer::Learner;

/// Test images per paired-test batch.
pub const TEST_BATCH: usize = 100;

/// Default run-filter thresholds on first-task accuracy, tried in order.
pub const FILTER_THRESHOLDS: [f64; 3] = [0.8, 0.6, 0.4];

/// Fraction of positions where `predicted` equals `labels`.
pub fn top1(predicted: &[u32], labels: &[u32]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-sample correctness of `learner` on `test`.
pub fn correctness(learner: &Learner, test: &[&Sample]) -> Result<Vec<bool>> {
    test.iter()
        .map(|s| Ok(learner.predict(&s.image)? == s.class_id))
        .collect()
}

/// Top-1 accuracy on the test samples whose class is in `classes`.
pub fn top1_on_classes(learner: &Learner, test: &[Sample], classes: &[u32]) -> Result<f64> {
    let subset: Vec<&Sample> = test.iter().filter(|s| classes.contains(&s.class_id)).collect();
    if subset.is_empty() {
        return Err(Error::InvalidArgument(
            "no test samples for the requested classes".into(),
        ));
    }
    let hits = correctness(learner, &subset)?.into_iter().filter(|&c| c).count();
    Ok(hits as f64 / subset.len() as f64)
}

/// Top-1 accuracy on the test samples of every class the learner has seen.
pub fn top1_all_seen(learner: &Learner, test: &[Sample]) -> Result<f64> {
    top1_on_classes(learner, test, &learner.classes)
}

/// `rows[t][j]`: accuracy on task `j`'s test data after training task `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub all_seen: Vec<f64>,
}

impl AccuracyMatrix {
    /// Evaluates `learner` after task `rows.len()` and appends the row.
    pub fn record(&mut self, learner: &Learner, test: &[Sample], task_classes: &[Vec<u32>]) -> Result<()> {
        let t = self.rows.len();
        if t >= task_classes.len() {
            return Err(Error::InvalidArgument(format!("no classes listed for task {}", t + 1)));
        }
        let row = task_classes[..=t]
            .iter()
            .map(|c| top1_on_classes(learner, test, c))
            .collect::<Result<Vec<_>>>()?;
        self.rows.push(row);
        self.all_seen.push(top1_all_seen(learner, test)?);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// Rows as `run_id,task,eval_task,accuracy` records; tasks are 1-based and
    /// the all-seen accuracy uses `eval_task = all`.
    pub fn write_csv<W: Write>(&self, w: W, run_id: &str, header: bool) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        let csv_err = |e: csv::Error| Error::Data(format!("writing accuracy CSV: {e}"));
        if header {
            out.write_record(["run_id", "task", "eval_task", "accuracy"])
                .map_err(csv_err)?;
        }
        for (t, row) in self.rows.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                out.write_record([run_id, &(t + 1).to_string(), &(j + 1).to_string(), &format!("{a:.6}")])
                    .map_err(csv_err)?;
            }
            out.write_record([run_id, &(t + 1).to_string(), "all", &format!("{:.6}", self.all_seen[t])])
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Evaluates one learner snapshot per completed task.
pub fn accuracy_matrix(snapshots: &[Learner], test: &[Sample], task_classes: &[Vec<u32>]) -> Result<AccuracyMatrix> {
    if snapshots.len() > task_classes.len() {
        return Err(Error::InvalidArgument("more snapshots than tasks".into()));
    }
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument("missing checkpoint for task 1".into()));
    }
    let mut m = AccuracyMatrix::default();
    for learner in snapshots {
        m.record(learner, test, task_classes)?;
    }
    Ok(m)
}

/// A fixed split of a test set into equal batches; the trailing remainder is
/// dropped. Runs are comparable only when their partitions are equal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPartition {
    pub seed: u64,
    pub batch_size: usize,
    pub test_count: usize,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPartition {
    pub fn new(test_count: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..test_count).collect();
        fisher_yates(&mut order, &mut ChaCha8Rng::seed_from_u64(seed));
        let batches = order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect();
        Ok(Self {
            seed,
            batch_size,
            test_count,
            batches,
        })
    }

    /// Per-batch accuracy from per-sample correctness.
    pub fn accuracies(&self, correct: &[bool]) -> Result<Vec<f64>> {
        if correct.len() != self.test_count {
            return Err(Error::InvalidArgument(format!(
                "partition covers {} samples, got {}",
                self.test_count,
                correct.len()
            )));
        }
        Ok(self
            .batches
            .iter()
            .map(|b| b.iter().filter(|&&i| correct[i]).count() as f64 / b.len() as f64)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired t-test on `a[i] - b[i]`, two-sided. All-zero differences give
/// `t = 0, p = 1`; constant non-zero differences give an infinite `t`, `p = 0`.
pub fn batch_paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired series differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                df,
                p: 0.0,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// Indices of runs whose first-task accuracy clears the first threshold that
/// admits any run; all runs when none does.
pub fn filter_runs(first_task_accuracy: &[f64], thresholds: &[f64]) -> Vec<usize> {
    for &th in thresholds {
        let kept: Vec<usize> = (0..first_task_accuracy.len())
            .filter(|&i| first_task_accuracy[i] >= th)
            .collect();
        if !kept.is_empty() {
            return kept;
        }
    }
    (0..first_task_accuracy.len()).collect()
}

/// Block index chosen at every spatial cell for chunk slot `slot`, as
/// `grid[x][y]`.
pub fn block_activation_map(learner: &Learner, image: &Tensor, slot: usize) -> Result<Vec<Vec<u16>>> {
    let g = learner.geometry;
    if slot >= g.chunk_slots() {
        return Err(Error::InvalidArgument(format!(
            "chunk slot {slot} outside 0..{}",
            g.chunk_slots()
        )));
    }
    let z = learner.net.extract(image.clone())?;
    let (map, _) = learner.quantize(&z)?;
    Ok((0..g.width)
        .map(|x| (0..g.height).map(|y| map.get(slot, x, y)).collect())
        .collect())
}

/// One CSV line per grid row.
pub fn write_activation_csv<W: Write>(w: W, grid: &[Vec<u16>]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in grid {
        out.write_record(row.iter().map(u16::to_string))
            .map_err(|e| Error::Data(format!("writing activation CSV: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

/// `comparison,t,df,p` table.
pub fn write_ttest_csv<W: Write>(w: W, rows: &[(String, TTest)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Data(format!("writing t-test CSV: {e}"));
    out.write_record(["comparison", "t", "df", "p"]).map_err(csv_err)?;
    for (name, r) in rows {
        out.write_record([
            name.as_str(),
            &format!("{:.6}", r.t),
            &r.df.to_string(),
            &format!("{:.6e}", r.p),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

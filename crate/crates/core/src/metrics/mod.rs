//! Accuracy bookkeeping, confusion matrices and static cost analysis.

mod flops;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use flops::{
    backbone_architecture, builtin_architecture, dynamic_inference_cost, flops_of, parse_architecture,
    read_architecture, Architecture, InferenceCost, LayerKind, LayerReport, LayerSpec, PoolMode, FlopsReport,
    Shape3, RESNET18_ADAPTERS_ARCH, RESNET18_ARCH,
};

use crate::data::ClassId;
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{Real, Tensor};

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = logits.dims2()?;
    let d = logits.data();
    Ok((0..n)
        .map(|r| {
            let row = &d[r * k..(r + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy_percent(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(shape_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return Err(invalid!("accuracy of an empty split is undefined"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Accuracy of argmax(`logits`) against slot labels, in percent.
pub fn task_accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    accuracy_percent(&argmax_rows(logits)?, labels)
}

pub fn average_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(invalid!("average accuracy needs at least one task"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Accuracy on all seen classes after each task, in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    accuracies: Vec<f64>,
}

impl AccuracyRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: f64) -> Result<()> {
        if !(0.0..=100.0).contains(&a) {
            return Err(invalid!("accuracy {a} outside [0, 100]"));
        }
        self.accuracies.push(a);
        Ok(())
    }

    pub fn accuracies(&self) -> &[f64] {
        &self.accuracies
    }

    pub fn len(&self) -> usize {
        self.accuracies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accuracies.is_empty()
    }

    /// Mean over the first `t` tasks.
    pub fn average_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.accuracies.len() {
            return Err(invalid!("no average for t={t} with {} tasks recorded", self.accuracies.len()));
        }
        average_accuracy(&self.accuracies[..t])
    }

    pub fn average(&self) -> Result<f64> {
        average_accuracy(&self.accuracies)
    }

    pub fn last(&self) -> Option<f64> {
        self.accuracies.last().copied()
    }

    /// `task_id,A_i,avg_acc_so_far` rows, full round-trip precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["task_id", "A_i", "avg_acc_so_far"]).map_err(|e| csv_err(path, e))?;
        for (i, a) in self.accuracies.iter().enumerate() {
            let avg = self.average_at(i + 1)?;
            w.write_record([(i + 1).to_string(), a.to_string(), avg.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Rows of a metrics CSV as `(task_id, A_i, avg_acc_so_far)`.
    pub fn read_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut rows = Vec::new();
        for (i, rec) in r.deserialize().enumerate() {
            let row: (usize, f64, f64) = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(rows)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("accessing {}", path.display()), io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// `counts[r*k + c]` = samples of true class `r` predicted as `c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(shape_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let mut counts = vec![0; k * k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(invalid!("class index {} outside 0..{k}", p.max(l)));
        }
        counts[l * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.k.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// Percent; `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| 100.0 * self.trace() as f64 / total as f64)
    }

    /// Header row of class ids, then one row per true class.
    pub fn write_csv(&self, path: &Path, classes: &[ClassId]) -> Result<()> {
        if classes.len() != self.k {
            return Err(shape_err!("{} class ids for a {}x{} matrix", classes.len(), self.k, self.k));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["true\\pred".to_string()];
        header.extend(classes.iter().map(ToString::to_string));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (r, c) in classes.iter().enumerate() {
            let mut row = vec![c.to_string()];
            row.extend(self.counts[r * self.k..(r + 1) * self.k].iter().map(ToString::to_string));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_csv(path: &Path) -> Result<(Vec<ClassId>, Self)> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let rows: Vec<csv::StringRecord> = r
            .records()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(path, e))?;
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = rows.first().ok_or_else(|| bad(1, "empty confusion matrix file".into()))?;
        let classes: Vec<ClassId> = header
            .iter()
            .skip(1)
            .map(|s| s.parse().map_err(|_| bad(1, format!("bad class id `{s}`"))))
            .collect::<Result<_>>()?;
        let k = classes.len();
        if rows.len() != k + 1 {
            return Err(bad(rows.len(), format!("expected {k} matrix rows")));
        }
        let mut counts = Vec::with_capacity(k * k);
        for (i, row) in rows.iter().enumerate().skip(1) {
            if row.len() != k + 1 {
                return Err(bad(i + 1, format!("expected {} fields", k + 1)));
            }
            for s in row.iter().skip(1) {
                counts.push(s.parse().map_err(|_| bad(i + 1, format!("bad count `{s}`")))?);
            }
        }
        Ok((classes, Self { k, counts }))
    }
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        let perfect = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(task_accuracy(&perfect, &[0, 1]).unwrap(), 100.0);
        let constant = Tensor::new(vec![4, 2], vec![0.0f32; 8]).unwrap();
        assert_eq!(argmax_rows(&constant).unwrap(), vec![0; 4]);
        assert_eq!(task_accuracy(&constant, &[0, 1, 0, 1]).unwrap(), 50.0);
        assert!(accuracy_percent(&[], &[]).is_err());
        assert!(accuracy_percent(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn random_logits_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::from_fn(&[10_000, 10], |_| rng.random::<f64>());
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let a = task_accuracy(&logits, &labels).unwrap();
        assert!((a - 10.0).abs() <= 1.0, "{a}");
    }

    #[test]
    fn average_examples() {
        assert_eq!(average_accuracy(&[100.0, 100.0]).unwrap(), 100.0);
        assert_eq!(average_accuracy(&[90.0, 70.0, 50.0]).unwrap(), 70.0);
        assert!(average_accuracy(&[]).is_err());
        let mut r = AccuracyRecord::new();
        assert!(r.push(100.5).is_err());
        r.push(80.0).unwrap();
        r.push(60.0).unwrap();
        assert_eq!(r.average_at(1).unwrap(), 80.0);
        assert_eq!(r.average().unwrap(), 70.0);
        assert_eq!(r.last(), Some(60.0));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let mut r = AccuracyRecord::new();
        for a in [97.5, 88.125, 1.0 / 3.0] {
            r.push(a).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("task_id,A_i,avg_acc_so_far\n1,97.5,97.5\n"));
        let rows = AccuracyRecord::read_csv(&p).unwrap();
        for (i, (t, a, avg)) in rows.iter().enumerate() {
            assert_eq!(*t, i + 1);
            assert_eq!(*a, r.accuracies()[i]);
            let mean = rows[..=i].iter().map(|x| x.1).sum::<f64>() / (i + 1) as f64;
            assert!((avg - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(m.counts, vec![1, 0, 0, 0, 2, 0, 0, 0, 1]);
        let zero = confusion_matrix(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        assert_eq!((zero.get(0, 0), zero.get(1, 0), zero.get(2, 0)), (1, 1, 1));
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[3], &[0], 2).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        m.write_csv(&p, &[4, 9, 2]).unwrap();
        assert_eq!(ConfusionMatrix::read_csv(&p).unwrap(), (vec![4, 9, 2], m));
    }

    proptest! {
        #[test]
        fn confusion_matches_tally(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let m = confusion_matrix(&p, &l, 5).unwrap();
            for r in 0..5 {
                for c in 0..5 {
                    let tally = pairs.iter().filter(|&&(pp, ll)| pp == c && ll == r).count() as u64;
                    prop_assert_eq!(m.get(r, c), tally);
                }
                prop_assert_eq!(m.row_sums()[r], l.iter().filter(|&&x| x == r).count() as u64);
            }
            let acc = accuracy_percent(&p, &l).unwrap();
            prop_assert!((m.accuracy().unwrap() - acc).abs() < 1e-9);
        }

        #[test]
        fn average_is_bounded(acc in proptest::collection::vec(0.0f64..=100.0, 1..20)) {
            let a = average_accuracy(&acc).unwrap();
            let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-9 <= a && a <= hi + 1e-9);
            prop_assert!((a - acc.iter().sum::<f64>() / acc.len() as f64).abs() < 1e-9);
        }
    }
}

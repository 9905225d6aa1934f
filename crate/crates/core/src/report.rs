//! CSV output with fixed headers, so empty tables still carry their schema.

use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::MetricsRecord;

pub trait CsvRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

pub fn write_csv<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(R::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<R: CsvRow>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    if header.iter().ne(R::HEADER.iter().copied()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("csv header {:?}, expected {:?}", header, R::HEADER),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Long-format metric: one value per (model, seed, metric, step).
/// `step` is the epoch for training metrics and the forecast step for
/// `rmse`; summary values use step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub seed: u64,
    pub metric: String,
    pub step: usize,
    pub value: f64,
}

impl CsvRow for MetricRow {
    const HEADER: &'static [&'static str] = &["model", "seed", "metric", "step", "value"];
}

pub fn metric_rows(records: &[MetricsRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in records {
        let mut push = |metric: &str, step: usize, value: f64| {
            rows.push(MetricRow {
                model: r.model.name().to_string(),
                seed: r.seed,
                metric: metric.to_string(),
                step,
                value,
            })
        };
        for (e, v) in r.train_loss.iter().enumerate() {
            push("train_loss", e + 1, *v);
        }
        for (e, v) in r.epoch_seconds.iter().enumerate() {
            push("epoch_seconds", e + 1, *v);
        }
        for (e, v) in r.skipped.iter().enumerate() {
            push("skipped", e + 1, *v as f64);
        }
        if let Some(ev) = &r.eval {
            for (k, v) in ev.per_step.iter().enumerate() {
                push("rmse", k + 1, *v);
            }
            push("rmse_tf", 0, ev.rmse_tf);
            push("rmse_cl", 0, ev.rmse_cl);
        }
    }
    rows
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_csv(path, &metric_rows(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::trainer::Evaluation;

    #[test]
    fn empty_table_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "model,seed,metric,step,value\n");
        assert!(read_csv::<MetricRow>(&p).unwrap().is_empty());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.csv");
        let rec = MetricsRecord {
            model: CellKind::MinConvExpLstm,
            seed: 7,
            train_loss: vec![0.5, 0.123456789012345],
            epoch_seconds: vec![1.5, 1.25],
            skipped: vec![0, 1],
            eval: Some(Evaluation {
                per_step: vec![0.1, 0.2, 0.3],
                tf: 2,
                rmse_tf: 0.15,
                rmse_cl: 0.3,
            }),
        };
        write_metrics_csv(std::slice::from_ref(&rec), &p).unwrap();
        let back: Vec<MetricRow> = read_csv(&p).unwrap();
        assert_eq!(back, metric_rows(&[rec]));
        assert_eq!(back.iter().filter(|r| r.metric == "rmse").count(), 3);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_csv::<MetricRow>(&p), Err(Error::Format { .. })));
    }
}

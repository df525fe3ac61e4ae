//! Append-only JSONL metrics log, one record per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn to_path(path: &Path) -> Result<MetricsWriter> {
        Ok(MetricsWriter { out: Some(BufWriter::new(File::create(path)?)) })
    }

    pub fn disabled() -> MetricsWriter {
        MetricsWriter { out: None }
    }

    pub fn log(&mut self, record: &MetricRecord) {
        if let Some(out) = self.out.as_mut() {
            if let Ok(line) = serde_json::to_string(record) {
                let _ = writeln!(out, "{line}");
                let _ = out.flush();
            }
        }
        match (record.loss, record.accuracy, record.iou) {
            (Some(l), Some(a), _) => {
                log::info!("epoch {} {}: loss {l:.4} acc {a:.4}", record.epoch, record.split)
            }
            (Some(l), None, Some(i)) => {
                log::info!("epoch {} {}: loss {l:.4} iou {i:.4}", record.epoch, record.split)
            }
            (Some(l), None, None) => {
                log::info!("epoch {} {}: loss {l:.4}", record.epoch, record.split)
            }
            (None, Some(a), _) => {
                log::info!("epoch {} {}: acc {a:.4}", record.epoch, record.split)
            }
            (None, None, Some(i)) => {
                log::info!("epoch {} {}: iou {i:.4}", record.epoch, record.split)
            }
            _ => {}
        }
    }
}

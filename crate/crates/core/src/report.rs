//! JSON metric files and CSV plot series.
//!
//! A training history is written as two files: `NAME.csv` with one row per
//! epoch (`epoch,loss,accuracy,acs_ratio,normalized_c,mean_timesteps`) and
//! `NAME.layers.csv` with one row per epoch and encoder layer
//! (`epoch,layer,asr`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EpochRecord;

pub const HISTORY_COLUMNS: [&str; 6] = ["epoch", "loss", "accuracy", "acs_ratio", "normalized_c", "mean_timesteps"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes any serializable rows with a header taken from the field names.
pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HistoryRow {
    epoch: usize,
    loss: f64,
    accuracy: f64,
    acs_ratio: f64,
    normalized_c: f64,
    mean_timesteps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAsrRow {
    pub epoch: usize,
    pub layer: usize,
    pub asr: f64,
}

/// The per-layer companion of a history file.
pub fn layers_path(history: &Path) -> PathBuf {
    history.with_extension("layers.csv")
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<HistoryRow> = history
        .iter()
        .map(|r| HistoryRow {
            epoch: r.epoch,
            loss: r.loss,
            accuracy: r.accuracy,
            acs_ratio: r.acs_ratio,
            normalized_c: r.normalized_c,
            mean_timesteps: r.mean_timesteps,
        })
        .collect();
    if rows.is_empty() {
        // keep the header so the file still documents its schema
        fs::write(path, format!("{}\n", HISTORY_COLUMNS.join(",")))?;
    } else {
        write_rows(path, &rows)?;
    }
    let layers: Vec<LayerAsrRow> = history
        .iter()
        .flat_map(|r| {
            r.layer_asr.iter().enumerate().map(|(l, &asr)| LayerAsrRow {
                epoch: r.epoch,
                layer: l + 1,
                asr,
            })
        })
        .collect();
    let lp = layers_path(path);
    if layers.is_empty() {
        fs::write(&lp, "epoch,layer,asr\n")?;
        Ok(())
    } else {
        write_rows(lp, &layers)
    }
}

/// Reads a history written by [`write_history`]; the per-layer file is
/// optional.
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let h: HistoryRow = row.map_err(|e| csv_error(path, e))?;
        out.push(EpochRecord {
            epoch: h.epoch,
            loss: h.loss,
            accuracy: h.accuracy,
            acs_ratio: h.acs_ratio,
            normalized_c: h.normalized_c,
            mean_timesteps: h.mean_timesteps,
            layer_asr: Vec::new(),
        });
    }
    let lp = layers_path(path);
    if lp.exists() {
        let mut r = csv::Reader::from_path(&lp).map_err(|e| csv_error(&lp, e))?;
        for row in r.deserialize() {
            let l: LayerAsrRow = row.map_err(|e| csv_error(&lp, e))?;
            if let Some(rec) = out.iter_mut().find(|h| h.epoch == l.epoch) {
                rec.layer_asr.push(l.asr);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAsrRow {
    pub run: String,
    pub epoch: usize,
    pub layer: usize,
    pub asr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetricRow {
    pub run: String,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub acs_ratio: f64,
    pub normalized_c: f64,
    pub mean_timesteps: f64,
}

/// Names of the files [`render_histories`] writes.
pub const FIGURE_FILES: [&str; 3] = ["asr_per_layer.csv", "normalized_c.csv", "training.csv"];

/// Merges labelled histories into one CSV per figure family: per-layer ASR
/// curves, normalized #C curves and the full training metrics.
pub fn render_histories(runs: &[(String, Vec<EpochRecord>)], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let asr: Vec<RunAsrRow> = runs
        .iter()
        .flat_map(|(run, h)| {
            h.iter().flat_map(move |r| {
                r.layer_asr.iter().enumerate().map(move |(l, &asr)| RunAsrRow {
                    run: run.clone(),
                    epoch: r.epoch,
                    layer: l + 1,
                    asr,
                })
            })
        })
        .collect();
    let metrics: Vec<RunMetricRow> = runs
        .iter()
        .flat_map(|(run, h)| {
            h.iter().map(move |r| RunMetricRow {
                run: run.clone(),
                epoch: r.epoch,
                loss: r.loss,
                accuracy: r.accuracy,
                acs_ratio: r.acs_ratio,
                normalized_c: r.normalized_c,
                mean_timesteps: r.mean_timesteps,
            })
        })
        .collect();
    #[derive(Serialize)]
    struct NcRow<'a> {
        run: &'a str,
        epoch: usize,
        normalized_c: f64,
    }
    let nc: Vec<NcRow> = metrics
        .iter()
        .map(|m| NcRow {
            run: &m.run,
            epoch: m.epoch,
            normalized_c: m.normalized_c,
        })
        .collect();
    let paths: Vec<PathBuf> = FIGURE_FILES.iter().map(|f| dir.join(f)).collect();
    with_header(&paths[0], &asr, "run,epoch,layer,asr")?;
    with_header(&paths[1], &nc, "run,epoch,normalized_c")?;
    with_header(&paths[2], &metrics, "run,epoch,loss,accuracy,acs_ratio,normalized_c,mean_timesteps")?;
    Ok(paths)
}

fn with_header<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    if rows.is_empty() {
        fs::write(path, format!("{header}\n"))?;
        Ok(())
    } else {
        write_rows(path, rows)
    }
}

//! File formats and the run directory layout.
//!
//! Records are JSON lines, tables are CSV with fixed column order:
//!
//! - metrics: `metric, k, value, n_items, n_creatives, seed`
//! - predictions: `item_id, creative_id, score`
//! - traffic: `item_id, group_id, impressions, clicks, achieved_ctr, revenue_proxy`

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::logs::{to_item_groups, CreativeRecord};
use crate::metrics::{EvalCreative, EvalItem};
use crate::numerics::{checkpoint, ParamSet};
use crate::pipeline::{ManifestEntry, RunReport};
use crate::reward::ItemGroup;
use crate::world::World;

/// Parses one JSON value per non-blank line. Errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        out.push(row.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Reads a creative log and groups it by item.
pub fn load_creative_log(path: &Path) -> Result<Vec<ItemGroup>> {
    let records: Vec<CreativeRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    to_item_groups(&records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    pub n_items: usize,
    pub n_creatives: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub item_id: usize,
    pub creative_id: usize,
    pub score: f64,
}

/// Joins logged outcomes with predicted scores. Every logged creative needs
/// a prediction.
pub fn join_predictions(records: &[CreativeRecord], predictions: &[PredictionRow]) -> Result<Vec<EvalItem>> {
    let scores: std::collections::BTreeMap<(usize, usize), f64> =
        predictions.iter().map(|p| ((p.item_id, p.creative_id), p.score)).collect();
    let mut items: std::collections::BTreeMap<usize, Vec<EvalCreative>> = Default::default();
    for r in records {
        let score = *scores.get(&(r.item_id, r.creative_id)).ok_or_else(|| {
            Error::Data(format!("no prediction for item {} creative {}", r.item_id, r.creative_id))
        })?;
        items.entry(r.item_id).or_default().push(EvalCreative {
            creative_id: r.creative_id,
            clicks: r.clicks,
            impressions: r.impressions,
            score,
        });
    }
    Ok(items.into_iter().map(|(item_id, creatives)| EvalItem { item_id, creatives }).collect())
}

/// Layout of one experiment directory. Nothing written here carries a
/// timestamp, so equal configs give byte-identical files.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["", "manifests", "checkpoints", "logs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn creative_log(&self) -> PathBuf {
        self.root.join("logs").join("creative.jsonl")
    }
    pub fn clicked_log(&self) -> PathBuf {
        self.root.join("logs").join("clicked.jsonl")
    }
    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.jsonl"))
    }
    pub fn round_manifest(&self, round: usize) -> PathBuf {
        self.manifest(&format!("round_{round:03}"))
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn traffic(&self, label: &str) -> PathBuf {
        self.root.join(format!("traffic_{label}.csv"))
    }

    /// Resolved config snapshot.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.config();
        fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
    }

    pub fn write_world(&self, world: &World) -> Result<()> {
        world.save(&self.world())
    }

    pub fn load_world(&self) -> Result<World> {
        World::load(&self.world())
    }

    pub fn write_manifest(&self, name: &str, entries: &[ManifestEntry]) -> Result<()> {
        write_jsonl(&self.manifest(name), entries)
    }

    pub fn save_params(&self, name: &str, params: &ParamSet) -> Result<()> {
        checkpoint::save(params, &self.checkpoint(name))
    }

    pub fn load_params(&self, name: &str) -> Result<ParamSet> {
        checkpoint::load(&self.checkpoint(name))
    }

    pub fn write_report(&self, report: &RunReport) -> Result<()> {
        write_json(&self.report(), report)
    }

    pub fn read_report(&self) -> Result<RunReport> {
        read_json(&self.report())
    }
}

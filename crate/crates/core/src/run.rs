//! Run directories: manifest, metrics, coverage report, act_map log, checkpoint.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{dataset_paths, RunConfig};
use crate::coverage::{CoverageRecord, NeuronActMap};
use crate::data::{file_sha256, load_idx, preprocess, reverse_dataset, take_first_n, ImageDataset, DIGIT_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, init_params, ModelSpec, ParamStore};
use crate::training::{train, Augment, MetricsRecord, TrainEvent};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const COVERAGE: &str = "coverage.jsonl";
pub const ACT_MAPS: &str = "act_maps.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";

/// Key for the training subset: the first `train_samples` of the source training split.
pub const SOURCE_KEY: &str = "source";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub key: String,
    pub images: String,
    pub labels: String,
    pub images_sha256: String,
    pub labels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub out_dir: String,
    pub spec_hash: String,
    pub config: BTreeMap<String, String>,
    pub datasets: Vec<DatasetRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_map(&self.config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotStage {
    /// Right after the per-epoch reset.
    EpochStart,
    /// After a training step.
    Step,
}

/// One line of the act_map log: one per epoch start and one per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActMapSnapshot {
    pub stage: SnapshotStage,
    /// The step just taken, or for an epoch start the next one.
    pub iteration: usize,
    pub epoch: usize,
    /// One string of `0`/`1` per tracked layer.
    pub activated: Vec<String>,
}

impl ActMapSnapshot {
    pub fn new(stage: SnapshotStage, iteration: usize, map: &NeuronActMap) -> Self {
        Self {
            stage,
            iteration,
            epoch: map.epoch,
            activated: map
                .activated
                .iter()
                .map(|l| l.iter().map(|&a| if a { '1' } else { '0' }).collect())
                .collect(),
        }
    }

    pub fn to_map(&self, layers: &[String]) -> NeuronActMap {
        NeuronActMap {
            layers: layers.to_vec(),
            activated: self
                .activated
                .iter()
                .map(|s| s.bytes().map(|b| b == b'1').collect())
                .collect(),
            epoch: self.epoch,
        }
    }
}

pub fn model_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    ModelSpec::digits_convnet(DIGIT_CLASSES, 3, &cfg.train.widths)
}

/// Loads a dataset by key, resized to the model input, with its checksums.
pub fn load_dataset(cfg: &RunConfig, key: &str) -> Result<(ImageDataset, DatasetRecord)> {
    let split = if key == SOURCE_KEY {
        format!("{}-train", cfg.data.source)
    } else {
        key.to_string()
    };
    let (img, lab) = dataset_paths(&cfg.data.data_root, &split)?;
    for p in [&img, &lab] {
        if !p.is_file() {
            return Err(Error::Config(format!("dataset file not found: {}", p.display())));
        }
    }
    let mut ds = load_idx(&img, &lab)?;
    if key == SOURCE_KEY {
        ds = take_first_n(&ds, cfg.data.train_samples)?;
    }
    let ds = preprocess(&ds, cfg.train.widths.image_size)?;
    let record = DatasetRecord {
        key: key.to_string(),
        images: img.display().to_string(),
        labels: lab.display().to_string(),
        images_sha256: file_sha256(&img)?,
        labels_sha256: file_sha256(&lab)?,
    };
    Ok((ds, record))
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub params: ParamStore<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub coverage: Vec<CoverageRecord>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line<W: Write, S: Serialize>(w: &mut W, path: &Path, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Trains per `cfg` and fills `out_dir`. The manifest is written before the first step.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.train.validate()?;
    let spec = model_spec(cfg)?;
    let (raw, record) = load_dataset(cfg, SOURCE_KEY)?;
    let aug = match cfg.train.augment {
        Augment::Reverse => Some(reverse_dataset(&raw)),
        Augment::None => None,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.train.seed,
        out_dir: out_dir.display().to_string(),
        spec_hash: hex::encode(spec.hash()),
        config: cfg.to_map(),
        datasets: vec![record],
    };
    let manifest_path = out_dir.join(MANIFEST);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&manifest_path, e))?;

    let paths: [PathBuf; 3] = [METRICS, COVERAGE, ACT_MAPS].map(|f| out_dir.join(f));
    let mut metrics_w = create(&paths[0])?;
    let mut coverage_w = create(&paths[1])?;
    let mut maps_w = create(&paths[2])?;
    let params = init_params::<f32>(&spec, cfg.train.seed);
    let mut next_iteration = 0;
    let out = train(
        &cfg.train,
        &spec,
        params,
        &raw,
        aug.as_ref(),
        &mut |event| match event {
            TrainEvent::EpochStart { act_map, .. } => {
                let snap = ActMapSnapshot::new(SnapshotStage::EpochStart, next_iteration, act_map);
                write_line(&mut maps_w, &paths[2], &snap)
            }
            TrainEvent::Step { record, act_map } => {
                next_iteration = record.iteration + 1;
                write_line(&mut metrics_w, &paths[0], record)?;
                let snap = ActMapSnapshot::new(SnapshotStage::Step, record.iteration, act_map);
                write_line(&mut maps_w, &paths[2], &snap)
            }
            TrainEvent::EpochEnd { coverage } => write_line(&mut coverage_w, &paths[1], coverage),
        },
    )?;
    checkpoint::save(&out_dir.join(CHECKPOINT), &spec, &out.params)?;
    Ok(RunOutcome {
        manifest,
        params: out.params,
        metrics: out.metrics,
        coverage: out.coverage,
    })
}

/// The config a checkpoint was trained with: the sibling manifest if present, else `fallback`.
pub fn config_for_checkpoint(ckpt: &Path, fallback: RunConfig) -> Result<RunConfig> {
    let manifest = ckpt.parent().map(|d| d.join(MANIFEST));
    match manifest {
        Some(m) if m.is_file() => RunManifest::load(&m)?.run_config(),
        _ => Ok(fallback),
    }
}

/// Reads a JSON-lines file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

//! Training, evaluation, inference, visualization and dataset generation
//! entry points used by the command-line front end.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{info, warn};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::ImageTensor;
use crate::car::Ablation;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::augment::AugmentRecord;
use crate::data::{
    augment_train, generate_synthetic, load_manifest, preprocess_eval, DatasetManifest, FileCodec, ImageCodec,
    LabelVocabulary, SyntheticSpec, WordVectors,
};
use crate::erasing;
use crate::graph::ContextEmbeddingTable;
use crate::heads::LabelVector;
use crate::metrics::{evaluate as evaluate_predictions, write_dump, MetricsReport, PredictionSet};
use crate::model::{ErasureLog, Prediction, SrdlModel};
use crate::nn::Parameters;
use crate::optim::Adam;
use crate::{Error, Result};

/// Counters gathered while a harness operation ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Erasure passes observed on the process-wide counter during the call.
    pub oe_invocations: u64,
    pub images: usize,
}

/// Manifest, vocabulary, word vectors and decoded images.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub manifest: DatasetManifest,
    pub vocabulary: LabelVocabulary,
    pub word_vectors: WordVectors,
    pub images: Vec<RgbImage>,
}

impl LoadedData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (vocabulary, word_vectors) = load_vocabulary(cfg)?;
        let manifest_path = cfg.require(&cfg.data.manifest, "data.manifest")?;
        let manifest = load_manifest(manifest_path, &vocabulary)?;
        LoadedData::from_manifest(manifest, word_vectors)
    }

    pub fn from_manifest(manifest: DatasetManifest, word_vectors: WordVectors) -> Result<Self> {
        for w in &manifest.warnings {
            warn!("{w}");
        }
        let images = decode_all(&manifest)?;
        Ok(LoadedData {
            vocabulary: manifest.vocabulary.clone(),
            manifest,
            word_vectors,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn labels(&self, i: usize) -> LabelVector {
        self.manifest.label_vector(i)
    }

    fn label_row(&self, i: usize) -> Array1<u8> {
        self.labels(i).0.mapv(|v| v as u8)
    }

    fn id(&self, i: usize) -> &str {
        &self.manifest.records[i].path
    }
}

fn load_vocabulary(cfg: &RunConfig) -> Result<(LabelVocabulary, WordVectors)> {
    let vocabulary = LabelVocabulary::load(cfg.require(&cfg.data.vocabulary, "data.vocabulary")?)?;
    let word_vectors = WordVectors::load(cfg.require(&cfg.data.word_vectors, "data.word_vectors")?)?;
    Ok((vocabulary, word_vectors))
}

fn decode_all(manifest: &DatasetManifest) -> Result<Vec<RgbImage>> {
    (0..manifest.len())
        .into_par_iter()
        .map(|i| FileCodec.decode(&manifest.image_path(i)))
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic 80/20 split of record indices into (train, validation).
pub fn split_indices(n: usize, enabled: bool) -> (Vec<usize>, Vec<usize>) {
    if !enabled {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|&i| !splitmix64(i as u64).is_multiple_of(5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Validation,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            other => Err(Error::Config(format!("unknown split `{other}` (all, train, validation)"))),
        }
    }
}

/// Augmentation rng of record `index` in `epoch`. Independent of batch
/// order and worker count.
pub fn sample_rng(data_seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | index as u64);
    rng
}

fn epoch_order(data_seed: u64, epoch: usize, mut indices: Vec<usize>) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(epoch as u64);
    indices.shuffle(&mut rng);
    indices
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    pub l_ori: f64,
    pub l_era: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub l_ori: f64,
    pub l_era: f64,
    pub l_total: f64,
    /// mAP of the scores produced on augmented training inputs.
    pub running_train_map: f64,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SrdlModel,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Evaluation-path mAP on the training split after the last epoch.
    pub train_map: f64,
    pub val_map: Option<f64>,
    pub checkpoint: PathBuf,
    pub stats: RunStats,
}

struct Logs {
    train: BufWriter<File>,
    oe: BufWriter<File>,
}

impl Logs {
    fn open(out: &Path, append: bool) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = out.join(name);
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(file))
        };
        Ok(Logs {
            train: open("train_log.jsonl")?,
            oe: open("oe_log.jsonl")?,
        })
    }

    fn line(w: &mut BufWriter<File>, value: serde_json::Value, out: &Path) -> Result<()> {
        writeln!(w, "{value}").map_err(|e| Error::io(out, e))
    }

    fn flush(&mut self, out: &Path) -> Result<()> {
        self.train.flush().map_err(|e| Error::io(out, e))?;
        self.oe.flush().map_err(|e| Error::io(out, e))
    }
}

fn erasure_json(log: &ErasureLog, vocab: &LabelVocabulary) -> serde_json::Value {
    serde_json::Value::Array(
        log.selected
            .iter()
            .map(|(c, region)| match region {
                Some(r) => json!({ "category": vocab.name(*c), "x": [r.x.0, r.x.1], "y": [r.y.0, r.y.1] }),
                None => json!({ "category": vocab.name(*c), "skipped": true }),
            })
            .collect(),
    )
}

/// Trains with `cfg` on the dataset it names.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let data = LoadedData::load(cfg)?;
    train_on(cfg, &data, opts)
}

pub fn train_on(cfg: &RunConfig, data: &LoadedData, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &opts.out;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let digest = cfg.digest();
    let ablation = cfg.ablation()?;
    let erasure = cfg.oe.enabled.then_some(&cfg.oe);
    let names = data.vocabulary.names().to_vec();

    let mut model = SrdlModel::init(&data.vocabulary, &data.word_vectors, &cfg.model_config()?, cfg.seeds.init)?;
    let mut adam = Adam::new(cfg.optim, &model);
    let (mut start_epoch, mut step) = (0, 0u64);
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        ck.check_digest(&digest)?;
        check_categories(&ck, &names)?;
        ck.restore(&mut model)?;
        ck.restore_optimizer(&mut adam)?;
        start_epoch = ck.header.epoch;
        step = ck.header.step;
        info!("resuming from {} at epoch {start_epoch}", path.display());
    }
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out, e))?;
    let mut logs = Logs::open(out, opts.resume.is_some())?;

    let (train_idx, val_idx) = split_indices(data.len(), cfg.data.validation_split);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let oe_before = erasing::invocation_count();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoint = opts.resume.clone().unwrap_or_default();
    let batch_size = cfg.optim.batch_size;

    for epoch in start_epoch..cfg.optim.epochs {
        let lr = cfg.optim.learning_rate_at(epoch);
        let order = epoch_order(cfg.seeds.data, epoch, train_idx.clone());
        let (mut sum_ori, mut sum_era, mut seen) = (0.0, 0.0, 0usize);
        let mut running_scores = Vec::with_capacity(order.len());
        for batch_idx in order.chunks(batch_size) {
            let prepared: Vec<Result<(ImageTensor, AugmentRecord)>> = batch_idx
                .par_iter()
                .map(|&i| augment_train(&data.images[i], &cfg.augment, &mut sample_rng(cfg.seeds.data, epoch, i)))
                .collect();
            let mut batch = Vec::with_capacity(batch_idx.len());
            let mut records = Vec::with_capacity(batch_idx.len());
            for (item, &i) in prepared.into_iter().zip(batch_idx) {
                let (tensor, rec) = item?;
                batch.push((tensor, data.labels(i)));
                records.push(rec);
            }
            let result = model.train_batch(&batch, ablation, erasure);
            let finite = match &result {
                Ok(s) => s.loss.l_total.is_finite() && s.grads.all_finite(),
                Err(Error::NonFinite(_)) => false,
                Err(_) => true,
            };
            if !finite {
                let loss = result.as_ref().ok().map(|s| s.loss);
                let dump = dump_batch(out, epoch, step, batch_idx, &records, data, loss)?;
                return Err(Error::NonFiniteLoss { epoch, step: step as usize, dump });
            }
            let result = result?;
            adam.update(&mut model, &result.grads, lr);
            step += 1;
            let loss = result.loss;
            let record = StepRecord {
                epoch,
                step,
                learning_rate: lr,
                l_ori: loss.l_ori,
                l_era: loss.l_era,
                l_total: loss.l_total,
            };
            let mut line = serde_json::to_value(record).expect("record serializes");
            line["kind"] = json!("step");
            Logs::line(&mut logs.train, line, out)?;
            for ((&i, log), rec) in batch_idx.iter().zip(&result.erasure).zip(&records) {
                if let Some(log) = log {
                    let line = json!({
                        "epoch": epoch,
                        "step": step,
                        "image": data.id(i),
                        "crop": rec,
                        "selected": erasure_json(log, &data.vocabulary),
                    });
                    Logs::line(&mut logs.oe, line, out)?;
                }
            }
            steps.push(record);
            let n = batch_idx.len();
            sum_ori += loss.l_ori * n as f64;
            sum_era += loss.l_era * n as f64;
            seen += n;
            for (&i, s) in batch_idx.iter().zip(result.scores) {
                running_scores.push((i, s.0));
            }
        }
        running_scores.sort_by_key(|(i, _)| *i);
        let running = prediction_set(
            data,
            &running_scores.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            running_scores.into_iter().map(|(_, s)| s).collect(),
        )?;
        let running_map = evaluate_predictions(&running, &names, cfg.metrics).map;
        let val_map = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_indices(&model, ablation, data, &val_idx, cfg)?.0.map)
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            l_ori: sum_ori / seen as f64,
            l_era: sum_era / seen as f64,
            l_total: (sum_ori + sum_era) / seen as f64,
            running_train_map: running_map,
            val_map,
        };
        let mut line = serde_json::to_value(record).expect("record serializes");
        line["kind"] = json!("epoch");
        Logs::line(&mut logs.train, line, out)?;
        logs.flush(out)?;
        info!(
            "epoch {epoch}: lr {lr:e} l_ori {:.4} l_era {:.4} running mAP {:.4} val mAP {}",
            record.l_ori,
            record.l_era,
            running_map,
            val_map.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
        );
        epochs.push(record);

        let last = epoch + 1 == cfg.optim.epochs;
        let every = cfg.output.checkpoint_every;
        if last || (every > 0 && (epoch + 1) % every == 0) {
            let ck = Checkpoint::capture(&model, Some(&adam), &digest, epoch + 1, step, cfg.seeds.data, &names);
            checkpoint = ckpt_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            ck.save(&checkpoint)?;
        }
    }
    logs.flush(out)?;

    let (train_report, _) = evaluate_indices(&model, ablation, data, &train_idx, cfg)?;
    let val_map = if val_idx.is_empty() {
        None
    } else {
        Some(evaluate_indices(&model, ablation, data, &val_idx, cfg)?.0.map)
    };
    let summary = json!({
        "kind": "summary",
        "train_map": train_report.map,
        "val_map": val_map,
        "epochs": cfg.optim.epochs,
        "steps": step,
        "digest": digest,
    });
    fs::write(out.join("summary.json"), format!("{summary:#}\n")).map_err(|e| Error::io(out, e))?;
    Ok(TrainOutcome {
        model,
        steps,
        epochs,
        train_map: train_report.map,
        val_map,
        checkpoint,
        stats: RunStats {
            oe_invocations: erasing::invocation_count() - oe_before,
            images: train_idx.len(),
        },
    })
}

fn check_categories(ck: &Checkpoint, names: &[String]) -> Result<()> {
    if ck.header.categories != names {
        return Err(Error::Checkpoint("checkpoint categories differ from the vocabulary".into()));
    }
    Ok(())
}

fn dump_batch(
    out: &Path,
    epoch: usize,
    step: u64,
    indices: &[usize],
    records: &[AugmentRecord],
    data: &LoadedData,
    loss: Option<crate::heads::LossReport>,
) -> Result<PathBuf> {
    let path = out.join("nonfinite_batch.json");
    let images: Vec<_> = indices
        .iter()
        .zip(records)
        .map(|(&i, rec)| {
            let labels: Vec<&str> = data.manifest.records[i]
                .labels
                .iter()
                .map(|&c| data.vocabulary.name(c))
                .collect();
            json!({ "image": data.id(i), "labels": labels, "crop": rec })
        })
        .collect();
    let dump = json!({ "epoch": epoch, "step": step, "loss": loss, "images": images });
    fs::write(&path, format!("{dump:#}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn prediction_set(data: &LoadedData, indices: &[usize], scores: Vec<Array1<f64>>) -> Result<PredictionSet> {
    let c = data.vocabulary.len();
    let mut s = Array2::zeros((indices.len(), c));
    let mut y = Array2::zeros((indices.len(), c));
    for (row, (&i, sc)) in indices.iter().zip(scores).enumerate() {
        s.row_mut(row).assign(&sc);
        y.row_mut(row).assign(&data.label_row(i));
    }
    PredictionSet::new(indices.iter().map(|&i| data.id(i).to_owned()).collect(), s, y)
}

/// Evaluation-path predictions for the given images, in order.
pub fn predict_images(
    model: &SrdlModel,
    ablation: Ablation,
    embeddings: &ContextEmbeddingTable,
    images: &[&RgbImage],
    cfg: &RunConfig,
) -> Result<Vec<Prediction>> {
    images
        .par_iter()
        .map(|img| model.predict(&preprocess_eval(img, &cfg.augment)?, embeddings, ablation))
        .collect()
}

fn evaluate_indices(
    model: &SrdlModel,
    ablation: Ablation,
    data: &LoadedData,
    indices: &[usize],
    cfg: &RunConfig,
) -> Result<(MetricsReport, PredictionSet)> {
    let (embeddings, _) = model.embeddings(ablation)?;
    let images: Vec<&RgbImage> = indices.iter().map(|&i| &data.images[i]).collect();
    let preds = predict_images(model, ablation, &embeddings, &images, cfg)?;
    let set = prediction_set(data, indices, preds.into_iter().map(|p| p.scores.0).collect())?;
    Ok((evaluate_predictions(&set, data.vocabulary.names(), cfg.metrics), set))
}

/// Builds the model described by `cfg` and fills it from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(SrdlModel, LabelVocabulary)> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_digest(&cfg.digest())?;
    let (vocabulary, word_vectors) = load_vocabulary(cfg)?;
    check_categories(&ck, vocabulary.names())?;
    let mut model = SrdlModel::init(&vocabulary, &word_vectors, &cfg.model_config()?, cfg.seeds.init)?;
    ck.restore(&mut model)?;
    Ok((model, vocabulary))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Defaults to the manifest named by the config.
    pub manifest: Option<PathBuf>,
    pub split: Split,
    pub out: PathBuf,
    /// Name of the prediction dump inside `out`.
    pub predictions: String,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: PredictionSet,
    pub dump: PathBuf,
    pub stats: RunStats,
}

/// Deterministic inference over a manifest: writes the prediction dump and
/// `metrics.json` / `metrics.txt` to `opts.out`.
pub fn evaluate(cfg: &RunConfig, opts: &EvalOptions) -> Result<Evaluation> {
    let oe_before = erasing::invocation_count();
    let (model, vocabulary) = load_model(cfg, &opts.checkpoint)?;
    let manifest_path = match &opts.manifest {
        Some(p) => p.as_path(),
        None => cfg.require(&cfg.data.manifest, "data.manifest")?,
    };
    let manifest = load_manifest(manifest_path, &vocabulary)?;
    let data = LoadedData::from_manifest(manifest, WordVectors::new(1))?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.data.validation_split);
    let indices = match opts.split {
        Split::All => (0..data.len()).collect(),
        Split::Train => train_idx,
        Split::Validation => val_idx,
    };
    let (mut report, predictions) = evaluate_indices(&model, cfg.ablation()?, &data, &indices, cfg)?;
    report.warnings.splice(0..0, data.manifest.warnings.iter().cloned());
    if indices.is_empty() {
        report.warnings.push("no images to evaluate".into());
    }
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let dump = opts.out.join(&opts.predictions);
    write_dump(&dump, vocabulary.names(), &predictions)?;
    report.save(&opts.out)?;
    Ok(Evaluation {
        report,
        predictions,
        dump,
        stats: RunStats {
            oe_invocations: erasing::invocation_count() - oe_before,
            images: indices.len(),
        },
    })
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".to_owned(), |s| s.to_string_lossy().into_owned())
}

/// Scores for arbitrary images; undecodable files are skipped with a
/// warning. Writes `scores.tsv` to `out`.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], out: &Path) -> Result<Vec<(PathBuf, Array1<f64>)>> {
    let (model, vocabulary) = load_model(cfg, checkpoint)?;
    let ablation = cfg.ablation()?;
    let (embeddings, _) = model.embeddings(ablation)?;
    let decoded = decode_some(images);
    let refs: Vec<&RgbImage> = decoded.iter().map(|(_, img)| img).collect();
    let preds = predict_images(&model, ablation, &embeddings, &refs, cfg)?;
    let mut text = format!("image\t{}\n", vocabulary.names().join("\t"));
    let mut results = Vec::with_capacity(preds.len());
    for ((path, _), p) in decoded.iter().zip(preds) {
        text.push_str(&path.display().to_string());
        for s in &p.scores.0 {
            text.push_str(&format!("\t{s}"));
        }
        text.push('\n');
        results.push((path.clone(), p.scores.0));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("scores.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

fn decode_some(paths: &[PathBuf]) -> Vec<(PathBuf, RgbImage)> {
    paths
        .iter()
        .filter_map(|p| match FileCodec.decode(p) {
            Ok(img) => Some((p.clone(), img)),
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub rank: usize,
    pub category: usize,
    pub name: String,
    pub score: f64,
    /// Feature-grid cell `(x, y)` with the highest spatial attention.
    pub peak_cell: (usize, usize),
    /// Inclusive pixel box `x0, y0, x1, y1` covered by that cell.
    pub peak_box: [u32; 4],
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visualization {
    pub image: PathBuf,
    pub overlays: Vec<Overlay>,
    pub legend: PathBuf,
}

fn heat_colour(v: f64) -> [f64; 3] {
    // dark blue through magenta to red
    [255.0 * v, 40.0, 255.0 * (1.0 - v)]
}

/// Upsamples `sa` (indexed `[x, y]`) to `width x height` by cell replication
/// and blends it over `image`.
pub fn overlay_heatmap(image: &RgbImage, sa: &Array2<f64>) -> RgbImage {
    let (w, h) = sa.dim();
    let lo = sa.fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = sa.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = hi - lo;
    let (iw, ih) = image.dimensions();
    RgbImage::from_fn(iw, ih, |px, py| {
        let cx = (px as usize * w / iw as usize).min(w - 1);
        let cy = (py as usize * h / ih as usize).min(h - 1);
        let v = if span > 0.0 { (sa[[cx, cy]] - lo) / span } else { 0.0 };
        let heat = heat_colour(v);
        let base = image.get_pixel(px, py);
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (0.5 * base[c] as f64 + 0.5 * heat[c]).round() as u8;
        }
        Rgb(out)
    })
}

fn cell_box(cell: (usize, usize), grid: (usize, usize), size: (u32, u32)) -> [u32; 4] {
    let lo = |c: usize, n: usize, s: u32| (c as u64 * s as u64).div_ceil(n as u64) as u32;
    let x0 = lo(cell.0, grid.0, size.0);
    let y0 = lo(cell.1, grid.1, size.1);
    let x1 = lo(cell.0 + 1, grid.0, size.0) - 1;
    let y1 = lo(cell.1 + 1, grid.1, size.1) - 1;
    [x0, y0, x1, y1]
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Top-3 spatial attention overlays per image plus a score legend.
pub fn visualize(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], out: &Path) -> Result<Vec<Visualization>> {
    let (model, vocabulary) = load_model(cfg, checkpoint)?;
    let ablation = cfg.ablation()?;
    let (embeddings, _) = model.embeddings(ablation)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let decoded = decode_some(images);
    let refs: Vec<&RgbImage> = decoded.iter().map(|(_, img)| img).collect();
    let preds = predict_images(&model, ablation, &embeddings, &refs, cfg)?;
    let mut results = Vec::new();
    for ((path, img), pred) in decoded.iter().zip(preds) {
        let stem = image_id(path);
        let top = erasing::select_categories(pred.scores.0.view(), 3);
        let mut legend = String::from("rank\tcategory\tscore\tfile\n");
        let mut overlays = Vec::new();
        for (rank, &c) in top.iter().enumerate() {
            let sa = &pred.spatial[c];
            let mut peak = (0, 0);
            for ((x, y), &v) in sa.indexed_iter() {
                if v > sa[peak] {
                    peak = (x, y);
                }
            }
            let file = out.join(format!("{stem}_top{}_{}.png", rank + 1, slug(vocabulary.name(c))));
            overlay_heatmap(img, sa)
                .save(&file)
                .map_err(|e| Error::Image(format!("{}: {e}", file.display())))?;
            let score = pred.scores.0[c];
            legend.push_str(&format!(
                "{}\t{}\t{score:.6}\t{}\n",
                rank + 1,
                vocabulary.name(c),
                file.file_name().unwrap().to_string_lossy()
            ));
            overlays.push(Overlay {
                rank: rank + 1,
                category: c,
                name: vocabulary.name(c).to_owned(),
                score,
                peak_cell: peak,
                peak_box: cell_box(peak, sa.dim(), img.dimensions()),
                path: file,
            });
        }
        let legend_path = out.join(format!("{stem}_legend.txt"));
        fs::write(&legend_path, legend).map_err(|e| Error::io(&legend_path, e))?;
        results.push(Visualization {
            image: path.clone(),
            overlays,
            legend: legend_path,
        });
    }
    Ok(results)
}

/// Generates a synthetic dataset from a TOML spec file into `out`, plus a
/// `config.toml` whose data section points at it.
pub fn synth_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<DatasetManifest> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec = SyntheticSpec::from_toml(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    synth_from_spec(&spec, out)
}

pub fn synth_from_spec(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    let dataset = generate_synthetic(spec)?;
    let manifest = dataset.write_to(out)?;
    let config = "[data]\nmanifest = \"manifest.tsv\"\nvocabulary = \"vocabulary.txt\"\nword_vectors = \"word_vectors.txt\"\n";
    let path = out.join("config.toml");
    fs::write(&path, config).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// `(topk, mAP)` at the configured alpha.
    pub topk: Vec<(usize, f64)>,
    /// `(alpha, mAP)` at topK 3.
    pub alpha: Vec<(f64, f64)>,
}

pub const SWEEP_TOPK: [usize; 8] = [1, 2, 3, 4, 5, 6, 7, 8];
pub const SWEEP_ALPHA: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Trains one run per setting (topK 1..8 at alpha 0.5, alpha 0.1..0.9 at
/// topK 3) and writes `topk_curve.tsv` and `alpha_curve.tsv` to `out`. The
/// reported mAP is on the validation split when there is one.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<SweepResult> {
    let data = LoadedData::load(cfg)?;
    sweep_on(cfg, &data, out)
}

pub fn sweep_on(cfg: &RunConfig, data: &LoadedData, out: &Path) -> Result<SweepResult> {
    let run = |name: String, topk: usize, alpha: f64| -> Result<f64> {
        let mut c = cfg.clone();
        c.oe.enabled = true;
        c.oe.topk = topk;
        c.oe.alpha = alpha;
        c.output.checkpoint_every = 0;
        let outcome = train_on(
            &c,
            data,
            &TrainOptions {
                out: out.join("runs").join(name),
                resume: None,
            },
        )?;
        Ok(outcome.val_map.unwrap_or(outcome.train_map))
    };
    let mut result = SweepResult {
        topk: Vec::new(),
        alpha: Vec::new(),
    };
    let mut text = String::from("topk\tmap\n");
    for k in SWEEP_TOPK {
        let m = run(format!("topk_{k}"), k, 0.5)?;
        text.push_str(&format!("{k}\t{m}\n"));
        result.topk.push((k, m));
    }
    fs::write(out.join("topk_curve.tsv"), text).map_err(|e| Error::io(out, e))?;
    let mut text = String::from("alpha\tmap\n");
    for a in SWEEP_ALPHA {
        let m = run(format!("alpha_{a:.1}"), 3, a)?;
        text.push_str(&format!("{a:.1}\t{m}\n"));
        result.alpha.push((a, m));
    }
    fs::write(out.join("alpha_curve.tsv"), text).map_err(|e| Error::io(out, e))?;
    Ok(result)
}

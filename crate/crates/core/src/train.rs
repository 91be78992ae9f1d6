//! Training loops for the part codecs, the token generator and the face regressor,
//! plus configuration parsing and checkpoint persistence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, ClipRecord, Entry, Split};
use crate::error::{Error, Result};
use crate::face::{face_loss_tensors, FaceConfig, FaceNetwork};
use crate::inference::{generate_long_anchored, GenerationContext, IriParams};
use crate::motion::{AudioFeatures, FaceParams, IndexGrid, MotionClip, Part, SpeakerId, FRAMES_PER_TOKEN, WINDOW_FRAMES, WINDOW_TOKENS};
use crate::nn::{self, Adam, EmaState, NamedTensor, ParamStore};
use crate::quantizer::{VqConfig, VqNetwork, LATENT_DIM};
use crate::ret::{cross_entropy, grid_batch, mask_indices, CeScope, Mode, RetConfig, RetNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    VqBody,
    VqHand,
    Ret,
    Face,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::VqBody => "vq-body",
            Stage::VqHand => "vq-hand",
            Stage::Ret => "ret",
            Stage::Face => "face",
        }
    }

    pub fn vq(part: Part) -> Self {
        match part {
            Part::Body => Stage::VqBody,
            Part::Hand => Stage::VqHand,
        }
    }

    pub fn part(self) -> Option<Part> {
        match self {
            Stage::VqBody => Some(Part::Body),
            Stage::VqHand => Some(Part::Hand),
            _ => None,
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.rcm", self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq-body" => Ok(Stage::VqBody),
            "vq-hand" => Ok(Stage::VqHand),
            "ret" => Ok(Stage::Ret),
            "face" => Ok(Stage::Face),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub der_rate: f64,
    pub audio_drop_rate: f64,
    pub mask_ratio_range: (f64, f64),
    pub ema_decay: f64,
    pub vocab: usize,
    pub n_blocks: usize,
    pub d_v: usize,
    pub ce_scope: CeScope,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Ret,
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
            der_rate: 0.2,
            audio_drop_rate: 0.1,
            mask_ratio_range: (0.5, 1.0),
            ema_decay: 0.99,
            vocab: 256,
            n_blocks: 4,
            d_v: 256,
            ce_scope: CeScope::All,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("checkpoints"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "stage",
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "der_rate",
        "audio_drop_rate",
        "mask_ratio_range",
        "ema_decay",
        "vocab",
        "n_blocks",
        "d_v",
        "ce_scope",
        "dataset",
        "checkpoint",
    ];

    /// Parses flat `key: value` text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key: value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.dataset, &mut cfg.checkpoint] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stage" => self.stage = value.parse()?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "der_rate" => self.der_rate = parse_value(key, value)?,
            "audio_drop_rate" => self.audio_drop_rate = parse_value(key, value)?,
            "mask_ratio_range" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("mask_ratio_range '{value}' must be 'lo,hi'")))?;
                self.mask_ratio_range = (parse_value(key, a.trim())?, parse_value(key, b.trim())?);
            }
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "vocab" => self.vocab = parse_value(key, value)?,
            "n_blocks" => self.n_blocks = parse_value(key, value)?,
            "d_v" => self.d_v = parse_value(key, value)?,
            "ce_scope" => self.ce_scope = value.parse()?,
            "dataset" => self.dataset = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("der_rate", self.der_rate)?;
        unit("audio_drop_rate", self.audio_drop_rate)?;
        unit("ema_decay", self.ema_decay)?;
        let (lo, hi) = self.mask_ratio_range;
        unit("mask ratio", lo)?;
        unit("mask ratio", hi)?;
        if lo > hi {
            return Err(Error::Config(format!("mask_ratio_range {lo},{hi} is decreasing")));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.vocab < 2 || self.n_blocks == 0 || self.d_v == 0 {
            return Err(Error::Config("epochs, batch_size, vocab, n_blocks and d_v must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (lo, hi) = self.mask_ratio_range;
        let _ = writeln!(out, "stage: {}", self.stage.name());
        let _ = writeln!(out, "epochs: {}", self.epochs);
        let _ = writeln!(out, "batch_size: {}", self.batch_size);
        let _ = writeln!(out, "learning_rate: {}", self.learning_rate);
        let _ = writeln!(out, "seed: {}", self.seed);
        let _ = writeln!(out, "der_rate: {}", self.der_rate);
        let _ = writeln!(out, "audio_drop_rate: {}", self.audio_drop_rate);
        let _ = writeln!(out, "mask_ratio_range: {lo},{hi}");
        let _ = writeln!(out, "ema_decay: {}", self.ema_decay);
        let _ = writeln!(out, "vocab: {}", self.vocab);
        let _ = writeln!(out, "n_blocks: {}", self.n_blocks);
        let _ = writeln!(out, "d_v: {}", self.d_v);
        let _ = writeln!(out, "ce_scope: {}", self.ce_scope);
        let _ = writeln!(out, "dataset: {}", self.dataset.display());
        let _ = writeln!(out, "checkpoint: {}", self.checkpoint.display());
        out
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + self.stage as u64);
        rng
    }
}

/// Loss trajectory of one training run (epoch means).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// A trained network carrying EMA weights, with its raw weights kept alongside.
pub struct Trained<N> {
    pub net: N,
    pub raw: Vec<NamedTensor>,
    pub report: TrainReport,
}

/// Which parameter set to load from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Ema,
    Raw,
}

impl Weights {
    fn prefix(self) -> &'static str {
        match self {
            Weights::Ema => "ema/",
            Weights::Raw => "param/",
        }
    }
}

/// Per-column mean and standard deviation over every row of every matrix; scales floor at 1e-3.
fn channel_stats(mats: &[&Array2<f32>]) -> (Vec<f32>, Vec<f32>) {
    let d = mats.first().map_or(0, |m| m.ncols());
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for m in mats {
        for row in m.rows() {
            for (c, &v) in row.iter().enumerate() {
                sum[c] += v as f64;
                sq[c] += (v as f64).powi(2);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-3)) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn random_window(frames: usize, window: usize, rng: &mut ChaCha8Rng) -> usize {
    let slots = (frames - window) / FRAMES_PER_TOKEN;
    rng.random_range(0..=slots) * FRAMES_PER_TOKEN
}

fn check_training_clips(clips: &[ClipRecord]) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.motion.frames() < WINDOW_FRAMES) {
        return Err(Error::InsufficientFrames { need: WINDOW_FRAMES, got: c.motion.frames() });
    }
    Ok(())
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Runs `step` over shuffled batches for every epoch, keeping the EMA shadow in sync.
fn run_epochs(
    cfg: &TrainConfig,
    store: &ParamStore,
    n: usize,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&[usize], &mut ChaCha8Rng, usize) -> Result<Tensor>,
    mut after_epoch: impl FnMut(usize, &mut ChaCha8Rng) -> Result<()>,
) -> Result<(EmaState, TrainReport)> {
    let mut opt = Adam::new(store.vars(), cfg.learning_rate)?;
    let mut ema = EmaState::new(&store.values()?, cfg.ema_decay)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(n, cfg.batch_size, rng);
        for b in &batches {
            let loss = step(b, rng, epoch)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{} training loss", cfg.stage.name())));
            }
            sum += value;
            opt.backward_step(&loss)?;
            ema.update(&store.values()?)?;
            steps += 1;
        }
        epoch_losses.push(sum / batches.len() as f64);
        after_epoch(epoch, rng)?;
    }
    Ok((ema, TrainReport { stage: cfg.stage, steps, epoch_losses }))
}

fn finish<N>(net: N, store: impl Fn(&N) -> &ParamStore, ema: &EmaState, report: TrainReport) -> Result<Trained<N>> {
    let raw = store(&net).snapshot()?;
    store(&net).set_values(&ema.shadow)?;
    Ok(Trained { net, raw, report })
}

/// Trains one part codec on the given clips.
pub fn train_vq_on(cfg: &TrainConfig, clips: &[ClipRecord]) -> Result<Trained<VqNetwork>> {
    cfg.validate()?;
    let part = cfg.stage.part().ok_or_else(|| Error::Config(format!("stage {} is not a codec stage", cfg.stage.name())))?;
    check_training_clips(clips)?;
    let net = VqNetwork::new(VqConfig { vocab: cfg.vocab, ..VqConfig::new(part) }, DType::F32, cfg.seed)?;
    let mut rng = cfg.rng();
    let poses: Vec<&Array2<f32>> = clips.iter().map(|c| c.motion.part(part)).collect();
    let (mean, std) = channel_stats(&poses);
    net.set_normalization(&mean, &std)?;

    let crop = |i: usize, rng: &mut ChaCha8Rng| {
        let m = poses[i];
        let start = random_window(m.nrows(), WINDOW_FRAMES, rng);
        m.slice(s![start..start + WINDOW_FRAMES, ..]).to_owned()
    };
    let sample_latents = |net: &VqNetwork, rng: &mut ChaCha8Rng| -> Result<Array2<f32>> {
        let n = poses.len().min(64);
        let mut idx: Vec<usize> = (0..poses.len()).collect();
        idx.shuffle(rng);
        let crops: Vec<Array2<f32>> = idx[..n].iter().map(|&i| crop(i, rng)).collect();
        let refs: Vec<&Array2<f32>> = crops.iter().collect();
        let z = net.encode_tensor(&nn::batch_channels_first(&refs, DType::F32)?)?.transpose(1, 2)?;
        let rows = z.dims()[0] * z.dims()[1];
        nn::from_tensor_2d(&z.reshape((rows, LATENT_DIM))?)
    };

    net.seed_codebook(&sample_latents(&net, &mut rng)?, &mut rng)?;
    let usage = std::cell::RefCell::new(vec![0usize; cfg.vocab]);
    let revive_until = cfg.epochs / 2;
    let (ema, report) = run_epochs(
        cfg,
        net.store(),
        clips.len(),
        &mut rng,
        |batch, rng, _| {
            let crops: Vec<Array2<f32>> = batch.iter().map(|&i| crop(i, rng)).collect();
            let refs: Vec<&Array2<f32>> = crops.iter().collect();
            let out = net.forward_train(&nn::batch_channels_first(&refs, DType::F32)?, None)?;
            let mut u = usage.borrow_mut();
            out.indices.iter().for_each(|&i| u[i as usize] += 1);
            Ok(out.loss.total)
        },
        |epoch, rng| {
            let counts = std::mem::replace(&mut *usage.borrow_mut(), vec![0; cfg.vocab]);
            if epoch < revive_until {
                net.revive_codes(&counts, &sample_latents(&net, rng)?, rng)?;
            }
            Ok(())
        },
    )?;
    finish(net, |n| n.store(), &ema, report)
}

/// Encodes and quantizes a clip's body and hand streams into an index grid.
pub fn tokenize_clip(vq_body: &VqNetwork, vq_hand: &VqNetwork, clip: &MotionClip) -> Result<IndexGrid> {
    let body = vq_body.tokenize(clip.part(Part::Body))?;
    let hand = vq_hand.tokenize(clip.part(Part::Hand))?;
    IndexGrid::from_columns(&body, &hand, vq_body.config().vocab)
}

pub fn ret_config_for(cfg: &TrainConfig, d_audio: usize, n_ids: usize) -> RetConfig {
    RetConfig { vocab: cfg.vocab, tokens: WINDOW_TOKENS, d_audio, n_ids, d_model: cfg.d_v, blocks: cfg.n_blocks, ..Default::default() }
}

fn corpus_shape(clips: &[ClipRecord]) -> (usize, usize) {
    let d_audio = clips[0].audio.width();
    let n_ids = clips.iter().map(|c| c.n_ids.max(c.id.value() as usize + 1)).max().unwrap_or(1);
    (d_audio, n_ids)
}

fn audio_batch(clips: &[ClipRecord], picks: &[(usize, usize)], dtype: DType) -> Result<Tensor> {
    let windows = picks
        .iter()
        .map(|&(i, start)| {
            let a = clips[i].audio.frames.slice(s![start..start + WINDOW_FRAMES, ..]).to_owned();
            nn::to_tensor_2d(&a, dtype)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&windows, 0)?)
}

/// Trains the token generator on ground-truth index grids from frozen codecs.
pub fn train_ret_on(cfg: &TrainConfig, clips: &[ClipRecord], vq_body: &VqNetwork, vq_hand: &VqNetwork) -> Result<Trained<RetNetwork>> {
    cfg.validate()?;
    check_training_clips(clips)?;
    if vq_body.config().vocab != cfg.vocab || vq_hand.config().vocab != cfg.vocab {
        return Err(Error::Config(format!(
            "codec vocabularies {}/{} differ from configured vocab {}",
            vq_body.config().vocab,
            vq_hand.config().vocab,
            cfg.vocab
        )));
    }
    let grids = clips.iter().map(|c| tokenize_clip(vq_body, vq_hand, &c.motion)).collect::<Result<Vec<_>>>()?;
    let (d_audio, n_ids) = corpus_shape(clips);
    let net = RetNetwork::new(ret_config_for(cfg, d_audio, n_ids), DType::F32, cfg.seed)?;
    let mut rng = cfg.rng();
    let (lo, hi) = cfg.mask_ratio_range;

    let (ema, report) = run_epochs(
        cfg,
        net.store(),
        clips.len(),
        &mut rng,
        |batch, rng, _| {
            let picks: Vec<(usize, usize)> =
                batch.iter().map(|&i| (i, random_window(clips[i].motion.frames(), WINDOW_FRAMES, rng))).collect();
            let ratio = rng.random_range(lo..=hi);
            let mut targets = Vec::with_capacity(picks.len());
            let mut masked = Vec::with_capacity(picks.len());
            let mut weights = Vec::with_capacity(picks.len() * WINDOW_TOKENS * 2);
            for &(i, start) in &picks {
                let tok = start / FRAMES_PER_TOKEN;
                let target = IndexGrid::new(grids[i].entries().slice(s![tok..tok + WINDOW_TOKENS, ..]).to_owned(), cfg.vocab)?;
                let (m, spec) = mask_indices(&target, ratio, rng)?;
                weights.extend(spec.mask.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
                targets.push(target);
                masked.push(m);
            }
            let audio = net.encode_audio_tensor(&audio_batch(clips, &picks, DType::F32)?)?;
            let ids: Vec<u32> = picks.iter().map(|&(i, _)| clips[i].id.value()).collect();
            let ids = Tensor::from_vec(ids, picks.len(), &Device::Cpu)?;
            let masked_refs: Vec<&IndexGrid> = masked.iter().collect();
            let target_refs: Vec<&IndexGrid> = targets.iter().collect();
            let mode = Mode::Training { der_rate: cfg.der_rate, audio_drop_rate: cfg.audio_drop_rate, rng };
            let logits = net.forward_tensor(&grid_batch(&masked_refs)?, Some(&audio), &ids, mode)?;
            let w = match cfg.ce_scope {
                CeScope::All => None,
                CeScope::Masked => Some(Tensor::from_vec(weights, (picks.len(), WINDOW_TOKENS, 2), &Device::Cpu)?),
            };
            cross_entropy(&logits, &grid_batch(&target_refs)?, w.as_ref())
        },
        |_, _| Ok(()),
    )?;
    finish(net, |n| n.store(), &ema, report)
}

/// Trains the audio-to-face regressor.
pub fn train_face_on(cfg: &TrainConfig, clips: &[ClipRecord]) -> Result<Trained<FaceNetwork>> {
    cfg.validate()?;
    check_training_clips(clips)?;
    let net = FaceNetwork::new(FaceConfig { d_audio: clips[0].audio.width(), ..Default::default() }, DType::F32, cfg.seed)?;
    let faces: Vec<Array2<f32>> = clips.iter().map(|c| c.face.joint()).collect();
    let mut rng = cfg.rng();
    let (ema, report) = run_epochs(
        cfg,
        net.store(),
        clips.len(),
        &mut rng,
        |batch, rng, _| {
            let picks: Vec<(usize, usize)> =
                batch.iter().map(|&i| (i, random_window(clips[i].motion.frames(), WINDOW_FRAMES, rng))).collect();
            let audio = audio_batch(clips, &picks, DType::F32)?.transpose(1, 2)?.contiguous()?;
            let target: Vec<Array2<f32>> =
                picks.iter().map(|&(i, st)| faces[i].slice(s![st..st + WINDOW_FRAMES, ..]).to_owned()).collect();
            let refs: Vec<&Array2<f32>> = target.iter().collect();
            let pred = net.forward_tensor(&audio)?;
            Ok(face_loss_tensors(&nn::batch_channels_first(&refs, DType::F32)?, &pred)?.0)
        },
        |_, _| Ok(()),
    )?;
    finish(net, |n| n.store(), &ema, report)
}

fn arch_entry(key: &str, v: usize) -> Entry {
    Entry::i32(format!("meta/arch/{key}"), vec![1], vec![v as i32])
}

fn param_entries(prefix: &str, params: &[NamedTensor]) -> Vec<Entry> {
    params.iter().map(|p| Entry::f32(format!("{prefix}{}", p.name), p.shape.clone(), p.values.clone())).collect()
}

/// Writes raw and EMA parameters, architecture metadata and the loss trajectory.
pub fn save_checkpoint<N>(path: &Path, trained: &Trained<N>, store: &ParamStore, arch: &[(&str, usize)]) -> Result<()> {
    let mut entries = param_entries(Weights::Raw.prefix(), &trained.raw);
    entries.extend(param_entries(Weights::Ema.prefix(), &store.snapshot()?));
    entries.extend(arch.iter().map(|&(k, v)| arch_entry(k, v)));
    let losses: Vec<f32> = trained.report.epoch_losses.iter().map(|&l| l as f32).collect();
    entries.push(Entry::f32("meta/final_loss", vec![1], vec![trained.report.final_loss() as f32]));
    entries.push(Entry::f32("meta/epoch_losses", vec![losses.len()], losses));
    data::write_container(path, &entries)
}

fn read_arch(entries: &[Entry], key: &str) -> Result<usize> {
    let name = format!("meta/arch/{key}");
    match data::find_entry(entries, &name).map(|e| e.as_i32()) {
        Some(Ok([v])) if *v >= 0 => Ok(*v as usize),
        _ => Err(Error::CorruptContainer(format!("checkpoint lacks '{name}'"))),
    }
}

fn read_params(entries: &[Entry], weights: Weights) -> Result<Vec<NamedTensor>> {
    let prefix = weights.prefix();
    entries
        .iter()
        .filter_map(|e| e.name.strip_prefix(prefix).map(|n| (n, e)))
        .map(|(n, e)| Ok(NamedTensor { name: n.to_string(), shape: e.shape.clone(), values: e.as_f32()?.to_vec() }))
        .collect()
}

/// Final epoch loss recorded in a checkpoint.
pub fn checkpoint_final_loss(path: &Path) -> Result<f64> {
    let entries = data::read_container(path)?;
    match data::find_entry(&entries, "meta/final_loss").map(|e| e.as_f32()) {
        Some(Ok([v])) => Ok(*v as f64),
        _ => Err(Error::CorruptContainer("checkpoint lacks 'meta/final_loss'".into())),
    }
}

pub fn vq_arch(net: &VqNetwork) -> Vec<(&'static str, usize)> {
    let c = net.config();
    vec![("part", c.part.column()), ("vocab", c.vocab), ("hidden", c.hidden)]
}

pub fn ret_arch(net: &RetNetwork) -> Vec<(&'static str, usize)> {
    let c = net.config();
    vec![
        ("vocab", c.vocab),
        ("tokens", c.tokens),
        ("d_audio", c.d_audio),
        ("n_ids", c.n_ids),
        ("d_embed", c.d_embed),
        ("d_model", c.d_model),
        ("heads", c.heads),
        ("mlp_ratio", c.mlp_ratio),
        ("blocks", c.blocks),
        ("audio_hidden", c.audio_hidden),
    ]
}

pub fn face_arch(net: &FaceNetwork) -> Vec<(&'static str, usize)> {
    vec![("d_audio", net.config().d_audio), ("hidden", net.config().hidden)]
}

pub fn load_vq(path: &Path, weights: Weights) -> Result<VqNetwork> {
    let entries = data::read_container(path)?;
    let part = if read_arch(&entries, "part")? == 0 { Part::Body } else { Part::Hand };
    let cfg = VqConfig { part, vocab: read_arch(&entries, "vocab")?, hidden: read_arch(&entries, "hidden")? };
    let net = VqNetwork::new(cfg, DType::F32, 0)?;
    net.store().load(&read_params(&entries, weights)?)?;
    Ok(net)
}

pub fn load_ret(path: &Path, weights: Weights) -> Result<RetNetwork> {
    let entries = data::read_container(path)?;
    let a = |k: &str| read_arch(&entries, k);
    let cfg = RetConfig {
        vocab: a("vocab")?,
        tokens: a("tokens")?,
        d_audio: a("d_audio")?,
        n_ids: a("n_ids")?,
        d_embed: a("d_embed")?,
        d_model: a("d_model")?,
        heads: a("heads")?,
        mlp_ratio: a("mlp_ratio")?,
        blocks: a("blocks")?,
        audio_hidden: a("audio_hidden")?,
    };
    let net = RetNetwork::new(cfg, DType::F32, 0)?;
    net.store().load(&read_params(&entries, weights)?)?;
    Ok(net)
}

pub fn load_face(path: &Path, weights: Weights) -> Result<FaceNetwork> {
    let entries = data::read_container(path)?;
    let cfg = FaceConfig { d_audio: read_arch(&entries, "d_audio")?, hidden: read_arch(&entries, "hidden")? };
    let net = FaceNetwork::new(cfg, DType::F32, 0)?;
    net.store().load(&read_params(&entries, weights)?)?;
    Ok(net)
}

fn write_echo(cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.checkpoint)?;
    std::fs::write(cfg.checkpoint.join(format!("{}.config", cfg.stage.name())), cfg.to_text())?;
    Ok(())
}

/// Trains the codec selected by `cfg.stage` and writes its checkpoint.
pub fn train_vq(cfg: &TrainConfig) -> Result<TrainReport> {
    let clips = data::load_split(&cfg.dataset, Split::Train)?;
    let trained = train_vq_on(cfg, &clips)?;
    write_echo(cfg)?;
    save_checkpoint(&cfg.checkpoint.join(cfg.stage.checkpoint_file()), &trained, trained.net.store(), &vq_arch(&trained.net))?;
    Ok(trained.report)
}

/// Trains the generator; both codec checkpoints must already exist.
pub fn train_ret(cfg: &TrainConfig) -> Result<TrainReport> {
    let body_path = cfg.checkpoint.join(Stage::VqBody.checkpoint_file());
    let hand_path = cfg.checkpoint.join(Stage::VqHand.checkpoint_file());
    for p in [&body_path, &hand_path] {
        if !p.exists() {
            return Err(Error::StageOrderViolation(format!("generator training needs {}", p.display())));
        }
    }
    let vq_body = load_vq(&body_path, Weights::Ema)?;
    let vq_hand = load_vq(&hand_path, Weights::Ema)?;
    let clips = data::load_split(&cfg.dataset, Split::Train)?;
    let trained = train_ret_on(cfg, &clips, &vq_body, &vq_hand)?;
    write_echo(cfg)?;
    save_checkpoint(&cfg.checkpoint.join(Stage::Ret.checkpoint_file()), &trained, trained.net.store(), &ret_arch(&trained.net))?;
    Ok(trained.report)
}

pub fn train_face(cfg: &TrainConfig) -> Result<TrainReport> {
    let clips = data::load_split(&cfg.dataset, Split::Train)?;
    let trained = train_face_on(cfg, &clips)?;
    write_echo(cfg)?;
    save_checkpoint(&cfg.checkpoint.join(Stage::Face.checkpoint_file()), &trained, trained.net.store(), &face_arch(&trained.net))?;
    Ok(trained.report)
}

/// Dispatches on `cfg.stage`.
pub fn train_stage(cfg: &TrainConfig) -> Result<TrainReport> {
    match cfg.stage {
        Stage::VqBody | Stage::VqHand => train_vq(cfg),
        Stage::Ret => train_ret(cfg),
        Stage::Face => train_face(cfg),
    }
}

/// Frozen networks needed for generation.
pub struct Models {
    pub vq_body: VqNetwork,
    pub vq_hand: VqNetwork,
    pub ret: RetNetwork,
    pub face: Option<FaceNetwork>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub motion: MotionClip,
    pub face: Option<FaceParams>,
    pub iterations: Vec<usize>,
}

impl Models {
    /// Loads every stage from a checkpoint directory; the face stage is optional.
    pub fn load(dir: &Path, weights: Weights) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingInput(dir.to_path_buf()));
        }
        let face_path = dir.join(Stage::Face.checkpoint_file());
        Ok(Self {
            vq_body: load_vq(&dir.join(Stage::VqBody.checkpoint_file()), weights)?,
            vq_hand: load_vq(&dir.join(Stage::VqHand.checkpoint_file()), weights)?,
            ret: load_ret(&dir.join(Stage::Ret.checkpoint_file()), weights)?,
            face: if face_path.exists() { Some(load_face(&face_path, weights)?) } else { None },
        })
    }

    pub fn generate(&self, audio: &AudioFeatures, id: SpeakerId, p: &IriParams) -> Result<Generated> {
        self.generate_anchored(audio, id, p, &GenerationContext::new())
    }

    /// Generation with anchors pinned in the first window.
    pub fn generate_anchored(&self, audio: &AudioFeatures, id: SpeakerId, p: &IriParams, anchors: &GenerationContext) -> Result<Generated> {
        let long = generate_long_anchored(&self.ret, &self.vq_body, &self.vq_hand, audio, id, p, anchors)?;
        let face = self.face.as_ref().map(|f| f.forward(audio)).transpose()?;
        Ok(Generated { motion: long.clip, face, iterations: long.iterations })
    }

    pub fn n_ids(&self) -> usize {
        self.ret.config().n_ids
    }

    /// Anchors from a pose container holding `body` and/or `hand` matrices that
    /// cover whole tokens of the first window. An optional i32 `positions` entry
    /// restricts anchoring to those token positions.
    pub fn anchors_from_entries(&self, entries: &[Entry]) -> Result<GenerationContext> {
        let tokens = self.ret.config().tokens;
        let positions = match data::find_entry(entries, "positions") {
            Some(e) => Some(
                e.as_i32()?
                    .iter()
                    .map(|&v| usize::try_from(v).map_err(|_| Error::InvalidArgument(format!("negative anchor position {v}"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let mut ctx = GenerationContext::new();
        let mut any = false;
        for (part, net) in [(Part::Body, &self.vq_body), (Part::Hand, &self.vq_hand)] {
            let Some(entry) = data::find_entry(entries, part.name()) else { continue };
            any = true;
            let indices = net.tokenize(&entry.to_matrix()?)?;
            if indices.len() > tokens {
                return Err(Error::InvalidArgument(format!("anchor covers {} tokens, window holds {tokens}", indices.len())));
            }
            for (pos, &idx) in indices.iter().enumerate() {
                if positions.as_ref().is_none_or(|ps| ps.contains(&pos)) {
                    ctx = ctx.with(pos, part, idx);
                }
            }
        }
        if !any {
            return Err(Error::IncompleteClip { path: PathBuf::from("anchor"), entry: "body or hand".into() });
        }
        Ok(ctx)
    }
}

pub fn write_generated(path: &Path, g: &Generated) -> Result<()> {
    let mut entries = vec![Entry::matrix("body", &g.motion.body), Entry::matrix("hand", &g.motion.hand)];
    if let Some(f) = &g.face {
        entries.push(Entry::matrix("face", &f.joint()));
    }
    data::write_container(path, &entries)
}

//! On-disk tensor container, the synthetic audio→motion corpus, and dataset directories.
//!
//! Container layout: `b"RCM1"`, little-endian `u32` header length, a UTF-8 JSON
//! array of `{name, dtype, shape, offset}` in declaration order, then the
//! little-endian payload with entries packed back to back.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{validate_pair, AudioFeatures, FaceParams, MotionClip, SpeakerId, EXPRESSION_DIM, JAW_DIM, POSE_DIM};

pub const MAGIC: &[u8; 4] = b"RCM1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self { name: name.into(), shape, data: TensorData::F32(values) }
    }

    pub fn i32(name: impl Into<String>, shape: Vec<usize>, values: Vec<i32>) -> Self {
        Self { name: name.into(), shape, data: TensorData::I32(values) }
    }

    pub fn matrix(name: impl Into<String>, m: &Array2<f32>) -> Self {
        let (r, c) = m.dim();
        Self::f32(name, vec![r, c], m.iter().copied().collect())
    }

    pub fn to_matrix(&self) -> Result<Array2<f32>> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F32(v), &[r, c]) => Ok(Array2::from_shape_vec((r, c), v.clone())?),
            _ => Err(Error::ShapeMismatch(format!("entry '{}' is not an f32 matrix", self.name))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I32(_) => Err(Error::ShapeMismatch(format!("entry '{}' is i32, expected f32", self.name))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::ShapeMismatch(format!("entry '{}' is f32, expected i32", self.name))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode_container(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut header = Vec::with_capacity(entries.len());
    let mut payload = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|p| p.name == e.name) {
            return Err(Error::InvalidArgument(format!("duplicate entry name '{}'", e.name)));
        }
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::ShapeMismatch(format!("entry '{}': shape {:?} holds {} values", e.name, e.shape, e.data.len())));
        }
        header.push(HeaderEntry { name: e.name.clone(), dtype: e.data.dtype().into(), shape: e.shape.clone(), offset: payload.len() });
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let header = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::InvalidArgument("container header too large".into()))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotAContainer);
    }
    let corrupt = |msg: &str| Error::CorruptContainer(msg.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("missing header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Vec<HeaderEntry> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::CorruptContainer(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut cursor = 0usize;
    let mut entries = Vec::with_capacity(header.len());
    for h in header {
        let count = h.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
        let byte_len = count.checked_mul(4).ok_or_else(|| corrupt("shape overflow"))?;
        if h.offset != cursor {
            return Err(Error::CorruptContainer(format!("entry '{}' at offset {} overlaps or leaves a gap", h.name, h.offset)));
        }
        let end = cursor.checked_add(byte_len).filter(|&e| e <= payload.len()).ok_or_else(|| corrupt("truncated payload"))?;
        let raw = payload[cursor..end].chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4-byte chunk"));
        let data = match h.dtype.as_str() {
            "f32" => TensorData::F32(raw.map(f32::from_le_bytes).collect()),
            "i32" => TensorData::I32(raw.map(i32::from_le_bytes).collect()),
            other => return Err(Error::CorruptContainer(format!("unknown dtype '{other}'"))),
        };
        entries.push(Entry { name: h.name, shape: h.shape, data });
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(entries)
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode_container(entries)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_container(&bytes)
}

pub fn find_entry<'a>(entries: &'a [Entry], name: &str) -> Option<&'a Entry> {
    entries.iter().find(|e| e.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub frames: usize,
    pub n_ids: usize,
    pub d_audio: usize,
    /// Audio envelope → motion amplitude coupling.
    pub gain: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { seed: 0, n_clips: 250, frames: 88, n_ids: 4, d_audio: 64, gain: 1.0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.frames == 0 || self.n_ids == 0 || self.d_audio == 0 {
            return Err(Error::Config("synthetic corpus sizes must be positive".into()));
        }
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(Error::Config(format!("coupling gain {} must be positive", self.gain)));
        }
        Ok(())
    }
}

/// Motion pattern period in frames; every channel oscillates at a harmonic of it.
const MOTION_PERIOD: f64 = 80.0;
const ENVELOPE_COMPONENTS: usize = 3;

/// Corpus-wide constants shared by every clip of one seed.
struct CorpusStyle {
    rest: Vec<f64>,
    amplitude: Vec<f64>,
    harmonic: Vec<f64>,
    /// `[n_ids][POSE_DIM]` phase offsets.
    phase: Vec<Vec<f64>>,
    id_rest: Vec<Vec<f64>>,
    audio_weight: Vec<f64>,
    audio_freq: Vec<f64>,
    jaw_gain: [f64; JAW_DIM],
    expr_gain: Vec<f64>,
}

impl CorpusStyle {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let uni = |lo: f64, hi: f64, n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        let rest = uni(-0.3, 0.3, POSE_DIM, &mut rng);
        let amplitude = uni(0.1, 0.5, POSE_DIM, &mut rng);
        let harmonic = (0..POSE_DIM).map(|_| rng.random_range(1..=4) as f64).collect();
        let phase = (0..spec.n_ids).map(|_| uni(0.0, 2.0 * PI, POSE_DIM, &mut rng)).collect();
        let id_rest = (0..spec.n_ids).map(|_| (0..POSE_DIM).map(|_| 0.1 * normal.sample(&mut rng)).collect()).collect();
        let audio_weight = (0..spec.d_audio).map(|_| 0.5 * normal.sample(&mut rng)).collect();
        let audio_freq = uni(0.5, 3.0, spec.d_audio, &mut rng);
        let jaw = uni(0.2, 0.6, JAW_DIM, &mut rng);
        let expr_gain = (0..EXPRESSION_DIM).map(|_| 0.3 * normal.sample(&mut rng)).collect();
        Self {
            rest,
            amplitude,
            harmonic,
            phase,
            id_rest,
            audio_weight,
            audio_freq,
            jaw_gain: [jaw[0], jaw[1], jaw[2]],
            expr_gain,
        }
    }
}

/// One aligned training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub name: String,
    pub audio: AudioFeatures,
    pub motion: MotionClip,
    pub face: FaceParams,
    pub id: SpeakerId,
    /// Size of the speaker set `id` is drawn from.
    pub n_ids: usize,
}

/// Smooth random speech envelope, one value per frame.
fn envelope(frames: usize, fps: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..ENVELOPE_COMPONENTS)
        .map(|_| (rng.random_range(0.1..0.6), rng.random_range(0.0..0.25), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..frames)
        .map(|t| {
            let v: f64 = comps.iter().map(|&(f, a, psi)| a * (2.0 * PI * f * t as f64 / fps + psi).sin()).sum();
            (0.55 + v).clamp(0.05, 1.2)
        })
        .collect()
}

/// Deterministic synthetic example `clip_index` of the corpus described by `spec`.
pub fn gen_pair(spec: &SyntheticSpec, clip_index: u64) -> Result<ClipRecord> {
    spec.validate()?;
    let style = CorpusStyle::new(spec);
    gen_with_style(spec, &style, clip_index)
}

fn gen_with_style(spec: &SyntheticSpec, style: &CorpusStyle, clip_index: u64) -> Result<ClipRecord> {
    let fps = crate::motion::FPS as f64;
    let t_len = spec.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(clip_index);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let id_value = rng.random_range(0..spec.n_ids as u32);
    let id = SpeakerId::new(id_value, spec.n_ids)?;
    let env = envelope(t_len, fps, &mut rng);
    let offset = rng.random_range(0.0..MOTION_PERIOD);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let channel_phase: Vec<f64> = (0..spec.d_audio).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut audio = Array2::<f32>::zeros((t_len, spec.d_audio));
    for t in 0..t_len {
        let time = t as f64 / fps;
        audio[[t, 0]] = (env[t] * (0.8 + 0.2 * (2.0 * PI * 4.0 * time + syllable_phase).sin())) as f32;
        for j in 1..spec.d_audio {
            let tone = 0.1 * (2.0 * PI * style.audio_freq[j] * time + channel_phase[j]).sin();
            audio[[t, j]] = (env[t] * style.audio_weight[j] + tone + 0.05 * normal.sample(&mut rng)) as f32;
        }
    }

    let id_idx = id_value as usize;
    let mut joint = Array2::<f32>::zeros((t_len, POSE_DIM));
    for t in 0..t_len {
        let cycle = 2.0 * PI * (t as f64 + offset) / MOTION_PERIOD;
        for c in 0..POSE_DIM {
            let osc = (style.harmonic[c] * cycle + style.phase[id_idx][c]).sin();
            joint[[t, c]] = (style.rest[c] + style.id_rest[id_idx][c] + spec.gain * env[t] * style.amplitude[c] * osc) as f32;
        }
    }

    let mut low = env[0];
    let mut face = Array2::<f32>::zeros((t_len, JAW_DIM + EXPRESSION_DIM));
    for t in 0..t_len {
        low += 0.2 * (env[t] - low);
        for k in 0..JAW_DIM {
            face[[t, k]] = (style.jaw_gain[k] * env[t]) as f32;
        }
        for j in 0..EXPRESSION_DIM {
            face[[t, JAW_DIM + j]] = (style.expr_gain[j] * low) as f32;
        }
    }

    let motion = MotionClip::from_joint(&joint)?;
    let face = FaceParams::from_joint(face.view())?;
    let audio = AudioFeatures::new(audio);
    Ok(ClipRecord { name: clip_file_name(clip_index as usize), audio, motion, face, id, n_ids: spec.n_ids })
}

/// The speech envelope underlying the energy channel, for correlation checks.
pub fn gen_envelope(spec: &SyntheticSpec, clip_index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(clip_index);
    let _id: u32 = rng.random_range(0..spec.n_ids as u32);
    envelope(spec.frames, crate::motion::FPS as f64, &mut rng)
}

pub fn synth_corpus(spec: &SyntheticSpec) -> Result<Vec<ClipRecord>> {
    spec.validate()?;
    let style = CorpusStyle::new(spec);
    (0..spec.n_clips as u64).map(|i| gen_with_style(spec, &style, i)).collect()
}

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index:05}.rcm")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn clip_entries(clip: &ClipRecord) -> Vec<Entry> {
    vec![
        Entry::matrix("audio", &clip.audio.frames),
        Entry::matrix("body", &clip.motion.body),
        Entry::matrix("hand", &clip.motion.hand),
        Entry::matrix("face", &clip.face.joint()),
        Entry::i32("id", vec![2], vec![clip.id.value() as i32, clip.n_ids as i32]),
    ]
}

/// Rebuilds and validates one clip from container entries.
pub fn clip_from_entries(name: &str, entries: &[Entry]) -> Result<ClipRecord> {
    let get = |key: &str| {
        find_entry(entries, key).ok_or_else(|| Error::IncompleteClip { path: PathBuf::from(name), entry: key.to_string() })
    };
    let audio = AudioFeatures::new(get("audio")?.to_matrix()?);
    let motion = MotionClip::new(get("body")?.to_matrix()?, get("hand")?.to_matrix()?)?;
    let face = FaceParams::from_joint(get("face")?.to_matrix()?.view())?;
    let (id, n_ids) = match get("id")?.as_i32()? {
        [v] if *v >= 0 => (SpeakerId::new(*v as u32, *v as usize + 1)?, *v as usize + 1),
        [v, n] if *v >= 0 && *n > 0 => (SpeakerId::new(*v as u32, *n as usize)?, *n as usize),
        other => return Err(Error::CorruptContainer(format!("{name}: bad id entry {other:?}"))),
    };
    validate_pair(&motion, &audio)?;
    if face.frames() != motion.frames() {
        return Err(Error::FrameMisalignment(format!("{name}: face has {} frames, motion {}", face.frames(), motion.frames())));
    }
    Ok(ClipRecord { name: name.to_string(), audio, motion, face, id, n_ids })
}

/// Writes one container per clip plus a manifest; the last `n_test` clips form the test split.
pub fn write_dataset(dir: &Path, clips: &[ClipRecord], n_test: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n_train = clips.len().saturating_sub(n_test);
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        write_container(&dir.join(&clip.name), &clip_entries(clip))?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        manifest.push_str(&format!("{} {}\n", clip.name, split.name()));
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Synthesizes a corpus into `dir` with a 4:1 train/test split.
pub fn synth_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<Vec<ClipRecord>> {
    let clips = synth_corpus(spec)?;
    write_dataset(dir, &clips, spec.n_clips / 5)?;
    Ok(clips)
}

/// Loads every container in `dir`, ordered by file name.
pub fn import_external(dir: &Path) -> Result<Vec<ClipRecord>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".rcm"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| {
            let entries = read_container(&dir.join(n))?;
            clip_from_entries(n, &entries).map_err(|e| match e {
                Error::IncompleteClip { entry, .. } => Error::IncompleteClip { path: dir.join(n), entry },
                other => other,
            })
        })
        .collect()
}

/// Clips of one split according to the manifest; without a manifest every clip is training data.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<ClipRecord>> {
    let all = import_external(dir)?;
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Ok(if split == Split::Train { all } else { Vec::new() });
    }
    let text = std::fs::read_to_string(&manifest)?;
    let mut wanted = std::collections::HashSet::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            [name, s] if *s == "train" || *s == "test" => {
                if *s == split.name() {
                    wanted.insert(name.to_string());
                }
            }
            _ => return Err(Error::Config(format!("{}:{}: malformed manifest line", manifest.display(), line_no + 1))),
        }
    }
    Ok(all.into_iter().filter(|c| wanted.contains(&c.name)).collect())
}

/// Writes a bare motion clip (`body`, `hand` entries).
pub fn write_motion(path: &Path, clip: &MotionClip) -> Result<()> {
    write_container(path, &[Entry::matrix("body", &clip.body), Entry::matrix("hand", &clip.hand)])
}

pub fn read_motion(path: &Path) -> Result<MotionClip> {
    let entries = read_container(path)?;
    let get = |key: &str| {
        find_entry(&entries, key).ok_or_else(|| Error::IncompleteClip { path: path.to_path_buf(), entry: key.to_string() })
    };
    MotionClip::new(get("body")?.to_matrix()?, get("hand")?.to_matrix()?)
}

/// Reads audio features from a clip container or a bare `audio` container.
pub fn read_audio(path: &Path) -> Result<AudioFeatures> {
    let entries = read_container(path)?;
    let e = find_entry(&entries, "audio").ok_or_else(|| Error::IncompleteClip { path: path.to_path_buf(), entry: "audio".into() })?;
    let audio = AudioFeatures::new(e.to_matrix()?);
    if !audio.is_finite() {
        return Err(Error::NonFinite(format!("audio in {}", path.display())));
    }
    Ok(audio)
}

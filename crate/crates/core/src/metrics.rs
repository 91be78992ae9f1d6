//! Evaluation metrics: diversity, Fréchet gesture distance, feature-space MAE and
//! beat consistency, plus the motion feature extractor FGD and MAE are computed in.

use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::motion::{AudioFeatures, MotionClip, POSE_DIM};
use crate::nn::{self, Adam, Conv1d, ParamStore, Upsample2};

/// Beat kernel width in seconds.
pub const BC_SIGMA: f64 = 0.1;
pub const FEATURE_DIM: usize = 32;
/// Extractor input width: standardized poses and frame-to-frame velocities.
const FEATURE_INPUT: usize = 2 * POSE_DIM;

/// `[T × 2·153]` poses followed by velocities; the first velocity row repeats the second.
fn pose_and_velocity(clip: &MotionClip) -> Array2<f32> {
    let joint = clip.joint();
    let t = joint.nrows();
    let mut out = Array2::zeros((t, FEATURE_INPUT));
    out.slice_mut(s![.., ..POSE_DIM]).assign(&joint);
    if t >= 2 {
        let vel = &joint.slice(s![1.., ..]) - &joint.slice(s![..-1, ..]);
        out.slice_mut(s![1.., POSE_DIM..]).assign(&vel);
        out.slice_mut(s![0, POSE_DIM..]).assign(&vel.row(0));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMode {
    /// Mean-deviation form: `1/(2K(K−1)) Σ_clips Σ_frames ‖p − p̄_clip‖₁`.
    Printed,
    /// Average summed L1 distance between every pair of clips.
    Pairwise,
}

/// Diversity over `K ≥ 2` equally shaped `[frames × joints]` position matrices.
pub fn diversity(clips: &[Array2<f32>], mode: DiversityMode) -> Result<f64> {
    let k = clips.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 clips, got {k}")));
    }
    let shape = clips[0].dim();
    if clips.iter().any(|c| c.dim() != shape) {
        return Err(Error::ShapeMismatch("diversity clips differ in shape".into()));
    }
    match mode {
        DiversityMode::Printed => {
            let mut total = 0.0f64;
            for clip in clips {
                let mean = clip.mapv(|v| v as f64).mean_axis(ndarray::Axis(0)).expect("non-empty clip");
                for row in clip.rows() {
                    total += row.iter().zip(mean.iter()).map(|(&p, &m)| (p as f64 - m).abs()).sum::<f64>();
                }
            }
            Ok(total / (2.0 * k as f64 * (k as f64 - 1.0)))
        }
        DiversityMode::Pairwise => {
            let mut total = 0.0f64;
            for a in 0..k {
                for b in a + 1..k {
                    total += clips[a].iter().zip(clips[b].iter()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>();
                }
            }
            Ok(total / (k as f64 * (k as f64 - 1.0) / 2.0))
        }
    }
}

/// Diversity of motion clips over their raw body‖hand rotation coordinates.
pub fn clip_diversity(clips: &[MotionClip], mode: DiversityMode) -> Result<f64> {
    let mats: Vec<Array2<f32>> = clips.iter().map(|c| c.joint()).collect();
    diversity(&mats, mode)
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty sample");
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        let c = DVector::from_iterator(d, row.iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= (n as f64 - 1.0).max(1.0);
    (DVector::from_iterator(d, mean.iter().copied()), cov)
}

fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::DegenerateCovariance(*v));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::ShapeMismatch("gaussian moments differ in dimension".into()));
    }
    let root1 = psd_sqrt(s1)?;
    let inner = &root1 * s2 * &root1;
    let cross: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// FGD between two feature sets `[n×d_f]`, `[m×d_f]`.
pub fn fgd(real_feats: &Array2<f64>, gen_feats: &Array2<f64>) -> Result<f64> {
    let d = real_feats.ncols();
    if gen_feats.ncols() != d {
        return Err(Error::ShapeMismatch(format!("feature widths {d} vs {}", gen_feats.ncols())));
    }
    if real_feats.nrows() < d + 1 || gen_feats.nrows() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "fgd needs at least {} samples per set, got {} and {}",
            d + 1,
            real_feats.nrows(),
            gen_feats.nrows()
        )));
    }
    let (mu_r, s_r) = gaussian_fit(real_feats);
    let (mu_g, s_g) = gaussian_fit(gen_feats);
    frechet_distance(&mu_r, &s_r, &mu_g, &s_g)
}

/// Mean absolute difference between paired feature sets.
pub fn mae(real_feats: &Array2<f64>, gen_feats: &Array2<f64>) -> Result<f64> {
    if real_feats.dim() != gen_feats.dim() {
        return Err(Error::ShapeMismatch(format!("unpaired feature sets {:?} vs {:?}", real_feats.dim(), gen_feats.dim())));
    }
    if real_feats.is_empty() {
        return Err(Error::InvalidArgument("empty feature sets".into()));
    }
    Ok(real_feats.iter().zip(gen_feats.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / real_feats.len() as f64)
}

/// Strictly ascending, non-negative beat timestamps in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeatSet {
    pub times: Vec<f64>,
}

impl BeatSet {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("beat times must be finite, non-negative and strictly ascending".into()));
        }
        Ok(Self { times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-frame joint speed by central differences (frames `1..T−1`).
pub fn speed_envelope(clip: &MotionClip) -> Vec<f64> {
    let joint = clip.joint();
    let t = joint.nrows();
    (1..t.saturating_sub(1))
        .map(|i| {
            let d = &joint.row(i + 1) - &joint.row(i - 1);
            d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() * 0.5
        })
        .collect()
}

/// Motion beats: local minima of the joint speed envelope.
pub fn motion_beats(clip: &MotionClip) -> BeatSet {
    let speed = speed_envelope(clip);
    let fps = clip.fps as f64;
    let mut times = Vec::new();
    for i in 1..speed.len().saturating_sub(1) {
        if speed[i] < speed[i - 1] && speed[i] <= speed[i + 1] {
            // envelope index i sits at frame i + 1
            times.push((i + 1) as f64 / fps);
        }
    }
    BeatSet { times }
}

/// Audio beats: local maxima of the rectified first difference of the energy channel.
pub fn audio_beats(audio: &AudioFeatures, fps: f32) -> BeatSet {
    let t = audio.len();
    if t < 3 || audio.width() == 0 {
        return BeatSet::default();
    }
    let energy = audio.frames.column(0);
    let mut onset = vec![0.0f64; t];
    for i in 1..t {
        onset[i] = (energy[i] as f64 - energy[i - 1] as f64).max(0.0);
    }
    let mut times = Vec::new();
    for i in 1..t - 1 {
        if onset[i] > 0.0 && onset[i] > onset[i - 1] && onset[i] >= onset[i + 1] {
            times.push(i as f64 / fps as f64);
        }
    }
    BeatSet { times }
}

/// Mean Gaussian-kernel proximity of each motion beat to its nearest audio beat.
pub fn beat_consistency(motion_b: &BeatSet, audio_b: &BeatSet, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    if audio_b.is_empty() {
        return Err(Error::NoReferenceBeats);
    }
    if motion_b.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = motion_b
        .times
        .iter()
        .map(|&tm| {
            let d2 = audio_b.times.iter().map(|&ta| (tm - ta).powi(2)).fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / motion_b.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractorTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        Self { steps: 300, batch: 16, lr: 1e-3, seed: 0, hidden: 64 }
    }
}

/// Temporal-convolution autoencoder whose mean-pooled bottleneck is the clip feature.
pub struct FeatureExtractor {
    store: ParamStore,
    mean: Array1<f32>,
    std: Array1<f32>,
    enc1: Conv1d,
    enc2: Conv1d,
    enc3: Conv1d,
    dec1: Conv1d,
    dec2: Upsample2,
    dec3: Conv1d,
    /// Reconstruction loss at the first and last training step.
    pub loss_curve: (f64, f64),
}

impl FeatureExtractor {
    fn new(hidden: usize, seed: u64, mean: Array1<f32>, std: Array1<f32>) -> Result<Self> {
        let mut s = ParamStore::new(DType::F32, seed);
        Ok(Self {
            enc1: Conv1d::new(&mut s, "enc1", FEATURE_INPUT, hidden, 3, 1, 1)?,
            enc2: Conv1d::new(&mut s, "enc2", hidden, hidden, 4, 2, 1)?,
            enc3: Conv1d::new(&mut s, "enc3", hidden, FEATURE_DIM, 3, 1, 1)?,
            dec1: Conv1d::new(&mut s, "dec1", FEATURE_DIM, hidden, 3, 1, 1)?,
            dec2: Upsample2::new(&mut s, "dec2", hidden, hidden)?,
            dec3: Conv1d::new(&mut s, "dec3", hidden, FEATURE_INPUT, 3, 1, 1)?,
            store: s,
            mean,
            std,
            loss_curve: (f64::NAN, f64::NAN),
        })
    }

    fn normalise(&self, clip: &MotionClip) -> Array2<f32> {
        let mut j = pose_and_velocity(clip);
        for mut row in j.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        j
    }

    fn bottleneck(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.enc1.forward(x)?.gelu_erf()?;
        let h = self.enc2.forward(&h)?.gelu_erf()?;
        Ok(self.enc3.forward(&h)?.gelu_erf()?)
    }

    fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.dec1.forward(z)?.gelu_erf()?;
        let h = self.dec2.forward(&h)?.gelu_erf()?;
        self.dec3.forward(&h)
    }

    /// Feature vector of one clip (at least 2 frames).
    pub fn extract(&self, clip: &MotionClip) -> Result<Vec<f64>> {
        if clip.frames() < 2 {
            return Err(Error::InsufficientFrames { need: 2, got: clip.frames() });
        }
        let x = nn::batch_channels_first(&[&self.normalise(clip)], DType::F32)?;
        let z = self.bottleneck(&x)?.mean(2)?.squeeze(0)?;
        Ok(z.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Features of many clips as an `[n×d_f]` matrix.
    pub fn extract_all(&self, clips: &[MotionClip]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((clips.len(), FEATURE_DIM));
        for (i, c) in clips.iter().enumerate() {
            let f = self.extract(c)?;
            out.row_mut(i).assign(&Array1::from(f));
        }
        Ok(out)
    }
}

/// Fits the extractor on reference clips only.
pub fn train_feature_extractor(real_clips: &[MotionClip], cfg: &ExtractorTraining) -> Result<FeatureExtractor> {
    const MIN_CLIPS: usize = 20;
    if real_clips.len() < MIN_CLIPS {
        return Err(Error::InvalidArgument(format!(
            "feature extractor needs at least {MIN_CLIPS} reference clips, got {}",
            real_clips.len()
        )));
    }
    let min_len = real_clips.iter().map(|c| c.frames()).min().unwrap_or(0);
    let window = (min_len.min(88) / 4) * 4;
    if window < 4 {
        return Err(Error::InsufficientFrames { need: 4, got: min_len });
    }

    let joints: Vec<Array2<f32>> = real_clips.iter().map(pose_and_velocity).collect();
    let frames: usize = joints.iter().map(|j| j.nrows()).sum();
    let mut mean = Array1::<f64>::zeros(FEATURE_INPUT);
    for j in &joints {
        mean += &j.mapv(|v| v as f64).sum_axis(ndarray::Axis(0));
    }
    mean /= frames as f64;
    let mut var = Array1::<f64>::zeros(FEATURE_INPUT);
    for j in &joints {
        for row in j.rows() {
            var += &(row.mapv(|v| v as f64) - &mean).mapv(|v| v * v);
        }
    }
    var /= frames as f64;
    let std = var.mapv(|v| (v.sqrt().max(1e-3)) as f32);
    let mut fe = FeatureExtractor::new(cfg.hidden, cfg.seed, mean.mapv(|v| v as f32), std)?;
    let normed: Vec<Array2<f32>> = real_clips.iter().map(|c| fe.normalise(c)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_fea7);
    let mut opt = Adam::new(fe.store.vars(), cfg.lr)?;
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let crops: Vec<Array2<f32>> = (0..cfg.batch)
            .map(|_| {
                let c = &normed[rng.random_range(0..normed.len())];
                let start = rng.random_range(0..=c.nrows() - window);
                c.slice(s![start..start + window, ..]).to_owned()
            })
            .collect();
        let refs: Vec<&Array2<f32>> = crops.iter().collect();
        let x = nn::batch_channels_first(&refs, DType::F32)?;
        let recon = fe.reconstruct(&fe.bottleneck(&x)?)?;
        let loss = (recon - &x)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f32>()? as f64;
        if step == 0 {
            first = value;
        }
        last = value;
        opt.backward_step(&loss)?;
    }
    fe.loss_curve = (first, last);
    Ok(fe)
}

/// Flat metric report for one generated set against its reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fgd: f64,
    pub mae: f64,
    pub diversity: f64,
    pub beat_consistency: f64,
    pub clips: usize,
}

impl EvalReport {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("fgd", self.fgd),
            ("mae", self.mae),
            ("diversity", self.diversity),
            ("bc", self.beat_consistency),
            ("clips", self.clips as f64),
        ]
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> =
            self.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect();
        serde_json::Value::Object(map).to_string()
    }
}

/// Scores generated clips against paired reference clips and their audio.
/// Clips whose audio has no beats are left out of the BC average.
pub fn evaluate(
    fe: &FeatureExtractor,
    real: &[MotionClip],
    audio: &[AudioFeatures],
    generated: &[MotionClip],
    mode: DiversityMode,
) -> Result<EvalReport> {
    if real.len() != generated.len() || audio.len() != generated.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference clips, {} audio tracks, {} generated clips",
            real.len(),
            audio.len(),
            generated.len()
        )));
    }
    let rf = fe.extract_all(real)?;
    let gf = fe.extract_all(generated)?;
    let mut bc_sum = 0.0;
    let mut bc_n = 0usize;
    for (g, a) in generated.iter().zip(audio) {
        match beat_consistency(&motion_beats(g), &audio_beats(a, g.fps), BC_SIGMA) {
            Ok(v) => {
                bc_sum += v;
                bc_n += 1;
            }
            Err(Error::NoReferenceBeats) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        fgd: fgd(&rf, &gf)?,
        mae: mae(&rf, &gf)?,
        diversity: clip_diversity(generated, mode)?,
        beat_consistency: if bc_n > 0 { bc_sum / bc_n as f64 } else { 0.0 },
        clips: generated.len(),
    })
}

/// Scores a directory of generated motion files against a dataset directory.
///
/// The extractor is fitted on the dataset's training split. Every test clip
/// (every clip when the dataset has no test split) is paired with the generated
/// file of the same name.
pub fn evaluate_dirs(real_dir: &Path, gen_dir: &Path, cfg: &ExtractorTraining, mode: DiversityMode) -> Result<EvalReport> {
    let train = data::load_split(real_dir, Split::Train)?;
    let mut reference = data::load_split(real_dir, Split::Test)?;
    if reference.is_empty() {
        reference = train.clone();
    }
    if !gen_dir.is_dir() {
        return Err(Error::MissingInput(gen_dir.to_path_buf()));
    }
    let generated = reference.iter().map(|c| data::read_motion(&gen_dir.join(&c.name))).collect::<Result<Vec<_>>>()?;
    let fe = train_feature_extractor(&train.iter().map(|c| c.motion.clone()).collect::<Vec<_>>(), cfg)?;
    let real: Vec<MotionClip> = reference.iter().map(|c| c.motion.clone()).collect();
    let audio: Vec<AudioFeatures> = reference.into_iter().map(|c| c.audio).collect();
    evaluate(&fe, &real, &audio, &generated, mode)
}

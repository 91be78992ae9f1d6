//! Audio-to-face regressor: a stride-1 temporal-convolution encoder followed by a
//! temporal-convolution decoder emitting jaw and expression parameters per frame.

use candle_core::{DType, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::motion::{AudioFeatures, FaceParams, FACE_DIM, JAW_DIM};
use crate::nn::{self, Conv1d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceConfig {
    pub d_audio: usize,
    pub hidden: usize,
}

impl Default for FaceConfig {
    fn default() -> Self {
        Self { d_audio: 64, hidden: 64 }
    }
}

pub struct FaceNetwork {
    cfg: FaceConfig,
    store: ParamStore,
    encoder: Vec<Conv1d>,
    decoder: Vec<Conv1d>,
    out: Conv1d,
}

impl FaceNetwork {
    pub fn new(cfg: FaceConfig, dtype: DType, seed: u64) -> Result<Self> {
        let mut s = ParamStore::new(dtype, seed);
        let h = cfg.hidden;
        let mut encoder = Vec::new();
        for i in 0..4 {
            let c_in = if i == 0 { cfg.d_audio } else { h };
            encoder.push(Conv1d::new(&mut s, &format!("enc.{i}"), c_in, h, 3, 1, 1)?);
        }
        let decoder = (0..2)
            .map(|i| Conv1d::new(&mut s, &format!("dec.{i}"), h, h, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv1d::new(&mut s, "dec.out", h, FACE_DIM, 3, 1, 1)?;
        Ok(Self { cfg, store: s, encoder, decoder, out })
    }

    pub fn config(&self) -> &FaceConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `[B, d_a, T]` → `[B, 103, T]`.
    pub fn forward_tensor(&self, audio: &Tensor) -> Result<Tensor> {
        let mut h = audio.clone();
        for conv in self.encoder.iter().chain(&self.decoder) {
            h = conv.forward(&h)?.gelu_erf()?;
        }
        self.out.forward(&h)
    }

    pub fn forward(&self, audio: &AudioFeatures) -> Result<FaceParams> {
        face_forward(self, audio)
    }
}

pub fn face_forward(net: &FaceNetwork, audio: &AudioFeatures) -> Result<FaceParams> {
    if audio.width() != net.cfg.d_audio {
        return Err(Error::ShapeMismatch(format!("audio width {}, expected {}", audio.width(), net.cfg.d_audio)));
    }
    if audio.is_empty() {
        return Err(Error::InsufficientFrames { need: 1, got: 0 });
    }
    let x = nn::to_tensor_2d(&audio.frames, net.store.dtype())?.t()?.unsqueeze(0)?.contiguous()?;
    let y = net.forward_tensor(&x)?.squeeze(0)?.t()?;
    let joint = nn::from_tensor_2d(&y)?;
    if joint.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("face prediction".into()));
    }
    FaceParams::from_joint(joint.view())
}

/// L1 on jaw entries plus mean squared error on expression entries,
/// over channels-first `[B, 103, T]` tensors.
pub fn face_loss_tensors(gt: &Tensor, pred: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if gt.dims() != pred.dims() {
        return Err(Error::ShapeMismatch(format!("face target {:?} vs prediction {:?}", gt.dims(), pred.dims())));
    }
    let diff = (gt - pred)?;
    let jaw = diff.narrow(1, 0, JAW_DIM)?.abs()?.mean_all()?;
    let expr = diff.narrow(1, JAW_DIM, FACE_DIM - JAW_DIM)?.sqr()?.mean_all()?;
    Ok(((&jaw + &expr)?, jaw, expr))
}

/// `(total, L_jaw, L_expr)` for one clip.
pub fn face_loss(gt: &FaceParams, pred: &FaceParams) -> Result<(f64, f64, f64)> {
    if gt.jaw.dim() != pred.jaw.dim() || gt.expression.dim() != pred.expression.dim() {
        return Err(Error::ShapeMismatch("face parameter shapes differ".into()));
    }
    let to = |f: &FaceParams| -> Result<Tensor> {
        let joint: Array2<f32> = f.joint();
        Ok(nn::to_tensor_2d(&joint, DType::F64)?.t()?.unsqueeze(0)?)
    };
    let (total, jaw, expr) = face_loss_tensors(&to(gt)?, &to(pred)?)?;
    Ok((total.to_scalar::<f64>()?, jaw.to_scalar::<f64>()?, expr.to_scalar::<f64>()?))
}

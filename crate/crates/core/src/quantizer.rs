//! Compositional pose codecs: one VQ-VAE per body part.
//!
//! Each network downsamples a `[T×d_part]` pose sequence by four in time to a
//! `[t×64]` latent sequence, snaps every latent row to its nearest codebook entry,
//! and decodes the selected entries back to poses. Decoder gradients reach the
//! encoder through a straight-through estimator.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::{Part, FRAMES_PER_TOKEN};
use crate::nn::{self, Conv1d, Init, ParamStore, Upsample2};

pub const LATENT_DIM: usize = 64;
pub const DEFAULT_VOCAB: usize = 256;

/// A `V×64` table of code vectors for one body part.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub table: Array2<f32>,
    pub part: Part,
}

impl Codebook {
    pub fn new(table: Array2<f32>, part: Part) -> Result<Self> {
        if table.nrows() < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 rows, got {}", table.nrows())));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Self { table, part })
    }

    pub fn vocab(&self) -> usize {
        self.table.nrows()
    }
}

/// Latent sequence `[t×64]` (encoder output or selected code vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub vectors: Array2<f32>,
}

impl LatentSeq {
    pub fn new(vectors: Array2<f32>) -> Self {
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Index of the nearest codebook row to `query` by squared Euclidean distance;
/// ties go to the lowest index.
pub fn nearest_row(table: &Array2<f32>, query: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (r, row) in table.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        if d < best.1 {
            best = (r, d);
        }
    }
    best
}

/// Nearest-neighbour quantization of every latent row.
pub fn quantize(codebook: &Codebook, z: &LatentSeq) -> (LatentSeq, Vec<u32>) {
    let mut codes = Array2::zeros(z.vectors.dim());
    let mut indices = Vec::with_capacity(z.len());
    for (i, row) in z.vectors.rows().into_iter().enumerate() {
        let q: Vec<f32> = row.to_vec();
        let (idx, _) = nearest_row(&codebook.table, &q);
        codes.row_mut(i).assign(&codebook.table.row(idx));
        indices.push(idx as u32);
    }
    (LatentSeq::new(codes), indices)
}

/// Gathers code vectors for resolved indices.
pub fn codebook_lookup(codebook: &Codebook, indices: &[u32]) -> Result<LatentSeq> {
    let v = codebook.vocab();
    let mut out = Array2::zeros((indices.len(), codebook.table.ncols()));
    for (i, &idx) in indices.iter().enumerate() {
        if idx as usize >= v {
            return Err(Error::UnresolvedIndex { index: idx, vocab: v });
        }
        out.row_mut(i).assign(&codebook.table.row(idx as usize));
    }
    Ok(LatentSeq::new(out))
}

/// The three loss components and their unweighted sum.
#[derive(Debug, Clone)]
pub struct VqLoss<T> {
    pub total: T,
    pub reconstruction: T,
    pub commitment: T,
    pub velocity: T,
}

/// Loss stack over channels-first tensors: poses `[B, d, T]`, latents `[B, t, 64]`.
///
/// `z` is the encoder output and `e` the selected code vectors. The commitment
/// term is `mean((sg[e] − z)²) + 0.25·mean((e − sg[z])²)`; stop-gradients are
/// realised with `detach`, or with the supplied frozen values when given.
pub fn vq_loss_tensors(
    poses: &Tensor,
    recon: &Tensor,
    z: &Tensor,
    e: &Tensor,
    frozen: Option<(&Tensor, &Tensor)>,
) -> Result<VqLoss<Tensor>> {
    if poses.dims() != recon.dims() {
        return Err(Error::ShapeMismatch(format!("poses {:?} vs reconstruction {:?}", poses.dims(), recon.dims())));
    }
    if z.dims() != e.dims() {
        return Err(Error::ShapeMismatch(format!("latents {:?} vs codes {:?}", z.dims(), e.dims())));
    }
    let frames = poses.dim(2)?;
    if frames < 2 {
        return Err(Error::InsufficientFrames { need: 2, got: frames });
    }
    let (e_sg, z_sg) = match frozen {
        Some((e_sg, z_sg)) => (e_sg.clone(), z_sg.clone()),
        None => (e.detach(), z.detach()),
    };
    let reconstruction = (poses - recon)?.abs()?.mean_all()?;
    let commitment = ((&e_sg - z)?.sqr()?.mean_all()? + ((e - &z_sg)?.sqr()?.mean_all()? * 0.25)?)?;
    let dv = |x: &Tensor| -> candle_core::Result<Tensor> { x.narrow(2, 1, frames - 1)? - x.narrow(2, 0, frames - 1)? };
    let velocity = (dv(poses)? - dv(recon)?)?.abs()?.mean_all()?;
    let total = ((&reconstruction + &commitment)? + &velocity)?;
    Ok(VqLoss { total, reconstruction, commitment, velocity })
}

/// Host-level loss for a single clip part: `m`, `m_hat` are `[T×d]`, `z`, `e` are `[t×64]`.
pub fn vq_loss(m: &Array2<f32>, m_hat: &Array2<f32>, z: &LatentSeq, e: &LatentSeq) -> Result<VqLoss<f64>> {
    if m.dim() != m_hat.dim() || z.vectors.dim() != e.vectors.dim() {
        return Err(Error::ShapeMismatch("vq loss operands differ in shape".into()));
    }
    let dt = DType::F64;
    let poses = nn::to_tensor_2d(m, dt)?.t()?.unsqueeze(0)?;
    let recon = nn::to_tensor_2d(m_hat, dt)?.t()?.unsqueeze(0)?;
    let zt = nn::to_tensor_2d(&z.vectors, dt)?.unsqueeze(0)?;
    let et = nn::to_tensor_2d(&e.vectors, dt)?.unsqueeze(0)?;
    let l = vq_loss_tensors(&poses, &recon, &zt, &et, None)?;
    let s = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
    Ok(VqLoss {
        total: s(&l.total)?,
        reconstruction: s(&l.reconstruction)?,
        commitment: s(&l.commitment)?,
        velocity: s(&l.velocity)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqConfig {
    pub part: Part,
    pub vocab: usize,
    pub hidden: usize,
}

impl VqConfig {
    pub fn new(part: Part) -> Self {
        Self { part, vocab: DEFAULT_VOCAB, hidden: 128 }
    }
}

/// Values held fixed by stop-gradient, captured at one parameter point.
#[derive(Debug, Clone)]
pub struct FrozenQuantization {
    pub indices: Tensor,
    pub codes: Tensor,
    pub latents: Tensor,
}

/// Everything one training forward pass produces.
pub struct VqForward {
    pub recon: Tensor,
    pub latents: Tensor,
    pub codes: Tensor,
    pub indices: Vec<u32>,
    pub loss: VqLoss<Tensor>,
}

pub struct VqNetwork {
    cfg: VqConfig,
    store: ParamStore,
    enc_in: Conv1d,
    enc_down1: Conv1d,
    enc_down2: Conv1d,
    enc_out: Conv1d,
    codebook: Tensor,
    norm_mean: Tensor,
    norm_std: Tensor,
    dec_in: Conv1d,
    dec_up1: Upsample2,
    dec_up2: Upsample2,
    dec_out: Conv1d,
}

impl VqNetwork {
    pub fn new(cfg: VqConfig, dtype: DType, seed: u64) -> Result<Self> {
        if cfg.vocab < 2 {
            return Err(Error::Config("codebook size must be at least 2".into()));
        }
        let mut s = ParamStore::new(dtype, seed);
        let d = cfg.part.dim();
        let h = cfg.hidden;
        Ok(Self {
            enc_in: Conv1d::new(&mut s, "enc.in", d, h, 3, 1, 1)?.replicate_edges(),
            enc_down1: Conv1d::new(&mut s, "enc.down1", h, h, 4, 2, 1)?.replicate_edges(),
            enc_down2: Conv1d::new(&mut s, "enc.down2", h, h, 4, 2, 1)?.replicate_edges(),
            enc_out: Conv1d::new(&mut s, "enc.out", h, LATENT_DIM, 1, 1, 0)?,
            codebook: s.var("codebook", &[cfg.vocab, LATENT_DIM], Init::Normal(0.1))?,
            norm_mean: s.var("norm.mean", &[1, d, 1], Init::Zeros)?,
            norm_std: s.var("norm.std", &[1, d, 1], Init::Ones)?,
            dec_in: Conv1d::new(&mut s, "dec.in", LATENT_DIM, h, 3, 1, 1)?.replicate_edges(),
            dec_up1: Upsample2::new(&mut s, "dec.up1", h, h)?.replicate_edges(),
            dec_up2: Upsample2::new(&mut s, "dec.up2", h, h)?.replicate_edges(),
            dec_out: Conv1d::new(&mut s, "dec.out", h, d, 3, 1, 1)?.replicate_edges(),
            store: s,
            cfg,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn part(&self) -> Part {
        self.cfg.part
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook_tensor(&self) -> &Tensor {
        &self.codebook
    }

    /// Sets the per-channel pose standardization. These values never receive gradients.
    pub fn set_normalization(&self, mean: &[f32], std: &[f32]) -> Result<()> {
        let d = self.cfg.part.dim();
        if mean.len() != d || std.len() != d {
            return Err(Error::PartDimMismatch { expected: d, got: mean.len().max(std.len()) });
        }
        if std.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("normalization scales must be positive".into()));
        }
        let dt = self.store.dtype();
        let dev = self.store.device();
        self.var_named("norm.mean").set(&Tensor::from_slice(mean, (1, d, 1), dev)?.to_dtype(dt)?)?;
        self.var_named("norm.std").set(&Tensor::from_slice(std, (1, d, 1), dev)?.to_dtype(dt)?)?;
        Ok(())
    }

    /// `[B, d, T]` → `[B, 64, T/4]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_sub(&self.norm_mean.detach())?.broadcast_div(&self.norm_std.detach())?;
        let h = self.enc_in.forward(&x)?.gelu_erf()?;
        let h = self.enc_down1.forward(&h)?.gelu_erf()?;
        let h = self.enc_down2.forward(&h)?.gelu_erf()?;
        self.enc_out.forward(&h)
    }

    /// `[B, 64, t]` → `[B, d, 4t]`.
    pub fn decode_tensor(&self, codes: &Tensor) -> Result<Tensor> {
        let h = self.dec_in.forward(codes)?.gelu_erf()?;
        let h = self.dec_up1.forward(&h)?.gelu_erf()?;
        let h = self.dec_up2.forward(&h)?.gelu_erf()?;
        let y = self.dec_out.forward(&h)?;
        Ok(y.broadcast_mul(&self.norm_std.detach())?.broadcast_add(&self.norm_mean.detach())?)
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(nn::from_tensor_2d(&self.codebook)?, self.cfg.part)
    }

    /// Training forward pass over `[B, d, T]` poses.
    ///
    /// With `frozen`, the quantization choice and every stop-gradient operand
    /// are taken from the capture instead of the current parameters, which turns
    /// the straight-through surrogate into an ordinary differentiable function.
    pub fn forward_train(&self, x: &Tensor, frozen: Option<&FrozenQuantization>) -> Result<VqForward> {
        let (b, d, frames) = x.dims3()?;
        if d != self.cfg.part.dim() {
            return Err(Error::PartDimMismatch { expected: self.cfg.part.dim(), got: d });
        }
        if frames == 0 || frames % FRAMES_PER_TOKEN != 0 {
            return Err(Error::FrameMisalignment(format!("{frames} frames is not a multiple of {FRAMES_PER_TOKEN}")));
        }
        let z = self.encode_tensor(x)?.transpose(1, 2)?.contiguous()?;
        let t = z.dim(1)?;
        let (indices, idx_tensor) = match frozen {
            Some(f) => (f.indices.flatten_all()?.to_vec1::<u32>()?, f.indices.clone()),
            None => {
                let cb = self.codebook()?;
                let rows = z.detach().reshape((b * t, LATENT_DIM))?;
                let idx = quantize(&cb, &LatentSeq::new(nn::from_tensor_2d(&rows)?)).1;
                let it = Tensor::from_slice(&idx, b * t, z.device())?;
                (idx, it)
            }
        };
        let e = self.codebook.index_select(&idx_tensor, 0)?.reshape((b, t, LATENT_DIM))?;
        let st_offset = match frozen {
            Some(f) => (&f.codes - &f.latents)?,
            None => (&e - &z)?.detach(),
        };
        let straight_through = (&z + st_offset)?;
        let recon = self.decode_tensor(&straight_through.transpose(1, 2)?.contiguous()?)?;
        let loss = vq_loss_tensors(x, &recon, &z, &e, frozen.map(|f| (&f.codes, &f.latents)))?;
        Ok(VqForward { recon, latents: z, codes: e, indices, loss })
    }

    /// Captures the current quantization and stop-gradient operands for `x`.
    pub fn freeze(&self, x: &Tensor) -> Result<FrozenQuantization> {
        let out = self.forward_train(x, None)?;
        Ok(FrozenQuantization {
            indices: Tensor::from_slice(&out.indices, out.indices.len(), x.device())?,
            codes: out.codes.detach().copy()?,
            latents: out.latents.detach().copy()?,
        })
    }

    /// Overwrites codebook rows with randomly chosen latent rows plus small jitter.
    pub fn seed_codebook(&self, latents: &Array2<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        if latents.nrows() == 0 {
            return Ok(());
        }
        let v = self.cfg.vocab;
        let mut table = Array2::<f32>::zeros((v, LATENT_DIM));
        for r in 0..v {
            let src = rng.random_range(0..latents.nrows());
            for c in 0..LATENT_DIM {
                table[[r, c]] = latents[[src, c]] + rng.random_range(-0.01f32..0.01);
            }
        }
        self.var_named("codebook").set(&nn::to_tensor_2d(&table, self.store.dtype())?)?;
        Ok(())
    }

    /// Re-seeds every codebook row with zero `usage` from random latent rows.
    /// Returns the number of rows replaced.
    pub fn revive_codes(&self, usage: &[usize], latents: &Array2<f32>, rng: &mut ChaCha8Rng) -> Result<usize> {
        if usage.len() != self.cfg.vocab {
            return Err(Error::ShapeMismatch(format!("usage has {} counts for {} codes", usage.len(), self.cfg.vocab)));
        }
        if latents.nrows() == 0 || usage.iter().all(|&u| u > 0) {
            return Ok(0);
        }
        let mut table = nn::from_tensor_2d(&self.codebook)?;
        let mut revived = 0;
        for (r, _) in usage.iter().enumerate().filter(|(_, &u)| u == 0) {
            let src = rng.random_range(0..latents.nrows());
            for c in 0..LATENT_DIM {
                table[[r, c]] = latents[[src, c]] + rng.random_range(-0.01f32..0.01);
            }
            revived += 1;
        }
        self.var_named("codebook").set(&nn::to_tensor_2d(&table, self.store.dtype())?)?;
        Ok(revived)
    }

    fn var_named(&self, name: &str) -> candle_core::Var {
        self.store
            .named_vars()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .expect("parameter registered at construction")
    }

    fn check_part(&self, poses: &Array2<f32>) -> Result<()> {
        let d = self.cfg.part.dim();
        if poses.ncols() != d {
            return Err(Error::PartDimMismatch { expected: d, got: poses.ncols() });
        }
        if poses.nrows() == 0 || poses.nrows() % FRAMES_PER_TOKEN != 0 {
            return Err(Error::FrameMisalignment(format!(
                "{} frames is not a positive multiple of {FRAMES_PER_TOKEN}",
                poses.nrows()
            )));
        }
        Ok(())
    }

    /// `[T×d_part]` → `[T/4 × 64]`.
    pub fn encode(&self, part_poses: &Array2<f32>) -> Result<LatentSeq> {
        self.check_part(part_poses)?;
        let x = nn::to_tensor_2d(part_poses, self.store.dtype())?.t()?.unsqueeze(0)?.contiguous()?;
        let z = self.encode_tensor(&x)?.squeeze(0)?.t()?;
        Ok(LatentSeq::new(nn::from_tensor_2d(&z)?))
    }

    /// `[t×64]` → `[4t × d_part]`.
    pub fn decode(&self, codes: &LatentSeq) -> Result<Array2<f32>> {
        if codes.vectors.ncols() != LATENT_DIM || codes.is_empty() {
            return Err(Error::ShapeMismatch(format!("codes must be [t×{LATENT_DIM}], got {:?}", codes.vectors.dim())));
        }
        let x = nn::to_tensor_2d(&codes.vectors, self.store.dtype())?.t()?.unsqueeze(0)?.contiguous()?;
        let y = self.decode_tensor(&x)?.squeeze(0)?.t()?;
        let out = nn::from_tensor_2d(&y)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoded poses".into()));
        }
        Ok(out)
    }

    /// Encodes and quantizes poses to codebook indices.
    pub fn tokenize(&self, part_poses: &Array2<f32>) -> Result<Vec<u32>> {
        let z = self.encode(part_poses)?;
        Ok(quantize(&self.codebook()?, &z).1)
    }

    /// Looks up indices and decodes them to poses.
    pub fn detokenize(&self, indices: &[u32]) -> Result<Array2<f32>> {
        self.decode(&codebook_lookup(&self.codebook()?, indices)?)
    }
}

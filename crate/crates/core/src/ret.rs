//! The masked, channel-wise transformer generator.
//!
//! Body and hand index columns are embedded separately, each fused with the
//! downsampled audio feature, and presented to the transformer as two channels of
//! one image-like map whose width is time. A patch embedding over both channels
//! yields one token per time step; id and position encodings are added to every
//! token, and two heads classify the body and hand codebook index per step.

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, Array3};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::{AudioFeatures, IndexGrid, Part, SpeakerId, FRAMES_PER_TOKEN, WINDOW_TOKENS};
use crate::nn::{self, Conv1d, Embedding, EncoderBlock, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetConfig {
    /// Codebook size per part; the MASK symbol is `vocab`.
    pub vocab: usize,
    /// Token positions per window.
    pub tokens: usize,
    pub d_audio: usize,
    pub n_ids: usize,
    pub d_embed: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: usize,
    pub audio_hidden: usize,
}

impl Default for RetConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            tokens: WINDOW_TOKENS,
            d_audio: 64,
            n_ids: 4,
            d_embed: 64,
            d_model: 256,
            heads: 4,
            mlp_ratio: 4,
            blocks: 4,
            audio_hidden: 128,
        }
    }
}

/// Temporal-convolution audio encoder, `[B, d_a, T]` → `[B, t, d_e]`.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    conv_in: Conv1d,
    down1: Conv1d,
    down2: Conv1d,
    proj: Conv1d,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_audio: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            conv_in: Conv1d::new(store, &format!("{name}.in"), d_audio, hidden, 3, 1, 1)?,
            down1: Conv1d::new(store, &format!("{name}.down1"), hidden, hidden, 4, 2, 1)?,
            down2: Conv1d::new(store, &format!("{name}.down2"), hidden, hidden, 4, 2, 1)?,
            proj: Conv1d::new(store, &format!("{name}.proj"), hidden, d_out, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv_in.forward(x)?.gelu_erf()?;
        let h = self.down1.forward(&h)?.gelu_erf()?;
        let h = self.down2.forward(&h)?.gelu_erf()?;
        Ok(self.proj.forward(&h)?.transpose(1, 2)?.contiguous()?)
    }
}

/// Whether dropout paths are active. Inference carries no randomness at all.
pub enum Mode<'a> {
    Inference,
    Training { der_rate: f64, audio_drop_rate: f64, rng: &'a mut ChaCha8Rng },
}

/// Which positions contribute to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeScope {
    All,
    Masked,
}

impl std::str::FromStr for CeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CeScope::All),
            "masked" => Ok(CeScope::Masked),
            other => Err(Error::Config(format!("unknown ce scope '{other}'"))),
        }
    }
}

impl std::fmt::Display for CeScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CeScope::All => "all",
            CeScope::Masked => "masked",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// `[t×2]`, true where the entry was replaced by MASK.
    pub mask: Array2<bool>,
    pub ratio: f64,
}

/// Replaces `round(ratio·2t)` entries, chosen uniformly without replacement, by MASK.
pub fn mask_indices(grid: &IndexGrid, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(IndexGrid, MaskSpec)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let t = grid.tokens();
    let total = 2 * t;
    let n = (ratio * total as f64).round() as usize;
    let mut out = grid.clone();
    let mut mask = Array2::from_elem((t, 2), false);
    for flat in index::sample(rng, total, n) {
        let (pos, col) = (flat / 2, flat % 2);
        let part = if col == 0 { Part::Body } else { Part::Hand };
        out.set(pos, part, grid.mask_symbol());
        mask[[pos, col]] = true;
    }
    Ok((out, MaskSpec { mask, ratio }))
}

/// Mean cross-entropy of `logits [B, t, 2, V]` against `targets [B, t, 2]` (u32).
/// With `weights [B, t, 2]`, the mean is taken over weighted positions only.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    let logp = nn::log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?.squeeze(D::Minus1)?;
    let nll = picked.neg()?;
    match weights {
        None => Ok(nll.mean_all()?),
        Some(w) => {
            let w = w.to_dtype(nll.dtype())?;
            let denom = w.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if denom <= 0.0 {
                return Ok(nll.zeros_like()?.sum_all()?);
            }
            Ok((nll.mul(&w)?.sum_all()? / denom)?)
        }
    }
}

/// Mean cross-entropy over all `t×2` positions of one clip.
pub fn ce_loss(logits: &Array3<f32>, target: &IndexGrid) -> Result<f64> {
    let (t, parts, v) = logits.dim();
    if t != target.tokens() || parts != 2 || v != target.vocab() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target grid {}×2 over {}",
            logits.dim(),
            target.tokens(),
            target.vocab()
        )));
    }
    if target.count_masked() > 0 {
        return Err(Error::InvalidArgument("target grid contains MASK entries".into()));
    }
    let data: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    let lt = Tensor::from_vec(data, (1, t, 2, v), &Device::Cpu)?;
    let tt = grid_batch(&[target])?;
    Ok(cross_entropy(&lt, &tt, None)?.to_scalar::<f64>()?)
}

/// Stacks grids into a `[B, t, 2]` u32 tensor.
pub fn grid_batch(grids: &[&IndexGrid]) -> Result<Tensor> {
    let t = grids.first().map(|g| g.tokens()).unwrap_or(0);
    let mut data = Vec::with_capacity(grids.len() * t * 2);
    for g in grids {
        if g.tokens() != t {
            return Err(Error::ShapeMismatch("grids in a batch differ in length".into()));
        }
        data.extend(g.entries().iter().copied());
    }
    Ok(Tensor::from_vec(data, (grids.len(), t, 2), &Device::Cpu)?)
}

pub struct RetNetwork {
    cfg: RetConfig,
    store: ParamStore,
    body_embed: Embedding,
    hand_embed: Embedding,
    audio: AudioEncoder,
    hybrid: Linear,
    intrinsic: Linear,
    patch: Linear,
    pos: Tensor,
    id_embed: Embedding,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    body_head: Linear,
    hand_head: Linear,
}

impl RetNetwork {
    pub fn new(cfg: RetConfig, dtype: DType, seed: u64) -> Result<Self> {
        if cfg.vocab < 2 || cfg.tokens == 0 || cfg.n_ids == 0 || cfg.blocks == 0 {
            return Err(Error::Config(format!("invalid generator configuration {cfg:?}")));
        }
        let mut s = ParamStore::new(dtype, seed);
        let (de, dv) = (cfg.d_embed, cfg.d_model);
        let body_embed = Embedding::new(&mut s, "embed.body", cfg.vocab + 1, de)?;
        let hand_embed = Embedding::new(&mut s, "embed.hand", cfg.vocab + 1, de)?;
        let audio = AudioEncoder::new(&mut s, "audio", cfg.d_audio, cfg.audio_hidden, de)?;
        let hybrid = Linear::new(&mut s, "fusion.hybrid", 2 * de, de)?;
        let intrinsic = Linear::new(&mut s, "fusion.intrinsic", de, dv)?;
        let patch = Linear::new(&mut s, "patch_embed", 2 * dv, dv)?;
        let pos = s.var("pos_embed", &[cfg.tokens, dv], Init::Normal(0.02))?;
        let id_embed = Embedding::new(&mut s, "id_embed", cfg.n_ids, dv)?;
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(&mut s, &format!("blocks.{i}"), dv, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut s, "norm", dv)?;
        let body_head = Linear::new(&mut s, "head.body", dv, cfg.vocab)?;
        let hand_head = Linear::new(&mut s, "head.hand", dv, cfg.vocab)?;
        Ok(Self {
            cfg,
            store: s,
            body_embed,
            hand_embed,
            audio,
            hybrid,
            intrinsic,
            patch,
            pos,
            id_embed,
            blocks,
            norm,
            body_head,
            hand_head,
        })
    }

    pub fn config(&self) -> &RetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `[B, T, d_a]` audio batch → `[B, t, d_e]`.
    pub fn encode_audio_tensor(&self, audio: &Tensor) -> Result<Tensor> {
        let (_, frames, width) = audio.dims3()?;
        if frames == 0 || frames % FRAMES_PER_TOKEN != 0 {
            return Err(Error::FrameMisalignment(format!("{frames} audio frames is not a multiple of {FRAMES_PER_TOKEN}")));
        }
        if width != self.cfg.d_audio {
            return Err(Error::ShapeMismatch(format!("audio width {width}, expected {}", self.cfg.d_audio)));
        }
        self.audio.forward(&audio.transpose(1, 2)?.contiguous()?)
    }

    pub fn encode_audio(&self, audio: &AudioFeatures) -> Result<Array2<f32>> {
        let x = nn::to_tensor_2d(&audio.frames, self.dtype())?.unsqueeze(0)?;
        nn::from_tensor_2d(&self.encode_audio_tensor(&x)?.squeeze(0)?)
    }

    /// Body and hand pose embedding maps `[B, t, d_e]`, before any dropout or fusion.
    pub fn embed_poses(&self, masked: &Tensor) -> Result<(Tensor, Tensor)> {
        let body_ids = masked.narrow(2, 0, 1)?.squeeze(2)?.contiguous()?;
        let hand_ids = masked.narrow(2, 1, 1)?.squeeze(2)?.contiguous()?;
        Ok((self.body_embed.forward(&body_ids)?, self.hand_embed.forward(&hand_ids)?))
    }

    fn fuse_channel(&self, pose: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let mixed = self.hybrid.forward(&Tensor::cat(&[pose, audio], D::Minus1)?)?.gelu_erf()?;
        self.intrinsic.forward(&mixed)
    }

    /// Batched forward: `masked [B, t, 2]` u32, `audio_feat [B, t, d_e]` or absent,
    /// `ids [B]` u32 → logits `[B, t, 2, V]`.
    pub fn forward_tensor(&self, masked: &Tensor, audio_feat: Option<&Tensor>, ids: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, t, parts) = masked.dims3()?;
        if parts != 2 || t > self.cfg.tokens {
            return Err(Error::ShapeMismatch(format!("index batch {:?} exceeds {} tokens × 2", masked.dims(), self.cfg.tokens)));
        }
        let (mut body, mut hand) = self.embed_poses(masked)?;
        let mut audio = match audio_feat {
            Some(a) => {
                if a.dims() != [b, t, self.cfg.d_embed] {
                    return Err(Error::ShapeMismatch(format!("audio feature {:?}, expected [{b}, {t}, {}]", a.dims(), self.cfg.d_embed)));
                }
                a.clone()
            }
            None => Tensor::zeros((b, t, self.cfg.d_embed), self.dtype(), &Device::Cpu)?,
        };
        if let Mode::Training { der_rate, audio_drop_rate, rng } = mode {
            body = nn::dropout(&body, der_rate, rng)?;
            hand = nn::dropout(&hand, der_rate, rng)?;
            if audio_feat.is_some() {
                audio = nn::dropout(&audio, audio_drop_rate, rng)?;
            }
        }
        let body_map = self.fuse_channel(&body, &audio)?;
        let hand_map = self.fuse_channel(&hand, &audio)?;
        let mut x = self.patch.forward(&Tensor::cat(&[&body_map, &hand_map], D::Minus1)?)?;
        x = x.broadcast_add(&self.pos.narrow(0, 0, t)?.unsqueeze(0)?)?;
        x = x.broadcast_add(&self.id_embed.forward(ids)?.unsqueeze(1)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?;
        let body_logits = self.body_head.forward(&x)?;
        let hand_logits = self.hand_head.forward(&x)?;
        Ok(Tensor::stack(&[&body_logits, &hand_logits], 2)?)
    }

    pub fn check_id(&self, id: SpeakerId) -> Result<()> {
        if id.value() as usize >= self.cfg.n_ids {
            return Err(Error::IdOutOfRange { id: id.value(), n_ids: self.cfg.n_ids });
        }
        Ok(())
    }

    /// Single-clip forward returning host logits `[t, 2, V]`.
    pub fn forward(&self, masked: &IndexGrid, audio_feat: Option<&Array2<f32>>, id: SpeakerId, mode: Mode) -> Result<Array3<f32>> {
        self.check_id(id)?;
        if masked.vocab() != self.cfg.vocab {
            return Err(Error::ShapeMismatch(format!("grid vocabulary {} vs network {}", masked.vocab(), self.cfg.vocab)));
        }
        let audio = audio_feat.map(|a| nn::to_tensor_2d(a, self.dtype()).and_then(|t| Ok(t.unsqueeze(0)?))).transpose()?;
        let ids = Tensor::new(&[id.value()], &Device::Cpu)?;
        let logits = self.forward_tensor(&grid_batch(&[masked])?, audio.as_ref(), &ids, mode)?;
        logits_to_host(&logits.squeeze(0)?)
    }
}

/// `[t, 2, V]` tensor → host array, rejecting non-finite values.
pub fn logits_to_host(logits: &Tensor) -> Result<Array3<f32>> {
    let (t, p, v) = logits.dims3()?;
    let data = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("generator logits".into()));
    }
    Ok(Array3::from_shape_vec((t, p, v), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> RetConfig {
        RetConfig {
            vocab: 8,
            tokens: 4,
            d_audio: 6,
            n_ids: 3,
            d_embed: 8,
            d_model: 16,
            heads: 2,
            mlp_ratio: 2,
            blocks: 2,
            audio_hidden: 8,
        }
    }

    fn random_grid(t: usize, v: usize, rng: &mut ChaCha8Rng) -> IndexGrid {
        IndexGrid::new(Array2::from_shape_fn((t, 2), |_| rng.random_range(0..v as u32)), v).unwrap()
    }

    fn random_audio(frames: usize, width: usize, rng: &mut ChaCha8Rng) -> AudioFeatures {
        AudioFeatures::new(Array2::from_shape_fn((frames, width), |_| rng.random_range(-1.0f32..1.0)))
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = random_grid(22, 256, &mut rng);
        let (all, spec) = mask_indices(&grid, 1.0, &mut rng).unwrap();
        assert_eq!(all.count_masked(), 44);
        assert!(spec.mask.iter().all(|&m| m));
        let (none, _) = mask_indices(&grid, 0.0, &mut rng).unwrap();
        assert_eq!(none, grid);
        let (half, spec) = mask_indices(&grid, 0.5, &mut rng).unwrap();
        assert_eq!(half.count_masked(), 22);
        for (pos, part) in grid.positions() {
            if !spec.mask[[pos, part.column()]] {
                assert_eq!(half.get(pos, part), grid.get(pos, part));
            }
        }
    }

    #[test]
    fn ce_uniform_and_confident() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random_grid(22, 256, &mut rng);
        let uniform = Array3::<f32>::zeros((22, 2, 256));
        assert!((ce_loss(&uniform, &target).unwrap() - (256f64).ln()).abs() < 1e-9);

        let mut sharp = Array3::<f32>::zeros((22, 2, 256));
        for (pos, part) in target.positions() {
            sharp[[pos, part.column(), target.get(pos, part) as usize]] = 100.0;
        }
        assert!(ce_loss(&sharp, &target).unwrap() < 1e-30);

        let mut with_mask = target.clone();
        with_mask.set(0, Part::Hand, 256);
        assert!(ce_loss(&uniform, &with_mask).is_err());
    }

    #[test]
    fn ce_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = random_grid(5, 8, &mut rng);
        let logits = Array3::from_shape_fn((5, 2, 8), |_| rng.random_range(-2.0f32..2.0));
        let base = ce_loss(&logits, &target).unwrap();
        // Swap the body entries at positions 0 and 3 in both operands.
        let mut l2 = logits.clone();
        let mut t2 = target.clone();
        for v in 0..8 {
            l2[[0, 0, v]] = logits[[3, 0, v]];
            l2[[3, 0, v]] = logits[[0, 0, v]];
        }
        t2.set(0, Part::Body, target.get(3, Part::Body));
        t2.set(3, Part::Body, target.get(0, Part::Body));
        assert!((ce_loss(&l2, &t2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = RetConfig { vocab: 256, blocks: 1, d_model: 32, audio_hidden: 16, d_embed: 16, ..Default::default() };
        let net = RetNetwork::new(cfg, DType::F32, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let audio = net.encode_audio(&random_audio(88, 64, &mut rng)).unwrap();
        assert_eq!(audio.dim(), (22, 16));
        let grid = random_grid(22, 256, &mut rng);
        let id = SpeakerId::new(0, 4).unwrap();
        let a = net.forward(&grid, Some(&audio), id, Mode::Inference).unwrap();
        let b = net.forward(&grid, Some(&audio), id, Mode::Inference).unwrap();
        assert_eq!(a.dim(), (22, 2, 256));
        assert_eq!(a, b);

        let c = net
            .forward(&grid, Some(&audio), id, Mode::Training { der_rate: 0.0, audio_drop_rate: 0.0, rng: &mut rng })
            .unwrap();
        assert_eq!(a, c);

        let zeros = Array2::zeros(audio.dim());
        let absent = net.forward(&grid, None, id, Mode::Inference).unwrap();
        let zeroed = net.forward(&grid, Some(&zeros), id, Mode::Inference).unwrap();
        assert_eq!(absent, zeroed);

        let bad = SpeakerId::new(5, 8).unwrap();
        assert!(net.forward(&grid, None, bad, Mode::Inference).is_err());
    }

    #[test]
    fn audio_encoder_cases() {
        let net = RetNetwork::new(tiny(), DType::F32, 0).unwrap();
        let zero = AudioFeatures::new(Array2::zeros((16, 6)));
        assert_eq!(net.encode_audio(&zero).unwrap(), net.encode_audio(&zero).unwrap());
        assert!(net.encode_audio(&AudioFeatures::new(Array2::zeros((10, 6)))).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = net.encode_audio(&random_audio(16, 6, &mut rng)).unwrap();
            let b = net.encode_audio(&random_audio(16, 6, &mut rng)).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn hand_edits_leave_body_embedding_unchanged() {
        let net = RetNetwork::new(tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let g = random_grid(4, 8, &mut rng);
            let (masked, spec) = mask_indices(&g, 0.5, &mut rng).unwrap();
            let mut edited = masked.clone();
            for pos in 0..4 {
                if spec.mask[[pos, 1]] {
                    edited.set(pos, Part::Hand, rng.random_range(0..8));
                }
            }
            let (b1, _) = net.embed_poses(&grid_batch(&[&masked]).unwrap()).unwrap();
            let (b2, _) = net.embed_poses(&grid_batch(&[&edited]).unwrap()).unwrap();
            assert_eq!(b1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn ids_change_logits_and_heads_exclude_mask() {
        let net = RetNetwork::new(tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let g = random_grid(4, 8, &mut rng);
            let a = net.forward(&g, None, SpeakerId::new(0, 3).unwrap(), Mode::Inference).unwrap();
            let b = net.forward(&g, None, SpeakerId::new(1, 3).unwrap(), Mode::Inference).unwrap();
            assert_ne!(a, b);
            assert_eq!(a.dim().2, 8);
        }
    }

    #[test]
    fn inference_ignores_rng_state() {
        let net = RetNetwork::new(tiny(), DType::F32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_grid(4, 8, &mut rng);
        let audio = net.encode_audio(&random_audio(16, 6, &mut rng)).unwrap();
        let id = SpeakerId::new(2, 3).unwrap();
        let a = net.forward(&g, Some(&audio), id, Mode::Inference).unwrap();
        let _ = net.forward(&g, Some(&audio), id, Mode::Training { der_rate: 0.5, audio_drop_rate: 0.5, rng: &mut rng });
        let b = net.forward(&g, Some(&audio), id, Mode::Inference).unwrap();
        assert_eq!(a, b);
    }
}

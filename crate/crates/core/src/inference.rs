//! Iterative reconstruction inference.
//!
//! Decoding starts from a fully masked index grid (apart from any anchored
//! context). Each iteration runs the generator with and without the audio
//! condition, combines the logits with the guidance scale, and reveals every still
//! masked entry whose top-class probability clears a threshold that decays
//! linearly over the iteration budget. The final iteration reveals whatever is left.

use candle_core::{Device, Tensor};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::motion::{AudioFeatures, IndexGrid, MotionClip, Part, SpeakerId, FRAMES_PER_TOKEN, WINDOW_FRAMES};
use crate::nn;
use crate::quantizer::VqNetwork;
use crate::ret::{grid_batch, logits_to_host, Mode, RetNetwork};

/// Frames of the previous segment carried into the next one.
pub const CONTEXT_FRAMES: usize = 8;
pub const CONTEXT_TOKENS: usize = CONTEXT_FRAMES / FRAMES_PER_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IriParams {
    pub max_iters: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub guidance_scale: f64,
    /// Evaluate the unconditional branch even when the scale is 1.
    pub force_unconditional: bool,
}

impl Default for IriParams {
    fn default() -> Self {
        Self { max_iters: 10, tau0: 0.9, tau_min: 0.0, guidance_scale: 2.0, force_unconditional: false }
    }
}

impl IriParams {
    pub fn new(max_iters: usize, tau0: f64, tau_min: f64, guidance_scale: f64) -> Result<Self> {
        let p = Self { max_iters, tau0, tau_min, guidance_scale, force_unconditional: false };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.tau0 > 0.0 && self.tau0 <= 1.0) && !(self.tau0 == 0.0 && self.tau_min == 0.0) {
            return Err(Error::InvalidArgument(format!("tau0 {} outside (0, 1]", self.tau0)));
        }
        if !(0.0..1.0).contains(&self.tau_min) || self.tau_min > self.tau0 {
            return Err(Error::InvalidArgument(format!("tau_min {} must lie in [0, tau0]", self.tau_min)));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidArgument(format!("guidance scale {}", self.guidance_scale)));
        }
        Ok(())
    }
}

/// One fixed entry of the index grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub pos: usize,
    pub part: Part,
    pub index: u32,
}

/// Entries that are pre-filled before decoding and never re-masked.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationContext {
    pub anchors: Vec<Anchor>,
}

impl GenerationContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, pos: usize, part: Part, index: u32) -> Self {
        self.anchors.push(Anchor { pos, part, index });
        self
    }

    /// Every non-MASK entry of `grid`.
    pub fn from_grid(grid: &IndexGrid) -> Self {
        let anchors = grid
            .positions()
            .filter(|&(pos, part)| !grid.is_masked(pos, part))
            .map(|(pos, part)| Anchor { pos, part, index: grid.get(pos, part) })
            .collect();
        Self { anchors }
    }

    /// One whole part column of `grid`, leaving the other part free.
    pub fn part_only(grid: &IndexGrid, part: Part) -> Self {
        let anchors = (0..grid.tokens()).map(|pos| Anchor { pos, part, index: grid.get(pos, part) }).collect();
        Self { anchors }
    }

    /// Head tokens of `head` and tail tokens of `tail` (both parts), for splicing.
    pub fn splice(head: &IndexGrid, tail: &IndexGrid, head_tokens: usize, tail_tokens: usize) -> Result<Self> {
        let t = head.tokens();
        if tail.tokens() != t || head_tokens + tail_tokens > t {
            return Err(Error::InvalidArgument("splice anchors overlap or grids differ in length".into()));
        }
        let mut ctx = Self::new();
        for pos in 0..head_tokens {
            for part in Part::ALL {
                ctx = ctx.with(pos, part, head.get(pos, part));
            }
        }
        for pos in t - tail_tokens..t {
            for part in Part::ALL {
                ctx = ctx.with(pos, part, tail.get(pos, part));
            }
        }
        Ok(ctx)
    }

    fn apply(&self, grid: &mut IndexGrid) -> Result<()> {
        for a in &self.anchors {
            if a.index as usize >= grid.vocab() {
                return Err(Error::UnresolvedIndex { index: a.index, vocab: grid.vocab() });
            }
            if a.pos >= grid.tokens() {
                return Err(Error::InvalidArgument(format!("anchor position {} beyond {} tokens", a.pos, grid.tokens())));
            }
            grid.set(a.pos, a.part, a.index);
        }
        Ok(())
    }
}

/// Anything that maps a partially masked grid to per-entry logits `[t, 2, V]`.
pub trait Predictor {
    fn vocab(&self) -> usize;
    fn tokens(&self) -> usize;
    /// `conditioned = false` requests the empty-condition branch.
    fn predict(&self, grid: &IndexGrid, conditioned: bool) -> Result<Array3<f32>>;
}

/// Guided logits `s·cond − (s−1)·uncond`.
pub fn cfg_logits(cond: &Array3<f32>, uncond: &Array3<f32>, s: f64) -> Result<Array3<f32>> {
    if cond.dim() != uncond.dim() {
        return Err(Error::ShapeMismatch(format!("cond {:?} vs uncond {:?}", cond.dim(), uncond.dim())));
    }
    let s = s as f32;
    let w = s - 1.0;
    let mut out = cond.clone();
    out.zip_mut_with(uncond, |c, &u| *c = s * *c - w * u);
    Ok(out)
}

/// Linearly decaying confidence threshold for iteration `k`.
pub fn threshold(k: usize, p: &IriParams) -> f64 {
    if p.max_iters <= 1 {
        return p.tau_min;
    }
    p.tau0 - (p.tau0 - p.tau_min) * k as f64 / (p.max_iters - 1) as f64
}

/// Argmax class and its softmax probability; ties go to the lowest class.
fn top_class(logits: ndarray::ArrayView1<f32>) -> (u32, f64) {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best] as f64;
    let denom: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    (best as u32, 1.0 / denom)
}

#[derive(Debug, Clone)]
pub struct IriOutcome {
    pub grid: IndexGrid,
    /// Iterations actually run.
    pub iterations: usize,
    /// Entries revealed at each iteration.
    pub reveals: Vec<Vec<(usize, Part)>>,
}

pub fn iri_with_predictor(pred: &dyn Predictor, p: &IriParams, ctx: &GenerationContext) -> Result<IriOutcome> {
    p.validate()?;
    let mut grid = IndexGrid::masked(pred.tokens(), pred.vocab());
    ctx.apply(&mut grid)?;
    let mut reveals = Vec::new();
    let mut iterations = 0;
    for k in 0..p.max_iters {
        if grid.count_masked() == 0 {
            break;
        }
        iterations += 1;
        let cond = pred.predict(&grid, true)?;
        let logits = if p.guidance_scale == 1.0 && !p.force_unconditional {
            cond
        } else {
            cfg_logits(&cond, &pred.predict(&grid, false)?, p.guidance_scale)?
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("guided logits".into()));
        }
        let tau = threshold(k, p);
        let last = k + 1 == p.max_iters;
        let mut revealed = Vec::new();
        let mut next = grid.clone();
        for (pos, part) in grid.positions() {
            if !grid.is_masked(pos, part) {
                continue;
            }
            let (class, conf) = top_class(logits.slice(ndarray::s![pos, part.column(), ..]));
            if conf >= tau || last {
                next.set(pos, part, class);
                revealed.push((pos, part));
            }
        }
        grid = next;
        reveals.push(revealed);
    }
    Ok(IriOutcome { grid, iterations, reveals })
}

/// The generator bound to one audio window and speaker.
pub struct RetPredictor<'a> {
    net: &'a RetNetwork,
    audio: Tensor,
    id: Tensor,
}

impl<'a> RetPredictor<'a> {
    pub fn new(net: &'a RetNetwork, audio: &AudioFeatures, id: SpeakerId) -> Result<Self> {
        net.check_id(id)?;
        let frames = audio.len();
        if frames != net.config().tokens * FRAMES_PER_TOKEN {
            return Err(Error::FrameMisalignment(format!(
                "audio window has {frames} frames, generator expects {}",
                net.config().tokens * FRAMES_PER_TOKEN
            )));
        }
        let x = nn::to_tensor_2d(&audio.frames, net.dtype())?.unsqueeze(0)?;
        Ok(Self { net, audio: net.encode_audio_tensor(&x)?, id: Tensor::new(&[id.value()], &Device::Cpu)? })
    }
}

impl Predictor for RetPredictor<'_> {
    fn vocab(&self) -> usize {
        self.net.config().vocab
    }

    fn tokens(&self) -> usize {
        self.net.config().tokens
    }

    fn predict(&self, grid: &IndexGrid, conditioned: bool) -> Result<Array3<f32>> {
        let audio = conditioned.then_some(&self.audio);
        let logits = self.net.forward_tensor(&grid_batch(&[grid])?, audio, &self.id, Mode::Inference)?;
        logits_to_host(&logits.squeeze(0)?)
    }
}

pub fn iri_generate(
    net: &RetNetwork,
    audio: &AudioFeatures,
    id: SpeakerId,
    p: &IriParams,
    ctx: &GenerationContext,
) -> Result<IriOutcome> {
    iri_with_predictor(&RetPredictor::new(net, audio, id)?, p, ctx)
}

/// Decoding constrained by user anchors (target poses already quantized to indices).
pub fn edit_generate(
    net: &RetNetwork,
    audio: &AudioFeatures,
    id: SpeakerId,
    p: &IriParams,
    anchors: &GenerationContext,
) -> Result<IriOutcome> {
    iri_generate(net, audio, id, p, anchors)
}

/// Decodes an index grid through both part codecs.
pub fn decode_grid(vq_body: &VqNetwork, vq_hand: &VqNetwork, grid: &IndexGrid) -> Result<MotionClip> {
    let body = vq_body.detokenize(&grid.column(Part::Body))?;
    let hand = vq_hand.detokenize(&grid.column(Part::Hand))?;
    MotionClip::new(body, hand)
}

/// Joins window grids on the shared token timeline. Every window after the
/// first contributes only the tokens after its carried context.
pub fn stitch_grids(segments: &[IndexGrid]) -> Result<IndexGrid> {
    let first = segments.first().ok_or_else(|| Error::InvalidArgument("no segments to stitch".into()))?;
    let mut body = first.column(Part::Body);
    let mut hand = first.column(Part::Hand);
    for g in &segments[1..] {
        if g.tokens() <= CONTEXT_TOKENS || g.vocab() != first.vocab() {
            return Err(Error::ShapeMismatch(format!("segment of {} tokens over vocab {} cannot follow vocab {}", g.tokens(), g.vocab(), first.vocab())));
        }
        body.extend_from_slice(&g.column(Part::Body)[CONTEXT_TOKENS..]);
        hand.extend_from_slice(&g.column(Part::Hand)[CONTEXT_TOKENS..]);
    }
    IndexGrid::from_columns(&body, &hand, first.vocab())
}

/// Start frame of every window covering `frames` frames of audio.
pub fn segment_starts(frames: usize) -> Vec<usize> {
    let step = WINDOW_FRAMES - CONTEXT_FRAMES;
    let mut starts = vec![0];
    while starts.last().unwrap() + WINDOW_FRAMES < frames {
        starts.push(starts.last().unwrap() + step);
    }
    starts
}

#[derive(Debug, Clone)]
pub struct LongGeneration {
    pub clip: MotionClip,
    pub segments: Vec<IndexGrid>,
    pub segment_starts: Vec<usize>,
    pub iterations: Vec<usize>,
}

/// Generates motion for arbitrarily long audio by decoding overlapping windows.
///
/// Each window after the first starts with the previous window's final eight
/// frames, whose two token positions are pre-filled from the previous grid. The
/// windows are joined in token space (the later window's copy of the overlap is
/// dropped) and decoded in one pass, so no seam sits at a decoder boundary. A
/// short final window is padded by repeating the last audio frame and truncated
/// afterwards.
pub fn generate_long(
    net: &RetNetwork,
    vq_body: &VqNetwork,
    vq_hand: &VqNetwork,
    audio_full: &AudioFeatures,
    id: SpeakerId,
    p: &IriParams,
) -> Result<LongGeneration> {
    generate_long_anchored(net, vq_body, vq_hand, audio_full, id, p, &GenerationContext::new())
}

/// [`generate_long`] with user anchors applied to the first window.
pub fn generate_long_anchored(
    net: &RetNetwork,
    vq_body: &VqNetwork,
    vq_hand: &VqNetwork,
    audio_full: &AudioFeatures,
    id: SpeakerId,
    p: &IriParams,
    first: &GenerationContext,
) -> Result<LongGeneration> {
    let frames = audio_full.len();
    if frames == 0 {
        return Err(Error::InsufficientFrames { need: 1, got: 0 });
    }
    let tokens = net.config().tokens;
    let starts = segment_starts(frames);
    let mut segments: Vec<IndexGrid> = Vec::with_capacity(starts.len());
    let mut iterations = Vec::with_capacity(starts.len());
    for &start in &starts {
        let window = audio_full.window_padded(start, WINDOW_FRAMES);
        let mut ctx = if segments.is_empty() { first.clone() } else { GenerationContext::new() };
        if let Some(prev) = segments.last() {
            for k in 0..CONTEXT_TOKENS {
                for part in Part::ALL {
                    ctx = ctx.with(k, part, prev.get(tokens - CONTEXT_TOKENS + k, part));
                }
            }
        }
        let out = iri_generate(net, &window, id, p, &ctx)?;
        iterations.push(out.iterations);
        segments.push(out.grid);
    }
    let clip = decode_grid(vq_body, vq_hand, &stitch_grids(&segments)?)?.slice_frames(0, frames);
    Ok(LongGeneration { clip, segments, segment_starts: starts, iterations })
}

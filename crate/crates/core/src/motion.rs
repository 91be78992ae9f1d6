//! Shared domain types: pose clips, face trajectories, audio features, speaker
//! identities and codebook index grids, plus the clip arithmetic every stage uses.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const BODY_DIM: usize = 63;
pub const HAND_DIM: usize = 90;
/// Width of the joint body‖hand representation (body columns first).
pub const POSE_DIM: usize = BODY_DIM + HAND_DIM;
pub const JAW_DIM: usize = 3;
pub const EXPRESSION_DIM: usize = 100;
pub const FACE_DIM: usize = JAW_DIM + EXPRESSION_DIM;
pub const FPS: f32 = 30.0;
/// Temporal compression of the pose codecs: one token per four frames.
pub const FRAMES_PER_TOKEN: usize = 4;
pub const WINDOW_FRAMES: usize = 88;
pub const WINDOW_TOKENS: usize = WINDOW_FRAMES / FRAMES_PER_TOKEN;

/// One of the two compositional body parts, each with its own codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Body,
    Hand,
}

impl Part {
    pub const ALL: [Part; 2] = [Part::Body, Part::Hand];

    pub fn dim(self) -> usize {
        match self {
            Part::Body => BODY_DIM,
            Part::Hand => HAND_DIM,
        }
    }

    /// Column of this part inside an [`IndexGrid`].
    pub fn column(self) -> usize {
        match self {
            Part::Body => 0,
            Part::Hand => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Body => "body",
            Part::Hand => "hand",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Part::Body),
            "hand" => Ok(Part::Hand),
            other => Err(Error::InvalidArgument(format!("unknown part '{other}'"))),
        }
    }
}

fn all_finite(m: &Array2<f32>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// A pose sequence: body `[T×63]` and hand `[T×90]` axis-angle rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub body: Array2<f32>,
    pub hand: Array2<f32>,
    pub fps: f32,
}

impl MotionClip {
    /// Builds a clip at 30 FPS, checking part widths and matching frame counts.
    pub fn new(body: Array2<f32>, hand: Array2<f32>) -> Result<Self> {
        if body.ncols() != BODY_DIM {
            return Err(Error::PartDimMismatch { expected: BODY_DIM, got: body.ncols() });
        }
        if hand.ncols() != HAND_DIM {
            return Err(Error::PartDimMismatch { expected: HAND_DIM, got: hand.ncols() });
        }
        if body.nrows() != hand.nrows() {
            return Err(Error::FrameMisalignment(format!(
                "body has {} frames, hand has {}",
                body.nrows(),
                hand.nrows()
            )));
        }
        Ok(Self { body, hand, fps: FPS })
    }

    /// Splits a joint `[T×153]` matrix back into body and hand.
    pub fn from_joint(joint: &Array2<f32>) -> Result<Self> {
        if joint.ncols() != POSE_DIM {
            return Err(Error::PartDimMismatch { expected: POSE_DIM, got: joint.ncols() });
        }
        Self::new(
            joint.slice(s![.., ..BODY_DIM]).to_owned(),
            joint.slice(s![.., BODY_DIM..]).to_owned(),
        )
    }

    pub fn zeros(frames: usize) -> Self {
        Self {
            body: Array2::zeros((frames, BODY_DIM)),
            hand: Array2::zeros((frames, HAND_DIM)),
            fps: FPS,
        }
    }

    pub fn frames(&self) -> usize {
        self.body.nrows()
    }

    pub fn part(&self, part: Part) -> &Array2<f32> {
        match part {
            Part::Body => &self.body,
            Part::Hand => &self.hand,
        }
    }

    /// Body‖hand concatenated along the feature axis, `[T×153]`.
    pub fn joint(&self) -> Array2<f32> {
        concatenate(Axis(1), &[self.body.view(), self.hand.view()])
            .expect("body and hand share a frame count")
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.body) && all_finite(&self.hand)
    }

    /// Frames `[start, end)` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> MotionClip {
        MotionClip {
            body: self.body.slice(s![start..end, ..]).to_owned(),
            hand: self.hand.slice(s![start..end, ..]).to_owned(),
            fps: self.fps,
        }
    }
}

/// Face trajectory: jaw `[T×3]` and expression `[T×100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub jaw: Array2<f32>,
    pub expression: Array2<f32>,
}

impl FaceParams {
    pub fn new(jaw: Array2<f32>, expression: Array2<f32>) -> Result<Self> {
        if jaw.ncols() != JAW_DIM || expression.ncols() != EXPRESSION_DIM {
            return Err(Error::ShapeMismatch(format!(
                "face parameters must be 3 + 100 wide, got {} + {}",
                jaw.ncols(),
                expression.ncols()
            )));
        }
        if jaw.nrows() != expression.nrows() {
            return Err(Error::FrameMisalignment("jaw and expression lengths differ".into()));
        }
        Ok(Self { jaw, expression })
    }

    /// Splits a `[T×103]` matrix into jaw `[0:3)` and expression `[3:103)`.
    pub fn from_joint(joint: ArrayView2<f32>) -> Result<Self> {
        if joint.ncols() != FACE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "face parameters must have {FACE_DIM} columns, got {}",
                joint.ncols()
            )));
        }
        Self::new(
            joint.slice(s![.., ..JAW_DIM]).to_owned(),
            joint.slice(s![.., JAW_DIM..]).to_owned(),
        )
    }

    pub fn frames(&self) -> usize {
        self.jaw.nrows()
    }

    pub fn joint(&self) -> Array2<f32> {
        concatenate(Axis(1), &[self.jaw.view(), self.expression.view()])
            .expect("jaw and expression share a frame count")
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.jaw) && all_finite(&self.expression)
    }
}

/// Per-frame MFCC-style audio features at the motion frame rate, `[T×d_a]`.
/// Column 0 carries frame energy.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub frames: Array2<f32>,
}

impl AudioFeatures {
    pub fn new(frames: Array2<f32>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.frames)
    }

    /// Frames `[start, start+len)`; frames past the end repeat the last available frame.
    pub fn window_padded(&self, start: usize, len: usize) -> AudioFeatures {
        let last = self.len().saturating_sub(1);
        let mut out = Array2::zeros((len, self.width()));
        for i in 0..len {
            let src = (start + i).min(last);
            out.row_mut(i).assign(&self.frames.row(src));
        }
        AudioFeatures::new(out)
    }
}

/// Identity drawn from a fixed-size speaker set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpeakerId(u32);

impl SpeakerId {
    pub fn new(value: u32, n_ids: usize) -> Result<Self> {
        if (value as usize) < n_ids {
            Ok(Self(value))
        } else {
            Err(Error::IdOutOfRange { id: value, n_ids })
        }
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

/// A `[t×2]` grid of codebook indices (column 0 body, column 1 hand).
/// The value `vocab` is the reserved MASK symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    entries: Array2<u32>,
    vocab: usize,
}

impl IndexGrid {
    pub fn new(entries: Array2<u32>, vocab: usize) -> Result<Self> {
        if entries.ncols() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "index grid needs 2 columns, got {}",
                entries.ncols()
            )));
        }
        if let Some(&bad) = entries.iter().find(|&&v| v as usize > vocab) {
            return Err(Error::UnresolvedIndex { index: bad, vocab });
        }
        Ok(Self { entries, vocab })
    }

    /// Builds a grid from per-part index columns.
    pub fn from_columns(body: &[u32], hand: &[u32], vocab: usize) -> Result<Self> {
        if body.len() != hand.len() {
            return Err(Error::ShapeMismatch("body and hand index columns differ in length".into()));
        }
        let entries = Array2::from_shape_fn((body.len(), 2), |(i, c)| if c == 0 { body[i] } else { hand[i] });
        Self::new(entries, vocab)
    }

    pub fn masked(tokens: usize, vocab: usize) -> Self {
        Self { entries: Array2::from_elem((tokens, 2), vocab as u32), vocab }
    }

    pub fn mask_symbol(&self) -> u32 {
        self.vocab as u32
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn tokens(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, pos: usize, part: Part) -> u32 {
        self.entries[[pos, part.column()]]
    }

    pub fn set(&mut self, pos: usize, part: Part, value: u32) {
        self.entries[[pos, part.column()]] = value;
    }

    pub fn is_masked(&self, pos: usize, part: Part) -> bool {
        self.get(pos, part) == self.mask_symbol()
    }

    pub fn count_masked(&self) -> usize {
        let m = self.mask_symbol();
        self.entries.iter().filter(|&&v| v == m).count()
    }

    pub fn entries(&self) -> &Array2<u32> {
        &self.entries
    }

    pub fn column(&self, part: Part) -> Vec<u32> {
        self.entries.column(part.column()).to_vec()
    }

    /// All `(position, part)` coordinates in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, Part)> {
        (0..self.tokens()).flat_map(|p| Part::ALL.into_iter().map(move |part| (p, part)))
    }
}

/// Frame-to-frame differences of the body‖hand representation, `[(T−1)×153]`.
pub fn velocity(clip: &MotionClip) -> Result<Array2<f32>> {
    let frames = clip.frames();
    if frames < 2 {
        return Err(Error::InsufficientFrames { need: 2, got: frames });
    }
    let joint = clip.joint();
    Ok(&joint.slice(s![1.., ..]) - &joint.slice(s![..-1, ..]))
}

/// Checks that a clip and its audio can be used as a training pair.
pub fn validate_pair(clip: &MotionClip, audio: &AudioFeatures) -> Result<()> {
    let frames = clip.frames();
    if frames != audio.len() || clip.hand.nrows() != frames {
        return Err(Error::FrameMisalignment(format!(
            "motion has {frames} frames, audio has {}",
            audio.len()
        )));
    }
    if frames == 0 || frames % FRAMES_PER_TOKEN != 0 {
        return Err(Error::FrameMisalignment(format!(
            "{frames} frames is not a positive multiple of {FRAMES_PER_TOKEN}"
        )));
    }
    if !clip.is_finite() {
        return Err(Error::NonFinite("motion".into()));
    }
    if !audio.is_finite() {
        return Err(Error::NonFinite("audio".into()));
    }
    Ok(())
}

/// Appends `b` to `a`, discarding the first `drop_overlap_frames` frames of `b`.
pub fn concat_clips(a: &MotionClip, b: &MotionClip, drop_overlap_frames: usize) -> Result<MotionClip> {
    if drop_overlap_frames >= b.frames() {
        return Err(Error::OverlapTooLarge { overlap: drop_overlap_frames, frames: b.frames() });
    }
    if a.fps != b.fps {
        return Err(Error::FrameMisalignment(format!("fps {} vs {}", a.fps, b.fps)));
    }
    let tail = b.slice_frames(drop_overlap_frames, b.frames());
    Ok(MotionClip {
        body: concatenate(Axis(0), &[a.body.view(), tail.body.view()])?,
        hand: concatenate(Axis(0), &[a.hand.view(), tail.hand.view()])?,
        fps: a.fps,
    })
}

impl From<ndarray::ShapeError> for Error {
    fn from(e: ndarray::ShapeError) -> Self {
        Error::ShapeMismatch(e.to_string())
    }
}

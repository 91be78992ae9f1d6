mod common;

use candle_core::DType;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recom::data::{gen_pair, SyntheticSpec};
use recom::inference::{
    decode_grid, generate_long, iri_generate, stitch_grids, GenerationContext, IriParams, CONTEXT_FRAMES, CONTEXT_TOKENS,
};
use recom::motion::{AudioFeatures, Part, SpeakerId, WINDOW_FRAMES, WINDOW_TOKENS};
use recom::quantizer::{VqConfig, VqNetwork};
use recom::ret::{RetConfig, RetNetwork};
use recom::train::tokenize_clip;

#[test]
fn iri_on_random_stubs() {
    common::stub::check_random_stubs(100).unwrap();
}

fn tiny_models() -> (RetNetwork, VqNetwork, VqNetwork) {
    let cfg = RetConfig { vocab: 16, d_model: 32, blocks: 1, heads: 2, d_embed: 16, audio_hidden: 16, ..Default::default() };
    let ret = RetNetwork::new(cfg, DType::F32, 1).unwrap();
    let vb = VqNetwork::new(VqConfig { part: Part::Body, vocab: 16, hidden: 16 }, DType::F32, 2).unwrap();
    let vh = VqNetwork::new(VqConfig { part: Part::Hand, vocab: 16, hidden: 16 }, DType::F32, 3).unwrap();
    (ret, vb, vh)
}

fn audio(frames: usize, seed: u64) -> AudioFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioFeatures::new(Array2::from_shape_fn((frames, 64), |_| rng.random_range(-1.0f32..1.0)))
}

#[test]
fn long_generation_window_arithmetic() {
    let (ret, vb, vh) = tiny_models();
    let id = SpeakerId::new(1, 4).unwrap();
    let p = IriParams { max_iters: 3, ..Default::default() };
    for (frames, segments) in [(600usize, 8usize), (88, 1), (168, 2), (50, 1), (89, 2)] {
        let out = generate_long(&ret, &vb, &vh, &audio(frames, frames as u64), id, &p).unwrap();
        assert_eq!(out.clip.frames(), frames);
        assert_eq!(out.segments.len(), segments);
        let step = WINDOW_FRAMES - CONTEXT_FRAMES;
        assert_eq!(out.segment_starts, (0..segments).map(|i| i * step).collect::<Vec<_>>());
        let stitched = stitch_grids(&out.segments).unwrap();
        assert_eq!(stitched.tokens(), WINDOW_TOKENS + (segments - 1) * (WINDOW_TOKENS - CONTEXT_TOKENS));
        assert_eq!(out.clip, decode_grid(&vb, &vh, &stitched).unwrap().slice_frames(0, frames));
        // Each later window starts from the previous window's last two tokens.
        for w in out.segments.windows(2) {
            for k in 0..2 {
                for part in Part::ALL {
                    assert_eq!(w[1].get(k, part), w[0].get(WINDOW_TOKENS - 2 + k, part));
                }
            }
        }
    }
}

#[test]
fn guidance_identity_and_full_anchoring() {
    let (ret, vb, vh) = tiny_models();
    let a = audio(WINDOW_FRAMES, 9);
    let id = SpeakerId::new(0, 4).unwrap();
    let skip = IriParams { guidance_scale: 1.0, ..Default::default() };
    let forced = IriParams { force_unconditional: true, ..skip };
    let ctx = GenerationContext::new();
    assert_eq!(iri_generate(&ret, &a, id, &skip, &ctx).unwrap().grid, iri_generate(&ret, &a, id, &forced, &ctx).unwrap().grid);

    let clip = gen_pair(&SyntheticSpec::default(), 3).unwrap().motion;
    let grid = tokenize_clip(&vb, &vh, &clip).unwrap();
    let ctx = GenerationContext::from_grid(&grid);
    let out = iri_generate(&ret, &a, id, &IriParams::default(), &ctx).unwrap();
    assert_eq!(out.grid, grid);
    assert_eq!(out.iterations, 0);
    assert_eq!(decode_grid(&vb, &vh, &out.grid).unwrap(), decode_grid(&vb, &vh, &grid).unwrap());
}

//! Random-logit predictors for exercising the decoding loop without a network.

use std::cell::RefCell;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recom::inference::{iri_with_predictor, GenerationContext, IriParams, Predictor};
use recom::motion::{IndexGrid, Part};

/// Random logits whose sharpness varies per call.
pub struct RandomStub {
    pub tokens: usize,
    pub vocab: usize,
    pub rng: RefCell<ChaCha8Rng>,
    pub seen: RefCell<Vec<IndexGrid>>,
}

impl Predictor for RandomStub {
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn tokens(&self) -> usize {
        self.tokens
    }
    fn predict(&self, grid: &IndexGrid, conditioned: bool) -> recom::Result<Array3<f32>> {
        if conditioned {
            self.seen.borrow_mut().push(grid.clone());
        }
        let mut rng = self.rng.borrow_mut();
        let sharp = rng.random_range(0.1f32..12.0);
        Ok(Array3::from_shape_fn((self.tokens, 2, self.vocab), |_| rng.random_range(-1.0f32..1.0) * sharp))
    }
}

/// Runs `cases` random decoding problems and reports the first violated property.
pub fn check_random_stubs(cases: u64) -> Result<(), String> {
    let mut meta = ChaCha8Rng::seed_from_u64(17);
    for case in 0..cases {
        let tokens = meta.random_range(1..12);
        let vocab = meta.random_range(2..20);
        let max_iters = meta.random_range(1..15);
        let tau0 = meta.random_range(0.05..1.0);
        let p = IriParams {
            max_iters,
            tau0,
            tau_min: meta.random_range(0.0..tau0),
            guidance_scale: meta.random_range(0.0..4.0),
            force_unconditional: false,
        };
        let mut ctx = GenerationContext::new();
        for _ in 0..meta.random_range(0..tokens) {
            let part = if meta.random_bool(0.5) { Part::Body } else { Part::Hand };
            let pos = meta.random_range(0..tokens);
            if !ctx.anchors.iter().any(|a| a.pos == pos && a.part == part) {
                ctx = ctx.with(pos, part, meta.random_range(0..vocab as u32));
            }
        }
        let stub = RandomStub { tokens, vocab, rng: RefCell::new(ChaCha8Rng::seed_from_u64(case)), seen: RefCell::new(Vec::new()) };
        let out = iri_with_predictor(&stub, &p, &ctx).map_err(|e| format!("case {case}: {e}"))?;

        if out.iterations > max_iters {
            return Err(format!("case {case}: {} iterations over limit {max_iters}", out.iterations));
        }
        if out.grid.count_masked() != 0 {
            return Err(format!("case {case}: masked entries remain"));
        }
        if ctx.anchors.iter().any(|a| out.grid.get(a.pos, a.part) != a.index) {
            return Err(format!("case {case}: anchor moved"));
        }
        // Revealed entries only accumulate and never change afterwards.
        let seen = stub.seen.borrow();
        let mut states: Vec<&IndexGrid> = seen.iter().collect();
        states.push(&out.grid);
        for w in states.windows(2) {
            if w[1].count_masked() > w[0].count_masked() {
                return Err(format!("case {case}: masked count grew"));
            }
            if w[0].positions().any(|(pos, part)| !w[0].is_masked(pos, part) && w[1].get(pos, part) != w[0].get(pos, part)) {
                return Err(format!("case {case}: revealed entry changed"));
            }
        }
        let revealed: usize = out.reveals.iter().map(Vec::len).sum();
        if revealed + ctx.anchors.len() != 2 * tokens {
            return Err(format!("case {case}: {revealed} reveals for {} free entries", 2 * tokens - ctx.anchors.len()));
        }
    }
    Ok(())
}

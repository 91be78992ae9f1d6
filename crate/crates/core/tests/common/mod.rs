//! Finite-difference gradient checks shared by the integration tests.
#![allow(dead_code)]

pub mod stub;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recom::face::{face_loss_tensors, FaceConfig, FaceNetwork};
use recom::motion::Part;
use recom::nn::ParamStore;
use recom::quantizer::{VqConfig, VqNetwork};
use recom::ret::{cross_entropy, Mode, RetConfig, RetNetwork};
use recom::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Largest relative error between backprop and central differences over up to
/// `per_var` sampled entries of every parameter not starting with a `skip` prefix.
pub fn max_grad_error(store: &ParamStore, loss: &dyn Fn() -> Result<Tensor>, skip: &[&str], per_var: usize) -> Result<f64> {
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for (name, var) in store.named_vars() {
        if skip.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?)?;
                scalar(&loss()?)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu)?)?;
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub struct GradientReport {
    pub vq: f64,
    /// Codebook gradient of the full stack vs the 0.25-weighted term alone.
    pub vq_codebook_split: f64,
    /// STE forward gradients vs the frozen-capture surrogate.
    pub vq_ste_consistency: f64,
    pub ret: f64,
    pub face: f64,
}

pub fn vq_check() -> Result<(f64, f64, f64)> {
    let net = VqNetwork::new(VqConfig { part: Part::Body, vocab: 4, hidden: 8 }, DType::F64, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[2, Part::Body.dim(), 8], &mut rng)?;
    let frozen = net.freeze(&x)?;
    let loss = || -> Result<Tensor> { Ok(net.forward_train(&x, Some(&frozen))?.loss.total) };
    let err = max_grad_error(net.store(), &loss, &["norm."], 6)?;

    let cb = net.codebook_tensor();
    let full = loss()?.backward()?;
    let out = net.forward_train(&x, Some(&frozen))?;
    let quarter = ((&out.codes - &frozen.latents)?.sqr()?.mean_all()? * 0.25)?.backward()?;
    let (a, b) = (full.get(cb).expect("codebook gradient"), quarter.get(cb).expect("codebook gradient"));
    let split = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;

    let live = net.forward_train(&x, None)?.loss.total.backward()?;
    let mut ste = 0.0f64;
    for (_, var) in net.store().named_vars() {
        if let (Some(g1), Some(g2)) = (full.get(var.as_tensor()), live.get(var.as_tensor())) {
            ste = ste.max((g1 - g2)?.abs()?.max_all()?.to_scalar::<f64>()?);
        }
    }
    Ok((err, split, ste))
}

pub fn ret_check() -> Result<f64> {
    let cfg = RetConfig {
        vocab: 8,
        tokens: 4,
        d_audio: 6,
        n_ids: 2,
        d_embed: 8,
        d_model: 16,
        heads: 2,
        mlp_ratio: 2,
        blocks: 2,
        audio_hidden: 8,
    };
    let net = RetNetwork::new(cfg, DType::F64, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let masked: Vec<u32> = (0..2 * 4 * 2).map(|i| if i % 3 == 0 { 8 } else { rng.random_range(0..8) }).collect();
    let targets: Vec<u32> = (0..2 * 4 * 2).map(|_| rng.random_range(0..8)).collect();
    let masked = Tensor::from_vec(masked, (2, 4, 2), &Device::Cpu)?;
    let targets = Tensor::from_vec(targets, (2, 4, 2), &Device::Cpu)?;
    let audio = randn(&[2, 16, 6], &mut rng)?;
    let ids = Tensor::new(&[0u32, 1], &Device::Cpu)?;
    let loss = || -> Result<Tensor> {
        let feat = net.encode_audio_tensor(&audio)?;
        let logits = net.forward_tensor(&masked, Some(&feat), &ids, Mode::Inference)?;
        cross_entropy(&logits, &targets, None)
    };
    max_grad_error(net.store(), &loss, &[], 4)
}

pub fn face_check() -> Result<f64> {
    let net = FaceNetwork::new(FaceConfig { d_audio: 6, hidden: 8 }, DType::F64, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let audio = randn(&[2, 6, 8], &mut rng)?;
    let gt = randn(&[2, 103, 8], &mut rng)?;
    let loss = || -> Result<Tensor> { Ok(face_loss_tensors(&gt, &net.forward_tensor(&audio)?)?.0) };
    max_grad_error(net.store(), &loss, &[], 6)
}

pub fn gradient_report() -> Result<GradientReport> {
    let (vq, vq_codebook_split, vq_ste_consistency) = vq_check()?;
    Ok(GradientReport { vq, vq_codebook_split, vq_ste_consistency, ret: ret_check()?, face: face_check()? })
}

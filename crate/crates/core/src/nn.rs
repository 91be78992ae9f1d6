//! Small layer toolkit over `candle_core` with seeded parameter initialisation.
//!
//! Every parameter lives in a [`ParamStore`] keyed by a dotted name; layers hold
//! tensor handles that share storage with the store's `Var`s, so optimizer updates
//! are visible to the layers without rebuilding them. All randomness (initialisation
//! and dropout masks) comes from caller-owned ChaCha streams, which keeps training
//! bit-reproducible for a fixed seed.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named parameter entry as persisted in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        use rand::SeedableRng;
        Self { dtype, device: Device::Cpu, vars: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Vars whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    values: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `entries`; names and shapes must match exactly.
    pub fn load(&self, entries: &[NamedTensor]) -> Result<()> {
        if entries.len() != self.vars.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {} parameters, network has {}",
                entries.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let e = entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks parameter '{name}'")))?;
            if e.shape != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter '{name}': checkpoint shape {:?}, network shape {:?}",
                    e.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(&e.values, e.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Current values of all parameters, detached copies in declaration order.
    pub fn values(&self) -> Result<Vec<Tensor>> {
        Ok(self.vars.iter().map(|(_, v)| v.as_tensor().detach().copy()).collect::<candle_core::Result<_>>()?)
    }

    pub fn set_values(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::ShapeMismatch("parameter count differs".into()));
        }
        for ((_, var), v) in self.vars.iter().zip(values) {
            var.set(v)?;
        }
        Ok(())
    }
}

/// Dense layer over the last axis; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.var(&format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in))?,
            bias: store.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Temporal convolution over `[B, C, L]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    replicate: bool,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.var(&format!("{name}.weight"), &[c_out, c_in, kernel], Init::FanIn(c_in * kernel))?,
            bias: store.var(&format!("{name}.bias"), &[c_out], Init::Zeros)?,
            stride,
            padding,
            replicate: false,
        })
    }

    /// Pads by repeating the edge frames instead of with zeros.
    pub fn replicate_edges(mut self) -> Self {
        self.replicate = true;
        self
    }

    /// Unfolds the input into `[B·L_out, C_in·K]` patches and multiplies by the
    /// flattened kernel. candle's native conv1d returns wrong kernel gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, len) = x.dims3()?;
        let (c_out, w_in, k) = self.weight.dims3()?;
        if c_in != w_in {
            return Err(Error::ShapeMismatch(format!("conv expects {w_in} input channels, got {c_in}")));
        }
        let padded_len = len + 2 * self.padding;
        if padded_len < k {
            return Err(Error::InsufficientFrames { need: k, got: padded_len });
        }
        let s = self.stride;
        let l_out = (padded_len - k) / s + 1;
        let xp = if self.replicate {
            x.pad_with_same(2, self.padding, self.padding)?
        } else {
            x.pad_with_zeros(2, self.padding, self.padding)?
        };
        let taps = (0..k)
            .map(|j| {
                let t = xp.narrow(2, j, s * (l_out - 1) + 1)?;
                if s == 1 {
                    return Ok(t);
                }
                t.pad_with_zeros(2, 0, s - 1)?.reshape((b, c_in, l_out, s))?.narrow(3, 0, 1)?.squeeze(3)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let patches = Tensor::stack(&taps, 3)?.permute((0, 2, 1, 3))?.reshape((b * l_out, c_in * k))?;
        let kernel = self.weight.reshape((c_out, c_in * k))?.t()?;
        let y = patches.matmul(&kernel)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, l_out, c_out))?.transpose(1, 2)?.contiguous()?)
    }
}

/// Stride-2 transposed temporal convolution (kernel 4, padding 1), doubling the length.
///
/// Realised as zero insertion followed by an ordinary convolution, which is the
/// same linear map with a re-indexed kernel and keeps the op differentiable.
#[derive(Debug, Clone)]
pub struct Upsample2 {
    conv: Conv1d,
    replicate: bool,
}

impl Upsample2 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { conv: Conv1d::new(store, name, c_in, c_out, 4, 1, 2)?, replicate: false })
    }

    /// Treats the input as extended by one repeated frame on each side.
    pub fn replicate_edges(mut self) -> Self {
        self.replicate = true;
        self.conv.padding = 0;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.replicate { x.pad_with_same(2, 1, 1)? } else { x.clone() };
        let (b, c, l) = x.dims3()?;
        let dilated = Tensor::stack(&[&x, &x.zeros_like()?], 3)?.reshape((b, c, 2 * l))?.narrow(2, 0, 2 * l - 1)?;
        self.conv.forward(&dilated)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.var(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: store.var(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: store.var(&format!("{name}.table"), &[rows, dim], Init::Normal(0.02))? })
    }

    pub fn rows(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    /// Looks up `ids` (u32, any shape) and appends the embedding axis.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dim(1)?);
        Ok(out.reshape(dims)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Inverted dropout with a mask drawn from `rng`; identity at rate 0.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    if rate >= 1.0 {
        return Ok(x.zeros_like()?);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.elem_count()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep as f32 }).collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Multi-head self-attention over `[B, L, d]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, l, 3, self.heads, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Adam without weight decay, as used by every training stage.
pub struct Adam {
    inner: candle_nn::AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        use candle_nn::Optimizer;
        let params = candle_nn::ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() };
        Ok(Self { inner: candle_nn::AdamW::new(vars, params)? })
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        use candle_nn::Optimizer;
        self.inner.backward_step(loss)?;
        Ok(())
    }
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    /// Starts the shadow at the current parameter values.
    pub fn new(params: &[Tensor], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(Self { decay, shadow: params.iter().map(|p| p.detach().copy()).collect::<candle_core::Result<_>>()? })
    }

    /// `shadow ← d·shadow + (1−d)·params`, elementwise.
    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        *self = ema_update(self, params)?;
        Ok(())
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(state: &EmaState, params: &[Tensor]) -> Result<EmaState> {
    if params.len() != state.shadow.len() {
        return Err(Error::ShapeMismatch(format!(
            "ema tracks {} tensors, got {}",
            state.shadow.len(),
            params.len()
        )));
    }
    let d = state.decay;
    let shadow = state
        .shadow
        .iter()
        .zip(params)
        .map(|(s, p)| {
            if s.dims() != p.dims() {
                return Err(Error::ShapeMismatch(format!("ema shadow {:?} vs param {:?}", s.dims(), p.dims())));
            }
            let p = p.detach();
            if d == 0.0 {
                return Ok(p.copy()?);
            }
            if d == 1.0 {
                return Ok(s.clone());
            }
            Ok(((s * d)? + (p * (1.0 - d))?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmaState { decay: d, shadow })
}

pub fn to_tensor_2d(m: &ndarray::Array2<f32>, dtype: DType) -> Result<Tensor> {
    let (r, c) = m.dim();
    let data: Vec<f32> = m.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn from_tensor_2d(t: &Tensor) -> Result<ndarray::Array2<f32>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ndarray::Array2::from_shape_vec((r, c), v)?)
}

/// Stacks `[L×C]` matrices into a channels-first batch `[B, C, L]`.
pub fn batch_channels_first(mats: &[&ndarray::Array2<f32>], dtype: DType) -> Result<Tensor> {
    let ts = mats.iter().map(|m| to_tensor_2d(m, dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?.transpose(1, 2)?.contiguous()?)
}

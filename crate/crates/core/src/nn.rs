//! Small neural-network toolkit over candle tensors: a deterministic
//! parameter store, the layers the models share, and an Adam wrapper.
//!
//! Parameters are initialized from a seeded ChaCha stream rather than
//! candle's global RNG so that training is reproducible bit-for-bit.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{TensorBlob, TensorBundle};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

/// Named trainable tensors in creation order.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = name.into();
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(handle)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn zero_all(&self) -> Result<()> {
        for (_, v) in &self.vars {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    /// Stores every parameter as float32 under `prefix.name`.
    pub fn store(&self, bundle: &mut TensorBundle, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F32)?;
            let shape = t.dims().to_vec();
            let data = t.flatten_all()?.to_vec1::<f32>()?;
            bundle.insert(format!("{prefix}.{name}"), TensorBlob::from_f32(shape, data)?)?;
        }
        Ok(())
    }

    pub fn load(&self, bundle: &TensorBundle, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}.{name}");
            let blob = bundle.require(&key)?;
            if blob.shape() != var.dims() {
                return Err(Error::shape(
                    key,
                    format!("checkpoint shape {:?}, model expects {:?}", blob.shape(), var.dims()),
                ));
            }
            let data = blob
                .as_f32()
                .ok_or_else(|| Error::shape(&key, "expected f32 parameters"))?;
            let t = Tensor::from_slice(data, blob.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

fn kaiming_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// He-uniform bound for layers fed by a rectifier-like activation.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Affine map over the last dimension; weight stored `(in, out)`.
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                &[d_in, d_out],
                Init::Uniform(kaiming_bound(d_in)),
            )?,
            bias: ps.add(format!("{name}.bias"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// 1-D convolution over `(batch, channels, frames)`.
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                &[c_out, c_in, kernel],
                Init::Uniform(he_bound(c_in * kernel)),
            )?,
            bias: ps.add(format!("{name}.bias"), &[c_out], Init::Zeros)?,
            padding,
            stride,
            dilation,
        })
    }

    /// Length-preserving odd-kernel convolution.
    pub fn same(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::new(ps, name, c_in, c_out, kernel, 1, dilation * (kernel / 2), dilation)
    }

    /// Unfolds the kernel taps and contracts them with one matmul. candle's
    /// native conv1d backward returns wrong gradients for batches larger
    /// than one, so it is avoided.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, l) = x.dims3()?;
        let (c_out, _, k) = self.weight.dims3()?;
        let span = self.dilation * (k - 1) + 1;
        let padded = l + 2 * self.padding;
        if padded < span {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "{l} frames too short for kernel span {span} with padding {}",
                    self.padding
                ),
            ));
        }
        let l_out = (padded - span) / self.stride + 1;
        // Right-pad so every tap can take `l_out * stride` frames before decimation.
        let need = (k - 1) * self.dilation + l_out * self.stride;
        let x = x.pad_with_zeros(2, self.padding, need - l - self.padding)?;
        let taps = (0..k)
            .map(|j| {
                let t = x.narrow(2, j * self.dilation, l_out * self.stride)?;
                if self.stride == 1 {
                    Ok(t)
                } else {
                    t.reshape((b, c_in, l_out, self.stride))?.narrow(3, 0, 1)?.squeeze(3)
                }
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let cols = Tensor::stack(&taps, 2)?.reshape((b, c_in * k, l_out))?;
        let w = self.weight.reshape((c_out, c_in * k))?;
        let y = w.broadcast_matmul(&cols)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Transposed convolution with kernel == stride == `factor`: every input
/// frame expands into `factor` output frames through its own linear map.
/// Expressed as a matmul so it stays differentiable.
pub struct UpsampleConv {
    weight: Tensor,
    bias: Tensor,
    factor: usize,
    c_out: usize,
}

impl UpsampleConv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                &[c_in, factor * c_out],
                Init::Uniform(he_bound(c_in)),
            )?,
            bias: ps.add(format!("{name}.bias"), &[c_out], Init::Zeros)?,
            factor,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _c, l) = x.dims3()?;
        let y = x.transpose(1, 2)?.contiguous()?.broadcast_matmul(&self.weight)?;
        let y = y.reshape((b, l * self.factor, self.c_out))?.broadcast_add(&self.bias)?;
        Ok(y.transpose(1, 2)?.contiguous()?)
    }
}

/// `x + conv(silu(conv(silu(x))))`.
pub struct ResBlock1d {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ResBlock1d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::same(ps, &format!("{name}.conv1"), channels, channels, 3, dilation)?,
            conv2: Conv1d::same(ps, &format!("{name}.conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.silu()?)?;
        let h = self.conv2.forward(&h.silu()?)?;
        Ok((x + h)?)
    }
}

pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, n: usize, d: usize) -> Result<Self> {
        Ok(Self {
            table: ps.add(format!("{name}.weight"), &[n, d], Init::Uniform(0.1))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Looks up rows for an index tensor of any shape.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        let mut out_shape = dims;
        out_shape.push(self.table.dim(1)?);
        Ok(rows.reshape(out_shape)?)
    }
}

/// Layer normalization over the last dimension, written from primitive ops
/// so it has a backward pass.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: ps.add(format!("{name}.beta"), &[d], Init::Zeros)?,
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Plain Adam (decoupled weight decay fixed at zero).
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
        })
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        self.inner.backward_step(loss)?;
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.inner.learning_rate()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }
}

/// Cosine decay from `base` at step 0 to `base * floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    let p = if total == 0 {
        1.0
    } else {
        (step as f64 / total as f64).min(1.0)
    };
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Stacks `(d, T)` matrices of equal shape into a `(B, d, T)` tensor.
pub fn batch_tensor(mats: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (d, t) = mats
        .first()
        .map(|m| m.dim())
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut data = Vec::with_capacity(mats.len() * d * t);
    for m in mats {
        if m.dim() != (d, t) {
            return Err(Error::shape("batch", format!("{:?} vs {:?}", m.dim(), (d, t))));
        }
        data.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(data, (mats.len(), d, t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, d, T)` tensor into `B` float32 matrices.
pub fn unbatch(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, d, l) = t.dims3()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat
        .chunks_exact(d * l)
        .take(b)
        .map(|c| Array2::from_shape_vec((d, l), c.to_vec()).expect("chunk sized d*l"))
        .collect())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mk = |seed| {
            let mut ps = ParamStore::new(seed, DType::F32);
            ps.add("w", &[3, 4], Init::Uniform(0.5))
                .unwrap()
                .to_vec2::<f32>()
                .unwrap()
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1), mk(2));
    }

    #[test]
    fn upsample_matches_explicit_transposed_conv() {
        let mut ps = ParamStore::new(3, DType::F64);
        let up = UpsampleConv::new(&mut ps, "up", 3, 2, 2).unwrap();
        let x = Tensor::from_vec(
            (0..12).map(|v| v as f64 * 0.1 - 0.4).collect::<Vec<_>>(),
            (1, 3, 4),
            &Device::Cpu,
        )
        .unwrap();
        let y = up.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        let w = up.weight.to_vec2::<f64>().unwrap();
        let xv = x.to_vec3::<f64>().unwrap();
        for i in 0..4 {
            for k in 0..2 {
                for o in 0..2 {
                    let expect: f64 = (0..3).map(|c| xv[0][c][i] * w[c][k * 2 + o]).sum();
                    assert!((y[0][o][2 * i + k] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn conv1d_matches_direct_sum() {
        let mut ps = ParamStore::new(7, DType::F64);
        for (stride, pad, dil) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)] {
            let name = format!("c{stride}{pad}{dil}");
            let conv = Conv1d::new(&mut ps, &name, 3, 2, 4, stride, pad, dil).unwrap();
            let x = Tensor::from_vec(
                (0..2 * 3 * 11).map(|v| (v as f64 * 0.3).cos()).collect::<Vec<_>>(),
                (2, 3, 11),
                &Device::Cpu,
            )
            .unwrap();
            let y = conv.forward(&x).unwrap().to_vec3::<f64>().unwrap();
            let w = conv.weight.to_vec3::<f64>().unwrap();
            let xv = x.to_vec3::<f64>().unwrap();
            let l_out = (11 + 2 * pad - dil * 3 - 1) / stride + 1;
            assert_eq!(y[0][0].len(), l_out);
            for b in 0..2 {
                for o in 0..2 {
                    for t in 0..l_out {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for j in 0..4 {
                                let pos = (t * stride + j * dil) as isize - pad as isize;
                                if (0..11).contains(&pos) {
                                    acc += w[o][c][j] * xv[b][c][pos as usize];
                                }
                            }
                        }
                        assert!((y[b][o][t] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_batched_gradient_matches_finite_difference() {
        let mut ps = ParamStore::new(8, DType::F64);
        let conv = Conv1d::new(&mut ps, "c", 2, 3, 3, 2, 1, 1).unwrap();
        let x = Tensor::from_vec(
            (0..3 * 2 * 9).map(|v| (v as f64 * 0.7).sin()).collect::<Vec<_>>(),
            (3, 2, 9),
            &Device::Cpu,
        )
        .unwrap();
        let loss = |c: &Conv1d| c.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(&conv).backward().unwrap();
        let var = ps.get("c.weight").unwrap();
        let g = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap())
                    .unwrap();
                scalar(&loss(&conv)).unwrap()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            eval(0.0);
            assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut ps, "ln", 6).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 4.0, 8.0, 16.0, 32.0], (1, 6), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 6.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn store_and_load_parameters() {
        let mut a = ParamStore::new(5, DType::F32);
        a.add("x", &[2, 2], Init::Uniform(1.0)).unwrap();
        let mut bundle = TensorBundle::new();
        a.store(&mut bundle, "m").unwrap();
        let mut b = ParamStore::new(6, DType::F32);
        let handle = b.add("x", &[2, 2], Init::Zeros).unwrap();
        b.load(&bundle, "m").unwrap();
        assert_eq!(
            handle.to_vec2::<f32>().unwrap(),
            a.get("x").unwrap().as_tensor().to_vec2::<f32>().unwrap()
        );
    }
}

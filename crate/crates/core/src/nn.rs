//! Minimal parameter store and layers on top of candle tensors.
//!
//! Parameters live in a name-ordered [`ParamStore`]. Networks are built by
//! asking the store for tensors by name, so the same construction code serves
//! fresh (seeded) initialisation, loading from a checkpoint, and frozen
//! inference views that share storage with the trainable variables.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in), He initialisation for ReLU-like units.
    Kaiming { fan_in: usize },
    /// Uniform in ±scale.
    Uniform(f64),
    Zeros,
}

pub struct ParamStore {
    dtype: DType,
    entries: BTreeMap<String, Var>,
    init_rng: Option<ChaCha8Rng>,
    frozen: bool,
}

impl ParamStore {
    /// A store that initialises missing parameters from a seeded stream.
    pub fn seeded(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            entries: BTreeMap::new(),
            init_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            frozen: false,
        }
    }

    /// A store holding exactly the given tensors; lookups of unknown names fail.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, t) in tensors {
            entries.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self {
            dtype,
            entries,
            init_rng: None,
            frozen: false,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A view over the same storage whose tensors do not track gradients.
    pub fn frozen_view(&self) -> Self {
        Self {
            dtype: self.dtype,
            entries: self.entries.clone(),
            init_rng: None,
            frozen: true,
        }
    }

    /// Deep copy with fresh variables, optionally converted to another dtype.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        Self::from_tensors(self.snapshot()?, dtype)
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.entries.get(name) {
            if var.dims() != shape {
                return Err(Error::shape(
                    format!("{name}: {shape:?}"),
                    format!("{name}: {:?}", var.dims()),
                ));
            }
            return Ok(self.view(var));
        }
        let rng = self
            .init_rng
            .as_mut()
            .ok_or_else(|| Error::precondition(format!("missing parameter `{name}`")))?;
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Uniform(scale) => (0..count).map(|_| rng.random_range(-scale..scale)).collect(),
            Init::Zeros => vec![0.0; count],
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let view = self.view(&var);
        self.entries.insert(name.to_string(), var);
        Ok(view)
    }

    fn view(&self, var: &Var) -> Tensor {
        if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_detached_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from a snapshot with identical names and shapes.
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let src = snapshot
                .get(name)
                .ok_or_else(|| Error::precondition(format!("snapshot lacks `{name}`")))?;
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Self::with_init(store, name, [c_in, c_out, kernel, stride, padding], Init::Kaiming { fan_in })
    }

    /// `dims` is `[c_in, c_out, kernel, stride, padding]`.
    pub fn with_init(store: &mut ParamStore, name: &str, dims: [usize; 5], init: Init) -> Result<Self> {
        let [c_in, c_out, kernel, stride, padding] = dims;
        let weight = store.get(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], init)?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Transposed convolution that doubles the spatial size (kernel 3, stride 2).
pub struct Upsample2d {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[c_in, c_out, 3, 3],
            Init::Kaiming { fan_in: c_in * 9 / 4 },
        )?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 1, 1, 2, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Kaiming { fan_in: d_in },
        )?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[d_out, d_in], init)?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Row-wise L2 normalisation of an `(N, d)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn adam(vars: Vec<Var>, lr: f64, betas: (f64, f64)) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    let params = candle_nn::ParamsAdamW {
        lr,
        beta1: betas.0,
        beta2: betas.1,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

/// First element of a scalar or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_stores_are_reproducible() {
        let build = || {
            let mut s = ParamStore::seeded(11, DType::F32);
            Conv2d::new(&mut s, "c", 3, 4, 3, 1, 1).unwrap();
            Linear::new(&mut s, "l", 8, 2).unwrap();
            s.content_hash().unwrap()
        };
        assert_eq!(build(), build());
        let mut other = ParamStore::seeded(12, DType::F32);
        Conv2d::new(&mut other, "c", 3, 4, 3, 1, 1).unwrap();
        Linear::new(&mut other, "l", 8, 2).unwrap();
        assert_ne!(build(), other.content_hash().unwrap());
    }

    #[test]
    fn frozen_view_shares_storage() {
        let mut s = ParamStore::seeded(1, DType::F32);
        let lin = Linear::new(&mut s, "l", 2, 1).unwrap();
        let mut frozen = s.frozen_view();
        let frozen_w = frozen.get("l.weight", &[1, 2], Init::Zeros).unwrap();
        let var = s.vars().into_iter().find(|v| v.dims() == [1, 2]).unwrap();
        var.set(&Tensor::new(&[[3f32, 4.]], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(frozen_w.to_vec2::<f32>().unwrap(), vec![vec![3., 4.]]);
        assert_eq!(lin.weight().to_vec2::<f32>().unwrap(), vec![vec![3., 4.]]);
        assert!(frozen.get("missing", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-100f64, 0.0, 100.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-40);
        assert!((y[1] - 2f64.ln()).abs() < 1e-12);
        assert!((y[2] - 100.0).abs() < 1e-12);
    }
}

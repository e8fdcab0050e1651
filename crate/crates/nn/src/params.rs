//! Seeded parameter storage.
//!
//! Candle's CPU backend draws initial weights from the thread RNG. The store
//! here samples every initializer from a ChaCha stream instead, so two
//! models built with the same seed start bit-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    vars: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            vars: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, self.device.clone())
    }

    pub fn var_map(&self) -> &VarMap {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.all_vars()
    }

    /// Variables in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.vars.data().lock().expect("var map lock");
        let sorted: BTreeMap<_, _> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sorted.into_iter().collect()
    }

    /// Trainable variables, excluding batch-norm running statistics.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Copy of every tensor, used to restore a selected epoch.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = snapshot
                .get(&name)
                .ok_or_else(|| Error::Config(format!("snapshot lacks {name}")))?;
            var.set(t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 values in name order.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vars.save(path)?;
        Ok(())
    }

    /// Load every variable of this store from a safetensors file.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.named_vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("{} lacks tensor {name}", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// Load the tensors under `prefix` whose names and shapes match,
    /// e.g. pretrained encoder weights. Returns how many were loaded.
    pub fn load_matching(&self, path: &Path, file_prefix: &str, store_prefix: &str) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let mut loaded = 0;
        for (name, var) in self.named_vars() {
            let Some(rest) = name.strip_prefix(store_prefix) else {
                continue;
            };
            if let Some(t) = tensors.get(&format!("{file_prefix}{rest}")) {
                if t.dims() == var.dims() {
                    var.set(&t.to_dtype(DType::F32)?)?;
                    loaded += 1;
                }
            }
        }
        Ok(loaded)
    }

    fn sample(&self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng lock");
        let values: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up) as f32).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| (mean + stdev * standard_normal(&mut *rng)) as f32)
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n)
                            .map(|_| rng.random_range(-bound..bound) as f32)
                            .collect()
                    }
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| (std * standard_normal(&mut *rng)) as f32)
                        .collect(),
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?)
    }
}

/// Box-Muller draw.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(var) = self.vars.data().lock().expect("var map lock").get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {s:?}", var.shape());
            }
            return var.as_tensor().to_dtype(dtype)?.to_device(dev);
        }
        let tensor = self
            .sample(&s, h)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().to_dtype(dtype)?.to_device(dev)?;
        self.vars
            .data()
            .lock()
            .expect("var map lock")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.data().lock().expect("var map lock").get(name) {
            Some(var) => var.as_tensor().to_dtype(dtype)?.to_device(dev),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.data().lock().expect("var map lock").contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64) -> ParamStore {
        let store = ParamStore::new(seed, &Device::Cpu);
        let vb = store.var_builder();
        candle_nn::linear(4, 3, vb.pp("fc")).unwrap();
        candle_nn::conv2d(2, 5, 3, Default::default(), vb.pp("conv")).unwrap();
        store
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(build(3).digest().unwrap(), build(3).digest().unwrap());
        assert_ne!(build(3).digest().unwrap(), build(4).digest().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = build(1);
        a.save(&path).unwrap();
        let b = build(2);
        b.load(&path).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn snapshot_restore() {
        let a = build(1);
        let snap = a.snapshot().unwrap();
        let before = a.digest().unwrap();
        for v in a.all_vars() {
            v.set(&v.as_tensor().affine(2.0, 1.0).unwrap()).unwrap();
        }
        assert_ne!(a.digest().unwrap(), before);
        a.restore(&snap).unwrap();
        assert_eq!(a.digest().unwrap(), before);
    }
}

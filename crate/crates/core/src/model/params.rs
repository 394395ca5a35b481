//! Parameter storage with reproducible initialization.
//!
//! `candle_nn::VarMap` draws initial values from an unseeded generator;
//! [`ParamStore`] wraps one and fills new variables from a ChaCha stream
//! instead, so building the same model with the same seed yields the same
//! weights.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    vars: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn varmap(&self) -> &VarMap {
        &self.vars
    }

    /// Trainable variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.vars.data().lock().expect("param lock");
        let mut out: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot as `name -> (shape, f32 values)`.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.named_vars()
            .into_iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((name, (t.dims().to_vec(), values)))
            })
            .collect()
    }

    /// Overwrites existing variables. Every stored name must be known and
    /// every model variable must be present.
    pub fn import(&self, weights: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let vars = self.named_vars();
        if vars.len() != weights.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, checkpoint {}",
                vars.len(),
                weights.len()
            )));
        }
        for (name, var) in vars {
            let (shape, values) = weights
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {shape:?}, model {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(values.clone(), shape.as_slice(), var.device())?
                .to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let data = self.vars.data().lock().expect("param lock");
        let var = data
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let data = self.vars.data().lock().expect("param lock");
        data.get(name).map(|v| v.as_tensor().clone())
    }

    fn init_values(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng lock");
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => {
                let d = Normal::new(mean, stdev).expect("finite stdev");
                (0..n).map(|_| d.sample(&mut *rng)).collect()
            }
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn | FanInOut::FanOut => fan.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => {
                        let d = Normal::new(0.0, std).expect("finite stdev");
                        (0..n).map(|_| d.sample(&mut *rng)).collect()
                    }
                    NormalOrUniform::Uniform => {
                        let b = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-b..b)).collect()
                    }
                }
            }
        }
    }
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
        if let Some(existing) = self.vars.data().lock().expect("param lock").get(name) {
            if existing.shape() != &s {
                candle_core::bail!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    existing.shape(),
                    s
                );
            }
            return Ok(existing.as_tensor().clone());
        }
        let values = self.init_values(&s, h);
        let t = Tensor::from_vec(values, s.clone(), dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars
            .data()
            .lock()
            .expect("param lock")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.vars.data().lock().expect("param lock").get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.data().lock().expect("param lock").contains_key(name)
    }
}

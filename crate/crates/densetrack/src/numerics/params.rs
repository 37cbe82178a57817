//! Named parameter registry and weight initialization.
//!
//! Every trainable tensor is registered under a dot-separated path
//! ("encoder.stem.conv.weight"). The name → tensor mapping is the
//! checkpoint unit and the optimizer's iteration order (insertion order,
//! which is deterministic because models build their layers in code order).

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::tensor::Tensor;

pub struct Param<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
}

#[derive(Default)]
pub struct ParamSet<E: Element> {
    entries: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<E>) -> Tensor<E> {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            tensor: tensor.clone(),
        });
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sum over parameters of a name-prefix subset.
    pub fn total_values_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.entries {
            p.tensor.zero_grad();
        }
    }

    /// Copy values from another set (same names/shapes required).
    pub fn load_values_from(&self, names: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (name, shape, values) in names {
            let t = self
                .get(name)
                .ok_or_else(|| Error::format(format!("checkpoint has unknown param {name}")))?;
            if t.shape() != &shape[..] {
                return Err(Error::format(format!(
                    "checkpoint shape mismatch for {name}: file {:?}, model {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.update_data(|d| {
                for (o, &v) in d.iter_mut().zip(values.iter()) {
                    *o = E::from_f64(v as f64);
                }
            });
        }
        // require full coverage
        if names.len() != self.entries.len() {
            return Err(Error::format(format!(
                "checkpoint has {} params, model expects {}",
                names.len(),
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// Build-time context threading the registry and the init RNG through
/// module constructors in a fixed order.
pub struct InitCtx<'a, E: Element> {
    pub params: &'a mut ParamSet<E>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, E: Element> InitCtx<'a, E> {
    pub fn new(params: &'a mut ParamSet<E>, rng: &'a mut ChaCha8Rng) -> Self {
        InitCtx { params, rng }
    }

    /// Truncated normal (resampled beyond 2σ), the conv/linear default.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z = sample_standard_normal(self.rng);
            if z.abs() <= 2.0 {
                data.push(E::from_f64(z * std));
            }
        }
        self.params.register(name, Tensor::param(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Tensor<E> {
        let n: usize = shape.iter().product();
        self.params
            .register(name, Tensor::param(shape, vec![E::from_f64(v); n]))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Tensor<E> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Tensor<E> {
        self.constant(name, shape, 1.0)
    }
}

/// Box–Muller; uses two uniform draws per sample, deterministic per RNG state.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registry_rejects_duplicates() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("a.w", Tensor::zeros(&[2]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            ps.register("a.w", Tensor::zeros(&[2]));
        }));
        assert!(result.is_err());
    }

    #[test]
    fn trunc_normal_is_bounded_and_deterministic() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut ps1 = ParamSet::<f64>::new();
        let t1 = InitCtx::new(&mut ps1, &mut rng1).trunc_normal("w", &[512], 0.02);
        assert!(t1.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut ps2 = ParamSet::<f64>::new();
        let t2 = InitCtx::new(&mut ps2, &mut rng2).trunc_normal("w", &[512], 0.02);
        assert_eq!(t1.to_vec(), t2.to_vec());
    }
}

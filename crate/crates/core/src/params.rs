//! Named parameters with a trainable flag, visitors over module trees, and
//! deterministic counter-based initialization.

use candle_core::{Device, Tensor, Var};

use crate::error::{Error, Result};

/// A single named parameter tensor.
///
/// Frozen parameters are handed to the graph detached, so no gradient is ever
/// accumulated for them and the optimizer never sees them.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    var: Var,
    trainable: bool,
}

impl Param {
    pub fn from_values(name: impl Into<String>, values: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let tensor = Tensor::from_vec(values, shape, &Device::Cpu)?;
        Ok(Param {
            name: name.into(),
            var: Var::from_tensor(&tensor)?,
            trainable: true,
        })
    }

    pub fn constant(name: impl Into<String>, value: f32, shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_values(name, vec![value; n], shape)
    }

    /// Uniform in `[-bound, bound]`, each element keyed by `(seed, name, index)`.
    pub fn uniform(name: impl Into<String>, seed: u64, bound: f32, shape: &[usize]) -> Result<Self> {
        let name = name.into();
        let key = seed ^ fnv1a(name.as_bytes()).rotate_left(17);
        let n: usize = shape.iter().product();
        let values = (0..n as u64)
            .map(|i| (2.0 * unit_uniform(key, i) - 1.0) as f32 * bound)
            .collect();
        Self::from_values(name, values, shape)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var.dims().to_vec()
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    /// Tensor to use in a forward pass.
    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn values(&self) -> Result<Vec<f32>> {
        Ok(self.var.as_tensor().flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn set_values(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.elem_count() {
            return Err(Error::shape("parameter values", self.elem_count(), values.len()));
        }
        let t = Tensor::from_slice(values, self.var.dims(), &Device::Cpu)?;
        self.var.set(&t)?;
        Ok(())
    }

    /// Fresh storage with the same values, so a copy can be trained independently.
    pub fn deep_clone(&self, name: impl Into<String>) -> Result<Self> {
        let mut p = Self::from_values(name, self.values()?, &self.shape())?;
        p.trainable = self.trainable;
        Ok(p)
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.elem_count());
        n
    }

    fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        self.visit(&mut |p| {
            if p.is_trainable() {
                vars.push(p.var().clone())
            }
        });
        vars
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.set_trainable(trainable));
    }

    fn named_parameters(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.clone()));
        out
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for m in self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

/// Clone of `module` whose parameters live in fresh storage, so training the
/// copy leaves the original untouched.
pub fn deep_copy<T: Parameterized + Clone>(module: &T) -> Result<T> {
    let mut copy = module.clone();
    let mut err = None;
    copy.visit_mut(&mut |p| match p.deep_clone(p.name().to_string()) {
        Ok(fresh) => *p = fresh,
        Err(e) => err = Some(e),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(copy),
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` as a pure function of `(key, counter)`.
pub(crate) fn unit_uniform(key: u64, counter: u64) -> f64 {
    let bits = splitmix64(splitmix64(key) ^ counter.wrapping_mul(0xd6e8_feb8_6659_fd93));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_init_is_keyed_by_seed_and_name() {
        let a = Param::uniform("w", 7, 0.5, &[4, 3]).unwrap().values().unwrap();
        let b = Param::uniform("w", 7, 0.5, &[4, 3]).unwrap().values().unwrap();
        let c = Param::uniform("w", 8, 0.5, &[4, 3]).unwrap().values().unwrap();
        let d = Param::uniform("v", 7, 0.5, &[4, 3]).unwrap().values().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert!(a.iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn frozen_tensor_is_detached() {
        let mut p = Param::constant("b", 1.0, &[3]).unwrap();
        assert!(p.tensor().is_variable());
        p.set_trainable(false);
        assert!(!p.tensor().is_variable());
    }

    #[test]
    fn set_values_checks_length() {
        let p = Param::constant("b", 0.0, &[3]).unwrap();
        assert!(p.set_values(&[1.0, 2.0]).is_err());
        p.set_values(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.values().unwrap(), vec![1.0, 2.0, 3.0]);
    }
}

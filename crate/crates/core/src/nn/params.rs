//! Named parameter storage with deterministic initialization.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

use super::{LayerOp, NetworkSpec};

/// Parameters and running statistics of a network, keyed by name.
///
/// The map is ordered, so iteration (and therefore initialization,
/// optimizer updates and checkpoint layout) is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    params: BTreeMap<String, Array<T>>,
    train_mode: bool,
}

impl<T: Scalar> ParameterSet<T> {
    /// Fan-in-scaled uniform initialization, fixed by the caller's RNG:
    /// weights and biases draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// batch-norm starts at identity (`gamma=1, beta=0, mean=0, var=1`).
    pub fn init<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut params = BTreeMap::new();
        // Draw in graph order so architecture tweaks never disturb the
        // values of untouched earlier layers.
        for node in &spec.nodes {
            match &node.op {
                LayerOp::Conv3 { weight, bias, .. } | LayerOp::Linear { weight, bias, .. } => {
                    let wshape = &shapes[weight];
                    let fan_in: usize = wshape[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut draw = |shape: &[usize]| {
                        let n: usize = shape.iter().product();
                        let vals: Vec<T> = (0..n)
                            .map(|_| T::of64(rng.gen_range(-bound..bound)))
                            .collect();
                        Array::from_vec(shape, vals).expect("shape and count agree")
                    };
                    params.insert(weight.clone(), draw(wshape));
                    params.insert(bias.clone(), draw(&shapes[bias]));
                }
                LayerOp::BatchNorm { prefix, .. } => {
                    let c = shapes[&format!("{prefix}.gamma")][0];
                    params.insert(format!("{prefix}.gamma"), Array::filled(&[c], T::one()));
                    params.insert(format!("{prefix}.beta"), Array::zeros(&[c]));
                    params.insert(format!("{prefix}.mean"), Array::zeros(&[c]));
                    params.insert(format!("{prefix}.var"), Array::filled(&[c], T::one()));
                }
                _ => {}
            }
        }
        Ok(ParameterSet { params, train_mode: true })
    }

    pub fn from_map(params: BTreeMap<String, Array<T>>, train_mode: bool) -> Self {
        ParameterSet { params, train_mode }
    }

    pub fn is_train(&self) -> bool {
        self.train_mode
    }

    pub fn set_train(&mut self, train: bool) {
        self.train_mode = train;
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn insert(&mut self, name: String, value: Array<T>) {
        self.params.insert(name, value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names that receive gradients: everything except running statistics.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| !Self::is_buffer(n))
            .cloned()
            .collect()
    }

    /// Running statistics are updated by forward passes, never by
    /// gradient steps.
    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".mean") || name.ends_with(".var")
    }

    pub fn zero_grads(&mut self) {
        for a in self.params.values_mut() {
            a.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for a in self.params.values_mut() {
            a.clear_grad();
        }
    }

    /// Copies values for every name in `other` that also exists here;
    /// shapes must agree. Returns how many arrays were copied.
    pub fn copy_values_from(&mut self, other: &ParameterSet<T>) -> Result<usize> {
        let mut n = 0;
        for (name, src) in other.iter() {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() != src.shape() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter `{name}` has shape {:?} here, {:?} in source",
                        dst.shape(),
                        src.shape()
                    )));
                }
                dst.values_mut().copy_from_slice(src.values());
                n += 1;
            }
        }
        Ok(n)
    }

    /// Flattens the listed parameters into one vector (name order given).
    pub fn flatten(&self, names: &[String]) -> Result<Vec<T>> {
        let mut v = Vec::new();
        for n in names {
            v.extend_from_slice(self.get(n)?.values());
        }
        Ok(v)
    }

    /// Flattens the gradients of the listed parameters; missing gradients
    /// contribute zeros.
    pub fn flatten_grads(&self, names: &[String]) -> Result<Vec<T>> {
        let mut v = Vec::new();
        for n in names {
            let a = self.get(n)?;
            match a.grad() {
                Some(g) => v.extend_from_slice(g),
                None => v.extend(std::iter::repeat(T::zero()).take(a.numel())),
            }
        }
        Ok(v)
    }

    /// Writes a flat vector back into the listed parameters.
    pub fn assign_flat(&mut self, names: &[String], flat: &[T]) -> Result<()> {
        let mut off = 0;
        for n in names {
            let a = self.get_mut(n)?;
            let k = a.numel();
            if off + k > flat.len() {
                return Err(Error::InvalidArgument("flat vector too short".into()));
            }
            a.values_mut().copy_from_slice(&flat[off..off + k]);
            off += k;
        }
        if off != flat.len() {
            return Err(Error::InvalidArgument("flat vector too long".into()));
        }
        Ok(())
    }

    /// True when any value in the set is non-finite.
    pub fn any_non_finite(&self) -> bool {
        self.params
            .values()
            .any(|a| a.values().iter().any(|v| !v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::SpecBuilder;

    fn spec() -> NetworkSpec {
        let (mut b, x) = SpecBuilder::new(vec![3]);
        let h = b.linear(x, "fc1", 4);
        let r = b.relu(h);
        let o = b.linear(r, "fc2", 2);
        b.finish(o)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let s = spec();
        let a = ParameterSet::<f32>::init(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ParameterSet::<f32>::init(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = ParameterSet::<f32>::init(&s, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let s = spec();
        let p = ParameterSet::<f64>::init(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bound = 1.0 / 3.0f64.sqrt();
        assert!(p.get("fc1.weight").unwrap().values().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn flatten_assign_round_trips() {
        let s = spec();
        let mut p = ParameterSet::<f64>::init(&s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let names = p.trainable_names();
        let flat = p.flatten(&names).unwrap();
        let mut doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        p.assign_flat(&names, &doubled).unwrap();
        doubled.truncate(doubled.len() - 1);
        assert!(p.assign_flat(&names, &doubled).is_err());
        assert_eq!(p.flatten(&names).unwrap()[0], flat[0] * 2.0);
    }
}

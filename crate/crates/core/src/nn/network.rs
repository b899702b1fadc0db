//! Stateful bundle of a spec, its parameters and the last recorded
//! forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

use super::forward::{forward_eval, forward_train, ForwardPass};
use super::params::ParameterSet;
use super::{backward, NetworkSpec};

pub struct Network<T> {
    pub spec: NetworkSpec,
    pub params: ParameterSet<T>,
    last: Option<ForwardPass<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let params = ParameterSet::init(&spec, rng)?;
        Ok(Network { spec, params, last: None })
    }

    pub fn from_parts(spec: NetworkSpec, params: ParameterSet<T>) -> Self {
        Network { spec, params, last: None }
    }

    pub fn set_train(&mut self, train: bool) {
        self.params.set_train(train);
    }

    /// Forward pass in the mode recorded on the parameter set, keeping the
    /// tape for a later [`Network::backward`].
    pub fn forward(&mut self, input: &Array<T>) -> Result<&ForwardPass<T>> {
        let pass = if self.params.is_train() {
            forward_train(&self.spec, &mut self.params, input)?
        } else {
            forward_eval(&self.spec, &self.params, input)?
        };
        self.last = Some(pass);
        Ok(self.last.as_ref().unwrap())
    }

    /// Eval-mode forward without touching the stored tape.
    pub fn evaluate(&self, input: &Array<T>) -> Result<ForwardPass<T>> {
        forward_eval(&self.spec, &self.params, input)
    }

    /// Backward through the last recorded forward pass; rejected when no
    /// forward pass has been recorded.
    pub fn backward(&mut self, out_grad: &Array<T>) -> Result<Array<T>> {
        let pass = self.last.as_ref().ok_or(Error::NoForwardPass)?;
        backward(&self.spec, &mut self.params, pass, out_grad)
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    pub fn last_pass(&self) -> Option<&ForwardPass<T>> {
        self.last.as_ref()
    }

    pub fn clear_pass(&mut self) {
        self.last = None;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::SpecBuilder;

    #[test]
    fn backward_without_forward_is_rejected() {
        let (mut b, x) = SpecBuilder::new(vec![2]);
        let o = b.linear(x, "fc", 1);
        let spec = b.finish(o);
        let mut net =
            Network::<f64>::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Array::from_vec(&[1, 1], vec![1.0]).unwrap();
        assert!(matches!(net.backward(&g), Err(Error::NoForwardPass)));
    }
}

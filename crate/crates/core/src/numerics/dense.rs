use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamBlock, ParamId};
use crate::error::{check_dim, Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

/// Fully connected layer `act(W x + b)` with `W: out × in`.
///
/// Recorded forward passes are pushed on an internal tape; `backward` pops
/// them in LIFO order, so a sequence of recorded calls is differentiated by
/// calling `backward` the same number of times in reverse.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    name: String,
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    tape: Vec<DenseCache>,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamBlock,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, rng);
        let bias = params.add_uniform(format!("{name}.bias"), out_dim, 1, in_dim, rng);
        Self::from_ids(name, weight, bias, in_dim, out_dim, activation)
    }

    /// Builds a layer from explicit weights.
    pub fn with_weights(
        params: &mut ParamBlock,
        name: &str,
        weight: Matrix,
        bias: &[f64],
        activation: Activation,
    ) -> Result<Self> {
        check_dim("DenseLayer bias", weight.rows(), bias.len())?;
        let (out_dim, in_dim) = weight.shape();
        let w = params.add(format!("{name}.weight"), weight);
        let b = params.add(format!("{name}.bias"), Matrix::column(bias));
        Ok(Self::from_ids(name, w, b, in_dim, out_dim, activation))
    }

    fn from_ids(
        name: &str,
        weight: ParamId,
        bias: ParamId,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
            tape: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    fn pre_activation(&self, params: &ParamBlock, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("DenseLayer input", self.in_dim, x.len())?;
        let mut pre = params.value(self.bias).as_slice().to_vec();
        params.value(self.weight).matvec_acc(x, &mut pre);
        Ok(pre)
    }

    pub fn forward(&self, params: &ParamBlock, x: &[f64]) -> Result<Vec<f64>> {
        let pre = self.pre_activation(params, x)?;
        Ok(pre.into_iter().map(|v| self.activation.apply(v)).collect())
    }

    pub fn forward_record(&mut self, params: &ParamBlock, x: &[f64]) -> Result<Vec<f64>> {
        let pre = self.pre_activation(params, x)?;
        let out = pre.iter().map(|&v| self.activation.apply(v)).collect();
        self.tape.push(DenseCache {
            input: x.to_vec(),
            pre,
        });
        Ok(out)
    }

    /// Pops the latest recorded forward pass, accumulates parameter gradients
    /// into `params` and returns the gradient with respect to the input.
    pub fn backward(&mut self, params: &mut ParamBlock, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim("DenseLayer upstream", self.out_dim, upstream.len())?;
        let cache = self.tape.pop().ok_or_else(|| Error::BackwardWithoutForward {
            layer: self.name.clone(),
        })?;
        let dpre: Vec<f64> = upstream
            .iter()
            .zip(&cache.pre)
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        params.grad_mut(self.weight).add_outer(&dpre, &cache.input);
        params.grad_mut(self.bias).add_assign_slice(&dpre);
        let mut dx = vec![0.0; self.in_dim];
        params.value(self.weight).tr_matvec_acc(&dpre, &mut dx);
        Ok(dx)
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn clear_tape(&mut self) {
        self.tape.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(act: Activation) -> (ParamBlock, DenseLayer) {
        let mut p = ParamBlock::new();
        let l = DenseLayer::with_weights(&mut p, "fc", Matrix::identity(2), &[0.0, 0.0], act).unwrap();
        (p, l)
    }

    #[test]
    fn identity_forward() {
        let (p, l) = identity_layer(Activation::Identity);
        assert_eq!(l.forward(&p, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn leaky_relu_forward() {
        let (p, l) = identity_layer(Activation::LeakyRelu);
        assert_eq!(l.forward(&p, &[3.0, -1.0]).unwrap(), vec![3.0, -0.01]);
    }

    #[test]
    fn affine_forward() {
        let mut p = ParamBlock::new();
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let l = DenseLayer::with_weights(&mut p, "fc", w, &[1.0, 1.0], Activation::Identity).unwrap();
        assert_eq!(l.forward(&p, &[1.0, 1.0]).unwrap(), vec![4.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let (p, l) = identity_layer(Activation::Identity);
        assert!(matches!(
            l.forward(&p, &[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sum_loss_gradient_is_input_outer_ones() {
        let (mut p, mut l) = identity_layer(Activation::Identity);
        let x = [3.0, -1.0];
        l.forward_record(&p, &x).unwrap();
        let dx = l.backward(&mut p, &[1.0, 1.0]).unwrap();
        assert_eq!(p.grad(l.weight_id()).as_slice(), &[3.0, -1.0, 3.0, -1.0]);
        assert_eq!(p.grad(l.bias_id()).as_slice(), &[1.0, 1.0]);
        assert_eq!(dx, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (mut p, mut l) = identity_layer(Activation::LeakyRelu);
        l.forward_record(&p, &[0.3, -2.0]).unwrap();
        l.backward(&mut p, &[0.0, 0.0]).unwrap();
        assert!(p.iter().all(|q| q.grad.as_slice().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn backward_without_forward_is_error() {
        let (mut p, mut l) = identity_layer(Activation::Identity);
        assert!(matches!(
            l.backward(&mut p, &[1.0, 1.0]),
            Err(Error::BackwardWithoutForward { .. })
        ));
    }

    #[test]
    fn gradients_accumulate() {
        let (mut p, mut l) = identity_layer(Activation::Identity);
        l.forward_record(&p, &[1.0, 2.0]).unwrap();
        l.forward_record(&p, &[1.0, 2.0]).unwrap();
        l.backward(&mut p, &[1.0, 0.0]).unwrap();
        l.backward(&mut p, &[1.0, 0.0]).unwrap();
        assert_eq!(p.grad(l.weight_id()).as_slice(), &[2.0, 4.0, 0.0, 0.0]);
    }
}

//! Small building blocks shared by the network modules: named parameter
//! access, fully-connected layers and scalar activations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

/// Uniform access to every learnable tensor of a module, in a fixed order.
///
/// The order returned by [`Parameters::tensors`] and [`Parameters::tensors_mut`]
/// must agree; the optimizer and the checkpoint format rely on it.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)>
where
    T: 'a,
{
    items
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t))
        .collect()
}

pub(crate) fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

pub(crate) fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are kept in standard layout")
}

/// Fully-connected layer `y = W x + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform initialization in `[-1/sqrt(in), 1/sqrt(in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut layer = Affine::zeros(input, output);
        layer
            .weight
            .mapv_inplace(|_| rng.random_range(-bound..bound));
        layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Applies the layer to every row of `x`.
    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients for one input vector and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView1<f64>,
        grad_out: ArrayView1<f64>,
        grads: &mut Affine,
    ) -> Array1<f64> {
        for (mut row, &g) in grads.weight.outer_iter_mut().zip(grad_out) {
            if g != 0.0 {
                row.scaled_add(g, &x);
            }
        }
        grads.bias += &grad_out;
        self.weight.t().dot(&grad_out)
    }

    /// Row-batched counterpart of [`Affine::backward`].
    pub fn backward_rows(
        &self,
        x: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
        grads: &mut Affine,
    ) -> Array2<f64> {
        grads.weight += &grad_out.t().dot(&x);
        grads.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }

    pub(crate) fn check(&self, context: &'static str, input: usize, output: usize) -> Result<()> {
        if self.input_dim() != input || self.output_dim() != output || self.bias.len() != output {
            return Err(Error::shape(
                context,
                format!("{input}->{output}"),
                format!("{}->{}", self.input_dim(), self.output_dim()),
            ));
        }
        Ok(())
    }
}

impl Parameters for Affine {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".into(), slice_of(&self.weight)),
            ("bias".into(), slice_of(&self.bias)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".into(), slice_of_mut(&mut self.weight)),
            ("bias".into(), slice_of_mut(&mut self.bias)),
        ]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

//! Chebyshev spectral graph convolution, fully connected layers, and
//! Glorot initialization.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::GraphOperator;
use crate::sparse::CsrMatrix;

/// Chebyshev filter bank: `order` coefficient matrices of shape
/// `in_features x out_features`, stored stacked as one
/// `[order * in_features, out_features]` tensor, plus a per-output-feature
/// bias shared by all vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebConvParams {
    pub order: usize,
    pub theta: Tensor,
    pub bias: Tensor,
}

impl ChebConvParams {
    pub fn new(order: usize, theta: Tensor, bias: Tensor) -> Result<Self> {
        let s = theta.shape();
        if order == 0 || s.len() != 2 || s[0] % order != 0 || bias.shape() != [s[1]] {
            return Err(Error::shape(
                "cheb_conv_params",
                format!("order {order}, theta {:?}, bias {:?}", s, bias.shape()),
            ));
        }
        if !theta.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("cheb_conv parameters".into()));
        }
        Ok(Self { order, theta, bias })
    }

    pub fn zeros(order: usize, in_features: usize, out_features: usize) -> Self {
        Self {
            order,
            theta: Tensor::zeros([order * in_features, out_features]),
            bias: Tensor::zeros([out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.theta.shape()[0] / self.order
    }

    pub fn out_features(&self) -> usize {
        self.theta.shape()[1]
    }

    /// Row-major `in_features x out_features` coefficients of order `p`.
    pub fn theta_order(&self, p: usize) -> &[f64] {
        let block = self.in_features() * self.out_features();
        &self.theta.data()[p * block..(p + 1) * block]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ChebConvVars {
        let (theta, bias) = if trainable {
            (tape.leaf(self.theta.clone()), tape.leaf(self.bias.clone()))
        } else {
            (tape.constant(self.theta.clone()), tape.constant(self.bias.clone()))
        };
        ChebConvVars {
            order: self.order,
            theta,
            bias,
        }
    }

    /// Tape-free forward on a single `[n, in_features]` signal.
    pub fn forward(&self, x: &Tensor, op: &GraphOperator) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = cheb_conv(&mut tape, xv, op.scaled(), &vars)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChebConvVars {
    pub order: usize,
    pub theta: Var,
    pub bias: Var,
}

/// Spectral graph convolution `sum_p T_p(L_hat) X theta_p + bias` on a
/// signal of shape `[..., n, in_features]`.
///
/// The Chebyshev basis is built on the features (`X_p = 2 L_hat X_{p-1} -
/// X_{p-2}`); the polynomial matrices themselves are never formed.
pub fn cheb_conv(tape: &mut Tape, x: Var, scaled: &Arc<CsrMatrix>, params: &ChebConvVars) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let theta_shape = tape.value(params.theta).shape().to_vec();
    let in_f = theta_shape[0] / params.order;
    if shape.len() < 2 || shape[shape.len() - 1] != in_f || shape[shape.len() - 2] != scaled.rows() {
        return Err(Error::shape(
            "cheb_conv",
            format!("input {shape:?}, theta {theta_shape:?}, order {}, n {}", params.order, scaled.rows()),
        ));
    }
    tape.chebyshev_filter(scaled, x, params.theta, params.bias, params.order)
}

/// Dense spectral-domain evaluation of the same filter: eigendecompose
/// the Laplacian, filter each frequency with `sum_p theta_p T_p(2 e / e_max - 1)`,
/// and transform back. Quadratic memory; meant for small graphs only.
pub fn spectral_oracle(x: &Tensor, laplacian: &CsrMatrix, e_max: f64, params: &ChebConvParams) -> Result<Tensor> {
    let n = laplacian.rows();
    let (n_f, n_of) = (params.in_features(), params.out_features());
    if x.shape() != [n, n_f] {
        return Err(Error::shape("spectral_oracle", format!("input {:?}, expected [{n}, {n_f}]", x.shape())));
    }
    if n > 64 {
        return Err(Error::Invalid(format!("spectral oracle limited to 64 vertices, got {n}")));
    }
    let dense = DMatrix::from_row_slice(n, n, &laplacian.to_dense());
    let eig = SymmetricEigen::try_new(dense, 1e-14, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let u = &eig.eigenvectors;
    let xm = DMatrix::from_row_slice(n, n_f, x.data());
    let xw = u.transpose() * &xm;

    // chebyshev polynomials evaluated at every scaled eigenvalue
    let cheb: Vec<Vec<f64>> = eig
        .eigenvalues
        .iter()
        .map(|&e| {
            let s = 2.0 * e / e_max - 1.0;
            let mut t = vec![1.0; params.order];
            if params.order > 1 {
                t[1] = s;
            }
            for p in 2..params.order {
                t[p] = 2.0 * s * t[p - 1] - t[p - 2];
            }
            t
        })
        .collect();

    let mut yw = DMatrix::zeros(n, n_of);
    for k in 0..n {
        for i in 0..n_f {
            for j in 0..n_of {
                let gain: f64 = (0..params.order)
                    .map(|p| params.theta_order(p)[i * n_of + j] * cheb[k][p])
                    .sum();
                yw[(k, j)] += gain * xw[(k, i)];
            }
        }
    }
    let y = u * yw;
    let mut out = Vec::with_capacity(n * n_of);
    for r in 0..n {
        for j in 0..n_of {
            out.push(y[(r, j)] + params.bias.data()[j]);
        }
    }
    Tensor::new([n, n_of], out)
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FcParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::shape("fc_params", format!("weight {:?}, bias {:?}", s, bias.shape())));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros([inputs, outputs]),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FcVars {
        if trainable {
            FcVars {
                weight: tape.leaf(self.weight.clone()),
                bias: tape.leaf(self.bias.clone()),
            }
        } else {
            FcVars {
                weight: tape.constant(self.weight.clone()),
                bias: tape.constant(self.bias.clone()),
            }
        }
    }

    /// Tape-free forward on one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::shape("fully_connected", format!("input {} vs weight {:?}", x.len(), self.weight.shape())));
        }
        let out = self.outputs();
        let mut y = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight.data()[i * out..(i + 1) * out];
            y.iter_mut().zip(row).for_each(|(yj, w)| *yj += xi * w);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FcVars {
    pub weight: Var,
    pub bias: Var,
}

/// `x: [batch, in] -> [batch, out]`.
pub fn fully_connected(tape: &mut Tape, x: Var, params: &FcVars) -> Result<Var> {
    let y = tape.matmul(x, params.weight)?;
    tape.add_bias(y, params.bias)
}

/// Shape of a layer to initialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    ChebConv { order: usize, inputs: usize, outputs: usize },
    Fc { inputs: usize, outputs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    ChebConv(ChebConvParams),
    Fc(FcParams),
}

/// Glorot-uniform half-width `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_cheb<R: Rng + ?Sized>(order: usize, inputs: usize, outputs: usize, rng: &mut R) -> ChebConvParams {
    let a = glorot_bound(order * inputs, outputs);
    ChebConvParams {
        order,
        theta: Tensor::uniform([order * inputs, outputs], a, rng),
        bias: Tensor::zeros([outputs]),
    }
}

pub fn init_fc<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> FcParams {
    let a = glorot_bound(inputs, outputs);
    FcParams {
        weight: Tensor::uniform([inputs, outputs], a, rng),
        bias: Tensor::zeros([outputs]),
    }
}

pub fn init_params(seed: u64, spec: LayerSpec) -> LayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        LayerSpec::ChebConv { order, inputs, outputs } => LayerParams::ChebConv(init_cheb(order, inputs, outputs, &mut rng)),
        LayerSpec::Fc { inputs, outputs } => LayerParams::Fc(init_fc(inputs, outputs, &mut rng)),
    }
}

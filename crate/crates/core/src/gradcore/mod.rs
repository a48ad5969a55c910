//! Minimal reverse-mode automatic differentiation over [`Tensor4`].
//!
//! A [`Tape`] records each operation as it executes. [`Tape::backward`]
//! replays the record in reverse and returns a [`Gradients`] table holding
//! one accumulator per recorded value.

pub mod ops;
mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

pub use tensor::Tensor4;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Weight tensor `(C_out, C_in, k, k)` plus a length-`C_out` bias stored as
/// `(C_out, 1, 1, 1)`. Fully connected layers use `k = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weight: Tensor4,
    pub bias: Tensor4,
}

impl ConvKernel {
    pub fn new(weight: Tensor4, bias: Tensor4) -> Result<Self> {
        if bias.len() != weight.dims()[0] {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                weight.dims()[0]
            )));
        }
        Ok(ConvKernel { weight, bias })
    }

    pub fn conv2d(&self, input: &Tensor4) -> Result<Tensor4> {
        ops::conv2d(input, &self.weight, &self.bias)
    }

    pub fn linear(&self, input: &Tensor4) -> Result<Tensor4> {
        ops::linear(input, &self.weight, &self.bias)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum {
        input: Var,
    },
    /// Scalar loss with its precomputed gradient w.r.t. `input`.
    Loss {
        input: Var,
        grad: Tensor4,
    },
    /// `Σ coeff · term` over scalar terms.
    Combine {
        terms: Vec<(Var, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id {
            return Err(Error::NotRecorded);
        }
        self.nodes.get(var.index).ok_or(Error::NotRecorded)
    }

    fn needs(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.requires_grad;
        }
        Ok(any)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf such as an input batch.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor4> {
        Ok(&self.node(var)?.value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input)?, self.value(weight)?, self.value(bias)?)?;
        let rg = self.needs(&[input, weight, bias])?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input)?, self.value(weight)?, self.value(bias)?)?;
        let rg = self.needs(&[input, weight, bias])?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input)?);
        let rg = self.needs(&[input])?;
        Ok(self.push(out, Op::Relu { input }, rg))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2x2(self.value(input)?)?;
        let rg = self.needs(&[input])?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input)?.sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("sum"));
        }
        let rg = self.needs(&[input])?;
        Ok(self.push(Tensor4::scalar(total), Op::Sum { input }, rg))
    }

    /// Records a scalar loss computed outside the tape together with its
    /// gradient w.r.t. `input`.
    pub fn loss(&mut self, input: Var, value: f64, grad: Tensor4) -> Result<Var> {
        if grad.dims() != self.value(input)?.dims() {
            return Err(Error::shape("loss gradient does not match its input"));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let rg = self.needs(&[input])?;
        Ok(self.push(Tensor4::scalar(value), Op::Loss { input, grad }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (value, grad) = ops::softmax_cross_entropy(self.value(logits)?, targets)?;
        self.loss(logits, value, grad)
    }

    /// Weighted sum of scalar values.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let value = self.value(v)?;
            if value.len() != 1 {
                return Err(Error::shape("combine expects scalar terms"));
            }
            total += c * value.data()[0];
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("combine"));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&vars)?;
        Ok(self.push(
            Tensor4::scalar(total),
            Op::Combine {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor4>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.index] = Some(Tensor4::filled(root.value.dims(), 1.0));

        for index in (0..=loss.index).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.index];
                    let (dx, dw, db) = ops::conv2d_backward(
                        &x.value,
                        &self.nodes[weight.index].value,
                        &g,
                        x.requires_grad,
                    );
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.index];
                    let (dx, dw, db) = ops::linear_backward(
                        &x.value,
                        &self.nodes[weight.index].value,
                        &g,
                        x.requires_grad,
                    );
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                    if let Some(dx) = dx {
                        // linear flattens its input; restore the original dims
                        let dx = Tensor4::from_vec(x.value.dims(), dx.into_data())?;
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Relu { input } => {
                    let dx = ops::relu_backward(&self.nodes[input.index].value, &g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let dims = self.nodes[input.index].value.dims();
                    accumulate(
                        &mut grads,
                        *input,
                        ops::maxpool2x2_backward(&g, argmax, dims),
                    );
                }
                Op::Sum { input } => {
                    let dims = self.nodes[input.index].value.dims();
                    accumulate(&mut grads, *input, Tensor4::filled(dims, g.data()[0]));
                }
                Op::Loss { input, grad } => {
                    let mut dx = grad.clone();
                    let s = g.data()[0];
                    if s != 1.0 {
                        dx.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Combine { terms } => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, v, Tensor4::scalar(c * g.data()[0]));
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[index] = Some(g);
            }
        }

        let dims = self.nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            dims,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor4>], var: Var, delta: Tensor4) {
    match &mut grads[var.index] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient accumulators produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor4>>,
    dims: Vec<[usize; 4]>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf. Leaves the loss does not depend
    /// on get an all-zero tensor of their own shape.
    pub fn get(&self, var: Var) -> Result<Tensor4> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::NotRecorded);
        }
        Ok(match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor4::zeros(self.dims[var.index]),
        })
    }

    /// Like [`Gradients::get`] but moves the accumulator out.
    pub fn take(&mut self, var: Var) -> Result<Tensor4> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::NotRecorded);
        }
        Ok(self.grads[var.index]
            .take()
            .unwrap_or_else(|| Tensor4::zeros(self.dims[var.index])))
    }
}

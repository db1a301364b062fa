use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Affine,
    Conv2d,
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
    Flatten,
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Leaf,
    Affine { input: Var, weights: Var, bias: Var },
    Conv2d { input: Var, kernels: Var, stride: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Flatten(Var),
}

impl Node {
    fn kind(&self) -> OpKind {
        match self {
            Node::Leaf => OpKind::Leaf,
            Node::Affine { .. } => OpKind::Affine,
            Node::Conv2d { .. } => OpKind::Conv2d,
            Node::Sigmoid(_) => OpKind::Sigmoid,
            Node::Tanh(_) => OpKind::Tanh,
            Node::Relu(_) => OpKind::Relu,
            Node::Add(..) => OpKind::Add,
            Node::Mul(..) => OpKind::Mul,
            Node::Flatten(_) => OpKind::Flatten,
        }
    }
}

/// Linear record of forward operations, replayed in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Node::Leaf)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.values
            .get(var.0)
            .ok_or_else(|| Error::State(format!("no tape entry for {var:?}")))
    }

    pub fn kind(&self, var: Var) -> Result<OpKind> {
        self.node(var).map(Node::kind)
    }

    pub fn affine(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::affine(self.value(input)?, self.value(weights)?, self.value(bias)?)?;
        Ok(self.push(out, Node::Affine { input, weights, bias }))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input)?, self.value(kernels)?, stride)?;
        Ok(self.push(out, Node::Conv2d { input, kernels, stride }))
    }

    pub fn sigmoid(&mut self, z: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(z)?);
        Ok(self.push(out, Node::Sigmoid(z)))
    }

    pub fn tanh(&mut self, z: Var) -> Result<Var> {
        let out = ops::tanh(self.value(z)?);
        Ok(self.push(out, Node::Tanh(z)))
    }

    pub fn relu(&mut self, z: Var) -> Result<Var> {
        let out = ops::relu(self.value(z)?);
        Ok(self.push(out, Node::Relu(z)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a)?, self.value(b)?)?;
        Ok(self.push(out, Node::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a)?, self.value(b)?)?;
        Ok(self.push(out, Node::Mul(a, b)))
    }

    /// Row-major flatten to one dimension.
    pub fn flatten(&mut self, var: Var) -> Result<Var> {
        let value = self.value(var)?.clone();
        let n = value.len();
        Ok(self.push(value.reshape(&[n])?, Node::Flatten(var)))
    }

    /// Local partial derivatives of a single recorded op given the gradient
    /// flowing into its output. Returns one gradient per input.
    pub fn backward_of(&self, var: Var, upstream: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = *self.node(var)?;
        let out = self.value(var)?;
        if upstream.len() != out.len() {
            return Err(Error::dim("backward_of", upstream.shape(), out.shape()));
        }
        let grads = match node {
            Node::Leaf => Vec::new(),
            Node::Affine { input, weights, bias } => {
                let (di, dw, db) =
                    ops::affine_backward(self.value(input)?, self.value(weights)?, upstream)?;
                vec![(input, di), (weights, dw), (bias, db)]
            }
            Node::Conv2d { input, kernels, stride } => {
                let (di, dk) =
                    ops::conv2d_backward(self.value(input)?, self.value(kernels)?, stride, upstream)?;
                vec![(input, di), (kernels, dk)]
            }
            Node::Sigmoid(z) => vec![(z, ops::sigmoid_backward(out, upstream)?)],
            Node::Tanh(z) => vec![(z, ops::tanh_backward(out, upstream)?)],
            Node::Relu(z) => vec![(z, ops::relu_backward(self.value(z)?, upstream)?)],
            Node::Add(a, b) => {
                let (ga, gb) = ops::add_backward(upstream);
                vec![(a, ga), (b, gb)]
            }
            Node::Mul(a, b) => {
                let (ga, gb) = ops::mul_backward(self.value(a)?, self.value(b)?, upstream)?;
                vec![(a, ga), (b, gb)]
            }
            Node::Flatten(src) => {
                vec![(src, upstream.clone().reshape(self.value(src)?.shape())?)]
            }
        };
        Ok(grads)
    }

    /// Reverse accumulation from `output` seeded with `upstream`.
    pub fn backward(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        let out = self.value(output)?;
        if out.shape() != upstream.shape() {
            return Err(Error::dim("backward", upstream.shape(), out.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(upstream);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, gi) in self.backward_of(Var(idx), &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node(&self, var: Var) -> Result<&Node> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| Error::State(format!("no tape entry for {var:?}")))
    }

    fn push(&mut self, value: Tensor, node: Node) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; a state error if `var` did not influence the output.
    pub fn get(&self, var: Var) -> Result<&Tensor> {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("no gradient recorded for {var:?}")))
    }
}

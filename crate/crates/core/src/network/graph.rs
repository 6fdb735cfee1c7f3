use std::rc::Rc;

use super::model::{ConvId, Model};
use super::tensor::{self, Real, Tensor};

/// Negative-side slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// The handful of operations the network is built from. Written once
/// against this trait, the forward pass runs both for inference ([`Eval`])
/// and on the training tape.
pub trait Graph<T: Real> {
    type Var: Clone;

    fn model(&self) -> &Model<T>;
    fn input(&mut self, t: Tensor<T>) -> Self::Var;
    fn conv(&mut self, x: &Self::Var, conv: ConvId) -> Self::Var;
    fn leaky(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn shuffle(&mut self, x: &Self::Var) -> Self::Var;
    fn crop(&mut self, x: &Self::Var, h: usize, w: usize) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;
}

/// Inference backend: values only, nothing recorded.
pub struct Eval<'m, T: Real> {
    model: &'m Model<T>,
}

impl<'m, T: Real> Eval<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Eval { model }
    }
}

impl<T: Real> Graph<T> for Eval<'_, T> {
    type Var = Rc<Tensor<T>>;

    fn model(&self) -> &Model<T> {
        self.model
    }

    fn input(&mut self, t: Tensor<T>) -> Self::Var {
        Rc::new(t)
    }

    fn conv(&mut self, x: &Self::Var, conv: ConvId) -> Self::Var {
        let spec = self.model.arch().conv(conv);
        let p = self.model.conv(conv);
        Rc::new(tensor::conv2d(x, &p.weight, &p.bias, spec.dilation))
    }

    fn leaky(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(tensor::leaky_relu(x, T::of(LEAKY_SLOPE)))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        let mut out = (**a).clone();
        out.add_assign(b);
        Rc::new(out)
    }

    fn shuffle(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(tensor::pixel_shuffle(x))
    }

    fn crop(&mut self, x: &Self::Var, h: usize, w: usize) -> Self::Var {
        Rc::new(tensor::crop(x, h, w))
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T> {
        v
    }
}

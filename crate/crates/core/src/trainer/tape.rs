use crate::network::{
    conv2d, conv2d_backward, crop, leaky_relu, leaky_relu_backward, pixel_shuffle, pixel_unshuffle, uncrop,
    Conv, ConvId, Graph, Model, Real, Tensor, LEAKY_SLOPE,
};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Conv(NodeId, ConvId),
    Leaky(NodeId),
    Add(NodeId, NodeId),
    Shuffle(NodeId),
    Crop(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records every operation of a forward pass so that gradients can be
/// pulled back through it afterwards.
pub struct Tape<'m, T: Real> {
    model: &'m Model<T>,
    nodes: Vec<Node<T>>,
}

impl<'m, T: Real> Tape<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Tape {
            model,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Parameter gradients given output adjoints. Nodes are visited in
    /// reverse recording order, which is a reverse topological order.
    pub fn backward(&self, seeds: &[(NodeId, Tensor<T>)]) -> Vec<Conv<T>> {
        let mut grads: Vec<Conv<T>> = self.model.arch().convs().iter().map(Conv::zeros).collect();
        let mut adj: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        let accumulate = |adj: &mut Vec<Option<Tensor<T>>>, id: NodeId, g: Tensor<T>| match &mut adj[id] {
            Some(a) => a.add_assign(&g),
            slot => *slot = Some(g),
        };
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.nodes[*id].value.shape(), "seed shape");
            accumulate(&mut adj, *id, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match self.nodes[i].op {
                Op::Input => {}
                Op::Conv(x, c) => {
                    let xn = &self.nodes[x];
                    let mut dx = xn.needs_grad.then(|| Tensor::zeros(xn.value.shape()));
                    let p = self.model.conv(c);
                    let gc = &mut grads[c];
                    conv2d_backward(
                        &xn.value,
                        &p.weight,
                        self.model.arch().conv(c).dilation,
                        &g,
                        dx.as_mut(),
                        &mut gc.weight,
                        &mut gc.bias,
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut adj, x, dx);
                    }
                }
                Op::Leaky(x) => {
                    if self.nodes[x].needs_grad {
                        let d = leaky_relu_backward(&self.nodes[x].value, &g, T::of(LEAKY_SLOPE));
                        accumulate(&mut adj, x, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b].needs_grad {
                        accumulate(&mut adj, b, g.clone());
                    }
                    if self.nodes[a].needs_grad {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Shuffle(x) => {
                    if self.nodes[x].needs_grad {
                        accumulate(&mut adj, x, pixel_unshuffle(&g));
                    }
                }
                Op::Crop(x) => {
                    if self.nodes[x].needs_grad {
                        let (_, h, w) = self.nodes[x].value.chw();
                        accumulate(&mut adj, x, uncrop(&g, h, w));
                    }
                }
            }
        }
        grads
    }
}

impl<T: Real> Graph<T> for Tape<'_, T> {
    type Var = NodeId;

    fn model(&self) -> &Model<T> {
        self.model
    }

    fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    fn conv(&mut self, x: &NodeId, conv: ConvId) -> NodeId {
        let p = self.model.conv(conv);
        let d = self.model.arch().conv(conv).dilation;
        let v = conv2d(&self.nodes[*x].value, &p.weight, &p.bias, d);
        self.push(v, Op::Conv(*x, conv), true)
    }

    fn leaky(&mut self, x: &NodeId) -> NodeId {
        let v = leaky_relu(&self.nodes[*x].value, T::of(LEAKY_SLOPE));
        let ng = self.nodes[*x].needs_grad;
        self.push(v, Op::Leaky(*x), ng)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let mut v = self.nodes[*a].value.clone();
        v.add_assign(&self.nodes[*b].value);
        let ng = self.nodes[*a].needs_grad || self.nodes[*b].needs_grad;
        self.push(v, Op::Add(*a, *b), ng)
    }

    fn shuffle(&mut self, x: &NodeId) -> NodeId {
        let v = pixel_shuffle(&self.nodes[*x].value);
        let ng = self.nodes[*x].needs_grad;
        self.push(v, Op::Shuffle(*x), ng)
    }

    fn crop(&mut self, x: &NodeId, h: usize, w: usize) -> NodeId {
        let v = crop(&self.nodes[*x].value, h, w);
        let ng = self.nodes[*x].needs_grad;
        self.push(v, Op::Crop(*x), ng)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        &self.nodes[*v].value
    }
}

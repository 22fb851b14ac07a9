//! Parameter storage and the layer building blocks shared by both networks.

use intrinsic_autodiff::{
    init_he, init_normal, BnState, Checkpoint, Graph, Mode, NamedTensor, Parameter, Shape, Tensor, Var,
};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Every trainable tensor and batch-norm buffer of a network, in creation
/// order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Parameter<f32>>,
    pub bn: Vec<(String, BnState<f32>)>,
}

/// Graph handles of a store's parameters for one pass.
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl ParamStore {
    pub fn add(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    pub fn add_bn(&mut self, name: String, channels: usize) -> usize {
        self.bn.push((name, BnState::new(channels)));
        self.bn.len() - 1
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    /// Registers every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Moves the gradients computed on `g` into the parameters.
    pub fn collect_grads(&mut self, g: &mut Graph<f32>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.grad = Some(g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())));
        }
    }

    fn bn_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.bn
            .iter()
            .flat_map(|(name, st)| {
                let shape = Shape::new(1, st.channels(), 1, 1);
                [
                    NamedTensor::new(
                        format!("{prefix}{name}.running_mean"),
                        Tensor::new(shape, st.running_mean.clone()).expect("sized"),
                    ),
                    NamedTensor::new(
                        format!("{prefix}{name}.running_var"),
                        Tensor::new(shape, st.running_var.clone()).expect("sized"),
                    ),
                ]
            })
            .collect()
    }

    /// Appends this store's tensors to a checkpoint under `prefix`.
    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for p in &self.params {
            ckpt.params.push(NamedTensor::new(format!("{prefix}{}", p.name), p.value.clone()));
            ckpt.momentum.push(NamedTensor::new(format!("{prefix}{}", p.name), p.momentum.clone()));
        }
        ckpt.buffers.extend(self.bn_tensors(prefix));
    }

    /// Loads tensors exported under `prefix`; momentum buffers only when
    /// `with_momentum`.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint, with_momentum: bool) -> Result<()> {
        let find = |list: &[NamedTensor], name: &str, shape: Shape| -> Result<Tensor<f32>> {
            let t = list
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if t.tensor.shape() != shape {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} is {}, model expects {shape}",
                    t.tensor.shape()
                )));
            }
            Ok(t.tensor.clone())
        };
        for p in &mut self.params {
            let name = format!("{prefix}{}", p.name);
            p.value = find(&ckpt.params, &name, p.value.shape())?;
            p.momentum = if with_momentum {
                find(&ckpt.momentum, &name, p.value.shape())?
            } else {
                Tensor::zeros(p.value.shape())
            };
            p.grad = None;
        }
        for (name, st) in &mut self.bn {
            let shape = Shape::new(1, st.channels(), 1, 1);
            st.running_mean = find(&ckpt.buffers, &format!("{prefix}{name}.running_mean"), shape)?.into_data();
            st.running_var = find(&ckpt.buffers, &format!("{prefix}{name}.running_var"), shape)?.into_data();
        }
        Ok(())
    }
}

/// How weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    He,
    StandardNormal,
}

pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: Shape, fan_in: usize, init: Init) -> usize {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::He => init_he(&mut t, fan_in, self.rng),
            Init::StandardNormal => init_normal(&mut t, 0.0, 1.0, self.rng),
        }
        self.store.add(name, t)
    }

    fn bias(&mut self, name: String, c: usize) -> usize {
        self.store.add(name, Tensor::zeros(Shape::new(1, c, 1, 1)))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Conv {
        Conv {
            w: self.weight(format!("{name}.w"), Shape::new(cout, cin, 3, 3), cin * 9, Init::He),
            b: self.bias(format!("{name}.b"), cout),
            stride,
        }
    }

    /// 4×4 stride-2 transposed convolution; each output sees `2×2` input
    /// positions per channel, so He uses `fan_in = 4·cin`.
    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, init: Init) -> Deconv {
        Deconv {
            w: self.weight(format!("{name}.w"), Shape::new(cin, cout, 4, 4), cin * 4, init),
            b: self.bias(format!("{name}.b"), cout),
        }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::filled(Shape::new(1, c, 1, 1), 1.0));
        let beta = self.bias(format!("{name}.beta"), c);
        Bn {
            gamma,
            beta,
            state: self.store.add_bn(name.to_string(), c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deconv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bn {
    gamma: usize,
    beta: usize,
    state: usize,
}

/// Mutable context of one forward pass.
pub struct Pass<'a> {
    pub g: &'a mut Graph<f32>,
    pub bound: &'a Bound,
    pub bn: &'a mut [(String, BnState<f32>)],
    pub mode: Mode,
}

impl Pass<'_> {
    pub fn conv(&mut self, c: Conv, x: Var) -> Result<Var> {
        Ok(self
            .g
            .conv3x3(x, self.bound.var(c.w), Some(self.bound.var(c.b)), c.stride)?)
    }

    pub fn deconv(&mut self, d: Deconv, x: Var) -> Result<Var> {
        Ok(self
            .g
            .deconv4x4_s2(x, self.bound.var(d.w), Some(self.bound.var(d.b)))?)
    }

    pub fn bn(&mut self, b: Bn, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.bound.var(b.gamma), self.bound.var(b.beta));
        Ok(self.g.batchnorm(x, gamma, beta, &mut self.bn[b.state].1, self.mode)?)
    }

    /// conv → batch norm → ReLU
    pub fn conv_bn_relu(&mut self, c: Conv, b: Bn, x: Var) -> Result<Var> {
        let y = self.conv(c, x)?;
        let y = self.bn(b, y)?;
        Ok(self.g.relu(y))
    }
}

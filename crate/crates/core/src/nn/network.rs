use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Which party's model a network plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Bottom,
    Top,
    Surrogate,
}

/// One dense layer: `activation(x W + b)` with `W` of shape `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcNetwork {
    role: Role,
    layers: Vec<Layer>,
}

impl FcNetwork {
    /// Builds a network with layer widths `dims` (input first). Hidden layers
    /// use `hidden`, the last layer is linear. Weights are Glorot-uniform,
    /// biases zero.
    pub fn build(dims: &[usize], hidden: Activation, role: Role, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least one layer".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero width in {dims:?}")));
        }
        let mut rng = rng::seeded(seed);
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::from_parts(fan_in, fan_out, data),
                    bias: Tensor::zeros(1, fan_out),
                    activation: if i + 1 == n_layers {
                        Activation::Identity
                    } else {
                        hidden
                    },
                }
            })
            .collect();
        Ok(FcNetwork { role, layers })
    }

    /// Assembles a network from explicit layers, checking that widths chain.
    pub fn from_layers(role: Role, layers: Vec<Layer>) -> Result<Self> {
        let net = FcNetwork { role, layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = layer.weight.shape();
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} has a zero width"
                )));
            }
            if layer.bias.shape() != (1, fan_out) {
                return Err(Error::ShapeMismatch {
                    op: "layer bias",
                    lhs: layer.weight.shape(),
                    rhs: layer.bias.shape(),
                });
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.weight.rows() != fan_out {
                    return Err(Error::ShapeMismatch {
                        op: "layer chain",
                        lhs: layer.weight.shape(),
                        rhs: next.weight.shape(),
                    });
                }
            }
            layer.weight.ensure_finite("layer weight")?;
            layer.bias.ensure_finite("layer bias")?;
        }
        Ok(())
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.cols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// Parameters in `w0, b0, w1, b1, ...` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn zero_params(&mut self) {
        for p in self.params_mut() {
            p.data_mut().fill(0.0);
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNetwork<'t> {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant, for frozen models.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundNetwork<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundNetwork<'t> {
        let record = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| (record(&l.weight), record(&l.bias), l.activation))
                .collect(),
        }
    }

    /// Untaped forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape(),
                rhs: self.layers[0].weight.shape(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = h.matmul(&layer.weight)?.add_bias(&layer.bias)?;
            h = match layer.activation {
                Activation::Relu => h.map(|v| v.max(0.0)),
                Activation::Tanh => h.map(f64::tanh),
                Activation::Identity => h,
            };
        }
        h.ensure_finite("forward")?;
        Ok(h)
    }

    /// Applies one optimizer step to every parameter.
    pub fn apply(&mut self, opt: &mut super::Adam, grads: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        opt.step(&mut params, grads)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let net: FcNetwork = serde_json::from_str(&fs::read_to_string(path)?)?;
        net.validate()?;
        Ok(net)
    }
}

/// A network whose parameters have been recorded on a tape.
pub struct BoundNetwork<'t> {
    layers: Vec<(Var<'t>, Var<'t>, Activation)>,
}

impl<'t> BoundNetwork<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            h = h.matmul(w)?.add_bias(b)?.activation(act)?;
        }
        Ok(h)
    }

    /// Parameter variables in `w0, b0, w1, b1, ...` order.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

//! Multilayer perceptrons used as teacher, student and self-learning teacher.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Architecture of a rectifier MLP. An empty `hidden` list is a linear
/// classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::contract("input_dim must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::contract(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::contract(format!(
                "hidden widths must be positive: {:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Widths from input to output, e.g. `[16, 64, 10]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// One affine layer: `weight` is `[fan_in × fan_out]`, `bias` is `[fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    param_seed: u64,
    layers: Vec<Layer>,
}

impl Model {
    /// Weights uniform in `±1/√fan_in`, biases zero. Deterministic in
    /// `(spec, seed)`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::rng(seed);
        let layers = spec
            .widths()
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let w = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Model {
            spec,
            param_seed: seed,
            layers,
        })
    }

    /// Assembles a model from explicit layers, checking that shapes chain.
    pub fn from_layers(spec: ModelSpec, param_seed: u64, layers: Vec<Layer>) -> Result<Self> {
        let model = Model {
            spec,
            param_seed,
            layers,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        let widths = self.spec.widths();
        if self.layers.len() != widths.len() - 1 {
            return Err(Error::dim(format!(
                "spec needs {} layers, found {}",
                widths.len() - 1,
                self.layers.len()
            )));
        }
        for (i, (layer, p)) in self.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weight.shape() != [p[0], p[1]] || layer.bias.shape() != [p[1]] {
                return Err(Error::dim(format!(
                    "layer {i}: weight {:?} / bias {:?}, expected [{}, {}] / [{}]",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    p[0],
                    p[1],
                    p[1]
                )));
            }
        }
        Ok(())
    }

    /// Same architecture, fresh parameters drawn from `seed`.
    pub fn clone_architecture(&self, seed: u64) -> Result<Model> {
        Model::init(self.spec.clone(), seed)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_seed(&self) -> u64 {
        self.param_seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Parameters in the fixed order `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params().flat_map(|t| t.data()) {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.spec.input_dim {
            return Err(Error::dim(format!(
                "input of shape {:?} does not match input_dim {}",
                x.shape(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    /// Logits `[b × classes]` for a batch, evaluated without a tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = kernels::add_bias(&kernels::matmul(&h, &layer.weight)?, &layer.bias)?;
            if i < last {
                h = kernels::relu(&h);
            }
        }
        Ok(h)
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            params: self.params().map(|p| tape.leaf(p.clone())).collect(),
            input_dim: self.spec.input_dim,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let model: Model = serde_json::from_str(text)?;
        model.check_shapes()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_json(&fs::read_to_string(path)?)
    }
}

/// A model's parameters registered on a tape for one forward/backward pass.
pub struct BoundModel<'t> {
    params: Vec<Var<'t>>,
    input_dim: usize,
}

impl<'t> BoundModel<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    /// Alternating affine and rectifier layers; the last affine layer is
    /// left linear.
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim(format!(
                "input of shape {shape:?} does not match input_dim {}",
                self.input_dim
            )));
        }
        let n_layers = self.params.len() / 2;
        let mut h = *x;
        for (i, wb) in self.params.chunks_exact(2).enumerate() {
            h = h.matmul(&wb[0])?.add_bias(&wb[1])?;
            if i + 1 < n_layers {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

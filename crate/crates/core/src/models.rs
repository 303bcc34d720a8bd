//! Small classifiers split into a feature extractor `g` and a single affine
//! head `q`, so that `logits = q(g(x))` and the representation `g(x)` is
//! directly observable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Extractor layer as requested by the caller.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerDesc {
    /// Square `kernel x kernel` convolution with `filters` output channels.
    Conv { filters: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    AvgPool(usize),
    Flatten,
    Dense { out: usize },
}

/// Extractor layer bound to parameter slots.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { weight: usize, bias: usize, stride: usize, pad: usize },
    Relu,
    AvgPool(usize),
    Flatten,
    Dense { weight: usize, bias: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A feature extractor followed by one dense layer to `classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    descs: Vec<LayerDesc>,
    layers: Vec<Layer>,
    head: (usize, usize),
    classes: usize,
    representation_dim: usize,
    params: Vec<Param>,
}

/// Representation and logits recorded on a tape by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    pub representation: Var,
    pub logits: Var,
}

/// Detached result of [`ModelSpec::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub representation: Tensor,
    pub logits: Tensor,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl ModelSpec {
    /// Builds a model for per-sample inputs of `input_shape`, with weights drawn
    /// Kaiming-uniform from `seed` and zero biases.
    pub fn new(input_shape: &[usize], descs: &[LayerDesc], classes: usize, seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("bad input shape {input_shape:?}")));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut shape = input_shape.to_vec();
        let push = |params: &mut Vec<Param>, name: String, value: Tensor| {
            params.push(Param { name, value });
            params.len() - 1
        };
        for (i, desc) in descs.iter().enumerate() {
            let layer = match *desc {
                LayerDesc::Conv { filters, kernel, stride, pad } => {
                    if shape.len() != 3 || filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!("conv layer {i} on per-sample shape {shape:?}")));
                    }
                    let (c, h, w) = (shape[0], shape[1] + 2 * pad, shape[2] + 2 * pad);
                    if kernel > h || kernel > w || (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
                        return Err(Error::Config(format!("conv layer {i} does not tile {shape:?}")));
                    }
                    let weight = kaiming_uniform(&mut rng, vec![filters, c, kernel, kernel], c * kernel * kernel);
                    let weight = push(&mut params, format!("g.{i}.weight"), weight);
                    let bias = push(&mut params, format!("g.{i}.bias"), Tensor::zeros([filters]));
                    shape = vec![filters, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                    Layer::Conv { weight, bias, stride, pad }
                }
                LayerDesc::Relu => Layer::Relu,
                LayerDesc::AvgPool(size) => {
                    if shape.len() != 3 || size == 0 || shape[1] % size != 0 || shape[2] % size != 0 {
                        return Err(Error::Config(format!("pool layer {i} on per-sample shape {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                    Layer::AvgPool(size)
                }
                LayerDesc::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerDesc::Dense { out } => {
                    if shape.len() != 1 || out == 0 {
                        return Err(Error::Config(format!("dense layer {i} on per-sample shape {shape:?}")));
                    }
                    let weight = kaiming_uniform(&mut rng, vec![shape[0], out], shape[0]);
                    let weight = push(&mut params, format!("g.{i}.weight"), weight);
                    let bias = push(&mut params, format!("g.{i}.bias"), Tensor::zeros([out]));
                    shape = vec![out];
                    Layer::Dense { weight, bias }
                }
            };
            layers.push(layer);
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!(
                "extractor must end in a flat representation, ends in {shape:?}"
            )));
        }
        let representation_dim = shape[0];
        let hw = kaiming_uniform(&mut rng, vec![representation_dim, classes], representation_dim);
        let hw = push(&mut params, "q.weight".into(), hw);
        let hb = push(&mut params, "q.bias".into(), Tensor::zeros([classes]));
        Ok(ModelSpec {
            input_shape: input_shape.to_vec(),
            descs: descs.to_vec(),
            layers,
            head: (hw, hb),
            classes,
            representation_dim,
            params,
        })
    }

    /// Dense-relu stack as extractor; the last hidden activation is the
    /// representation.
    pub fn small_mlp(input_dim: usize, hidden_dims: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if hidden_dims.is_empty() {
            return Err(Error::Config("small_mlp needs at least one hidden layer".into()));
        }
        if input_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Config("small_mlp dimensions must be positive".into()));
        }
        let descs: Vec<LayerDesc> = hidden_dims
            .iter()
            .flat_map(|&out| [LayerDesc::Dense { out }, LayerDesc::Relu])
            .collect();
        Self::new(&[input_dim], &descs, classes, seed)
    }

    /// Three `conv3x3(16) - relu - avgpool(2)` blocks, then flatten and a
    /// 64-unit dense layer as the representation.
    pub fn small_cnn(channels: usize, image_hw: usize, classes: usize, seed: u64) -> Result<Self> {
        if image_hw < 8 || image_hw % 8 != 0 {
            return Err(Error::Config(format!(
                "small_cnn needs an image side divisible by 8, got {image_hw}"
            )));
        }
        let block = [
            LayerDesc::Conv { filters: 16, kernel: 3, stride: 1, pad: 1 },
            LayerDesc::Relu,
            LayerDesc::AvgPool(2),
        ];
        let mut descs: Vec<LayerDesc> = block.iter().cycle().take(9).cloned().collect();
        descs.push(LayerDesc::Flatten);
        descs.push(LayerDesc::Dense { out: 64 });
        Self::new(&[channels, image_hw, image_hw], &descs, classes, seed)
    }

    /// A single affine map as extractor (used to exercise exact equivariance).
    pub fn linear(input_dim: usize, representation_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        Self::new(&[input_dim], &[LayerDesc::Dense { out: representation_dim }], classes, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layer_descs(&self) -> &[LayerDesc] {
        &self.descs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn representation_dim(&self) -> usize {
        self.representation_dim
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Whether parameter `index` belongs to the feature extractor.
    pub fn is_extractor_param(&self, index: usize) -> bool {
        index != self.head.0 && index != self.head.1
    }

    /// Parameter tensors in slot order (gradients stripped).
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.clear_grad();
                t
            })
            .collect()
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn set_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (slot, (name, value)) in self.params.iter().zip(&values) {
            if slot.name != *name || slot.value.shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name} {:?} does not fit slot {} {:?}",
                    value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
        }
        for (slot, (_, value)) in self.params.iter_mut().zip(values) {
            slot.value = value.with_requires_grad(false);
        }
        Ok(())
    }

    /// Records every parameter as a leaf, trainable or constant.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                let mut v = p.value.cast::<T>();
                v.clear_grad();
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    fn check_input<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] {
            return Ok(x);
        }
        // Flat models accept any batch whose samples have the right size.
        if self.input_shape.len() == 1 && shape.len() > 1 && shape[1..].iter().product::<usize>() == self.input_shape[0] {
            return tape.flatten(x);
        }
        Err(dim_err!("input {shape:?} does not match per-sample shape {:?}", self.input_shape))
    }

    /// The extractor `g` alone.
    pub fn extract<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let mut h = self.check_input(tape, x)?;
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { weight, bias, stride, pad } => {
                    let c = tape.conv2d(h, params[weight], stride, pad)?;
                    tape.bias_add(c, params[bias])?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::AvgPool(size) => tape.avgpool2d(h, size)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Dense { weight, bias } => {
                    let z = tape.matmul(h, params[weight])?;
                    tape.bias_add(z, params[bias])?
                }
            };
        }
        Ok(h)
    }

    /// The linear head `q` applied to a representation.
    pub fn head<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], representation: Var) -> Result<Var> {
        let z = tape.matmul(representation, params[self.head.0])?;
        tape.bias_add(z, params[self.head.1])
    }

    /// One pass returning both the representation and the logits computed from it.
    pub fn forward_on<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<TapeOutput> {
        let representation = self.extract(tape, params, x)?;
        let logits = self.head(tape, params, representation)?;
        Ok(TapeOutput { representation, logits })
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::<f32>::new();
        let params = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward_on(&mut tape, &params, xv)?;
        Ok(ForwardOutput {
            representation: tape.value(out.representation).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }
}

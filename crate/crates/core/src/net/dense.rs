use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// One dense layer. `weight` is `out_dim x in_dim`: row `j` holds the
/// incoming weights of output node `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Connectivity mask with the weight's shape; entries are 0.0 or 1.0.
    pub mask: Option<Matrix>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        let layer = Layer {
            spec,
            weight,
            bias,
            mask: None,
        };
        layer.validate(0)?;
        Ok(layer)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let s = self.spec;
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::invalid(format!(
                "layer {index} has a zero dimension"
            )));
        }
        let ctx = || format!("layer {index}");
        if self.weight.shape() != (s.out_dim, s.in_dim) {
            return Err(Error::shape(
                ctx(),
                format!("{:?}", (s.out_dim, s.in_dim)),
                format!("{:?}", self.weight.shape()),
            ));
        }
        if self.bias.len() != s.out_dim {
            return Err(Error::shape(ctx() + " bias", s.out_dim, self.bias.len()));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != self.weight.shape() {
                return Err(Error::shape(
                    ctx() + " mask",
                    format!("{:?}", self.weight.shape()),
                    format!("{:?}", mask.shape()),
                ));
            }
            for (m, w) in mask.as_slice().iter().zip(self.weight.as_slice()) {
                if *m != 0.0 && *m != 1.0 {
                    return Err(Error::invalid(format!(
                        "{} mask entry {m} not binary",
                        ctx()
                    )));
                }
                if *m == 0.0 && *w != 0.0 {
                    return Err(Error::invalid(format!(
                        "{} has a nonzero masked weight",
                        ctx()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Installs a mask and zeroes the weights it removes.
    pub fn set_mask(&mut self, mask: Matrix) -> Result<()> {
        if mask.shape() != self.weight.shape() {
            return Err(Error::shape(
                "Layer::set_mask",
                format!("{:?}", self.weight.shape()),
                format!("{:?}", mask.shape()),
            ));
        }
        if mask.as_slice().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        self.mask = Some(mask);
        self.apply_mask();
        Ok(())
    }

    pub(crate) fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, m) in self.weight.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                if *m == 0.0 {
                    *w = 0.0;
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// Feed-forward stack of dense layers producing class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Per-layer activations recorded by [`DenseNet::forward_trace`].
#[derive(Clone, Debug)]
pub struct Trace {
    /// `inputs[l]` is the input fed to layer `l`; the last entry is the logits.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl Trace {
    pub fn logits(&self) -> &Matrix {
        self.inputs
            .last()
            .expect("trace always holds the network input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients mirroring a [`DenseNet`] layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientSet {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.spec.out_dim, l.spec.in_dim),
                    bias: vec![0.0; l.spec.out_dim],
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, net: &DenseNet) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::shape(
                "gradient layer count",
                net.layers.len(),
                self.layers.len(),
            ));
        }
        for (i, (g, l)) in self.layers.iter().zip(&net.layers).enumerate() {
            if g.weight.shape() != l.weight.shape() || g.bias.len() != l.bias.len() {
                return Err(Error::shape(
                    format!("gradient for layer {i}"),
                    format!("{:?}", l.weight.shape()),
                    format!("{:?}", g.weight.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

impl DenseNet {
    /// Validates and assembles a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
            if i > 0 && layers[i - 1].spec.out_dim != l.spec.in_dim {
                return Err(Error::shape(
                    format!("layer {i} input"),
                    layers[i - 1].spec.out_dim,
                    l.spec.in_dim,
                ));
            }
        }
        if layers.last().map(|l| l.spec.activation) != Some(Activation::Identity) {
            return Err(Error::invalid(
                "the final layer must use the identity activation",
            ));
        }
        Ok(DenseNet { layers })
    }

    /// ReLU MLP with He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        if dims.contains(&0) {
            return Err(Error::invalid("zero-width layer"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    spec: LayerSpec {
                        in_dim: fan_in,
                        out_dim: fan_out,
                        activation: if i + 1 == n {
                            Activation::Identity
                        } else {
                            Activation::Relu
                        },
                    },
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    mask: None,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").spec.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("layer 0 input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Logits for every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = affine(layer, &a);
            let act = layer.spec.activation;
            for v in a.as_mut_slice() {
                *v = act.apply(*v);
            }
        }
        Ok(a)
    }

    /// Forward pass that keeps every intermediate needed by backprop.
    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for layer in &self.layers {
            let z = affine(layer, inputs.last().expect("non-empty"));
            let mut a = z.clone();
            let act = layer.spec.activation;
            for v in a.as_mut_slice() {
                *v = act.apply(*v);
            }
            pre.push(z);
            inputs.push(a);
        }
        Ok(Trace {
            inputs,
            pre_activations: pre,
        })
    }

    /// Gradients of a scalar loss given `d loss / d logits` for the batch `x`.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<GradientSet> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, upstream)
    }

    pub fn backward_trace(&self, trace: &Trace, upstream: &Matrix) -> Result<GradientSet> {
        let logits = trace.logits();
        if upstream.shape() != logits.shape() {
            return Err(Error::shape(
                "backward upstream",
                format!("{:?}", logits.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = GradientSet::zeros_like(self);
        let mut delta = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.spec.activation;
            for (d, z) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(trace.pre_activations[l].as_slice())
            {
                *d *= act.derivative(*z);
            }
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for b in 0..delta.rows() {
                let a_row = input.row(b);
                for (j, &dz) in delta.row(b).iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    g.bias[j] += dz;
                    for (gw, &a) in g.weight.row_mut(j).iter_mut().zip(a_row) {
                        *gw += dz * a;
                    }
                }
            }
            if let Some(mask) = &layer.mask {
                for (gw, m) in g.weight.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    if *m == 0.0 {
                        *gw = 0.0;
                    }
                }
            }
            if l > 0 {
                let mut next = Matrix::zeros(delta.rows(), layer.spec.in_dim);
                for b in 0..delta.rows() {
                    let out = next.row_mut(b);
                    for (j, &dz) in delta.row(b).iter().enumerate() {
                        if dz == 0.0 {
                            continue;
                        }
                        for (o, &w) in out.iter_mut().zip(layer.weight.row(j)) {
                            *o += dz * w;
                        }
                    }
                }
                delta = next;
            }
        }
        Ok(grads)
    }

    /// Deep copy that can only be read.
    pub fn clone_frozen(&self) -> FrozenNet {
        FrozenNet(self.clone())
    }

    /// Appends `extra` output nodes whose incoming weights and bias are zero.
    pub fn widen_output(&mut self, extra: usize) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.push_rows(extra, 0.0);
        last.bias.resize(last.bias.len() + extra, 0.0);
        if let Some(mask) = &mut last.mask {
            mask.push_rows(extra, 1.0);
        }
        last.spec.out_dim += extra;
    }

    /// Removes every mask, keeping the (zeroed) weights.
    pub fn clear_masks(&mut self) {
        for l in &mut self.layers {
            l.mask = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn affine(layer: &Layer, a: &Matrix) -> Matrix {
    let out_dim = layer.spec.out_dim;
    let mut z = Matrix::zeros(a.rows(), out_dim);
    for b in 0..a.rows() {
        let a_row = a.row(b);
        let z_row = z.row_mut(b);
        for (j, zj) in z_row.iter_mut().enumerate() {
            let w = layer.weight.row(j);
            let mut s = layer.bias[j];
            for (wi, ai) in w.iter().zip(a_row) {
                s += wi * ai;
            }
            *zj = s;
        }
    }
    z
}

/// Immutable deep copy of a network, used as a distillation teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNet(DenseNet);

impl FrozenNet {
    pub fn net(&self) -> &DenseNet {
        &self.0
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.0.forward(x)
    }

    /// Returns an independent, mutable copy.
    pub fn thaw(&self) -> DenseNet {
        self.0.clone()
    }
}

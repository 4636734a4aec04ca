//! Student/teacher classifier: an MLP with an optional naive convolution +
//! average-pooling front for single-channel images, input perturbations, and
//! the EMA teacher update.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softmax_rows, sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Softmax over classes, one label per sample.
    SingleLabel,
    /// Independent sigmoid per class.
    MultiLabel,
}

/// Geometry of the image front: `kernel × kernel` valid convolution with
/// stride 1 into `channels` maps, ReLU, then 2×2 average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageFront {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub channels: usize,
}

impl ImageFront {
    pub fn conv_dims(&self) -> (usize, usize) {
        (self.height + 1 - self.kernel, self.width + 1 - self.kernel)
    }

    pub fn pooled_dims(&self) -> (usize, usize) {
        let (h, w) = self.conv_dims();
        (h / 2, w / 2)
    }

    /// Width of the flattened pooled feature map.
    pub fn output_dim(&self) -> usize {
        let (ph, pw) = self.pooled_dims();
        ph * pw * self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.channels == 0 || self.kernel > self.height || self.kernel > self.width {
            return Err(Error::contract(format!("invalid image front {self:?}")));
        }
        if self.output_dim() == 0 {
            return Err(Error::contract("image front pools to an empty map"));
        }
        Ok(())
    }

    /// `[B·P × k²]` patch matrix, `P` = number of conv output positions.
    fn patches(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = self.conv_dims();
        let k = self.kernel;
        let b = x.rows();
        let mut data = Vec::with_capacity(b * oh * ow * k * k);
        for s in 0..b {
            let img = x.row(s);
            for r in 0..oh {
                for c in 0..ow {
                    for dr in 0..k {
                        for dc in 0..k {
                            data.push(img[(r + dr) * self.width + c + dc]);
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![b * oh * ow, k * k], data)
    }

    /// Constant matrix mapping `[P·C]` conv features to `[P'·C]` pooled ones.
    fn pool_matrix(&self) -> Tensor {
        let (oh, ow) = self.conv_dims();
        let (ph, pw) = self.pooled_dims();
        let ch = self.channels;
        let rows = oh * ow * ch;
        let cols = ph * pw * ch;
        let mut m = Tensor::zeros(&[rows, cols]);
        for pr in 0..ph {
            for pc in 0..pw {
                let q = pr * pw + pc;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = (2 * pr + dr) * ow + 2 * pc + dc;
                    for c in 0..ch {
                        m.data_mut()[(p * ch + c) * cols + q * ch + c] = 0.25;
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in × fan_out]`
    pub weight: Tensor,
    /// `[1 × fan_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvFront {
    pub geometry: ImageFront,
    /// `[k² × channels]`
    pub kernel: Tensor,
    /// `[1 × channels]`
    pub bias: Tensor,
}

/// One network's weights. The student and the teacher each own one.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// MLP widths from the (post-front) input to the class count.
    pub layer_dims: Vec<usize>,
    pub head_mode: HeadMode,
    pub front: Option<ConvFront>,
    pub layers: Vec<Layer>,
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Scaled-uniform weights (bound `1/√fan_in`), zero biases.
pub fn init_params(layer_dims: &[usize], head_mode: HeadMode, seed: u64) -> Result<ModelParams> {
    init_with_front(None, layer_dims, head_mode, seed)
}

/// Like [`init_params`] with a convolution front; `layer_dims[0]` must equal
/// `front.output_dim()`.
pub fn init_image_params(
    front: ImageFront,
    layer_dims: &[usize],
    head_mode: HeadMode,
    seed: u64,
) -> Result<ModelParams> {
    front.validate()?;
    if layer_dims.first() != Some(&front.output_dim()) {
        return Err(Error::contract(format!(
            "first layer width {:?} must equal image front output {}",
            layer_dims.first(),
            front.output_dim()
        )));
    }
    init_with_front(Some(front), layer_dims, head_mode, seed)
}

fn init_with_front(
    front: Option<ImageFront>,
    layer_dims: &[usize],
    head_mode: HeadMode,
    seed: u64,
) -> Result<ModelParams> {
    if layer_dims.len() < 2 {
        return Err(Error::contract("need at least input and output widths"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::contract("layer widths must be >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let front = front.map(|g| {
        let k2 = g.kernel * g.kernel;
        ConvFront {
            geometry: g,
            kernel: uniform_tensor(&mut rng, &[k2, g.channels], 1.0 / libm::sqrt(k2 as f64)),
            bias: Tensor::zeros(&[1, g.channels]),
        }
    });
    let layers = layer_dims
        .windows(2)
        .map(|w| Layer {
            weight: uniform_tensor(&mut rng, &[w[0], w[1]], 1.0 / libm::sqrt(w[0] as f64)),
            bias: Tensor::zeros(&[1, w[1]]),
        })
        .collect();
    Ok(ModelParams {
        layer_dims: layer_dims.to_vec(),
        head_mode,
        front,
        layers,
    })
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated at init")
    }

    /// Width of raw input rows (image pixels when a front is present).
    pub fn input_dim(&self) -> usize {
        match &self.front {
            Some(f) => f.geometry.height * f.geometry.width,
            None => self.layer_dims[0],
        }
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.front.as_ref().map(|f| (f.geometry.height, f.geometry.width))
    }

    /// All weight tensors in a fixed order (front first, then per layer
    /// weight and bias).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        if let Some(f) = &self.front {
            out.push(&f.kernel);
            out.push(&f.bias);
        }
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        if let Some(f) = &mut self.front {
            out.push(&mut f.kernel);
            out.push(&mut f.bias);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    /// Registers every weight as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors().into_iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Registers every weight as a detached constant.
    pub fn bind_detached(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors().into_iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Tape handles for a [`ModelParams`], in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Input perturbation: additive Gaussian noise, plus horizontal flips for
/// image inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub noise_sigma: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            noise_sigma: 0.0,
            flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.flip_prob == 0.0
    }

    pub fn apply(&self, x: &Tensor, image: Option<(usize, usize)>) -> Result<Tensor> {
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::contract(format!("invalid perturbation {self:?}")));
        }
        if self.is_identity() {
            return Ok(x.clone());
        }
        let mut rng = stream_rng(self.seed, Stream::Data, 0);
        let mut out = x.clone();
        let cols = x.cols();
        for i in 0..x.rows() {
            let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            if let Some((h, w)) = image {
                if self.flip_prob > 0.0 && rng.random::<f64>() < self.flip_prob {
                    for r in 0..h {
                        row[r * w..(r + 1) * w].reverse();
                    }
                }
            }
            if self.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += self.noise_sigma * z;
                }
            }
        }
        Ok(out)
    }
}

/// Penultimate activations and logits of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    /// `[B × K]`, the representation used for relation matrices.
    pub features: Tensor,
    /// `[B × c]`
    pub logits: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub features: Var,
    pub logits: Var,
}

fn affine(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.value(h).rows();
    let ones = tape.constant(Tensor::ones(&[rows, 1]));
    let hw = tape.matmul(h, w)?;
    let bias = tape.matmul(ones, b)?;
    tape.add(hw, bias)
}

/// Forward pass recorded on `tape`. `x` is perturbed first (the perturbed
/// input is a constant leaf).
pub fn forward_tape(
    params: &ModelParams,
    bound: &BoundParams,
    tape: &mut Tape,
    x: &Tensor,
    pert: &Perturbation,
) -> Result<FeatureVars> {
    let (b, d) = x.expect_matrix("forward")?;
    if d != params.input_dim() {
        return Err(Error::Shape {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![b, params.input_dim()],
        });
    }
    if b == 0 {
        return Err(Error::contract("forward on an empty batch"));
    }
    let x = pert.apply(x, params.image_dims())?;
    let mut vars = bound.vars.iter().copied();
    let mut h = match &params.front {
        Some(front) => {
            let g = front.geometry;
            let kernel = vars.next().expect("bound front kernel");
            let bias = vars.next().expect("bound front bias");
            let patches = tape.constant(g.patches(&x));
            let conv = affine(tape, patches, kernel, bias)?;
            let conv = tape.relu(conv)?;
            let (oh, ow) = g.conv_dims();
            let flat = tape.reshape(conv, &[b, oh * ow * g.channels])?;
            let pool = tape.constant(g.pool_matrix());
            tape.matmul(flat, pool)?
        }
        None => tape.constant(x),
    };
    let n = params.layers.len();
    for _ in 0..n - 1 {
        let w = vars.next().expect("bound weight");
        let bias = vars.next().expect("bound bias");
        let z = affine(tape, h, w, bias)?;
        h = tape.relu(z)?;
    }
    let w = vars.next().expect("bound head weight");
    let bias = vars.next().expect("bound head bias");
    let logits = affine(tape, h, w, bias)?;
    Ok(FeatureVars { features: h, logits })
}

/// Detached forward pass; nothing is recorded for differentiation.
pub fn forward(params: &ModelParams, x: &Tensor, pert: &Perturbation) -> Result<FeatureBatch> {
    let mut tape = Tape::new();
    let bound = params.bind_detached(&mut tape);
    let out = forward_tape(params, &bound, &mut tape, x, pert)?;
    Ok(FeatureBatch {
        features: tape.value(out.features).clone(),
        logits: tape.value(out.logits).clone(),
    })
}

/// Logits to probabilities for the given head.
pub fn probabilities(logits: &Tensor, head: HeadMode) -> Result<Tensor> {
    match head {
        HeadMode::SingleLabel => softmax_rows(logits),
        HeadMode::MultiLabel => Ok(logits.map(sigmoid)),
    }
}

/// Unperturbed class probabilities `[B × c]`.
pub fn predict(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let out = forward(params, x, &Perturbation::none())?;
    probabilities(&out.logits, params.head_mode)
}

/// `teacher ← α·teacher + (1 − α)·student`, per parameter.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("EMA rate {alpha} outside [0, 1]")));
    }
    if !teacher.same_shapes(student) {
        return Err(Error::Shape {
            op: "ema_update",
            left: teacher.layer_dims.clone(),
            right: student.layer_dims.clone(),
        });
    }
    let mut next = teacher.clone();
    for (t, s) in next.tensors_mut().into_iter().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(next)
}

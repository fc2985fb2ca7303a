//! Upsampling convolutional generator `g(z, w)` with exact reverse-mode
//! gradients.
//!
//! Layout of the forward pass:
//!
//! ```text
//! z ─ dense ─ reshape (rows₀, cols₀, ch₀) ─┬─ [upsample×2 ─ conv k×k ─ leaky-ReLU] × stages
//!                                          └─ final conv k×k → 1 channel (linear)
//! ```
//!
//! Convolutions are circular and share their kernels with [`crate::linops`].

mod checkpoint;
mod fit;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use fit::{fit_strong, FitResult};

use crate::error::{invalid, shape_err, Result};
use crate::grid::{Grid, Shape};
use crate::linops::{conv_accumulate, conv_kernel_grad, corr_accumulate};
use crate::rng::{self, Tag};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetArch {
    pub latent_dim: usize,
    pub base_rows: usize,
    pub base_cols: usize,
    pub base_channels: usize,
    pub stages: Vec<Stage>,
    /// Kernel of the final 1-channel convolution. `None` makes the last
    /// feature map (which must then have one channel) the output.
    pub final_kernel: Option<usize>,
    pub bias: bool,
}

impl NetArch {
    /// latent 64, base 4×4×8, `stages` × {up×2, conv 3×3, 8 ch}, final conv 3×3.
    pub fn with_stages(stages: usize) -> Self {
        Self {
            latent_dim: 64,
            base_rows: 4,
            base_cols: 4,
            base_channels: 8,
            stages: vec![
                Stage {
                    channels: 8,
                    kernel: 3
                };
                stages
            ],
            final_kernel: Some(3),
            bias: true,
        }
    }

    /// A single dense layer `z ↦ Wz (+ b)` reshaped to `rows × cols`.
    pub fn dense(latent_dim: usize, rows: usize, cols: usize, bias: bool) -> Self {
        Self {
            latent_dim,
            base_rows: rows,
            base_cols: cols,
            base_channels: 1,
            stages: Vec::new(),
            final_kernel: None,
            bias,
        }
    }

    pub fn output_shape(&self) -> Shape {
        let f = 1usize << self.stages.len();
        Shape::new(self.base_rows * f, self.base_cols * f)
    }

    fn last_channels(&self) -> usize {
        self.stages.last().map_or(self.base_channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_rows == 0 || self.base_cols == 0 || self.base_channels == 0 {
            return invalid("network extents must be positive");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel % 2 == 0 {
                return invalid(format!("stage {i}: channels must be positive and kernel odd"));
            }
        }
        match self.final_kernel {
            Some(k) if k % 2 == 0 => invalid(format!("final kernel must be odd, got {k}")),
            None if self.last_channels() != 1 => {
                invalid("without a final convolution the last feature map must have one channel")
            }
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> NetLayout {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |kind, outs: usize, ins: usize, k: usize, bias: bool| {
            let weights = outs * ins * k * k;
            let layer = LayerLayout {
                kind,
                outputs: outs,
                inputs: ins,
                kernel: k,
                weight_offset: offset,
                bias_offset: bias.then_some(offset + weights),
            };
            offset += weights + if bias { outs } else { 0 };
            layers.push(layer);
        };
        let base_len = self.base_rows * self.base_cols * self.base_channels;
        push(LayerKind::Dense, base_len, self.latent_dim, 1, self.bias);
        let mut ch = self.base_channels;
        for s in &self.stages {
            push(LayerKind::Stage, s.channels, ch, s.kernel, self.bias);
            ch = s.channels;
        }
        if let Some(k) = self.final_kernel {
            push(LayerKind::Final, 1, ch, k, self.bias);
        }
        NetLayout { layers, total: offset }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Stage,
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub kind: LayerKind,
    pub outputs: usize,
    pub inputs: usize,
    /// 1 for the dense layer.
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.outputs * self.inputs * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.inputs * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetLayout {
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

/// Flat parameter vector of a generator.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    pub flat: Vec<f64>,
}

impl NetWeights {
    pub fn zeros(len: usize) -> Self {
        Self { flat: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &NetWeights) {
        crate::grid::axpy(&mut self.flat, alpha, &other.flat);
    }
}

/// Latent code `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVec(pub Vec<f64>);

impl LatentVec {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Draws `z ~ N(0, I)`.
    pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        Self(rng::normal_vec(rng, n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Activations retained by the forward pass for backpropagation.
struct Tape {
    base: Vec<f64>,
    /// Per stage: the upsampled input and the pre-activation output.
    stages: Vec<(Vec<f64>, Vec<f64>)>,
    /// Input of the final convolution (the last feature map).
    last: Vec<f64>,
}

/// A generator architecture bound to its parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    arch: NetArch,
    layout: NetLayout,
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Nearest-neighbour ×2 upsampling of a `channels × shape` map.
fn upsample2(x: &[f64], channels: usize, shape: Shape) -> Vec<f64> {
    let (r0, c0) = (shape.rows, shape.cols);
    let (r1, c1) = (2 * r0, 2 * c0);
    let mut out = vec![0.0; channels * r1 * c1];
    for ch in 0..channels {
        let src = &x[ch * r0 * c0..(ch + 1) * r0 * c0];
        let dst = &mut out[ch * r1 * c1..(ch + 1) * r1 * c1];
        for r in 0..r1 {
            for c in 0..c1 {
                dst[r * c1 + c] = src[(r / 2) * c0 + c / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
fn upsample2_adjoint(g: &[f64], channels: usize, coarse: Shape) -> Vec<f64> {
    let (r0, c0) = (coarse.rows, coarse.cols);
    let c1 = 2 * c0;
    let mut out = vec![0.0; channels * r0 * c0];
    for ch in 0..channels {
        let src = &g[ch * 4 * r0 * c0..(ch + 1) * 4 * r0 * c0];
        let dst = &mut out[ch * r0 * c0..(ch + 1) * r0 * c0];
        for r in 0..2 * r0 {
            for c in 0..c1 {
                dst[(r / 2) * c0 + c / 2] += src[r * c1 + c];
            }
        }
    }
    out
}

impl Generator {
    pub fn new(arch: NetArch) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        Ok(Self { arch, layout })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn output_shape(&self) -> Shape {
        self.arch.output_shape()
    }

    /// Zero-mean Gaussian weights with per-layer standard deviation
    /// `scale / √fan_in`; biases start at zero.
    pub fn init(&self, seed: u64, scale: f64) -> Result<NetWeights> {
        if !(scale > 0.0) {
            return invalid(format!("init scale must be positive, got {scale}"));
        }
        let mut w = NetWeights::zeros(self.layout.total);
        for (i, layer) in self.layout.layers.iter().enumerate() {
            let mut stream = rng::stream(seed, Tag::NetInit, &[i as u64]);
            let std = scale / (layer.fan_in() as f64).sqrt();
            let draws = rng::normal_vec(&mut stream, layer.weight_len());
            let dst = &mut w.flat[layer.weight_offset..layer.weight_offset + layer.weight_len()];
            for (d, v) in dst.iter_mut().zip(draws) {
                *d = std * v;
            }
        }
        Ok(w)
    }

    fn check_inputs(&self, w: &NetWeights, z: &LatentVec) -> Result<()> {
        if w.len() != self.layout.total {
            return shape_err(format!(
                "weight vector has {} entries, architecture needs {}",
                w.len(),
                self.layout.total
            ));
        }
        if z.len() != self.arch.latent_dim {
            return shape_err(format!(
                "latent has {} entries, architecture needs {}",
                z.len(),
                self.arch.latent_dim
            ));
        }
        Ok(())
    }

    fn bias(&self, w: &NetWeights, layer: &LayerLayout, o: usize) -> f64 {
        layer.bias_offset.map_or(0.0, |b| w.flat[b + o])
    }

    /// Multi-channel circular convolution plus bias.
    fn conv_layer(&self, w: &NetWeights, layer: &LayerLayout, x: &[f64], shape: Shape) -> Vec<f64> {
        let n = shape.len();
        let kk = layer.kernel * layer.kernel;
        let mut out = vec![0.0; layer.outputs * n];
        for o in 0..layer.outputs {
            let dst = &mut out[o * n..(o + 1) * n];
            let b = self.bias(w, layer, o);
            if b != 0.0 {
                dst.iter_mut().for_each(|d| *d = b);
            }
            for i in 0..layer.inputs {
                let off = layer.weight_offset + (o * layer.inputs + i) * kk;
                conv_accumulate(&w.flat[off..off + kk], layer.kernel, &x[i * n..(i + 1) * n], shape, dst);
            }
        }
        out
    }

    /// Backward through a conv layer. Accumulates weight and bias gradients
    /// into `grad` and returns the gradient with respect to the layer input.
    fn conv_layer_backward(
        &self,
        w: &NetWeights,
        layer: &LayerLayout,
        x: &[f64],
        g_out: &[f64],
        shape: Shape,
        grad: &mut NetWeights,
    ) -> Vec<f64> {
        let n = shape.len();
        let kk = layer.kernel * layer.kernel;
        let mut g_in = vec![0.0; layer.inputs * n];
        for o in 0..layer.outputs {
            let go = &g_out[o * n..(o + 1) * n];
            if let Some(b) = layer.bias_offset {
                grad.flat[b + o] += go.iter().sum::<f64>();
            }
            for i in 0..layer.inputs {
                let off = layer.weight_offset + (o * layer.inputs + i) * kk;
                conv_kernel_grad(go, &x[i * n..(i + 1) * n], layer.kernel, shape, &mut grad.flat[off..off + kk]);
                corr_accumulate(&w.flat[off..off + kk], layer.kernel, go, shape, &mut g_in[i * n..(i + 1) * n]);
            }
        }
        g_in
    }

    fn forward_tape(&self, w: &NetWeights, z: &LatentVec) -> (Vec<f64>, Tape) {
        let dense = &self.layout.layers[0];
        let zs = z.as_slice();
        let mut base = vec![0.0; dense.outputs];
        for (o, b) in base.iter_mut().enumerate() {
            let row = &w.flat[dense.weight_offset + o * dense.inputs..dense.weight_offset + (o + 1) * dense.inputs];
            *b = self.bias(w, dense, o) + crate::grid::dot(row, zs);
        }

        let mut shape = Shape::new(self.arch.base_rows, self.arch.base_cols);
        let mut channels = self.arch.base_channels;
        let mut h = base.clone();
        let mut stages = Vec::with_capacity(self.arch.stages.len());
        for (s, layer) in self.layout.layers[1..=self.arch.stages.len()].iter().enumerate() {
            let up = upsample2(&h, channels, shape);
            shape = Shape::new(shape.rows * 2, shape.cols * 2);
            let pre = self.conv_layer(w, layer, &up, shape);
            h = pre.iter().map(|&v| leaky(v)).collect();
            channels = self.arch.stages[s].channels;
            stages.push((up, pre));
        }
        let out = match self.arch.final_kernel {
            Some(_) => {
                let layer = self.layout.layers.last().expect("final layer");
                self.conv_layer(w, layer, &h, shape)
            }
            None => h.clone(),
        };
        (out, Tape { base, stages, last: h })
    }

    pub fn forward(&self, w: &NetWeights, z: &LatentVec) -> Result<Grid> {
        self.check_inputs(w, z)?;
        let (out, _) = self.forward_tape(w, z);
        Ok(Grid::from_raw(self.output_shape(), out))
    }

    /// Output together with the gradients of `<upstream, g(z, w)>` with
    /// respect to `z` and `w`.
    pub fn forward_backward(
        &self,
        w: &NetWeights,
        z: &LatentVec,
        upstream: impl FnOnce(&Grid) -> Grid,
    ) -> Result<(Grid, LatentVec, NetWeights)> {
        self.check_inputs(w, z)?;
        let (out, tape) = self.forward_tape(w, z);
        let out = Grid::from_raw(self.output_shape(), out);
        let g = upstream(&out);
        let (gz, gw) = self.backward_tape(w, z, &tape, &g)?;
        Ok((out, gz, gw))
    }

    pub fn backward(&self, w: &NetWeights, z: &LatentVec, upstream: &Grid) -> Result<(LatentVec, NetWeights)> {
        self.check_inputs(w, z)?;
        let (_, tape) = self.forward_tape(w, z);
        self.backward_tape(w, z, &tape, upstream)
    }

    fn backward_tape(
        &self,
        w: &NetWeights,
        z: &LatentVec,
        tape: &Tape,
        upstream: &Grid,
    ) -> Result<(LatentVec, NetWeights)> {
        let out_shape = self.output_shape();
        if upstream.shape() != out_shape {
            return shape_err(format!("upstream is {}, network output is {out_shape}", upstream.shape()));
        }
        let mut grad = NetWeights::zeros(self.layout.total);
        let mut shape = out_shape;

        let mut g = match self.arch.final_kernel {
            Some(_) => {
                let layer = self.layout.layers.last().expect("final layer");
                self.conv_layer_backward(w, layer, &tape.last, upstream.as_slice(), shape, &mut grad)
            }
            None => upstream.as_slice().to_vec(),
        };

        for (s, layer) in self.layout.layers[1..=self.arch.stages.len()].iter().enumerate().rev() {
            let (up, pre) = &tape.stages[s];
            for (gi, &p) in g.iter_mut().zip(pre) {
                *gi *= leaky_grad(p);
            }
            let g_up = self.conv_layer_backward(w, layer, up, &g, shape, &mut grad);
            shape = Shape::new(shape.rows / 2, shape.cols / 2);
            g = upsample2_adjoint(&g_up, layer.inputs, shape);
        }

        let dense = &self.layout.layers[0];
        debug_assert_eq!(g.len(), tape.base.len());
        let zs = z.as_slice();
        let mut gz = vec![0.0; dense.inputs];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let off = dense.weight_offset + o * dense.inputs;
            let row = &w.flat[off..off + dense.inputs];
            for i in 0..dense.inputs {
                grad.flat[off + i] += go * zs[i];
                gz[i] += go * row[i];
            }
            if let Some(b) = dense.bias_offset {
                grad.flat[b + o] += go;
            }
        }
        Ok((LatentVec(gz), grad))
    }
}

pub fn net_init(arch: &NetArch, seed: u64, scale: f64) -> Result<NetWeights> {
    Generator::new(arch.clone())?.init(seed, scale)
}

pub fn net_forward(arch: &NetArch, w: &NetWeights, z: &LatentVec) -> Result<Grid> {
    Generator::new(arch.clone())?.forward(w, z)
}

pub fn net_backward(arch: &NetArch, w: &NetWeights, z: &LatentVec, upstream: &Grid) -> Result<(LatentVec, NetWeights)> {
    Generator::new(arch.clone())?.backward(w, z, upstream)
}

/// Weak deep-prior penalty `(λ²/2)‖x − g(z, w)‖²` and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorLoss {
    pub loss: f64,
    pub grad_z: LatentVec,
    pub grad_w: NetWeights,
}

pub fn prior_loss_grads(net: &Generator, x: &Grid, z: &LatentVec, w: &NetWeights, lambda: f64) -> Result<PriorLoss> {
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    if x.shape() != net.output_shape() {
        return shape_err(format!("model is {}, network output is {}", x.shape(), net.output_shape()));
    }
    let l2 = lambda * lambda;
    let mut loss = 0.0;
    let (_, grad_z, grad_w) = net.forward_backward(w, z, |g| {
        let diff = g.sub(x);
        loss = 0.5 * l2 * diff.dot(&diff);
        diff.scaled(l2)
    })?;
    Ok(PriorLoss { loss, grad_z, grad_w })
}

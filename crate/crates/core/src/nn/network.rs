use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{argmax, cross_entropy, cross_entropy_grad};
use super::real::{matmul, Real};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

/// Architecture record of one layer, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
}

/// Square convolution. Weights are laid out `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
}

/// Per-conv-layer parameter gradients, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<ConvGrad<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .convs()
                .map(|c| ConvGrad {
                    weight: vec![T::zero(); c.weight.len()],
                    bias: vec![T::zero(); c.bias.len()],
                })
                .collect(),
        }
    }

    /// Flattened in checkpoint order: each conv's weights then its biases.
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// Layered fully-convolutional classifier ending in global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    in_channels: usize,
    num_classes: usize,
    layers: Vec<Layer<T>>,
}

/// Reverse-mode results for a batch.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    pub losses: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
    /// Gradient of the mean loss over the batch, if requested.
    pub params: Option<Gradients<T>>,
    /// Gradient of each example's own loss with respect to its input, if requested.
    pub inputs: Option<Vec<ImageTensor>>,
}

/// Single-example reverse-mode results.
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub loss: f64,
    pub params: Gradients<T>,
    pub image: ImageTensor,
}

/// Activation block laid out `[channel][batch][row][col]`, so a conv over the
/// whole batch is one GEMM.
struct Act<T> {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

enum Cache<T> {
    Conv { col: Vec<T>, c: usize, h: usize, w: usize },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<u32>, c: usize, h: usize, w: usize },
    Gap { h: usize, w: usize },
}

/// Upper bound on im2col elements materialized per chunk.
const COL_BUDGET: usize = 1 << 20;

impl<T: Real> Network<T> {
    /// Checks that adjacent layers compose and the head ends in `num_classes` pooled channels.
    pub fn new(in_channels: usize, num_classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut ch = in_channels;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    if c.in_channels != ch {
                        return Err(Error::invalid(format!(
                            "layer {i}: conv expects {} input channels but receives {ch}",
                            c.in_channels
                        )));
                    }
                    if c.kernel == 0 || c.stride == 0 {
                        return Err(Error::invalid(format!("layer {i}: kernel and stride must be >= 1")));
                    }
                    if c.weight.len() != c.out_channels * c.in_channels * c.kernel * c.kernel
                        || c.bias.len() != c.out_channels
                    {
                        return Err(Error::invalid(format!("layer {i}: weight arrays have the wrong length")));
                    }
                    if c.weight.iter().chain(&c.bias).any(|v| !v.is_finite()) {
                        return Err(Error::invalid(format!("layer {i}: non-finite weight")));
                    }
                    ch = c.out_channels;
                }
                Layer::MaxPool { size } if *size == 0 => {
                    return Err(Error::invalid(format!("layer {i}: pool size must be >= 1")));
                }
                Layer::GlobalAvgPool if i + 1 != layers.len() => {
                    return Err(Error::invalid("global average pooling must be the last layer"));
                }
                _ => {}
            }
        }
        if !matches!(layers.last(), Some(Layer::GlobalAvgPool)) {
            return Err(Error::invalid("network must end with global average pooling"));
        }
        if ch != num_classes {
            return Err(Error::invalid(format!(
                "network produces {ch} channels but declares {num_classes} classes"
            )));
        }
        Ok(Network {
            in_channels,
            num_classes,
            layers,
        })
    }

    /// Rebuilds a network from its architecture table and flat weights (checkpoint order).
    pub fn from_specs(in_channels: usize, num_classes: usize, specs: &[LayerSpec], flat: &[T]) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut off = 0;
        for spec in specs {
            layers.push(match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let mut c = Conv::zeros(in_channels, out_channels, kernel, stride, padding);
                    let need = c.weight.len() + c.bias.len();
                    if off + need > flat.len() {
                        return Err(Error::WeightCount {
                            expected: param_count_of(specs),
                            found: flat.len(),
                        });
                    }
                    let (w, b) = flat[off..off + need].split_at(c.weight.len());
                    c.weight.copy_from_slice(w);
                    c.bias.copy_from_slice(b);
                    off += need;
                    Layer::Conv(c)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::MaxPool { size },
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            });
        }
        if off != flat.len() {
            return Err(Error::WeightCount {
                expected: off,
                found: flat.len(),
            });
        }
        Network::new(in_channels, num_classes, layers)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerSpec::Conv {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::MaxPool { size } => LayerSpec::MaxPool { size: *size },
                Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// All parameters: each conv's weights then its biases, in layer order.
    pub fn flat_params(&self) -> Vec<T> {
        self.convs()
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let flat: Vec<U> = self.flat_params().into_iter().map(|v| U::from_f64(v.as_f64())).collect();
        Network::from_specs(self.in_channels, self.num_classes, &self.specs(), &flat)
            .expect("casting preserves the architecture")
    }

    /// He-normal initialization (std `sqrt(2 / fan_in)`), zero biases.
    pub fn reinit(&mut self, seed: u64) {
        let mut rng = rng::seeded(seed);
        for c in self.convs_mut() {
            let std = (2.0 / c.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            for w in c.weight.iter_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
            c.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }

    /// Spatial size reaching the pooling head for an `h × w` input, or an error if some layer
    /// cannot be applied.
    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "image has {c} channels, network expects {}",
                self.in_channels
            )));
        }
        let (mut h, mut w) = (h, w);
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv) => {
                    (h, w) = conv
                        .out_size(h, w)
                        .ok_or_else(|| Error::invalid(format!("input {h}x{w} too small for a {}x{} conv", conv.kernel, conv.kernel)))?;
                }
                Layer::MaxPool { size } => {
                    if h < *size || w < *size {
                        return Err(Error::invalid(format!("input {h}x{w} too small for {size}x{size} pooling")));
                    }
                    (h, w) = (h / size, w / size);
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn per_sample_col(&self, h: usize, w: usize) -> usize {
        let (mut h, mut w) = (h, w);
        let mut most = 1;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    let Some((oh, ow)) = c.out_size(h, w) else { return most };
                    most = most.max(c.fan_in() * oh * ow).max(c.out_channels * oh * ow);
                    (h, w) = (oh, ow);
                }
                Layer::MaxPool { size } => (h, w) = (h / size, w / size),
                _ => {}
            }
        }
        most
    }

    fn chunk_size(&self, h: usize, w: usize) -> usize {
        (COL_BUDGET / self.per_sample_col(h, w)).clamp(1, 512)
    }

    fn check_batch(&self, images: &[ImageTensor]) -> Result<(usize, usize, usize)> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let shape = first.shape();
        if let Some(bad) = images.iter().find(|im| im.shape() != shape) {
            return Err(Error::invalid(format!(
                "batch mixes image shapes {:?} and {:?}",
                shape,
                bad.shape()
            )));
        }
        self.check_input(shape.0, shape.1, shape.2)?;
        Ok(shape)
    }

    /// Logits for one image.
    pub fn forward(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.forward_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Logits for many same-shaped images. Each row is bit-identical to [`Network::forward`]
    /// on that image alone.
    pub fn forward_batch(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (_, h, w) = self.check_batch(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.chunk_size(h, w)) {
            let act = self.run_forward(pack(chunk), None);
            out.extend(unpack_logits(&act));
        }
        Ok(out)
    }

    /// Predicted class (argmax, ties to the lowest index).
    pub fn predict(&self, image: &ImageTensor) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }

    pub fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        Ok(self.forward_batch(images)?.iter().map(|z| argmax(z)).collect())
    }

    /// Cross-entropy loss and exact gradients for one example.
    pub fn backward(&self, image: &ImageTensor, label: usize) -> Result<Backward<T>> {
        let g = self.grad_batch(std::slice::from_ref(image), &[label], true, true)?;
        Ok(Backward {
            loss: g.losses[0],
            params: g.params.expect("requested"),
            image: g.inputs.expect("requested").remove(0),
        })
    }

    /// Losses and (optionally) parameter gradients of the mean loss and per-example input
    /// gradients. Chunks are reduced in a fixed order.
    pub fn grad_batch(
        &self,
        images: &[ImageTensor],
        labels: &[usize],
        want_params: bool,
        want_inputs: bool,
    ) -> Result<BatchGrads<T>> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let (_, h, w) = self.check_batch(images)?;
        let total = images.len();
        let mut res = BatchGrads {
            losses: Vec::with_capacity(total),
            logits: Vec::with_capacity(total),
            params: want_params.then(|| Gradients::zeros_like(self)),
            inputs: want_inputs.then(Vec::new),
        };
        let step = self.chunk_size(h, w);
        for (imgs, ys) in images.chunks(step).zip(labels.chunks(step)) {
            let mut caches = Vec::with_capacity(self.layers.len());
            let act = self.run_forward(pack(imgs), Some(&mut caches));
            let logits = unpack_logits(&act);
            // d(sum of losses)/d logits, laid out [class][batch] like the pooled activation
            let b = imgs.len();
            let mut dlogits = vec![T::zero(); self.num_classes * b];
            for (bi, (z, &y)) in logits.iter().zip(ys).enumerate() {
                res.losses.push(cross_entropy(z, y)?);
                for (k, g) in cross_entropy_grad(z, y).into_iter().enumerate() {
                    dlogits[k * b + bi] = T::from_f64(g);
                }
            }
            res.logits.extend(logits);
            let grad = Act {
                c: self.num_classes,
                b,
                h: 1,
                w: 1,
                data: dlogits,
            };
            let (pg, dx) = self.run_backward(grad, caches, want_params, want_inputs);
            if let (Some(acc), Some(pg)) = (res.params.as_mut(), pg) {
                for (a, g) in acc.layers.iter_mut().zip(pg.layers) {
                    a.weight.iter_mut().zip(g.weight).for_each(|(a, g)| *a += g);
                    a.bias.iter_mut().zip(g.bias).for_each(|(a, g)| *a += g);
                }
            }
            if let (Some(acc), Some(dx)) = (res.inputs.as_mut(), dx) {
                acc.extend(unpack_images(&dx));
            }
        }
        if let Some(p) = res.params.as_mut() {
            let scale = T::from_f64(1.0 / total as f64);
            for g in p.layers.iter_mut() {
                g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v = *v * scale);
            }
        }
        Ok(res)
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, image: &ImageTensor, label: usize) -> Result<f64> {
        cross_entropy(&self.forward(image)?, label)
    }

    fn run_forward(&self, mut x: Act<T>, mut caches: Option<&mut Vec<Cache<T>>>) -> Act<T> {
        let keep = caches.is_some();
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv(c) => conv_forward(c, &x, keep),
                Layer::Relu => relu_forward(x, keep),
                Layer::MaxPool { size } => maxpool_forward(&x, *size, keep),
                Layer::GlobalAvgPool => gap_forward(&x),
            };
            if let (Some(cs), Some(cache)) = (caches.as_deref_mut(), cache) {
                cs.push(cache);
            }
            x = y;
        }
        x
    }

    fn run_backward(
        &self,
        mut grad: Act<T>,
        mut caches: Vec<Cache<T>>,
        want_params: bool,
        want_inputs: bool,
    ) -> (Option<Gradients<T>>, Option<Act<T>>) {
        let mut conv_grads: Vec<ConvGrad<T>> = Vec::new();
        let first_conv = self.layers.iter().position(|l| matches!(l, Layer::Conv(_)));
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let cache = caches.pop().expect("one cache per layer");
            // below the first conv nothing needs a gradient unless inputs were requested
            let need_dx = want_inputs || Some(li) != first_conv;
            grad = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv { col, c: ic, h, w }) => {
                    let (dx, g) = conv_backward(c, &grad, &col, (ic, h, w), want_params, need_dx);
                    if let Some(g) = g {
                        conv_grads.push(g);
                    }
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Layer::Relu, Cache::Relu { mask }) => {
                    for (g, &m) in grad.data.iter_mut().zip(&mask) {
                        if !m {
                            *g = T::zero();
                        }
                    }
                    grad
                }
                (Layer::MaxPool { .. }, Cache::MaxPool { argmax, c, h, w }) => {
                    maxpool_backward(&grad, &argmax, (c, h, w))
                }
                (Layer::GlobalAvgPool, Cache::Gap { h, w }) => gap_backward(&grad, h, w),
                _ => unreachable!("cache kind matches layer kind"),
            };
        }
        conv_grads.reverse();
        let params = want_params.then_some(Gradients { layers: conv_grads });
        (params, want_inputs.then_some(grad))
    }
}

fn param_count_of(specs: &[LayerSpec]) -> usize {
    specs
        .iter()
        .map(|s| match s {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            _ => 0,
        })
        .sum()
}

/// conv5×5×32 → ReLU → pool2 → conv5×5×64 → ReLU → pool2 → conv3×3×128 → ReLU →
/// conv3×3×256 → ReLU → conv1×1×10 → global average pool.
pub fn mnist_architecture() -> Vec<LayerSpec> {
    let conv = |i, o, k, p| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: 1,
        padding: p,
    };
    vec![
        conv(1, 32, 5, 2),
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        conv(32, 64, 5, 2),
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        conv(64, 128, 3, 1),
        LayerSpec::Relu,
        conv(128, 256, 3, 1),
        LayerSpec::Relu,
        conv(256, 10, 1, 0),
        LayerSpec::GlobalAvgPool,
    ]
}

/// The MNIST classifier with He-normal weights drawn from `seed`.
pub fn build_mnist_net<T: Real>(seed: u64) -> Network<T> {
    let specs = mnist_architecture();
    let zeros = vec![T::zero(); param_count_of(&specs)];
    let mut net = Network::from_specs(1, 10, &specs, &zeros).expect("static architecture is valid");
    net.reinit(seed);
    net
}

fn pack<T: Real>(images: &[ImageTensor]) -> Act<T> {
    let (c, h, w) = images[0].shape();
    let b = images.len();
    let plane = h * w;
    let mut data = vec![T::zero(); c * b * plane];
    for (bi, img) in images.iter().enumerate() {
        for ch in 0..c {
            let src = &img.data()[ch * plane..(ch + 1) * plane];
            let dst = &mut data[(ch * b + bi) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(s);
            }
        }
    }
    Act { c, b, h, w, data }
}

fn unpack_logits<T: Real>(act: &Act<T>) -> Vec<Vec<f64>> {
    (0..act.b)
        .map(|bi| (0..act.c).map(|k| act.data[k * act.b + bi].as_f64()).collect())
        .collect()
}

fn unpack_images<T: Real>(act: &Act<T>) -> Vec<ImageTensor> {
    let plane = act.h * act.w;
    (0..act.b)
        .map(|bi| {
            let mut data = Vec::with_capacity(act.c * plane);
            for ch in 0..act.c {
                data.extend(act.data[(ch * act.b + bi) * plane..][..plane].iter().map(|v| v.as_f64()));
            }
            ImageTensor::new(act.c, act.h, act.w, data).expect("finite gradients")
        })
        .collect()
}

/// Output columns `[lo, hi)` whose stride-1 input column `ox + kx - p` lies in `[0, w)`.
#[inline]
fn valid_span(kx: usize, p: usize, ow: usize, w: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kx);
    let hi = ow.min((w + p).saturating_sub(kx));
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &Act<T>, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<T> {
    let n = x.b * oh * ow;
    let mut col = vec![T::zero(); x.c * k * k * n];
    let plane = x.h * x.w;
    for ci in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for b in 0..x.b {
                    let src = &x.data[(ci * x.b + b) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..][..x.w];
                        let drow = &mut dst[(b * oh + oy) * ow..][..ow];
                        if s == 1 {
                            let (lo, hi) = valid_span(kx, p, ow, x.w);
                            if lo < hi {
                                drow[lo..hi].copy_from_slice(&srow[lo + kx - p..hi + kx - p]);
                            }
                            continue;
                        }
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = b * oh * ow;
    let plane = h * w;
    let mut out = vec![T::zero(); c * b * plane];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut out[(ci * b + bi) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(bi * oh + oy) * ow..][..ow];
                        let drow = &mut dst[iy as usize * w..][..w];
                        if s == 1 {
                            let (lo, hi) = valid_span(kx, p, ow, w);
                            for (d, &g) in drow[lo + kx - p..hi + kx - p].iter_mut().zip(&srow[lo..hi]) {
                                *d += g;
                            }
                            continue;
                        }
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward<T: Real>(conv: &Conv<T>, x: &Act<T>, keep: bool) -> (Act<T>, Option<Cache<T>>) {
    let (oh, ow) = conv.out_size(x.h, x.w).expect("input shape checked");
    let n = x.b * oh * ow;
    let kk = conv.fan_in();
    let col = if conv.kernel == 1 && conv.stride == 1 && conv.padding == 0 {
        // 1×1 conv: the activation already is the column matrix
        x.data.clone()
    } else {
        im2col(x, conv.kernel, conv.stride, conv.padding, oh, ow)
    };
    let mut y = vec![T::zero(); conv.out_channels * n];
    matmul(conv.out_channels, kk, n, &conv.weight, false, &col, false, T::zero(), &mut y);
    for (o, row) in y.chunks_mut(n).enumerate() {
        let bias = conv.bias[o];
        row.iter_mut().for_each(|v| *v += bias);
    }
    let out = Act {
        c: conv.out_channels,
        b: x.b,
        h: oh,
        w: ow,
        data: y,
    };
    let cache = keep.then(|| Cache::Conv {
        col,
        c: x.c,
        h: x.h,
        w: x.w,
    });
    (out, cache)
}

fn conv_backward<T: Real>(
    conv: &Conv<T>,
    grad: &Act<T>,
    col: &[T],
    (ic, h, w): (usize, usize, usize),
    want_params: bool,
    need_dx: bool,
) -> (Option<Act<T>>, Option<ConvGrad<T>>) {
    let n = grad.b * grad.h * grad.w;
    let kk = conv.fan_in();
    let params = want_params.then(|| {
        let mut dw = vec![T::zero(); conv.weight.len()];
        matmul(conv.out_channels, n, kk, &grad.data, false, col, true, T::zero(), &mut dw);
        let db = grad
            .data
            .chunks(n)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        ConvGrad { weight: dw, bias: db }
    });
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::zero(); kk * n];
        matmul(kk, conv.out_channels, n, &conv.weight, true, &grad.data, false, T::zero(), &mut dcol);
        let data = if conv.kernel == 1 && conv.stride == 1 && conv.padding == 0 {
            dcol
        } else {
            col2im(&dcol, ic, grad.b, h, w, conv.kernel, conv.stride, conv.padding, grad.h, grad.w)
        };
        Act {
            c: ic,
            b: grad.b,
            h,
            w,
            data,
        }
    });
    (dx, params)
}

fn relu_forward<T: Real>(mut x: Act<T>, keep: bool) -> (Act<T>, Option<Cache<T>>) {
    let zero = T::zero();
    x.data.iter_mut().for_each(|v| {
        if *v < zero {
            *v = zero;
        }
    });
    let cache = keep.then(|| Cache::Relu {
        mask: x.data.iter().map(|&v| v > zero).collect(),
    });
    (x, cache)
}

fn maxpool_forward<T: Real>(x: &Act<T>, size: usize, keep: bool) -> (Act<T>, Option<Cache<T>>) {
    let (oh, ow) = (x.h / size, x.w / size);
    let mut data = vec![T::zero(); x.c * x.b * oh * ow];
    let mut arg = if keep { vec![0u32; data.len()] } else { Vec::new() };
    let plane = x.h * x.w;
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * plane..][..plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (oy * size) * x.w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (oy * size + dy) * x.w + ox * size + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                let o = (cb * oh + oy) * ow + ox;
                data[o] = src[best];
                if keep {
                    arg[o] = best as u32;
                }
            }
        }
    }
    let out = Act {
        c: x.c,
        b: x.b,
        h: oh,
        w: ow,
        data,
    };
    let cache = keep.then_some(Cache::MaxPool {
        argmax: arg,
        c: x.c,
        h: x.h,
        w: x.w,
    });
    (out, cache)
}

fn maxpool_backward<T: Real>(grad: &Act<T>, arg: &[u32], (c, h, w): (usize, usize, usize)) -> Act<T> {
    let plane = h * w;
    let oplane = grad.h * grad.w;
    let mut data = vec![T::zero(); c * grad.b * plane];
    for cb in 0..c * grad.b {
        for o in 0..oplane {
            let i = cb * oplane + o;
            data[cb * plane + arg[i] as usize] += grad.data[i];
        }
    }
    Act {
        c,
        b: grad.b,
        h,
        w,
        data,
    }
}

fn gap_forward<T: Real>(x: &Act<T>) -> (Act<T>, Option<Cache<T>>) {
    let plane = x.h * x.w;
    let scale = T::from_f64(1.0 / plane as f64);
    let data = x
        .data
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * scale)
        .collect();
    (
        Act {
            c: x.c,
            b: x.b,
            h: 1,
            w: 1,
            data,
        },
        Some(Cache::Gap { h: x.h, w: x.w }),
    )
}

fn gap_backward<T: Real>(grad: &Act<T>, h: usize, w: usize) -> Act<T> {
    let plane = h * w;
    let scale = T::from_f64(1.0 / plane as f64);
    let mut data = Vec::with_capacity(grad.data.len() * plane);
    for &g in &grad.data {
        data.extend(std::iter::repeat(g * scale).take(plane));
    }
    Act {
        c: grad.c,
        b: grad.b,
        h,
        w,
        data,
    }
}

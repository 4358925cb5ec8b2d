//! Feature extraction. [`FeatureExtractor`] is the seam for plugging in any
//! network that honours the [`FeatureMap`] contract; [`ConvBackbone`] is the
//! built-in trainable stack of `conv3x3 -> ReLU -> 2x2 max-pool` blocks.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{prefixed, slice_of, slice_of_mut, Parameters};
use crate::{Error, Result};

/// Normalized image, laid out as `(channel, row, column)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Array3<f64>);

impl ImageTensor {
    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }
}

/// Spatial feature map indexed `[x, y, k]`: column, row, channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (w, h, _) = values.dim();
        if w < 2 || h < 2 {
            return Err(Error::shape("feature map", "at least 2x2 positions", format!("{w}x{h}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(FeatureMap(values.as_standard_layout().into_owned()))
    }

    pub fn width(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn positions(&self) -> usize {
        self.width() * self.height()
    }

    /// `(w*h, d)` view; position `p = x * h + y`.
    pub fn as_positions(&self) -> ArrayView2<'_, f64> {
        let (w, h, d) = self.0.dim();
        self.0
            .view()
            .into_shape_with_order((w * h, d))
            .expect("feature maps are stored in standard layout")
    }
}

pub trait FeatureExtractor {
    /// Total spatial downsampling factor.
    fn stride(&self) -> usize;

    fn channels(&self) -> usize;

    fn extract(&self, image: &ImageTensor) -> Result<FeatureMap>;

    fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let stride = self.stride();
        for size in [height, width] {
            if size == 0 || size % stride != 0 {
                return Err(Error::Stride { size, stride });
            }
        }
        Ok((width / stride, height / stride, self.channels()))
    }
}

pub fn extract_features<E: FeatureExtractor + ?Sized>(
    image: &ImageTensor,
    extractor: &E,
) -> Result<FeatureMap> {
    extractor.extract(image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of each block; the stride is `2^blocks`.
    pub channels: Vec<usize>,
    pub bias: bool,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 48, 64],
            bias: true,
        }
    }

    /// Stride-32 stand-in with the 2048-channel output of a deep residual network.
    pub fn full() -> Self {
        BackboneConfig {
            channels: vec![64, 128, 256, 512, 2048],
            bias: true,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn output_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// 3x3 convolution, padding 1, stride 1. Weight is `(out, in * 9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl ConvLayer {
    fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    fn out_channels(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone {
    pub layers: Vec<ConvLayer>,
}

impl ConvBackbone {
    /// He-uniform weights, zero biases.
    pub fn init(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let layers = config
            .channels
            .iter()
            .map(|&out_ch| {
                let fan_in = in_ch * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((out_ch, fan_in), || {
                    rng.random_range(-bound..bound)
                });
                in_ch = out_ch;
                ConvLayer {
                    weight,
                    bias: config.bias.then(|| Array1::zeros(out_ch)),
                }
            })
            .collect();
        ConvBackbone { layers }
    }

    pub fn zeros_like(&self) -> Self {
        ConvBackbone {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: l.bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
                })
                .collect(),
        }
    }

    pub fn forward_traced(&self, image: &ImageTensor) -> Result<(FeatureMap, BackboneTrace)> {
        self.run(image, true)
    }

    fn run(&self, image: &ImageTensor, keep_trace: bool) -> Result<(FeatureMap, BackboneTrace)> {
        let (c, h, w) = image.0.dim();
        if c != 3 {
            return Err(Error::shape("backbone input channels", 3, c));
        }
        self.output_shape(h, w)?;
        let mut x = image.0.as_standard_layout().into_owned();
        let mut blocks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (ci, hh, ww) = x.dim();
            if ci != layer.in_channels() {
                return Err(Error::shape("conv input channels", layer.in_channels(), ci));
            }
            let cols = im2col(x.view());
            let mut out = layer.weight.dot(&cols);
            if let Some(b) = &layer.bias {
                out += &b.view().insert_axis(Axis(1));
            }
            out.mapv_inplace(|v| v.max(0.0));
            let activated = out
                .into_shape_with_order((layer.out_channels(), hh, ww))
                .expect("contiguous conv output");
            let (pooled, argmax) = max_pool2(activated.view());
            if keep_trace {
                blocks.push(BlockTrace {
                    cols,
                    in_shape: (ci, hh, ww),
                    argmax,
                });
            }
            x = pooled;
        }
        // (d, h, w) -> (w, h, d)
        let fm = x.permuted_axes([2, 1, 0]).as_standard_layout().into_owned();
        Ok((FeatureMap::new(fm)?, BackboneTrace { blocks }))
    }

    /// Backpropagates `dL/dF` (indexed `[x, y, k]`), accumulating into `grads`.
    pub fn backward(&self, trace: &BackboneTrace, grad_map: &Array3<f64>, grads: &mut ConvBackbone) {
        let mut grad = grad_map
            .view()
            .permuted_axes([2, 1, 0])
            .as_standard_layout()
            .into_owned();
        for (l, (layer, block)) in self.layers.iter().zip(&trace.blocks).enumerate().rev() {
            let (_, hh, ww) = block.in_shape;
            let co = layer.out_channels();
            // unpool; ReLU mask is implied because argmax positions hold the
            // activated maxima and zero outputs pass zero gradient.
            let mut grad_act = vec![0.0; co * hh * ww];
            let gs = grad.as_slice().expect("standard layout");
            for (i, (&g, &src)) in gs.iter().zip(&block.argmax).enumerate() {
                if let Some(src) = src {
                    let ch = i / ((hh / 2) * (ww / 2));
                    grad_act[ch * hh * ww + src as usize] += g;
                }
            }
            let grad_out = Array2::from_shape_vec((co, hh * ww), grad_act).expect("shape");
            let g = &mut grads.layers[l];
            g.weight += &grad_out.dot(&block.cols.t());
            if let Some(b) = g.bias.as_mut() {
                *b += &grad_out.sum_axis(Axis(1));
            }
            if l > 0 {
                let grad_cols = layer.weight.t().dot(&grad_out);
                grad = col2im(grad_cols.view(), block.in_shape);
            }
        }
    }
}

impl FeatureExtractor for ConvBackbone {
    fn stride(&self) -> usize {
        1 << self.layers.len()
    }

    fn channels(&self) -> usize {
        self.layers.last().map_or(3, ConvLayer::out_channels)
    }

    fn extract(&self, image: &ImageTensor) -> Result<FeatureMap> {
        self.run(image, false).map(|(fm, _)| fm)
    }
}

impl Parameters for ConvBackbone {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut items = vec![("weight".to_owned(), slice_of(&layer.weight))];
            if let Some(b) = &layer.bias {
                items.push(("bias".to_owned(), slice_of(b)));
            }
            out.extend(prefixed(&format!("conv{i}"), items));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut items = vec![("weight".to_owned(), slice_of_mut(&mut layer.weight))];
            if let Some(b) = layer.bias.as_mut() {
                items.push(("bias".to_owned(), slice_of_mut(b)));
            }
            out.extend(prefixed(&format!("conv{i}"), items));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BackboneTrace {
    blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    /// For each pooled output, the flat `y * w + x` source of its maximum,
    /// or `None` when the whole window was clamped by the ReLU.
    argmax: Vec<Option<u32>>,
}

/// `(c, h, w)` -> `(c * 9, h * w)` patches for a padded 3x3 kernel.
fn im2col(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut cols = vec![0.0; c * 9 * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * h * w;
                let dst = &mut cols[row..row + h * w];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * 9, h * w), cols).expect("shape")
}

fn col2im(cols: ArrayView2<f64>, (c, h, w): (usize, usize, usize)) -> Array3<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * h * w;
                let s = &src[row..row + h * w];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let grow = &s[y * w..(y + 1) * w];
                    match kx {
                        0 => prow[..w - 1]
                            .iter_mut()
                            .zip(&grow[1..])
                            .for_each(|(p, g)| *p += g),
                        1 => prow.iter_mut().zip(grow).for_each(|(p, g)| *p += g),
                        _ => prow[1..]
                            .iter_mut()
                            .zip(&grow[..w - 1])
                            .for_each(|(p, g)| *p += g),
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("shape")
}

fn max_pool2(x: ArrayView3<f64>) -> (Array3<f64>, Vec<Option<u32>>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.slice(s![ch, .., ..]);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        let v = plane[[sy, sx]];
                        if v > best {
                            best = v;
                            at = sy * w + sx;
                        }
                    }
                }
                out[[ch, y, xx]] = best;
                argmax.push((best > 0.0).then_some(at as u32));
            }
        }
    }
    (out, argmax)
}

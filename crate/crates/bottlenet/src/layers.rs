//! Layer kinds, their shape algebra, and hand-written forward/backward passes.
//!
//! Accumulation order is fixed (row-major) everywhere so a seeded run is
//! bit-reproducible.

use crate::codec::{self, CodecParams};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Declarative layer description; shapes and parameters derive from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        kh: usize,
        kw: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        kh: usize,
        kw: usize,
        out_channels: usize,
        stride: usize,
        /// Target output dims; the layer is the adjoint of a "same"-padded
        /// strided conv from (out_h, out_w) down to its input dims.
        out_h: usize,
        out_w: usize,
    },
    Relu,
    Batchnorm,
    AvgpoolGlobal,
    Dense {
        out_features: usize,
    },
    SoftmaxXentHead,
    Codec {
        bits: u8,
        quality: u8,
        /// Disabled nodes pass through as identity (naive-mode training).
        enabled: bool,
    },
}

impl LayerSpec {
    /// Pure shape function; validates hyperparameters against the input.
    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            LayerSpec::Conv2d {
                kh,
                kw,
                out_channels,
                stride,
                padding,
            } => {
                if stride < 1 || kh < 1 || kw < 1 || out_channels < 1 {
                    return fail(format!("bad conv hyperparameters {:?}", self));
                }
                let (oh, ow) = match padding {
                    Padding::Same => (input.h.div_ceil(stride), input.w.div_ceil(stride)),
                    Padding::Valid => {
                        if input.h < kh || input.w < kw {
                            return fail(format!(
                                "valid conv filter {}x{} larger than input {}x{}",
                                kh, kw, input.h, input.w
                            ));
                        }
                        ((input.h - kh) / stride + 1, (input.w - kw) / stride + 1)
                    }
                };
                Ok(Shape::new(input.batch, oh, ow, out_channels))
            }
            LayerSpec::ConvTranspose2d {
                out_channels,
                stride,
                out_h,
                out_w,
                ..
            } => {
                if input.h != out_h.div_ceil(stride) || input.w != out_w.div_ceil(stride) {
                    return fail(format!(
                        "transposed conv input {}x{} inconsistent with target {}x{} at stride {}",
                        input.h, input.w, out_h, out_w, stride
                    ));
                }
                Ok(Shape::new(input.batch, out_h, out_w, out_channels))
            }
            LayerSpec::Relu
            | LayerSpec::Batchnorm
            | LayerSpec::SoftmaxXentHead
            | LayerSpec::Codec { .. } => Ok(input),
            LayerSpec::AvgpoolGlobal => Ok(Shape::new(input.batch, 1, 1, input.c)),
            LayerSpec::Dense { out_features } => {
                if out_features < 1 {
                    return fail("dense out_features must be >= 1".into());
                }
                Ok(Shape::new(input.batch, 1, 1, out_features))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime layers
// ---------------------------------------------------------------------------

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Layout [kh][kw][cin][cout].
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Layout [kh][kw][cin][cout].
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// Layout [in][out].
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CodecNode {
    pub params: CodecParams,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Relu,
    BatchNorm(BatchNorm),
    AvgPoolGlobal,
    Dense(Dense),
    SoftmaxXentHead,
    Codec(CodecNode),
}

/// Per-layer state recorded by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub enum LayerCache {
    None,
    /// The layer input.
    Input(Tensor),
    Bn(BnCache),
    /// Encoded byte sizes per batch item (codec node).
    CodecSizes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub input: Tensor,
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub training: bool,
}

/// Gradients for a layer's (primary, secondary) parameter pair:
/// (weight, bias) or (gamma, beta).
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn same_pad(in_dim: usize, k: usize, stride: usize) -> usize {
    let out = in_dim.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(in_dim);
    total / 2
}

impl Layer {
    /// Build an initialized layer from its spec. Parameterized kinds draw
    /// He-uniform weights from `rng`.
    pub fn build(spec: &LayerSpec, input: Shape, rng: &mut ChaCha8Rng) -> Result<Layer> {
        spec.out_shape(input)?;
        Ok(match *spec {
            LayerSpec::Conv2d {
                kh,
                kw,
                out_channels,
                stride,
                padding,
            } => {
                let fan_in = kh * kw * input.c;
                Layer::Conv2d(Conv2d {
                    kh,
                    kw,
                    cin: input.c,
                    cout: out_channels,
                    stride,
                    padding,
                    weight: he_uniform(rng, fan_in, kh * kw * input.c * out_channels),
                    bias: vec![0.0; out_channels],
                })
            }
            LayerSpec::ConvTranspose2d {
                kh,
                kw,
                out_channels,
                stride,
                out_h,
                out_w,
            } => {
                let fan_in = kh * kw * input.c;
                Layer::ConvTranspose2d(ConvTranspose2d {
                    kh,
                    kw,
                    cin: input.c,
                    cout: out_channels,
                    stride,
                    out_h,
                    out_w,
                    weight: he_uniform(rng, fan_in, kh * kw * input.c * out_channels),
                    bias: vec![0.0; out_channels],
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Batchnorm => Layer::BatchNorm(BatchNorm {
                c: input.c,
                gamma: vec![1.0; input.c],
                beta: vec![0.0; input.c],
                running_mean: vec![0.0; input.c],
                running_var: vec![1.0; input.c],
                momentum: 0.1,
                eps: 1e-5,
            }),
            LayerSpec::AvgpoolGlobal => Layer::AvgPoolGlobal,
            LayerSpec::Dense { out_features } => {
                let in_features = input.h * input.w * input.c;
                Layer::Dense(Dense {
                    in_features,
                    out_features,
                    weight: he_uniform(rng, in_features, in_features * out_features),
                    bias: vec![0.0; out_features],
                })
            }
            LayerSpec::SoftmaxXentHead => Layer::SoftmaxXentHead,
            LayerSpec::Codec {
                bits,
                quality,
                enabled,
            } => Layer::Codec(CodecNode {
                params: CodecParams::new(bits, quality)?,
                enabled,
            }),
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(l) => LayerSpec::Conv2d {
                kh: l.kh,
                kw: l.kw,
                out_channels: l.cout,
                stride: l.stride,
                padding: l.padding,
            },
            Layer::ConvTranspose2d(l) => LayerSpec::ConvTranspose2d {
                kh: l.kh,
                kw: l.kw,
                out_channels: l.cout,
                stride: l.stride,
                out_h: l.out_h,
                out_w: l.out_w,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::BatchNorm(_) => LayerSpec::Batchnorm,
            Layer::AvgPoolGlobal => LayerSpec::AvgpoolGlobal,
            Layer::Dense(l) => LayerSpec::Dense {
                out_features: l.out_features,
            },
            Layer::SoftmaxXentHead => LayerSpec::SoftmaxXentHead,
            Layer::Codec(l) => LayerSpec::Codec {
                bits: l.params.bits,
                quality: l.params.quality,
                enabled: l.enabled,
            },
        }
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        self.spec().out_shape(input)
    }

    /// Parameter vectors in serialization order (primary, secondary, extras).
    pub fn param_blobs(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => {
                vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var]
            }
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn param_blobs_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    /// Trainable (primary, secondary) parameter pair, if any. Running BN
    /// statistics are excluded; they update inside forward.
    pub fn trainable_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv2d(l) => Some((&mut l.weight, &mut l.bias)),
            Layer::ConvTranspose2d(l) => Some((&mut l.weight, &mut l.bias)),
            Layer::BatchNorm(l) => Some((&mut l.gamma, &mut l.beta)),
            Layer::Dense(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Conv2d(l) => {
                let out = l.forward(input)?;
                Ok((out, LayerCache::Input(input.clone())))
            }
            Layer::ConvTranspose2d(l) => {
                let out = l.forward(input)?;
                Ok((out, LayerCache::Input(input.clone())))
            }
            Layer::Relu => {
                let mut out = input.clone();
                for v in &mut out.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok((out, LayerCache::Input(input.clone())))
            }
            Layer::BatchNorm(l) => {
                let (out, cache) = l.forward(input, training)?;
                Ok((out, LayerCache::Bn(cache)))
            }
            Layer::AvgPoolGlobal => {
                let s = input.shape;
                let mut out = Tensor::zeros(Shape::new(s.batch, 1, 1, s.c));
                let area = (s.h * s.w) as f64;
                for b in 0..s.batch {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            for c in 0..s.c {
                                out.data[b * s.c + c] += input.at(b, y, x, c);
                            }
                        }
                    }
                }
                for v in &mut out.data {
                    *v /= area;
                }
                Ok((out, LayerCache::Input(input.clone())))
            }
            Layer::Dense(l) => {
                let out = l.forward(input)?;
                Ok((out, LayerCache::Input(input.clone())))
            }
            Layer::SoftmaxXentHead => Ok((input.clone(), LayerCache::None)),
            Layer::Codec(l) => {
                if !l.enabled {
                    return Ok((input.clone(), LayerCache::CodecSizes(vec![])));
                }
                let s = input.shape;
                let mut out = Tensor::zeros(s);
                let per = s.h * s.w * s.c;
                let mut sizes = Vec::with_capacity(s.batch);
                for b in 0..s.batch {
                    let item = Tensor::from_vec(
                        Shape::new(1, s.h, s.w, s.c),
                        input.data[b * per..(b + 1) * per].to_vec(),
                    )?;
                    let (dec, size) = codec::roundtrip_feature(&item, l.params)?;
                    out.data[b * per..(b + 1) * per].copy_from_slice(&dec.data);
                    sizes.push(size);
                }
                Ok((out, LayerCache::CodecSizes(sizes)))
            }
        }
    }

    /// Returns (grad wrt input, grads wrt trainable params).
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Option<ParamGrads>)> {
        match (self, cache) {
            (Layer::Conv2d(l), LayerCache::Input(input)) => {
                let (gin, grads) = l.backward(input, grad_out);
                Ok((gin, Some(grads)))
            }
            (Layer::ConvTranspose2d(l), LayerCache::Input(input)) => {
                let (gin, grads) = l.backward(input, grad_out);
                Ok((gin, Some(grads)))
            }
            (Layer::Relu, LayerCache::Input(input)) => {
                let mut gin = grad_out.clone();
                for (g, &v) in gin.data.iter_mut().zip(&input.data) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok((gin, None))
            }
            (Layer::BatchNorm(l), LayerCache::Bn(c)) => {
                let (gin, grads) = l.backward(c, grad_out);
                Ok((gin, Some(grads)))
            }
            (Layer::AvgPoolGlobal, LayerCache::Input(input)) => {
                let s = input.shape;
                let area = (s.h * s.w) as f64;
                let mut gin = Tensor::zeros(s);
                for b in 0..s.batch {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            for c in 0..s.c {
                                *gin.at_mut(b, y, x, c) = grad_out.data[b * s.c + c] / area;
                            }
                        }
                    }
                }
                Ok((gin, None))
            }
            (Layer::Dense(l), LayerCache::Input(input)) => {
                let (gin, grads) = l.backward(input, grad_out);
                Ok((gin, Some(grads)))
            }
            (Layer::SoftmaxXentHead, _) => Ok((grad_out.clone(), None)),
            // Straight-through: the incoming gradient passes bit-identically.
            (Layer::Codec(_), _) => Ok((grad_out.clone(), None)),
            _ => Err(Error::NoForwardRecorded),
        }
    }
}

impl Conv2d {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape;
        if s.c != self.cin {
            return Err(Error::InvalidConfig(format!(
                "conv expects {} input channels, got {}",
                self.cin, s.c
            )));
        }
        let out_shape = self.spec_shape(s)?;
        let (pad_y, pad_x) = match self.padding {
            Padding::Same => (
                same_pad(s.h, self.kh, self.stride),
                same_pad(s.w, self.kw, self.stride),
            ),
            Padding::Valid => (0, 0),
        };
        let mut out = Tensor::zeros(out_shape);
        for b in 0..s.batch {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let obase = out.idx(b, oy, ox, 0);
                    out.data[obase..obase + self.cout].copy_from_slice(&self.bias);
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let ibase = input.idx(b, iy as usize, ix as usize, 0);
                            let wbase = ((ky * self.kw + kx) * self.cin) * self.cout;
                            for ic in 0..self.cin {
                                let v = input.data[ibase + ic];
                                let wrow = wbase + ic * self.cout;
                                for oc in 0..self.cout {
                                    out.data[obase + oc] += v * self.weight[wrow + oc];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn spec_shape(&self, s: Shape) -> Result<Shape> {
        LayerSpec::Conv2d {
            kh: self.kh,
            kw: self.kw,
            out_channels: self.cout,
            stride: self.stride,
            padding: self.padding,
        }
        .out_shape(s)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (Tensor, ParamGrads) {
        let s = input.shape;
        let os = grad_out.shape;
        let (pad_y, pad_x) = match self.padding {
            Padding::Same => (
                same_pad(s.h, self.kh, self.stride),
                same_pad(s.w, self.kw, self.stride),
            ),
            Padding::Valid => (0, 0),
        };
        let mut gin = Tensor::zeros(s);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.cout];
        for b in 0..s.batch {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let obase = grad_out.idx(b, oy, ox, 0);
                    for oc in 0..self.cout {
                        gb[oc] += grad_out.data[obase + oc];
                    }
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let ibase = input.idx(b, iy as usize, ix as usize, 0);
                            let wbase = ((ky * self.kw + kx) * self.cin) * self.cout;
                            for ic in 0..self.cin {
                                let v = input.data[ibase + ic];
                                let wrow = wbase + ic * self.cout;
                                let mut acc = 0.0;
                                for oc in 0..self.cout {
                                    let g = grad_out.data[obase + oc];
                                    gw[wrow + oc] += v * g;
                                    acc += self.weight[wrow + oc] * g;
                                }
                                gin.data[ibase + ic] += acc;
                            }
                        }
                    }
                }
            }
        }
        (gin, ParamGrads { a: gw, b: gb })
    }
}

impl ConvTranspose2d {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape;
        if s.c != self.cin {
            return Err(Error::InvalidConfig(format!(
                "transposed conv expects {} input channels, got {}",
                self.cin, s.c
            )));
        }
        let out_shape = self
            .spec()
            .out_shape(s)?;
        let pad_y = same_pad(self.out_h, self.kh, self.stride);
        let pad_x = same_pad(self.out_w, self.kw, self.stride);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..s.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let obase = out.idx(b, oy, ox, 0);
                    out.data[obase..obase + self.cout].copy_from_slice(&self.bias);
                }
            }
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let ibase = input.idx(b, iy, ix, 0);
                    for ky in 0..self.kh {
                        let oy = (iy * self.stride + ky) as isize - pad_y as isize;
                        if oy < 0 || oy >= self.out_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ox = (ix * self.stride + kx) as isize - pad_x as isize;
                            if ox < 0 || ox >= self.out_w as isize {
                                continue;
                            }
                            let obase = out.idx(b, oy as usize, ox as usize, 0);
                            let wbase = ((ky * self.kw + kx) * self.cin) * self.cout;
                            for ic in 0..self.cin {
                                let v = input.data[ibase + ic];
                                let wrow = wbase + ic * self.cout;
                                for oc in 0..self.cout {
                                    out.data[obase + oc] += v * self.weight[wrow + oc];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::ConvTranspose2d {
            kh: self.kh,
            kw: self.kw,
            out_channels: self.cout,
            stride: self.stride,
            out_h: self.out_h,
            out_w: self.out_w,
        }
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (Tensor, ParamGrads) {
        let s = input.shape;
        let pad_y = same_pad(self.out_h, self.kh, self.stride);
        let pad_x = same_pad(self.out_w, self.kw, self.stride);
        let mut gin = Tensor::zeros(s);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.cout];
        for b in 0..s.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let obase = grad_out.idx(b, oy, ox, 0);
                    for oc in 0..self.cout {
                        gb[oc] += grad_out.data[obase + oc];
                    }
                }
            }
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let ibase = input.idx(b, iy, ix, 0);
                    for ky in 0..self.kh {
                        let oy = (iy * self.stride + ky) as isize - pad_y as isize;
                        if oy < 0 || oy >= self.out_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ox = (ix * self.stride + kx) as isize - pad_x as isize;
                            if ox < 0 || ox >= self.out_w as isize {
                                continue;
                            }
                            let obase = grad_out.idx(b, oy as usize, ox as usize, 0);
                            let wbase = ((ky * self.kw + kx) * self.cin) * self.cout;
                            for ic in 0..self.cin {
                                let v = input.data[ibase + ic];
                                let wrow = wbase + ic * self.cout;
                                let mut acc = 0.0;
                                for oc in 0..self.cout {
                                    let g = grad_out.data[obase + oc];
                                    gw[wrow + oc] += v * g;
                                    acc += self.weight[wrow + oc] * g;
                                }
                                gin.data[ibase + ic] += acc;
                            }
                        }
                    }
                }
            }
        }
        (gin, ParamGrads { a: gw, b: gb })
    }
}

impl BatchNorm {
    fn forward(&mut self, input: &Tensor, training: bool) -> Result<(Tensor, BnCache)> {
        let s = input.shape;
        if s.c != self.c {
            return Err(Error::InvalidConfig(format!(
                "batchnorm expects {} channels, got {}",
                self.c, s.c
            )));
        }
        let m = (s.batch * s.h * s.w) as f64;
        let (mean, var) = if training {
            let mut mean = vec![0.0; self.c];
            let mut var = vec![0.0; self.c];
            for (i, &v) in input.data.iter().enumerate() {
                mean[i % self.c] += v;
            }
            for mu in &mut mean {
                *mu /= m;
            }
            for (i, &v) in input.data.iter().enumerate() {
                let d = v - mean[i % self.c];
                var[i % self.c] += d * d;
            }
            for va in &mut var {
                *va /= m;
            }
            for c in 0..self.c {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] =
                    (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        for (i, &v) in input.data.iter().enumerate() {
            let c = i % self.c;
            let x = (v - mean[c]) / (var[c] + self.eps).sqrt();
            xhat.data[i] = x;
            out.data[i] = self.gamma[c] * x + self.beta[c];
        }
        Ok((
            out,
            BnCache {
                input: input.clone(),
                xhat,
                mean,
                var,
                training,
            },
        ))
    }

    fn backward(&self, cache: &BnCache, grad_out: &Tensor) -> (Tensor, ParamGrads) {
        let s = cache.input.shape;
        let m = (s.batch * s.h * s.w) as f64;
        let mut dgamma = vec![0.0; self.c];
        let mut dbeta = vec![0.0; self.c];
        for (i, &g) in grad_out.data.iter().enumerate() {
            let c = i % self.c;
            dgamma[c] += g * cache.xhat.data[i];
            dbeta[c] += g;
        }
        let mut gin = Tensor::zeros(s);
        if cache.training {
            // dx = gamma/std * (g - mean(g) - xhat * mean(g*xhat))
            for (i, &g) in grad_out.data.iter().enumerate() {
                let c = i % self.c;
                let std = (cache.var[c] + self.eps).sqrt();
                gin.data[i] = self.gamma[c] / std
                    * (g - dbeta[c] / m - cache.xhat.data[i] * dgamma[c] / m);
            }
        } else {
            for (i, &g) in grad_out.data.iter().enumerate() {
                let c = i % self.c;
                gin.data[i] = self.gamma[c] * g / (cache.var[c] + self.eps).sqrt();
            }
        }
        (gin, ParamGrads { a: dgamma, b: dbeta })
    }
}

impl Dense {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape;
        let f = s.h * s.w * s.c;
        if f != self.in_features {
            return Err(Error::InvalidConfig(format!(
                "dense expects {} input features, got {}",
                self.in_features, f
            )));
        }
        let mut out = Tensor::zeros(Shape::new(s.batch, 1, 1, self.out_features));
        for b in 0..s.batch {
            let ibase = b * f;
            let obase = b * self.out_features;
            out.data[obase..obase + self.out_features].copy_from_slice(&self.bias);
            for i in 0..f {
                let v = input.data[ibase + i];
                let wrow = i * self.out_features;
                for o in 0..self.out_features {
                    out.data[obase + o] += v * self.weight[wrow + o];
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (Tensor, ParamGrads) {
        let s = input.shape;
        let f = self.in_features;
        let mut gin = Tensor::zeros(s);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_features];
        for b in 0..s.batch {
            let ibase = b * f;
            let obase = b * self.out_features;
            for o in 0..self.out_features {
                gb[o] += grad_out.data[obase + o];
            }
            for i in 0..f {
                let v = input.data[ibase + i];
                let wrow = i * self.out_features;
                let mut acc = 0.0;
                for o in 0..self.out_features {
                    let g = grad_out.data[obase + o];
                    gw[wrow + o] += v * g;
                    acc += self.weight[wrow + o] * g;
                }
                gin.data[ibase + i] = acc;
            }
        }
        (gin, ParamGrads { a: gw, b: gb })
    }
}

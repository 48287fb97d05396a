//! Sequential network graph: shape-checked forward with a recorded trace,
//! reverse-mode backward, and the SGD update.

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerCache, LayerSpec, ParamGrads};
use crate::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Declarative graph description: input dims plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub layers: Vec<LayerSpec>,
    /// Layer indices after which the network may be cut, strictly increasing.
    pub partition_points: Vec<usize>,
}

impl GraphSpec {
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<usize> = None;
        for &p in &self.partition_points {
            if p >= self.layers.len() {
                return Err(Error::InvalidConfig(format!(
                    "partition point {} out of range ({} layers)",
                    p,
                    self.layers.len()
                )));
            }
            if let Some(q) = prev {
                if p <= q {
                    return Err(Error::InvalidConfig(
                        "partition points must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(p);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub layers: Vec<Layer>,
    pub input_shape: Shape,
    pub partition_points: Vec<usize>,
}

/// Intermediates recorded by a forward pass for the matching backward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub caches: Vec<LayerCache>,
    pub output: Tensor,
    /// Encoded byte sizes reported by codec nodes, per batch item.
    pub codec_sizes: Vec<usize>,
}

/// Per-layer parameter gradients; `None` for parameterless layers.
pub type Gradients = Vec<Option<ParamGrads>>;

impl NetworkGraph {
    /// Build and initialize a graph from its spec with seeded He-uniform
    /// weights. Same seed, same spec, bit-identical parameters.
    pub fn build(spec: &GraphSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = Shape::new(1, spec.input_h, spec.input_w, spec.input_c);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let layer = Layer::build(ls, shape, &mut rng)?;
            shape = layer.out_shape(shape)?;
            layers.push(layer);
        }
        Ok(NetworkGraph {
            layers,
            input_shape: Shape::new(1, spec.input_h, spec.input_w, spec.input_c),
            partition_points: spec.partition_points.clone(),
        })
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            input_h: self.input_shape.h,
            input_w: self.input_shape.w,
            input_c: self.input_shape.c,
            layers: self.layers.iter().map(|l| l.spec()).collect(),
            partition_points: self.partition_points.clone(),
        }
    }

    /// Shape after layer `upto` (inclusive), for a given batch size.
    pub fn shape_after(&self, upto: usize, batch: usize) -> Result<Shape> {
        let mut shape = Shape::new(
            batch,
            self.input_shape.h,
            self.input_shape.w,
            self.input_shape.c,
        );
        for layer in &self.layers[..=upto] {
            shape = layer.out_shape(shape)?;
        }
        Ok(shape)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape;
        if (s.h, s.w, s.c) != self.input_shape.hwc() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: format!("(_, {}, {}, {})", self.input_shape.h, self.input_shape.w, self.input_shape.c),
                actual: s.to_string(),
            });
        }
        Ok(())
    }

    /// Forward through layers [from, upto] (inclusive bounds), recording
    /// intermediates. `upto = None` runs to the final layer.
    pub fn forward_trace(
        &mut self,
        input: &Tensor,
        upto: Option<usize>,
        training: bool,
    ) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let last = upto.unwrap_or(self.layers.len().saturating_sub(1));
        if last >= self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "layer index {} out of range ({} layers)",
                last,
                self.layers.len()
            )));
        }
        let mut caches = Vec::with_capacity(last + 1);
        let mut codec_sizes = Vec::new();
        let mut cur = input.clone();
        for (i, layer) in self.layers[..=last].iter_mut().enumerate() {
            let expected = layer.out_shape(cur.shape).map_err(|e| Error::ShapeMismatch {
                layer: i,
                expected: e.to_string(),
                actual: cur.shape.to_string(),
            })?;
            let (out, cache) = layer.forward(&cur, training)?;
            debug_assert_eq!(out.shape, expected);
            out.check_finite(&format!("output of layer {i}"))?;
            if let LayerCache::CodecSizes(sizes) = &cache {
                codec_sizes.extend_from_slice(sizes);
            }
            caches.push(cache);
            cur = out;
        }
        Ok(ForwardTrace {
            caches,
            output: cur,
            codec_sizes,
        })
    }

    /// Inference-mode forward; returns the activation after layer `upto`
    /// (or final logits).
    pub fn forward(&mut self, input: &Tensor, upto: Option<usize>) -> Result<Tensor> {
        Ok(self.forward_trace(input, upto, false)?.output)
    }

    /// Forward through layers `from..` starting from an intermediate
    /// activation (cloud-side slice execution).
    pub fn forward_from(&mut self, activation: &Tensor, from: usize) -> Result<Tensor> {
        let mut cur = activation.clone();
        for (i, layer) in self.layers[from..].iter_mut().enumerate() {
            let (out, _) = layer.forward(&cur, false).map_err(|e| match e {
                Error::InvalidConfig(msg) => Error::ShapeMismatch {
                    layer: from + i,
                    expected: msg,
                    actual: cur.shape.to_string(),
                },
                other => other,
            })?;
            cur = out;
        }
        Ok(cur)
    }

    /// Reverse-mode pass over a recorded trace. Returns per-layer parameter
    /// gradients aligned with `self.layers` (prefix covered by the trace).
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<Gradients> {
        if trace.caches.is_empty() {
            return Err(Error::NoForwardRecorded);
        }
        let n = trace.caches.len();
        let mut grads: Gradients = vec![None; n];
        let mut g = loss_grad.clone();
        for i in (0..n).rev() {
            let (gin, pg) = self.layers[i].backward(&trace.caches[i], &g)?;
            gin.check_finite(&format!("gradient into layer {i}"))?;
            grads[i] = pg;
            g = gin;
        }
        Ok(grads)
    }

    /// SGD update `p <- p - lr * g`. A non-finite gradient aborts the whole
    /// step before any parameter changes.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(pg) = g {
                if !pg.a.iter().chain(&pg.b).all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of layer {i}")));
                }
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            if let (Some((a, b)), Some(pg)) = (layer.trainable_mut(), g.as_ref()) {
                debug_assert_eq!(a.len(), pg.a.len());
                debug_assert_eq!(b.len(), pg.b.len());
                for (p, &d) in a.iter_mut().zip(&pg.a) {
                    *p -= lr * d;
                }
                for (p, &d) in b.iter_mut().zip(&pg.b) {
                    *p -= lr * d;
                }
            }
        }
        Ok(())
    }

    /// Switch every codec node on or off (aware vs. naive training).
    pub fn set_codec_enabled(&mut self, enabled: bool) {
        for layer in &mut self.layers {
            if let Layer::Codec(c) = layer {
                c.enabled = enabled;
            }
        }
    }

    /// Index of the (single) codec node, if a bottleneck has been inserted.
    pub fn codec_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Codec(_)))
    }
}

/// Softmax cross-entropy over logits (b, 1, 1, k). Returns mean loss and the
/// gradient wrt logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape;
    let k = s.c;
    if labels.len() != s.batch {
        return Err(Error::InvalidConfig(format!(
            "{} labels for batch of {}",
            labels.len(),
            s.batch
        )));
    }
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidConfig(format!(
                "label {} out of range for {} classes",
                label, k
            )));
        }
        let row = &logits.data[b * k..(b + 1) * k];
        let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - maxv).exp();
        }
        loss -= (row[label] - maxv) - denom.ln();
        for j in 0..k {
            let p = (row[j] - maxv).exp() / denom;
            grad.data[b * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / s.batch as f64;
        }
    }
    Ok((loss / s.batch as f64, grad))
}

/// Predicted class per batch item (argmax of logits; ties to the lower index).
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape.c;
    (0..logits.shape.batch)
        .map(|b| {
            let row = &logits.data[b * k..(b + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Padding;

    fn tiny_spec() -> GraphSpec {
        GraphSpec {
            input_h: 4,
            input_w: 4,
            input_c: 1,
            layers: vec![
                LayerSpec::Conv2d {
                    kh: 3,
                    kw: 3,
                    out_channels: 2,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::AvgpoolGlobal,
                LayerSpec::Dense { out_features: 2 },
                LayerSpec::SoftmaxXentHead,
            ],
            partition_points: vec![1],
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = NetworkGraph::build(&tiny_spec(), 9).unwrap();
        let b = NetworkGraph::build(&tiny_spec(), 9).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (pa, pb) in la.param_blobs().iter().zip(lb.param_blobs()) {
                assert_eq!(
                    pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut g = NetworkGraph::build(&tiny_spec(), 0).unwrap();
        let bad = Tensor::zeros(Shape::new(1, 3, 4, 1));
        match g.forward(&bad, None) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected shape mismatch, got {:?}", other.map(|t| t.shape)),
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let g = NetworkGraph::build(&tiny_spec(), 0).unwrap();
        let trace = ForwardTrace {
            caches: vec![],
            output: Tensor::zeros(Shape::new(1, 1, 1, 2)),
            codec_sizes: vec![],
        };
        assert!(matches!(
            g.backward(&trace, &Tensor::zeros(Shape::new(1, 1, 1, 2))),
            Err(Error::NoForwardRecorded)
        ));
    }

    #[test]
    fn sgd_step_basic_and_zero_grad() {
        let mut g = NetworkGraph::build(&tiny_spec(), 0).unwrap();
        let before = g.layers[3].param_blobs()[0].clone();
        let mut grads: Gradients = vec![None; g.layers.len()];
        grads[3] = Some(ParamGrads {
            a: vec![0.5; before.len()],
            b: vec![0.0; 2],
        });
        g.sgd_step(&grads, 0.1).unwrap();
        let after = g.layers[3].param_blobs()[0].clone();
        for (b, a) in before.iter().zip(&after) {
            assert!((b - 0.05 - a).abs() < 1e-15);
        }
        // zero gradient leaves parameters unchanged
        grads[3] = Some(ParamGrads {
            a: vec![0.0; before.len()],
            b: vec![0.0; 2],
        });
        let snapshot = g.layers[3].param_blobs()[0].clone();
        g.sgd_step(&grads, 0.1).unwrap();
        assert_eq!(snapshot, *g.layers[3].param_blobs()[0]);
    }

    #[test]
    fn two_steps_sum_like_one() {
        // p - lr*g1 - lr*g2 == p - lr*(g1+g2)
        let mut g1 = NetworkGraph::build(&tiny_spec(), 4).unwrap();
        let mut g2 = NetworkGraph::build(&tiny_spec(), 4).unwrap();
        let n = g1.layers.len();
        let wlen = g1.layers[3].param_blobs()[0].len();
        let mk = |scale: f64| {
            let mut grads: Gradients = vec![None; n];
            grads[3] = Some(ParamGrads {
                a: vec![scale; wlen],
                b: vec![scale; 2],
            });
            grads
        };
        g1.sgd_step(&mk(0.25), 0.1).unwrap();
        g1.sgd_step(&mk(0.75), 0.1).unwrap();
        g2.sgd_step(&mk(1.0), 0.1).unwrap();
        for (a, b) in g1.layers[3].param_blobs()[0]
            .iter()
            .zip(g2.layers[3].param_blobs()[0])
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut g = NetworkGraph::build(&tiny_spec(), 0).unwrap();
        let before = g.layers[3].param_blobs()[0].clone();
        let mut grads: Gradients = vec![None; g.layers.len()];
        let wlen = before.len();
        grads[3] = Some(ParamGrads {
            a: vec![f64::NAN; wlen],
            b: vec![0.0; 2],
        });
        assert!(g.sgd_step(&grads, 0.1).is_err());
        assert_eq!(before, *g.layers[3].param_blobs()[0]);
    }

    #[test]
    fn softmax_xent_gradient_sums_to_zero() {
        let logits =
            Tensor::from_vec(Shape::new(2, 1, 1, 3), vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0]).unwrap();
        let (loss, grad) = softmax_xent(&logits, &[1, 2]).unwrap();
        assert!(loss > 0.0);
        for b in 0..2 {
            let s: f64 = grad.data[b * 3..(b + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }
}

//! The insertable bottleneck unit: learnable channel/spatial reduction, the
//! straight-through codec node, and mirrored restoration, plus aware/naive
//! training of the resulting graph.

use crate::codec::CodecParams;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, GraphSpec};
use crate::layers::{Layer, LayerSpec, Padding};
use crate::tensor::Shape;
use crate::train::{self, TrainConfig, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of layers a bottleneck insertion adds to the graph.
pub const UNIT_LAYERS: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    /// Index into the graph's partition_points list.
    pub location: usize,
    /// Spatial reduction factor (stride of the reduction conv).
    pub spatial_factor: usize,
    /// Reduced channel count c'.
    pub channels: usize,
    /// Reduction/restoration filter dims; default s + 1.
    pub filter_h: usize,
    pub filter_w: usize,
    /// Quantizer bits n.
    pub bits: u8,
    /// Codec quality q.
    pub quality: u8,
}

impl BottleneckConfig {
    pub fn new(location: usize, spatial_factor: usize, channels: usize, quality: u8) -> Self {
        BottleneckConfig {
            location,
            spatial_factor,
            channels,
            filter_h: spatial_factor + 1,
            filter_w: spatial_factor + 1,
            bits: 8,
            quality,
        }
    }

    fn validate(&self, feature: Shape) -> Result<()> {
        if self.spatial_factor < 1 {
            return Err(Error::InvalidConfig("spatial_factor must be >= 1".into()));
        }
        if self.channels < 1 || self.channels > feature.c {
            return Err(Error::InvalidConfig(format!(
                "reduced channels {} violates 1 <= c' <= c (c = {})",
                self.channels, feature.c
            )));
        }
        if self.spatial_factor > 1
            && (self.filter_w <= self.spatial_factor || self.filter_h <= self.spatial_factor)
        {
            return Err(Error::InvalidConfig(format!(
                "filter {}x{} must exceed stride {} (w_f > s, h_f > s)",
                self.filter_h, self.filter_w, self.spatial_factor
            )));
        }
        CodecParams::new(self.bits, self.quality)?;
        Ok(())
    }

    /// Shape of the transmitted tensor for a feature of the given dims.
    pub fn transmitted_shape(&self, feature: Shape) -> Shape {
        Shape::new(
            feature.batch,
            feature.h.div_ceil(self.spatial_factor),
            feature.w.div_ceil(self.spatial_factor),
            self.channels,
        )
    }

    /// The 13 layer specs of the unit for a feature of the given dims:
    /// channel-reduce, spatial-reduce, codec, spatial-restore, channel-restore,
    /// each conv followed by norm + ReLU.
    pub fn unit_specs(&self, feature: Shape) -> Vec<LayerSpec> {
        let s = self.spatial_factor;
        vec![
            LayerSpec::Conv2d {
                kh: 1,
                kw: 1,
                out_channels: self.channels,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                kh: self.filter_h,
                kw: self.filter_w,
                out_channels: self.channels,
                stride: s,
                padding: Padding::Same,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Codec {
                bits: self.bits,
                quality: self.quality,
                enabled: true,
            },
            LayerSpec::ConvTranspose2d {
                kh: self.filter_h,
                kw: self.filter_w,
                out_channels: self.channels,
                stride: s,
                out_h: feature.h,
                out_w: feature.w,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                kh: 1,
                kw: 1,
                out_channels: feature.c,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
        ]
    }
}

/// Insert a bottleneck unit after the configured partition point. Existing
/// layer parameters are kept; the new unit's are freshly He-initialized from
/// `seed`. The returned graph is shape-preserving end to end.
pub fn insert_bottleneck(
    graph: &NetworkGraph,
    cfg: &BottleneckConfig,
    seed: u64,
) -> Result<NetworkGraph> {
    let layer_idx = *graph
        .partition_points
        .get(cfg.location)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "partition-point index {} out of range ({} points)",
                cfg.location,
                graph.partition_points.len()
            ))
        })?;
    let feature = graph.shape_after(layer_idx, 1)?;
    cfg.validate(feature)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer> = graph.layers[..=layer_idx].to_vec();
    let mut shape = feature;
    for spec in cfg.unit_specs(feature) {
        let layer = Layer::build(&spec, shape, &mut rng)?;
        shape = layer.out_shape(shape)?;
        layers.push(layer);
    }
    debug_assert_eq!(shape.hwc(), feature.hwc());
    layers.extend_from_slice(&graph.layers[layer_idx + 1..]);

    let partition_points = graph
        .partition_points
        .iter()
        .map(|&p| if p > layer_idx { p + UNIT_LAYERS } else { p })
        .collect();
    Ok(NetworkGraph {
        layers,
        input_shape: graph.input_shape,
        partition_points,
    })
}

/// Spec-level insertion, for building an untrained bottlenecked graph.
pub fn insert_into_spec(spec: &GraphSpec, cfg: &BottleneckConfig, graph_seed: u64) -> Result<GraphSpec> {
    let base = NetworkGraph::build(spec, graph_seed)?;
    Ok(insert_bottleneck(&base, cfg, graph_seed)?.spec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Codec in-graph during training (straight-through gradients).
    Aware,
    /// Train without the codec, insert it for evaluation only.
    Naive,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aware" => Ok(TrainMode::Aware),
            "naive" => Ok(TrainMode::Naive),
            other => Err(Error::InvalidConfig(format!("unknown train mode {other}"))),
        }
    }
}

/// Train a bottlenecked model. Returns the graph with the codec enabled and
/// the held-out accuracy measured with the codec active.
pub fn train_bottleneck_model(
    base: &NetworkGraph,
    cfg: &BottleneckConfig,
    dataset: &Dataset,
    mode: TrainMode,
    train_cfg: &TrainConfig,
) -> Result<(NetworkGraph, TrainReport)> {
    let mut graph = insert_bottleneck(base, cfg, train_cfg.seed)?;
    graph.set_codec_enabled(matches!(mode, TrainMode::Aware));
    let mut report = train::train(&mut graph, dataset, train_cfg)?;
    if matches!(mode, TrainMode::Naive) {
        graph.set_codec_enabled(true);
        let (_, holdout) = train::split_indices(dataset.len(), train_cfg.holdout_frac, train_cfg.seed);
        report.accuracy = train::evaluate(&mut graph, dataset, &holdout, train_cfg.crop)?;
    }
    Ok((graph, report))
}

/// Median encoded feature size in bytes over a calibration prefix of the
/// dataset (eval mode, codec enabled).
pub fn measure_feature_size(
    graph: &mut NetworkGraph,
    dataset: &Dataset,
    calibration: usize,
) -> Result<usize> {
    let n = calibration.min(dataset.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let was_enabled = graph.codec_index().is_some();
    if !was_enabled {
        return Err(Error::InvalidConfig("graph has no codec node".into()));
    }
    graph.set_codec_enabled(true);
    let mut sizes = Vec::with_capacity(n);
    for i in 0..n {
        let (batch, _) = dataset.batch(&[i])?;
        let trace = graph.forward_trace(&batch, None, false)?;
        sizes.extend(trace.codec_sizes);
    }
    sizes.sort_unstable();
    Ok(sizes[sizes.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn base_graph(h: usize, w: usize, c: usize) -> NetworkGraph {
        let spec = GraphSpec {
            input_h: h,
            input_w: w,
            input_c: 4,
            layers: vec![
                LayerSpec::Conv2d {
                    kh: 1,
                    kw: 1,
                    out_channels: c,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::AvgpoolGlobal,
                LayerSpec::Dense { out_features: 3 },
                LayerSpec::SoftmaxXentHead,
            ],
            partition_points: vec![1],
        };
        NetworkGraph::build(&spec, 2).unwrap()
    }

    #[test]
    fn paper_shape_case_56_56_256() {
        let base = base_graph(56, 56, 256);
        let cfg = BottleneckConfig::new(0, 2, 1, 20);
        let feature = base.shape_after(1, 1).unwrap();
        let tx = cfg.transmitted_shape(feature);
        assert_eq!((tx.h, tx.w, tx.c), (28, 28, 1));
    }

    #[test]
    fn derived_shape_case_8_8_32() {
        let base = base_graph(8, 8, 32);
        let cfg = BottleneckConfig::new(0, 2, 5, 20);
        let bn = insert_bottleneck(&base, &cfg, 0).unwrap();
        let codec_idx = bn.codec_index().unwrap();
        let tx = bn.shape_after(codec_idx, 1).unwrap();
        assert_eq!((tx.h, tx.w, tx.c), (4, 4, 5));
    }

    #[test]
    fn insertion_preserves_output_shape() {
        let mut base = base_graph(9, 9, 6); // odd dims exercise the crop path
        let cfg = BottleneckConfig::new(0, 2, 2, 50);
        let mut bn = insert_bottleneck(&base, &cfg, 7).unwrap();
        let input = Tensor::filled(Shape::new(2, 9, 9, 4), 0.3);
        let a = base.forward(&input, None).unwrap();
        let b = bn.forward(&input, None).unwrap();
        assert_eq!(a.shape, b.shape);
    }

    #[test]
    fn invalid_configs_rejected_by_name() {
        let base = base_graph(8, 8, 4);
        // c' > c
        let err = insert_bottleneck(&base, &BottleneckConfig::new(0, 1, 5, 20), 0).unwrap_err();
        assert!(err.to_string().contains("c'"), "{err}");
        // w_f <= s
        let mut cfg = BottleneckConfig::new(0, 2, 2, 20);
        cfg.filter_h = 2;
        cfg.filter_w = 2;
        let err = insert_bottleneck(&base, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("stride"), "{err}");
    }

    #[test]
    fn straight_through_backward_matches_identity_replacement() {
        // Node-level equivalence: both graphs get the same recorded downstream
        // gradient at the node; outgoing gradients must agree bit-exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let enabled = Layer::Codec(crate::layers::CodecNode {
            params: CodecParams::default(),
            enabled: true,
        });
        let identity = Layer::Codec(crate::layers::CodecNode {
            params: CodecParams::default(),
            enabled: false,
        });
        for _ in 0..20 {
            let g = Tensor::from_vec(
                Shape::new(1, 3, 3, 2),
                (0..18).map(|_| rng.gen_range(-10.0..10.0)).collect(),
            )
            .unwrap();
            let (a, _) = enabled.backward(&crate::layers::LayerCache::None, &g).unwrap();
            let (b, _) = identity.backward(&crate::layers::LayerCache::None, &g).unwrap();
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&g));
            assert_eq!(bits(&b), bits(&g));
        }
    }

    #[test]
    fn identity_configuration_near_lossless() {
        // s=1, c'=c, convs set to identity, q=100: output tracks the
        // baseline within codec quantization error.
        let mut base = base_graph(8, 8, 3);
        let mut cfg = BottleneckConfig::new(0, 1, 3, 100);
        cfg.filter_h = 1;
        cfg.filter_w = 1;
        let mut bn = insert_bottleneck(&base, &cfg, 0).unwrap();
        // overwrite each inserted conv with an identity map and widen BN eps
        // influence out by zeroing it
        for layer in &mut bn.layers {
            match layer {
                Layer::Conv2d(c) if c.kh == 1 && c.kw == 1 && c.cin == c.cout && c.cin == 3 => {
                    for v in c.weight.iter_mut() {
                        *v = 0.0;
                    }
                    for i in 0..c.cin {
                        c.weight[i * c.cout + i] = 1.0;
                    }
                    c.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                Layer::ConvTranspose2d(c) => {
                    for v in c.weight.iter_mut() {
                        *v = 0.0;
                    }
                    for i in 0..c.cin {
                        c.weight[i * c.cout + i] = 1.0;
                    }
                    c.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                Layer::BatchNorm(b) => b.eps = 0.0,
                _ => {}
            }
        }
        let input = Tensor::from_vec(
            Shape::new(1, 8, 8, 4),
            (0..256).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
        .unwrap();
        let a = base.forward(&input, None).unwrap();
        let b = bn.forward(&input, None).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 0.05, "{x} vs {y}");
        }
    }

    #[test]
    fn measure_feature_size_reports_median() {
        let base = base_graph(8, 8, 4);
        let cfg = BottleneckConfig::new(0, 2, 2, 20);
        let mut bn = insert_bottleneck(&base, &cfg, 1).unwrap();
        let ds = crate::data::generate(crate::data::SyntheticKind::Blobs, 8, 8, 8, 4, 2, 1).unwrap();
        let d = measure_feature_size(&mut bn, &ds, 8).unwrap();
        assert!(d > 0);
    }
}

//! Architecture specification and named parameter sets.
//!
//! A [`ModelSpec`] is an ordered layer list interpreted against an input
//! shape; a [`ParamSet`] is the ordered, named collection of parameter
//! tensors that instantiates it. BatchNorm is a flag on its host conv/dense
//! layer: the γ/β entries carry `is_bn = true` and share the host's
//! `layer_index`, which is what layer-wise stepsizes and BN freezing key on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Zero-padding policy for convolutions (stride is always 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Padding {
    /// Output spatial size equals input size.
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// One layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LayerKind {
    Conv2d { out_channels: usize, kernel: usize, padding: Padding },
    Dense { out_features: usize },
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Batch-normalize the layer output before any activation.
    /// Only valid on `Conv2d` and `Dense`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub has_bn: bool,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, padding: Padding, has_bn: bool) -> Self {
        LayerSpec { kind: LayerKind::Conv2d { out_channels, kernel, padding }, has_bn }
    }

    pub fn dense(out_features: usize, has_bn: bool) -> Self {
        LayerSpec { kind: LayerKind::Dense { out_features }, has_bn }
    }

    pub fn relu() -> Self {
        LayerSpec { kind: LayerKind::Relu, has_bn: false }
    }

    pub fn max_pool2() -> Self {
        LayerSpec { kind: LayerKind::MaxPool2, has_bn: false }
    }

    pub fn flatten() -> Self {
        LayerSpec { kind: LayerKind::Flatten, has_bn: false }
    }
}

/// Activation shape while tracing the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Image { channels: usize, height: usize, width: usize },
    Flat { features: usize },
}

/// Architecture description: layer list plus input shape and class count.
///
/// The final layer must be a `Dense` producing `n_outputs` logits; the
/// softmax cross-entropy head is applied by `forward_loss`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    /// Input image shape as `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub n_outputs: usize,
}

impl ModelSpec {
    /// Two conv blocks (BN + ReLU + 2x2 max-pool) and a linear head.
    /// The default desk-scale analog of a few-shot conv net.
    pub fn conv_default(n_outputs: usize) -> Self {
        ModelSpec {
            input_shape: (1, 16, 16),
            layers: vec![
                LayerSpec::conv(8, 3, Padding::Same, true),
                LayerSpec::relu(),
                LayerSpec::max_pool2(),
                LayerSpec::conv(8, 3, Padding::Same, true),
                LayerSpec::relu(),
                LayerSpec::max_pool2(),
                LayerSpec::flatten(),
                LayerSpec::dense(n_outputs, false),
            ],
            n_outputs,
        }
    }

    /// Flatten + batch-normalized hidden dense layer + linear head.
    pub fn mlp_default(n_outputs: usize) -> Self {
        ModelSpec {
            input_shape: (1, 16, 16),
            layers: vec![
                LayerSpec::flatten(),
                LayerSpec::dense(64, true),
                LayerSpec::relu(),
                LayerSpec::dense(n_outputs, false),
            ],
            n_outputs,
        }
    }

    /// Check that consecutive layer shapes compose and return the activation
    /// shape after every layer (index 0 is the input).
    pub fn trace_shapes(&self) -> Result<Vec<Activation>, CoreError> {
        if self.n_outputs < 2 {
            return Err(CoreError::shape(format!(
                "n_outputs must be at least 2, got {}",
                self.n_outputs
            )));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(CoreError::shape("input_shape has a zero dimension"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = Activation::Image { channels: c, height: h, width: w };
        shapes.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| CoreError::shape(format!("layer {i} ({:?}): {msg}", layer.kind));
            if layer.has_bn && !matches!(layer.kind, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
            {
                return Err(err("has_bn is only valid on conv and dense layers".into()));
            }
            cur = match (&layer.kind, cur) {
                (
                    LayerKind::Conv2d { out_channels, kernel, padding },
                    Activation::Image { height, width, .. },
                ) => {
                    if *kernel == 0 || *out_channels == 0 {
                        return Err(err("kernel and out_channels must be positive".into()));
                    }
                    let (oh, ow) = match padding {
                        Padding::Same => (height, width),
                        Padding::Valid => {
                            if height < *kernel || width < *kernel {
                                return Err(err(format!(
                                    "valid padding needs input at least {k}x{k}, got {height}x{width}",
                                    k = kernel
                                )));
                            }
                            (height - kernel + 1, width - kernel + 1)
                        }
                    };
                    Activation::Image { channels: *out_channels, height: oh, width: ow }
                }
                (LayerKind::Conv2d { .. }, Activation::Flat { .. }) => {
                    return Err(err("conv needs an image input, got flat features".into()));
                }
                (LayerKind::Dense { out_features }, Activation::Flat { .. }) => {
                    if *out_features == 0 {
                        return Err(err("out_features must be positive".into()));
                    }
                    Activation::Flat { features: *out_features }
                }
                (LayerKind::Dense { .. }, Activation::Image { .. }) => {
                    return Err(err("dense needs flat input; insert a flatten layer".into()));
                }
                (LayerKind::Relu, shape) => shape,
                (LayerKind::MaxPool2, Activation::Image { channels, height, width }) => {
                    if height < 2 || width < 2 {
                        return Err(err(format!("pool needs at least 2x2 input, got {height}x{width}")));
                    }
                    Activation::Image { channels, height: height / 2, width: width / 2 }
                }
                (LayerKind::MaxPool2, Activation::Flat { .. }) => {
                    return Err(err("max-pool needs an image input".into()));
                }
                (LayerKind::Flatten, Activation::Image { channels, height, width }) => {
                    Activation::Flat { features: channels * height * width }
                }
                (LayerKind::Flatten, flat @ Activation::Flat { .. }) => flat,
            };
            shapes.push(cur);
        }
        match shapes.last() {
            Some(Activation::Flat { features }) if *features == self.n_outputs => Ok(shapes),
            Some(Activation::Flat { features }) => Err(CoreError::shape(format!(
                "final layer produces {features} features but n_outputs is {}",
                self.n_outputs
            ))),
            _ => Err(CoreError::shape("final layer must be dense over flat features")),
        }
    }

    /// Canonical parameter layout: per parameterized layer in order,
    /// weight, bias, then γ and β when the layer is batch-normalized.
    pub fn param_layout(&self) -> Result<Vec<EntryMeta>, CoreError> {
        let shapes = self.trace_shapes()?;
        let mut layout = Vec::new();
        let mut layer_index = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes[i];
            match layer.kind {
                LayerKind::Conv2d { out_channels, kernel, .. } => {
                    let in_channels = match input {
                        Activation::Image { channels, .. } => channels,
                        Activation::Flat { .. } => unreachable!("checked by trace_shapes"),
                    };
                    let base = format!("conv{layer_index}");
                    layout.push(EntryMeta {
                        name: format!("{base}.weight"),
                        layer_index,
                        shape: vec![out_channels, in_channels, kernel, kernel],
                        is_bn: false,
                    });
                    layout.push(EntryMeta {
                        name: format!("{base}.bias"),
                        layer_index,
                        shape: vec![out_channels],
                        is_bn: false,
                    });
                    if layer.has_bn {
                        layout.push(EntryMeta {
                            name: format!("{base}.gamma"),
                            layer_index,
                            shape: vec![out_channels],
                            is_bn: true,
                        });
                        layout.push(EntryMeta {
                            name: format!("{base}.beta"),
                            layer_index,
                            shape: vec![out_channels],
                            is_bn: true,
                        });
                    }
                    layer_index += 1;
                }
                LayerKind::Dense { out_features } => {
                    let in_features = match input {
                        Activation::Flat { features } => features,
                        Activation::Image { .. } => unreachable!("checked by trace_shapes"),
                    };
                    let base = format!("fc{layer_index}");
                    layout.push(EntryMeta {
                        name: format!("{base}.weight"),
                        layer_index,
                        shape: vec![out_features, in_features],
                        is_bn: false,
                    });
                    layout.push(EntryMeta {
                        name: format!("{base}.bias"),
                        layer_index,
                        shape: vec![out_features],
                        is_bn: false,
                    });
                    if layer.has_bn {
                        layout.push(EntryMeta {
                            name: format!("{base}.gamma"),
                            layer_index,
                            shape: vec![out_features],
                            is_bn: true,
                        });
                        layout.push(EntryMeta {
                            name: format!("{base}.beta"),
                            layer_index,
                            shape: vec![out_features],
                            is_bn: true,
                        });
                    }
                    layer_index += 1;
                }
                LayerKind::Relu | LayerKind::MaxPool2 | LayerKind::Flatten => {}
            }
        }
        Ok(layout)
    }

    /// Kaiming-normal initialization, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet, CoreError> {
        let layout = self.param_layout()?;
        let mut rng = stream(seed, Purpose::ParamInit, &[]);
        let mut entries = Vec::with_capacity(layout.len());
        for meta in layout {
            let n: usize = meta.shape.iter().product();
            let data: Vec<f64> = if meta.name.ends_with(".weight") {
                let fan_in: usize = meta.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            } else if meta.name.ends_with(".gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            entries.push(ParamEntry {
                name: meta.name,
                layer_index: meta.layer_index,
                tensor: Tensor::from_vec(meta.shape, data)?,
                is_bn: meta.is_bn,
            });
        }
        ParamSet::new(entries)
    }
}

/// Shape-level description of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryMeta {
    pub name: String,
    pub layer_index: usize,
    pub shape: Vec<usize>,
    pub is_bn: bool,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamEntry {
    pub name: String,
    pub layer_index: usize,
    pub tensor: Tensor,
    pub is_bn: bool,
}

/// Ordered, named collection of parameter tensors.
///
/// Also used as the container for parameter *gradients*, which share the
/// exact layout of the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self, CoreError> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(CoreError::shape(format!("duplicate parameter name {:?}", e.name)));
            }
        }
        let mut last = 0usize;
        for e in &entries {
            if e.layer_index < last {
                return Err(CoreError::shape(format!(
                    "parameter {:?} breaks canonical layer order",
                    e.name
                )));
            }
            last = e.layer_index;
        }
        Ok(ParamSet { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of parameterized layers (`layer_index` partitions).
    pub fn num_layers(&self) -> usize {
        self.entries.iter().map(|e| e.layer_index + 1).max().unwrap_or(0)
    }

    /// Total scalar component count.
    pub fn num_components(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Check this set instantiates `spec` exactly (names, order, shapes).
    pub fn matches_spec(&self, spec: &ModelSpec) -> Result<(), CoreError> {
        let layout = spec.param_layout()?;
        if layout.len() != self.entries.len() {
            return Err(CoreError::shape(format!(
                "spec expects {} parameter tensors, got {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for (meta, entry) in layout.iter().zip(&self.entries) {
            if meta.name != entry.name
                || meta.shape != entry.tensor.shape()
                || meta.layer_index != entry.layer_index
                || meta.is_bn != entry.is_bn
            {
                return Err(CoreError::shape(format!(
                    "parameter {:?} (shape {:?}) does not match spec entry {:?} (shape {:?})",
                    entry.name,
                    entry.tensor.shape(),
                    meta.name,
                    meta.shape
                )));
            }
        }
        Ok(())
    }

    /// Check another set (typically gradients) has the identical layout.
    pub fn same_layout(&self, other: &ParamSet) -> Result<(), CoreError> {
        if self.entries.len() != other.entries.len() {
            return Err(CoreError::shape(format!(
                "parameter sets have {} vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(CoreError::shape(format!(
                    "parameter {:?} {:?} vs {:?} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Zero-valued set with this layout.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    layer_index: e.layer_index,
                    tensor: Tensor::zeros(e.tensor.shape()),
                    is_bn: e.is_bn,
                })
                .collect(),
        }
    }

    /// `self += factor * other`, entry by entry.
    pub fn scaled_add(&mut self, other: &ParamSet, factor: f64) -> Result<(), CoreError> {
        self.same_layout(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.tensor.data_mut().iter_mut().zip(b.tensor.data()) {
                *x += factor * y;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_default_shapes_compose() {
        let spec = ModelSpec::conv_default(5);
        let shapes = spec.trace_shapes().unwrap();
        assert_eq!(shapes.len(), 9);
        assert_eq!(*shapes.last().unwrap(), Activation::Flat { features: 5 });
        // 4x4x8 after two pools on 16x16.
        assert_eq!(shapes[7], Activation::Flat { features: 128 });
    }

    #[test]
    fn layout_is_canonical_weight_bias_gamma_beta() {
        let spec = ModelSpec::conv_default(5);
        let layout = spec.param_layout().unwrap();
        let names: Vec<&str> = layout.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv0.weight",
                "conv0.bias",
                "conv0.gamma",
                "conv0.beta",
                "conv1.weight",
                "conv1.bias",
                "conv1.gamma",
                "conv1.beta",
                "fc2.weight",
                "fc2.bias",
            ]
        );
        assert_eq!(layout[2].layer_index, 0);
        assert!(layout[2].is_bn && layout[3].is_bn);
        assert_eq!(layout[0].shape, [8, 1, 3, 3]);
        assert_eq!(layout[8].shape, [5, 128]);
    }

    #[test]
    fn dense_on_image_is_rejected_with_layer_name() {
        let spec = ModelSpec {
            input_shape: (1, 8, 8),
            layers: vec![LayerSpec::dense(3, false)],
            n_outputs: 3,
        };
        let err = spec.trace_shapes().unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("layer 0"), "{msg}");
    }

    #[test]
    fn n_outputs_below_two_rejected() {
        let mut spec = ModelSpec::mlp_default(5);
        spec.n_outputs = 1;
        assert!(spec.trace_shapes().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bn_is_identity() {
        let spec = ModelSpec::conv_default(5);
        let a = spec.init_params(9).unwrap();
        let b = spec.init_params(9).unwrap();
        assert_eq!(a, b);
        let gamma = &a.entries()[2];
        assert!(gamma.tensor.data().iter().all(|&v| v == 1.0));
        let beta = &a.entries()[3];
        assert!(beta.tensor.data().iter().all(|&v| v == 0.0));
        assert_ne!(a.entries()[0].tensor.data()[0], spec.init_params(10).unwrap().entries()[0].tensor.data()[0]);
    }

    #[test]
    fn num_layers_counts_partitions() {
        let spec = ModelSpec::conv_default(5);
        let params = spec.init_params(0).unwrap();
        assert_eq!(params.num_layers(), 3);
        assert_eq!(params.num_components(), 8 * 9 + 8 + 8 + 8 + 8 * 8 * 9 + 8 + 8 + 8 + 5 * 128 + 5);
    }
}

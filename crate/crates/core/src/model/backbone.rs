use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, Cache, Layer, Tensor};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::types::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Four 3×3 conv blocks; the first three end in a 2×2 max-pool.
    #[serde(rename = "small-conv-4")]
    SmallConv4,
    #[serde(rename = "resnet12")]
    ResNet12,
    #[serde(rename = "resnet18")]
    ResNet18,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::SmallConv4 => "small-conv-4",
            Architecture::ResNet12 => "resnet12",
            Architecture::ResNet18 => "resnet18",
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Architecture::SmallConv4 => vec![32, 32, 64, 64],
            Architecture::ResNet12 => vec![64, 160, 320, 640],
            Architecture::ResNet18 => vec![64, 128, 256, 512],
        }
    }

    /// Total spatial downsampling from input pixels to feature-map patches.
    pub fn cumulative_stride(self) -> usize {
        match self {
            Architecture::SmallConv4 => 8,
            Architecture::ResNet12 => 16,
            Architecture::ResNet18 => 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Per-stage channel widths; the last one is the feature dimension `d`.
    pub widths: Vec<usize>,
    /// Upper bound on group-norm groups per layer.
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::new(Architecture::SmallConv4, 32)
    }
}

impl BackboneConfig {
    pub fn new(architecture: Architecture, input_size: usize) -> Self {
        Self {
            architecture,
            input_size,
            widths: architecture.default_widths(),
            norm_groups: 1,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.contains(&0) {
            return Err(Error::config("model.widths", "expected four positive stage widths"));
        }
        if self.norm_groups == 0 {
            return Err(Error::config("model.norm_groups", "must be at least 1"));
        }
        let min = match self.architecture {
            Architecture::SmallConv4 => 8,
            Architecture::ResNet12 => 16,
            Architecture::ResNet18 => 32,
        };
        if self.input_size < min {
            return Err(Error::config(
                "model.input_size",
                format!("{} needs inputs of at least {min} pixels", self.architecture.id()),
            ));
        }
        Ok(())
    }
}

/// Named parameter slice, used by checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Builder {
    groups: usize,
    size: usize,
    entries: Vec<ParamEntry>,
    /// (offset, len, fan_in) for conv weights; norms get gamma = 1.
    conv_init: Vec<(usize, usize, usize)>,
    gamma_init: Vec<(usize, usize)>,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.size;
        self.size += shape.iter().product::<usize>();
        self.entries.push(ParamEntry { name, offset, shape });
        offset
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Layer {
        let offset = self.alloc(format!("{name}.weight"), vec![kernel, kernel, cin, cout]);
        self.conv_init.push((offset, kernel * kernel * cin * cout, kernel * kernel * cin));
        Layer::Conv {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            offset,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Layer {
        let groups = (1..=self.groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        let gamma = self.alloc(format!("{name}.gamma"), vec![channels]);
        let beta = self.alloc(format!("{name}.beta"), vec![channels]);
        self.gamma_init.push((gamma, channels));
        Layer::GroupNorm {
            channels,
            groups,
            gamma,
            beta,
        }
    }
}

fn small_conv4(b: &mut Builder, widths: &[usize]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(b.conv(&format!("blocks.{i}.conv"), cin, w, 3, 1));
        layers.push(b.norm(&format!("blocks.{i}.norm"), w));
        layers.push(Layer::Relu);
        if i + 1 < widths.len() {
            layers.push(Layer::MaxPool {
                kernel: 2,
                stride: 2,
                pad: 0,
            });
        }
        cin = w;
    }
    layers
}

fn resnet12(b: &mut Builder, widths: &[usize]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        let p = format!("layer{}", i + 1);
        let body = vec![
            b.conv(&format!("{p}.conv1"), cin, w, 3, 1),
            b.norm(&format!("{p}.norm1"), w),
            Layer::Relu,
            b.conv(&format!("{p}.conv2"), w, w, 3, 1),
            b.norm(&format!("{p}.norm2"), w),
            Layer::Relu,
            b.conv(&format!("{p}.conv3"), w, w, 3, 1),
            b.norm(&format!("{p}.norm3"), w),
        ];
        let shortcut = vec![
            b.conv(&format!("{p}.downsample.conv"), cin, w, 1, 1),
            b.norm(&format!("{p}.downsample.norm"), w),
        ];
        layers.push(Layer::Residual { body, shortcut });
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool {
            kernel: 2,
            stride: 2,
            pad: 0,
        });
        cin = w;
    }
    layers
}

fn resnet18(b: &mut Builder, widths: &[usize]) -> Vec<Layer> {
    let mut layers = vec![
        b.conv("stem.conv", 3, widths[0], 7, 2),
        b.norm("stem.norm", widths[0]),
        Layer::Relu,
        Layer::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ];
    let mut cin = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        for j in 0..2 {
            let p = format!("layer{}.{j}", i + 1);
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let body = vec![
                b.conv(&format!("{p}.conv1"), cin, w, 3, stride),
                b.norm(&format!("{p}.norm1"), w),
                Layer::Relu,
                b.conv(&format!("{p}.conv2"), w, w, 3, 1),
                b.norm(&format!("{p}.norm2"), w),
            ];
            let shortcut = if stride != 1 || cin != w {
                vec![
                    b.conv(&format!("{p}.downsample.conv"), cin, w, 1, stride),
                    b.norm(&format!("{p}.downsample.norm"), w),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual { body, shortcut });
            layers.push(Layer::Relu);
            cin = w;
        }
    }
    layers
}

/// Convolutional feature extractor producing a channel-last [`FeatureMap`].
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
    entries: Vec<ParamEntry>,
    params: Vec<f64>,
    geometry: (usize, usize, usize),
}

/// Everything backward needs from one training forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    caches: Vec<Cache>,
}

impl ForwardTrace {
    pub fn kink_margin(&self) -> f64 {
        layers::min_kink_margin(&self.caches)
    }
}

impl Backbone {
    /// Builds the architecture and draws Kaiming-normal conv weights from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            groups: config.norm_groups,
            size: 0,
            entries: Vec::new(),
            conv_init: Vec::new(),
            gamma_init: Vec::new(),
        };
        let layers = match config.architecture {
            Architecture::SmallConv4 => small_conv4(&mut b, &config.widths),
            Architecture::ResNet12 => resnet12(&mut b, &config.widths),
            Architecture::ResNet18 => resnet18(&mut b, &config.widths),
        };
        let mut params = vec![0.0; b.size];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(offset, len, fan_in) in &b.conv_init {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[offset..offset + len] {
                *p = normal.sample(&mut rng);
            }
        }
        for &(offset, len) in &b.gamma_init {
            params[offset..offset + len].fill(1.0);
        }
        let geometry = layers::trace_shape(&layers, (config.input_size, config.input_size, 3));
        if geometry.0 == 0 || geometry.1 == 0 {
            return Err(Error::config("model.input_size", "input collapses to an empty feature map"));
        }
        Ok(Self {
            config,
            layers,
            entries: b.entries,
            params,
            geometry,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Declared `(h, w, d)` of every feature map this backbone emits.
    pub fn output_geometry(&self) -> (usize, usize, usize) {
        self.geometry
    }

    pub fn feature_dim(&self) -> usize {
        self.geometry.2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter buffer, for optimizers and finite-difference checks.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn load_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn input_tensor(&self, image: &Image) -> Result<Tensor> {
        let s = self.config.input_size;
        if image.width() != s || image.height() != s {
            return Err(Error::Shape(format!(
                "backbone expects {s}x{s} input, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Tensor::new(s, s, 3, image.normalized()))
    }

    fn to_map(&self, t: Tensor) -> Result<FeatureMap> {
        if t.shape() != self.geometry {
            return Err(Error::Shape(format!(
                "forward produced {:?}, declared {:?}",
                t.shape(),
                self.geometry
            )));
        }
        FeatureMap::new(t.h, t.w, t.c, t.data)
    }

    pub fn forward_feature_map(&self, image: &Image) -> Result<FeatureMap> {
        let x = self.input_tensor(image)?;
        self.to_map(layers::forward(&self.layers, x, &self.params, None))
    }

    /// Forward pass that keeps what [`Backbone::backward`] needs.
    pub fn forward_train(&self, image: &Image) -> Result<(FeatureMap, ForwardTrace)> {
        let x = self.input_tensor(image)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let y = layers::forward(&self.layers, x, &self.params, Some(&mut caches));
        Ok((self.to_map(y)?, ForwardTrace { caches }))
    }

    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂F` in channel-last layout.
    pub fn backward(&self, trace: &ForwardTrace, grad_map: &[f64], grads: &mut [f64]) {
        let (h, w, d) = self.geometry;
        assert_eq!(grad_map.len(), h * w * d, "gradient does not match feature map");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let g = Tensor::new(h, w, d, grad_map.to_vec());
        layers::backward(&self.layers, &trace.caches, g, &self.params, grads);
    }
}

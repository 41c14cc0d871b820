use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::network::Network;
use crate::error::{Error, Result};

/// A plain VGG-style stack: 3x3 conv + batch-norm + ReLU blocks, 2x2 max
/// pooling after selected blocks, then optional hidden dense layers and the
/// classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// 1-based conv indices followed by a max-pool.
    pub pool_after: Vec<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Eight conv layers on 32x32 RGB input.
    pub fn vgg8(num_classes: usize) -> Self {
        Self {
            input_shape: vec![3, 32, 32],
            conv_channels: vec![32, 32, 64, 64, 128, 128, 128, 128],
            pool_after: vec![2, 4, 6],
            hidden: vec![],
            num_classes,
        }
    }

    /// Same topology, narrower and on 16x16 input; sized for CPU-only runs.
    pub fn vgg8_desk(num_classes: usize) -> Self {
        Self {
            input_shape: vec![3, 16, 16],
            conv_channels: vec![16, 16, 32, 32, 64, 64, 128, 128],
            pool_after: vec![2, 4, 6],
            hidden: vec![],
            num_classes,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "vgg8" => Ok(Self::vgg8(num_classes)),
            "vgg8-desk" => Ok(Self::vgg8_desk(num_classes)),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture preset {other:?} (expected vgg8 or vgg8-desk)"
            ))),
        }
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if self.input_shape.len() != 3 {
            return Err(Error::InvalidNetwork(format!(
                "input shape must be [C, H, W], got {:?}",
                self.input_shape
            )));
        }
        if let Some(&bad) = self.pool_after.iter().find(|&&p| p == 0 || p > self.conv_channels.len()) {
            return Err(Error::InvalidNetwork(format!("pool_after entry {bad} names no conv layer")));
        }
        let mut specs = Vec::new();
        let mut channels = self.input_shape[0];
        for (i, &out) in self.conv_channels.iter().enumerate() {
            specs.push(LayerSpec::conv3x3(channels, out));
            specs.push(LayerSpec::batch_norm(out));
            specs.push(LayerSpec::Relu);
            if self.pool_after.contains(&(i + 1)) {
                specs.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
            }
            channels = out;
        }
        specs.push(LayerSpec::Flatten);
        let mut shape = self.input_shape.clone();
        for s in &specs {
            shape = s.output_shape(&shape)?;
        }
        let mut width = shape[0];
        for &h in &self.hidden {
            specs.push(LayerSpec::Dense { inputs: width, outputs: h });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: width,
            outputs: self.num_classes,
        });
        Ok(specs)
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        Network::init(self.input_shape.clone(), self.layer_specs()?, seed)
    }
}

//! Residual encoders (18 and 34 layers) with torchvision parameter names, so
//! converted ImageNet weights load by name.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, conv2d_no_bias, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    /// 18 or 34.
    pub depth: usize,
    /// Scales every stage width; 1.0 is the standard network.
    pub width_multiplier: f64,
    pub in_channels: usize,
}

impl ResNetConfig {
    pub fn new(depth: usize, width_multiplier: f64, in_channels: usize) -> Self {
        Self {
            depth,
            width_multiplier,
            in_channels,
        }
    }

    fn blocks(&self) -> Result<[usize; 4]> {
        match self.depth {
            18 => Ok([2, 2, 2, 2]),
            34 => Ok([3, 4, 6, 3]),
            d => Err(Error::Config(format!("unsupported encoder depth {d} (use 18 or 34)"))),
        }
    }

    /// Channel widths of the four stages.
    pub fn widths(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|c| scaled(c, self.width_multiplier))
    }
}

pub(crate) fn scaled(channels: usize, mult: f64) -> usize {
    ((channels as f64 * mult).round() as usize).max(1)
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(conv2d_no_bias(cin, cout, k, cfg, vb)?)
}

fn bn(c: usize, vb: VarBuilder) -> Result<BatchNorm> {
    Ok(batch_norm(c, BatchNormConfig::default(), vb)?)
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                conv(cin, cout, 1, stride, vb.pp("downsample.0"))?,
                bn(cout, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(cin, cout, 3, stride, vb.pp("conv1"))?,
            bn1: bn(cout, vb.pp("bn1"))?,
            conv2: conv(cout, cout, 3, 1, vb.pp("conv2"))?,
            bn2: bn(cout, vb.pp("bn2"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let y = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward_t(&self.conv2.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((c, b)) => b.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

/// Feature pyramid of one forward pass, finest first: strides 2, 4, 8, 16
/// and 32. Inputs whose sides are not multiples of 32 are zero-padded at the
/// bottom and right first.
pub struct Features(pub [Tensor; 5]);

pub struct ResNet {
    config: ResNetConfig,
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<BasicBlock>>,
}

impl ResNet {
    pub fn new(config: ResNetConfig, vb: VarBuilder) -> Result<Self> {
        let blocks = config.blocks()?;
        let widths = config.widths();
        let stem = widths[0];
        let conv1 = conv(config.in_channels, stem, 7, 2, vb.pp("conv1"))?;
        let bn1 = bn(stem, vb.pp("bn1"))?;
        let mut layers = Vec::with_capacity(4);
        let mut cin = stem;
        for (i, (&n, &cout)) in blocks.iter().zip(widths.iter()).enumerate() {
            let lvb = vb.pp(format!("layer{}", i + 1));
            let mut layer = Vec::with_capacity(n);
            for j in 0..n {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                layer.push(BasicBlock::new(cin, cout, stride, lvb.pp(j.to_string()))?);
                cin = cout;
            }
            layers.push(layer);
        }
        Ok(Self {
            config,
            conv1,
            bn1,
            layers,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    /// Channels of each pyramid level.
    pub fn feature_channels(&self) -> [usize; 5] {
        let w = self.config.widths();
        [w[0], w[0], w[1], w[2], w[3]]
    }

    pub fn out_channels(&self) -> usize {
        self.config.widths()[3]
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Features> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        // Zero-pad bottom and right up to the total stride.
        let x = x
            .pad_with_zeros(2, 0, h.next_multiple_of(32) - h)?
            .pad_with_zeros(3, 0, w.next_multiple_of(32) - w)?;
        let f1 = self.bn1.forward_t(&self.conv1.forward(&x)?, train)?.relu()?;
        let mut y = max_pool_3x3_s2(&f1)?;
        let mut outs = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                y = block.forward_t(&y, train)?;
            }
            outs.push(y.clone());
        }
        let [f2, f3, f4, f5]: [Tensor; 4] = outs.try_into().expect("four stages");
        Ok(Features([f1, f2, f3, f4, f5]))
    }

    /// Global-average-pooled final features, `(B, C)`.
    pub fn pooled(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let Features([.., f5]) = self.features(x, train)?;
        Ok(f5.mean(3)?.mean(2)?)
    }
}

/// Every `stride`-th index of `dim`, starting at `offset`.
fn strided(x: &Tensor, dim: usize, offset: usize, count: usize) -> candle_core::Result<Tensor> {
    let y = x.narrow(dim, offset, 2 * count)?;
    let mut shape = y.dims().to_vec();
    shape[dim] = count;
    shape.insert(dim + 1, 2);
    let y = y.reshape(shape)?.narrow(dim + 1, 0, 1)?;
    y.squeeze(dim + 1)
}

/// 3x3 max pool, stride 2, padding 1, built from strided views so it is
/// differentiable (candle has no backward for overlapping pools). Inputs
/// are post-ReLU, so zero padding acts like negative-infinity padding.
fn max_pool_3x3_s2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let padded = x.pad_with_zeros(2, 1, 1 + 2 * ho - h)?.pad_with_zeros(3, 1, 1 + 2 * wo - w)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = strided(&padded, 2, dy, ho)?;
        for dx in 0..3 {
            let v = strided(&rows, 3, dx, wo)?;
            out = Some(match out {
                Some(m) => m.maximum(&v)?,
                None => v,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn pyramid_shapes_and_names() {
        let store = ParamStore::new(0, &Device::Cpu);
        let net = ResNet::new(ResNetConfig::new(18, 0.125, 3), store.var_builder()).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let Features(f) = net.features(&x, false).unwrap();
        let dims: Vec<_> = f.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![2, 8, 32, 32],
                vec![2, 8, 16, 16],
                vec![2, 16, 8, 8],
                vec![2, 32, 4, 4],
                vec![2, 64, 2, 2]
            ]
        );
        let names: Vec<_> = store.named_vars().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layer2.0.downsample.0.weight".to_string()));
        assert!(names.contains(&"layer4.1.bn2.running_var".to_string()));
    }

    #[test]
    fn strided_pool_matches_candle_pool() {
        let x = Tensor::rand(0f32, 1f32, (2, 3, 8, 6), &Device::Cpu).unwrap();
        let want = x
            .pad_with_zeros(2, 1, 1)
            .unwrap()
            .pad_with_zeros(3, 1, 1)
            .unwrap()
            .max_pool2d_with_stride(3, 2)
            .unwrap();
        let got = max_pool_3x3_s2(&x).unwrap();
        assert_eq!(got.dims(), &[2, 3, 4, 3]);
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn depth_34_block_count() {
        let store = ParamStore::new(0, &Device::Cpu);
        ResNet::new(ResNetConfig::new(34, 0.125, 1), store.var_builder()).unwrap();
        let has = |n: &str| store.named_vars().iter().any(|(k, _)| k == n);
        assert!(has("layer3.5.conv2.weight"));
        assert!(!has("layer3.6.conv2.weight"));
    }

    #[test]
    fn pads_odd_sizes_and_rejects_bad_input() {
        let store = ParamStore::new(0, &Device::Cpu);
        let net = ResNet::new(ResNetConfig::new(18, 0.125, 3), store.var_builder()).unwrap();
        let x = Tensor::zeros((1, 3, 112, 100), DType::F32, &Device::Cpu).unwrap();
        let Features(f) = net.features(&x, false).unwrap();
        assert_eq!(f[0].dims(), &[1, 8, 64, 64]);
        assert_eq!(f[4].dims(), &[1, 64, 4, 4]);
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.features(&x, false), Err(Error::Shape(_))));
        assert!(ResNet::new(ResNetConfig::new(50, 1.0, 3), store.var_builder()).is_err());
    }
}

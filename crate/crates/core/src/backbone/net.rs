//! Residual network built on candle. Variable names follow the torchvision
//! layout (`conv1`, `bn1`, `layer1.0.conv1`, `layer2.0.downsample.0`, ...)
//! so converted ImageNet weights can be loaded by name.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, ModuleT, Tensor, D};
use candle_nn::{
    batch_norm, conv2d_no_bias, linear, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, Linear,
    VarBuilder, VarMap,
};
use rand_distr::{Distribution, Normal, Uniform};
use safetensors::tensor::{Dtype, TensorView};

use super::{Architecture, BackboneConfig};
use crate::error::{Error, Result};
use crate::seed::rng_for;

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let conv = |ci, co, s, vb| {
            conv2d_no_bias(
                ci,
                co,
                3,
                Conv2dConfig {
                    padding: 1,
                    stride: s,
                    ..Default::default()
                },
                vb,
            )
        };
        let downsample = if stride != 1 || c_in != c_out {
            let ds = vb.pp("downsample");
            Some((
                conv2d_no_bias(
                    c_in,
                    c_out,
                    1,
                    Conv2dConfig {
                        stride,
                        ..Default::default()
                    },
                    ds.pp("0"),
                )?,
                batch_norm(c_out, BatchNormConfig::default(), ds.pp("1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(c_in, c_out, stride, vb.pp("conv1"))?,
            bn1: batch_norm(c_out, BatchNormConfig::default(), vb.pp("bn1"))?,
            conv2: conv(c_out, c_out, 1, vb.pp("conv2"))?,
            bn2: batch_norm(c_out, BatchNormConfig::default(), vb.pp("bn2"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let out = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let out = self.bn2.forward_t(&self.conv2.forward(&out)?, train)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        (out + identity)?.relu()
    }
}

pub(crate) struct Network {
    varmap: VarMap,
    architecture: Architecture,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    projection: Option<Linear>,
    head: Linear,
    device: Device,
}

impl Network {
    /// Builds the network with seeded random weights.
    pub fn new(config: &BackboneConfig, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes < 1 {
            return Err(Error::InvalidConfig("classifier needs at least one class".into()));
        }
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let arch = config.architecture;
        let widths = arch.stage_widths();
        let (stem, stem_bn) = match arch {
            Architecture::Resnet18 => (
                conv2d_no_bias(
                    3,
                    widths[0],
                    7,
                    Conv2dConfig {
                        padding: 3,
                        stride: 2,
                        ..Default::default()
                    },
                    vb.pp("conv1"),
                )?,
                batch_norm(widths[0], BatchNormConfig::default(), vb.pp("bn1"))?,
            ),
            Architecture::ResnetMini => (
                conv2d_no_bias(
                    3,
                    widths[0],
                    3,
                    Conv2dConfig {
                        padding: 1,
                        ..Default::default()
                    },
                    vb.pp("conv1"),
                )?,
                batch_norm(widths[0], BatchNormConfig::default(), vb.pp("bn1"))?,
            ),
        };
        let mut blocks = Vec::new();
        let mut c_in = widths[0];
        for (stage, &width) in widths.iter().enumerate() {
            for b in 0..arch.blocks_per_stage() {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let vb = vb.pp(format!("layer{}", stage + 1)).pp(b.to_string());
                blocks.push(BasicBlock::new(c_in, width, stride, vb)?);
                c_in = width;
            }
        }
        let projection = if config.embedding_dim != arch.feature_width() {
            Some(linear(arch.feature_width(), config.embedding_dim, vb.pp("embed_proj"))?)
        } else {
            None
        };
        let head = linear(config.embedding_dim, n_classes, vb.pp("head"))?;
        let net = Self {
            varmap,
            architecture: arch,
            stem,
            stem_bn,
            blocks,
            projection,
            head,
            device,
        };
        net.reinitialize(seed)?;
        Ok(net)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Pooled (and optionally projected) features, shape `(batch, embedding_dim)`.
    pub fn features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = self.stem_bn.forward_t(&self.stem.forward(x)?, train)?.relu()?;
        if self.architecture == Architecture::Resnet18 {
            // Post-ReLU activations are non-negative, so zero padding acts as -inf padding.
            h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
            h = h.max_pool2d_with_stride(3, 2)?;
        }
        for block in &self.blocks {
            h = block.forward_t(&h, train)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        match &self.projection {
            Some(p) => p.forward(&pooled),
            None => Ok(pooled),
        }
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.head.forward(&self.features(x, train)?)
    }

    /// Trainable variables (batch-norm running statistics excluded).
    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.sorted_vars()
            .into_iter()
            .filter(|(name, _)| !is_running_stat(name))
            .map(|(_, v)| v)
            .collect()
    }

    /// Trainable variables excluding the classifier head.
    pub fn backbone_vars(&self) -> Vec<candle_core::Var> {
        self.sorted_vars()
            .into_iter()
            .filter(|(name, _)| !is_running_stat(name) && !name.starts_with("head."))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn sorted_vars(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().unwrap();
        let sorted: BTreeMap<_, _> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sorted.into_iter().collect()
    }

    /// He-normal (fan-out) convolutions, unit/zero batch norms and
    /// uniform(+-1/sqrt(fan_in)) linear layers, all from a seeded stream.
    pub fn reinitialize(&self, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, "init");
        for (name, var) in self.sorted_vars() {
            let dims = var.as_tensor().dims().to_vec();
            let n: usize = dims.iter().product();
            let values: Vec<f32> = if is_running_stat(&name) {
                let v = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                vec![v; n]
            } else if name.starts_with("head.") || name.starts_with("embed_proj.") {
                let fan_in = if dims.len() == 2 {
                    dims[1]
                } else {
                    // bias: fan_in of the matching weight
                    let w = format!("{}.weight", name.rsplit_once('.').unwrap().0);
                    self.varmap.data().lock().unwrap()[&w].as_tensor().dims()[1]
                };
                let bound = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            } else if dims.len() == 4 {
                let fan_out = dims[0] * dims[2] * dims[3];
                let dist = Normal::new(0.0f32, (2.0 / fan_out as f32).sqrt()).unwrap();
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            } else if name.ends_with(".weight") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            var.set(&Tensor::from_vec(values, dims, &self.device)?)?;
        }
        Ok(())
    }

    /// Serializes every variable (running statistics included) as a
    /// safetensors buffer carrying `metadata` in its header.
    pub fn to_safetensors(&self, metadata: HashMap<String, String>) -> Result<Vec<u8>> {
        let mut buffers = Vec::new();
        for (name, var) in self.sorted_vars() {
            let t = var.as_tensor();
            let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name, t.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(safetensors::serialize(views, Some(metadata))?)
    }

    /// Copies tensors from a safetensors buffer. In strict mode every
    /// variable must be present with its exact shape; otherwise only
    /// matching names and shapes are copied. Returns the number copied.
    pub fn load_safetensors(&self, bytes: &[u8], strict: bool) -> Result<usize> {
        let st = safetensors::SafeTensors::deserialize(bytes)?;
        let mut copied = 0;
        for (name, var) in self.sorted_vars() {
            let want = var.as_tensor().dims().to_vec();
            let view = match st.tensor(&name) {
                Ok(v) => v,
                Err(_) if !strict => continue,
                Err(_) => {
                    return Err(Error::IncompatibleCheckpoint(format!("missing tensor {name}")))
                }
            };
            if view.shape() != want.as_slice() || view.dtype() != Dtype::F32 {
                if strict {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "tensor {name} has shape {:?}, expected {want:?}",
                        view.shape()
                    )));
                }
                continue;
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            var.set(&Tensor::from_vec(values, want, &self.device)?)?;
            copied += 1;
        }
        Ok(copied)
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> BackboneConfig {
        BackboneConfig {
            architecture: Architecture::ResnetMini,
            embedding_dim: 64,
            input_edge: 32,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_names() {
        let net = Network::new(&mini(), 5, 0).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.features(&x, false).unwrap().dims(), &[2, 64]);
        assert_eq!(net.logits(&x, false).unwrap().dims(), &[2, 5]);
        let names: Vec<String> = net.sorted_vars().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layer2.0.downsample.0.weight".to_string()));
        assert!(names.contains(&"bn1.running_var".to_string()));
    }

    #[test]
    fn resnet18_torchvision_layout() {
        let cfg = BackboneConfig {
            input_edge: 64,
            ..Default::default()
        };
        let net = Network::new(&cfg, 5, 0).unwrap();
        let convs = net
            .sorted_vars()
            .iter()
            .filter(|(n, v)| n.ends_with("weight") && v.as_tensor().rank() == 4)
            .count();
        // 1 stem + 16 block convs + 3 downsample convs
        assert_eq!(convs, 20);
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.features(&x, false).unwrap().dims(), &[1, 512]);
    }

    #[test]
    fn projection_when_dim_differs() {
        let cfg = BackboneConfig {
            embedding_dim: 16,
            ..mini()
        };
        let net = Network::new(&cfg, 3, 0).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.features(&x, false).unwrap().dims(), &[1, 16]);
    }

    #[test]
    fn seeded_init_and_round_trip() {
        let a = Network::new(&mini(), 5, 11).unwrap();
        let b = Network::new(&mini(), 5, 11).unwrap();
        let c = Network::new(&mini(), 5, 12).unwrap();
        let blob_a = a.to_safetensors(HashMap::new()).unwrap();
        assert_eq!(blob_a, b.to_safetensors(HashMap::new()).unwrap());
        assert_ne!(blob_a, c.to_safetensors(HashMap::new()).unwrap());
        let n = c.load_safetensors(&blob_a, true).unwrap();
        assert_eq!(n, a.sorted_vars().len());
        assert_eq!(blob_a, c.to_safetensors(HashMap::new()).unwrap());
    }

    #[test]
    fn strict_load_rejects_other_shapes() {
        let a = Network::new(&mini(), 5, 0).unwrap();
        let b = Network::new(&mini(), 4, 0).unwrap();
        let blob = a.to_safetensors(HashMap::new()).unwrap();
        assert!(b.load_safetensors(&blob, true).is_err());
        let copied = b.load_safetensors(&blob, false).unwrap();
        assert_eq!(copied, b.sorted_vars().len() - 2);
    }
}

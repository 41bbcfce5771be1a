//! The full network: stem, four stages of MBB blocks with downsampling
//! between them, global average pooling and a classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{BlockOptions, BnLayer, ConvLayer, Downsample, FcOptions, Linear, MbbBlock};
use super::spec::{block_name, BlockKind, ModelSpec};
use crate::error::{Error, Result};
use crate::layers::{global_avg_pool_backward, global_avg_pool_forward, join, Mode, Param, ParamVisitor, Parameterized};
use crate::tensor::{FloatTensor, Real};

#[derive(Clone, Debug)]
pub struct Stage<T: Real> {
    pub down: Option<(Downsample<T>, BnLayer<T>)>,
    pub blocks: Vec<(String, MbbBlock<T>)>,
}

#[derive(Clone, Debug)]
pub struct BiMlp<T: Real = f32> {
    spec: ModelSpec,
    pub stem: ConvLayer<T>,
    pub stem_bn: BnLayer<T>,
    pub stages: Vec<Stage<T>>,
    /// Normalizes the final tokens before pooling.
    pub norm: BnLayer<T>,
    pub head: Linear<T>,
    pooled_shape: Option<Vec<usize>>,
}

/// `[B, C, H, W]` → `[B, H, W, C]`.
pub fn nchw_to_nhwc<T: Real>(x: &FloatTensor<T>) -> Result<FloatTensor<T>> {
    let [b, c, h, w] = x.shape()[..] else {
        return Err(Error::shape(format!("images must be [B,C,H,W], got {:?}", x.shape())));
    };
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for p in 0..h * w {
            for ch in 0..c {
                out.push(src[(bi * c + ch) * h * w + p]);
            }
        }
    }
    FloatTensor::new(&[b, h, w, c], out)
}

impl<T: Real> BiMlp<T> {
    /// Builds the model with parameters drawn from a ChaCha stream seeded by `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d0 = spec.stages[0].dim;
        let stem = ConvLayer::new(spec.in_channels, d0, spec.stem.kernel, spec.stem.stride, spec.stem.padding, &mut rng);
        let opts = BlockOptions {
            fc: FcOptions {
                shortcut: spec.shortcut,
                activation: spec.activation,
            },
            receptive_field: spec.receptive_field,
            fusion: spec.fusion,
            residual: spec.block_residual,
            binarize_local: spec.binarize.local_fc,
            binarize_channel: spec.binarize.channel_fc,
        };
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (si, st) in spec.stages.iter().enumerate() {
            let down = if si > 0 {
                Some((Downsample::new(&spec.downsample_spec(si), &mut rng)?, BnLayer::new(st.dim)))
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(2 * st.depth);
            for p in 0..st.depth {
                for kind in [BlockKind::Block1, BlockKind::Block2] {
                    let name = block_name(si, p, kind);
                    let b = MbbBlock::new(&name, spec.block_spec(si, kind), opts, &mut rng)?;
                    blocks.push((name, b));
                }
            }
            stages.push(Stage { down, blocks });
        }
        let d_last = spec.stages.last().expect("validated").dim;
        let head = Linear::new(d_last, spec.num_classes, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            stem,
            stem_bn: BnLayer::new(d0),
            stages,
            norm: BnLayer::new(d_last),
            head,
            pooled_shape: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Logits `[B, classes]` for images `[B, C, H, W]`.
    pub fn forward(&mut self, images: &FloatTensor<T>, mode: Mode) -> Result<FloatTensor<T>> {
        if images.rank() != 4 || images.shape()[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "model expects [B,{},H,W] images, got {:?}",
                self.spec.in_channels,
                images.shape()
            )));
        }
        let x = nchw_to_nhwc(images)?;
        let mut h = self.stem.forward(&x, mode.training)?;
        h = self.stem_bn.forward(&h, mode.training)?;
        for stage in &mut self.stages {
            if let Some((d, bn)) = &mut stage.down {
                h = d.forward(&h, mode.training)?;
                h = bn.forward(&h, mode.training)?;
            }
            for (_, b) in &mut stage.blocks {
                h = b.forward(&h, mode)?;
            }
        }
        h = self.norm.forward(&h, mode.training)?;
        let pooled = global_avg_pool_forward(&h)?;
        if mode.training {
            self.pooled_shape = Some(h.shape().to_vec());
        }
        self.head.forward(&pooled, mode.training)
    }

    /// Accumulates parameter gradients for the last training forward pass.
    pub fn backward(&mut self, grad_logits: &FloatTensor<T>) -> Result<()> {
        let shape = self
            .pooled_shape
            .take()
            .ok_or_else(|| Error::invalid("model backward called without a training forward pass"))?;
        let g = self.head.backward(grad_logits)?;
        let g = global_avg_pool_backward(&shape, &g)?;
        let mut g = self.norm.backward(&g)?;
        for stage in self.stages.iter_mut().rev() {
            for (_, b) in stage.blocks.iter_mut().rev() {
                g = b.backward(&g)?;
            }
            if let Some((d, bn)) = &mut stage.down {
                g = bn.backward(&g)?;
                g = d.backward(&g)?;
            }
        }
        let g = self.stem_bn.backward(&g)?;
        self.stem.backward(&g)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// `(name, shape)` of every parameter and buffer, in visiting order.
    pub fn param_layout(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| out.push((n.to_string(), p.value.shape().to_vec())));
        out
    }

    pub fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p: &mut Param<T>| {
            if p.trainable() {
                n += p.value.len();
            }
        });
        n
    }

    /// Copies every parameter and buffer from `other`, which must share the layout.
    pub fn load_from(&mut self, other: &mut BiMlp<T>) -> Result<()> {
        let mut values = Vec::new();
        other.visit_params("", &mut |n, p| values.push((n.to_string(), p.value.clone())));
        self.load_values(values)
    }

    pub(crate) fn load_values(&mut self, values: Vec<(String, FloatTensor<T>)>) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, source has {}",
                layout.len(),
                values.len()
            )));
        }
        for ((name, shape), (vname, v)) in layout.iter().zip(&values) {
            if name != vname || shape.as_slice() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{vname}` {:?} does not match model parameter `{name}` {shape:?}",
                    v.shape()
                )));
            }
        }
        let mut it = values.into_iter();
        self.visit_params("", &mut |_, p| p.value = it.next().expect("checked length").1);
        Ok(())
    }
}

impl<T: Real> Parameterized<T> for BiMlp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        self.stem_bn.visit_params(&join(prefix, "stem_bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            if let Some((d, bn)) = &mut stage.down {
                let name = join(prefix, &format!("down{si}"));
                d.visit_params(&name, f);
                bn.visit_params(&join(&name, "bn"), f);
            }
            for (_, b) in &mut stage.blocks {
                b.visit_params(prefix, f);
            }
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_forward_shape() {
        let mut m = BiMlp::<f32>::new(&ModelSpec::tiny(), 1).unwrap();
        let x = FloatTensor::from_fn(&[3, 1, 32, 32], |i| ((i % 7) as f32 - 3.0) / 3.0);
        for mode in [Mode::full_precision(false), Mode::binary(false), Mode::binary(true)] {
            assert_eq!(m.forward(&x, mode).unwrap().shape(), &[3, 10]);
        }
    }

    #[test]
    fn parameter_names_follow_layer_names() {
        let spec = ModelSpec::tiny();
        let mut m = BiMlp::<f32>::new(&spec, 1).unwrap();
        let names: Vec<String> = m.param_layout().into_iter().map(|(n, _)| n).collect();
        for l in spec.layers(32, 32).unwrap() {
            if l.name.contains(".pool") {
                continue;
            }
            assert!(names.iter().any(|n| n.starts_with(&format!("{}.", l.name))), "{}", l.name);
        }
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::tiny();
        let mut a = BiMlp::<f32>::new(&spec, 9).unwrap();
        let mut b = BiMlp::<f32>::new(&spec, 9).unwrap();
        let x = FloatTensor::from_fn(&[2, 1, 32, 32], |i| (i as f32 * 0.01).sin());
        assert_eq!(a.forward(&x, Mode::binary(false)).unwrap(), b.forward(&x, Mode::binary(false)).unwrap());
    }

    #[test]
    fn nchw_conversion() {
        let x = FloatTensor::from_fn(&[1, 2, 1, 2], |i| i as f32);
        assert_eq!(nchw_to_nhwc(&x).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
    }
}

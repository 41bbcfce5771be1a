//! Stateful building blocks: each module keeps what its forward pass needs
//! for the matching backward pass and accumulates parameter gradients.

use rand::Rng;

use super::spec::{spatial_branch_name, BlockKind, DownsampleKind, DownsampleSpec, Fusion, MbbBlockSpec, Orientation};
use crate::error::{Error, Result};
use crate::kernels::{gemm_lanes, ste_in_place, SteMode};
use crate::layers::cycle::{bhwc, cycle_gather, cycle_scatter};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward,
    rprelu_backward, rprelu_forward, uni_shortcut, uni_shortcut_backward, ActivationKind, BatchNormParams, BnCache,
    Conv2dParams, Mode, Param, ParamKind, ParamVisitor, Parameterized, RpreluParams, ShortcutKind,
};
use crate::layers::join;
use crate::tensor::{BitTensor, FloatTensor, Real};

/// Uniform initialisation with variance `1 / fan_in`.
pub(crate) fn init_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> FloatTensor<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    FloatTensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

pub(crate) fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

fn take<C>(cache: &mut Option<C>, what: &str) -> Result<C> {
    cache
        .take()
        .ok_or_else(|| Error::invalid(format!("{what}: backward called without a training forward pass")))
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank ≥ 1") = last;
    s
}

/// Batch norm with parameters exposed to the optimiser.
#[derive(Clone, Debug)]
pub struct BnLayer<T: Real> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BnLayer<T> {
    pub fn new(channels: usize) -> Self {
        let p = BatchNormParams::new(channels);
        Self {
            scale: Param::new(p.scale, ParamKind::Norm),
            shift: Param::new(p.shift, ParamKind::Norm),
            running_mean: Param::new(p.running_mean, ParamKind::Buffer),
            running_var: Param::new(p.running_var, ParamKind::Buffer),
            cache: None,
        }
    }

    fn params(&self) -> BatchNormParams<T> {
        let mut p = BatchNormParams::new(self.scale.value.len());
        p.scale = self.scale.value.clone();
        p.shift = self.shift.value.clone();
        p.running_mean = self.running_mean.value.clone();
        p.running_var = self.running_var.value.clone();
        p
    }

    pub fn forward(&mut self, x: &FloatTensor<T>, training: bool) -> Result<FloatTensor<T>> {
        let mut p = self.params();
        let (y, cache) = batchnorm_forward(x, &mut p, training)?;
        if training {
            self.running_mean.value = p.running_mean;
            self.running_var.value = p.running_var;
            self.cache = Some(cache);
        }
        Ok(y)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let cache = take(&mut self.cache, "batch norm")?;
        let (gx, gs, gb) = batchnorm_backward(&cache, &self.params(), g)?;
        self.scale.accumulate(gs.data());
        self.shift.accumulate(gb.data());
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for BnLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct ActLayer<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub zeta: Param<T>,
    pub kind: ActivationKind,
    cache: Option<FloatTensor<T>>,
}

impl<T: Real> ActLayer<T> {
    pub fn new(channels: usize, kind: ActivationKind) -> Self {
        let p = RpreluParams::new(channels, kind);
        Self {
            gamma: Param::new(p.gamma, ParamKind::Activation),
            beta: Param::new(p.beta, ParamKind::Activation),
            zeta: Param::new(p.zeta, ParamKind::Activation),
            kind,
            cache: None,
        }
    }

    fn params(&self) -> RpreluParams<T> {
        RpreluParams {
            gamma: self.gamma.value.clone(),
            beta: self.beta.value.clone(),
            zeta: self.zeta.value.clone(),
            kind: self.kind,
        }
    }

    pub fn forward(&mut self, x: FloatTensor<T>, training: bool) -> Result<FloatTensor<T>> {
        let y = rprelu_forward(&x, &self.params())?;
        if training {
            self.cache = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let x = take(&mut self.cache, "activation")?;
        let (gx, grads) = rprelu_backward(&x, &self.params(), g)?;
        self.gamma.accumulate(grads.gamma.data());
        self.beta.accumulate(grads.beta.data());
        self.zeta.accumulate(grads.zeta.data());
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for ActLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "zeta"), &mut self.zeta);
    }
}

/// How a binary FC mixes information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    /// Global channel FC applied to every token.
    Channel,
    /// Cycle-FC with the given receptive field.
    Local { receptive_h: usize, receptive_w: usize },
}

/// Options shared by every binary FC of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FcOptions {
    pub shortcut: ShortcutKind,
    pub activation: ActivationKind,
}

#[derive(Clone, Debug)]
struct FcCache<T: Real> {
    input: FloatTensor<T>,
    /// Mixer input as a `[rows, c_in]` matrix (after sign and gather).
    operand: FloatTensor<T>,
    weight_eff: Vec<T>,
    bin_act: bool,
    bin_weight: bool,
    ste: SteMode,
}

/// `act(BN(mix(sign(x), sign(W))) + U(sign(x)))`: the binary FC composite
/// shared by spatial and channel branches. Signs apply only when the run
/// mode asks for them and the layer family is binarizable.
#[derive(Clone, Debug)]
pub struct BinaryFc<T: Real> {
    pub mixer: Mixer,
    pub c_in: usize,
    pub c_out: usize,
    pub binarizable: bool,
    pub shortcut: bool,
    pub weight: Param<T>,
    pub bn: BnLayer<T>,
    pub act: ActLayer<T>,
    cache: Option<FcCache<T>>,
}

impl<T: Real> BinaryFc<T> {
    pub fn new(mixer: Mixer, c_in: usize, c_out: usize, binarizable: bool, opts: FcOptions, rng: &mut impl Rng) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid("binary FC widths must be ≥ 1"));
        }
        if matches!(mixer, Mixer::Local { receptive_h: 0, .. } | Mixer::Local { receptive_w: 0, .. }) {
            return Err(Error::invalid("receptive fields must be ≥ 1"));
        }
        let shortcut = opts.shortcut.applies(c_in, c_out);
        if shortcut && !c_in.is_multiple_of(c_out) && !c_out.is_multiple_of(c_in) {
            return Err(Error::invalid(format!(
                "uni-shortcut needs an integer channel ratio, got {c_in} → {c_out}"
            )));
        }
        Ok(Self {
            mixer,
            c_in,
            c_out,
            binarizable,
            shortcut,
            weight: Param::new(init_uniform(rng, &[c_in, c_out], c_in), ParamKind::LatentBinary),
            bn: BnLayer::new(c_out),
            act: ActLayer::new(c_out, opts.activation),
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &FloatTensor<T>, mode: Mode) -> Result<FloatTensor<T>> {
        if x.last_dim() != self.c_in {
            return Err(Error::shape(format!("binary FC expects {} channels, got {:?}", self.c_in, x.shape())));
        }
        let bin_act = mode.binarize_activations && self.binarizable;
        let bin_weight = mode.binarize_weights && self.binarizable;
        let xin = if bin_act { x.map(sign) } else { x.clone() };
        let operand = match self.mixer {
            Mixer::Channel => xin.clone().reshape(&[x.rows(), self.c_in])?,
            Mixer::Local { receptive_h, receptive_w } => {
                bhwc(x)?;
                let pad = if bin_act { -T::one() } else { T::zero() };
                cycle_gather(&xin, receptive_h, receptive_w, pad)?
            }
        };
        let weight_eff: Vec<T> = if bin_weight {
            self.weight.value.data().iter().map(|&w| sign(w)).collect()
        } else {
            self.weight.value.data().to_vec()
        };
        let rows = operand.rows();
        let mut z = vec![T::zero(); rows * self.c_out];
        if bin_act && bin_weight {
            let lhs = BitTensor::pack_rows(operand.data(), self.c_in);
            let rhs = BitTensor::pack_cols(&weight_eff, self.c_in, self.c_out);
            gemm_lanes(&lhs, &rhs, &mut z);
        } else {
            T::gemm(rows, self.c_in, self.c_out, operand.data(), false, &weight_eff, false, T::zero(), &mut z);
        }
        let z = FloatTensor::new(&with_last(x.shape(), self.c_out), z)?;
        let mut zn = self.bn.forward(&z, mode.training)?;
        if self.shortcut {
            zn.add_assign(&uni_shortcut(&xin, self.c_out)?)?;
        }
        let y = self.act.forward(zn, mode.training)?;
        if mode.training {
            self.cache = Some(FcCache {
                input: x.clone(),
                operand,
                weight_eff,
                bin_act,
                bin_weight,
                ste: mode.ste,
            });
        }
        Ok(y)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let c = take(&mut self.cache, "binary FC")?;
        let gzn = self.act.backward(g)?;
        let gz = self.bn.backward(&gzn)?;
        let rows = c.operand.rows();
        let mut gw = vec![T::zero(); self.c_in * self.c_out];
        T::gemm(self.c_in, rows, self.c_out, c.operand.data(), true, gz.data(), false, T::zero(), &mut gw);
        let mut gop = vec![T::zero(); rows * self.c_in];
        T::gemm(rows, self.c_out, self.c_in, gz.data(), false, &c.weight_eff, true, T::zero(), &mut gop);
        let gop = FloatTensor::new(&[rows, self.c_in], gop)?;
        let mut gx = match self.mixer {
            Mixer::Channel => gop.reshape(c.input.shape())?,
            Mixer::Local { receptive_h, receptive_w } => cycle_scatter(&gop, c.input.shape(), receptive_h, receptive_w)?,
        };
        if self.shortcut {
            gx.add_assign(&uni_shortcut_backward(&gzn, self.c_in)?)?;
        }
        if c.bin_act {
            ste_in_place(gx.data_mut(), c.input.data(), c.ste);
        }
        if c.bin_weight {
            ste_in_place(&mut gw, self.weight.value.data(), c.ste);
        }
        self.weight.accumulate(&gw);
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for BinaryFc<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        self.bn.visit_params(&join(prefix, "bn"), f);
        self.act.visit_params(&join(prefix, "act"), f);
    }
}

/// A chain of binary FCs forming one branch of an MBB block.
#[derive(Clone, Debug)]
pub struct Branch<T: Real> {
    pub name: String,
    pub layers: Vec<(String, BinaryFc<T>)>,
}

impl<T: Real> Branch<T> {
    pub fn forward(&mut self, x: &FloatTensor<T>, mode: Mode) -> Result<FloatTensor<T>> {
        let mut h = x.clone();
        for (_, l) in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let mut g = g.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }
}

/// Knobs of [`MbbBlock::new`] that come from the model config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub fc: FcOptions,
    pub receptive_field: usize,
    pub fusion: Fusion,
    pub residual: bool,
    pub binarize_local: bool,
    pub binarize_channel: bool,
}

/// Multi-branch binary block: every branch reads the block input, branch
/// outputs are fused, and an identity residual wraps the whole block.
#[derive(Clone, Debug)]
pub struct MbbBlock<T: Real> {
    pub spec: MbbBlockSpec,
    pub branches: Vec<Branch<T>>,
    pub fusion: Fusion,
    pub residual: bool,
}

impl<T: Real> MbbBlock<T> {
    pub fn new(prefix: &str, spec: MbbBlockSpec, opts: BlockOptions, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let mut branches = Vec::with_capacity(spec.branch_count());
        for i in 0..spec.s_count {
            let (rh, rw) = Orientation::of_branch(i, spec.s_count).receptive(opts.receptive_field);
            let local = Mixer::Local {
                receptive_h: rh,
                receptive_w: rw,
            };
            let name = spatial_branch_name(prefix, i, spec.s_count);
            let mut layers = vec![(
                "local".to_string(),
                BinaryFc::new(local, d, d, opts.binarize_local, opts.fc, rng)?,
            )];
            if spec.kind == BlockKind::Block1 {
                layers.push((
                    "channel".to_string(),
                    BinaryFc::new(Mixer::Channel, d, d, opts.binarize_channel, opts.fc, rng)?,
                ));
            }
            branches.push(Branch { name, layers });
        }
        for i in 0..spec.c_count {
            let name = format!("{prefix}.channel{i}");
            let layers = match spec.kind {
                BlockKind::Block1 => vec![(
                    "fc".to_string(),
                    BinaryFc::new(Mixer::Channel, d, d, opts.binarize_channel, opts.fc, rng)?,
                )],
                BlockKind::Block2 => {
                    let mid = d * spec.ratio;
                    vec![
                        ("fc1".to_string(), BinaryFc::new(Mixer::Channel, d, mid, opts.binarize_channel, opts.fc, rng)?),
                        ("fc2".to_string(), BinaryFc::new(Mixer::Channel, mid, d, opts.binarize_channel, opts.fc, rng)?),
                    ]
                }
            };
            branches.push(Branch { name, layers });
        }
        Ok(Self {
            spec,
            branches,
            fusion: opts.fusion,
            residual: opts.residual,
        })
    }

    fn branch_weight(&self) -> T {
        match self.fusion {
            Fusion::Mean => T::one() / T::of(self.branches.len() as f64),
            Fusion::Sum => T::one(),
        }
    }

    pub fn forward(&mut self, x: &FloatTensor<T>, mode: Mode) -> Result<FloatTensor<T>> {
        let mut acc = FloatTensor::zeros(x.shape());
        for b in &mut self.branches {
            acc.add_assign(&b.forward(x, mode)?)?;
        }
        if self.fusion == Fusion::Mean {
            let n = T::of(self.branches.len() as f64);
            acc.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        if self.residual {
            acc.add_assign(x)?;
        }
        Ok(acc)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let mut gb = g.clone();
        gb.scale(self.branch_weight());
        let mut gx = if self.residual { g.clone() } else { FloatTensor::zeros(g.shape()) };
        for b in &mut self.branches {
            gx.add_assign(&b.backward(&gb)?)?;
        }
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for MbbBlock<T> {
    fn visit_params(&mut self, _prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for b in &mut self.branches {
            for (name, l) in &mut b.layers {
                l.visit_params(&join(&b.name, name), f);
            }
        }
    }
}

/// Full-precision convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<FloatTensor<T>>,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan_in = kernel * kernel * c_in;
        Self {
            weight: Param::new(init_uniform(rng, &[fan_in, c_out], fan_in), ParamKind::Weight),
            bias: Param::new(FloatTensor::zeros(&[c_out]), ParamKind::Bias),
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn params(&self) -> Result<Conv2dParams<T>> {
        Conv2dParams::new(
            self.weight.value.clone(),
            Some(self.bias.value.clone()),
            self.kernel,
            self.stride,
            self.padding,
        )
    }

    pub fn forward(&mut self, x: &FloatTensor<T>, training: bool) -> Result<FloatTensor<T>> {
        let y = conv2d_forward(x, &self.params()?)?;
        if training {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let x = take(&mut self.cache, "convolution")?;
        let (gx, gw, gb) = conv2d_backward(&x, &self.params()?, g)?;
        self.weight.accumulate(gw.data());
        self.bias.accumulate(gb.expect("conv layer has a bias").data());
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for ConvLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Full-precision token-wise linear layer with bias.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<FloatTensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(init_uniform(rng, &[c_in, c_out], c_in), ParamKind::Weight),
            bias: Param::new(FloatTensor::zeros(&[c_out]), ParamKind::Bias),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &FloatTensor<T>, training: bool) -> Result<FloatTensor<T>> {
        let (d_in, d_out) = (self.in_dim(), self.out_dim());
        if x.last_dim() != d_in {
            return Err(Error::shape(format!("linear layer expects {d_in} channels, got {:?}", x.shape())));
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * d_out);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.value.data());
        }
        T::gemm(rows, d_in, d_out, x.data(), false, self.weight.value.data(), false, T::one(), &mut out);
        if training {
            self.cache = Some(x.clone());
        }
        FloatTensor::new(&with_last(x.shape(), d_out), out)
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let x = take(&mut self.cache, "linear layer")?;
        let (d_in, d_out, rows) = (self.in_dim(), self.out_dim(), x.rows());
        let mut gw = vec![T::zero(); d_in * d_out];
        T::gemm(d_in, rows, d_out, x.data(), true, g.data(), false, T::zero(), &mut gw);
        let mut gb = vec![T::zero(); d_out];
        for r in g.data().chunks_exact(d_out) {
            for (a, &v) in gb.iter_mut().zip(r) {
                *a += v;
            }
        }
        let mut gx = vec![T::zero(); rows * d_in];
        T::gemm(rows, d_out, d_in, g.data(), false, self.weight.value.data(), true, T::zero(), &mut gx);
        self.weight.accumulate(&gw);
        self.bias.accumulate(&gb);
        FloatTensor::new(x.shape(), gx)
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Full-precision transition between stages.
#[derive(Clone, Debug)]
pub enum Downsample<T: Real> {
    Pool {
        fc: Linear<T>,
        kernels: Vec<usize>,
        cache: Option<(Vec<usize>, Vec<Vec<u32>>)>,
    },
    Conv(ConvLayer<T>),
}

impl<T: Real> Downsample<T> {
    pub fn new(spec: &DownsampleSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::invalid("downsample widths must be ≥ 1"));
        }
        Ok(match spec.kind {
            DownsampleKind::Pool => {
                if spec.pool_kernels.is_empty() || spec.pool_kernels.contains(&0) {
                    return Err(Error::invalid("downsample needs at least one pool kernel ≥ 1"));
                }
                Downsample::Pool {
                    fc: Linear::new(spec.in_dim, spec.out_dim, rng),
                    kernels: spec.pool_kernels.clone(),
                    cache: None,
                }
            }
            DownsampleKind::Conv3x3 => Downsample::Conv(ConvLayer::new(spec.in_dim, spec.out_dim, 3, 2, 1, rng)),
        })
    }

    pub fn forward(&mut self, x: &FloatTensor<T>, training: bool) -> Result<FloatTensor<T>> {
        match self {
            Downsample::Pool { fc, kernels, cache } => {
                let h = fc.forward(x, training)?;
                let inv = T::one() / T::of(kernels.len() as f64);
                let mut acc: Option<FloatTensor<T>> = None;
                let mut idx = Vec::with_capacity(kernels.len());
                for &k in kernels.iter() {
                    let (mut y, am) = maxpool_forward(&h, k, 2)?;
                    y.scale(inv);
                    match &mut acc {
                        Some(a) => a.add_assign(&y)?,
                        None => acc = Some(y),
                    }
                    idx.push(am);
                }
                if training {
                    *cache = Some((h.shape().to_vec(), idx));
                }
                Ok(acc.expect("at least one kernel"))
            }
            Downsample::Conv(c) => c.forward(x, training),
        }
    }

    pub fn backward(&mut self, g: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        match self {
            Downsample::Pool { fc, kernels, cache } => {
                let (shape, idx) = take(cache, "downsample")?;
                let mut gs = g.clone();
                gs.scale(T::one() / T::of(kernels.len() as f64));
                let mut gh = FloatTensor::zeros(&shape);
                for am in &idx {
                    gh.add_assign(&maxpool_backward(&shape, am, &gs)?)?;
                }
                fc.backward(&gh)
            }
            Downsample::Conv(c) => c.backward(g),
        }
    }
}

impl<T: Real> Parameterized<T> for Downsample<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Downsample::Pool { fc, .. } => fc.visit_params(&join(prefix, "fc"), f),
            Downsample::Conv(c) => c.visit_params(&join(prefix, "conv"), f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts() -> BlockOptions {
        BlockOptions {
            fc: FcOptions {
                shortcut: ShortcutKind::Uni,
                activation: ActivationKind::Rprelu,
            },
            receptive_field: 3,
            fusion: Fusion::Mean,
            residual: true,
            binarize_local: true,
            binarize_channel: true,
        }
    }

    fn input(shape: &[usize], seed: u64) -> FloatTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FloatTensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn blocks_preserve_shape_for_branch_settings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = input(&[2, 4, 5, 8], 2);
        for (s1, c1, s2, c2) in [(2, 1, 2, 1), (4, 0, 0, 2), (2, 0, 2, 0), (0, 1, 0, 1)] {
            for (kind, s, c) in [(BlockKind::Block1, s1, c1), (BlockKind::Block2, s2, c2)] {
                let spec = MbbBlockSpec { kind, s_count: s, c_count: c, dim: 8, ratio: 4 };
                let mut b = MbbBlock::<f64>::new("b", spec, opts(), &mut rng).unwrap();
                assert_eq!(b.branches.len(), s + c);
                for mode in [Mode::full_precision(true), Mode::binary(true), Mode::binary(false)] {
                    assert_eq!(b.forward(&x, mode).unwrap().shape(), x.shape());
                }
            }
        }
    }

    #[test]
    fn identical_branches_fuse_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MbbBlockSpec { kind: BlockKind::Block1, s_count: 0, c_count: 1, dim: 4, ratio: 1 };
        let mut one = MbbBlock::<f64>::new("b", spec, BlockOptions { residual: false, ..opts() }, &mut rng).unwrap();
        let x = input(&[1, 3, 3, 4], 9);
        let mode = Mode::binary(false);
        let single = one.forward(&x, mode).unwrap();
        for n in [2, 4] {
            let mut many = one.clone();
            let b = many.branches[0].clone();
            many.branches.resize(n, b);
            assert_eq!(many.forward(&x, mode).unwrap(), single);
        }
    }

    #[test]
    fn zero_weight_fc_passes_the_binarized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o = FcOptions {
            shortcut: ShortcutKind::Uni,
            activation: ActivationKind::Prelu,
        };
        for mixer in [Mixer::Channel, Mixer::Local { receptive_h: 3, receptive_w: 1 }] {
            let mut fc = BinaryFc::<f64>::new(mixer, 4, 4, true, o, &mut rng).unwrap();
            fc.weight.value.fill(0.0);
            fc.act.beta.value.fill(1.0);
            let x = input(&[1, 3, 3, 4], 4);
            let y = fc.forward(&x, Mode { binarize_weights: false, ..Mode::binary(false) }).unwrap();
            assert_eq!(y, x.map(sign));
        }
    }

    #[test]
    fn binary_path_matches_float_path_on_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let o = FcOptions {
            shortcut: ShortcutKind::Uni,
            activation: ActivationKind::Rprelu,
        };
        let mut fc = BinaryFc::<f64>::new(Mixer::Local { receptive_h: 1, receptive_w: 3 }, 6, 6, true, o, &mut rng).unwrap();
        let x = input(&[2, 3, 4, 6], 11);
        let bits = fc.forward(&x, Mode::binary(false)).unwrap();
        let mut float = fc.clone();
        float.weight.value = float.weight.value.map(sign);
        let signs_only = Mode { binarize_weights: false, ..Mode::binary(false) };
        let plain = float.forward(&x, signs_only).unwrap();
        assert!(bits.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn downsample_halves_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for h in [7, 8, 14, 28] {
            for kind in [DownsampleKind::Pool, DownsampleKind::Conv3x3] {
                let spec = DownsampleSpec { in_dim: 4, out_dim: 8, kind, pool_kernels: vec![3, 5, 7] };
                let mut d = Downsample::<f32>::new(&spec, &mut rng).unwrap();
                let y = d.forward(&FloatTensor::zeros(&[1, h, h, 4]), false).unwrap();
                assert_eq!(y.shape(), &[1, h.div_ceil(2), h.div_ceil(2), 8]);
            }
        }
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = DownsampleSpec { in_dim: 1, out_dim: 1, kind: DownsampleKind::Pool, pool_kernels: vec![2] };
        let mut d = Downsample::<f32>::new(&spec, &mut rng).unwrap();
        if let Downsample::Pool { fc, .. } = &mut d {
            fc.weight.value.fill(1.0);
        }
        let y = d.forward(&FloatTensor::full(&[1, 4, 4, 1], 3.0), false).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
    }
}

//! Declarative model description, presets, validation and the static layer
//! listing used by the complexity analyzer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv_out_extent;
use crate::layers::pool::same_padding;
use crate::layers::{ActivationKind, ShortcutKind};

/// Version of the model-config and checkpoint manifest schema.
pub const SCHEMA_VERSION: u32 = 1;

/// A layer with a matmul-class cost.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        out_h: usize,
        out_w: usize,
    },
    /// Token-wise channel mixing over `tokens` rows.
    ChannelFc { c_in: usize, c_out: usize, tokens: usize },
    /// Cycle-FC local mixing.
    LocalFc {
        c_in: usize,
        c_out: usize,
        tokens: usize,
        receptive_h: usize,
        receptive_w: usize,
    },
    /// Cross-token mixing with a fixed token count.
    SpatialFc { n_in: usize, n_out: usize, channels: usize },
    MaxPool { kernel: usize, channels: usize, out_h: usize, out_w: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub binary: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, binary: bool) -> Self {
        Self {
            name: name.into(),
            kind,
            binary,
        }
    }

    /// Multiply-accumulate count: `C_in·C_out·K_h·K_w·H·W` for convolutions
    /// and the matching product for the FC family; zero for pooling.
    pub fn macs(&self) -> u64 {
        let m = |xs: &[usize]| xs.iter().map(|&x| x as u64).product::<u64>();
        match self.kind {
            LayerKind::Conv {
                c_in,
                c_out,
                kernel_h,
                kernel_w,
                out_h,
                out_w,
                ..
            } => m(&[c_in, c_out, kernel_h, kernel_w, out_h, out_w]),
            LayerKind::ChannelFc { c_in, c_out, tokens } | LayerKind::LocalFc { c_in, c_out, tokens, .. } => {
                m(&[c_in, c_out, tokens])
            }
            LayerKind::SpatialFc { n_in, n_out, channels } => m(&[n_in, n_out, channels]),
            LayerKind::MaxPool { .. } => 0,
        }
    }

    /// Length of the dot product behind every output value.
    pub fn reduction_len(&self) -> Option<u64> {
        match self.kind {
            LayerKind::Conv {
                c_in, kernel_h, kernel_w, ..
            } => Some((c_in * kernel_h * kernel_w) as u64),
            LayerKind::ChannelFc { c_in, .. } | LayerKind::LocalFc { c_in, .. } => Some(c_in as u64),
            LayerKind::SpatialFc { n_in, .. } => Some(n_in as u64),
            LayerKind::MaxPool { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Spatial binary MLPs plus channel binary FCs.
    Block1,
    /// Spatial binary FCs plus channel binary MLPs.
    Block2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleKind {
    /// Full-precision 1×1 FC followed by mean-fused stride-2 max pools.
    #[default]
    Pool,
    /// Full-precision 3×3 stride-2 convolution.
    Conv3x3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Height,
    Width,
}

impl Orientation {
    /// `(S_H, S_W)` for a receptive field of `r` along this axis.
    pub fn receptive(self, r: usize) -> (usize, usize) {
        match self {
            Orientation::Height => (r, 1),
            Orientation::Width => (1, r),
        }
    }

    /// The first half of the spatial branches mix along height, the rest along width.
    pub fn of_branch(i: usize, s_count: usize) -> Self {
        if i < s_count / 2 {
            Orientation::Height
        } else {
            Orientation::Width
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Orientation::Height => "h",
            Orientation::Width => "w",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MbbBlockSpec {
    pub kind: BlockKind,
    pub s_count: usize,
    pub c_count: usize,
    pub dim: usize,
    pub ratio: usize,
}

impl MbbBlockSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        block_errors(self.kind, self.s_count, self.c_count, &mut errs);
        if self.dim == 0 {
            errs.push("block dim must be ≥ 1".into());
        }
        if self.ratio == 0 {
            errs.push("block ratio must be ≥ 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn branch_count(&self) -> usize {
        self.s_count + self.c_count
    }
}

fn block_errors(kind: BlockKind, s: usize, c: usize, errs: &mut Vec<String>) {
    let label = match kind {
        BlockKind::Block1 => "block1",
        BlockKind::Block2 => "block2",
    };
    if !s.is_multiple_of(2) {
        errs.push(format!("{label}: spatial branch count {s} must be even"));
    }
    if s + c == 0 {
        errs.push(format!("{label}: needs at least one branch"));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DownsampleSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kind: DownsampleKind,
    pub pool_kernels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub dim: usize,
    pub ratio: usize,
    /// Number of (block-1, block-2) pairs.
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// `(#S, #C)` branch counts of one block kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchCounts {
    pub spatial: usize,
    pub channel: usize,
}

/// Which layer families are binarized when the run mode asks for binary
/// layers. Stem, downsampling and head are always full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinarizeSpec {
    pub local_fc: bool,
    pub channel_fc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub schema: u32,
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub block1: BranchCounts,
    pub block2: BranchCounts,
    /// Cycle-FC receptive field along the mixing axis.
    pub receptive_field: usize,
    pub fusion: Fusion,
    pub shortcut: ShortcutKind,
    /// Identity residual around each whole block.
    pub block_residual: bool,
    pub activation: ActivationKind,
    pub downsample: DownsampleKind,
    pub pool_kernels: Vec<usize>,
    pub binarize: BinarizeSpec,
}

pub const PRESETS: [&str; 3] = ["bimlp-s", "bimlp-m", "tiny"];

impl ModelSpec {
    fn base(name: &str, dims: [usize; 4], depths: [usize; 4], in_channels: usize, num_classes: usize, receptive: usize) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            name: name.into(),
            in_channels,
            num_classes,
            stem: StemSpec {
                kernel: 7,
                stride: 4,
                padding: 2,
            },
            stages: dims
                .iter()
                .zip(depths)
                .map(|(&dim, depth)| StageSpec { dim, ratio: 4, depth })
                .collect(),
            block1: BranchCounts { spatial: 2, channel: 1 },
            block2: BranchCounts { spatial: 2, channel: 1 },
            receptive_field: receptive,
            fusion: Fusion::Mean,
            shortcut: ShortcutKind::Uni,
            block_residual: true,
            activation: ActivationKind::Rprelu,
            downsample: DownsampleKind::Pool,
            pool_kernels: vec![3, 5, 7],
            binarize: BinarizeSpec {
                local_fc: true,
                channel_fc: true,
            },
        }
    }

    pub fn bimlp_s() -> Self {
        Self::base("bimlp-s", [64, 128, 320, 512], [2, 2, 4, 2], 3, 1000, 7)
    }

    pub fn bimlp_m() -> Self {
        Self::base("bimlp-m", [64, 128, 320, 512], [2, 3, 10, 3], 3, 1000, 7)
    }

    /// Desk-scale model for 32×32 single-channel inputs.
    pub fn tiny() -> Self {
        Self::base("tiny", [16, 32, 64, 128], [1, 1, 2, 1], 1, 10, 3)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bimlp-s" => Ok(Self::bimlp_s()),
            "bimlp-m" => Ok(Self::bimlp_m()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(vec![format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )])),
        }
    }

    /// Reports every violated constraint at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.schema != SCHEMA_VERSION {
            errs.push(format!("schema {} is not supported (expected {SCHEMA_VERSION})", self.schema));
        }
        if self.in_channels == 0 {
            errs.push("in_channels must be ≥ 1".into());
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be ≥ 1".into());
        }
        if self.stem.kernel == 0 || self.stem.stride == 0 {
            errs.push("stem kernel and stride must be ≥ 1".into());
        }
        if self.stages.is_empty() {
            errs.push("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 {
                errs.push(format!("stages[{i}].dim must be ≥ 1"));
            }
            if s.ratio == 0 {
                errs.push(format!("stages[{i}].ratio must be ≥ 1"));
            }
        }
        block_errors(BlockKind::Block1, self.block1.spatial, self.block1.channel, &mut errs);
        block_errors(BlockKind::Block2, self.block2.spatial, self.block2.channel, &mut errs);
        if self.receptive_field == 0 {
            errs.push("receptive_field must be ≥ 1".into());
        }
        if self.downsample == DownsampleKind::Pool {
            if self.pool_kernels.is_empty() {
                errs.push("pool_kernels needs at least one kernel".into());
            }
            if self.pool_kernels.contains(&0) {
                errs.push("pool kernels must be ≥ 1".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn block_spec(&self, stage: usize, kind: BlockKind) -> MbbBlockSpec {
        let counts = match kind {
            BlockKind::Block1 => self.block1,
            BlockKind::Block2 => self.block2,
        };
        let s = self.stages[stage];
        MbbBlockSpec {
            kind,
            s_count: counts.spatial,
            c_count: counts.channel,
            dim: s.dim,
            ratio: s.ratio,
        }
    }

    /// Transition into `stage` (which must be ≥ 1).
    pub fn downsample_spec(&self, stage: usize) -> DownsampleSpec {
        DownsampleSpec {
            in_dim: self.stages[stage - 1].dim,
            out_dim: self.stages[stage].dim,
            kind: self.downsample,
            pool_kernels: self.pool_kernels.clone(),
        }
    }

    /// Spatial extents entering each stage for an `h×w` input.
    pub fn stage_extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let st = self.stem;
        let mut cur = (
            conv_out_extent(h, st.kernel, st.stride, st.padding)?,
            conv_out_extent(w, st.kernel, st.stride, st.padding)?,
        );
        let mut out = vec![cur];
        for _ in 1..self.stages.len() {
            cur = (cur.0.div_ceil(2), cur.1.div_ceil(2));
            out.push(cur);
        }
        Ok(out)
    }

    /// Every matmul-class layer of the model on an `h×w` input, in execution order.
    pub fn layers(&self, h: usize, w: usize) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let extents = self.stage_extents(h, w)?;
        let mut out = Vec::new();
        let (sh, sw) = extents[0];
        out.push(LayerSpec::new(
            "stem",
            LayerKind::Conv {
                c_in: self.in_channels,
                c_out: self.stages[0].dim,
                kernel_h: self.stem.kernel,
                kernel_w: self.stem.kernel,
                stride: self.stem.stride,
                padding: self.stem.padding,
                out_h: sh,
                out_w: sw,
            },
            false,
        ));
        for (si, stage) in self.stages.iter().enumerate() {
            let (eh, ew) = extents[si];
            if si > 0 {
                let prev = extents[si - 1];
                self.downsample_layers(si, prev, (eh, ew), &mut out);
            }
            let tokens = eh * ew;
            for p in 0..stage.depth {
                for kind in [BlockKind::Block1, BlockKind::Block2] {
                    let spec = self.block_spec(si, kind);
                    let prefix = block_name(si, p, kind);
                    self.block_layers(&prefix, &spec, tokens, &mut out);
                }
            }
        }
        out.push(LayerSpec::new(
            "head",
            LayerKind::ChannelFc {
                c_in: self.stages.last().expect("validated").dim,
                c_out: self.num_classes,
                tokens: 1,
            },
            false,
        ));
        Ok(out)
    }

    fn downsample_layers(&self, si: usize, prev: (usize, usize), next: (usize, usize), out: &mut Vec<LayerSpec>) {
        let d = self.downsample_spec(si);
        let prefix = format!("down{si}");
        match d.kind {
            DownsampleKind::Pool => {
                out.push(LayerSpec::new(
                    format!("{prefix}.fc"),
                    LayerKind::ChannelFc {
                        c_in: d.in_dim,
                        c_out: d.out_dim,
                        tokens: prev.0 * prev.1,
                    },
                    false,
                ));
                for &k in &d.pool_kernels {
                    out.push(LayerSpec::new(
                        format!("{prefix}.pool{k}"),
                        LayerKind::MaxPool {
                            kernel: k,
                            channels: d.out_dim,
                            out_h: same_padding(prev.0, k, 2).0,
                            out_w: same_padding(prev.1, k, 2).0,
                        },
                        false,
                    ));
                }
            }
            DownsampleKind::Conv3x3 => out.push(LayerSpec::new(
                format!("{prefix}.conv"),
                LayerKind::Conv {
                    c_in: d.in_dim,
                    c_out: d.out_dim,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 2,
                    padding: 1,
                    out_h: next.0,
                    out_w: next.1,
                },
                false,
            )),
        }
    }

    fn block_layers(&self, prefix: &str, b: &MbbBlockSpec, tokens: usize, out: &mut Vec<LayerSpec>) {
        let (lb, cb) = (self.binarize.local_fc, self.binarize.channel_fc);
        let local = |i: usize| {
            let (rh, rw) = Orientation::of_branch(i, b.s_count).receptive(self.receptive_field);
            LayerKind::LocalFc {
                c_in: b.dim,
                c_out: b.dim,
                tokens,
                receptive_h: rh,
                receptive_w: rw,
            }
        };
        let fc = |c_in, c_out| LayerKind::ChannelFc { c_in, c_out, tokens };
        for i in 0..b.s_count {
            let name = spatial_branch_name(prefix, i, b.s_count);
            match b.kind {
                BlockKind::Block1 => {
                    out.push(LayerSpec::new(format!("{name}.local"), local(i), lb));
                    out.push(LayerSpec::new(format!("{name}.channel"), fc(b.dim, b.dim), cb));
                }
                BlockKind::Block2 => out.push(LayerSpec::new(format!("{name}.local"), local(i), lb)),
            }
        }
        for i in 0..b.c_count {
            let name = format!("{prefix}.channel{i}");
            match b.kind {
                BlockKind::Block1 => out.push(LayerSpec::new(format!("{name}.fc"), fc(b.dim, b.dim), cb)),
                BlockKind::Block2 => {
                    let mid = b.dim * b.ratio;
                    out.push(LayerSpec::new(format!("{name}.fc1"), fc(b.dim, mid), cb));
                    out.push(LayerSpec::new(format!("{name}.fc2"), fc(mid, b.dim), cb));
                }
            }
        }
    }
}

pub(crate) fn block_name(stage: usize, pair: usize, kind: BlockKind) -> String {
    let k = match kind {
        BlockKind::Block1 => "block1",
        BlockKind::Block2 => "block2",
    };
    format!("stage{stage}.pair{pair}.{k}")
}

pub(crate) fn spatial_branch_name(prefix: &str, i: usize, s_count: usize) -> String {
    format!("{prefix}.spatial{i}_{}", Orientation::of_branch(i, s_count).tag())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_published_layout() {
        let s = ModelSpec::bimlp_s();
        assert_eq!(s.stages.iter().map(|s| s.dim).collect::<Vec<_>>(), vec![64, 128, 320, 512]);
        assert_eq!(s.stages.iter().map(|s| s.depth).collect::<Vec<_>>(), vec![2, 2, 4, 2]);
        assert!(s.stages.iter().all(|s| s.ratio == 4));
        let m = ModelSpec::bimlp_m();
        assert_eq!(m.stages.iter().map(|s| s.depth).collect::<Vec<_>>(), vec![2, 3, 10, 3]);
        let t = ModelSpec::tiny();
        assert_eq!(t.stages.iter().map(|s| s.dim).collect::<Vec<_>>(), vec![16, 32, 64, 128]);
        assert_eq!(t.stages.iter().map(|s| s.depth).collect::<Vec<_>>(), vec![1, 1, 2, 1]);
    }

    #[test]
    fn toml_round_trip() {
        for name in PRESETS {
            let spec = ModelSpec::preset(name).unwrap();
            assert_eq!(ModelSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        }
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut s = ModelSpec::tiny();
        s.block1.spatial = 3;
        s.num_classes = 0;
        s.pool_kernels.clear();
        match s.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        assert!(ModelSpec::from_toml("schema = 1\nbogus = 3").is_err());
    }

    #[test]
    fn stage_extents_halve() {
        let s = ModelSpec::bimlp_s();
        assert_eq!(s.stage_extents(224, 224).unwrap(), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
        assert_eq!(ModelSpec::tiny().stage_extents(32, 32).unwrap(), vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
    }

    #[test]
    fn odd_spatial_count_is_rejected() {
        let b = MbbBlockSpec {
            kind: BlockKind::Block1,
            s_count: 1,
            c_count: 1,
            dim: 8,
            ratio: 4,
        };
        assert!(b.validate().is_err());
        assert!(MbbBlockSpec { s_count: 2, ..b }.validate().is_ok());
    }
}

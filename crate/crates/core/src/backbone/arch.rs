//! Architecture registry. Each architecture is enumerated as an ordered list
//! of layer specs (the snapshot/accounting view) plus an execution plan of
//! nodes (the wiring view, which also carries residual structure). Parameter
//! arithmetic needs only the enumeration, never materialized weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchId {
    Resnet50,
    Tiny,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Resnet50 => "resnet50",
            ArchId::Tiny => "tiny",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(ArchId::Resnet50),
            "tiny" => Ok(ArchId::Tiny),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Bn,
    Pool,
    Activation,
    NeckBn,
}

/// Network stage a layer belongs to; used to resolve placement selections
/// such as "adapters on stages 2-4 only".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Stem,
    S1,
    S2,
    S3,
    S4,
    Head,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stem" | "0" => Ok(Stage::Stem),
            "1" => Ok(Stage::S1),
            "2" => Ok(Stage::S2),
            "3" => Ok(Stage::S3),
            "4" => Ok(Stage::S4),
            other => Err(Error::InvalidConfig(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialMeta {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub spatial_meta: Option<SpatialMeta>,
    pub frozen: bool,
    pub stage: Stage,
}

/// Conv layer description used both for enumeration and to materialize
/// weights later.
#[derive(Debug, Clone, Copy)]
pub struct ConvMeta {
    pub spec_index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub stage: Stage,
}

impl ConvMeta {
    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }
}

/// Execution wiring. Conv nodes reference conv ordinals, Bn nodes reference
/// body-BN ordinals; the global pool and the neck are appended by the driver.
#[derive(Debug, Clone)]
pub enum Node {
    Conv(usize),
    Bn(usize),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Residual {
        body: Vec<Node>,
        shortcut: Vec<Node>,
    },
}

#[derive(Debug, Clone)]
pub struct ArchPlan {
    pub arch: ArchId,
    pub specs: Vec<LayerSpec>,
    pub nodes: Vec<Node>,
    pub convs: Vec<ConvMeta>,
    /// Channel width of each body BN, in capture order.
    pub bn_channels: Vec<usize>,
    pub bn_spec_index: Vec<usize>,
    pub feature_dim: usize,
    pub neck_spec_index: usize,
    pub min_input: (usize, usize),
}

impl ArchPlan {
    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    /// Body BN layer count; the neck adds one more snapshotted layer.
    pub fn bn_count(&self) -> usize {
        self.bn_channels.len()
    }

    pub fn conv_param_count(&self) -> usize {
        self.convs.iter().map(ConvMeta::param_count).sum()
    }

    /// Sum of conv output channels, which equals the body BN channel sum.
    pub fn conv_channel_sum(&self) -> usize {
        self.convs.iter().map(|c| c.out_channels).sum()
    }

    pub fn bn_affine_count_body(&self) -> usize {
        2 * self.bn_channels.iter().sum::<usize>()
    }

    pub fn bn_full_count_with_neck(&self) -> usize {
        4 * (self.bn_channels.iter().sum::<usize>() + self.feature_dim)
    }

    /// Conv ordinal -> spec index.
    pub fn conv_spec_index(&self, ordinal: usize) -> usize {
        self.convs[ordinal].spec_index
    }

    /// Spec index -> conv ordinal, if that spec is a conv layer.
    pub fn conv_ordinal_of_spec(&self, spec_index: usize) -> Option<usize> {
        self.convs.iter().position(|c| c.spec_index == spec_index)
    }
}

struct PlanBuilder {
    specs: Vec<LayerSpec>,
    convs: Vec<ConvMeta>,
    bn_channels: Vec<usize>,
    bn_spec_index: Vec<usize>,
}

impl PlanBuilder {
    fn new() -> Self {
        PlanBuilder {
            specs: Vec::new(),
            convs: Vec::new(),
            bn_channels: Vec::new(),
            bn_spec_index: Vec::new(),
        }
    }

    fn conv(
        &mut self,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        stage: Stage,
    ) -> Node {
        let spec_index = self.specs.len();
        self.specs.push(LayerSpec {
            index: spec_index,
            kind: LayerKind::Conv,
            out_channels: out_c,
            spatial_meta: Some(SpatialMeta {
                kernel,
                stride,
                padding,
            }),
            frozen: true,
            stage,
        });
        let ordinal = self.convs.len();
        self.convs.push(ConvMeta {
            spec_index,
            in_channels: in_c,
            out_channels: out_c,
            kernel,
            stride,
            padding,
            stage,
        });
        Node::Conv(ordinal)
    }

    fn bn(&mut self, channels: usize, stage: Stage) -> Node {
        let spec_index = self.specs.len();
        self.specs.push(LayerSpec {
            index: spec_index,
            kind: LayerKind::Bn,
            out_channels: channels,
            spatial_meta: None,
            frozen: false,
            stage,
        });
        let ordinal = self.bn_channels.len();
        self.bn_channels.push(channels);
        self.bn_spec_index.push(spec_index);
        Node::Bn(ordinal)
    }

    fn relu(&mut self, channels: usize, stage: Stage) -> Node {
        self.specs.push(LayerSpec {
            index: self.specs.len(),
            kind: LayerKind::Activation,
            out_channels: channels,
            spatial_meta: None,
            frozen: true,
            stage,
        });
        Node::Relu
    }

    fn max_pool(
        &mut self,
        kernel: usize,
        stride: usize,
        padding: usize,
        channels: usize,
        stage: Stage,
    ) -> Node {
        self.specs.push(LayerSpec {
            index: self.specs.len(),
            kind: LayerKind::Pool,
            out_channels: channels,
            spatial_meta: Some(SpatialMeta {
                kernel,
                stride,
                padding,
            }),
            frozen: true,
            stage,
        });
        Node::MaxPool {
            kernel,
            stride,
            padding,
        }
    }

    fn global_pool_spec(&mut self, channels: usize) {
        self.specs.push(LayerSpec {
            index: self.specs.len(),
            kind: LayerKind::Pool,
            out_channels: channels,
            spatial_meta: None,
            frozen: true,
            stage: Stage::Head,
        });
    }

    fn neck_spec(&mut self, channels: usize) -> usize {
        let index = self.specs.len();
        self.specs.push(LayerSpec {
            index,
            kind: LayerKind::NeckBn,
            out_channels: channels,
            spatial_meta: None,
            frozen: false,
            stage: Stage::Head,
        });
        index
    }
}

/// Enumerate an architecture without materializing any weights.
pub fn arch_plan(arch: ArchId) -> ArchPlan {
    match arch {
        ArchId::Tiny => tiny_plan(),
        ArchId::Resnet50 => resnet50_plan(),
    }
}

/// Three 3x3 conv layers 3 -> 8 -> 16 -> 32 with max pooling between them;
/// exists so the whole pipeline runs in CPU minutes.
fn tiny_plan() -> ArchPlan {
    let mut b = PlanBuilder::new();
    let mut nodes = Vec::new();
    let widths = [(3usize, 8usize, Stage::S1), (8, 16, Stage::S2), (16, 32, Stage::S3)];
    for (i, &(in_c, out_c, stage)) in widths.iter().enumerate() {
        nodes.push(b.conv(in_c, out_c, 3, 1, 1, stage));
        nodes.push(b.bn(out_c, stage));
        nodes.push(b.relu(out_c, stage));
        if i < 2 {
            nodes.push(b.max_pool(2, 2, 0, out_c, stage));
        }
    }
    b.global_pool_spec(32);
    let neck_spec_index = b.neck_spec(32);
    ArchPlan {
        arch: ArchId::Tiny,
        specs: b.specs,
        nodes,
        convs: b.convs,
        bn_channels: b.bn_channels,
        bn_spec_index: b.bn_spec_index,
        feature_dim: 32,
        neck_spec_index,
        min_input: (4, 4),
    }
}

/// The standard 50-layer bottleneck network: 7x7 stem, four stages of
/// (3, 4, 6, 3) bottleneck blocks, 53 conv layers in total.
fn resnet50_plan() -> ArchPlan {
    let mut b = PlanBuilder::new();
    let mut nodes = Vec::new();

    nodes.push(b.conv(3, 64, 7, 2, 3, Stage::Stem));
    nodes.push(b.bn(64, Stage::Stem));
    nodes.push(b.relu(64, Stage::Stem));
    nodes.push(b.max_pool(3, 2, 1, 64, Stage::Stem));

    let stages: [(usize, usize, usize, usize, Stage); 4] = [
        (64, 64, 3, 1, Stage::S1),
        (256, 128, 4, 2, Stage::S2),
        (512, 256, 6, 2, Stage::S3),
        (1024, 512, 3, 2, Stage::S4),
    ];
    for &(stage_in, mid, blocks, stage_stride, stage) in stages.iter() {
        let out = mid * 4;
        for block in 0..blocks {
            let (in_c, stride) = if block == 0 {
                (stage_in, stage_stride)
            } else {
                (out, 1)
            };
            let mut body = Vec::new();
            body.push(b.conv(in_c, mid, 1, 1, 0, stage));
            body.push(b.bn(mid, stage));
            body.push(b.relu(mid, stage));
            body.push(b.conv(mid, mid, 3, stride, 1, stage));
            body.push(b.bn(mid, stage));
            body.push(b.relu(mid, stage));
            body.push(b.conv(mid, out, 1, 1, 0, stage));
            body.push(b.bn(out, stage));
            let shortcut = if block == 0 {
                vec![b.conv(in_c, out, 1, stride, 0, stage), b.bn(out, stage)]
            } else {
                Vec::new()
            };
            nodes.push(Node::Residual { body, shortcut });
            nodes.push(b.relu(out, stage));
        }
    }

    b.global_pool_spec(2048);
    let neck_spec_index = b.neck_spec(2048);
    ArchPlan {
        arch: ArchId::Resnet50,
        specs: b.specs,
        nodes,
        convs: b.convs,
        bn_channels: b.bn_channels,
        bn_spec_index: b.bn_spec_index,
        feature_dim: 2048,
        neck_spec_index,
        min_input: (32, 32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_enumeration() {
        let plan = arch_plan(ArchId::Tiny);
        assert_eq!(plan.conv_count(), 3);
        assert_eq!(plan.bn_count(), 3);
        assert_eq!(plan.feature_dim, 32);
        // 3*8*9 + 8*16*9 + 16*32*9 = 216 + 1,152 + 4,608
        assert_eq!(plan.conv_param_count(), 5_976);
        assert_eq!(plan.conv_channel_sum(), 56);
    }

    #[test]
    fn resnet50_enumeration() {
        let plan = arch_plan(ArchId::Resnet50);
        assert_eq!(plan.conv_count(), 53);
        assert_eq!(plan.bn_count(), 53);
        assert_eq!(plan.feature_dim, 2048);
        assert_eq!(plan.conv_channel_sum(), 26_560);
        assert_eq!(plan.conv_param_count(), 23_454_912);
        // Conv kernels plus the body BN affine pairs: the shippable backbone.
        assert_eq!(
            plan.conv_param_count() + plan.bn_affine_count_body(),
            23_508_032
        );
    }

    #[test]
    fn resnet50_stage_channel_sums() {
        let plan = arch_plan(ArchId::Resnet50);
        let sum_for = |stage: Stage| -> usize {
            plan.convs
                .iter()
                .filter(|c| c.stage == stage)
                .map(|c| c.out_channels)
                .sum()
        };
        assert_eq!(sum_for(Stage::Stem), 64);
        assert_eq!(sum_for(Stage::S1), 1_408);
        assert_eq!(sum_for(Stage::S2), 3_584);
        assert_eq!(sum_for(Stage::S3), 10_240);
        assert_eq!(sum_for(Stage::S4), 11_264);
    }

    #[test]
    fn conv_always_followed_by_matching_bn() {
        for arch in [ArchId::Tiny, ArchId::Resnet50] {
            let plan = arch_plan(arch);
            for spec in &plan.specs {
                if spec.kind == LayerKind::Conv {
                    let next = &plan.specs[spec.index + 1];
                    assert_eq!(next.kind, LayerKind::Bn);
                    assert_eq!(next.out_channels, spec.out_channels);
                }
            }
        }
    }

    #[test]
    fn partition_flags() {
        let plan = arch_plan(ArchId::Resnet50);
        for spec in &plan.specs {
            match spec.kind {
                LayerKind::Conv => assert!(spec.frozen),
                LayerKind::Bn | LayerKind::NeckBn => assert!(!spec.frozen),
                _ => {}
            }
        }
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!(matches!(
            "resnet18".parse::<ArchId>(),
            Err(Error::UnknownArch(_))
        ));
    }
}

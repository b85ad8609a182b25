//! Catalog of the compared model variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::architectures::{ArchitectureSpec, DecoderKind, DecoderSpec, EncoderSpec, Fusion, StreamSpec};
use crate::error::{Error, Result};
use crate::losses::{ScalarizationStrategy, Task};
use crate::synthdata::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StlSeg,
    StlDet,
    StlDepth,
    StlMotion,
    Mtl,
    Mtl10,
    Mtl100,
    #[serde(rename = "auxnet400")]
    AuxNet400,
    #[serde(rename = "auxnet1000")]
    AuxNet1000,
    #[serde(rename = "auxnet_twb")]
    AuxNetTwb,
    #[serde(rename = "msnet2")]
    MsNet2,
    #[serde(rename = "rnnet2")]
    RnNet2,
    #[serde(rename = "threetask_sum")]
    ThreeTaskSum,
    #[serde(rename = "threetask_product")]
    ThreeTaskProduct,
}

impl Variant {
    pub const ALL: [Variant; 14] = [
        Variant::StlSeg,
        Variant::StlDet,
        Variant::StlDepth,
        Variant::StlMotion,
        Variant::Mtl,
        Variant::Mtl10,
        Variant::Mtl100,
        Variant::AuxNet400,
        Variant::AuxNet1000,
        Variant::AuxNetTwb,
        Variant::MsNet2,
        Variant::RnNet2,
        Variant::ThreeTaskSum,
        Variant::ThreeTaskProduct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StlSeg => "stl_seg",
            Variant::StlDet => "stl_det",
            Variant::StlDepth => "stl_depth",
            Variant::StlMotion => "stl_motion",
            Variant::Mtl => "mtl",
            Variant::Mtl10 => "mtl10",
            Variant::Mtl100 => "mtl100",
            Variant::AuxNet400 => "auxnet400",
            Variant::AuxNet1000 => "auxnet1000",
            Variant::AuxNetTwb => "auxnet_twb",
            Variant::MsNet2 => "msnet2",
            Variant::RnNet2 => "rnnet2",
            Variant::ThreeTaskSum => "threetask_sum",
            Variant::ThreeTaskProduct => "threetask_product",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::StlSeg => "STL seg",
            Variant::StlDet => "STL det",
            Variant::StlDepth => "STL depth",
            Variant::StlMotion => "STL motion",
            Variant::Mtl => "MTL",
            Variant::Mtl10 => "MTL10",
            Variant::Mtl100 => "MTL100",
            Variant::AuxNet400 => "AuxNet400",
            Variant::AuxNet1000 => "AuxNet1000",
            Variant::AuxNetTwb => "AuxNet TWB",
            Variant::MsNet2 => "MSNet2",
            Variant::RnNet2 => "RNNet2",
            Variant::ThreeTaskSum => "3-task sum",
            Variant::ThreeTaskProduct => "3-task product",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// Architecture plus scalarization for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSetup {
    pub variant: Variant,
    pub architecture: ArchitectureSpec,
    pub strategy: ScalarizationStrategy,
}

fn decoder(task: Task, scene: &SceneSpec) -> DecoderSpec {
    let kind = match task {
        Task::Segmentation => DecoderKind::Segmentation {
            num_classes: scene.seg_classes.len(),
        },
        Task::Detection => DecoderKind::Detection {
            num_classes: scene.det_classes.len(),
            grid: scene.image_size / 8,
        },
        Task::Depth => DecoderKind::Depth,
        Task::Motion => DecoderKind::Motion,
    };
    DecoderSpec::new(task.name(), kind)
}

fn weights(pairs: &[(Task, f64)]) -> ScalarizationStrategy {
    ScalarizationStrategy::WeightedSum {
        weights: pairs
            .iter()
            .map(|(t, w)| (t.name().to_string(), *w))
            .collect::<BTreeMap<_, _>>(),
    }
}

pub fn setup(variant: Variant, scene: &SceneSpec, base_width: usize) -> VariantSetup {
    use Task::*;
    let encoder = EncoderSpec {
        base_width,
        input_channels: 3,
        input_size: scene.image_size,
    };
    let dec = |t| decoder(t, scene);
    let (streams, decoders, auxiliary, strategy) = match variant {
        Variant::StlSeg => (
            StreamSpec::single(),
            vec![dec(Segmentation)],
            vec![],
            weights(&[(Segmentation, 1.0)]),
        ),
        Variant::StlDet => (
            StreamSpec::single(),
            vec![dec(Detection)],
            vec![],
            weights(&[(Detection, 1.0)]),
        ),
        Variant::StlDepth => (StreamSpec::single(), vec![dec(Depth)], vec![], weights(&[(Depth, 1.0)])),
        Variant::StlMotion => (
            StreamSpec::two(Fusion::Concat),
            vec![dec(Motion)],
            vec![],
            weights(&[(Motion, 1.0)]),
        ),
        Variant::Mtl | Variant::Mtl10 | Variant::Mtl100 => {
            let w = match variant {
                Variant::Mtl => 1.0,
                Variant::Mtl10 => 10.0,
                _ => 100.0,
            };
            (
                StreamSpec::single(),
                vec![dec(Segmentation), dec(Detection)],
                vec![],
                weights(&[(Segmentation, w), (Detection, 1.0)]),
            )
        }
        Variant::AuxNet400 | Variant::AuxNet1000 | Variant::AuxNetTwb => {
            let strategy = match variant {
                Variant::AuxNet400 => weights(&[(Segmentation, 400.0), (Depth, 1.0)]),
                Variant::AuxNet1000 => weights(&[(Segmentation, 1000.0), (Depth, 1.0)]),
                _ => ScalarizationStrategy::geometric_mean(),
            };
            (
                StreamSpec::single(),
                vec![dec(Segmentation), dec(Depth)],
                vec![Depth.name().to_string()],
                strategy,
            )
        }
        Variant::MsNet2 | Variant::RnNet2 => {
            let fusion = if variant == Variant::MsNet2 {
                Fusion::Concat
            } else {
                Fusion::ConvLstm
            };
            (
                StreamSpec::two(fusion),
                vec![dec(Segmentation).fused()],
                vec![],
                weights(&[(Segmentation, 1.0)]),
            )
        }
        Variant::ThreeTaskSum | Variant::ThreeTaskProduct => {
            let strategy = if variant == Variant::ThreeTaskSum {
                weights(&[(Segmentation, 1.0), (Depth, 1.0), (Motion, 1.0)])
            } else {
                ScalarizationStrategy::geometric_mean()
            };
            (
                StreamSpec::two(Fusion::Concat),
                vec![dec(Segmentation), dec(Depth), dec(Motion)],
                vec![],
                strategy,
            )
        }
    };
    VariantSetup {
        variant,
        architecture: ArchitectureSpec {
            encoder,
            streams,
            decoders,
            auxiliary: auxiliary.into_iter().collect(),
        },
        strategy,
    }
}

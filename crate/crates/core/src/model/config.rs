use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strided convolution stage: output channels and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Feature extractor layout. The stem feeds the first stage; every stage
/// output is resampled to the grid of the first stage, the outputs are
/// concatenated and a 1×1 convolution projects them to `projection`
/// channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem: StageSpec,
    pub stages: Vec<StageSpec>,
    pub projection: usize,
    /// Extra stride-1 3×3 convolutions after each strided one.
    pub extra_convs: usize,
}

impl BackboneConfig {
    /// Small backbone for CPU-scale experiments: 64 px input, 32 channels on
    /// a 16 × 16 grid.
    pub fn desk() -> Self {
        Self {
            stem: StageSpec { channels: 8, stride: 2 },
            stages: vec![
                StageSpec { channels: 16, stride: 2 },
                StageSpec { channels: 32, stride: 2 },
                StageSpec { channels: 64, stride: 2 },
            ],
            projection: 32,
            extra_convs: 1,
        }
    }

    /// Widths of the ResNet-50 layout used at full scale: stage outputs of
    /// 256, 512 and 1024 channels at strides 4, 8, 16, projected to 256.
    pub fn reference() -> Self {
        Self {
            stem: StageSpec { channels: 64, stride: 2 },
            stages: vec![
                StageSpec { channels: 256, stride: 2 },
                StageSpec { channels: 512, stride: 2 },
                StageSpec { channels: 1024, stride: 2 },
            ],
            projection: 256,
            extra_convs: 1,
        }
    }

    /// Stride of the feature grid (stem times first stage).
    pub fn feature_stride(&self) -> usize {
        self.stem.stride * self.stages.first().map_or(1, |s| s.stride)
    }

    /// Stride of the coarsest stage.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().fold(self.stem.stride, |acc, s| acc * s.stride)
    }

    pub fn concat_width(&self) -> usize {
        self.stages.iter().map(|s| s.channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let all = std::iter::once(&self.stem).chain(&self.stages);
        for s in all {
            if s.channels == 0 || s.stride == 0 {
                return Err(Error::Config(format!("bad backbone stage {s:?}")));
            }
        }
        if self.projection == 0 {
            return Err(Error::Config("projection width must be positive".into()));
        }
        Ok(())
    }

    /// Feature grid side for an `r × r` input.
    pub fn feature_side(&self, r: usize) -> Result<usize> {
        let total = self.total_stride();
        if r == 0 || r % total != 0 {
            return Err(Error::invalid(
                "extract_features",
                format!("input resolution {r} is not divisible by the backbone stride {total}"),
            ));
        }
        Ok(r / self.feature_stride())
    }
}

/// Where the self-query weights are added before the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqResidual {
    /// `W + In_conv(F_Q)`.
    #[default]
    Transformed,
    /// `W + F_Q`.
    Raw,
}

/// Component switches for ablations. A disabled deformable or cross
/// central-difference branch is replaced by a vanilla 3×3 convolution of the
/// same shape; a disabled self query passes the similarity map straight to
/// the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_dc: bool,
    pub use_ccdc: bool,
    pub use_sq: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_dc: true,
            use_ccdc: true,
            use_sq: true,
        }
    }
}

impl Ablation {
    pub fn no_sq() -> Self {
        Self {
            use_sq: false,
            ..Self::default()
        }
    }

    pub fn no_dfa() -> Self {
        Self {
            use_dc: false,
            use_ccdc: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Output widths of the head's 3×3 blocks; every block after the first
    /// is preceded by a ×2 bilinear upsample.
    pub head_widths: Vec<usize>,
    pub theta: f64,
    pub leaky_slope: f64,
    pub sq_residual: SqResidual,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            head_widths: vec![32, 16, 8],
            theta: 0.5,
            leaky_slope: 0.01,
            sq_residual: SqResidual::Transformed,
            ablation: Ablation::default(),
        }
    }

    pub fn reference() -> Self {
        Self {
            backbone: BackboneConfig::reference(),
            head_widths: vec![256, 128, 64],
            ..Self::desk()
        }
    }

    pub fn channels(&self) -> usize {
        self.backbone.projection
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            return Err(Error::Config(format!("bad head widths {:?}", self.head_widths)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, 1]", self.theta)));
        }
        Ok(())
    }

    /// Side of the head output for a feature grid of side `f`.
    pub fn head_output_side(&self, f: usize) -> usize {
        f << (self.head_widths.len() - 1)
    }
}

/// Tensor shapes of one forward pass, derived without running it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub image: [usize; 4],
    pub stage_outputs: Vec<[usize; 4]>,
    pub concat: [usize; 4],
    pub query_features: [usize; 4],
    pub support_features: [usize; 4],
    pub similarity: [usize; 4],
    pub sq_weights: [usize; 4],
    pub location_map: [usize; 4],
}

impl ShapePlan {
    pub fn new(cfg: &ModelConfig, r: usize) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.backbone.feature_side(r)?;
        let out = cfg.head_output_side(f);
        if out != r {
            return Err(Error::invalid(
                "regression_head",
                format!("{} head blocks take a {f}×{f} grid to {out}×{out}, not {r}×{r}", cfg.head_widths.len()),
            ));
        }
        let c = cfg.channels();
        let mut side = r / cfg.backbone.stem.stride;
        let stage_outputs = cfg
            .backbone
            .stages
            .iter()
            .map(|s| {
                side /= s.stride;
                [1, s.channels, side, side]
            })
            .collect();
        Ok(Self {
            image: [1, 3, r, r],
            stage_outputs,
            concat: [1, cfg.backbone.concat_width(), f, f],
            query_features: [1, c, f, f],
            support_features: [1, c, 3, 3],
            similarity: [1, c, f, f],
            sq_weights: [1, 1, f, f],
            location_map: [1, 1, r, r],
        })
    }
}

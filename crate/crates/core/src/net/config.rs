use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::conv_out_dim;
use crate::repr::ChannelMask;
use crate::snn::SrmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Convolution followed by ReLU and an optional max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            pad,
            pool: None,
        }
    }

    pub const fn pooled(self, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            pool: Some(PoolSpec { kernel, stride }),
            ..self
        }
    }

    fn out_dim(&self, input: usize) -> Option<usize> {
        let d = conv_out_dim(input, self.kernel, self.stride, self.pad)?;
        match self.pool {
            Some(p) => conv_out_dim(d, p.kernel, p.stride, 0),
            None => Some(d),
        }
    }
}

/// One spiking convolution of the event branch; padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrmLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeeSpec {
    /// Spiking layers followed by the final drive layer.
    pub layers: Vec<SrmLayerSpec>,
    pub params: SrmParams,
    /// Spiking-layer weights are drawn with std `weight_gain / sqrt(fan_in)`.
    pub weight_gain: f64,
    /// Same for the final drive layer, which is never thresholded.
    pub readout_gain: f64,
}

/// Branch and input switches used by the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_uee: bool,
    pub use_cfe: bool,
    pub use_uer: bool,
    pub use_counts: bool,
    pub use_timestamps: bool,
    /// Zero every event channel of the shared-branch input.
    pub rgb_only: bool,
    /// Zero the RGB channels of the shared-branch input.
    pub event_only: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_uee: true,
            use_cfe: true,
            use_uer: true,
            use_counts: true,
            use_timestamps: true,
            rgb_only: false,
            event_only: false,
        }
    }
}

/// The full model and its eight reduced variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Shared branch only, events only.
    OnlyEvents,
    /// Shared branch only, RGB only.
    OnlyRgb,
    /// Shared branch only, both inputs.
    SharedOnly,
    NoUee,
    NoCfe,
    NoUer,
    /// Event counts without timestamps.
    CountsOnly,
    /// Event timestamps without counts.
    TimestampsOnly,
}

impl Variant {
    pub const ABLATIONS: [Variant; 8] = [
        Variant::OnlyEvents,
        Variant::OnlyRgb,
        Variant::SharedOnly,
        Variant::NoUee,
        Variant::NoCfe,
        Variant::NoUer,
        Variant::CountsOnly,
        Variant::TimestampsOnly,
    ];

    pub fn flags(self) -> AblationFlags {
        let all = AblationFlags::default();
        let shared = AblationFlags {
            use_uee: false,
            use_uer: false,
            ..all
        };
        match self {
            Variant::Full => all,
            Variant::OnlyEvents => AblationFlags {
                event_only: true,
                ..shared
            },
            Variant::OnlyRgb => AblationFlags {
                rgb_only: true,
                use_counts: false,
                use_timestamps: false,
                ..shared
            },
            Variant::SharedOnly => shared,
            Variant::NoUee => AblationFlags { use_uee: false, ..all },
            Variant::NoCfe => AblationFlags { use_cfe: false, ..all },
            Variant::NoUer => AblationFlags { use_uer: false, ..all },
            Variant::CountsOnly => AblationFlags {
                use_timestamps: false,
                ..all
            },
            Variant::TimestampsOnly => AblationFlags {
                use_counts: false,
                ..all
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "mcfr",
            Variant::OnlyEvents => "mcfr-oe",
            Variant::OnlyRgb => "mcfr-or",
            Variant::SharedOnly => "mcfr-er",
            Variant::NoUee => "no-uee",
            Variant::NoCfe => "no-cfe",
            Variant::NoUer => "no-uer",
            Variant::CountsOnly => "mcfr-c",
            Variant::TimestampsOnly => "mcfr-t",
        }
    }
}

impl AblationFlags {
    /// Parses a comma-separated list of variant names (`no-uee`, `mcfr-c`,
    /// ...) and single switches (`no-counts`, `no-timestamps`, `rgb-only`,
    /// `event-only`), combined onto the full model.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "no-counts" => f.use_counts = false,
                "no-timestamps" => f.use_timestamps = false,
                "rgb-only" => f.rgb_only = true,
                "event-only" => f.event_only = true,
                name => {
                    let v = std::iter::once(Variant::Full)
                        .chain(Variant::ABLATIONS)
                        .find(|v| v.name() == name)
                        .ok_or_else(|| Error::Config(format!("unknown ablation {name:?}")))?
                        .flags();
                    f.use_uee &= v.use_uee;
                    f.use_cfe &= v.use_cfe;
                    f.use_uer &= v.use_uer;
                    f.use_counts &= v.use_counts;
                    f.use_timestamps &= v.use_timestamps;
                    f.rgb_only |= v.rgb_only;
                    f.event_only |= v.event_only;
                }
            }
        }
        Ok(f)
    }

    /// Mask applied to the 7-channel shared-branch input.
    pub fn input_mask(&self) -> ChannelMask {
        ChannelMask {
            rgb: !self.event_only,
            counts: self.use_counts && !self.rgb_only,
            timestamps: self.use_timestamps && !self.rgb_only,
        }
    }
}

/// Weight initialization for the trainable layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum InitScheme {
    /// Fixed-std Gaussians.
    Gaussian { conv_std: f64, fc_std: f64 },
    /// `std = sqrt(2 / fan_in)` everywhere.
    He,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McfrConfig {
    /// Side of the square candidate crop fed to every branch.
    pub input_crop: usize,
    pub cfe: Vec<ConvSpec>,
    pub uer: Vec<ConvSpec>,
    pub uee: UeeSpec,
    pub fusion_channels: usize,
    /// Widths of fc4 and fc5.
    pub fc_dims: [usize; 2],
    pub num_domains: usize,
    pub ablation: AblationFlags,
    pub init: InitScheme,
}

impl Default for McfrConfig {
    /// 107-pixel crops; the shared branch ends at 512 x 3 x 3.
    fn default() -> Self {
        McfrConfig {
            input_crop: 107,
            cfe: vec![
                ConvSpec::new(96, 7, 2, 0).pooled(3, 2),
                ConvSpec::new(256, 5, 2, 0).pooled(3, 2),
                ConvSpec::new(512, 3, 1, 0),
            ],
            uer: vec![
                ConvSpec::new(96, 3, 2, 0).pooled(3, 2),
                ConvSpec::new(192, 1, 2, 0).pooled(3, 2),
                ConvSpec::new(256, 1, 2, 0),
            ],
            uee: UeeSpec {
                layers: vec![
                    SrmLayerSpec {
                        out_channels: 16,
                        kernel: 3,
                        stride: 2,
                    },
                    SrmLayerSpec {
                        out_channels: 32,
                        kernel: 3,
                        stride: 2,
                    },
                    SrmLayerSpec {
                        out_channels: 64,
                        kernel: 3,
                        stride: 2,
                    },
                ],
                params: SrmParams::default(),
                weight_gain: 3.0,
                readout_gain: 1.0,
            },
            fusion_channels: 512,
            fc_dims: [512, 512],
            num_domains: 1,
            ablation: AblationFlags::default(),
            init: InitScheme::Gaussian {
                conv_std: 0.01,
                fc_std: 0.001,
            },
        }
    }
}

impl McfrConfig {
    /// Small network for single-core experiments on 64x64 scenes: 31-pixel
    /// crops, 2 x 2 feature grid, narrow layers, He initialization.
    pub fn desk() -> Self {
        McfrConfig {
            input_crop: 31,
            cfe: vec![
                ConvSpec::new(12, 7, 2, 0).pooled(3, 2),
                ConvSpec::new(24, 5, 1, 2).pooled(3, 2),
                ConvSpec::new(32, 3, 1, 1),
            ],
            uer: vec![
                ConvSpec::new(8, 3, 2, 0).pooled(3, 2),
                ConvSpec::new(16, 1, 2, 0).pooled(2, 2),
                ConvSpec::new(16, 1, 1, 0),
            ],
            uee: UeeSpec {
                layers: vec![
                    SrmLayerSpec {
                        out_channels: 4,
                        kernel: 3,
                        stride: 2,
                    },
                    SrmLayerSpec {
                        out_channels: 8,
                        kernel: 3,
                        stride: 2,
                    },
                    SrmLayerSpec {
                        out_channels: 16,
                        kernel: 3,
                        stride: 2,
                    },
                ],
                params: SrmParams {
                    t_bins: 16,
                    ..SrmParams::default()
                },
                weight_gain: 3.0,
                readout_gain: 1.0,
            },
            fusion_channels: 32,
            fc_dims: [64, 64],
            num_domains: 1,
            ablation: AblationFlags::default(),
            init: InitScheme::He,
        }
    }

    /// The smallest network that still has every stage type: 11-pixel crops
    /// and a handful of channels. Meant for exhaustive gradient checks.
    pub fn reduced() -> Self {
        McfrConfig {
            input_crop: 11,
            cfe: vec![
                ConvSpec::new(3, 3, 1, 0).pooled(3, 2),
                ConvSpec::new(4, 3, 1, 1).pooled(2, 2),
                ConvSpec::new(5, 1, 1, 0),
            ],
            uer: vec![
                ConvSpec::new(2, 3, 2, 0).pooled(2, 1),
                ConvSpec::new(3, 1, 2, 0),
                ConvSpec::new(3, 1, 1, 0),
            ],
            uee: UeeSpec {
                layers: vec![
                    SrmLayerSpec {
                        out_channels: 2,
                        kernel: 3,
                        stride: 2,
                    },
                    SrmLayerSpec {
                        out_channels: 3,
                        kernel: 3,
                        stride: 2,
                    },
                ],
                params: SrmParams {
                    t_bins: 8,
                    ..SrmParams::default()
                },
                weight_gain: 3.0,
                readout_gain: 1.0,
            },
            fusion_channels: 4,
            fc_dims: [6, 5],
            num_domains: 2,
            ablation: AblationFlags::default(),
            init: InitScheme::He,
        }
    }

    pub fn with_ablation(mut self, flags: AblationFlags) -> Self {
        self.ablation = flags;
        self
    }

    pub fn with_domains(mut self, k: usize) -> Self {
        self.num_domains = k;
        self
    }

    fn chain_dims(specs: &[ConvSpec], input: usize) -> Option<usize> {
        specs.iter().try_fold(input, |d, s| s.out_dim(d))
    }

    /// Spatial side of the fused feature grid (the shared branch's output).
    pub fn feature_side(&self) -> Result<usize> {
        Self::chain_dims(&self.cfe, self.input_crop)
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Config(format!("shared branch underflows a {}-pixel crop", self.input_crop)))
    }

    pub fn cfe_channels(&self) -> usize {
        self.cfe.last().map_or(0, |s| s.out_channels)
    }

    pub fn uer_channels(&self) -> usize {
        self.uer.last().map_or(0, |s| s.out_channels)
    }

    pub fn uee_channels(&self) -> usize {
        self.uee.layers.last().map_or(0, |s| s.out_channels)
    }

    /// Channel widths entering the fusion layer, in `UEE | CFE | UER` order,
    /// disabled branches omitted.
    pub fn fusion_inputs(&self) -> Vec<(Branch, usize)> {
        let a = &self.ablation;
        [
            (Branch::Uee, a.use_uee, self.uee_channels()),
            (Branch::Cfe, a.use_cfe, self.cfe_channels()),
            (Branch::Uer, a.use_uer, self.uer_channels()),
        ]
        .into_iter()
        .filter(|(_, on, _)| *on)
        .map(|(b, _, c)| (b, c))
        .collect()
    }

    pub fn fusion_in_channels(&self) -> usize {
        self.fusion_inputs().iter().map(|(_, c)| c).sum()
    }

    /// Length of the flattened fused feature vector.
    pub fn feature_len(&self) -> Result<usize> {
        let side = self.feature_side()?;
        Ok(self.fusion_channels * side * side)
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.feature_side()?;
        if self.fusion_inputs().is_empty() {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if self.num_domains == 0 {
            return Err(Error::Config("need at least one domain".into()));
        }
        if self.cfe.is_empty() || self.uer.is_empty() || self.uee.layers.is_empty() {
            return Err(Error::Config("every branch needs at least one layer".into()));
        }
        if self.fusion_channels == 0 || self.fc_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.uee.layers.iter().any(|l| l.kernel % 2 == 0 || l.stride == 0) {
            return Err(Error::Config("spiking layers need odd kernels and positive strides".into()));
        }
        self.uee.params.validate()?;
        let uer = Self::chain_dims(&self.uer, self.input_crop)
            .ok_or_else(|| Error::Config("texture branch underflows the crop".into()))?;
        let uee = self
            .uee
            .layers
            .iter()
            .try_fold(self.input_crop, |d, l| conv_out_dim(d, l.kernel, l.stride, l.kernel / 2))
            .ok_or_else(|| Error::Config("event branch underflows the crop".into()))?;
        if uer != side {
            return Err(Error::Config(format!(
                "texture branch ends at {uer}x{uer}, shared branch at {side}x{side}"
            )));
        }
        if uee < side {
            return Err(Error::Config(format!(
                "event branch ends at {uee}x{uee}, smaller than the {side}x{side} feature grid"
            )));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Short stable hash of the canonical JSON.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Uee,
    Cfe,
    Uer,
}

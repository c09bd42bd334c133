//! Capsule primitives, losses, the CapsNet-M family and the baseline CNN.

mod capsule;
mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::conv_output_len;
use crate::error::{Error, Result};

pub use capsule::{
    mask_digitcaps, margin_loss, predict_vectors, route, squash, total_loss, MaskSelect,
    RoutingState, RoutingStep,
};
pub use network::{
    argmax_lowest, build_model, input_statistics, predict, LossParts, Model, StepOutput,
    CHECKPOINT_FILE, SIDECAR_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            alpha: 0.0005,
        }
    }
}

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            v.push(format!(
                "loss.m_minus/m_plus: need 0 < m_minus < m_plus < 1, got {} / {}",
                self.m_minus, self.m_plus
            ));
        }
        if !(self.alpha > 0.0) {
            v.push(format!("loss.alpha: must be > 0, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            v.push(format!("loss.lambda: must be ≥ 0, got {}", self.lambda));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CapsnetM,
    Caps9,
    Caps15,
    Caps19,
    BaselineCnn,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::CapsnetM,
        Architecture::Caps9,
        Architecture::Caps15,
        Architecture::Caps19,
        Architecture::BaselineCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::CapsnetM => "capsnet_m",
            Architecture::Caps9 => "caps9",
            Architecture::Caps15 => "caps15",
            Architecture::Caps19 => "caps19",
            Architecture::BaselineCnn => "baseline_cnn",
        }
    }

    pub fn is_capsule(self) -> bool {
        self != Architecture::BaselineCnn
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

/// Layer sizes for the capsule family. `Full` is the real-size stack;
/// `Micro` is a tiny one for 40×8 inputs used in gradient and smoke tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPreset {
    #[default]
    Full,
    Micro,
}

impl FromStr for GeometryPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(GeometryPreset::Full),
            "micro" => Ok(GeometryPreset::Micro),
            _ => Err(Error::Config(format!("unknown geometry preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvSpec {
    const fn new(channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        ConvSpec {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_classes: usize,
    pub input_rows: usize,
    pub input_frames: usize,
    pub routing_iterations: usize,
    pub decoder_enabled: bool,
    pub decoder_hidden: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub geometry: GeometryPreset,
    /// Replaces the height of every convolution kernel in the capsule stack
    /// (e.g. 1 for purely temporal kernels).
    #[serde(default)]
    pub kernel_height: Option<usize>,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::CapsnetM,
            n_classes: 2,
            input_rows: 40,
            input_frames: 300,
            routing_iterations: 3,
            decoder_enabled: true,
            decoder_hidden: 512,
            dropout_rate: 0.3,
            geometry: GeometryPreset::Full,
            kernel_height: None,
            loss: LossConfig::default(),
        }
    }
}

/// Conv stack of a capsule model, ending in the primary-capsule conv.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CapsGeometry {
    pub convs: Vec<ConvSpec>,
    pub primary: ConvSpec,
    pub primary_dim: usize,
    pub digit_dim: usize,
}

/// Baseline CNN stack: `(conv, pool width after it)`.
pub(crate) fn cnn_layers(rows: usize) -> [(ConvSpec, Option<usize>); 4] {
    [
        (ConvSpec::new(128, (rows, 13), (1, 1)), Some(2)),
        (ConvSpec::new(256, (1, 11), (1, 1)), Some(2)),
        (ConvSpec::new(256, (1, 5), (1, 2)), Some(2)),
        (ConvSpec::new(128, (1, 3), (1, 1)), None),
    ]
}

impl ModelConfig {
    pub(crate) fn caps_geometry(&self) -> CapsGeometry {
        let mut g = match (self.geometry, self.architecture) {
            (GeometryPreset::Micro, _) => CapsGeometry {
                convs: vec![
                    ConvSpec::new(4, (5, 3), (1, 1)),
                    ConvSpec::new(8, (5, 3), (1, 1)),
                ],
                primary: ConvSpec::new(16, (5, 3), (2, 2)),
                primary_dim: 8,
                digit_dim: 16,
            },
            (_, Architecture::CapsnetM) => CapsGeometry {
                convs: vec![
                    ConvSpec::new(64, (15, 15), (1, 5)),
                    ConvSpec::new(256, (13, 13), (1, 1)),
                ],
                primary: ConvSpec::new(256, (11, 11), (2, 2)),
                primary_dim: 8,
                digit_dim: 16,
            },
            (_, arch) => {
                let k = match arch {
                    Architecture::Caps9 => 9,
                    Architecture::Caps15 => 15,
                    _ => 19,
                };
                CapsGeometry {
                    convs: vec![ConvSpec::new(256, (k, k), (1, 1))],
                    primary: ConvSpec::new(256, (9, 9), (2, 2)),
                    primary_dim: 8,
                    digit_dim: 16,
                }
            }
        };
        if let Some(h) = self.kernel_height {
            for c in g.convs.iter_mut().chain(std::iter::once(&mut g.primary)) {
                c.kernel.0 = h;
            }
        }
        g
    }

    /// Output shape `(channels, rows, cols)` of every conv/pool stage for an
    /// input of `frames` columns, or `None` once a stage would be empty.
    pub fn stage_shapes(&self, frames: usize) -> Option<Vec<(String, [usize; 3])>> {
        let mut out = Vec::new();
        let (mut h, mut w) = (self.input_rows, frames);
        let conv = |h: usize, w: usize, c: &ConvSpec| -> Option<(usize, usize)> {
            Some((
                conv_output_len(h, c.kernel.0, c.stride.0)?,
                conv_output_len(w, c.kernel.1, c.stride.1)?,
            ))
        };
        if self.architecture.is_capsule() {
            let g = self.caps_geometry();
            for (i, c) in g.convs.iter().enumerate() {
                (h, w) = conv(h, w, c)?;
                out.push((format!("conv{}", i + 1), [c.channels, h, w]));
            }
            (h, w) = conv(h, w, &g.primary)?;
            out.push(("primary".into(), [g.primary.channels, h, w]));
        } else {
            for (i, (c, pool)) in cnn_layers(self.input_rows).iter().enumerate() {
                (h, w) = conv(h, w, c)?;
                out.push((format!("conv{}", i + 1), [c.channels, h, w]));
                if let Some(p) = pool {
                    w /= p;
                    if w == 0 {
                        return None;
                    }
                    out.push((format!("pool{}", i + 1), [c.channels, h, w]));
                }
            }
        }
        Some(out)
    }

    /// Smallest frame count the conv stack accepts.
    pub fn min_frames(&self) -> Option<usize> {
        (1..=8192).find(|&t| self.stage_shapes(t).is_some())
    }

    /// Number of primary capsules for the configured input.
    pub fn primary_capsules(&self) -> Option<usize> {
        let g = self.caps_geometry();
        let shapes = self.stage_shapes(self.input_frames)?;
        let [_, h, w] = shapes.last()?.1;
        Some(g.primary.channels / g.primary_dim * h * w)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.loss.violations();
        if self.n_classes < 2 {
            v.push(format!("model.n_classes: need ≥ 2, got {}", self.n_classes));
        }
        if self.input_rows == 0 {
            v.push("model.input_rows: must be positive".into());
        }
        if !(1..=5).contains(&self.routing_iterations) {
            v.push(format!(
                "model.routing_iterations: must be in 1..=5, got {}",
                self.routing_iterations
            ));
        }
        if self.decoder_enabled && self.decoder_hidden == 0 {
            v.push("model.decoder_hidden: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!("model.dropout_rate: must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.kernel_height == Some(0) {
            v.push("model.kernel_height: must be positive".into());
        }
        if self.architecture.is_capsule() {
            let g = self.caps_geometry();
            if g.primary.channels % g.primary_dim != 0 {
                v.push(format!(
                    "model.geometry: {} primary channels do not split into {}-D capsules",
                    g.primary.channels, g.primary_dim
                ));
            }
        }
        if self.input_rows > 0 && self.stage_shapes(self.input_frames).is_none() {
            match self.min_frames() {
                Some(m) => v.push(format!(
                    "features.target_frames: {} input of {}×{} is too small for the conv stack; needs at least {m} frames",
                    self.architecture, self.input_rows, self.input_frames
                )),
                None => v.push(format!(
                    "model: {} cannot accept {} input rows at any frame count",
                    self.architecture, self.input_rows
                )),
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

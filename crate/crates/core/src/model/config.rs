use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics};
use crate::error::{invalid, Result};

/// A bounded parameter `center + half_range * tanh(raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub center: f64,
    pub half_range: f64,
}

impl Range {
    pub const fn new(center: f64, half_range: f64) -> Self {
        Range { center, half_range }
    }

    pub const fn fixed(value: f64) -> Self {
        Range::new(value, 0.0)
    }

    pub fn apply(&self, raw: f64) -> f64 {
        self.center + self.half_range * raw.tanh()
    }

    /// Inverse of [`Range::apply`] for values strictly inside the range.
    pub fn raw_for(&self, value: f64) -> f64 {
        if self.half_range == 0.0 {
            0.0
        } else {
            ((value - self.center) / self.half_range).clamp(-0.999_999, 0.999_999).atanh()
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (v - self.center).abs() <= self.half_range.abs() + 1e-12
    }
}

/// Ranges for the affine parameters. Angles are in degrees here; the
/// azimuth is not listed because candidates always cover the full circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRanges {
    pub scale: Range,
    pub tx: Range,
    pub ty: Range,
    pub tz: Range,
    pub elevation_deg: Range,
    pub roll_deg: Range,
}

impl PoseRanges {
    pub fn synthetic() -> Self {
        PoseRanges {
            scale: Range::new(1.0, 0.5),
            tx: Range::new(0.0, 0.5),
            ty: Range::new(0.0, 0.5),
            tz: Range::fixed(2.732),
            elevation_deg: Range::fixed(30.0),
            roll_deg: Range::fixed(0.0),
        }
    }

    pub fn real() -> Self {
        PoseRanges {
            scale: Range::new(1.0, 0.3),
            tx: Range::new(0.0, 0.3),
            ty: Range::new(0.0, 0.3),
            tz: Range::new(2.732, 0.3),
            elevation_deg: Range::new(10.0, 20.0),
            roll_deg: Range::new(0.0, 30.0),
        }
    }
}

/// Code sizes per training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningSchedule {
    pub shape: [usize; 4],
    pub texture: [usize; 4],
    pub background: [usize; 4],
}

impl Default for ConditioningSchedule {
    fn default() -> Self {
        ConditioningSchedule {
            shape: [0, 2, 8, 64],
            texture: [2, 8, 64, 512],
            background: [4, 8, 64, 256],
        }
    }
}

impl ConditioningSchedule {
    /// Every stage at full size: progressive conditioning switched off.
    pub fn disabled(self) -> Self {
        ConditioningSchedule {
            shape: [self.shape[3]; 4],
            texture: [self.texture[3]; 4],
            background: [self.background[3]; 4],
        }
    }

    pub fn max_dims(&self) -> (usize, usize, usize) {
        (self.shape[3], self.texture[3], self.background[3])
    }

    /// Active (shape, texture, background) sizes at stage 1..=4.
    pub fn dims(&self, stage: usize) -> (usize, usize, usize) {
        let i = stage.clamp(1, 4) - 1;
        (self.shape[i], self.texture[i], self.background[i])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("shape", self.shape), ("texture", self.texture), ("background", self.background)] {
            if d.windows(2).any(|w| w[0] > w[1]) {
                return Err(invalid(format!("{name} code sizes must be non-decreasing, got {d:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Codes predicted from the image by a convolutional encoder.
    Encoder,
    /// Codes stored per training image and optimized directly.
    AutoDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidConfig {
    pub subdivisions: usize,
    pub axis_scale: [f64; 3],
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: LatentMode,
    /// Number of latent rows in auto-decoder mode.
    pub num_images: usize,
    pub image_size: usize,
    pub texture_size: usize,
    /// Pose candidates K.
    pub candidates: usize,
    pub schedule: ConditioningSchedule,
    /// Output channels of the stride-2 convolutions.
    pub encoder_channels: Vec<usize>,
    pub separate_backbones: bool,
    pub head_width: usize,
    pub head_hidden_layers: usize,
    pub deform_width: usize,
    pub deform_hidden_layers: usize,
    /// Channels of the generators' upsampling blocks.
    pub generator_channels: usize,
    /// When false the background is the fixed `background_color`.
    pub learn_background: bool,
    pub background_color: [f64; 3],
    pub ellipsoid: EllipsoidConfig,
    pub ranges: PoseRanges,
    pub camera: Intrinsics,
}

impl ModelConfig {
    /// Rendered-object settings: white background, no background model,
    /// 512-wide deformation network.
    pub fn synthetic() -> Self {
        ModelConfig {
            mode: LatentMode::Encoder,
            num_images: 0,
            image_size: 64,
            texture_size: 64,
            candidates: 6,
            schedule: ConditioningSchedule::default(),
            encoder_channels: vec![32, 64, 128, 256],
            separate_backbones: false,
            head_width: 128,
            head_hidden_layers: 3,
            deform_width: 512,
            deform_hidden_layers: 3,
            generator_channels: 32,
            learn_background: false,
            background_color: [1.0; 3],
            ellipsoid: EllipsoidConfig {
                subdivisions: 3,
                axis_scale: [1.0, 0.7, 0.7],
                scale: 0.4,
            },
            ranges: PoseRanges::synthetic(),
            camera: Intrinsics::Focal(3.732),
        }
    }

    pub fn real() -> Self {
        ModelConfig {
            deform_width: 128,
            learn_background: true,
            ellipsoid: EllipsoidConfig {
                scale: 0.6,
                ..Self::synthetic().ellipsoid
            },
            ranges: PoseRanges::real(),
            camera: Intrinsics::FovDegrees(30.0),
            ..Self::synthetic()
        }
    }

    /// Small networks and images for single-core experiments.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            texture_size: 16,
            encoder_channels: vec![8, 16, 32, 32],
            head_width: 64,
            deform_width: 64,
            generator_channels: 8,
            ellipsoid: EllipsoidConfig {
                subdivisions: 2,
                ..Self::synthetic().ellipsoid
            },
            ..Self::synthetic()
        }
    }

    /// The camera images of `image_size` pixels are seen through.
    pub fn camera(&self) -> Result<Camera> {
        Camera::new(self.camera, self.image_size, self.image_size, 1.0, 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.camera()?;
        let pow2 = |n: usize| n >= 4 && n.is_power_of_two() && n <= 128;
        if !pow2(self.image_size) || !pow2(self.texture_size) {
            return Err(invalid(format!(
                "image and texture sizes must be powers of two in [4, 128], got {} and {}",
                self.image_size, self.texture_size
            )));
        }
        if self.candidates == 0 {
            return Err(invalid("need at least one pose candidate"));
        }
        if self.ellipsoid.subdivisions > 5 {
            return Err(invalid("ellipsoid subdivisions must be in [0, 5]"));
        }
        if self.mode == LatentMode::AutoDecoder && self.num_images == 0 {
            return Err(invalid("auto-decoder mode needs num_images > 0"));
        }
        if self.mode == LatentMode::Encoder {
            let down = 1usize << self.encoder_channels.len();
            if self.encoder_channels.is_empty() || down > self.image_size {
                return Err(invalid(format!(
                    "{} stride-2 layers do not fit a {} pixel image",
                    self.encoder_channels.len(),
                    self.image_size
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        let r = Range::new(1.0, 0.5);
        assert_eq!(r.apply(0.0), 1.0);
        assert!((r.apply(r.raw_for(1.3)) - 1.3).abs() < 1e-12);
        assert!(r.contains(r.apply(50.0)));
    }

    #[test]
    fn schedule() {
        let s = ConditioningSchedule::default();
        assert_eq!(s.dims(1), (0, 2, 4));
        assert_eq!(s.dims(2), (2, 8, 8));
        assert_eq!(s.max_dims(), (64, 512, 256));
        assert_eq!(s.disabled().dims(1), (64, 512, 256));
        let bad = ConditioningSchedule {
            shape: [2, 0, 8, 64],
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::synthetic(), ModelConfig::real(), ModelConfig::desk()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::real().ellipsoid.scale, 0.6);
        assert_eq!(ModelConfig::synthetic().ranges.elevation_deg, Range::fixed(30.0));
    }
}

use alloc::vec;
use alloc::vec::Vec;

use crate::coords::labels;
use crate::error::{bail, Result};

/// Architecture, loss weights and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Completion encoder width per scale; its length is the depth.
    pub enc_widths: Vec<usize>,
    /// Completion decoder width per upsampling step, coarsest first
    /// (`depth - 1` entries).
    pub dec_widths: Vec<usize>,
    /// Segmentation U-Net widths per scale; the last is the bottleneck.
    pub seg_widths: Vec<usize>,
    pub se_reduction: usize,
    pub num_classes: usize,
    pub lambda: f64,
    pub beta: f64,
    pub kernel_size: usize,
    /// RGB plus intensity channels at the front/back of every input row.
    pub base_channels: usize,
    /// Feature-map channels between RGB and intensity.
    pub ext_channels: usize,
    /// Encoder scales receiving pooled external features.
    pub ext_depths: Vec<usize>,
    pub use_se: bool,
    pub use_cb_loss: bool,
    pub use_external_features: bool,
    /// Adds a trainable scalar to each level's occupancy logits.
    pub learnable_threshold: bool,
    /// Drops free-labeled voxels from the segmentation loss.
    pub seg_ignore_free: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_widths: vec![32, 64, 128, 256],
            dec_widths: vec![128, 64, 32],
            seg_widths: vec![32, 64, 256],
            se_reduction: 8,
            num_classes: labels::NUM_CLASSES,
            lambda: 0.5,
            beta: 0.9,
            kernel_size: 3,
            base_channels: 4,
            ext_channels: 0,
            ext_depths: vec![1, 2],
            use_se: true,
            use_cb_loss: true,
            use_external_features: false,
            learnable_threshold: false,
            seg_ignore_free: false,
        }
    }
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.enc_widths.len()
    }

    /// Input feature width expected from fusion.
    pub fn input_channels(&self) -> usize {
        self.base_channels + self.ext_channels
    }

    /// Whether the pooled external features are wired in.
    pub fn ext_active(&self) -> bool {
        self.use_external_features && self.ext_channels > 0
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.depth();
        if d < 2 {
            bail!(Config, "depth must be at least 2, got {d}");
        }
        if self.dec_widths.len() != d - 1 {
            bail!(Config, "{} decoder widths for depth {d} (need {})", self.dec_widths.len(), d - 1);
        }
        if self.seg_widths.len() < 2 {
            bail!(Config, "segmentation U-Net needs at least 2 widths");
        }
        let all = self.enc_widths.iter().chain(&self.dec_widths).chain(&self.seg_widths);
        if all.clone().any(|&w| w == 0) {
            bail!(Config, "layer widths must be positive");
        }
        if self.use_se {
            if self.se_reduction == 0 {
                bail!(Config, "SE reduction must be positive");
            }
            if let Some(w) = all.clone().find(|&&w| w % self.se_reduction != 0) {
                bail!(Config, "width {w} is not divisible by SE reduction {}", self.se_reduction);
            }
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            bail!(Config, "lambda {} outside (0, 1)", self.lambda);
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            bail!(Config, "beta {} outside (0, 1)", self.beta);
        }
        if self.kernel_size.is_multiple_of(2) {
            bail!(Config, "kernel size {} must be odd", self.kernel_size);
        }
        if self.num_classes < 2 || self.num_classes > labels::NUM_CLASSES {
            bail!(Config, "num_classes {} outside 2..={}", self.num_classes, labels::NUM_CLASSES);
        }
        if self.base_channels != 4 {
            bail!(Config, "base channels must be RGB + intensity (4), got {}", self.base_channels);
        }
        if let Some(&e) = self.ext_depths.iter().find(|&&e| e >= d) {
            bail!(Config, "external feature depth {e} beyond encoder depth {d}");
        }
        Ok(())
    }
}

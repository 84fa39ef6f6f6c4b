use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Images enter the backbone with three channels; grayscale inputs are
/// replicated.
pub const IMAGE_CHANNELS: usize = 3;

/// Where CBAM is inserted into the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    None,
    /// Once, on the raw image before the stem.
    ModelLevel,
    /// On the partitioned patches at every stage entry, before the linear
    /// embedding (stage 1) or the merging projection (stages 2-4).
    StageLevel,
    /// Inside every block: channel attention before W-MSA, spatial attention
    /// before SW-MSA.
    BlockLevel,
}

impl Placement {
    pub const ALL: [Placement; 4] =
        [Placement::None, Placement::ModelLevel, Placement::StageLevel, Placement::BlockLevel];

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "None",
            Placement::ModelLevel => "ModelLevel",
            Placement::StageLevel => "StageLevel",
            Placement::BlockLevel => "BlockLevel",
        }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Placement::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown placement {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwinConfig {
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub placement: Placement,
    pub cbam_reduction: usize,
    pub patch_size: usize,
    /// `[H, W]` of the input image.
    pub input_size: [usize; 2],
    pub seed: u64,
    /// Learnable relative position bias in every attention layer.
    #[serde(skip, default = "enabled")]
    pub rel_pos_bias: bool,
}

fn enabled() -> bool {
    true
}

impl SwinConfig {
    /// Swin-T: C=96, depths [2,2,6,2], 224×224 input.
    pub fn tiny() -> Self {
        SwinConfig {
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            num_heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            placement: Placement::None,
            cbam_reduction: 16,
            patch_size: 4,
            input_size: [224, 224],
            seed: 0,
            rel_pos_bias: true,
        }
    }

    /// Desk-scale configuration for tests and CPU training.
    pub fn nano() -> Self {
        SwinConfig {
            embed_dim: 16,
            depths: [2, 2, 2, 2],
            num_heads: [1, 2, 4, 8],
            window_size: 2,
            mlp_ratio: 2.0,
            placement: Placement::None,
            cbam_reduction: 4,
            patch_size: 4,
            input_size: [32, 32],
            seed: 0,
            rel_pos_bias: true,
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if self.embed_dim == 0 || self.window_size == 0 || self.patch_size == 0 || self.cbam_reduction == 0 {
            return bad("embed_dim, window_size, patch_size and cbam_reduction must be positive".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        for s in 0..4 {
            if self.depths[s] == 0 {
                return bad(format!("stage {} has depth 0", s + 1));
            }
            let dim = self.stage_dim(s);
            if self.num_heads[s] == 0 || dim % self.num_heads[s] != 0 {
                return bad(format!("stage {} dim {dim} not divisible by {} heads", s + 1, self.num_heads[s]));
            }
        }
        let unit = self.patch_size * 8;
        if self.input_size.iter().any(|&e| e == 0 || e % unit != 0) {
            return Err(Error::IndivisibleInput(format!(
                "input {:?} must be a positive multiple of patch_size·8 = {unit}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Token dimension of stage `s` (0-based): `C·2^s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// `(H, W)` token grid of stage `s`.
    pub fn stage_extent(&self, s: usize) -> (usize, usize) {
        let [h, w] = self.input_size;
        (h / self.patch_size >> s, w / self.patch_size >> s)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Reduction used for a CBAM over `channels`: the configured ratio,
    /// lowered to the nearest divisor when it does not divide.
    pub fn reduction_for(&self, channels: usize) -> usize {
        crate::cbam::effective_reduction(channels, self.cbam_reduction)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: SwinConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// CBAM refinements performed by one backbone forward pass.
pub fn count_cbam_invocations(cfg: &SwinConfig) -> usize {
    match cfg.placement {
        Placement::None => 0,
        Placement::ModelLevel => 1,
        Placement::StageLevel => 4,
        Placement::BlockLevel => cfg.depths.iter().sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_unknown_keys() {
        let cfg = SwinConfig::nano().with_placement(Placement::BlockLevel);
        let text = cfg.to_json_string();
        assert!(text.contains("\"BlockLevel\""));
        assert_eq!(SwinConfig::from_json_str(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(SwinConfig::from_json_str(&v.to_string()).is_err());
        v.as_object_mut().unwrap().remove("dropout");
        v["depths"] = serde_json::json!([2, 2, 2]);
        assert!(SwinConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn validation() {
        assert!(SwinConfig::tiny().validate().is_ok());
        assert!(SwinConfig::nano().validate().is_ok());
        let mut c = SwinConfig::nano();
        c.num_heads[1] = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidParam(_))));
        let mut c = SwinConfig::nano();
        c.input_size = [36, 32];
        assert!(matches!(c.validate(), Err(Error::IndivisibleInput(_))));
    }

    #[test]
    fn invocation_counts() {
        let tiny = SwinConfig::tiny();
        assert_eq!(count_cbam_invocations(&tiny.clone().with_placement(Placement::BlockLevel)), 12);
        assert_eq!(count_cbam_invocations(&tiny.clone().with_placement(Placement::ModelLevel)), 1);
        assert_eq!(count_cbam_invocations(&tiny.clone().with_placement(Placement::StageLevel)), 4);
        assert_eq!(count_cbam_invocations(&tiny), 0);
    }

    #[test]
    fn stage_arithmetic() {
        let tiny = SwinConfig::tiny();
        let ext: Vec<_> = (0..4).map(|s| tiny.stage_extent(s)).collect();
        assert_eq!(ext, [(56, 56), (28, 28), (14, 14), (7, 7)]);
        let dims: Vec<_> = (0..4).map(|s| tiny.stage_dim(s)).collect();
        assert_eq!(dims, [96, 192, 384, 768]);
        let nano = SwinConfig::nano();
        let ext: Vec<_> = (0..4).map(|s| nano.stage_extent(s).0).collect();
        assert_eq!(ext, [8, 4, 2, 1]);
        assert_eq!("blocklevel".parse::<Placement>().unwrap(), Placement::BlockLevel);
    }
}

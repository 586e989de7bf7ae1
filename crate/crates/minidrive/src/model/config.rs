//! Architecture configuration and shape validation for the fusion network.
//!
//! One config describes all four variants. Input geometry is fixed by the
//! sensor suite (camera 16x64x3, birds-eye 64x64x3); everything downstream
//! of the inputs is derived here and checked before any parameter exists.

use crate::sensors::{BEV_N, CAM_H, CAM_W};

/// How the two branches exchange information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Token-level transformer fusion at each configured scale.
    Transformer,
    /// Same structure, but the birds-eye input is replaced by a 2-channel
    /// positional grid; the occupancy histogram is never read.
    Latent,
    /// No cross-branch exchange until the final feature summation.
    Late,
    /// Projection-based exchange: corresponding cells/pixels summed and
    /// passed through a small MLP, added residually.
    Geometric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionDirection {
    Both,
    /// Information flows camera -> birds-eye: only the BEV branch is updated.
    CameraToBev,
    /// Information flows birds-eye -> camera: only the image branch is updated.
    BevToCamera,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Global average over both deepest feature maps, summed.
    GlobalAverage,
    /// A learnable token prepended to the deepest fused sequence; its
    /// transformer output replaces the global average.
    AttentionToken,
}

#[derive(Clone, Debug)]
pub struct FusionConfig {
    pub variant: Variant,
    /// Fusion applies to the deepest `scales_fused` of the 4 stages.
    pub scales_fused: usize,
    pub layers_per_scale: usize,
    pub heads: usize,
    /// Output channels of the 4 backbone stages, strictly increasing.
    pub channels: [usize; 4],
    /// Deepest-scale token grid for the image branch, (rows, cols).
    pub img_tokens: (usize, usize),
    /// Deepest-scale token grid for the birds-eye branch, (rows, cols).
    pub bev_tokens: (usize, usize),
    pub direction: FusionDirection,
    pub readout: Readout,
    pub velocity_input: bool,
    /// Hidden widths of the 3-layer exchange MLP (geometric variant).
    pub geo_hidden: (usize, usize),
    /// Waypoints predicted per frame.
    pub waypoints: usize,
}

impl Default for FusionConfig {
    fn default() -> FusionConfig {
        FusionConfig {
            variant: Variant::Transformer,
            scales_fused: 4,
            layers_per_scale: 4,
            heads: 4,
            channels: [8, 16, 32, 64],
            img_tokens: (2, 8),
            bev_tokens: (4, 4),
            direction: FusionDirection::Both,
            readout: Readout::GlobalAverage,
            velocity_input: true,
            geo_hidden: (32, 32),
            waypoints: 4,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("channels must be strictly increasing, got {0:?}")]
    ChannelOrder([usize; 4]),
    #[error("scales_fused must be 1..=4, got {0}")]
    ScaleCount(usize),
    #[error("layers_per_scale must be >= 1")]
    NoLayers,
    #[error("heads {heads} do not divide stage {stage} channels {channels}")]
    HeadSplit { heads: usize, stage: usize, channels: usize },
    #[error("{branch} stage {stage} map {h}x{w} not tiled by token grid {th}x{tw}")]
    TokenTile { branch: &'static str, stage: usize, h: usize, w: usize, th: usize, tw: usize },
    #[error("{branch} stage {stage} pool factors differ: {fh} vs {fw}")]
    Anisotropic { branch: &'static str, stage: usize, fh: usize, fw: usize },
    #[error("attention-token readout requires a transformer variant")]
    TokenNeedsTransformer,
    #[error("waypoint count must be >= 2, got {0}")]
    WaypointCount(usize),
}

/// Feature-map dims per stage. The image branch pools after stages 1-3,
/// the birds-eye branch after all 4; both land on the configured deepest
/// token grids exactly.
pub fn img_dims() -> [(usize, usize); 4] {
    [(CAM_H / 2, CAM_W / 2), (CAM_H / 4, CAM_W / 4), (CAM_H / 8, CAM_W / 8), (CAM_H / 8, CAM_W / 8)]
}

pub fn bev_dims() -> [(usize, usize); 4] {
    [(BEV_N / 2, BEV_N / 2), (BEV_N / 4, BEV_N / 4), (BEV_N / 8, BEV_N / 8), (BEV_N / 16, BEV_N / 16)]
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.channels[0] < self.channels[1]
            && self.channels[1] < self.channels[2]
            && self.channels[2] < self.channels[3])
        {
            return Err(ConfigError::ChannelOrder(self.channels));
        }
        if self.scales_fused == 0 || self.scales_fused > 4 {
            return Err(ConfigError::ScaleCount(self.scales_fused));
        }
        if self.layers_per_scale == 0 {
            return Err(ConfigError::NoLayers);
        }
        if self.waypoints < 2 {
            return Err(ConfigError::WaypointCount(self.waypoints));
        }
        for stage in self.fused_stages() {
            let c = self.channels[stage];
            if self.uses_transformers() && c % self.heads != 0 {
                return Err(ConfigError::HeadSplit { heads: self.heads, stage, channels: c });
            }
            for (branch, dims, tok) in [
                ("image", img_dims()[stage], self.img_tokens),
                ("birds-eye", bev_dims()[stage], self.bev_tokens),
            ] {
                let (h, w) = dims;
                let (th, tw) = tok;
                if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
                    return Err(ConfigError::TokenTile { branch, stage, h, w, th, tw });
                }
                if h / th != w / tw {
                    return Err(ConfigError::Anisotropic { branch, stage, fh: h / th, fw: w / tw });
                }
            }
        }
        if self.readout == Readout::AttentionToken && !self.uses_transformers() {
            return Err(ConfigError::TokenNeedsTransformer);
        }
        Ok(())
    }

    /// Stage indices that carry fusion, deepest `scales_fused` of 0..4.
    pub fn fused_stages(&self) -> std::ops::Range<usize> {
        match self.variant {
            Variant::Late => 0..0,
            _ => 4 - self.scales_fused..4,
        }
    }

    pub fn uses_transformers(&self) -> bool {
        matches!(self.variant, Variant::Transformer | Variant::Latent)
    }

    /// Tokens per fused sequence (excluding any readout token).
    pub fn token_count(&self) -> usize {
        self.img_tokens.0 * self.img_tokens.1 + self.bev_tokens.0 * self.bev_tokens.1
    }

    /// Channels of the birds-eye input tensor for this variant.
    pub fn bev_in_channels(&self) -> usize {
        match self.variant {
            Variant::Latent => 2,
            _ => 3,
        }
    }
}

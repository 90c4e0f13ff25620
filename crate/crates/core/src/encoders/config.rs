use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{conv_grid, pooled_grid};
use crate::{Error, Result};

/// One stage of the multiscale video transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Pooling stride `(t, h, w)`. Keys and values are pooled by it in every
    /// layer; queries are pooled by it in the first layer of every stage but
    /// the first, which is where the token grid shrinks.
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoConfig {
    pub in_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cube: [usize; 3],
    pub stride: [usize; 3],
    #[serde(default)]
    pub padding: [usize; 3],
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    /// Lower layers kept frozen during pretraining.
    pub frozen_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub video: VideoConfig,
    pub text: TextConfig,
    /// Width of the shared video/text space.
    pub joint_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// CPU-sized profile: `(1, 8, 32, 32)` clips, three stages of two layers.
    pub fn desk() -> Self {
        let stage = |width, heads| StageConfig {
            width,
            heads,
            layers: 2,
            stride: [1, 2, 2],
        };
        EncoderConfig {
            video: VideoConfig {
                in_channels: 1,
                frames: 8,
                height: 32,
                width: 32,
                cube: [2, 4, 4],
                stride: [2, 4, 4],
                padding: [0, 0, 0],
                stages: vec![stage(32, 1), stage(48, 2), stage(64, 4)],
                mlp_ratio: 2,
            },
            text: TextConfig {
                vocab_size: 64,
                max_tokens: 48,
                layers: 2,
                heads: 2,
                hidden: 32,
                mlp_ratio: 2,
                frozen_layers: 1,
            },
            joint_dim: 64,
        }
    }

    /// Full-size reference profile (16-layer MViT-B, 12-layer BERT-base, 512-d space).
    ///
    /// Only used for bookkeeping such as parameter and heatmap counts; it is
    /// far too large to train here. The text width is 768 (BERT-base).
    pub fn reference() -> Self {
        let stage = |width, heads, layers| StageConfig {
            width,
            heads,
            layers,
            stride: [1, 2, 2],
        };
        EncoderConfig {
            video: VideoConfig {
                in_channels: 3,
                frames: 16,
                height: 224,
                width: 224,
                cube: [3, 7, 7],
                stride: [2, 4, 4],
                padding: [1, 3, 3],
                stages: vec![
                    stage(96, 1, 1),
                    stage(192, 2, 2),
                    stage(384, 4, 11),
                    stage(768, 8, 2),
                ],
                mlp_ratio: 4,
            },
            text: TextConfig {
                vocab_size: 30522,
                max_tokens: 512,
                layers: 12,
                heads: 12,
                hidden: 768,
                mlp_ratio: 4,
                frozen_layers: 6,
            },
            joint_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.video;
        let bad = |m: String| Err(Error::Config(m));
        if self.joint_dim == 0 {
            return bad("joint_dim must be positive".into());
        }
        if v.stages.is_empty() {
            return bad("video encoder needs at least one stage".into());
        }
        let dims = [v.frames, v.height, v.width];
        for i in 0..3 {
            if v.cube[i] == 0 || v.stride[i] == 0 {
                return bad("cube and stride must be positive".into());
            }
            if dims[i] + 2 * v.padding[i] < v.cube[i] {
                return bad(format!("input {dims:?} smaller than cube {:?}", v.cube));
            }
        }
        let mut prev = 0;
        for (i, s) in v.stages.iter().enumerate() {
            if s.width < prev {
                return bad(format!("stage widths must be non-decreasing (stage {i})"));
            }
            if s.heads == 0 || s.width % s.heads != 0 {
                return bad(format!("stage {i}: width {} not divisible by {} heads", s.width, s.heads));
            }
            if s.layers == 0 || s.stride.iter().any(|&x| x == 0) {
                return bad(format!("stage {i}: layers and stride must be positive"));
            }
            prev = s.width;
        }
        let t = &self.text;
        if t.heads == 0 || t.hidden % t.heads != 0 {
            return bad("text hidden size must be divisible by heads".into());
        }
        if t.max_tokens == 0 || t.vocab_size < 4 {
            return bad("text vocab/max_tokens too small".into());
        }
        if t.frozen_layers > t.layers {
            return bad("text frozen_layers exceeds layers".into());
        }
        if v.mlp_ratio == 0 || t.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Token grid produced by the cube embedding.
    pub fn embed_grid(&self) -> [usize; 3] {
        let v = &self.video;
        let dims = [
            v.frames + 2 * v.padding[0],
            v.height + 2 * v.padding[1],
            v.width + 2 * v.padding[2],
        ];
        conv_grid(dims, v.cube, v.stride)
    }

    /// Token grid at the output of each stage.
    pub fn stage_grids(&self) -> Vec<[usize; 3]> {
        let mut grid = self.embed_grid();
        self.video
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i > 0 {
                    grid = pooled_grid(grid, s.stride);
                }
                grid
            })
            .collect()
    }

    pub fn final_width(&self) -> usize {
        self.video.stages.last().map(|s| s.width).unwrap_or(0)
    }

    pub fn video_layers(&self) -> usize {
        self.video.stages.iter().map(|s| s.layers).sum()
    }

    /// One map per head of every video layer.
    pub fn per_head_map_count(&self) -> usize {
        self.video.stages.iter().map(|s| s.heads * s.layers).sum()
    }

    /// Per-head maps plus one aggregate map of the last stage.
    pub fn attention_map_count(&self) -> usize {
        self.per_head_map_count() + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_grids() {
        let c = EncoderConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.embed_grid(), [4, 8, 8]);
        assert_eq!(c.stage_grids(), vec![[4, 8, 8], [4, 4, 4], [4, 2, 2]]);
        assert_eq!(c.final_width(), 64);
        assert_eq!(c.joint_dim, 64);
    }

    #[test]
    fn reference_profile_resolutions() {
        let c = EncoderConfig::reference();
        c.validate().unwrap();
        assert_eq!(c.embed_grid(), [8, 56, 56]);
        assert_eq!(*c.stage_grids().last().unwrap(), [8, 7, 7]);
        assert_eq!(c.video_layers(), 16);
        assert_eq!(c.joint_dim, 512);
    }

    #[test]
    fn heatmap_counts() {
        assert_eq!(EncoderConfig::desk().attention_map_count(), 15);
        assert_eq!(EncoderConfig::reference().per_head_map_count(), 65);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = EncoderConfig::desk();
        c.video.stages[1].width = 16;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::desk();
        c.video.cube = [16, 4, 4];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::desk();
        c.video.stages[2].heads = 3;
        assert!(c.validate().is_err());
    }
}

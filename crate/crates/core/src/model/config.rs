use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};

/// Declarative network description.
///
/// `stages[0]` holds the single bottleneck count of stage 1; `stages[n]` holds
/// one block count per branch of stage `n + 1`. Branch `i` runs at
/// `1 / (4·2^i)` of the input resolution with `width(i)` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub joints: usize,
    pub input_h: usize,
    pub input_w: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_channels: usize,
    pub bottleneck_mid: usize,
    pub base_width: usize,
    #[serde(default = "default_multiplier")]
    pub width_multiplier: f64,
    #[serde(rename = "stage", with = "stage_sections")]
    pub stages: Vec<Vec<usize>>,
    pub binarize: bool,
    #[serde(default = "default_block")]
    pub block: BlockKind,
    #[serde(default = "default_se")]
    pub se: bool,
}

/// One `[[stage]]` table per stage, each with a `blocks` list.
mod stage_sections {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Section {
        blocks: Vec<usize>,
    }

    pub fn serialize<S: Serializer>(stages: &[Vec<usize>], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Section> = stages.iter().map(|b| Section { blocks: b.clone() }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<usize>>, D::Error> {
        Ok(Vec::<Section>::deserialize(d)?.into_iter().map(|s| s.blocks).collect())
    }
}

fn default_in_channels() -> usize {
    3
}

fn default_multiplier() -> f64 {
    1.0
}

fn default_block() -> BlockKind {
    BlockKind::Ms
}

fn default_se() -> bool {
    true
}

/// Multi-branch block counts after pruning: only the newest branch of each
/// stage carries blocks.
pub fn pruned_stages() -> Vec<Vec<usize>> {
    vec![vec![4], vec![0, 4], vec![0, 0, 4], vec![0, 0, 0, 4]]
}

pub fn unpruned_stages() -> Vec<Vec<usize>> {
    vec![vec![4], vec![4, 4], vec![4, 4, 4], vec![4, 4, 4, 4]]
}

impl NetworkConfig {
    /// Full-size binary network: W32 widths, 256×192 input, 17 joints.
    pub fn full() -> Self {
        Self {
            joints: 17,
            input_h: 256,
            input_w: 192,
            in_channels: 3,
            stem_channels: 64,
            bottleneck_mid: 64,
            base_width: 32,
            width_multiplier: 1.0,
            stages: pruned_stages(),
            binarize: true,
            block: BlockKind::Ms,
            se: true,
        }
    }

    /// Quarter-width network on 64×64 inputs with 5 joints.
    pub fn desk() -> Self {
        Self {
            joints: 5,
            input_h: 64,
            input_w: 64,
            width_multiplier: 0.25,
            ..Self::full()
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::config(format!("unknown preset {name:?} (full, desk)"))),
        }
    }

    /// Same topology with real-valued convolutions everywhere.
    pub fn teacher(&self) -> Self {
        Self {
            binarize: false,
            ..self.clone()
        }
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(self.stem_channels)
    }

    pub fn mid_width(&self) -> usize {
        self.scaled(self.bottleneck_mid)
    }

    /// Channels of branch `i`.
    pub fn width(&self, i: usize) -> usize {
        self.scaled(self.base_width) << i
    }

    pub fn branches(&self) -> usize {
        self.stages.len()
    }

    /// Heatmap extent `(h, w)` for the configured input.
    pub fn heatmap_dims(&self) -> (usize, usize) {
        (self.input_h / 4, self.input_w / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.joints == 0 || self.in_channels == 0 {
            return bad("joints and in_channels must be positive".into());
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return bad(format!("width_multiplier {} must be positive", self.width_multiplier));
        }
        if self.stem_channels == 0 || self.bottleneck_mid == 0 || self.base_width == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stages.is_empty() || self.stages.len() > 4 {
            return bad(format!("expected 1 to 4 stages, got {}", self.stages.len()));
        }
        for (n, s) in self.stages.iter().enumerate() {
            if s.len() != n + 1 {
                return bad(format!("stage {} needs {} block counts, got {:?}", n + 1, n + 1, s));
            }
        }
        if self.stages[0][0] == 0 {
            return bad("stage 1 needs at least one bottleneck".into());
        }
        if self.block == BlockKind::Ms && self.width(0) % 4 != 0 {
            return bad(format!("MS-Block width {} not divisible by 4", self.width(0)));
        }
        if self.input_h == 0 || self.input_w == 0 || self.input_h % 32 != 0 || self.input_w % 32 != 0 {
            return bad(format!(
                "input {}x{} must be a positive multiple of 32",
                self.input_h, self.input_w
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

//! Model, data and training configuration. Everything serializes to JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::select::seeds_per_frame;

/// Token aggregation backend used to summarize seed tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
#[derive(Default)]
pub enum AggregationMethod {
    #[default]
    Bipartite,
    /// Bipartite matching whose merges average with the seeds' [CLS] scores as weights.
    BipartiteWeighted,
    Kmeans { iterations: usize },
    Dpcknn { neighbors: usize },
    None,
}


impl AggregationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationMethod::Bipartite => "bipartite",
            AggregationMethod::BipartiteWeighted => "bipartite-weighted",
            AggregationMethod::Kmeans { .. } => "kmeans",
            AggregationMethod::Dpcknn { .. } => "dpcknn",
            AggregationMethod::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "bipartite" => AggregationMethod::Bipartite,
            "bipartite-weighted" => AggregationMethod::BipartiteWeighted,
            "kmeans" => AggregationMethod::Kmeans { iterations: 10 },
            "dpcknn" => AggregationMethod::Dpcknn { neighbors: 5 },
            "none" => AggregationMethod::None,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AggregationMethod::Kmeans { iterations: 0 } => Err(Error::invalid("aggregation", "kmeans needs at least one iteration")),
            AggregationMethod::Dpcknn { neighbors: 0 } => Err(Error::invalid("aggregation", "dpcknn needs at least one neighbor")),
            _ => Ok(()),
        }
    }
}

/// Which vision layers attend to context tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TcLayers {
    /// Every layer from the second on.
    All,
    /// Every fourth layer (4, 8, 12 for a 12-layer encoder).
    Lite,
    Custom(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Seed ratio α; `floor(α·N)` seeds per frame.
    pub alpha: f64,
    /// Target number of context tokens k.
    pub contexts: usize,
    /// Bipartite merge pace r.
    pub merge_pace: usize,
    pub tc_layers: TcLayers,
    pub tc_enabled: bool,
    pub aggregation: AggregationMethod,
}

impl VisionConfig {
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn seeds_per_frame(&self) -> Result<usize> {
        seeds_per_frame(self.alpha, self.patches())
    }

    /// 1-based layer indices that run context-infused attention.
    pub fn consumer_layers(&self) -> Vec<usize> {
        if !self.tc_enabled {
            return Vec::new();
        }
        match &self.tc_layers {
            TcLayers::All => (2..=self.layers).collect(),
            TcLayers::Lite => (2..=self.layers).filter(|l| l % 4 == 0).collect(),
            TcLayers::Custom(ls) => ls.clone(),
        }
    }

    pub fn consumes(&self, layer: usize) -> bool {
        self.consumer_layers().contains(&layer)
    }

    /// A layer summarizes its seeds when the next layer consumes them or
    /// when it is the last layer (its contexts feed text prompting).
    pub fn produces(&self, layer: usize) -> bool {
        self.tc_enabled && (self.consumes(layer + 1) || layer == self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("vision config", msg));
        if self.frames == 0 {
            return bad("at least one frame is required".into());
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) || self.height == 0 || self.width == 0 {
            return bad(format!("{}x{} frames are not tiled by {} pixel patches", self.height, self.width, self.patch));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        if self.contexts == 0 {
            return bad("context count k must be at least 1".into());
        }
        if self.merge_pace == 0 {
            return bad("merge pace r must be at least 1".into());
        }
        self.aggregation.validate()?;
        if self.tc_enabled {
            self.seeds_per_frame()?;
            for &l in &self.consumer_layers() {
                if l == 1 {
                    return bad("layer 1 cannot consume context tokens; none exist before it".into());
                }
                if l > self.layers {
                    return bad(format!("tc layer {l} exceeds encoder depth {}", self.layers));
                }
            }
        }
        Ok(())
    }
}

/// How the prompting cross-attention block is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VpInit {
    LastTextLayer,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub prompts: usize,
    pub max_len: usize,
    pub vp_enabled: bool,
    pub vp_init: VpInit,
}

impl TextConfig {
    /// Vocabulary id of the terminal token; rows `0..prompts` hold prompt initializers.
    pub fn eos_id(&self) -> usize {
        self.prompts
    }

    pub fn first_word_id(&self) -> usize {
        self.prompts + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("text config", msg));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.dim));
        }
        if self.layers == 0 {
            return bad("text encoder needs at least one layer".into());
        }
        if self.vocab <= self.first_word_id() {
            return bad(format!("vocabulary of {} leaves no room for words", self.vocab));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    /// Shared vision-language width d_vl.
    pub embed_dim: usize,
    /// Initial temperature τ (stored as log τ).
    pub init_temperature: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 8 frames of 32×32, 8 px patches, 4+2 layers.
    pub fn toy() -> Self {
        ModelConfig {
            vision: VisionConfig {
                frames: 8,
                height: 32,
                width: 32,
                patch: 8,
                dim: 64,
                heads: 4,
                layers: 4,
                alpha: 0.3,
                contexts: 8,
                merge_pace: 100,
                tc_layers: TcLayers::All,
                tc_enabled: true,
                aggregation: AggregationMethod::Bipartite,
            },
            text: TextConfig {
                vocab: 16,
                dim: 64,
                heads: 4,
                layers: 2,
                prompts: 4,
                max_len: 16,
                vp_enabled: true,
                vp_init: VpInit::LastTextLayer,
            },
            embed_dim: 32,
            init_temperature: 0.01,
            layer_norm_eps: 1e-5,
        }
    }

    /// ViT-B/16 video shape: 16 frames of 224×224, 12 layers of width 768.
    pub fn vit_b16() -> Self {
        ModelConfig {
            vision: VisionConfig {
                frames: 16,
                height: 224,
                width: 224,
                patch: 16,
                dim: 768,
                heads: 12,
                layers: 12,
                alpha: 0.3,
                contexts: 96,
                merge_pace: 100,
                tc_layers: TcLayers::All,
                tc_enabled: true,
                aggregation: AggregationMethod::Bipartite,
            },
            text: TextConfig {
                vocab: 49408,
                dim: 512,
                heads: 8,
                layers: 12,
                prompts: 4,
                max_len: 77,
                vp_enabled: true,
                vp_init: VpInit::LastTextLayer,
            },
            embed_dim: 512,
            init_temperature: 0.01,
            layer_norm_eps: 1e-5,
        }
    }

    /// Frame-wise baseline: no context tokens, no video-conditioned prompts.
    pub fn baseline(mut self) -> Self {
        self.vision.tc_enabled = false;
        self.text.vp_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.text.vp_enabled && !self.vision.tc_enabled {
            return Err(Error::invalid("model config", "video-conditioned prompts need context tokens (enable tc)"));
        }
        if self.init_temperature <= 0.0 {
            return Err(Error::invalid("model config", "temperature must be positive"));
        }
        Ok(())
    }
}

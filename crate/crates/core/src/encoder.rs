//! Four-stage hierarchical encoder: patch embedding, MWA block pairs per
//! stage, and 2×2 patch merging between stages.
//!
//! ```text
//! image [B, Cin, H, W]
//!   └─ patch embed ──► stage 0 (H/p,  C)  ──► skip 0
//!        merge ──────► stage 1 (H/2p, 2C) ──► skip 1
//!        merge ──────► stage 2 (H/4p, 4C) ──► skip 2
//!        merge ──────► stage 3 (H/8p, 8C) ──► bottleneck
//! ```

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::block::{MwaBlockPair, TokenSequence};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Element;

/// Non-overlapping `p×p` patches, flattened channel-major `(c, dy, dx)` and
/// linearly projected to `C` channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let p = cfg.patch_size;
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), cfg.in_channels * p * p, cfg.embed_dim, rng),
            patch: p,
            in_channels: cfg.in_channels,
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, image: &Var<T>) -> Result<TokenSequence<T>> {
        let s = image.shape();
        let p = self.patch;
        if s.len() != 4 || s[1] != self.in_channels || s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::shape(format!(
                "patch embedding expects [B, {}, H, W] with H, W divisible by {p}, got {s:?}",
                self.in_channels
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = g.reshape(image, &[b, c, h / p, p, w / p, p]);
        let t = g.permute(&t, &[0, 2, 4, 1, 3, 5]);
        let t = g.reshape(&t, &[b, (h / p) * (w / p), c * p * p]);
        TokenSequence::new(self.proj.forward(g, &t), (h / p, w / p))
    }
}

/// Concatenates each 2×2 neighbourhood in row-major order (TL, TR, BL, BR)
/// and projects `4C' → 2C'`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub proj: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), 4 * dim, 2 * dim, rng),
            dim,
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let (h, w) = x.grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("patch merging needs an even grid, got {h}x{w}")));
        }
        if x.channels() != self.dim {
            return Err(Error::shape(format!("patch merging expects {} channels, got {}", self.dim, x.channels())));
        }
        let (b, c) = (x.batch(), x.channels());
        let t = g.reshape(&x.data, &[b, h / 2, 2, w / 2, 2, c]);
        let t = g.permute(&t, &[0, 1, 3, 2, 4, 5]);
        let t = g.reshape(&t, &[b, (h / 2) * (w / 2), 4 * c]);
        TokenSequence::new(self.proj.forward(g, &t), (h / 2, w / 2))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub pairs: Vec<MwaBlockPair>,
    pub merge: Option<PatchMerging>,
}

/// Skips ordered fine → coarse, taken before merging; bottleneck is the stage-3 output.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Element> {
    pub skips: Vec<TokenSequence<T>>,
    pub bottleneck: TokenSequence<T>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let embed = PatchEmbed::new(store, "encoder.patch_embed", cfg, rng);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let dim = cfg.stage_dim(s);
            let grid = cfg.stage_grid(s);
            let pairs = (0..cfg.depths[s] / 2)
                .map(|i| {
                    MwaBlockPair::new(
                        store,
                        &format!("encoder.stage{s}.pair{i}"),
                        cfg,
                        dim,
                        cfg.num_heads[s],
                        grid,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let merge = (s + 1 < NUM_STAGES)
                .then(|| PatchMerging::new(store, &format!("encoder.stage{s}.merge"), dim, rng));
            stages.push(EncoderStage { pairs, merge });
        }
        Ok(Self { embed, stages })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, image: &Var<T>) -> Result<EncoderOutput<T>> {
        let mut x = self.embed.forward(g, image)?;
        let mut skips = Vec::with_capacity(NUM_STAGES - 1);
        for stage in &self.stages {
            for pair in &stage.pairs {
                x = pair.forward(g, &x)?;
            }
            if let Some(merge) = &stage.merge {
                let next = merge.forward(g, &x)?;
                skips.push(x);
                x = next;
            }
        }
        Ok(EncoderOutput { skips, bottleneck: x })
    }
}

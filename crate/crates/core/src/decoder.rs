//! Adaptive feature fusion decoder.
//!
//! Each stage upsamples with a stride-2 transposed convolution, concatenates
//! the same-scale encoder skip and runs three parallel lines:
//!
//! * line 1: 1×1 projection back to the stage width,
//! * line 2: the long-range-dependency (LRD) block applied to line 1,
//! * line 3: a single-channel sigmoid mask computed from the concatenation.
//!
//! The fused map `(line1 + line2) ⊙ line3` is then re-weighted per channel by
//! the ASC gate. After three fusion stages an expansion stage restores full
//! resolution and a 1×1 convolution produces class logits.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::{Ablation, ModelConfig, ASC_REDUCTION, NUM_STAGES};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{nhwc_to_nchw, Conv2d, ConvTranspose2x2, Linear};
use crate::tensor::Element;

/// Dilations of the three 3×3 convolutions (receptive field 15×15).
pub const LRD_DILATIONS: [usize; 3] = [1, 2, 4];

/// Residual stack of dilated 3×3 convolutions, each followed by LeakyReLU.
#[derive(Debug, Clone)]
pub struct LrdBlock {
    pub convs: Vec<Conv2d>,
    pub channels: usize,
    pub slope: f64,
}

impl LrdBlock {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, slope: f64, rng: &mut R) -> Self {
        let convs = LRD_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2d::new(store, &format!("{name}.conv{i}"), channels, channels, 3, d, 1, rng))
            .collect();
        Self { convs, channels, slope }
    }

    /// `x + stack(x)` on NCHW input.
    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::shape(format!("LRD block expects {} channels, got {:?}", self.channels, x.shape())));
        }
        let mut t = x.clone();
        for conv in &self.convs {
            t = g.leaky_relu(&conv.forward(g, &t), self.slope);
        }
        Ok(g.add(x, &t))
    }
}

/// Channel gate `x ⊙ sigmoid(fc2(leaky(fc1(avgpool(x)))))`.
#[derive(Debug, Clone)]
pub struct AscBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub slope: f64,
}

impl AscBlock {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, slope: f64, rng: &mut R) -> Self {
        let reduced = channels / ASC_REDUCTION;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, reduced, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), reduced, channels, rng),
            channels,
            slope,
        }
    }

    /// Per-sample gate, shape `[B, C, 1, 1]`, values in (0, 1).
    pub fn gate<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!("ASC block expects {} channels, got {s:?}", self.channels)));
        }
        if self.channels % ASC_REDUCTION != 0 {
            return Err(Error::shape(format!(
                "ASC channels {} not divisible by reduction {ASC_REDUCTION}",
                self.channels
            )));
        }
        let b = s[0];
        let pooled = g.reshape(&g.mean_hw(x), &[b, self.channels]);
        let hidden = g.leaky_relu(&self.fc1.forward(g, &pooled), self.slope);
        let gate = g.sigmoid(&self.fc2.forward(g, &hidden));
        Ok(g.reshape(&gate, &[b, self.channels, 1, 1]))
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let gate = self.gate(g, x)?;
        Ok(g.mul(x, &gate))
    }
}

/// Intermediate lines of one decoder stage, exposed for inspection.
#[derive(Debug, Clone)]
pub struct StageLines<T: Element> {
    pub line1: Var<T>,
    pub line2: Option<Var<T>>,
    pub line3: Option<Var<T>>,
    pub fused: Var<T>,
    pub output: Var<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub deconv: ConvTranspose2x2,
    pub proj1: Conv2d,
    pub lrd: Option<LrdBlock>,
    pub maskline: Option<Conv2d>,
    pub asc: Option<AscBlock>,
    pub width: usize,
}

impl DecoderStage {
    /// Stage taking `2·width` channels at half resolution to `width` channels.
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        ablation: Ablation,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let deconv = ConvTranspose2x2::new(store, &format!("{name}.deconv"), 2 * width, width, rng);
        let proj1 = Conv2d::new(store, &format!("{name}.proj1"), 2 * width, width, 1, 1, 1, rng);
        let lrd = (ablation.mff_enabled && ablation.lrd_enabled)
            .then(|| LrdBlock::new(store, &format!("{name}.lrd"), width, slope, rng));
        let maskline = ablation
            .mff_enabled
            .then(|| Conv2d::new(store, &format!("{name}.maskline"), 2 * width, 1, 1, 1, 1, rng));
        let asc = ablation
            .asc_enabled
            .then(|| AscBlock::new(store, &format!("{name}.asc"), width, slope, rng));
        Self {
            deconv,
            proj1,
            lrd,
            maskline,
            asc,
            width,
        }
    }

    /// Runs the stage on NCHW `x` (`2·width` channels) and NCHW `skip` (`width` channels).
    pub fn forward_lines<T: Element>(&self, g: &Graph<T>, x: &Var<T>, skip: &Var<T>) -> Result<StageLines<T>> {
        if x.shape().len() != 4 || x.shape()[1] != 2 * self.width {
            return Err(Error::shape(format!("decoder stage expects {} input channels, got {:?}", 2 * self.width, x.shape())));
        }
        let up = self.deconv.forward(g, x);
        let (us, ss) = (up.shape(), skip.shape());
        if ss.len() != 4 || us[0] != ss[0] || us[2..] != ss[2..] || ss[1] != self.width {
            return Err(Error::shape(format!("upsampled {us:?} does not match skip {ss:?}")));
        }
        let y = g.concat(&[&up, skip], 1);
        let line1 = self.proj1.forward(g, &y);
        let line2 = self.lrd.as_ref().map(|l| l.forward(g, &line1)).transpose()?;
        let line3 = self.maskline.as_ref().map(|m| g.sigmoid(&m.forward(g, &y)));
        let fused = match &line3 {
            None => line1.clone(),
            Some(mask) => {
                let sum = match &line2 {
                    Some(l2) => g.add(&line1, l2),
                    None => line1.clone(),
                };
                g.mul(&sum, mask)
            }
        };
        let output = match &self.asc {
            Some(asc) => asc.forward(g, &fused)?,
            None => fused.clone(),
        };
        Ok(StageLines {
            line1,
            line2,
            line3,
            fused,
            output,
        })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_lines(g, x, skip)?.output)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Fusion stages, coarse → fine.
    pub stages: Vec<DecoderStage>,
    /// `log₂(patch_size)` upsampling deconvolutions at width `C`.
    pub expand: Vec<ConvTranspose2x2>,
    pub head: Conv2d,
    pub slope: f64,
}

impl Decoder {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let stages = (0..NUM_STAGES - 1)
            .rev()
            .map(|s| {
                DecoderStage::new(
                    store,
                    &format!("decoder.stage{s}"),
                    cfg.stage_dim(s),
                    cfg.ablation,
                    cfg.leaky_slope,
                    rng,
                )
            })
            .collect();
        let c = cfg.embed_dim;
        let expand = (0..cfg.patch_size.trailing_zeros())
            .map(|i| ConvTranspose2x2::new(store, &format!("decoder.expand{i}"), c, c, rng))
            .collect();
        let head = Conv2d::new(store, "decoder.head", c, cfg.num_classes, 1, 1, 1, rng);
        Self {
            stages,
            expand,
            head,
            slope: cfg.leaky_slope,
        }
    }

    /// Logits `[B, num_classes, H, W]`.
    pub fn forward<T: Element>(&self, g: &Graph<T>, enc: &EncoderOutput<T>) -> Result<Var<T>> {
        if enc.skips.len() != self.stages.len() {
            return Err(Error::shape(format!(
                "decoder needs {} skips, got {}",
                self.stages.len(),
                enc.skips.len()
            )));
        }
        let to_nchw = |t: &crate::block::TokenSequence<T>| {
            let (h, w) = t.grid;
            nhwc_to_nchw(g, &g.reshape(&t.data, &[t.batch(), h, w, t.channels()]))
        };
        let mut x = to_nchw(&enc.bottleneck);
        for (stage, skip) in self.stages.iter().zip(enc.skips.iter().rev()) {
            x = stage.forward(g, &x, &to_nchw(skip))?;
        }
        for up in &self.expand {
            x = g.leaky_relu(&up.forward(g, &x), self.slope);
        }
        Ok(self.head.forward(g, &x))
    }
}

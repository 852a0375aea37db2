//! Transformer block pair of the encoder: pre-norm window attention and
//! pre-norm shifted-window attention, each followed by a pre-norm
//! convolution-augmented feed-forward network, all with residual adds.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{nchw_to_nhwc, nhwc_to_nchw, Conv2d, LayerNorm, Linear};
use crate::tensor::Element;
use crate::window::{build_attention_mask, partition_var, reverse_var, shift_var, AttentionMask, WindowAttention};

/// Tokens `[B, L, C]` together with the grid `(H', W')` they came from.
#[derive(Debug, Clone)]
pub struct TokenSequence<T: Element> {
    pub data: Var<T>,
    pub grid: (usize, usize),
}

impl<T: Element> TokenSequence<T> {
    pub fn new(data: Var<T>, grid: (usize, usize)) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(Error::shape(format!(
                "token sequence {s:?} does not match grid {}x{}",
                grid.0, grid.1
            )));
        }
        Ok(Self { data, grid })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    fn with_data(&self, data: Var<T>) -> Self {
        Self { data, grid: self.grid }
    }
}

/// Feed-forward network with depth-wise and point-wise convolutions in the
/// expanded space: expand → dw3×3 → GELU → pw1×1 → GELU → project.
#[derive(Debug, Clone)]
pub struct Effn {
    pub expand: Linear,
    pub dw: Conv2d,
    pub pw: Conv2d,
    pub project: Linear,
    pub hidden: usize,
}

impl Effn {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, rng),
            dw: Conv2d::new(store, &format!("{name}.dw"), hidden, hidden, 3, 1, hidden, rng),
            pw: Conv2d::new(store, &format!("{name}.pw"), hidden, hidden, 1, 1, 1, rng),
            project: Linear::new(store, &format!("{name}.project"), hidden, dim, rng),
            hidden,
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let (h, w) = x.grid;
        let s = x.data.shape().to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::shape(format!("EFFN input {s:?} does not match grid {h}x{w}")));
        }
        let b = s[0];
        let t = self.expand.forward(g, &x.data);
        let t = nhwc_to_nchw(g, &g.reshape(&t, &[b, h, w, self.hidden]));
        let t = g.gelu(&self.dw.forward(g, &t));
        let t = g.gelu(&self.pw.forward(g, &t));
        let t = g.reshape(&nchw_to_nhwc(g, &t), &[b, h * w, self.hidden]);
        Ok(x.with_data(self.project.forward(g, &t)))
    }
}

/// Plain two-layer MLP used when the EFFN is ablated.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub expand: Linear,
    pub project: Linear,
}

impl Mlp {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, rng),
            project: Linear::new(store, &format!("{name}.project"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let s = x.data.shape();
        if s.len() != 3 || s[1] != x.grid.0 * x.grid.1 {
            return Err(Error::shape(format!("MLP input {s:?} does not match grid {:?}", x.grid)));
        }
        let t = g.gelu(&self.expand.forward(g, &x.data));
        Ok(x.with_data(self.project.forward(g, &t)))
    }
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    Effn(Effn),
    Mlp(Mlp),
}

impl FeedForward {
    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        match self {
            FeedForward::Effn(f) => f.forward(g, x),
            FeedForward::Mlp(f) => f.forward(g, x),
        }
    }
}

/// One pre-norm attention sublayer plus one pre-norm feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct MwaBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub window: usize,
    pub shift: usize,
    pub grid: (usize, usize),
    pub mask: Option<AttentionMask>,
}

impl MwaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        dim: usize,
        heads: usize,
        grid: (usize, usize),
        shift: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let window = cfg.window_size;
        let hidden = cfg.hidden_dim(dim);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(store, &format!("{name}.attn"), dim, heads, window, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let ffn = if cfg.ablation.effn_enabled {
            FeedForward::Effn(Effn::new(store, &format!("{name}.effn"), dim, hidden, rng))
        } else {
            FeedForward::Mlp(Mlp::new(store, &format!("{name}.mlp"), dim, hidden, rng))
        };
        let mask = if shift > 0 {
            Some(build_attention_mask(grid.0, grid.1, window, shift)?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            attn,
            norm2,
            ffn,
            window,
            shift,
            grid,
            mask,
        })
    }

    /// Disables the cyclic shift (turning an SW-MSA block into a W-MSA block).
    pub fn force_no_shift(&mut self) {
        self.shift = 0;
        self.mask = None;
    }

    /// (Shifted) window attention on pre-normalized tokens, without the residual.
    pub fn attention<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<Var<T>> {
        let (h, w) = x.grid;
        let (b, c) = (x.batch(), x.channels());
        let m = self.window;
        let t = g.reshape(&self.norm1.forward(g, &x.data), &[b, h, w, c]);
        let s = self.shift as isize;
        let t = if s > 0 { shift_var(g, &t, (-s, -s)) } else { t };
        let windows = partition_var(g, &t, m);
        let nwb = windows.shape()[0];
        let windows = g.reshape(&windows, &[nwb, m * m, c]);
        let mask = self.mask.as_ref().map(|mk| g.constant(mk.to_tensor()));
        let out = self.attn.forward(g, &windows, mask.as_ref())?;
        let out = reverse_var(g, &g.reshape(&out, &[nwb, m, m, c]), m, h, w);
        let out = if s > 0 { shift_var(g, &out, (s, s)) } else { out };
        Ok(g.reshape(&out, &[b, h * w, c]))
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        if x.grid != self.grid {
            return Err(Error::shape(format!("block expects grid {:?}, got {:?}", self.grid, x.grid)));
        }
        let attn = self.attention(g, x)?;
        let x = x.with_data(g.add(&x.data, &attn));
        let normed = x.with_data(self.norm2.forward(g, &x.data));
        let ffn = self.ffn.forward(g, &normed)?;
        Ok(x.with_data(g.add(&x.data, &ffn.data)))
    }
}

/// W-MSA block followed by an SW-MSA block.
#[derive(Debug, Clone)]
pub struct MwaBlockPair {
    pub regular: MwaBlock,
    pub shifted: MwaBlock,
}

impl MwaBlockPair {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        dim: usize,
        heads: usize,
        grid: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            regular: MwaBlock::new(store, &format!("{name}.0"), cfg, dim, heads, grid, 0, rng)?,
            shifted: MwaBlock::new(store, &format!("{name}.1"), cfg, dim, heads, grid, cfg.shift_size(), rng)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let x = self.regular.forward(g, x)?;
        self.shifted.forward(g, &x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::gradcheck::{check_gradients, rand_tensor, weighted_sum, GradCheckOptions};
    use crate::tensor::{from_vec, Tensor};
    use crate::window::{partition_var, reverse_var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(effn: bool) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_heads: [2, 2, 2, 2],
            ablation: Ablation {
                effn_enabled: effn,
                ..Ablation::ALL_ON
            },
            ..ModelConfig::desk()
        }
    }

    fn zero_param(store: &mut ParamStore<f64>, id: crate::ParamId) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape));
    }

    #[test]
    fn effn_shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let effn = Effn::new(&mut store, "f", 8, 32, &mut rng);
        let g = Graph::inference(&store);
        let x = TokenSequence::new(g.constant(rand_tensor(&[2, 16, 8], 1)), (4, 4)).unwrap();
        assert_eq!(effn.forward(&g, &x).unwrap().data.shape(), &[2, 16, 8]);
    }

    #[test]
    fn effn_rejects_grid_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let effn = Effn::new(&mut store, "f", 8, 32, &mut rng);
        let g = Graph::inference(&store);
        let x = TokenSequence {
            data: g.constant(rand_tensor(&[2, 15, 8], 1)),
            grid: (4, 4),
        };
        assert!(matches!(effn.forward(&g, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_effn_and_mlp_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let effn = Effn::new(&mut store, "f", 8, 32, &mut rng);
        let mlp = Mlp::new(&mut store, "m", 8, 32, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            zero_param(&mut store, id);
        }
        let g = Graph::inference(&store);
        let x = TokenSequence::new(g.constant(rand_tensor(&[2, 16, 8], 2)), (4, 4)).unwrap();
        for out in [effn.forward(&g, &x).unwrap(), mlp.forward(&g, &x).unwrap()] {
            assert_eq!(out.data.shape(), &[2, 16, 8]);
            assert!(out.data.value().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn effn_with_identity_convs_is_mlp_with_double_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let (dim, hidden) = (4, 6);
        let effn = Effn::new(&mut store, "f", dim, hidden, &mut rng);
        let mut dw = Tensor::zeros(vec![hidden, 1, 3, 3]);
        for c in 0..hidden {
            dw[[c, 0, 1, 1]] = 1.0;
        }
        store.set(effn.dw.weight, dw);
        let mut pw = Tensor::zeros(vec![hidden, hidden, 1, 1]);
        for c in 0..hidden {
            pw[[c, c, 0, 0]] = 1.0;
        }
        store.set(effn.pw.weight, pw);
        store.set(effn.expand.bias, rand_tensor(&[hidden], 5));
        store.set(effn.project.bias, rand_tensor(&[dim], 6));

        let xt = rand_tensor(&[2, 9, dim], 7);
        let g = Graph::inference(&store);
        let x = TokenSequence::new(g.constant(xt.clone()), (3, 3)).unwrap();
        let got = effn.forward(&g, &x).unwrap();

        // Dense reference: project(gelu(gelu(expand(x)))) computed entry by entry.
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let we = store.get(effn.expand.weight);
        let be = store.get(effn.expand.bias);
        let wp = store.get(effn.project.weight);
        let bp = store.get(effn.project.bias);
        for b in 0..2 {
            for l in 0..9 {
                let hid: Vec<f64> = (0..hidden)
                    .map(|j| gelu(gelu((0..dim).map(|i| xt[[b, l, i]] * we[[i, j]]).sum::<f64>() + be[[j]])))
                    .collect();
                for o in 0..dim {
                    let want = (0..hidden).map(|j| hid[j] * wp[[j, o]]).sum::<f64>() + bp[[o]];
                    assert!((got.data.value()[[b, l, o]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ablated_mlp_has_fewer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        Effn::new(&mut a, "f", 8, 32, &mut rng);
        Mlp::new(&mut b, "f", 8, 32, &mut rng);
        // EFFN adds dw (32·9 + 32) and pw (32·32 + 32) on top of the MLP.
        assert_eq!(a.num_scalars() - b.num_scalars(), 32 * 9 + 32 + 32 * 32 + 32);
    }

    fn build_pair(effn: bool, seed: u64) -> (ParamStore<f64>, MwaBlockPair) {
        let cfg = small_cfg(effn);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let pair = MwaBlockPair::new(&mut store, "p", &cfg, 8, 2, (8, 8), &mut rng).unwrap();
        (store, pair)
    }

    #[test]
    fn pair_with_zero_branches_is_identity() {
        for effn in [true, false] {
            let (mut store, pair) = build_pair(effn, 1);
            let mut zero = vec![pair.regular.attn.proj.weight, pair.regular.attn.proj.bias];
            zero.extend([pair.shifted.attn.proj.weight, pair.shifted.attn.proj.bias]);
            for blk in [&pair.regular, &pair.shifted] {
                match &blk.ffn {
                    FeedForward::Effn(f) => zero.extend([f.project.weight, f.project.bias]),
                    FeedForward::Mlp(f) => zero.extend([f.project.weight, f.project.bias]),
                }
            }
            for id in zero {
                zero_param(&mut store, id);
            }
            let xt = rand_tensor(&[2, 64, 8], 3);
            let g = Graph::inference(&store);
            let x = TokenSequence::new(g.constant(xt.clone()), (8, 8)).unwrap();
            let y = pair.forward(&g, &x).unwrap();
            assert_eq!(y.data.value(), &xt);
        }
    }

    #[test]
    fn unshifted_pair_equals_two_plain_window_blocks() {
        let (store, mut pair) = build_pair(true, 2);
        pair.shifted.force_no_shift();
        let xt = rand_tensor(&[1, 64, 8], 4);
        let g = Graph::inference(&store);
        let x = TokenSequence::new(g.constant(xt), (8, 8)).unwrap();
        let got = pair.forward(&g, &x).unwrap();

        // Reference that never rolls: x + attn(windows(LN x)), then x + ffn(LN x).
        let plain = |blk: &MwaBlock, x: &TokenSequence<f64>| {
            let t = g.reshape(&blk.norm1.forward(&g, &x.data), &[1, 8, 8, 8]);
            let w = g.reshape(&partition_var(&g, &t, 4), &[4, 16, 8]);
            let a = blk.attn.forward(&g, &w, None).unwrap();
            let a = reverse_var(&g, &g.reshape(&a, &[4, 4, 4, 8]), 4, 8, 8);
            let x1 = g.add(&x.data, &g.reshape(&a, &[1, 64, 8]));
            let n = TokenSequence::new(blk.norm2.forward(&g, &x1), (8, 8)).unwrap();
            let f = blk.ffn.forward(&g, &n).unwrap();
            TokenSequence::new(g.add(&x1, &f.data), (8, 8)).unwrap()
        };
        let want = plain(&pair.shifted, &plain(&pair.regular, &x));
        assert_eq!(got.data.value(), want.data.value());
    }

    #[test]
    fn pair_preserves_shape_and_is_deterministic() {
        let (store, pair) = build_pair(true, 5);
        let xt = rand_tensor(&[3, 64, 8], 6);
        let run = || {
            let g = Graph::inference(&store);
            let x = TokenSequence::new(g.constant(xt.clone()), (8, 8)).unwrap();
            pair.forward(&g, &x).unwrap().data.to_tensor()
        };
        let a = run();
        assert_eq!(a.shape(), &[3, 64, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn effn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let effn = Effn::new(&mut store, "f", 4, 8, &mut rng);
        let params: Vec<_> = store.ids().collect();
        let x = rand_tensor(&[2, 16, 4], 9);
        let r = check_gradients(
            &store,
            &params,
            &[x],
            |g, v| {
                let t = TokenSequence::new(v[0].clone(), (4, 4)).unwrap();
                weighted_sum(g, &effn.forward(g, &t).unwrap().data, 10)
            },
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn token_sequence_checks_grid() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let v = g.constant(from_vec(&[1, 6, 1], vec![0.0; 6]));
        assert!(TokenSequence::new(v.clone(), (2, 3)).is_ok());
        assert!(TokenSequence::new(v, (2, 2)).is_err());
    }
}

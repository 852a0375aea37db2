//! Window machinery for shifted-window self-attention: tiling the token grid
//! into `M×M` windows, cyclic shifts, the shifted-window mask, the relative
//! position bias and the attention kernel
//! `softmax(QKᵀ/√d + B + mask)·V`.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autograd::{roll_hw, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Linear, TRUNC_NORMAL_STD};
use crate::tensor::{all_finite, contiguous, cst, Element, Tensor};

/// Additive logit penalty for token pairs from different pre-shift regions.
pub const MASK_NEG: f64 = -100.0;

fn grid_dims<T: Element>(x: &Tensor<T>) -> Result<[usize; 4]> {
    match x.shape() {
        &[b, h, w, c] if h > 0 && w > 0 => Ok([b, h, w, c]),
        s => Err(Error::shape(format!("expected a [B, H, W, C] feature map, got {s:?}"))),
    }
}

/// Tiles `[B, H, W, C]` into `[B·nW, M, M, C]`, windows in row-major tile order.
pub fn window_partition<T: Element>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = grid_dims(x)?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!("window {m} does not tile a {h}x{w} map")));
    }
    let t = x
        .clone()
        .into_shape_with_order(vec![b, h / m, m, w / m, m, c])
        .map_err(|e| Error::shape(e.to_string()))?;
    let t = contiguous(t.permuted_axes(vec![0, 1, 3, 2, 4, 5]));
    t.into_shape_with_order(vec![b * (h / m) * (w / m), m, m, c])
        .map_err(|e| Error::shape(e.to_string()))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(windows: &Tensor<T>, m: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = windows.shape();
    if s.len() != 4 || s[1] != m || s[2] != m || m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!("windows {s:?} inconsistent with M={m}, {h}x{w}")));
    }
    let nw = (h / m) * (w / m);
    if s[0] % nw != 0 {
        return Err(Error::shape(format!("{} windows is not a multiple of {nw} per image", s[0])));
    }
    let (b, c) = (s[0] / nw, s[3]);
    let t = windows
        .clone()
        .into_shape_with_order(vec![b, h / m, w / m, m, m, c])
        .map_err(|e| Error::shape(e.to_string()))?;
    let t = contiguous(t.permuted_axes(vec![0, 1, 3, 2, 4, 5]));
    t.into_shape_with_order(vec![b, h, w, c]).map_err(|e| Error::shape(e.to_string()))
}

/// Torus roll of the spatial axes: `out[b, i, j, c] = x[b, (i − dy) mod H, (j − dx) mod W, c]`.
///
/// The shifted-window layer applies `(−⌊M/2⌋, −⌊M/2⌋)` before attention and the
/// opposite shift afterwards.
pub fn cyclic_shift<T: Element>(x: &Tensor<T>, shift: (isize, isize)) -> Result<Tensor<T>> {
    grid_dims(x)?;
    Ok(roll_hw(&contiguous(x.clone()), -shift.0, -shift.1))
}

/// Differentiable window partition on a `[B, H, W, C]` var.
pub fn partition_var<T: Element>(g: &Graph<T>, x: &Var<T>, m: usize) -> Var<T> {
    let [b, h, w, c] = <[usize; 4]>::try_from(x.shape()).expect("[B, H, W, C]");
    let t = g.reshape(x, &[b, h / m, m, w / m, m, c]);
    let t = g.permute(&t, &[0, 1, 3, 2, 4, 5]);
    g.reshape(&t, &[b * (h / m) * (w / m), m, m, c])
}

/// Differentiable inverse of [`partition_var`].
pub fn reverse_var<T: Element>(g: &Graph<T>, windows: &Var<T>, m: usize, h: usize, w: usize) -> Var<T> {
    let s = windows.shape();
    let nw = (h / m) * (w / m);
    let (b, c) = (s[0] / nw, s[3]);
    let t = g.reshape(windows, &[b, h / m, w / m, m, m, c]);
    let t = g.permute(&t, &[0, 1, 3, 2, 4, 5]);
    g.reshape(&t, &[b, h, w, c])
}

/// Differentiable [`cyclic_shift`].
pub fn shift_var<T: Element>(g: &Graph<T>, x: &Var<T>, shift: (isize, isize)) -> Var<T> {
    g.roll_hw(x, -shift.0, -shift.1)
}

/// Bin of every (query, key) displacement inside an `M×M` window, `[M², M²]`.
pub fn relative_position_index(m: usize) -> Array2<usize> {
    let n = m * m;
    let span = 2 * m - 1;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (hi, wi) = ((i / m) as isize, (i % m) as isize);
        let (hj, wj) = ((j / m) as isize, (j % m) as isize);
        let dh = (hi - hj + m as isize - 1) as usize;
        let dw = (wi - wj + m as isize - 1) as usize;
        dh * span + dw
    })
}

/// Shifted-window mask: `[nW, M², M²]` with entries 0 (same pre-shift
/// region) or [`MASK_NEG`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub mask: Array3<f64>,
}

impl AttentionMask {
    pub fn num_windows(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        self.mask.mapv(cst::<T>).into_dyn()
    }
}

/// Region id of every pixel of the rolled `h×w` grid (3 bands per axis).
pub fn shift_regions(h: usize, w: usize, m: usize, shift: usize) -> Array2<usize> {
    let band = |p: usize, n: usize| {
        if p < n - m {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    Array2::from_shape_fn((h, w), |(i, j)| band(i, h) * 3 + band(j, w))
}

pub fn build_attention_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<AttentionMask> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!("window {m} does not tile a {h}x{w} map")));
    }
    let n = m * m;
    let nw = (h / m) * (w / m);
    if shift == 0 {
        return Ok(AttentionMask {
            mask: Array3::zeros((nw, n, n)),
        });
    }
    if shift >= m {
        return Err(Error::shape(format!("shift {shift} must be smaller than window {m}")));
    }
    let regions = shift_regions(h, w, m, shift);
    let ww = w / m;
    let mask = Array3::from_shape_fn((nw, n, n), |(win, q, k)| {
        let (wy, wx) = (win / ww, win % ww);
        let at = |t: usize| regions[[wy * m + t / m, wx * m + t % m]];
        if at(q) == at(k) {
            0.0
        } else {
            MASK_NEG
        }
    });
    Ok(AttentionMask { mask })
}

/// Learned bias table `[(2M−1)², heads]` plus the fixed displacement index.
#[derive(Debug, Clone)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub index: Arc<Vec<usize>>,
    pub window: usize,
    pub heads: usize,
}

impl RelativePositionBias {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        window: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let entries = (2 * window - 1) * (2 * window - 1);
        let table = store.add(
            format!("{name}.relative_position_bias_table"),
            trunc_normal(rng, &[entries, heads], TRUNC_NORMAL_STD),
        );
        let index = Arc::new(relative_position_index(window).into_iter().collect());
        Self {
            table,
            index,
            window,
            heads,
        }
    }

    /// Dense bias `B[h, i, j] = table[index[i, j], h]`, shape `[heads, M², M²]`.
    pub fn dense<T: Element>(&self, g: &Graph<T>) -> Var<T> {
        g.gather_bias(&g.param(self.table), self.index.clone(), self.window * self.window)
    }
}

/// `softmax(QKᵀ/√d + B + mask)·V` per window and head.
///
/// `q`, `k`, `v` are `[nW', heads, N, d]`; `bias` is `[heads, N, N]`; the
/// optional mask is `[nW, N, N]` with `nW` dividing `nW'` (windows of one image
/// are contiguous, images follow each other).
pub fn window_attention<T: Element>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    bias: &Var<T>,
    mask: Option<&Var<T>>,
) -> Result<Var<T>> {
    let s = q.shape().to_vec();
    if s.len() != 4 || k.shape() != s.as_slice() || v.shape() != s.as_slice() {
        return Err(Error::shape(format!(
            "q/k/v must share a [nW, heads, N, d] shape, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (nwb, heads, n, d) = (s[0], s[1], s[2], s[3]);
    if bias.shape() != [heads, n, n] {
        return Err(Error::shape(format!("bias {:?} vs heads {heads}, N {n}", bias.shape())));
    }
    for (name, t) in [("q", q), ("k", k), ("v", v), ("bias", bias)] {
        if !all_finite(t.value()) {
            return Err(Error::Numeric(format!("non-finite entries in {name}")));
        }
    }
    let flat = |x: &Var<T>| g.reshape(x, &[nwb * heads, n, d]);
    let scores = g.bmm(&flat(q), &flat(k), true);
    let scores = g.scale(&scores, T::one() / cst::<T>(d as f64).sqrt());
    let scores = g.reshape(&scores, &[nwb, heads, n, n]);
    let scores = g.add(&scores, &g.reshape(bias, &[1, heads, n, n]));
    let scores = match mask {
        None => scores,
        Some(mask) => {
            let nw = mask.shape()[0];
            if mask.shape() != [nw, n, n] || nw == 0 || nwb % nw != 0 {
                return Err(Error::shape(format!("mask {:?} incompatible with {nwb} windows", mask.shape())));
            }
            let s5 = g.reshape(&scores, &[nwb / nw, nw, heads, n, n]);
            let s5 = g.add(&s5, &g.reshape(mask, &[1, nw, 1, n, n]));
            g.reshape(&s5, &[nwb, heads, n, n])
        }
    };
    let attn = g.softmax_last(&scores);
    let out = g.bmm(&g.reshape(&attn, &[nwb * heads, n, n]), &flat(v), false);
    Ok(g.reshape(&out, &[nwb, heads, n, d]))
}

/// Multi-head self-attention inside windows: qkv projection, biased window
/// attention, output projection.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias: RelativePositionBias,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            bias: RelativePositionBias::new(store, name, window, heads, rng),
            dim,
            heads,
            window,
        }
    }

    /// `windows` is `[nW', M², C]`; returns the same shape.
    pub fn forward<T: Element>(&self, g: &Graph<T>, windows: &Var<T>, mask: Option<&Var<T>>) -> Result<Var<T>> {
        let s = windows.shape();
        let (nwb, n, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let qkv = self.qkv.forward(g, windows);
        let qkv = g.reshape(&qkv, &[nwb, n, 3, self.heads, d]);
        let qkv = g.permute(&qkv, &[2, 0, 3, 1, 4]);
        let pick = |i: usize| {
            let t = g.narrow(&qkv, 0, i, i + 1);
            g.reshape(&t, &[nwb, self.heads, n, d])
        };
        let (q, k, v) = (pick(0), pick(1), pick(2));
        let out = window_attention(g, &q, &k, &v, &self.bias.dense(g), mask)?;
        let out = g.permute(&out, &[0, 2, 1, 3]);
        let out = g.reshape(&out, &[nwb, n, c]);
        Ok(self.proj.forward(g, &out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::tensor::from_vec;
    use ndarray::s;

    #[test]
    fn partition_of_single_window_is_identity() {
        let x = rand_tensor(&[2, 4, 4, 3], 0);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.shape(), &[2, 4, 4, 3]);
        assert_eq!(w, x);
    }

    #[test]
    fn partition_tiles_in_row_major_order() {
        let x = rand_tensor(&[1, 8, 8, 3], 1);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.shape(), &[4, 4, 4, 3]);
        assert_eq!(w.slice(s![0, .., .., ..]), x.slice(s![0, 0..4, 0..4, ..]));
        assert_eq!(w.slice(s![1, .., .., ..]), x.slice(s![0, 0..4, 4..8, ..]));
        assert_eq!(w.slice(s![2, .., .., ..]), x.slice(s![0, 4..8, 0..4, ..]));
    }

    #[test]
    fn partition_rejects_non_tiling_window() {
        let x = rand_tensor(&[1, 6, 8, 2], 2);
        assert!(matches!(window_partition(&x, 4), Err(Error::Shape(_))));
        let w = rand_tensor(&[3, 4, 4, 2], 2);
        assert!(matches!(window_reverse(&w, 4, 8, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn reverse_of_zero_windows_is_zero() {
        let w = Tensor::<f64>::zeros(vec![8, 2, 2, 3]);
        let x = window_reverse(&w, 2, 4, 4).unwrap();
        assert_eq!(x.shape(), &[2, 4, 4, 3]);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_windows_breaks_round_trip() {
        let x = rand_tensor(&[1, 4, 4, 1], 3);
        let mut w = window_partition(&x, 2).unwrap();
        let first = w.slice(s![0, .., .., ..]).to_owned();
        let second = w.slice(s![1, .., .., ..]).to_owned();
        w.slice_mut(s![0, .., .., ..]).assign(&second);
        w.slice_mut(s![1, .., .., ..]).assign(&first);
        assert_ne!(window_reverse(&w, 2, 4, 4).unwrap(), x);
    }

    #[test]
    fn cyclic_shift_matches_roll_definition() {
        let x = from_vec(&[1, 4, 1, 1], vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = cyclic_shift(&x, (-1, 0)).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(cyclic_shift(&x, (0, 0)).unwrap(), x);
        let z = rand_tensor(&[2, 8, 4, 3], 4);
        let back = cyclic_shift(&cyclic_shift(&z, (-2, 3)).unwrap(), (2, -3)).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn relative_index_small_windows() {
        assert_eq!(relative_position_index(1), Array2::from_elem((1, 1), 0));
        let idx = relative_position_index(2);
        for i in 0..4 {
            assert_eq!(idx[[i, i]], 4);
        }
        // (0,0) -> (1,1) and back
        assert_eq!(idx[[0, 3]], 0);
        assert_eq!(idx[[3, 0]], 8);
    }

    #[test]
    fn relative_index_is_mirror_symmetric() {
        for m in 1..=4 {
            let idx = relative_position_index(m);
            let center = (m - 1) * (2 * m - 1) + (m - 1);
            let entries = (2 * m - 1) * (2 * m - 1);
            for ((i, j), &v) in idx.indexed_iter() {
                assert!(v < entries);
                assert_eq!(v + idx[[j, i]], 2 * center);
            }
        }
    }

    #[test]
    fn zero_shift_gives_zero_mask() {
        let m = build_attention_mask(8, 8, 4, 0).unwrap();
        assert_eq!(m.mask.shape(), &[4, 16, 16]);
        assert!(m.mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_window_mask_matches_brute_force_regions() {
        // Oracle: label the un-shifted grid by the 3x3 band layout, roll it the
        // same way the features are rolled, and compare labels pairwise.
        let m = 4;
        let shift = 2;
        let mask = build_attention_mask(m, m, m, shift).unwrap();
        // With H = M the bands are [0,0), [0,2), [2,4): only two live bands per axis.
        let label = |p: usize| if p < m - shift { 1 } else { 2 };
        for q in 0..m * m {
            for k in 0..m * m {
                let same = label(q / m) == label(k / m) && label(q % m) == label(k % m);
                let expect = if same { 0.0 } else { MASK_NEG };
                assert_eq!(mask.mask[[0, q, k]], expect, "q={q} k={k}");
            }
        }
    }

    #[test]
    fn mask_is_symmetric_and_binary() {
        let mask = build_attention_mask(16, 8, 4, 2).unwrap();
        for ((w, q, k), &v) in mask.mask.indexed_iter() {
            assert!(v == 0.0 || v == MASK_NEG);
            assert_eq!(v, mask.mask[[w, k, q]]);
        }
        // windows away from the wrap-around seam are unmasked
        assert!(mask.mask.slice(s![0, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_attention_averages_values() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let q = g.constant(Tensor::zeros(vec![2, 1, 4, 3]));
        let k = g.constant(rand_tensor(&[2, 1, 4, 3], 5));
        let vt = rand_tensor(&[2, 1, 4, 3], 6);
        let v = g.constant(vt.clone());
        let b = g.constant(Tensor::zeros(vec![1, 4, 4]));
        let out = window_attention(&g, &q, &k, &v, &b, None).unwrap();
        for w in 0..2 {
            for c in 0..3 {
                let mean: f64 = (0..4).map(|r| vt[[w, 0, r, c]]).sum::<f64>() / 4.0;
                for r in 0..4 {
                    assert!((out.value()[[w, 0, r, c]] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_window_returns_values() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let q = g.constant(rand_tensor(&[3, 2, 1, 4], 7));
        let k = g.constant(rand_tensor(&[3, 2, 1, 4], 8));
        let vt = rand_tensor(&[3, 2, 1, 4], 9);
        let v = g.constant(vt.clone());
        let b = g.constant(rand_tensor(&[2, 1, 1], 10));
        let out = window_attention(&g, &q, &k, &v, &b, None).unwrap();
        for (a, e) in out.value().iter().zip(vt.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let store = ParamStore::<f64>::new();
        let g = Graph::inference(&store);
        let mut qt = rand_tensor(&[1, 1, 4, 2], 11);
        qt[[0, 0, 1, 1]] = f64::NAN;
        let q = g.constant(qt);
        let k = g.constant(rand_tensor(&[1, 1, 4, 2], 12));
        let b = g.constant(Tensor::zeros(vec![1, 4, 4]));
        let r = window_attention(&g, &q, &k, &k, &b, None);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}

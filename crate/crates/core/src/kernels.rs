//! Raw convolution kernels on flat NCHW buffers.

use crate::tensor::{gemm, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        (
            (self.height + 2 * self.pad - eff_h) / self.stride + 1,
            (self.width + 2 * self.pad - eff_w) / self.stride + 1,
        )
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_ch && self.groups == self.out_ch
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    #[inline]
    fn src_coord(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }

    fn check(&self) {
        assert!(
            self.groups == 1 || self.is_depthwise(),
            "only dense or depth-wise convolutions are supported"
        );
    }
}

fn im2col<T: Element>(g: &Conv2dGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for ci in 0..g.in_ch {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    match g.src_coord(oy, ky, g.height) {
                        Some(iy) => {
                            for ox in 0..wo {
                                dst[oy * wo + ox] = match g.src_coord(ox, kx, g.width) {
                                    Some(ix) => plane[iy * g.width + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                        None => dst[oy * wo..(oy + 1) * wo].fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Conv2dGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let Some(iy) = g.src_coord(oy, ky, g.height) else {
                        continue;
                    };
                    for ox in 0..wo {
                        if let Some(ix) = g.src_coord(ox, kx, g.width) {
                            plane[iy * g.width + ix] = plane[iy * g.width + ix] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &Conv2dGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    g.check();
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let in_plane = g.in_ch * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_ch * hw];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let k = g.patch_len();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
        for b in 0..g.batch {
            let xb = &x[b * in_plane..(b + 1) * in_plane];
            let ob = &mut out[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
            if g.is_pointwise() {
                gemm(g.out_ch, k, hw, w, false, xb, false, ob, false);
            } else {
                im2col(g, xb, &mut cols);
                gemm(g.out_ch, k, hw, w, false, &cols, false, ob, false);
            }
        }
    }
    if let Some(bias) = bias {
        // planes are laid out (batch, channel)
        for (idx, plane) in out.chunks_mut(hw).enumerate() {
            let bv = bias[idx % g.out_ch];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

fn depthwise_forward<T: Element>(g: &Conv2dGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let taps = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let plane_idx = b * g.in_ch + c;
            let xp = &x[plane_idx * g.height * g.width..(plane_idx + 1) * g.height * g.width];
            let op = &mut out[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
            let wc = &w[c * taps..(c + 1) * taps];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wc[ky * g.kw + kx];
                    for oy in 0..ho {
                        let Some(iy) = g.src_coord(oy, ky, g.height) else {
                            continue;
                        };
                        let xrow = &xp[iy * g.width..(iy + 1) * g.width];
                        let orow = &mut op[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            if let Some(ix) = g.src_coord(ox, kx, g.width) {
                                *o = *o + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Element>(g: &Conv2dGeom, x: &[T], w: &[T], gout: &[T]) -> ConvGrads<T> {
    g.check();
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let in_plane = g.in_ch * g.height * g.width;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_ch];
    for (idx, plane) in gout.chunks(hw).enumerate() {
        let c = idx % g.out_ch;
        db[c] = db[c] + plane.iter().copied().sum::<T>();
    }
    if g.is_depthwise() {
        depthwise_backward(g, x, w, gout, &mut dx, &mut dw);
        return ConvGrads { dx, dw, db };
    }
    let k = g.patch_len();
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..g.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let gb = &gout[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
        if g.is_pointwise() {
            gemm(g.out_ch, hw, k, gb, false, xb, true, &mut dw, true);
            gemm(k, g.out_ch, hw, w, true, gb, false, dxb, false);
        } else {
            im2col(g, xb, &mut cols);
            gemm(g.out_ch, hw, k, gb, false, &cols, true, &mut dw, true);
            gemm(k, g.out_ch, hw, w, true, gb, false, &mut cols, false);
            col2im(g, &cols, dxb);
        }
    }
    ConvGrads { dx, dw, db }
}

fn depthwise_backward<T: Element>(
    g: &Conv2dGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let taps = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let plane_idx = b * g.in_ch + c;
            let xp = &x[plane_idx * g.height * g.width..(plane_idx + 1) * g.height * g.width];
            let dxp = &mut dx[plane_idx * g.height * g.width..(plane_idx + 1) * g.height * g.width];
            let gp = &gout[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let tap = c * taps + ky * g.kw + kx;
                    let wv = w[tap];
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let Some(iy) = g.src_coord(oy, ky, g.height) else {
                            continue;
                        };
                        for ox in 0..wo {
                            if let Some(ix) = g.src_coord(ox, kx, g.width) {
                                let go = gp[oy * wo + ox];
                                acc = acc + go * xp[iy * g.width + ix];
                                dxp[iy * g.width + ix] = dxp[iy * g.width + ix] + go * wv;
                            }
                        }
                    }
                    dw[tap] = dw[tap] + acc;
                }
            }
        }
    }
}

/// Geometry of a kernel-2, stride-2 transposed convolution (exact 2× upsampling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Deconv2Geom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

/// Weight layout `[in_ch, out_ch, 2, 2]`; output `[batch, out_ch, 2h, 2w]`.
pub fn deconv2_forward<T: Element>(g: &Deconv2Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.height * g.width;
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let rows = g.out_ch * 4;
    let mut y = vec![T::zero(); rows * hw];
    let mut out = vec![T::zero(); g.batch * g.out_ch * oh * ow];
    for b in 0..g.batch {
        let xb = &x[b * g.in_ch * hw..(b + 1) * g.in_ch * hw];
        gemm(rows, g.in_ch, hw, w, true, xb, false, &mut y, false);
        let ob = &mut out[b * g.out_ch * oh * ow..(b + 1) * g.out_ch * oh * ow];
        for co in 0..g.out_ch {
            let bv = bias.map_or(T::zero(), |bs| bs[co]);
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &y[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                for i in 0..g.height {
                    for j in 0..g.width {
                        ob[(co * oh + 2 * i + dy) * ow + 2 * j + dx] = src[i * g.width + j] + bv;
                    }
                }
            }
        }
    }
    out
}

pub fn deconv2_backward<T: Element>(g: &Deconv2Geom, x: &[T], w: &[T], gout: &[T]) -> ConvGrads<T> {
    let hw = g.height * g.width;
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let rows = g.out_ch * 4;
    let mut gy = vec![T::zero(); rows * hw];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        let gb = &gout[b * g.out_ch * oh * ow..(b + 1) * g.out_ch * oh * ow];
        for co in 0..g.out_ch {
            let mut acc = T::zero();
            for d in 0..4 {
                let (dy, dxo) = (d / 2, d % 2);
                let dst = &mut gy[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                for i in 0..g.height {
                    for j in 0..g.width {
                        let v = gb[(co * oh + 2 * i + dy) * ow + 2 * j + dxo];
                        dst[i * g.width + j] = v;
                        acc = acc + v;
                    }
                }
            }
            db[co] = db[co] + acc;
        }
        let xb = &x[b * g.in_ch * hw..(b + 1) * g.in_ch * hw];
        gemm(g.in_ch, rows, hw, w, false, &gy, false, &mut dx[b * g.in_ch * hw..(b + 1) * g.in_ch * hw], false);
        gemm(g.in_ch, hw, rows, xb, false, &gy, true, &mut dw, true);
    }
    ConvGrads { dx, dw, db }
}

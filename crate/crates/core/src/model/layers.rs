//! Forward and backward kernels. Tensors are flat row-major slices:
//! feature maps `[channel][row][col]`, dense weights `[out][in]`.

use super::params::{ParamBundle, ParamId, Real};

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Same-padded 3×3 convolution plus bias.
pub(crate) fn conv3x3_forward<S: Real>(
    input: &[S],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[S],
    bias: &[S],
    cout: usize,
) -> Vec<S> {
    let plane = h * w;
    let mut out = vec![S::zero(); cout * plane];
    for co in 0..cout {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let k = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy.max(0)) as usize;
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let out_row = &mut out_plane[y * w..(y + 1) * w];
                    let in_row = &in_plane[yi * w..(yi + 1) * w];
                    // centre tap covers the whole row; side taps drop one column
                    axpy(&mut out_row[1..], &in_row[..w - 1], k[ky * 3]);
                    axpy(out_row, in_row, k[ky * 3 + 1]);
                    axpy(&mut out_row[..w - 1], &in_row[1..], k[ky * 3 + 2]);
                }
            }
        }
    }
    out
}

#[inline]
fn axpy<S: Real>(y: &mut [S], x: &[S], a: S) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Eight independent partial sums so the reduction vectorizes.
#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Gradients of [`conv3x3_forward`]. Input gradients are produced only for
/// channels in `d_input_channels`, written into `d_input` laid out like
/// `input` restricted to those channels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<S: Real>(
    input: &[S],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[S],
    cout: usize,
    d_out: &[S],
    d_weight: &mut [S],
    d_bias: &mut [S],
    d_input_channels: std::ops::Range<usize>,
    d_input: &mut [S],
) {
    let plane = h * w;
    for co in 0..cout {
        let g = &d_out[co * plane..(co + 1) * plane];
        d_bias[co] += g.iter().copied().sum::<S>();
        for ci in 0..cin {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let kbase = (co * cin + ci) * 9;
            let want_dx = d_input_channels.contains(&ci);
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy.max(0)) as usize;
                let mut acc = [S::zero(); 3];
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let g_row = &g[y * w..(y + 1) * w];
                    let in_row = &in_plane[yi * w..(yi + 1) * w];
                    acc[0] += dot(&g_row[1..], &in_row[..w - 1]);
                    acc[1] += dot(g_row, in_row);
                    acc[2] += dot(&g_row[..w - 1], &in_row[1..]);
                    if want_dx {
                        let off = (ci - d_input_channels.start) * plane + yi * w;
                        let dx_row = &mut d_input[off..off + w];
                        axpy(&mut dx_row[..w - 1], &g_row[1..], weight[kbase + ky * 3]);
                        axpy(dx_row, g_row, weight[kbase + ky * 3 + 1]);
                        axpy(&mut dx_row[1..], &g_row[..w - 1], weight[kbase + ky * 3 + 2]);
                    }
                }
                for (kx, a) in acc.into_iter().enumerate() {
                    d_weight[kbase + ky * 3 + kx] += a;
                }
            }
        }
    }
}

/// `relu(maxpool(z))` over non-overlapping `tp × fp` windows (trailing
/// remainder dropped). Returns the pooled map and the flat argmax per
/// output cell.
pub(crate) fn maxpool_relu_forward<S: Real>(
    z: &[S],
    c: usize,
    h: usize,
    w: usize,
    tp: usize,
    fp: usize,
) -> (Vec<S>, Vec<u32>) {
    let (oh, ow) = (h / tp, w / fp);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_i = 0usize;
                for y in oy * tp..(oy + 1) * tp {
                    for x in ox * fp..(ox + 1) * fp {
                        let i = (ch * h + y) * w + x;
                        if z[i] > best {
                            best = z[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best.max(S::zero()));
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_relu_backward<S: Real>(
    d_out: &[S],
    out: &[S],
    argmax: &[u32],
    z_len: usize,
) -> Vec<S> {
    let mut dz = vec![S::zero(); z_len];
    for ((&g, &y), &i) in d_out.iter().zip(out).zip(argmax) {
        if y > S::zero() {
            dz[i as usize] += g;
        }
    }
    dz
}

/// `W x + b` with `W` stored `[out][in]`.
pub(crate) fn dense_forward<S: Real>(weight: &[S], bias: &[S], x: &[S]) -> Vec<S> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + dot(&weight[o * n_in..(o + 1) * n_in], x))
        .collect()
}

/// Accumulates weight/bias gradients and returns `dL/dx`.
pub(crate) fn dense_backward<S: Real>(
    weight: &[S],
    x: &[S],
    dy: &[S],
    d_weight: &mut [S],
    d_bias: &mut [S],
) -> Vec<S> {
    let n_in = x.len();
    let mut dx = vec![S::zero(); n_in];
    for (o, &g) in dy.iter().enumerate() {
        d_bias[o] += g;
        axpy(&mut d_weight[o * n_in..(o + 1) * n_in], x, g);
        axpy(&mut dx, &weight[o * n_in..(o + 1) * n_in], g);
    }
    dx
}

/// Parameter slots of one GRU direction. Gate order within the stacked
/// `3H` rows is reset, update, candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct GruIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct GruTrace<S> {
    /// Hidden states in processing order, `h[0]` is the zero state.
    pub h: Vec<Vec<S>>,
    pub r: Vec<Vec<S>>,
    pub z: Vec<Vec<S>>,
    pub n: Vec<Vec<S>>,
    /// `W_hn h + b_hn`, needed for the reset-gate gradient.
    pub ghn: Vec<Vec<S>>,
}

impl<S: Real> GruTrace<S> {
    /// Output at original time index `t`.
    pub fn output(&self, t: usize, reverse: bool) -> &[S] {
        let steps = self.r.len();
        let k = if reverse { steps - 1 - t } else { t };
        &self.h[k + 1]
    }
}

pub(crate) fn gru_forward<S: Real>(
    p: &ParamBundle<S>,
    ids: &GruIds,
    xs: &[Vec<S>],
    reverse: bool,
) -> GruTrace<S> {
    let hd = ids.hidden;
    let (w_ih, w_hh, b_ih, b_hh) = (p.get(ids.w_ih), p.get(ids.w_hh), p.get(ids.b_ih), p.get(ids.b_hh));
    let steps = xs.len();
    let mut tr = GruTrace {
        h: vec![vec![S::zero(); hd]],
        r: Vec::with_capacity(steps),
        z: Vec::with_capacity(steps),
        n: Vec::with_capacity(steps),
        ghn: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let x = &xs[if reverse { steps - 1 - k } else { k }];
        let hp = tr.h[k].clone();
        let gi = dense_forward(w_ih, b_ih, x);
        let gh = dense_forward(w_hh, b_hh, &hp);
        let r: Vec<S> = (0..hd).map(|j| sigmoid(gi[j] + gh[j])).collect();
        let z: Vec<S> = (0..hd).map(|j| sigmoid(gi[hd + j] + gh[hd + j])).collect();
        let ghn: Vec<S> = gh[2 * hd..].to_vec();
        let n: Vec<S> = (0..hd).map(|j| (gi[2 * hd + j] + r[j] * ghn[j]).tanh()).collect();
        let h: Vec<S> = (0..hd)
            .map(|j| (S::one() - z[j]) * n[j] + z[j] * hp[j])
            .collect();
        tr.r.push(r);
        tr.z.push(z);
        tr.n.push(n);
        tr.ghn.push(ghn);
        tr.h.push(h);
    }
    tr
}

/// Backpropagation through time. `d_out[t]` is the gradient at original
/// time index `t`; returns input gradients in original order.
pub(crate) fn gru_backward<S: Real>(
    p: &ParamBundle<S>,
    ids: &GruIds,
    xs: &[Vec<S>],
    tr: &GruTrace<S>,
    d_out: &[Vec<S>],
    reverse: bool,
    grads: &mut [S],
) -> Vec<Vec<S>> {
    let hd = ids.hidden;
    let steps = xs.len();
    let (w_ih, w_hh) = (p.get(ids.w_ih), p.get(ids.w_hh));
    let mut dxs = vec![Vec::new(); steps];
    let mut dh_next = vec![S::zero(); hd];
    let mut d_w_ih = vec![S::zero(); ids.w_ih.len];
    let mut d_w_hh = vec![S::zero(); ids.w_hh.len];
    let mut d_b_ih = vec![S::zero(); ids.b_ih.len];
    let mut d_b_hh = vec![S::zero(); ids.b_hh.len];
    for k in (0..steps).rev() {
        let t = if reverse { steps - 1 - k } else { k };
        let (r, z, n, ghn, hp) = (&tr.r[k], &tr.z[k], &tr.n[k], &tr.ghn[k], &tr.h[k]);
        let dh: Vec<S> = (0..hd).map(|j| d_out[t][j] + dh_next[j]).collect();
        let mut dgi = vec![S::zero(); 3 * hd];
        let mut dgh = vec![S::zero(); 3 * hd];
        let mut dh_prev = vec![S::zero(); hd];
        for j in 0..hd {
            let dn = dh[j] * (S::one() - z[j]);
            let dz = dh[j] * (hp[j] - n[j]);
            dh_prev[j] = dh[j] * z[j];
            let dan = dn * (S::one() - n[j] * n[j]);
            let dr = dan * ghn[j];
            let dar = dr * r[j] * (S::one() - r[j]);
            let daz = dz * z[j] * (S::one() - z[j]);
            dgi[j] = dar;
            dgi[hd + j] = daz;
            dgi[2 * hd + j] = dan;
            dgh[j] = dar;
            dgh[hd + j] = daz;
            dgh[2 * hd + j] = dan * r[j];
        }
        dxs[t] = dense_backward(w_ih, &xs[t], &dgi, &mut d_w_ih, &mut d_b_ih);
        let dhp = dense_backward(w_hh, hp, &dgh, &mut d_w_hh, &mut d_b_hh);
        for j in 0..hd {
            dh_next[j] = dh_prev[j] + dhp[j];
        }
    }
    for (id, g) in [(ids.w_ih, d_w_ih), (ids.w_hh, d_w_hh), (ids.b_ih, d_b_ih), (ids.b_hh, d_b_hh)] {
        for (dst, v) in grads[id.range()].iter_mut().zip(g) {
            *dst += v;
        }
    }
    dxs
}

//! Raw numeric kernels over contiguous slices.
//!
//! Every kernel processes batch samples independently and reduces across
//! samples in ascending sample order, so results are bitwise identical
//! regardless of batch composition or thread count.

use rayon::prelude::*;

use crate::tensor::Element;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = E::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn sum<E: Element>(a: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xa[l];
        }
    }
    let mut tail = E::zero();
    for &x in &a[chunks * 8..] {
        tail = tail + x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<E: Element>(alpha: E, x: &[E], y: &mut [E]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn parallel() -> bool {
    rayon::current_num_threads() > 1
}

/// Run `f(sample_index, out_chunk)` for every sample chunk of `out`.
pub fn for_each_sample<E: Element>(
    out: &mut [E],
    chunk: usize,
    f: impl Fn(usize, &mut [E]) + Sync + Send,
) {
    if parallel() && out.len() > chunk {
        out.par_chunks_mut(chunk).enumerate().for_each(|(b, o)| f(b, o));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(b, o)| f(b, o));
    }
}

/// Map every sample to a value, preserving sample order.
pub fn map_samples<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if parallel() && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(wo);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one sample `[cin, h, w]` into columns `[cin*kh*kw, ho*wo]`.
fn im2col<E: Element>(g: &ConvGeom, input: &[E], cols: &mut [E]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        seg.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(E::zero());
                    seg[hi..].fill(E::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in seg[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Fold columns back, accumulating into one sample `[cin, h, w]`.
fn col2im<E: Element>(g: &ConvGeom, cols: &[E], input: &mut [E]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx, wo);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(seg) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(seg) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a, E: Element>(g: &ConvGeom, sample: &'a [E], buf: &'a mut Vec<E>) -> &'a [E] {
    if g.is_pointwise() {
        sample
    } else {
        let (ho, wo) = g.out_hw();
        buf.resize(g.k() * ho * wo, E::zero());
        im2col(g, sample, buf);
        buf
    }
}

/// Output pixels per tile; one tile of every column row stays in cache.
const TILE: usize = 512;

fn tiles(p: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..p).step_by(TILE).map(move |t| t..(t + TILE).min(p))
}

/// Stride-1 convolution on a zero-padded plane. An output row is laid out
/// with the padded width, so every kernel tap is one contiguous axpy over the
/// whole plane; the trailing `kw - 1` columns of each row are junk.
struct Wide {
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    /// Elements covered by one tap: up to the last valid output pixel.
    span: usize,
}

impl Wide {
    fn new(g: &ConvGeom) -> Self {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let (ho, wo) = g.out_hw();
        Wide {
            hp,
            wp,
            ho,
            wo,
            span: (ho - 1) * wp + wo,
        }
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    fn tap(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }

    fn offsets(&self, g: &ConvGeom) -> Vec<usize> {
        (0..g.kh).flat_map(|ky| (0..g.kw).map(move |kx| self.tap(ky, kx))).collect()
    }

    fn pad_sample<E: Element>(&self, g: &ConvGeom, x: &[E]) -> Vec<E> {
        let mut out = vec![E::zero(); g.cin * self.plane()];
        for ci in 0..g.cin {
            for y in 0..g.h {
                let dst = ci * self.plane() + (y + g.pad) * self.wp + g.pad;
                let src = (ci * g.h + y) * g.w;
                out[dst..dst + g.w].copy_from_slice(&x[src..src + g.w]);
            }
        }
        out
    }

    /// Compact `[C, ho, wp]` rows into `[C, ho, wo]`.
    fn narrow<E: Element>(&self, wide: &[E], channels: usize, out: &mut [E]) {
        for c in 0..channels {
            for y in 0..self.ho {
                let src = c * self.ho * self.wp + y * self.wp;
                let dst = (c * self.ho + y) * self.wo;
                out[dst..dst + self.wo].copy_from_slice(&wide[src..src + self.wo]);
            }
        }
    }

    /// Spread `[C, ho, wo]` into `[C, ho, wp]` rows with zero junk columns.
    fn widen<E: Element>(&self, x: &[E], channels: usize) -> Vec<E> {
        let mut out = vec![E::zero(); channels * self.ho * self.wp];
        for c in 0..channels {
            for y in 0..self.ho {
                let src = (c * self.ho + y) * self.wo;
                let dst = c * self.ho * self.wp + y * self.wp;
                out[dst..dst + self.wo].copy_from_slice(&x[src..src + self.wo]);
            }
        }
        out
    }
}

/// `dst[i] += ws[0]*srcs[0][i] + ws[1]*srcs[1][i] + ...`, accumulated left to
/// right exactly like consecutive [`axpy`] calls, but one pass over `dst`.
fn fused_axpy<E: Element, const T: usize>(ws: [E; T], srcs: [&[E]; T], dst: &mut [E]) {
    let n = dst.len();
    let srcs = srcs.map(|s| &s[..n]);
    for i in 0..n {
        let mut a = dst[i];
        for t in 0..T {
            a = a + ws[t] * srcs[t][i];
        }
        dst[i] = a;
    }
}

/// Correlation of `a` with `src` at every tap offset.
fn tap_dots<E: Element>(a: &[E], offs: &[usize], src: &[E], out: &mut [E]) {
    for (v, &o) in out.iter_mut().zip(offs) {
        *v = dot(a, &src[o..o + a.len()]);
    }
}

/// Taps of one kernel applied to one source plane, in `(ky, kx)` order.
fn apply_taps<E: Element>(ws: &[E], offs: &[usize], src: &[E], dst: &mut [E]) {
    let n = dst.len();
    if let (Ok(ws9), Ok(offs9)) = (<[E; 9]>::try_from(ws), <[usize; 9]>::try_from(offs)) {
        fused_axpy(ws9, offs9.map(|o| &src[o..o + n]), dst);
    } else {
        for (&wv, &o) in ws.iter().zip(offs) {
            axpy(wv, &src[o..o + n], dst);
        }
    }
}

fn uses_wide(g: &ConvGeom) -> bool {
    g.stride == 1 && !g.is_pointwise()
}

fn wide_forward<E: Element>(g: &ConvGeom, w: &Wide, x: &[E], weight: &[E], bias: &[E], o: &mut [E]) {
    let xp = w.pad_sample(g, x);
    let plane_out = w.ho * w.wp;
    let mut acc = vec![E::zero(); g.cout * plane_out];
    let taps = g.kh * g.kw;
    let offs = w.offsets(g);
    for co in 0..g.cout {
        let dst = &mut acc[co * plane_out..co * plane_out + w.span];
        dst.fill(bias[co]);
        for ci in 0..g.cin {
            let ws = &weight[(co * g.cin + ci) * taps..(co * g.cin + ci + 1) * taps];
            apply_taps(ws, &offs, &xp[ci * w.plane()..(ci + 1) * w.plane()], dst);
        }
    }
    w.narrow(&acc, g.cout, o);
}

/// Weight and bias gradients of one sample.
fn wide_param_grads<E: Element>(g: &ConvGeom, w: &Wide, x: &[E], go: &[E]) -> (Vec<E>, Vec<E>) {
    let xp = w.pad_sample(g, x);
    let gw_rows = w.widen(go, g.cout);
    let plane_out = w.ho * w.wp;
    let mut gw = vec![E::zero(); g.cout * g.k()];
    let mut gb = vec![E::zero(); g.cout];
    let taps = g.kh * g.kw;
    let offs = w.offsets(g);
    for co in 0..g.cout {
        let gorow = &gw_rows[co * plane_out..co * plane_out + w.span];
        gb[co] = sum(gorow);
        for ci in 0..g.cin {
            let at = (co * g.cin + ci) * taps;
            tap_dots(gorow, &offs, &xp[ci * w.plane()..(ci + 1) * w.plane()], &mut gw[at..at + taps]);
        }
    }
    (gw, gb)
}

fn wide_input_grad<E: Element>(g: &ConvGeom, w: &Wide, weight: &[E], go: &[E], gi: &mut [E]) {
    // Gather form: padded input position q takes go[q - off] for every tap,
    // so the output gradient is embedded with `lead` zeros on both sides.
    let lead = w.tap(g.kh - 1, g.kw - 1);
    let plane_out = w.ho * w.wp;
    let mut ext = vec![E::zero(); g.cout * (plane_out + 2 * lead)];
    let stride = plane_out + 2 * lead;
    for co in 0..g.cout {
        for y in 0..w.ho {
            let src = (co * w.ho + y) * w.wo;
            let dst = co * stride + lead + y * w.wp;
            ext[dst..dst + w.wo].copy_from_slice(&go[src..src + w.wo]);
        }
    }
    let taps = g.kh * g.kw;
    let offs: Vec<usize> = w.offsets(g).iter().map(|&o| lead - o).collect();
    let mut gp = vec![E::zero(); w.plane()];
    let mut ws = vec![E::zero(); taps];
    for ci in 0..g.cin {
        gp.fill(E::zero());
        for co in 0..g.cout {
            ws.copy_from_slice(&weight[(co * g.cin + ci) * taps..(co * g.cin + ci + 1) * taps]);
            apply_taps(&ws, &offs, &ext[co * stride..(co + 1) * stride], &mut gp);
        }
        for y in 0..g.h {
            let src = (y + g.pad) * w.wp + g.pad;
            gi[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w].copy_from_slice(&gp[src..src + g.w]);
        }
    }
}

pub fn conv2d_forward<E: Element>(
    g: &ConvGeom,
    batch: usize,
    input: &[E],
    weight: &[E],
    bias: &[E],
) -> Vec<E> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.k();
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![E::zero(); batch * g.cout * p];
    if uses_wide(g) {
        let w = Wide::new(g);
        for_each_sample(&mut out, g.cout * p, |b, o| {
            wide_forward(g, &w, &input[b * in_sz..(b + 1) * in_sz], weight, bias, o)
        });
        return out;
    }
    for_each_sample(&mut out, g.cout * p, |b, o| {
        let mut buf = Vec::new();
        let cols = columns(g, &input[b * in_sz..(b + 1) * in_sz], &mut buf);
        for co in 0..g.cout {
            o[co * p..(co + 1) * p].fill(bias[co]);
        }
        for t in tiles(p) {
            for kk in 0..k {
                let src = &cols[kk * p + t.start..kk * p + t.end];
                for co in 0..g.cout {
                    axpy(weight[co * k + kk], src, &mut o[co * p + t.start..co * p + t.end]);
                }
            }
        }
    });
    out
}

pub struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub weight: Vec<E>,
    pub bias: Vec<E>,
}

pub fn conv2d_backward<E: Element>(
    g: &ConvGeom,
    batch: usize,
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    need_input: bool,
) -> ConvGrads<E> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.k();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * p;

    let wide = uses_wide(g).then(|| Wide::new(g));
    let partials = map_samples(batch, |b| {
        let x = &input[b * in_sz..(b + 1) * in_sz];
        if let Some(w) = &wide {
            return wide_param_grads(g, w, x, &grad_out[b * out_sz..(b + 1) * out_sz]);
        }
        let mut buf = Vec::new();
        let cols = columns(g, x, &mut buf);
        let go = &grad_out[b * out_sz..(b + 1) * out_sz];
        let mut gw = vec![E::zero(); g.cout * k];
        let gb: Vec<E> = (0..g.cout).map(|co| sum(&go[co * p..(co + 1) * p])).collect();
        for t in tiles(p) {
            for kk in 0..k {
                let src = &cols[kk * p + t.start..kk * p + t.end];
                for co in 0..g.cout {
                    let gorow = &go[co * p + t.start..co * p + t.end];
                    gw[co * k + kk] = gw[co * k + kk] + dot(gorow, src);
                }
            }
        }
        (gw, gb)
    });
    let mut weight_grad = vec![E::zero(); g.cout * k];
    let mut bias_grad = vec![E::zero(); g.cout];
    for (gw, gb) in &partials {
        axpy(E::one(), gw, &mut weight_grad);
        axpy(E::one(), gb, &mut bias_grad);
    }

    let input_grad = need_input.then(|| {
        let mut gin = vec![E::zero(); batch * in_sz];
        for_each_sample(&mut gin, in_sz, |b, gi| {
            let go = &grad_out[b * out_sz..(b + 1) * out_sz];
            if let Some(w) = &wide {
                return wide_input_grad(g, w, weight, go, gi);
            }
            let mut buf = Vec::new();
            let gcols: &mut [E] = if g.is_pointwise() {
                gi
            } else {
                buf.resize(k * p, E::zero());
                &mut buf
            };
            for t in tiles(p) {
                for kk in 0..k {
                    let dst = &mut gcols[kk * p + t.start..kk * p + t.end];
                    for co in 0..g.cout {
                        axpy(weight[co * k + kk], &go[co * p + t.start..co * p + t.end], dst);
                    }
                }
            }
            if !g.is_pointwise() {
                col2im(g, &buf, gi);
            }
        });
        gin
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c.
        let g = ConvGeom {
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
        };
        let (ho, wo) = g.out_hw();
        let x: Vec<f64> = (0..g.cin * g.h * g.w).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.k() * ho * wo).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    fn naive_im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut cols = vec![0.0; g.k() * ho * wo];
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if (0..g.h as isize).contains(&iy) && (0..g.w as isize).contains(&ix) {
                                cols[row * ho * wo + oy * wo + ox] =
                                    x[ci * g.h * g.w + iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    proptest::proptest! {
        #[test]
        fn im2col_matches_elementwise_reference(
            cin in 1usize..3, h in 1usize..7, w in 1usize..7,
            kh in 1usize..4, kw in 1usize..4, stride in 1usize..4, pad in 0usize..3,
        ) {
            proptest::prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
            let g = ConvGeom { cin, h, w, cout: 1, kh, kw, stride, pad };
            let (ho, wo) = g.out_hw();
            let x: Vec<f64> = (0..cin * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.k() * ho * wo];
            im2col(&g, &x, &mut cols);
            proptest::prop_assert_eq!(&cols, &naive_im2col(&g, &x));

            let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&g, &c, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}

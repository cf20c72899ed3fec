//! Convolution kernels on raw NCHW / OIHW buffers, lowered to column
//! matrices so the inner loops run over long contiguous rows.
//!
//! Every loop runs in a fixed order, so results are bit-reproducible.

use crate::tensor::Scalar;

/// Resolved geometry of one grouped 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride as isize, self.padding as isize, self.in_w as isize);
        let kx = kx as isize;
        let lo = if p > kx { (p - kx + s - 1) / s } else { 0 };
        let hi_incl = (w - 1 + p - kx).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.out_w() as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }

    fn in_col(&self, ox: usize, kx: usize) -> usize {
        ox * self.stride + kx - self.padding
    }
}

/// Unfolds one group of the input into a `K × (N·Ho·Wo)` matrix, `K = Cin_g·kh·kw`.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], group: usize, ranges: &[(usize, usize)]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cin_g, plane) = (g.in_per_group(), ho * wo);
    let np = g.batch * plane;
    let in_plane = g.in_h * g.in_w;
    let mut col = vec![T::zero(); cin_g * g.kernel_h * g.kernel_w * np];
    for icl in 0..cin_g {
        let ic = group * cin_g + icl;
        for ky in 0..g.kernel_h {
            for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                let r = (icl * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut col[r * np..(r + 1) * np];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + ic) * in_plane..][..in_plane];
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let dst = &mut dst_row[n * plane + oy * wo..][..wo];
                        if g.stride == 1 && lo < hi {
                            let start = g.in_col(lo, kx);
                            dst[lo..hi].copy_from_slice(&row[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = row[g.in_col(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adds the folded columns of one group back into an input-shaped buffer.
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], group: usize, ranges: &[(usize, usize)], out: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cin_g, plane) = (g.in_per_group(), ho * wo);
    let np = g.batch * plane;
    let in_plane = g.in_h * g.in_w;
    for icl in 0..cin_g {
        let ic = group * cin_g + icl;
        for ky in 0..g.kernel_h {
            for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                let r = (icl * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &col[r * np..(r + 1) * np];
                for n in 0..g.batch {
                    let dst = &mut out[(n * g.in_channels + ic) * in_plane..][..in_plane];
                    for oy in 0..ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let src = &src_row[n * plane + oy * wo..][..wo];
                        let row = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 && lo < hi {
                            let start = g.in_col(lo, kx);
                            axpy(&mut row[start..start + (hi - lo)], &src[lo..hi], T::one());
                        } else {
                            for ox in lo..hi {
                                let ix = g.in_col(ox, kx);
                                row[ix] = row[ix] + src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dst += a * src`.
#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

/// Dot product with eight fixed partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let np = g.batch * plane;
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let k = cin_g * g.kernel_h * g.kernel_w;
    let ranges: Vec<(usize, usize)> = (0..g.kernel_w).map(|kx| g.col_range(kx)).collect();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut acc = vec![T::zero(); np];

    for group in 0..g.groups {
        let col = im2col(g, input, group, &ranges);
        for ocl in 0..cout_g {
            let oc = group * cout_g + ocl;
            acc.fill(bias.map_or(T::zero(), |b| b[oc]));
            let w = &weight[oc * k..(oc + 1) * k];
            for (r, &wv) in w.iter().enumerate() {
                axpy(&mut acc, &col[r * np..(r + 1) * np], wv);
            }
            for n in 0..g.batch {
                out[(n * g.out_channels + oc) * plane..][..plane].copy_from_slice(&acc[n * plane..(n + 1) * plane]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.out_h() * g.out_w();
    let np = g.batch * plane;
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let k = cin_g * g.kernel_h * g.kernel_w;
    let ranges: Vec<(usize, usize)> = (0..g.kernel_w).map(|kx| g.col_range(kx)).collect();

    let gb = need.2.then(|| {
        let mut gb = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let off = (n * g.out_channels + oc) * plane;
                *acc = *acc + grad_out[off..off + plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    let mut gx = need.0.then(|| vec![T::zero(); input.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); weight.len()]);
    if gx.is_none() && gw.is_none() {
        return ConvGrads { input: gx, weight: gw, bias: gb };
    }

    for group in 0..g.groups {
        // grad_out rows of this group, each spanning the whole batch
        let mut go = vec![T::zero(); cout_g * np];
        for ocl in 0..cout_g {
            let oc = group * cout_g + ocl;
            for n in 0..g.batch {
                go[ocl * np + n * plane..][..plane]
                    .copy_from_slice(&grad_out[(n * g.out_channels + oc) * plane..][..plane]);
            }
        }
        if let Some(gw) = gw.as_mut() {
            let col = im2col(g, input, group, &ranges);
            for ocl in 0..cout_g {
                let oc = group * cout_g + ocl;
                let grow = &go[ocl * np..(ocl + 1) * np];
                for r in 0..k {
                    gw[oc * k + r] = dot(grow, &col[r * np..(r + 1) * np]);
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            let mut gcol = vec![T::zero(); k * np];
            for r in 0..k {
                let dst = &mut gcol[r * np..(r + 1) * np];
                for ocl in 0..cout_g {
                    let oc = group * cout_g + ocl;
                    axpy(dst, &go[ocl * np..(ocl + 1) * np], weight[oc * k + r]);
                }
            }
            col2im(g, &gcol, group, &ranges, gx);
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_ranges_cover_valid_taps() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            in_h: 5,
            in_w: 5,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
            groups: 1,
        };
        assert_eq!(g.out_w(), 3);
        for kx in 0..3 {
            let (lo, hi) = g.col_range(kx);
            for ox in 0..g.out_w() {
                let ix = (ox * 2 + kx) as isize - 1;
                let valid = (0..5).contains(&ix);
                assert_eq!(valid, (lo..hi).contains(&ox), "kx={kx} ox={ox}");
            }
        }
    }
}

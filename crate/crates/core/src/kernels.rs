//! Raw forward/backward loops for spatial operators.
//!
//! All activations are `[N, C, d, h, w]` in row-major order; lower spatial
//! ranks are carried with leading axes of size 1.

/// Stride and zero padding per spatial axis `(d, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Unit stride with `pad` on the last `rank` axes.
    pub fn same(rank: usize, pad: usize) -> Self {
        let mut padding = [0; 3];
        for p in padding.iter_mut().skip(3 - rank) {
            *p = pad;
        }
        Self { stride: [1; 3], padding }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: [1; 3], padding: [0; 3] }
    }
}

pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel || stride == 0 {
        None
    } else {
        Some((span - kernel) / stride + 1)
    }
}

/// Output positions `o` with `0 <= o*s + k - p < in_len`, as a half-open range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if in_len + p <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + p - k) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub inp: [usize; 3],
    pub ker: [usize; 3],
    pub out: [usize; 3],
}

impl ConvDims {
    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
    fn ker_plane(&self) -> usize {
        self.ker.iter().product()
    }
}

/// Visits every (kernel tap, output row) pair that touches the input, handing
/// the caller the input row offset, output row offset, first output column and
/// column count. Columns advance by the w-stride in the input.
#[inline]
fn for_each_row(d: &ConvDims, spec: &ConvSpec, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [id, ih, iw] = d.inp;
    let [kd, kh, kw] = d.ker;
    let [od, oh, ow] = d.out;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    for a in 0..kd {
        let (d_lo, d_hi) = valid_range(od, id, sd, a, pd);
        for b in 0..kh {
            let (h_lo, h_hi) = valid_range(oh, ih, sh, b, ph);
            for c in 0..kw {
                let (w_lo, w_hi) = valid_range(ow, iw, sw, c, pw);
                if w_lo >= w_hi {
                    continue;
                }
                let tap = (a * kh + b) * kw + c;
                for o_d in d_lo..d_hi {
                    let i_d = o_d * sd + a - pd;
                    for o_h in h_lo..h_hi {
                        let i_h = o_h * sh + b - ph;
                        let in_row = (i_d * ih + i_h) * iw;
                        let out_row = (o_d * oh + o_h) * ow;
                        let i_w0 = w_lo * sw + c - pw;
                        f(tap, in_row + i_w0, out_row + w_lo, w_hi - w_lo, sw);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    spec: &ConvSpec,
) -> alloc::vec::Vec<f64> {
    let (ip, op, kp) = (d.in_plane(), d.out_plane(), d.ker_plane());
    let mut out = alloc::vec![0.0; d.n * d.cout * op];
    for n in 0..d.n {
        for co in 0..d.cout {
            let o = &mut out[(n * d.cout + co) * op..][..op];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..d.cin {
                let x = &input[(n * d.cin + ci) * ip..][..ip];
                let w = &weight[(co * d.cin + ci) * kp..][..kp];
                for_each_row(d, spec, |tap, xi, oi, len, s| {
                    let wv = w[tap];
                    if s == 1 {
                        for (dst, src) in o[oi..oi + len].iter_mut().zip(&x[xi..xi + len]) {
                            *dst += wv * src;
                        }
                    } else {
                        for t in 0..len {
                            o[oi + t] += wv * x[xi + t * s];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) fn conv_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    spec: &ConvSpec,
    want_input: bool,
) -> (Option<alloc::vec::Vec<f64>>, alloc::vec::Vec<f64>, alloc::vec::Vec<f64>) {
    let (ip, op, kp) = (d.in_plane(), d.out_plane(), d.ker_plane());
    let mut gi = want_input.then(|| alloc::vec![0.0; input.len()]);
    let mut gw = alloc::vec![0.0; weight.len()];
    let mut gb = alloc::vec![0.0; d.cout];
    for n in 0..d.n {
        for co in 0..d.cout {
            let go = &grad_out[(n * d.cout + co) * op..][..op];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..d.cin {
                let x = &input[(n * d.cin + ci) * ip..][..ip];
                let w = &weight[(co * d.cin + ci) * kp..][..kp];
                let gwk = &mut gw[(co * d.cin + ci) * kp..][..kp];
                let mut gx = gi.as_mut().map(|g| &mut g[(n * d.cin + ci) * ip..][..ip]);
                for_each_row(d, spec, |tap, xi, oi, len, s| {
                    let mut acc = 0.0;
                    if s == 1 {
                        for (a, b) in go[oi..oi + len].iter().zip(&x[xi..xi + len]) {
                            acc += a * b;
                        }
                    } else {
                        for t in 0..len {
                            acc += go[oi + t] * x[xi + t * s];
                        }
                    }
                    gwk[tap] += acc;
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[tap];
                        for t in 0..len {
                            gx[xi + t * s] += wv * go[oi + t];
                        }
                    }
                });
            }
        }
    }
    (gi, gw, gb)
}

/// Non-overlapping max pooling with window = stride = `f`. Returns the pooled
/// values and, per output cell, the flat input index of the winning element
/// (first maximum in scan order).
pub(crate) fn max_pool(
    input: &[f64],
    planes: usize,
    inp: [usize; 3],
    f: [usize; 3],
) -> (alloc::vec::Vec<f64>, alloc::vec::Vec<usize>) {
    let out = [inp[0] / f[0], inp[1] / f[1], inp[2] / f[2]];
    let (ip, op) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
    let mut vals = alloc::vec::Vec::with_capacity(planes * op);
    let mut arg = alloc::vec::Vec::with_capacity(planes * op);
    for p in 0..planes {
        let base = p * ip;
        for a in 0..out[0] {
            for b in 0..out[1] {
                for c in 0..out[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    let mut first = true;
                    for x in 0..f[0] {
                        for y in 0..f[1] {
                            for z in 0..f[2] {
                                let i = base + ((a * f[0] + x) * inp[1] + (b * f[1] + y)) * inp[2] + (c * f[2] + z);
                                if first || input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                    first = false;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (vals, arg)
}

/// Nearest-neighbour upsampling by integer factors.
pub(crate) fn upsample(input: &[f64], planes: usize, inp: [usize; 3], f: [usize; 3]) -> alloc::vec::Vec<f64> {
    let out = [inp[0] * f[0], inp[1] * f[1], inp[2] * f[2]];
    let ip: usize = inp.iter().product();
    let mut v = alloc::vec::Vec::with_capacity(planes * out.iter().product::<usize>());
    for p in 0..planes {
        let src = &input[p * ip..][..ip];
        for a in 0..out[0] {
            for b in 0..out[1] {
                let row = ((a / f[0]) * inp[1] + b / f[1]) * inp[2];
                for c in 0..out[2] {
                    v.push(src[row + c / f[2]]);
                }
            }
        }
    }
    v
}

pub(crate) fn upsample_backward(grad_out: &[f64], planes: usize, inp: [usize; 3], f: [usize; 3]) -> alloc::vec::Vec<f64> {
    let out = [inp[0] * f[0], inp[1] * f[1], inp[2] * f[2]];
    let (ip, op) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
    let mut g = alloc::vec![0.0; planes * ip];
    for p in 0..planes {
        let src = &grad_out[p * op..][..op];
        let dst = &mut g[p * ip..][..ip];
        let mut k = 0;
        for a in 0..out[0] {
            for b in 0..out[1] {
                let row = ((a / f[0]) * inp[1] + b / f[1]) * inp[2];
                for c in 0..out[2] {
                    dst[row + c / f[2]] += src[k];
                    k += 1;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn valid_range_matches_brute_force() {
        for in_len in 1..7 {
            for k in 0..3 {
                for p in 0..3 {
                    for s in 1..3 {
                        let Some(out_len) = conv_out_len(in_len, 3, s, p) else {
                            continue;
                        };
                        let brute: alloc::vec::Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * s + k) as isize - p as isize;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = valid_range(out_len, in_len, s, k, p);
                        assert_eq!((lo..hi).collect::<alloc::vec::Vec<_>>(), brute);
                    }
                }
            }
        }
    }

    #[test]
    fn strided_padded_conv_matches_direct_sum() {
        let d = ConvDims { n: 1, cin: 1, cout: 1, inp: [1, 5, 5], ker: [1, 3, 3], out: [1, 3, 3] };
        let spec = ConvSpec { stride: [1, 2, 2], padding: [0, 1, 1] };
        let x: alloc::vec::Vec<f64> = (0..25).map(|i| i as f64).collect();
        let w: alloc::vec::Vec<f64> = (0..9).map(|i| (i as f64) - 4.0).collect();
        let out = conv_forward(&x, &w, None, &d, &spec);
        for oh in 0..3 {
            for ow in 0..3 {
                let mut acc = 0.0;
                for kh in 0..3 {
                    for kw in 0..3 {
                        let ih = (oh * 2 + kh) as isize - 1;
                        let iw = (ow * 2 + kw) as isize - 1;
                        if (0..5).contains(&ih) && (0..5).contains(&iw) {
                            acc += w[kh * 3 + kw] * x[(ih * 5 + iw) as usize];
                        }
                    }
                }
                assert_eq!(out[oh * 3 + ow], acc);
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = vec![1.0, 5.0, 2.0, 3.0];
        let (v, a) = max_pool(&x, 1, [1, 2, 2], [1, 2, 2]);
        assert_eq!(v, vec![5.0]);
        assert_eq!(a, vec![1]);
        let up = upsample(&[1.0, 2.0], 1, [1, 1, 2], [1, 2, 2]);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = upsample_backward(&[1.0; 8], 1, [1, 1, 2], [1, 2, 2]);
        assert_eq!(g, vec![4.0, 4.0]);
    }
}

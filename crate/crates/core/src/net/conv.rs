//! 3x3 convolution kernels with zero padding of 1, channel-major layout.

/// Output extent of a 3x3, pad-1 convolution with the given stride.
pub fn out_extent(input: usize, stride: usize) -> usize {
    (input - 1) / stride + 1
}

/// Range of output coordinates whose tap `k` lands inside `[0, input)`.
#[inline]
fn valid_range(k: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // input coordinate = o * stride + k - 1
    let lo = if k == 0 { 1 } else { 0 };
    if k > input {
        return (lo, lo);
    }
    let hi = ((input - k) / stride + 1).min(output);
    (lo, hi.max(lo))
}

pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        out_extent(self.in_h, self.stride)
    }
    pub fn out_w(&self) -> usize {
        out_extent(self.in_w, self.stride)
    }
}

/// Unfolds `input` into a `(in_ch * 9) x (out_h * out_w)` patch matrix; taps
/// that fall into the padding are zero.
pub fn im2col(s: &ConvShape, input: &[f64], col: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let plane_in = s.in_h * s.in_w;
    let plane_out = oh * ow;
    col.fill(0.0);
    for ci in 0..s.in_ch {
        let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..3 {
            let (y0, y1) = valid_range(ky, s.stride, s.in_h, oh);
            for kx in 0..3 {
                let (x0, x1) = valid_range(kx, s.stride, s.in_w, ow);
                let row = (ci * 9 + ky * 3 + kx) * plane_out;
                let dst = &mut col[row..row + plane_out];
                for oy in y0..y1 {
                    let iy = oy * s.stride + ky - 1;
                    let in_row = &in_plane[iy * s.in_w..(iy + 1) * s.in_w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        out_row[ox] = in_row[ox * s.stride + kx - 1];
                    }
                }
            }
        }
    }
}

/// Adds the patch-matrix gradient `dcol` back onto `d_input`.
fn col2im_add(s: &ConvShape, dcol: &[f64], d_input: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let plane_in = s.in_h * s.in_w;
    let plane_out = oh * ow;
    for ci in 0..s.in_ch {
        let d_plane = &mut d_input[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..3 {
            let (y0, y1) = valid_range(ky, s.stride, s.in_h, oh);
            for kx in 0..3 {
                let (x0, x1) = valid_range(kx, s.stride, s.in_w, ow);
                let row = (ci * 9 + ky * 3 + kx) * plane_out;
                let src = &dcol[row..row + plane_out];
                for oy in y0..y1 {
                    let iy = oy * s.stride + ky - 1;
                    let d_row = &mut d_plane[iy * s.in_w..(iy + 1) * s.in_w];
                    let g_row = &src[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        d_row[ox * s.stride + kx - 1] += g_row[ox];
                    }
                }
            }
        }
    }
}

/// `out = conv(input, weight) + bias`; `out` is overwritten.
pub fn forward(s: &ConvShape, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let plane_out = s.out_h() * s.out_w();
    let taps = s.in_ch * 9;
    let mut col = vec![0.0; taps * plane_out];
    im2col(s, input, &mut col);
    for co in 0..s.out_ch {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        out_plane.fill(bias[co]);
        let w_row = &weight[co * taps..(co + 1) * taps];
        for (r, &w) in w_row.iter().enumerate() {
            let src = &col[r * plane_out..(r + 1) * plane_out];
            for (o, &x) in out_plane.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    }
}

/// Accumulates weight and bias gradients, and optionally the input gradient,
/// for upstream gradient `d_out`.
pub fn backward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let plane_out = s.out_h() * s.out_w();
    let taps = s.in_ch * 9;
    let mut col = vec![0.0; taps * plane_out];
    im2col(s, input, &mut col);
    let mut dcol = d_input.as_ref().map(|_| vec![0.0; taps * plane_out]);
    for co in 0..s.out_ch {
        let g_plane = &d_out[co * plane_out..(co + 1) * plane_out];
        d_bias[co] += g_plane.iter().sum::<f64>();
        let w_row = &weight[co * taps..(co + 1) * taps];
        let dw_row = &mut d_weight[co * taps..(co + 1) * taps];
        for r in 0..taps {
            let src = &col[r * plane_out..(r + 1) * plane_out];
            dw_row[r] += g_plane.iter().zip(src).map(|(g, x)| g * x).sum::<f64>();
            if let Some(dcol) = dcol.as_mut() {
                let w = w_row[r];
                for (d, &g) in dcol[r * plane_out..(r + 1) * plane_out].iter_mut().zip(g_plane) {
                    *d += w * g;
                }
            }
        }
    }
    if let (Some(d_in), Some(dcol)) = (d_input, dcol) {
        col2im_add(s, &dcol, d_in);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with explicit bounds checks.
    fn naive(s: &ConvShape, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut out = vec![0.0; s.out_ch * oh * ow];
        for co in 0..s.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..s.in_ch {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s.stride + ky) as isize - 1;
                                let ix = (ox * s.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= s.in_h as isize || ix >= s.in_w as isize {
                                    continue;
                                }
                                acc += weight[(co * s.in_ch + ci) * 9 + ky * 3 + kx]
                                    * input[ci * s.in_h * s.in_w + iy as usize * s.in_w + ix as usize];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut x = seed;
        (0..n)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn forward_matches_naive_for_both_strides() {
        for (stride, h, w) in [(1, 5, 6), (2, 7, 8), (2, 8, 8), (3, 9, 7)] {
            let s = ConvShape {
                in_ch: 2,
                out_ch: 3,
                in_h: h,
                in_w: w,
                stride,
            };
            let input = pseudo(2 * h * w, 1);
            let weight = pseudo(3 * 2 * 9, 2);
            let bias = pseudo(3, 3);
            let mut out = vec![0.0; 3 * s.out_h() * s.out_w()];
            forward(&s, &input, &weight, &bias, &mut out);
            let want = naive(&s, &input, &weight, &bias);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <d_out, conv(x)> is linear in x and in w; check both gradients by
        // comparing against the naive forward at perturbed points.
        let s = ConvShape {
            in_ch: 2,
            out_ch: 2,
            in_h: 6,
            in_w: 5,
            stride: 2,
        };
        let input = pseudo(2 * 30, 4);
        let weight = pseudo(2 * 2 * 9, 5);
        let bias = vec![0.1, -0.2];
        let d_out = pseudo(2 * s.out_h() * s.out_w(), 6);
        let objective = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            naive(&s, x, w, b).iter().zip(&d_out).map(|(o, g)| o * g).sum()
        };
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 2];
        let mut dx = vec![0.0; input.len()];
        backward(&s, &input, &weight, &d_out, &mut dw, &mut db, Some(&mut dx));
        let base = objective(&input, &weight, &bias);
        for i in 0..weight.len() {
            let mut w2 = weight.clone();
            w2[i] += 1.0;
            assert!((objective(&input, &w2, &bias) - base - dw[i]).abs() < 1e-10);
        }
        for i in 0..input.len() {
            let mut x2 = input.clone();
            x2[i] += 1.0;
            assert!((objective(&x2, &weight, &bias) - base - dx[i]).abs() < 1e-10);
        }
        for i in 0..2 {
            let mut b2 = bias.clone();
            b2[i] += 1.0;
            assert!((objective(&input, &weight, &b2) - base - db[i]).abs() < 1e-10);
        }
    }
}

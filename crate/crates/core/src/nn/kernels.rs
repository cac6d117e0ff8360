//! Dense kernels behind the tape operations: GEMM wrappers, im2col/col2im
//! convolution lowering and nearest-neighbour upsampling.

/// Geometry of a 2-D convolution. Padding is symmetric and zero-filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// "Same"-style padding: output is `ceil(input / stride)`.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

/// `c[m x n] = alpha * op(a)[m x k] * op(b)[k x n] + beta * c`, row-major with
/// optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
pub fn im2col(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    geom: &ConvGeom,
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let ho = geom.output_size(height);
    let wo = geom.output_size(width);
    debug_assert_eq!(cols.len(), channels * k * k * ho * wo);
    let pad = geom.padding as isize;
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ki * geom.dilation) as isize - pad;
                let dx = (kj * geom.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * geom.stride) as isize + dy;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * width..(iy as usize + 1) * width];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * geom.stride) as isize + dx;
                        *slot = if ix < 0 || ix >= width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
pub fn col2im(
    cols: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    geom: &ConvGeom,
    dx: &mut [f64],
) {
    let k = geom.kernel;
    let ho = geom.output_size(height);
    let wo = geom.output_size(width);
    let pad = geom.padding as isize;
    for c in 0..channels {
        let plane = &mut dx[c * height * width..(c + 1) * height * width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ki * geom.dilation) as isize - pad;
                let dxo = (kj * geom.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * geom.stride) as isize + dy;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride) as isize + dxo;
                        if ix >= 0 && ix < width as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn upsample2(x: &[f64], planes: usize, height: usize, width: usize, out: &mut [f64]) {
    let (h2, w2) = (height * 2, width * 2);
    for p in 0..planes {
        let src = &x[p * height * width..(p + 1) * height * width];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * width + xx / 2];
            }
        }
    }
}

pub fn upsample2_backward(dy: &[f64], planes: usize, height: usize, width: usize, dx: &mut [f64]) {
    let (h2, w2) = (height * 2, width * 2);
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * height * width..(p + 1) * height * width];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * width + xx / 2] += src[y * w2 + xx];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        c: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        o: usize,
        g: &ConvGeom,
    ) -> Vec<f64> {
        let (ho, wo) = (g.output_size(h), g.output_size(w));
        let k = g.kernel;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ic * h + iy as usize) * w + ix as usize]
                                        * weight[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c, h, w, o) = (2, 7, 6, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..o * c * 9).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        for g in [ConvGeom::same(3, 1, 1), ConvGeom::same(3, 2, 1), ConvGeom::same(3, 1, 2)] {
            let (ho, wo) = (g.output_size(h), g.output_size(w));
            let mut cols = vec![0.0; c * 9 * ho * wo];
            im2col(&x, c, h, w, &g, &mut cols);
            let mut out = vec![0.0; o * ho * wo];
            gemm(o, c * 9, ho * wo, &weight, false, &cols, false, &mut out, 0.0);
            let expected = naive_conv(&x, c, h, w, &weight, o, &g);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 5, 6);
        let g = ConvGeom::same(3, 2, 1);
        let (ho, wo) = (g.output_size(h), g.output_size(w));
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn same_padding_halves_with_stride_two() {
        assert_eq!(ConvGeom::same(3, 2, 1).output_size(32), 16);
        assert_eq!(ConvGeom::same(5, 2, 1).output_size(32), 16);
        assert_eq!(ConvGeom::same(3, 1, 8).output_size(8), 8);
    }

    #[test]
    fn transposed_gemm_variants() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, &mut c2, 0.0);
        assert_eq!(c, c2);
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c3 = [0.0; 4];
        gemm(2, 3, 2, &a, false, &bt, true, &mut c3, 0.0);
        assert_eq!(c, c3);
    }
}

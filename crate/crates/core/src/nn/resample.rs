//! Bilinear crop-and-resize expressed as a fixed sparse linear map, so the
//! same plan serves plain image resampling and differentiable tape ops.

/// A window in source pixel coordinates (top-left corner plus extent).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug)]
pub struct ResamplePlan {
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl ResamplePlan {
    /// Half-pixel-centred bilinear sampling of `window` onto an
    /// `out_h x out_w` grid; source coordinates are clamped to the image.
    pub fn bilinear(src_h: usize, src_w: usize, window: Window, out_h: usize, out_w: usize) -> Self {
        let axis = |start: f64, extent: f64, out: usize, limit: usize, o: usize| {
            let s = start + (o as f64 + 0.5) * extent / out as f64 - 0.5;
            let s = s.clamp(0.0, (limit - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(limit - 1);
            (lo, hi, s - lo as f64)
        };
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(window.y, window.h, out_h, src_h, oy);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(window.x, window.w, out_w, src_w, ox);
                taps.push([
                    (y0 * src_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * src_w + x1, (1.0 - fy) * fx),
                    (y1 * src_w + x0, fy * (1.0 - fx)),
                    (y1 * src_w + x1, fy * fx),
                ]);
            }
        }
        Self {
            src_h,
            src_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn src_dims(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Resamples every plane of `src` (`planes * src_h * src_w` values).
    pub fn apply(&self, src: &[f64], planes: usize, out: &mut [f64]) {
        let (sn, on) = (self.src_h * self.src_w, self.out_h * self.out_w);
        for p in 0..planes {
            let s = &src[p * sn..(p + 1) * sn];
            let o = &mut out[p * on..(p + 1) * on];
            for (slot, taps) in o.iter_mut().zip(&self.taps) {
                *slot = taps.iter().map(|&(i, w)| s[i] * w).sum();
            }
        }
    }

    /// Adds the transpose of the plan applied to `dout` into `dsrc`.
    pub fn adjoint(&self, dout: &[f64], planes: usize, dsrc: &mut [f64]) {
        let (sn, on) = (self.src_h * self.src_w, self.out_h * self.out_w);
        for p in 0..planes {
            let g = &dout[p * on..(p + 1) * on];
            let d = &mut dsrc[p * sn..(p + 1) * sn];
            for (&gv, taps) in g.iter().zip(&self.taps) {
                for &(i, w) in taps {
                    d[i] += gv * w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_window_reproduces_source() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let plan = ResamplePlan::bilinear(3, 4, Window { x: 0.0, y: 0.0, w: 4.0, h: 3.0 }, 3, 4);
        let mut out = vec![0.0; 12];
        plan.apply(&src, 1, &mut out);
        assert_eq!(out, src);
    }

    #[test]
    fn integer_crop_without_scaling_copies_pixels() {
        let src: Vec<f64> = (0..36).map(|v| v as f64).collect();
        let plan = ResamplePlan::bilinear(6, 6, Window { x: 2.0, y: 1.0, w: 3.0, h: 2.0 }, 2, 3);
        let mut out = vec![0.0; 6];
        plan.apply(&src, 1, &mut out);
        assert_eq!(out, vec![8.0, 9.0, 10.0, 14.0, 15.0, 16.0]);
    }

    #[test]
    fn weights_sum_to_one() {
        let plan = ResamplePlan::bilinear(9, 13, Window { x: 1.3, y: 0.2, w: 7.1, h: 5.5 }, 4, 6);
        for taps in &plan.taps {
            let s: f64 = taps.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

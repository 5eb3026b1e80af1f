// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-channel image resampling on row-major grids.
//!
//! Both samplers use half-pixel centers: output pixel `(y, x)` reads the
//! source at `((y + 0.5) * h_in / h_out - 0.5, ...)`. An exact 2× bilinear
//! downsample therefore averages each 2×2 source block.

/// Source coordinate and interpolation weight for one output index.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of a `height × width` grid to `out_h × out_w`.
pub fn bilinear(src: &[f32], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), height * width, "source length");
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    let at = |y: usize, x: usize| src[y * width + x] as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for t in &ty {
        for s in &tx {
            let top = at(t.lo, s.lo) * (1.0 - s.frac) + at(t.lo, s.hi) * s.frac;
            let bottom = at(t.hi, s.lo) * (1.0 - s.frac) + at(t.hi, s.hi) * s.frac;
            out.push((top * (1.0 - t.frac) + bottom * t.frac) as f32);
        }
    }
    out
}

/// Bilinear resize that ignores invalid source pixels.
///
/// Each output value is the weight-normalized blend of the valid corners
/// among its four bilinear taps; an output pixel whose valid corners carry
/// zero total weight is marked invalid. With an all-true mask this equals [`bilinear`].
pub fn bilinear_masked(
    src: &[f32],
    valid: &[bool],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> (Vec<f32>, Vec<bool>) {
    assert_eq!(src.len(), height * width, "source length");
    assert_eq!(valid.len(), height * width, "mask length");
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    let mut out_valid = Vec::with_capacity(out_h * out_w);
    for t in &ty {
        for s in &tx {
            let corners = [
                (t.lo, s.lo, (1.0 - t.frac) * (1.0 - s.frac)),
                (t.lo, s.hi, (1.0 - t.frac) * s.frac),
                (t.hi, s.lo, t.frac * (1.0 - s.frac)),
                (t.hi, s.hi, t.frac * s.frac),
            ];
            let mut num = 0.0;
            let mut den = 0.0;
            for (y, x, w) in corners {
                let i = y * width + x;
                if valid[i] {
                    num += w * src[i] as f64;
                    den += w;
                }
            }
            if den > 0.0 {
                out.push((num / den) as f32);
                out_valid.push(true);
            } else {
                out.push(0.0);
                out_valid.push(false);
            }
        }
    }
    (out, out_valid)
}

/// Nearest-neighbor resize with half-pixel centers.
pub fn nearest<T: Copy>(src: &[T], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<T> {
    assert_eq!(src.len(), height * width, "source length");
    let pick = |o: usize, n_in: usize, n_out: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, height, out_h);
        for x in 0..out_w {
            out.push(src[sy * width + pick(x, width, out_w)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_noop() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(bilinear(&src, 3, 4, 3, 4), src);
        assert_eq!(nearest(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn exact_half_downsample_is_block_mean() {
        let src: Vec<f32> = (0..16).map(|v| (v * v) as f32).collect();
        let out = bilinear(&src, 4, 4, 2, 2);
        let block = |y: usize, x: usize| {
            (src[y * 4 + x] + src[y * 4 + x + 1] + src[(y + 1) * 4 + x] + src[(y + 1) * 4 + x + 1])
                / 4.0
        };
        assert_eq!(out, vec![block(0, 0), block(0, 2), block(2, 0), block(2, 2)]);
    }

    #[test]
    fn masked_matches_plain_when_all_valid() {
        let src: Vec<f32> = (0..30).map(|v| (v as f32).sin()).collect();
        let mask = vec![true; 30];
        let (a, v) = bilinear_masked(&src, &mask, 5, 6, 11, 7);
        let b = bilinear(&src, 5, 6, 11, 7);
        assert!(v.iter().all(|&x| x));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_skips_invalid_pixels() {
        let src = vec![1.0, 100.0, 1.0, 100.0];
        let mask = vec![true, false, true, false];
        let (out, valid) = bilinear_masked(&src, &mask, 2, 2, 2, 2);
        assert_eq!(valid, mask);
        assert_eq!((out[0], out[2]), (1.0, 1.0));
        // Halving blends a valid and an invalid column: only the valid one counts.
        let (out, valid) = bilinear_masked(&src, &mask, 2, 2, 1, 1);
        assert_eq!(valid, vec![true]);
        assert!((out[0] - 1.0).abs() < 1e-6);
    }
}

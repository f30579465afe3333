//! Raw slice kernels behind the tape ops.

/// `c = alpha * a * b + beta * c` for strided row/column layouts.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each is addressed as
/// `base[row * rs + col * cs]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm lies inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one `cin x h x w` image into `positions x patch_len` rows.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let patch = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            let mut idx = 0;
            for c in 0..g.cin {
                let plane = &img[c * g.h * g.w..];
                for ky in 0..g.kh {
                    let src = &plane[(oy * g.stride + ky) * g.w + ox * g.stride..][..g.kw];
                    row[idx..idx + g.kw].copy_from_slice(src);
                    idx += g.kw;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let patch = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            let mut idx = 0;
            for c in 0..g.cin {
                for ky in 0..g.kh {
                    let base = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.kw {
                        img[base + kx] += row[idx + kx];
                    }
                    idx += g.kw;
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`.
/// Returns the flat argmax index of every output element. Odd trailing
/// rows/columns are dropped.
pub(crate) fn max_pool2x2(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
    argmax
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T b^T via strides: (3x2)^T... use b^T a^T = (ab)^T
        let mut ct = [0.0; 4];
        gemm(2, 3, 2, 1.0, &b, (1, 2), &a, (1, 3), 0.0, &mut ct, (2, 1));
        assert_eq!(ct, [58.0, 139.0, 64.0, 154.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            cin: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 1,
            oh: 3,
            ow: 3,
        };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let probe: Vec<f64> = (0..g.positions() * g.patch_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; probe.len()];
        im2col(&img, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&probe, &g, &mut back);
        let rhs: f64 = back.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

//! Raw kernels shared by the graph ops: GEMM, im2col/col2im, nearest upsampling.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op` optionally
/// transposes. `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted in debug builds and
    // guaranteed by every caller in this module tree.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (Ho·Wo)` patch matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if y >= 0
                            && (y as usize) < g.height
                            && x >= 0
                            && (x as usize) < g.width
                        {
                            img[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image (+=).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x < 0 || x as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + y as usize) * g.width + x as usize] +=
                            src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling of `planes` planes of size `h×w` by `f`.
pub(crate) fn upsample(src: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let srow = &src[(p * h + y / f) * w..(p * h + y / f + 1) * w];
            let drow = &mut out[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    grad: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    acc: &mut [f64],
) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                acc[(p * h + y / f) * w + x / f] += grad[(p * oh + y) * ow + x];
            }
        }
    }
}

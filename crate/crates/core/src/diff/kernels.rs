//! Dense kernels shared by the tape: 3x3 convolution via im2col + GEMM and
//! the separable "valid" Gaussian blur.

/// `C = A * B + beta * C` with arbitrary strides for `A` and `B`; `C` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access
    // (checked by the debug assertions in the public wrappers below).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col3(x: &[f64], ci: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), ci * 9 * hw);
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im3(col: &[f64], ci: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for i in 1..w {
                                dst[i - 1] += src[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst[i] += src[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                dst[i + 1] += src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3, stride 1, zero "same" padding. `x: [b, ci, h, w]`, `weight: [co, ci, 3, 3]`.
pub fn conv3x3_forward(x: &[f64], dims: [usize; 4], weight: &[f64], co: usize) -> Vec<f64> {
    let [b, ci, h, w] = dims;
    let hw = h * w;
    let kk = ci * 9;
    debug_assert_eq!(weight.len(), co * kk);
    let mut out = vec![0.0; b * co * hw];
    let mut col = vec![0.0; kk * hw];
    for bi in 0..b {
        im2col3(&x[bi * ci * hw..(bi + 1) * ci * hw], ci, h, w, &mut col);
        gemm(
            co,
            kk,
            hw,
            weight,
            (kk, 1),
            &col,
            (hw, 1),
            0.0,
            &mut out[bi * co * hw..(bi + 1) * co * hw],
        );
    }
    out
}

/// Gradients of the convolution; `dx` is only produced when requested.
pub fn conv3x3_backward(
    x: &[f64],
    dims: [usize; 4],
    weight: &[f64],
    co: usize,
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [b, ci, h, w] = dims;
    let hw = h * w;
    let kk = ci * 9;
    let mut dw = want_dw.then(|| vec![0.0; co * kk]);
    let mut dx = want_dx.then(|| vec![0.0; b * ci * hw]);
    let mut col = vec![0.0; kk * hw];
    let mut dcol = vec![0.0; if want_dx { kk * hw } else { 0 }];
    for bi in 0..b {
        let g = &dout[bi * co * hw..(bi + 1) * co * hw];
        if let Some(dw) = dw.as_mut() {
            im2col3(&x[bi * ci * hw..(bi + 1) * ci * hw], ci, h, w, &mut col);
            gemm(co, hw, kk, g, (hw, 1), &col, (1, hw), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, co, hw, weight, (1, kk), g, (hw, 1), 0.0, &mut dcol);
            col2im3(&dcol, ci, h, w, &mut dx[bi * ci * hw..(bi + 1) * ci * hw]);
        }
    }
    (dx, dw)
}

/// Separable "valid" blur of every `h x w` plane with a 1-D kernel.
pub fn blur_valid_forward(x: &[f64], planes: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![0.0; planes * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..ow {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    acc += kv * src[y * w + xo + i];
                }
                tmp[y * ow + xo] = acc;
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for yo in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[(yo + i) * ow + xo];
                }
                dst[yo * ow + xo] = acc;
            }
        }
    }
    out
}

pub fn blur_valid_backward(dout: &[f64], planes: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut dx = vec![0.0; planes * h * w];
    let mut dtmp = vec![0.0; h * ow];
    for p in 0..planes {
        dtmp.fill(0.0);
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        for yo in 0..oh {
            for xo in 0..ow {
                let gv = g[yo * ow + xo];
                for (i, kv) in kernel.iter().enumerate() {
                    dtmp[(yo + i) * ow + xo] += kv * gv;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..ow {
                let gv = dtmp[y * ow + xo];
                for (i, kv) in kernel.iter().enumerate() {
                    dst[y * w + xo + i] += kv * gv;
                }
            }
        }
    }
    dx
}

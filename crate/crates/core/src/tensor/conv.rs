//! im2col convolution kernels backed by a blocked f64 GEMM.

/// Output size of a strided, padded window along one axis (floor convention),
/// or `None` when the window does not fit.
pub(crate) fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (size + 2 * pad).checked_sub(k)?;
    if stride == 0 {
        return None;
    }
    Some(span / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &input[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], out: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut out[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover every index the strides address, checked by callers' shapes.
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

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let rows = g.col_rows();
    let n = g.col_cols();
    let mut cols = vec![0.0; rows * n];
    let mut out = vec![0.0; g.batch * g.out_ch * n];
    for b in 0..g.batch {
        im2col(
            g,
            &input[b * g.in_ch * g.in_plane()..(b + 1) * g.in_ch * g.in_plane()],
            &mut cols,
        );
        let dst = &mut out[b * g.out_ch * n..(b + 1) * g.out_ch * n];
        gemm(
            g.out_ch,
            rows,
            n,
            weight,
            (rows as isize, 1),
            &cols,
            (n as isize, 1),
            0.0,
            dst,
        );
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias), each computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (want_x, want_w, want_b) = want;
    let rows = g.col_rows();
    let n = g.col_cols();
    let mut gx = want_x.then(|| vec![0.0; g.batch * g.in_ch * g.in_plane()]);
    let mut gw = want_w.then(|| vec![0.0; g.out_ch * rows]);
    let gb = want_b.then(|| {
        let mut gb = vec![0.0; g.out_ch];
        for b in 0..g.batch {
            for (o, slot) in gb.iter_mut().enumerate() {
                let start = (b * g.out_ch + o) * n;
                *slot += grad_out[start..start + n].iter().sum::<f64>();
            }
        }
        gb
    });
    let mut cols = vec![0.0; rows * n];
    for b in 0..g.batch {
        let go = &grad_out[b * g.out_ch * n..(b + 1) * g.out_ch * n];
        if let Some(gw) = gw.as_mut() {
            im2col(
                g,
                &input[b * g.in_ch * g.in_plane()..(b + 1) * g.in_ch * g.in_plane()],
                &mut cols,
            );
            gemm(g.out_ch, n, rows, go, (n as isize, 1), &cols, (1, n as isize), 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(
                rows,
                g.out_ch,
                n,
                weight,
                (1, rows as isize),
                go,
                (n as isize, 1),
                0.0,
                &mut cols,
            );
            col2im(
                g,
                &cols,
                &mut gx[b * g.in_ch * g.in_plane()..(b + 1) * g.in_ch * g.in_plane()],
            );
        }
    }
    (gx, gw, gb)
}

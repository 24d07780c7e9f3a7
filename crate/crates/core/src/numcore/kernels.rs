//! Raw compute kernels shared by the tape's forward and backward rules.

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. `ta`/`tb` select the transpose of the
/// stored matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the strides, so sgemm stays inside the slices.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a stride-1, zero-padded ("same") square convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let (h, w, k, p) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i + ki as isize - p;
                    let drow = &mut dst[(i * w) as usize..((i + 1) * w) as usize];
                    if si < 0 || si >= h {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[(si * w) as usize..((si + 1) * w) as usize];
                    for j in 0..w {
                        let sj = j + kj as isize - p;
                        drow[j as usize] = if sj < 0 || sj >= w { 0.0 } else { srow[sj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let (h, w, k, p) = (g.h as isize, g.w as isize, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i + ki as isize - p;
                    if si < 0 || si >= h {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j + kj as isize - p;
                        if sj >= 0 && sj < w {
                            plane[(si * w + sj) as usize] += src[(i * w + j) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x`: `[N, Cin, H, W]`, `weight`: `[Cout, Cin, k, k]`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let hw = g.hw();
    let mut out = vec![0.0; g.batch * g.cout * hw];
    let mut cols = vec![0.0; g.col_rows() * hw];
    for n in 0..g.batch {
        im2col(g, &x[n * g.cin * hw..(n + 1) * g.cin * hw], &mut cols);
        let o = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(b[co]);
            }
        }
        gemm(g.cout, g.col_rows(), hw, weight, false, &cols, false, 1.0, o);
    }
    out
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let hw = g.hw();
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * hw];
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for n in 0..g.batch {
            let d = &dout[n * g.cout * hw..(n + 1) * g.cout * hw];
            for (co, chunk) in d.chunks(hw).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
    }
    for n in 0..g.batch {
        let d = &dout[n * g.cout * hw..(n + 1) * g.cout * hw];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[n * g.cin * hw..(n + 1) * g.cin * hw], &mut cols);
            // dW[co, r] += sum_p dout[co, p] * cols[r, p]
            gemm(g.cout, hw, rows, d, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[r, p] = sum_co W[co, r] * dout[co, p]
            gemm(rows, g.cout, hw, weight, true, d, false, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[n * g.cin * hw..(n + 1) * g.cin * hw]);
        }
    }
}

/// 2x2 average pooling with stride 2 over `[N*C, H, W]` planes.
pub fn avg_pool2_forward(planes: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(planes: usize, h: usize, w: usize, dout: &[f32], dx: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let d = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * d[i * ow + j];
                dst[2 * i * w + 2 * j] += g;
                dst[2 * i * w + 2 * j + 1] += g;
                dst[(2 * i + 1) * w + 2 * j] += g;
                dst[(2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19., 22., 43., 50.]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26., 30., 38., 44.]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17., 23., 39., 53.]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let g = ConvGeom { batch: 2, cin: 2, cout: 3, h: 5, w: 4, k: 3 };
        let x: Vec<f32> = (0..2 * 2 * 20).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let wt: Vec<f32> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f32 * 0.1 - 0.3).collect();
        let b = [0.5, -1.0, 0.25];
        let out = conv2d_forward(&g, &x, &wt, Some(&b));
        for n in 0..2 {
            for co in 0..3 {
                for i in 0..5i32 {
                    for j in 0..4i32 {
                        let mut acc = b[co] as f64;
                        for ci in 0..2 {
                            for ki in 0..3i32 {
                                for kj in 0..3i32 {
                                    let (si, sj) = (i + ki - 1, j + kj - 1);
                                    if (0..5).contains(&si) && (0..4).contains(&sj) {
                                        let xv = x[((n * 2 + ci) * 5 + si as usize) * 4 + sj as usize];
                                        let wv = wt[((co * 2 + ci) * 3 + ki as usize) * 3 + kj as usize];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        let got = out[((n * 3 + co) * 5 + i as usize) * 4 + j as usize];
                        assert!((got as f64 - acc).abs() < 1e-4, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}

//! Valid (unpadded) strided 2-D cross-correlation via im2col + GEMM, and
//! non-overlapping max pooling.

use super::gemm::gemm;

pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input >= kernel && kernel > 0 && stride > 0).then(|| (input - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn image(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Upper bound on im2col buffer elements; samples are grouped so that layers
/// with few output positions still get wide GEMMs.
const COLS_BUDGET: usize = 1 << 22;

impl ConvGeom {
    fn group(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.positions()).max(1)).clamp(1, self.n.max(1))
    }
}

/// `cols[(ci*kh + ky)*kw + kx][off + oy*ow + ox] = x[ci][oy*sh + ky][ox*sw + kx]`
/// with row stride `ld`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize, off: usize) {
    let p = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let src_row = &x[(ci * g.h + oy * g.sh + ky) * g.w..];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.sw == 1 {
                        d.copy_from_slice(&src_row[kx..kx + g.ow]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src_row[ox * g.sw + kx];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize, off: usize) {
    let p = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let base = (ci * g.h + oy * g.sh + ky) * g.w;
                    for ox in 0..g.ow {
                        dx[base + ox * g.sw + kx] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, q, o) = (g.positions(), g.patch(), g.o);
    let group = g.group();
    let mut out = vec![0.0; g.n * o * p];
    let mut cols = vec![0.0; q * p * group];
    let mut y = vec![0.0; o * p * group];
    for first in (0..g.n).step_by(group) {
        let m = group.min(g.n - first);
        let ld = m * p;
        for j in 0..m {
            let s = first + j;
            im2col(&x[s * g.image()..(s + 1) * g.image()], g, &mut cols, ld, j * p);
        }
        for (oc, row) in y[..o * ld].chunks_exact_mut(ld).enumerate() {
            row.fill(bias[oc]);
        }
        gemm(o, q, ld, 1.0, k, (q, 1), &cols, (ld, 1), 1.0, &mut y, (ld, 1));
        for j in 0..m {
            let dst = &mut out[(first + j) * o * p..(first + j + 1) * o * p];
            for oc in 0..o {
                dst[oc * p..(oc + 1) * p].copy_from_slice(&y[oc * ld + j * p..oc * ld + (j + 1) * p]);
            }
        }
    }
    out
}

/// Returns `(dx, dk, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (p, q, o) = (g.positions(), g.patch(), g.o);
    let group = g.group();
    let mut dk = vec![0.0; o * q];
    let mut db = vec![0.0; o];
    let mut dx = want_dx.then(|| vec![0.0; g.n * g.image()]);
    let mut cols = vec![0.0; q * p * group];
    let mut dyg = vec![0.0; o * p * group];
    let mut dcols = if want_dx { vec![0.0; q * p * group] } else { Vec::new() };
    for first in (0..g.n).step_by(group) {
        let m = group.min(g.n - first);
        let ld = m * p;
        for j in 0..m {
            let s = first + j;
            let dys = &dy[s * o * p..(s + 1) * o * p];
            for oc in 0..o {
                let src = &dys[oc * p..(oc + 1) * p];
                db[oc] += src.iter().sum::<f64>();
                dyg[oc * ld + j * p..oc * ld + (j + 1) * p].copy_from_slice(src);
            }
            im2col(&x[s * g.image()..(s + 1) * g.image()], g, &mut cols, ld, j * p);
        }
        // dK += dY · colsᵀ
        gemm(o, ld, q, 1.0, &dyg, (ld, 1), &cols, (1, ld), 1.0, &mut dk, (q, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols = Kᵀ · dY
            gemm(q, o, ld, 1.0, k, (1, q), &dyg, (ld, 1), 0.0, &mut dcols, (ld, 1));
            for j in 0..m {
                let s = first + j;
                col2im_add(&dcols, g, &mut dx[s * g.image()..(s + 1) * g.image()], ld, j * p);
            }
        }
    }
    (dx, dk, db)
}

/// Non-overlapping max pooling over `[planes, h, w]`; returns values and the
/// flat input index of each maximum (first one wins ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / ph;
    let ow = w / pw;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let i = (pl * h + oy * ph + dy) * w + ox * pw + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize, sh: usize, sw: usize) -> ConvGeom {
        ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            sh,
            sw,
            oh: conv_output_len(h, kh, sh).unwrap(),
            ow: conv_output_len(w, kw, sw).unwrap(),
        }
    }

    fn naive(x: &[f64], k: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
        for s in 0..g.n {
            for o in 0..g.o {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b[o];
                        for ci in 0..g.c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    acc += k[((o * g.c + ci) * g.kh + ky) * g.kw + kx]
                                        * x[((s * g.c + ci) * g.h + oy * g.sh + ky) * g.w + ox * g.sw + kx];
                                }
                            }
                        }
                        out[((s * g.o + o) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        let g = geom(2, 3, 7, 11, 4, 3, 2, 2, 3);
        let x: Vec<f64> = (0..2 * 3 * 7 * 11).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let k: Vec<f64> = (0..4 * 3 * 3 * 2).map(|i| ((i * 13) % 7) as f64 * 0.1).collect();
        let b = [0.5, -1.0, 0.0, 2.0];
        let fast = conv2d_forward(&x, &k, &b, &g);
        let slow = naive(&x, &k, &b, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(40, 15, 1), Some(26));
        assert_eq!(conv_output_len(300, 15, 5), Some(58));
        assert_eq!(conv_output_len(3, 5, 1), None);
    }
}

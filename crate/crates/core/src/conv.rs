//! 3-D convolution kernels (stride 1, "same" output size) lowered to GEMM through im2col.

use crate::scalar::{gemm, MatLayout, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

const NONE: usize = usize::MAX;

/// Shape information for one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub padding: Padding,
}

impl ConvGeom {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// `table[o * n + i]` = source index for output position `i` at kernel offset `o`.
fn axis_table(n: usize, k: usize, padding: Padding) -> Vec<usize> {
    let half = (k / 2) as isize;
    let mut table = Vec::with_capacity(n * k);
    for o in 0..k as isize {
        for i in 0..n as isize {
            let src = i + o - half;
            let idx = if src >= 0 && src < n as isize {
                src as usize
            } else {
                match padding {
                    Padding::Zero => NONE,
                    Padding::Reflect => reflect(src, n),
                }
            };
            table.push(idx);
        }
    }
    table
}

struct Tables {
    d: Vec<usize>,
    h: Vec<usize>,
    w: Vec<usize>,
}

impl Tables {
    fn new(g: &ConvGeom) -> Self {
        Self {
            d: axis_table(g.dims[0], g.kernel[0], g.padding),
            h: axis_table(g.dims[1], g.kernel[1], g.padding),
            w: axis_table(g.dims[2], g.kernel[2], g.padding),
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, t: &Tables, col: &mut [T]) {
    let [nd, nh, nw] = g.dims;
    let [kd, kh, kw] = g.kernel;
    let v = g.voxels();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * v..(ci + 1) * v];
        for od in 0..kd {
            for oh in 0..kh {
                for ow in 0..kw {
                    let out = &mut col[row * v..(row + 1) * v];
                    let wt = &t.w[ow * nw..(ow + 1) * nw];
                    for d in 0..nd {
                        let sd = t.d[od * nd + d];
                        for h in 0..nh {
                            let sh = t.h[oh * nh + h];
                            let dst = &mut out[(d * nh + h) * nw..(d * nh + h + 1) * nw];
                            if sd == NONE || sh == NONE {
                                dst.fill(T::zero());
                                continue;
                            }
                            let src = &plane[(sd * nh + sh) * nw..(sd * nh + sh + 1) * nw];
                            for (o, &sw) in dst.iter_mut().zip(wt) {
                                *o = if sw == NONE { T::zero() } else { src[sw] };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, t: &Tables, dx: &mut [T]) {
    let [nd, nh, nw] = g.dims;
    let [kd, kh, kw] = g.kernel;
    let v = g.voxels();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * v..(ci + 1) * v];
        for od in 0..kd {
            for oh in 0..kh {
                for ow in 0..kw {
                    let src_row = &col[row * v..(row + 1) * v];
                    let wt = &t.w[ow * nw..(ow + 1) * nw];
                    for d in 0..nd {
                        let sd = t.d[od * nd + d];
                        for h in 0..nh {
                            let sh = t.h[oh * nh + h];
                            if sd == NONE || sh == NONE {
                                continue;
                            }
                            let g_row = &src_row[(d * nh + h) * nw..(d * nh + h + 1) * nw];
                            let base = (sd * nh + sh) * nw;
                            for (&gv, &sw) in g_row.iter().zip(wt) {
                                if sw != NONE {
                                    plane[base + sw] += gv;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward pass. `x` is `[cin, d, h, w]`, `weight` is `[cout, cin, kd, kh, kw]`.
pub fn conv3d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let v = g.voxels();
    let rows = g.cin * g.taps();
    let mut out = vec![T::zero(); g.cout * v];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(v).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = T::one();
    if g.is_pointwise() {
        gemm(weight, MatLayout::new(g.cout, rows), x, MatLayout::new(rows, v), beta, &mut out);
    } else {
        let mut col = vec![T::zero(); rows * v];
        im2col(x, g, &Tables::new(g), &mut col);
        gemm(weight, MatLayout::new(g.cout, rows), &col, MatLayout::new(rows, v), beta, &mut out);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

/// Backward pass for [`conv3d_forward`] given the output gradient `dy` (`[cout, d, h, w]`).
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let v = g.voxels();
    let rows = g.cin * g.taps();
    let dbias = need_db.then(|| dy.chunks(v).map(|c| c.iter().copied().sum()).collect());
    if !need_dx && !need_dw {
        return ConvGrads { dx: None, dweight: None, dbias };
    }
    let pointwise = g.is_pointwise();
    let tables = (!pointwise).then(|| Tables::new(g));
    let col_store;
    let col: &[T] = if pointwise {
        x
    } else if need_dw {
        let mut c = vec![T::zero(); rows * v];
        im2col(x, g, tables.as_ref().unwrap(), &mut c);
        col_store = c;
        &col_store
    } else {
        &[]
    };
    let dweight = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.cout * rows];
        gemm(dy, MatLayout::new(g.cout, v), col, MatLayout::t(rows, v), T::zero(), &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        if pointwise {
            let mut dx = vec![T::zero(); rows * v];
            gemm(weight, MatLayout::t(g.cout, rows), dy, MatLayout::new(g.cout, v), T::zero(), &mut dx);
            dx
        } else {
            let mut dcol = vec![T::zero(); rows * v];
            gemm(weight, MatLayout::t(g.cout, rows), dy, MatLayout::new(g.cout, v), T::zero(), &mut dcol);
            let mut dx = vec![T::zero(); g.cin * v];
            col2im(&dcol, g, tables.as_ref().unwrap(), &mut dx);
            dx
        }
    });
    ConvGrads { dx, dweight, dbias }
}

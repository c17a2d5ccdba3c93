//! Cross-correlation kernels built on im2col and GEMM.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_pixels(&self) -> usize {
        self.height * self.width
    }

    /// 1×1 kernels without padding read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.k, g.pad as isize);
    let opix = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.in_pixels()..(ci + 1) * g.in_pixels()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * opix..(row + 1) * opix];
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], input_grad: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.k, g.pad as isize);
    let opix = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.in_pixels()..(ci + 1) * g.in_pixels()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * opix..(row + 1) * opix];
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let opix = g.out_pixels();
    let mut out = vec![T::zero(); g.batch * g.c_out * opix];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * opix]
    };
    let in_stride = g.c_in * g.in_pixels();
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let y = &mut out[b * g.c_out * opix..(b + 1) * g.c_out * opix];
        if let Some(bias) = bias {
            for (co, chunk) in y.chunks_mut(opix).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            T::gemm(g.c_out, g.c_in, opix, kernel, false, x, false, beta, y);
        } else {
            im2col(g, x, &mut col);
            T::gemm(g.c_out, g.col_rows(), opix, kernel, false, &col, false, beta, y);
        }
    }
    out
}

/// Accumulates into whichever of the three gradient buffers is requested.
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    out_grad: &[T],
    mut input_grad: Option<&mut [T]>,
    mut kernel_grad: Option<&mut [T]>,
    mut bias_grad: Option<&mut [T]>,
) {
    let opix = g.out_pixels();
    let rows = g.col_rows();
    let in_stride = g.c_in * g.in_pixels();
    let mut col = vec![T::zero(); rows * opix];
    let mut dcol = vec![T::zero(); rows * opix];
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let dy = &out_grad[b * g.c_out * opix..(b + 1) * g.c_out * opix];
        if let Some(db) = bias_grad.as_deref_mut() {
            for (co, chunk) in dy.chunks(opix).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = kernel_grad.as_deref_mut() {
            if g.is_pointwise() {
                T::gemm(g.c_out, opix, rows, dy, false, x, true, T::one(), dk);
            } else {
                im2col(g, x, &mut col);
                T::gemm(g.c_out, opix, rows, dy, false, &col, true, T::one(), dk);
            }
        }
        if let Some(dx) = input_grad.as_deref_mut() {
            let dx = &mut dx[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(rows, g.c_out, opix, kernel, true, dy, false, T::one(), dx);
            } else {
                T::gemm(rows, g.c_out, opix, kernel, true, dy, false, T::zero(), &mut dcol);
                col2im_add(g, &dcol, dx);
            }
        }
    }
}

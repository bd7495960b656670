use super::Tensor;
use crate::error::{dim_err, Result};

/// Matrix product `[m×k] · [k×n]`.
///
/// Each output element accumulates its `k` products strictly left to right
/// (ascending `k`), so results are reproducible bit for bit. The loop order is
/// `i, k, j` so the innermost loop streams contiguous rows of `b` and the
/// output.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`, with the same left-to-right reduction
/// order as [`matmul`].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err(format!(
            "matmul_tn leading dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let brow = &bd[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = ad[kk * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = a.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Nearest-neighbour resize of an `h×w` grid; output cell `(i, j)` reads
/// source `(floor((i+0.5)·h/h2), floor((j+0.5)·w/w2))`.
pub fn resize_nearest(a: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let (h, w) = a.dims2()?;
    if h2 == 0 || w2 == 0 {
        return Err(dim_err(format!("resize target {h2}x{w2}")));
    }
    let src = |i: usize, n: usize, n2: usize| -> usize {
        // exact integer form of floor((i + 0.5) * n / n2)
        ((2 * i + 1) * n / (2 * n2)).min(n - 1)
    };
    let mut out = Vec::with_capacity(h2 * w2);
    for i in 0..h2 {
        let si = src(i, h, h2);
        for j in 0..w2 {
            out.push(a.data()[si * w + src(j, w, w2)]);
        }
    }
    Tensor::new(vec![h2, w2], out)
}

/// Expands a `[h·w × c]` feature map into `[h·w × 9c]` 3×3 patches with zero
/// padding. Patch column order is `(dy, dx, channel)`.
pub fn im2col3(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n != h * w {
        return Err(dim_err(format!("im2col: {n} tokens for a {h}x{w} grid")));
    }
    let xd = x.data();
    let mut out = vec![0.0; n * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * 9 * c;
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = base + (dy * 3 + dx) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    Tensor::new(vec![n, 9 * c], out)
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c9) = cols.dims2()?;
    if n != h * w || c9 % 9 != 0 {
        return Err(dim_err(format!("col2im: shape {:?}", cols.shape())));
    }
    let c = c9 / 9;
    let cd = cols.data();
    let mut out = vec![0.0; n * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * 9 * c;
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = base + (dy * 3 + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] += cd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

/// 2×2 average pooling of a `[h·w × c]` map.
pub fn avg_pool2(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n != h * w || h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err(format!("avg_pool2: {n} tokens for {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h2 {
        for xx in 0..w2 {
            let o = (y * w2 + xx) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                for ch in 0..c {
                    out[o + ch] += xd[s + ch];
                }
            }
            for v in &mut out[o..o + c] {
                *v *= 0.25;
            }
        }
    }
    Tensor::new(vec![h2 * w2, c], out)
}

/// 2× nearest upsampling of a `[h·w × c]` map.
pub fn upsample2(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n != h * w {
        return Err(dim_err(format!("upsample2: {n} tokens for {h}x{w}")));
    }
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = Vec::with_capacity(h2 * w2 * c);
    for y in 0..h2 {
        for xx in 0..w2 {
            let s = ((y / 2) * w + xx / 2) * c;
            out.extend_from_slice(&xd[s..s + c]);
        }
    }
    Tensor::new(vec![h2 * w2, c], out)
}

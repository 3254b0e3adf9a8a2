//! Forward kernels for every op kind. All loops run in a fixed order so results
//! are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn dims2(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(op, format!("expected a rank-2 tensor, got {s:?}"))),
    }
}

fn dims4(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected a rank-4 tensor, got {s:?}"))),
    }
}

/// `op(a) @ op(b)` where `op` optionally transposes a stored rank-2 matrix.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = dims2("matmul", a)?;
    let (br, bc) = dims2("matmul", b)?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "^T" } else { "" },
                b.shape(),
                if trans_b { "^T" } else { "" }
            ),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a square-kernel, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::shape(op, "kernel and stride must be positive"));
        }
        if self.in_h + 2 * self.padding < self.kernel || self.in_w + 2 * self.padding < self.kernel {
            return Err(Error::shape(
                op,
                format!(
                    "kernel {} larger than padded input {}x{}",
                    self.kernel,
                    self.in_h + 2 * self.padding,
                    self.in_w + 2 * self.padding
                ),
            ));
        }
        Ok(())
    }
}

/// Unfold one image `[C, H, W]` into columns `[C*K*K, OH*OW]`.
fn im2col<T: Element>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (x, v) in out_row.iter_mut().enumerate() {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: accumulate columns back into an image.
fn col2im<T: Element>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for x in 0..ow {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] = dst[ix as usize] + src[y * ow + x];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_geometry(
    op: &'static str,
    input: [usize; 4],
    weight: [usize; 4],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [b, c, h, w] = input;
    let [o, ci, kh, kw] = weight;
    if ci != c {
        return Err(Error::shape(
            op,
            format!("input has {c} channels but weight expects {ci}"),
        ));
    }
    if kh != kw {
        return Err(Error::shape(op, format!("kernel must be square, got {kh}x{kw}")));
    }
    let g = ConvGeometry {
        batch: b,
        in_channels: c,
        out_channels: o,
        in_h: h,
        in_w: w,
        kernel: kh,
        stride,
        padding,
    };
    g.check(op)?;
    Ok(g)
}

/// `[B, C, H, W] * [O, C, K, K] -> [B, O, OH, OW]`.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = conv_geometry("conv2d", dims4("conv2d", x)?, dims4("conv2d", w)?, stride, padding)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    let image = g.in_channels * g.in_h * g.in_w;
    let patch = g.patch();
    let mut col = vec![T::zero(); patch * spatial];
    let mut out = vec![T::zero(); g.batch * g.out_channels * spatial];
    for b in 0..g.batch {
        im2col(&g, &x.data()[b * image..(b + 1) * image], &mut col);
        let dst = &mut out[b * g.out_channels * spatial..(b + 1) * g.out_channels * spatial];
        T::gemm(
            g.out_channels,
            patch,
            spatial,
            w.data(),
            patch as isize,
            1,
            &col,
            spatial as isize,
            1,
            T::zero(),
            dst,
        );
    }
    Tensor::new(vec![g.batch, g.out_channels, oh, ow], out)
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub fn conv2d_input_grad<T: Element>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let op = "conv2d_input_grad";
    let [b, o, goh, gow] = dims4(op, grad_out)?;
    let wd = dims4(op, w)?;
    if wd[0] != o {
        return Err(Error::shape(
            op,
            format!("gradient has {o} channels but weight produces {}", wd[0]),
        ));
    }
    let g = conv_geometry(op, [b, wd[1], input_hw.0, input_hw.1], wd, stride, padding)?;
    if (g.out_h(), g.out_w()) != (goh, gow) {
        return Err(Error::shape(
            op,
            format!(
                "gradient spatial size {goh}x{gow} does not match {}x{}",
                g.out_h(),
                g.out_w()
            ),
        ));
    }
    let spatial = goh * gow;
    let image = g.in_channels * g.in_h * g.in_w;
    let patch = g.patch();
    let mut col = vec![T::zero(); patch * spatial];
    let mut out = vec![T::zero(); b * image];
    for bi in 0..b {
        let src = &grad_out.data()[bi * o * spatial..(bi + 1) * o * spatial];
        T::gemm(
            patch,
            o,
            spatial,
            w.data(),
            1,
            patch as isize,
            src,
            spatial as isize,
            1,
            T::zero(),
            &mut col,
        );
        col2im(&g, &col, &mut out[bi * image..(bi + 1) * image]);
    }
    Tensor::new(vec![b, g.in_channels, g.in_h, g.in_w], out)
}

/// Gradient of `conv2d` with respect to its weight, given input and output gradient.
pub fn conv2d_weight_grad<T: Element>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    kernel: usize,
) -> Result<Tensor<T>> {
    let op = "conv2d_weight_grad";
    let xd = dims4(op, x)?;
    let [gb, o, goh, gow] = dims4(op, grad_out)?;
    let g = conv_geometry(op, xd, [o, xd[1], kernel, kernel], stride, padding)?;
    if gb != g.batch || (g.out_h(), g.out_w()) != (goh, gow) {
        return Err(Error::shape(
            op,
            format!("gradient {:?} does not match input {:?}", grad_out.shape(), x.shape()),
        ));
    }
    let spatial = goh * gow;
    let image = g.in_channels * g.in_h * g.in_w;
    let patch = g.patch();
    let mut col = vec![T::zero(); patch * spatial];
    let mut out = vec![T::zero(); o * patch];
    for bi in 0..g.batch {
        im2col(&g, &x.data()[bi * image..(bi + 1) * image], &mut col);
        let src = &grad_out.data()[bi * o * spatial..(bi + 1) * o * spatial];
        let beta = if bi == 0 { T::zero() } else { T::one() };
        T::gemm(
            o,
            spatial,
            patch,
            src,
            spatial as isize,
            1,
            &col,
            1,
            spatial as isize,
            beta,
            &mut out,
        );
    }
    Tensor::new(vec![o, g.in_channels, kernel, kernel], out)
}

/// Flat input index of the maximum of each non-overlapping `window x window`
/// block. Ties go to the first maximum under a row-major scan.
pub fn maxpool2d_argmax<T: Element>(x: &Tensor<T>, window: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let [b, c, h, w] = dims4("maxpool2d", x)?;
    if window == 0 || h < window || w < window {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {window} does not fit input {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let data = x.data();
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + y * window * w + xo * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (y * window + dy) * w + xo * window + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![b, c, oh, ow]))
}

pub fn gather<T: Element>(x: &Tensor<T>, indices: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    let data = x.data();
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::shape(
            "gather",
            format!("index {bad} out of range for {} elements", data.len()),
        ));
    }
    Tensor::new(shape.to_vec(), indices.iter().map(|&i| data[i]).collect())
}

pub fn scatter_add<T: Element>(g: &Tensor<T>, indices: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    if g.len() != indices.len() {
        return Err(Error::shape(
            "scatter_add",
            format!("{} values for {} indices", g.len(), indices.len()),
        ));
    }
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    for (&i, &v) in indices.iter().zip(g.data()) {
        if i >= n {
            return Err(Error::shape("scatter_add", format!("index {i} out of range for {n}")));
        }
        out[i] = out[i] + v;
    }
    Tensor::new(shape.to_vec(), out)
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn sum_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis("sum_axis", x.shape(), axis)?;
    let data = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub fn broadcast_axis<T: Element>(x: &Tensor<T>, axis: usize, size: usize) -> Result<Tensor<T>> {
    if axis > x.rank() {
        return Err(Error::shape(
            "broadcast_axis",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis..].iter().product();
    let data = x.data();
    let mut out = Vec::with_capacity(outer * size * inner);
    for o in 0..outer {
        let src = &data[o * inner..(o + 1) * inner];
        for _ in 0..size {
            out.extend_from_slice(src);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.insert(axis, size);
    Tensor::new(shape, out)
}

/// Row-wise log-softmax of a rank-2 tensor, stabilized by max subtraction.
pub fn log_softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = dims2("log_softmax", x)?;
    if cols == 0 {
        return Err(Error::shape("log_softmax", "no classes"));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(vec![rows, cols], out)
}

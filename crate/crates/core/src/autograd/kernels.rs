//! Dense numeric kernels shared by forward and backward passes.

/// Strided view of a logical `rows x cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows x cols` storage, optionally read as its transpose.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            // stored as cols x rows
            Mat {
                data,
                rows,
                cols,
                rs: 1,
                cs: rows as isize,
            }
        } else {
            Mat {
                data,
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize + 1
    }
}

/// Destination layout for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct OutLayout {
    pub rs: isize,
    pub cs: isize,
}

impl OutLayout {
    pub fn row_major(cols: usize) -> Self {
        OutLayout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Logical `rows x cols` written into storage that holds its transpose.
    pub fn transposed(rows: usize) -> Self {
        OutLayout {
            rs: 1,
            cs: rows as isize,
        }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64], out: OutLayout) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() >= a.extent() && b.data.len() >= b.extent());
    let c_extent = ((m - 1) as isize * out.rs + (n - 1) as isize * out.cs) as usize + 1;
    assert!(c.len() >= c_extent);
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: extents of all three operands were checked against their slices above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            out.rs,
            out.cs,
        );
    }
}

/// Geometry of a 1-D convolution over a `channels x len` signal.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

/// Unfolds `x` into a `(channels * kernel) x out_len` matrix.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.channels * g.kernel * g.out_len];
    for ci in 0..g.channels {
        let xrow = &x[ci * g.len..(ci + 1) * g.len];
        for k in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + k) * g.out_len..(ci * g.kernel + k + 1) * g.out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad_left as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    *slot = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into `out` (accumulating).
pub(crate) fn col2im_add(cols: &[f64], g: ConvGeom, out: &mut [f64]) {
    for ci in 0..g.channels {
        let orow = &mut out[ci * g.len..(ci + 1) * g.len];
        for k in 0..g.kernel {
            let row = &cols[(ci * g.kernel + k) * g.out_len..(ci * g.kernel + k + 1) * g.out_len];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad_left as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    orow[pos as usize] += v;
                }
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into a new buffer laid out as `shape` permuted by `perm`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut dst = vec![0.0; src.len()];
    if src.is_empty() {
        return dst;
    }
    // stride into src for each output axis
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[rank - 1];
    let inner_stride = gather[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut out = 0;
    while out < dst.len() {
        let base: usize = (0..rank - 1).map(|a| idx[a] * gather[a]).sum();
        for j in 0..inner {
            dst[out + j] = src[base + j * inner_stride];
        }
        out += inner;
        // increment all but the last axis
        let mut a = rank - 1;
        while a > 0 {
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    dst
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, n, inner)` split of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

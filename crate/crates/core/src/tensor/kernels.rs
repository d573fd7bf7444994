//! Raw numeric kernels behind the differentiable ops. Everything here works
//! on flat row-major `f64` slices.

/// `c = alpha * a * b + beta * c` for strided matrices.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each is described by
/// its (row stride, column stride) pair, so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= extent(m, k, a_strides));
    debug_assert!(b.len() >= extent(k, n, b_strides));
    debug_assert!(c.len() >= extent(m, n, c_strides));
    // SAFETY: the debug assertions above state the contract every caller
    // upholds: each slice covers the full strided extent of its matrix.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

/// Compressed sparse row matrix, used for the (mostly empty) graph operators.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    size: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    /// Builds from a dense square row-major matrix, dropping exact zeros.
    pub fn from_dense(size: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), size * size, "dense operator must be square");
        let mut row_ptr = Vec::with_capacity(size + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in dense.chunks_exact(size) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseOperator {
            size,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.size * self.size];
        for i in 0..self.size {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[i * self.size + self.col_idx[p]] = self.values[p];
            }
        }
        out
    }

    /// `out[b] += A * x[b]` for each of `batch` blocks of shape `size x width`.
    pub(crate) fn apply_add(&self, x: &[f64], out: &mut [f64], batch: usize, width: usize) {
        let block = self.size * width;
        for b in 0..batch {
            let xb = &x[b * block..(b + 1) * block];
            let ob = &mut out[b * block..(b + 1) * block];
            for i in 0..self.size {
                let dst = &mut ob[i * width..(i + 1) * width];
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let a = self.values[p];
                    let src = &xb[self.col_idx[p] * width..(self.col_idx[p] + 1) * width];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += a * s;
                    }
                }
            }
        }
    }

    /// `out[b] += Aᵀ * g[b]`, the adjoint of [`apply_add`](Self::apply_add).
    pub(crate) fn apply_transpose_add(
        &self,
        g: &[f64],
        out: &mut [f64],
        batch: usize,
        width: usize,
    ) {
        let block = self.size * width;
        for b in 0..batch {
            let gb = &g[b * block..(b + 1) * block];
            let ob = &mut out[b * block..(b + 1) * block];
            for i in 0..self.size {
                let src = &gb[i * width..(i + 1) * width];
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let a = self.values[p];
                    let j = self.col_idx[p];
                    let dst = &mut ob[j * width..(j + 1) * width];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += a * s;
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `target`, with zero
/// stride on broadcast axes. `shape` must broadcast to `target`.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Walks `shape` in row-major order and yields, for every position, the
/// offset computed under each of the given stride vectors.
pub(crate) struct StridedWalk<const N: usize> {
    shape: Vec<usize>,
    strides: [Vec<usize>; N],
    index: Vec<usize>,
    offsets: [usize; N],
    remaining: usize,
}

impl<const N: usize> StridedWalk<N> {
    pub(crate) fn new(shape: &[usize], strides: [Vec<usize>; N]) -> Self {
        StridedWalk {
            shape: shape.to_vec(),
            strides,
            index: vec![0; shape.len()],
            offsets: [0; N],
            remaining: shape.iter().product(),
        }
    }
}

impl<const N: usize> Iterator for StridedWalk<N> {
    type Item = [usize; N];

    fn next(&mut self) -> Option<[usize; N]> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.offsets;
        for axis in (0..self.shape.len()).rev() {
            self.index[axis] += 1;
            for (off, st) in self.offsets.iter_mut().zip(&self.strides) {
                *off += st[axis];
            }
            if self.index[axis] < self.shape[axis] {
                break;
            }
            for (off, st) in self.offsets.iter_mut().zip(&self.strides) {
                *off -= st[axis] * self.shape[axis];
            }
            self.index[axis] = 0;
        }
        Some(current)
    }
}

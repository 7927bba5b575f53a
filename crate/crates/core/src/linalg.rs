//! Small dense linear algebra: LU with partial pivoting, Cholesky, and null vectors.
//!
//! The matrices this crate factorizes are at most a few hundred rows wide, so
//! plain row-major storage and textbook kernels are sufficient.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular to working precision (pivot {pivot} at step {step})")]
    Singular { step: usize, pivot: f64 },
    #[error("matrix is not positive definite (diagonal {value} at row {row})")]
    NotPositiveDefinite { row: usize, value: f64 },
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error("null vector requested for a {rows}x{cols} matrix; need more columns than rows")]
    NoFreeColumn { rows: usize, cols: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::Shape {
                    expected: format!("{c} columns"),
                    found: format!("{} columns", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self, LinalgError> {
        let c = columns.len();
        let r = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(r, c);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != r {
                return Err(LinalgError::Shape {
                    expected: format!("{r} rows"),
                    found: format!("{} rows", col.len()),
                });
            }
            for (i, &x) in col.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols, "mul_vec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization `P A = L U` of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::Shape {
                expected: "square matrix".into(),
                found: format!("{}x{}", a.rows, a.cols),
            });
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        let tiny = scale * T::epsilon() * T::from_usize_lossy(n.max(1));
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tiny || best == T::zero() {
                return Err(LinalgError::Singular {
                    step: k,
                    pivot: best.to_f64_lossy(),
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != T::zero() {
                    for j in k + 1..n {
                        let u = lu[k * n + j];
                        lu[i * n + j] = lu[i * n + j] - f * u;
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`, writing `x` into `out`.
    pub fn solve_into(&self, b: &[T], out: &mut [T]) {
        let n = self.n;
        for (i, &p) in self.perm.iter().enumerate() {
            out[i] = b[p];
        }
        for i in 0..n {
            out[i] = out[i] - dot(&self.lu[i * n..i * n + i], &out[..i]);
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            out[i] = (out[i] - dot(&row[i + 1..], &out[i + 1..])) / row[i];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        self.solve_into(b, &mut out);
        out
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, LinalgError> {
        let n = a.rows;
        if a.cols != n {
            return Err(LinalgError::Shape {
                expected: "square matrix".into(),
                found: format!("{}x{}", a.rows, a.cols),
            });
        }
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d = d - l[j * n + k] * l[j * n + k];
            }
            if !(d > T::zero()) {
                return Err(LinalgError::NotPositiveDefinite {
                    row: j,
                    value: d.to_f64_lossy(),
                });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    /// Returns `y` with `L y = b`; then `bᵀ A⁻¹ b = ‖y‖²`.
    pub fn forward(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quadratic_form(&self, b: &[T]) -> T {
        self.forward(b).iter().fold(T::zero(), |acc, &y| acc + y * y)
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.n).fold(T::zero(), |acc, i| acc + two * self.l[i * self.n + i].ln())
    }
}

/// A nonzero vector `v` with `A v ≈ 0`, scaled to unit max-norm.
///
/// Uses Gauss-Jordan elimination with complete pivoting; the first non-pivot
/// column becomes the free variable. Any null vector is acceptable when the
/// null space has dimension above one.
pub fn null_vector<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    if n <= m {
        return Err(LinalgError::NoFreeColumn { rows: m, cols: n });
    }
    let mut r = a.clone();
    let mut col_perm: Vec<usize> = (0..n).collect();
    let scale = a.max_abs();
    let tiny = scale * T::epsilon() * T::from_usize_lossy(n);
    let mut rank = 0;
    for k in 0..m {
        let (mut pi, mut pj, mut best) = (k, k, T::zero());
        for i in k..m {
            for j in k..n {
                let v = r[(i, col_perm[j])].abs();
                if v > best {
                    best = v;
                    pi = i;
                    pj = j;
                }
            }
        }
        if best <= tiny {
            break;
        }
        if pi != k {
            for j in 0..n {
                let t = r[(k, j)];
                r[(k, j)] = r[(pi, j)];
                r[(pi, j)] = t;
            }
        }
        col_perm.swap(k, pj);
        let pc = col_perm[k];
        let pivot = r[(k, pc)];
        for j in 0..n {
            r[(k, j)] = r[(k, j)] / pivot;
        }
        for i in 0..m {
            if i == k {
                continue;
            }
            let f = r[(i, pc)];
            if f != T::zero() {
                for j in 0..n {
                    let u = r[(k, j)];
                    r[(i, j)] = r[(i, j)] - f * u;
                }
            }
        }
        rank += 1;
    }
    let free = col_perm[rank];
    let mut v = vec![T::zero(); n];
    v[free] = T::one();
    for k in 0..rank {
        v[col_perm[k]] = -r[(k, free)];
    }
    let vmax = v.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    for x in &mut v {
        *x = *x / vmax;
    }
    Ok(v)
}

/// A basis of the numerical null space of `a`, one vector per free column.
///
/// Reduced row-echelon form with partial pivoting, scanning columns left to
/// right. Vector `i` has a one in its free column, zeros in the other free
/// columns and is supported on that column plus the pivot columns.
pub fn null_space_basis<T: Scalar>(a: &Matrix<T>) -> Vec<Vec<T>> {
    let (m, n) = (a.rows, a.cols);
    let mut r = a.clone();
    let tiny = a.max_abs() * T::epsilon() * T::from_usize_lossy(m.max(n));
    let mut pivots: Vec<usize> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    let mut row = 0;
    for col in 0..n {
        if row == m {
            free.push(col);
            continue;
        }
        let mut p = row;
        for i in row + 1..m {
            if r[(i, col)].abs() > r[(p, col)].abs() {
                p = i;
            }
        }
        if r[(p, col)].abs() <= tiny {
            free.push(col);
            continue;
        }
        if p != row {
            for j in 0..n {
                let t = r[(row, j)];
                r[(row, j)] = r[(p, j)];
                r[(p, j)] = t;
            }
        }
        let pivot = r[(row, col)];
        for j in 0..n {
            r[(row, j)] = r[(row, j)] / pivot;
        }
        for i in 0..m {
            if i == row {
                continue;
            }
            let f = r[(i, col)];
            if f != T::zero() {
                for j in 0..n {
                    let u = r[(row, j)];
                    r[(i, j)] = r[(i, j)] - f * u;
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    free.iter()
        .map(|&f| {
            let mut v = vec![T::zero(); n];
            v[f] = T::one();
            for (k, &p) in pivots.iter().enumerate() {
                v[p] = -r[(k, f)];
            }
            v
        })
        .collect()
}

/// Inner product over the common length, with four partial sums.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

//! Dense row-major matrices, the special products the gradient algebra needs,
//! and the flop counter used as the scaling instrument.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};

/// Exact ledger of arithmetic operations (one unit per scalar multiply, add,
/// or transcendental call). Passed explicitly to every kernel; there is no
/// global counter, so measurements stay deterministic.
#[derive(Debug, Default)]
pub struct FlopCounter {
    flops: Cell<u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    pub fn total(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset(&self) {
        self.flops.set(0);
    }
}

thread_local! {
    static ALLOC_LEDGER: RefCell<Option<Vec<(usize, usize)>>> = const { RefCell::new(None) };
}

/// Runs `f` while recording the shape of every matrix allocated on this
/// thread. Used by tests to prove the factored path never materializes an
/// n-by-n intermediate.
pub fn with_alloc_ledger<T>(f: impl FnOnce() -> T) -> (T, Vec<(usize, usize)>) {
    ALLOC_LEDGER.with(|l| *l.borrow_mut() = Some(Vec::new()));
    let out = f();
    let ledger = ALLOC_LEDGER.with(|l| l.borrow_mut().take()).unwrap_or_default();
    (out, ledger)
}

fn record_alloc(rows: usize, cols: usize) {
    ALLOC_LEDGER.with(|l| {
        if let Some(ledger) = l.borrow_mut().as_mut() {
            ledger.push((rows, cols));
        }
    });
}

/// Row-major dense matrix of `f64`. Values are immutable once built by an
/// operation; mutation happens only through explicit setters while a matrix
/// is being assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        record_alloc(rows, cols);
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        record_alloc(rows, cols);
        Self {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidParameter {
                what: format!(
                    "data length {} does not match {rows}x{cols}",
                    data.len()
                ),
            });
        }
        record_alloc(rows, cols);
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidParameter {
                what: "ragged row lengths".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Largest entry magnitude (the ℓ∞ norm used throughout).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `[start, start+len)` as a new matrix.
    pub fn col_slice(&self, start: usize, len: usize) -> Self {
        debug_assert!(start + len <= self.cols);
        let mut out = Self::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    /// Writes `block` into columns `[start, start+block.cols)` of `self`.
    pub fn set_col_slice(&mut self, start: usize, block: &DenseMatrix) {
        debug_assert_eq!(self.rows, block.rows);
        debug_assert!(start + block.cols <= self.cols);
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
    }
}

/// ℓ∞ distance between two same-shaped matrices.
pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn check_finite(m: &DenseMatrix, op: &'static str) {
    debug_assert!(m.is_finite(), "{op} produced a non-finite entry");
    let _ = op;
}

/// `a * b`, counted as 2*m*k*n flops (one multiply and one add per term).
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, p, n) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    flops.add(2 * (m * p * n) as u64);
    check_finite(&out, "matmul");
    Ok(out)
}

/// Entry-wise product.
pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "hadamard",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, a.cols);
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        *o = x * y;
    }
    flops.add((a.rows * a.cols) as u64);
    check_finite(&out, "hadamard");
    Ok(out)
}

/// Row-wise Kronecker product: column `l1 + l2*k1` of the result holds
/// `a[i,l1] * b[i,l2]`. Turns a Hadamard product of two factored matrices
/// into a single factored product.
pub fn rowwise_kron(a: &DenseMatrix, b: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch {
            op: "rowwise_kron",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, k1, k2) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(n, k1 * k2);
    for i in 0..n {
        let arow = a.row(i);
        let brow = b.row(i);
        let orow = &mut out.data[i * k1 * k2..(i + 1) * k1 * k2];
        for (l2, &bv) in brow.iter().enumerate() {
            for (l1, &av) in arow.iter().enumerate() {
                orow[l1 + l2 * k1] = av * bv;
            }
        }
    }
    flops.add((n * k1 * k2) as u64);
    check_finite(&out, "rowwise_kron");
    Ok(out)
}

/// Which side of the matrix a diagonal factor multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagSide {
    /// `diag(k) * m`: row `i` of the result is `k[i]` times row `i` of `m`.
    Left,
    /// `m * diag(k)`: column `j` of the result is `k[j]` times column `j`.
    Right,
}

pub fn diag_scale(
    k: &[f64],
    m: &DenseMatrix,
    side: DiagSide,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let expected = match side {
        DiagSide::Left => m.rows,
        DiagSide::Right => m.cols,
    };
    if k.len() != expected {
        return Err(Error::DimensionMismatch {
            op: "diag_scale",
            lhs: (k.len(), 1),
            rhs: m.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    match side {
        DiagSide::Left => {
            for i in 0..m.rows {
                let ki = k[i];
                for (o, v) in out.row_mut(i).iter_mut().zip(m.row(i)) {
                    *o = ki * v;
                }
            }
        }
        DiagSide::Right => {
            for i in 0..m.rows {
                for (j, (o, v)) in out.row_mut(i).iter_mut().zip(m.row(i)).enumerate() {
                    *o = k[j] * v;
                }
            }
        }
    }
    flops.add((m.rows * m.cols) as u64);
    check_finite(&out, "diag_scale");
    Ok(out)
}

/// `a + b`.
pub fn add(a: &DenseMatrix, b: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, a.cols);
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        *o = x + y;
    }
    flops.add((a.rows * a.cols) as u64);
    Ok(out)
}

/// `a - b`.
pub fn sub(a: &DenseMatrix, b: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "sub",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, a.cols);
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        *o = x - y;
    }
    flops.add((a.rows * a.cols) as u64);
    Ok(out)
}

/// `c * a` for a scalar `c`.
pub fn scale(a: &DenseMatrix, c: f64, flops: &FlopCounter) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows, a.cols);
    for (o, x) in out.data.iter_mut().zip(&a.data) {
        *o = c * x;
    }
    flops.add((a.rows * a.cols) as u64);
    out
}

/// `out += a` in place.
pub fn add_assign(out: &mut DenseMatrix, a: &DenseMatrix, flops: &FlopCounter) -> Result<()> {
    if out.shape() != a.shape() {
        return Err(Error::DimensionMismatch {
            op: "add_assign",
            lhs: out.shape(),
            rhs: a.shape(),
        });
    }
    for (o, x) in out.data.iter_mut().zip(&a.data) {
        *o += x;
    }
    flops.add((a.rows * a.cols) as u64);
    Ok(())
}

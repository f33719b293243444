//! Block-structured linear algebra for the weighted-energy recursions.
//!
//! Matrices here are partitioned into `M x M` blocks. [`bvec`] stacks the
//! column-major vectorizations of the blocks, block column by block column,
//! and [`block_kron`] is the matching block Kronecker product, so that
//!
//! ```text
//! bvec(A S B) = (B^T (.) A) bvec(S)
//! Tr(A^T B)   = bvec(A)^T bvec(B)
//! ```
//!
//! Everything is stored dense; [`fourth_moment_sparse`] is the one exception,
//! used to keep the fourth-moment operator cheap to multiply.

use nalgebra::{DMatrix, DMatrixView, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// A dense matrix viewed as a grid of `block_size x block_size` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    data: DMatrix<f64>,
    block_size: usize,
    row_blocks: usize,
    col_blocks: usize,
}

impl BlockMatrix {
    pub fn new(data: DMatrix<f64>, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Shape("block size must be positive".into()));
        }
        let (rows, cols) = data.shape();
        if rows == 0 || cols == 0 || rows % block_size != 0 || cols % block_size != 0 {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix is not a grid of {block_size}x{block_size} blocks"
            )));
        }
        Ok(Self {
            row_blocks: rows / block_size,
            col_blocks: cols / block_size,
            data,
            block_size,
        })
    }

    pub fn zeros(row_blocks: usize, col_blocks: usize, block_size: usize) -> Self {
        Self {
            data: DMatrix::zeros(row_blocks * block_size, col_blocks * block_size),
            block_size,
            row_blocks,
            col_blocks,
        }
    }

    pub fn identity(blocks: usize, block_size: usize) -> Self {
        let n = blocks * block_size;
        Self {
            data: DMatrix::identity(n, n),
            block_size,
            row_blocks: blocks,
            col_blocks: blocks,
        }
    }

    /// Block-diagonal matrix with `diag` on the main diagonal.
    pub fn from_diagonal(diag: &DVector<f64>, block_size: usize) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(diag), block_size)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn row_blocks(&self) -> usize {
        self.row_blocks
    }

    pub fn col_blocks(&self) -> usize {
        self.col_blocks
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        let m = self.block_size;
        self.data.view((i * m, j * m), (m, m))
    }

    pub fn transpose(&self) -> Self {
        Self {
            data: self.data.transpose(),
            block_size: self.block_size,
            row_blocks: self.col_blocks,
            col_blocks: self.row_blocks,
        }
    }

    pub fn is_square_grid(&self) -> bool {
        self.row_blocks == self.col_blocks
    }
}

/// Position of entry `(r, c)` of block `(i, j)` inside `bvec` of an
/// `n x n` grid of `m x m` blocks.
#[inline]
pub fn bvec_index(i: usize, j: usize, r: usize, c: usize, n: usize, m: usize) -> usize {
    (j * n + i) * m * m + c * m + r
}

pub fn bvec(s: &BlockMatrix) -> Result<DVector<f64>> {
    if !s.is_square_grid() {
        return Err(Error::Shape(format!(
            "bvec needs a square block grid, got {}x{}",
            s.row_blocks, s.col_blocks
        )));
    }
    let (n, m) = (s.row_blocks, s.block_size);
    let mut out = DVector::zeros(n * n * m * m);
    for j in 0..n {
        for i in 0..n {
            for c in 0..m {
                for r in 0..m {
                    out[bvec_index(i, j, r, c, n, m)] = s.data[(i * m + r, j * m + c)];
                }
            }
        }
    }
    Ok(out)
}

pub fn bvec_inverse(v: &DVector<f64>, block_size: usize, blocks: usize) -> Result<BlockMatrix> {
    let (n, m) = (blocks, block_size);
    if v.len() != (n * m) * (n * m) {
        return Err(Error::Shape(format!(
            "bvec_inverse: length {} is not ({}*{})^2",
            v.len(),
            n,
            m
        )));
    }
    let mut out = BlockMatrix::zeros(n, n, m);
    for j in 0..n {
        for i in 0..n {
            for c in 0..m {
                for r in 0..m {
                    out.data[(i * m + r, j * m + c)] = v[bvec_index(i, j, r, c, n, m)];
                }
            }
        }
    }
    Ok(out)
}

/// Block Kronecker product `A (.) B`.
///
/// For `A` with a `p x q` block grid and `B` with an `r x s` grid (shared block
/// size `M`), block `(i, j)` of the result is the `r x s` grid whose `(k, l)`
/// entry is `A_ij (x) B_kl`. The result has block size `M^2`.
pub fn block_kron(a: &BlockMatrix, b: &BlockMatrix) -> Result<BlockMatrix> {
    if a.block_size != b.block_size {
        return Err(Error::Shape(format!(
            "block_kron: block sizes differ ({} vs {})",
            a.block_size, b.block_size
        )));
    }
    let m = a.block_size;
    let m2 = m * m;
    let (p, q, r, s) = (a.row_blocks, a.col_blocks, b.row_blocks, b.col_blocks);
    let mut out = DMatrix::zeros(p * r * m2, q * s * m2);
    for i in 0..p {
        for j in 0..q {
            let a_ij = a.block(i, j);
            if a_ij.iter().all(|&x| x == 0.0) {
                continue;
            }
            for k in 0..r {
                for l in 0..s {
                    let b_kl = b.block(k, l);
                    if b_kl.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let row0 = (i * r + k) * m2;
                    let col0 = (j * s + l) * m2;
                    for ar in 0..m {
                        for ac in 0..m {
                            let av = a_ij[(ar, ac)];
                            if av == 0.0 {
                                continue;
                            }
                            for br in 0..m {
                                for bc in 0..m {
                                    out[(row0 + ar * m + br, col0 + ac * m + bc)] =
                                        av * b_kl[(br, bc)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    BlockMatrix::new(out, m2)
}

/// [`block_kron`] in CSR form, built from the nonzeros of `A` and `B` only.
pub fn block_kron_sparse(a: &BlockMatrix, b: &BlockMatrix) -> Result<CsrMatrix<f64>> {
    if a.block_size != b.block_size {
        return Err(Error::Shape(format!(
            "block_kron_sparse: block sizes differ ({} vs {})",
            a.block_size, b.block_size
        )));
    }
    let m = a.block_size;
    let m2 = m * m;
    let (r, s) = (b.row_blocks, b.col_blocks);
    let nonzeros = |x: &DMatrix<f64>| {
        let mut out = Vec::new();
        for c in 0..x.ncols() {
            for row in 0..x.nrows() {
                let v = x[(row, c)];
                if v != 0.0 {
                    out.push((row, c, v));
                }
            }
        }
        out
    };
    let na = nonzeros(&a.data);
    let nb = nonzeros(&b.data);
    let mut coo = CooMatrix::new(a.row_blocks * r * m2, a.col_blocks * s * m2);
    for &(ra, ca, va) in &na {
        let (i, ar, j, ac) = (ra / m, ra % m, ca / m, ca % m);
        for &(rb, cb, vb) in &nb {
            let (k, br, l, bc) = (rb / m, rb % m, cb / m, cb % m);
            coo.push(
                (i * r + k) * m2 + ar * m + br,
                (j * s + l) * m2 + ac * m + bc,
                va * vb,
            );
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Diagonal of `A (.) B` for diagonal `A`, `B` given by their diagonals
/// (`n*m` entries each, `n x n` grid of `m x m` blocks).
///
/// The entry at `bvec_index(i, j, r, c)` is `a[j*m + c] * b[i*m + r]`.
pub fn block_kron_diagonal(a: &[f64], b: &[f64], block_size: usize) -> Result<DVector<f64>> {
    let m = block_size;
    if a.len() != b.len() || m == 0 || !a.len().is_multiple_of(m) {
        return Err(Error::Shape(format!(
            "block_kron_diagonal: lengths {} and {} with block size {m}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() / m;
    let mut out = DVector::zeros(a.len() * a.len());
    for j in 0..n {
        for i in 0..n {
            for c in 0..m {
                for r in 0..m {
                    out[bvec_index(i, j, r, c, n, m)] = a[j * m + c] * b[i * m + r];
                }
            }
        }
    }
    Ok(out)
}

/// `Tr(A^T B)` by a direct double sum.
pub fn trace_pairing(a: &BlockMatrix, b: &BlockMatrix) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape(format!(
            "trace_pairing: {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum())
}

/// Per-block second moments `Lambda_i = variance_i * I_M` of independent
/// zero-mean Gaussian regressor blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSpec {
    variances: Vec<f64>,
    block_size: usize,
}

impl MomentSpec {
    pub fn new(variances: Vec<f64>, block_size: usize) -> Result<Self> {
        if block_size == 0 || variances.is_empty() {
            return Err(Error::Shape("moment spec needs N >= 1 and M >= 1".into()));
        }
        if let Some((k, v)) = variances
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Domain(format!("variance {k} must be positive, got {v}")));
        }
        Ok(Self {
            variances,
            block_size,
        })
    }

    /// `diag{self, other}`.
    pub fn stacked(&self, other: &MomentSpec) -> Result<MomentSpec> {
        if self.block_size != other.block_size {
            return Err(Error::Shape("stacked moment specs need one block size".into()));
        }
        let mut variances = self.variances.clone();
        variances.extend_from_slice(&other.variances);
        Ok(Self {
            variances,
            block_size: self.block_size,
        })
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks(&self) -> usize {
        self.variances.len()
    }

    /// Diagonal of `Lambda`, one entry per scalar coordinate.
    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.variances.len() * self.block_size,
            self.variances
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, self.block_size)),
        )
    }
}

fn resolve_moments(spec: &MomentSpec, two_component: Option<&MomentSpec>) -> Result<MomentSpec> {
    match two_component {
        Some(other) => spec.stacked(other),
        None => Ok(spec.clone()),
    }
}

/// Nonzero entries of the fourth-moment operator, in bvec coordinates.
fn fourth_moment_triplets(spec: &MomentSpec) -> Vec<(usize, usize, f64)> {
    let (n, m) = (spec.blocks(), spec.block_size);
    let s = &spec.variances;
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let base = (j * n + i) * m * m;
            if i != j {
                // Lambda_i (x) Lambda_j is a scaled identity
                for k in 0..m * m {
                    out.push((base + k, base + k, s[i] * s[j]));
                }
            } else {
                // 2 Lambda_i (x) Lambda_i + lambda_i lambda_i^T
                let v2 = s[i] * s[i];
                for k in 0..m * m {
                    let (kr, kc) = (k % m, k / m);
                    for l in 0..m * m {
                        let (lr, lc) = (l % m, l / m);
                        let mut val = 0.0;
                        if k == l {
                            val += 2.0 * v2;
                        }
                        if kr == kc && lr == lc {
                            val += v2;
                        }
                        if val != 0.0 {
                            out.push((base + k, base + l, val));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dense fourth-moment operator `A` with `bvec(E[Y Y^T S Y Y^T]) = A bvec(S)`
/// for symmetric `S`, where `Y = blockdiag(y_1, ..., y_n)` and
/// `y_i ~ N(0, Lambda_i)`. When `two_component` is given the operator is built
/// over the stacked `diag{spec, two_component}`.
pub fn fourth_moment_operator(
    spec: &MomentSpec,
    two_component: Option<&MomentSpec>,
) -> Result<DMatrix<f64>> {
    let spec = resolve_moments(spec, two_component)?;
    let dim = (spec.blocks() * spec.block_size).pow(2);
    let mut out = DMatrix::zeros(dim, dim);
    for (r, c, v) in fourth_moment_triplets(&spec) {
        out[(r, c)] += v;
    }
    Ok(out)
}

/// Same operator as [`fourth_moment_operator`], in CSR form.
pub fn fourth_moment_sparse(
    spec: &MomentSpec,
    two_component: Option<&MomentSpec>,
) -> Result<CsrMatrix<f64>> {
    let spec = resolve_moments(spec, two_component)?;
    let dim = (spec.blocks() * spec.block_size).pow(2);
    let mut coo = CooMatrix::new(dim, dim);
    for (r, c, v) in fourth_moment_triplets(&spec) {
        coo.push(r, c, v);
    }
    Ok(CsrMatrix::from(&coo))
}

/// Selection matrices and the diagonal-block mask used by the single-bit
/// recursion.
#[derive(Clone, Debug)]
pub struct SelectionMask {
    /// `col{I_MN, 0}`: picks the estimate (upper) half of the stacked state.
    pub upper_selector: BlockMatrix,
    /// `col{0, I_MN}`: picks the construction (lower) half.
    pub lower_selector: BlockMatrix,
    /// `T_k = diag{0, .., I_M, .., 0}` on an `N x N` grid.
    pub diag_selectors: Vec<BlockMatrix>,
    /// Dense `K` with `bvec(S~) = K bvec(S)`, where `S~` is `S` with the
    /// diagonal `M x M` blocks of its lower-right quadrant removed.
    pub mask: DMatrix<f64>,
}

impl SelectionMask {
    /// `K` is a 0/1 diagonal matrix; this is its diagonal.
    pub fn mask_diagonal(&self) -> DVector<f64> {
        self.mask.diagonal()
    }

    /// `S_D = sum_k T_k L^T S L T_k` for the lower selector `L`.
    pub fn diagonal_part(&self, sigma: &BlockMatrix) -> BlockMatrix {
        let l = self.lower_selector.data();
        let inner = l.transpose() * sigma.data() * l;
        let mut acc = DMatrix::zeros(inner.nrows(), inner.ncols());
        for t in &self.diag_selectors {
            acc += t.data() * &inner * t.data();
        }
        BlockMatrix::new(acc, sigma.block_size()).expect("selector shapes are consistent")
    }

    /// `S~ = S - L S_D L^T`.
    pub fn masked(&self, sigma: &BlockMatrix) -> BlockMatrix {
        let l = self.lower_selector.data();
        let sd = self.diagonal_part(sigma);
        let out = sigma.data() - l * sd.data() * l.transpose();
        BlockMatrix::new(out, sigma.block_size()).expect("selector shapes are consistent")
    }
}

pub fn selection_and_mask(block_size: usize, nodes: usize) -> Result<SelectionMask> {
    let (m, n) = (block_size, nodes);
    if m == 0 || n == 0 {
        return Err(Error::Shape("selection_and_mask needs M, N >= 1".into()));
    }
    let mn = m * n;
    let mut upper = DMatrix::zeros(2 * mn, mn);
    let mut lower = DMatrix::zeros(2 * mn, mn);
    for k in 0..mn {
        upper[(k, k)] = 1.0;
        lower[(mn + k, k)] = 1.0;
    }
    let upper_selector = BlockMatrix::new(upper, m)?;
    let lower_selector = BlockMatrix::new(lower, m)?;
    let diag_selectors: Vec<BlockMatrix> = (0..n)
        .map(|k| {
            let mut t = DMatrix::zeros(mn, mn);
            for r in 0..m {
                t[(k * m + r, k * m + r)] = 1.0;
            }
            BlockMatrix::new(t, m)
        })
        .collect::<Result<_>>()?;

    // K = I - (L (.) L) sum_k (T_k (.) T_k) (L^T (.) L^T)
    let lift = block_kron(&lower_selector, &lower_selector)?;
    let lt = lower_selector.transpose();
    let restrict = block_kron(&lt, &lt)?;
    let mut pick = DMatrix::zeros(mn * mn, mn * mn);
    for t in &diag_selectors {
        pick += block_kron(t, t)?.data();
    }
    let dim = (2 * mn) * (2 * mn);
    let mask = DMatrix::identity(dim, dim) - lift.data() * pick * restrict.data();

    Ok(SelectionMask {
        upper_selector,
        lower_selector,
        diag_selectors,
        mask,
    })
}

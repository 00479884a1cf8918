//! Numerically stable evaluation of Sigma = psi H^2 + psi^-1 I through a
//! symmetric eigendecomposition of H, plus the Nystrom approximate
//! eigendecomposition and a Woodbury-based low-rank solve.
//!
//! With H = V diag(u) V^T, Sigma = V diag(psi u^2 + 1/psi) V^T, so inverses
//! and log-determinants reduce to diagonal work. Every diagonal term is at
//! least 1/psi, so there is no singularity for psi > 0.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Full spectral factorisation of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct EigenFactor {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

/// Approximate eigendecomposition of an n x n Gram built from an m-point
/// active set: orthonormal vectors (n x r) and r nonzero eigenvalues.
#[derive(Clone, Debug)]
pub struct NystromFactor {
    pub m: usize,
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Symmetric eigendecomposition; the input is symmetrised as (H + H^T)/2
/// first, and eigenvalues are returned in ascending order.
pub fn sym_eigen(h: &DMatrix<f64>) -> Result<EigenFactor> {
    if h.nrows() != h.ncols() {
        return Err(Error::DimensionMismatch("eigendecomposition needs a square matrix".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entries in eigendecomposition input".into()));
    }
    let n = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    let se = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].partial_cmp(&se.eigenvalues[b]).unwrap());
    let values = DVector::from_fn(n, |i, _| se.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &se.eigenvectors.column(src));
    }
    Ok(EigenFactor { vectors, values })
}

fn check_psi(psi: f64) -> Result<()> {
    if !(psi > 0.0) || !psi.is_finite() {
        return Err(Error::InvalidParam(format!("psi must be positive and finite, got {psi}")));
    }
    Ok(())
}

/// Sigma^-1 v where Sigma = psi H^2 + psi^-1 I and H = V diag(u) V^T.
pub fn sigma_apply(fac: &EigenFactor, psi: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_psi(psi)?;
    if v.len() != fac.values.len() {
        return Err(Error::DimensionMismatch("vector length does not match factor".into()));
    }
    let mut t = fac.vectors.transpose() * v;
    for i in 0..t.len() {
        let u = fac.values[i];
        t[i] /= psi * u * u + 1.0 / psi;
    }
    Ok(&fac.vectors * t)
}

/// log det(psi H^2 + psi^-1 I) = sum_i log(psi u_i^2 + 1/psi).
pub fn sigma_logdet(fac: &EigenFactor, psi: f64) -> Result<f64> {
    check_psi(psi)?;
    Ok(fac.values.iter().map(|&u| (psi * u * u + 1.0 / psi).ln()).sum())
}

/// One-shot orthogonal Nystrom factorisation from the active-set blocks
/// A (m x m, the active rows against themselves) and B (m x (n-m), active
/// rows against the rest). Rows of the returned vectors are ordered with the
/// active set first, matching the block layout of the inputs.
///
/// Eigenvalues of A with |u| below 1e-10 max|u| are dropped and the
/// factorisation proceeds with reduced rank; the stacked eigenvector matrix
/// is re-orthonormalised through a QR step followed by a small
/// re-diagonalisation, so downstream Sigma operations can treat the result
/// exactly like a truncated exact eigendecomposition. Cost O(n m^2).
pub fn nystrom_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<NystromFactor> {
    let m = a.nrows();
    if m < 2 {
        return Err(Error::InvalidParam("nystrom needs an active set of at least 2".into()));
    }
    if a.ncols() != m {
        return Err(Error::DimensionMismatch("block A must be square".into()));
    }
    if b.nrows() != m {
        return Err(Error::DimensionMismatch("block B must have m rows".into()));
    }
    let n = m + b.ncols();
    let eig = sym_eigen(a)?;
    let umax = eig.values.iter().fold(0.0f64, |acc, &u| acc.max(u.abs()));
    let keep: Vec<usize> =
        (0..m).filter(|&i| eig.values[i].abs() > 1e-10 * umax.max(f64::MIN_POSITIVE)).collect();
    if keep.is_empty() {
        return Ok(NystromFactor { m, vectors: DMatrix::zeros(n, 0), values: DVector::zeros(0) });
    }
    let r = keep.len();
    let mut vk = DMatrix::zeros(m, r);
    let mut uk = DVector::zeros(r);
    for (dst, &src) in keep.iter().enumerate() {
        vk.set_column(dst, &eig.vectors.column(src));
        uk[dst] = eig.values[src];
    }
    // Stack [V_m; B^T V_m U_m^-1].
    let mut stacked = DMatrix::zeros(n, r);
    stacked.view_mut((0, 0), (m, r)).copy_from(&vk);
    if n > m {
        let mut lower = b.transpose() * &vk;
        for j in 0..r {
            let inv_u = 1.0 / uk[j];
            for i in 0..lower.nrows() {
                lower[(i, j)] *= inv_u;
            }
        }
        stacked.view_mut((m, 0), (n - m, r)).copy_from(&lower);
    }
    // Orthogonalise: stacked = Q0 R0, then re-diagonalise R0 U R0^T.
    let qr = stacked.qr();
    let q0 = qr.q();
    let r0 = qr.r();
    let mut k_small = &r0 * DMatrix::from_diagonal(&uk) * r0.transpose();
    k_small = (&k_small + k_small.transpose()) * 0.5;
    let inner = sym_eigen(&k_small)?;
    let dmax = inner.values.iter().fold(0.0f64, |acc, &d| acc.max(d.abs()));
    let keep2: Vec<usize> =
        (0..r).filter(|&i| inner.values[i].abs() > 1e-10 * dmax.max(f64::MIN_POSITIVE)).collect();
    let r2 = keep2.len();
    let mut w = DMatrix::zeros(r, r2);
    let mut d = DVector::zeros(r2);
    for (dst, &src) in keep2.iter().enumerate() {
        w.set_column(dst, &inner.vectors.column(src));
        d[dst] = inner.values[src];
    }
    Ok(NystromFactor { m, vectors: q0 * w, values: d })
}

impl NystromFactor {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// Reconstruct the approximated Gram (for tests and diagnostics).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

/// psi [I - Q ((psi^2 Q^T Q)^-1 + Q^T Q)^-1 Q^T] v, the Woodbury form of
/// (psi (QQ^T)^2 + psi^-1 I)^-1 v for a rank-q factor H ~ QQ^T. Cost O(n q^2).
pub fn woodbury_apply(q: &DMatrix<f64>, psi: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_psi(psi)?;
    if q.ncols() >= q.nrows() {
        return Err(Error::DimensionMismatch("woodbury factor needs q < n columns".into()));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entries in woodbury factor".into()));
    }
    if v.len() != q.nrows() {
        return Err(Error::DimensionMismatch("vector length does not match factor".into()));
    }
    if q.iter().all(|&x| x == 0.0) {
        return Ok(v * psi);
    }
    let m = q.transpose() * q;
    let m_inv = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("woodbury inner Gram Q^T Q is singular".into()))?
        .inverse();
    let inner = m_inv / (psi * psi) + &m;
    let rhs = q.transpose() * v;
    let x = inner
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("woodbury inner system is singular".into()))?;
    Ok((v - q * x) * psi)
}

/// Spectral handle for Sigma = psi H^2 + psi^-1 I, either a full
/// eigendecomposition or a Nystrom low-rank one (vectors already in natural
/// row order, rank r <= n with the complement treated as the null space of H).
#[derive(Clone, Debug)]
pub enum SigmaFactor {
    Dense(EigenFactor),
    LowRank { n: usize, vectors: DMatrix<f64>, values: DVector<f64> },
}

impl SigmaFactor {
    pub fn n(&self) -> usize {
        match self {
            SigmaFactor::Dense(f) => f.values.len(),
            SigmaFactor::LowRank { n, .. } => *n,
        }
    }

    /// Sigma^-1 v.
    pub fn apply_inv(&self, psi: f64, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SigmaFactor::Dense(f) => sigma_apply(f, psi, v).expect("valid psi"),
            SigmaFactor::LowRank { vectors, values, .. } => {
                let t = vectors.transpose() * v;
                let mut scaled = t.clone();
                for i in 0..scaled.len() {
                    let s = values[i];
                    scaled[i] /= psi * s * s + 1.0 / psi;
                }
                vectors * scaled + (v - vectors * t) * psi
            }
        }
    }

    /// log det Sigma.
    pub fn logdet(&self, psi: f64) -> f64 {
        match self {
            SigmaFactor::Dense(f) => sigma_logdet(f, psi).expect("valid psi"),
            SigmaFactor::LowRank { n, values, .. } => {
                let head: f64 = values.iter().map(|&s| (psi * s * s + 1.0 / psi).ln()).sum();
                head - (*n - values.len()) as f64 * psi.ln()
            }
        }
    }

    /// Posterior mean of the I-prior random effects, w = psi H Sigma^-1 y.
    pub fn posterior_w_mean(&self, psi: f64, y: &DVector<f64>) -> DVector<f64> {
        let (vectors, values) = self.parts();
        let mut t = vectors.transpose() * y;
        for i in 0..t.len() {
            let u = values[i];
            t[i] *= psi * u / (psi * u * u + 1.0 / psi);
        }
        vectors * t
    }

    /// H v through the factor.
    pub fn h_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let (vectors, values) = self.parts();
        let mut t = vectors.transpose() * v;
        for i in 0..t.len() {
            t[i] *= values[i];
        }
        vectors * t
    }

    /// v^T Sigma^-1 v (predictive variance building block).
    pub fn quad_inv(&self, psi: f64, v: &DVector<f64>) -> f64 {
        v.dot(&self.apply_inv(psi, v))
    }

    /// Materialised Sigma^-1 (dense EM path only).
    pub fn sigma_inv_dense(&self, psi: f64) -> DMatrix<f64> {
        let (vectors, values) = self.parts();
        let mut scaled = vectors.clone();
        for j in 0..values.len() {
            let w = 1.0 / (psi * values[j] * values[j] + 1.0 / psi);
            for i in 0..scaled.nrows() {
                scaled[(i, j)] *= w;
            }
        }
        let mut out = scaled * vectors.transpose();
        if let SigmaFactor::LowRank { n, vectors, .. } = self {
            // Complement of the column space contributes psi (I - QQ^T).
            let qqt = vectors * vectors.transpose();
            out += (DMatrix::identity(*n, *n) - qqt) * psi;
        }
        out
    }

    fn parts(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        match self {
            SigmaFactor::Dense(f) => (&f.vectors, &f.values),
            SigmaFactor::LowRank { vectors, values, .. } => (vectors, values),
        }
    }
}

//! Dense and banded linear algebra shared by the spectral modules.
//!
//! Dense Hermitian work (tridiagonalization, Cholesky, LU) is delegated to
//! nalgebra, which is generic over the scalar. The banded complex LU and the
//! Lanczos iteration used by the supercell oracle are implemented here; they
//! deliberately do not reuse the plane-wave machinery so the oracle stays an
//! independent code path.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::{rf, Cplx, Real, Result};

/// Eigenpairs of a Hermitian matrix, ascending eigenvalue order.
pub fn hermitian_eigen<T: Real>(mut a: DMatrix<Cplx<T>>) -> (Vec<T>, DMatrix<Cplx<T>>) {
    let n = a.nrows();
    // enforce exact Hermitian symmetry before tridiagonalization
    for i in 0..n {
        for j in 0..i {
            let avg = (a[(i, j)] + a[(j, i)].conj()) * rf::<T>(0.5);
            a[(i, j)] = avg;
            a[(j, i)] = avg.conj();
        }
        a[(i, i)] = Cplx::new(a[(i, i)].re, T::zero());
    }
    let se = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let vals: Vec<T> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vecs.set_column(col, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Cholesky factor of a Hermitian positive-definite mass matrix, reused
/// across many pencil solves.
pub struct MassCholesky<T: Real> {
    l: DMatrix<Cplx<T>>,
}

impl<T: Real> MassCholesky<T> {
    pub fn new(mass: &DMatrix<Cplx<T>>) -> Result<Self> {
        let chol = mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::IndefiniteMass("Cholesky factorization failed".into()))?;
        Ok(MassCholesky { l: chol.l() })
    }

    /// Lowest `s` eigenpairs of the Hermitian-definite pencil
    /// diag(k_diag)·v = λ·M·v; vectors are M-orthonormal.
    pub fn solve_pencil(&self, k_diag: &[T], s: usize) -> (Vec<T>, DMatrix<Cplx<T>>) {
        let n = k_diag.len();
        assert!(s <= n);
        // C = L^{-1} D L^{-H}
        let mut d = DMatrix::<Cplx<T>>::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = Cplx::new(k_diag[i], T::zero());
        }
        let y = self
            .l
            .solve_lower_triangular(&d)
            .expect("triangular solve");
        let z = self
            .l
            .solve_lower_triangular(&y.adjoint())
            .expect("triangular solve");
        let (vals, vecs) = hermitian_eigen(z.adjoint());
        // back-transform: v = L^{-H} y_col for the s lowest
        let sel = vecs.columns(0, s).into_owned();
        let v = self
            .l
            .adjoint()
            .solve_upper_triangular(&sel)
            .expect("triangular solve");
        (vals[..s].to_vec(), v)
    }

    /// M-inner product v^H M u computed through the factor.
    pub fn m_inner(&self, u: &nalgebra::DVector<Cplx<T>>, v: &nalgebra::DVector<Cplx<T>>) -> Cplx<T> {
        let lu = self.l.adjoint() * u;
        let lv = self.l.adjoint() * v;
        lv.dotc(&lu)
    }
}

/// Jacobi-preconditioned residual correction plus a Rayleigh–Ritz re-mix for
/// the lowest eigenpairs of diag(k)·v = λ·M·v.
///
/// The dense tridiagonalization above delivers residuals around 1e-9·‖K‖,
/// short of the 1e-10·(1+λ) contract of a BandSample; a few cheap O(n²)
/// correction sweeps push them to near machine precision.
pub fn refine_pencil<T: Real>(
    k_diag: &[T],
    mass: &DMatrix<Cplx<T>>,
    vals: &mut [T],
    vecs: &mut DMatrix<Cplx<T>>,
    max_sweeps: usize,
    tol: T,
) {
    let n = k_diag.len();
    let s_bands = vals.len();
    for _ in 0..max_sweeps {
        let mut worst = T::zero();
        for s in 0..s_bands {
            let v = vecs.column(s).into_owned();
            let mv = mass * &v;
            let lam = {
                // Rayleigh quotient with the current vector
                let mut num = Cplx::new(T::zero(), T::zero());
                for i in 0..n {
                    num += v[i].conj() * v[i] * k_diag[i];
                }
                num.re / mv.dotc(&v).re
            };
            let mut resid = T::zero();
            let mut corr = v.clone();
            for i in 0..n {
                let r = v[i] * k_diag[i] - mv[i] * Cplx::new(lam, T::zero());
                resid += r.norm_sqr();
                let d = k_diag[i] - lam * mass[(i, i)].re;
                if d.abs() > rf::<T>(0.05) * (T::one() + lam.abs()) {
                    corr[i] -= r / Cplx::new(d, T::zero());
                }
            }
            worst = worst.max(resid.sqrt() / (T::one() + lam.abs()));
            vecs.set_column(s, &corr);
            vals[s] = lam;
        }
        if worst <= tol {
            break;
        }
        // Rayleigh–Ritz on the corrected block restores M-orthonormality and
        // resolves clustered pairs
        let v = vecs.columns(0, s_bands).into_owned();
        let mv = mass * &v;
        let g = v.adjoint() * &mv;
        let mut h = DMatrix::<Cplx<T>>::zeros(s_bands, s_bands);
        for a in 0..s_bands {
            for b in 0..s_bands {
                let mut acc = Cplx::new(T::zero(), T::zero());
                for i in 0..n {
                    acc += v[(i, a)].conj() * v[(i, b)] * k_diag[i];
                }
                h[(a, b)] = acc;
            }
        }
        let gl = match g.clone().cholesky() {
            Some(c) => c.l(),
            None => break,
        };
        let y1 = gl.solve_lower_triangular(&h).expect("triangular solve");
        let c = gl
            .solve_lower_triangular(&y1.adjoint())
            .expect("triangular solve");
        let (small_vals, small_vecs) = hermitian_eigen(c.adjoint());
        let y = gl
            .adjoint()
            .solve_upper_triangular(&small_vecs)
            .expect("triangular solve");
        let mixed = &v * &y;
        for s in 0..s_bands {
            vecs.set_column(s, &mixed.column(s));
            vals[s] = small_vals[s];
        }
    }
}

/// Principal m-th root of a complex number (branch cut along the negative
/// real axis, i.e. away from the positive reals).
pub(crate) fn croot<T: Real>(z: Cplx<T>, m: usize) -> Cplx<T> {
    let r = z.norm_sqr().sqrt();
    if r == T::zero() {
        return Cplx::new(T::zero(), T::zero());
    }
    let theta = z.im.atan2(z.re) / rf::<T>(m as f64);
    let rad = r.powf(T::one() / rf::<T>(m as f64));
    Cplx::new(rad * theta.cos(), rad * theta.sin())
}

/// Integer power by repeated multiplication (exact for the small exponents
/// used by the continuation maps).
pub(crate) fn cpowi<T: Real>(z: Cplx<T>, m: usize) -> Cplx<T> {
    let mut acc = Cplx::new(T::one(), T::zero());
    for _ in 0..m {
        acc *= z;
    }
    acc
}

// ---------------------------------------------------------------------------
// banded complex LU with partial pivoting (LAPACK gbtrf/gbtrs layout)
// ---------------------------------------------------------------------------

/// Banded complex matrix with `kl` sub- and `ku` super-diagonals, stored
/// column-wise with `2kl+ku+1` rows so that partial pivoting fill-in fits.
pub struct BandedMatrix<T: Real> {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    ldab: usize,
    ab: Vec<Cplx<T>>,
}

impl<T: Real> BandedMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandedMatrix {
            n,
            kl,
            ku,
            ldab,
            ab: vec![Cplx::new(T::zero(), T::zero()); ldab * n],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // entry (i, j) lives at row kl + ku + i - j of column j
        (self.kl + self.ku + i - j) + j * self.ldab
    }

    /// Add `v` to entry (i, j); panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: Cplx<T>) {
        assert!(
            (i as i64 - j as i64).abs() as usize <= self.kl.max(self.ku)
                && (j <= i + self.ku)
                && (i <= j + self.kl),
            "entry ({i},{j}) outside band"
        );
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    /// In-place LU factorization with partial pivoting.
    pub fn lu_factor(mut self) -> Result<BandedLu<T>> {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku; // width of the upper factor
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            // pivot among rows j..=min(j+kl, n-1)
            let pmax = (j + kl).min(n - 1);
            let mut piv = j;
            let mut best = self.ab[self.slot(j, j)].norm_sqr();
            for i in (j + 1)..=pmax {
                let v = self.ab[self.slot(i, j)].norm_sqr();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            ipiv[j] = piv;
            let pivot = self.ab[self.slot(piv, j)];
            if pivot.norm_sqr() == T::zero() {
                return Err(Error::InvariantViolation(format!(
                    "banded LU: zero pivot at column {j}"
                )));
            }
            // swap rows j and piv across columns j..=min(j+kv, n-1)
            if piv != j {
                let jmax = (j + kv).min(n - 1);
                for c in j..=jmax {
                    // both rows are within the band of column c after fill-in
                    let s1 = self.slot(j, c);
                    let s2 = self.slot(piv, c);
                    self.ab.swap(s1, s2);
                }
            }
            let pivot = self.ab[self.slot(j, j)];
            // eliminate
            for i in (j + 1)..=pmax {
                let s = self.slot(i, j);
                let mult = self.ab[s] / pivot;
                self.ab[s] = mult;
                let jmax = (j + kv).min(n - 1);
                for c in (j + 1)..=jmax {
                    let sc = self.slot(j, c);
                    let sic = self.slot(i, c);
                    let sub = mult * self.ab[sc];
                    self.ab[sic] -= sub;
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            ldab,
            ab: self.ab,
            ipiv,
        })
    }
}

/// Factorized banded matrix; solves A x = b.
pub struct BandedLu<T: Real> {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<Cplx<T>>,
    ipiv: Vec<usize>,
}

impl<T: Real> BandedLu<T> {
    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ldab
    }

    pub fn solve(&self, b: &mut [Cplx<T>]) {
        let (n, kl) = (self.n, self.kl);
        let kv = self.kl + self.ku;
        // forward: apply pivots and L
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let imax = (j + kl).min(n - 1);
            let bj = b[j];
            for i in (j + 1)..=imax {
                let l = self.ab[self.slot(i, j)];
                b[i] -= l * bj;
            }
        }
        // back-substitution with banded U
        for j in (0..n).rev() {
            let x = b[j] / self.ab[self.slot(j, j)];
            b[j] = x;
            let imin = j.saturating_sub(kv);
            for i in imin..j {
                let u = self.ab[self.slot(i, j)];
                b[i] -= u * x;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Lanczos with a diagonal positive mass inner product
// ---------------------------------------------------------------------------

/// Ritz pairs of a self-adjoint operator in the B-inner product, B diagonal.
///
/// `op` must be self-adjoint with respect to ⟨u,v⟩_B = Σ B_i u_i conj(v_i);
/// for shift-invert supply op(v) = (A - σB)^{-1} B v. Full
/// reorthogonalization; deterministic given the start vector.
pub fn lanczos_b<T: Real>(
    mut op: impl FnMut(&[Cplx<T>]) -> Vec<Cplx<T>>,
    b_diag: &[T],
    start: &[Cplx<T>],
    steps: usize,
) -> Vec<(T, Vec<Cplx<T>>)> {
    let n = b_diag.len();
    let b_inner = |u: &[Cplx<T>], v: &[Cplx<T>]| -> Cplx<T> {
        let mut acc = Cplx::new(T::zero(), T::zero());
        for i in 0..n {
            acc += u[i] * v[i].conj() * b_diag[i];
        }
        acc
    };
    let b_norm = |u: &[Cplx<T>]| -> T { b_inner(u, u).re.sqrt() };

    let mut qs: Vec<Vec<Cplx<T>>> = Vec::with_capacity(steps);
    let mut alphas: Vec<T> = Vec::new();
    let mut betas: Vec<T> = Vec::new();

    let mut q = start.to_vec();
    let nrm = b_norm(&q);
    assert!(nrm > T::zero(), "start vector must be nonzero");
    q.iter_mut().for_each(|v| *v /= nrm);
    qs.push(q);

    for j in 0..steps {
        let mut w = op(&qs[j]);
        let alpha = b_inner(&w, &qs[j]).re;
        alphas.push(alpha);
        // full reorthogonalization, twice for stability
        for _ in 0..2 {
            for qi in &qs {
                let c = b_inner(&w, qi);
                for i in 0..n {
                    w[i] -= c * qi[i];
                }
            }
        }
        let beta = b_norm(&w);
        if beta < rf::<T>(1e-13) * (T::one() + alpha.abs()) {
            break; // invariant subspace found
        }
        if j + 1 < steps {
            betas.push(beta);
            w.iter_mut().for_each(|v| *v /= beta);
            qs.push(w);
        }
    }

    // tridiagonal eigenproblem
    let m = alphas.len();
    let mut t = DMatrix::<T>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m && i < betas.len() {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let se = t.symmetric_eigen();
    let mut out = Vec::with_capacity(m);
    for c in 0..m {
        let theta = se.eigenvalues[c];
        let y = se.eigenvectors.column(c);
        let mut x = vec![Cplx::new(T::zero(), T::zero()); n];
        for (i, qi) in qs.iter().enumerate() {
            let yc = y[i];
            for r in 0..n {
                x[r] += qi[r] * yc;
            }
        }
        out.push((theta, x));
    }
    out
}

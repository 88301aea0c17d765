//! Plane-wave discretization of the k-shifted unit-cell operator
//! −(1/ε₀)Δ_k with quasi-periodic boundary conditions in x (phase e^{ikx})
//! and periodic conditions in y.
//!
//! The basis e_{nm}(x,y) = e^{i(2πn+kx)x} e^{2πimy}, |n|,|m| ≤ N, satisfies
//! the boundary conditions exactly, the stiffness is diagonal with symbol
//! (2πn+kx)² + (2πm+k)², and the ε₀ mass matrix is a convolution with the
//! exact Fourier coefficients. The weighted eigenproblem is solved as the
//! Hermitian-definite pencil −Δ_k φ = λ ε₀ φ.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::linalg::MassCholesky;
use crate::medium::{cexp, CoefficientTable, DielectricProfile, Field};
use crate::{rf, to_f64, Cplx, Real, Result};

/// Quasimomentum pair (k_x, k): k_x real in [−π,π]; k complex to support the
/// analytic continuation, real for physical band computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiMomentum<T> {
    pub kx: T,
    pub k: Cplx<T>,
}

impl<T: Real> QuasiMomentum<T> {
    pub fn real(kx: T, k: T) -> Self {
        QuasiMomentum { kx, k: Cplx::new(k, T::zero()) }
    }
}

/// Plane-wave index set {(n, m) : |n|,|m| ≤ N} in row-major (n-major) order.
#[derive(Debug, Clone)]
pub struct PlaneWaveBasis {
    cutoff: usize,
    n: Vec<i64>,
    m: Vec<i64>,
}

impl PlaneWaveBasis {
    pub fn new(cutoff: usize) -> Arc<Self> {
        let k = cutoff as i64;
        let side = 2 * cutoff + 1;
        let mut n = Vec::with_capacity(side * side);
        let mut m = Vec::with_capacity(side * side);
        for nn in -k..=k {
            for mm in -k..=k {
                n.push(nn);
                m.push(mm);
            }
        }
        Arc::new(PlaneWaveBasis { cutoff, n, m })
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn n(&self) -> &[i64] {
        &self.n
    }

    pub fn m(&self) -> &[i64] {
        &self.m
    }

    /// Stiffness symbol (2πn+kx)² + (2πm+k)² per basis function.
    pub(crate) fn stiffness_diag<T: Real>(&self, kx: T, k: Cplx<T>) -> Vec<Cplx<T>> {
        let two_pi = rf::<T>(2.0) * T::pi();
        self.n
            .iter()
            .zip(&self.m)
            .map(|(&n, &m)| {
                let ax = two_pi * rf::<T>(n as f64) + kx;
                let ay = Cplx::new(two_pi * rf::<T>(m as f64), T::zero()) + k;
                Cplx::new(ax * ax, T::zero()) + ay * ay
            })
            .collect()
    }

    /// ε₀ mass matrix from a coefficient table: entry ((n,m),(n′,m′)) =
    /// c_{n−n′, m−m′}.
    pub(crate) fn mass_matrix<T: Real>(&self, coeffs: &CoefficientTable<T>) -> DMatrix<Cplx<T>> {
        let d = self.dim();
        let mut mass = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                mass[(a, b)] = coeffs.get(self.n[a] - self.n[b], self.m[a] - self.m[b]);
            }
        }
        mass
    }
}

/// Galerkin pencil of −Δ_k φ = λ ε₀ φ on the plane-wave basis.
pub struct SpectralPencil<T: Real> {
    pub basis: Arc<PlaneWaveBasis>,
    pub qm: QuasiMomentum<T>,
    /// Diagonal stiffness (complex when Im k ≠ 0).
    pub stiffness: Vec<Cplx<T>>,
    /// Hermitian positive-definite ε₀ mass matrix.
    pub mass: Arc<DMatrix<Cplx<T>>>,
}

/// Assemble the pencil at the given quasimomentum; `coeffs` must extend to
/// index 2N.
pub fn assemble_pencil<T: Real>(
    coeffs: &CoefficientTable<T>,
    qm: QuasiMomentum<T>,
    cutoff: usize,
) -> Result<SpectralPencil<T>> {
    if coeffs.max_index() < 2 * cutoff {
        return Err(Error::InsufficientCutoff(format!(
            "mass assembly at cutoff {cutoff} needs coefficients to index {}, table has {}",
            2 * cutoff,
            coeffs.max_index()
        )));
    }
    let basis = PlaneWaveBasis::new(cutoff);
    let stiffness = basis.stiffness_diag(qm.kx, qm.k);
    let mass = Arc::new(basis.mass_matrix(coeffs));
    Ok(SpectralPencil { basis, qm, stiffness, mass })
}

/// Lowest-S eigenpairs of the pencil at a real quasimomentum.
#[derive(Debug, Clone)]
pub struct BandSample<T: Real> {
    pub qm: QuasiMomentum<T>,
    /// Ascending eigenvalues λ₁ ≤ … ≤ λ_S.
    pub eigenvalues: Vec<T>,
    /// Mass-orthonormal coefficient columns, deterministic phase.
    pub vectors: DMatrix<Cplx<T>>,
    pub basis: Arc<PlaneWaveBasis>,
}

/// Solve the pencil for the lowest `s_bands` eigenpairs. Requires real k;
/// complex quasimomenta are reached through the continuation machinery in
/// the resolvent module.
pub fn solve_cell<T: Real>(pencil: &SpectralPencil<T>, s_bands: usize) -> Result<BandSample<T>> {
    if pencil.qm.k.im != T::zero() {
        return Err(Error::InvalidConfig(
            "solve_cell requires real k (use the continuation for complex k)".into(),
        ));
    }
    let dim = pencil.basis.dim();
    if s_bands > dim {
        return Err(Error::InvalidConfig(format!(
            "requested {s_bands} bands from a {dim}-dimensional pencil"
        )));
    }
    let chol = MassCholesky::new(&pencil.mass)?;
    solve_with_cholesky(pencil, &chol, s_bands)
}

fn solve_with_cholesky<T: Real>(
    pencil: &SpectralPencil<T>,
    chol: &MassCholesky<T>,
    s_bands: usize,
) -> Result<BandSample<T>> {
    let k_diag: Vec<T> = pencil.stiffness.iter().map(|z| z.re).collect();
    let (mut vals, mut vecs) = chol.solve_pencil(&k_diag, s_bands);
    crate::linalg::refine_pencil(
        &k_diag,
        &pencil.mass,
        &mut vals,
        &mut vecs,
        8,
        rf(1e-12),
    );
    // deterministic phase: largest-magnitude coefficient real positive
    for s in 0..s_bands {
        let col = vecs.column(s);
        let mut best = 0usize;
        let mut best_mag = T::zero();
        for i in 0..col.len() {
            let mag = col[i].norm_sqr();
            if mag > best_mag {
                best_mag = mag;
                best = i;
            }
        }
        let z = vecs[(best, s)];
        let phase = z / Cplx::new(z.norm_sqr().sqrt(), T::zero());
        let rot = phase.conj();
        for i in 0..vecs.nrows() {
            vecs[(i, s)] *= rot;
        }
    }
    let sample = BandSample {
        qm: pencil.qm,
        eigenvalues: vals,
        vectors: vecs,
        basis: pencil.basis.clone(),
    };
    verify_sample(pencil, &sample)?;
    Ok(sample)
}

/// Residual and orthonormality contract of a BandSample.
fn verify_sample<T: Real>(pencil: &SpectralPencil<T>, sample: &BandSample<T>) -> Result<()> {
    let tol = rf::<T>(1e-10);
    let dim = pencil.basis.dim();
    for s in 0..sample.eigenvalues.len() {
        let lam = sample.eigenvalues[s];
        let v = sample.vectors.column(s);
        let mv = &*pencil.mass * v;
        let mut res = T::zero();
        let mut vnorm = T::zero();
        for i in 0..dim {
            let r = pencil.stiffness[i] * v[i] - mv[i] * Cplx::new(lam, T::zero());
            res += r.norm_sqr();
            vnorm += v[i].norm_sqr();
        }
        let res = res.sqrt();
        let vnorm = vnorm.sqrt();
        if res > tol * (T::one() + lam.abs()) * vnorm {
            return Err(Error::InvariantViolation(format!(
                "eigen residual {} for band {} exceeds tolerance",
                to_f64(res),
                s + 1
            )));
        }
        let dn = mv.dotc(&v).re;
        if (dn - T::one()).abs() > tol {
            return Err(Error::InvariantViolation(format!(
                "mass normalization {} for band {}",
                to_f64(dn),
                s + 1
            )));
        }
    }
    Ok(())
}

/// Bloch function ψ_s(x,y) = e^{iky} φ_s(x,y): φ_s is held as plane-wave
/// coefficients, s is the 1-based band index.
#[derive(Debug, Clone)]
pub struct BlochFunction<T: Real> {
    pub s: usize,
    pub qm: QuasiMomentum<T>,
    pub phi_coeffs: DVector<Cplx<T>>,
    pub basis: Arc<PlaneWaveBasis>,
}

impl<T: Real> BandSample<T> {
    /// Extract band `s` (1-based) as a Bloch function.
    pub fn bloch(&self, s: usize) -> BlochFunction<T> {
        assert!(s >= 1 && s <= self.eigenvalues.len(), "band index out of range");
        BlochFunction {
            s,
            qm: self.qm,
            phi_coeffs: self.vectors.column(s - 1).into_owned(),
            basis: self.basis.clone(),
        }
    }
}

impl<T: Real> BlochFunction<T> {
    /// φ_s(x, y).
    pub fn eval_phi(&self, x: T, y: T) -> Cplx<T> {
        let two_pi = rf::<T>(2.0) * T::pi();
        let mut acc = Cplx::new(T::zero(), T::zero());
        for i in 0..self.basis.dim() {
            let ph = (two_pi * rf::<T>(self.basis.n()[i] as f64) + self.qm.kx) * x
                + two_pi * rf::<T>(self.basis.m()[i] as f64) * y;
            acc += self.phi_coeffs[i] * Cplx::new(ph.cos(), ph.sin());
        }
        acc
    }

    /// ψ_s(x, y) = e^{iky} φ_s(x, y).
    pub fn eval_psi(&self, x: T, y: T) -> Cplx<T> {
        let i_unit = Cplx::new(T::zero(), T::one());
        cexp(i_unit * self.qm.k * y) * self.eval_phi(x, y)
    }
}

/// Result of the gradient-identity check on an ε₀-normalized Bloch function.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck<T> {
    /// ‖∇ψ_s‖₂² computed exactly from plane-wave coefficients.
    pub grad_norm_sq: T,
    /// ‖∇ψ_s‖₂² ≤ λ_s · sup ε₀ · (1 + 1e-8).
    pub bound_ok: bool,
}

/// Exact ‖∇ψ_s‖₂² = Σ |a_{nm}|²((2πn+kx)² + (2πm+k)²) (real k), and the
/// gradient bound flag. For an ε₀-normalized eigenfunction this equals λ_s.
pub fn gradient_check<T: Real>(
    bf: &BlochFunction<T>,
    lambda_s: T,
    sup_eps0: T,
) -> GradientCheck<T> {
    let diag = bf.basis.stiffness_diag(bf.qm.kx, bf.qm.k);
    let mut acc = T::zero();
    for i in 0..bf.basis.dim() {
        acc += bf.phi_coeffs[i].norm_sqr() * diag[i].re;
    }
    GradientCheck {
        grad_norm_sq: acc,
        bound_ok: acc <= lambda_s * sup_eps0 * (T::one() + rf(1e-8)),
    }
}

/// Cell-centered tensor evaluation grid on [0,1]².
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn xs<T: Real>(&self) -> Vec<T> {
        (0..self.nx)
            .map(|i| (rf::<T>(i as f64) + rf(0.5)) / rf(self.nx as f64))
            .collect()
    }

    pub fn ys<T: Real>(&self) -> Vec<T> {
        (0..self.ny)
            .map(|j| (rf::<T>(j as f64) + rf(0.5)) / rf(self.ny as f64))
            .collect()
    }
}

/// Caching unit-cell solver for a fixed (profile, kx, cutoff): the Fourier
/// table, mass matrix and its Cholesky factor are built once; solves at
/// distinct k are cached and safe to request concurrently.
pub struct CellSolver<T: Real> {
    profile: DielectricProfile<T>,
    kx: T,
    cutoff: usize,
    nbands: usize,
    basis: Arc<PlaneWaveBasis>,
    mass: Arc<DMatrix<Cplx<T>>>,
    chol: MassCholesky<T>,
    cache: Mutex<HashMap<u64, Arc<BandSample<T>>>>,
}

impl<T: Real> CellSolver<T> {
    pub fn new(
        profile: &DielectricProfile<T>,
        kx: T,
        cutoff: usize,
        nbands: usize,
    ) -> Result<Self> {
        let coeffs = profile.fourier_coeffs(Field::Eps0, cutoff);
        let basis = PlaneWaveBasis::new(cutoff);
        if nbands > basis.dim() {
            return Err(Error::InvalidConfig(format!(
                "nbands {nbands} exceeds basis dimension {}",
                basis.dim()
            )));
        }
        let mass = Arc::new(basis.mass_matrix(&coeffs));
        let chol = MassCholesky::new(&mass)?;
        Ok(CellSolver {
            profile: profile.clone(),
            kx,
            cutoff,
            nbands,
            basis,
            mass,
            chol,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn profile(&self) -> &DielectricProfile<T> {
        &self.profile
    }

    pub fn kx(&self) -> T {
        self.kx
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn nbands(&self) -> usize {
        self.nbands
    }

    pub fn basis(&self) -> &Arc<PlaneWaveBasis> {
        &self.basis
    }

    pub fn mass(&self) -> &Arc<DMatrix<Cplx<T>>> {
        &self.mass
    }

    pub(crate) fn mass_cholesky(&self) -> &MassCholesky<T> {
        &self.chol
    }

    /// Bands at real k, cached by the bit pattern of k.
    pub fn solve(&self, k: T) -> Result<Arc<BandSample<T>>> {
        let key = to_f64(k).to_bits();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let pencil = SpectralPencil {
            basis: self.basis.clone(),
            qm: QuasiMomentum::real(self.kx, k),
            stiffness: self.basis.stiffness_diag(self.kx, Cplx::new(k, T::zero())),
            mass: self.mass.clone(),
        };
        let sample = Arc::new(solve_with_cholesky(&pencil, &self.chol, self.nbands)?);
        self.cache.lock().unwrap().insert(key, sample.clone());
        Ok(sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::Rect;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn free_profile(c: f64) -> DielectricProfile<f64> {
        DielectricProfile::new(c, vec![], vec![], 0.0).unwrap()
    }

    #[test]
    fn identity_mass_for_free_space() {
        let p = free_profile(1.0);
        let coeffs = p.fourier_coeffs(Field::Eps0, 3);
        let pencil =
            assemble_pencil(&coeffs, QuasiMomentum::real(0.0, 0.0), 3).unwrap();
        let d = pencil.basis.dim();
        for a in 0..d {
            for b in 0..d {
                let want = if a == b { 1.0 } else { 0.0 };
                assert_relative_eq!(pencil.mass[(a, b)].re, want, epsilon = 1e-14);
                assert_relative_eq!(pencil.mass[(a, b)].im, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn stiffness_closed_form() {
        let p = free_profile(1.0);
        let coeffs = p.fourier_coeffs(Field::Eps0, 2);
        let pencil = assemble_pencil(&coeffs, QuasiMomentum::real(PI, PI), 2).unwrap();
        // (n,m) = (0,0): (pi)^2 + (pi)^2 = 2 pi^2
        let idx = pencil.basis.dim() / 2;
        assert_eq!(pencil.basis.n()[idx], 0);
        assert_eq!(pencil.basis.m()[idx], 0);
        assert_relative_eq!(pencil.stiffness[idx].re, 2.0 * PI * PI, epsilon = 1e-12);
    }

    #[test]
    fn mass_hermitian_for_real_eps() {
        let p = DielectricProfile::new(
            1.0,
            vec![Rect { x0: 0.1, x1: 0.55, y0: 0.3, y1: 0.8, value: 7.0 }],
            vec![],
            0.0,
        )
        .unwrap();
        let coeffs = p.fourier_coeffs(Field::Eps0, 3);
        let pencil = assemble_pencil(&coeffs, QuasiMomentum::real(0.3, -0.7), 3).unwrap();
        let d = pencil.basis.dim();
        for a in 0..d {
            for b in 0..d {
                let diff = (pencil.mass[(a, b)] - pencil.mass[(b, a)].conj()).norm();
                assert!(diff < 1e-14);
            }
        }
    }

    #[test]
    fn insufficient_cutoff_rejected() {
        let p = free_profile(1.0);
        let coeffs = p.fourier_coeffs(Field::Eps0, 2); // max_index 4
        let r = assemble_pencil(&coeffs, QuasiMomentum::real(0.0, 0.0), 3); // needs 6
        assert!(matches!(r, Err(Error::InsufficientCutoff(_))));
    }

    #[test]
    fn free_laplacian_ground_state() {
        let p = free_profile(1.0);
        let solver = CellSolver::new(&p, 0.0, 3, 4).unwrap();
        let s = solver.solve(0.0).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-12);
        // constant eigenvector
        let bf = s.bloch(1);
        let v0 = bf.eval_phi(0.17, 0.42);
        let v1 = bf.eval_phi(0.8, 0.03);
        assert!((v0 - v1).norm() < 1e-10);
    }

    #[test]
    fn free_min_symbol_at_pi_pi() {
        let p = free_profile(1.0);
        let solver = CellSolver::new(&p, PI, 3, 2).unwrap();
        let s = solver.solve(PI).unwrap();
        assert_relative_eq!(s.eigenvalues[0], 2.0 * PI * PI, max_relative = 1e-12);
    }

    #[test]
    fn constant_eps_scales_spectrum() {
        let p1 = free_profile(1.0);
        let p4 = free_profile(4.0);
        let s1 = CellSolver::new(&p1, 0.4, 3, 6).unwrap().solve(0.9).unwrap();
        let s4 = CellSolver::new(&p4, 0.4, 3, 6).unwrap().solve(0.9).unwrap();
        for i in 0..6 {
            assert_relative_eq!(s4.eigenvalues[i], s1.eigenvalues[i] / 4.0, max_relative = 1e-11);
        }
    }

    #[test]
    fn free_bands_match_symbol_set() {
        // every computed λ equals ((2πn+kx)²+(2πm+k)²)/c for some (n,m)
        for &c in &[1.0, 4.0] {
            let p = free_profile(c);
            let solver = CellSolver::new(&p, 0.3, 4, 10).unwrap();
            let k = -1.1;
            let s = solver.solve(k).unwrap();
            for &lam in &s.eigenvalues {
                let mut best = f64::INFINITY;
                for n in -4..=4i64 {
                    for m in -4..=4i64 {
                        let sym = ((2.0 * PI * n as f64 + 0.3).powi(2)
                            + (2.0 * PI * m as f64 + k).powi(2))
                            / c;
                        best = best.min((sym - lam).abs() / (1.0 + lam.abs()));
                    }
                }
                assert!(best < 1e-10, "band value {lam} not a symbol value (err {best})");
            }
        }
    }

    #[test]
    fn bloch_quasi_periodicity() {
        let p = DielectricProfile::new(
            1.0,
            vec![Rect { x0: 0.25, x1: 0.75, y0: 0.25, y1: 0.75, value: 9.0 }],
            vec![],
            0.0,
        )
        .unwrap();
        let (kx, k) = (0.7, -0.4);
        let solver = CellSolver::new(&p, kx, 4, 3).unwrap();
        let s = solver.solve(k).unwrap();
        let bf = s.bloch(2);
        let i = Cplx::new(0.0, 1.0);
        for &y in &[0.1, 0.65] {
            let lhs = bf.eval_psi(1.0, y);
            let rhs = cexp(i * kx) * bf.eval_psi(0.0, y);
            assert!((lhs - rhs).norm() < 1e-10, "x quasi-periodicity");
        }
        for &x in &[0.2, 0.9] {
            let lhs = bf.eval_psi(x, 1.0);
            let rhs = cexp(i * k) * bf.eval_psi(x, 0.0);
            assert!((lhs - rhs).norm() < 1e-10, "y quasi-periodicity");
        }
    }

    #[test]
    fn gradient_identity_free_and_rod() {
        let rod = DielectricProfile::new(
            1.0,
            vec![Rect { x0: 0.25, x1: 0.75, y0: 0.25, y1: 0.75, value: 9.0 }],
            vec![],
            0.0,
        )
        .unwrap();
        let sup = rod.bounds().sup_eps0;
        let solver = CellSolver::new(&rod, 0.0, 5, 10).unwrap();
        let s = solver.solve(0.7).unwrap();
        for band in 1..=10usize {
            let bf = s.bloch(band);
            let gc = gradient_check(&bf, s.eigenvalues[band - 1], sup);
            assert_relative_eq!(
                gc.grad_norm_sq,
                s.eigenvalues[band - 1],
                max_relative = 1e-8
            );
            assert!(gc.bound_ok);
        }
        // constant mode: zero gradient
        let free = free_profile(1.0);
        let fs = CellSolver::new(&free, 0.0, 3, 1).unwrap().solve(0.0).unwrap();
        let gc = gradient_check(&fs.bloch(1), fs.eigenvalues[0], 1.0);
        assert!(gc.grad_norm_sq.abs() < 1e-12);
    }

    #[test]
    fn phase_fixing_is_deterministic() {
        let p = free_profile(2.0);
        let a = CellSolver::new(&p, 0.2, 3, 4).unwrap().solve(0.5).unwrap();
        let b = CellSolver::new(&p, 0.2, 3, 4).unwrap().solve(0.5).unwrap();
        for s in 0..4 {
            for i in 0..a.vectors.nrows() {
                assert!((a.vectors[(i, s)] - b.vectors[(i, s)]).norm() < 1e-13);
            }
        }
    }
}

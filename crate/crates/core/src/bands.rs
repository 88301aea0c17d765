//! Band structures over a k-grid at fixed k_x: eigenvector-overlap matching
//! into approximately-analytic branches, spectral gap detection, and
//! band-edge touch-point characterization (k_p, m_p, g_p).

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::Error;
use crate::linalg::cpowi;
use crate::unitcell::{BandSample, CellSolver, PlaneWaveBasis};
use crate::{rf, to_f64, Cplx, Real, Result};

/// A matching step where the two best eigenvector overlaps were closer than
/// the ambiguity tolerance; grid refinement is advised.
#[derive(Debug, Clone, Copy)]
pub struct MatchAmbiguity {
    /// Left grid index of the adjacent pair.
    pub j: usize,
    /// Branch (1-based) whose continuation was ambiguous.
    pub s: usize,
    /// Gap between the two candidate overlaps.
    pub margin: f64,
}

/// Matched band functions λ_s(k_j) with their Bloch coefficient columns.
pub struct BandStructure<T: Real> {
    pub kx: T,
    /// Ascending uniform grid over [−π, π], endpoints included, J odd.
    pub kgrid: Vec<T>,
    /// bands[s][j]: matched branch s (0-based row = band s+1) at k_j.
    pub bands: Vec<Vec<T>>,
    /// Per-grid-point coefficient columns in branch order.
    pub vectors: Vec<DMatrix<Cplx<T>>>,
    pub basis: Arc<PlaneWaveBasis>,
    /// Flagged near-ties during greedy matching.
    pub ambiguities: Vec<MatchAmbiguity>,
}

impl<T: Real> BandStructure<T> {
    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn n_k(&self) -> usize {
        self.kgrid.len()
    }

    /// Per-k ascending eigenvalues (the matched rows are a permutation of
    /// these at every grid point). Spectral gaps are gaps of the union of
    /// bands, so they are detected on this sorted view; the matched rows
    /// carry the local analytic structure used by the edge fits.
    pub fn sorted_bands(&self) -> Vec<Vec<T>> {
        let nj = self.n_k();
        let ns = self.n_bands();
        let mut out = vec![vec![T::zero(); nj]; ns];
        let mut col: Vec<T> = vec![T::zero(); ns];
        for j in 0..nj {
            for s in 0..ns {
                col[s] = self.bands[s][j];
            }
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for s in 0..ns {
                out[s][j] = col[s];
            }
        }
        out
    }

    /// Write `bands.csv` rows `k,s,lambda` (17 significant digits).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,s,lambda")?;
        for (j, &k) in self.kgrid.iter().enumerate() {
            for s in 0..self.n_bands() {
                writeln!(
                    w,
                    "{:.16e},{},{:.16e}",
                    to_f64(k),
                    s + 1,
                    to_f64(self.bands[s][j])
                )?;
            }
        }
        Ok(())
    }
}

/// Sweep k over a uniform J-point grid (J odd, so k = 0 is a grid point) and
/// match branches by eigenvector overlap. Solves run in parallel.
pub fn sweep<T: Real>(solver: &CellSolver<T>, j_points: usize) -> Result<BandStructure<T>> {
    if j_points < 33 || j_points % 2 == 0 {
        return Err(Error::InvalidConfig(
            "k-grid must have J >= 33 odd points".into(),
        ));
    }
    let pi = T::pi();
    let kgrid: Vec<T> = (0..j_points)
        .map(|j| {
            -pi + rf::<T>(2.0) * pi * rf::<T>(j as f64) / rf::<T>((j_points - 1) as f64)
        })
        .collect();
    let samples: Vec<Arc<BandSample<T>>> = kgrid
        .par_iter()
        .map(|&k| solver.solve(k))
        .collect::<Result<Vec<_>>>()?;
    match_bands(solver, &kgrid, &samples)
}

/// Relabel sorted per-k eigenpairs into continuous branches by maximizing the
/// mass-weighted eigenvector overlap |⟨v_s(k_j), v_t(k_{j+1})⟩_M| greedily.
/// Ties within 1e-3 are flagged; values at each k remain a permutation of
/// the solver output.
pub fn match_bands<T: Real>(
    solver: &CellSolver<T>,
    kgrid: &[T],
    samples: &[Arc<BandSample<T>>],
) -> Result<BandStructure<T>> {
    let nj = samples.len();
    let s_bands = samples[0].eigenvalues.len();
    if samples.iter().any(|s| s.eigenvalues.len() != s_bands) {
        return Err(Error::InvalidConfig(
            "samples must share the band count".into(),
        ));
    }
    let mass = solver.mass();
    let mut ambiguities = Vec::new();
    // assignment[j][s] = index at j+1 that continues index s at j
    let mut assignment: Vec<Vec<usize>> = Vec::with_capacity(nj.saturating_sub(1));
    for j in 0..nj.saturating_sub(1) {
        let left = &samples[j].vectors;
        let right = &samples[j + 1].vectors;
        let m_right = &**mass * right;
        let overlap = left.adjoint() * &m_right; // S x S
        let mut mags = vec![vec![T::zero(); s_bands]; s_bands];
        for a in 0..s_bands {
            for b in 0..s_bands {
                mags[a][b] = overlap[(a, b)].norm_sqr().sqrt();
            }
        }
        let mut row_used = vec![false; s_bands];
        let mut col_used = vec![false; s_bands];
        let mut assign = vec![usize::MAX; s_bands];
        for _ in 0..s_bands {
            let (mut best_a, mut best_b, mut best) = (0, 0, -T::one());
            for a in 0..s_bands {
                if row_used[a] {
                    continue;
                }
                for b in 0..s_bands {
                    if col_used[b] {
                        continue;
                    }
                    if mags[a][b] > best {
                        best = mags[a][b];
                        best_a = a;
                        best_b = b;
                    }
                }
            }
            // second-best continuation available for the same row
            let mut second = -T::one();
            for b in 0..s_bands {
                if b != best_b && !col_used[b] {
                    second = second.max(mags[best_a][b]);
                }
            }
            if second >= T::zero() && best - second < rf(1e-3) {
                ambiguities.push(MatchAmbiguity {
                    j,
                    s: best_a + 1,
                    margin: to_f64(best - second),
                });
            }
            assign[best_a] = best_b;
            row_used[best_a] = true;
            col_used[best_b] = true;
        }
        assignment.push(assign);
    }
    // compose permutations into branch trajectories
    let mut idx: Vec<usize> = (0..s_bands).collect();
    let mut bands = vec![vec![T::zero(); nj]; s_bands];
    let mut vectors = Vec::with_capacity(nj);
    for j in 0..nj {
        let dim = samples[j].vectors.nrows();
        let mut cols = DMatrix::zeros(dim, s_bands);
        for b in 0..s_bands {
            bands[b][j] = samples[j].eigenvalues[idx[b]];
            cols.set_column(b, &samples[j].vectors.column(idx[b]));
        }
        vectors.push(cols);
        if j + 1 < nj {
            for b in 0..s_bands {
                idx[b] = assignment[j][idx[b]];
            }
        }
    }
    Ok(BandStructure {
        kx: solver.kx(),
        kgrid: kgrid.to_vec(),
        bands,
        vectors,
        basis: solver.basis().clone(),
        ambiguities,
    })
}

/// A spectral gap (μ₀, μ₁) of L₀(k_x): μ₀ = sup of band s′−1, μ₁ = inf of
/// band s′ (1-based s′).
#[derive(Debug, Clone, Copy)]
pub struct Gap<T> {
    pub mu0: T,
    pub mu1: T,
    pub s_prime: usize,
}

impl<T: Real> Gap<T> {
    pub fn width(&self) -> T {
        self.mu1 - self.mu0
    }

    pub fn contains(&self, lambda: T) -> bool {
        lambda > self.mu0 && lambda < self.mu1
    }

    pub fn midpoint(&self) -> T {
        (self.mu0 + self.mu1) * rf(0.5)
    }
}

/// Vertex of the parabola through three consecutive samples; falls back to
/// the middle value when the data is locally flat.
fn quadratic_vertex<T: Real>(k: [T; 3], v: [T; 3]) -> (T, T) {
    let h = k[1] - k[0];
    let denom = v[0] - rf::<T>(2.0) * v[1] + v[2];
    if denom.abs() < rf::<T>(1e-300) {
        return (k[1], v[1]);
    }
    let delta = (v[0] - v[2]) * h / (rf::<T>(2.0) * denom);
    let vertex_v = v[1] - (v[0] - v[2]) * (v[0] - v[2]) / (rf::<T>(8.0) * denom);
    if delta.abs() > h {
        // parabola vertex outside the stencil: keep the sampled value
        (k[1], v[1])
    } else {
        (k[1] + delta, vertex_v)
    }
}

/// Band extremum over the grid with 3-point quadratic refinement (wrap-aware
/// at the zone boundary).
fn refined_extremum<T: Real>(kgrid: &[T], vals: &[T], maximize: bool) -> (T, T) {
    let nj = kgrid.len();
    let cmp = |a: T, b: T| if maximize { a > b } else { a < b };
    let mut jbest = 0;
    for j in 1..nj {
        if cmp(vals[j], vals[jbest]) {
            jbest = j;
        }
    }
    if jbest > 0 && jbest + 1 < nj {
        quadratic_vertex(
            [kgrid[jbest - 1], kgrid[jbest], kgrid[jbest + 1]],
            [vals[jbest - 1], vals[jbest], vals[jbest + 1]],
        )
    } else {
        // extremum at ±π: both endpoints represent the same physical point,
        // so the wrapped neighbor supplies the mirrored stencil value
        let (km, vm, kp, vp) = if jbest == 0 {
            (
                kgrid[nj - 2] - rf::<T>(2.0) * T::pi(),
                vals[nj - 2],
                kgrid[1],
                vals[1],
            )
        } else {
            (
                kgrid[jbest - 1],
                vals[jbest - 1],
                kgrid[1] + rf::<T>(2.0) * T::pi(),
                vals[1],
            )
        };
        quadratic_vertex([km, kgrid[jbest], kp], [vm, vals[jbest], vp])
    }
}

/// Detect spectral gaps between consecutive sorted bands (gaps of the union
/// of branches). Extrema are refined by local quadratic interpolation; a gap
/// is emitted when μ₁ − μ₀ > gap_tol_rel·max(1, |μ₁|) and μ₀ > 0.
pub fn find_gaps<T: Real>(bs: &BandStructure<T>, gap_tol_rel: T) -> Vec<Gap<T>> {
    let sorted = bs.sorted_bands();
    let mut gaps = Vec::new();
    for sp in 1..bs.n_bands() {
        let (_, mu0) = refined_extremum(&bs.kgrid, &sorted[sp - 1], true);
        let (_, mu1) = refined_extremum(&bs.kgrid, &sorted[sp], false);
        let scale = T::one().max(mu1.abs());
        if mu1 - mu0 > gap_tol_rel * scale && mu0 > T::zero() {
            gaps.push(Gap {
                mu0,
                mu1,
                s_prime: sp + 1,
            });
        }
    }
    gaps
}

/// Band-edge touch point of the gap's upper band: the minimizer k_p, the
/// (even) vanishing order m_p of λ − μ₁, and the leading coefficient
/// g_p(k_p) > 0, together with the even-polynomial fit used downstream by
/// the analytic continuation.
#[derive(Debug, Clone)]
pub struct EdgeTouch<T> {
    /// Touching band, 1-based.
    pub s0: usize,
    pub kp: T,
    /// Order of the first non-vanishing derivative (= 2·index of the first
    /// significant fit coefficient); even by construction, capped at 8.
    pub mp: usize,
    /// g_p(k_p): the coefficient of (k−k_p)^{m_p}.
    pub gp: T,
    /// Half-width of the fit window.
    pub fit_radius: T,
    /// Edge value μ₁ the fit is anchored to.
    pub mu_edge: T,
    /// Unscaled coefficients c_d of Σ c_d (k−k_p)^d for d = mp..=8
    /// (consecutive degrees; odd entries vanish at symmetry points).
    pub coeffs: Vec<T>,
    /// RMS fit residual over the window.
    pub fit_residual: T,
}

impl<T: Real> EdgeTouch<T> {
    /// λ_fit(k) = μ₁ + (k−k_p)^{m_p} g_p(k), analytic in k.
    pub fn lambda_fit(&self, k: Cplx<T>) -> Cplx<T> {
        let dk = k - Cplx::new(self.kp, T::zero());
        let mut acc = Cplx::new(self.mu_edge, T::zero());
        for (i, &b) in self.coeffs.iter().enumerate() {
            acc += cpowi(dk, self.mp + i) * b;
        }
        acc
    }

    /// λ_fit′(k).
    pub fn lambda_fit_deriv(&self, k: Cplx<T>) -> Cplx<T> {
        let dk = k - Cplx::new(self.kp, T::zero());
        let mut acc = Cplx::new(T::zero(), T::zero());
        for (i, &b) in self.coeffs.iter().enumerate() {
            let pow = self.mp + i;
            acc += cpowi(dk, pow - 1) * (b * rf::<T>(pow as f64));
        }
        acc
    }

    /// g_p(k) = Σ_d c_d (k−k_p)^{d−m_p}: analytic, g_p(k_p) = gp.
    pub fn g_poly(&self, k: Cplx<T>) -> Cplx<T> {
        let dk = k - Cplx::new(self.kp, T::zero());
        let mut acc = Cplx::new(T::zero(), T::zero());
        for (i, &b) in self.coeffs.iter().enumerate() {
            acc += cpowi(dk, i) * b;
        }
        acc
    }

    /// g_p′(k).
    pub fn g_poly_deriv(&self, k: Cplx<T>) -> Cplx<T> {
        let dk = k - Cplx::new(self.kp, T::zero());
        let mut acc = Cplx::new(T::zero(), T::zero());
        for (i, &b) in self.coeffs.iter().enumerate().skip(1) {
            acc += cpowi(dk, i - 1) * (b * rf::<T>(i as f64));
        }
        acc
    }
}

/// Options for touch-point location and fitting.
#[derive(Debug, Clone, Copy)]
pub struct TouchOptions<T> {
    /// Candidate minima within edge_tol_rel·(1+|μ₁|) of μ₁ count as touches.
    pub edge_tol_rel: T,
    /// Fit window half-width; shrunk automatically to keep windows of
    /// distinct touch points disjoint.
    pub fit_radius: T,
    /// Scaled coefficients below max(noise_rel·(1+|μ₁|), 10·rms) are treated
    /// as zero when determining m_p.
    pub noise_rel: T,
    /// RMS fit residual ceiling, relative to 1+|μ₁|.
    pub max_residual_rel: T,
}

impl<T: Real> Default for TouchOptions<T> {
    fn default() -> Self {
        TouchOptions {
            edge_tol_rel: rf(1e-5),
            fit_radius: rf(0.45),
            noise_rel: rf(1e-6),
            max_residual_rel: rf(1e-5),
        }
    }
}

/// Locate all touch points of the gap's upper band: every local minimizer of
/// λ_{s′} within tolerance of μ₁, each with an even-polynomial fit of degree
/// ≤ 8 on a window of half-width R.
pub fn locate_touchpoints<T: Real>(
    bs: &BandStructure<T>,
    gap: &Gap<T>,
    opts: &TouchOptions<T>,
) -> Result<Vec<EdgeTouch<T>>> {
    let s0 = gap.s_prime;
    // near its minimizers the sorted band coincides with the analytic
    // branch, which is exactly the data the local fit needs
    let sorted = bs.sorted_bands();
    let vals = &sorted[s0 - 1];
    let kgrid = &bs.kgrid;
    let nj = kgrid.len();
    let edge_tol = opts.edge_tol_rel * (T::one() + gap.mu1.abs());

    // candidate local minimizers (wrap-aware at ±π); the edge test uses the
    // refined vertex value because grid samples at a touching minimizer sit
    // O(Δk²·g_p) above μ₁
    let mut cand: Vec<(usize, T, T)> = Vec::new();
    for j in 0..nj {
        let prev = if j == 0 { vals[nj - 2] } else { vals[j - 1] };
        let next = if j + 1 == nj { vals[1] } else { vals[j + 1] };
        if vals[j] <= prev && vals[j] <= next {
            if j == nj - 1 && cand.iter().any(|c| c.0 == 0) {
                continue; // ±π are the same physical point
            }
            let (kp, vkp) = if j > 0 && j + 1 < nj {
                quadratic_vertex(
                    [kgrid[j - 1], kgrid[j], kgrid[j + 1]],
                    [vals[j - 1], vals[j], vals[j + 1]],
                )
            } else {
                (kgrid[j], vals[j])
            };
            if vkp - gap.mu1 <= edge_tol {
                cand.push((j, kp, vkp));
            }
        }
    }
    if cand.is_empty() {
        return Err(Error::FitResidual(
            "no touching minimizer found near the gap edge".into(),
        ));
    }

    let mut touches = Vec::new();
    for &(j, kp, vkp) in &cand {
        let _ = j;
        // fit window: keep windows of distinct touch points disjoint
        let mut radius = opts.fit_radius;
        for &(_, kpo, _) in &cand {
            let d = (kpo - kp).abs() * rf(0.5);
            if d > T::zero() {
                radius = radius.min(d);
            }
        }
        let window: Vec<usize> = (0..nj)
            .filter(|&jj| (kgrid[jj] - kp).abs() <= radius)
            .collect();
        if window.len() < 8 {
            return Err(Error::FitResidual(format!(
                "touch-point window at k_p = {} holds only {} grid points; increase J",
                to_f64(kp),
                window.len()
            )));
        }
        let touch = fit_touch(kgrid, vals, &window, kp, vkp, s0, radius, opts)?;
        touches.push(touch);
    }
    Ok(touches)
}

#[allow(clippy::too_many_arguments)]
fn fit_touch<T: Real>(
    kgrid: &[T],
    vals: &[T],
    window: &[usize],
    kp0: T,
    mu_edge0: T,
    s0: usize,
    radius: T,
    opts: &TouchOptions<T>,
) -> Result<EdgeTouch<T>> {
    // full polynomial in (k − k_p)/R up to degree 8; the leading order must
    // come out even (minimum), but g_p itself carries odd terms away from
    // symmetry points
    let fit = |kp: T, mu_edge: T, first_deg: usize| -> (Vec<T>, T) {
        poly_fit(kgrid, vals, window, radius, kp, mu_edge, first_deg)
    };

    // correct the anchors: the quadratic-vertex estimates of (k_p, μ₁-value)
    // carry O(Δk³) contamination that a constrained fit would smear into the
    // leading coefficients, so pre-fit constant and linear terms and absorb
    // them
    let mut kp = kp0;
    let mut mu_edge = mu_edge0;
    for _ in 0..2 {
        let (free, _) = fit(kp, mu_edge, 0);
        mu_edge += free[0];
        if free[2].abs() > rf::<T>(1e-12) && free[1].abs() > rf::<T>(1e-6) * free[2].abs() {
            kp -= rf::<T>(0.5) * free[1] * radius / free[2];
        }
    }

    let (scaled, rms) = fit(kp, mu_edge, 1);
    let noise = (opts.noise_rel * (T::one() + mu_edge.abs())).max(rf::<T>(10.0) * rms);
    let first_idx = scaled.iter().position(|b| b.abs() > noise).ok_or_else(|| {
        Error::FitResidual(format!(
            "no significant coefficient at k_p = {}; increase J or N",
            to_f64(kp)
        ))
    })?;
    let mp = first_idx + 1;
    if mp % 2 != 0 {
        return Err(Error::FitResidual(format!(
            "leading order {mp} at k_p = {} is odd; minimizer estimate unreliable, increase J",
            to_f64(kp)
        )));
    }
    // refit with the sub-noise leading terms removed
    let (scaled, rms) = if mp > 1 {
        fit(kp, mu_edge, mp)
    } else {
        (scaled, rms)
    };
    if rms > opts.max_residual_rel * (T::one() + mu_edge.abs()) {
        return Err(Error::FitResidual(format!(
            "rms residual {} at k_p = {}; increase J or N",
            to_f64(rms),
            to_f64(kp)
        )));
    }
    // unscale: c_d = c'_d / R^d for degrees d = mp..=8
    let mut coeffs = Vec::with_capacity(scaled.len());
    for (i, &b) in scaled.iter().enumerate() {
        let pow = mp + i;
        let mut scale = T::one();
        for _ in 0..pow {
            scale *= radius;
        }
        coeffs.push(b / scale);
    }
    let gp = coeffs[0];
    if gp <= T::zero() {
        return Err(Error::FitResidual(format!(
            "leading coefficient g_p = {} is not positive at k_p = {}",
            to_f64(gp),
            to_f64(kp)
        )));
    }
    Ok(EdgeTouch {
        s0,
        kp,
        mp,
        gp,
        fit_radius: radius,
        mu_edge,
        coeffs,
        fit_residual: rms,
    })
}

/// Least-squares fit of vals − μ₁ by Σ_{d≥first_deg} c_d u^d, u = (k−k_p)/R,
/// up to degree 8; returns scaled coefficients and the RMS residual.
fn poly_fit<T: Real>(
    kgrid: &[T],
    vals: &[T],
    window: &[usize],
    radius: T,
    kp: T,
    mu_edge: T,
    first_deg: usize,
) -> (Vec<T>, T) {
    const MAX_DEG: usize = 8;
    let nterms = MAX_DEG + 1 - first_deg;
    let npts = window.len();
    let mut a = DMatrix::<T>::zeros(npts, nterms);
    let mut rhs = DVector::<T>::zeros(npts);
    for (r, &jj) in window.iter().enumerate() {
        let u = (kgrid[jj] - kp) / radius;
        let mut p = T::one();
        for _ in 0..first_deg {
            p *= u;
        }
        for c in 0..nterms {
            a[(r, c)] = p;
            p *= u;
        }
        rhs[r] = vals[jj] - mu_edge;
    }
    let svd = a.clone().svd(true, true);
    let sol = svd.solve(&rhs, rf(1e-13)).expect("least squares");
    let fitted = &a * &sol;
    let mut rss = T::zero();
    for r in 0..npts {
        let d = fitted[r] - rhs[r];
        rss += d * d;
    }
    let rms = (rss / rf(npts as f64)).sqrt();
    (sol.iter().cloned().collect(), rms)
}

/// Thomas-argument sanity check: no computed band may be constant. Returns
/// one flag per band, true when the band varies as it must.
pub fn nonconstancy_check<T: Real>(bs: &BandStructure<T>) -> Vec<bool> {
    bs.bands
        .iter()
        .map(|row| {
            let mut lo = row[0];
            let mut hi = row[0];
            let mut amax = T::zero();
            for &v in row {
                lo = lo.min(v);
                hi = hi.max(v);
                amax = amax.max(v.abs());
            }
            hi - lo > rf::<T>(1e-8) * (T::one() + amax)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{DielectricProfile, Rect};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn free_solver(kx: f64, n: usize, s: usize) -> CellSolver<f64> {
        let p = DielectricProfile::new(1.0, vec![], vec![], 0.0).unwrap();
        CellSolver::new(&p, kx, n, s).unwrap()
    }

    fn rod_profile() -> DielectricProfile<f64> {
        DielectricProfile::new(
            1.0,
            vec![Rect { x0: 0.25, x1: 0.75, y0: 0.25, y1: 0.75, value: 9.0 }],
            vec![],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn free_band_values_match_symbols() {
        let solver = free_solver(0.0, 3, 6);
        let bs = sweep(&solver, 33).unwrap();
        for (j, &k) in bs.kgrid.iter().enumerate() {
            let mut symbols: Vec<f64> = Vec::new();
            for n in -3..=3i64 {
                for m in -3..=3i64 {
                    symbols
                        .push((2.0 * PI * n as f64).powi(2) + (2.0 * PI * m as f64 + k).powi(2));
                }
            }
            symbols.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut got: Vec<f64> = (0..6).map(|s| bs.bands[s][j]).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for s in 0..6 {
                assert_relative_eq!(got[s], symbols[s], epsilon = 1e-8, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_profile_bands_even_in_k() {
        let solver = CellSolver::new(&rod_profile(), 0.0, 4, 4).unwrap();
        let bs = sweep(&solver, 33).unwrap();
        let nj = bs.kgrid.len();
        for s in 0..4 {
            for j in 0..nj {
                let diff = (bs.bands[s][j] - bs.bands[s][nj - 1 - j]).abs();
                assert!(diff < 1e-9 * (1.0 + bs.bands[s][j].abs()));
            }
        }
    }

    #[test]
    fn crossing_matched_into_smooth_parabolas() {
        // the (0,±1) branches (2πm+k)² + kx² cross at k = 0; overlap
        // matching must continue each branch smoothly through the crossing
        // instead of following the sorted min/max envelope
        let kx = 0.3;
        let solver = free_solver(kx, 3, 7);
        let bs = sweep(&solver, 65).unwrap();
        let branch_plus = |k: f64| (2.0 * PI + k).powi(2) + kx * kx;
        // identify the ascending branch at k ≈ -2
        let jm = bs
            .kgrid
            .iter()
            .position(|&k| (k - (-2.0)).abs() < 0.06)
            .unwrap();
        let want = branch_plus(bs.kgrid[jm]);
        let row = (0..bs.n_bands())
            .min_by(|&a, &b| {
                (bs.bands[a][jm] - want)
                    .abs()
                    .partial_cmp(&(bs.bands[b][jm] - want).abs())
                    .unwrap()
            })
            .unwrap();
        // ... and require it to track (2π+k)² + kx² through k = 0 up to +2,
        // where the sorted envelope would have switched to (2π−k)² + kx²
        for (j, &k) in bs.kgrid.iter().enumerate() {
            if k.abs() <= 2.0 {
                let err = (bs.bands[row][j] - branch_plus(k)).abs();
                assert!(err < 1e-8, "branch broke at k = {k}: err = {err:.3e}");
            }
        }
    }

    #[test]
    fn matching_is_permutation_per_k() {
        let solver = CellSolver::new(&rod_profile(), PI, 4, 6).unwrap();
        let bs = sweep(&solver, 33).unwrap();
        for j in 0..bs.kgrid.len() {
            let sample = solver.solve(bs.kgrid[j]).unwrap();
            let mut matched: Vec<f64> = (0..6).map(|s| bs.bands[s][j]).collect();
            matched.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for s in 0..6 {
                assert_relative_eq!(matched[s], sample.eigenvalues[s], max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn free_space_has_no_gaps() {
        let solver = free_solver(0.0, 3, 8);
        let bs = sweep(&solver, 65).unwrap();
        assert!(find_gaps(&bs, 1e-6).is_empty());
    }

    #[test]
    fn rod_profile_gap_at_kx_pi() {
        let solver = CellSolver::new(&rod_profile(), PI, 6, 4).unwrap();
        let bs = sweep(&solver, 65).unwrap();
        let gaps = find_gaps(&bs, 1e-6);
        assert!(!gaps.is_empty());
        let g = &gaps[0];
        assert_eq!(g.s_prime, 2);
        assert!(g.mu0 > 2.8 && g.mu0 < 3.1, "mu0 = {}", g.mu0);
        assert!(g.mu1 > 4.7 && g.mu1 < 5.0, "mu1 = {}", g.mu1);
    }

    #[test]
    fn touchpoint_of_exact_parabola() {
        // synthetic band λ(k) = k² near 0 grafted onto a sweep skeleton
        let solver = free_solver(0.0, 3, 2);
        let mut bs = sweep(&solver, 65).unwrap();
        let kgrid = bs.kgrid.clone();
        bs.bands[1] = kgrid.iter().map(|&k| 4.0 + k * k).collect();
        bs.bands[0] = kgrid.iter().map(|_| 1.0).collect();
        let gap = Gap { mu0: 1.0, mu1: 4.0, s_prime: 2 };
        let touches = locate_touchpoints(&bs, &gap, &TouchOptions::default()).unwrap();
        assert_eq!(touches.len(), 1);
        let t = &touches[0];
        assert_relative_eq!(t.kp, 0.0, epsilon = 1e-12);
        assert_eq!(t.mp, 2);
        assert_relative_eq!(t.gp, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn quartic_touch_detected() {
        let solver = free_solver(0.0, 3, 2);
        let mut bs = sweep(&solver, 129).unwrap();
        let kgrid = bs.kgrid.clone();
        bs.bands[1] = kgrid.iter().map(|&k| 4.0 + 0.7 * k.powi(4)).collect();
        bs.bands[0] = kgrid.iter().map(|_| 1.0).collect();
        let gap = Gap { mu0: 1.0, mu1: 4.0, s_prime: 2 };
        let touches = locate_touchpoints(&bs, &gap, &TouchOptions::default()).unwrap();
        assert_eq!(touches.len(), 1);
        assert_eq!(touches[0].mp, 4);
        assert_relative_eq!(touches[0].gp, 0.7, max_relative = 1e-8);
    }

    #[test]
    fn symmetric_touches_come_in_pairs() {
        let solver = free_solver(0.0, 3, 2);
        let mut bs = sweep(&solver, 129).unwrap();
        let kgrid = bs.kgrid.clone();
        // two symmetric minima at ±1.1
        bs.bands[1] = kgrid
            .iter()
            .map(|&k| 4.0 + 0.5 * ((k * k - 1.21) / 2.0).powi(2))
            .collect();
        bs.bands[0] = kgrid.iter().map(|_| 1.0).collect();
        let gap = Gap { mu0: 1.0, mu1: 4.0, s_prime: 2 };
        let opts = TouchOptions { edge_tol_rel: 1e-4, ..TouchOptions::default() };
        let touches = locate_touchpoints(&bs, &gap, &opts).unwrap();
        assert_eq!(touches.len(), 2);
        assert_relative_eq!(touches[0].kp, -touches[1].kp, epsilon = 1e-6);
        assert_eq!(touches[0].mp, 2);
        // gp = λ''(k_p)/2 = k_p² / 2 for this synthetic band
        assert_relative_eq!(touches[0].gp, 0.605, max_relative = 1e-3);
    }

    #[test]
    fn nonconstancy_flags_constant_column() {
        let solver = free_solver(0.0, 3, 3);
        let mut bs = sweep(&solver, 33).unwrap();
        let flags = nonconstancy_check(&bs);
        assert!(flags.iter().all(|&f| f));
        bs.bands[1] = bs.kgrid.iter().map(|_| 7.5).collect();
        let flags = nonconstancy_check(&bs);
        assert!(flags[0] && !flags[1] && flags[2]);
    }

    #[test]
    fn csv_shape_and_determinism() {
        let solver = free_solver(0.0, 3, 2);
        let bs = sweep(&solver, 33).unwrap();
        let mut buf1 = Vec::new();
        bs.write_csv(&mut buf1).unwrap();
        let mut buf2 = Vec::new();
        bs.write_csv(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
        let text = String::from_utf8(buf1).unwrap();
        assert!(text.starts_with("k,s,lambda\n"));
        assert_eq!(text.lines().count(), 1 + 33 * 2);
    }
}

//! Piecewise-constant dielectric data: the periodic background ε₀, the defect
//! perturbation ε₁ = α·ε̃ supported in the waveguide row, exact extremal
//! bounds, and closed-form Fourier/weighted-exponential tables feeding the
//! spectral discretization.

use crate::error::Error;
use crate::{rf, Cplx, Real, Result};

/// Axis-aligned rectangle with a constant dielectric value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
    pub value: T,
}

/// Which dielectric field to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Eps0,
    Eps1,
    Total,
}

/// Sign pattern of the defect ε₁ over its support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectSign {
    Zero,
    NonNegative,
    NonPositive,
    Indefinite,
}

/// Open rectangle of an arrangement on which the data is constant.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PwcCell<T> {
    pub x0: T,
    pub x1: T,
    pub y0: T,
    pub y1: T,
    pub value: T,
}

/// Exact extremal values of the profile.
#[derive(Debug, Clone, Copy)]
pub struct Bounds<T> {
    pub inf_eps0: T,
    pub sup_eps0: T,
    /// ‖ε₁‖_∞ = α·max|ε̃| over the cell row.
    pub norm_inf_eps1: T,
    pub inf_total: T,
}

/// Piecewise-constant periodic dielectric ε₀ plus a defect ε₁ = α·ε̃ on the
/// cell row W = ℝ×(0,1), 1-periodic in x.
///
/// ε₀ is defined on the unit cell by `background` overridden by
/// `inclusions0` (later entries win) and extended 1-periodically in x and y.
/// ε̃ is defined by `inclusions1` on the cell row and extended 1-periodically
/// in x only; it vanishes for y outside [0,1]. The global scale α multiplies
/// ε̃ so perturbation-strength sweeps never rebuild geometry.
///
/// Immutable after construction; all queries are pure.
#[derive(Debug, Clone)]
pub struct DielectricProfile<T> {
    background: T,
    inclusions0: Vec<Rect<T>>,
    inclusions1: Vec<Rect<T>>,
    alpha: T,
}

impl<T: Real> DielectricProfile<T> {
    pub fn new(
        background: T,
        inclusions0: Vec<Rect<T>>,
        inclusions1: Vec<Rect<T>>,
        alpha: T,
    ) -> Result<Self> {
        if background <= T::zero() {
            return Err(Error::InvalidProfile("background must be positive".into()));
        }
        if alpha < T::zero() {
            return Err(Error::InvalidProfile("alpha must be nonnegative".into()));
        }
        for (name, rects) in [("inclusions0", &inclusions0), ("inclusions1", &inclusions1)] {
            for r in rects.iter() {
                let in_unit = r.x0 >= T::zero()
                    && r.x1 <= T::one()
                    && r.y0 >= T::zero()
                    && r.y1 <= T::one();
                if !(in_unit && r.x0 < r.x1 && r.y0 < r.y1) {
                    return Err(Error::InvalidProfile(format!(
                        "{name}: rectangles must satisfy 0 <= x0 < x1 <= 1, 0 <= y0 < y1 <= 1"
                    )));
                }
            }
        }
        for r in &inclusions0 {
            if r.value <= T::zero() {
                return Err(Error::InvalidProfile(
                    "inclusions0 values must be positive".into(),
                ));
            }
        }
        let p = DielectricProfile {
            background,
            inclusions0,
            inclusions1,
            alpha,
        };
        let b = p.bounds();
        if b.inf_eps0 <= T::zero() {
            return Err(Error::InvalidProfile("inf eps0 must be positive".into()));
        }
        if b.inf_total <= T::zero() {
            return Err(Error::InvalidProfile(
                "inf (eps0 + alpha*eps1) must be positive".into(),
            ));
        }
        Ok(p)
    }

    pub fn background(&self) -> T {
        self.background
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn inclusions1(&self) -> &[Rect<T>] {
        &self.inclusions1
    }

    /// Same geometry with a different defect scale α.
    pub fn with_alpha(&self, alpha: T) -> Result<Self> {
        Self::new(
            self.background,
            self.inclusions0.clone(),
            self.inclusions1.clone(),
            alpha,
        )
    }

    /// Pointwise dielectric value. ε₀ wraps both coordinates into the unit
    /// cell; ε₁ wraps x only and vanishes for y outside [0,1]. Overlapping
    /// rectangles resolve last-listed-wins; containment is closed.
    pub fn eval(&self, which: Field, x: T, y: T) -> T {
        match which {
            Field::Eps0 => self.eval0(x, y),
            Field::Eps1 => self.alpha * self.eval_tilde(x, y),
            Field::Total => self.eval0(x, y) + self.alpha * self.eval_tilde(x, y),
        }
    }

    fn eval0(&self, x: T, y: T) -> T {
        let xw = x - x.floor();
        let yw = y - y.floor();
        let mut v = self.background;
        for r in &self.inclusions0 {
            if xw >= r.x0 && xw <= r.x1 && yw >= r.y0 && yw <= r.y1 {
                v = r.value;
            }
        }
        v
    }

    /// ε̃ (unscaled defect), supported in the cell row 0 ≤ y ≤ 1.
    fn eval_tilde(&self, x: T, y: T) -> T {
        if y < T::zero() || y > T::one() {
            return T::zero();
        }
        let xw = x - x.floor();
        let mut v = T::zero();
        for r in &self.inclusions1 {
            if xw >= r.x0 && xw <= r.x1 && y >= r.y0 && y <= r.y1 {
                v = r.value;
            }
        }
        v
    }

    /// Exact extremal values over the piecewise-constant partition.
    pub fn bounds(&self) -> Bounds<T> {
        let a0 = self.arrangement(Field::Eps0);
        let (mut inf0, mut sup0) = (a0[0].value, a0[0].value);
        for c in &a0 {
            inf0 = inf0.min(c.value);
            sup0 = sup0.max(c.value);
        }
        let at = self.arrangement(Field::Eps1);
        let mut max_abs_tilde = T::zero();
        for c in &at {
            max_abs_tilde = max_abs_tilde.max(c.value.abs());
        }
        let atot = self.arrangement(Field::Total);
        let mut inf_tot = inf0; // value of ε outside the defect row
        for c in &atot {
            inf_tot = inf_tot.min(c.value);
        }
        Bounds {
            inf_eps0: inf0,
            sup_eps0: sup0,
            norm_inf_eps1: self.alpha * max_abs_tilde,
            inf_total: inf_tot,
        }
    }

    /// Sign pattern of ε₁ over its support (α already folded in: α = 0 gives
    /// `Zero`).
    pub fn defect_sign(&self) -> DefectSign {
        if self.alpha == T::zero() {
            return DefectSign::Zero;
        }
        let cells = self.arrangement(Field::Eps1);
        let mut pos = false;
        let mut neg = false;
        for c in &cells {
            if c.value > T::zero() {
                pos = true;
            }
            if c.value < T::zero() {
                neg = true;
            }
        }
        match (pos, neg) {
            (false, false) => DefectSign::Zero,
            (true, false) => DefectSign::NonNegative,
            (false, true) => DefectSign::NonPositive,
            (true, true) => DefectSign::Indefinite,
        }
    }

    /// c_{nm} = ∫_{[0,1]²} ε e^{-2πi(nx+my)} dx dy for |n|,|m| ≤ 2N, exact.
    pub fn fourier_coeffs(&self, which: Field, cutoff: usize) -> CoefficientTable<T> {
        assert!(cutoff >= 1, "cutoff must be >= 1");
        let cells = self.arrangement(which);
        let max_index = 2 * cutoff;
        CoefficientTable::from_cells(&cells, max_index)
    }

    /// Piecewise-constant arrangement of the requested field on the unit
    /// cell: breakpoints from all relevant rectangles, one constant value per
    /// open cell.
    pub(crate) fn arrangement(&self, which: Field) -> Vec<PwcCell<T>> {
        let mut xs: Vec<T> = vec![T::zero(), T::one()];
        let mut ys: Vec<T> = vec![T::zero(), T::one()];
        let lists: &[&[Rect<T>]] = match which {
            Field::Eps0 => &[&self.inclusions0],
            Field::Eps1 => &[&self.inclusions1],
            Field::Total => &[&self.inclusions0, &self.inclusions1],
        };
        for list in lists {
            for r in list.iter() {
                xs.extend([r.x0, r.x1]);
                ys.extend([r.y0, r.y1]);
            }
        }
        for v in [&mut xs, &mut ys] {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() < rf(1e-14));
        }
        let mut cells = Vec::with_capacity((xs.len() - 1) * (ys.len() - 1));
        let half = rf::<T>(0.5);
        for i in 0..xs.len() - 1 {
            for j in 0..ys.len() - 1 {
                let xm = (xs[i] + xs[i + 1]) * half;
                let ym = (ys[j] + ys[j + 1]) * half;
                let value = match which {
                    Field::Eps0 => self.eval0(xm, ym),
                    Field::Eps1 => self.eval_tilde(xm, ym),
                    Field::Total => self.eval0(xm, ym) + self.alpha * self.eval_tilde(xm, ym),
                };
                cells.push(PwcCell {
                    x0: xs[i],
                    x1: xs[i + 1],
                    y0: ys[j],
                    y1: ys[j + 1],
                    value,
                });
            }
        }
        cells
    }

    /// Cells carrying √(ε₀·|ε₁|) over supp ε̃ (zero value cells dropped),
    /// together with the defect sign. Used for the Birman–Schwinger factor
    /// √(±ε₁/ε₀) in the ε₀-weighted inner product.
    pub(crate) fn sqrt_defect_cells(&self) -> (Vec<PwcCell<T>>, DefectSign) {
        let sign = self.defect_sign();
        let total = self.merged_defect_cells();
        let cells = total
            .iter()
            .filter(|(_, _, tilde)| *tilde != T::zero())
            .map(|&(cell, eps0, tilde)| PwcCell {
                value: (eps0 * self.alpha * tilde.abs()).sqrt(),
                ..cell
            })
            .collect();
        (cells, sign)
    }

    /// Cells carrying ε₀ restricted to supp ε̃ (the defect-basis Gram weight).
    pub(crate) fn support_eps0_cells(&self) -> Vec<PwcCell<T>> {
        self.merged_defect_cells()
            .iter()
            .filter(|(_, _, tilde)| *tilde != T::zero())
            .map(|&(cell, eps0, _)| PwcCell { value: eps0, ..cell })
            .collect()
    }

    /// Merged arrangement of (ε₀, ε̃) on the unit cell.
    fn merged_defect_cells(&self) -> Vec<(PwcCell<T>, T, T)> {
        let mut xs: Vec<T> = vec![T::zero(), T::one()];
        let mut ys: Vec<T> = vec![T::zero(), T::one()];
        for list in [&self.inclusions0, &self.inclusions1] {
            for r in list.iter() {
                xs.extend([r.x0, r.x1]);
                ys.extend([r.y0, r.y1]);
            }
        }
        for v in [&mut xs, &mut ys] {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() < rf(1e-14));
        }
        let half = rf::<T>(0.5);
        let mut out = Vec::new();
        for i in 0..xs.len() - 1 {
            for j in 0..ys.len() - 1 {
                let xm = (xs[i] + xs[i + 1]) * half;
                let ym = (ys[j] + ys[j + 1]) * half;
                out.push((
                    PwcCell {
                        x0: xs[i],
                        x1: xs[i + 1],
                        y0: ys[j],
                        y1: ys[j + 1],
                        value: T::zero(),
                    },
                    self.eval0(xm, ym),
                    self.eval_tilde(xm, ym),
                ));
            }
        }
        out
    }
}

/// Table of exact Fourier coefficients c_{nm}, |n|,|m| ≤ max_index.
#[derive(Debug, Clone)]
pub struct CoefficientTable<T> {
    max_index: usize,
    data: Vec<Cplx<T>>,
}

impl<T: Real> CoefficientTable<T> {
    fn from_cells(cells: &[PwcCell<T>], max_index: usize) -> Self {
        let k = max_index as i64;
        let two_pi = rf::<T>(2.0) * T::pi();
        let side = 2 * max_index + 1;
        let mut data = vec![Cplx::new(T::zero(), T::zero()); side * side];
        for c in cells {
            // per-cell 1D integrals ∫ e^{-2πint} dt over [a,b]
            let ix: Vec<Cplx<T>> = (-k..=k)
                .map(|n| exp_integral(Cplx::new(T::zero(), -two_pi * rf(n as f64)), c.x0, c.x1))
                .collect();
            let iy: Vec<Cplx<T>> = (-k..=k)
                .map(|m| exp_integral(Cplx::new(T::zero(), -two_pi * rf(m as f64)), c.y0, c.y1))
                .collect();
            for (a, ixa) in ix.iter().enumerate() {
                for (b, iyb) in iy.iter().enumerate() {
                    data[a * side + b] += *ixa * *iyb * c.value;
                }
            }
        }
        CoefficientTable { max_index, data }
    }

    pub fn max_index(&self) -> usize {
        self.max_index
    }

    /// c_{nm}; panics if |n| or |m| exceeds the stored range.
    pub fn get(&self, n: i64, m: i64) -> Cplx<T> {
        let k = self.max_index as i64;
        assert!(n.abs() <= k && m.abs() <= k, "coefficient index out of range");
        let side = 2 * self.max_index + 1;
        self.data[((n + k) as usize) * side + (m + k) as usize]
    }
}

/// ∫_a^b e^{w t} dt for complex w, stable for small |w(b-a)|.
pub(crate) fn exp_integral<T: Real>(w: Cplx<T>, a: T, b: T) -> Cplx<T> {
    let len = b - a;
    let z = w * len;
    if z.norm_sqr() < rf(1e-24) {
        return Cplx::new(len, T::zero()) + w * len * len * rf::<T>(0.5);
    }
    // e^{wa} (e^{w(b-a)} - 1)/w
    cexp(w * a) * cexpm1(z) / w
}

/// e^z for complex z without num_traits::Float bounds.
pub(crate) fn cexp<T: Real>(z: Cplx<T>) -> Cplx<T> {
    let m = z.re.exp();
    Cplx::new(m * z.im.cos(), m * z.im.sin())
}

/// e^z - 1, series branch for small |z| to avoid cancellation.
pub(crate) fn cexpm1<T: Real>(z: Cplx<T>) -> Cplx<T> {
    if z.norm_sqr() < rf(0.0625) {
        // z(1 + z/2(1 + z/3(1 + ...)))
        let mut acc = Cplx::new(T::one(), T::zero());
        for j in (2..=14u32).rev() {
            acc = Cplx::new(T::one(), T::zero()) + acc * z / rf::<T>(f64::from(j));
        }
        acc * z
    } else {
        cexp(z) - Cplx::new(T::one(), T::zero())
    }
}

/// e^{iθ}.
pub(crate) fn cis<T: Real>(theta: T) -> Cplx<T> {
    Cplx::new(theta.cos(), theta.sin())
}

/// Weighted exponential table over arrangement cells:
/// entry(p, q) = Σ_cells v ∫ e^{i2πpx} dx ∫ e^{i(2πq + shift) y} dy,
/// p ∈ [-p_max, p_max], q ∈ [-q_max, q_max], complex y-shift allowed.
///
/// Row-major layout: index (p + p_max)·(2·q_max+1) + (q + q_max).
pub(crate) fn weighted_table<T: Real>(
    cells: &[PwcCell<T>],
    p_max: usize,
    q_max: usize,
    y_shift: Cplx<T>,
) -> Vec<Cplx<T>> {
    let (pk, qk) = (p_max as i64, q_max as i64);
    let two_pi = rf::<T>(2.0) * T::pi();
    let cols = 2 * q_max + 1;
    let mut out = vec![Cplx::new(T::zero(), T::zero()); (2 * p_max + 1) * cols];
    let i_unit = Cplx::new(T::zero(), T::one());
    for c in cells {
        let ix: Vec<Cplx<T>> = (-pk..=pk)
            .map(|p| exp_integral(Cplx::new(T::zero(), two_pi * rf(p as f64)), c.x0, c.x1))
            .collect();
        let iy: Vec<Cplx<T>> = (-qk..=qk)
            .map(|q| {
                exp_integral(
                    i_unit * (Cplx::new(two_pi * rf(q as f64), T::zero()) + y_shift),
                    c.y0,
                    c.y1,
                )
            })
            .collect();
        for (a, ixa) in ix.iter().enumerate() {
            for (b, iyb) in iy.iter().enumerate() {
                out[a * cols + b] += *ixa * *iyb * c.value;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square_rod() -> DielectricProfile<f64> {
        DielectricProfile::new(
            1.0,
            vec![Rect { x0: 0.25, x1: 0.75, y0: 0.25, y1: 0.75, value: 9.0 }],
            vec![],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn constant_medium_eval() {
        let p = DielectricProfile::new(1.0, vec![], vec![], 0.0).unwrap();
        assert_eq!(p.eval(Field::Eps0, 0.3, 7.2), 1.0);
    }

    #[test]
    fn point_inside_rectangle() {
        let p = square_rod();
        assert_eq!(p.eval(Field::Eps0, 0.5, 0.5), 9.0);
    }

    #[test]
    fn periodicity_by_construction() {
        let p = square_rod();
        for &(x, y) in &[(0.13, 0.77), (0.5, 0.26), (0.99, 0.01)] {
            assert_eq!(p.eval(Field::Eps0, x + 1.0, y), p.eval(Field::Eps0, x, y));
            assert_eq!(p.eval(Field::Eps0, x, y + 1.0), p.eval(Field::Eps0, x, y));
        }
    }

    #[test]
    fn eps1_vanishes_outside_row() {
        let p = DielectricProfile::new(
            1.0,
            vec![],
            vec![Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0, value: 0.5 }],
            2.0,
        )
        .unwrap();
        assert_eq!(p.eval(Field::Eps1, 0.5, 0.5), 1.0);
        assert_eq!(p.eval(Field::Eps1, 0.5, 1.5), 0.0);
        assert_eq!(p.eval(Field::Eps1, 0.5, -0.25), 0.0);
    }

    #[test]
    fn last_listed_wins() {
        let p = DielectricProfile::new(
            1.0,
            vec![
                Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0, value: 4.0 },
                Rect { x0: 0.25, x1: 0.75, y0: 0.25, y1: 0.75, value: 2.0 },
            ],
            vec![],
            0.0,
        )
        .unwrap();
        assert_eq!(p.eval(Field::Eps0, 0.5, 0.5), 2.0);
        assert_eq!(p.eval(Field::Eps0, 0.1, 0.1), 4.0);
    }

    #[test]
    fn constant_fourier() {
        let p = DielectricProfile::new(4.0, vec![], vec![], 0.0).unwrap();
        let c = p.fourier_coeffs(Field::Eps0, 3);
        assert_relative_eq!(c.get(0, 0).re, 4.0, epsilon = 1e-14);
        assert_relative_eq!(c.get(0, 0).im, 0.0, epsilon = 1e-14);
        assert!(c.get(1, 0).norm() < 1e-14);
        assert!(c.get(-2, 5).norm() < 1e-14);
    }

    #[test]
    fn area_weighted_mean() {
        let p = square_rod();
        let c = p.fourier_coeffs(Field::Eps0, 2);
        assert_relative_eq!(c.get(0, 0).re, 1.0 + 8.0 * 0.25, epsilon = 1e-14);
    }

    #[test]
    fn conjugate_symmetry_exact() {
        let p = DielectricProfile::new(
            1.3,
            vec![
                Rect { x0: 0.1, x1: 0.6, y0: 0.2, y1: 0.9, value: 5.0 },
                Rect { x0: 0.4, x1: 0.8, y0: 0.05, y1: 0.55, value: 2.5 },
            ],
            vec![],
            0.0,
        )
        .unwrap();
        let c = p.fourier_coeffs(Field::Eps0, 4);
        let mut worst = 0.0f64;
        for n in -8..=8i64 {
            for m in -8..=8i64 {
                worst = worst.max((c.get(-n, -m) - c.get(n, m).conj()).norm());
            }
        }
        assert!(worst < 1e-13, "conjugate symmetry residual {worst}");
    }

    #[test]
    fn coefficients_consistent_across_cutoffs() {
        let p = square_rod();
        let c4 = p.fourier_coeffs(Field::Eps0, 4);
        let c8 = p.fourier_coeffs(Field::Eps0, 8);
        for n in -8..=8i64 {
            for m in -8..=8i64 {
                assert!((c4.get(n, m) - c8.get(n, m)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn exact_bounds() {
        let p = square_rod();
        let b = p.bounds();
        assert_eq!(b.inf_eps0, 1.0);
        assert_eq!(b.sup_eps0, 9.0);
        let q = DielectricProfile::new(
            1.0,
            vec![],
            vec![Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0, value: 0.5 }],
            2.0,
        )
        .unwrap();
        assert_eq!(q.bounds().norm_inf_eps1, 1.0);
    }

    #[test]
    fn nonpositive_total_rejected() {
        let bad = DielectricProfile::new(
            1.0,
            vec![],
            vec![Rect { x0: 0.2, x1: 0.8, y0: 0.2, y1: 0.8, value: -1.0 }],
            1.5,
        );
        assert!(matches!(bad, Err(Error::InvalidProfile(_))));
    }

    #[test]
    fn defect_signs() {
        let mk = |v: f64, a: f64| {
            DielectricProfile::new(
                1.0,
                vec![],
                vec![Rect { x0: 0.2, x1: 0.8, y0: 0.2, y1: 0.8, value: v }],
                a,
            )
            .unwrap()
        };
        assert_eq!(mk(1.0, 0.0).defect_sign(), DefectSign::Zero);
        assert_eq!(mk(1.0, 0.3).defect_sign(), DefectSign::NonNegative);
        assert_eq!(mk(-0.5, 0.3).defect_sign(), DefectSign::NonPositive);
        let ind = DielectricProfile::new(
            1.0,
            vec![],
            vec![
                Rect { x0: 0.1, x1: 0.4, y0: 0.2, y1: 0.8, value: 0.5 },
                Rect { x0: 0.6, x1: 0.9, y0: 0.2, y1: 0.8, value: -0.5 },
            ],
            0.3,
        )
        .unwrap();
        assert_eq!(ind.defect_sign(), DefectSign::Indefinite);
    }

    #[test]
    fn truncated_series_converges_pointwise() {
        // reconstruction at a point of continuity improves with the cutoff
        let p = square_rod();
        let (x, y) = (0.5, 0.5);
        let mut prev_err = f64::INFINITY;
        for n in [4usize, 8, 16] {
            let c = p.fourier_coeffs(Field::Eps0, n);
            let k = 2 * n as i64;
            let mut val = Cplx::new(0.0, 0.0);
            for nn in -k..=k {
                for mm in -k..=k {
                    let ph = 2.0 * std::f64::consts::PI * (nn as f64 * x + mm as f64 * y);
                    val += c.get(nn, mm) * Cplx::new(ph.cos(), ph.sin());
                }
            }
            let err = (val.re - 9.0).abs();
            assert!(err < prev_err, "cutoff {n}: error {err} vs {prev_err}");
            prev_err = err;
        }
    }

    #[test]
    fn exp_integral_matches_quadrature() {
        let w = Cplx::new(0.3, -1.7);
        let exact = exp_integral(w, 0.2, 0.9);
        // crude Riemann check
        let nsteps = 200_000;
        let h = 0.7 / nsteps as f64;
        let mut acc = Cplx::new(0.0, 0.0);
        for i in 0..nsteps {
            let t = 0.2 + (i as f64 + 0.5) * h;
            acc += cexp(w * t) * h;
        }
        assert!((exact - acc).norm() < 1e-9);
    }
}

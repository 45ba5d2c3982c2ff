//! Closed-form limit laws and bounds for the high-contrast two-phase media.
//!
//! The planar law takes a field-free effective map `sigma0` and perturbs its
//! second argument: `sigma(h) = sigma0(a1, a2 + b2^2 h^2 / a2) + b1 h J`.
//! For the cross-like thin structure `sigma0` is an explicit diagonal matrix,
//! so the perturbed law has a fully explicit limit. The fiber lattice in
//! space concentrates the excess conductivity on the fiber axis instead.

use crate::error::{GeometryError, TensorError};
use crate::microstructure::PhaseMask;
use crate::tensor::{hall_generator_3d, Mat2, Mat3};

/// Limit constants `(alpha1, beta1, alpha2, beta2)` of a scaled two-phase
/// medium: phase 2 carries `(alpha2/theta, beta2/theta)` at volume fraction
/// `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitPhases {
    alpha1: f64,
    beta1: f64,
    alpha2: f64,
    beta2: f64,
}

impl LimitPhases {
    pub fn new(alpha1: f64, beta1: f64, alpha2: f64, beta2: f64) -> Result<Self, TensorError> {
        for (name, v) in [
            ("alpha1", alpha1),
            ("beta1", beta1),
            ("alpha2", alpha2),
            ("beta2", beta2),
        ] {
            if !v.is_finite() {
                return Err(TensorError::InvalidPhase(format!(
                    "{name} must be finite (got {v})"
                )));
            }
        }
        if alpha1 <= 0.0 || alpha2 <= 0.0 {
            return Err(TensorError::InvalidPhase(
                "alpha1 and alpha2 must be > 0".to_string(),
            ));
        }
        Ok(Self {
            alpha1,
            beta1,
            alpha2,
            beta2,
        })
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }
}

/// Cross-bar geometry: half-width `t` in `(0, 1/2]`, aspect `ell >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossGeometry {
    t: f64,
    ell: f64,
}

impl CrossGeometry {
    pub fn new(t: f64, ell: f64) -> Result<Self, GeometryError> {
        if !(t.is_finite() && t > 0.0 && t <= 0.5) {
            return Err(GeometryError::Parameter(format!(
                "bar half-width t must lie in (0, 1/2] (got {t})"
            )));
        }
        if !(ell.is_finite() && ell >= 1.0) {
            return Err(GeometryError::Parameter(format!(
                "cell aspect ell must be >= 1 (got {ell})"
            )));
        }
        Ok(Self { t, ell })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Measure of the cross inside the `ell x 1` cell: `2t(ell+1) - 4t^2`.
    pub fn area(&self) -> f64 {
        2.0 * self.t * (self.ell + 1.0) - 4.0 * self.t * self.t
    }

    /// Fraction of the cell covered by the cross.
    pub fn cell_fraction(&self) -> f64 {
        self.area() / self.ell
    }
}

/// Evaluates the perturbed planar law for a caller-supplied field-free
/// effective map `sigma0(a1, a2)`.
pub fn homogenized_law_2d(sigma0: impl Fn(f64, f64) -> Mat2, phases: &LimitPhases, h: f64) -> Mat2 {
    let shifted = phases.alpha2 + phases.beta2 * phases.beta2 * h * h / phases.alpha2;
    sigma0(phases.alpha1, shifted).add(&Mat2::j().scale(phases.beta1 * h))
}

/// Field-free effective map of the cross structure:
/// `diag(a1 + a2/(ell+1), a1 + a2/(ell(ell+1)))`.
pub fn cross_sigma0(a1: f64, a2: f64, ell: f64) -> Mat2 {
    Mat2::diag(a1 + a2 / (ell + 1.0), a1 + a2 / (ell * (ell + 1.0)))
}

/// Full perturbed limit of the cross structure, including the Hall
/// off-diagonal `-h beta1 J` orientation.
pub fn cross_formula(phases: &LimitPhases, ell: f64, h: f64) -> Mat2 {
    let num = phases.alpha2 * phases.alpha2 + phases.beta2 * phases.beta2 * h * h;
    Mat2::new([
        [
            phases.alpha1 + num / ((ell + 1.0) * phases.alpha2),
            -h * phases.beta1,
        ],
        [
            h * phases.beta1,
            phases.alpha1 + num / (ell * (ell + 1.0) * phases.alpha2),
        ],
    ])
}

/// Discrete nested line-average bounds on the diagonal entry `axis` of the
/// effective tensor of a scalar two-phase raster: harmonic-then-arithmetic
/// from below, arithmetic-then-harmonic from above. The averages follow the
/// element raster exactly, so they bracket the discrete solver by
/// construction.
pub fn voigt_reuss_bounds(
    mask: &PhaseMask,
    a1: f64,
    a2: f64,
    axis: usize,
) -> Result<(f64, f64), GeometryError> {
    let g = mask.geometry();
    if g.dim() != 2 {
        return Err(GeometryError::DimensionMismatch(
            "line-average bounds are planar".to_string(),
        ));
    }
    if axis > 1 {
        return Err(GeometryError::Parameter(format!(
            "axis must be 0 or 1 (got {axis})"
        )));
    }
    if !(a1 > 0.0 && a2 > 0.0) {
        return Err(GeometryError::Parameter(
            "phase values must be > 0".to_string(),
        ));
    }
    let [nx, ny, _] = g.counts();
    let value = |i: usize, j: usize| -> f64 {
        if mask.flags()[g.element_index(i, j, 0)] {
            a2
        } else {
            a1
        }
    };
    let (n_along, n_across) = if axis == 0 { (nx, ny) } else { (ny, nx) };
    let at = |along: usize, across: usize| -> f64 {
        if axis == 0 {
            value(along, across)
        } else {
            value(across, along)
        }
    };

    // Lower: harmonic mean along the loaded axis per transverse line, then
    // the arithmetic mean across lines.
    let mut lower = 0.0;
    for across in 0..n_across {
        let mut inv = 0.0;
        for along in 0..n_along {
            inv += 1.0 / at(along, across);
        }
        lower += n_along as f64 / inv;
    }
    lower /= n_across as f64;

    // Upper: arithmetic mean across the transverse axis per loaded-axis
    // position, then the harmonic mean along the loaded axis.
    let mut inv_sum = 0.0;
    for along in 0..n_along {
        let mut mean = 0.0;
        for across in 0..n_across {
            mean += at(along, across);
        }
        inv_sum += n_across as f64 / mean;
    }
    let upper = n_along as f64 / inv_sum;

    Ok((lower, upper))
}

/// Effective tensor of the fiber lattice:
/// `a1 I + (a2^3 + a2 b2^2 |h|^2)/(a2^2 + b2^2 h3^2) e3(x)e3 + b1 E(h)`.
pub fn fiber_formula_3d(phases: &LimitPhases, h: [f64; 3]) -> Mat3 {
    let hsq = h[0] * h[0] + h[1] * h[1] + h[2] * h[2];
    let a2 = phases.alpha2;
    let b2 = phases.beta2;
    let coeff = (a2 * a2 * a2 + a2 * b2 * b2 * hsq) / (a2 * a2 + b2 * b2 * h[2] * h[2]);
    let mut m = Mat3::identity().scale(phases.alpha1);
    m.e[2][2] += coeff;
    m.add(&hall_generator_3d(h).scale(phases.beta1))
}

/// Triaxial variant: the axial excess appears on each axis with its own
/// field component in the denominator.
pub fn triaxial_formula(phases: &LimitPhases, h: [f64; 3]) -> Mat3 {
    let hsq = h[0] * h[0] + h[1] * h[1] + h[2] * h[2];
    let a2 = phases.alpha2;
    let b2 = phases.beta2;
    let mut m = Mat3::identity().scale(phases.alpha1);
    for i in 0..3 {
        m.e[i][i] += (a2 * a2 * a2 + a2 * b2 * b2 * hsq) / (a2 * a2 + b2 * b2 * h[i] * h[i]);
    }
    m.add(&hall_generator_3d(h).scale(phases.beta1))
}

/// Coefficients of the in-fiber gradient relations
/// `xi_1 = c1 xi_3`, `xi_2 = c2 xi_3`:
/// `c1 = (b2^2 h1 h3 - a2 b2 h2)/(a2^2 + b2^2 h3^2)`,
/// `c2 = (b2^2 h2 h3 + a2 b2 h1)/(a2^2 + b2^2 h3^2)`.
pub fn fiber_xi_coefficients(phases: &LimitPhases, h: [f64; 3]) -> (f64, f64) {
    let a2 = phases.alpha2;
    let b2 = phases.beta2;
    let den = a2 * a2 + b2 * b2 * h[2] * h[2];
    (
        (b2 * b2 * h[0] * h[2] - a2 * b2 * h[1]) / den,
        (b2 * b2 * h[1] * h[2] + a2 * b2 * h[0]) / den,
    )
}

// ---------------------------------------------------------------------------
// Sweep plans
// ---------------------------------------------------------------------------

/// Scaling rule for the phase-2 Hall coefficient along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaScaling {
    /// Strong field: `beta_{2,n} = beta2/theta_n`, locked to the alpha scale.
    Strong,
    /// Fixed `beta_{2,n} = beta2`; outside the strong-field theory, kept for
    /// exploration and labeled as such in reports.
    Fixed,
}

/// One term of a high-contrast sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStep {
    /// Bar half-width `t_n` or fiber radius `r_n`.
    pub feature: f64,
    /// Measure `theta_n` of the high phase; the scaled conductivity is
    /// `alpha2/theta_n` so the product is the limit constant by construction.
    pub theta: f64,
    pub resolution: u32,
    /// Optional period metadata; never enters the cell computation.
    pub epsilon: Option<f64>,
}

/// A decreasing-measure sequence of sweep terms plus the shared limit phases.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    phases: LimitPhases,
    steps: Vec<SweepStep>,
    beta_scaling: BetaScaling,
}

impl SweepPlan {
    pub fn new(
        phases: LimitPhases,
        steps: Vec<SweepStep>,
        beta_scaling: BetaScaling,
    ) -> Result<Self, GeometryError> {
        if steps.is_empty() {
            return Err(GeometryError::Parameter("empty sweep plan".to_string()));
        }
        for w in steps.windows(2) {
            if !(w[1].theta < w[0].theta) {
                return Err(GeometryError::Parameter(format!(
                    "sweep measures must strictly decrease (got {} then {})",
                    w[0].theta, w[1].theta
                )));
            }
        }
        for s in &steps {
            if !(s.theta > 0.0 && s.theta.is_finite()) {
                return Err(GeometryError::Parameter(format!(
                    "sweep measure must be positive (got {})",
                    s.theta
                )));
            }
        }
        Ok(Self {
            phases,
            steps,
            beta_scaling,
        })
    }

    /// Cross sweep over bar half-widths; `theta_n` is the cross measure
    /// `2 t (ell+1) - 4 t^2` and the default resolution keeps eight elements
    /// across a bar.
    pub fn cross(
        phases: LimitPhases,
        ell: f64,
        t_list: &[f64],
        resolutions: Option<&[u32]>,
        beta_scaling: BetaScaling,
    ) -> Result<Self, GeometryError> {
        let steps = t_list
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let geom = CrossGeometry::new(t, ell)?;
                let resolution = match resolutions {
                    Some(rs) => *rs.get(i).ok_or_else(|| {
                        GeometryError::Parameter(
                            "resolution list shorter than the feature list".to_string(),
                        )
                    })?,
                    None => (8.0 / (2.0 * t)).ceil() as u32,
                };
                Ok(SweepStep {
                    feature: t,
                    theta: geom.area(),
                    resolution,
                    epsilon: None,
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        Self::new(phases, steps, beta_scaling)
    }

    /// Fiber sweep over radii; `theta_n = pi r^2` and the default resolution
    /// keeps six elements across a diameter, capped at 64 per axis.
    pub fn fiber(
        phases: LimitPhases,
        r_list: &[f64],
        resolutions: Option<&[u32]>,
        epsilons: Option<&[f64]>,
        beta_scaling: BetaScaling,
    ) -> Result<Self, GeometryError> {
        let steps = r_list
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                if !(r > 0.0 && r < 0.5) {
                    return Err(GeometryError::Parameter(format!(
                        "fiber radius must lie in (0, 1/2) (got {r})"
                    )));
                }
                let resolution = match resolutions {
                    Some(rs) => *rs.get(i).ok_or_else(|| {
                        GeometryError::Parameter(
                            "resolution list shorter than the feature list".to_string(),
                        )
                    })?,
                    None => ((6.0 / (2.0 * r)).ceil() as u32).min(64),
                };
                let epsilon = epsilons.and_then(|es| es.get(i).copied());
                Ok(SweepStep {
                    feature: r,
                    theta: std::f64::consts::PI * r * r,
                    resolution,
                    epsilon,
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        Self::new(phases, steps, beta_scaling)
    }

    pub fn phases(&self) -> &LimitPhases {
        &self.phases
    }

    pub fn steps(&self) -> &[SweepStep] {
        &self.steps
    }

    pub fn beta_scaling(&self) -> BetaScaling {
        self.beta_scaling
    }

    /// Scaled phase-2 constants for step `i`.
    pub fn scaled_phase2(&self, i: usize) -> (f64, f64) {
        let s = &self.steps[i];
        let beta = match self.beta_scaling {
            BetaScaling::Strong => self.phases.beta2 / s.theta,
            BetaScaling::Fixed => self.phases.beta2,
        };
        (self.phases.alpha2 / s.theta, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microstructure::CellGeometry;
    use crate::microstructure::{build_cross_cell, build_laminate, PhaseMask};
    use proptest::prelude::*;

    fn phases(a1: f64, b1: f64, a2: f64, b2: f64) -> LimitPhases {
        LimitPhases::new(a1, b1, a2, b2).unwrap()
    }

    #[test]
    fn cross_sigma0_examples() {
        let m = cross_sigma0(1.0, 2.0, 1.0);
        assert_eq!(m, Mat2::diag(2.0, 2.0));
        let m = cross_sigma0(1.0, 2.0, 2.0);
        assert!((m.e[0][0] - (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!((m.e[1][1] - (1.0 + 1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(cross_sigma0(1.5, 0.0, 3.0), Mat2::identity().scale(1.5));
    }

    #[test]
    fn cross_formula_examples() {
        let m = cross_formula(&phases(1.0, 0.5, 2.0, 1.0), 1.0, 1.0);
        let want = Mat2::new([[2.25, -0.5], [0.5, 2.25]]);
        assert!(m.sub(&want).norm() < 1e-14);

        let m = cross_formula(&phases(1.0, 0.5, 2.0, 1.0), 2.0, 0.0);
        assert!(m.sub(&Mat2::diag(1.0 + 2.0 / 3.0, 1.0 + 1.0 / 3.0)).norm() < 1e-14);

        let m = cross_formula(&phases(1.0, 0.0, 2.0, 1.0), 1.5, 0.7);
        assert!(m.is_symmetric(1e-15));
    }

    #[test]
    fn homogenized_law_reduces_at_zero_field() {
        let p = phases(1.3, 0.4, 2.7, 1.1);
        let out = homogenized_law_2d(|a, b| cross_sigma0(a, b, 2.0), &p, 0.0);
        assert!(out.sub(&cross_sigma0(1.3, 2.7, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn law_and_cross_limit_agree() {
        let p = phases(1.0, 0.5, 2.0, 1.0);
        let via_law = homogenized_law_2d(|a, b| cross_sigma0(a, b, 1.0), &p, 1.0);
        let direct = cross_formula(&p, 1.0, 1.0);
        assert!(via_law.sub(&direct).norm() <= 1e-12 * direct.norm());
    }

    proptest! {
        // The shifted second argument reproduces the explicit limit exactly.
        #[test]
        fn law_limit_identity(
            a1 in 0.1..10.0f64, b1 in -5.0..5.0f64,
            a2 in 0.1..10.0f64, b2 in -5.0..5.0f64,
            ell in 1.0..4.0f64, h in -3.0..3.0f64,
        ) {
            let p = phases(a1, b1, a2, b2);
            let via_law = homogenized_law_2d(|x, y| cross_sigma0(x, y, ell), &p, h);
            let direct = cross_formula(&p, ell, h);
            prop_assert!(via_law.sub(&direct).norm() <= 1e-12 * direct.norm().max(1.0));
        }

        // The axial coefficient stays inside [a2, a2 + b2^2|h|^2/a2], attained
        // for h parallel and perpendicular to the fiber axis.
        #[test]
        fn fiber_coefficient_bounds(
            a2 in 0.2..5.0f64, b2 in -3.0..3.0f64,
            hx in -2.0..2.0f64, hy in -2.0..2.0f64, hz in -2.0..2.0f64,
        ) {
            let p = phases(1.0, 0.0, a2, b2);
            let h = [hx, hy, hz];
            let hsq = hx*hx + hy*hy + hz*hz;
            let m = fiber_formula_3d(&p, h);
            let coeff = m.e[2][2] - 1.0;
            let lo = a2;
            let hi = a2 + b2 * b2 * hsq / a2;
            prop_assert!(coeff >= lo - 1e-12 * hi.max(1.0));
            prop_assert!(coeff <= hi + 1e-12 * hi.max(1.0));

            let norm = hsq.sqrt();
            let par = fiber_formula_3d(&p, [0.0, 0.0, norm]);
            prop_assert!((par.e[2][2] - 1.0 - lo).abs() <= 1e-12 * lo.max(1.0));
            let perp = fiber_formula_3d(&p, [norm, 0.0, 0.0]);
            prop_assert!((perp.e[2][2] - 1.0 - hi).abs() <= 1e-12 * hi.max(1.0));
        }

        #[test]
        fn cross_formula_is_isotropic_for_square_cells(
            a1 in 0.1..10.0f64, b1 in -5.0..5.0f64,
            a2 in 0.1..10.0f64, b2 in -5.0..5.0f64, h in -3.0..3.0f64,
        ) {
            let m = cross_formula(&phases(a1, b1, a2, b2), 1.0, h);
            prop_assert_eq!(m.e[0][0], m.e[1][1]);
        }

        #[test]
        fn fiber_antisymmetric_part_is_the_hall_term(
            b1 in -4.0..4.0f64,
            hx in -2.0..2.0f64, hy in -2.0..2.0f64, hz in -2.0..2.0f64,
        ) {
            let p = phases(1.0, b1, 2.0, 1.0);
            let h = [hx, hy, hz];
            let m = fiber_formula_3d(&p, h);
            let want = hall_generator_3d(h).scale(b1);
            prop_assert!(m.antisymmetric_part().sub(&want).norm() <= 1e-13 * want.norm().max(1.0));
        }
    }

    #[test]
    fn fiber_formula_examples() {
        // Field along the fiber axis: the axial coefficient collapses to a2.
        let p = phases(1.0, 1.0, 2.0, 1.0);
        let m = fiber_formula_3d(&p, [0.0, 0.0, 1.0]);
        assert!((m.e[2][2] - 3.0).abs() < 1e-14);
        let want_antisym = hall_generator_3d([0.0, 0.0, 1.0]);
        assert!(m.antisymmetric_part().sub(&want_antisym).norm() < 1e-14);

        // Transverse field: coefficient (8 + 2)/4 = 2.5.
        let m = fiber_formula_3d(&p, [1.0, 0.0, 0.0]);
        assert!((m.e[2][2] - 3.5).abs() < 1e-14);

        // No field: a1 I + a2 e3(x)e3.
        let m = fiber_formula_3d(&p, [0.0, 0.0, 0.0]);
        assert!(
            m.sub(&Mat3::new([
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 3.0]
            ]))
            .norm()
                < 1e-14
        );
    }

    #[test]
    fn triaxial_examples() {
        let p = phases(1.0, 0.0, 2.0, 1.0);
        let m = triaxial_formula(&p, [0.0, 0.0, 0.0]);
        assert!(m.sub(&Mat3::identity().scale(3.0)).norm() < 1e-14);

        let m = triaxial_formula(&p, [0.0, 0.0, 1.0]);
        assert!((m.e[0][0] - 3.5).abs() < 1e-14);
        assert!((m.e[1][1] - 3.5).abs() < 1e-14);
        assert!((m.e[2][2] - 3.0).abs() < 1e-14);

        // Permuting the field components permutes the diagonal.
        let a = triaxial_formula(&p, [1.0, 2.0, 0.5]);
        let b = triaxial_formula(&p, [2.0, 0.5, 1.0]);
        assert!((a.e[0][0] - b.e[2][2]).abs() < 1e-13);
        assert!((a.e[1][1] - b.e[0][0]).abs() < 1e-13);
        assert!((a.e[2][2] - b.e[1][1]).abs() < 1e-13);
    }

    #[test]
    fn xi_coefficient_examples() {
        let p = phases(1.0, 0.0, 2.0, 1.0);
        let (c1, c2) = fiber_xi_coefficients(&p, [1.0, 0.0, 0.0]);
        assert!((c1 - 0.0).abs() < 1e-15);
        assert!((c2 - 0.5).abs() < 1e-15);

        let (c1, c2) = fiber_xi_coefficients(&p, [0.0, 0.0, 2.5]);
        assert_eq!((c1, c2), (0.0, 0.0));

        let p = phases(1.0, 0.0, 2.0, 0.0);
        let (c1, c2) = fiber_xi_coefficients(&p, [1.0, 2.0, 3.0]);
        assert_eq!((c1, c2), (0.0, 0.0));
    }

    #[test]
    fn bounds_on_homogeneous_and_laminate_rasters() {
        let g = CellGeometry::square(8).unwrap();
        let m = PhaseMask::new(g, vec![false; 64]).unwrap();
        let (lo, hi) = voigt_reuss_bounds(&m, 3.0, 10.0, 0).unwrap();
        assert!((lo - 3.0).abs() < 1e-14 && (hi - 3.0).abs() < 1e-14);

        // Grid-aligned laminate loaded across the layers: both nested means
        // collapse to the harmonic mean.
        let m = build_laminate(0, 0.5, 16).unwrap();
        let (lo, hi) = voigt_reuss_bounds(&m, 1.0, 4.0, 0).unwrap();
        assert!((lo - 1.6).abs() < 1e-13);
        assert!((hi - 1.6).abs() < 1e-13);
        // Loaded along the layers: both collapse to the arithmetic mean.
        let (lo, hi) = voigt_reuss_bounds(&m, 1.0, 4.0, 1).unwrap();
        assert!((lo - 2.5).abs() < 1e-13);
        assert!((hi - 2.5).abs() < 1e-13);
    }

    #[test]
    fn bounds_match_the_explicit_cross_averages() {
        // Aligned raster (t*res integral), so the discrete averages equal the
        // exact piecewise means of the cross geometry.
        let t = 0.25;
        let ell = 1.0;
        let (a1, a2) = (1.0, 10.0);
        let m = build_cross_cell(t, ell, 64).unwrap();
        let (lo, hi) = voigt_reuss_bounds(&m, a1, a2, 0).unwrap();

        let lo_exact = (1.0 - 2.0 * t)
            * ((ell - 2.0 * t) / (ell * a1) + 2.0 * t / (ell * a2)).powi(-1)
            + 2.0 * t * (ell / (ell * a2)).powi(-1);
        let hi_exact =
            ell * ((ell - 2.0 * t) / ((1.0 - 2.0 * t) * a1 + 2.0 * t * a2) + 2.0 * t / a2).powi(-1);
        assert!((lo - lo_exact).abs() < 1e-12, "{lo} vs {lo_exact}");
        assert!((hi - hi_exact).abs() < 1e-12, "{hi} vs {hi_exact}");
        assert!(lo <= hi);
    }

    #[test]
    fn bounds_ordering_on_random_rasters() {
        let g = CellGeometry::square(8).unwrap();
        // Deterministic pseudo-random flags.
        let mut state = 0x9e3779b97f4a7c15u64;
        let flags: Vec<bool> = (0..64)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state & 1 == 1
            })
            .collect();
        let m = PhaseMask::new(g, flags).unwrap();
        for axis in [0, 1] {
            let (lo, hi) = voigt_reuss_bounds(&m, 1.0, 7.0, axis).unwrap();
            assert!(lo <= hi + 1e-14);
        }
    }

    #[test]
    fn sweep_plans_validate() {
        let p = phases(1.0, 0.5, 2.0, 1.0);
        let plan = SweepPlan::cross(p, 1.0, &[0.2, 0.1, 0.05], None, BetaScaling::Strong).unwrap();
        assert_eq!(plan.steps().len(), 3);
        assert_eq!(plan.steps()[0].resolution, 20);
        assert_eq!(plan.steps()[2].resolution, 80);
        let (a, b) = plan.scaled_phase2(2);
        let theta = plan.steps()[2].theta;
        assert!((theta - (4.0 * 0.05 - 4.0 * 0.0025)).abs() < 1e-15);
        assert_eq!(a, 2.0 / theta);
        assert_eq!(b, 1.0 / theta);

        // Non-decreasing measures are rejected.
        assert!(SweepPlan::cross(p, 1.0, &[0.1, 0.2], None, BetaScaling::Strong).is_err());

        let plan = SweepPlan::fiber(p, &[0.25, 0.1], None, None, BetaScaling::Strong).unwrap();
        assert_eq!(plan.steps()[0].resolution, 12);
        assert_eq!(plan.steps()[1].resolution, 30);
        let plan = SweepPlan::fiber(p, &[0.05], None, None, BetaScaling::Strong).unwrap();
        assert_eq!(plan.steps()[0].resolution, 60);
    }
}

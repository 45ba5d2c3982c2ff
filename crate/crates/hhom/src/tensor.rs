//! Exact small-matrix algebra for perturbed two-phase conductivities.
//!
//! A phase with conductivity `alpha` and Hall coefficient `beta` in a field of
//! strength `h` carries the tensor `alpha*I + beta*h*J` in the plane, or
//! `alpha*I + beta*E(h)` in space, where `J` is the quarter-turn rotation and
//! `E(h)x = h x x` (cross product). This module holds those generators, the
//! Keller dual `A -> A^T/det A`, and the fractional-linear Dykhne map that
//! turns a non-symmetric two-phase medium into a symmetric one together with
//! its push-forward on effective tensors.

use crate::error::TensorError;

/// Relative tolerance used by the symmetry and realness certificates.
/// The coefficients are exact algebra; violations indicate bugs, not
/// conditioning, so this is deliberately tight.
pub const SYMMETRY_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// 2x2 / 3x3 matrices
// ---------------------------------------------------------------------------

/// Row-major 2x2 real matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub e: [[f64; 2]; 2],
}

impl Mat2 {
    pub const fn new(e: [[f64; 2]; 2]) -> Self {
        Self { e }
    }

    pub const fn identity() -> Self {
        Self::new([[1.0, 0.0], [0.0, 1.0]])
    }

    pub const fn zero() -> Self {
        Self::new([[0.0, 0.0], [0.0, 0.0]])
    }

    /// The antisymmetric generator `J` (rotation by a quarter turn).
    pub const fn j() -> Self {
        Self::new([[0.0, -1.0], [1.0, 0.0]])
    }

    pub const fn diag(a: f64, b: f64) -> Self {
        Self::new([[a, 0.0], [0.0, b]])
    }

    pub fn transpose(&self) -> Self {
        Self::new([[self.e[0][0], self.e[1][0]], [self.e[0][1], self.e[1][1]]])
    }

    pub fn det(&self) -> f64 {
        self.e[0][0] * self.e[1][1] - self.e[0][1] * self.e[1][0]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new([
            [s * self.e[0][0], s * self.e[0][1]],
            [s * self.e[1][0], s * self.e[1][1]],
        ])
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut e = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                e[i][j] = self.e[i][j] + other.e[i][j];
            }
        }
        Self::new(e)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut e = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                e[i][j] = self.e[i][0] * other.e[0][j] + self.e[i][1] * other.e[1][j];
            }
        }
        Self::new(e)
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.e[0][0] * v[0] + self.e[0][1] * v[1],
            self.e[1][0] * v[0] + self.e[1][1] * v[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self, TensorError> {
        let det = self.det();
        if !det.is_finite() || det.abs() <= 1e-14 * self.norm().powi(2).max(f64::MIN_POSITIVE) {
            return Err(TensorError::Singular { det });
        }
        Ok(Self::new([
            [self.e[1][1] / det, -self.e[0][1] / det],
            [-self.e[1][0] / det, self.e[0][0] / det],
        ]))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.e.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.e.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn symmetric_part(&self) -> Self {
        self.add(&self.transpose()).scale(0.5)
    }

    pub fn antisymmetric_part(&self) -> Self {
        self.sub(&self.transpose()).scale(0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().flatten().all(|x| x.is_finite())
    }

    /// `|A - A^T| <= tol * max(|A|, 1)` in the Frobenius sense.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.sub(&self.transpose()).norm() <= tol * self.norm().max(1.0)
    }

    /// Eigenvalue bounds of the symmetric part.
    pub fn sym_eigen_bounds(&self) -> (f64, f64) {
        let s = self.symmetric_part();
        let mid = 0.5 * (s.e[0][0] + s.e[1][1]);
        let rad = (0.25 * (s.e[0][0] - s.e[1][1]).powi(2) + s.e[0][1] * s.e[0][1]).sqrt();
        (mid - rad, mid + rad)
    }

    pub fn is_positive_definite_symmetric_part(&self, tol: f64) -> bool {
        self.sym_eigen_bounds().0 > tol
    }
}

/// Row-major 3x3 real matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub e: [[f64; 3]; 3],
}

impl Mat3 {
    pub const fn new(e: [[f64; 3]; 3]) -> Self {
        Self { e }
    }

    pub const fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub const fn zero() -> Self {
        Self::new([[0.0; 3]; 3])
    }

    pub fn transpose(&self) -> Self {
        let mut e = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                e[i][j] = self.e[j][i];
            }
        }
        Self::new(e)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut e = self.e;
        for row in e.iter_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        Self::new(e)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut e = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                e[i][j] = self.e[i][j] + other.e[i][j];
            }
        }
        Self::new(e)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = self.e[i][0] * v[0] + self.e[i][1] * v[1] + self.e[i][2] * v[2];
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.e.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.e.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn symmetric_part(&self) -> Self {
        self.add(&self.transpose()).scale(0.5)
    }

    pub fn antisymmetric_part(&self) -> Self {
        self.sub(&self.transpose()).scale(0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().flatten().all(|x| x.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.sub(&self.transpose()).norm() <= tol * self.norm().max(1.0)
    }

    /// Eigenvalue bounds of the symmetric part (Cardano on the characteristic
    /// polynomial of the symmetric part).
    pub fn sym_eigen_bounds(&self) -> (f64, f64) {
        let s = self.symmetric_part().e;
        let p1 = s[0][1] * s[0][1] + s[0][2] * s[0][2] + s[1][2] * s[1][2];
        let q = (s[0][0] + s[1][1] + s[2][2]) / 3.0;
        if p1 == 0.0 {
            let mut d = [s[0][0], s[1][1], s[2][2]];
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            return (d[0], d[2]);
        }
        let p2 = (s[0][0] - q).powi(2) + (s[1][1] - q).powi(2) + (s[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (s[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let detb = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let r = (detb / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let eig_max = q + 2.0 * p * phi.cos();
        let eig_min = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        (eig_min, eig_max)
    }

    pub fn is_positive_definite_symmetric_part(&self, tol: f64) -> bool {
        self.sym_eigen_bounds().0 > tol
    }
}

// ---------------------------------------------------------------------------
// Complex scalars (Tartar representation alpha*I + beta*J <-> alpha + i*beta)
// ---------------------------------------------------------------------------

/// Minimal complex scalar used by the fractional-linear phase maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexScalar {
    pub re: f64,
    pub im: f64,
}

impl ComplexScalar {
    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.re + other.re, self.im + other.im)
    }

    pub fn sub(self, other: Self) -> Self {
        Self::new(self.re - other.re, self.im - other.im)
    }

    pub fn mul(self, other: Self) -> Self {
        Self::new(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )
    }

    pub fn div(self, other: Self) -> Self {
        let d = other.re * other.re + other.im * other.im;
        Self::new(
            (self.re * other.re + self.im * other.im) / d,
            (self.im * other.re - self.re * other.im) / d,
        )
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// The plane-matrix image of a complex scalar: `re*I + im*J`.
pub fn complex_to_mat2(z: ComplexScalar) -> Mat2 {
    Mat2::identity().scale(z.re).add(&Mat2::j().scale(z.im))
}

/// The complex representative of `alpha*I + beta*J`; `None` if the matrix is
/// not of that isotropic-plus-rotation form.
pub fn mat2_to_complex(a: &Mat2, tol: f64) -> Option<ComplexScalar> {
    let scale = a.norm().max(1.0);
    if (a.e[0][0] - a.e[1][1]).abs() <= tol * scale && (a.e[0][1] + a.e[1][0]).abs() <= tol * scale
    {
        Some(ComplexScalar::new(a.e[0][0], a.e[1][0]))
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Phases and Hall vectors
// ---------------------------------------------------------------------------

/// An isotropic phase `(alpha, beta)` generating `alpha*I + beta*h*J` in the
/// plane or `alpha*I + beta*E(h)` in space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedPhase {
    alpha: f64,
    beta: f64,
}

impl PerturbedPhase {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, TensorError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(TensorError::InvalidPhase(format!(
                "alpha must be > 0 (got {alpha})"
            )));
        }
        if !beta.is_finite() {
            return Err(TensorError::InvalidPhase(format!(
                "beta must be finite (got {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The phase scaled to contrast `1/theta`: `(alpha/theta, beta/theta)`.
    pub fn scaled(&self, theta: f64) -> Result<Self, TensorError> {
        Self::new(self.alpha / theta, self.beta / theta)
    }
}

/// Magnetic-field parameter: a scalar in the plane, a 3-vector in space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HallVector {
    Plane(f64),
    Space([f64; 3]),
}

impl HallVector {
    pub fn dim(&self) -> usize {
        match self {
            HallVector::Plane(_) => 2,
            HallVector::Space(_) => 3,
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            HallVector::Plane(h) => Some(*h),
            HallVector::Space(_) => None,
        }
    }

    pub fn vector(&self) -> Option<[f64; 3]> {
        match self {
            HallVector::Plane(_) => None,
            HallVector::Space(v) => Some(*v),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            HallVector::Plane(h) => h.is_finite(),
            HallVector::Space(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// `alpha*I + beta*h*J`.
pub fn perturbed_tensor_2d(phase: &PerturbedPhase, h: f64) -> Mat2 {
    let bh = phase.beta * h;
    Mat2::new([[phase.alpha, -bh], [bh, phase.alpha]])
}

/// The antisymmetric generator `E(h)` with `E(h) x = h x x`.
pub fn hall_generator_3d(h: [f64; 3]) -> Mat3 {
    Mat3::new([[0.0, -h[2], h[1]], [h[2], 0.0, -h[0]], [-h[1], h[0], 0.0]])
}

/// `alpha*I + beta*E(h)`.
pub fn perturbed_tensor_3d(phase: &PerturbedPhase, h: [f64; 3]) -> Mat3 {
    Mat3::identity()
        .scale(phase.alpha)
        .add(&hall_generator_3d(h).scale(phase.beta))
}

/// The Keller dual `A -> A^T / det A`. Applying it twice restores `A`.
pub fn keller_dual(a: &Mat2) -> Result<Mat2, TensorError> {
    let det = a.det();
    if !det.is_finite() || det.abs() <= 1e-14 * a.norm().powi(2).max(f64::MIN_POSITIVE) {
        return Err(TensorError::Singular { det });
    }
    Ok(a.transpose().scale(1.0 / det))
}

// ---------------------------------------------------------------------------
// Dykhne transform
// ---------------------------------------------------------------------------

/// Coefficients of the symmetrizing fractional-linear map.
///
/// `Mobius { a, b, p, q, r }` realizes `A -> ((p A + q J)^(-1) + r J)^(-1)`,
/// equivalently `A -> (a A + b J)(a I + J A)^(-1)`, with
/// `(p, q, r) = (a^2/(a^2+b), a b/(a^2+b), 1/a)`. `Identity` is the bypass
/// convention for media that need no transform (h = 0 or matching Hall
/// coefficients: the medium is already asymptotically symmetric).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DykhneCoefficients {
    Identity,
    Mobius {
        a: f64,
        b: f64,
        p: f64,
        q: f64,
        r: f64,
    },
}

impl DykhneCoefficients {
    /// Builds the full coefficient set from `(a, b)`.
    pub fn from_ab(a: f64, b: f64) -> Result<Self, TensorError> {
        if !(a.is_finite() && b.is_finite()) || a == 0.0 {
            return Err(TensorError::NoAdmissibleRoot {
                reason: format!("coefficients must be finite with a != 0 (a={a}, b={b})"),
            });
        }
        let denom = a * a + b;
        if denom == 0.0 {
            return Err(TensorError::NoAdmissibleRoot {
                reason: "a^2 + b = 0 makes the map singular".to_string(),
            });
        }
        Ok(DykhneCoefficients::Mobius {
            a,
            b,
            p: a * a / denom,
            q: a * b / denom,
            r: 1.0 / a,
        })
    }

    /// `(p, q, r)`; the identity bypass reads `(1, 0, 0)`.
    pub fn pqr(&self) -> (f64, f64, f64) {
        match self {
            DykhneCoefficients::Identity => (1.0, 0.0, 0.0),
            DykhneCoefficients::Mobius { p, q, r, .. } => (*p, *q, *r),
        }
    }

    pub fn ab(&self) -> Option<(f64, f64)> {
        match self {
            DykhneCoefficients::Identity => None,
            DykhneCoefficients::Mobius { a, b, .. } => Some((*a, *b)),
        }
    }
}

/// Solves for the coefficients that make both transformed phases real.
///
/// The quadratic for `a` (with `D_j = alpha_j^2 + h^2 beta_j^2`) is
/// `a^2 - a (D_2 - D_1)/(h (b2 - b1)) + (b1 D_2 - b2 D_1)/(b2 - b1) = 0`.
/// Both roots are formed and filtered by positivity of the transformed
/// medium; the sign of both transformed phases is the sign of `a^2 + b(a)`,
/// so a root maps the pair to an all-positive or an all-negative medium.
/// At high contrast exactly one root survives. At moderate contrast both
/// can; the branch continuously connected to the identity map (larger `|a|`,
/// which is also the principal root of the quadratic in the high-contrast
/// regime) is then selected.
pub fn dykhne_coefficients(
    phase1: &PerturbedPhase,
    phase2: &PerturbedPhase,
    h: f64,
) -> Result<DykhneCoefficients, TensorError> {
    if h == 0.0 || phase2.beta() == phase1.beta() {
        return Err(TensorError::DegenerateTransform);
    }
    let (a1, b1) = (phase1.alpha(), phase1.beta());
    let (a2, b2) = (phase2.alpha(), phase2.beta());
    let d1 = a1 * a1 + h * h * b1 * b1;
    let d2 = a2 * a2 + h * h * b2 * b2;
    let dbeta = b2 - b1;

    // Monic quadratic a^2 - s*a + prod = 0, solved with the stable split to
    // avoid cancellation at high contrast.
    let s = (d2 - d1) / (h * dbeta);
    let prod = (b1 * d2 - b2 * d1) / dbeta;
    let disc = s * s - 4.0 * prod;
    if disc < 0.0 || !disc.is_finite() {
        return Err(TensorError::NoAdmissibleRoot {
            reason: format!("negative discriminant {disc:.6e}"),
        });
    }
    let sq = disc.sqrt();
    let big = 0.5 * (s + s.signum() * sq);
    let roots = if big == 0.0 {
        vec![0.5 * (s + sq), 0.5 * (s - sq)]
    } else {
        vec![big, prod / big]
    };

    // The two expressions for b agree at a root; evaluate the better
    // conditioned one.
    let b_of = |a: f64| -> f64 {
        let den1 = a - h * b1;
        let den2 = a - h * b2;
        if den1.abs() >= den2.abs() {
            (a * d1 - a * a * h * b1) / den1
        } else {
            (a * d2 - a * a * h * b2) / den2
        }
    };

    let mut admissible: Vec<(f64, f64)> = Vec::new();
    for &a in &roots {
        if a == 0.0 || !a.is_finite() {
            continue;
        }
        let b = b_of(a);
        if b.is_finite() && a * a + b > 0.0 && !admissible.iter().any(|(x, _)| *x == a) {
            admissible.push((a, b));
        }
    }
    if admissible.is_empty() {
        return Err(TensorError::NoAdmissibleRoot {
            reason: format!("neither root yields a positive medium (roots {roots:?})"),
        });
    }
    // Principal branch on a tie of |a|: follow the sign of h (b2 - b1), the
    // explicit root convention.
    admissible.sort_by(|(x, _), (y, _)| {
        y.abs().partial_cmp(&x.abs()).unwrap().then_with(|| {
            (y * (h * dbeta).signum())
                .partial_cmp(&(x * (h * dbeta).signum()))
                .unwrap()
        })
    });
    let (a, b) = admissible[0];
    DykhneCoefficients::from_ab(a, b)
}

/// Applies the phase map `z -> (a z + i b)/(a + i z)` to `alpha + i h beta`
/// and certifies the image is real-positive. The vanishing imaginary part is
/// the defining property of `(a, b)`.
pub fn dykhne_transform_phase(
    phase: &PerturbedPhase,
    h: f64,
    coeffs: &DykhneCoefficients,
) -> Result<f64, TensorError> {
    dykhne_transform_phase_with_tol(phase, h, coeffs, SYMMETRY_TOL)
}

pub fn dykhne_transform_phase_with_tol(
    phase: &PerturbedPhase,
    h: f64,
    coeffs: &DykhneCoefficients,
    tol: f64,
) -> Result<f64, TensorError> {
    let (a, b) = match coeffs {
        DykhneCoefficients::Identity => return Ok(phase.alpha()),
        DykhneCoefficients::Mobius { a, b, .. } => (*a, *b),
    };
    let z = ComplexScalar::new(phase.alpha(), h * phase.beta());
    let num = ComplexScalar::new(a, 0.0)
        .mul(z)
        .add(ComplexScalar::new(0.0, b));
    let den = ComplexScalar::new(a, 0.0).add(ComplexScalar::new(0.0, 1.0).mul(z));
    let w = num.div(den);
    if w.im.abs() > tol * w.re.abs().max(f64::MIN_POSITIVE) {
        return Err(TensorError::NonRealTransform {
            im_ratio: w.im.abs() / w.re.abs().max(f64::MIN_POSITIVE),
        });
    }
    if w.re <= 0.0 {
        return Err(TensorError::NonPositiveTransform { value: w.re });
    }
    Ok(w.re)
}

/// The matrix map `A -> ((p A + q J)^(-1) + r J)^(-1)`.
pub fn dykhne_transform_tensor(a: &Mat2, coeffs: &DykhneCoefficients) -> Result<Mat2, TensorError> {
    let (p, q, r) = match coeffs {
        DykhneCoefficients::Identity => return Ok(*a),
        DykhneCoefficients::Mobius { p, q, r, .. } => (*p, *q, *r),
    };
    let inner = a.scale(p).add(&Mat2::j().scale(q));
    let inner_inv = inner.inverse()?;
    inner_inv.add(&Mat2::j().scale(r)).inverse()
}

/// Push-forward of an effective tensor under the transform:
/// `S -> (a S + b J)(a I + J S)^(-1)`.
pub fn dual_push_forward(
    sigma_star: &Mat2,
    coeffs: &DykhneCoefficients,
) -> Result<Mat2, TensorError> {
    let (a, b) = match coeffs {
        DykhneCoefficients::Identity => return Ok(*sigma_star),
        DykhneCoefficients::Mobius { a, b, .. } => (*a, *b),
    };
    let num = sigma_star.scale(a).add(&Mat2::j().scale(b));
    let den = Mat2::identity()
        .scale(a)
        .add(&Mat2::j().mul(sigma_star))
        .inverse()?;
    Ok(num.mul(&den))
}

/// Inverse of [`dual_push_forward`]:
/// `S' -> (a I - S' J)^(-1) (a S' - b J)`.
pub fn dual_pull_back(
    sigma_prime: &Mat2,
    coeffs: &DykhneCoefficients,
) -> Result<Mat2, TensorError> {
    let (a, b) = match coeffs {
        DykhneCoefficients::Identity => return Ok(*sigma_prime),
        DykhneCoefficients::Mobius { a, b, .. } => (*a, *b),
    };
    let lhs = Mat2::identity()
        .scale(a)
        .sub(&sigma_prime.mul(&Mat2::j()))
        .inverse()?;
    let rhs = sigma_prime.scale(a).sub(&Mat2::j().scale(b));
    Ok(lhs.mul(&rhs))
}

/// Finite-contrast transformed phases for a scaled pair
/// `(phase1, (alpha2/theta, beta2/theta))`: returns `(alpha1', theta*alpha2')`.
/// As `theta -> 0` these approach `alpha1` and `alpha2 + beta2^2 h^2 / alpha2`.
pub fn dykhne_phase_asymptotics(
    phase1: &PerturbedPhase,
    phase2_scaled: &PerturbedPhase,
    theta: f64,
    h: f64,
) -> Result<(f64, f64), TensorError> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(TensorError::InvalidPhase(format!(
            "theta must be > 0 (got {theta})"
        )));
    }
    let coeffs = dykhne_coefficients(phase1, phase2_scaled, h)?;
    let a1 = dykhne_transform_phase(phase1, h, &coeffs)?;
    let a2 = dykhne_transform_phase(phase2_scaled, h, &coeffs)?;
    Ok((a1, theta * a2))
}

//! Jones vectors, Stokes vectors and the three-piezo fiber polarization
//! controller.
//!
//! Stokes convention: `(1, 0)` is vertical (V) and sits at `+S1`,
//! `(1, 1)/√2` is `+S2`, and `(1, -i)/√2` is right circular (R) at `+S3`.
//! Rotations on the sphere follow the right-hand rule.

use num_complex::Complex64;
use thiserror::Error;

const UNIT_TOL: f64 = 1e-9;

/// Full-scale output of the piezo DAC.
pub const PIEZO_MAX_COUNT: u16 = 4095;
/// Midpoint of the piezo DAC range.
pub const PIEZO_CENTER_COUNT: u16 = 2048;
/// 0–140 V across the 12-bit DAC.
pub const DEFAULT_VOLTS_PER_COUNT: f64 = 140.0 / 4095.0;
/// Retardance change per piezo volt.
pub const DEFAULT_RAD_PER_VOLT: f64 = 0.02;

pub const AXIS_S1: [f64; 3] = [1.0, 0.0, 0.0];
pub const AXIS_S2: [f64; 3] = [0.0, 1.0, 0.0];
pub const AXIS_S3: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolarizationError {
    #[error("Jones vector has zero norm")]
    ZeroNorm,
    #[error("rotation axis is not a unit vector (norm {0})")]
    NonUnitAxis(f64),
    #[error("piezo index {0} out of range (0..3)")]
    PiezoIndex(usize),
    #[error("piezo count {0} exceeds {PIEZO_MAX_COUNT}")]
    PiezoCount(u32),
}

/// Normalized Jones vector `(E_x, E_y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesState {
    ex: Complex64,
    ey: Complex64,
}

impl JonesState {
    /// Builds a normalized state. Zero vectors are rejected.
    pub fn new(ex: Complex64, ey: Complex64) -> Result<Self, PolarizationError> {
        let n = (ex.norm_sqr() + ey.norm_sqr()).sqrt();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(PolarizationError::ZeroNorm);
        }
        Ok(Self { ex: ex / n, ey: ey / n })
    }

    pub fn vertical() -> Self {
        Self { ex: Complex64::new(1.0, 0.0), ey: Complex64::new(0.0, 0.0) }
    }

    pub fn horizontal() -> Self {
        Self { ex: Complex64::new(0.0, 0.0), ey: Complex64::new(1.0, 0.0) }
    }

    pub fn right_circular() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self { ex: Complex64::new(s, 0.0), ey: Complex64::new(0.0, -s) }
    }

    pub fn ex(&self) -> Complex64 {
        self.ex
    }

    pub fn ey(&self) -> Complex64 {
        self.ey
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &JonesState) -> Complex64 {
        self.ex.conj() * other.ex + self.ey.conj() * other.ey
    }

    pub fn stokes(&self) -> StokesState {
        stokes_from_jones(self)
    }
}

/// Unit Stokes vector on the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesState {
    s: [f64; 3],
}

impl StokesState {
    /// Normalizes the given vector. Zero vectors are rejected.
    pub fn new(s1: f64, s2: f64, s3: f64) -> Result<Self, PolarizationError> {
        let n = (s1 * s1 + s2 * s2 + s3 * s3).sqrt();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(PolarizationError::ZeroNorm);
        }
        Ok(Self { s: [s1 / n, s2 / n, s3 / n] })
    }

    pub fn components(&self) -> [f64; 3] {
        self.s
    }

    pub fn s1(&self) -> f64 {
        self.s[0]
    }

    pub fn s2(&self) -> f64 {
        self.s[1]
    }

    pub fn s3(&self) -> f64 {
        self.s[2]
    }

    pub fn dot(&self, other: &StokesState) -> f64 {
        self.s[0] * other.s[0] + self.s[1] * other.s[1] + self.s[2] * other.s[2]
    }

    /// Great-circle distance on the sphere, in radians.
    pub fn angle_to(&self, other: &StokesState) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// A Jones vector with these Stokes parameters (global phase chosen so
    /// that `E_x` is real and non-negative).
    pub fn to_jones(&self) -> JonesState {
        let [s1, s2, s3] = self.s;
        let ax = ((1.0 + s1) / 2.0).max(0.0).sqrt();
        let ay = ((1.0 - s1) / 2.0).max(0.0).sqrt();
        if ay < 1e-15 {
            return JonesState::vertical();
        }
        if ax < 1e-15 {
            return JonesState::horizontal();
        }
        // conj(ex)·ey = (s2 - i s3)/2
        let delta = (-s3).atan2(s2);
        JonesState {
            ex: Complex64::new(ax, 0.0),
            ey: Complex64::from_polar(ay, delta),
        }
    }
}

pub fn stokes_from_jones(j: &JonesState) -> StokesState {
    let z = j.ex.conj() * j.ey;
    let s = [j.ex.norm_sqr() - j.ey.norm_sqr(), 2.0 * z.re, -2.0 * z.im];
    let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    StokesState { s: [s[0] / n, s[1] / n, s[2] / n] }
}

/// State at angle `theta` along the V→R great circle:
/// `cos θ |V⟩ - i sin θ |H⟩`, which sits at sphere angle `2θ` from V.
pub fn great_circle_state(theta: f64) -> JonesState {
    let (s, c) = theta.sin_cos();
    JonesState { ex: Complex64::new(c, 0.0), ey: Complex64::new(0.0, -s) }
}

/// `|⟨j1|j2⟩|²`.
pub fn mode_overlap(j1: &JonesState, j2: &JonesState) -> f64 {
    j1.inner(j2).norm_sqr().min(1.0)
}

fn check_axis(axis: [f64; 3]) -> Result<(), PolarizationError> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(PolarizationError::NonUnitAxis(n));
    }
    Ok(())
}

/// Right-handed rotation of a Stokes vector by `angle` about a unit `axis`.
pub fn rotate_stokes(
    s: &StokesState,
    axis: [f64; 3],
    angle: f64,
) -> Result<StokesState, PolarizationError> {
    check_axis(axis)?;
    let v = s.s;
    let (sn, cs) = angle.sin_cos();
    let kdotv = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = v[i] * cs + cross[i] * sn + axis[i] * kdotv * (1.0 - cs);
    }
    StokesState::new(out[0], out[1], out[2])
}

/// Unitary 2×2 Jones matrix representing a rotation of the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereRotation {
    m: [[Complex64; 2]; 2],
}

impl SphereRotation {
    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Self { m: [[one, zero], [zero, one]] }
    }

    /// Right-handed rotation by `angle` about the unit Stokes `axis`.
    pub fn about(axis: [f64; 3], angle: f64) -> Result<Self, PolarizationError> {
        check_axis(axis)?;
        Ok(Self::about_unchecked(axis, angle))
    }

    pub(crate) fn about_unchecked(axis: [f64; 3], angle: f64) -> Self {
        // U = cos(α/2) I + i sin(α/2) (n1 σ1 + n2 σ2 + n3 σ3) with
        // σ1 = diag(1,-1), σ2 = [[0,1],[1,0]], σ3 = [[0,i],[-i,0]]
        // (the Pauli set matching the Stokes convention above).
        let (s, c) = (angle / 2.0).sin_cos();
        let [n1, n2, n3] = axis;
        let i = Complex64::new(0.0, 1.0);
        let m00 = Complex64::new(c, 0.0) + i * s * n1;
        let m11 = Complex64::new(c, 0.0) - i * s * n1;
        let m01 = i * s * Complex64::new(n2, n3);
        let m10 = i * s * Complex64::new(n2, -n3);
        Self { m: [[m00, m01], [m10, m11]] }
    }

    /// Rotation taking the unit Stokes vector `from` onto `to` along the
    /// connecting great circle.
    pub fn between(from: &StokesState, to: &StokesState) -> Self {
        let a = from.components();
        let b = to.components();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let angle = sn.atan2(from.dot(to));
        if sn < 1e-12 {
            if from.dot(to) > 0.0 {
                return Self::identity();
            }
            // antipodal: any perpendicular axis works
            let helper = if a[0].abs() < 0.9 { AXIS_S1 } else { AXIS_S2 };
            let p = [
                a[1] * helper[2] - a[2] * helper[1],
                a[2] * helper[0] - a[0] * helper[2],
                a[0] * helper[1] - a[1] * helper[0],
            ];
            let pn = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            return Self::about_unchecked([p[0] / pn, p[1] / pn, p[2] / pn], std::f64::consts::PI);
        }
        Self::about_unchecked([cross[0] / sn, cross[1] / sn, cross[2] / sn], angle)
    }

    pub fn apply(&self, j: &JonesState) -> JonesState {
        let ex = self.m[0][0] * j.ex + self.m[0][1] * j.ey;
        let ey = self.m[1][0] * j.ex + self.m[1][1] * j.ey;
        // unitary, so the norm is preserved up to rounding
        let n = (ex.norm_sqr() + ey.norm_sqr()).sqrt();
        JonesState { ex: ex / n, ey: ey / n }
    }

    /// Applies without renormalizing; used on hot paths.
    #[inline]
    pub(crate) fn apply_raw(&self, j: &JonesState) -> JonesState {
        JonesState {
            ex: self.m[0][0] * j.ex + self.m[0][1] * j.ey,
            ey: self.m[1][0] * j.ex + self.m[1][1] * j.ey,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &SphereRotation) -> SphereRotation {
        let mut m = [[Complex64::new(0.0, 0.0); 2]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[r][0] * other.m[0][c] + self.m[r][1] * other.m[1][c];
            }
        }
        SphereRotation { m }
    }

    pub fn inverse(&self) -> SphereRotation {
        let a = &self.m;
        SphereRotation {
            m: [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]],
        }
    }

    /// Rotation of the Stokes sphere implied by this matrix.
    pub fn apply_stokes(&self, s: &StokesState) -> StokesState {
        self.apply(&s.to_jones()).stokes()
    }
}

/// Axes of the three squeezers on the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerGeometry {
    pub axes: [[f64; 3]; 3],
}

impl Default for ControllerGeometry {
    fn default() -> Self {
        Self { axes: [AXIS_S1, AXIS_S2, AXIS_S1] }
    }
}

impl ControllerGeometry {
    pub fn new(axes: [[f64; 3]; 3]) -> Result<Self, PolarizationError> {
        for a in axes {
            check_axis(a)?;
        }
        Ok(Self { axes })
    }
}

/// DAC counts and voltage-to-retardance scale of the three piezos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiezoBank {
    values: [u16; 3],
    pub volts_per_count: f64,
    pub rad_per_volt: [f64; 3],
}

impl Default for PiezoBank {
    fn default() -> Self {
        Self::centered()
    }
}

impl PiezoBank {
    pub fn centered() -> Self {
        Self {
            values: [PIEZO_CENTER_COUNT; 3],
            volts_per_count: DEFAULT_VOLTS_PER_COUNT,
            rad_per_volt: [DEFAULT_RAD_PER_VOLT; 3],
        }
    }

    pub fn with_rad_per_volt(mut self, rad_per_volt: f64) -> Self {
        self.rad_per_volt = [rad_per_volt; 3];
        self
    }

    pub fn values(&self) -> [u16; 3] {
        self.values
    }

    pub fn value(&self, k: usize) -> u16 {
        self.values[k]
    }

    pub fn set(&mut self, k: usize, count: u32) -> Result<(), PolarizationError> {
        if k >= 3 {
            return Err(PolarizationError::PiezoIndex(k));
        }
        if count > PIEZO_MAX_COUNT as u32 {
            return Err(PolarizationError::PiezoCount(count));
        }
        self.values[k] = count as u16;
        Ok(())
    }

    /// Sets a piezo, clamping into the DAC range. Returns the applied count.
    pub fn set_clamped(&mut self, k: usize, count: i64) -> u16 {
        let c = count.clamp(0, PIEZO_MAX_COUNT as i64) as u16;
        self.values[k] = c;
        c
    }

    /// Sphere rotation angle commanded on piezo `k`.
    pub fn angle(&self, k: usize) -> f64 {
        self.values[k] as f64 * self.volts_per_count * self.rad_per_volt[k]
    }

    /// Sphere angle per DAC count on piezo `k`.
    pub fn rad_per_count(&self, k: usize) -> f64 {
        self.volts_per_count * self.rad_per_volt[k]
    }
}

/// Rotation implemented by a single squeezer.
pub fn piezo_rotation(g: &ControllerGeometry, k: usize, angle: f64) -> SphereRotation {
    SphereRotation::about_unchecked(g.axes[k], angle)
}

/// Total controller rotation: piezo 1, then 2, then 3.
pub fn controller_rotation(g: &ControllerGeometry, p: &PiezoBank) -> SphereRotation {
    let r1 = piezo_rotation(g, 0, p.angle(0));
    let r2 = piezo_rotation(g, 1, p.angle(1));
    let r3 = piezo_rotation(g, 2, p.angle(2));
    r3.then_after(&r2).then_after(&r1)
}

pub fn controller_transform(g: &ControllerGeometry, p: &PiezoBank, j_in: &JonesState) -> JonesState {
    controller_rotation(g, p).apply(j_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn basis_states_land_on_expected_poles() {
        assert!(close(JonesState::vertical().stokes().components(), [1.0, 0.0, 0.0], 1e-15));
        assert!(close(JonesState::horizontal().stokes().components(), [-1.0, 0.0, 0.0], 1e-15));
        assert!(close(JonesState::right_circular().stokes().components(), [0.0, 0.0, 1.0], 1e-12));
        let d = JonesState::new(Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)).unwrap();
        assert!(close(d.stokes().components(), [0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn zero_jones_rejected() {
        let z = Complex64::new(0.0, 0.0);
        assert_eq!(JonesState::new(z, z), Err(PolarizationError::ZeroNorm));
    }

    #[test]
    fn rotate_v_about_circular_axis_by_pi_gives_h() {
        let v = JonesState::vertical().stokes();
        let h = rotate_stokes(&v, AXIS_S3, PI).unwrap();
        assert!(close(h.components(), [-1.0, 0.0, 0.0], 1e-12));
    }

    #[test]
    fn non_unit_axis_rejected() {
        let v = JonesState::vertical().stokes();
        assert!(matches!(
            rotate_stokes(&v, [1.0, 1.0, 0.0], 0.3),
            Err(PolarizationError::NonUnitAxis(_))
        ));
        assert!(SphereRotation::about([0.0, 0.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn great_circle_state_sits_at_twice_theta() {
        for &t in &[0.0, 0.1, 0.4, 1.0] {
            let s = great_circle_state(t).stokes();
            assert!(close(s.components(), [(2.0 * t).cos(), 0.0, (2.0 * t).sin()], 1e-12));
        }
    }

    #[test]
    fn centered_bank_with_zero_scale_is_identity() {
        let j = JonesState::new(Complex64::new(0.3, 0.1), Complex64::new(-0.2, 0.7)).unwrap();
        let p = PiezoBank::centered().with_rad_per_volt(0.0);
        let out = controller_transform(&ControllerGeometry::default(), &p, &j);
        assert!((mode_overlap(&j, &out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stokes_to_jones_round_trip() {
        let s = StokesState::new(0.2, -0.5, 0.7).unwrap();
        let back = s.to_jones().stokes();
        assert!(close(s.components(), back.components(), 1e-12));
    }

    #[test]
    fn between_maps_from_onto_to() {
        let a = StokesState::new(1.0, 0.0, 0.0).unwrap();
        let b = StokesState::new(1.0, 1.0, 1.0).unwrap();
        let r = SphereRotation::between(&a, &b);
        assert!(close(r.apply_stokes(&a).components(), b.components(), 1e-12));
        let anti = StokesState::new(-1.0, 0.0, 0.0).unwrap();
        let r = SphereRotation::between(&a, &anti);
        assert!(close(r.apply_stokes(&a).components(), anti.components(), 1e-12));
    }

    #[test]
    fn piezo_set_validates() {
        let mut p = PiezoBank::centered();
        assert!(p.set(3, 10).is_err());
        assert!(p.set(0, 5000).is_err());
        p.set(1, 4095).unwrap();
        assert_eq!(p.value(1), 4095);
        assert_eq!(p.set_clamped(2, -5), 0);
    }
}

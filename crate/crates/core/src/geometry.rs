//! Vector and spherical helpers shared by the rest of the crate.
//!
//! Directions are Cartesian `(x, y, z)` with `x` pointing to azimuth 0,
//! `y` to azimuth +90° and `z` up. Azimuth/elevation are in degrees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant of ground-truth and reported directions.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A direction of arrival as a Cartesian 3-vector.
///
/// Ground-truth and reported directions are unit norm. Raw network outputs
/// share the type but may have any length; [`Doa::normalized`] and
/// [`Doa::is_unit`] sit at the boundaries where it matters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Doa {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Doa {
    /// The origin. Doubles as the stop token of the sequential localizer.
    pub const ORIGIN: Doa = Doa {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Doa) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_origin(self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.z == 0.0
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Checks the unit-norm invariant.
    pub fn ensure_unit(self) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::NonFinite("direction"));
        }
        if !self.is_unit() {
            return Err(Error::NotUnit(self.norm()));
        }
        Ok(self)
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(Error::NonFinite("direction"));
        }
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn sub(self, other: Doa) -> Self {
        Self::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(self, other: Doa) -> Self {
        Self::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn cross(self, o: Doa) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
}

impl From<[f64; 3]> for Doa {
    fn from(v: [f64; 3]) -> Self {
        Self::from_array(v)
    }
}

/// Azimuth/elevation pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AzEl {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AzEl {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth,
            elevation,
        }
    }
}

/// `(Σ|vᵢ|^p)^(1/p)` for `p` in {1, 1.5, 2}.
pub fn lp_norm(v: [f64; 3], p: f64) -> Result<f64> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("lp_norm input"));
    }
    if p == 1.0 {
        Ok(v.iter().map(|c| c.abs()).sum())
    } else if p == 1.5 {
        let s: f64 = v.iter().map(|c| c.abs().powf(1.5)).sum();
        Ok(s.powf(2.0 / 3.0))
    } else if p == 2.0 {
        Ok(v.iter().map(|c| c * c).sum::<f64>().sqrt())
    } else {
        Err(Error::Range(format!("unsupported norm order p = {p}")))
    }
}

/// Great-circle angle between two directions, in degrees.
pub fn angular_distance(u: Doa, v: Doa) -> Result<f64> {
    Ok(angular_distance_rad(u, v)?.to_degrees())
}

pub fn angular_distance_rad(u: Doa, v: Doa) -> Result<f64> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite("angular_distance input"));
    }
    if u.norm() == 0.0 || v.norm() == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(u.cross(v).norm().atan2(u.dot(v)))
}

/// Wraps an azimuth into `[-180, 180)`.
pub fn wrap_azimuth(az: f64) -> f64 {
    let w = (az + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can land exactly on 360 through rounding
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

pub fn azel_to_doa(a: AzEl) -> Result<Doa> {
    if !a.azimuth.is_finite() || !a.elevation.is_finite() {
        return Err(Error::NonFinite("azimuth/elevation"));
    }
    if !(-90.0..=90.0).contains(&a.elevation) {
        return Err(Error::Range(format!(
            "elevation {} outside [-90, 90]",
            a.elevation
        )));
    }
    let (az, el) = (a.azimuth.to_radians(), a.elevation.to_radians());
    Ok(Doa::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
}

/// Inverse of [`azel_to_doa`]. Accepts any non-zero vector.
pub fn doa_to_azel(d: Doa) -> Result<AzEl> {
    let u = d.normalized()?;
    let az = u.y.atan2(u.x).to_degrees();
    let el = u.z.clamp(-1.0, 1.0).asin().to_degrees();
    Ok(AzEl::new(wrap_azimuth(az), el))
}

/// Random angular jitter: independent uniform offsets in `[-max_deg, max_deg]`
/// on azimuth and elevation. Elevation is clamped at the poles.
pub fn perturb_doa<R: Rng + ?Sized>(d: Doa, max_deg: f64, rng: &mut R) -> Result<Doa> {
    if max_deg <= 0.0 {
        return Ok(d);
    }
    let a = doa_to_azel(d)?;
    let daz = rng.random_range(-max_deg..=max_deg);
    let del = rng.random_range(-max_deg..=max_deg);
    let out = AzEl::new(
        wrap_azimuth(a.azimuth + daz),
        (a.elevation + del).clamp(-90.0, 90.0),
    );
    azel_to_doa(out)
}

/// Direction drawn uniformly from the unit sphere.
pub fn random_unit_doa<R: Rng + ?Sized>(rng: &mut R) -> Doa {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Doa::new(r * phi.cos(), r * phi.sin(), z)
}

/// One of the 16 axis-aligned first-order ambisonic transforms: a rotation
/// by a multiple of 90° in azimuth, optionally preceded by a reflection
/// `az → -az` and followed by an elevation flip `el → -el`.
///
/// Channel order is `(W, X, Y, Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FoaTransform {
    /// Azimuth rotation in quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub reflect_azimuth: bool,
    pub flip_elevation: bool,
}

impl FoaTransform {
    pub const IDENTITY: FoaTransform = FoaTransform {
        quarter_turns: 0,
        reflect_azimuth: false,
        flip_elevation: false,
    };

    pub fn new(quarter_turns: u8, reflect_azimuth: bool, flip_elevation: bool) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            reflect_azimuth,
            flip_elevation,
        }
    }

    /// All 16 transforms; index order matches [`FoaTransform::index`].
    pub fn all() -> impl Iterator<Item = FoaTransform> {
        (0..16).map(Self::from_index)
    }

    pub fn from_index(i: usize) -> Self {
        Self::new((i % 4) as u8, (i / 4) % 2 == 1, (i / 8) % 2 == 1)
    }

    pub fn index(self) -> usize {
        self.quarter_turns as usize
            + 4 * self.reflect_azimuth as usize
            + 8 * self.flip_elevation as usize
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_index(rng.random_range(0..16))
    }

    pub fn inverse(self) -> Self {
        if self.reflect_azimuth {
            // az -> q*90 - az is an involution
            self
        } else {
            Self::new((4 - self.quarter_turns) % 4, false, self.flip_elevation)
        }
    }

    /// `(cos, sin)` of the rotation angle, exact.
    fn cos_sin(self) -> (f64, f64) {
        match self.quarter_turns {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    }

    /// Signed permutation acting on `(W, X, Y, Z)` column vectors.
    pub fn channel_matrix(self) -> [[f64; 4]; 4] {
        let (c, s) = self.cos_sin();
        let r = if self.reflect_azimuth { -1.0 } else { 1.0 };
        let f = if self.flip_elevation { -1.0 } else { 1.0 };
        [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, c, -s * r, 0.0],
            [0.0, s, c * r, 0.0],
            [0.0, 0.0, 0.0, f],
        ]
    }

    pub fn apply_channels(self, wxyz: [f64; 4]) -> [f64; 4] {
        let m = self.channel_matrix();
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(m.iter()) {
            *o = row.iter().zip(wxyz.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// The same map on Cartesian directions (the X, Y, Z block).
    pub fn apply_doa(self, d: Doa) -> Doa {
        let [_, x, y, z] = self.apply_channels([0.0, d.x, d.y, d.z]);
        Doa::new(x, y, z)
    }

    pub fn apply_azel(self, a: AzEl) -> AzEl {
        let az = if self.reflect_azimuth {
            -a.azimuth
        } else {
            a.azimuth
        };
        let el = if self.flip_elevation {
            -a.elevation
        } else {
            a.elevation
        };
        AzEl::new(wrap_azimuth(az + 90.0 * self.quarter_turns as f64), el)
    }
}

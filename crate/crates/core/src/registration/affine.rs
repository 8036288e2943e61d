use serde::{Deserialize, Serialize};

use super::RegistrationError;

const SINGULAR_DET: f64 = 1e-8;

/// Planar affine map `(x, y) -> (a x + b y + tx, c x + d y + ty)`.
///
/// Serialized as the row-major 2x3 matrix `[[a, b, tx], [c, d, ty]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[[f64; 3]; 2]", into = "[[f64; 3]; 2]")]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl From<[[f64; 3]; 2]> for AffineTransform {
    fn from(m: [[f64; 3]; 2]) -> Self {
        Self::new(m[0][0], m[0][1], m[1][0], m[1][1], m[0][2], m[1][2])
    }
}

impl From<AffineTransform> for [[f64; 3]; 2] {
    fn from(t: AffineTransform) -> Self {
        t.to_rows()
    }
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub const fn new(a: f64, b: f64, c: f64, d: f64, tx: f64, ty: f64) -> Self {
        Self { a, b, c, d, tx, ty }
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0, tx, ty)
    }

    pub fn to_rows(&self) -> [[f64; 3]; 2] {
        [[self.a, self.b, self.tx], [self.c, self.d, self.ty]]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > SINGULAR_DET && self.to_rows().iter().flatten().all(|v| v.is_finite())
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a: self.a * inner.a + self.b * inner.c,
            b: self.a * inner.b + self.b * inner.d,
            c: self.c * inner.a + self.d * inner.c,
            d: self.c * inner.b + self.d * inner.d,
            tx: self.a * inner.tx + self.b * inner.ty + self.tx,
            ty: self.c * inner.tx + self.d * inner.ty + self.ty,
        }
    }

    pub fn invert(&self) -> Result<AffineTransform, RegistrationError> {
        if !self.is_invertible() {
            return Err(RegistrationError::Degenerate(format!(
                "transform is singular (det = {:e})",
                self.det()
            )));
        }
        let inv = 1.0 / self.det();
        let a = self.d * inv;
        let b = -self.b * inv;
        let c = -self.c * inv;
        let d = self.a * inv;
        Ok(AffineTransform {
            a,
            b,
            c,
            d,
            tx: -(a * self.tx + b * self.ty),
            ty: -(c * self.tx + d * self.ty),
        })
    }

    /// Largest absolute difference over the six coefficients.
    pub fn max_coeff_diff(&self, other: &AffineTransform) -> f64 {
        self.to_rows()
            .iter()
            .flatten()
            .zip(other.to_rows().iter().flatten())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }

    /// Largest displacement between the two maps over the corners of a
    /// `width x height` image.
    pub fn max_corner_error(&self, other: &AffineTransform, width: f64, height: f64) -> f64 {
        [(0.0, 0.0), (width, 0.0), (0.0, height), (width, height)]
            .iter()
            .map(|&(x, y)| {
                let p = self.apply(x, y);
                let q = other.apply(x, y);
                (p.0 - q.0).hypot(p.1 - q.1)
            })
            .fold(0.0, f64::max)
    }
}

/// A point correspondence: `src` in one image, `dst` in the other.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPair {
    pub src: (f64, f64),
    pub dst: (f64, f64),
}

impl PointPair {
    pub fn new(src: (f64, f64), dst: (f64, f64)) -> Self {
        Self { src, dst }
    }

    pub fn residual(&self, t: &AffineTransform) -> f64 {
        let (x, y) = t.apply(self.src.0, self.src.1);
        (x - self.dst.0).hypot(y - self.dst.1)
    }
}

/// Least-squares affine fit minimizing `Σ |T(src) - dst|²`.
///
/// Points are centred before solving, so the linear part comes from the 2x2
/// source covariance and the translation from the centroids.
pub fn estimate_affine_lsq(pairs: &[PointPair]) -> Result<AffineTransform, RegistrationError> {
    if pairs.len() < 3 {
        return Err(RegistrationError::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        sx += p.src.0;
        sy += p.src.1;
        dx += p.dst.0;
        dy += p.dst.1;
    }
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);

    // source covariance [[cxx, cxy], [cxy, cyy]] and cross terms dst·srcᵀ
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    let (mut uxx, mut uxy, mut uyx, mut uyy) = (0.0, 0.0, 0.0, 0.0);
    for p in pairs {
        let (px, py) = (p.src.0 - sx, p.src.1 - sy);
        let (qx, qy) = (p.dst.0 - dx, p.dst.1 - dy);
        cxx += px * px;
        cxy += px * py;
        cyy += py * py;
        uxx += qx * px;
        uxy += qx * py;
        uyx += qy * px;
        uyy += qy * py;
    }
    let det = cxx * cyy - cxy * cxy;
    let trace = cxx + cyy;
    if !(trace > 0.0) || det <= 1e-12 * trace * trace {
        return Err(RegistrationError::Degenerate(
            "source points are collinear or coincident".into(),
        ));
    }
    let (ixx, ixy, iyy) = (cyy / det, -cxy / det, cxx / det);
    let a = uxx * ixx + uxy * ixy;
    let b = uxx * ixy + uxy * iyy;
    let c = uyx * ixx + uyy * ixy;
    let d = uyx * ixy + uyy * iyy;
    Ok(AffineTransform {
        a,
        b,
        c,
        d,
        tx: dx - (a * sx + b * sy),
        ty: dy - (c * sx + d * sy),
    })
}

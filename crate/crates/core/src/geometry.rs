//! Affine algebra over points and Gaussians in homogeneous 2D coordinates.
//!
//! An [`AffineTransform`] is the 3x3 matrix
//!
//! ```text
//! | xx  xy  tx |
//! | yx  yy  ty |
//! |  0   0   1 |
//! ```
//!
//! stored as its six free coefficients. The last row is implicit.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this |det| of the linear block a transform is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when both coordinates lie in `[-bound, bound]`.
    pub fn within(self, bound: f64) -> bool {
        self.x.abs() <= bound && self.y.abs() <= bound
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<Point> for f64 {
    type Output = Point;
    fn mul(self, rhs: Point) -> Point {
        Point::new(self * rhs.x, self * rhs.y)
    }
}

/// Six-parameter affine map `p -> A p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub xx: f64,
    pub xy: f64,
    pub yx: f64,
    pub yy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        xx: 1.0,
        xy: 0.0,
        yx: 0.0,
        yy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Parameter order used everywhere a transform is flattened.
    pub const PARAMS: usize = 6;

    pub fn from_params(p: [f64; 6]) -> Self {
        AffineTransform {
            xx: p[0],
            xy: p[1],
            yx: p[2],
            yy: p[3],
            tx: p[4],
            ty: p[5],
        }
    }

    pub fn params(&self) -> [f64; 6] {
        [self.xx, self.xy, self.yx, self.yy, self.tx, self.ty]
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    /// Counter-clockwise in a y-up frame; with y pointing down (image rows)
    /// a positive angle turns clockwise on screen.
    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        AffineTransform {
            xx: c,
            xy: -s,
            yx: s,
            yy: c,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        AffineTransform {
            xx: sx,
            yy: sy,
            ..Self::IDENTITY
        }
    }

    /// Rotation by `radians` and isotropic `scale` that keeps `pivot` fixed.
    pub fn rotation_about(pivot: Point, radians: f64, scale: f64) -> Self {
        let linear = compose(&Self::scaling(scale, scale), &Self::rotation(radians));
        Self::pinned(linear, pivot, pivot)
    }

    /// The transform with linear block taken from `linear` that maps `from` to `to`.
    pub fn pinned(linear: AffineTransform, from: Point, to: Point) -> Self {
        let moved = linear.apply_linear(from);
        AffineTransform {
            tx: to.x - moved.x,
            ty: to.y - moved.y,
            ..linear
        }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.yx
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn apply_linear(&self, p: Point) -> Point {
        Point::new(self.xx * p.x + self.xy * p.y, self.yx * p.x + self.yy * p.y)
    }

    pub fn apply(&self, p: Point) -> Point {
        apply_point(self, p)
    }

    pub fn inverse(&self) -> Option<AffineTransform> {
        let det = self.det();
        if !(det.abs() >= SINGULAR_DET) {
            return None;
        }
        let xx = self.yy / det;
        let xy = -self.xy / det;
        let yx = -self.yx / det;
        let yy = self.xx / det;
        Some(AffineTransform {
            xx,
            xy,
            yx,
            yy,
            tx: -(xx * self.tx + xy * self.ty),
            ty: -(yx * self.tx + yy * self.ty),
        })
    }
}

pub fn apply_point(t: &AffineTransform, p: Point) -> Point {
    Point::new(
        t.xx * p.x + t.xy * p.y + t.tx,
        t.yx * p.x + t.yy * p.y + t.ty,
    )
}

/// `outer * inner` in homogeneous coordinates: applies `inner` first.
pub fn compose(outer: &AffineTransform, inner: &AffineTransform) -> AffineTransform {
    AffineTransform {
        xx: outer.xx * inner.xx + outer.xy * inner.yx,
        xy: outer.xx * inner.xy + outer.xy * inner.yy,
        yx: outer.yx * inner.xx + outer.yy * inner.yx,
        yy: outer.yx * inner.xy + outer.yy * inner.yy,
        tx: outer.xx * inner.tx + outer.xy * inner.ty + outer.tx,
        ty: outer.yx * inner.tx + outer.yy * inner.ty + outer.ty,
    }
}

/// Symmetric 2x2 covariance `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn diagonal(var_x: f64, var_y: f64) -> Self {
        Cov2 {
            xx: var_x,
            xy: 0.0,
            yy: var_y,
        }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn is_positive_definite(&self) -> bool {
        self.xx > 0.0 && self.det() > 0.0
    }

    pub fn inverse(&self) -> Option<Cov2> {
        let det = self.det();
        if !(det > 0.0) {
            return None;
        }
        Some(Cov2 {
            xx: self.yy / det,
            xy: -self.xy / det,
            yy: self.xx / det,
        })
    }

    /// `d^T C d`.
    pub fn quad_form(&self, d: Point) -> f64 {
        self.xx * d.x * d.x + 2.0 * self.xy * d.x * d.y + self.yy * d.y * d.y
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_trace = 0.5 * (self.xx + self.yy);
        let disc = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (half_trace - disc, half_trace + disc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: Point,
    pub cov: Cov2,
}

impl Gaussian2 {
    pub fn new(mean: Point, cov: Cov2) -> Result<Self> {
        if !mean.is_finite() || !cov.is_positive_definite() {
            return Err(Error::Geometry(format!(
                "covariance {cov:?} is not positive definite"
            )));
        }
        Ok(Gaussian2 { mean, cov })
    }
}

/// Pushes a Gaussian through `t`: mean is mapped, covariance becomes `A C A^T`.
pub fn transform_gaussian(t: &AffineTransform, g: &Gaussian2) -> Result<Gaussian2> {
    let det = t.det();
    if !(det.abs() >= SINGULAR_DET) {
        return Err(Error::SingularTransform {
            part: String::new(),
            det,
        });
    }
    let c = &g.cov;
    // A C
    let ac_xx = t.xx * c.xx + t.xy * c.xy;
    let ac_xy = t.xx * c.xy + t.xy * c.yy;
    let ac_yx = t.yx * c.xx + t.yy * c.xy;
    let ac_yy = t.yx * c.xy + t.yy * c.yy;
    let cov = Cov2 {
        xx: ac_xx * t.xx + ac_xy * t.xy,
        xy: ac_xx * t.yx + ac_xy * t.yy,
        yy: ac_yx * t.yx + ac_yy * t.yy,
    };
    Ok(Gaussian2 {
        mean: apply_point(t, g.mean),
        cov,
    })
}

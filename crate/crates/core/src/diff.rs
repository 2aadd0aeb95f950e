//! Exact gradients of the losses with respect to the flattened per-part
//! transform parameters, plus a central-difference oracle.
//!
//! Parameters are laid out as `(xx, xy, yx, yy, tx, ty)` per part, parts in
//! template order.
//!
//! The reconstruction gradient differentiates the rendered value through the
//! back-projection of each pixel into the part's canonical frame. With
//! `u = A^-1 (p - t)`, `e = u - mu`, `w = S^-1 e` and `z = A^-T w`, the
//! rendered value `r = exp(-e.w / 2)` has
//!
//! ```text
//! dr/dA_ij = r z_i u_j        dr/dt_i = r z_i
//! ```

use std::ops::Deref;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, Point};
use crate::loss::{
    anchor_loss, boundary_loss, check_target, FeatureExtractor, LossBreakdown, LossConfig,
};
use crate::geometry::transform_gaussian;
use crate::render::{pixel_center, render_analytic, singular, support_box, PartMaps};
use crate::template::Template;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() % AffineTransform::PARAMS != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters is not a multiple of {}",
                values.len(),
                AffineTransform::PARAMS
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(ParamVector(values))
    }

    pub fn identity(parts: usize) -> Self {
        Self::from_transforms(&vec![AffineTransform::IDENTITY; parts])
    }

    pub fn from_transforms(transforms: &[AffineTransform]) -> Self {
        ParamVector(transforms.iter().flat_map(|t| t.params()).collect())
    }

    pub fn to_transforms(&self) -> Vec<AffineTransform> {
        self.0
            .chunks_exact(AffineTransform::PARAMS)
            .map(|c| AffineTransform::from_params(c.try_into().unwrap()))
            .collect()
    }

    pub fn num_parts(&self) -> usize {
        self.0.len() / AffineTransform::PARAMS
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Gradient(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }
}

impl Deref for Gradient {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Scalar function of the parameters with a known gradient.
pub trait Objective: Sync {
    fn value(&self, at: &ParamVector) -> Result<f64>;
    fn value_and_gradient(&self, at: &ParamVector) -> Result<(f64, Gradient)>;
}

/// Evaluates the closed-form gradient, rejecting non-finite objectives.
pub fn gradient(objective: &dyn Objective, at: &ParamVector) -> Result<Gradient> {
    let (value, grad) = objective.value_and_gradient(at)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective value {value}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(grad)
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff<F>(objective: F, at: &ParamVector, step: f64) -> Result<Gradient>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {step}")));
    }
    let eval = |p: &ParamVector| -> Result<f64> {
        let v = objective(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("objective value {v}")))
        }
    };
    eval(at)?;
    let values = (0..at.len())
        .into_par_iter()
        .map(|i| {
            let mut p = at.clone();
            p.0[i] = at[i] + step;
            let up = eval(&p)?;
            p.0[i] = at[i] - step;
            let down = eval(&p)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradient(values))
}

fn check_len(template: &Template, at: &ParamVector) -> Result<()> {
    if at.len() != template.num_parts() * AffineTransform::PARAMS {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters for {} parts",
            at.len(),
            template.num_parts()
        )));
    }
    Ok(())
}

/// d(transformed point)/d(params) contracted with `v`, added into `block`.
fn accumulate_point(block: &mut [f64], scale: f64, v: Point, anchor: Point) {
    block[0] += scale * v.x * anchor.x;
    block[1] += scale * v.x * anchor.y;
    block[2] += scale * v.y * anchor.x;
    block[3] += scale * v.y * anchor.y;
    block[4] += scale * v.x;
    block[5] += scale * v.y;
}

pub fn anchor_gradient(template: &Template, transforms: &[AffineTransform]) -> Gradient {
    let mut grad = Gradient::zeros(transforms.len() * AffineTransform::PARAMS);
    let pairs = template.resolved_pairs();
    if pairs.is_empty() {
        return grad;
    }
    let scale = 2.0 / pairs.len() as f64;
    let parts = template.parts();
    for p in pairs {
        let a = parts[p.first_part].anchors[p.first_anchor];
        let b = parts[p.second_part].anchors[p.second_anchor];
        let d = transforms[p.first_part].apply(a) - transforms[p.second_part].apply(b);
        let block = |k: usize| k * AffineTransform::PARAMS..(k + 1) * AffineTransform::PARAMS;
        accumulate_point(&mut grad.0[block(p.first_part)], scale, d, a);
        accumulate_point(&mut grad.0[block(p.second_part)], -scale, d, b);
    }
    grad
}

/// Subgradient 0 on the kink `|x| = bound`.
pub fn boundary_gradient(
    template: &Template,
    transforms: &[AffineTransform],
    bound: f64,
) -> Gradient {
    let mut grad = Gradient::zeros(transforms.len() * AffineTransform::PARAMS);
    for (k, (part, t)) in template.parts().iter().zip(transforms).enumerate() {
        let block = &mut grad.0[k * AffineTransform::PARAMS..(k + 1) * AffineTransform::PARAMS];
        for &a in &part.anchors {
            let p = t.apply(a);
            let sx = if p.x.abs() > bound { p.x.signum() } else { 0.0 };
            let sy = if p.y.abs() > bound { p.y.signum() } else { 0.0 };
            accumulate_point(block, 1.0, Point::new(sx, sy), a);
        }
    }
    grad
}

/// Reconstruction loss and its gradient for given transforms.
pub fn reconstruction_value_and_gradient(
    template: &Template,
    transforms: &[AffineTransform],
    target: &PartMaps,
    features: &dyn FeatureExtractor,
    resolution: usize,
) -> Result<(f64, Gradient)> {
    check_target(template, target, resolution)?;
    let rendered = render_analytic(template, transforms, resolution)?;
    let ours = features.extract(&rendered)?;
    let theirs = features.extract(target)?;
    if ours.is_empty() {
        return Ok((0.0, Gradient::zeros(transforms.len() * AffineTransform::PARAMS)));
    }
    let norm = 1.0 / ours.len() as f64;
    let mut value = 0.0;
    let mut grad_features = Vec::with_capacity(ours.len());
    for (a, b) in ours.iter().zip(theirs.iter()) {
        let d = a - b;
        value += d.abs();
        grad_features.push(if d > 0.0 {
            norm
        } else if d < 0.0 {
            -norm
        } else {
            0.0
        });
    }
    value *= norm;
    let grad_maps = features.backprop(&rendered, grad_features)?;

    let size = resolution;
    let blocks = template
        .parts()
        .par_iter()
        .zip(transforms.par_iter())
        .enumerate()
        .map(|(k, (part, t))| {
            let inv = t.inverse().ok_or_else(|| singular(template, k, t))?;
            let prec = part
                .gaussian()
                .cov
                .inverse()
                .expect("template variances are positive");
            let values = rendered.channel(k);
            let weights = &grad_maps[k * size * size..(k + 1) * size * size];
            let mut block = [0.0; AffineTransform::PARAMS];
            let moved = transform_gaussian(t, &part.gaussian()).map_err(|_| singular(template, k, t))?;
            let Some(((c0, c1), (r0, r1))) = support_box(size, moved.mean, &moved.cov) else {
                return Ok(block);
            };
            for row in r0..=r1 {
                let py = pixel_center(row, size);
                for col in c0..=c1 {
                    let i = row * size + col;
                    let r = values[i];
                    let w = weights[i];
                    if r == 0.0 || w == 0.0 {
                        continue;
                    }
                    let u = inv.apply(Point::new(pixel_center(col, size), py));
                    let e = u - part.mean;
                    let wx = prec.xx * e.x + prec.xy * e.y;
                    let wy = prec.xy * e.x + prec.yy * e.y;
                    let z = Point::new(inv.xx * wx + inv.yx * wy, inv.xy * wx + inv.yy * wy);
                    accumulate_point(&mut block, w * r, z, u);
                }
            }
            Ok(block)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, Gradient(blocks.into_iter().flatten().collect())))
}

/// Loss breakdown and gradient of the weighted total.
pub fn total_value_and_gradient(
    template: &Template,
    transforms: &[AffineTransform],
    target: &PartMaps,
    config: &LossConfig,
    resolution: usize,
) -> Result<(LossBreakdown, Gradient)> {
    config.validate()?;
    let extractor = config.recon_features.extractor();
    let (recon, mut grad) = reconstruction_value_and_gradient(
        template,
        transforms,
        target,
        extractor.as_ref(),
        resolution,
    )?;
    let breakdown = LossBreakdown::combine(
        recon,
        anchor_loss(template, transforms),
        boundary_loss(template, transforms, config.boundary_b),
        config,
    );
    if config.lambda1 != 0.0 {
        grad.add_scaled(config.lambda1, &anchor_gradient(template, transforms));
    }
    if config.lambda2 != 0.0 {
        grad.add_scaled(
            config.lambda2,
            &boundary_gradient(template, transforms, config.boundary_b),
        );
    }
    Ok((breakdown, grad))
}

pub struct AnchorObjective<'a> {
    pub template: &'a Template,
}

impl Objective for AnchorObjective<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        check_len(self.template, at)?;
        Ok(anchor_loss(self.template, &at.to_transforms()))
    }

    fn value_and_gradient(&self, at: &ParamVector) -> Result<(f64, Gradient)> {
        check_len(self.template, at)?;
        let tr = at.to_transforms();
        Ok((anchor_loss(self.template, &tr), anchor_gradient(self.template, &tr)))
    }
}

pub struct BoundaryObjective<'a> {
    pub template: &'a Template,
    pub bound: f64,
}

impl Objective for BoundaryObjective<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        check_len(self.template, at)?;
        Ok(boundary_loss(self.template, &at.to_transforms(), self.bound))
    }

    fn value_and_gradient(&self, at: &ParamVector) -> Result<(f64, Gradient)> {
        check_len(self.template, at)?;
        let tr = at.to_transforms();
        Ok((
            boundary_loss(self.template, &tr, self.bound),
            boundary_gradient(self.template, &tr, self.bound),
        ))
    }
}

pub struct ReconObjective<'a> {
    pub template: &'a Template,
    pub target: &'a PartMaps,
    pub features: &'a dyn FeatureExtractor,
    pub resolution: usize,
}

impl Objective for ReconObjective<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        check_len(self.template, at)?;
        let rendered = render_analytic(self.template, &at.to_transforms(), self.resolution)?;
        crate::loss::reconstruction_loss(&rendered, self.target, self.features)
    }

    fn value_and_gradient(&self, at: &ParamVector) -> Result<(f64, Gradient)> {
        check_len(self.template, at)?;
        reconstruction_value_and_gradient(
            self.template,
            &at.to_transforms(),
            self.target,
            self.features,
            self.resolution,
        )
    }
}

pub struct TotalObjective<'a> {
    pub template: &'a Template,
    pub target: &'a PartMaps,
    pub config: LossConfig,
    pub resolution: usize,
}

impl Objective for TotalObjective<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        check_len(self.template, at)?;
        crate::loss::total_loss(
            self.template,
            &at.to_transforms(),
            self.target,
            &self.config,
            self.resolution,
        )
        .map(|b| b.total)
    }

    fn value_and_gradient(&self, at: &ParamVector) -> Result<(f64, Gradient)> {
        check_len(self.template, at)?;
        total_value_and_gradient(
            self.template,
            &at.to_transforms(),
            self.target,
            &self.config,
            self.resolution,
        )
        .map(|(b, g)| (b.total, g))
    }
}

/// `sum_i w_i f_i`.
pub struct Weighted<'a> {
    pub terms: Vec<(f64, &'a dyn Objective)>,
}

impl Objective for Weighted<'_> {
    fn value(&self, at: &ParamVector) -> Result<f64> {
        self.terms
            .iter()
            .map(|(w, f)| f.value(at).map(|v| w * v))
            .sum()
    }

    fn value_and_gradient(&self, at: &ParamVector) -> Result<(f64, Gradient)> {
        let mut value = 0.0;
        let mut grad = Gradient::zeros(at.len());
        for (w, f) in &self.terms {
            let (v, g) = f.value_and_gradient(at)?;
            value += w * v;
            grad.add_scaled(*w, &g);
        }
        Ok((value, grad))
    }
}

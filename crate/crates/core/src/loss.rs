//! Anchor, boundary and reconstruction losses and their weighted sum.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;
use crate::render::{render_analytic, PartMaps};
use crate::template::Template;

/// Feature map applied to both rendering and target before the L1 comparison.
///
/// `backprop` is the vector-Jacobian product: given d(loss)/d(features) it
/// returns d(loss)/d(map values), aligned with [`PartMaps::data`].
pub trait FeatureExtractor: Send + Sync {
    fn extract<'a>(&self, maps: &'a PartMaps) -> Result<Cow<'a, [f64]>>;
    fn backprop(&self, maps: &PartMaps, grad_features: Vec<f64>) -> Result<Vec<f64>>;
}

/// Raw map values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl FeatureExtractor for Identity {
    fn extract<'a>(&self, maps: &'a PartMaps) -> Result<Cow<'a, [f64]>> {
        Ok(Cow::Borrowed(maps.data()))
    }

    fn backprop(&self, _maps: &PartMaps, grad_features: Vec<f64>) -> Result<Vec<f64>> {
        Ok(grad_features)
    }
}

/// Per-channel `factor x factor` average pooling.
#[derive(Debug, Clone, Copy)]
pub struct AvgPool {
    pub factor: usize,
}

impl AvgPool {
    fn pooled_size(&self, maps: &PartMaps) -> Result<usize> {
        if self.factor == 0 || maps.size() % self.factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "pool factor {} does not divide resolution {}",
                self.factor,
                maps.size()
            )));
        }
        Ok(maps.size() / self.factor)
    }
}

impl FeatureExtractor for AvgPool {
    fn extract<'a>(&self, maps: &'a PartMaps) -> Result<Cow<'a, [f64]>> {
        let m = self.pooled_size(maps)?;
        let f = self.factor;
        let n = maps.size();
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; maps.channels() * m * m];
        for k in 0..maps.channels() {
            let ch = maps.channel(k);
            for row in 0..n {
                for col in 0..n {
                    out[(k * m + row / f) * m + col / f] += ch[row * n + col] * norm;
                }
            }
        }
        Ok(Cow::Owned(out))
    }

    fn backprop(&self, maps: &PartMaps, grad_features: Vec<f64>) -> Result<Vec<f64>> {
        let m = self.pooled_size(maps)?;
        let f = self.factor;
        let n = maps.size();
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; maps.data().len()];
        for k in 0..maps.channels() {
            for row in 0..n {
                for col in 0..n {
                    out[(k * n + row) * n + col] = grad_features[(k * m + row / f) * m + col / f] * norm;
                }
            }
        }
        Ok(out)
    }
}

/// Serializable choice of feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    #[default]
    Identity,
    AvgPool(usize),
}

impl Features {
    pub fn extractor(&self) -> Box<dyn FeatureExtractor> {
        match *self {
            Features::Identity => Box::new(Identity),
            Features::AvgPool(factor) => Box::new(AvgPool { factor }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Anchor-loss weight.
    pub lambda1: f64,
    /// Boundary-loss weight.
    pub lambda2: f64,
    /// Half-width of the admissible square for anchors, in normalized units.
    pub boundary_b: f64,
    pub recon_features: Features,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            boundary_b: 1.0,
            recon_features: Features::Identity,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda1 = {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda2 = {}", self.lambda2)));
        }
        if !(self.boundary_b > 0.0 && self.boundary_b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "boundary_b = {}",
                self.boundary_b
            )));
        }
        if let Features::AvgPool(0) = self.recon_features {
            return Err(Error::InvalidArgument("avg_pool factor 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub anchor: f64,
    pub boundary: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(recon: f64, anchor: f64, boundary: f64, config: &LossConfig) -> Self {
        LossBreakdown {
            recon,
            anchor,
            boundary,
            total: recon + config.lambda1 * anchor + config.lambda2 * boundary,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite()
            && self.anchor.is_finite()
            && self.boundary.is_finite()
            && self.total.is_finite()
    }
}

/// Mean over anchor pairs of the squared distance between the two
/// transformed anchors. Zero for a template without pairs.
pub fn anchor_loss(template: &Template, transforms: &[AffineTransform]) -> f64 {
    let pairs = template.resolved_pairs();
    if pairs.is_empty() {
        return 0.0;
    }
    let parts = template.parts();
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            let a = transforms[p.first_part].apply(parts[p.first_part].anchors[p.first_anchor]);
            let b = transforms[p.second_part].apply(parts[p.second_part].anchors[p.second_anchor]);
            (a - b).norm_sq()
        })
        .sum();
    sum / pairs.len() as f64
}

/// `|v|` when `|v| > bound`, else 0.
pub fn overflow(v: f64, bound: f64) -> f64 {
    if v.abs() > bound {
        v.abs()
    } else {
        0.0
    }
}

/// Sum over every transformed anchor of its x and y overflow beyond `bound`.
pub fn boundary_loss(template: &Template, transforms: &[AffineTransform], bound: f64) -> f64 {
    template
        .parts()
        .iter()
        .zip(transforms)
        .flat_map(|(part, t)| part.anchors.iter().map(move |&a| t.apply(a)))
        .map(|p| overflow(p.x, bound) + overflow(p.y, bound))
        .sum()
}

pub fn reconstruction_loss(
    rendered: &PartMaps,
    target: &PartMaps,
    features: &dyn FeatureExtractor,
) -> Result<f64> {
    if !rendered.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "rendered {}x{}x{} vs target {}x{}x{}",
            rendered.channels(),
            rendered.size(),
            rendered.size(),
            target.channels(),
            target.size(),
            target.size()
        )));
    }
    let a = features.extract(rendered)?;
    let b = features.extract(target)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

pub(crate) fn check_target(template: &Template, target: &PartMaps, resolution: usize) -> Result<()> {
    if target.channels() != template.num_parts() || target.size() != resolution {
        return Err(Error::ShapeMismatch(format!(
            "target is {}x{}x{}, expected {}x{resolution}x{resolution}",
            target.channels(),
            target.size(),
            target.size(),
            template.num_parts()
        )));
    }
    Ok(())
}

/// Renders at `resolution` and evaluates all three terms.
pub fn total_loss(
    template: &Template,
    transforms: &[AffineTransform],
    target: &PartMaps,
    config: &LossConfig,
    resolution: usize,
) -> Result<LossBreakdown> {
    config.validate()?;
    check_target(template, target, resolution)?;
    let rendered = render_analytic(template, transforms, resolution)?;
    let recon = reconstruction_loss(&rendered, target, config.recon_features.extractor().as_ref())?;
    Ok(LossBreakdown::combine(
        recon,
        anchor_loss(template, transforms),
        boundary_loss(template, transforms, config.boundary_b),
        config,
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::Point;
    use crate::template::{canonical_human_template, AnchorPair, AnchorRef, GaussianPart};

    fn identity(t: &Template) -> Vec<AffineTransform> {
        vec![AffineTransform::IDENTITY; t.num_parts()]
    }

    /// Three parts at the origin joined in a chain by two pairs.
    fn chain() -> Template {
        let part = |id: &str| GaussianPart {
            id: id.into(),
            label: id.into(),
            mean: Point::ORIGIN,
            variance: Point::new(0.01, 0.01),
            anchors: vec![Point::ORIGIN],
        };
        let pair = |a: &str, b: &str| AnchorPair {
            first: AnchorRef(a.into(), 0),
            second: AnchorRef(b.into(), 0),
        };
        Template::new(
            vec![part("a"), part("b"), part("c")],
            vec![pair("a", "b"), pair("b", "c")],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn canonical_anchor_loss_is_zero() {
        let t = canonical_human_template();
        assert_eq!(anchor_loss(&t, &identity(&t)), 0.0);
        assert_eq!(boundary_loss(&t, &identity(&t), 1.0), 0.0);
    }

    #[test]
    fn anchor_loss_examples() {
        let t = chain();
        // one pair apart by (0.3, 0.4), the other coincident
        let tr = [
            AffineTransform::IDENTITY,
            AffineTransform::translation(0.3, 0.4),
            AffineTransform::translation(0.3, 0.4),
        ];
        assert!((anchor_loss(&t, &tr) - 0.25 / 2.0).abs() < 1e-15);
        // squared distances 0.25 and 0.01
        let tr = [
            AffineTransform::IDENTITY,
            AffineTransform::translation(0.3, 0.4),
            AffineTransform::translation(0.3, 0.5),
        ];
        assert!((anchor_loss(&t, &tr) - 0.13).abs() < 1e-15);

        let two = Template::new(
            t.parts()[..2].to_vec(),
            t.anchor_pairs()[..1].to_vec(),
            vec![],
            None,
        )
        .unwrap();
        let tr = [AffineTransform::IDENTITY, AffineTransform::translation(0.3, 0.4)];
        assert!((anchor_loss(&two, &tr) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn boundary_loss_examples() {
        let t = chain();
        let mut tr = vec![AffineTransform::IDENTITY; 3];
        assert_eq!(boundary_loss(&t, &tr, 1.0), 0.0);
        tr[0] = AffineTransform::translation(1.5, 0.0);
        assert_eq!(boundary_loss(&t, &tr, 1.0), 1.5);
        tr[0] = AffineTransform::translation(-2.0, 1.2);
        assert!((boundary_loss(&t, &tr, 1.0) - 3.2).abs() < 1e-15);
        // exactly on the bound is inside
        tr[0] = AffineTransform::translation(1.0, -1.0);
        assert_eq!(boundary_loss(&t, &tr, 1.0), 0.0);
    }

    #[test]
    fn recon_examples() {
        let t = canonical_human_template();
        let a = render_analytic(&t, &identity(&t), 32).unwrap();
        assert_eq!(reconstruction_loss(&a, &a, &Identity).unwrap(), 0.0);
        let zero = PartMaps::zeros(18, 32);
        let mass: f64 = a.data().iter().sum();
        let got = reconstruction_loss(&a, &zero, &Identity).unwrap();
        assert!((got - mass / (18.0 * 32.0 * 32.0)).abs() < 1e-15);
        assert!(matches!(
            reconstruction_loss(&a, &PartMaps::zeros(18, 16), &Identity),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn total_examples() {
        let t = canonical_human_template();
        let id = identity(&t);
        let target = render_analytic(&t, &id, 32).unwrap();
        let cfg = LossConfig::default();
        assert_eq!(total_loss(&t, &id, &target, &cfg, 32).unwrap().total, 0.0);

        let mut tr = id.clone();
        tr[5] = AffineTransform::translation(0.1, -0.05);
        let from_same = render_analytic(&t, &tr, 32).unwrap();
        let b = total_loss(&t, &tr, &from_same, &cfg, 32).unwrap();
        assert_eq!(b.recon, 0.0);
        assert_eq!(b.anchor, anchor_loss(&t, &tr));
        assert!(b.anchor > 0.0);

        let off = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg
        };
        let b = total_loss(&t, &tr, &target, &off, 32).unwrap();
        assert_eq!(b.total, b.recon);
        assert!(total_loss(&t, &tr, &target, &cfg, 64).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = LossConfig {
            boundary_b: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda1: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn avg_pool_shapes() {
        let t = canonical_human_template();
        let a = render_analytic(&t, &identity(&t), 32).unwrap();
        let f = AvgPool { factor: 4 }.extract(&a).unwrap();
        assert_eq!(f.len(), 18 * 8 * 8);
        let total: f64 = a.data().iter().sum();
        assert!((f.iter().sum::<f64>() * 16.0 - total).abs() < 1e-9);
        assert!(AvgPool { factor: 3 }.extract(&a).is_err());
    }

    fn small_transform() -> impl Strategy<Value = AffineTransform> {
        prop::array::uniform6(-0.3f64..0.3).prop_map(|d| {
            AffineTransform::from_params([1.0 + d[0], d[1], d[2], 1.0 + d[3], d[4], d[5]])
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn anchor_loss_nonnegative(tr in prop::collection::vec(small_transform(), 18)) {
            let t = canonical_human_template();
            prop_assert!(anchor_loss(&t, &tr) >= 0.0);
        }

        #[test]
        fn common_transform_keeps_connectivity(c in small_transform()) {
            let t = canonical_human_template();
            let tr = vec![c; 18];
            prop_assert!(anchor_loss(&t, &tr) <= 1e-24);
        }

        #[test]
        fn boundary_monotone(x in 1.0f64..3.0, dx in 0.0f64..1.0) {
            let t = chain();
            let mut tr = vec![AffineTransform::IDENTITY; 3];
            tr[1] = AffineTransform::translation(x, -x);
            let lo = boundary_loss(&t, &tr, 1.0);
            tr[1] = AffineTransform::translation(x + dx, -x);
            prop_assert!(boundary_loss(&t, &tr, 1.0) >= lo);
        }

        #[test]
        fn recon_symmetric(tr in prop::collection::vec(small_transform(), 18)) {
            let t = canonical_human_template();
            let a = render_analytic(&t, &tr, 16).unwrap();
            let b = render_analytic(&t, &identity(&t), 16).unwrap();
            prop_assert_eq!(
                reconstruction_loss(&a, &b, &Identity).unwrap(),
                reconstruction_loss(&b, &a, &Identity).unwrap()
            );
        }

        #[test]
        fn total_is_weighted_sum(tr in prop::collection::vec(small_transform(), 18), l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
            let t = canonical_human_template();
            let target = render_analytic(&t, &identity(&t), 16).unwrap();
            let cfg = LossConfig { lambda1: l1, lambda2: l2, ..Default::default() };
            let b = total_loss(&t, &tr, &target, &cfg, 16).unwrap();
            prop_assert_eq!(b.total, b.recon + l1 * b.anchor + l2 * b.boundary);
            prop_assert!(b.recon >= 0.0 && b.anchor >= 0.0 && b.boundary >= 0.0);
        }
    }
}

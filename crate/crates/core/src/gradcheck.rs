//! Closed-form gradients against central finite differences over random
//! parameter draws, per loss term.
//!
//! Non-smooth points are excluded rather than tolerated: a draw is skipped
//! for the boundary term when a transformed anchor coordinate lies within
//! `2 * step` of `±bound`, and a coordinate is skipped for reconstruction
//! terms when some feature residual has opposite signs at `p - h e_i` and
//! `p + h e_i` (the L1 kink lies inside the difference stencil).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{finite_diff, BoundaryObjective, Objective, ParamVector, DEFAULT_FD_STEP};
use crate::diff::{AnchorObjective, ReconObjective, TotalObjective};
use crate::error::Result;
use crate::geometry::AffineTransform;
use crate::loss::{FeatureExtractor, Features, LossConfig};
use crate::render::{render_analytic, PartMaps};
use crate::synth::derive_seed;
use crate::template::Template;

/// Floor on the relative-error denominator, so coordinates whose true
/// derivative is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub draws: usize,
    pub resolution: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Boundary used for the boundary and total terms; small enough that
    /// perturbed anchors regularly cross it.
    pub boundary_b: f64,
    /// Perturbation of the linear block around identity, per entry.
    pub linear_jitter: f64,
    pub shift_jitter: f64,
    /// Negates every closed-form gradient. Negative control only.
    pub inject_sign_flip: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            draws: 100,
            resolution: 32,
            step: DEFAULT_FD_STEP,
            tolerance: 1e-4,
            seed: 0,
            boundary_b: 0.6,
            linear_jitter: 0.25,
            shift_jitter: 0.3,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: String,
    pub draws: usize,
    pub draws_excluded: usize,
    pub coords_checked: usize,
    pub coords_excluded: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub terms: Vec<TermReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "gradient check: {} draws, H={}, step {:e}, tolerance {:e}",
            self.config.draws, self.config.resolution, self.config.step, self.config.tolerance
        );
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>9} {:>9} {:>10} {:>12}  status",
            "term", "draws", "excluded", "coords", "skipped", "max rel err"
        );
        for t in &self.terms {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>9} {:>9} {:>10} {:>12.3e}  {}",
                t.term,
                t.draws,
                t.draws_excluded,
                t.coords_checked,
                t.coords_excluded,
                t.max_rel_error,
                if t.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_params(rng: &mut ChaCha8Rng, parts: usize, cfg: &GradCheckConfig) -> ParamVector {
    let mut values = Vec::with_capacity(parts * AffineTransform::PARAMS);
    for _ in 0..parts {
        let mut j = || rng.random_range(-cfg.linear_jitter..=cfg.linear_jitter);
        let lin = [1.0 + j(), j(), j(), 1.0 + j()];
        values.extend_from_slice(&lin);
        values.push(rng.random_range(-cfg.shift_jitter..=cfg.shift_jitter));
        values.push(rng.random_range(-cfg.shift_jitter..=cfg.shift_jitter));
    }
    ParamVector::new(values).expect("finite draw")
}

fn near_kink(template: &Template, at: &ParamVector, bound: f64, margin: f64) -> bool {
    template
        .transformed_anchors(&at.to_transforms())
        .iter()
        .flatten()
        .any(|p| (p.x.abs() - bound).abs() <= margin || (p.y.abs() - bound).abs() <= margin)
}

/// Coordinates whose difference stencil straddles an L1 kink.
fn straddling_coords(
    template: &Template,
    at: &ParamVector,
    target_features: &[f64],
    features: &dyn FeatureExtractor,
    cfg: &GradCheckConfig,
) -> Result<Vec<bool>> {
    let residual_signs = |p: &ParamVector| -> Result<Vec<i8>> {
        let maps = render_analytic(template, &p.to_transforms(), cfg.resolution)?;
        let f = features.extract(&maps)?;
        Ok(f.iter()
            .zip(target_features)
            .map(|(a, b)| (a - b).partial_cmp(&0.0).map_or(0, |o| o as i8))
            .collect())
    };
    (0..at.len())
        .map(|i| {
            let mut p = at.clone();
            p.values_mut()[i] = at[i] + cfg.step;
            let up = residual_signs(&p)?;
            p.values_mut()[i] = at[i] - cfg.step;
            let down = residual_signs(&p)?;
            Ok(up.iter().zip(&down).any(|(a, b)| a * b < 0))
        })
        .collect()
}

struct TermAccum {
    report: TermReport,
}

impl TermAccum {
    fn new(term: &str) -> Self {
        TermAccum {
            report: TermReport {
                term: term.to_string(),
                draws: 0,
                draws_excluded: 0,
                coords_checked: 0,
                coords_excluded: 0,
                max_rel_error: 0.0,
                passed: true,
            },
        }
    }

    fn check(
        &mut self,
        objective: &dyn Objective,
        at: &ParamVector,
        skip: Option<&[bool]>,
        cfg: &GradCheckConfig,
    ) -> Result<()> {
        self.report.draws += 1;
        let (_, analytic) = objective.value_and_gradient(at)?;
        let numeric = finite_diff(|p| objective.value(p), at, cfg.step)?;
        let sign = if cfg.inject_sign_flip { -1.0 } else { 1.0 };
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            if skip.is_some_and(|s| s[i]) {
                self.report.coords_excluded += 1;
                continue;
            }
            self.report.coords_checked += 1;
            let e = relative_error(sign * a, *n);
            if e > self.report.max_rel_error || e.is_nan() {
                self.report.max_rel_error = e;
            }
        }
        Ok(())
    }

    fn exclude_draw(&mut self) {
        self.report.draws += 1;
        self.report.draws_excluded += 1;
    }

    fn finish(mut self, cfg: &GradCheckConfig) -> TermReport {
        self.report.passed =
            self.report.coords_checked > 0 && self.report.max_rel_error <= cfg.tolerance;
        self.report
    }
}

/// Runs the check for the anchor, boundary, reconstruction (identity and
/// pooled features) and total terms.
pub fn run_gradcheck(template: &Template, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let parts = template.num_parts();
    let pooled = Features::AvgPool(2);
    let total_config = LossConfig {
        lambda1: 0.7,
        lambda2: 1.3,
        boundary_b: cfg.boundary_b,
        recon_features: Features::Identity,
    };
    let mut anchor = TermAccum::new("anchor");
    let mut boundary = TermAccum::new("boundary");
    let mut recon = TermAccum::new("recon");
    let mut recon_pooled = TermAccum::new("recon_avgpool2");
    let mut total = TermAccum::new("total");

    for d in 0..cfg.draws {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, d));
        let at = random_params(&mut rng, parts, cfg);
        let target_pose = random_params(&mut rng, parts, cfg);
        let target: PartMaps = render_analytic(template, &target_pose.to_transforms(), cfg.resolution)?;
        let kink = near_kink(template, &at, cfg.boundary_b, 2.0 * cfg.step);

        anchor.check(&AnchorObjective { template }, &at, None, cfg)?;

        if kink {
            boundary.exclude_draw();
        } else {
            let obj = BoundaryObjective {
                template,
                bound: cfg.boundary_b,
            };
            boundary.check(&obj, &at, None, cfg)?;
        }

        let identity = Features::Identity.extractor();
        let target_id = identity.extract(&target)?.into_owned();
        let skip_id = straddling_coords(template, &at, &target_id, identity.as_ref(), cfg)?;
        let obj = ReconObjective {
            template,
            target: &target,
            features: identity.as_ref(),
            resolution: cfg.resolution,
        };
        recon.check(&obj, &at, Some(&skip_id), cfg)?;

        let pool = pooled.extractor();
        let target_pool = pool.extract(&target)?.into_owned();
        let skip_pool = straddling_coords(template, &at, &target_pool, pool.as_ref(), cfg)?;
        let obj = ReconObjective {
            template,
            target: &target,
            features: pool.as_ref(),
            resolution: cfg.resolution,
        };
        recon_pooled.check(&obj, &at, Some(&skip_pool), cfg)?;

        if kink {
            total.exclude_draw();
        } else {
            let obj = TotalObjective {
                template,
                target: &target,
                config: total_config,
                resolution: cfg.resolution,
            };
            total.check(&obj, &at, Some(&skip_id), cfg)?;
        }
    }

    Ok(GradCheckReport {
        config: cfg.clone(),
        terms: [anchor, boundary, recon, recon_pooled, total]
            .into_iter()
            .map(|t| t.finish(cfg))
            .collect(),
    })
}

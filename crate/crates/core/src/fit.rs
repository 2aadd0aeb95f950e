//! Pose fitting: Adam over all part transforms, starting at the canonical pose.

use serde::{Deserialize, Serialize};

use crate::diff::{total_value_and_gradient, Gradient, ParamVector};
use crate::error::{Error, Result};
use crate::eval::{keypoints_from_transforms, Keypoint};
use crate::geometry::AffineTransform;
use crate::loss::{LossBreakdown, LossConfig};
use crate::render::{PartMaps, DEFAULT_RESOLUTION};
use crate::template::Template;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the total loss has decreased by less than this for
    /// `patience` consecutive iterations.
    pub convergence_tol: f64,
    pub patience: usize,
    /// The fit itself draws no random numbers; the seed is carried so runs
    /// can be reproduced from their echoed configuration.
    pub seed: u64,
    pub loss: LossConfig,
    pub resolution: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 500,
            convergence_tol: 1e-8,
            patience: 5,
            seed: 0,
            loss: LossConfig::default(),
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl FitConfig {
    /// Per-instance fitting tolerates much larger steps than network training;
    /// this profile is the one calibrated on the synthetic pose suite.
    pub fn synthetic() -> Self {
        FitConfig {
            learning_rate: 1e-2,
            max_iters: 300,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.convergence_tol >= 0.0) || self.patience == 0 {
            return bad("convergence_tol must be non-negative and patience at least 1");
        }
        if self.resolution < crate::render::MIN_RESOLUTION {
            return bad("resolution below minimum");
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut ParamVector,
    grad: &Gradient,
    state: &mut AdamState,
    config: &FitConfig,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "params {}, gradient {}, moments {}/{}",
            params.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient entry".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, &g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Best iterate by total loss.
    pub transforms: Vec<AffineTransform>,
    pub keypoints: Vec<Keypoint>,
    /// Raw loss at every evaluated iterate; entry 0 is the identity start.
    pub loss_trace: Vec<LossBreakdown>,
    pub best: LossBreakdown,
    pub best_iteration: usize,
    pub converged: bool,
    pub iterations_used: usize,
}

/// Fits from the identity pose. Single-threaded apart from the renderer's
/// own per-part parallelism; deterministic for identical inputs.
pub fn fit_pose(template: &Template, target: &PartMaps, config: &FitConfig) -> Result<FitResult> {
    fit_pose_from(
        template,
        target,
        config,
        ParamVector::identity(template.num_parts()),
    )
}

pub fn fit_pose_from(
    template: &Template,
    target: &PartMaps,
    config: &FitConfig,
    start: ParamVector,
) -> Result<FitResult> {
    config.validate()?;
    if start.num_parts() != template.num_parts() {
        return Err(Error::ShapeMismatch(format!(
            "start has {} parts, template {}",
            start.num_parts(),
            template.num_parts()
        )));
    }
    let mut params = start;
    let mut state = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let mut best: Option<(LossBreakdown, Vec<AffineTransform>, usize)> = None;
    let mut previous = f64::INFINITY;
    let mut stalled = 0;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..=config.max_iters {
        let transforms = params.to_transforms();
        let (loss, grad) =
            total_value_and_gradient(template, &transforms, target, &config.loss, config.resolution)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter}")));
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|(b, _, _)| loss.total < b.total) {
            best = Some((loss, transforms, iter));
        }
        if previous - loss.total < config.convergence_tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        previous = loss.total;
        if stalled >= config.patience || loss.total == 0.0 {
            converged = true;
            break;
        }
        if iter == config.max_iters {
            break;
        }
        adam_step(&mut params, &grad, &mut state, config)?;
        iterations = iter + 1;
    }

    let (best, transforms, best_iteration) = best.expect("at least one evaluation");
    Ok(FitResult {
        keypoints: keypoints_from_transforms(template, &transforms),
        transforms,
        loss_trace: trace,
        best,
        best_iteration,
        converged,
        iterations_used: iterations,
    })
}

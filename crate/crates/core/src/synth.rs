//! Articulated pose sampling with exact anchor coincidence, and synthetic
//! datasets of rendered targets with known keypoints.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{keypoints_from_transforms, Keypoint};
use crate::files::{keypoints_to_csv, transforms_to_csv, write_atomic};
use crate::geometry::{AffineTransform, Point};
use crate::loss::anchor_loss;
use crate::render::{render_analytic, PartMaps};
use crate::template::Template;

pub const MAX_ATTEMPTS: usize = 100;

/// Largest anchor loss an accepted sample may carry (rounding only).
pub const ANCHOR_TOL: f64 = 1e-10;

/// Sampling limits. Angles are in degrees, rotations are uniform in
/// `[-limit, limit]` relative to the parent part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseRanges {
    pub root_rotation_deg: f64,
    /// Root translation is uniform in `[-limit, limit]` per axis.
    pub root_translation: f64,
    /// Whole-body isotropic scale range.
    pub scale: [f64; 2],
    /// Per-joint limits keyed by part id. Keys without a side prefix
    /// (`upper_arm`) apply to both `r_` and `l_` parts.
    pub joint_rotation_deg: BTreeMap<String, f64>,
    /// Limit for parts not listed above.
    pub default_joint_rotation_deg: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        let joints = [
            ("neck", 15.0),
            ("head", 20.0),
            ("clavicle", 10.0),
            ("upper_arm", 45.0),
            ("forearm", 45.0),
            ("hand", 30.0),
            ("pelvis", 10.0),
            ("thigh", 25.0),
            ("shin", 30.0),
            ("foot", 20.0),
        ];
        PoseRanges {
            root_rotation_deg: 10.0,
            root_translation: 0.08,
            scale: [0.85, 1.15],
            joint_rotation_deg: joints.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            default_joint_rotation_deg: 0.0,
        }
    }
}

impl PoseRanges {
    /// No rotation, no translation, unit scale: every sample is the canonical pose.
    pub fn zero() -> Self {
        PoseRanges {
            root_rotation_deg: 0.0,
            root_translation: 0.0,
            scale: [1.0, 1.0],
            joint_rotation_deg: BTreeMap::new(),
            default_joint_rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let limits = [
            self.root_rotation_deg,
            self.root_translation,
            self.default_joint_rotation_deg,
        ];
        if limits
            .iter()
            .chain(self.joint_rotation_deg.values())
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "pose ranges must be finite and non-negative".into(),
            ));
        }
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Rotation limit in degrees for the joint connecting `part_id` to its parent.
    pub fn joint_limit(&self, part_id: &str) -> f64 {
        if let Some(v) = self.joint_rotation_deg.get(part_id) {
            return *v;
        }
        let unsided = part_id
            .strip_prefix("r_")
            .or_else(|| part_id.strip_prefix("l_"))
            .unwrap_or(part_id);
        self.joint_rotation_deg
            .get(unsided)
            .copied()
            .unwrap_or(self.default_joint_rotation_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub transforms: Vec<AffineTransform>,
    pub keypoints_gt: Vec<Keypoint>,
    pub seed: u64,
    /// Rotation of each part relative to its parent, radians. The root's
    /// entry is its absolute rotation.
    pub joint_angles: Vec<f64>,
    pub scale: f64,
}

/// Breadth-first spanning tree over the anchor-pair graph. Each entry is
/// `(part, parent, own anchor, parent anchor)`; the root has no parent.
pub fn articulation_order(template: &Template) -> Result<Vec<(usize, Option<(usize, usize, usize)>)>> {
    let adj = template.adjacency();
    let root = template.root();
    let mut seen = vec![false; template.num_parts()];
    let mut order = vec![(root, None)];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(u) = queue.pop_front() {
        for &(v, own, theirs) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                order.push((v, Some((u, theirs, own))));
                queue.push_back(v);
            }
        }
    }
    if order.len() != template.num_parts() {
        return Err(Error::Reference(
            "anchor-pair graph is not connected; cannot articulate".into(),
        ));
    }
    Ok(order)
}

fn uniform(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.random_range(-limit..=limit)
    }
}

fn draw(
    template: &Template,
    order: &[(usize, Option<(usize, usize, usize)>)],
    ranges: &PoseRanges,
    rng: &mut ChaCha8Rng,
) -> (Vec<AffineTransform>, Vec<f64>, f64) {
    let parts = template.parts();
    let k = template.num_parts();
    let [lo, hi] = ranges.scale;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut transforms = vec![AffineTransform::IDENTITY; k];
    let mut relative = vec![0.0; k];
    let mut absolute = vec![0.0; k];
    for &(part, link) in order {
        match link {
            None => {
                let angle = uniform(rng, ranges.root_rotation_deg.to_radians());
                let shift = Point::new(
                    uniform(rng, ranges.root_translation),
                    uniform(rng, ranges.root_translation),
                );
                let pivot = parts[part].mean;
                let about = AffineTransform::rotation_about(pivot, angle, scale);
                transforms[part] = AffineTransform::pinned(about, pivot, pivot + shift);
                relative[part] = angle;
                absolute[part] = angle;
            }
            Some((parent, own, parent_anchor)) => {
                let rel = uniform(rng, ranges.joint_limit(&parts[part].id).to_radians());
                let angle = absolute[parent] + rel;
                let linear = AffineTransform::rotation_about(Point::new(0.0, 0.0), angle, scale);
                let joint = transforms[parent].apply(parts[parent].anchors[parent_anchor]);
                transforms[part] = AffineTransform::pinned(linear, parts[part].anchors[own], joint);
                relative[part] = rel;
                absolute[part] = angle;
            }
        }
    }
    (transforms, relative, scale)
}

/// Samples one articulated pose. `index` only labels the error.
pub fn sample_pose_indexed(
    template: &Template,
    ranges: &PoseRanges,
    seed: u64,
    index: usize,
) -> Result<PoseSample> {
    ranges.validate()?;
    let order = articulation_order(template)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let (transforms, joint_angles, scale) = draw(template, &order, ranges, &mut rng);
        let inside = template
            .transformed_anchors(&transforms)
            .iter()
            .flatten()
            .all(|p| p.within(1.0));
        if inside && anchor_loss(template, &transforms) <= ANCHOR_TOL {
            return Ok(PoseSample {
                keypoints_gt: keypoints_from_transforms(template, &transforms),
                transforms,
                seed,
                joint_angles,
                scale,
            });
        }
    }
    Err(Error::SamplingExhausted {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

pub fn sample_pose(template: &Template, ranges: &PoseRanges, seed: u64) -> Result<PoseSample> {
    sample_pose_indexed(template, ranges, seed, 0)
}

/// Seed of sample `index` within a dataset seeded with `seed`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over a golden-ratio stride
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(
    template: &Template,
    n: usize,
    ranges: &PoseRanges,
    resolution: usize,
    seed: u64,
) -> Result<Vec<(PoseSample, PartMaps)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    ranges.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = sample_pose_indexed(template, ranges, derive_seed(seed, i), i)?;
            let maps = render_analytic(template, &sample.transforms, resolution)?;
            Ok((sample, maps))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub template_hash: String,
    pub seed: u64,
    pub n: usize,
    pub resolution: usize,
    pub ranges: PoseRanges,
}

pub const MANIFEST_FILE: &str = "manifest";

pub fn sample_name(index: usize) -> String {
    format!("{index:04}")
}

/// Writes `NNNN.pmap`, `NNNN.gt.csv`, `NNNN.gt.transforms.csv` and the manifest.
pub fn write_dataset(
    dir: &Path,
    template: &Template,
    samples: &[(PoseSample, PartMaps)],
    ranges: &PoseRanges,
    resolution: usize,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples
        .par_iter()
        .enumerate()
        .try_for_each(|(i, (sample, maps))| {
            let name = sample_name(i);
            write_atomic(dir.join(format!("{name}.pmap")), &maps.to_bytes())?;
            write_atomic(
                dir.join(format!("{name}.gt.csv")),
                keypoints_to_csv(&sample.keypoints_gt).as_bytes(),
            )?;
            write_atomic(
                dir.join(format!("{name}.gt.transforms.csv")),
                transforms_to_csv(template, &sample.transforms).as_bytes(),
            )
        })?;
    let manifest = Manifest {
        template_hash: template.content_hash(),
        seed,
        n: samples.len(),
        resolution,
        ranges: ranges.clone(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_atomic(dir.join(MANIFEST_FILE), text.as_bytes())
}

//! Part-based body templates: Gaussian parts, anchor points, anchor pairs
//! and keypoint definitions.
//!
//! Templates are read from TOML:
//!
//! ```toml
//! root = "torso"            # optional, defaults to the part with most anchors
//!
//! [[parts]]
//! id = "torso"
//! label = "torso"
//! mean = [0.0, -0.2]
//! variance = [0.017, 0.04]
//! anchors = [[0.0, -0.42], [0.0, 0.05]]
//!
//! [[anchor_pairs]]
//! first = ["torso", 0]
//! second = ["neck", 1]
//!
//! [[keypoints]]
//! id = "neck"
//! part = "torso"
//! point = [0.0, -0.42]
//! ```
//!
//! All geometry lives in the normalized square `[-1, 1]^2`.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{apply_point, AffineTransform, Cov2, Gaussian2, Point};

pub const MAX_ANCHORS: usize = 3;

/// Canonical anchor pairs must coincide to within this distance.
pub const COINCIDENCE_TOL: f64 = 1e-9;

const CANONICAL_HUMAN: &str = include_str!("../data/canonical_human.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPart {
    pub id: String,
    pub label: String,
    pub mean: Point,
    pub variance: Point,
    pub anchors: Vec<Point>,
}

impl GaussianPart {
    pub fn gaussian(&self) -> Gaussian2 {
        Gaussian2 {
            mean: self.mean,
            cov: Cov2::diagonal(self.variance.x, self.variance.y),
        }
    }
}

/// `(part id, anchor index)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnchorRef(pub String, pub usize);

impl AnchorRef {
    pub fn part(&self) -> &str {
        &self.0
    }

    pub fn index(&self) -> usize {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorPair {
    pub first: AnchorRef,
    pub second: AnchorRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointDef {
    pub id: String,
    pub part: String,
    pub point: Point,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root: Option<String>,
    parts: Vec<GaussianPart>,
    #[serde(default)]
    anchor_pairs: Vec<AnchorPair>,
    #[serde(default)]
    keypoints: Vec<KeypointDef>,
}

/// Anchor pair resolved to part indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedPair {
    pub first_part: usize,
    pub first_anchor: usize,
    pub second_part: usize,
    pub second_anchor: usize,
}

/// Keypoint resolved to its owning part index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedKeypoint {
    pub part: usize,
    pub point: Point,
}

/// A validated template. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    parts: Vec<GaussianPart>,
    anchor_pairs: Vec<AnchorPair>,
    keypoints: Vec<KeypointDef>,
    root: usize,
    explicit_root: bool,
    pairs: Vec<ResolvedPair>,
    keypoint_parts: Vec<ResolvedKeypoint>,
}

impl Template {
    pub fn new(
        parts: Vec<GaussianPart>,
        anchor_pairs: Vec<AnchorPair>,
        keypoints: Vec<KeypointDef>,
        root: Option<String>,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Schema("template has no parts".into()));
        }
        let mut index = HashMap::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            if part.id.is_empty() {
                return Err(Error::Schema(format!("part #{i} has an empty id")));
            }
            if index.insert(part.id.as_str(), i).is_some() {
                return Err(Error::Schema(format!("duplicate part id `{}`", part.id)));
            }
            validate_part(part)?;
        }

        let lookup = |r: &AnchorRef| -> Result<(usize, usize)> {
            let &p = index.get(r.part()).ok_or_else(|| {
                Error::Reference(format!("anchor pair names unknown part `{}`", r.part()))
            })?;
            if r.index() >= parts[p].anchors.len() {
                return Err(Error::Reference(format!(
                    "part `{}` has no anchor {}",
                    r.part(),
                    r.index()
                )));
            }
            Ok((p, r.index()))
        };
        let mut pairs = Vec::with_capacity(anchor_pairs.len());
        for pair in &anchor_pairs {
            let (first_part, first_anchor) = lookup(&pair.first)?;
            let (second_part, second_anchor) = lookup(&pair.second)?;
            if first_part == second_part {
                return Err(Error::Reference(format!(
                    "anchor pair joins part `{}` to itself",
                    pair.first.part()
                )));
            }
            let a = parts[first_part].anchors[first_anchor];
            let b = parts[second_part].anchors[second_anchor];
            if a.distance(b) > COINCIDENCE_TOL {
                return Err(Error::Geometry(format!(
                    "anchors {}:{} and {}:{} do not coincide in the canonical pose",
                    pair.first.part(),
                    first_anchor,
                    pair.second.part(),
                    second_anchor
                )));
            }
            pairs.push(ResolvedPair {
                first_part,
                first_anchor,
                second_part,
                second_anchor,
            });
        }

        let mut seen = HashMap::new();
        let mut keypoint_parts = Vec::with_capacity(keypoints.len());
        for kp in &keypoints {
            if seen.insert(kp.id.as_str(), ()).is_some() {
                return Err(Error::Schema(format!("duplicate keypoint id `{}`", kp.id)));
            }
            let &part = index.get(kp.part.as_str()).ok_or_else(|| {
                Error::Reference(format!(
                    "keypoint `{}` names unknown part `{}`",
                    kp.id, kp.part
                ))
            })?;
            check_in_domain(kp.point, &format!("keypoint `{}`", kp.id))?;
            keypoint_parts.push(ResolvedKeypoint {
                part,
                point: kp.point,
            });
        }

        let explicit_root = root.is_some();
        let root = match root {
            Some(id) => *index
                .get(id.as_str())
                .ok_or_else(|| Error::Reference(format!("root names unknown part `{id}`")))?,
            // most anchors, earliest on ties
            None => (0..parts.len())
                .rev()
                .max_by_key(|&i| parts[i].anchors.len())
                .unwrap_or(0),
        };

        Ok(Template {
            parts,
            anchor_pairs,
            keypoints,
            root,
            explicit_root,
            pairs,
            keypoint_parts,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[GaussianPart] {
        &self.parts
    }

    pub fn anchor_pairs(&self) -> &[AnchorPair] {
        &self.anchor_pairs
    }

    pub fn keypoints(&self) -> &[KeypointDef] {
        &self.keypoints
    }

    pub fn resolved_pairs(&self) -> &[ResolvedPair] {
        &self.pairs
    }

    pub fn resolved_keypoints(&self) -> &[ResolvedKeypoint] {
        &self.keypoint_parts
    }

    /// Root part for articulated sampling.
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn part_index(&self, id: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.id == id)
    }

    /// Total number of anchors over all parts.
    pub fn num_anchors(&self) -> usize {
        self.parts.iter().map(|p| p.anchors.len()).sum()
    }

    /// Anchors of every part pushed through that part's transform.
    pub fn transformed_anchors(&self, transforms: &[AffineTransform]) -> Vec<Vec<Point>> {
        self.parts
            .iter()
            .zip(transforms)
            .map(|(part, t)| part.anchors.iter().map(|&a| apply_point(t, a)).collect())
            .collect()
    }

    /// Adjacency lists over parts induced by the anchor pairs. Each entry is
    /// `(neighbour, own anchor, neighbour anchor)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let mut adj = vec![Vec::new(); self.parts.len()];
        for p in &self.pairs {
            adj[p.first_part].push((p.second_part, p.first_anchor, p.second_anchor));
            adj[p.second_part].push((p.first_part, p.second_anchor, p.first_anchor));
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; self.parts.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn to_toml(&self) -> String {
        let file = TemplateFile {
            root: self
                .explicit_root
                .then(|| self.parts[self.root].id.clone()),
            parts: self.parts.clone(),
            anchor_pairs: self.anchor_pairs.clone(),
            keypoints: self.keypoints.clone(),
        };
        toml::to_string(&file).expect("template serializes")
    }

    /// SHA-256 of the serialized template, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn check_in_domain(p: Point, what: &str) -> Result<()> {
    if !p.is_finite() || !p.within(1.0) {
        return Err(Error::Geometry(format!(
            "{what} at ({}, {}) lies outside [-1, 1]^2",
            p.x, p.y
        )));
    }
    Ok(())
}

fn validate_part(part: &GaussianPart) -> Result<()> {
    let v = part.variance;
    if !(v.x > 0.0 && v.y > 0.0) || !v.is_finite() {
        return Err(Error::Geometry(format!(
            "part `{}` has non-positive variance ({}, {})",
            part.id, v.x, v.y
        )));
    }
    if part.anchors.is_empty() || part.anchors.len() > MAX_ANCHORS {
        return Err(Error::Schema(format!(
            "part `{}` has {} anchors, expected 1 to {MAX_ANCHORS}",
            part.id,
            part.anchors.len()
        )));
    }
    check_in_domain(part.mean, &format!("mean of part `{}`", part.id))?;
    for (i, &a) in part.anchors.iter().enumerate() {
        check_in_domain(a, &format!("anchor {i} of part `{}`", part.id))?;
    }
    Ok(())
}

pub fn parse_template(text: &str) -> Result<Template> {
    let file: TemplateFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    Template::new(file.parts, file.anchor_pairs, file.keypoints, file.root)
}

/// The shipped 18-part T-pose template.
pub fn canonical_human_template() -> Template {
    parse_template(CANONICAL_HUMAN).expect("shipped template is valid")
}

/// Raw text of the shipped template file.
pub fn canonical_human_text() -> &'static str {
    CANONICAL_HUMAN
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const TWO_PARTS: &str = r#"
        [[parts]]
        id = "torso"
        label = "torso"
        mean = [0.0, 0.0]
        variance = [0.02, 0.04]
        anchors = [[0.0, -0.3]]

        [[parts]]
        id = "head"
        label = "head"
        mean = [0.0, -0.4]
        variance = [0.01, 0.01]
        anchors = [[0.0, -0.3]]

        [[anchor_pairs]]
        first = ["torso", 0]
        second = ["head", 0]
    "#;

    #[test]
    fn minimal_two_part_file() {
        let t = parse_template(TWO_PARTS).unwrap();
        assert_eq!(t.num_parts(), 2);
        assert_eq!(t.anchor_pairs().len(), 1);
        assert!(t.is_connected());
    }

    #[test]
    fn unknown_part_in_pair() {
        let text = TWO_PARTS.replace(r#"second = ["head", 0]"#, r#"second = ["torso2", 0]"#);
        assert!(matches!(parse_template(&text), Err(Error::Reference(_))));
    }

    #[test]
    fn anchor_index_out_of_range() {
        let text = TWO_PARTS.replace(r#"second = ["head", 0]"#, r#"second = ["head", 1]"#);
        assert!(matches!(parse_template(&text), Err(Error::Reference(_))));
    }

    #[test]
    fn zero_variance() {
        let text = TWO_PARTS.replace("[0.01, 0.01]", "[0.0, 0.01]");
        assert!(matches!(parse_template(&text), Err(Error::Geometry(_))));
    }

    #[test]
    fn non_coincident_pair() {
        let text = TWO_PARTS.replacen("anchors = [[0.0, -0.3]]", "anchors = [[0.0, -0.31]]", 1);
        assert!(matches!(parse_template(&text), Err(Error::Geometry(_))));
    }

    #[test]
    fn out_of_domain_mean() {
        let text = TWO_PARTS.replace("mean = [0.0, -0.4]", "mean = [0.0, -1.4]");
        assert!(matches!(parse_template(&text), Err(Error::Geometry(_))));
    }

    #[test]
    fn malformed_field() {
        let text = TWO_PARTS.replace("mean = [0.0, -0.4]", "mean = \"up\"");
        assert!(matches!(parse_template(&text), Err(Error::Schema(_))));
        let text = TWO_PARTS.replace("label = \"head\"", "label = \"head\"\ncolour = 3");
        assert!(matches!(parse_template(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn too_many_anchors() {
        let text = TWO_PARTS.replace(
            "anchors = [[0.0, -0.3]]\n\n        [[anchor_pairs]]",
            "anchors = [[0.0, -0.3], [0.1, 0.0], [0.2, 0.0], [0.3, 0.0]]\n\n        [[anchor_pairs]]",
        );
        assert!(matches!(parse_template(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn self_pair_rejected() {
        let text = TWO_PARTS.replace(r#"second = ["head", 0]"#, r#"second = ["torso", 0]"#);
        assert!(matches!(parse_template(&text), Err(Error::Reference(_))));
    }

    #[test]
    fn canonical_shape() {
        let t = canonical_human_template();
        assert_eq!(t.num_parts(), 18);
        assert!(t.keypoints().len() >= 16);
        assert!(t.is_connected());
        assert_eq!(t.parts()[t.root()].id, "torso");
        let anchors = t.transformed_anchors(&vec![AffineTransform::IDENTITY; 18]);
        for p in t.resolved_pairs() {
            assert_eq!(
                anchors[p.first_part][p.first_anchor],
                anchors[p.second_part][p.second_anchor]
            );
        }
    }

    #[test]
    fn canonical_round_trips() {
        let t = canonical_human_template();
        assert_eq!(parse_template(&t.to_toml()).unwrap(), t);
    }

    fn arb_template() -> impl Strategy<Value = Template> {
        // A chain of parts, each sharing an anchor with the previous one.
        (1usize..6, any::<u64>()).prop_map(|(n, seed)| {
            let mut s = seed;
            let mut next = move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 1.6 - 0.8
            };
            let joints: Vec<Point> = (0..=n).map(|_| Point::new(next(), next())).collect();
            let parts = (0..n)
                .map(|i| GaussianPart {
                    id: format!("p{i}"),
                    label: format!("part {i}"),
                    mean: 0.5 * (joints[i] + joints[i + 1]),
                    variance: Point::new(0.001 + (next() + 1.0) * 0.01, 0.002),
                    anchors: vec![joints[i], joints[i + 1]],
                })
                .collect();
            let pairs = (1..n)
                .map(|i| AnchorPair {
                    first: AnchorRef(format!("p{}", i - 1), 1),
                    second: AnchorRef(format!("p{i}"), 0),
                })
                .collect();
            let keypoints = (0..n)
                .map(|i| KeypointDef {
                    id: format!("k{i}"),
                    part: format!("p{i}"),
                    point: joints[i],
                })
                .collect();
            Template::new(parts, pairs, keypoints, None).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(t in arb_template()) {
            prop_assert_eq!(parse_template(&t.to_toml()).unwrap(), t);
        }
    }
}

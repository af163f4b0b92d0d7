//! Deterministic path construction (image method) and validity checking.
//!
//! A candidate names the facets a prospective ray reflects on, in order.
//! [`trace_path`] mirrors the transmitter successively across the candidate's
//! facet planes and walks backward from the receiver through the image chain,
//! which takes O(K) per candidate. [`validate_path`] then checks Fermat's
//! principle (specular reflection on each facet, interaction points inside
//! their facets) and occlusion of every segment, O(N*K) brute force.
//!
//! This module is both the production tracer and the reward oracle for the
//! learned sampler, so it stays deliberately simple: no acceleration
//! structures, every check spelled out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{facet_normal, Facet, Scene, Vec3};

/// Barycentric slack for inside-facet tests; edge hits are inclusive.
pub const EPS_BARY: f64 = 1e-9;
/// |unit direction . unit normal| below this counts as parallel.
pub const EPS_PARALLEL: f64 = 1e-12;
/// Tolerance on the specular direction residual.
pub const EPS_SPECULAR: f64 = 1e-9;
/// Relative clearance at segment endpoints for occlusion tests.
pub const EPS_SEGMENT: f64 = 1e-9;
/// Default cap on the number of interactions.
pub const DEFAULT_K_MAX: usize = 3;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("candidate repeats facet {id} consecutively")]
    ConsecutiveRepeat { id: usize },
    #[error("facet id {id} out of range (scene has {n} facets)")]
    FacetOutOfRange { id: usize, n: usize },
    #[error("candidate length {k} exceeds k_max {k_max}")]
    TooLong { k: usize, k_max: usize },
    #[error("backward segment parallel to facet {id} plane")]
    ParallelSegment { id: usize },
}

/// Ordered facet indices a prospective ray path interacts with.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathCandidate {
    ids: Vec<usize>,
}

impl PathCandidate {
    /// Validates length, range, and the no-consecutive-repeat rule.
    pub fn new(ids: Vec<usize>, num_facets: usize, k_max: usize) -> Result<Self, TraceError> {
        if ids.is_empty() {
            return Err(TraceError::EmptyCandidate);
        }
        if ids.len() > k_max {
            return Err(TraceError::TooLong {
                k: ids.len(),
                k_max,
            });
        }
        for (i, &id) in ids.iter().enumerate() {
            if id >= num_facets {
                return Err(TraceError::FacetOutOfRange {
                    id,
                    n: num_facets,
                });
            }
            if i > 0 && ids[i - 1] == id {
                return Err(TraceError::ConsecutiveRepeat { id });
            }
        }
        Ok(PathCandidate { ids })
    }

    /// For callers that construct candidates by valid-by-construction means
    /// (enumeration, masked sampling).
    pub(crate) fn from_unchecked(ids: Vec<usize>) -> Self {
        debug_assert!(!ids.is_empty());
        debug_assert!(ids.windows(2).all(|w| w[0] != w[1]));
        PathCandidate { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl std::fmt::Display for PathCandidate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.ids.iter().map(|id| id.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Geometric ray path: TX, the K interaction points, RX.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPath {
    pub points: Vec<Vec3>,
    pub candidate: PathCandidate,
}

impl RayPath {
    pub fn num_interactions(&self) -> usize {
        self.points.len() - 2
    }

    pub fn total_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .sum()
    }
}

/// First validity check that failed, in check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    None,
    OffFacet,
    WrongSide,
    Obstructed,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub failure: Failure,
}

impl ValidityReport {
    fn ok() -> Self {
        ValidityReport {
            valid: true,
            failure: Failure::None,
        }
    }

    fn fail(failure: Failure) -> Self {
        ValidityReport {
            valid: false,
            failure,
        }
    }
}

/// Reflects `p` across the supporting plane of `f`.
pub fn mirror_point(p: Vec3, f: &Facet) -> Vec3 {
    let n = facet_normal(f);
    p - n * (2.0 * (p - f.vertices[0]).dot(n))
}

/// Constructs the geometric path for a candidate with the image method.
///
/// TX is mirrored successively across the candidate's facet planes, then the
/// walk runs backward from RX: intersect the line RX -> image_K with facet K's
/// plane, then from that point toward image_{K-1}, and so on. Points are
/// returned even when a later validity check would reject them; judging the
/// path is [`validate_path`]'s job.
pub fn trace_path(scene: &Scene, cand: &PathCandidate) -> Result<RayPath, TraceError> {
    let n_facets = scene.num_facets();
    for &id in cand.ids() {
        if id >= n_facets {
            return Err(TraceError::FacetOutOfRange { id, n: n_facets });
        }
    }
    let k = cand.len();

    // Forward pass: images of TX.
    let mut images = Vec::with_capacity(k);
    let mut current = scene.tx;
    for &id in cand.ids() {
        current = mirror_point(current, &scene.facets[id]);
        images.push(current);
    }

    // Backward pass: intersect each segment with its facet plane.
    let mut points = vec![Vec3::ZERO; k + 2];
    points[0] = scene.tx;
    points[k + 1] = scene.rx;
    let mut from = scene.rx;
    for step in (0..k).rev() {
        let facet = &scene.facets[cand.ids()[step]];
        let n = facet_normal(facet);
        let dir = images[step] - from;
        let len = dir.norm();
        if len == 0.0 || (dir.dot(n) / len).abs() <= EPS_PARALLEL {
            return Err(TraceError::ParallelSegment { id: facet.id });
        }
        let t = (facet.vertices[0] - from).dot(n) / dir.dot(n);
        let hit = from + dir * t;
        points[step + 1] = hit;
        from = hit;
    }

    Ok(RayPath {
        points,
        candidate: cand.clone(),
    })
}

/// Inside-facet test via barycentric coordinates, inclusive of edges and
/// vertices within `EPS_BARY`. The point is assumed to lie (numerically) on
/// the facet's supporting plane.
pub fn point_in_facet(p: Vec3, f: &Facet) -> bool {
    let [v0, v1, v2] = f.vertices;
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let d = p - v0;
    let d11 = e1.dot(e1);
    let d12 = e1.dot(e2);
    let d22 = e2.dot(e2);
    let dp1 = d.dot(e1);
    let dp2 = d.dot(e2);
    let det = d11 * d22 - d12 * d12;
    let u = (d22 * dp1 - d12 * dp2) / det;
    let v = (d11 * dp2 - d12 * dp1) / det;
    u >= -EPS_BARY && v >= -EPS_BARY && u + v <= 1.0 + EPS_BARY
}

/// Möller-Trumbore ray/triangle intersection. Returns the parameter `t > 0`
/// such that `origin + t * dir` lies inside the facet, or `None`. Edge and
/// vertex grazes count as hits (barycentric tolerances are inclusive).
pub fn ray_facet_intersect(origin: Vec3, dir: Vec3, f: &Facet) -> Option<f64> {
    let [v0, v1, v2] = f.vertices;
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let pvec = dir.cross(e2);
    let det = e1.dot(pvec);
    // Parallel when the direction is orthogonal to the normal, judged on
    // normalized magnitudes so the test is scale-free.
    let scale = dir.norm() * e1.cross(e2).norm();
    if det.abs() <= EPS_PARALLEL * scale {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(pvec) * inv_det;
    if !(-EPS_BARY..=1.0 + EPS_BARY).contains(&u) {
        return None;
    }
    let qvec = s.cross(e1);
    let v = dir.dot(qvec) * inv_det;
    if v < -EPS_BARY || u + v > 1.0 + EPS_BARY {
        return None;
    }
    let t = e2.dot(qvec) * inv_det;
    (t > 0.0).then_some(t)
}

/// True when any facet not in `exclude` crosses the open segment `(a, b)`.
///
/// Brute force over all N facets; endpoint hits within `EPS_SEGMENT`
/// (relative to the segment length) are ignored so that a reflection point
/// does not occlude its own segments. Grazing hits on facet edges count as
/// obstruction.
pub fn is_obstructed(scene: &Scene, a: Vec3, b: Vec3, exclude: &[usize]) -> bool {
    let dir = b - a;
    scene.facets.iter().any(|f| {
        if exclude.contains(&f.id) {
            return false;
        }
        match ray_facet_intersect(a, dir, f) {
            Some(t) => t > EPS_SEGMENT && t < 1.0 - EPS_SEGMENT,
            None => false,
        }
    })
}

/// Judges a traced path: interaction points inside their facets, specular
/// reflection (same side, mirror law) at every interaction, and no segment
/// obstructed. The report names the first failing check in that order.
pub fn validate_path(scene: &Scene, path: &RayPath) -> ValidityReport {
    let k = path.num_interactions();
    let ids = path.candidate.ids();
    debug_assert_eq!(ids.len(), k);

    if path.points.iter().any(|p| !p.is_finite()) {
        return ValidityReport::fail(Failure::Degenerate);
    }
    // Zero-length segments make directions meaningless.
    for w in path.points.windows(2) {
        if w[0].distance(w[1]) == 0.0 {
            return ValidityReport::fail(Failure::Degenerate);
        }
    }

    // (a) interaction points inside their facets.
    for i in 0..k {
        if !point_in_facet(path.points[i + 1], &scene.facets[ids[i]]) {
            return ValidityReport::fail(Failure::OffFacet);
        }
    }

    // (b) specular law with a same-side guarantee: the reflection of the
    // incoming direction must coincide with the outgoing direction. A path
    // that punches straight through the plane fails this residual check.
    for i in 0..k {
        let n = facet_normal(&scene.facets[ids[i]]);
        let inc = (path.points[i + 1] - path.points[i]).normalized();
        let out = (path.points[i + 2] - path.points[i + 1]).normalized();
        let reflected = inc - n * (2.0 * inc.dot(n));
        if reflected.distance(out) > EPS_SPECULAR {
            return ValidityReport::fail(Failure::WrongSide);
        }
    }

    // (c) occlusion, excluding the facets interacted with at each segment's
    // endpoints (TX and RX exclude nothing).
    for seg in 0..=k {
        let mut exclude = Vec::with_capacity(2);
        if seg > 0 {
            exclude.push(ids[seg - 1]);
        }
        if seg < k {
            exclude.push(ids[seg]);
        }
        if is_obstructed(scene, path.points[seg], path.points[seg + 1], &exclude) {
            return ValidityReport::fail(Failure::Obstructed);
        }
    }

    ValidityReport::ok()
}

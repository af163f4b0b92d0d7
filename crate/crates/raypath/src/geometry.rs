//! Scene representation, file I/O, normalization, and the invariant
//! featurization consumed by the sampler model.
//!
//! All features are built from distances only, so they are exactly invariant
//! under rotations, reflections, translations, and (after normalization)
//! uniform positive scaling of the whole scene. TX and RX are included in
//! the normalization statistics together with every facet vertex.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum triangle area (m^2) below which a facet is rejected as degenerate.
pub const MIN_FACET_AREA: f64 = 1e-12;

/// Number of per-facet feature entries produced by [`featurize`].
pub const PER_FACET_DIM: usize = 14;
/// Number of global feature entries produced by [`featurize`].
pub const GLOBAL_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scene parse error: {0}")]
    Parse(String),
    #[error("facet {id} is degenerate (area {area:.3e} <= {MIN_FACET_AREA:.0e} m^2)")]
    DegenerateFacet { id: usize, area: f64 },
    #[error("tx and rx coincide")]
    TxEqualsRx,
    #[error("scene has no facets")]
    EmptyScene,
    #[error("scene has zero variance (all points coincide)")]
    ZeroVariance,
    #[error("non-finite coordinate in scene")]
    NonFinite,
}

/// 3D point or direction, f64 components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Triangular facet in world coordinates. `id` is the index in scene order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Facet {
    pub vertices: [Vec3; 3],
    pub id: usize,
}

impl Facet {
    /// Builds a facet, rejecting collinear vertices.
    pub fn new(vertices: [Vec3; 3], id: usize) -> Result<Self, GeometryError> {
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let area = triangle_area(&vertices);
        if area <= MIN_FACET_AREA {
            return Err(GeometryError::DegenerateFacet { id, area });
        }
        Ok(Facet { vertices, id })
    }

    pub fn centroid(&self) -> Vec3 {
        (self.vertices[0] + self.vertices[1] + self.vertices[2]) / 3.0
    }
}

pub fn triangle_area(vertices: &[Vec3; 3]) -> f64 {
    let e1 = vertices[1] - vertices[0];
    let e2 = vertices[2] - vertices[0];
    e1.cross(e2).norm() * 0.5
}

/// Unit normal of a facet, oriented by the right-hand rule on
/// `(v1 - v0) x (v2 - v0)`. Reversing the vertex winding flips the sign.
pub fn facet_normal(f: &Facet) -> Vec3 {
    let e1 = f.vertices[1] - f.vertices[0];
    let e2 = f.vertices[2] - f.vertices[0];
    // Non-degeneracy is a Facet invariant, so the cross product is nonzero.
    e1.cross(e2).normalized()
}

/// A transmitter, a receiver, and an ordered list of triangular facets.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub tx: Vec3,
    pub rx: Vec3,
    pub facets: Vec<Facet>,
}

impl Scene {
    /// Builds a scene from raw vertex triples, assigning facet ids in order.
    pub fn new(tx: Vec3, rx: Vec3, facets: Vec<[Vec3; 3]>) -> Result<Self, GeometryError> {
        if !tx.is_finite() || !rx.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if tx == rx {
            return Err(GeometryError::TxEqualsRx);
        }
        if facets.is_empty() {
            return Err(GeometryError::EmptyScene);
        }
        let facets = facets
            .into_iter()
            .enumerate()
            .map(|(id, vertices)| Facet::new(vertices, id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scene { tx, rx, facets })
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    /// All points of the scene (TX, RX, then every vertex in facet order).
    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        [self.tx, self.rx]
            .into_iter()
            .chain(self.facets.iter().flat_map(|f| f.vertices.into_iter()))
    }
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    tx: [f64; 3],
    rx: [f64; 3],
    objects: Vec<[[f64; 3]; 3]>,
}

fn vec3_from(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn vec3_to(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Loads a scene from a JSON file.
///
/// Expected shape: `{"tx": [x,y,z], "rx": [x,y,z], "objects": [[[..],[..],[..]], ..]}`
/// with coordinates in meters. Unknown keys are ignored.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, GeometryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    scene_from_json(&text)
}

pub fn scene_from_json(text: &str) -> Result<Scene, GeometryError> {
    let file: SceneFile =
        serde_json::from_str(text).map_err(|e| GeometryError::Parse(e.to_string()))?;
    let facets = file
        .objects
        .into_iter()
        .map(|tri| [vec3_from(tri[0]), vec3_from(tri[1]), vec3_from(tri[2])])
        .collect();
    Scene::new(vec3_from(file.tx), vec3_from(file.rx), facets)
}

/// Writes a scene as JSON; `load_scene` reads it back bit-identically.
pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<(), GeometryError> {
    let path = path.as_ref();
    let text = scene_to_json(scene);
    fs::write(path, text).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn scene_to_json(scene: &Scene) -> String {
    let file = SceneFile {
        tx: vec3_to(scene.tx),
        rx: vec3_to(scene.rx),
        objects: scene
            .facets
            .iter()
            .map(|f| [
                vec3_to(f.vertices[0]),
                vec3_to(f.vertices[1]),
                vec3_to(f.vertices[2]),
            ])
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("scene serialization");
    text.push('\n');
    text
}

/// A scene mapped to zero mean and unit pooled standard deviation, together
/// with the inverse transform (`p_world = p_norm * scale + centroid`).
#[derive(Debug, Clone)]
pub struct NormalizedScene {
    pub scene: Scene,
    pub centroid: Vec3,
    pub scale: f64,
}

/// Sums in a canonical (sorted) order, so the result depends only on the
/// multiset of addends and not on their arrangement. Facet reordering then
/// leaves the scene statistics bitwise unchanged, which the downstream
/// permutation-equivariance guarantees rely on.
pub(crate) fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn scene_statistics(scene: &Scene) -> Result<(Vec3, f64), GeometryError> {
    let n_points = 2 + 3 * scene.num_facets();
    let mut xs: Vec<f64> = scene.points().map(|p| p.x).collect();
    let mut ys: Vec<f64> = scene.points().map(|p| p.y).collect();
    let mut zs: Vec<f64> = scene.points().map(|p| p.z).collect();
    let centroid = Vec3::new(
        order_free_sum(&mut xs),
        order_free_sum(&mut ys),
        order_free_sum(&mut zs),
    ) / n_points as f64;

    let mut squares: Vec<f64> = scene
        .points()
        .map(|p| {
            let d = p - centroid;
            d.dot(d)
        })
        .collect();
    // Population variance pooled over all 3 * n_points components.
    let variance = order_free_sum(&mut squares) / (3.0 * n_points as f64);
    if variance <= f64::MIN_POSITIVE {
        return Err(GeometryError::ZeroVariance);
    }
    Ok((centroid, variance.sqrt()))
}

/// The scene's normalization scale (pooled standard deviation of all stacked
/// coordinates), without building the normalized copy.
pub fn scene_scale(scene: &Scene) -> Result<f64, GeometryError> {
    scene_statistics(scene).map(|(_, scale)| scale)
}

/// Centers the scene on the mean of all stacked points (TX, RX, and every
/// vertex) and divides by the single pooled standard deviation of all
/// coordinate components. One scalar scale keeps the transform a similarity,
/// so uniform scaling of the input cancels exactly and no anisotropic
/// distortion is introduced.
pub fn normalize_scene(scene: &Scene) -> Result<NormalizedScene, GeometryError> {
    let (centroid, scale) = scene_statistics(scene)?;

    let map = |p: Vec3| (p - centroid) / scale;
    let facets = scene
        .facets
        .iter()
        .map(|f| Facet {
            vertices: [map(f.vertices[0]), map(f.vertices[1]), map(f.vertices[2])],
            id: f.id,
        })
        .collect();
    Ok(NormalizedScene {
        scene: Scene {
            tx: map(scene.tx),
            rx: map(scene.rx),
            facets,
        },
        centroid,
        scale,
    })
}

/// Distance-based features of a normalized scene.
///
/// Every entry is a nonnegative distance in the normalized frame, so the
/// whole block is invariant under any similarity transform of the raw scene
/// (rotations, reflections, translations, uniform positive scalings).
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantFeatures {
    /// One row per facet: for each of the three vertices its distance to TX,
    /// to RX, and to the origin (9 entries), then the three edge lengths
    /// |v1-v0|, |v2-v1|, |v0-v2| (3), then the unsigned distances from TX and
    /// from RX to the facet's supporting plane (2).
    pub per_facet: Vec<[f64; PER_FACET_DIM]>,
    /// |TX-RX|, |TX|, |RX| in the normalized frame.
    pub global: [f64; GLOBAL_DIM],
}

pub fn featurize(ns: &NormalizedScene) -> InvariantFeatures {
    let scene = &ns.scene;
    let tx = scene.tx;
    let rx = scene.rx;
    let per_facet = scene
        .facets
        .iter()
        .map(|f| {
            let [v0, v1, v2] = f.vertices;
            let n = facet_normal(f);
            [
                v0.distance(tx),
                v0.distance(rx),
                v0.norm(),
                v1.distance(tx),
                v1.distance(rx),
                v1.norm(),
                v2.distance(tx),
                v2.distance(rx),
                v2.norm(),
                (v1 - v0).norm(),
                (v2 - v1).norm(),
                (v0 - v2).norm(),
                ((tx - v0).dot(n)).abs(),
                ((rx - v0).dot(n)).abs(),
            ]
        })
        .collect();
    InvariantFeatures {
        per_facet,
        global: [tx.distance(rx), tx.norm(), rx.norm()],
    }
}

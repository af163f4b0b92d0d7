//! Procedural training scenes, the training loop, and evaluation.
//!
//! Scenes are street canyons: two rows of axis-aligned box buildings flanking
//! a straight street plus a ground slab, all triangulated, with a random
//! number of facets deleted and TX/RX dropped uniformly into the open canyon
//! volume. Training draws a fresh scene per step, samples a batch of
//! trajectories, scores them with the tracer, and applies one Adam update of
//! the flow-matching loss. A fixed held-out scene set (its own seed stream,
//! disjoint from training by construction) is re-evaluated every
//! `eval_every` steps for accuracy and hit rate.
//!
//! Everything is driven by named seed streams, so a run is reproducible
//! bit-for-bit from its config.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candgen::{oracle_valid_set, CandGenError, DEFAULT_ORACLE_CAP};
use crate::geometry::{
    featurize, normalize_scene, GeometryError, InvariantFeatures, Scene, Vec3,
};
use crate::gfn::{GfnConfig, GfnError, GfnModel, RewardMode, Trajectory};
use crate::neural::{AdamState, Checkpoint, NeuralError, Tape};
use crate::tracer::DEFAULT_K_MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("TX/RX placement failed after {retries} retries")]
    Placement { retries: usize },
    #[error("training aborted at step {step}: {reason}; diagnostic checkpoint at {checkpoint}")]
    Aborted {
        step: u64,
        reason: String,
        checkpoint: String,
    },
    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Oracle(#[from] CandGenError),
    #[error(transparent)]
    Gfn(#[from] GfnError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.as_ref().display().to_string();
    move |source| TrainError::Io { path, source }
}

// ---------------------------------------------------------------------------
// Seed streams

/// splitmix64 finalizer; used only to derive independent seed streams.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for (stream, index) under a base seed.
pub fn mix_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ stream);
    splitmix64(h ^ index)
}

const STREAM_SCENE: u64 = 1;
const STREAM_TRAJ: u64 = 2;
const STREAM_EVAL_DRAWS: u64 = 3;

/// Named seed streams. Training and held-out evaluation scenes come from
/// different seeds, which keeps the two scene populations disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub params: u64,
    pub train: u64,
    pub eval_scenes: u64,
    pub eval_draws: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            params: 0x5eed_0001,
            train: 0x5eed_0002,
            eval_scenes: 0x5eed_0003,
            eval_draws: 0x5eed_0004,
        }
    }
}

// ---------------------------------------------------------------------------
// Scene generation

/// Street-canyon generator parameters. Ranges are sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanyonParams {
    pub street_width: (f64, f64),
    pub street_length: (f64, f64),
    /// Buildings per street side, inclusive.
    pub buildings_per_side: (usize, usize),
    pub building_depth: (f64, f64),
    pub building_height: (f64, f64),
    /// Up to this many facets are deleted uniformly at random.
    pub r_max: usize,
    pub min_separation: f64,
    pub max_placement_retries: usize,
}

impl Default for CanyonParams {
    /// Full-size canyon: 6-8 buildings of 10 facets each plus the ground,
    /// minus up to 6 removals, lands the facet count in the 60-90 range.
    fn default() -> Self {
        CanyonParams {
            street_width: (10.0, 20.0),
            street_length: (40.0, 80.0),
            buildings_per_side: (3, 4),
            building_depth: (5.0, 15.0),
            building_height: (5.0, 20.0),
            r_max: 6,
            min_separation: 1.0,
            max_placement_retries: 100,
        }
    }
}

impl CanyonParams {
    /// Small canyon (one building per side, ~20 facets) for quick runs.
    pub fn desk() -> Self {
        CanyonParams {
            street_width: (9.0, 12.0),
            street_length: (16.0, 24.0),
            buildings_per_side: (1, 1),
            building_depth: (4.0, 6.0),
            building_height: (7.0, 10.0),
            r_max: 2,
            min_separation: 1.0,
            max_placement_retries: 100,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo;
        if !(range_ok(self.street_width)
            && range_ok(self.street_length)
            && range_ok(self.building_depth)
            && range_ok(self.building_height))
        {
            return Err(TrainError::Config("canyon ranges must be positive".into()));
        }
        if self.buildings_per_side.0 < 1 || self.buildings_per_side.1 < self.buildings_per_side.0 {
            return Err(TrainError::Config("buildings_per_side range invalid".into()));
        }
        if self.min_separation <= 0.0 || self.max_placement_retries == 0 {
            return Err(TrainError::Config("placement parameters invalid".into()));
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Triangulates the five visible faces of an axis-aligned box (no bottom).
fn box_facets(x0: f64, x1: f64, y0: f64, y1: f64, h: f64, out: &mut Vec<[Vec3; 3]>) {
    let v = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    // Walls at y0 and y1.
    out.push([v(x0, y0, 0.0), v(x1, y0, 0.0), v(x1, y0, h)]);
    out.push([v(x0, y0, 0.0), v(x1, y0, h), v(x0, y0, h)]);
    out.push([v(x0, y1, 0.0), v(x1, y1, h), v(x1, y1, 0.0)]);
    out.push([v(x0, y1, 0.0), v(x0, y1, h), v(x1, y1, h)]);
    // Walls at x0 and x1.
    out.push([v(x0, y0, 0.0), v(x0, y1, h), v(x0, y1, 0.0)]);
    out.push([v(x0, y0, 0.0), v(x0, y0, h), v(x0, y1, h)]);
    out.push([v(x1, y0, 0.0), v(x1, y1, 0.0), v(x1, y1, h)]);
    out.push([v(x1, y0, 0.0), v(x1, y1, h), v(x1, y0, h)]);
    // Roof.
    out.push([v(x0, y0, h), v(x1, y0, h), v(x1, y1, h)]);
    out.push([v(x0, y0, h), v(x1, y1, h), v(x0, y1, h)]);
}

/// Generates one street-canyon scene. The draw order is fixed, so a given
/// (rng state, params) pair always produces the same scene.
pub fn generate_canyon_scene(
    rng: &mut impl Rng,
    params: &CanyonParams,
) -> Result<Scene, TrainError> {
    params.validate()?;
    let width = sample_range(rng, params.street_width);
    let length = sample_range(rng, params.street_length);

    let mut facets: Vec<[Vec3; 3]> = Vec::new();
    let mut roofline = f64::INFINITY;
    let mut y_extent = width / 2.0;

    // Ground placeholder; its final extent depends on the building depths,
    // so it is filled in after both rows are placed.
    facets.push([Vec3::ZERO; 3]);
    facets.push([Vec3::ZERO; 3]);

    for side in [-1.0, 1.0] {
        let count = if params.buildings_per_side.0 == params.buildings_per_side.1 {
            params.buildings_per_side.0
        } else {
            rng.gen_range(params.buildings_per_side.0..=params.buildings_per_side.1)
        };
        let slot = length / count as f64;
        for i in 0..count {
            let blen = slot * rng.gen_range(0.6..0.95);
            let x0 = i as f64 * slot + rng.gen_range(0.0..1.0) * (slot - blen);
            let depth = sample_range(rng, params.building_depth);
            let height = sample_range(rng, params.building_height);
            let (y0, y1) = if side < 0.0 {
                (-width / 2.0 - depth, -width / 2.0)
            } else {
                (width / 2.0, width / 2.0 + depth)
            };
            box_facets(x0, x0 + blen, y0, y1, height, &mut facets);
            roofline = roofline.min(height);
            y_extent = y_extent.max(width / 2.0 + depth);
        }
    }

    let g = y_extent;
    facets[0] = [
        Vec3::new(0.0, -g, 0.0),
        Vec3::new(length, -g, 0.0),
        Vec3::new(length, g, 0.0),
    ];
    facets[1] = [
        Vec3::new(0.0, -g, 0.0),
        Vec3::new(length, g, 0.0),
        Vec3::new(0.0, g, 0.0),
    ];

    // Random facet removal (keep at least one facet).
    let n_full = facets.len();
    let r = rng.gen_range(0..=params.r_max.min(n_full - 1));
    let removed = rand::seq::index::sample(rng, n_full, r);
    let mut keep: Vec<bool> = vec![true; n_full];
    for idx in removed.iter() {
        keep[idx] = false;
    }
    let facets: Vec<[Vec3; 3]> = facets
        .into_iter()
        .zip(keep)
        .filter_map(|(f, k)| k.then_some(f))
        .collect();

    // TX/RX inside the open canyon: above ground, below the lowest roof,
    // strictly between the facades.
    let sample_point = |rng: &mut dyn rand::RngCore| {
        Vec3::new(
            rng.gen_range(0.0..length),
            rng.gen_range(-width / 2.0..width / 2.0),
            rng.gen_range(0.0..roofline).max(1e-3),
        )
    };
    for _ in 0..params.max_placement_retries {
        let tx = sample_point(rng);
        let rx = sample_point(rng);
        if tx.distance(rx) >= params.min_separation {
            return Ok(Scene::new(tx, rx, facets)?);
        }
    }
    Err(TrainError::Placement {
        retries: params.max_placement_retries,
    })
}

// ---------------------------------------------------------------------------
// Training configuration

/// Full training configuration; serializable as JSON for the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    pub model: GfnConfig,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub reward: RewardMode,
    pub eval_every: u64,
    pub eval_scenes: usize,
    pub eval_samples_per_scene: usize,
    #[serde(default)]
    pub seeds: Seeds,
    pub scene_gen: CanyonParams,
    #[serde(default = "default_oracle_cap")]
    pub oracle_cap: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_k_max() -> usize {
    DEFAULT_K_MAX
}

fn default_oracle_cap() -> u64 {
    DEFAULT_ORACLE_CAP
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("train_out")
}

impl Default for TrainConfig {
    /// Full-scale defaults. The desk presets below are what the tests run.
    fn default() -> Self {
        TrainConfig {
            k: 1,
            k_max: DEFAULT_K_MAX,
            model: GfnConfig::default(),
            steps: 500_000,
            batch: 50,
            lr: 3e-5,
            reward: RewardMode::Binary,
            eval_every: 1000,
            eval_scenes: 100,
            eval_samples_per_scene: 10,
            seeds: Seeds::default(),
            scene_gen: CanyonParams::default(),
            oracle_cap: DEFAULT_ORACLE_CAP,
            out_dir: default_out_dir(),
        }
    }
}

impl TrainConfig {
    /// Single-bounce desk preset: small scenes, small model, minutes not days.
    pub fn desk_k1() -> Self {
        TrainConfig {
            k: 1,
            model: GfnConfig {
                d: 32,
                flow_hidden: 64,
                logit_clamp: 30.0,
                loss: crate::gfn::LossVariant::Raw,
            },
            steps: 20_000,
            eval_every: 2_000,
            eval_scenes: 30,
            scene_gen: CanyonParams::desk(),
            ..TrainConfig::default()
        }
    }

    /// Double-bounce desk preset, meant to start from a trained K=1 model.
    pub fn desk_k2() -> Self {
        TrainConfig {
            k: 2,
            steps: 4_000,
            eval_every: 1_000,
            eval_samples_per_scene: 50,
            ..TrainConfig::desk_k1()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.k < 1 || self.k > self.k_max {
            return bad("k must satisfy 1 <= k <= k_max");
        }
        if self.model.d == 0 || self.model.flow_hidden == 0 {
            return bad("model dimensions must be positive");
        }
        if self.model.logit_clamp <= 0.0 {
            return bad("logit_clamp must be positive");
        }
        if self.batch == 0 || self.lr <= 0.0 {
            return bad("batch and lr must be positive");
        }
        if self.eval_every == 0 || self.eval_scenes == 0 || self.eval_samples_per_scene == 0 {
            return bad("evaluation parameters must be positive");
        }
        if self.seeds.train == self.seeds.eval_scenes {
            return bad("train and eval_scenes seeds must differ (held-out disjointness)");
        }
        self.scene_gen.validate()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Per-scene evaluation breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: usize,
    pub num_facets: usize,
    pub draws: usize,
    pub valid_draws: usize,
    pub distinct_valid: usize,
    pub oracle_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub hit_rate: f64,
    pub per_scene: Vec<SceneEval>,
}

/// Draw-level accuracy over all scenes (duplicates counted), and coverage of
/// the oracle sets (distinct valid candidates found / all valid candidates);
/// scenes with an empty oracle set contribute to accuracy but are excluded
/// from both sides of the hit rate, whose 0/0 case reports 0.
pub fn aggregate_metrics(per_scene: Vec<SceneEval>) -> EvalMetrics {
    let draws: usize = per_scene.iter().map(|s| s.draws).sum();
    let valid: usize = per_scene.iter().map(|s| s.valid_draws).sum();
    let accuracy = if draws > 0 {
        valid as f64 / draws as f64
    } else {
        0.0
    };
    let denom: usize = per_scene
        .iter()
        .filter(|s| s.oracle_size > 0)
        .map(|s| s.oracle_size)
        .sum();
    let num: usize = per_scene
        .iter()
        .filter(|s| s.oracle_size > 0)
        .map(|s| s.distinct_valid)
        .sum();
    let hit_rate = if denom > 0 {
        num as f64 / denom as f64
    } else {
        0.0
    };
    EvalMetrics {
        accuracy,
        hit_rate,
        per_scene,
    }
}

/// Held-out scene set with everything cacheable precomputed: normalized
/// features and the oracle's valid-candidate sets.
pub struct EvalContext {
    feats: Vec<InvariantFeatures>,
    oracles: Vec<BTreeSet<Vec<usize>>>,
    num_facets: Vec<usize>,
    k: usize,
}

impl EvalContext {
    pub fn new(scenes: &[Scene], k: usize, oracle_cap: u64) -> Result<Self, TrainError> {
        let prepared: Vec<(InvariantFeatures, BTreeSet<Vec<usize>>, usize)> = scenes
            .par_iter()
            .map(|scene| -> Result<_, TrainError> {
                let ns = normalize_scene(scene)?;
                let feat = featurize(&ns);
                let oracle = oracle_valid_set(&ns.scene, k, oracle_cap)?
                    .into_iter()
                    .map(|(cand, _)| cand.ids().to_vec())
                    .collect();
                Ok((feat, oracle, scene.num_facets()))
            })
            .collect::<Result<_, _>>()?;
        let mut feats = Vec::new();
        let mut oracles = Vec::new();
        let mut num_facets = Vec::new();
        for (f, o, n) in prepared {
            feats.push(f);
            oracles.push(o);
            num_facets.push(n);
        }
        Ok(EvalContext {
            feats,
            oracles,
            num_facets,
            k,
        })
    }

    pub fn oracle_sizes(&self) -> Vec<usize> {
        self.oracles.iter().map(|o| o.len()).collect()
    }

    pub fn num_scenes(&self) -> usize {
        self.feats.len()
    }

    /// Samples `m` candidates per scene and aggregates. Scene draws use
    /// per-scene seeds derived from `draw_seed`, so results do not depend on
    /// thread scheduling.
    pub fn run(
        &self,
        model: &GfnModel,
        m: usize,
        draw_seed: u64,
    ) -> Result<EvalMetrics, TrainError> {
        let per_scene: Vec<SceneEval> = self
            .feats
            .par_iter()
            .enumerate()
            .map(|(i, feat)| -> Result<SceneEval, TrainError> {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    draw_seed,
                    STREAM_EVAL_DRAWS,
                    i as u64,
                ));
                let mut tape = Tape::new();
                let enc = model.encode_scene(&mut tape, feat)?;
                let oracle = &self.oracles[i];
                let mut valid_draws = 0;
                let mut distinct: BTreeSet<Vec<usize>> = BTreeSet::new();
                for _ in 0..m {
                    let traj = model.sample_trajectory(&mut tape, &enc, self.k, &mut rng)?;
                    let ids = traj.candidate.ids().to_vec();
                    if oracle.contains(&ids) {
                        valid_draws += 1;
                        distinct.insert(ids);
                    }
                }
                Ok(SceneEval {
                    scene: i,
                    num_facets: self.num_facets[i],
                    draws: m,
                    valid_draws,
                    distinct_valid: distinct.len(),
                    oracle_size: oracle.len(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(aggregate_metrics(per_scene))
    }
}

/// One-shot evaluation of a model on a scene list.
pub fn evaluate(
    model: &GfnModel,
    scenes: &[Scene],
    k: usize,
    samples_per_scene: usize,
    draw_seed: u64,
    oracle_cap: u64,
) -> Result<EvalMetrics, TrainError> {
    EvalContext::new(scenes, k, oracle_cap)?.run(model, samples_per_scene, draw_seed)
}

/// Generates the `count` held-out scenes for a seed.
pub fn eval_scene_set(
    seed: u64,
    count: usize,
    params: &CanyonParams,
) -> Result<Vec<Scene>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| generate_canyon_scene(&mut rng, params))
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics log

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub hit_rate: f64,
}

pub const METRICS_HEADER: &str = "step,loss,accuracy,hit_rate";

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss, r.accuracy, r.hit_rate
        ));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn parse_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, TrainError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != METRICS_HEADER {
                return Err(TrainError::Config(format!(
                    "unexpected metrics header: {line}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TrainError::Config(format!(
                "metrics line {lineno} has {} fields",
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, TrainError> {
            s.parse()
                .map_err(|_| TrainError::Config(format!("bad number {s} on line {lineno}")))
        };
        rows.push(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|_| TrainError::Config(format!("bad step on line {lineno}")))?,
            loss: parse(fields[1])?,
            accuracy: parse(fields[2])?,
            hit_rate: parse(fields[3])?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Training

pub struct TrainOutcome {
    pub model: GfnModel,
    pub metrics: Vec<MetricsRow>,
    pub metrics_csv: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Copies the weights of a trained checkpoint into a fresh model for a new
/// interaction count. The architecture is K-independent, so the copy is
/// verbatim; only the config's K changes.
pub fn curriculum_init(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<GfnModel, TrainError> {
    let (model, _source_k) = GfnModel::from_checkpoint(ckpt)?;
    if model.cfg.d != cfg.model.d || model.cfg.flow_hidden != cfg.model.flow_hidden {
        return Err(TrainError::ArchMismatch(format!(
            "checkpoint d={} flow_hidden={} vs config d={} flow_hidden={}",
            model.cfg.d, model.cfg.flow_hidden, cfg.model.d, cfg.model.flow_hidden
        )));
    }
    Ok(model)
}

/// Runs the training loop. Returns the final model plus the metrics log;
/// side effects under `cfg.out_dir`: `metrics.csv`, `evals.jsonl` (per-scene
/// breakdown), periodic checkpoints and `ckpt_final.json`.
pub fn train(cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;

    let mut model = match init {
        Some(ckpt) => curriculum_init(ckpt, cfg)?,
        None => GfnModel::init(cfg.model.clone(), cfg.seeds.params),
    };
    // The loss variant and clamp are training-time choices.
    model.cfg.loss = cfg.model.loss;
    model.cfg.logit_clamp = cfg.model.logit_clamp;
    let mut adam = AdamState::new(cfg.lr, &model.params);

    let held_out = eval_scene_set(cfg.seeds.eval_scenes, cfg.eval_scenes, &cfg.scene_gen)?;
    let eval_ctx = EvalContext::new(&held_out, cfg.k, cfg.oracle_cap)?;

    let csv_path = cfg.out_dir.join("metrics.csv");
    let jsonl_path = cfg.out_dir.join("evals.jsonl");
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut jsonl = std::io::BufWriter::new(
        std::fs::File::create(&jsonl_path).map_err(io_err(&jsonl_path))?,
    );

    let mut window_losses: Vec<f64> = Vec::new();

    let run_eval = |model: &GfnModel,
                        adam: &AdamState,
                        step: u64,
                        window: &mut Vec<f64>,
                        rows: &mut Vec<MetricsRow>,
                        jsonl: &mut std::io::BufWriter<std::fs::File>|
     -> Result<(), TrainError> {
        let metrics = eval_ctx.run(model, cfg.eval_samples_per_scene, cfg.seeds.eval_draws)?;
        let loss = if window.is_empty() {
            f64::NAN
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        window.clear();
        rows.push(MetricsRow {
            step,
            loss,
            accuracy: metrics.accuracy,
            hit_rate: metrics.hit_rate,
        });
        write_metrics_csv(&csv_path, rows)?;
        for s in &metrics.per_scene {
            let mut line = serde_json::to_value(s).expect("scene eval json");
            line["step"] = serde_json::json!(step);
            writeln!(jsonl, "{line}").map_err(io_err(&jsonl_path))?;
        }
        jsonl.flush().map_err(io_err(&jsonl_path))?;
        model
            .to_checkpoint(Some(adam), step, cfg.k)
            .save(cfg.out_dir.join(format!("ckpt_{step}.json")))?;
        Ok(())
    };

    for step in 0..cfg.steps {
        if step % cfg.eval_every == 0 {
            run_eval(&model, &adam, step, &mut window_losses, &mut rows, &mut jsonl)?;
        }

        let mut scene_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.seeds.train, STREAM_SCENE, step));
        let scene = generate_canyon_scene(&mut scene_rng, &cfg.scene_gen)?;
        let ns = normalize_scene(&scene)?;
        let feat = featurize(&ns);

        let mut tape = Tape::new();
        let enc = model.encode_scene(&mut tape, &feat)?;
        let mut batch: Vec<Trajectory> = Vec::with_capacity(cfg.batch);
        for j in 0..cfg.batch {
            let mut traj_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seeds.train,
                STREAM_TRAJ,
                step * cfg.batch as u64 + j as u64,
            ));
            let mut traj = model.sample_trajectory(&mut tape, &enc, cfg.k, &mut traj_rng)?;
            traj.reward = crate::gfn::reward(&ns.scene, &traj.candidate, cfg.reward);
            batch.push(traj);
        }

        let diag = |model: &GfnModel, adam: &AdamState, reason: String| -> TrainError {
            let path = cfg.out_dir.join(format!("ckpt_diag_{step}.json"));
            let save = model.to_checkpoint(Some(adam), step, cfg.k).save(&path);
            match save {
                Ok(()) => TrainError::Aborted {
                    step,
                    reason,
                    checkpoint: path.display().to_string(),
                },
                Err(e) => e.into(),
            }
        };

        let loss_node = match model.flow_matching_loss(&mut tape, &batch) {
            Ok(node) => node,
            Err(e) => return Err(diag(&model, &adam, e.to_string())),
        };
        window_losses.push(tape.scalar(loss_node));

        let grads = tape.backward(loss_node, &model.params)?;
        if let Err(e) = adam.step(&mut model.params, &grads) {
            return Err(diag(&model, &adam, e.to_string()));
        }
    }

    run_eval(
        &model,
        &adam,
        cfg.steps,
        &mut window_losses,
        &mut rows,
        &mut jsonl,
    )?;
    let final_path = cfg.out_dir.join("ckpt_final.json");
    model
        .to_checkpoint(Some(&adam), cfg.steps, cfg.k)
        .save(&final_path)?;

    Ok(TrainOutcome {
        model,
        metrics: rows,
        metrics_csv: csv_path,
        final_checkpoint: final_path,
    })
}

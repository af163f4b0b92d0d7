//! The generative path-candidate sampler.
//!
//! A Deep-Sets encoder maps the invariant scene features to one vector per
//! facet plus a pooled scene vector. Candidates are built one facet at a
//! time: a recurrent cell folds the visited facets into a hidden state
//! (positional encoding of the visit order), and a shared flow head scores
//! every facet from `concat(scene, object_i, hidden)`. The exponential of the
//! clamped score is the edge *flow*; sampling normalizes flows per state, and
//! the flow to the facet just visited is forced to exactly zero so immediate
//! repeats are unreachable. Training minimizes the squared flow-conservation
//! residual at every visited state, which at the optimum makes terminal
//! states sampled proportionally to their reward.
//!
//! The shared per-object head (rather than a fixed-size output layer) is what
//! lets one set of weights serve scenes of any size.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{scene_scale, InvariantFeatures, Scene, GLOBAL_DIM, PER_FACET_DIM};
use crate::neural::{Activation, AdamState, Checkpoint, Mlp, NodeId, ParamBuilder, ParamId, ParamSet, Tape};
use crate::tracer::{trace_path, validate_path, PathCandidate};

#[derive(Debug, Error)]
pub enum GfnError {
    #[error("every object is masked (N=1 with a visited facet)")]
    AllMasked,
    #[error("facet {id} equals the last visited facet")]
    ConsecutiveRepeat { id: usize },
    #[error("facet {id} out of range ({n} objects)")]
    OutOfRange { id: usize, n: usize },
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("flow-matching loss is non-finite")]
    NonFiniteLoss,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Neural(#[from] crate::neural::NeuralError),
}

/// Stabilization floor inside the log-space loss variant.
pub const EPS_LOG: f64 = 1e-20;

/// Flow-matching residual formulation.
///
/// `Raw` is the plain squared conservation residual on flows. `LogSpace`
/// compares log-flows instead, `(log F - log(R + sum F' + eps))^2`; it is a
/// stabilization option, not the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    Raw,
    LogSpace,
}

/// Architecture hyperparameters. `d` is the feature width; the flow head is
/// a 3-layer MLP with `flow_hidden` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfnConfig {
    pub d: usize,
    pub flow_hidden: usize,
    /// Flow logits are clamped to +-logit_clamp before exponentiation.
    pub logit_clamp: f64,
    #[serde(default)]
    pub loss: LossVariant,
}

impl Default for GfnConfig {
    fn default() -> Self {
        GfnConfig {
            d: 100,
            flow_hidden: 500,
            logit_clamp: 30.0,
            loss: LossVariant::Raw,
        }
    }
}

#[derive(Debug, Clone)]
struct Cell {
    w_hidden: ParamId,
    w_input: ParamId,
    bias: ParamId,
}

/// All learnable weights of the sampler plus their layout.
#[derive(Debug, Clone)]
pub struct GfnModel {
    pub cfg: GfnConfig,
    pub params: ParamSet,
    object_encoder: Mlp,
    scene_encoder: Mlp,
    cell: Cell,
    flow_head: Mlp,
}

/// Encoded scene on a tape: the pooled scene vector and one vector per facet
/// (row order matches facet ids).
pub struct SceneEncoding {
    pub scene_vec: NodeId,
    pub obj_vecs: Vec<NodeId>,
}

impl SceneEncoding {
    pub fn num_objects(&self) -> usize {
        self.obj_vecs.len()
    }
}

/// Sampler state: the visited facets and the recurrent hidden vector (a tape
/// node; the initial state's hidden is the zero vector).
pub struct SamplerState {
    pub visited: Vec<usize>,
    pub hidden: NodeId,
}

/// One sampling step: the full flow vector (masked entries exactly 0), the
/// tape nodes behind its entries, and the index drawn.
pub struct TrajectoryStep {
    pub flow_nodes: Vec<Option<NodeId>>,
    pub flow_values: Vec<f64>,
    pub chosen: usize,
}

/// A sampled state sequence with everything the loss needs: per-step flow
/// vectors (step `t+1` holds the child flows of the state reached at step
/// `t`), the terminal candidate, and its reward.
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub candidate: PathCandidate,
    pub reward: f64,
}

impl GfnModel {
    /// Fresh model with seeded initialization. Encoder and flow-head layers
    /// use relu (He-uniform init); the cell is tanh (Glorot-uniform).
    pub fn init(cfg: GfnConfig, seed: u64) -> Self {
        let d = cfg.d;
        let in_dim = PER_FACET_DIM + GLOBAL_DIM;
        let mut b = ParamBuilder::new(seed);
        let object_encoder = Mlp::build(&mut b, "object_encoder", &[in_dim, d, d, d], Activation::Relu);
        let scene_encoder = Mlp::build(&mut b, "scene_encoder", &[d, d, d, d], Activation::Relu);
        let cell = Cell {
            w_hidden: b.matrix("cell.w_hidden", d, d, crate::neural::Init::GlorotUniform),
            w_input: b.matrix("cell.w_input", d, d, crate::neural::Init::GlorotUniform),
            bias: b.matrix("cell.bias", d, 1, crate::neural::Init::Zero),
        };
        let flow_head = Mlp::build(
            &mut b,
            "flow_head",
            &[3 * d, cfg.flow_hidden, cfg.flow_hidden, 1],
            Activation::Relu,
        );
        GfnModel {
            cfg,
            params: b.finish(),
            object_encoder,
            scene_encoder,
            cell,
            flow_head,
        }
    }

    /// Encodes invariant features: each facet row (concatenated with the
    /// global block) through the object encoder, mean-pooled and passed
    /// through the scene encoder. Permuting facets permutes `obj_vecs` and
    /// leaves `scene_vec` unchanged up to summation round-off.
    pub fn encode_scene(
        &self,
        tape: &mut Tape,
        feat: &InvariantFeatures,
    ) -> Result<SceneEncoding, GfnError> {
        if feat.per_facet.is_empty() {
            return Err(GfnError::ShapeMismatch("no facets to encode".into()));
        }
        let obj_vecs: Vec<NodeId> = feat
            .per_facet
            .iter()
            .map(|row| {
                let mut input = Vec::with_capacity(PER_FACET_DIM + GLOBAL_DIM);
                input.extend_from_slice(row);
                input.extend_from_slice(&feat.global);
                let x = tape.input(input);
                self.object_encoder.forward_tape(tape, &self.params, x)
            })
            .collect();
        let pooled = tape.mean_pool(&obj_vecs);
        let scene_vec = self.scene_encoder.forward_tape(tape, &self.params, pooled);
        Ok(SceneEncoding { scene_vec, obj_vecs })
    }

    /// Root state: nothing visited, hidden = zero vector.
    pub fn initial_state(&self, tape: &mut Tape) -> SamplerState {
        SamplerState {
            visited: Vec::new(),
            hidden: tape.input(vec![0.0; self.cfg.d]),
        }
    }

    /// Appends `chosen` to the visit list and folds its object vector into
    /// the hidden state: `h' = tanh(W_h h + W_x obj + b)`.
    pub fn cell_update(
        &self,
        tape: &mut Tape,
        enc: &SceneEncoding,
        state: &SamplerState,
        chosen: usize,
    ) -> Result<SamplerState, GfnError> {
        if chosen >= enc.num_objects() {
            return Err(GfnError::OutOfRange {
                id: chosen,
                n: enc.num_objects(),
            });
        }
        if state.visited.last() == Some(&chosen) {
            return Err(GfnError::ConsecutiveRepeat { id: chosen });
        }
        let hh = tape.affine(&self.params, self.cell.w_hidden, None, state.hidden);
        let hx = tape.affine(
            &self.params,
            self.cell.w_input,
            Some(self.cell.bias),
            enc.obj_vecs[chosen],
        );
        let pre = tape.add_n(&[hh, hx]);
        let hidden = tape.tanh(pre);
        let mut visited = state.visited.clone();
        visited.push(chosen);
        Ok(SamplerState { visited, hidden })
    }

    /// Flow to every object from the current state:
    /// `exp(clamp(head(scene, obj_i, hidden), +-logit_clamp))`, with the flow
    /// to the last visited object masked out entirely (`None`; its value is
    /// exactly zero). The initial state masks nothing.
    pub fn flows(
        &self,
        tape: &mut Tape,
        enc: &SceneEncoding,
        state: &SamplerState,
    ) -> Result<Vec<Option<NodeId>>, GfnError> {
        let masked = state.visited.last().copied();
        if enc.num_objects() == 1 && masked.is_some() {
            return Err(GfnError::AllMasked);
        }
        let nodes = enc
            .obj_vecs
            .iter()
            .enumerate()
            .map(|(i, &obj)| {
                if Some(i) == masked {
                    return None;
                }
                let cat = tape.concat(&[enc.scene_vec, obj, state.hidden]);
                let logit = self.flow_head.forward_tape(tape, &self.params, cat);
                let clamped = tape.clamp(logit, -self.cfg.logit_clamp, self.cfg.logit_clamp);
                Some(tape.exp(clamped))
            })
            .collect();
        Ok(nodes)
    }

    /// Flow vector values with masked entries as exact zeros.
    pub fn flow_values(tape: &Tape, nodes: &[Option<NodeId>]) -> Vec<f64> {
        nodes
            .iter()
            .map(|n| n.map_or(0.0, |id| tape.scalar(id)))
            .collect()
    }

    /// Runs K (flows, sample, cell update) iterations from the root.
    /// The reward is left at zero for the caller to fill in.
    pub fn sample_trajectory(
        &self,
        tape: &mut Tape,
        enc: &SceneEncoding,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Trajectory, GfnError> {
        assert!(k >= 1, "trajectories need at least one step");
        self.walk(tape, enc, k, |values, rng_| sample_step(values, rng_), rng)
    }

    /// Teacher-forced walk along a fixed candidate, recording the same flow
    /// vectors sampling would have produced. This is what makes the loss a
    /// pure function of (parameters, visited states) for gradient checking.
    pub fn trajectory_for_candidate(
        &self,
        tape: &mut Tape,
        enc: &SceneEncoding,
        cand: &PathCandidate,
    ) -> Result<Trajectory, GfnError> {
        let ids = cand.ids().to_vec();
        let mut i = 0;
        self.walk(
            tape,
            enc,
            ids.len(),
            move |_values, _rng| {
                let id = ids[i];
                i += 1;
                id
            },
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )
    }

    fn walk<R>(
        &self,
        tape: &mut Tape,
        enc: &SceneEncoding,
        k: usize,
        mut choose: impl FnMut(&[f64], &mut R) -> usize,
        rng: &mut R,
    ) -> Result<Trajectory, GfnError> {
        let mut state = self.initial_state(tape);
        let mut steps = Vec::with_capacity(k);
        for _ in 0..k {
            let flow_nodes = self.flows(tape, enc, &state)?;
            let flow_values = Self::flow_values(tape, &flow_nodes);
            let chosen = choose(&flow_values, rng);
            if chosen >= flow_nodes.len() {
                return Err(GfnError::OutOfRange {
                    id: chosen,
                    n: flow_nodes.len(),
                });
            }
            if flow_nodes[chosen].is_none() {
                return Err(GfnError::ConsecutiveRepeat { id: chosen });
            }
            state = self.cell_update(tape, enc, &state, chosen)?;
            steps.push(TrajectoryStep {
                flow_nodes,
                flow_values,
                chosen,
            });
        }
        Ok(Trajectory {
            candidate: PathCandidate::from_unchecked(state.visited),
            steps,
            reward: 0.0,
        })
    }

    /// Mean squared flow-conservation residual over every visited non-initial
    /// state of the batch. At depth k < K the residual is the incoming flow
    /// minus the summed child flows (non-terminal states carry zero reward);
    /// at the terminal depth it is the incoming flow minus the reward.
    pub fn flow_matching_loss(
        &self,
        tape: &mut Tape,
        batch: &[Trajectory],
    ) -> Result<NodeId, GfnError> {
        if batch.is_empty() {
            return Err(GfnError::EmptyBatch);
        }
        let mut terms = Vec::new();
        for traj in batch {
            let k = traj.steps.len();
            for depth in 1..=k {
                let parent = &traj.steps[depth - 1];
                let parent_flow = parent.flow_nodes[parent.chosen]
                    .expect("chosen edge is never masked");
                let term = if depth < k {
                    let children: Vec<NodeId> = traj.steps[depth]
                        .flow_nodes
                        .iter()
                        .flatten()
                        .copied()
                        .collect();
                    let child_sum = tape.add_n(&children);
                    match self.cfg.loss {
                        LossVariant::Raw => {
                            let diff = tape.sub(parent_flow, child_sum);
                            tape.square(diff)
                        }
                        LossVariant::LogSpace => {
                            let lf = tape.log_shift(parent_flow, 0.0);
                            let ls = tape.log_shift(child_sum, EPS_LOG);
                            let diff = tape.sub(lf, ls);
                            tape.square(diff)
                        }
                    }
                } else {
                    match self.cfg.loss {
                        LossVariant::Raw => {
                            let r = tape.input_scalar(traj.reward);
                            let diff = tape.sub(parent_flow, r);
                            tape.square(diff)
                        }
                        LossVariant::LogSpace => {
                            let lr = tape.input_scalar((traj.reward + EPS_LOG).ln());
                            let lf = tape.log_shift(parent_flow, 0.0);
                            let diff = tape.sub(lf, lr);
                            tape.square(diff)
                        }
                    }
                };
                terms.push(term);
            }
        }
        let total = tape.add_n(&terms);
        let loss = tape.scale(total, 1.0 / terms.len() as f64);
        if !tape.scalar(loss).is_finite() {
            return Err(GfnError::NonFiniteLoss);
        }
        Ok(loss)
    }

    /// Serializes weights (and optionally optimizer state) with the
    /// architecture config and the number of interactions trained for.
    pub fn to_checkpoint(&self, adam: Option<&AdamState>, step: u64, k: usize) -> Checkpoint {
        let config = serde_json::json!({ "model": self.cfg, "k": k });
        Checkpoint::new(config, &self.params, adam, step)
    }

    /// Rebuilds a model from a checkpoint. Returns the model and the `k` it
    /// was trained for. The architecture is K-independent, so a different K
    /// may be used afterwards (curriculum initialization copies weights
    /// verbatim this way).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(GfnModel, usize), GfnError> {
        let cfg: GfnConfig = serde_json::from_value(
            ckpt.config
                .get("model")
                .ok_or_else(|| GfnError::CheckpointMismatch("missing model config".into()))?
                .clone(),
        )
        .map_err(|e| GfnError::CheckpointMismatch(e.to_string()))?;
        let k = ckpt
            .config
            .get("k")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| GfnError::CheckpointMismatch("missing k".into()))? as usize;
        let mut model = GfnModel::init(cfg, 0);
        model.params.fill_from_nested(&ckpt.params)?;
        Ok((model, k))
    }
}

/// Draws an index with probability proportional to its flow.
pub fn sample_step(flow_values: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = flow_values.iter().sum();
    assert!(
        total > 0.0 && total.is_finite(),
        "sample_step requires at least one positive flow"
    );
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &f) in flow_values.iter().enumerate() {
        if f > 0.0 {
            last_positive = i;
            cum += f;
            if cum > u {
                return i;
            }
        }
    }
    // Round-off pushed u past the final cumulative sum.
    last_positive
}

/// Terminal reward definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 1 if the candidate traces to a valid ray path, else 0.
    #[default]
    Binary,
    /// 1 / (path length in normalized units) if valid, else 0. Shorter valid
    /// paths earn more, which densifies the reward signal.
    InverseLength,
}

/// Traces and validates a candidate on the given scene. Tracer degeneracies
/// (parallel backward segments and the like) map to reward 0.
pub fn reward(scene: &Scene, cand: &PathCandidate, mode: RewardMode) -> f64 {
    let Ok(path) = trace_path(scene, cand) else {
        return 0.0;
    };
    if !validate_path(scene, &path).valid {
        return 0.0;
    }
    match mode {
        RewardMode::Binary => 1.0,
        RewardMode::InverseLength => {
            // Lengths are measured in the scene's normalized units so the
            // reward scale does not depend on the input units.
            let Ok(scale) = scene_scale(scene) else {
                return 0.0;
            };
            scale / path.total_length()
        }
    }
}

//! Shared actor and per-agent critic.
//!
//! Actor: observation encoder → graph convolution → multi-head attention
//! (identity when `heads == 0`) → Gaussian head whose mean is squashed into
//! the action range and whose spread is a single learned scalar.
//! Critic: encoder → graph convolution → per-agent value.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{activate, AttentionLayer, Bound, Dense, GraphConvLayer, ParamStore};
use super::tape::{GraphBatch, Tape, Var};
use super::{Activation, AttentionKind, NnError};
use crate::sim::OBS_DIM;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NnError>;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub obs_dim: usize,
    pub hidden: usize,
    /// 0 replaces attention by the identity.
    pub heads: usize,
    pub activation: Activation,
    pub attention: AttentionKind,
    pub action_low: f64,
    pub action_high: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            obs_dim: OBS_DIM,
            hidden: 64,
            heads: 8,
            activation: Activation::Tanh,
            attention: AttentionKind::Softmax,
            action_low: -3.0,
            action_high: 3.0,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.hidden == 0 {
            return Err(NnError::InvalidArchitecture("widths must be positive".into()));
        }
        if self.heads > 0 && self.hidden % self.heads != 0 {
            return Err(NnError::InvalidArchitecture(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.action_low < self.action_high) {
            return Err(NnError::InvalidArchitecture("action range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ActorLayers {
    encoder: Dense,
    conv: GraphConvLayer,
    attention: Option<AttentionLayer>,
    mean: Dense,
    log_spread: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct CriticLayers {
    encoder: Dense,
    conv: GraphConvLayer,
    value: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub arch: Architecture,
    /// θ.
    pub actor: ParamStore,
    /// Critic parameters.
    pub critic: ParamStore,
    actor_layers: ActorLayers,
    critic_layers: CriticLayers,
}

/// Actor nodes on a tape.
#[derive(Debug, Clone)]
pub struct ActorOutput {
    /// `N × 1` action means.
    pub mean: Var,
    /// `1 × 1` shared log-spread.
    pub log_spread: Var,
    /// One attention node per head.
    pub attention: Vec<Var>,
}

impl Policy {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root2 = std::f64::consts::SQRT_2;
        let d = arch.hidden;

        let mut actor = ParamStore::new();
        let encoder = Dense::new(&mut actor, "actor.encoder", arch.obs_dim, d, root2, true, &mut rng);
        let conv = GraphConvLayer::new(&mut actor, "actor.graph_conv", d, d, arch.activation, &mut rng);
        let attention = match arch.heads {
            0 => None,
            h => Some(AttentionLayer::new(&mut actor, "actor.attention", d, h, arch.attention, &mut rng)?),
        };
        let mean = Dense::new(&mut actor, "actor.mean", d, 1, 0.01, true, &mut rng);
        let log_spread = actor.add("actor.log_spread", Tensor::zeros(1, 1));

        let mut critic = ParamStore::new();
        let c_encoder = Dense::new(&mut critic, "critic.encoder", arch.obs_dim, d, root2, true, &mut rng);
        let c_conv = GraphConvLayer::new(&mut critic, "critic.graph_conv", d, d, arch.activation, &mut rng);
        let value = Dense::new(&mut critic, "critic.value", d, 1, 1.0, true, &mut rng);

        Ok(Policy {
            arch,
            actor,
            critic,
            actor_layers: ActorLayers {
                encoder,
                conv,
                attention,
                mean,
                log_spread,
            },
            critic_layers: CriticLayers {
                encoder: c_encoder,
                conv: c_conv,
                value,
            },
        })
    }

    fn check_obs(&self, obs: &Tensor, graph: &GraphBatch) -> Result<()> {
        if obs.cols() != self.arch.obs_dim || obs.rows() != graph.rows() {
            return Err(NnError::ShapeMismatch {
                op: "observation",
                left: obs.shape(),
                right: (graph.rows(), self.arch.obs_dim),
            });
        }
        Ok(())
    }

    /// Record the actor on `tape` for the `N × obs_dim` observations.
    pub fn actor_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        obs: &Tensor,
        graph: &Arc<GraphBatch>,
    ) -> Result<ActorOutput> {
        self.check_obs(obs, graph)?;
        let l = &self.actor_layers;
        let x = tape.input(obs.clone())?;
        let e = l.encoder.forward(tape, bound, x)?;
        let e = activate(tape, e, self.arch.activation)?;
        let h = l.conv.forward(tape, bound, e, graph)?;
        let (h, attention) = match &l.attention {
            Some(att) => att.forward(tape, bound, h, graph)?,
            None => (h, Vec::new()),
        };
        let raw = l.mean.forward(tape, bound, h)?;
        let squashed = tape.tanh(raw)?;
        let half = 0.5 * (self.arch.action_high - self.arch.action_low);
        let mid = 0.5 * (self.arch.action_high + self.arch.action_low);
        let scaled = tape.scale(squashed, half)?;
        let mean = tape.add_scalar(scaled, mid)?;
        Ok(ActorOutput {
            mean,
            log_spread: bound.var(l.log_spread),
            attention,
        })
    }

    /// `N × 1` per-agent values.
    pub fn critic_forward(&self, tape: &mut Tape, bound: &Bound, obs: &Tensor, graph: &Arc<GraphBatch>) -> Result<Var> {
        self.check_obs(obs, graph)?;
        let l = &self.critic_layers;
        let x = tape.input(obs.clone())?;
        let e = l.encoder.forward(tape, bound, x)?;
        let e = activate(tape, e, self.arch.activation)?;
        let h = l.conv.forward(tape, bound, e, graph)?;
        l.value.forward(tape, bound, h)
    }

    /// Deterministic (mean) actions.
    pub fn act_mean(&self, obs: &Tensor, graph: &Arc<GraphBatch>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.actor.bind(&mut tape)?;
        let out = self.actor_forward(&mut tape, &bound, obs, graph)?;
        Ok(tape.value(out.mean).clone())
    }

    pub fn values(&self, obs: &Tensor, graph: &Arc<GraphBatch>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.critic.bind(&mut tape)?;
        let v = self.critic_forward(&mut tape, &bound, obs, graph)?;
        Ok(tape.value(v).clone())
    }

    pub fn log_spread(&self) -> f64 {
        self.actor.get(self.actor_layers.log_spread).value.item()
    }

    pub fn spread(&self) -> f64 {
        self.log_spread().exp()
    }

    pub fn attention_layer(&self) -> Option<&AttentionLayer> {
        self.actor_layers.attention.as_ref()
    }
}

/// Per-row `log N(action | mean, exp(log_spread)²)`.
pub fn gaussian_log_density(tape: &mut Tape, action: Var, mean: Var, log_spread: Var) -> Result<Var> {
    let (n, c) = tape.value(mean).shape();
    let ls = tape.broadcast(log_spread, n, c)?;
    let spread = tape.exp(ls)?;
    let diff = tape.sub(action, mean)?;
    let z = tape.div(diff, spread)?;
    let z2 = tape.mul(z, z)?;
    let half = tape.scale(z2, -0.5)?;
    let lp = tape.sub(half, ls)?;
    tape.add_scalar(lp, -0.5 * LN_2PI)
}

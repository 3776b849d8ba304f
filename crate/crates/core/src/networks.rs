//! Actor and critic networks with the permutation-invariant set embedding.
//!
//! The other-follower rows go through `Conv1 -> SE -> Conv2 -> SE -> max-pool`,
//! where each convolution spans exactly one row so every feature depends on a
//! single follower. Max-pooling over rows then yields a fixed-length vector that
//! does not depend on the order or number of followers. The CNNMP variant is the
//! same pipeline without the two SE blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{roll_action_max, Action, EnvConfig, Observation};
use crate::error::{FlockError, Result};
use crate::nn::{
    join, max_pool_backward, max_pool_entities, Activation, Dense, EntityConv, Parameterized, SeBlock, SeTrace,
    Tensor2,
};
use crate::scalar::Scalar;

/// Width of one other-follower row.
pub const ROW_WIDTH: usize = 5;
/// Width of the ego/leader joint state.
pub const EGO_WIDTH: usize = 9;
/// Weight range of the freshly initialized output layers.
pub const HEAD_INIT_LIMIT: f64 = 3e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingVariant {
    /// Convolutions with squeeze-and-excitation, then max-pooling.
    Semp,
    /// Convolutions and max-pooling only.
    Cnnmp,
}

impl std::fmt::Display for EmbeddingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingVariant::Semp => "semp",
            EmbeddingVariant::Cnnmp => "cnnmp",
        })
    }
}

impl std::str::FromStr for EmbeddingVariant {
    type Err = FlockError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "semp" => Ok(EmbeddingVariant::Semp),
            "cnnmp" => Ok(EmbeddingVariant::Cnnmp),
            other => Err(FlockError::config("network.embedding.variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub conv1_filters: usize,
    /// Length of the embedding vector.
    pub conv2_filters: usize,
    pub se_reduction: usize,
    pub conv_activation: Activation,
    pub variant: EmbeddingVariant,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            conv1_filters: 32,
            conv2_filters: 64,
            se_reduction: 8,
            conv_activation: Activation::Relu,
            variant: EmbeddingVariant::Semp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub embedding: EmbeddingConfig,
    /// Units of the ReLU layer applied to the ego/leader state.
    pub ego_units: usize,
    /// ReLU layers after the merge, before the output layer.
    pub hidden_units: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            embedding: EmbeddingConfig::default(),
            ego_units: 64,
            hidden_units: vec![128, 64],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.embedding;
        for (field, v) in [
            ("network.embedding.conv1_filters", e.conv1_filters),
            ("network.embedding.conv2_filters", e.conv2_filters),
            ("network.embedding.se_reduction", e.se_reduction),
            ("network.ego_units", self.ego_units),
        ] {
            if v == 0 {
                return Err(FlockError::config(field, "must be positive"));
            }
        }
        if e.variant == EmbeddingVariant::Semp {
            for (field, c) in [
                ("network.embedding.conv1_filters", e.conv1_filters),
                ("network.embedding.conv2_filters", e.conv2_filters),
            ] {
                if c % e.se_reduction != 0 {
                    return Err(FlockError::config(
                        field,
                        format!("{c} is not divisible by se_reduction {}", e.se_reduction),
                    ));
                }
            }
        }
        if self.hidden_units.contains(&0) {
            return Err(FlockError::config("network.hidden_units", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Scales raw joint states to roughly unit range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBounds {
    /// Positions are divided by this (the outer annulus radius).
    pub position_scale: f64,
    pub speed_mid: f64,
    pub speed_half_range: f64,
}

impl NormBounds {
    pub fn from_env(cfg: &EnvConfig) -> Self {
        let k = &cfg.kinematics;
        NormBounds {
            position_scale: cfg.reward.d2,
            speed_mid: 0.5 * (k.v_max + k.v_min),
            speed_half_range: 0.5 * (k.v_max - k.v_min),
        }
    }
}

/// Network-ready view of an observation.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput<T> {
    pub ego: [T; EGO_WIDTH],
    /// One row per other follower, possibly zero rows.
    pub others: Tensor2<T>,
}

/// Positions / `d2`, angles / `pi`, speeds mapped to `[-1, 1]` over `[v_min, v_max]`.
pub fn normalize_inputs<T: Scalar>(obs: &Observation<T>, bounds: &NormBounds) -> NetInput<T> {
    let pos = T::one() / T::lit(bounds.position_scale);
    let ang = T::one() / T::PI();
    let mid = T::lit(bounds.speed_mid);
    let half = T::one() / T::lit(bounds.speed_half_range);
    let s = &obs.ego.0;
    let ego = [
        s[0] * pos,
        s[1] * pos,
        s[2] * ang,
        s[3] * ang,
        s[4] * ang,
        s[5] * ang,
        (s[6] - mid) * half,
        (s[7] - mid) * half,
        (s[8] - mid) * half,
    ];
    let mut others = Tensor2::zeros(obs.others.len(), ROW_WIDTH);
    for (e, r) in obs.others.rows.iter().enumerate() {
        others
            .row_mut(e)
            .copy_from_slice(&[r[0] * pos, r[1] * pos, r[2] * ang, r[3] * ang, (r[4] - mid) * half]);
    }
    NetInput { ego, others }
}

/// The set-embedding module.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub conv1: EntityConv<T>,
    pub se1: Option<SeBlock<T>>,
    pub conv2: EntityConv<T>,
    pub se2: Option<SeBlock<T>>,
}

/// Cached forward values of [`Embedding`]. `None` for an empty input.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTrace<T> {
    input: Tensor2<T>,
    conv1: Tensor2<T>,
    se1: Option<(Tensor2<T>, SeTrace<T>)>,
    conv2: Tensor2<T>,
    se2: Option<(Tensor2<T>, SeTrace<T>)>,
    argmax: Vec<usize>,
}

impl<T: Scalar> Embedding<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &EmbeddingConfig, rng: &mut R) -> Result<Self> {
        let act = cfg.conv_activation;
        let conv1 = EntityConv::new(Dense::init(ROW_WIDTH, cfg.conv1_filters, act, rng));
        let se1 = match cfg.variant {
            EmbeddingVariant::Semp => Some(SeBlock::init(cfg.conv1_filters, cfg.se_reduction, rng)?),
            EmbeddingVariant::Cnnmp => None,
        };
        let conv2 = EntityConv::new(Dense::init(cfg.conv1_filters, cfg.conv2_filters, act, rng));
        let se2 = match cfg.variant {
            EmbeddingVariant::Semp => Some(SeBlock::init(cfg.conv2_filters, cfg.se_reduction, rng)?),
            EmbeddingVariant::Cnnmp => None,
        };
        Ok(Embedding { conv1, se1, conv2, se2 })
    }

    pub fn output_len(&self) -> usize {
        self.conv2.filters()
    }

    pub fn forward(&self, rows: &Tensor2<T>) -> Result<Vec<T>> {
        Ok(self.forward_traced(rows)?.0)
    }

    pub fn forward_traced(&self, rows: &Tensor2<T>) -> Result<(Vec<T>, Option<EmbeddingTrace<T>>)> {
        if rows.cols() != ROW_WIDTH {
            return Err(FlockError::Shape {
                context: "embedding row width",
                expected: ROW_WIDTH,
                actual: rows.cols(),
            });
        }
        if rows.rows() == 0 {
            return Ok((vec![T::zero(); self.output_len()], None));
        }
        let conv1 = self.conv1.forward(rows)?;
        let se1 = self.se1.as_ref().map(|se| se.forward(&conv1)).transpose()?;
        let conv2 = self.conv2.forward(se1.as_ref().map_or(&conv1, |s| &s.0))?;
        let se2 = self.se2.as_ref().map(|se| se.forward(&conv2)).transpose()?;
        let (pooled, argmax) = max_pool_entities(se2.as_ref().map_or(&conv2, |s| &s.0))?;
        Ok((
            pooled,
            Some(EmbeddingTrace {
                input: rows.clone(),
                conv1,
                se1,
                conv2,
                se2,
                argmax,
            }),
        ))
    }

    pub fn backward(&mut self, trace: &EmbeddingTrace<T>, grad: &[T]) -> Result<()> {
        let mut g = max_pool_backward(&trace.argmax, grad, trace.input.rows());
        if let (Some(se), Some((_, st))) = (self.se2.as_mut(), trace.se2.as_ref()) {
            g = se.backward(&trace.conv2, st, &g)?;
        }
        let conv2_in = trace.se1.as_ref().map_or(&trace.conv1, |s| &s.0);
        g = self.conv2.backward(conv2_in, &trace.conv2, &g)?;
        if let (Some(se), Some((_, st))) = (self.se1.as_mut(), trace.se1.as_ref()) {
            g = se.backward(&trace.conv1, st, &g)?;
        }
        self.conv1.backward(&trace.input, &trace.conv1, &g)?;
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for Embedding<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        if let Some(se) = &self.se1 {
            se.visit_params(&join(prefix, "se1"), f);
        }
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(se) = &self.se2 {
            se.visit_params(&join(prefix, "se2"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T], &mut [T])) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        if let Some(se) = &mut self.se1 {
            se.visit_params_mut(&join(prefix, "se1"), f);
        }
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        if let Some(se) = &mut self.se2 {
            se.visit_params_mut(&join(prefix, "se2"), f);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Two tanh outputs scaled into the action box.
    Actor,
    /// One linear output.
    Critic,
}

/// Shared trunk plus an actor or critic head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet<T> {
    pub head_kind: Head,
    pub ego: Dense<T>,
    pub embedding: Embedding<T>,
    pub hidden: Vec<Dense<T>>,
    pub head: Dense<T>,
}

/// Cached forward values of [`PolicyNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetTrace<T> {
    ego_in: [T; EGO_WIDTH],
    ego_out: Vec<T>,
    embedding: Option<EmbeddingTrace<T>>,
    merged: Vec<T>,
    hidden: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> NetTrace<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

impl<T: Scalar> PolicyNet<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &NetworkConfig, head_kind: Head, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ego = Dense::init(EGO_WIDTH, cfg.ego_units, Activation::Relu, rng);
        let embedding = Embedding::init(&cfg.embedding, rng)?;
        let mut width = cfg.ego_units + cfg.embedding.conv2_filters;
        let mut hidden = Vec::with_capacity(cfg.hidden_units.len());
        for &units in &cfg.hidden_units {
            hidden.push(Dense::init(width, units, Activation::Relu, rng));
            width = units;
        }
        // Near-zero heads: the roll action is an increment, so a biased initial actor
        // drives every follower into a saturated turn before exploration can act.
        let head = match head_kind {
            Head::Actor => Dense::init_uniform(width, 2, Activation::Tanh, HEAD_INIT_LIMIT, rng),
            Head::Critic => Dense::init_uniform(width, 1, Activation::Linear, HEAD_INIT_LIMIT, rng),
        };
        Ok(PolicyNet {
            head_kind,
            ego,
            embedding,
            hidden,
            head,
        })
    }

    pub fn forward(&self, input: &NetInput<T>) -> Result<Vec<T>> {
        Ok(self.forward_traced(input)?.output)
    }

    pub fn forward_traced(&self, input: &NetInput<T>) -> Result<NetTrace<T>> {
        let ego_out = self.ego.forward(&input.ego)?;
        let (embedded, embedding) = self.embedding.forward_traced(&input.others)?;
        let mut merged = ego_out.clone();
        merged.extend_from_slice(&embedded);
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let x = hidden.last().unwrap_or(&merged);
            hidden.push(layer.forward(x)?);
        }
        let output = self.head.forward(hidden.last().unwrap_or(&merged))?;
        if output.iter().any(|x| !x.is_finite()) {
            return Err(FlockError::NonFinite("network output"));
        }
        Ok(NetTrace {
            ego_in: input.ego,
            ego_out,
            embedding,
            merged,
            hidden,
            output,
        })
    }

    /// Accumulates parameter gradients for `d loss / d output = grad_out`.
    pub fn backward(&mut self, trace: &NetTrace<T>, grad_out: &[T]) -> Result<()> {
        let last = trace.hidden.last().unwrap_or(&trace.merged);
        let mut g = self.head.backward(last, &trace.output, grad_out)?;
        for i in (0..self.hidden.len()).rev() {
            let x = if i == 0 { &trace.merged } else { &trace.hidden[i - 1] };
            g = self.hidden[i].backward(x, &trace.hidden[i], &g)?;
        }
        let split = self.ego.outputs();
        self.ego.backward(&trace.ego_in, &trace.ego_out, &g[..split])?;
        if let Some(et) = &trace.embedding {
            self.embedding.backward(et, &g[split..])?;
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for PolicyNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.ego.visit_params(&join(prefix, "ego"), f);
        self.embedding.visit_params(&join(prefix, "embed"), f);
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.visit_params(&join(prefix, &format!("hidden{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T], &mut [T])) {
        self.ego.visit_params_mut(&join(prefix, "ego"), f);
        self.embedding.visit_params_mut(&join(prefix, "embed"), f);
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &format!("hidden{i}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// Maps the actor's tanh outputs into the action box: `a_r = (pi/18) o1`, `a_v = o2`.
pub fn action_from_output<T: Scalar>(out: &[T]) -> Action<T> {
    Action::new(roll_action_max::<T>() * out[0], out[1])
}

/// Inverse of [`action_from_output`]: the action in tanh units.
pub fn action_to_output<T: Scalar>(a: &Action<T>) -> [T; 2] {
    [a.roll / roll_action_max::<T>(), a.speed]
}

/// Actor and critic with identical trunks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetworks<T> {
    pub config: NetworkConfig,
    pub actor: PolicyNet<T>,
    pub critic: PolicyNet<T>,
}

impl<T: Scalar> PolicyNetworks<T> {
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        Ok(PolicyNetworks {
            config: config.clone(),
            actor: PolicyNet::init(config, Head::Actor, rng)?,
            critic: PolicyNet::init(config, Head::Critic, rng)?,
        })
    }

    pub fn act(&self, input: &NetInput<T>) -> Result<Action<T>> {
        actor_forward(&self.actor, input)
    }

    pub fn value(&self, input: &NetInput<T>) -> Result<T> {
        critic_forward(&self.critic, input)
    }
}

pub fn embed<T: Scalar>(embedding: &Embedding<T>, rows: &Tensor2<T>) -> Result<Vec<T>> {
    embedding.forward(rows)
}

pub fn actor_forward<T: Scalar>(actor: &PolicyNet<T>, input: &NetInput<T>) -> Result<Action<T>> {
    debug_assert_eq!(actor.head_kind, Head::Actor);
    Ok(action_from_output(&actor.forward(input)?))
}

pub fn critic_forward<T: Scalar>(critic: &PolicyNet<T>, input: &NetInput<T>) -> Result<T> {
    debug_assert_eq!(critic.head_kind, Head::Critic);
    Ok(critic.forward(input)?[0])
}

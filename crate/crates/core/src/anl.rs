//! Active Neural Localization: a policy/value network reading the belief,
//! the map, recent actions and the timestep, trained with advantage
//! actor-critic across asynchronous workers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::EpisodeResult;
use crate::bayes::{predict, transition, uniform_prior, BeliefMap};
use crate::error::{Error, Result};
use crate::gridworld::{
    generate_maze, observe_depth, sample_start_pose, step, Action, AgentPose, MapDesign,
    ORIENTATIONS,
};
use crate::neuralnet::{
    categorical_sample, embedding_backward, embedding_lookup, linear_backward, linear_forward,
    log_softmax, relu, relu_backward, softmax, Checkpoint, Conv2d, ParamId, ParamStore, Scalar,
    Tensor,
};
use crate::perception::{observe_update, DepthTable};
use crate::rng;

/// History token for slots before the first action.
pub const NULL_ACTION: usize = 3;
const HISTORY_VOCAB: usize = 4;
const CONV: Conv2d = Conv2d {
    stride: 1,
    padding: 1,
};
const INPUT_CHANNELS: usize = ORIENTATIONS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyNetConfig {
    pub rows: usize,
    pub cols: usize,
    /// Longest episode the timestep embedding covers.
    pub episode_len: usize,
    pub conv_channels: usize,
    pub fc_units: usize,
    pub history_len: usize,
    pub embed_dim: usize,
}

impl PolicyNetConfig {
    pub fn new(rows: usize, cols: usize, episode_len: usize) -> Self {
        Self {
            rows,
            cols,
            episode_len,
            conv_channels: 16,
            fc_units: 256,
            history_len: 5,
            embed_dim: 8,
        }
    }

    /// Width of the vector the actor and critic heads read.
    pub fn feature_len(&self) -> usize {
        self.fc_units + (self.history_len + 1) * self.embed_dim
    }

    fn validate(&self) -> Result<()> {
        if [
            self.rows,
            self.cols,
            self.episode_len,
            self.conv_channels,
            self.fc_units,
            self.embed_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Config(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    history: ParamId,
    time: ParamId,
    actor_w: ParamId,
    actor_b: ParamId,
    critic_w: ParamId,
    critic_b: ParamId,
}

/// Network layout; parameters live in a separate [`ParamStore`] so several
/// workers can share one store.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    config: PolicyNetConfig,
    ids: Ids,
}

/// Network input for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput<F> {
    /// Belief planes (one per orientation) followed by the map plane
    /// (1 for free cells).
    pub planes: Tensor<F>,
    /// Most recent actions, oldest first, padded with [`NULL_ACTION`].
    pub history: Vec<usize>,
    /// Actions taken so far in the episode.
    pub t: usize,
}

impl<F: Scalar> PolicyInput<F> {
    pub fn new(bel: &BeliefMap, map: &MapDesign, history: &[usize], t: usize) -> Result<Self> {
        let (m, n) = (map.rows(), map.cols());
        if bel.rows() != m || bel.cols() != n {
            return Err(Error::Shape(format!(
                "belief {}x{} for map {m}x{n}",
                bel.rows(),
                bel.cols()
            )));
        }
        let mut data: Vec<F> = bel
            .values()
            .iter()
            .map(|&v| F::from_f64(v).unwrap_or_else(F::zero))
            .collect();
        data.extend(
            map.free_mask()
                .iter()
                .map(|&f| if f { F::one() } else { F::zero() }),
        );
        Ok(Self {
            planes: Tensor::new(&[INPUT_CHANNELS, m, n], data)?,
            history: history.to_vec(),
            t,
        })
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    input: PolicyInput<F>,
    h1_pre: Tensor<F>,
    h1: Tensor<F>,
    h2_pre: Tensor<F>,
    h2: Tensor<F>,
    fc_pre: Vec<F>,
    pub features: Vec<F>,
    pub logits: Vec<F>,
    pub probs: Vec<F>,
    pub value: F,
}

impl<F: Scalar> Forward<F> {
    /// Entropy of the action distribution.
    pub fn policy_entropy(&self) -> F {
        self.probs.iter().fold(F::zero(), |acc, &p| {
            if p > F::zero() {
                acc - p * p.ln()
            } else {
                acc
            }
        })
    }
}

fn relu_tensor<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    Tensor::new(t.shape(), relu(t.data())).expect("same shape")
}

impl PolicyNet {
    pub fn new(config: PolicyNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamStore::<f32>::new();
        let ids = Self::declare(&config, &mut layout, &mut |shape, _| Tensor::zeros(shape));
        Ok(Self { config, ids })
    }

    pub fn config(&self) -> &PolicyNetConfig {
        &self.config
    }

    fn declare<F: Scalar>(
        c: &PolicyNetConfig,
        store: &mut ParamStore<F>,
        init: &mut dyn FnMut(&[usize], f64) -> Tensor<F>,
    ) -> Ids {
        let k = c.conv_channels;
        let flat = k * c.rows * c.cols;
        let feat = c.feature_len();
        let conv1_fan = (INPUT_CHANNELS * 9) as f64;
        let conv2_fan = (k * 9) as f64;
        let mut add = |name: &str, shape: &[usize], bound: f64| store.add(name, init(shape, bound));
        Ids {
            conv1_w: add(
                "conv1.weight",
                &[k, INPUT_CHANNELS, 3, 3],
                1.0 / conv1_fan.sqrt(),
            ),
            conv1_b: add("conv1.bias", &[k], 1.0 / conv1_fan.sqrt()),
            conv2_w: add("conv2.weight", &[k, k, 3, 3], 1.0 / conv2_fan.sqrt()),
            conv2_b: add("conv2.bias", &[k], 1.0 / conv2_fan.sqrt()),
            fc_w: add("fc.weight", &[c.fc_units, flat], 1.0 / (flat as f64).sqrt()),
            fc_b: add("fc.bias", &[c.fc_units], 1.0 / (flat as f64).sqrt()),
            history: add("history.embedding", &[HISTORY_VOCAB, c.embed_dim], 0.1),
            time: add("time.embedding", &[c.episode_len + 1, c.embed_dim], 0.1),
            actor_w: add(
                "actor.weight",
                &[Action::COUNT, feat],
                1.0 / (feat as f64).sqrt(),
            ),
            actor_b: add("actor.bias", &[Action::COUNT], 1.0 / (feat as f64).sqrt()),
            critic_w: add("critic.weight", &[1, feat], 1.0 / (feat as f64).sqrt()),
            critic_b: add("critic.bias", &[1], 1.0 / (feat as f64).sqrt()),
        }
    }

    /// Fan-in scaled uniform weights; embeddings uniform in ±0.1.
    pub fn init_params<F: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        let mut store = ParamStore::new();
        Self::declare(&self.config, &mut store, &mut |shape, bound| {
            Tensor::uniform(shape, bound, rng)
        });
        store
    }

    /// A store of zeros with this network's layout (for gradients).
    pub fn zeros<F: Scalar>(&self) -> ParamStore<F> {
        let mut store = ParamStore::new();
        Self::declare(&self.config, &mut store, &mut |shape, _| {
            Tensor::zeros(shape)
        });
        store
    }

    fn check_store<F: Scalar>(&self, params: &ParamStore<F>) -> Result<()> {
        let expected = self.zeros::<F>();
        if params.len() != expected.len()
            || expected
                .ids()
                .any(|id| params.value(id).shape() != expected.value(id).shape())
        {
            return Err(Error::Shape(format!(
                "parameter store does not match network {:?}",
                self.config
            )));
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        input: &PolicyInput<F>,
    ) -> Result<Forward<F>> {
        let c = &self.config;
        if input.planes.shape() != [INPUT_CHANNELS, c.rows, c.cols] {
            return Err(Error::Shape(format!(
                "input planes {:?} for a {}x{} network",
                input.planes.shape(),
                c.rows,
                c.cols
            )));
        }
        if input.history.len() != c.history_len {
            return Err(Error::Shape(format!(
                "history of {} actions, network expects {}",
                input.history.len(),
                c.history_len
            )));
        }
        if input.t > c.episode_len {
            return Err(Error::IndexOutOfRange {
                index: input.t,
                size: c.episode_len + 1,
            });
        }
        let ids = &self.ids;
        let h1_pre = CONV.forward(
            &input.planes,
            params.value(ids.conv1_w),
            params.value(ids.conv1_b),
        )?;
        let h1 = relu_tensor(&h1_pre);
        let h2_pre = CONV.forward(&h1, params.value(ids.conv2_w), params.value(ids.conv2_b))?;
        let h2 = relu_tensor(&h2_pre);
        let fc_pre = linear_forward(h2.data(), params.value(ids.fc_w), params.value(ids.fc_b))?;
        let mut features = relu(&fc_pre);
        for &a in &input.history {
            features.extend(embedding_lookup(params.value(ids.history), a)?);
        }
        features.extend(embedding_lookup(params.value(ids.time), input.t)?);
        let logits = linear_forward(
            &features,
            params.value(ids.actor_w),
            params.value(ids.actor_b),
        )?;
        let value = linear_forward(
            &features,
            params.value(ids.critic_w),
            params.value(ids.critic_b),
        )?[0];
        let probs = softmax(&logits)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("value estimate {value:?}")));
        }
        Ok(Forward {
            input: input.clone(),
            h1_pre,
            h1,
            h2_pre,
            h2,
            fc_pre,
            features,
            logits,
            probs,
            value,
        })
    }

    /// Accumulates parameter gradients into `grads` given `∂L/∂logits` and
    /// `∂L/∂value`.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        fwd: &Forward<F>,
        d_logits: &[F],
        d_value: F,
        grads: &mut ParamStore<F>,
    ) -> Result<()> {
        let ids = &self.ids;
        let c = &self.config;
        let actor = linear_backward(&fwd.features, params.value(ids.actor_w), d_logits)?;
        let critic = linear_backward(&fwd.features, params.value(ids.critic_w), &[d_value])?;
        grads.grad_mut(ids.actor_w).add_assign(&actor.weight)?;
        grads.grad_mut(ids.actor_b).add_assign(&actor.bias)?;
        grads.grad_mut(ids.critic_w).add_assign(&critic.weight)?;
        grads.grad_mut(ids.critic_b).add_assign(&critic.bias)?;
        let d_feat: Vec<F> = actor
            .input
            .iter()
            .zip(&critic.input)
            .map(|(&a, &b)| a + b)
            .collect();

        let (d_fc, d_embed) = d_feat.split_at(c.fc_units);
        let mut chunks = d_embed.chunks_exact(c.embed_dim);
        for (&a, g) in fwd.input.history.iter().zip(chunks.by_ref()) {
            embedding_backward(grads.grad_mut(ids.history), a, g)?;
        }
        embedding_backward(
            grads.grad_mut(ids.time),
            fwd.input.t,
            chunks.next().expect("timestep slot"),
        )?;

        let d_fc_pre = relu_backward(&fwd.fc_pre, d_fc);
        let fc = linear_backward(fwd.h2.data(), params.value(ids.fc_w), &d_fc_pre)?;
        grads.grad_mut(ids.fc_w).add_assign(&fc.weight)?;
        grads.grad_mut(ids.fc_b).add_assign(&fc.bias)?;

        let d_h2_pre = Tensor::new(
            fwd.h2_pre.shape(),
            relu_backward(fwd.h2_pre.data(), &fc.input),
        )?;
        let conv2 = CONV.backward(&fwd.h1, params.value(ids.conv2_w), &d_h2_pre)?;
        grads.grad_mut(ids.conv2_w).add_assign(&conv2.kernels)?;
        grads.grad_mut(ids.conv2_b).add_assign(&conv2.bias)?;

        let d_h1_pre = Tensor::new(
            fwd.h1_pre.shape(),
            relu_backward(fwd.h1_pre.data(), conv2.input.data()),
        )?;
        let conv1 = CONV.backward(&fwd.input.planes, params.value(ids.conv1_w), &d_h1_pre)?;
        grads.grad_mut(ids.conv1_w).add_assign(&conv1.kernels)?;
        grads.grad_mut(ids.conv1_b).add_assign(&conv1.bias)?;
        Ok(())
    }
}

/// Logits and value for a belief, map, action history and timestep.
pub fn policy_forward<F: Scalar>(
    net: &PolicyNet,
    params: &ParamStore<F>,
    bel: &BeliefMap,
    map: &MapDesign,
    history: &[usize],
    t: usize,
) -> Result<(Vec<F>, F)> {
    let fwd = net.forward(params, &PolicyInput::new(bel, map, history, t)?)?;
    Ok((fwd.logits, fwd.value))
}

/// Intermediate reward: the largest belief entry.
pub fn intermediate_reward(bel: &BeliefMap) -> f64 {
    bel.max_value()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSelection {
    /// Draw from the policy distribution.
    Sample,
    /// Most probable action (first on ties).
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub policy_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// Value estimate after the last recorded step (0 when the episode ended).
    pub bootstrap: f64,
}

/// One episode in progress: true pose, belief and action history. The belief
/// is always the posterior after the latest observation.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    map: &'a MapDesign,
    table: &'a DepthTable,
    pose: AgentPose,
    bel: BeliefMap,
    history: Vec<usize>,
    t: usize,
    len: usize,
}

impl<'a> Episode<'a> {
    /// Makes the first observation.
    pub fn start(
        map: &'a MapDesign,
        table: &'a DepthTable,
        pose: AgentPose,
        len: usize,
        history_len: usize,
    ) -> Result<Self> {
        let bel = observe_update(&uniform_prior(map), observe_depth(map, pose), table)?;
        Ok(Self {
            map,
            table,
            pose,
            bel,
            history: vec![NULL_ACTION; history_len],
            t: 0,
            len,
        })
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.len
    }

    pub fn belief(&self) -> &BeliefMap {
        &self.bel
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn input<F: Scalar>(&self) -> Result<PolicyInput<F>> {
        PolicyInput::new(&self.bel, self.map, &self.history, self.t)
    }

    pub fn correct(&self) -> bool {
        predict(&self.bel) == self.pose
    }

    /// Executes `action`, observes, and returns the reward: the largest
    /// posterior entry, plus 1 after the last action if the prediction is
    /// right.
    pub fn advance(&mut self, action: Action) -> Result<f64> {
        if self.is_done() {
            return Err(Error::Config("episode already finished".into()));
        }
        self.pose = step(self.map, self.pose, action);
        self.bel = observe_update(
            &transition(&self.bel, action, self.map),
            observe_depth(self.map, self.pose),
            self.table,
        )?;
        if !self.history.is_empty() {
            self.history.remove(0);
            self.history.push(action.index());
        }
        self.t += 1;
        let mut r = intermediate_reward(&self.bel);
        if self.is_done() && self.correct() {
            r += 1.0;
        }
        Ok(r)
    }
}

pub fn select_action<F: Scalar, R: Rng + ?Sized>(
    probs: &[F],
    selection: ActionSelection,
    rng: &mut R,
) -> Result<Action> {
    let i = match selection {
        ActionSelection::Sample => categorical_sample(probs, rng)?,
        ActionSelection::Greedy => {
            (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b })
        }
    };
    Ok(Action::ALL[i])
}

/// Runs a whole episode with fixed parameters.
#[allow(clippy::too_many_arguments)]
pub fn rollout_episode<F: Scalar, R: Rng + ?Sized>(
    net: &PolicyNet,
    params: &ParamStore<F>,
    map: &MapDesign,
    table: &DepthTable,
    pose: AgentPose,
    episode_len: usize,
    selection: ActionSelection,
    rng: &mut R,
) -> Result<(Trajectory, EpisodeResult)> {
    let start = Instant::now();
    let mut ep = Episode::start(map, table, pose, episode_len, net.config().history_len)?;
    let mut traj = Trajectory::default();
    while !ep.is_done() {
        let fwd = net.forward(params, &ep.input()?)?;
        let action = select_action(&fwd.probs, selection, rng)?;
        let reward = ep.advance(action)?;
        traj.steps.push(StepRecord {
            action,
            log_prob: fwd.probs[action.index()].ln().to_f64().unwrap_or(f64::NAN),
            value: fwd.value.to_f64().unwrap_or(f64::NAN),
            reward,
            policy_entropy: fwd.policy_entropy().to_f64().unwrap_or(f64::NAN),
        });
    }
    let result = EpisodeResult {
        correct: ep.correct(),
        steps: episode_len,
        final_belief_entropy: crate::bayes::entropy(ep.belief()),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((traj, result))
}

/// `δ_t = r_t + γ V_{t+1} − V_t` (with `V_T` = bootstrap),
/// `A_t = Σ_l (γλ)^l δ_{t+l}`, `R_t = A_t + V_t`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} rewards for {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub entropy_coef: f64,
    pub value_coef: f64,
}

/// One recorded step of a segment with its cached activations.
#[derive(Debug, Clone)]
pub struct SegmentStep<F> {
    pub forward: Forward<F>,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
}

/// `Σ_t −log π(a_t)·A_t − β·H(π_t) + c_v·(R_t − V_t)²` with advantages and
/// returns held constant.
pub fn a3c_loss<F: Scalar>(
    segment: &[SegmentStep<F>],
    advantages: &[f64],
    returns: &[f64],
    coef: &LossCoefficients,
) -> Result<LossStats> {
    let mut s = LossStats::default();
    for ((st, &a), &r) in segment.iter().zip(advantages).zip(returns) {
        let logp = log_softmax(&st.forward.logits)?;
        let v = st.forward.value.to_f64().unwrap_or(f64::NAN);
        let h: f64 = -st
            .forward
            .probs
            .iter()
            .zip(&logp)
            .map(|(p, l)| p.to_f64().unwrap_or(0.0) * l.to_f64().unwrap_or(0.0))
            .sum::<f64>();
        s.policy_loss += -logp[st.action.index()].to_f64().unwrap_or(f64::NAN) * a;
        s.value_loss += (r - v).powi(2);
        s.entropy += h;
    }
    s.total = s.policy_loss - coef.entropy_coef * s.entropy + coef.value_coef * s.value_loss;
    if !s.total.is_finite() {
        return Err(Error::NonFinite(format!("A3C loss {s:?}")));
    }
    Ok(s)
}

/// Accumulates the gradient of [`a3c_loss`] into `grads`.
pub fn a3c_gradients<F: Scalar>(
    net: &PolicyNet,
    params: &ParamStore<F>,
    segment: &[SegmentStep<F>],
    advantages: &[f64],
    returns: &[f64],
    coef: &LossCoefficients,
    grads: &mut ParamStore<F>,
) -> Result<LossStats> {
    if segment.len() != advantages.len() || segment.len() != returns.len() {
        return Err(Error::Shape(
            "segment, advantages and returns differ in length".into(),
        ));
    }
    let stats = a3c_loss(segment, advantages, returns, coef)?;
    for ((st, &adv), &ret) in segment.iter().zip(advantages).zip(returns) {
        let p: Vec<f64> = st
            .forward
            .probs
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect();
        let logp: Vec<f64> = log_softmax(&st.forward.logits)?
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .collect();
        let h: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
        // ∂(−log π_a)/∂z = p − e_a ;  ∂H/∂z_i = −p_i (log p_i + H)
        let d_logits: Vec<F> = (0..p.len())
            .map(|i| {
                let onehot = if i == st.action.index() { 1.0 } else { 0.0 };
                let g = adv * (p[i] - onehot) + coef.entropy_coef * p[i] * (logp[i] + h);
                F::from_f64(g).unwrap_or_else(F::nan)
            })
            .collect();
        let v = st.forward.value.to_f64().unwrap_or(f64::NAN);
        let d_value = F::from_f64(-2.0 * coef.value_coef * (ret - v)).unwrap_or_else(F::nan);
        net.backward(params, &st.forward, &d_logits, d_value, grads)?;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub workers: usize,
    pub unroll: usize,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub clip_norm: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub map_size: usize,
    pub episode_len: usize,
    /// Wall-clock budget in seconds.
    pub time_budget_s: Option<f64>,
    /// Budget in environment steps summed over workers.
    pub step_budget: Option<u64>,
    pub seed: u64,
    /// Environment steps between validation runs (and checkpoints).
    pub eval_every: u64,
    /// Training-distribution mazes used to pick the best checkpoint.
    pub eval_episodes: usize,
    /// Episodes per progress-log record.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            workers: 8,
            unroll: 20,
            entropy_coef: 0.01,
            gamma: 0.99,
            clip_norm: 40.0,
            gae_lambda: 1.0,
            value_coef: 0.5,
            map_size: 7,
            episode_len: 15,
            time_budget_s: Some(2.0 * 3600.0),
            step_budget: None,
            seed: 0,
            eval_every: 200_000,
            eval_episodes: 500,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.gamma, self.clip_norm, self.value_coef];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite()))
            || self.workers == 0
            || self.unroll == 0
            || self.episode_len == 0
            || self.eval_every == 0
            || self.log_every == 0
            || !(0.0..=1.0).contains(&self.gae_lambda)
            || self.entropy_coef.is_nan()
            || self.entropy_coef < 0.0
        {
            return Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )));
        }
        if self.time_budget_s.is_none() && self.step_budget.is_none() {
            return Err(Error::Config("training needs a time or step budget".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
        }
    }
}

/// Metadata stored alongside ANL checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: PolicyNetConfig,
    pub updates: u64,
    pub validation_accuracy: Option<f64>,
}

pub fn save_checkpoint<F: Scalar>(
    net: &PolicyNet,
    params: &ParamStore<F>,
    meta: &CheckpointMeta,
    step: u64,
    path: &Path,
) -> Result<()> {
    net.check_store(params)?;
    Checkpoint::from_store(params, step, &serde_json::to_string(meta)?).save(path)
}

/// Rebuilds the network from checkpoint metadata and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(PolicyNet, ParamStore<f32>, CheckpointMeta, u64)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let net = PolicyNet::new(meta.net)?;
    let mut params = net.zeros::<f32>();
    ckpt.load_into(&mut params)?;
    Ok((net, params, meta, ckpt.step))
}

/// Loads tensors from `path` into an existing store of this network's layout.
pub fn load_checkpoint_into<F: Scalar>(
    net: &PolicyNet,
    params: &mut ParamStore<F>,
    path: &Path,
) -> Result<u64> {
    net.check_store(params)?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.load_into(params)?;
    Ok(ckpt.step)
}

/// Accuracy of the policy on a fixed list of (maze, start) pairs.
pub fn policy_accuracy<F: Scalar>(
    net: &PolicyNet,
    params: &ParamStore<F>,
    episodes: &[(MapDesign, AgentPose)],
    episode_len: usize,
    selection: ActionSelection,
    seed: u64,
) -> Result<f64> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (i, (map, pose)) in episodes.iter().enumerate() {
        let table = DepthTable::build(map);
        let mut r = rng::seeded(rng::derive_seed(seed, 0xE7A1, i as u64));
        correct += rollout_episode(
            net,
            params,
            map,
            &table,
            *pose,
            episode_len,
            selection,
            &mut r,
        )?
        .1
        .correct as usize;
    }
    Ok(correct as f64 / episodes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub worker: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub best_validation_accuracy: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

const VALIDATION_DOMAIN: u64 = 0x7A11D;

fn validation_set(config: &TrainConfig) -> Result<Vec<(MapDesign, AgentPose)>> {
    (0..config.eval_episodes as u64)
        .map(|i| {
            let seed = rng::derive_seed(config.seed, VALIDATION_DOMAIN, i) & !rng::TEST_DOMAIN_BIT;
            let map = generate_maze(config.map_size, config.map_size, seed)?;
            let pose = sample_start_pose(&map, &mut rng::seeded(seed));
            Ok((map, pose))
        })
        .collect()
}

#[derive(Default)]
struct Window {
    episodes: u64,
    reward: f64,
    correct: u64,
    stats: LossStats,
    updates: u64,
    grad_norm: f64,
}

struct Shared<'a> {
    net: &'a PolicyNet,
    config: &'a TrainConfig,
    params: RwLock<ParamStore<f32>>,
    env_steps: AtomicU64,
    episodes: AtomicU64,
    next_eval: Mutex<u64>,
    best: Mutex<f64>,
    log: Mutex<BufWriter<File>>,
    window: Mutex<Window>,
    stop: AtomicBool,
    start: Instant,
    deadline: Option<Instant>,
    validation: Vec<(MapDesign, AgentPose)>,
    best_path: PathBuf,
    last_path: PathBuf,
}

impl Shared<'_> {
    fn out_of_budget(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
            || self.deadline.is_some_and(|d| Instant::now() >= d)
            || self
                .config
                .step_budget
                .is_some_and(|b| self.env_steps.load(Ordering::Relaxed) >= b)
    }

    fn meta(&self, updates: u64, accuracy: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            net: *self.net.config(),
            updates,
            validation_accuracy: accuracy,
        }
    }

    /// Scores a parameter snapshot on the validation mazes and keeps it if
    /// it is the best so far.
    fn validate(&self, snapshot: &ParamStore<f32>, steps: u64) -> Result<f64> {
        let acc = policy_accuracy(
            self.net,
            snapshot,
            &self.validation,
            self.config.episode_len,
            ActionSelection::Sample,
            self.config.seed,
        )?;
        let mut best = self.best.lock();
        if acc > *best {
            *best = acc;
            save_checkpoint(
                self.net,
                snapshot,
                &self.meta(snapshot.version(), Some(acc)),
                steps,
                &self.best_path,
            )?;
        }
        Ok(acc)
    }

    /// Writes one progress record summarizing the episodes and updates
    /// since the previous record.
    fn flush_window(&self, worker: usize, validation_accuracy: Option<f64>) -> Result<()> {
        let w = std::mem::take(&mut *self.window.lock());
        let per_update = |x: f64| {
            if w.updates > 0 {
                x / w.updates as f64
            } else {
                0.0
            }
        };
        let per_episode = |x: f64| {
            if w.episodes > 0 {
                x / w.episodes as f64
            } else {
                0.0
            }
        };
        let record = TrainLogRecord {
            env_steps: self.env_steps.load(Ordering::Relaxed),
            updates: self.params.read().version(),
            episodes: self.episodes.load(Ordering::Relaxed),
            worker,
            mean_reward: per_episode(w.reward),
            accuracy: per_episode(w.correct as f64),
            policy_loss: per_update(w.stats.policy_loss),
            value_loss: per_update(w.stats.value_loss),
            entropy: per_update(w.stats.entropy),
            grad_norm: per_update(w.grad_norm),
            elapsed_s: self.start.elapsed().as_secs_f64(),
            validation_accuracy,
        };
        let mut log = self.log.lock();
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        log.flush()?;
        Ok(())
    }
}

fn worker_loop(shared: &Shared, worker: usize) -> Result<()> {
    let config = shared.config;
    let net = shared.net;
    let coef = config.coefficients();
    let mut rng = rng::seeded(rng::derive_seed(config.seed, 0xA3C, worker as u64));
    let mut local = net.zeros::<f32>();
    let mut grads = net.zeros::<f32>();
    let mut index = 0u64;
    while !shared.out_of_budget() {
        let map = generate_maze(
            config.map_size,
            config.map_size,
            rng::train_maze_seed(config.seed, worker as u64, index),
        )?;
        index += 1;
        let table = DepthTable::build(&map);
        let pose = sample_start_pose(&map, &mut rng);
        let mut ep = Episode::start(
            &map,
            &table,
            pose,
            config.episode_len,
            net.config().history_len,
        )?;
        let mut total_reward = 0.0;
        while !ep.is_done() {
            local.copy_values_from(&shared.params.read())?;
            let mut segment: Vec<SegmentStep<f32>> = Vec::with_capacity(config.unroll);
            while segment.len() < config.unroll && !ep.is_done() {
                let forward = net.forward(&local, &ep.input()?)?;
                let action = select_action(&forward.probs, ActionSelection::Sample, &mut rng)?;
                let reward = ep.advance(action)?;
                total_reward += reward;
                segment.push(SegmentStep {
                    forward,
                    action,
                    reward,
                });
            }
            let bootstrap = if ep.is_done() {
                0.0
            } else {
                net.forward(&local, &ep.input()?)?.value as f64
            };
            let rewards: Vec<f64> = segment.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = segment.iter().map(|s| s.forward.value as f64).collect();
            let (adv, ret) = gae_advantages(
                &rewards,
                &values,
                bootstrap,
                config.gamma,
                config.gae_lambda,
            )?;
            grads.zero_grad();
            let stats = a3c_gradients(net, &local, &segment, &adv, &ret, &coef, &mut grads)?;
            let norm = {
                let mut params = shared.params.write();
                params.accumulate_grads(&grads)?;
                params.sgd_apply(config.lr, config.clip_norm)?
            };
            let steps = shared
                .env_steps
                .fetch_add(segment.len() as u64, Ordering::Relaxed)
                + segment.len() as u64;
            let mut w = shared.window.lock();
            w.stats.policy_loss += stats.policy_loss;
            w.stats.value_loss += stats.value_loss;
            w.stats.entropy += stats.entropy / segment.len() as f64;
            w.updates += 1;
            w.grad_norm += norm;
            drop(w);
            let due = {
                let mut next = shared.next_eval.lock();
                let due = steps >= *next;
                if due {
                    *next += config.eval_every;
                }
                due
            };
            if due {
                let snapshot = shared.params.read().clone();
                let acc = shared.validate(&snapshot, steps)?;
                shared.flush_window(worker, Some(acc))?;
                save_checkpoint(
                    net,
                    &snapshot,
                    &shared.meta(snapshot.version(), None),
                    steps,
                    &shared.last_path,
                )?;
            }
        }
        let episodes = shared.episodes.fetch_add(1, Ordering::Relaxed) + 1;
        let mut w = shared.window.lock();
        w.episodes += 1;
        w.reward += total_reward;
        w.correct += ep.correct() as u64;
        drop(w);
        if episodes.is_multiple_of(config.log_every) {
            shared.flush_window(worker, None)?;
        }
    }
    Ok(())
}

/// Trains from `init` (or fresh parameters) until the budget runs out.
/// Writes `best.ckpt` (highest validation accuracy on training-distribution
/// mazes), `last.ckpt` and `train_log.jsonl` into `out_dir`.
pub fn train(
    config: &TrainConfig,
    init: Option<ParamStore<f32>>,
    out_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    let net = PolicyNet::new(PolicyNetConfig::new(
        config.map_size,
        config.map_size,
        config.episode_len,
    ))?;
    let params = match init {
        Some(p) => {
            net.check_store(&p)?;
            p
        }
        None => net.init_params(&mut rng::seeded(rng::derive_seed(config.seed, 0x1417, 0))),
    };
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let start = Instant::now();
    let shared = Shared {
        net: &net,
        config,
        params: RwLock::new(params),
        env_steps: AtomicU64::new(0),
        episodes: AtomicU64::new(0),
        next_eval: Mutex::new(config.eval_every),
        best: Mutex::new(f64::NEG_INFINITY),
        log: Mutex::new(BufWriter::new(File::create(&log_path)?)),
        window: Mutex::new(Window::default()),
        stop: AtomicBool::new(false),
        start,
        deadline: config
            .time_budget_s
            .map(|s| start + Duration::from_secs_f64(s)),
        validation: validation_set(config)?,
        best_path: out_dir.join("best.ckpt"),
        last_path: out_dir.join("last.ckpt"),
    };
    let outcome: Result<()> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.workers)
            .map(|w| {
                let shared = &shared;
                scope.spawn(move || {
                    let r = worker_loop(shared, w);
                    if r.is_err() {
                        shared.stop.store(true, Ordering::Relaxed);
                    }
                    r
                })
            })
            .collect();
        let mut first_err = None;
        for (w, h) in handles.into_iter().enumerate() {
            let r = h.join().unwrap_or_else(|_| {
                shared.stop.store(true, Ordering::Relaxed);
                Err(Error::Worker(format!("worker {w} panicked")))
            });
            if let Err(e) = r {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    });
    outcome?;

    let final_params = shared.params.read().clone();
    let steps = shared.env_steps.load(Ordering::Relaxed);
    let acc = shared.validate(&final_params, steps)?;
    save_checkpoint(
        &net,
        &final_params,
        &shared.meta(final_params.version(), Some(acc)),
        steps,
        &shared.last_path,
    )?;
    shared.flush_window(0, Some(acc))?;
    let best = *shared.best.lock();
    Ok(TrainSummary {
        env_steps: steps,
        updates: final_params.version(),
        episodes: shared.episodes.load(Ordering::Relaxed),
        best_validation_accuracy: best,
        best_checkpoint: shared.best_path.clone(),
        last_checkpoint: shared.last_path.clone(),
        log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::tests::toy_map;
    use crate::neuralnet::tests::max_rel_error;
    use std::collections::HashMap;

    fn small_config(rows: usize, cols: usize) -> PolicyNetConfig {
        PolicyNetConfig {
            conv_channels: 3,
            fc_units: 6,
            embed_dim: 2,
            ..PolicyNetConfig::new(rows, cols, 4)
        }
    }

    fn random_input(cfg: &PolicyNetConfig, r: &mut rng::Rng) -> PolicyInput<f64> {
        let planes = Tensor::uniform(&[INPUT_CHANNELS, cfg.rows, cfg.cols], 1.0, r);
        let history = (0..cfg.history_len)
            .map(|_| r.gen_range(0..HISTORY_VOCAB))
            .collect();
        PolicyInput {
            planes,
            history,
            t: r.gen_range(0..=cfg.episode_len),
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let map = generate_maze(7, 7, 1).unwrap();
        let net = PolicyNet::new(PolicyNetConfig::new(7, 7, 15)).unwrap();
        let params: ParamStore<f32> = net.init_params(&mut rng::seeded(0));
        let bel = uniform_prior(&map);
        let hist = [NULL_ACTION; 5];
        let (logits, value) = policy_forward(&net, &params, &bel, &map, &hist, 0).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(value.is_finite());
        assert_eq!(
            policy_forward(&net, &params, &bel, &map, &hist, 0).unwrap(),
            (logits, value)
        );
        assert_eq!(net.config().feature_len(), 304);
        assert!(policy_forward(&net, &params, &bel, &map, &hist[..4], 0).is_err());
        assert!(policy_forward(&net, &params, &bel, &map, &hist, 16).is_err());
        let other = generate_maze(9, 9, 1).unwrap();
        assert!(policy_forward(&net, &params, &uniform_prior(&other), &other, &hist, 0).is_err());
    }

    #[test]
    fn network_is_orientation_sensitive() {
        let map = generate_maze(7, 7, 2).unwrap();
        let table = DepthTable::build(&map);
        let net = PolicyNet::new(PolicyNetConfig::new(7, 7, 15)).unwrap();
        let params: ParamStore<f64> = net.init_params(&mut rng::seeded(1));
        let pose = sample_start_pose(&map, &mut rng::seeded(3));
        let bel = observe_update(&uniform_prior(&map), observe_depth(&map, pose), &table).unwrap();
        let cells = map.cells();
        let mut rotated = bel.values()[cells..].to_vec();
        rotated.extend_from_slice(&bel.values()[..cells]);
        let rotated = BeliefMap::from_values(&map, rotated).unwrap();
        let hist = [NULL_ACTION; 5];
        let a = policy_forward(&net, &params, &bel, &map, &hist, 0)
            .unwrap()
            .0;
        let b = policy_forward(&net, &params, &rotated, &map, &hist, 0)
            .unwrap()
            .0;
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn first_observation_reward_is_one_over_matching_states() {
        let map =
            MapDesign::from_rows(&["######", "#..#.#", "##...#", "##..##", "######"]).unwrap();
        assert_eq!(map.free_count(), 8);
        let table = DepthTable::build(&map);
        let matching: Vec<usize> = (0..map.num_states())
            .filter(|&i| table.depth(i) == Some(2))
            .collect();
        assert_eq!(matching.len(), 4);
        let ep = Episode::start(&map, &table, map.pose_of(matching[0]), 5, 5).unwrap();
        assert_eq!(intermediate_reward(ep.belief()), 0.25);
    }

    #[test]
    fn rewards_are_bounded() {
        let net = PolicyNet::new(PolicyNetConfig::new(7, 7, 15)).unwrap();
        let params: ParamStore<f32> = net.init_params(&mut rng::seeded(4));
        for seed in 0..20 {
            let map = generate_maze(7, 7, seed).unwrap();
            let table = DepthTable::build(&map);
            let mut r = rng::seeded(seed);
            let pose = sample_start_pose(&map, &mut r);
            let (traj, res) = rollout_episode(
                &net,
                &params,
                &map,
                &table,
                pose,
                15,
                ActionSelection::Sample,
                &mut r,
            )
            .unwrap();
            assert_eq!(traj.steps.len(), 15);
            let (last, body) = traj.steps.split_last().unwrap();
            assert!(body.iter().all(|s| s.reward > 0.0 && s.reward <= 1.0));
            assert!(last.reward > 0.0 && last.reward <= 2.0);
            assert_eq!(last.reward > 1.0, res.correct);
            assert!(traj
                .steps
                .iter()
                .all(|s| s.log_prob <= 0.0 && s.policy_entropy >= 0.0));
        }
    }

    /// Posterior by enumeration: starts whose simulated depth sequence under
    /// `actions` matches the observed one, carried to their final poses.
    fn brute_force_prediction(map: &MapDesign, start: AgentPose, actions: &[Action]) -> AgentPose {
        let trace = |mut p: AgentPose| {
            let mut depths = vec![observe_depth(map, p)];
            for &a in actions {
                p = step(map, p, a);
                depths.push(observe_depth(map, p));
            }
            (depths, p)
        };
        let (observed, _) = trace(start);
        let mut mass: HashMap<usize, usize> = HashMap::new();
        for i in 0..map.num_states() {
            let p = map.pose_of(i);
            if map.is_valid_pose(p) {
                let (d, end) = trace(p);
                if d == observed {
                    *mass.entry(map.state_index(end)).or_default() += 1;
                }
            }
        }
        let best = mass
            .iter()
            .map(|(&i, &m)| (m, std::cmp::Reverse(i)))
            .max()
            .unwrap();
        map.pose_of(best.1 .0)
    }

    #[test]
    fn uniform_policy_on_symmetric_map_hits_the_symmetry_ceiling() {
        let map = toy_map();
        let table = DepthTable::build(&map);
        let net = PolicyNet::new(PolicyNetConfig::new(5, 5, 12)).unwrap();
        let mut params: ParamStore<f64> = net.init_params(&mut rng::seeded(5));
        for id in [net.ids.actor_w, net.ids.actor_b] {
            params.value_mut(id).fill_zero();
        }
        let mut correct = 0;
        let mut oracle_correct = 0;
        let mut episodes = 0;
        for i in 0..map.num_states() {
            let pose = map.pose_of(i);
            if !map.is_valid_pose(pose) {
                continue;
            }
            for k in 0..5 {
                let mut r = rng::seeded(100 * i as u64 + k);
                let (traj, res) = rollout_episode(
                    &net,
                    &params,
                    &map,
                    &table,
                    pose,
                    12,
                    ActionSelection::Sample,
                    &mut r,
                )
                .unwrap();
                assert!(traj
                    .steps
                    .iter()
                    .all(|s| (s.log_prob + 3f64.ln()).abs() < 1e-12));
                let actions: Vec<Action> = traj.steps.iter().map(|s| s.action).collect();
                let mut end = pose;
                for &a in &actions {
                    end = step(&map, end, a);
                }
                let oracle = brute_force_prediction(&map, pose, &actions) == end;
                assert_eq!(res.correct, oracle);
                correct += res.correct as usize;
                oracle_correct += oracle as usize;
                episodes += 1;
            }
        }
        assert_eq!(correct, oracle_correct);
        // Four rotated copies of every state are indistinguishable.
        assert!(correct * 4 <= episodes);
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae_advantages(&[1.0], &[0.0], 0.0, 0.99, 1.0).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let rewards = [0.3, 0.1, 0.9];
        let values = [0.5, -0.2, 0.4];
        let (a, _) = gae_advantages(&rewards, &values, 0.7, 0.9, 0.0).unwrap();
        let deltas = [
            0.3 + 0.9 * -0.2 - 0.5,
            0.1 + 0.9 * 0.4 + 0.2,
            0.9 + 0.9 * 0.7 - 0.4,
        ];
        assert_eq!(a, deltas);
        assert!(gae_advantages(&[1.0], &[], 0.0, 0.99, 1.0).is_err());
    }

    #[test]
    fn gae_matches_double_sum_oracle() {
        let mut r = rng::seeded(6);
        for _ in 0..50 {
            let n = 10;
            let rewards: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..2.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let boot = r.gen_range(-1.0..1.0);
            let (gamma, lambda) = (r.gen_range(0.5..1.0), r.gen_range(0.0..1.0));
            let v = |t: usize| if t < n { values[t] } else { boot };
            let (adv, ret) = gae_advantages(&rewards, &values, boot, gamma, lambda).unwrap();
            for t in 0..n {
                let mut expect = 0.0;
                for l in 0..n - t {
                    let delta = rewards[t + l] + gamma * v(t + l + 1) - v(t + l);
                    expect += (gamma * lambda).powi(l as i32) * delta;
                }
                assert!((adv[t] - expect).abs() <= 1e-12);
                assert!((ret[t] - expect - values[t]).abs() <= 1e-12);
            }
            // λ = 1 over a finished episode: discounted Monte-Carlo return minus value.
            let (adv, _) = gae_advantages(&rewards, &values, 0.0, gamma, 1.0).unwrap();
            for t in 0..n {
                let mc: f64 = (t..n)
                    .map(|k| gamma.powi((k - t) as i32) * rewards[k])
                    .sum();
                assert!((adv[t] - (mc - values[t])).abs() <= 1e-12);
            }
        }
    }

    fn segment_for(
        net: &PolicyNet,
        params: &ParamStore<f64>,
        inputs: &[PolicyInput<f64>],
        actions: &[Action],
    ) -> Vec<SegmentStep<f64>> {
        inputs
            .iter()
            .zip(actions)
            .map(|(inp, &a)| SegmentStep {
                forward: net.forward(params, inp).unwrap(),
                action: a,
                reward: 0.0,
            })
            .collect()
    }

    fn check_loss_gradient(cfg: PolicyNetConfig, seed: u64, probe: Option<usize>) -> f64 {
        let mut r = rng::seeded(seed);
        let net = PolicyNet::new(cfg).unwrap();
        let params: ParamStore<f64> = net.init_params(&mut r);
        let inputs: Vec<PolicyInput<f64>> = (0..3).map(|_| random_input(&cfg, &mut r)).collect();
        let actions: Vec<Action> = (0..3).map(|_| Action::ALL[r.gen_range(0..3)]).collect();
        let adv: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ret: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..2.0)).collect();
        let coef = LossCoefficients {
            entropy_coef: 0.3,
            value_coef: 0.5,
        };
        let mut grads = net.zeros::<f64>();
        let segment = segment_for(&net, &params, &inputs, &actions);
        a3c_gradients(&net, &params, &segment, &adv, &ret, &coef, &mut grads).unwrap();

        let mut worst: f64 = 0.0;
        for id in params.ids() {
            let values = params.value(id).data().to_vec();
            let analytic = grads.grad(id).data().to_vec();
            let picks: Vec<usize> = match probe {
                Some(k) if values.len() > k => {
                    rand::seq::index::sample(&mut r, values.len(), k).into_vec()
                }
                _ => (0..values.len()).collect(),
            };
            let x: Vec<f64> = picks.iter().map(|&i| values[i]).collect();
            let g: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
            let mut f = |probe: &[f64]| {
                let mut p = params.clone();
                for (&i, &v) in picks.iter().zip(probe) {
                    p.value_mut(id).data_mut()[i] = v;
                }
                a3c_loss(&segment_for(&net, &p, &inputs, &actions), &adv, &ret, &coef)
                    .unwrap()
                    .total
            };
            worst = worst.max(max_rel_error(&mut f, &x, &g, 1e-5, 1e-6));
        }
        worst
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences_on_3x3() {
        for seed in 0..4 {
            assert!(check_loss_gradient(small_config(3, 3), seed, None) <= 1e-4);
        }
        // Default widths, sampled coordinates.
        assert!(check_loss_gradient(PolicyNetConfig::new(3, 3, 6), 10, Some(40)) <= 1e-4);
    }

    fn a3c_step(
        net: &PolicyNet,
        params: &mut ParamStore<f64>,
        seg: &[SegmentStep<f64>],
        adv: &[f64],
        ret: &[f64],
        lr: f64,
        coef: &LossCoefficients,
    ) {
        let mut grads = net.zeros::<f64>();
        a3c_gradients(net, params, seg, adv, ret, coef, &mut grads).unwrap();
        params.accumulate_grads(&grads).unwrap();
        params.sgd_apply(lr, 40.0).unwrap();
    }

    #[test]
    fn entropy_bonus_alone_flattens_the_policy() {
        let cfg = small_config(3, 3);
        let net = PolicyNet::new(cfg).unwrap();
        let mut r = rng::seeded(11);
        let mut params: ParamStore<f64> = net.init_params(&mut r);
        params
            .value_mut(net.ids.actor_b)
            .data_mut()
            .copy_from_slice(&[2.0, -1.0, 0.5]);
        let input = random_input(&cfg, &mut r);
        let coef = LossCoefficients {
            entropy_coef: 0.5,
            value_coef: 0.5,
        };
        let spread = |p: &ParamStore<f64>| {
            let l = net.forward(p, &input).unwrap().logits;
            l.iter().cloned().fold(f64::MIN, f64::max) - l.iter().cloned().fold(f64::MAX, f64::min)
        };
        let initial = spread(&params);
        for _ in 0..3000 {
            let seg = segment_for(
                &net,
                &params,
                std::slice::from_ref(&input),
                &[Action::Forward],
            );
            let value = seg[0].forward.value;
            a3c_step(&net, &mut params, &seg, &[0.0], &[value], 0.05, &coef);
        }
        let fin = spread(&params);
        assert!(fin < 1e-2 * initial, "{initial} -> {fin}");

        let before = params.clone();
        let seg = segment_for(
            &net,
            &params,
            std::slice::from_ref(&input),
            &[Action::TurnLeft],
        );
        a3c_step(&net, &mut params, &seg, &[1.0], &[3.0], 0.0, &coef);
        assert!(params.ids().all(|id| params.value(id) == before.value(id)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = PolicyNet::new(PolicyNetConfig::new(7, 7, 15)).unwrap();
        let params: ParamStore<f32> = net.init_params(&mut rng::seeded(12));
        let meta = CheckpointMeta {
            net: *net.config(),
            updates: 3,
            validation_accuracy: Some(0.5),
        };
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&net, &params, &meta, 77, &a).unwrap();
        let (net2, loaded, meta2, step) = load_checkpoint(&a).unwrap();
        assert_eq!((meta2, step), (meta.clone(), 77));
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&net2, &loaded, &meta, 77, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let map = generate_maze(7, 7, 4).unwrap();
        let bel = uniform_prior(&map);
        let hist = [0, 1, 2, NULL_ACTION, 0];
        assert_eq!(
            policy_forward(&net, &params, &bel, &map, &hist, 3).unwrap(),
            policy_forward(&net2, &loaded, &bel, &map, &hist, 3).unwrap()
        );

        let other = PolicyNet::new(PolicyNetConfig::new(9, 9, 15)).unwrap();
        let mut wrong = other.zeros::<f32>();
        assert!(matches!(
            load_checkpoint_into(&other, &mut wrong, &a),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.ckpt")),
            Err(Error::MissingArtifact(_))
        ));
    }

    fn tiny_train(seed: u64, workers: usize, dir: &Path) -> TrainSummary {
        let config = TrainConfig {
            workers,
            seed,
            time_budget_s: None,
            step_budget: Some(600),
            eval_every: 200,
            eval_episodes: 8,
            log_every: 10,
            ..TrainConfig::default()
        };
        train(&config, None, dir).unwrap()
    }

    #[test]
    fn single_worker_training_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = tiny_train(3, 1, a.path());
        let _ = tiny_train(3, 1, b.path());
        assert_eq!(sa.env_steps, 600);
        assert_eq!(sa.updates, 40);
        for name in ["best.ckpt", "last.ckpt"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
        let log = std::fs::read_to_string(&sa.log).unwrap();
        let records: Vec<TrainLogRecord> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 8);
        assert_eq!(
            records
                .iter()
                .filter(|r| r.validation_accuracy.is_some())
                .count(),
            4
        );
        assert!(records.last().unwrap().validation_accuracy.is_some());
        let (_, params, meta, _) = load_checkpoint(&sa.best_checkpoint).unwrap();
        assert_eq!(meta.validation_accuracy, Some(sa.best_validation_accuracy));
        assert!(params.version() == 0);
    }

    #[test]
    fn multi_worker_training_runs() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny_train(4, 3, dir.path());
        assert!(s.env_steps >= 600);
        assert!(load_checkpoint(&s.last_checkpoint).is_ok());
    }
}

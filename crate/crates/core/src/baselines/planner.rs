//! Expected-entropy evaluation of action sequences and the exhaustive
//! sequence search behind AML.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bayes::{entropy, forward_target, BeliefMap};
use crate::error::{Error, Result};
use crate::gridworld::{Action, MapDesign, ORIENTATIONS};
use crate::perception::DepthTable;

use super::AmlParams;

/// Which future observations a sequence's expected entropy conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    /// Only the observation after the last action.
    FinalObservation,
    /// Every observation made along the sequence.
    AllObservations,
}

/// States above the floor with their renormalized probabilities, in state
/// index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub states: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Support {
    /// Keeps states with belief strictly above `floor × max belief`.
    pub fn from_belief(bel: &BeliefMap, floor: f64) -> Result<Self> {
        let threshold = floor * bel.max_value();
        let mut states = Vec::new();
        let mut probs = Vec::new();
        for (i, &v) in bel.values().iter().enumerate() {
            if v > threshold {
                states.push(i as u32);
                probs.push(v);
            }
        }
        let z: f64 = probs.iter().sum();
        if states.is_empty() || z.is_nan() || z <= 0.0 {
            return Err(Error::EmptySupport(floor));
        }
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(Self { states, probs })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Canonical form: states with their probability bits, merged per state.
    fn key(&self) -> Vec<(u32, u64)> {
        self.states
            .iter()
            .zip(&self.probs)
            .map(|(&s, p)| (s, p.to_bits()))
            .collect()
    }

    /// Canonical form after applying `action` to every support state.
    fn moved_key(&self, map: &MapDesign, action: Action) -> Vec<(u32, u64)> {
        let mut moved: Vec<(u32, f64)> = self
            .states
            .iter()
            .zip(&self.probs)
            .map(|(&s, &p)| (advance(map, s as usize, action) as u32, p))
            .collect();
        moved.sort_by_key(|m| m.0);
        let mut merged: Vec<(u32, u64)> = Vec::with_capacity(moved.len());
        let mut i = 0;
        while i < moved.len() {
            let (state, mut mass) = moved[i];
            i += 1;
            while i < moved.len() && moved[i].0 == state {
                mass += moved[i].1;
                i += 1;
            }
            merged.push((state, mass.to_bits()));
        }
        merged
    }
}

/// Applies one action to a flat state index.
#[inline]
pub(crate) fn advance(map: &MapDesign, index: usize, action: Action) -> usize {
    let cells = map.cells();
    match action {
        Action::Forward => forward_target(map, index),
        Action::TurnLeft => ((index / cells + 3) % ORIENTATIONS) * cells + index % cells,
        Action::TurnRight => ((index / cells + 1) % ORIENTATIONS) * cells + index % cells,
    }
}

/// `Σ_c p(c) H(posterior | c)` where `labels` identify the observation
/// outcome of each support state and `finals` its current state. Masses
/// landing on the same state within an outcome are merged.
fn conditional_entropy(
    labels: &[u64],
    finals: &[usize],
    probs: &[f64],
    scratch: &mut Vec<(u64, usize, f64)>,
) -> f64 {
    scratch.clear();
    scratch.extend(
        labels
            .iter()
            .zip(finals)
            .zip(probs)
            .map(|((&l, &f), &p)| (l, f, p)),
    );
    scratch.sort_unstable_by_key(|a| (a.0, a.1));
    // E[H] = -Σ_s m_s ln m_s + Σ_c p_c ln p_c
    let mut state_term = 0.0;
    let mut outcome_term = 0.0;
    let mut i = 0;
    while i < scratch.len() {
        let label = scratch[i].0;
        let mut outcome_mass = 0.0;
        while i < scratch.len() && scratch[i].0 == label {
            let f = scratch[i].1;
            let mut m = 0.0;
            while i < scratch.len() && scratch[i].0 == label && scratch[i].1 == f {
                m += scratch[i].2;
                i += 1;
            }
            if m > 0.0 {
                state_term -= m * m.ln();
            }
            outcome_mass += m;
        }
        if outcome_mass > 0.0 {
            outcome_term += outcome_mass * outcome_mass.ln();
        }
    }
    (state_term + outcome_term).max(0.0)
}

#[inline]
fn observe_label(prev: u64, depth: usize, dim: usize, conditioning: Conditioning) -> u64 {
    match conditioning {
        Conditioning::FinalObservation => depth as u64,
        Conditioning::AllObservations => prev * (dim as u64 + 1) + depth as u64,
    }
}

/// Expected belief entropy after executing `seq` and observing once at the
/// end (states at or below `floor × max belief` ignored).
pub fn expected_entropy(
    bel: &BeliefMap,
    seq: &[Action],
    map: &MapDesign,
    table: &DepthTable,
    floor: f64,
) -> Result<f64> {
    expected_entropy_with(bel, seq, map, table, floor, Conditioning::FinalObservation)
}

pub fn expected_entropy_with(
    bel: &BeliefMap,
    seq: &[Action],
    map: &MapDesign,
    table: &DepthTable,
    floor: f64,
    conditioning: Conditioning,
) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::AmlParams("empty action sequence".into()));
    }
    let support = Support::from_belief(bel, floor)?;
    let mut finals: Vec<usize> = support.states.iter().map(|&s| s as usize).collect();
    let mut labels = vec![0u64; finals.len()];
    for &a in seq {
        for (f, l) in finals.iter_mut().zip(labels.iter_mut()) {
            *f = advance(map, *f, a);
            *l = observe_label(*l, table.depth(*f).unwrap_or(0), table.dim(), conditioning);
        }
    }
    Ok(conditional_entropy(
        &labels,
        &finals,
        &support.probs,
        &mut Vec::new(),
    ))
}

/// Decodes sequence number `k` (base 3, first action most significant).
pub fn sequence_from_index(mut k: usize, len: usize) -> Vec<Action> {
    let mut seq = vec![Action::Forward; len];
    for slot in seq.iter_mut().rev() {
        *slot = Action::ALL[k % 3];
        k /= 3;
    }
    seq
}

/// Scores of all `3^n_l` sequences in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScores {
    /// Expected entropy after the whole sequence.
    pub entropy: Vec<f64>,
    /// Sum of the expected entropies after each prefix; lower means the
    /// information arrives earlier.
    pub prefix_sum: Vec<f64>,
}

struct Walk<'a> {
    map: &'a MapDesign,
    table: &'a DepthTable,
    probs: &'a [f64],
    conditioning: Conditioning,
    len: usize,
    finals: Vec<Vec<usize>>,
    labels: Vec<Vec<u64>>,
    scratch: Vec<(u64, usize, f64)>,
    out: SequenceScores,
}

impl Walk<'_> {
    /// Depth-first over the sequence tree; each level advances the support
    /// once, so sequences sharing a prefix share its rollout.
    fn descend(&mut self, level: usize, prefix_sum: f64) {
        for a in Action::ALL {
            let (head, tail) = self.finals.split_at_mut(level + 1);
            let (lhead, ltail) = self.labels.split_at_mut(level + 1);
            let (finals, labels) = (&mut tail[0], &mut ltail[0]);
            finals.clear();
            labels.clear();
            for (&f, &l) in head[level].iter().zip(&lhead[level]) {
                let next = advance(self.map, f, a);
                finals.push(next);
                labels.push(observe_label(
                    l,
                    self.table.depth(next).unwrap_or(0),
                    self.table.dim(),
                    self.conditioning,
                ));
            }
            let h = conditional_entropy(
                &self.labels[level + 1],
                &self.finals[level + 1],
                self.probs,
                &mut self.scratch,
            );
            if level + 1 == self.len {
                self.out.entropy.push(h);
                self.out.prefix_sum.push(prefix_sum + h);
            } else {
                self.descend(level + 1, prefix_sum + h);
            }
        }
    }
}

pub fn score_sequences(
    support: &Support,
    len: usize,
    map: &MapDesign,
    table: &DepthTable,
    conditioning: Conditioning,
) -> SequenceScores {
    let count = 3usize.pow(len as u32);
    let mut finals = vec![Vec::with_capacity(support.len()); len + 1];
    finals[0] = support.states.iter().map(|&s| s as usize).collect();
    let mut walk = Walk {
        map,
        table,
        probs: &support.probs,
        conditioning,
        len,
        finals,
        labels: vec![vec![0; support.len()]; len + 1],
        scratch: Vec::with_capacity(support.len()),
        out: SequenceScores {
            entropy: Vec::with_capacity(count),
            prefix_sum: Vec::with_capacity(count),
        },
    };
    if len > 0 {
        walk.descend(0, 0.0);
    }
    walk.out
}

type CacheKey = (usize, Conditioning, Vec<(u32, u64)>);

/// Per-episode memo of sequence scores keyed by the exact floored support
/// (states and probability bits), lookahead and conditioning.
#[derive(Debug, Default)]
pub struct EntropyCache {
    entries: HashMap<CacheKey, SequenceScores>,
    pub hits: usize,
    pub misses: usize,
}

impl EntropyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn scores(
        &mut self,
        support: &Support,
        params: &AmlParams,
        map: &MapDesign,
        table: &DepthTable,
    ) -> SequenceScores {
        let key = (params.n_l, params.conditioning, support.key());
        if let Some(hit) = self.entries.get(&key) {
            self.hits += 1;
            return hit.clone();
        }
        self.misses += 1;
        let scores = score_sequences(support, params.n_l, map, table, params.conditioning);
        self.entries.insert(key, scores.clone());
        scores
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub utility: f64,
}

/// Exhaustive search over all `3^n_l` sequences for maximal utility
/// `H(bel) − E[H]`. Ties go to the lexicographically first sequence
/// (`Forward < TurnLeft < TurnRight`).
pub fn best_action_sequence(
    bel: &BeliefMap,
    map: &MapDesign,
    params: &AmlParams,
    table: &DepthTable,
) -> Result<Plan> {
    best_action_sequence_cached(bel, map, params, table, None)
}

pub fn best_action_sequence_cached(
    bel: &BeliefMap,
    map: &MapDesign,
    params: &AmlParams,
    table: &DepthTable,
    cache: Option<&mut EntropyCache>,
) -> Result<Plan> {
    let (_, scores) = scored(bel, map, params, table, cache)?;
    let h = entropy(bel);
    let mut best = 0;
    for (k, e) in scores.entropy.iter().enumerate() {
        if h - e > h - scores.entropy[best] {
            best = k;
        }
    }
    Ok(Plan {
        actions: sequence_from_index(best, params.n_l),
        utility: h - scores.entropy[best],
    })
}

/// Relative tolerance under which two expected entropies count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// The sequence AML executes. Differs from [`best_action_sequence`] in two
/// ways that keep a receding-horizon agent from stalling:
///
/// - the first action must change the floored support (a forward move
///   blocked for every support state, or a turn of an orientation-symmetric
///   belief, would be replanned from the same belief forever), unless no
///   first action does;
/// - among sequences tied on expected entropy, the one whose information
///   arrives earliest (smallest prefix-entropy sum) wins, then the
///   lexicographically first.
pub fn best_effective_sequence(
    bel: &BeliefMap,
    map: &MapDesign,
    params: &AmlParams,
    table: &DepthTable,
    cache: Option<&mut EntropyCache>,
) -> Result<Plan> {
    let (support, scores) = scored(bel, map, params, table, cache)?;
    let original = support.key();
    let mut allowed = [true; Action::COUNT];
    for a in Action::ALL {
        allowed[a.index()] = support.moved_key(map, a) != original;
    }
    if !allowed.iter().any(|&x| x) {
        allowed = [true; Action::COUNT];
    }
    let block = scores.entropy.len() / Action::COUNT;
    let h = entropy(bel);
    let tol = TIE_TOLERANCE * h.max(1.0);
    let mut best: Option<usize> = None;
    for k in 0..scores.entropy.len() {
        if !allowed[k / block] {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (e, eb) = (scores.entropy[k], scores.entropy[b]);
                e < eb - tol || (e <= eb + tol && scores.prefix_sum[k] < scores.prefix_sum[b] - tol)
            }
        };
        if better {
            best = Some(k);
        }
    }
    let best = best.unwrap_or(0);
    Ok(Plan {
        actions: sequence_from_index(best, params.n_l),
        utility: h - scores.entropy[best],
    })
}

fn scored(
    bel: &BeliefMap,
    map: &MapDesign,
    params: &AmlParams,
    table: &DepthTable,
    cache: Option<&mut EntropyCache>,
) -> Result<(Support, SequenceScores)> {
    params.validate()?;
    let support = Support::from_belief(bel, params.belief_floor)?;
    let scores = match cache {
        Some(cache) => cache.scores(&support, params, map, table),
        None => score_sequences(&support, params.n_l, map, table, params.conditioning),
    };
    Ok((support, scores))
}

//! Markov Localization (passive, random actions) and generalized Active
//! Markov Localization.
//!
//! AML plans only once the belief is concentrated on at most `n_m` states
//! (ignoring states at or below `belief_floor × max belief`). A plan is the
//! length-`n_l` action sequence maximizing the expected entropy reduction;
//! `n_g` of its actions are executed before replanning.

mod planner;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{entropy, predict, transition, uniform_prior, BeliefMap};
use crate::error::{Error, Result};
use crate::gridworld::{observe_depth, sample_start_pose, step, Action, AgentPose, MapDesign};
use crate::perception::{observe_update, DepthTable};

pub use planner::{
    best_action_sequence, best_action_sequence_cached, best_effective_sequence, expected_entropy,
    expected_entropy_with, score_sequences, sequence_from_index, Conditioning, EntropyCache, Plan,
    SequenceScores, Support,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmlParams {
    /// Lookahead length.
    pub n_l: usize,
    /// Actions executed per plan.
    pub n_g: usize,
    /// Plan only when at most this many states remain in the floored support.
    pub n_m: usize,
    /// States with belief `<= belief_floor * max belief` are ignored.
    pub belief_floor: f64,
    /// Observations the expected entropy of a sequence accounts for.
    pub conditioning: Conditioning,
}

impl AmlParams {
    pub const DEFAULT_FLOOR: f64 = 1e-3;

    pub fn new(n_l: usize, n_g: usize, n_m: usize) -> Result<Self> {
        let p = Self {
            n_l,
            n_g,
            n_m,
            ..Self::fast()
        };
        p.validate()?;
        Ok(p)
    }

    /// AML (Fast): greedy single-action planning.
    pub fn fast() -> Self {
        Self {
            n_l: 1,
            n_g: 1,
            n_m: 5,
            belief_floor: Self::DEFAULT_FLOOR,
            conditioning: Conditioning::AllObservations,
        }
    }

    /// AML (Slow): five-step lookahead, replanning after every action.
    pub fn slow() -> Self {
        Self {
            n_l: 5,
            n_g: 1,
            n_m: 10,
            ..Self::fast()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_l == 0 || self.n_g == 0 || self.n_g > self.n_l {
            return Err(Error::AmlParams(format!(
                "need 1 <= n_g ({}) <= n_l ({})",
                self.n_g, self.n_l
            )));
        }
        if self.n_m == 0 {
            return Err(Error::AmlParams("n_m must be at least 1".into()));
        }
        if !(self.belief_floor >= 0.0 && self.belief_floor.is_finite()) {
            return Err(Error::AmlParams(format!(
                "belief_floor {} must be >= 0",
                self.belief_floor
            )));
        }
        if self.n_l > 12 {
            return Err(Error::AmlParams(format!(
                "n_l {} would enumerate 3^{} sequences",
                self.n_l, self.n_l
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub correct: bool,
    pub steps: usize,
    pub final_belief_entropy: f64,
    /// Seconds spent inside the episode loop.
    pub wall_time: f64,
}

fn random_action<R: Rng + ?Sized>(rng: &mut R) -> Action {
    Action::ALL[rng.gen_range(0..Action::COUNT)]
}

fn finish(bel: &BeliefMap, pose: AgentPose, steps: usize, start: Instant) -> EpisodeResult {
    EpisodeResult {
        correct: predict(bel) == pose,
        steps,
        final_belief_entropy: entropy(bel),
        wall_time: start.elapsed().as_secs_f64(),
    }
}

/// Passive localization: uniform prior, random actions, `episode_len`
/// actions and `episode_len + 1` observations. The start pose is the first
/// draw from `rng`.
pub fn run_markov<R: Rng + ?Sized>(
    map: &MapDesign,
    episode_len: usize,
    rng: &mut R,
) -> Result<EpisodeResult> {
    let table = DepthTable::build(map);
    let pose = sample_start_pose(map, rng);
    run_markov_from(map, &table, pose, episode_len, rng)
}

pub fn run_markov_from<R: Rng + ?Sized>(
    map: &MapDesign,
    table: &DepthTable,
    pose: AgentPose,
    episode_len: usize,
    rng: &mut R,
) -> Result<EpisodeResult> {
    run_markov_traced(map, table, pose, episode_len, rng, &mut |_, _| {})
}

/// Belief after each observation, with the true pose at that moment.
pub type Trace<'a> = dyn FnMut(&BeliefMap, AgentPose) + 'a;

/// [`run_markov_from`] reporting every posterior to `trace`.
pub fn run_markov_traced<R: Rng + ?Sized>(
    map: &MapDesign,
    table: &DepthTable,
    mut pose: AgentPose,
    episode_len: usize,
    rng: &mut R,
    trace: &mut Trace,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let mut bel = uniform_prior(map);
    for _ in 0..episode_len {
        bel = observe_update(&bel, observe_depth(map, pose), table)?;
        trace(&bel, pose);
        let a = random_action(rng);
        pose = step(map, pose, a);
        bel = transition(&bel, a, map);
    }
    bel = observe_update(&bel, observe_depth(map, pose), table)?;
    trace(&bel, pose);
    Ok(finish(&bel, pose, episode_len, start))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Memo {
    On,
    Off,
}

/// Generalized Active Markov Localization. Same start-pose convention as
/// [`run_markov`].
pub fn run_aml<R: Rng + ?Sized>(
    map: &MapDesign,
    episode_len: usize,
    params: &AmlParams,
    rng: &mut R,
) -> Result<EpisodeResult> {
    let table = DepthTable::build(map);
    let pose = sample_start_pose(map, rng);
    run_aml_from(map, &table, pose, episode_len, params, Memo::On, rng)
}

pub fn run_aml_from<R: Rng + ?Sized>(
    map: &MapDesign,
    table: &DepthTable,
    pose: AgentPose,
    episode_len: usize,
    params: &AmlParams,
    memo: Memo,
    rng: &mut R,
) -> Result<EpisodeResult> {
    run_aml_traced(
        map,
        table,
        pose,
        episode_len,
        params,
        memo,
        rng,
        &mut |_, _| {},
    )
}

/// [`run_aml_from`] reporting every posterior to `trace`.
#[allow(clippy::too_many_arguments)]
pub fn run_aml_traced<R: Rng + ?Sized>(
    map: &MapDesign,
    table: &DepthTable,
    mut pose: AgentPose,
    episode_len: usize,
    params: &AmlParams,
    memo: Memo,
    rng: &mut R,
    trace: &mut Trace,
) -> Result<EpisodeResult> {
    params.validate()?;
    let start = Instant::now();
    let mut cache = EntropyCache::new();
    let mut bel = uniform_prior(map);
    let mut plan: Vec<Action> = Vec::new();
    let mut taken = 0;
    for _ in 0..episode_len {
        bel = observe_update(&bel, observe_depth(map, pose), table)?;
        trace(&bel, pose);
        let concentrated = bel.support_size(params.belief_floor * bel.max_value()) <= params.n_m;
        let a = if !concentrated {
            plan.clear();
            random_action(rng)
        } else {
            if taken >= params.n_g || taken >= plan.len() {
                let cache = match memo {
                    Memo::On => Some(&mut cache),
                    Memo::Off => None,
                };
                let best = best_effective_sequence(&bel, map, params, table, cache)?;
                // Nothing to learn within the lookahead: explore like Markov.
                plan = if best.utility > 0.0 {
                    best.actions
                } else {
                    Vec::new()
                };
                taken = 0;
            }
            if plan.is_empty() {
                random_action(rng)
            } else {
                taken += 1;
                plan[taken - 1]
            }
        };
        pose = step(map, pose, a);
        bel = transition(&bel, a, map);
    }
    bel = observe_update(&bel, observe_depth(map, pose), table)?;
    trace(&bel, pose);
    Ok(finish(&bel, pose, episode_len, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{measurement_update, LikelihoodMap};
    use crate::gridworld::tests::toy_map;
    use crate::gridworld::{generate_maze, Orientation};
    use crate::rng;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn uniform_over(map: &MapDesign, poses: &[AgentPose]) -> BeliefMap {
        let mut v = vec![0.0; map.num_states()];
        for &p in poses {
            v[map.state_index(p)] = 1.0;
        }
        measurement_update(
            &uniform_prior(map),
            &LikelihoodMap::from_values(map, v).unwrap(),
        )
        .unwrap()
    }

    /// Independent expected-entropy oracle: push full belief tensors through
    /// `bayes::transition`, then split by the depth each state would observe.
    fn tensor_expected_entropy(
        bel: &BeliefMap,
        seq: &[Action],
        map: &MapDesign,
        table: &DepthTable,
        floor: f64,
    ) -> f64 {
        let thr = floor * bel.max_value();
        let kept: Vec<f64> = bel
            .values()
            .iter()
            .map(|&v| if v > thr { v } else { 0.0 })
            .collect();
        let z: f64 = kept.iter().sum();
        let mut b = BeliefMap::from_values(map, kept.iter().map(|v| v / z).collect()).unwrap();
        for &a in seq {
            b = transition(&b, a, map);
        }
        let mut total = 0.0;
        for d in 0..table.dim() {
            let masked: Vec<f64> = b
                .values()
                .iter()
                .enumerate()
                .map(|(i, &v)| if table.depth(i) == Some(d) { v } else { 0.0 })
                .collect();
            let pd: f64 = masked.iter().sum();
            if pd > 0.0 {
                let h: f64 = -masked
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| (v / pd) * (v / pd).ln())
                    .sum::<f64>();
                total += pd * h;
            }
        }
        total
    }

    /// Independent oracle for history conditioning: walk each support pose
    /// with `gridworld::step`, group by the full depth history, and merge
    /// mass per final pose within each group.
    fn history_expected_entropy(
        bel: &BeliefMap,
        seq: &[Action],
        map: &MapDesign,
        floor: f64,
    ) -> f64 {
        let thr = floor * bel.max_value();
        let kept: Vec<(usize, f64)> = bel
            .values()
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v > thr)
            .collect();
        let z: f64 = kept.iter().map(|k| k.1).sum();
        let mut groups: HashMap<Vec<usize>, HashMap<usize, f64>> = HashMap::new();
        for (i, v) in kept {
            let mut pose = map.pose_of(i);
            let mut history = Vec::new();
            for &a in seq {
                pose = step(map, pose, a);
                history.push(observe_depth(map, pose));
            }
            *groups
                .entry(history)
                .or_default()
                .entry(map.state_index(pose))
                .or_default() += v / z;
        }
        groups
            .values()
            .map(|g| {
                let pc: f64 = g.values().sum();
                -g.values().map(|&m| m * (m / pc).ln()).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn params_validation() {
        assert!(AmlParams::new(1, 1, 5).is_ok());
        assert!(AmlParams::new(2, 3, 5).is_err());
        assert!(AmlParams::new(0, 0, 5).is_err());
        assert!(AmlParams::new(3, 1, 0).is_err());
        assert_eq!(AmlParams::fast(), AmlParams::new(1, 1, 5).unwrap());
        assert_eq!(AmlParams::slow(), AmlParams::new(5, 1, 10).unwrap());
    }

    #[test]
    fn expected_entropy_examples() {
        let map = toy_map();
        let table = DepthTable::build(&map);
        let point = BeliefMap::point_mass(&map, AgentPose::new(Orientation::East, 1, 1));
        for k in 0..27 {
            assert_eq!(
                expected_entropy(&point, &sequence_from_index(k, 3), &map, &table, 0.0).unwrap(),
                0.0
            );
        }
        // Both see depth 0 now; after a left turn one faces a 2-deep corridor, the other a wall.
        let a = AgentPose::new(Orientation::North, 1, 1);
        let b = AgentPose::new(Orientation::North, 1, 2);
        let two = uniform_over(&map, &[a, b]);
        let e_left = expected_entropy(&two, &[Action::TurnLeft], &map, &table, 0.0).unwrap();
        assert_eq!(
            e_left,
            tensor_expected_entropy(&two, &[Action::TurnLeft], &map, &table, 0.0)
        );
        assert_eq!(e_left, 0.0);
        // Turning right, (1,1) sees 2 cells and (1,2) sees 1: separated again.
        assert_eq!(
            expected_entropy(&two, &[Action::TurnRight], &map, &table, 0.0).unwrap(),
            0.0
        );
        // Forward is blocked for both: still depth 0 each.
        let e_fwd = expected_entropy(&two, &[Action::Forward], &map, &table, 0.0).unwrap();
        assert!((e_fwd - 2f64.ln()).abs() < 1e-12);
        assert!(
            (tensor_expected_entropy(&two, &[Action::Forward], &map, &table, 0.0) - 2f64.ln())
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn expected_entropy_rejects_empty_inputs() {
        let map = toy_map();
        let table = DepthTable::build(&map);
        let bel = uniform_prior(&map);
        assert!(expected_entropy(&bel, &[], &map, &table, 0.0).is_err());
        let zero = BeliefMap::from_values(&map, vec![0.0; map.num_states()]).unwrap();
        assert!(matches!(
            expected_entropy(&zero, &[Action::Forward], &map, &table, 0.0),
            Err(Error::EmptySupport(_))
        ));
    }

    fn corridor_with_legs() -> MapDesign {
        MapDesign::from_rows(&["######", "#....#", "#.##.#", "######"]).unwrap()
    }

    /// Exhaustive check of which sequences of length `n_l` separate the support.
    fn separating(
        bel: &BeliefMap,
        map: &MapDesign,
        table: &DepthTable,
        n_l: usize,
    ) -> Vec<Vec<Action>> {
        (0..3usize.pow(n_l as u32))
            .map(|k| sequence_from_index(k, n_l))
            .filter(|seq| expected_entropy(bel, seq, map, table, 0.0).unwrap() == 0.0)
            .collect()
    }

    #[test]
    fn one_step_plan_picks_the_only_separating_action() {
        let map = corridor_with_legs();
        let table = DepthTable::build(&map);
        // Both see depth 0; only turning left distinguishes them (3 vs 0 cells).
        let bel = uniform_over(
            &map,
            &[
                AgentPose::new(Orientation::North, 1, 3),
                AgentPose::new(Orientation::East, 1, 4),
            ],
        );
        assert_eq!(
            separating(&bel, &map, &table, 1),
            vec![vec![Action::TurnLeft]]
        );
        let params = AmlParams {
            n_l: 1,
            n_g: 1,
            n_m: 5,
            belief_floor: 0.0,
            ..AmlParams::fast()
        };
        let plan = best_action_sequence(&bel, &map, &params, &table).unwrap();
        assert_eq!(plan.actions, vec![Action::TurnLeft]);
        assert!((plan.utility - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_step_plan_needs_forward_first() {
        // A forward move alone never separates equal-depth states (depth d
        // becomes d − 1 or stays), but it can enable a separating turn.
        let map = corridor_with_legs();
        let table = DepthTable::build(&map);
        let bel = uniform_over(
            &map,
            &[
                AgentPose::new(Orientation::North, 2, 1),
                AgentPose::new(Orientation::North, 2, 4),
            ],
        );
        assert!(separating(&bel, &map, &table, 1).is_empty());
        assert_eq!(
            separating(&bel, &map, &table, 2),
            vec![
                vec![Action::Forward, Action::TurnLeft],
                vec![Action::Forward, Action::TurnRight]
            ]
        );
        let params = AmlParams {
            n_l: 2,
            n_g: 1,
            n_m: 5,
            belief_floor: 0.0,
            ..AmlParams::fast()
        };
        let plan = best_action_sequence(&bel, &map, &params, &table).unwrap();
        assert_eq!(plan.actions, vec![Action::Forward, Action::TurnLeft]);
    }

    #[test]
    fn point_mass_plan_is_lexicographically_first() {
        let map = toy_map();
        let table = DepthTable::build(&map);
        let bel = BeliefMap::point_mass(&map, AgentPose::new(Orientation::South, 3, 3));
        let plan = best_action_sequence(&bel, &map, &AmlParams::slow(), &table).unwrap();
        assert_eq!(plan.actions, vec![Action::Forward; 5]);
        assert_eq!(plan.utility, 0.0);
    }

    #[test]
    fn effective_plan_skips_moves_that_change_nothing() {
        let map = toy_map();
        let table = DepthTable::build(&map);
        // Facing the south wall: forward is a no-op, so the first turn wins the tie.
        let bel = BeliefMap::point_mass(&map, AgentPose::new(Orientation::South, 3, 3));
        let plan = best_effective_sequence(&bel, &map, &AmlParams::slow(), &table, None).unwrap();
        assert_eq!(
            plan.actions,
            vec![
                Action::TurnLeft,
                Action::Forward,
                Action::Forward,
                Action::Forward,
                Action::Forward
            ]
        );
        assert_eq!(plan.utility, 0.0);
    }

    #[test]
    fn effective_plan_prefers_early_information() {
        let map = corridor_with_legs();
        let table = DepthTable::build(&map);
        let bel = uniform_over(
            &map,
            &[
                AgentPose::new(Orientation::North, 1, 3),
                AgentPose::new(Orientation::East, 1, 4),
            ],
        );
        // Every sequence starting with TurnLeft resolves the pair at once;
        // lexicographic order alone would defer it behind Forward moves.
        let params = AmlParams {
            n_l: 3,
            belief_floor: 0.0,
            ..AmlParams::slow()
        };
        let plan = best_effective_sequence(&bel, &map, &params, &table, None).unwrap();
        assert_eq!(plan.actions[0], Action::TurnLeft);
        assert!((plan.utility - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conditioning_on_every_observation_keeps_early_information() {
        let map = corridor_with_legs();
        let table = DepthTable::build(&map);
        let bel = uniform_over(
            &map,
            &[
                AgentPose::new(Orientation::North, 1, 3),
                AgentPose::new(Orientation::East, 1, 4),
            ],
        );
        // Turning left separates the pair; turning back makes them look alike again.
        let seq = [Action::TurnLeft, Action::TurnRight];
        let last = expected_entropy_with(
            &bel,
            &seq,
            &map,
            &table,
            0.0,
            Conditioning::FinalObservation,
        )
        .unwrap();
        let all =
            expected_entropy_with(&bel, &seq, &map, &table, 0.0, Conditioning::AllObservations)
                .unwrap();
        assert!((last - 2f64.ln()).abs() < 1e-12);
        assert_eq!(all, 0.0);
        assert_eq!(all, history_expected_entropy(&bel, &seq, &map, 0.0));
    }

    #[test]
    fn sequence_decoding_is_lexicographic() {
        assert_eq!(
            sequence_from_index(0, 2),
            vec![Action::Forward, Action::Forward]
        );
        assert_eq!(
            sequence_from_index(1, 2),
            vec![Action::Forward, Action::TurnLeft]
        );
        assert_eq!(
            sequence_from_index(3, 2),
            vec![Action::TurnLeft, Action::Forward]
        );
        assert_eq!(
            sequence_from_index(8, 2),
            vec![Action::TurnRight, Action::TurnRight]
        );
    }

    #[test]
    fn markov_steps_and_determinism() {
        let map = generate_maze(7, 7, 3).unwrap();
        let a = run_markov(&map, 15, &mut rng::seeded(9)).unwrap();
        let b = run_markov(&map, 15, &mut rng::seeded(9)).unwrap();
        assert_eq!(a.steps, 15);
        assert_eq!(
            (a.correct, a.final_belief_entropy),
            (b.correct, b.final_belief_entropy)
        );
    }

    #[test]
    fn zero_length_episodes_match_single_observation() {
        let map = generate_maze(7, 7, 8).unwrap();
        let table = DepthTable::build(&map);
        for k in 0..map.num_states() {
            let pose = map.pose_of(k);
            if !map.is_valid_pose(pose) {
                continue;
            }
            let m = run_markov_from(&map, &table, pose, 0, &mut rng::seeded(0)).unwrap();
            let a = run_aml_from(
                &map,
                &table,
                pose,
                0,
                &AmlParams::slow(),
                Memo::On,
                &mut rng::seeded(0),
            )
            .unwrap();
            let bel =
                observe_update(&uniform_prior(&map), observe_depth(&map, pose), &table).unwrap();
            assert_eq!(m.correct, predict(&bel) == pose);
            assert_eq!(a.correct, m.correct);
        }
    }

    #[test]
    fn memoized_aml_is_bit_identical() {
        for seed in 0..20 {
            let map = generate_maze(9, 9, seed).unwrap();
            let table = DepthTable::build(&map);
            let pose = sample_start_pose(&map, &mut rng::seeded(seed));
            for params in [
                AmlParams::fast(),
                AmlParams::slow(),
                AmlParams {
                    n_l: 3,
                    n_g: 3,
                    n_m: 10,
                    belief_floor: 1e-3,
                    ..AmlParams::fast()
                },
            ] {
                let on = run_aml_from(
                    &map,
                    &table,
                    pose,
                    20,
                    &params,
                    Memo::On,
                    &mut rng::seeded(seed + 100),
                )
                .unwrap();
                let off = run_aml_from(
                    &map,
                    &table,
                    pose,
                    20,
                    &params,
                    Memo::Off,
                    &mut rng::seeded(seed + 100),
                )
                .unwrap();
                assert_eq!(on.correct, off.correct);
                assert_eq!(
                    on.final_belief_entropy.to_bits(),
                    off.final_belief_entropy.to_bits()
                );
            }
        }
    }

    proptest! {
        #[test]
        fn planner_matches_enumeration(
            seed in 0u64..300,
            start in 0usize..10_000,
            n_l in 1usize..=5,
            script in proptest::collection::vec(0usize..3, 0..6),
            history in any::<bool>(),
        ) {
            let map = generate_maze(7, 9, seed).unwrap();
            let table = DepthTable::build(&map);
            let free: Vec<usize> = (0..map.num_states()).filter(|&i| map.is_valid_pose(map.pose_of(i))).collect();
            let mut pose = map.pose_of(free[start % free.len()]);
            let mut bel = uniform_prior(&map);
            for a in script {
                bel = observe_update(&bel, observe_depth(&map, pose), &table).unwrap();
                let a = Action::ALL[a];
                pose = step(&map, pose, a);
                bel = transition(&bel, a, &map);
            }
            bel = observe_update(&bel, observe_depth(&map, pose), &table).unwrap();
            let conditioning = if history { Conditioning::AllObservations } else { Conditioning::FinalObservation };
            let params = AmlParams { n_l, n_g: 1, n_m: 1000, belief_floor: 1e-3, conditioning };
            let plan = best_action_sequence(&bel, &map, &params, &table).unwrap();
            let mut cache = EntropyCache::new();
            let cached = best_action_sequence_cached(&bel, &map, &params, &table, Some(&mut cache)).unwrap();
            let again = best_action_sequence_cached(&bel, &map, &params, &table, Some(&mut cache)).unwrap();
            prop_assert_eq!(&plan, &cached);
            prop_assert_eq!(&plan, &again);
            prop_assert_eq!(cache.hits, 1);

            let h = entropy(&bel);
            let support = Support::from_belief(&bel, params.belief_floor).unwrap();
            let support_h: f64 = crate::bayes::entropy_of(&support.probs);
            let mut best_k = 0;
            let mut best_u = f64::NEG_INFINITY;
            for k in 0..3usize.pow(n_l as u32) {
                let seq = sequence_from_index(k, n_l);
                let e = expected_entropy_with(&bel, &seq, &map, &table, params.belief_floor, conditioning).unwrap();
                let oracle = if history {
                    history_expected_entropy(&bel, &seq, &map, params.belief_floor)
                } else {
                    tensor_expected_entropy(&bel, &seq, &map, &table, params.belief_floor)
                };
                prop_assert!((e - oracle).abs() <= 1e-12);
                if history {
                    // More observations never leave more uncertainty.
                    let last = expected_entropy(&bel, &seq, &map, &table, params.belief_floor).unwrap();
                    prop_assert!(e <= last + 1e-12);
                }
                // Conditioning on an observation never raises entropy; merged
                // mass only lowers it further.
                prop_assert!(e <= support_h + 1e-9);
                if h - e > best_u {
                    best_u = h - e;
                    best_k = k;
                }
            }
            prop_assert_eq!(plan.actions, sequence_from_index(best_k, n_l));
            prop_assert_eq!(plan.utility, best_u);
        }
    }
}

//! Histogram belief over `(orientation, row, col)` and the exact Bayes-filter
//! recursion: transition, measurement update, entropy and prediction.

use crate::error::{Error, Result};
use crate::gridworld::{Action, AgentPose, MapDesign, ORIENTATIONS};

/// `O×M×N` probability tensor, flat in [`MapDesign::state_index`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// `O×M×N` nonnegative likelihood tensor, same layout as [`BeliefMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

macro_rules! tensor_accessors {
    ($ty:ident) => {
        impl $ty {
            pub fn from_values(map: &MapDesign, values: Vec<f64>) -> Result<Self> {
                if values.len() != map.num_states() {
                    return Err(Error::Shape(format!(
                        "{} values for {} states",
                        values.len(),
                        map.num_states()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
                    return Err(Error::NonFinite(format!(
                        "entry {v} is not a finite nonnegative real"
                    )));
                }
                Ok(Self {
                    rows: map.rows(),
                    cols: map.cols(),
                    values,
                })
            }

            pub fn rows(&self) -> usize {
                self.rows
            }

            pub fn cols(&self) -> usize {
                self.cols
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn get(&self, pose: AgentPose) -> f64 {
                self.values[pose.orientation.index() * self.rows * self.cols
                    + pose.row * self.cols
                    + pose.col]
            }

            /// One orientation plane, `M·N` values row-major.
            pub fn plane(&self, o: usize) -> &[f64] {
                let n = self.rows * self.cols;
                &self.values[o * n..(o + 1) * n]
            }

            pub fn sum(&self) -> f64 {
                self.values.iter().sum()
            }
        }
    };
}

tensor_accessors!(BeliefMap);
tensor_accessors!(LikelihoodMap);

impl BeliefMap {
    /// All mass on a single pose.
    pub fn point_mass(map: &MapDesign, pose: AgentPose) -> Self {
        let mut values = vec![0.0; map.num_states()];
        values[map.state_index(pose)] = 1.0;
        Self {
            rows: map.rows(),
            cols: map.cols(),
            values,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Number of states carrying mass strictly above `threshold`.
    pub fn support_size(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }
}

impl LikelihoodMap {
    pub(crate) fn from_raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self { rows, cols, values }
    }
}

/// Uniform belief over FREE cells × orientations.
pub fn uniform_prior(map: &MapDesign) -> BeliefMap {
    let p = 1.0 / (ORIENTATIONS * map.free_count()) as f64;
    let plane: Vec<f64> = map
        .free_mask()
        .iter()
        .map(|&f| if f { p } else { 0.0 })
        .collect();
    BeliefMap {
        rows: map.rows(),
        cols: map.cols(),
        values: plane.repeat(ORIENTATIONS),
    }
}

/// Flat index of the state reached from state `index` by moving forward.
#[inline]
pub fn forward_target(map: &MapDesign, index: usize) -> usize {
    let pose = map.pose_of(index);
    match map.neighbor(pose.row, pose.col, pose.orientation) {
        Some((r, c)) if map.is_free(r, c) => {
            index - pose.row * map.cols() - pose.col + r * map.cols() + c
        }
        _ => index,
    }
}

/// Motion update. Turns permute orientation planes; forward shifts each plane
/// one cell along its heading, and mass whose target is an obstacle stays put.
pub fn transition(bel: &BeliefMap, action: Action, map: &MapDesign) -> BeliefMap {
    let n = map.cells();
    let mut out = vec![0.0; bel.values.len()];
    match action {
        Action::TurnLeft | Action::TurnRight => {
            let shift = if action == Action::TurnLeft { 3 } else { 1 };
            for o in 0..ORIENTATIONS {
                let to = (o + shift) % ORIENTATIONS;
                out[to * n..(to + 1) * n].copy_from_slice(&bel.values[o * n..(o + 1) * n]);
            }
        }
        Action::Forward => {
            for (i, &v) in bel.values.iter().enumerate() {
                if v != 0.0 {
                    out[forward_target(map, i)] += v;
                }
            }
        }
    }
    BeliefMap {
        rows: bel.rows,
        cols: bel.cols,
        values: out,
    }
}

/// Bayes update `Bel ∝ prior ⊙ lik`. Fails when the normalizer is zero.
pub fn measurement_update(prior: &BeliefMap, lik: &LikelihoodMap) -> Result<BeliefMap> {
    if prior.values.len() != lik.values.len() {
        return Err(Error::Shape(format!(
            "belief has {} states, likelihood {}",
            prior.values.len(),
            lik.values.len()
        )));
    }
    let mut values: Vec<f64> = prior
        .values
        .iter()
        .zip(&lik.values)
        .map(|(p, l)| p * l)
        .collect();
    let z: f64 = values.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Inconsistent(z));
    }
    values.iter_mut().for_each(|v| *v /= z);
    Ok(BeliefMap {
        rows: prior.rows,
        cols: prior.cols,
        values,
    })
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(bel: &BeliefMap) -> f64 {
    entropy_of(&bel.values)
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Most probable state; ties resolve to the first in `(o, r, c)` order.
pub fn predict(bel: &BeliefMap) -> AgentPose {
    let mut best = 0;
    for (i, &v) in bel.values.iter().enumerate() {
        if v > bel.values[best] {
            best = i;
        }
    }
    let n = bel.rows * bel.cols;
    let cell = best % n;
    AgentPose::new(
        crate::gridworld::Orientation::from_index(best / n),
        cell / bel.cols,
        cell % bel.cols,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::tests::toy_map;
    use crate::gridworld::{generate_maze, Orientation};
    use proptest::prelude::*;

    fn indicator(map: &MapDesign, states: &[usize]) -> LikelihoodMap {
        let mut v = vec![0.0; map.num_states()];
        for &s in states {
            v[s] = 1.0;
        }
        LikelihoodMap::from_values(map, v).unwrap()
    }

    /// Belief with dyadic-rational entries, so every partial sum is exact.
    fn dyadic_belief(map: &MapDesign, weights: &[u32]) -> BeliefMap {
        let mut v = vec![0.0; map.num_states()];
        let free: Vec<usize> = (0..map.num_states())
            .filter(|&i| map.is_valid_pose(map.pose_of(i)))
            .collect();
        let mut total = 0u64;
        for (k, &i) in free.iter().enumerate() {
            let w = weights[k % weights.len()] as u64;
            v[i] = w as f64;
            total += w;
        }
        let scale = (total.next_power_of_two()) as f64;
        v.iter_mut().for_each(|x| *x /= scale);
        BeliefMap::from_values(map, v).unwrap()
    }

    #[test]
    fn uniform_prior_examples() {
        let single = MapDesign::from_rows(&["###", "#.#", "###"]).unwrap();
        let b = uniform_prior(&single);
        for o in Orientation::ALL {
            assert_eq!(b.get(AgentPose::new(o, 1, 1)), 0.25);
        }
        let toy = toy_map();
        let b = uniform_prior(&toy);
        assert_eq!(b.values().iter().filter(|&&v| v == 1.0 / 32.0).count(), 32);
        assert_eq!(
            b.values().iter().filter(|&&v| v == 0.0).count(),
            4 * 25 - 32
        );
        assert!((entropy(&b) - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn transition_examples() {
        let map = toy_map();
        let east = BeliefMap::point_mass(&map, AgentPose::new(Orientation::East, 1, 1));
        assert_eq!(
            transition(&east, Action::Forward, &map),
            BeliefMap::point_mass(&map, AgentPose::new(Orientation::East, 1, 2))
        );
        let north = BeliefMap::point_mass(&map, AgentPose::new(Orientation::North, 1, 1));
        assert_eq!(transition(&north, Action::Forward, &map), north);
        assert_eq!(
            transition(&north, Action::TurnLeft, &map),
            BeliefMap::point_mass(&map, AgentPose::new(Orientation::West, 1, 1))
        );
    }

    #[test]
    fn blocked_mass_merges_with_arrivals() {
        let map = MapDesign::from_rows(&["#####", "#...#", "#####"]).unwrap();
        let mut v = vec![0.0; map.num_states()];
        v[map.state_index(AgentPose::new(Orientation::East, 1, 2))] = 0.25;
        v[map.state_index(AgentPose::new(Orientation::East, 1, 3))] = 0.75;
        let bel = BeliefMap::from_values(&map, v).unwrap();
        let out = transition(&bel, Action::Forward, &map);
        assert_eq!(out.get(AgentPose::new(Orientation::East, 1, 3)), 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn measurement_update_examples() {
        let map = toy_map();
        let s = map.state_index(AgentPose::new(Orientation::South, 3, 3));
        let point = BeliefMap::point_mass(&map, map.pose_of(s));
        assert_eq!(
            measurement_update(&point, &indicator(&map, &[s, s - 1])).unwrap(),
            point
        );
        assert!(matches!(
            measurement_update(&point, &indicator(&map, &[s - 1])),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn uniform_times_indicator_matches_enumeration() {
        let map = toy_map();
        let prior = uniform_prior(&map);
        let free: Vec<usize> = (0..map.num_states())
            .filter(|&i| prior.values()[i] > 0.0)
            .collect();
        for k in 1..=free.len() {
            let chosen: Vec<usize> = free
                .iter()
                .copied()
                .step_by(free.len() / k)
                .take(k)
                .collect();
            let post = measurement_update(&prior, &indicator(&map, &chosen)).unwrap();
            for i in 0..map.num_states() {
                let want = if chosen.contains(&i) {
                    1.0 / chosen.len() as f64
                } else {
                    0.0
                };
                assert!((post.values()[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let map = toy_map();
        let point = BeliefMap::point_mass(&map, AgentPose::new(Orientation::East, 1, 1));
        assert_eq!(entropy(&point), 0.0);
        assert!((entropy(&uniform_prior(&map)) - 3.4657359027997265).abs() < 1e-12);
        let two = measurement_update(&uniform_prior(&map), &indicator(&map, &[6, 7])).unwrap();
        assert!((entropy(&two) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn predict_examples() {
        let map = generate_maze(7, 7, 0).unwrap();
        let pose = AgentPose::new(Orientation::South, 3, 1);
        if map.is_valid_pose(pose) {
            assert_eq!(predict(&BeliefMap::point_mass(&map, pose)), pose);
        }
        let toy = toy_map();
        let a = AgentPose::new(Orientation::North, 3, 1);
        assert_eq!(predict(&BeliefMap::point_mass(&toy, a)), a);
        let tie = measurement_update(
            &uniform_prior(&toy),
            &indicator(
                &toy,
                &[
                    toy.state_index(AgentPose::new(Orientation::East, 1, 1)),
                    toy.state_index(AgentPose::new(Orientation::North, 1, 1)),
                ],
            ),
        )
        .unwrap();
        assert_eq!(predict(&tie), AgentPose::new(Orientation::North, 1, 1));
    }

    proptest! {
        #[test]
        fn transition_conserves_mass_exactly(seed in 0u64..500, weights in proptest::collection::vec(1u32..1000, 1..40), acts in proptest::collection::vec(0usize..3, 1..25)) {
            let map = generate_maze(9, 9, seed).unwrap();
            let mut bel = dyadic_belief(&map, &weights);
            let total = bel.sum();
            for a in acts {
                bel = transition(&bel, Action::from_index(a).unwrap(), &map);
                prop_assert_eq!(bel.sum(), total);
                for (i, &v) in bel.values().iter().enumerate() {
                    if !map.is_valid_pose(map.pose_of(i)) {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }

        #[test]
        fn four_left_turns_are_identity(seed in 0u64..500, weights in proptest::collection::vec(1u32..1000, 1..40)) {
            let map = generate_maze(7, 9, seed).unwrap();
            let raw = dyadic_belief(&map, &weights);
            // Renormalize to a generic (non-dyadic) belief.
            let z = raw.sum() * 3.0;
            let bel = BeliefMap::from_values(&map, raw.values().iter().map(|v| v / z).collect()).unwrap();
            let mut out = bel.clone();
            for _ in 0..4 {
                out = transition(&out, Action::TurnLeft, &map);
            }
            prop_assert_eq!(&out, &bel);
            let lr = transition(&transition(&bel, Action::TurnLeft, &map), Action::TurnRight, &map);
            prop_assert_eq!(lr, bel);
        }

        #[test]
        fn indicator_update_is_idempotent_and_never_raises_entropy(seed in 0u64..500, mask in proptest::collection::vec(any::<bool>(), 4 * 81)) {
            let map = generate_maze(9, 9, seed).unwrap();
            let prior = uniform_prior(&map);
            let states: Vec<usize> = (0..map.num_states()).filter(|&i| mask[i] && prior.values()[i] > 0.0).collect();
            prop_assume!(!states.is_empty());
            let lik = indicator(&map, &states);
            let once = measurement_update(&prior, &lik).unwrap();
            let twice = measurement_update(&once, &lik).unwrap();
            prop_assert!((once.sum() - 1.0).abs() <= 1e-9);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            prop_assert!(entropy(&once) <= entropy(&prior) + 1e-12);
        }
    }
}

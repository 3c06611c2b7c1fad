//! Likelihood maps from depth observations: one-hot depth features compared
//! by cosine similarity against the precomputed depth of every state.

use crate::bayes::{measurement_update, BeliefMap, LikelihoodMap};
use crate::error::{Error, Result};
use crate::gridworld::{observation_vector, observe_depth, MapDesign};

/// Depth seen from every state, `-1` at obstacle cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthTable {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<i32>,
}

impl DepthTable {
    pub fn build(map: &MapDesign) -> Self {
        let values = (0..map.num_states())
            .map(|i| {
                let pose = map.pose_of(i);
                if map.is_valid_pose(pose) {
                    observe_depth(map, pose) as i32
                } else {
                    -1
                }
            })
            .collect();
        Self {
            rows: map.rows(),
            cols: map.cols(),
            dim: map.max_dim(),
            values,
        }
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    /// Depth at flat state index, `None` at obstacles.
    #[inline]
    pub fn depth(&self, index: usize) -> Option<usize> {
        let d = self.values[index];
        (d >= 0).then_some(d as usize)
    }

    /// Observation dimension `max(M, N)`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.values.len()
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Indicator likelihood: 1 where the state's depth equals `observed_depth`,
/// 0 elsewhere (always 0 at obstacles).
pub fn likelihood_map(observed_depth: usize, table: &DepthTable) -> LikelihoodMap {
    likelihood_map_with_floor(observed_depth, table, 0.0)
}

/// Same as [`likelihood_map`] but non-matching FREE states get `floor`
/// instead of 0.
pub fn likelihood_map_with_floor(
    observed_depth: usize,
    table: &DepthTable,
    floor: f64,
) -> LikelihoodMap {
    let values = table
        .values
        .iter()
        .map(|&d| match d {
            d if d < 0 => 0.0,
            d if d as usize == observed_depth => 1.0,
            _ => floor,
        })
        .collect();
    LikelihoodMap::from_raw(table.rows, table.cols, values)
}

/// Likelihood computed literally as the cosine similarity between one-hot
/// features of the observation and of each state's expected observation.
pub fn cosine_likelihood_map(observed_depth: usize, table: &DepthTable) -> Result<LikelihoodMap> {
    let obs = observation_vector(observed_depth, table.dim)?;
    let values = table
        .values
        .iter()
        .map(|&d| {
            if d < 0 {
                Ok(0.0)
            } else {
                cosine_similarity(&obs, &observation_vector(d as usize, table.dim)?)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LikelihoodMap::from_raw(table.rows, table.cols, values))
}

/// Measurement update of `bel` with the indicator likelihood of a depth
/// observation. Every filter in the crate goes through this function.
pub fn observe_update(
    bel: &BeliefMap,
    observed_depth: usize,
    table: &DepthTable,
) -> Result<BeliefMap> {
    measurement_update(bel, &likelihood_map(observed_depth, table))
}

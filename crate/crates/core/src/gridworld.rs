//! Maze2D environment: Kruskal maze generation, agent dynamics and the
//! depth-ray observation model.
//!
//! Coordinates are `(row, col)` with row 0 at the top. Orientation 0 faces
//! North (row − 1), 1 East (col + 1), 2 South (row + 1) and 3 West (col − 1).

use std::fmt;

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Number of orientations.
pub const ORIENTATIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [Self::North, Self::East, Self::South, Self::West];

    pub fn from_index(i: usize) -> Orientation {
        Self::ALL[i % ORIENTATIONS]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn left(self) -> Orientation {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Orientation {
        Self::from_index(self.index() + 1)
    }

    /// Unit displacement `(drow, dcol)`.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Self::North => (-1, 0),
            Self::East => (0, 1),
            Self::South => (1, 0),
            Self::West => (0, -1),
        }
    }
}

/// The three agent actions, ordered `Forward < TurnLeft < TurnRight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Forward = 0,
    TurnLeft = 1,
    TurnRight = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Self::Forward, Self::TurnLeft, Self::TurnRight];
    pub const COUNT: usize = 3;

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentPose {
    pub orientation: Orientation,
    pub row: usize,
    pub col: usize,
}

impl AgentPose {
    pub fn new(orientation: Orientation, row: usize, col: usize) -> Self {
        Self {
            orientation,
            row,
            col,
        }
    }
}

impl fmt::Display for AgentPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?},({},{}))", self.orientation, self.row, self.col)
    }
}

/// Binary occupancy grid. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MapDesign {
    rows: usize,
    cols: usize,
    free: Vec<bool>,
    seed: u64,
}

impl MapDesign {
    /// Builds a map from a row-major FREE mask, checking the border and
    /// non-emptiness invariants.
    pub fn from_free_mask(rows: usize, cols: usize, free: Vec<bool>, seed: u64) -> Result<Self> {
        if rows < 3 || cols < 3 {
            return Err(Error::InvalidMap(format!("{rows}x{cols} is too small")));
        }
        if free.len() != rows * cols {
            return Err(Error::InvalidMap(format!(
                "mask has {} cells, expected {}",
                free.len(),
                rows * cols
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                let border = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
                if border && free[r * cols + c] {
                    return Err(Error::InvalidMap(format!("border cell ({r},{c}) is free")));
                }
            }
        }
        if !free.iter().any(|&f| f) {
            return Err(Error::InvalidMap("no free cell".into()));
        }
        Ok(Self {
            rows,
            cols,
            free,
            seed,
        })
    }

    /// Parses `#`/`.` rows.
    pub fn from_rows(lines: &[&str]) -> Result<Self> {
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.chars().count());
        let mut free = Vec::with_capacity(rows * cols);
        for (i, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "ragged row".into(),
                });
            }
            for ch in line.chars() {
                free.push(match ch {
                    '.' => true,
                    '#' => false,
                    other => {
                        return Err(Error::Parse {
                            line: i + 1,
                            msg: format!("unexpected character {other:?}"),
                        })
                    }
                });
            }
        }
        Self::from_free_mask(rows, cols, free, 0)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Seed the maze was generated from (0 for hand-built maps).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Length of the depth observation vector, `max(M, N)`.
    pub fn max_dim(&self) -> usize {
        self.rows.max(self.cols)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of belief states, `4·M·N`.
    pub fn num_states(&self) -> usize {
        ORIENTATIONS * self.cells()
    }

    pub fn is_free(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols && self.free[row * self.cols + col]
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }

    pub fn free_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.cells())
            .filter(|&i| self.free[i])
            .map(move |i| (i / self.cols, i % self.cols))
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    /// Flat state index `o·M·N + r·N + c`, shared by every tensor over states.
    pub fn state_index(&self, pose: AgentPose) -> usize {
        pose.orientation.index() * self.cells() + pose.row * self.cols + pose.col
    }

    pub fn pose_of(&self, index: usize) -> AgentPose {
        let cells = self.cells();
        let cell = index % cells;
        AgentPose::new(
            Orientation::from_index(index / cells),
            cell / self.cols,
            cell % self.cols,
        )
    }

    pub fn is_valid_pose(&self, pose: AgentPose) -> bool {
        self.is_free(pose.row, pose.col)
    }

    /// Neighbor of `(row, col)` along `o`; `None` when it is off the grid.
    pub fn neighbor(&self, row: usize, col: usize, o: Orientation) -> Option<(usize, usize)> {
        let (dr, dc) = o.delta();
        let r = row.checked_add_signed(dr)?;
        let c = col.checked_add_signed(dc)?;
        (r < self.rows && c < self.cols).then_some((r, c))
    }

    /// Serializes as a `maze <M> <N> <seed>` header followed by `#`/`.` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("maze {} {} {}\n", self.rows, self.cols, self.seed);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.is_free(r, c) { '.' } else { '#' });
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MapDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Generates a perfect maze with Kruskal's algorithm.
///
/// Rooms sit at odd `(row, col)`; the wall cell between two orthogonally
/// adjacent rooms is opened when the edge joins two components. Edges are
/// visited in an order shuffled by a generator seeded from `seed`.
pub fn generate_maze(rows: usize, cols: usize, seed: u64) -> Result<MapDesign> {
    if rows < 7 || cols < 7 || rows.is_multiple_of(2) || cols.is_multiple_of(2) {
        return Err(Error::MazeDimensions { rows, cols });
    }
    let room_rows = (rows - 1) / 2;
    let room_cols = (cols - 1) / 2;
    let room = |i: usize, j: usize| i * room_cols + j;

    let mut edges = Vec::with_capacity(2 * room_rows * room_cols);
    for i in 0..room_rows {
        for j in 0..room_cols {
            if j + 1 < room_cols {
                edges.push((room(i, j), room(i, j + 1)));
            }
            if i + 1 < room_rows {
                edges.push((room(i, j), room(i + 1, j)));
            }
        }
    }
    let mut rng = rng::seeded(seed);
    edges.shuffle(&mut rng);

    let mut free = vec![false; rows * cols];
    for i in 0..room_rows {
        for j in 0..room_cols {
            free[(2 * i + 1) * cols + 2 * j + 1] = true;
        }
    }
    let mut sets = UnionFind::<usize>::new(room_rows * room_cols);
    for (a, b) in edges {
        if sets.union(a, b) {
            let (ra, ca) = (2 * (a / room_cols) + 1, 2 * (a % room_cols) + 1);
            let (rb, cb) = (2 * (b / room_cols) + 1, 2 * (b % room_cols) + 1);
            free[((ra + rb) / 2) * cols + (ca + cb) / 2] = true;
        }
    }
    MapDesign::from_free_mask(rows, cols, free, seed)
}

/// Samples a pose uniformly over FREE cells × orientations.
pub fn sample_start_pose<R: Rng + ?Sized>(map: &MapDesign, rng: &mut R) -> AgentPose {
    let cells: Vec<(usize, usize)> = map.free_cells().collect();
    let k = rng.gen_range(0..cells.len() * ORIENTATIONS);
    let (row, col) = cells[k / ORIENTATIONS];
    AgentPose::new(Orientation::from_index(k % ORIENTATIONS), row, col)
}

/// Deterministic agent dynamics; a blocked forward move leaves the pose unchanged.
pub fn step(map: &MapDesign, pose: AgentPose, action: Action) -> AgentPose {
    match action {
        Action::TurnLeft => AgentPose {
            orientation: pose.orientation.left(),
            ..pose
        },
        Action::TurnRight => AgentPose {
            orientation: pose.orientation.right(),
            ..pose
        },
        Action::Forward => match map.neighbor(pose.row, pose.col, pose.orientation) {
            Some((row, col)) if map.is_free(row, col) => AgentPose { row, col, ..pose },
            _ => pose,
        },
    }
}

/// Number of FREE cells strictly ahead of the agent before the first obstacle.
pub fn observe_depth(map: &MapDesign, pose: AgentPose) -> usize {
    let mut depth = 0;
    let (mut r, mut c) = (pose.row, pose.col);
    while let Some((nr, nc)) = map.neighbor(r, c, pose.orientation) {
        if !map.is_free(nr, nc) {
            break;
        }
        depth += 1;
        r = nr;
        c = nc;
    }
    depth
}

/// One-hot depth feature of length `dim`.
pub fn observation_vector(depth: usize, dim: usize) -> Result<Vec<f64>> {
    if depth >= dim {
        return Err(Error::DepthOutOfRange { depth, dim });
    }
    let mut v = vec![0.0; dim];
    v[depth] = 1.0;
    Ok(v)
}

/// A maze read from a maze-set file, with the optional per-episode start seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeRecord {
    pub map: MapDesign,
    pub start_seed: Option<u64>,
}

/// Writes mazes separated by blank lines. A `start <seed>` line follows the
/// rows when the record carries a start seed.
pub fn write_maze_set(records: &[MazeRecord]) -> String {
    let mut out = String::new();
    for (i, rec) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&rec.map.to_text());
        if let Some(s) = rec.start_seed {
            out.push_str(&format!("start {s}\n"));
        }
    }
    out
}

pub fn parse_maze_set(text: &str) -> Result<Vec<MazeRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;
    let err = |line: usize, msg: &str| Error::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    while i < lines.len() {
        let line = lines[i].trim_end();
        if line.is_empty() {
            i += 1;
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "maze" {
            return Err(err(i, "expected `maze <M> <N> <seed>` header"));
        }
        let rows: usize = fields[1].parse().map_err(|_| err(i, "bad row count"))?;
        let cols: usize = fields[2].parse().map_err(|_| err(i, "bad column count"))?;
        let seed: u64 = fields[3].parse().map_err(|_| err(i, "bad seed"))?;
        if i + 1 + rows > lines.len() {
            return Err(err(i, "truncated maze"));
        }
        let body: Vec<&str> = lines[i + 1..i + 1 + rows]
            .iter()
            .map(|l| l.trim_end())
            .collect();
        if body.iter().any(|l| l.chars().count() != cols) {
            return Err(err(i, "row width does not match header"));
        }
        let parsed = MapDesign::from_rows(&body).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line: line + i + 1,
                msg,
            },
            other => other,
        })?;
        let map = MapDesign { seed, ..parsed };
        i += 1 + rows;
        let mut start_seed = None;
        if let Some(next) = lines.get(i) {
            let f: Vec<&str> = next.split_whitespace().collect();
            if f.first() == Some(&"start") {
                if f.len() != 2 {
                    return Err(err(i, "expected `start <seed>`"));
                }
                start_seed = Some(f[1].parse().map_err(|_| err(i, "bad start seed"))?);
                i += 1;
            }
        }
        records.push(MazeRecord { map, start_seed });
    }
    Ok(records)
}

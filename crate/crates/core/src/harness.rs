//! Experiment orchestration: seeded test sets, method evaluation, result
//! tables, belief rendering and `key=value` configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anl::{self, ActionSelection, Episode, PolicyNet, TrainConfig};
use crate::baselines::{run_aml_traced, run_markov_traced, AmlParams, Conditioning, Memo};
use crate::bayes::{entropy, BeliefMap};
use crate::error::{Error, Result};
use crate::gridworld::{
    generate_maze, parse_maze_set, sample_start_pose, write_maze_set, AgentPose, MapDesign,
    MazeRecord, ORIENTATIONS,
};
use crate::neuralnet::ParamStore;
use crate::perception::DepthTable;
use crate::rng;

const START_DOMAIN: u64 = 0x57A27;

/// Episode lengths evaluated for each map size by default.
pub fn default_lengths(size: usize) -> Vec<usize> {
    match size {
        7 => vec![15, 30],
        15 => vec![20, 40],
        21 => vec![30, 60],
        n => vec![n + 8, 2 * (n + 8)],
    }
}

pub const DEFAULT_SIZES: [usize; 3] = [7, 15, 21];

/// Held-out mazes with per-episode start seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub records: Vec<MazeRecord>,
}

/// `count` mazes of `size × size` from the test seed domain (disjoint from
/// every training stream), each with its own start seed.
pub fn build_test_set(count: usize, size: usize, seed: u64) -> Result<TestSet> {
    let records = (0..count as u64)
        .map(|i| {
            Ok(MazeRecord {
                map: generate_maze(size, size, rng::test_maze_seed(seed, i))?,
                start_seed: Some(rng::derive_seed(seed, START_DOMAIN, i)),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TestSet { records })
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Map size shared by every maze, if uniform and square.
    pub fn map_size(&self) -> Option<usize> {
        let first = self.records.first()?;
        let n = first.map.rows();
        self.records
            .iter()
            .all(|r| r.map.rows() == n && r.map.cols() == n)
            .then_some(n)
    }

    pub fn truncated(&self, count: usize) -> TestSet {
        TestSet {
            records: self.records.iter().take(count).cloned().collect(),
        }
    }

    pub fn to_text(&self) -> String {
        write_maze_set(&self.records)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let records = parse_maze_set(text)?;
        if let Some(i) = records.iter().position(|r| r.start_seed.is_none()) {
            return Err(Error::Config(format!(
                "test-set maze {i} has no `start` line"
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                e.into()
            }
        })?;
        Self::from_text(&text)
    }

    /// Episode RNG for entry `i`; its first draw is the start pose.
    fn episode_rng(&self, i: usize) -> rng::Rng {
        rng::seeded(self.records[i].start_seed.expect("validated on load"))
    }

    pub fn start_pose(&self, i: usize) -> AgentPose {
        sample_start_pose(&self.records[i].map, &mut self.episode_rng(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Markov,
    Aml {
        name: String,
        params: AmlParams,
    },
    Anl {
        checkpoint: PathBuf,
        selection: ActionSelection,
    },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Markov => "markov",
            Method::Aml { name, .. } => name,
            Method::Anl { .. } => "anl",
        }
    }

    /// `markov`, `aml-fast`, `aml-slow`, or `anl` (which needs a checkpoint).
    pub fn parse(name: &str, checkpoint: Option<&Path>) -> Result<Self> {
        match name {
            "markov" => Ok(Method::Markov),
            "aml-fast" => Ok(Method::Aml {
                name: name.into(),
                params: AmlParams::fast(),
            }),
            "aml-slow" => Ok(Method::Aml {
                name: name.into(),
                params: AmlParams::slow(),
            }),
            "anl" => match checkpoint {
                Some(p) => Ok(Method::Anl {
                    checkpoint: p.to_path_buf(),
                    selection: ActionSelection::Sample,
                }),
                None => Err(Error::Config("method anl needs a checkpoint".into())),
            },
            other => Err(Error::Config(format!(
                "unknown method `{other}` (markov, aml-fast, aml-slow, anl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub maze_seed: u64,
    pub start_orientation: usize,
    pub start_row: usize,
    pub start_col: usize,
    pub correct: bool,
    pub final_belief_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub map_size: usize,
    pub episode_len: usize,
    pub episodes: usize,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub row: ResultRow,
    pub episodes: Vec<EpisodeRecord>,
}

enum Runner {
    Markov,
    Aml(AmlParams),
    Anl {
        net: PolicyNet,
        params: ParamStore<f32>,
        selection: ActionSelection,
    },
}

impl Runner {
    fn load(method: &Method, map_size: usize, episode_len: usize) -> Result<Self> {
        Ok(match method {
            Method::Markov => Runner::Markov,
            Method::Aml { params, .. } => {
                params.validate()?;
                Runner::Aml(*params)
            }
            Method::Anl {
                checkpoint,
                selection,
            } => {
                let (net, params, _, _) = anl::load_checkpoint(checkpoint)?;
                let c = net.config();
                if c.rows != map_size || c.cols != map_size {
                    return Err(Error::Config(format!(
                        "checkpoint is for {}x{} mazes, test set is {map_size}x{map_size}",
                        c.rows, c.cols
                    )));
                }
                if episode_len > c.episode_len {
                    return Err(Error::Config(format!(
                        "checkpoint covers episodes up to {} steps, asked for {episode_len}",
                        c.episode_len
                    )));
                }
                Runner::Anl {
                    net,
                    params,
                    selection: *selection,
                }
            }
        })
    }

    fn run(
        &self,
        map: &MapDesign,
        table: &DepthTable,
        pose: AgentPose,
        len: usize,
        rng: &mut rng::Rng,
        trace: &mut dyn FnMut(&BeliefMap, AgentPose),
    ) -> Result<bool> {
        match self {
            Runner::Markov => Ok(run_markov_traced(map, table, pose, len, rng, trace)?.correct),
            Runner::Aml(p) => {
                Ok(run_aml_traced(map, table, pose, len, p, Memo::On, rng, trace)?.correct)
            }
            Runner::Anl {
                net,
                params,
                selection,
            } => {
                let mut ep = Episode::start(map, table, pose, len, net.config().history_len)?;
                trace(ep.belief(), ep.pose());
                while !ep.is_done() {
                    let probs = net.forward(params, &ep.input()?)?.probs;
                    ep.advance(anl::select_action(&probs, *selection, rng)?)?;
                    trace(ep.belief(), ep.pose());
                }
                Ok(ep.correct())
            }
        }
    }
}

/// Runs `method` on every maze of `set`. Episodes are independent (own RNG
/// per test-set entry), so results do not depend on `workers`; wall time
/// covers the episode loop only, not loading.
pub fn evaluate(
    method: &Method,
    set: &TestSet,
    episode_len: usize,
    workers: usize,
) -> Result<Evaluation> {
    let size = set
        .map_size()
        .ok_or_else(|| Error::Config("test set is empty or mixes map sizes".into()))?;
    let runner = Runner::load(method, size, episode_len)?;
    let workers = workers.clamp(1, set.len().max(1));
    let start = Instant::now();
    let run_one = |i: usize| -> Result<EpisodeRecord> {
        let rec = &set.records[i];
        let table = DepthTable::build(&rec.map);
        let mut r = set.episode_rng(i);
        let pose = sample_start_pose(&rec.map, &mut r);
        let mut last = None;
        let correct = runner.run(&rec.map, &table, pose, episode_len, &mut r, &mut |b, _| {
            last = Some(entropy(b))
        })?;
        Ok(EpisodeRecord {
            index: i,
            maze_seed: rec.map.seed(),
            start_orientation: pose.orientation.index(),
            start_row: pose.row,
            start_col: pose.col,
            correct,
            final_belief_entropy: last.unwrap_or(f64::NAN),
        })
    };
    let mut episodes: Vec<EpisodeRecord> = if workers == 1 {
        (0..set.len()).map(run_one).collect::<Result<_>>()?
    } else {
        let chunks: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_one = &run_one;
                    scope.spawn(move || {
                        (w..set.len())
                            .step_by(workers)
                            .map(run_one)
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Worker("evaluation worker panicked".into())))
                })
                .collect()
        });
        let mut all = Vec::with_capacity(set.len());
        for c in chunks {
            all.extend(c?);
        }
        all
    };
    let wall = start.elapsed().as_secs_f64();
    episodes.sort_by_key(|e| e.index);
    let correct = episodes.iter().filter(|e| e.correct).count();
    let row = ResultRow {
        method: method.name().to_string(),
        map_size: size,
        episode_len,
        episodes: episodes.len(),
        accuracy: if episodes.is_empty() {
            0.0
        } else {
            correct as f64 / episodes.len() as f64
        },
        wall_time_s: wall,
    };
    Ok(Evaluation { row, episodes })
}

/// Beliefs after every observation of test-set episode `index`.
pub fn trace_episode(
    method: &Method,
    set: &TestSet,
    index: usize,
    episode_len: usize,
) -> Result<Vec<(BeliefMap, AgentPose)>> {
    let size = set
        .map_size()
        .ok_or_else(|| Error::Config("test set is empty or mixes map sizes".into()))?;
    let rec = set.records.get(index).ok_or(Error::IndexOutOfRange {
        index,
        size: set.len(),
    })?;
    let runner = Runner::load(method, size, episode_len)?;
    let table = DepthTable::build(&rec.map);
    let mut r = set.episode_rng(index);
    let pose = sample_start_pose(&rec.map, &mut r);
    let mut frames = Vec::new();
    runner.run(&rec.map, &table, pose, episode_len, &mut r, &mut |b, p| {
        frames.push((b.clone(), p))
    })?;
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()
            .map_err(|e| Error::Config(format!("results CSV: {e}")))?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Methods as rows, `size/length` cells as columns, accuracy and time
    /// per cell.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<(usize, usize)> = self
            .rows
            .iter()
            .map(|r| (r.map_size, r.episode_len))
            .collect();
        cells.sort_unstable();
        cells.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let lookup: BTreeMap<(&str, usize, usize), &ResultRow> = self
            .rows
            .iter()
            .map(|r| ((r.method.as_str(), r.map_size, r.episode_len), r))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<10} {:<5}", "method", "");
        for (m, l) in &cells {
            let _ = write!(out, " {:>10}", format!("{m}x{m}/{l}"));
        }
        out.push('\n');
        for method in methods {
            for (label, acc) in [("acc", true), ("time(s)", false)] {
                let _ = write!(out, "{:<10} {:<7}", if acc { method } else { "" }, label);
                for &(m, l) in &cells {
                    let cell = match lookup.get(&(method, m, l)) {
                        Some(r) if acc => format!("{:.3}", r.accuracy),
                        Some(r) => format!("{:.2}", r.wall_time_s),
                        None => "-".into(),
                    };
                    let _ = write!(out, " {cell:>10}");
                }
                out.push('\n');
            }
        }
        out
    }
}

fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("CSV: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn episodes_to_csv(episodes: &[EpisodeRecord]) -> Result<String> {
    rows_to_csv(episodes)
}

/// RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub const CELL_PX: usize = 8;
pub const GAP_PX: usize = 4;
pub const WALL_RGB: [u8; 3] = [40, 40, 120];
pub const BACKGROUND_RGB: [u8; 3] = [255, 255, 255];
pub const MARKER_RGB: [u8; 3] = [220, 0, 0];

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![BACKGROUND_RGB; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    fn fill(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, rgb);
            }
        }
    }

    fn blit(&mut self, other: &Image, x0: usize, y0: usize) {
        for y in 0..other.height {
            for x in 0..other.width {
                self.set(x0 + x, y0 + y, other.get(x, y));
            }
        }
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Gray level of a free cell: white at zero probability, black at the
/// largest belief entry.
pub fn shade(p: f64, max: f64) -> u8 {
    if max <= 0.0 {
        return 255;
    }
    255 - (255.0 * (p / max).clamp(0.0, 1.0)).round() as u8
}

/// One panel per orientation (N, E, S, W) left to right, separated by
/// `GAP_PX` white columns; each cell is `CELL_PX` square. The true pose, if
/// given, gets a one-pixel red frame in its orientation's panel.
pub fn render_belief(bel: &BeliefMap, map: &MapDesign, true_pose: Option<AgentPose>) -> Image {
    let (m, n) = (map.rows(), map.cols());
    let panel_w = n * CELL_PX;
    let mut img = Image::new(
        ORIENTATIONS * panel_w + (ORIENTATIONS - 1) * GAP_PX,
        m * CELL_PX,
    );
    let max = bel.max_value();
    for o in 0..ORIENTATIONS {
        let x0 = o * (panel_w + GAP_PX);
        let plane = bel.plane(o);
        for r in 0..m {
            for c in 0..n {
                let rgb = if map.is_free(r, c) {
                    let g = shade(plane[r * n + c], max);
                    [g, g, g]
                } else {
                    WALL_RGB
                };
                img.fill(x0 + c * CELL_PX, r * CELL_PX, CELL_PX, CELL_PX, rgb);
            }
        }
    }
    if let Some(p) = true_pose {
        let x0 = p.orientation.index() * (panel_w + GAP_PX) + p.col * CELL_PX;
        let y0 = p.row * CELL_PX;
        for k in 0..CELL_PX {
            img.set(x0 + k, y0, MARKER_RGB);
            img.set(x0 + k, y0 + CELL_PX - 1, MARKER_RGB);
            img.set(x0, y0 + k, MARKER_RGB);
            img.set(x0 + CELL_PX - 1, y0 + k, MARKER_RGB);
        }
    }
    img
}

/// Frames stacked top to bottom with `GAP_PX` white rows between them.
pub fn render_strip(frames: &[(BeliefMap, AgentPose)], map: &MapDesign) -> Image {
    let panels: Vec<Image> = frames
        .iter()
        .map(|(b, p)| render_belief(b, map, Some(*p)))
        .collect();
    let Some(first) = panels.first() else {
        return Image::new(0, 0);
    };
    let (w, h) = (first.width, first.height);
    let mut img = Image::new(w, panels.len() * h + (panels.len() - 1) * GAP_PX);
    for (i, p) in panels.iter().enumerate() {
        img.blit(p, 0, i * (h + GAP_PX));
    }
    img
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

/// Settings for `eval` and `bench`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: String,
    pub map_size: usize,
    pub episode_len: Option<usize>,
    pub test_seed: u64,
    pub episodes: usize,
    pub workers: usize,
    /// AML parameter overrides applied on top of the chosen preset.
    pub aml_overrides: Vec<(String, String)>,
    pub checkpoint: Option<PathBuf>,
    pub greedy: bool,
    pub testset: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: "markov".into(),
            map_size: 7,
            episode_len: None,
            test_seed: 7,
            episodes: 1000,
            workers: 1,
            aml_overrides: Vec::new(),
            checkpoint: None,
            greedy: false,
            testset: None,
        }
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = value.to_string(),
            "map_size" => self.map_size = parse_value(key, value)?,
            "episode_len" => self.episode_len = parse_optional(key, value)?,
            "test_seed" | "seed" => self.test_seed = parse_value(key, value)?,
            "episodes" => self.episodes = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "greedy" => self.greedy = parse_value(key, value)?,
            "testset" => self.testset = Some(PathBuf::from(value)),
            "n_l" | "n_g" | "n_m" | "belief_floor" | "conditioning" => {
                set_aml_key(&mut AmlParams::fast(), key, value)?;
                self.aml_overrides
                    .push((key.to_string(), value.to_string()));
            }
            _ => return Err(Error::Config(format!("unknown experiment key `{key}`"))),
        }
        Ok(())
    }

    pub fn resolve_method(&self) -> Result<Method> {
        let mut method = Method::parse(&self.method, self.checkpoint.as_deref())?;
        match &mut method {
            Method::Aml { params, .. } => {
                for (k, v) in &self.aml_overrides {
                    set_aml_key(params, k, v)?;
                }
                params.validate()?;
            }
            Method::Anl { selection, .. } if self.greedy => *selection = ActionSelection::Greedy,
            _ => {}
        }
        Ok(method)
    }
}

fn set_aml_key(params: &mut AmlParams, key: &str, value: &str) -> Result<()> {
    match key {
        "n_l" => params.n_l = parse_value(key, value)?,
        "n_g" => params.n_g = parse_value(key, value)?,
        "n_m" => params.n_m = parse_value(key, value)?,
        "belief_floor" => params.belief_floor = parse_value(key, value)?,
        "conditioning" => {
            params.conditioning = match value {
                "final" => Conditioning::FinalObservation,
                "all" => Conditioning::AllObservations,
                _ => {
                    return Err(Error::Config(format!(
                        "conditioning must be `final` or `all`, got `{value}`"
                    )))
                }
            }
        }
        _ => return Err(Error::Config(format!("unknown AML key `{key}`"))),
    }
    Ok(())
}

/// Applies one `key=value` pair to a training configuration.
pub fn set_train_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "lr" => config.lr = parse_value(key, value)?,
        "workers" => config.workers = parse_value(key, value)?,
        "unroll" => config.unroll = parse_value(key, value)?,
        "entropy_coef" => config.entropy_coef = parse_value(key, value)?,
        "gamma" => config.gamma = parse_value(key, value)?,
        "clip_norm" => config.clip_norm = parse_value(key, value)?,
        "gae_lambda" => config.gae_lambda = parse_value(key, value)?,
        "value_coef" => config.value_coef = parse_value(key, value)?,
        "map_size" => config.map_size = parse_value(key, value)?,
        "episode_len" => config.episode_len = parse_value(key, value)?,
        "time_budget_s" => config.time_budget_s = parse_optional(key, value)?,
        "step_budget" => config.step_budget = parse_optional(key, value)?,
        "seed" => config.seed = parse_value(key, value)?,
        "eval_every" => config.eval_every = parse_value(key, value)?,
        "eval_episodes" => config.eval_episodes = parse_value(key, value)?,
        "log_every" => config.log_every = parse_value(key, value)?,
        _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
    }
    Ok(())
}

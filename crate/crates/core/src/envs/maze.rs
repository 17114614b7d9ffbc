use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::{Environment, Step};

pub const DT: f64 = 0.1;
pub const ACCEL_SCALE: f64 = 10.0;
pub const V_MAX: f64 = 2.0;
pub const SUCCESS_RADIUS: f64 = 0.5;
const START_JITTER: f64 = 0.2;

/// Shipped layouts: name, grid text, episode cap.
pub const LAYOUTS: &[(&str, &str, usize)] = &[
    ("corridor-S", include_str!("../../layouts/corridor-s.txt"), 300),
    ("junction-T", include_str!("../../layouts/junction-t.txt"), 120),
];

pub fn layout_names() -> Vec<&'static str> {
    LAYOUTS.iter().map(|l| l.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Free,
    Start,
    Goal,
}

/// Grid cell as (row, col); row 0 is the top line of the layout.
pub type CellIndex = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    pub name: String,
    pub cells: Vec<Vec<Cell>>,
    pub episode_cap: usize,
}

impl MazeSpec {
    pub fn parse(name: &str, text: &str, episode_cap: usize) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let bad = |msg: String| Err(Error::Config(format!("layout {name}: {msg}")));
        if lines.len() < 3 {
            return bad("needs at least 3 rows".into());
        }
        let width = lines[0].chars().count();
        let mut cells = Vec::with_capacity(lines.len());
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return bad(format!("row {r} has width {}, expected {width}", line.chars().count()));
            }
            let mut row = Vec::with_capacity(width);
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Free,
                    'S' => Cell::Start,
                    'G' => Cell::Goal,
                    other => return bad(format!("unexpected character {other:?} at ({r}, {c})")),
                };
                let border = r == 0 || c == 0 || r + 1 == lines.len() || c + 1 == width;
                if border && cell != Cell::Wall {
                    return bad(format!("boundary cell ({r}, {c}) is not a wall"));
                }
                row.push(cell);
            }
            cells.push(row);
        }
        let spec = MazeSpec { name: name.to_string(), cells, episode_cap };
        if spec.free_cells().is_empty() {
            return bad("no free cells".into());
        }
        if episode_cap == 0 {
            return bad("episode cap must be positive".into());
        }
        Ok(spec)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (n, text, cap) = LAYOUTS.iter().find(|l| l.0.eq_ignore_ascii_case(name)).ok_or_else(|| {
            Error::Config(format!("unknown layout {name:?}; valid layouts: {}", layout_names().join(", ")))
        })?;
        MazeSpec::parse(n, text, *cap)
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cell(&self, (r, c): CellIndex) -> Cell {
        self.cells[r][c]
    }

    pub fn is_free(&self, (r, c): CellIndex) -> bool {
        r < self.rows() && c < self.cols() && self.cells[r][c] != Cell::Wall
    }

    /// Cell containing a continuous point, or `None` outside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<CellIndex> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (r, c) = (y.floor() as usize, x.floor() as usize);
        (r < self.rows() && c < self.cols()).then_some((r, c))
    }

    pub fn is_free_point(&self, x: f64, y: f64) -> bool {
        self.cell_at(x, y).is_some_and(|cell| self.is_free(cell))
    }

    pub fn free_cells(&self) -> Vec<CellIndex> {
        self.cells_where(|c| c != Cell::Wall)
    }

    pub fn start_cells(&self) -> Vec<CellIndex> {
        self.cells_where(|c| c == Cell::Start)
    }

    pub fn goal_cells(&self) -> Vec<CellIndex> {
        self.cells_where(|c| c == Cell::Goal)
    }

    fn cells_where(&self, pred: impl Fn(Cell) -> bool) -> Vec<CellIndex> {
        let mut out = Vec::new();
        for (r, row) in self.cells.iter().enumerate() {
            for (c, &cell) in row.iter().enumerate() {
                if pred(cell) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Free cells with exactly one free neighbor.
    pub fn dead_ends(&self) -> Vec<CellIndex> {
        self.free_cells().into_iter().filter(|&cell| self.neighbors(cell).count() == 1).collect()
    }

    /// Free neighbors in N, E, S, W order.
    pub fn neighbors(&self, (r, c): CellIndex) -> impl Iterator<Item = CellIndex> + '_ {
        let candidates = [
            r.checked_sub(1).map(|r| (r, c)),
            Some((r, c + 1)),
            Some((r + 1, c)),
            c.checked_sub(1).map(|c| (r, c)),
        ];
        candidates.into_iter().flatten().filter(|&cell| self.is_free(cell))
    }

    /// Evaluation goal: center of the first goal cell in reading order.
    pub fn eval_goal(&self) -> Result<[f64; 2]> {
        self.goal_cells()
            .first()
            .map(|&cell| cell_center(cell))
            .ok_or_else(|| Error::Config(format!("layout {} has no goal cell", self.name)))
    }

    /// Breadth-first distances from `from` to every cell (`None` if unreachable).
    pub fn bfs_distances(&self, from: CellIndex) -> Vec<Vec<Option<usize>>> {
        let mut dist = vec![vec![None; self.cols()]; self.rows()];
        if !self.is_free(from) {
            return dist;
        }
        dist[from.0][from.1] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.0][cell.1].unwrap_or(0);
            for n in self.neighbors(cell) {
                if dist[n.0][n.1].is_none() {
                    dist[n.0][n.1] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

pub fn cell_center((r, c): CellIndex) -> [f64; 2] {
    [c as f64 + 0.5, r as f64 + 0.5]
}

/// Shortest cell path from `start` to `goal` as cell-center waypoints,
/// including both endpoints. Ties follow the N, E, S, W neighbor order.
pub fn plan_waypoints(spec: &MazeSpec, start: CellIndex, goal: CellIndex) -> Result<Vec<[f64; 2]>> {
    if !spec.is_free(start) || !spec.is_free(goal) {
        return Err(Error::Config(format!("waypoint endpoints {start:?} -> {goal:?} must be free cells")));
    }
    let mut parent = vec![vec![None; spec.cols()]; spec.rows()];
    parent[start.0][start.1] = Some(start);
    let mut queue = VecDeque::from([start]);
    while let Some(cell) = queue.pop_front() {
        if cell == goal {
            break;
        }
        for n in spec.neighbors(cell) {
            if parent[n.0][n.1].is_none() {
                parent[n.0][n.1] = Some(cell);
                queue.push_back(n);
            }
        }
    }
    if parent[goal.0][goal.1].is_none() {
        return Err(Error::Config(format!("cells {start:?} and {goal:?} are not connected")));
    }
    let mut path = vec![goal];
    let mut cur = goal;
    while cur != start {
        cur = parent[cur.0][cur.1].expect("visited cell has a parent");
        path.push(cur);
    }
    path.reverse();
    Ok(path.into_iter().map(cell_center).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl MazeState {
    pub fn at(x: f64, y: f64) -> Self {
        MazeState { x, y, vx: 0.0, vy: 0.0 }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.y, self.vx, self.vy]
    }

    pub fn position(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Rest state near the center of a random start cell (any free cell when the
/// layout has no start region).
pub fn maze_reset(spec: &MazeSpec, rng: &mut RngStream) -> MazeState {
    let mut starts = spec.start_cells();
    if starts.is_empty() {
        starts = spec.free_cells();
    }
    let [cx, cy] = cell_center(starts[rng.index(starts.len())]);
    MazeState::at(cx + rng.uniform_range(-START_JITTER, START_JITTER), cy + rng.uniform_range(-START_JITTER, START_JITTER))
}

/// Point-mass dynamics with per-axis wall collision (x first, then y).
pub fn maze_dynamics(spec: &MazeSpec, s: MazeState, action: [f64; 2]) -> MazeState {
    let ax = action[0].clamp(-1.0, 1.0);
    let ay = action[1].clamp(-1.0, 1.0);
    let mut vx = (s.vx + ax * DT * ACCEL_SCALE).clamp(-V_MAX, V_MAX);
    let mut vy = (s.vy + ay * DT * ACCEL_SCALE).clamp(-V_MAX, V_MAX);
    let mut x = s.x + vx * DT;
    if !spec.is_free_point(x, s.y) {
        x = s.x;
        vx = 0.0;
    }
    let mut y = s.y + vy * DT;
    if !spec.is_free_point(x, y) {
        y = s.y;
        vy = 0.0;
    }
    MazeState { x, y, vx, vy }
}

pub fn reached(pos: [f64; 2], goal: [f64; 2]) -> bool {
    (pos[0] - goal[0]).hypot(pos[1] - goal[1]) <= SUCCESS_RADIUS
}

/// One transition; `steps_taken` counts steps before this one.
pub fn maze_step(spec: &MazeSpec, goal: [f64; 2], s: MazeState, action: [f64; 2], steps_taken: usize) -> (MazeState, Step) {
    let next = maze_dynamics(spec, s, action);
    let success = reached(next.position(), goal);
    let step = Step {
        state: next.to_vec(),
        reward: if success { 1.0 } else { 0.0 },
        done: success || steps_taken + 1 >= spec.episode_cap,
        success,
    };
    (next, step)
}

/// Episode wrapper around the maze dynamics with a fixed goal.
#[derive(Debug, Clone)]
pub struct MazeEnv {
    pub spec: MazeSpec,
    pub goal: [f64; 2],
    state: MazeState,
    steps: usize,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec, goal: [f64; 2]) -> Self {
        let state = MazeState::at(goal[0], goal[1]);
        MazeEnv { spec, goal, state, steps: 0 }
    }

    pub fn state(&self) -> MazeState {
        self.state
    }

    pub fn set_state(&mut self, state: MazeState) {
        self.state = state;
        self.steps = 0;
    }
}

impl Environment for MazeEnv {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn episode_cap(&self) -> usize {
        self.spec.episode_cap
    }

    fn reset(&mut self, rng: &mut RngStream) -> Vec<f64> {
        self.set_state(maze_reset(&self.spec, rng));
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let (next, step) = maze_step(&self.spec, self.goal, self.state, [action[0], action[1]], self.steps);
        self.state = next;
        self.steps += 1;
        step
    }
}

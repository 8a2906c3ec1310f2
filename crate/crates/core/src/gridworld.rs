//! Seeded symbolic gridworld: a player, static terrain, and creatures that
//! random-walk at most one cell per step.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ItcError, Result};
use crate::tokenizer::{Image, PatchShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Symbol {
    Floor = 0,
    Wall = 1,
    Goal = 2,
    Player = 3,
    Creature = 4,
}

impl Symbol {
    pub const ALL: [Symbol; 5] = [Symbol::Floor, Symbol::Wall, Symbol::Goal, Symbol::Player, Symbol::Creature];

    pub fn name(self) -> &'static str {
        match self {
            Symbol::Floor => "floor",
            Symbol::Wall => "wall",
            Symbol::Goal => "goal",
            Symbol::Player => "player",
            Symbol::Creature => "creature",
        }
    }

    pub fn glyph(self) -> char {
        match self {
            Symbol::Floor => '.',
            Symbol::Wall => '#',
            Symbol::Goal => 'G',
            Symbol::Player => '@',
            Symbol::Creature => 'c',
        }
    }

    pub fn from_index(i: usize) -> Option<Symbol> {
        Symbol::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Noop = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Noop];
    pub const COUNT: usize = 5;

    pub fn from_index(i: u32) -> Option<Action> {
        Action::ALL.get(i as usize).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Noop => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    /// Creatures placed in an episode that has creatures.
    pub num_creatures: usize,
    /// Probability that an episode has creatures at all.
    pub creature_episode_prob: f64,
    /// Per-step probability that a creature attempts a move.
    pub creature_move_prob: f64,
    /// Wall cells placed inside the border.
    pub interior_walls: usize,
    pub max_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            height: 6,
            width: 6,
            num_creatures: 2,
            creature_episode_prob: 0.5,
            creature_move_prob: 0.4,
            interior_walls: 1,
            max_steps: 100,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(ItcError::Config("grid must be at least 3x3".into()));
        }
        let interior = (self.height - 2) * (self.width - 2);
        if self.num_creatures + self.interior_walls + 2 > interior {
            return Err(ItcError::Config("grid interior too small for its entities".into()));
        }
        if !(0.0..=1.0).contains(&self.creature_episode_prob) || !(0.0..=1.0).contains(&self.creature_move_prob) {
            return Err(ItcError::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.max_steps == 0 {
            return Err(ItcError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Patch shape for rendering: one cell per token, one-hot symbol channels.
    pub fn patch_shape(&self) -> PatchShape {
        PatchShape::new(1, 1, Symbol::ALL.len())
    }
}

/// `(row, col)` of a cell.
pub type Cell = (usize, usize);

#[derive(Debug, Clone)]
pub struct GridState {
    height: usize,
    width: usize,
    terrain: Vec<Symbol>,
    player: Cell,
    creatures: Vec<Cell>,
    steps: usize,
    max_steps: usize,
    move_prob: f64,
    rng: ChaCha8Rng,
}

impl GridState {
    /// Random layout for episode `episode` of a run seeded with `seed`.
    pub fn reset(cfg: &GridConfig, seed: u64, episode: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * episode);
        let (h, w) = (cfg.height, cfg.width);
        let mut terrain = vec![Symbol::Floor; h * w];
        for r in 0..h {
            for c in 0..w {
                if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                    terrain[r * w + c] = Symbol::Wall;
                }
            }
        }
        let mut free: Vec<Cell> = (1..h - 1).flat_map(|r| (1..w - 1).map(move |c| (r, c))).collect();
        let mut take = |rng: &mut ChaCha8Rng| free.swap_remove(rng.random_range(0..free.len()));
        let goal = take(&mut rng);
        terrain[goal.0 * w + goal.1] = Symbol::Goal;
        for _ in 0..cfg.interior_walls {
            let c = take(&mut rng);
            terrain[c.0 * w + c.1] = Symbol::Wall;
        }
        let player = take(&mut rng);
        let n_creatures = if rng.random_bool(cfg.creature_episode_prob) {
            cfg.num_creatures
        } else {
            0
        };
        let creatures = (0..n_creatures).map(|_| take(&mut rng)).collect();
        Ok(Self {
            height: h,
            width: w,
            terrain,
            player,
            creatures,
            steps: 0,
            max_steps: cfg.max_steps,
            move_prob: cfg.creature_move_prob,
            rng,
        })
    }

    /// Explicit layout; terrain given row-major, creatures and player on top.
    pub fn from_layout(
        height: usize,
        width: usize,
        terrain: Vec<Symbol>,
        player: Cell,
        creatures: Vec<Cell>,
        move_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        if terrain.len() != height * width
            || terrain.iter().any(|s| matches!(s, Symbol::Player | Symbol::Creature))
        {
            return Err(ItcError::Config("terrain must hold floor, wall and goal only".into()));
        }
        let state = Self {
            height,
            width,
            terrain,
            player,
            creatures,
            steps: 0,
            max_steps: 100,
            move_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if state.terrain_at(player) == Symbol::Wall
            || state.creatures.iter().any(|&c| state.terrain_at(c) != Symbol::Floor || c == player)
        {
            return Err(ItcError::Config("entities must stand on open cells".into()));
        }
        Ok(state)
    }

    pub fn player(&self) -> Cell {
        self.player
    }

    pub fn creatures(&self) -> &[Cell] {
        &self.creatures
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn terrain_at(&self, c: Cell) -> Symbol {
        self.terrain[c.0 * self.width + c.1]
    }

    fn offset(&self, c: Cell, d: (i64, i64)) -> Option<Cell> {
        let r = c.0 as i64 + d.0;
        let col = c.1 as i64 + d.1;
        (r >= 0 && col >= 0 && (r as usize) < self.height && (col as usize) < self.width).then_some((r as usize, col as usize))
    }

    /// Applies `action`; returns `(reward, done)`.
    pub fn step(&mut self, action: Action) -> (u8, bool) {
        self.steps += 1;
        if let Some(target) = self.offset(self.player, action.delta()) {
            let open = matches!(self.terrain_at(target), Symbol::Floor | Symbol::Goal);
            if open && !self.creatures.contains(&target) {
                self.player = target;
            }
        }
        let reached = self.terrain_at(self.player) == Symbol::Goal;

        for k in 0..self.creatures.len() {
            if !self.rng.random_bool(self.move_prob) {
                continue;
            }
            let here = self.creatures[k];
            let options: Vec<Cell> = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .into_iter()
                .filter_map(|d| self.offset(here, d))
                .filter(|&c| self.terrain_at(c) == Symbol::Floor && c != self.player && !self.creatures.contains(&c))
                .collect();
            if let Some(&dest) = options.choose(&mut self.rng) {
                self.creatures[k] = dest;
            }
        }

        let done = reached || self.steps >= self.max_steps;
        (u8::from(reached), done)
    }

    /// Composite symbol grid, row-major.
    pub fn symbols(&self) -> Vec<Symbol> {
        let mut grid = self.terrain.clone();
        for &(r, c) in &self.creatures {
            grid[r * self.width + c] = Symbol::Creature;
        }
        grid[self.player.0 * self.width + self.player.1] = Symbol::Player;
        grid
    }
}

/// One-hot `H x W x |alphabet|` rendering of a symbol grid.
pub fn render_image(height: usize, width: usize, symbols: &[Symbol]) -> Result<Image> {
    let c = Symbol::ALL.len();
    let mut data = vec![0.0f32; height * width * c];
    for (i, s) in symbols.iter().enumerate() {
        data[i * c + *s as usize] = 1.0;
    }
    Image::new(height, width, c, data)
}

/// Raw episode before tokenization.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub frames: Vec<Vec<Symbol>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<u8>,
    pub dones: Vec<bool>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Runs one episode of the uniform-random scripted policy.
pub fn run_episode(cfg: &GridConfig, seed: u64, episode: u64) -> Result<EpisodeRecord> {
    let mut state = GridState::reset(cfg, seed, episode)?;
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(2 * episode + 1);
    let mut rec = EpisodeRecord {
        frames: vec![state.symbols()],
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
    };
    loop {
        let action = Action::ALL[policy.random_range(0..Action::COUNT)];
        let (reward, done) = state.step(action);
        rec.frames.push(state.symbols());
        rec.actions.push(action);
        rec.rewards.push(reward);
        rec.dones.push(done);
        if done {
            return Ok(rec);
        }
    }
}

/// Collects `episodes` episodes; episode `e` depends only on `(seed, e)`.
pub fn collect(cfg: &GridConfig, episodes: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    (0..episodes as u64).map(|e| run_episode(cfg, seed, e)).collect()
}

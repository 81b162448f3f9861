use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }
}

/// Compass heading; also the order used to break shortest-path ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn from_index(i: usize) -> Heading {
        Self::ALL[i % 4]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn right(self) -> Heading {
        Self::from_index(self.index() + 1)
    }

    pub fn left(self) -> Heading {
        Self::from_index(self.index() + 3)
    }

    /// Unit step in grid coordinates (y grows southward).
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    /// Left-right reflection (East <-> West).
    pub fn mirrored(self) -> Heading {
        match self {
            Heading::East => Heading::West,
            Heading::West => Heading::East,
            h => h,
        }
    }

    pub fn as_char(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

/// Occupancy grid; `true` marks a wall.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    id: String,
    seed: Option<u64>,
}

impl GridMap {
    /// Build from explicit occupancy, enforcing wall borders and connectivity.
    pub fn from_walls(width: usize, height: usize, walls: Vec<bool>, id: impl Into<String>) -> Result<Self> {
        if walls.len() != width * height {
            return Err(Error::Invalid(format!(
                "occupancy has {} cells, expected {}x{}",
                walls.len(),
                width,
                height
            )));
        }
        let map = GridMap { width, height, walls, id: id.into(), seed: None };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        for x in 0..self.width {
            for y in [0, self.height - 1] {
                if !self.is_wall(Cell::new(x, y)) {
                    return Err(Error::Invalid(format!("border cell ({x},{y}) is free")));
                }
            }
        }
        for y in 0..self.height {
            for x in [0, self.width - 1] {
                if !self.is_wall(Cell::new(x, y)) {
                    return Err(Error::Invalid(format!("border cell ({x},{y}) is free")));
                }
            }
        }
        let free = self.free_cells();
        let first = *free.first().ok_or_else(|| Error::Invalid("map has no free cells".into()))?;
        if flood_fill(self, first).len() != free.len() {
            return Err(Error::Invalid(format!("free cells of map {} are not connected", self.id)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell_at(&self, i: usize) -> Cell {
        Cell::new(i % self.width, i / self.width)
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        c.x >= self.width || c.y >= self.height || self.walls[self.index(c)]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_wall(c)
    }

    /// Wall test for signed coordinates; anything outside the grid is a wall.
    pub fn is_wall_at(&self, x: isize, y: isize) -> bool {
        x < 0 || y < 0 || self.is_wall(Cell::new(x as usize, y as usize))
    }

    pub fn neighbor(&self, c: Cell, h: Heading) -> Option<Cell> {
        let (dx, dy) = h.delta();
        let (x, y) = (c.x as isize + dx, c.y as isize + dy);
        if self.is_wall_at(x, y) {
            None
        } else {
            Some(Cell::new(x as usize, y as usize))
        }
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.walls.len()).filter(|&i| !self.walls[i]).map(|i| self.cell_at(i)).collect()
    }

    /// Left-right reflection of the whole map.
    pub fn mirrored(&self) -> GridMap {
        let mut walls = vec![true; self.walls.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                walls[y * self.width + (self.width - 1 - x)] = self.walls[y * self.width + x];
            }
        }
        GridMap { width: self.width, height: self.height, walls, id: format!("{}-mirror", self.id), seed: self.seed }
    }

    pub fn mirror_cell(&self, c: Cell) -> Cell {
        Cell::new(self.width - 1 - c.x, c.y)
    }

    /// Text form: metadata header then one row per line (`#` wall, `.` free).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "id = {}", self.id).unwrap();
        match self.seed {
            Some(seed) => writeln!(s, "seed = {seed}").unwrap(),
            None => writeln!(s, "seed = none").unwrap(),
        }
        writeln!(s, "size = {}x{}", self.width, self.height).unwrap();
        writeln!(s, "---").unwrap();
        for y in 0..self.height {
            for x in 0..self.width {
                s.push(if self.walls[y * self.width + x] { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut id = None;
        let mut seed = None;
        for line in lines.by_ref() {
            if line == "---" {
                break;
            }
            match line.split_once(" = ") {
                Some(("id", v)) => id = Some(v.to_string()),
                Some(("seed", "none")) => {}
                Some(("seed", v)) => {
                    seed = Some(v.parse().map_err(|_| Error::Invalid(format!("bad map seed {v}")))?)
                }
                Some(("size", _)) => {}
                _ => return Err(Error::Invalid(format!("bad map header line: {line}"))),
            }
        }
        let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut walls = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Invalid(format!("map row {y} has length {}, expected {width}", row.len())));
            }
            for ch in row.chars() {
                walls.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::Invalid(format!("unknown map character {other:?}"))),
                });
            }
        }
        let mut map = GridMap::from_walls(width, height, walls, id.unwrap_or_else(|| "unnamed".into()))?;
        map.seed = seed;
        Ok(map)
    }
}

/// All free cells reachable from `start` over 4-connected moves.
pub fn flood_fill(map: &GridMap, start: Cell) -> Vec<Cell> {
    if map.is_wall(start) {
        return Vec::new();
    }
    let mut seen = vec![false; map.width() * map.height()];
    let mut out = Vec::new();
    let mut queue = VecDeque::from([start]);
    seen[map.index(start)] = true;
    while let Some(c) = queue.pop_front() {
        out.push(c);
        for h in Heading::ALL {
            if let Some(n) = map.neighbor(c, h) {
                if !seen[map.index(n)] {
                    seen[map.index(n)] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    out
}

/// Rooms carved at random, chained by L-shaped corridors.
pub fn generate_map(seed: u64, width: usize, height: usize, room_count: usize) -> Result<GridMap> {
    if width < 9 || height < 9 {
        return Err(Error::Invalid(format!("map must be at least 9x9, got {width}x{height}")));
    }
    if room_count == 0 {
        return Err(Error::Invalid("room_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walls = vec![true; width * height];
    let mut carve = |x: usize, y: usize| walls[y * width + x] = false;
    let max_w = (width / 3).max(3);
    let max_h = (height / 3).max(3);
    let mut centers = Vec::with_capacity(room_count);
    for _ in 0..room_count {
        let rw = rng.random_range(3..=max_w.min(width - 2));
        let rh = rng.random_range(3..=max_h.min(height - 2));
        let x0 = rng.random_range(1..=width - 1 - rw);
        let y0 = rng.random_range(1..=height - 1 - rh);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                carve(x, y);
            }
        }
        centers.push((x0 + rw / 2, y0 + rh / 2));
    }
    for pair in centers.windows(2) {
        let ((ax, ay), (bx, by)) = (pair[0], pair[1]);
        // the corner of the L is (bx, ay) or (ax, by)
        let (row, col) = if rng.random_bool(0.5) { (ay, bx) } else { (by, ax) };
        for x in ax.min(bx)..=ax.max(bx) {
            carve(x, row);
        }
        for y in ay.min(by)..=ay.max(by) {
            carve(col, y);
        }
    }
    let mut map = GridMap::from_walls(width, height, walls, format!("map-{seed}"))
        .map_err(|e| Error::Invalid(format!("generator produced an invalid map for seed {seed}: {e}")))?;
    map.seed = Some(seed);
    Ok(map)
}

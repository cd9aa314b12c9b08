use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

const MAX_ATTEMPTS: usize = 200;
pub const MAX_DENSITY: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

/// Occupancy grid; `y` grows northward, storage is row-major by `y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    pub occupancy: Vec<bool>,
    pub seed: u64,
}

/// Per-cell geodesic distances from one origin; `None` marks walls and
/// unreachable cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceField {
    width: usize,
    dist: Vec<Option<u32>>,
}

impl DistanceField {
    pub fn at(&self, c: Cell) -> Option<u32> {
        if c.x < 0 || c.y < 0 || c.x as usize >= self.width {
            return None;
        }
        self.dist.get(c.y as usize * self.width + c.x as usize).copied().flatten()
    }

    pub fn max(&self) -> u32 {
        self.dist.iter().flatten().copied().max().unwrap_or(0)
    }
}

impl GridMap {
    /// All-free interior with an occupied border.
    pub fn empty_room(width: usize, height: usize) -> Self {
        let mut occupancy = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                    occupancy[y * width + x] = true;
                }
            }
        }
        Self {
            width,
            height,
            occupancy,
            seed: 0,
        }
    }

    /// Builds a map from ASCII rows, top row = northmost; `#` is a wall.
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows[0].len();
        let mut occupancy = vec![false; width * height];
        for (r, line) in rows.iter().enumerate() {
            let y = height - 1 - r;
            for (x, ch) in line.chars().enumerate() {
                occupancy[y * width + x] = ch == '#';
            }
        }
        Self {
            width,
            height,
            occupancy,
            seed: 0,
        }
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    /// Out-of-bounds cells count as occupied.
    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.occupancy[c.y as usize * self.width + c.x as usize]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                let c = Cell::new(x, y);
                if self.is_free(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn neighbors(c: Cell) -> [Cell; 4] {
        [
            Cell::new(c.x, c.y + 1),
            Cell::new(c.x + 1, c.y),
            Cell::new(c.x, c.y - 1),
            Cell::new(c.x - 1, c.y),
        ]
    }

    /// BFS over 4-neighbors from `origin`.
    pub fn distance_field(&self, origin: Cell) -> Result<DistanceField, EnvError> {
        if !self.is_free(origin) {
            return Err(EnvError::Argument(format!("cell {origin:?} is not free")));
        }
        let mut dist = vec![None; self.width * self.height];
        let idx = |c: Cell| c.y as usize * self.width + c.x as usize;
        dist[idx(origin)] = Some(0);
        let mut queue = VecDeque::from([origin]);
        while let Some(c) = queue.pop_front() {
            let d = dist[idx(c)].expect("queued cells have a distance");
            for n in Self::neighbors(c) {
                if self.is_free(n) && dist[idx(n)].is_none() {
                    dist[idx(n)] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        Ok(DistanceField {
            width: self.width,
            dist,
        })
    }

    pub fn is_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&first) = free.first() else {
            return false;
        };
        let field = self.distance_field(first).expect("first free cell is free");
        free.iter().all(|&c| field.at(c).is_some())
    }
}

/// Shortest 4-neighbor path length between two free cells, `None` when unreachable.
pub fn geodesic_distance(map: &GridMap, a: Cell, b: Cell) -> Result<Option<u32>, EnvError> {
    if !map.is_free(b) {
        return Err(EnvError::Argument(format!("cell {b:?} is not free")));
    }
    Ok(map.distance_field(a)?.at(b))
}

/// Random obstacles at `density` of the interior, redrawn until free space is connected.
pub fn generate_map(seed: u64, width: usize, height: usize, density: f64) -> Result<GridMap, EnvError> {
    generate_map_bounded(seed, width, height, density, MAX_ATTEMPTS)
}

pub(crate) fn generate_map_bounded(
    seed: u64,
    width: usize,
    height: usize,
    density: f64,
    attempts: usize,
) -> Result<GridMap, EnvError> {
    if !(0.0..=MAX_DENSITY).contains(&density) {
        return Err(EnvError::Argument(format!(
            "obstacle density {density} outside [0, {MAX_DENSITY}]"
        )));
    }
    if width < 4 || height < 4 {
        return Err(EnvError::Argument(format!(
            "map must be at least 4x4, got {width}x{height}"
        )));
    }
    let base = GridMap::empty_room(width, height);
    let mut interior = base.free_cells();
    let obstacles = (density * interior.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..attempts {
        interior.sort();
        interior.shuffle(&mut rng);
        let mut map = base.clone();
        map.seed = seed;
        for c in &interior[..obstacles] {
            map.occupancy[c.y as usize * width + c.x as usize] = true;
        }
        if map.free_cells().len() >= 2 && map.is_connected() {
            return Ok(map);
        }
    }
    Err(EnvError::Generation(format!(
        "no connected {width}x{height} map at density {density} after {attempts} attempts (seed {seed})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent connectivity check by recursive flood fill.
    fn flood_fill_connected(map: &GridMap) -> bool {
        fn fill(map: &GridMap, c: Cell, seen: &mut Vec<bool>) {
            if !map.is_free(c) || seen[c.y as usize * map.width + c.x as usize] {
                return;
            }
            seen[c.y as usize * map.width + c.x as usize] = true;
            for n in GridMap::neighbors(c) {
                fill(map, n, seen);
            }
        }
        let free = map.free_cells();
        let mut seen = vec![false; map.width * map.height];
        fill(map, free[0], &mut seen);
        free.iter().all(|c| seen[c.y as usize * map.width + c.x as usize])
    }

    /// Dijkstra with unit weights over an explicit edge scan.
    fn dijkstra(map: &GridMap, a: Cell, b: Cell) -> Option<u32> {
        let n = map.width * map.height;
        let mut dist = vec![u32::MAX; n];
        let mut done = vec![false; n];
        let id = |c: Cell| c.y as usize * map.width + c.x as usize;
        dist[id(a)] = 0;
        loop {
            let mut best = None;
            for c in map.free_cells() {
                if !done[id(c)] && dist[id(c)] != u32::MAX && best.is_none_or(|b: Cell| dist[id(c)] < dist[id(b)]) {
                    best = Some(c);
                }
            }
            let Some(u) = best else { break };
            done[id(u)] = true;
            for v in GridMap::neighbors(u) {
                if map.is_free(v) && dist[id(u)] + 1 < dist[id(v)] {
                    dist[id(v)] = dist[id(u)] + 1;
                }
            }
        }
        (dist[id(b)] != u32::MAX).then_some(dist[id(b)])
    }

    #[test]
    fn zero_density_is_an_empty_room() {
        let m = generate_map(1, 8, 6, 0.0).unwrap();
        assert_eq!(m.free_cells().len(), 6 * 4);
        assert_eq!(m.occupancy, GridMap::empty_room(8, 6).occupancy);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_map(5, 12, 12, 0.3).unwrap(), generate_map(5, 12, 12, 0.3).unwrap());
        assert_ne!(
            generate_map(5, 12, 12, 0.3).unwrap().occupancy,
            generate_map(6, 12, 12, 0.3).unwrap().occupancy
        );
    }

    #[test]
    fn seed_seven_map_is_connected() {
        let m = generate_map(7, 16, 16, 0.2).unwrap();
        assert!(flood_fill_connected(&m));
        let interior_walls = m.occupancy.iter().filter(|&&o| o).count() - (16 * 4 - 4);
        assert_eq!(interior_walls, (0.2f64 * 196.0).round() as usize);
    }

    #[test]
    fn borders_are_walls() {
        let m = generate_map(3, 10, 7, 0.25).unwrap();
        for x in 0..10 {
            assert!(!m.is_free(Cell::new(x, 0)) && !m.is_free(Cell::new(x, 6)));
        }
        for y in 0..7 {
            assert!(!m.is_free(Cell::new(0, y)) && !m.is_free(Cell::new(9, y)));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(generate_map(0, 8, 8, 0.5), Err(EnvError::Argument(_))));
        assert!(matches!(generate_map(0, 3, 8, 0.1), Err(EnvError::Argument(_))));
    }

    #[test]
    fn unsatisfiable_density_fails_after_retries() {
        // 2x2 interior with two walls: a diagonal placement disconnects it.
        let results: Vec<_> = (0..40).map(|s| generate_map_bounded(s, 4, 4, 0.4, 1)).collect();
        assert!(results.iter().any(|r| matches!(r, Err(EnvError::Generation(_)))));
        for m in results.iter().flatten() {
            assert!(flood_fill_connected(m));
        }
    }

    #[test]
    fn geodesic_basics() {
        let m = GridMap::empty_room(8, 8);
        let a = Cell::new(2, 3);
        assert_eq!(geodesic_distance(&m, a, a).unwrap(), Some(0));
        let corridor = GridMap::from_ascii(&["########", "#......#", "########"]);
        assert_eq!(
            geodesic_distance(&corridor, Cell::new(1, 1), Cell::new(6, 1)).unwrap(),
            Some(5)
        );
        assert!(matches!(
            geodesic_distance(&m, a, Cell::new(0, 0)),
            Err(EnvError::Argument(_))
        ));
    }

    #[test]
    fn geodesic_matches_dijkstra_on_l_maze() {
        let m = GridMap::from_ascii(&[
            "########",
            "#......#",
            "#.####.#",
            "#.#....#",
            "#.#.####",
            "#.#....#",
            "#...##.#",
            "########",
        ]);
        let free = m.free_cells();
        for &a in &free {
            for &b in &free {
                assert_eq!(geodesic_distance(&m, a, b).unwrap(), dijkstra(&m, a, b), "{a:?}->{b:?}");
                assert_eq!(
                    geodesic_distance(&m, a, b).unwrap(),
                    geodesic_distance(&m, b, a).unwrap()
                );
            }
        }
    }
}

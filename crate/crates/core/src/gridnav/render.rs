use serde::{Deserialize, Serialize};

use super::map::GridMap;
use super::pose::AgentPose;

pub const IMAGE_CHANNELS: usize = 3;

/// Egocentric view: `view_width` cells across (centered on the agent) and
/// `view_depth` cells forward, starting at the agent's own row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub view_width: usize,
    pub view_depth: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            view_width: 9,
            view_depth: 8,
        }
    }
}

impl RenderConfig {
    pub fn len(&self) -> usize {
        self.height * self.width * IMAGE_CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lateral(&self, col: usize) -> i32 {
        (col * self.view_width / self.width) as i32 - (self.view_width / 2) as i32
    }

    fn forward(&self, row: usize) -> i32 {
        ((self.height - 1 - row) * self.view_depth / self.height) as i32
    }
}

/// Renders an `H×W×3` image: occupancy, per-column depth and window validity.
pub fn render_visual(map: &GridMap, pose: AgentPose, cfg: &RenderConfig) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0f32; cfg.len()];
    let depths: Vec<f32> = (0..cfg.view_width as i32)
        .map(|j| column_depth(map, pose, j - (cfg.view_width / 2) as i32, cfg.view_depth))
        .collect();
    for r in 0..h {
        let fwd = cfg.forward(r);
        for c in 0..w {
            let lat = cfg.lateral(c);
            let cell = pose.relative_cell(fwd, lat);
            let px = &mut img[(r * w + c) * IMAGE_CHANNELS..(r * w + c + 1) * IMAGE_CHANNELS];
            if map.in_bounds(cell) {
                px[0] = if map.is_free(cell) { 0.0 } else { 1.0 };
                px[2] = 1.0;
            }
            px[1] = depths[(lat + (cfg.view_width / 2) as i32) as usize];
        }
    }
    img
}

/// Normalized free distance along one view column before the first blocked cell.
fn column_depth(map: &GridMap, pose: AgentPose, lateral: i32, depth: usize) -> f32 {
    for k in 1..=depth as i32 {
        if !map.is_free(pose.relative_cell(k, lateral)) {
            return (k - 1) as f32 / depth as f32;
        }
    }
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridnav::map::{generate_map, Cell};
    use crate::gridnav::pose::Heading;

    fn cfg() -> RenderConfig {
        RenderConfig {
            height: 16,
            width: 18,
            view_width: 9,
            view_depth: 8,
        }
    }

    fn channel(img: &[f32], ch: usize) -> Vec<f32> {
        img.chunks(IMAGE_CHANNELS).map(|px| px[ch]).collect()
    }

    /// Rotates a square map a quarter turn clockwise: (x, y) → (y, n-1-x).
    fn rotate_cw(map: &GridMap) -> GridMap {
        let n = map.width;
        let mut out = map.clone();
        for y in 0..n {
            for x in 0..n {
                let (nx, ny) = (y, n - 1 - x);
                out.occupancy[ny * n + nx] = map.occupancy[y * n + x];
            }
        }
        out
    }

    #[test]
    fn facing_wall_has_minimum_depth() {
        let m = GridMap::empty_room(10, 10);
        let p = AgentPose::new(Cell::new(5, 8), Heading::N);
        let c = cfg();
        let depth = channel(&render_visual(&m, p, &c), 1);
        for r in 0..c.height {
            for col in c.width / 2 - 2..c.width / 2 + 2 {
                assert_eq!(depth[r * c.width + col], 0.0);
            }
        }
    }

    #[test]
    fn empty_room_center_is_free() {
        let m = GridMap::empty_room(21, 21);
        let p = AgentPose::new(Cell::new(10, 10), Heading::E);
        let c = cfg();
        let img = render_visual(&m, p, &c);
        assert!(channel(&img, 0).iter().all(|&v| v == 0.0));
        assert!(channel(&img, 2).iter().all(|&v| v == 1.0));
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rotating_map_and_heading_leaves_image_unchanged() {
        let m = generate_map(11, 12, 12, 0.25).unwrap();
        let r = rotate_cw(&m);
        let c = cfg();
        let n = m.width as i32;
        for cell in m.free_cells() {
            for h in Heading::ALL {
                let p = AgentPose::new(cell, h);
                let q = AgentPose::new(Cell::new(cell.y, n - 1 - cell.x), h.right());
                assert_eq!(render_visual(&m, p, &c), render_visual(&r, q, &c), "{p:?}");
            }
        }
    }

    #[test]
    fn outside_map_is_invalid() {
        let m = GridMap::empty_room(6, 6);
        let p = AgentPose::new(Cell::new(1, 1), Heading::S);
        let c = cfg();
        let valid = channel(&render_visual(&m, p, &c), 2);
        assert!(valid.contains(&0.0));
        assert!(valid.contains(&1.0));
    }
}

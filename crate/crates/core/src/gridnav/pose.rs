use serde::{Deserialize, Serialize};

use super::map::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    /// Clockwise index: N=0, E=1, S=2, W=3.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    /// Unit step in world coordinates (`y` grows northward).
    pub fn vector(self) -> (i32, i32) {
        match self {
            Heading::N => (0, 1),
            Heading::E => (1, 0),
            Heading::S => (0, -1),
            Heading::W => (-1, 0),
        }
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }
}

/// Discrete actions; the class index doubles as the decoder label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

pub const NUM_ACTIONS: usize = 4;
/// Class index of the no-object label, one past the last action.
pub const NULL_CLASS: usize = NUM_ACTIONS;
pub const NUM_CLASSES: usize = NUM_ACTIONS + 1;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::MoveForward, Action::TurnLeft, Action::TurnRight, Action::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveForward => "move_forward",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Stop => "stop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

impl AgentPose {
    pub const fn new(cell: Cell, heading: Heading) -> Self {
        Self { cell, heading }
    }

    pub fn ahead(self) -> Cell {
        let (dx, dy) = self.heading.vector();
        Cell::new(self.cell.x + dx, self.cell.y + dy)
    }

    /// World displacement expressed as (forward, left) in the agent frame.
    pub fn to_agent_frame(self, dx: f64, dy: f64) -> (f64, f64) {
        let (fx, fy) = self.heading.vector();
        let (fx, fy) = (f64::from(fx), f64::from(fy));
        (dx * fx + dy * fy, -dx * fy + dy * fx)
    }

    /// Bearing of `target` in the agent frame, positive to the left; zero when co-located.
    pub fn bearing_to(self, target: Cell) -> f64 {
        let (f, l) = self.to_agent_frame(
            f64::from(target.x - self.cell.x),
            f64::from(target.y - self.cell.y),
        );
        if f == 0.0 && l == 0.0 {
            0.0
        } else {
            l.atan2(f)
        }
    }

    /// Agent-frame cell offset: `forward` cells ahead and `right` cells to the right.
    pub fn relative_cell(self, forward: i32, right: i32) -> Cell {
        let (fx, fy) = self.heading.vector();
        let (rx, ry) = (fy, -fx);
        Cell::new(
            self.cell.x + forward * fx + right * rx,
            self.cell.y + forward * fy + right * ry,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turns_compose() {
        for h in Heading::ALL {
            assert_eq!(h.left().right(), h);
            assert_eq!(h.left().left().left().left(), h);
        }
        assert_eq!(Heading::N.left(), Heading::W);
        assert_eq!(Heading::N.right(), Heading::E);
    }

    #[test]
    fn frame_matches_rotation_oracle() {
        // Rotate the world vector by minus the heading angle (east = 0, counter-clockwise).
        let angle = |h: Heading| match h {
            Heading::E => 0.0,
            Heading::N => std::f64::consts::FRAC_PI_2,
            Heading::W => std::f64::consts::PI,
            Heading::S => -std::f64::consts::FRAC_PI_2,
        };
        for h in Heading::ALL {
            let pose = AgentPose::new(Cell::new(3, 3), h);
            for (dx, dy) in [(0.0, 2.0), (1.0, -3.0), (-2.5, 0.5)] {
                let a: f64 = -angle(h);
                let oracle = (a.cos() * dx - a.sin() * dy, a.sin() * dx + a.cos() * dy);
                let got = pose.to_agent_frame(dx, dy);
                assert!((got.0 - oracle.0).abs() < 1e-12 && (got.1 - oracle.1).abs() < 1e-12);
            }
        }
        let east = AgentPose::new(Cell::new(0, 0), Heading::E);
        assert_eq!(east.to_agent_frame(0.0, 2.0), (0.0, 2.0));
    }

    #[test]
    fn bearing_signs() {
        let p = AgentPose::new(Cell::new(5, 5), Heading::N);
        assert_eq!(p.bearing_to(Cell::new(5, 8)), 0.0);
        assert!((p.bearing_to(Cell::new(2, 5)) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((p.bearing_to(Cell::new(7, 5)) + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(p.relative_cell(1, 0), p.ahead());
        assert_eq!(p.relative_cell(0, 1), Cell::new(6, 5));
    }
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::map::{DistanceField, GridMap};
use super::pose::{Action, AgentPose, Heading};
use super::{Cell, EnvError};

/// Optimal first actions from a pose together with the geodesic distance to the goal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OraclePlan {
    pub actions: Vec<Action>,
    pub geodesic: u32,
}

/// Action classes that begin a move-minimal plan towards the goal.
///
/// A plan is optimal when every MoveForward reduces the geodesic distance, so it
/// reaches the success radius in exactly `geodesic - radius` moves. Turning
/// towards a direction behind the agent can start either way round.
pub fn oracle_first_actions(
    map: &GridMap,
    pose: AgentPose,
    goal: Cell,
    radius: u32,
) -> Result<OraclePlan, EnvError> {
    let field = goal_field(map, goal)?;
    first_actions_from_field(&field, map, pose, radius)
}

pub(crate) fn goal_field(map: &GridMap, goal: Cell) -> Result<DistanceField, EnvError> {
    map.distance_field(goal)
        .map_err(|e| EnvError::Setup(format!("goal {goal:?}: {e}")))
}

pub(crate) fn first_actions_from_field(
    field: &DistanceField,
    map: &GridMap,
    pose: AgentPose,
    radius: u32,
) -> Result<OraclePlan, EnvError> {
    let geodesic = field.at(pose.cell).ok_or_else(|| {
        EnvError::Setup(format!("goal unreachable from {:?}", pose.cell))
    })?;
    if geodesic <= radius {
        return Ok(OraclePlan {
            actions: vec![Action::Stop],
            geodesic,
        });
    }
    let mut actions = BTreeSet::new();
    for (dir, n) in Heading::ALL.iter().zip(GridMap::neighbors(pose.cell)) {
        if !map.is_free(n) || field.at(n) != Some(geodesic - 1) {
            continue;
        }
        match (dir.index() + 4 - pose.heading.index()) % 4 {
            0 => {
                actions.insert(Action::MoveForward);
            }
            1 => {
                actions.insert(Action::TurnRight);
            }
            3 => {
                actions.insert(Action::TurnLeft);
            }
            _ => {
                actions.insert(Action::TurnLeft);
                actions.insert(Action::TurnRight);
            }
        }
    }
    Ok(OraclePlan {
        actions: actions.into_iter().collect(),
        geodesic,
    })
}

/// Fewest actions (including the final Stop) needed to succeed from `start`
/// along a move-minimal plan.
pub fn optimal_action_count(
    map: &GridMap,
    start: AgentPose,
    goal: Cell,
    radius: u32,
) -> Result<u32, EnvError> {
    let field = goal_field(map, goal)?;
    optimal_action_count_from_field(&field, map, start, radius)
}

pub(crate) fn optimal_action_count_from_field(
    field: &DistanceField,
    map: &GridMap,
    start: AgentPose,
    radius: u32,
) -> Result<u32, EnvError> {
    ActionCosts::new(field, map, radius)
        .at(start)
        .ok_or_else(|| EnvError::Setup(format!("goal unreachable from {:?}", start.cell)))
}

/// Cost-to-go in actions (Stop included) for every (cell, heading), using
/// only moves that reduce the geodesic distance.
pub(crate) struct ActionCosts {
    width: usize,
    cost: Vec<Option<u32>>,
}

impl ActionCosts {
    pub(crate) fn new(field: &DistanceField, map: &GridMap, radius: u32) -> Self {
        let mut cells: Vec<(u32, Cell)> = map
            .free_cells()
            .into_iter()
            .filter_map(|c| field.at(c).map(|d| (d, c)))
            .collect();
        cells.sort();
        let mut out = Self {
            width: map.width,
            cost: vec![None; map.width * map.height * 4],
        };
        for (d, cell) in cells {
            let mut row = [None; 4];
            if d <= radius {
                row = [Some(1); 4];
            } else {
                let mut base = [None; 4];
                for h in Heading::ALL {
                    let ahead = AgentPose::new(cell, h).ahead();
                    if field.at(ahead) == Some(d - 1) {
                        base[h.index()] = out.at(AgentPose::new(ahead, h)).map(|c| c + 1);
                    }
                }
                for (h, slot) in row.iter_mut().enumerate() {
                    *slot = [(0, 0), (1, 1), (3, 1), (2, 2)]
                        .iter()
                        .filter_map(|&(off, turns)| base[(h + off) % 4].map(|c| c + turns))
                        .min();
                }
            }
            let k = out.key(AgentPose::new(cell, Heading::N));
            out.cost[k..k + 4].copy_from_slice(&row);
        }
        out
    }

    fn key(&self, p: AgentPose) -> usize {
        (p.cell.y as usize * self.width + p.cell.x as usize) * 4 + p.heading.index()
    }

    pub(crate) fn at(&self, p: AgentPose) -> Option<u32> {
        if p.cell.x < 0 || p.cell.y < 0 || p.cell.x as usize >= self.width {
            return None;
        }
        self.cost.get(self.key(p)).copied().flatten()
    }

    /// Lowest-indexed action on a plan that is move-minimal and, among
    /// those, action-minimal.
    pub(crate) fn best_action(&self, field: &DistanceField, pose: AgentPose, radius: u32) -> Option<Action> {
        let here = self.at(pose)?;
        if field.at(pose.cell)? <= radius {
            return Some(Action::Stop);
        }
        let d = field.at(pose.cell)?;
        Action::ALL.into_iter().find(|&a| {
            let next = match a {
                Action::MoveForward if field.at(pose.ahead()) == Some(d - 1) => {
                    AgentPose::new(pose.ahead(), pose.heading)
                }
                Action::TurnLeft => AgentPose::new(pose.cell, pose.heading.left()),
                Action::TurnRight => AgentPose::new(pose.cell, pose.heading.right()),
                _ => return false,
            };
            self.at(next) == Some(here - 1)
        })
    }
}

/// Deterministic scripted choice: the lowest-indexed action of a plan that
/// uses the fewest moves and, among those, the fewest actions.
pub fn oracle_action(map: &GridMap, pose: AgentPose, goal: Cell, radius: u32) -> Result<Action, EnvError> {
    let field = goal_field(map, goal)?;
    ActionCosts::new(&field, map, radius)
        .best_action(&field, pose, radius)
        .ok_or_else(|| EnvError::Setup(format!("goal unreachable from {:?}", pose.cell)))
}

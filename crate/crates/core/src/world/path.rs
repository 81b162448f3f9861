use std::collections::VecDeque;

use super::{AgentPose, Cell, GridMap, Heading};

/// BFS distances (in cells) from `target` to every cell; `None` for walls and
/// unreachable cells.
#[derive(Clone, Debug)]
pub struct DistanceField {
    target: Cell,
    dist: Vec<Option<u32>>,
    width: usize,
}

impl DistanceField {
    pub fn new(map: &GridMap, target: Cell) -> Self {
        let mut dist = vec![None; map.width() * map.height()];
        if map.is_free(target) {
            dist[map.index(target)] = Some(0);
            let mut queue = VecDeque::from([target]);
            while let Some(c) = queue.pop_front() {
                let d = dist[map.index(c)].unwrap();
                for h in Heading::ALL {
                    if let Some(n) = map.neighbor(c, h) {
                        let slot = &mut dist[map.index(n)];
                        if slot.is_none() {
                            *slot = Some(d + 1);
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        DistanceField { target, dist, width: map.width() }
    }

    pub fn target(&self) -> Cell {
        self.target
    }

    pub fn get(&self, c: Cell) -> Option<u32> {
        self.dist.get(c.y * self.width + c.x).copied().flatten()
    }

    /// First move of the lexicographically smallest (N, E, S, W) shortest path
    /// from `from` to the target; `None` when already there or unreachable.
    pub fn first_step(&self, map: &GridMap, from: Cell) -> Option<Heading> {
        let d = self.get(from)?;
        if d == 0 {
            return None;
        }
        Heading::ALL
            .into_iter()
            .find(|&h| map.neighbor(from, h).and_then(|n| self.get(n)) == Some(d - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortestPath {
    pub distance: u32,
    pub first_step: Option<Heading>,
}

/// BFS over 4-connected free cells. `None` means unreachable.
pub fn shortest_path(map: &GridMap, a: Cell, b: Cell) -> Option<ShortestPath> {
    if map.is_wall(a) || map.is_wall(b) {
        return None;
    }
    let field = DistanceField::new(map, b);
    let distance = field.get(a)?;
    Some(ShortestPath { distance, first_step: field.first_step(map, a) })
}

/// Fewest Forward/Left/Right actions to reach `goal`, plus the final Stop.
/// `None` when the goal cannot be reached.
pub fn optimal_action_count(map: &GridMap, start: AgentPose, goal: Cell) -> Option<u32> {
    if map.is_wall(start.cell) || map.is_wall(goal) {
        return None;
    }
    let state = |c: Cell, h: Heading| map.index(c) * 4 + h.index();
    let mut seen = vec![None::<u32>; map.width() * map.height() * 4];
    seen[state(start.cell, start.heading)] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        let d = seen[state(p.cell, p.heading)].unwrap();
        if p.cell == goal {
            return Some(d + 1);
        }
        let forward = map.neighbor(p.cell, p.heading).unwrap_or(p.cell);
        for next in [
            AgentPose { cell: forward, heading: p.heading },
            AgentPose { cell: p.cell, heading: p.heading.left() },
            AgentPose { cell: p.cell, heading: p.heading.right() },
        ] {
            let s = state(next.cell, next.heading);
            if seen[s].is_none() {
                seen[s] = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    None
}

//! Trajectories: node paths through a world decorated with headings and a
//! flat action transcript.
//!
//! The action transcript is what downstream consumers (the oracle
//! annotator, the encoders, the generator) see, so its emission rule is
//! fixed here once: moving to the next node emits an explicit `Turn`
//! action only when the heading change is at least [`TURN_THRESHOLD_DEG`];
//! smaller corrections are absorbed by the `Forward` action, which always
//! aligns the heading with the edge it traverses. Every trajectory ends
//! with exactly one `Stop`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::world::{bearing_deg, norm_360, norm_delta, Environment};
use crate::{Error, Result};

/// Minimum heading change, in degrees, that is surfaced as its own `Turn`
/// action instead of being folded into the following `Forward`.
pub const TURN_THRESHOLD_DEG: f64 = 30.0;

/// One step of a trajectory transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// Rotate in place by `delta_deg` (signed, positive clockwise, in
    /// `(-180, 180]`, magnitude at least the turn threshold).
    Turn { delta_deg: f64 },
    /// Traverse the edge to the adjacent node `to`, aligning the heading
    /// with that edge. The target is recorded so transcripts replay
    /// exactly; models never read it.
    Forward { to: u32 },
    /// Terminate the episode.
    Stop,
}

/// A finished path through one environment.
///
/// `nodes[i]` is the i-th viewpoint visited; `headings[i]` is the heading
/// on arrival there — for `i = 0` the given start heading, afterwards the
/// bearing of the edge just traversed. Turns taken while standing at a
/// node live in `actions` (and are reflected in the next arrival heading),
/// so `actions` replays from `(nodes[0], headings[0])` to exactly these
/// nodes and headings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: String,
    pub env_id: String,
    pub nodes: Vec<u32>,
    pub headings: Vec<f64>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn start(&self) -> u32 {
        self.nodes[0]
    }

    pub fn goal(&self) -> u32 {
        *self.nodes.last().expect("trajectories are never empty")
    }

    pub fn start_heading(&self) -> f64 {
        self.headings[0]
    }

    pub fn final_heading(&self) -> f64 {
        *self.headings.last().expect("trajectories are never empty")
    }

    pub fn hops(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Geometric length of the node path in meters.
    pub fn length(&self, env: &Environment) -> Result<f64> {
        path_length(env, &self.nodes)
    }

    /// Check every structural property a trajectory must satisfy: a
    /// non-empty node path in this environment, exactly one trailing
    /// `Stop`, legal turn magnitudes, and a transcript that replays to the
    /// recorded nodes and headings.
    pub fn validate(&self, env: &Environment) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Invariant(format!("trajectory {}: {}", self.traj_id, msg)))
        };
        if self.env_id != env.env_id {
            return fail(format!(
                "environment mismatch ({} vs {})",
                self.env_id, env.env_id
            ));
        }
        if self.nodes.is_empty() {
            return fail("empty node path".into());
        }
        if self.headings.len() != self.nodes.len() {
            return fail(format!(
                "{} headings for {} nodes",
                self.headings.len(),
                self.nodes.len()
            ));
        }
        for &h in &self.headings {
            if !(0.0..360.0).contains(&h) {
                return fail(format!("heading {h} outside [0, 360)"));
            }
        }
        let stops = self
            .actions
            .iter()
            .filter(|a| matches!(a, Action::Stop))
            .count();
        if stops != 1 || !matches!(self.actions.last(), Some(Action::Stop)) {
            return fail("transcript must end with exactly one stop".into());
        }
        for action in &self.actions {
            if let Action::Turn { delta_deg } = action {
                if !(-180.0..=180.0).contains(delta_deg)
                    || delta_deg.abs() < TURN_THRESHOLD_DEG
                {
                    return fail(format!("illegal turn delta {delta_deg}"));
                }
            }
        }
        let (nodes, headings) =
            replay(env, self.nodes[0], self.headings[0], &self.actions)?;
        if nodes != self.nodes {
            return fail("replayed nodes differ from recorded nodes".into());
        }
        if headings.len() != self.headings.len()
            || headings
                .iter()
                .zip(&self.headings)
                .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return fail("replayed headings differ from recorded headings".into());
        }
        Ok(())
    }
}

/// Execute a transcript from a start pose, returning the visited nodes and
/// the heading held at each.
pub fn replay(
    env: &Environment,
    start: u32,
    start_heading: f64,
    actions: &[Action],
) -> Result<(Vec<u32>, Vec<f64>)> {
    env.node(start)?;
    let mut nodes = vec![start];
    let mut headings = vec![norm_360(start_heading)];
    let mut pose_heading = norm_360(start_heading);
    let mut stopped = false;
    for action in actions {
        if stopped {
            return Err(Error::Invariant(
                "transcript continues after stop".into(),
            ));
        }
        match *action {
            Action::Turn { delta_deg } => {
                pose_heading = norm_360(pose_heading + delta_deg);
            }
            Action::Forward { to } => {
                let from = *nodes.last().expect("never empty");
                if !env.are_adjacent(from, to) {
                    return Err(Error::NotAdjacent {
                        env_id: env.env_id.clone(),
                        a: from,
                        b: to,
                    });
                }
                let bearing =
                    bearing_deg(&env.node(from)?.pos, &env.node(to)?.pos);
                nodes.push(to);
                headings.push(bearing);
                pose_heading = bearing;
            }
            Action::Stop => stopped = true,
        }
    }
    Ok((nodes, headings))
}

/// Incrementally build a trajectory, applying the shared turn-emission
/// rule at every move. Used by path conversion and by the navigator when
/// it records what it actually did.
pub struct TrajBuilder<'a> {
    env: &'a Environment,
    traj_id: String,
    nodes: Vec<u32>,
    headings: Vec<f64>,
    pose_heading: f64,
    actions: Vec<Action>,
}

impl<'a> TrajBuilder<'a> {
    pub fn new(
        env: &'a Environment,
        traj_id: impl Into<String>,
        start: u32,
        start_heading: f64,
    ) -> Result<Self> {
        env.node(start)?;
        Ok(TrajBuilder {
            env,
            traj_id: traj_id.into(),
            nodes: vec![start],
            headings: vec![norm_360(start_heading)],
            pose_heading: norm_360(start_heading),
            actions: Vec::new(),
        })
    }

    pub fn at(&self) -> u32 {
        *self.nodes.last().expect("never empty")
    }

    /// Current pose heading, including any turn taken since arrival.
    pub fn heading(&self) -> f64 {
        self.pose_heading
    }

    pub fn steps_taken(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Move to an adjacent node, emitting a turn first when the heading
    /// change reaches the threshold.
    pub fn move_to(&mut self, to: u32) -> Result<()> {
        let from = self.at();
        if !self.env.are_adjacent(from, to) {
            return Err(Error::NotAdjacent {
                env_id: self.env.env_id.clone(),
                a: from,
                b: to,
            });
        }
        let bearing = bearing_deg(&self.env.node(from)?.pos, &self.env.node(to)?.pos);
        let delta = norm_delta(bearing - self.pose_heading);
        if delta.abs() >= TURN_THRESHOLD_DEG {
            self.actions.push(Action::Turn { delta_deg: delta });
        }
        self.actions.push(Action::Forward { to });
        self.nodes.push(to);
        self.headings.push(bearing);
        self.pose_heading = bearing;
        Ok(())
    }

    /// Append the stop action and finish.
    pub fn finish(mut self) -> Trajectory {
        self.actions.push(Action::Stop);
        Trajectory {
            traj_id: self.traj_id,
            env_id: self.env.env_id.clone(),
            nodes: self.nodes,
            headings: self.headings,
            actions: self.actions,
        }
    }
}

/// Convert a node path into a full trajectory starting at `start_heading`.
pub fn from_path(
    env: &Environment,
    traj_id: impl Into<String>,
    path: &[u32],
    start_heading: f64,
) -> Result<Trajectory> {
    if path.is_empty() {
        return Err(Error::EmptyInput("node path"));
    }
    let mut builder = TrajBuilder::new(env, traj_id, path[0], start_heading)?;
    for &next in &path[1..] {
        builder.move_to(next)?;
    }
    Ok(builder.finish())
}

/// Total Euclidean length of a node path, validating adjacency.
pub fn path_length(env: &Environment, path: &[u32]) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::EmptyInput("node path"));
    }
    let mut total = 0.0;
    for pair in path.windows(2) {
        total += env.edge_len(pair[0], pair[1])?;
    }
    Ok(total)
}

/// Sample up to `count` distinct shortest-path trajectories whose hop
/// counts lie in the inclusive `hop_range`.
///
/// All qualifying (start, goal) pairs are enumerated, shuffled with the
/// seed, and the prefix taken, so two pairs never duplicate (start, goal)
/// and the result is a pure function of `(env, count, hop_range, seed)`.
/// If the world cannot supply `count` qualifying pairs, the shorter list
/// is returned; callers decide whether that is acceptable.
pub fn sample_trajectories(
    env: &Environment,
    count: usize,
    hop_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let (min_hops, max_hops) = hop_range;
    if min_hops == 0 || min_hops > max_hops {
        return Err(Error::InvalidConfig(format!(
            "hop range ({min_hops}, {max_hops}) is empty or allows zero-hop paths"
        )));
    }
    let n = env.nodes.len() as u32;
    let mut qualifying: Vec<Vec<u32>> = Vec::new();
    for start in 0..n {
        for goal in 0..n {
            if start == goal {
                continue;
            }
            let path = env.shortest_path(start, goal)?;
            let hops = path.len() - 1;
            if (min_hops..=max_hops).contains(&hops) {
                qualifying.push(path);
            }
        }
    }
    let mut rng = crate::seed::rng(seed, "sample-trajs", 0);
    qualifying.shuffle(&mut rng);
    qualifying
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(i, path)| {
            let heading = bearing_deg(
                &env.node(path[0])?.pos,
                &env.node(path[1])?.pos,
            );
            from_path(env, format!("{}:t{:04}", env.env_id, i), &path, heading)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_environment, Node, Point, Split, WorldGenConfig};

    fn world() -> Environment {
        generate_environment(&WorldGenConfig::default(), Split::Train, 0, 5).unwrap()
    }

    /// A hand-built L: north two meters, then east two meters.
    fn l_world() -> Environment {
        let nodes: Vec<Node> = [
            Point { x: 0.0, y: 0.0 },
            Point { x: 0.0, y: 2.0 },
            Point { x: 2.0, y: 2.0 },
        ]
        .iter()
        .enumerate()
        .map(|(i, &pos)| Node {
            id: i as u32,
            pos,
            landmarks: Default::default(),
        })
        .collect();
        serde_json::from_value(serde_json::json!({
            "env_id": "test-l",
            "split": "train",
            "vocab_size": 8,
            "nodes": nodes,
            "edges": [[0, 1], [1, 2]],
            "seed": 0
        }))
        .unwrap()
    }

    #[test]
    fn l_path_emits_turn_forward_forward_stop() {
        let env = l_world();
        let traj = from_path(&env, "t", &[0, 1, 2], 0.0).unwrap();
        assert_eq!(
            traj.actions,
            vec![
                Action::Forward { to: 1 },
                Action::Turn { delta_deg: 90.0 },
                Action::Forward { to: 2 },
                Action::Stop,
            ]
        );
        assert_eq!(traj.headings, vec![0.0, 0.0, 90.0]);
        traj.validate(&env).unwrap();
    }

    #[test]
    fn initial_misalignment_emits_leading_turn() {
        let env = l_world();
        let traj = from_path(&env, "t", &[0, 1], 180.0).unwrap();
        assert_eq!(
            traj.actions,
            vec![
                Action::Turn { delta_deg: 180.0 },
                Action::Forward { to: 1 },
                Action::Stop,
            ]
        );
    }

    #[test]
    fn small_heading_changes_fold_into_forward() {
        let env = l_world();
        // Start heading 20 degrees off the first edge: below the threshold,
        // so no turn action appears and forward realigns the heading.
        let traj = from_path(&env, "t", &[0, 1], 340.0).unwrap();
        assert_eq!(
            traj.actions,
            vec![Action::Forward { to: 1 }, Action::Stop]
        );
        assert_eq!(traj.headings, vec![340.0, 0.0]);
        traj.validate(&env).unwrap();
    }

    #[test]
    fn single_node_trajectory_is_just_stop() {
        let env = l_world();
        let traj = from_path(&env, "t", &[1], 45.0).unwrap();
        assert_eq!(traj.actions, vec![Action::Stop]);
        assert_eq!(traj.length(&env).unwrap(), 0.0);
        traj.validate(&env).unwrap();
    }

    #[test]
    fn replay_rejects_actions_after_stop_and_teleports() {
        let env = l_world();
        assert!(replay(
            &env,
            0,
            0.0,
            &[Action::Stop, Action::Forward { to: 1 }]
        )
        .is_err());
        assert!(matches!(
            replay(&env, 0, 0.0, &[Action::Forward { to: 2 }]),
            Err(Error::NotAdjacent { .. })
        ));
    }

    #[test]
    fn path_length_matches_geometry() {
        let env = l_world();
        assert!((path_length(&env, &[0, 1, 2]).unwrap() - 4.0).abs() < 1e-12);
        assert!(path_length(&env, &[0, 2]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_distinct_and_in_range() {
        let env = world();
        let a = sample_trajectories(&env, 40, (4, 7), 99).unwrap();
        let b = sample_trajectories(&env, 40, (4, 7), 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        let mut endpoints = std::collections::BTreeSet::new();
        for t in &a {
            assert!((4..=7).contains(&t.hops()), "hops {}", t.hops());
            assert!(endpoints.insert((t.start(), t.goal())));
            t.validate(&env).unwrap();
            // Sampled trajectories start already facing their first edge.
            assert!(!matches!(t.actions[0], Action::Turn { .. }));
        }
        let c = sample_trajectories(&env, 40, (4, 7), 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversampling_returns_what_exists() {
        let env = l_world();
        let got = sample_trajectories(&env, 50, (1, 2), 1).unwrap();
        // Six ordered pairs exist: four one-hop and two two-hop.
        assert_eq!(got.len(), 6);
    }

    #[test]
    fn trajectories_round_trip_through_json() {
        let env = world();
        let t = &sample_trajectories(&env, 1, (4, 7), 3).unwrap()[0];
        let text = serde_json::to_string(t).unwrap();
        let back: Trajectory = serde_json::from_str(&text).unwrap();
        assert_eq!(*t, back);
    }
}

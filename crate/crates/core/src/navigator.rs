//! The trainable navigator: follows an instruction through a world by
//! choosing, at each node, one adjacent node to move to or to stop.
//!
//! The policy is a linear softmax over a small set of grounding features
//! (does the active clause's landmark sit in the direction of this
//! candidate, does this candidate's turn agree with the active turn
//! clause, and so on) paired with a clause cursor that tracks progress
//! through the instruction. Training is full-batch gradient descent with
//! a backtracking line search, so the loss decreases monotonically and
//! the result is a pure function of its inputs — no random
//! initialization, no shuffling.

use serde::{Deserialize, Serialize};

use crate::instr::{bucket_turn, parse, Clause, Dir, Instruction};
use crate::traj::{TrajBuilder, Trajectory};
use crate::world::{Candidate, Environment, Observation, WorldSet};
use crate::{Error, Result};

/// Names of the policy features, in weight order.
pub const FEATURE_NAMES: [&str; 17] = [
    "bias_stop",
    "stop_at_stop_clause",
    "stop_lm_match",
    "stop_early",
    "stop_stalled",
    "move_lm_match",
    "move_lm_elsewhere",
    "turn_agree",
    "turn_opposite",
    "turn_setup_lm",
    "ahead_small_delta",
    "delta_mag",
    "backtrack",
    "turn_mag_match",
    "next_lm_at_cand",
    "stop_lm_here",
    "move_to_stop_lm",
];

pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

/// Steps without clause progress before the cursor is forced onward (and
/// the policy starts seeing the stalled flag).
pub const STALL_LIMIT: usize = 3;

/// Default cap on forward moves per episode.
pub const DEFAULT_MAX_STEPS: usize = 15;

/// Learned navigator weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigatorParams {
    /// Incremented on every (re)training.
    pub version: u32,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
}

impl NavigatorParams {
    /// All-zero weights; the untrained starting point.
    pub fn zeroed() -> Self {
        NavigatorParams {
            version: 0,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.0; NUM_FEATURES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_names != FEATURE_NAMES {
            return Err(Error::InvalidConfig(
                "navigator feature names do not match this build".into(),
            ));
        }
        if self.weights.len() != NUM_FEATURES {
            return Err(Error::InvalidConfig(format!(
                "navigator has {} weights for {} features",
                self.weights.len(),
                NUM_FEATURES
            )));
        }
        Ok(())
    }
}

/// Hyperparameters for navigator training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavTrainConfig {
    /// Gradient steps on the main pool.
    pub pretrain_epochs: usize,
    /// Gradient steps of the light seed fine-tune pass.
    pub finetune_epochs: usize,
    /// Initial step size; the line search halves from here.
    pub learning_rate: f64,
    /// L2 penalty on the weights.
    pub l2: f64,
}

impl Default for NavTrainConfig {
    fn default() -> Self {
        NavTrainConfig {
            pretrain_epochs: 60,
            finetune_epochs: 10,
            learning_rate: 2.0,
            l2: 1e-4,
        }
    }
}

/// Either move to a candidate or stop; the policy's action space.
#[derive(Clone, Copy)]
enum ActionRef<'a> {
    Move(&'a Candidate),
    Stop,
}

/// Did one turn-clause direction get satisfied by this movement's delta?
fn turn_matches(dir: Dir, delta_deg: f64) -> bool {
    if delta_deg.abs() < crate::traj::TURN_THRESHOLD_DEG {
        return false;
    }
    bucket_turn(delta_deg).0 == dir
}

/// Progress tracker through an instruction's clauses.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CursorState {
    cursor: usize,
    stalled: usize,
}

impl CursorState {
    fn new() -> Self {
        CursorState { cursor: 0, stalled: 0 }
    }

    /// Fail fast on a move clause that already stalled once and whose
    /// landmark is visible nowhere from here: the step it describes cannot
    /// be matched at this node, and dwelling the full stall limit on it
    /// derails everything after. One burned step, then move on. Turn
    /// clauses always sit out the full stall limit — an unmatched turn is
    /// evidence of a wrong direction, not of a missing landmark. Never
    /// advances past the final clause.
    fn skip_unmatchable(&mut self, clauses: &[Clause], obs: &Observation) {
        let last = clauses.len() - 1;
        while self.cursor < last && self.stalled >= 1 {
            match &clauses[self.cursor] {
                Clause::Move { lm, .. }
                    if !obs.visible.iter().any(|s| s.contains(&lm.id)) =>
                {
                    self.cursor += 1;
                    self.stalled = 0;
                }
                _ => break,
            }
        }
    }

    /// Update after a move was taken from the node `obs` describes.
    ///
    /// A matching turn clause advances the cursor, then a matching move
    /// clause may advance it again (a turn is usually followed immediately
    /// by the move it sets up). Without progress for [`STALL_LIMIT`]
    /// steps, the cursor is forced one clause onward. It never advances
    /// past the final (stop) clause.
    fn observe_move(&mut self, clauses: &[Clause], taken: &Candidate, obs: &Observation) {
        let last = clauses.len() - 1;
        let mut advanced = false;
        if self.cursor < last {
            if let Clause::Turn { dir, .. } = clauses[self.cursor] {
                if turn_matches(dir, taken.delta_deg) {
                    self.cursor += 1;
                    advanced = true;
                }
            }
        }
        if self.cursor < last {
            if let Clause::Move { lm, .. } = clauses[self.cursor] {
                if obs.visible[taken.rel_sector as usize].contains(&lm.id) {
                    self.cursor += 1;
                    advanced = true;
                }
            }
        }
        if advanced {
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= STALL_LIMIT {
                if self.cursor < last {
                    self.cursor += 1;
                }
                self.stalled = 0;
            }
        }
    }
}

/// The first landmark an upcoming clause names, scanning from `from`.
fn next_landmark(clauses: &[Clause], from: usize) -> Option<crate::world::LandmarkId> {
    clauses[from.min(clauses.len())..].iter().find_map(|c| match c {
        Clause::Move { lm, .. } => Some(lm.id),
        Clause::Stop { near: Some(lm) } => Some(lm.id),
        _ => None,
    })
}

fn extract_features(
    clauses: &[Clause],
    state: CursorState,
    obs: &Observation,
    prev_node: Option<u32>,
    action: ActionRef<'_>,
) -> [f64; NUM_FEATURES] {
    let mut f = [0.0; NUM_FEATURES];
    let active = &clauses[state.cursor];
    let at_last = state.cursor + 1 == clauses.len();
    match action {
        ActionRef::Stop => {
            f[0] = 1.0;
            if let Clause::Stop { near } = active {
                f[1] = 1.0;
                if let Some(lm) = near {
                    // The stop clause names what the agent should be
                    // facing; sector 0 is dead ahead.
                    if obs.visible[0].contains(&lm.id) {
                        f[2] = 1.0;
                    }
                    if obs.visible.iter().any(|s| s.contains(&lm.id)) {
                        f[15] = 1.0;
                    }
                }
            }
            if !at_last {
                f[3] = 1.0;
            }
            if state.stalled + 1 >= STALL_LIMIT {
                f[4] = 1.0;
            }
        }
        ActionRef::Move(cand) => {
            match active {
                Clause::Move { lm, .. } => {
                    let here = &obs.visible[cand.rel_sector as usize];
                    if here.contains(&lm.id) {
                        f[5] = 1.0;
                    } else if obs.visible.iter().any(|s| s.contains(&lm.id)) {
                        f[6] = 1.0;
                    }
                }
                Clause::Turn { dir, mag } => {
                    if turn_matches(*dir, cand.delta_deg) {
                        f[7] = 1.0;
                        // Among same-direction edges, the stated sharpness
                        // picks the one the clause meant.
                        if bucket_turn(cand.delta_deg).1 == *mag {
                            f[13] = 1.0;
                        }
                    } else if *dir != Dir::Around
                        && turn_matches(
                            if *dir == Dir::Left { Dir::Right } else { Dir::Left },
                            cand.delta_deg,
                        )
                    {
                        f[8] = 1.0;
                    }
                    // A turn clause is usually followed by the move it
                    // sets up; that move's landmark picks out which
                    // same-direction edge the turn meant.
                    if let Some(Clause::Move { lm, .. }) = clauses.get(state.cursor + 1) {
                        if obs.visible[cand.rel_sector as usize].contains(&lm.id) {
                            f[9] = 1.0;
                        }
                    }
                }
                Clause::Stop { near } => {
                    // Already on the stop clause but maybe one hop short:
                    // the named landmark sits at the node to stop at.
                    if let Some(lm) = near {
                        if cand.landmarks.binary_search(&lm.id).is_ok() {
                            f[16] = 1.0;
                        }
                    }
                }
            }
            // Whatever clause follows the step this move consumes names a
            // landmark found at that step's source — the candidate node.
            // Finding it there disambiguates same-sector rivals.
            let lookahead = match active {
                Clause::Move { .. } => Some(state.cursor + 1),
                Clause::Turn { .. } => Some(state.cursor + 2),
                Clause::Stop { .. } => None,
            };
            if let Some(from) = lookahead {
                if let Some(lm) = next_landmark(clauses, from) {
                    if cand.landmarks.binary_search(&lm).is_ok() {
                        f[14] = 1.0;
                    }
                }
            }
            if cand.delta_deg.abs() < crate::traj::TURN_THRESHOLD_DEG {
                f[10] = 1.0;
            }
            f[11] = cand.delta_deg.abs() / 180.0;
            if prev_node == Some(cand.node) {
                f[12] = 1.0;
            }
        }
    }
    f
}

fn dot(w: &[f64], f: &[f64; NUM_FEATURES]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// One outcome of running the navigator on an instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    /// True when the step budget ran out before the policy chose to stop.
    pub reached_max_steps: bool,
}

/// Follow an instruction from a start pose. Deterministic: ties in the
/// action scores resolve toward stopping, then toward the smallest
/// candidate node id.
pub fn follow(
    params: &NavigatorParams,
    env: &Environment,
    instr: &Instruction,
    traj_id: impl Into<String>,
    start: u32,
    start_heading: f64,
    max_steps: usize,
) -> Result<EpisodeResult> {
    params.validate()?;
    let clauses = parse(instr)?;
    let mut builder = TrajBuilder::new(env, traj_id, start, start_heading)?;
    let mut state = CursorState::new();
    let mut prev_node: Option<u32> = None;
    let mut reached_max_steps = false;

    loop {
        if builder.steps_taken() >= max_steps {
            reached_max_steps = true;
            break;
        }
        let obs = env.observation(builder.at(), builder.heading())?;
        state.skip_unmatchable(&clauses, &obs);
        let stop_score = dot(
            &params.weights,
            &extract_features(&clauses, state, &obs, prev_node, ActionRef::Stop),
        );
        let mut best: Option<(f64, &Candidate)> = None;
        for cand in &obs.candidates {
            let score = dot(
                &params.weights,
                &extract_features(&clauses, state, &obs, prev_node, ActionRef::Move(cand)),
            );
            let better = match best {
                None => true,
                // Strictly greater wins; candidates come sorted by node
                // id, so ties keep the earlier (smaller) one.
                Some((best_score, _)) => score > best_score,
            };
            if better {
                best = Some((score, cand));
            }
        }
        match best {
            // Ties between stopping and moving resolve toward stopping.
            Some((move_score, cand)) if move_score > stop_score => {
                let from = builder.at();
                builder.move_to(cand.node)?;
                state.observe_move(&clauses, cand, &obs);
                prev_node = Some(from);
            }
            _ => break,
        }
    }
    Ok(EpisodeResult {
        trajectory: builder.finish(),
        reached_max_steps,
    })
}

/// One supervised decision: features for every action, and which action
/// the teacher took.
struct StepExample {
    features: Vec<[f64; NUM_FEATURES]>,
    label: usize,
}

/// Unroll teacher trajectories into per-step decisions, advancing the
/// same cursor the policy will use at follow time.
fn collect_examples(
    worlds: &WorldSet,
    pairs: &[(&Trajectory, &Instruction)],
) -> Result<Vec<StepExample>> {
    let mut examples = Vec::new();
    for (traj, instr) in pairs {
        let env = worlds.get(&traj.env_id)?;
        let clauses = parse(instr)?;
        let mut state = CursorState::new();
        let mut prev_node: Option<u32> = None;
        for i in 0..traj.nodes.len() {
            let obs = env.observation(traj.nodes[i], traj.headings[i])?;
            state.skip_unmatchable(&clauses, &obs);
            let mut features: Vec<[f64; NUM_FEATURES]> = obs
                .candidates
                .iter()
                .map(|c| extract_features(&clauses, state, &obs, prev_node, ActionRef::Move(c)))
                .collect();
            features.push(extract_features(
                &clauses,
                state,
                &obs,
                prev_node,
                ActionRef::Stop,
            ));
            let label = if i + 1 < traj.nodes.len() {
                let next = traj.nodes[i + 1];
                let idx = obs
                    .candidates
                    .iter()
                    .position(|c| c.node == next)
                    .ok_or_else(|| {
                        Error::Invariant(format!(
                            "trajectory {} step {} is not an edge",
                            traj.traj_id, i
                        ))
                    })?;
                state.observe_move(&clauses, &obs.candidates[idx], &obs);
                prev_node = Some(traj.nodes[i]);
                idx
            } else {
                features.len() - 1
            };
            examples.push(StepExample { features, label });
        }
    }
    Ok(examples)
}

/// Mean cross-entropy plus L2, and its gradient.
fn loss_and_grad(examples: &[StepExample], w: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; NUM_FEATURES];
    for ex in examples {
        let logits: Vec<f64> = ex.features.iter().map(|f| dot(w, f)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= (exps[ex.label] / z).ln();
        for (a, (f, e)) in ex.features.iter().zip(&exps).enumerate() {
            let p = e / z;
            let coeff = p - if a == ex.label { 1.0 } else { 0.0 };
            for (g, x) in grad.iter_mut().zip(f) {
                *g += coeff * x;
            }
        }
    }
    let n = examples.len() as f64;
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    for (g, &wi) in grad.iter_mut().zip(w) {
        *g += l2 * wi;
    }
    loss += 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    (loss, grad)
}

/// Gradient descent with backtracking: each step halves until the loss
/// actually decreases, so the recorded loss curve is non-increasing.
fn descend(
    examples: &[StepExample],
    mut w: Vec<f64>,
    epochs: usize,
    lr: f64,
    l2: f64,
    losses: &mut Vec<f64>,
) -> Vec<f64> {
    if examples.is_empty() {
        return w;
    }
    let (mut loss, mut grad) = loss_and_grad(examples, &w, l2);
    losses.push(loss);
    for _ in 0..epochs {
        let mut step = lr;
        let mut improved = false;
        while step > 1e-12 {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi - step * g).collect();
            let (trial_loss, trial_grad) = loss_and_grad(examples, &trial, l2);
            if trial_loss <= loss {
                w = trial;
                loss = trial_loss;
                grad = trial_grad;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        losses.push(loss);
        if !improved {
            break;
        }
    }
    w
}

/// Train the navigator: the main pool first, then a light pass over the
/// seed set. Fully deterministic in its inputs.
pub fn train_navigator(
    worlds: &WorldSet,
    pretrain: &[(&Trajectory, &Instruction)],
    finetune: &[(&Trajectory, &Instruction)],
    init: Option<&NavigatorParams>,
    config: &NavTrainConfig,
) -> Result<NavigatorParams> {
    train_navigator_traced(worlds, pretrain, finetune, init, config).map(|(p, _)| p)
}

/// Like [`train_navigator`], also returning the loss curve (pretrain then
/// fine-tune, concatenated).
pub fn train_navigator_traced(
    worlds: &WorldSet,
    pretrain: &[(&Trajectory, &Instruction)],
    finetune: &[(&Trajectory, &Instruction)],
    init: Option<&NavigatorParams>,
    config: &NavTrainConfig,
) -> Result<(NavigatorParams, Vec<f64>)> {
    if pretrain.is_empty() && finetune.is_empty() {
        return Err(Error::EmptyInput("navigator training pairs"));
    }
    let start = match init {
        Some(p) => {
            p.validate()?;
            p.clone()
        }
        None => NavigatorParams::zeroed(),
    };
    let pre_examples = collect_examples(worlds, pretrain)?;
    let fine_examples = collect_examples(worlds, finetune)?;
    let mut losses = Vec::new();
    let mut w = descend(
        &pre_examples,
        start.weights,
        config.pretrain_epochs,
        config.learning_rate,
        config.l2,
        &mut losses,
    );
    w = descend(
        &fine_examples,
        w,
        config.finetune_epochs,
        config.learning_rate,
        config.l2,
        &mut losses,
    );
    Ok((
        NavigatorParams {
            version: start.version + 1,
            feature_names: start.feature_names,
            weights: w,
        },
        losses,
    ))
}

/// Fraction of teacher decisions the params reproduce exactly; a cheap
/// training-quality probe.
pub fn teacher_agreement(
    worlds: &WorldSet,
    params: &NavigatorParams,
    pairs: &[(&Trajectory, &Instruction)],
) -> Result<f64> {
    params.validate()?;
    let examples = collect_examples(worlds, pairs)?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("teacher agreement pairs"));
    }
    let mut hits = 0usize;
    for ex in &examples {
        let scores: Vec<f64> = ex.features.iter().map(|f| dot(&params.weights, f)).collect();
        // Mirror the follow-time tie rules: stop (the final action) wins
        // ties against moves; earlier candidates win ties between moves.
        let stop_idx = scores.len() - 1;
        let mut best = stop_idx;
        for (i, &s) in scores.iter().enumerate().take(stop_idx) {
            if s > scores[best] {
                best = i;
            }
        }
        if best == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instr::{oracle_annotate, CorruptionConfig};
    use crate::nav_metrics::{score_episode, SUCCESS_RADIUS_M};
    use crate::traj::sample_trajectories;
    use crate::world::{generate_environment, Split, WorldGenConfig};

    fn fixture() -> (WorldSet, Vec<(Trajectory, Instruction)>) {
        let env = generate_environment(&WorldGenConfig::default(), Split::Train, 0, 17).unwrap();
        let trajs = sample_trajectories(&env, 80, (4, 7), 3).unwrap();
        let pairs: Vec<(Trajectory, Instruction)> = trajs
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let instr =
                    oracle_annotate(&env, &t, &CorruptionConfig::none(), i as u64).unwrap();
                (t, instr)
            })
            .collect();
        let mut worlds = WorldSet::new();
        worlds.insert(env);
        (worlds, pairs)
    }

    fn as_refs(pairs: &[(Trajectory, Instruction)]) -> Vec<(&Trajectory, &Instruction)> {
        pairs.iter().map(|(t, i)| (t, i)).collect()
    }

    #[test]
    fn cursor_advances_on_turn_then_move_and_forces_after_stalls() {
        let (worlds, pairs) = fixture();
        let env = worlds.get(&pairs[0].0.env_id).unwrap();
        let traj = &pairs[0].0;
        let clauses = parse(&pairs[0].1).unwrap();
        let mut state = CursorState::new();
        // Walk the teacher trajectory; the cursor must land on the stop
        // clause by the end and never pass it.
        let mut prev = 0usize;
        for i in 0..traj.nodes.len() - 1 {
            let obs = env.observation(traj.nodes[i], traj.headings[i]).unwrap();
            let cand = obs
                .candidates
                .iter()
                .find(|c| c.node == traj.nodes[i + 1])
                .unwrap();
            state.observe_move(&clauses, cand, &obs);
            assert!(state.cursor < clauses.len());
            assert!(state.cursor >= prev, "cursor never retreats");
            prev = state.cursor;
        }
        assert_eq!(
            state.cursor,
            clauses.len() - 1,
            "clean teacher walk should consume all clauses"
        );

        // Forced advance: a cursor stuck on an unmatchable clause moves on
        // after STALL_LIMIT steps.
        let mut stuck = CursorState::new();
        let obs = env.observation(traj.nodes[0], traj.headings[0]).unwrap();
        let cand = &obs.candidates[0];
        let unmatchable = parse(&Instruction::from_text("turn around , stop")).unwrap();
        let steps_needed = (0..)
            .take(10)
            .take_while(|_| {
                if stuck.cursor == 0 {
                    stuck.observe_move(&unmatchable, cand, &obs);
                    true
                } else {
                    false
                }
            })
            .count();
        assert!(
            (cand.delta_deg.abs() >= crate::instr::AROUND_MIN_DEG && steps_needed == 1)
                || steps_needed == STALL_LIMIT
        );
        assert_eq!(stuck.cursor, 1);
        // And it parks there: the stop clause is never passed.
        for _ in 0..5 {
            stuck.observe_move(&unmatchable, cand, &obs);
        }
        assert_eq!(stuck.cursor, 1);
    }

    #[test]
    fn stop_features_fire_only_for_stop_actions() {
        let (worlds, pairs) = fixture();
        let env = worlds.get(&pairs[0].0.env_id).unwrap();
        let traj = &pairs[0].0;
        let clauses = parse(&pairs[0].1).unwrap();
        let obs = env.observation(traj.nodes[0], traj.headings[0]).unwrap();
        let state = CursorState::new();
        let stop = extract_features(&clauses, state, &obs, None, ActionRef::Stop);
        assert_eq!(stop[0], 1.0);
        assert_eq!(stop[3], 1.0, "stopping on clause 0 is premature");
        for cand in &obs.candidates {
            let f = extract_features(&clauses, state, &obs, None, ActionRef::Move(cand));
            assert_eq!(f[0], 0.0);
            assert_eq!(f[1] + f[2] + f[3] + f[4], 0.0);
            assert!((0.0..=1.0).contains(&f[11]));
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_non_increasing() {
        let (worlds, pairs) = fixture();
        let refs = as_refs(&pairs);
        let config = NavTrainConfig {
            pretrain_epochs: 25,
            finetune_epochs: 0,
            ..NavTrainConfig::default()
        };
        let (p1, losses) =
            train_navigator_traced(&worlds, &refs, &[], None, &config).unwrap();
        let (p2, _) = train_navigator_traced(&worlds, &refs, &[], None, &config).unwrap();
        assert_eq!(p1.weights, p2.weights, "training must be bit-reproducible");
        assert_eq!(p1.version, 1);
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "loss increased: {pair:?}");
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn trained_navigator_follows_clean_instructions() {
        let (worlds, pairs) = fixture();
        let refs = as_refs(&pairs);
        let params =
            train_navigator(&worlds, &refs, &[], None, &NavTrainConfig::default()).unwrap();
        let agreement = teacher_agreement(&worlds, &params, &refs).unwrap();
        assert!(agreement >= 0.9, "teacher agreement {agreement}");

        let env = worlds.get(&pairs[0].0.env_id).unwrap();
        let mut sr_sum = 0.0;
        let mut ndtw_sum = 0.0;
        for (traj, instr) in &pairs[..40] {
            let ep = follow(
                &params,
                env,
                instr,
                "ep",
                traj.start(),
                traj.start_heading(),
                DEFAULT_MAX_STEPS,
            )
            .unwrap();
            ep.trajectory.validate(env).unwrap();
            let s = score_episode(env, &ep.trajectory.nodes, &traj.nodes, SUCCESS_RADIUS_M)
                .unwrap();
            sr_sum += s.sr;
            ndtw_sum += s.ndtw;
        }
        let sr = sr_sum / 40.0;
        let ndtw = ndtw_sum / 40.0;
        assert!(sr >= 0.8, "success rate {sr} too low on clean training data");
        assert!(ndtw >= 0.8, "mean nDTW {ndtw} too low on clean training data");
    }

    #[test]
    fn untrained_navigator_is_lost() {
        let (worlds, pairs) = fixture();
        let env = worlds.get(&pairs[0].0.env_id).unwrap();
        let params = NavigatorParams::zeroed();
        // All scores tie at zero, and ties prefer stopping: the zero
        // navigator stops immediately.
        let (traj, instr) = &pairs[0];
        let ep = follow(
            &params,
            env,
            instr,
            "ep",
            traj.start(),
            traj.start_heading(),
            DEFAULT_MAX_STEPS,
        )
        .unwrap();
        assert_eq!(ep.trajectory.nodes.len(), 1);
        assert!(!ep.reached_max_steps);
    }

    #[test]
    fn follow_rejects_bad_inputs() {
        let (worlds, pairs) = fixture();
        let env = worlds.get(&pairs[0].0.env_id).unwrap();
        let params = NavigatorParams::zeroed();
        assert!(follow(
            &params,
            env,
            &Instruction::from_text("gibberish , stop"),
            "ep",
            0,
            0.0,
            5
        )
        .is_err());
        assert!(follow(
            &params,
            env,
            &pairs[0].1,
            "ep",
            9999,
            0.0,
            5
        )
        .is_err());
        let mut bad = params;
        bad.weights.pop();
        assert!(follow(&bad, env, &pairs[0].1, "ep", 0, 0.0, 5).is_err());
    }
}

//! The instruction language: a small comma-delimited command grammar, the
//! oracle that annotates trajectories with it, a corruption model for
//! making realistic noisy annotations, and trajectory encodings.
//!
//! Grammar (one instruction is a comma-separated clause list whose last
//! clause must be a stop clause):
//!
//! ```text
//! instruction := clause ("," clause)* ; final clause is a stop clause
//! clause      := "turn" ["slightly" | "sharply"] ("left" | "right")
//!              | "turn" "around"
//!              | "walk" "past" LANDMARK
//!              | "head" "toward" LANDMARK
//!              | "stop" ["near" LANDMARK]
//! ```
//!
//! Landmarks come from a fixed lexicon where every id has a primary
//! surface form and one synonym; both parse back to the same id, which is
//! what proposition comparison canonicalizes to.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::traj::{Action, Trajectory};
use crate::world::{norm_360, sector_of, Environment, LandmarkId};
use crate::{Error, Result};

/// Primary and synonym surface forms for the first 40 landmark ids. Ids
/// beyond the table get synthesized names (`objN` / `itemN`).
pub const LEXICON: [(&str, &str); 40] = [
    ("bed", "mattress"),
    ("sofa", "couch"),
    ("lamp", "lantern"),
    ("table", "desk"),
    ("chair", "stool"),
    ("plant", "fern"),
    ("mirror", "glass"),
    ("shelf", "rack"),
    ("sink", "basin"),
    ("stove", "oven"),
    ("fridge", "icebox"),
    ("door", "gate"),
    ("window", "pane"),
    ("rug", "carpet"),
    ("clock", "dial"),
    ("vase", "urn"),
    ("piano", "organ"),
    ("painting", "portrait"),
    ("curtain", "drape"),
    ("bench", "pew"),
    ("cabinet", "cupboard"),
    ("tv", "screen"),
    ("fan", "blower"),
    ("heater", "radiator"),
    ("pillow", "cushion"),
    ("blanket", "quilt"),
    ("towel", "cloth"),
    ("mat", "pad"),
    ("trunk", "chest"),
    ("wardrobe", "closet"),
    ("railing", "banister"),
    ("stairs", "steps"),
    ("counter", "bar"),
    ("fountain", "spring"),
    ("statue", "bust"),
    ("barrel", "cask"),
    ("ladder", "rungs"),
    ("pot", "kettle"),
    ("basket", "hamper"),
    ("candle", "taper"),
];

/// Surface form of a landmark id.
pub fn landmark_surface(id: LandmarkId, alt: bool) -> String {
    match LEXICON.get(id.0 as usize) {
        Some(&(primary, synonym)) => {
            if alt { synonym } else { primary }.to_string()
        }
        None => {
            if alt {
                format!("item{}", id.0)
            } else {
                format!("obj{}", id.0)
            }
        }
    }
}

fn surface_table() -> &'static BTreeMap<&'static str, (u16, bool)> {
    static TABLE: OnceLock<BTreeMap<&'static str, (u16, bool)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut map = BTreeMap::new();
        for (id, &(primary, synonym)) in LEXICON.iter().enumerate() {
            map.insert(primary, (id as u16, false));
            map.insert(synonym, (id as u16, true));
        }
        map
    })
}

/// Parse a surface form back to a landmark reference.
pub fn landmark_lookup(token: &str) -> Option<LandmarkRef> {
    if let Some(&(id, alt)) = surface_table().get(token) {
        return Some(LandmarkRef {
            id: LandmarkId(id),
            alt,
        });
    }
    for (prefix, alt) in [("obj", false), ("item", true)] {
        if let Some(rest) = token.strip_prefix(prefix) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(n) = rest.parse::<u16>() {
                    if n as usize >= LEXICON.len() {
                        return Some(LandmarkRef {
                            id: LandmarkId(n),
                            alt,
                        });
                    }
                }
            }
        }
    }
    None
}

/// A landmark mention: which landmark, and whether the synonym surface
/// form was used. Proposition comparison ignores `alt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LandmarkRef {
    pub id: LandmarkId,
    pub alt: bool,
}

impl LandmarkRef {
    pub fn primary(id: LandmarkId) -> Self {
        LandmarkRef { id, alt: false }
    }

    pub fn surface(&self) -> String {
        landmark_surface(self.id, self.alt)
    }
}

/// Turn direction as mentioned in instructions; also the symbol alphabet
/// of directional propositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dir {
    Left,
    Right,
    Around,
}

/// Turn magnitude bucket. `Around` turns ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnMag {
    Slight,
    Normal,
    Sharp,
}

/// Verb of a movement clause; doubles as the relation it asserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveVerb {
    Past,
    Toward,
}

/// Relation symbol of a semantic proposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Past,
    Toward,
    Near,
}

/// One clause of a parsed instruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clause {
    Turn { dir: Dir, mag: TurnMag },
    Move { verb: MoveVerb, lm: LandmarkRef },
    Stop { near: Option<LandmarkRef> },
}

/// A tokenized instruction. Serialized as its space-joined text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Instruction {
    tokens: Vec<String>,
}

impl Instruction {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Instruction { tokens }
    }

    pub fn from_text(text: &str) -> Self {
        Instruction {
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl From<String> for Instruction {
    fn from(text: String) -> Self {
        Instruction::from_text(&text)
    }
}

impl From<Instruction> for String {
    fn from(instr: Instruction) -> Self {
        instr.text()
    }
}

impl std::fmt::Display for Instruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

/// Turn magnitude boundaries, degrees. A delta below `SLIGHT_MAX_DEG` is
/// slight, below `NORMAL_MAX_DEG` normal, then sharp until `AROUND_MIN_DEG`
/// where the turn reads as "turn around".
pub const SLIGHT_MAX_DEG: f64 = 60.0;
pub const NORMAL_MAX_DEG: f64 = 120.0;
pub const AROUND_MIN_DEG: f64 = 157.5;

/// Bucket a signed turn delta (positive clockwise) into clause terms.
pub fn bucket_turn(delta_deg: f64) -> (Dir, TurnMag) {
    let mag = delta_deg.abs();
    if mag >= AROUND_MIN_DEG {
        return (Dir::Around, TurnMag::Normal);
    }
    let dir = if delta_deg < 0.0 { Dir::Left } else { Dir::Right };
    let bucket = if mag < SLIGHT_MAX_DEG {
        TurnMag::Slight
    } else if mag < NORMAL_MAX_DEG {
        TurnMag::Normal
    } else {
        TurnMag::Sharp
    };
    (dir, bucket)
}

/// Render clauses into instruction text tokens.
pub fn render(clauses: &[Clause]) -> Instruction {
    let mut tokens: Vec<String> = Vec::new();
    for (i, clause) in clauses.iter().enumerate() {
        if i > 0 {
            tokens.push(",".into());
        }
        match clause {
            Clause::Turn {
                dir: Dir::Around, ..
            } => {
                tokens.push("turn".into());
                tokens.push("around".into());
            }
            Clause::Turn { dir, mag } => {
                tokens.push("turn".into());
                match mag {
                    TurnMag::Slight => tokens.push("slightly".into()),
                    TurnMag::Sharp => tokens.push("sharply".into()),
                    TurnMag::Normal => {}
                }
                tokens.push(
                    match dir {
                        Dir::Left => "left",
                        Dir::Right => "right",
                        Dir::Around => unreachable!("handled above"),
                    }
                    .into(),
                );
            }
            Clause::Move { verb, lm } => {
                match verb {
                    MoveVerb::Past => {
                        tokens.push("walk".into());
                        tokens.push("past".into());
                    }
                    MoveVerb::Toward => {
                        tokens.push("head".into());
                        tokens.push("toward".into());
                    }
                }
                tokens.push(lm.surface());
            }
            Clause::Stop { near } => {
                tokens.push("stop".into());
                if let Some(lm) = near {
                    tokens.push("near".into());
                    tokens.push(lm.surface());
                }
            }
        }
    }
    Instruction::from_tokens(tokens)
}

/// Parse an instruction into clauses, enforcing the grammar and the
/// structural rule that exactly the final clause is a stop clause.
pub fn parse(instr: &Instruction) -> Result<Vec<Clause>> {
    let bad = |msg: String| Err(Error::UnparseableInstruction(msg));
    if instr.tokens.is_empty() {
        return bad("empty instruction".into());
    }
    let groups: Vec<&[String]> = instr
        .tokens
        .split(|t| t == ",")
        .map(|g| g as &[String])
        .collect();
    let mut clauses = Vec::with_capacity(groups.len());
    for group in &groups {
        let words: Vec<&str> = group.iter().map(String::as_str).collect();
        let lm = |token: &str| -> Result<LandmarkRef> {
            landmark_lookup(token).ok_or_else(|| {
                Error::UnparseableInstruction(format!("unknown landmark {token:?}"))
            })
        };
        let side_of = |side: &str| if side == "left" { Dir::Left } else { Dir::Right };
        let clause = match words[..] {
            ["turn", "around"] => Clause::Turn {
                dir: Dir::Around,
                mag: TurnMag::Normal,
            },
            ["turn", side @ ("left" | "right")] => Clause::Turn {
                dir: side_of(side),
                mag: TurnMag::Normal,
            },
            ["turn", adv @ ("slightly" | "sharply"), side @ ("left" | "right")] => {
                Clause::Turn {
                    dir: side_of(side),
                    mag: if adv == "slightly" {
                        TurnMag::Slight
                    } else {
                        TurnMag::Sharp
                    },
                }
            }
            ["walk", "past", lm_tok] => Clause::Move {
                verb: MoveVerb::Past,
                lm: lm(lm_tok)?,
            },
            ["head", "toward", lm_tok] => Clause::Move {
                verb: MoveVerb::Toward,
                lm: lm(lm_tok)?,
            },
            ["stop"] => Clause::Stop { near: None },
            ["stop", "near", lm_tok] => Clause::Stop {
                near: Some(lm(lm_tok)?),
            },
            [] => return bad("empty clause".into()),
            ref other => return bad(format!("unrecognized clause {:?}", other.join(" "))),
        };
        clauses.push(clause);
    }
    for (i, clause) in clauses.iter().enumerate() {
        let is_stop = matches!(clause, Clause::Stop { .. });
        let is_last = i + 1 == clauses.len();
        if is_last && !is_stop {
            return bad("instruction must end with a stop clause".into());
        }
        if !is_last && is_stop {
            return bad("stop clause before the end".into());
        }
    }
    Ok(clauses)
}

/// What an instruction asserts: an unordered set of (relation, landmark)
/// pairs plus the ordered sequence of turn directions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Propositions {
    pub semantic: BTreeSet<(Relation, LandmarkId)>,
    pub directional: Vec<Dir>,
}

/// Extract propositions from parsed clauses. Landmark mentions
/// canonicalize to ids, so synonym choice never changes the result.
pub fn propositions(clauses: &[Clause]) -> Propositions {
    let mut props = Propositions::default();
    for clause in clauses {
        match clause {
            Clause::Turn { dir, .. } => props.directional.push(*dir),
            Clause::Move { verb, lm } => {
                let rel = match verb {
                    MoveVerb::Past => Relation::Past,
                    MoveVerb::Toward => Relation::Toward,
                };
                props.semantic.insert((rel, lm.id));
            }
            Clause::Stop { near: Some(lm) } => {
                props.semantic.insert((Relation::Near, lm.id));
            }
            Clause::Stop { near: None } => {}
        }
    }
    props
}

/// Parse and extract propositions in one step.
pub fn parse_propositions(instr: &Instruction) -> Result<Propositions> {
    Ok(propositions(&parse(instr)?))
}

/// What happened at one transcript step, annotated with the landmark that
/// grounds it: the one dead ahead *at the node where the action is
/// committed*, under the post-action heading. For a forward move that is
/// the source node facing along the edge — which is exactly what an agent
/// standing there can see — for turns and stops the current node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajEvent {
    /// Index into the trajectory's action list.
    pub step: usize,
    pub kind: EventKind,
    /// Node the agent occupies after the action.
    pub node: u32,
    /// Pose heading after the action, `[0, 360)`.
    pub heading: f64,
    /// Landmark grounding the action (see type docs).
    pub salient: LandmarkId,
    /// Exact signed delta for turn events.
    pub turn_delta: Option<f64>,
}

/// Classified action kinds; `MoveFinal` is the last forward move before
/// the stop, which instructions narrate with "head toward".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TurnLeft,
    TurnRight,
    TurnAround,
    Move,
    MoveFinal,
    Stop,
}

/// The landmark in the compass sector a heading points into.
pub fn ahead_landmark(env: &Environment, node: u32, heading_deg: f64) -> Result<LandmarkId> {
    let sector = sector_of(heading_deg) as usize;
    env.node(node)?
        .landmarks[sector]
        .first()
        .copied()
        .ok_or_else(|| {
            Error::Invariant(format!(
                "node {} of {} has no landmark in sector {}",
                node, env.env_id, sector
            ))
        })
}

/// Classify every action of a trajectory into an event, tracking pose.
pub fn extract_events(env: &Environment, traj: &Trajectory) -> Result<Vec<TrajEvent>> {
    let mut at = traj.nodes[0];
    let mut pose = traj.headings[0];
    let last_forward = traj
        .actions
        .iter()
        .rposition(|a| matches!(a, Action::Forward { .. }));
    let mut events = Vec::with_capacity(traj.actions.len());
    for (step, action) in traj.actions.iter().enumerate() {
        let event = match *action {
            Action::Turn { delta_deg } => {
                pose = norm_360(pose + delta_deg);
                let kind = match bucket_turn(delta_deg).0 {
                    Dir::Left => EventKind::TurnLeft,
                    Dir::Right => EventKind::TurnRight,
                    Dir::Around => EventKind::TurnAround,
                };
                TrajEvent {
                    step,
                    kind,
                    node: at,
                    heading: pose,
                    salient: ahead_landmark(env, at, pose)?,
                    turn_delta: Some(delta_deg),
                }
            }
            Action::Forward { to } => {
                let bearing = crate::world::bearing_deg(
                    &env.node(at)?.pos,
                    &env.node(to)?.pos,
                );
                let salient = ahead_landmark(env, at, bearing)?;
                at = to;
                pose = bearing;
                TrajEvent {
                    step,
                    kind: if Some(step) == last_forward {
                        EventKind::MoveFinal
                    } else {
                        EventKind::Move
                    },
                    node: at,
                    heading: pose,
                    salient,
                    turn_delta: None,
                }
            }
            Action::Stop => TrajEvent {
                step,
                kind: EventKind::Stop,
                node: at,
                heading: pose,
                salient: ahead_landmark(env, at, pose)?,
                turn_delta: None,
            },
        };
        events.push(event);
    }
    Ok(events)
}

/// Noise model for oracle annotations, all rates independent per clause.
///
/// The landmark noise is a misbinding, not an hallucination: a confused
/// annotator swaps in some other landmark they saw along the route, so
/// the wrong mention still names something on the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Rebind a mentioned landmark to a random other landmark seen along
    /// the route.
    pub landmark_misbind: f64,
    /// Use the synonym surface form instead of the primary one.
    pub synonym_swap: f64,
    /// Insert an unfounded movement clause (toward some seen landmark)
    /// after a clause.
    pub spurious_insert: f64,
    /// Flip left and right in a turn clause.
    pub direction_flip: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            landmark_misbind: 0.40,
            synonym_swap: 0.15,
            spurious_insert: 0.20,
            direction_flip: 0.30,
        }
    }
}

impl CorruptionConfig {
    /// No corruption at all; what evaluation references use.
    pub fn none() -> Self {
        CorruptionConfig {
            landmark_misbind: 0.0,
            synonym_swap: 0.0,
            spurious_insert: 0.0,
            direction_flip: 0.0,
        }
    }

    /// All rates multiplied by `factor`, clamped to probabilities.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |p: f64| (p * factor).clamp(0.0, 1.0);
        CorruptionConfig {
            landmark_misbind: s(self.landmark_misbind),
            synonym_swap: s(self.synonym_swap),
            spurious_insert: s(self.spurious_insert),
            direction_flip: s(self.direction_flip),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("landmark_misbind", self.landmark_misbind),
            ("synonym_swap", self.synonym_swap),
            ("spurious_insert", self.spurious_insert),
            ("direction_flip", self.direction_flip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "corruption rate {name} = {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Where each clause of a traced annotation came from: the transcript step
/// it narrates, or nothing for spurious insertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClauseOrigin {
    pub clause: usize,
    pub step: Option<usize>,
}

/// Annotate a trajectory with an instruction, one clause per event, then
/// corrupt it. Deterministic in `(env, traj, corruption, seed)`.
pub fn oracle_annotate(
    env: &Environment,
    traj: &Trajectory,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<Instruction> {
    oracle_annotate_traced(env, traj, corruption, seed).map(|(instr, _)| instr)
}

/// Like [`oracle_annotate`], also reporting which transcript step each
/// emitted clause narrates.
pub fn oracle_annotate_traced(
    env: &Environment,
    traj: &Trajectory,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<(Instruction, Vec<ClauseOrigin>)> {
    corruption.validate()?;
    let events = extract_events(env, traj)?;
    let pool = route_landmarks(env, traj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut clauses: Vec<Clause> = Vec::new();
    let mut origins: Vec<ClauseOrigin> = Vec::new();
    for event in &events {
        let mut clause = match event.kind {
            EventKind::TurnLeft | EventKind::TurnRight | EventKind::TurnAround => {
                let delta = event.turn_delta.expect("turn events carry deltas");
                let (dir, mag) = bucket_turn(delta);
                Clause::Turn { dir, mag }
            }
            EventKind::Move => Clause::Move {
                verb: MoveVerb::Past,
                lm: LandmarkRef::primary(event.salient),
            },
            EventKind::MoveFinal => Clause::Move {
                verb: MoveVerb::Toward,
                lm: LandmarkRef::primary(event.salient),
            },
            EventKind::Stop => Clause::Stop {
                near: Some(LandmarkRef::primary(event.salient)),
            },
        };

        let spurious = corrupt_clause(&mut clause, corruption, &pool, &mut rng);
        origins.push(ClauseOrigin {
            clause: clauses.len(),
            step: Some(event.step),
        });
        clauses.push(clause);
        if let Some(extra) = spurious {
            origins.push(ClauseOrigin {
                clause: clauses.len(),
                step: None,
            });
            clauses.push(extra);
        }
    }
    Ok((render(&clauses), origins))
}

/// Distinct landmarks visible anywhere along a trajectory, in id order:
/// the pool misbindings and spurious mentions draw from, and exactly the
/// bag a route-overlap score counts. Wrong mentions stay inside it on
/// purpose, so overlap alone cannot tell them from right ones.
pub fn route_landmarks(env: &Environment, traj: &Trajectory) -> Result<Vec<LandmarkId>> {
    let mut pool = BTreeSet::new();
    for &node in &traj.nodes {
        for sector in &env.node(node)?.landmarks {
            pool.extend(sector.iter().copied());
        }
    }
    Ok(pool.into_iter().collect())
}

/// Uniform draw from `pool` avoiding `current`, or `None` when the pool
/// offers nothing else to confuse it with.
pub(crate) fn draw_other(
    pool: &[LandmarkId],
    current: LandmarkId,
    rng: &mut ChaCha8Rng,
) -> Option<LandmarkId> {
    let others = pool.iter().filter(|&&id| id != current).count();
    if others == 0 {
        return None;
    }
    let k = rng.gen_range(0..others);
    pool.iter().filter(|&&id| id != current).nth(k).copied()
}

/// Per-clause noise, each op an independent draw in a fixed order so
/// results are reproducible token for token. Returns a spurious clause
/// to insert after this one, if that op fired.
fn corrupt_clause(
    clause: &mut Clause,
    corruption: &CorruptionConfig,
    pool: &[LandmarkId],
    rng: &mut ChaCha8Rng,
) -> Option<Clause> {
    let mentioned: Option<&mut LandmarkRef> = match clause {
        Clause::Move { lm, .. } => Some(lm),
        Clause::Stop { near } => near.as_mut(),
        Clause::Turn { .. } => None,
    };
    if let Some(lm) = mentioned {
        if rng.gen_bool(corruption.landmark_misbind) {
            if let Some(wrong) = draw_other(pool, lm.id, rng) {
                lm.id = wrong;
            }
        }
        if rng.gen_bool(corruption.synonym_swap) {
            lm.alt = true;
        }
    }
    if let Clause::Turn { dir, .. } = clause {
        if *dir != Dir::Around && rng.gen_bool(corruption.direction_flip) {
            *dir = if *dir == Dir::Left { Dir::Right } else { Dir::Left };
        }
    }
    if !matches!(clause, Clause::Stop { .. })
        && rng.gen_bool(corruption.spurious_insert)
        && !pool.is_empty()
    {
        Some(Clause::Move {
            verb: MoveVerb::Past,
            lm: LandmarkRef::primary(pool[rng.gen_range(0..pool.len())]),
        })
    } else {
        None
    }
}

/// Re-noise an existing instruction with the oracle's noise model, the
/// trajectory supplying the misbinding pool. Deterministic in
/// `(env, traj, instr, corruption, seed)`.
pub fn corrupt_instruction(
    env: &Environment,
    traj: &Trajectory,
    instr: &Instruction,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<Instruction> {
    corruption.validate()?;
    let pool = route_landmarks(env, traj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mut clause in parse(instr)? {
        let spurious = corrupt_clause(&mut clause, corruption, &pool, &mut rng);
        out.push(clause);
        if let Some(extra) = spurious {
            out.push(extra);
        }
    }
    Ok(render(&out))
}

/// How a trajectory is serialized into tokens for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// Observation block, then the action taken there, step by step.
    Interleaved,
    /// Observation blocks only; action identity must be guessed.
    ObsOnly,
    /// All observation blocks first, then all action tokens.
    ObsThenActions,
}

impl std::fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncodingMode::Interleaved => "interleaved",
            EncodingMode::ObsOnly => "obs_only",
            EncodingMode::ObsThenActions => "obs_then_actions",
        })
    }
}

fn action_token(event: &TrajEvent) -> String {
    match event.kind {
        EventKind::TurnLeft | EventKind::TurnRight => {
            let delta = event.turn_delta.expect("turn events carry deltas");
            let (dir, mag) = bucket_turn(delta);
            let side = if dir == Dir::Left { "left" } else { "right" };
            match mag {
                TurnMag::Slight => format!("a[{side}_slight]"),
                TurnMag::Normal => format!("a[{side}]"),
                TurnMag::Sharp => format!("a[{side}_sharp]"),
            }
        }
        EventKind::TurnAround => "a[around]".into(),
        EventKind::Move | EventKind::MoveFinal => "a[fwd]".into(),
        EventKind::Stop => "a[stop]".into(),
    }
}

fn obs_token(event: &TrajEvent) -> String {
    format!("o[{}]", landmark_surface(event.salient, false))
}

/// Serialize a trajectory into encoding tokens under a mode. Interleaved
/// and obs-then-actions contain the same tokens in different orders;
/// obs-only drops the action tokens entirely.
pub fn encode_trajectory(
    env: &Environment,
    traj: &Trajectory,
    mode: EncodingMode,
) -> Result<Vec<String>> {
    let events = extract_events(env, traj)?;
    let tokens = match mode {
        EncodingMode::Interleaved => events
            .iter()
            .flat_map(|e| [obs_token(e), action_token(e)])
            .collect(),
        EncodingMode::ObsOnly => events.iter().map(obs_token).collect(),
        EncodingMode::ObsThenActions => {
            let mut tokens: Vec<String> = events.iter().map(obs_token).collect();
            tokens.extend(events.iter().map(action_token));
            tokens
        }
    };
    Ok(tokens)
}

/// Corpus-level statistics over instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub instructions: usize,
    pub environments: usize,
    pub vocab: usize,
    pub mean_tokens: f64,
}

/// Count instructions, distinct environments, distinct tokens, and mean
/// instruction length over `(env_id, instruction)` items.
pub fn vocab_stats<'a, I>(items: I) -> DatasetStats
where
    I: IntoIterator<Item = (&'a str, &'a Instruction)>,
{
    let mut envs = BTreeSet::new();
    let mut vocab = BTreeSet::new();
    let mut instructions = 0usize;
    let mut total_tokens = 0usize;
    for (env_id, instr) in items {
        instructions += 1;
        envs.insert(env_id.to_string());
        for token in instr.tokens() {
            vocab.insert(token.clone());
        }
        total_tokens += instr.tokens().len();
    }
    DatasetStats {
        instructions,
        environments: envs.len(),
        vocab: vocab.len(),
        mean_tokens: if instructions == 0 {
            0.0
        } else {
            total_tokens as f64 / instructions as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{from_path, sample_trajectories};
    use crate::world::{generate_environment, Split, WorldGenConfig};

    fn world() -> Environment {
        generate_environment(&WorldGenConfig::default(), Split::Train, 0, 5).unwrap()
    }

    #[test]
    fn grammar_round_trips() {
        let text = "turn slightly left , walk past bed , head toward couch , stop near lamp";
        let instr = Instruction::from_text(text);
        let clauses = parse(&instr).unwrap();
        assert_eq!(clauses.len(), 4);
        assert_eq!(render(&clauses).text(), text);
        // The synonym flag survives rendering.
        assert!(matches!(
            clauses[2],
            Clause::Move { verb: MoveVerb::Toward, lm } if lm.alt && lm.id == LandmarkId(1)
        ));
    }

    #[test]
    fn parse_rejects_malformed_instructions() {
        for text in [
            "",
            "walk past bed",                 // missing stop
            "stop , walk past bed , stop",   // interior stop
            "turn left stop",                // missing comma
            "walk past xyzzy , stop",        // unknown landmark
            "turn sharply around , stop",    // adverb on around
            "walk past bed , , stop",        // empty clause
        ] {
            assert!(
                parse(&Instruction::from_text(text)).is_err(),
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn propositions_canonicalize_synonyms() {
        let a = parse_propositions(&Instruction::from_text(
            "head toward piano , stop near bench",
        ))
        .unwrap();
        let b = parse_propositions(&Instruction::from_text(
            "head toward organ , stop near pew",
        ))
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.semantic.len(), 2);
        assert!(a.directional.is_empty());
    }

    #[test]
    fn directional_symbols_preserve_order_and_around() {
        let props = parse_propositions(&Instruction::from_text(
            "turn left , turn around , turn sharply right , stop",
        ))
        .unwrap();
        assert_eq!(props.directional, vec![Dir::Left, Dir::Around, Dir::Right]);
    }

    #[test]
    fn turn_buckets_follow_the_boundaries() {
        assert_eq!(bucket_turn(45.0), (Dir::Right, TurnMag::Slight));
        assert_eq!(bucket_turn(-59.9), (Dir::Left, TurnMag::Slight));
        assert_eq!(bucket_turn(60.0), (Dir::Right, TurnMag::Normal));
        assert_eq!(bucket_turn(-119.9), (Dir::Left, TurnMag::Normal));
        assert_eq!(bucket_turn(120.0), (Dir::Right, TurnMag::Sharp));
        assert_eq!(bucket_turn(157.4), (Dir::Right, TurnMag::Sharp));
        assert_eq!(bucket_turn(157.5).0, Dir::Around);
        assert_eq!(bucket_turn(180.0).0, Dir::Around);
        assert_eq!(bucket_turn(-170.0).0, Dir::Around);
    }

    #[test]
    fn synthesized_landmarks_round_trip() {
        let lm = LandmarkRef {
            id: LandmarkId(57),
            alt: false,
        };
        assert_eq!(lm.surface(), "obj57");
        assert_eq!(landmark_lookup("obj57"), Some(lm));
        assert_eq!(
            landmark_lookup("item57"),
            Some(LandmarkRef {
                id: LandmarkId(57),
                alt: true
            })
        );
        // Synthesized names never shadow the lexicon range.
        assert_eq!(landmark_lookup("obj3"), None);
    }

    #[test]
    fn events_mirror_actions_one_to_one() {
        let env = world();
        for traj in sample_trajectories(&env, 10, (4, 7), 2).unwrap() {
            let events = extract_events(&env, &traj).unwrap();
            assert_eq!(events.len(), traj.actions.len());
            assert_eq!(events.last().unwrap().kind, EventKind::Stop);
            let finals: Vec<_> = events
                .iter()
                .filter(|e| e.kind == EventKind::MoveFinal)
                .collect();
            assert_eq!(finals.len(), 1);
            // The stop event happens where the last move arrived, and its
            // grounding landmark is observable there (dead ahead).
            let last_move = finals[0];
            let stop = events.last().unwrap();
            assert_eq!(last_move.node, stop.node);
            assert_eq!(
                stop.salient,
                ahead_landmark(&env, stop.node, stop.heading).unwrap()
            );
            // A move grounds to what was visible from its source node.
            let first_move = events.iter().find(|e| e.kind == EventKind::Move).unwrap();
            let source = traj.nodes[traj.nodes.iter().position(|&n| n == first_move.node).unwrap() - 1];
            assert_eq!(
                first_move.salient,
                ahead_landmark(&env, source, first_move.heading).unwrap()
            );
        }
    }

    #[test]
    fn clean_annotations_ground_every_clause() {
        let env = world();
        for traj in sample_trajectories(&env, 10, (4, 7), 3).unwrap() {
            let (instr, origins) =
                oracle_annotate_traced(&env, &traj, &CorruptionConfig::none(), 7).unwrap();
            let clauses = parse(&instr).unwrap();
            let events = extract_events(&env, &traj).unwrap();
            assert_eq!(clauses.len(), events.len());
            for (origin, (clause, event)) in
                origins.iter().zip(clauses.iter().zip(&events))
            {
                assert_eq!(origin.step, Some(event.step));
                match (clause, event.kind) {
                    (Clause::Turn { dir, .. }, k) => {
                        let expect = match k {
                            EventKind::TurnLeft => Dir::Left,
                            EventKind::TurnRight => Dir::Right,
                            EventKind::TurnAround => Dir::Around,
                            other => panic!("turn clause for {other:?}"),
                        };
                        assert_eq!(*dir, expect);
                    }
                    (Clause::Move { verb, lm }, EventKind::Move) => {
                        assert_eq!(*verb, MoveVerb::Past);
                        assert_eq!(lm.id, event.salient);
                        assert!(!lm.alt);
                    }
                    (Clause::Move { verb, lm }, EventKind::MoveFinal) => {
                        assert_eq!(*verb, MoveVerb::Toward);
                        assert_eq!(lm.id, event.salient);
                    }
                    (Clause::Stop { near }, EventKind::Stop) => {
                        assert_eq!(near.map(|l| l.id), Some(event.salient));
                    }
                    (c, k) => panic!("clause {c:?} for event kind {k:?}"),
                }
            }
        }
    }

    #[test]
    fn oracle_is_deterministic_and_seed_sensitive() {
        let env = world();
        let traj = &sample_trajectories(&env, 1, (5, 7), 4).unwrap()[0];
        let noisy = CorruptionConfig::default();
        let a = oracle_annotate(&env, traj, &noisy, 11).unwrap();
        let b = oracle_annotate(&env, traj, &noisy, 11).unwrap();
        assert_eq!(a, b);
        let mut any_differs = false;
        for seed in 0..20 {
            if oracle_annotate(&env, traj, &noisy, seed).unwrap() != a {
                any_differs = true;
                break;
            }
        }
        assert!(any_differs, "corruption never varied across seeds");
    }

    #[test]
    fn corrupted_annotations_stay_parseable_and_stop_final() {
        let env = world();
        let heavy = CorruptionConfig::default().scaled(3.0);
        for (i, traj) in sample_trajectories(&env, 20, (4, 7), 8)
            .unwrap()
            .iter()
            .enumerate()
        {
            let instr = oracle_annotate(&env, traj, &heavy, i as u64).unwrap();
            parse(&instr).unwrap_or_else(|e| panic!("unparseable {instr}: {e}"));
        }
    }

    #[test]
    fn misbound_mentions_stay_on_the_route() {
        let env = world();
        let heavy = CorruptionConfig::default().scaled(3.0);
        for (i, traj) in sample_trajectories(&env, 20, (4, 7), 10)
            .unwrap()
            .iter()
            .enumerate()
        {
            let pool = route_landmarks(&env, traj).unwrap();
            let instr = oracle_annotate(&env, traj, &heavy, i as u64).unwrap();
            for clause in parse(&instr).unwrap() {
                let lm = match clause {
                    Clause::Move { lm, .. } => Some(lm),
                    Clause::Stop { near } => near,
                    Clause::Turn { .. } => None,
                };
                if let Some(lm) = lm {
                    assert!(
                        pool.contains(&lm.id),
                        "mention {:?} not visible along {}",
                        lm.id,
                        traj.traj_id
                    );
                }
            }
        }
    }

    #[test]
    fn corruption_rates_are_roughly_honored() {
        let env = world();
        let flip_only = CorruptionConfig {
            landmark_misbind: 0.0,
            synonym_swap: 0.0,
            spurious_insert: 0.0,
            direction_flip: 0.5,
        };
        let mut flipped = 0usize;
        let mut turns = 0usize;
        for (i, traj) in sample_trajectories(&env, 60, (4, 7), 9)
            .unwrap()
            .iter()
            .enumerate()
        {
            let clean = parse(&oracle_annotate(&env, traj, &CorruptionConfig::none(), 0).unwrap())
                .unwrap();
            let noisy =
                parse(&oracle_annotate(&env, traj, &flip_only, i as u64).unwrap()).unwrap();
            assert_eq!(clean.len(), noisy.len());
            for (c, n) in clean.iter().zip(&noisy) {
                if let (Clause::Turn { dir: cd, .. }, Clause::Turn { dir: nd, .. }) = (c, n) {
                    if *cd != Dir::Around {
                        turns += 1;
                        if cd != nd {
                            flipped += 1;
                        }
                    }
                }
            }
        }
        assert!(turns > 50, "too few turns sampled: {turns}");
        let rate = flipped as f64 / turns as f64;
        assert!((0.35..=0.65).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn encodings_have_the_documented_shapes() {
        let env = world();
        let traj = &sample_trajectories(&env, 1, (5, 7), 6).unwrap()[0];
        let events = extract_events(&env, traj).unwrap();
        let interleaved = encode_trajectory(&env, traj, EncodingMode::Interleaved).unwrap();
        let obs_only = encode_trajectory(&env, traj, EncodingMode::ObsOnly).unwrap();
        let split = encode_trajectory(&env, traj, EncodingMode::ObsThenActions).unwrap();
        assert_eq!(interleaved.len(), 2 * events.len());
        assert_eq!(obs_only.len(), events.len());
        assert_eq!(split.len(), 2 * events.len());
        // Obs-only is the observation subsequence of interleaved; the
        // split mode is a permutation of interleaved.
        let obs_from_interleaved: Vec<&String> =
            interleaved.iter().step_by(2).collect();
        assert_eq!(obs_from_interleaved, obs_only.iter().collect::<Vec<_>>());
        let mut a = interleaved.clone();
        let mut b = split.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(interleaved.last().unwrap(), "a[stop]");
    }

    #[test]
    fn vocab_stats_count_distinct_tokens() {
        let i1 = Instruction::from_text("walk past bed , stop");
        let i2 = Instruction::from_text("walk past sofa , stop");
        let stats = vocab_stats([("e1", &i1), ("e2", &i2), ("e1", &i1)]);
        assert_eq!(stats.instructions, 3);
        assert_eq!(stats.environments, 2);
        // Tokens: walk past bed sofa , stop.
        assert_eq!(stats.vocab, 6);
        assert!((stats.mean_tokens - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_node_trajectory_annotates_to_a_stop_clause() {
        let env = world();
        let traj = from_path(&env, "t", &[0], 10.0).unwrap();
        let instr = oracle_annotate(&env, &traj, &CorruptionConfig::none(), 0).unwrap();
        let clauses = parse(&instr).unwrap();
        assert_eq!(clauses.len(), 1);
        assert!(matches!(clauses[0], Clause::Stop { near: Some(_) }));
    }
}

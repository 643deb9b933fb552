//! Pair-quality scoring and filtering.
//!
//! A [`PairedSample`] is the unit every data pool is made of: one
//! trajectory, one instruction, a provenance tag, and (once a navigator
//! has judged it) cached scores. The filters here are the pipeline's
//! quality gate — generator-training data must be followed perfectly
//! (SPL = 1), navigator-training data closely (nDTW ≥ 0.9) — and the
//! scorer zoo exists to show *why* the navigator is the right judge:
//! `embedding_cosine` measures semantic overlap but is blind to turn
//! directions by construction, and `random` is the control.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::generator::{score_instruction_likelihood, Decode, GeneratorParams};
use crate::instr::{parse, Clause, Instruction};
use crate::nav_metrics::{score_episode, NavScores, SUCCESS_RADIUS_M};
use crate::navigator::{follow, NavigatorParams, DEFAULT_MAX_STEPS};
use crate::text_metrics::TextScores;
use crate::traj::Trajectory;
use crate::world::{Environment, WorldSet};
use crate::{Error, Result};

/// Where a pair came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Oracle-annotated (corruption-noised) seed data.
    Seed,
    /// Produced by the generator in a given round.
    Generated { round: u32, decode: Decode },
}

/// Scores attached to a pair, stamped with the navigator that produced
/// the navigation part so stale scores can never survive a retrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub nav_version: u32,
    pub nav: NavScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<TextScores>,
}

/// One instruction-trajectory pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub pair_id: String,
    pub env_id: String,
    pub traj: Trajectory,
    pub instr: Instruction,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreRecord>,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        if self.pair_id.is_empty() {
            return Err(Error::Invariant("pair with empty pair_id".into()));
        }
        if self.env_id != self.traj.env_id {
            return Err(Error::Invariant(format!(
                "pair {}: env_id {} does not match its trajectory's {}",
                self.pair_id, self.env_id, self.traj.env_id
            )));
        }
        Ok(())
    }
}

/// Filter cutoffs of the pipeline's two quality gates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    /// Generator-training data must reach at least this SPL; the default
    /// demands a perfectly-followed shortest path.
    pub spl_exact: f64,
    /// Navigator-training data must reach at least this nDTW.
    pub ndtw_min: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            spl_exact: 1.0,
            ndtw_min: 0.9,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.spl_exact > 0.0 && self.spl_exact <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "spl_exact {} must lie in (0, 1]",
                self.spl_exact
            )));
        }
        if !(self.ndtw_min > 0.0 && self.ndtw_min < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ndtw_min {} must lie in (0, 1)",
                self.ndtw_min
            )));
        }
        Ok(())
    }
}

/// The scoring functions a pool can be ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    NavigatorNdtw,
    NavigatorSpl,
    Random,
    EmbeddingCosine,
    GeneratorSelf,
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scorer::NavigatorNdtw => "navigator_ndtw",
            Scorer::NavigatorSpl => "navigator_spl",
            Scorer::Random => "random",
            Scorer::EmbeddingCosine => "embedding_cosine",
            Scorer::GeneratorSelf => "generator_self",
        })
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "navigator_ndtw" => Scorer::NavigatorNdtw,
            "navigator_spl" => Scorer::NavigatorSpl,
            "random" => Scorer::Random,
            "embedding_cosine" => Scorer::EmbeddingCosine,
            "generator_self" => Scorer::GeneratorSelf,
            other => {
                return Err(Error::InvalidConfig(format!("unknown scorer {other:?}")))
            }
        })
    }
}

/// The models (and follow policy knobs) scorers may need.
#[derive(Debug, Clone, Copy)]
pub struct ScoreModels<'a> {
    pub nav: Option<&'a NavigatorParams>,
    pub gen: Option<&'a GeneratorParams>,
    pub max_steps: usize,
    pub d_th: f64,
}

impl Default for ScoreModels<'_> {
    fn default() -> Self {
        ScoreModels {
            nav: None,
            gen: None,
            max_steps: DEFAULT_MAX_STEPS,
            d_th: SUCCESS_RADIUS_M,
        }
    }
}

impl<'a> ScoreModels<'a> {
    fn navigator(&self, scorer: Scorer) -> Result<&'a NavigatorParams> {
        self.nav.ok_or_else(|| Error::MissingModel {
            scorer: scorer.to_string(),
            what: "navigator params".into(),
        })
    }

    fn generator(&self, scorer: Scorer) -> Result<&'a GeneratorParams> {
        self.gen.ok_or_else(|| Error::MissingModel {
            scorer: scorer.to_string(),
            what: "generator params".into(),
        })
    }
}

/// Run the navigator on a pair's instruction from the pair's start pose
/// and score the walked path against the pair's trajectory.
pub fn run_follow_and_score(
    navigator: &NavigatorParams,
    env: &Environment,
    pair: &PairedSample,
    max_steps: usize,
    d_th: f64,
) -> Result<NavScores> {
    let episode = follow(
        navigator,
        env,
        &pair.instr,
        format!("{}:follow", pair.pair_id),
        pair.traj.start(),
        pair.traj.start_heading(),
        max_steps,
    )?;
    score_episode(env, &episode.trajectory.nodes, &pair.traj.nodes, d_th)
}

/// Cosine similarity between the bag of landmark ids mentioned by the
/// instruction and the bag of landmarks visible along the trajectory.
/// Turn clauses contribute nothing: the score cannot see directions.
pub fn embedding_cosine(
    env: &Environment,
    traj: &Trajectory,
    instr: &Instruction,
) -> Result<f64> {
    let vocab = env.vocab_size as usize;
    let mut seen = vec![0.0f64; vocab];
    for &node in &traj.nodes {
        for sector in &env.node(node)?.landmarks {
            for lm in sector {
                seen[lm.0 as usize] += 1.0;
            }
        }
    }
    let mut mentioned = vec![0.0f64; vocab];
    for clause in parse(instr)? {
        let lm = match clause {
            Clause::Move { lm, .. } => Some(lm),
            Clause::Stop { near } => near,
            Clause::Turn { .. } => None,
        };
        if let Some(lm) = lm {
            if let Some(slot) = mentioned.get_mut(lm.id.0 as usize) {
                *slot += 1.0;
            }
        }
    }
    let dot: f64 = seen.iter().zip(&mentioned).map(|(a, b)| a * b).sum();
    let na: f64 = seen.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = mentioned.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        Ok(0.0)
    } else {
        Ok(dot / (na * nb))
    }
}

/// Score one pair with one scorer. Deterministic in
/// `(models, pair, seed)`; the random scorer mixes the seed with the
/// pair id so ranking a pool doesn't collapse into ties.
pub fn score_pair(
    scorer: Scorer,
    models: &ScoreModels,
    env: &Environment,
    pair: &PairedSample,
    seed: u64,
) -> Result<f64> {
    pair.validate()?;
    match scorer {
        Scorer::NavigatorNdtw => {
            let nav = models.navigator(scorer)?;
            Ok(run_follow_and_score(nav, env, pair, models.max_steps, models.d_th)?.ndtw)
        }
        Scorer::NavigatorSpl => {
            let nav = models.navigator(scorer)?;
            Ok(run_follow_and_score(nav, env, pair, models.max_steps, models.d_th)?.spl)
        }
        Scorer::Random => Ok(crate::seed::rng(seed, &pair.pair_id, 0).gen::<f64>()),
        Scorer::EmbeddingCosine => embedding_cosine(env, &pair.traj, &pair.instr),
        Scorer::GeneratorSelf => {
            let gen = models.generator(scorer)?;
            score_instruction_likelihood(gen, env, &pair.traj, &pair.instr)
        }
    }
}

/// Score every pair in a pool (parallel, order-preserving).
pub fn score_pool(
    worlds: &WorldSet,
    pool: &[PairedSample],
    scorer: Scorer,
    models: &ScoreModels,
    seed: u64,
) -> Result<Vec<f64>> {
    pool.par_iter()
        .map(|pair| score_pair(scorer, models, worlds.get(&pair.env_id)?, pair, seed))
        .collect()
}

/// Navigation scores for every pair in a pool (parallel,
/// order-preserving).
pub fn follow_scores(
    worlds: &WorldSet,
    navigator: &NavigatorParams,
    pool: &[PairedSample],
    max_steps: usize,
    d_th: f64,
) -> Result<Vec<NavScores>> {
    navigator.validate()?;
    pool.par_iter()
        .map(|pair| {
            pair.validate()?;
            run_follow_and_score(navigator, worlds.get(&pair.env_id)?, pair, max_steps, d_th)
        })
        .collect()
}

fn annotate(pair: &PairedSample, nav_version: u32, nav: NavScores) -> PairedSample {
    let mut out = pair.clone();
    out.scores = Some(ScoreRecord {
        nav_version,
        nav,
        text: None,
    });
    out
}

/// Keep the pairs the navigator follows at `spl >= spl_exact` (with the
/// default threshold: perfectly). Kept pairs carry the judge's scores.
pub fn filter_generator_data(
    worlds: &WorldSet,
    pool: &[PairedSample],
    navigator: &NavigatorParams,
    thresholds: &FilterThresholds,
    max_steps: usize,
    d_th: f64,
) -> Result<Vec<PairedSample>> {
    thresholds.validate()?;
    let scores = follow_scores(worlds, navigator, pool, max_steps, d_th)?;
    Ok(pool
        .iter()
        .zip(scores)
        .filter(|(_, s)| s.spl >= thresholds.spl_exact)
        .map(|(p, s)| annotate(p, navigator.version, s))
        .collect())
}

/// Partition a pool into (kept, rejected) by `ndtw >= ndtw_min`. Both
/// sides carry the judge's scores.
pub fn filter_navigator_data(
    worlds: &WorldSet,
    pool: &[PairedSample],
    navigator: &NavigatorParams,
    thresholds: &FilterThresholds,
    max_steps: usize,
    d_th: f64,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    thresholds.validate()?;
    let scores = follow_scores(worlds, navigator, pool, max_steps, d_th)?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (pair, s) in pool.iter().zip(scores) {
        let annotated = annotate(pair, navigator.version, s);
        if s.ndtw >= thresholds.ndtw_min {
            kept.push(annotated);
        } else {
            rejected.push(annotated);
        }
    }
    Ok((kept, rejected))
}

/// The `q` best pairs under a scorer, descending score, ties broken by
/// pair id.
pub fn rank_and_take_top(
    worlds: &WorldSet,
    pool: &[PairedSample],
    scorer: Scorer,
    models: &ScoreModels,
    q: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if q > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot take top {q} from a pool of {}",
            pool.len()
        )));
    }
    let scores = score_pool(worlds, pool, scorer, models, seed)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| pool[a].pair_id.cmp(&pool[b].pair_id))
    });
    Ok(order[..q].iter().map(|&i| pool[i].clone()).collect())
}

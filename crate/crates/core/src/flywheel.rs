//! The round loop: generator training, data (re)generation, navigator
//! training, filtering, accumulation, evaluation.
//!
//! One round does, in order:
//!
//! 1. train the generator (seed data alone on the first round, the
//!    SPL-verified greedy pool plus seed data afterwards);
//! 2. regenerate sampled instructions — every trajectory slot on the
//!    first round, only the slots the previous filter rejected
//!    afterwards — and greedy instructions for the whole trajectory
//!    pool;
//! 3. assemble the navigator pool from the fresh samples plus every
//!    previously kept pair (so the pool size never changes);
//! 4. train the navigator on that pool, then fine-tune on seed data;
//! 5. filter: greedy pairs must be followed at SPL = 1 to train the
//!    next generator, sampled pairs at nDTW ≥ 0.9 to be kept;
//! 6. accumulate kept pairs and evaluate both models on held-out
//!    worlds.
//!
//! Rejected slots get fresh instructions next round instead of being
//! dropped, which is what keeps the navigator pool's size constant while
//! its quality ratchets up.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Instant;

use crate::generator::{
    generate, train_generator, Decode, GenTrainConfig, GeneratorParams,
};
use crate::instr::{oracle_annotate, CorruptionConfig, Instruction};
use crate::nav_metrics::SUCCESS_RADIUS_M;
use crate::navigator::{
    train_navigator, NavTrainConfig, NavigatorParams, DEFAULT_MAX_STEPS,
};
use crate::scoring::{
    filter_generator_data, filter_navigator_data, follow_scores, FilterThresholds,
    PairedSample, Provenance,
};
use crate::text_metrics::compute_text_scores;
use crate::traj::{sample_trajectories, Trajectory};
use crate::world::{generate_environment, Split, WorldGenConfig, WorldSet};
use crate::{seed, Error, Result};

/// How many environments each split gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldCounts {
    pub train: usize,
    pub val_seen: usize,
    pub val_unseen: usize,
}

impl Default for WorldCounts {
    fn default() -> Self {
        WorldCounts {
            train: 60,
            val_seen: 10,
            val_unseen: 20,
        }
    }
}

/// Everything a full run is parameterized by. The defaults are the desk
/// configuration every headline result is reported on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlywheelConfig {
    pub master_seed: u64,
    /// Rounds to run; 1 means just the bootstrap.
    pub rounds: u32,
    /// Sampled instructions per trajectory in the navigator pool.
    pub k_sample: u32,
    /// Decoder for the diverse navigator-training instructions.
    pub sample_decode: Decode,
    /// Decoder for the one-best generator-training instructions.
    pub greedy_decode: Decode,
    pub world_counts: WorldCounts,
    pub world_gen: WorldGenConfig,
    /// Size of the oracle-annotated (noisy) seed pool.
    pub seed_pairs: usize,
    /// Size of the unlabeled trajectory pool.
    pub traj_pool: usize,
    /// Held-out oracle pairs used for every evaluation row.
    pub eval_pairs: usize,
    /// Shortest-path lengths, in hops, trajectories are sampled from.
    pub hop_range: (usize, usize),
    /// Noise applied to seed annotations (never to evaluation pairs).
    pub corruption: CorruptionConfig,
    pub thresholds: FilterThresholds,
    pub nav_train: NavTrainConfig,
    pub gen_train: GenTrainConfig,
    pub max_steps: usize,
    pub success_radius: f64,
}

impl Default for FlywheelConfig {
    fn default() -> Self {
        FlywheelConfig {
            master_seed: 7,
            rounds: 3,
            k_sample: 6,
            sample_decode: Decode::TopK {
                k: 5,
                temperature: 3.0,
            },
            greedy_decode: Decode::Greedy,
            world_counts: WorldCounts::default(),
            world_gen: WorldGenConfig::default(),
            seed_pairs: 1000,
            traj_pool: 2000,
            eval_pairs: 300,
            hop_range: (5, 9),
            corruption: CorruptionConfig::default(),
            thresholds: FilterThresholds::default(),
            nav_train: NavTrainConfig::default(),
            gen_train: GenTrainConfig::default(),
            max_steps: DEFAULT_MAX_STEPS,
            success_radius: SUCCESS_RADIUS_M,
        }
    }
}

impl FlywheelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        if self.k_sample == 0 {
            return Err(Error::InvalidConfig("k_sample must be at least 1".into()));
        }
        if self.world_counts.train == 0 || self.world_counts.val_unseen == 0 {
            return Err(Error::InvalidConfig(
                "need at least one train and one val_unseen world".into(),
            ));
        }
        if self.seed_pairs == 0 || self.traj_pool == 0 || self.eval_pairs == 0 {
            return Err(Error::InvalidConfig(
                "seed_pairs, traj_pool, and eval_pairs must be positive".into(),
            ));
        }
        if self.hop_range.0 == 0 || self.hop_range.0 > self.hop_range.1 {
            return Err(Error::InvalidConfig(format!(
                "hop range {:?} is empty or allows zero-hop paths",
                self.hop_range
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        if !(self.success_radius > 0.0) {
            return Err(Error::InvalidConfig(
                "success_radius must be positive".into(),
            ));
        }
        if let Decode::TopK { k, temperature } = self.sample_decode {
            if k == 0 || !(temperature > 0.0) {
                return Err(Error::InvalidConfig(
                    "sample_decode needs k >= 1 and positive temperature".into(),
                ));
            }
        }
        self.world_gen.validate()?;
        self.corruption.validate()?;
        self.thresholds.validate()?;
        Ok(())
    }
}

/// The frozen inputs of a run: worlds, the noisy seed pool, the
/// unlabeled trajectory pool, and clean held-out evaluation pairs.
#[derive(Debug, Clone)]
pub struct Materials {
    pub worlds: WorldSet,
    pub seed_pairs: Vec<PairedSample>,
    pub traj_pool: Vec<Trajectory>,
    pub eval_unseen: Vec<PairedSample>,
}

fn distribute(total: usize, buckets: usize) -> Vec<usize> {
    let base = total / buckets;
    let extra = total % buckets;
    (0..buckets)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

fn sample_split_trajs(
    worlds: &WorldSet,
    split: Split,
    total: usize,
    hop_range: (usize, usize),
    master_seed: u64,
    label: &str,
) -> Result<Vec<Trajectory>> {
    let envs = worlds.split(split);
    let quotas = distribute(total, envs.len());
    let mut out = Vec::with_capacity(total);
    for (i, (env, &quota)) in envs.iter().zip(&quotas).enumerate() {
        let trajs = sample_trajectories(
            env,
            quota,
            hop_range,
            seed::derive(master_seed, &format!("{label}-{split}"), i as u64),
        )?;
        if trajs.len() < quota {
            return Err(Error::InvalidConfig(format!(
                "environment {} has only {} trajectories in hop range {:?}, needed {}",
                env.env_id,
                trajs.len(),
                hop_range,
                quota
            )));
        }
        out.extend(trajs);
    }
    Ok(out)
}

/// Build the frozen inputs for a run. Deterministic in the config.
pub fn build_materials(config: &FlywheelConfig) -> Result<Materials> {
    config.validate()?;
    let mut worlds = WorldSet::new();
    for (split, count) in [
        (Split::Train, config.world_counts.train),
        (Split::ValSeen, config.world_counts.val_seen),
        (Split::ValUnseen, config.world_counts.val_unseen),
    ] {
        for i in 0..count {
            let env_seed =
                seed::derive(config.master_seed, &format!("world-{split}"), i as u64);
            worlds.insert(generate_environment(&config.world_gen, split, i, env_seed)?);
        }
    }

    let mut seed_trajs = sample_split_trajs(
        &worlds,
        Split::Train,
        config.seed_pairs,
        config.hop_range,
        config.master_seed,
        "seed-trajs",
    )?;
    let seed_pairs: Vec<PairedSample> = seed_trajs
        .iter_mut()
        .enumerate()
        .map(|(i, traj)| {
            traj.traj_id = format!("sd-{i:05}");
            let env = worlds.get(&traj.env_id)?;
            let instr = oracle_annotate(
                env,
                traj,
                &config.corruption,
                seed::derive(config.master_seed, "seed-noise", i as u64),
            )?;
            Ok(PairedSample {
                pair_id: traj.traj_id.clone(),
                env_id: traj.env_id.clone(),
                traj: traj.clone(),
                instr,
                provenance: Provenance::Seed,
                scores: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut traj_pool = sample_split_trajs(
        &worlds,
        Split::Train,
        config.traj_pool,
        config.hop_range,
        config.master_seed,
        "pool-trajs",
    )?;
    for (i, traj) in traj_pool.iter_mut().enumerate() {
        traj.traj_id = format!("tp-{i:05}");
    }

    let mut eval_trajs = sample_split_trajs(
        &worlds,
        Split::ValUnseen,
        config.eval_pairs,
        config.hop_range,
        config.master_seed,
        "eval-trajs",
    )?;
    let eval_unseen: Vec<PairedSample> = eval_trajs
        .iter_mut()
        .enumerate()
        .map(|(i, traj)| {
            traj.traj_id = format!("ev-{i:05}");
            let env = worlds.get(&traj.env_id)?;
            // Evaluation references are never corrupted.
            let instr = oracle_annotate(env, traj, &CorruptionConfig::none(), 0)?;
            Ok(PairedSample {
                pair_id: traj.traj_id.clone(),
                env_id: traj.env_id.clone(),
                traj: traj.clone(),
                instr,
                provenance: Provenance::Seed,
                scores: None,
            })
        })
        .collect::<Result<_>>()?;

    let materials = Materials {
        worlds,
        seed_pairs,
        traj_pool,
        eval_unseen,
    };
    assert_split_hygiene(&materials)?;
    Ok(materials)
}

fn assert_split_hygiene(materials: &Materials) -> Result<()> {
    for pair in &materials.seed_pairs {
        if materials.worlds.get(&pair.env_id)?.split != Split::Train {
            return Err(Error::Invariant(format!(
                "seed pair {} lives in non-train world {}",
                pair.pair_id, pair.env_id
            )));
        }
    }
    for traj in &materials.traj_pool {
        if materials.worlds.get(&traj.env_id)?.split != Split::Train {
            return Err(Error::Invariant(format!(
                "pool trajectory {} lives in non-train world {}",
                traj.traj_id, traj.env_id
            )));
        }
    }
    for pair in &materials.eval_unseen {
        if materials.worlds.get(&pair.env_id)?.split != Split::ValUnseen {
            return Err(Error::Invariant(format!(
                "eval pair {} lives in non-val_unseen world {}",
                pair.pair_id, pair.env_id
            )));
        }
    }
    Ok(())
}

/// Mean navigation and text metrics of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub prop_f1: f64,
    pub prop_f1_dir: f64,
}

/// One row of the run's report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0 is the seed-only baseline.
    pub round: u32,
    pub nav_version: u32,
    pub gen_version: u32,
    pub d_n: usize,
    pub fnd_n: usize,
    pub ld_n: usize,
    pub fd_n_accum: usize,
    pub d_g: usize,
    pub fd_g: usize,
    pub metrics: EvalSummary,
    /// Informational only; excluded from every persisted artifact so
    /// reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

/// Everything a round leaves behind.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub t: u32,
    pub generator: GeneratorParams,
    pub navigator: NavigatorParams,
    /// The navigator's training pool this round (fresh ∪ accumulated).
    pub d_n: Vec<PairedSample>,
    /// Freshly sampled pairs this round.
    pub nd_n: Vec<PairedSample>,
    /// Fresh pairs that passed the nDTW gate.
    pub fnd_n: Vec<PairedSample>,
    /// Fresh pairs that failed; their slots regenerate next round.
    pub ld_n: Vec<PairedSample>,
    /// All pairs kept so far (monotone across rounds).
    pub fd_n_accum: Vec<PairedSample>,
    /// Greedy pairs for the whole trajectory pool.
    pub d_g: Vec<PairedSample>,
    /// Greedy pairs the navigator follows at SPL = 1; next round's
    /// generator trains on these plus seed.
    pub fd_g: Vec<PairedSample>,
}

fn training_refs(pairs: &[PairedSample]) -> Vec<(&Trajectory, &Instruction)> {
    pairs.iter().map(|p| (&p.traj, &p.instr)).collect()
}

/// `"{traj_id}#{slot}r{round}"` without the round part; the stable
/// identity of a sampled slot across regenerations.
fn pair_stem(pair_id: &str) -> Result<&str> {
    pair_id
        .rsplit_once('r')
        .map(|(stem, _)| stem)
        .ok_or_else(|| {
            Error::Invariant(format!("pair id {pair_id} is not a generated-slot id"))
        })
}

fn check_unique_ids(pool: &[PairedSample], name: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for pair in pool {
        if !seen.insert(pair.pair_id.as_str()) {
            return Err(Error::Invariant(format!(
                "duplicate pair id {} in {name}",
                pair.pair_id
            )));
        }
    }
    Ok(())
}

/// Evaluate a navigator and generator on held-out oracle pairs: the
/// navigator follows each instruction, the generator re-captions each
/// trajectory greedily against the oracle references.
pub fn evaluate_round(
    worlds: &WorldSet,
    navigator: &NavigatorParams,
    generator: &GeneratorParams,
    eval_pairs: &[PairedSample],
    config: &FlywheelConfig,
) -> Result<EvalSummary> {
    if eval_pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation pairs"));
    }
    let nav_scores = follow_scores(
        worlds,
        navigator,
        eval_pairs,
        config.max_steps,
        config.success_radius,
    )?;
    let generations: Vec<Instruction> = eval_pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            generate(
                generator,
                worlds.get(&pair.env_id)?,
                &pair.traj,
                config.greedy_decode,
                seed::derive(config.master_seed, "eval-gen", i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let corpus: Vec<(Instruction, Vec<Instruction>)> = generations
        .into_iter()
        .zip(eval_pairs)
        .map(|(gen_instr, pair)| (gen_instr, vec![pair.instr.clone()]))
        .collect();
    let text_scores = compute_text_scores(&corpus)?;

    let n = eval_pairs.len() as f64;
    let mean = |extract: &dyn Fn(usize) -> f64| -> f64 {
        (0..eval_pairs.len()).map(extract).sum::<f64>() / n
    };
    Ok(EvalSummary {
        ne: mean(&|i| nav_scores[i].ne),
        osr: mean(&|i| nav_scores[i].osr),
        sr: mean(&|i| nav_scores[i].sr),
        spl: mean(&|i| nav_scores[i].spl),
        ndtw: mean(&|i| nav_scores[i].ndtw),
        sdtw: mean(&|i| nav_scores[i].sdtw),
        bleu1: mean(&|i| text_scores[i].bleu1),
        bleu4: mean(&|i| text_scores[i].bleu4),
        rouge_l: mean(&|i| text_scores[i].rouge_l),
        cider: mean(&|i| text_scores[i].cider),
        prop_f1: mean(&|i| text_scores[i].prop_f1),
        prop_f1_dir: mean(&|i| text_scores[i].prop_f1_dir),
    })
}

/// Train the seed-only reference models and evaluate them; the report
/// table's round-0 row.
pub fn run_baseline(
    materials: &Materials,
    config: &FlywheelConfig,
) -> Result<(NavigatorParams, GeneratorParams, RoundReport)> {
    let started = Instant::now();
    let seed_refs = training_refs(&materials.seed_pairs);
    let generator =
        train_generator(&materials.worlds, &seed_refs, None, &config.gen_train)?;
    let navigator = train_navigator(
        &materials.worlds,
        &seed_refs,
        &seed_refs,
        None,
        &config.nav_train,
    )?;
    let metrics = evaluate_round(
        &materials.worlds,
        &navigator,
        &generator,
        &materials.eval_unseen,
        config,
    )?;
    let report = RoundReport {
        round: 0,
        nav_version: navigator.version,
        gen_version: generator.version,
        d_n: 0,
        fnd_n: 0,
        ld_n: 0,
        fd_n_accum: 0,
        d_g: 0,
        fd_g: 0,
        metrics,
        wall_clock_ms: started.elapsed().as_millis(),
    };
    Ok((navigator, generator, report))
}

/// Run one round. `prev = None` is the bootstrap.
pub fn run_round(
    prev: Option<&RoundState>,
    materials: &Materials,
    config: &FlywheelConfig,
) -> Result<(RoundState, RoundReport)> {
    config.validate()?;
    let started = Instant::now();
    let t = prev.map_or(1, |p| p.t + 1);
    let round_seed = config.master_seed ^ u64::from(t);
    let worlds = &materials.worlds;
    let seed_refs = training_refs(&materials.seed_pairs);

    // 1. Generator training pool: seed alone at bootstrap, verified
    // greedy pairs plus seed afterwards.
    let generator = match prev {
        None => train_generator(worlds, &seed_refs, None, &config.gen_train)?,
        Some(p) => {
            if p.fd_g.is_empty() {
                return Err(Error::Invariant(format!(
                    "round {t}: no greedy pair survived the SPL filter; \
                     the filter is too strict for the current navigator"
                )));
            }
            let mut pool = training_refs(&p.fd_g);
            pool.extend(seed_refs.iter().copied());
            train_generator(worlds, &pool, Some(&p.generator), &config.gen_train)?
        }
    };

    // 2a. Fresh sampled instructions: every slot at bootstrap, only the
    // rejected slots afterwards. A slot's seed depends on its stable
    // stem and the round, nothing else.
    let regen_specs: Vec<(String, &Trajectory)> = match prev {
        None => {
            let mut specs = Vec::with_capacity(materials.traj_pool.len() * config.k_sample as usize);
            for traj in &materials.traj_pool {
                for slot in 0..config.k_sample {
                    specs.push((format!("{}#{slot:02}", traj.traj_id), traj));
                }
            }
            specs
        }
        Some(p) => p
            .ld_n
            .iter()
            .map(|pair| Ok((pair_stem(&pair.pair_id)?.to_string(), &pair.traj)))
            .collect::<Result<_>>()?,
    };
    let nd_n: Vec<PairedSample> = regen_specs
        .par_iter()
        .map(|(stem, traj)| {
            let env = worlds.get(&traj.env_id)?;
            let instr = generate(
                &generator,
                env,
                traj,
                config.sample_decode,
                seed::derive(round_seed, stem, 0),
            )?;
            Ok(PairedSample {
                pair_id: format!("{stem}r{t}"),
                env_id: traj.env_id.clone(),
                traj: (*traj).clone(),
                instr,
                provenance: Provenance::Generated {
                    round: t,
                    decode: config.sample_decode,
                },
                scores: None,
            })
        })
        .collect::<Result<_>>()?;

    // 2b. Greedy instructions for the whole trajectory pool.
    let d_g: Vec<PairedSample> = materials
        .traj_pool
        .par_iter()
        .map(|traj| {
            let env = worlds.get(&traj.env_id)?;
            let stem = format!("{}#g", traj.traj_id);
            let instr = generate(
                &generator,
                env,
                traj,
                config.greedy_decode,
                seed::derive(round_seed, &stem, 0),
            )?;
            Ok(PairedSample {
                pair_id: format!("{stem}r{t}"),
                env_id: traj.env_id.clone(),
                traj: traj.clone(),
                instr,
                provenance: Provenance::Generated {
                    round: t,
                    decode: config.greedy_decode,
                },
                scores: None,
            })
        })
        .collect::<Result<_>>()?;

    // 3. The navigator pool: fresh samples plus everything kept so far,
    // in canonical order.
    let mut d_n: Vec<PairedSample> = nd_n.clone();
    if let Some(p) = prev {
        d_n.extend(p.fd_n_accum.iter().cloned());
    }
    d_n.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let expected = materials.traj_pool.len() * config.k_sample as usize;
    if d_n.len() != expected {
        return Err(Error::Invariant(format!(
            "round {t}: |D_N| = {} but the pool must stay at {expected}",
            d_n.len()
        )));
    }
    check_unique_ids(&d_n, "D_N")?;

    // 4. Navigator: pretrain on the pool, fine-tune on seed.
    let navigator = train_navigator(
        worlds,
        &training_refs(&d_n),
        &seed_refs,
        prev.map(|p| &p.navigator),
        &config.nav_train,
    )?;

    // 5. Filters.
    let fd_g = filter_generator_data(
        worlds,
        &d_g,
        &navigator,
        &config.thresholds,
        config.max_steps,
        config.success_radius,
    )?;
    let (fnd_n, ld_n) = filter_navigator_data(
        worlds,
        &nd_n,
        &navigator,
        &config.thresholds,
        config.max_steps,
        config.success_radius,
    )?;
    if fnd_n.len() + ld_n.len() != nd_n.len() {
        return Err(Error::Invariant(format!(
            "round {t}: filter lost pairs ({} + {} != {})",
            fnd_n.len(),
            ld_n.len(),
            nd_n.len()
        )));
    }

    // 6. Accumulate.
    let mut fd_n_accum: Vec<PairedSample> =
        prev.map_or_else(Vec::new, |p| p.fd_n_accum.clone());
    fd_n_accum.extend(fnd_n.iter().cloned());
    fd_n_accum.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    check_unique_ids(&fd_n_accum, "FD_N")?;
    if let Some(p) = prev {
        let accum: BTreeSet<&str> = fd_n_accum.iter().map(|x| x.pair_id.as_str()).collect();
        for old in &p.fd_n_accum {
            if !accum.contains(old.pair_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "round {t}: accumulated pair {} disappeared",
                    old.pair_id
                )));
            }
        }
    }
    let dg_ids: BTreeSet<&str> = d_g.iter().map(|x| x.pair_id.as_str()).collect();
    for kept in &fd_g {
        if !dg_ids.contains(kept.pair_id.as_str()) {
            return Err(Error::Invariant(format!(
                "round {t}: filtered pair {} is not from this round's greedy pool",
                kept.pair_id
            )));
        }
    }

    // 7. Evaluate.
    let metrics = evaluate_round(
        worlds,
        &navigator,
        &generator,
        &materials.eval_unseen,
        config,
    )?;
    let report = RoundReport {
        round: t,
        nav_version: navigator.version,
        gen_version: generator.version,
        d_n: d_n.len(),
        fnd_n: fnd_n.len(),
        ld_n: ld_n.len(),
        fd_n_accum: fd_n_accum.len(),
        d_g: d_g.len(),
        fd_g: fd_g.len(),
        metrics,
        wall_clock_ms: started.elapsed().as_millis(),
    };
    let state = RoundState {
        t,
        generator,
        navigator,
        d_n,
        nd_n,
        fnd_n,
        ld_n,
        fd_n_accum,
        d_g,
        fd_g,
    };
    Ok((state, report))
}

/// A full run's outputs: seed-only baseline models, the report table
/// (baseline row first), and every round's state.
#[derive(Debug, Clone)]
pub struct FlywheelRun {
    pub baseline_navigator: NavigatorParams,
    pub baseline_generator: GeneratorParams,
    pub reports: Vec<RoundReport>,
    pub states: Vec<RoundState>,
}

/// Baseline, bootstrap, and `rounds − 1` refinement rounds.
pub fn run_flywheel(materials: &Materials, config: &FlywheelConfig) -> Result<FlywheelRun> {
    config.validate()?;
    assert_split_hygiene(materials)?;
    let (baseline_navigator, baseline_generator, baseline_report) =
        run_baseline(materials, config)?;
    let mut reports = vec![baseline_report];
    let mut states: Vec<RoundState> = Vec::with_capacity(config.rounds as usize);
    for _ in 0..config.rounds {
        let (state, report) = run_round(states.last(), materials, config)?;
        reports.push(report);
        states.push(state);
    }
    Ok(FlywheelRun {
        baseline_navigator,
        baseline_generator,
        reports,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> FlywheelConfig {
        FlywheelConfig {
            master_seed: 11,
            rounds: 2,
            k_sample: 3,
            world_counts: WorldCounts {
                train: 4,
                val_seen: 1,
                val_unseen: 2,
            },
            seed_pairs: 90,
            traj_pool: 120,
            eval_pairs: 40,
            ..FlywheelConfig::default()
        }
    }

    #[test]
    fn materials_have_the_configured_shape() {
        let config = small_config();
        let materials = build_materials(&config).unwrap();
        assert_eq!(materials.worlds.len(), 7);
        assert_eq!(materials.seed_pairs.len(), 90);
        assert_eq!(materials.traj_pool.len(), 120);
        assert_eq!(materials.eval_unseen.len(), 40);
        assert_split_hygiene(&materials).unwrap();
        // Ids are unique across the seed pool and trajectory pool.
        check_unique_ids(&materials.seed_pairs, "seed").unwrap();
        let traj_ids: BTreeSet<&str> = materials
            .traj_pool
            .iter()
            .map(|t| t.traj_id.as_str())
            .collect();
        assert_eq!(traj_ids.len(), materials.traj_pool.len());
    }

    #[test]
    fn materials_are_deterministic() {
        let config = small_config();
        let a = build_materials(&config).unwrap();
        let b = build_materials(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.seed_pairs).unwrap(),
            serde_json::to_string(&b.seed_pairs).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.eval_unseen).unwrap(),
            serde_json::to_string(&b.eval_unseen).unwrap()
        );
    }

    #[test]
    fn bootstrap_has_conserved_pool_sizes() {
        let config = small_config();
        let materials = build_materials(&config).unwrap();
        let (state, report) = run_round(None, &materials, &config).unwrap();
        assert_eq!(state.t, 1);
        assert_eq!(state.d_n.len(), 120 * 3);
        assert_eq!(state.nd_n.len(), 120 * 3);
        assert_eq!(state.fnd_n.len() + state.ld_n.len(), state.nd_n.len());
        assert_eq!(state.fd_n_accum.len(), state.fnd_n.len());
        assert_eq!(state.d_g.len(), 120);
        assert!(state.fd_g.len() <= state.d_g.len());
        assert_eq!(report.round, 1);
        assert_eq!(report.d_n, 360);
        assert!(report.metrics.sr >= 0.0 && report.metrics.sr <= 1.0);
    }

    #[test]
    fn full_run_keeps_the_invariants_and_is_deterministic() {
        let config = small_config();
        let materials = build_materials(&config).unwrap();
        let run = run_flywheel(&materials, &config).unwrap();
        assert_eq!(run.reports.len(), 3, "baseline plus two rounds");
        assert_eq!(run.states.len(), 2);
        // Conservation across rounds.
        for report in &run.reports[1..] {
            assert_eq!(report.d_n, 360);
        }
        // Monotone accumulation.
        let first: BTreeSet<&str> = run.states[0]
            .fd_n_accum
            .iter()
            .map(|p| p.pair_id.as_str())
            .collect();
        let second: BTreeSet<&str> = run.states[1]
            .fd_n_accum
            .iter()
            .map(|p| p.pair_id.as_str())
            .collect();
        assert!(first.is_subset(&second));
        // Regenerated slots replace rejected ones: every rejected stem
        // from round 1 shows up in round 2's fresh pool.
        let round2_stems: BTreeSet<&str> = run.states[1]
            .nd_n
            .iter()
            .map(|p| pair_stem(&p.pair_id).unwrap())
            .collect();
        for rejected in &run.states[0].ld_n {
            let stem = pair_stem(&rejected.pair_id).unwrap();
            assert!(round2_stems.contains(stem), "stem {stem} was dropped");
        }
        // Determinism end to end.
        let rerun = run_flywheel(&materials, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&run.reports).unwrap(),
            serde_json::to_string(&rerun.reports).unwrap()
        );
        for (a, b) in run.states.iter().zip(&rerun.states) {
            assert_eq!(
                serde_json::to_string(&a.d_n).unwrap(),
                serde_json::to_string(&b.d_n).unwrap()
            );
            assert_eq!(
                serde_json::to_string(&a.fd_g).unwrap(),
                serde_json::to_string(&b.fd_g).unwrap()
            );
        }
    }

    #[test]
    fn an_emptied_generator_pool_aborts_the_next_round() {
        let config = small_config();
        let materials = build_materials(&config).unwrap();
        let (mut state, _) = run_round(None, &materials, &config).unwrap();
        state.fd_g.clear();
        let err = run_round(Some(&state), &materials, &config)
            .unwrap_err()
            .to_string();
        assert!(err.contains("SPL filter"), "{err}");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut config = FlywheelConfig::default();
        config.rounds = 0;
        assert!(config.validate().is_err());
        let mut config = FlywheelConfig::default();
        config.k_sample = 0;
        assert!(config.validate().is_err());
        let mut config = FlywheelConfig::default();
        config.hop_range = (5, 2);
        assert!(config.validate().is_err());
        let mut config = FlywheelConfig::default();
        config.sample_decode = Decode::TopK {
            k: 0,
            temperature: 1.0,
        };
        assert!(config.validate().is_err());
    }
}

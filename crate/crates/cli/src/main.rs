//! `flywheel` — drive the pipeline from the shell.
//!
//! Every subcommand accepts `--config` (a TOML file mirroring the run
//! configuration; omitted keys take their defaults) and `--seed` (which
//! overrides the config's master seed). Outputs are deterministic in
//! the resolved config: rerunning a command with the same inputs writes
//! the same bytes, whatever `--threads` says.
//!
//! Errors print a single `error: ...` line on stderr and exit nonzero.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use flywheel_core::datastore::{
    dataset_stats, emit_report, load_json, load_pool, load_worlds, save_json, save_pool,
    save_trajs, save_worlds, write_text, ReportFormat, RunManifest,
};
use flywheel_core::flywheel::{
    build_materials, evaluate_round, run_flywheel, FlywheelConfig, RoundReport, RoundState,
};
use flywheel_core::generator::GeneratorParams;
use flywheel_core::navigator::NavigatorParams;
use flywheel_core::scoring::{
    filter_generator_data, filter_navigator_data, score_pool, ScoreModels, Scorer,
};
use flywheel_core::world::WorldSet;

#[derive(Parser)]
#[command(name = "flywheel", version, about = "Self-refining navigation data pipeline")]
struct Cli {
    /// TOML run configuration; defaults fill in anything omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, value_name = "INT", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured environments and write `worlds.jsonl`.
    GenWorlds {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build the corrupted oracle seed pool (`seed_pool.jsonl`).
    MakeSeed {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Sample the unlabeled trajectory pool (`traj_pool.jsonl`).
    SampleTrajs {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full loop and write every artifact under a directory.
    RunFlywheel {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Override the configured number of rounds.
        #[arg(long, value_name = "INT")]
        rounds: Option<u32>,
        /// Override sampled instructions per trajectory.
        #[arg(long, value_name = "INT")]
        k_sample: Option<u32>,
        /// Override the kept-pair nDTW threshold.
        #[arg(long, value_name = "FLOAT")]
        ndtw_min: Option<f64>,
    },
    /// Score a pool with one scorer; writes `{pair_id, score}` lines.
    Score {
        #[arg(long, value_name = "FILE")]
        worlds: PathBuf,
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
        /// navigator_ndtw | navigator_spl | random | embedding_cosine |
        /// generator_self
        #[arg(long, value_name = "NAME")]
        scorer: String,
        #[arg(long, value_name = "FILE")]
        navigator: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        generator: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Partition a pool with the configured filter thresholds.
    Filter {
        #[arg(long, value_name = "FILE")]
        worlds: PathBuf,
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
        #[arg(long, value_name = "FILE")]
        navigator: PathBuf,
        /// `gen` keeps SPL-perfect pairs; `nav` also writes the rejects.
        #[arg(long, value_enum)]
        kind: FilterKind,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Override the kept-pair nDTW threshold.
        #[arg(long, value_name = "FLOAT")]
        ndtw_min: Option<f64>,
    },
    /// Follow and re-caption a pool; prints mean metrics as JSON.
    Eval {
        #[arg(long, value_name = "FILE")]
        worlds: PathBuf,
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
        #[arg(long, value_name = "FILE")]
        navigator: PathBuf,
        #[arg(long, value_name = "FILE")]
        generator: PathBuf,
    },
    /// Print corpus statistics for a pool as JSON.
    Stats {
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
    },
    /// Render a saved `reports.json` as CSV or Markdown.
    Report {
        #[arg(long, value_name = "FILE")]
        reports: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Md)]
        format: FormatArg,
        /// Write here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterKind {
    Nav,
    Gen,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("thread pool")?;
    let config = resolve_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenWorlds { out } => gen_worlds(&config, &out),
        Command::MakeSeed { out } => make_seed(&config, &out),
        Command::SampleTrajs { out } => sample_trajs(&config, &out),
        Command::RunFlywheel {
            out,
            rounds,
            k_sample,
            ndtw_min,
        } => {
            let mut config = config;
            if let Some(r) = rounds {
                config.rounds = r;
            }
            if let Some(k) = k_sample {
                config.k_sample = k;
            }
            if let Some(n) = ndtw_min {
                config.thresholds.ndtw_min = n;
            }
            cmd_run_flywheel(&config, &out)
        }
        Command::Score {
            worlds,
            pool,
            scorer,
            navigator,
            generator,
            out,
        } => cmd_score(&config, &worlds, &pool, &scorer, navigator, generator, &out),
        Command::Filter {
            worlds,
            pool,
            navigator,
            kind,
            out,
            ndtw_min,
        } => {
            let mut config = config;
            if let Some(n) = ndtw_min {
                config.thresholds.ndtw_min = n;
            }
            cmd_filter(&config, &worlds, &pool, &navigator, kind, &out)
        }
        Command::Eval {
            worlds,
            pool,
            navigator,
            generator,
        } => cmd_eval(&config, &worlds, &pool, &navigator, &generator),
        Command::Stats { pool } => {
            let pool = load_pool(&pool)?;
            println!("{}", serde_json::to_string_pretty(&dataset_stats(&pool))?);
            Ok(())
        }
        Command::Report {
            reports,
            format,
            out,
        } => {
            let reports: Vec<RoundReport> = load_json(&reports)?;
            let rendered = emit_report(
                &reports,
                match format {
                    FormatArg::Csv => ReportFormat::Csv,
                    FormatArg::Md => ReportFormat::Markdown,
                },
            );
            match out {
                Some(path) => write_text(path, &rendered)?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
    }
}

fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<FlywheelConfig> {
    let mut config = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FlywheelConfig::default(),
    };
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_world_set(path: &Path) -> Result<WorldSet> {
    let mut set = WorldSet::new();
    for env in load_worlds(path)? {
        set.insert(env);
    }
    Ok(set)
}

fn gen_worlds(config: &FlywheelConfig, out: &Path) -> Result<()> {
    let materials = build_materials(config)?;
    let envs: Vec<_> = materials.worlds.iter().collect();
    save_worlds(out.join("worlds.jsonl"), &envs)?;
    println!("wrote {} worlds", envs.len());
    Ok(())
}

fn make_seed(config: &FlywheelConfig, out: &Path) -> Result<()> {
    let materials = build_materials(config)?;
    save_pool(out.join("seed_pool.jsonl"), &materials.seed_pairs)?;
    println!("wrote {} seed pairs", materials.seed_pairs.len());
    Ok(())
}

fn sample_trajs(config: &FlywheelConfig, out: &Path) -> Result<()> {
    let materials = build_materials(config)?;
    save_trajs(out.join("traj_pool.jsonl"), &materials.traj_pool)?;
    println!("wrote {} trajectories", materials.traj_pool.len());
    Ok(())
}

fn save_round_dir(root: &Path, state: &RoundState, manifest: &mut RunManifest) -> Result<()> {
    let dir = format!("round_{}", state.t);
    let pools: [(&str, &[_]); 7] = [
        ("d_n.jsonl", &state.d_n),
        ("nd_n.jsonl", &state.nd_n),
        ("fnd_n.jsonl", &state.fnd_n),
        ("ld_n.jsonl", &state.ld_n),
        ("fd_n_accum.jsonl", &state.fd_n_accum),
        ("d_g.jsonl", &state.d_g),
        ("fd_g.jsonl", &state.fd_g),
    ];
    for (name, pool) in pools {
        let rel = format!("{dir}/{name}");
        save_pool(root.join(&rel), pool)?;
        manifest.add_artifact(root, &rel)?;
    }
    for (name, value) in [
        ("navigator.json", serde_json::to_value(&state.navigator)?),
        ("generator.json", serde_json::to_value(&state.generator)?),
    ] {
        let rel = format!("{dir}/{name}");
        save_json(root.join(&rel), &value)?;
        manifest.add_artifact(root, &rel)?;
    }
    Ok(())
}

fn cmd_run_flywheel(config: &FlywheelConfig, out: &Path) -> Result<()> {
    let materials = build_materials(config)?;
    let run = run_flywheel(&materials, config)?;

    let run_id = format!("fw-{:016x}", config.master_seed);
    let mut manifest = RunManifest::new(run_id, config.clone());
    write_text(
        out.join("config.toml"),
        &toml::to_string_pretty(config).context("serializing config")?,
    )?;
    manifest.add_artifact(out, "config.toml")?;

    let envs: Vec<_> = materials.worlds.iter().collect();
    save_worlds(out.join("worlds.jsonl"), &envs)?;
    save_pool(out.join("seed_pool.jsonl"), &materials.seed_pairs)?;
    save_trajs(out.join("traj_pool.jsonl"), &materials.traj_pool)?;
    save_pool(out.join("eval_pool.jsonl"), &materials.eval_unseen)?;
    for rel in [
        "worlds.jsonl",
        "seed_pool.jsonl",
        "traj_pool.jsonl",
        "eval_pool.jsonl",
    ] {
        manifest.add_artifact(out, rel)?;
    }

    save_json(out.join("baseline/navigator.json"), &run.baseline_navigator)?;
    save_json(out.join("baseline/generator.json"), &run.baseline_generator)?;
    manifest.add_artifact(out, "baseline/navigator.json")?;
    manifest.add_artifact(out, "baseline/generator.json")?;
    for state in &run.states {
        save_round_dir(out, state, &mut manifest)?;
    }

    save_json(out.join("reports.json"), &run.reports)?;
    write_text(
        out.join("report.csv"),
        &emit_report(&run.reports, ReportFormat::Csv),
    )?;
    write_text(
        out.join("report.md"),
        &emit_report(&run.reports, ReportFormat::Markdown),
    )?;
    for rel in ["reports.json", "report.csv", "report.md"] {
        manifest.add_artifact(out, rel)?;
    }
    save_json(out.join("manifest.json"), &manifest)?;
    manifest.verify(out)?;

    print!("{}", emit_report(&run.reports, ReportFormat::Markdown));
    Ok(())
}

fn cmd_score(
    config: &FlywheelConfig,
    worlds: &Path,
    pool: &Path,
    scorer: &str,
    navigator: Option<PathBuf>,
    generator: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let worlds = load_world_set(worlds)?;
    let pool = load_pool(pool)?;
    let scorer: Scorer = scorer.parse()?;
    let nav: Option<NavigatorParams> = navigator.map(load_json).transpose()?;
    let gen: Option<GeneratorParams> = generator.map(load_json).transpose()?;
    let models = ScoreModels {
        nav: nav.as_ref(),
        gen: gen.as_ref(),
        max_steps: config.max_steps,
        d_th: config.success_radius,
    };
    let scores = score_pool(&worlds, &pool, scorer, &models, config.master_seed)?;
    let mut lines = String::new();
    for (pair, score) in pool.iter().zip(&scores) {
        lines.push_str(&serde_json::to_string(&serde_json::json!({
            "pair_id": pair.pair_id,
            "score": score,
        }))?);
        lines.push('\n');
    }
    write_text(out, &lines)?;
    println!("scored {} pairs with {scorer}", pool.len());
    Ok(())
}

fn cmd_filter(
    config: &FlywheelConfig,
    worlds: &Path,
    pool: &Path,
    navigator: &Path,
    kind: FilterKind,
    out: &Path,
) -> Result<()> {
    let worlds = load_world_set(worlds)?;
    let pool = load_pool(pool)?;
    let nav: NavigatorParams = load_json(navigator)?;
    match kind {
        FilterKind::Gen => {
            let kept = filter_generator_data(
                &worlds,
                &pool,
                &nav,
                &config.thresholds,
                config.max_steps,
                config.success_radius,
            )?;
            save_pool(out.join("kept.jsonl"), &kept)?;
            println!("kept {} of {} pairs", kept.len(), pool.len());
        }
        FilterKind::Nav => {
            let (kept, rejected) = filter_navigator_data(
                &worlds,
                &pool,
                &nav,
                &config.thresholds,
                config.max_steps,
                config.success_radius,
            )?;
            save_pool(out.join("kept.jsonl"), &kept)?;
            save_pool(out.join("rejected.jsonl"), &rejected)?;
            println!("kept {} of {} pairs", kept.len(), pool.len());
        }
    }
    Ok(())
}

fn cmd_eval(
    config: &FlywheelConfig,
    worlds: &Path,
    pool: &Path,
    navigator: &Path,
    generator: &Path,
) -> Result<()> {
    let worlds = load_world_set(worlds)?;
    let pool = load_pool(pool)?;
    if pool.is_empty() {
        bail!("evaluation pool is empty");
    }
    let nav: NavigatorParams = load_json(navigator)?;
    let gen: GeneratorParams = load_json(generator)?;
    let summary = evaluate_round(&worlds, &nav, &gen, &pool, config)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

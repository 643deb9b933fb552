//! Persistence: line-delimited pools, JSON model records, run manifests,
//! and report tables.
//!
//! Every pool file starts with a one-line schema header so a reader can
//! refuse the wrong kind of file before touching data. Records are plain
//! JSON, one per line; floats serialize as their shortest round-trip
//! decimal, which makes byte-level digests meaningful across platforms.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::flywheel::{FlywheelConfig, RoundReport};
use crate::instr::{vocab_stats, DatasetStats};
use crate::scoring::PairedSample;
use crate::traj::Trajectory;
use crate::world::Environment;
use crate::{Error, Result};

/// Bumped when any persisted record layout changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const POOL_SCHEMA: &str = "pairs";
pub const WORLDS_SCHEMA: &str = "worlds";
pub const TRAJS_SCHEMA: &str = "trajs";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Write `items` as a schema header line plus one JSON record per line.
pub fn save_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    schema: &str,
    items: &[T],
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(display(path), e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(display(path), e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema: schema.to_string(),
        version: SCHEMA_VERSION,
    };
    let mut write_line = |line: String| -> Result<()> {
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(display(path), e))
    };
    write_line(serde_json::to_string(&header)?)?;
    for item in items {
        write_line(serde_json::to_string(item)?)?;
    }
    out.flush().map_err(|e| Error::io(display(path), e))
}

/// Read a file written by [`save_jsonl`], checking the schema header and
/// reporting malformed records with their line number.
pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>, schema: &str) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(display(path), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Malformed {
        path: display(path),
        line: 1,
        msg: "missing schema header".into(),
    })?;
    let first = first.map_err(|e| Error::io(display(path), e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Malformed {
        path: display(path),
        line: 1,
        msg: format!("bad schema header: {e}"),
    })?;
    if header.schema != schema || header.version != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: display(path),
            expected: format!("{schema} v{SCHEMA_VERSION}"),
            found: format!("{} v{}", header.schema, header.version),
        });
    }
    let mut items = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(display(path), e))?;
        if line.is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: display(path),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_pool(path: impl AsRef<Path>, pairs: &[PairedSample]) -> Result<()> {
    save_jsonl(path, POOL_SCHEMA, pairs)
}

/// Load a pool and validate each record's internal consistency.
pub fn load_pool(path: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let path = path.as_ref();
    let pairs: Vec<PairedSample> = load_jsonl(path, POOL_SCHEMA)?;
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate().map_err(|e| Error::Malformed {
            path: display(path),
            line: i + 2,
            msg: e.to_string(),
        })?;
    }
    Ok(pairs)
}

pub fn save_worlds(path: impl AsRef<Path>, worlds: &[&Environment]) -> Result<()> {
    save_jsonl(path, WORLDS_SCHEMA, worlds)
}

pub fn load_worlds(path: impl AsRef<Path>) -> Result<Vec<Environment>> {
    let path = path.as_ref();
    let worlds: Vec<Environment> = load_jsonl(path, WORLDS_SCHEMA)?;
    for (i, env) in worlds.iter().enumerate() {
        env.validate().map_err(|e| Error::Malformed {
            path: display(path),
            line: i + 2,
            msg: e.to_string(),
        })?;
    }
    Ok(worlds)
}

pub fn save_trajs(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    save_jsonl(path, TRAJS_SCHEMA, trajs)
}

pub fn load_trajs(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    load_jsonl(path, TRAJS_SCHEMA)
}

/// Pretty-printed JSON for single records (model params, configs,
/// reports).
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(display(path), e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(display(path), e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(display(path), e))?;
    serde_json::from_str(&text).map_err(Error::from)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(display(path), e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(display(path), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(display(path), e))?;
    Ok(sha256_hex(&bytes))
}

/// What a run leaves behind: the resolved config and a digest for every
/// artifact, so any result can be traced to its exact inputs. This is
/// the only artifact that records wall-clock time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_unix: u64,
    pub config: FlywheelConfig,
    /// Relative artifact path → sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, config: FlywheelConfig) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            run_id: run_id.into(),
            created_unix,
            config,
            artifacts: BTreeMap::new(),
        }
    }

    /// Record the digest of `root/rel`.
    pub fn add_artifact(&mut self, root: &Path, rel: &str) -> Result<()> {
        let digest = file_digest(root.join(rel))?;
        self.artifacts.insert(rel.to_string(), digest);
        Ok(())
    }

    /// Check that every recorded artifact still exists with matching
    /// bytes.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, expected) in &self.artifacts {
            let found = file_digest(root.join(rel))?;
            if &found != expected {
                return Err(Error::Invariant(format!(
                    "artifact {rel} digest {found} does not match manifest {expected}"
                )));
            }
        }
        Ok(())
    }
}

/// Corpus statistics of a pool, per the instruction-language counters.
pub fn dataset_stats(pool: &[PairedSample]) -> DatasetStats {
    vocab_stats(pool.iter().map(|p| (p.env_id.as_str(), &p.instr)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

const REPORT_COLUMNS: [&str; 21] = [
    "round",
    "nav_version",
    "gen_version",
    "d_n",
    "fnd_n",
    "ld_n",
    "fd_n_accum",
    "d_g",
    "fd_g",
    "ne",
    "osr",
    "sr",
    "spl",
    "ndtw",
    "sdtw",
    "bleu1",
    "bleu4",
    "rouge_l",
    "cider",
    "prop_f1",
    "prop_f1_dir",
];

fn report_cells(report: &RoundReport) -> Vec<String> {
    let m = &report.metrics;
    let f = |x: f64| format!("{x:.6}");
    vec![
        report.round.to_string(),
        report.nav_version.to_string(),
        report.gen_version.to_string(),
        report.d_n.to_string(),
        report.fnd_n.to_string(),
        report.ld_n.to_string(),
        report.fd_n_accum.to_string(),
        report.d_g.to_string(),
        report.fd_g.to_string(),
        f(m.ne),
        f(m.osr),
        f(m.sr),
        f(m.spl),
        f(m.ndtw),
        f(m.sdtw),
        f(m.bleu1),
        f(m.bleu4),
        f(m.rouge_l),
        f(m.cider),
        f(m.prop_f1),
        f(m.prop_f1_dir),
    ]
}

/// Render round reports (baseline first) as CSV or a markdown table.
/// Both formats print identical cell values.
pub fn emit_report(reports: &[RoundReport], format: ReportFormat) -> String {
    let rows: Vec<Vec<String>> = reports.iter().map(report_cells).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&REPORT_COLUMNS.join(","));
            out.push('\n');
            for row in rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| ");
            out.push_str(&REPORT_COLUMNS.join(" | "));
            out.push_str(" |\n|");
            for _ in REPORT_COLUMNS {
                out.push_str(" --- |");
            }
            out.push('\n');
            for row in rows {
                out.push_str("| ");
                out.push_str(&row.join(" | "));
                out.push_str(" |\n");
            }
        }
    }
    out
}

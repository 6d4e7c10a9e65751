//! Run directories: manifest, metrics and CSV tables, each written atomically.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::MetricsReport;
use crate::runconfig::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const ACCURACY_MATRIX: &str = "accuracy_matrix.csv";
pub const CURVES: &str = "per_task_curves.csv";
pub const SWEEP: &str = "sweep.csv";

/// Upper bound on tasks accepted when reading files back.
pub const MAX_TASKS: usize = 4096;

/// Fully resolved configuration of a run. Replaying it reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut config = cfg.resolved();
        config.out_dir = None;
        Self {
            tool: "stpr".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config_hash: config.config_hash(),
            config,
        }
    }

    /// Parses a manifest and checks that its hash and seed match its config.
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::decode("manifest", e.to_string()))?;
        if m.seed != m.config.seed {
            return Err(Error::decode("manifest", format!("seed {} disagrees with config seed {}", m.seed, m.config.seed)));
        }
        let hash = m.config.config_hash();
        if m.config_hash != hash {
            return Err(Error::decode("manifest", format!("config hash {} does not match contents ({hash})", m.config_hash)));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Writes `bytes` to a temporary file beside `path`, syncs it and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new().prefix(".stpr-").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_string(rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn matrix_header(tasks: usize) -> Vec<String> {
    std::iter::once("after_task".to_string())
        .chain((0..tasks).map(|j| format!("task_{j}")))
        .collect()
}

/// One row per finished task; cells above the diagonal are empty.
pub fn accuracy_matrix_csv(matrix: &[Vec<f64>]) -> Result<String> {
    let b = matrix.len();
    let rows = matrix.iter().enumerate().map(|(i, row)| {
        std::iter::once(i.to_string())
            .chain((0..b).map(|j| row.get(j).map_or(String::new(), |v| v.to_string())))
            .collect()
    });
    csv_string(std::iter::once(matrix_header(b)).chain(rows))
}

fn parse_accuracy(cell: &str, i: usize, j: usize) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::decode("accuracy matrix", format!("cell ({i}, {j}) is not a number: '{cell}'")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::decode("accuracy matrix", format!("cell ({i}, {j}) = {v} outside [0, 1]")));
    }
    Ok(v)
}

/// Reads `accuracy_matrix.csv` back into its lower-triangular form.
pub fn parse_accuracy_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let bad = |d: String| Error::decode("accuracy matrix", d);
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let b = header.len().checked_sub(1).ok_or_else(|| bad("empty header".into()))?;
    if b == 0 || b > MAX_TASKS {
        return Err(bad(format!("{b} task columns")));
    }
    if header.iter().ne(matrix_header(b).iter().map(String::as_str)) {
        return Err(bad("unexpected header".into()));
    }
    let mut matrix = Vec::with_capacity(b);
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if i >= b {
            return Err(bad(format!("more than {b} rows")));
        }
        if rec.len() != b + 1 || rec[0].trim() != i.to_string() {
            return Err(bad(format!("row {i} is malformed")));
        }
        let mut row = Vec::with_capacity(i + 1);
        for j in 0..b {
            let cell = &rec[j + 1];
            if j <= i {
                row.push(parse_accuracy(cell, i, j)?);
            } else if !cell.trim().is_empty() {
                return Err(bad(format!("cell ({i}, {j}) above the diagonal is filled")));
            }
        }
        matrix.push(row);
    }
    if matrix.len() != b {
        return Err(bad(format!("{} rows for {b} tasks", matrix.len())));
    }
    Ok(matrix)
}

/// Long form of each task's accuracy after every later training stage.
pub fn curves_csv(matrix: &[Vec<f64>]) -> Result<String> {
    let header = ["task", "after_task", "accuracy"].map(String::from).to_vec();
    let b = matrix.len();
    let rows = (0..b).flat_map(|j| (j..b).map(move |i| vec![j.to_string(), i.to_string(), matrix[i][j].to_string()]));
    csv_string(std::iter::once(header).chain(rows))
}

pub fn metrics_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("metrics serialize");
    s.push('\n');
    s
}

/// Parses `metrics.json` and checks its internal consistency.
pub fn parse_metrics(text: &str) -> Result<MetricsReport> {
    let bad = |d: String| Error::decode("metrics", d);
    let m: MetricsReport = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let b = m.accuracy_matrix.len();
    if b == 0 || b > MAX_TASKS {
        return Err(bad(format!("{b} tasks")));
    }
    for (i, row) in m.accuracy_matrix.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(bad(format!("accuracy row {i} has {} entries", row.len())));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad(format!("accuracy row {i} leaves [0, 1]")));
        }
    }
    if m.eval_counts.len() != b {
        return Err(bad(format!("{} eval counts for {b} tasks", m.eval_counts.len())));
    }
    if !(0.0..=1.0).contains(&m.acc) || !m.bwf.is_finite() || m.bwf.abs() > 1.0 {
        return Err(bad(format!("acc {} / bwf {} out of range", m.acc, m.bwf)));
    }
    if m.routing_hit_rate.is_some_and(|h| !(0.0..=1.0).contains(&h)) {
        return Err(bad("routing hit rate outside [0, 1]".into()));
    }
    Ok(m)
}

/// Writes every per-run artifact into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, report: &MetricsReport) -> Result<()> {
    write_atomic(&dir.join(MANIFEST), Manifest::new(cfg).to_json().as_bytes())?;
    write_atomic(&dir.join(METRICS), metrics_json(report).as_bytes())?;
    write_atomic(&dir.join(ACCURACY_MATRIX), accuracy_matrix_csv(&report.accuracy_matrix)?.as_bytes())?;
    write_atomic(&dir.join(CURVES), curves_csv(&report.accuracy_matrix)?.as_bytes())?;
    Ok(())
}

/// Reads a run directory and cross-checks the manifest, metrics and matrix.
pub fn load_run(dir: &Path) -> Result<(Manifest, MetricsReport)> {
    let read = |name: &str| std::fs::read_to_string(dir.join(name));
    let manifest = Manifest::parse(&read(MANIFEST)?)?;
    let metrics = parse_metrics(&read(METRICS)?)?;
    let matrix = parse_accuracy_matrix(&read(ACCURACY_MATRIX)?)?;
    if matrix != metrics.accuracy_matrix {
        return Err(Error::decode("run directory", format!("{ACCURACY_MATRIX} disagrees with {METRICS}")));
    }
    if manifest.config_hash != metrics.config_hash {
        return Err(Error::decode("run directory", format!("{MANIFEST} and {METRICS} describe different configs")));
    }
    Ok((manifest, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub acc: f64,
    pub bwf: f64,
    pub routing_hit_rate: Option<f64>,
    pub config_hash: String,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    if rows.is_empty() {
        w.write_record(["param", "value", "acc", "bwf", "routing_hit_rate", "config_hash"])
            .map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Plain-text summary printed by `stpr report`.
pub fn summary(manifest: &Manifest, m: &MetricsReport) -> String {
    let mut s = String::new();
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    let _ = writeln!(s, "run      {} (seed {}, preset {}, routing {}, distill {})", &m.config_hash[..12.min(m.config_hash.len())], manifest.seed, m.preset, m.routing, m.distill);
    let _ = writeln!(s, "Acc      {}", pct(m.acc));
    let _ = writeln!(s, "BWF      {}", pct(m.bwf));
    if let Some(h) = m.routing_hit_rate {
        let _ = writeln!(s, "routing  {} hit rate", pct(h));
    }
    let _ = writeln!(s, "\nper-task accuracy (when learned -> final)");
    let last = m.accuracy_matrix.last().map(Vec::as_slice).unwrap_or(&[]);
    for (j, row) in m.accuracy_matrix.iter().enumerate() {
        let _ = writeln!(s, "  task {j:<3} {} -> {}", pct(row[j]), pct(last[j]));
    }
    let p = &m.parameters;
    let _ = writeln!(s, "\nparameters");
    let _ = writeln!(s, "  backbone (frozen)    {}", p.backbone_frozen);
    let _ = writeln!(s, "  adapter (trainable)  {} of {} (closed form {})", p.adapter_trainable, p.adapter, p.adapter_closed_form);
    let _ = writeln!(s, "  experts              {} x {} (closed form {})", p.experts.len(), p.experts.first().copied().unwrap_or(0), p.expert_closed_form);
    let growth: Vec<String> = m.accounting.iter().map(|a| a.experts.to_string()).collect();
    let _ = writeln!(s, "  experts after task   {}", growth.join(" "));
    if !m.top_channels.is_empty() {
        let _ = writeln!(s, "\nmost important channels");
        for c in &m.top_channels {
            let _ = writeln!(s, "  channel {:<3} {:.4}", c.channel, c.weight);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> Vec<Vec<f64>> {
        vec![vec![0.9], vec![0.7, 0.8], vec![0.1, 0.65, 1.0]]
    }

    #[test]
    fn matrix_round_trips() {
        let m = matrix();
        let text = accuracy_matrix_csv(&m).unwrap();
        assert!(text.starts_with("after_task,task_0,task_1,task_2\n0,0.9,,\n"));
        assert_eq!(parse_accuracy_matrix(&text).unwrap(), m);
    }

    #[test]
    fn malformed_matrices_are_rejected() {
        for bad in [
            "",
            "after_task\n",
            "after_task,task_0\n0,1.5\n",
            "after_task,task_0\n0,x\n",
            "after_task,task_0,task_1\n0,0.5,0.5\n1,0.5,0.5\n",
            "after_task,task_0,task_1\n0,0.5,\n",
            "after_task,task_0\n1,0.5\n",
            "after_task,task_0\n0,0.5\n1,0.5\n",
            "after_task,task_1\n0,0.5\n",
        ] {
            assert!(matches!(parse_accuracy_matrix(bad), Err(Error::Decode { .. })), "{bad:?}");
        }
    }

    #[test]
    fn curves_are_long_form() {
        let text = curves_csv(&matrix()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,after_task,accuracy");
        assert_eq!(lines.len(), 1 + 6);
        assert_eq!(lines[1], "0,0,0.9");
        assert_eq!(lines[3], "0,2,0.1");
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"first version, longer").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "second");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn manifest_hash_is_checked() {
        let m = Manifest::new(&RunConfig::default());
        let text = m.to_json();
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        let tampered = text.replace("\"w\": 10000.0", "\"w\": 10.0");
        assert_ne!(tampered, text);
        assert!(matches!(Manifest::parse(&tampered), Err(Error::Decode { .. })));
        assert!(Manifest::parse("{}").is_err());
    }

    #[test]
    fn sweep_rows_keep_order() {
        let rows: Vec<SweepRow> = ["1000", "10000"]
            .iter()
            .map(|v| SweepRow {
                param: "train.w".into(),
                value: v.to_string(),
                acc: 0.5,
                bwf: 0.1,
                routing_hit_rate: None,
                config_hash: "ab".into(),
            })
            .collect();
        let text = sweep_csv(&rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "param,value,acc,bwf,routing_hit_rate,config_hash");
        assert_eq!(lines[1], "train.w,1000,0.5,0.1,,ab");
        assert_eq!(lines.len(), 3);
        assert_eq!(sweep_csv(&[]).unwrap().lines().count(), 1);
    }
}

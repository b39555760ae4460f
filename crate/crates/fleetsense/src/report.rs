//! Aggregate metrics CSVs scattered under a directory tree into a
//! summary table (mean ± std per policy per distribution) and a
//! plot-ready long-format CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use walkdir::WalkDir;

use crate::mappo::mean_std;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no metrics files found under {0}")]
    NoInputs(PathBuf),
    #[error("malformed metrics file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One parsed metrics file: its labels and per-episode rows.
#[derive(Debug, Clone)]
pub struct MetricsFile {
    pub path: PathBuf,
    pub policy: String,
    pub distribution: String,
    pub seed: u64,
    /// (episode, adi, adu, qos, avg_aoi)
    pub rows: Vec<(u64, f64, f64, f64, Option<f64>)>,
}

fn header_field(line: &str, key: &str) -> Option<String> {
    line.split_whitespace()
        .filter_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
        .next()
}

pub fn parse_metrics_file(path: &Path) -> Result<MetricsFile, ReportError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ReportError::Io { path: path.to_path_buf(), source })?;
    let malformed = |reason: &str| ReportError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| malformed("empty file"))?;
    let seed: u64 = header_field(first, "seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed("missing seed header"))?;
    let second = lines.next().ok_or_else(|| malformed("missing label header"))?;
    let policy = header_field(second, "policy").ok_or_else(|| malformed("missing policy label"))?;
    let distribution =
        header_field(second, "distribution").ok_or_else(|| malformed("missing distribution"))?;
    let header = lines.next().ok_or_else(|| malformed("missing column header"))?;
    if !header.starts_with("episode,slot_count,adi,adu,qos,avg_aoi") {
        return Err(malformed("unexpected column header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 13 {
            return Err(malformed(&format!("expected 13 columns, got {}", cols.len())));
        }
        let parse = |i: usize| -> Result<f64, ReportError> {
            cols[i].parse().map_err(|_| malformed(&format!("bad number `{}`", cols[i])))
        };
        let episode =
            cols[0].parse().map_err(|_| malformed(&format!("bad episode `{}`", cols[0])))?;
        let avg_aoi = if cols[5].is_empty() { None } else { Some(parse(5)?) };
        rows.push((episode, parse(2)?, parse(3)?, parse(4)?, avg_aoi));
    }
    Ok(MetricsFile { path: path.to_path_buf(), policy, distribution, seed, rows })
}

/// Find and parse every metrics.csv under `root`.
pub fn collect_metrics(root: &Path) -> Result<Vec<MetricsFile>, ReportError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name().into_iter().flatten() {
        if entry.file_type().is_file() && entry.file_name() == "metrics.csv" {
            files.push(parse_metrics_file(entry.path())?);
        }
    }
    if files.is_empty() {
        return Err(ReportError::NoInputs(root.to_path_buf()));
    }
    Ok(files)
}

/// Mean ± std per (policy, distribution) over all episodes of all seeds.
pub fn summary_csv(files: &[MetricsFile]) -> String {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsFile>> = BTreeMap::new();
    for f in files {
        groups.entry((f.policy.clone(), f.distribution.clone())).or_default().push(f);
    }
    let mut out = String::from(
        "policy,distribution,seeds,episodes,adi_mean,adi_std,adu_mean,adu_std,qos_mean,qos_std\n",
    );
    for ((policy, distribution), members) in &groups {
        let adi: Vec<f64> = members.iter().flat_map(|f| f.rows.iter().map(|r| r.1)).collect();
        let adu: Vec<f64> = members.iter().flat_map(|f| f.rows.iter().map(|r| r.2)).collect();
        let qos: Vec<f64> = members.iter().flat_map(|f| f.rows.iter().map(|r| r.3)).collect();
        let (adi_m, adi_s) = mean_std(&adi);
        let (adu_m, adu_s) = mean_std(&adu);
        let (qos_m, qos_s) = mean_std(&qos);
        out.push_str(&format!(
            "{policy},{distribution},{},{},{adi_m:.6},{adi_s:.6},{adu_m:.6},{adu_s:.6},\
             {qos_m:.6},{qos_s:.6}\n",
            members.len(),
            adi.len(),
        ));
    }
    out
}

/// One row per (file, episode, metric): the shape plotting tools want.
pub fn long_csv(files: &[MetricsFile]) -> String {
    let mut out = String::from("policy,distribution,seed,episode,metric,value\n");
    for f in files {
        for (episode, adi, adu, qos, avg_aoi) in &f.rows {
            let mut push = |metric: &str, value: f64| {
                out.push_str(&format!(
                    "{},{},{},{episode},{metric},{value:.6}\n",
                    f.policy, f.distribution, f.seed
                ));
            };
            push("adi", *adi);
            push("adu", *adu);
            push("qos", *qos);
            if let Some(a) = avg_aoi {
                push("avg_aoi", *a);
            }
        }
    }
    out
}

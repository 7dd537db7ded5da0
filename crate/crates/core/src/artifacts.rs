//! Output artifacts: trajectory CSV, report JSON and content hashes.
//!
//! Trajectory CSV columns are `t, norm_H, V, norm_f, interval_n, lambda_n`.
//! Floats use 17 significant digits so they re-parse bit for bit;
//! `interval_n = -1` and `lambda_n = NaN` mark samples with no active
//! feedback.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::constants::{C0Estimate, ConstantPack};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

pub const TRAJECTORY_COLUMNS: [&str; 6] = ["t", "norm_H", "V", "norm_f", "interval_n", "lambda_n"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub norm_h: f64,
    pub v: f64,
    pub norm_f: f64,
    pub interval: Option<usize>,
    pub lambda: Option<f64>,
}

pub fn trajectory_rows(traj: &Trajectory) -> Vec<TrajectoryRow> {
    let norms = traj.norm_h();
    (0..traj.len())
        .map(|i| TrajectoryRow {
            t: traj.t[i],
            norm_h: norms[i],
            v: traj.v[i],
            norm_f: traj.norm_f[i],
            interval: traj.interval[i],
            lambda: traj.lambda[i],
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let interval = r.interval.map_or("-1".to_string(), |n| n.to_string());
        w.write_record([
            num(r.t),
            num(r.norm_h),
            num(r.v),
            num(r.norm_f),
            interval,
            num(r.lambda.unwrap_or(f64::NAN)),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(TRAJECTORY_COLUMNS) {
        return Err(Error::Format(format!("unexpected trajectory header {:?}", header)));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Format(format!("column {}: bad number {:?}", TRAJECTORY_COLUMNS[i], &rec[i])))
        };
        let interval: i64 = rec[4]
            .parse()
            .map_err(|_| Error::Format(format!("column interval_n: bad integer {:?}", &rec[4])))?;
        let lambda = f(5)?;
        rows.push(TrajectoryRow {
            t: f(0)?,
            norm_h: f(1)?,
            v: f(2)?,
            norm_f: f(3)?,
            interval: usize::try_from(interval).ok(),
            lambda: (!lambda.is_nan()).then_some(lambda),
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Where each constant came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub c1: String,
    pub c0: String,
    pub c2_q_c3: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c0_estimate: Option<C0Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsRecord {
    pub pack: ConstantPack,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    /// SHA-256 of the emitted config text.
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsRecord>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<InputHash>,
    pub seeds: BTreeMap<String, u64>,
    pub results: serde_json::Value,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let mut seeds = BTreeMap::new();
        seeds.insert("initial_state".to_string(), config.seed);
        seeds.insert("c0_estimate".to_string(), config.c0_estimate.seed);
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_sha256: sha256_hex(config.emit()?.as_bytes()),
            constants: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds,
            results: serde_json::Value::Null,
        })
    }

    pub fn cite(list: &mut Vec<InputHash>, role: &str, path: &Path) -> Result<()> {
        list.push(InputHash {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::cache::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

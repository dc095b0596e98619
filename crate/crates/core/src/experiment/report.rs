//! CSV/JSON result files with a JSON metadata sidecar.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gssum::GssumScore;
use crate::money::Credits;

use super::scenario::TaskPlacement;
use super::sweep::{Algorithm, ResultRow, RowFailure};
use super::ExperimentError;

pub const CSV_HEADER: &str = "algorithm,n_users,n_tasks,r,seed,total_payment,total_cost,runtime_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub version: String,
    /// The full run configuration as given.
    pub config: serde_json::Value,
    /// Identifiers of every modelling choice that affects the numbers.
    pub decisions: BTreeMap<String, String>,
    pub failures: Vec<RowFailure>,
}

impl ReportMetadata {
    pub fn new(config: serde_json::Value, decisions: BTreeMap<String, String>) -> Self {
        ReportMetadata {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            decisions,
            failures: Vec::new(),
        }
    }
}

pub fn default_decisions(score: GssumScore, placement: TaskPlacement, timed: bool) -> BTreeMap<String, String> {
    [
        ("tie_break", "ascending_user_id"),
        ("repeat_factor", "smallest_r_reaching_beta"),
        ("gssum_score", score.name()),
        ("task_placement", placement.name()),
        ("cost_units", "hundredths_of_a_credit"),
        ("cost_draw", "uniform_integer_hundredths"),
        ("bid_rule", "euclidean_cell_distance_at_most_radius"),
        ("reputation_rule", "plus_one_or_halve"),
        ("mup_payout", "lump_sum_on_submission"),
        ("da_price", "total_paid_to_workers"),
        ("deposit_credits", "10"),
        ("registration_fee_credits", "100"),
        ("call_fee_credits", "1"),
        ("runtime_s", if timed { "wall_clock" } else { "zeroed_for_reproducibility" }),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes `rows` to `path` and the metadata next to it as
/// `<path>.meta.json`. Returns both paths.
pub fn emit_report(
    rows: &[ResultRow],
    meta: &ReportMetadata,
    path: &Path,
    format: ReportFormat,
) -> Result<(PathBuf, PathBuf), ExperimentError> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Csv => write_csv(rows, &mut out)?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    let meta_path = sidecar_path(path);
    let mut side = BufWriter::new(File::create(&meta_path)?);
    serde_json::to_writer_pretty(&mut side, meta)?;
    side.write_all(b"\n")?;
    side.flush()?;
    Ok((path.to_path_buf(), meta_path))
}

pub fn write_csv(rows: &[ResultRow], out: impl Write) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        w.write_record([
            row.algorithm.name().to_string(),
            row.n_users.to_string(),
            row.n_tasks.to_string(),
            row.r.to_string(),
            row.seed.to_string(),
            row.total_payment.to_string(),
            row.total_cost.to_string(),
            row.runtime_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(ExperimentError::Malformed(format!("unexpected header `{}`", header.join(","))));
    }
    let bad = |field: &str, value: &str| ExperimentError::Malformed(format!("bad {field} `{value}`"));
    let mut rows = Vec::new();
    for record in rd.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("");
        rows.push(ResultRow {
            algorithm: get(0).parse::<Algorithm>().map_err(|_| bad("algorithm", get(0)))?,
            n_users: get(1).parse().map_err(|_| bad("n_users", get(1)))?,
            n_tasks: get(2).parse().map_err(|_| bad("n_tasks", get(2)))?,
            r: get(3).parse().map_err(|_| bad("r", get(3)))?,
            seed: get(4).parse().map_err(|_| bad("seed", get(4)))?,
            total_payment: get(5).parse::<Credits>().map_err(|_| bad("total_payment", get(5)))?,
            total_cost: get(6).parse::<Credits>().map_err(|_| bad("total_cost", get(6)))?,
            runtime_s: get(7).parse().map_err(|_| bad("runtime_s", get(7)))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<ResultRow> {
        (0..n)
            .map(|i| ResultRow {
                algorithm: if i % 2 == 0 { Algorithm::Csopt } else { Algorithm::Gssum },
                n_users: 100 + i,
                n_tasks: 50,
                r: 1 + (i % 5) as u32,
                seed: i as u64,
                total_payment: Credits::from_units(12_345 + i as i64),
                total_cost: Credits::from_units(9_000 + 7 * i as i64),
                runtime_s: i as f64 / 7.0,
            })
            .collect()
    }

    fn roundtrip(n: usize) {
        let mut buf = Vec::new();
        write_csv(&rows(n), &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..]).unwrap(), rows(n));
    }

    #[test]
    fn empty_rows_give_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));
        roundtrip(0);
    }

    #[test]
    fn one_row_roundtrip() {
        roundtrip(1);
        let mut buf = Vec::new();
        write_csv(&rows(1), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap(), "csopt,100,50,1,0,123.45,90.00,0");
    }

    #[test]
    fn thousand_rows_roundtrip() {
        roundtrip(1000);
    }

    #[test]
    fn files_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let meta = ReportMetadata::new(
            serde_json::json!({"seeds": 3}),
            default_decisions(GssumScore::default(), TaskPlacement::default(), false),
        );
        let (data, side) = emit_report(&rows(3), &meta, &path, ReportFormat::Csv).unwrap();
        assert_eq!(read_csv(File::open(data).unwrap()).unwrap(), rows(3));
        let back: ReportMetadata = serde_json::from_reader(File::open(&side).unwrap()).unwrap();
        assert_eq!(back, meta);
        assert!(side.to_string_lossy().ends_with("out.csv.meta.json"));

        let json_path = dir.path().join("out.json");
        emit_report(&rows(2), &meta, &json_path, ReportFormat::Json).unwrap();
        let parsed: Vec<ResultRow> = serde_json::from_reader(File::open(json_path).unwrap()).unwrap();
        assert_eq!(parsed, rows(2));
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(matches!(read_csv("a,b\n1,2\n".as_bytes()), Err(ExperimentError::Malformed(_))));
    }
}

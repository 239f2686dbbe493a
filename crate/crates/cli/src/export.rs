//! CSV and JSON writers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::experiment::{ExperimentResults, ResultRow, SummaryRow, TraceRow};

pub const CSV_HEADER: [&str; 9] = [
    "sweep_value",
    "mode",
    "estimator",
    "combiner",
    "drop",
    "cell",
    "sum_se",
    "iterations",
    "wall_time_s",
];

fn csv_err(e: csv::Error) -> CliError {
    CliError::Output(e.to_string())
}

pub fn write_rows_csv<W: Write>(out: W, rows: &[ResultRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sweep_value.to_string(),
            r.mode.to_string(),
            r.estimator.to_string(),
            r.combiner.to_string(),
            r.drop.to_string(),
            r.cell.to_string(),
            r.sum_se.to_string(),
            r.iterations.to_string(),
            r.wall_time_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces_csv<W: Write>(out: W, rows: &[TraceRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep_value", "mode", "estimator", "drop", "iteration", "sum_se"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sweep_value.to_string(),
            r.mode.to_string(),
            r.estimator.to_string(),
            r.drop.to_string(),
            r.iteration.to_string(),
            r.sum_se.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep_value", "mode", "mean_sum_se", "n_drops"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.sweep_value.to_string(), r.mode.to_string(), r.mean_sum_se.to_string(), r.n_drops.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(results: &ExperimentResults) -> CliResult<String> {
    serde_json::to_string_pretty(results).map_err(|e| CliError::Output(e.to_string()))
}

pub fn from_json(text: &str) -> CliResult<ExperimentResults> {
    serde_json::from_str(text).map_err(|e| CliError::Output(e.to_string()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write `<prefix>.csv`, `<prefix>.json`, `<prefix>_summary.csv` and, when
/// traces were recorded, `<prefix>_trace.csv`. Returns the written paths.
pub fn export_all(results: &ExperimentResults, prefix: &Path) -> CliResult<Vec<PathBuf>> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut written = Vec::new();
    let path = with_suffix(prefix, ".csv");
    write_rows_csv(fs::File::create(&path)?, &results.rows)?;
    written.push(path);
    let path = with_suffix(prefix, ".json");
    fs::write(&path, to_json(results)?)?;
    written.push(path);
    let path = with_suffix(prefix, "_summary.csv");
    write_summary_csv(fs::File::create(&path)?, &results.summary())?;
    written.push(path);
    if !results.traces.is_empty() {
        let path = with_suffix(prefix, "_trace.csv");
        write_traces_csv(fs::File::create(&path)?, &results.traces)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{ExperimentSpec, Mode};
    use lsfd_core::channel::Estimator;
    use lsfd_core::se::Combiner;

    fn row() -> ResultRow {
        ResultRow {
            sweep_value: 0.2,
            mode: Mode::LsfdOptimized,
            estimator: Estimator::EwMmse,
            combiner: Combiner::Mrc,
            drop: 3,
            cell: 1,
            sum_se: 12.345678901234567,
            per_user_se: vec![1.0 / 3.0, 12.345678901234567 - 1.0 / 3.0],
            iterations: 97,
            wall_time_s: 0.0,
        }
    }

    fn csv_string(rows: &[ResultRow]) -> String {
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, rows).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_results_header_only() {
        assert_eq!(
            csv_string(&[]),
            "sweep_value,mode,estimator,combiner,drop,cell,sum_se,iterations,wall_time_s\n"
        );
    }

    #[test]
    fn one_row_two_lines() {
        let text = csv_string(&[row()]);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "0.2,v,EW-MMSE,MRC,3,1,12.345678901234567,97,0");
    }

    #[test]
    fn json_round_trip() {
        let spec = ExperimentSpec::from_json(
            r#"{"name":"t","estimator":"EW-MMSE","combiner":"MRC","modes":["v"],"n_drops":4}"#,
        )
        .unwrap();
        let results = ExperimentResults {
            spec,
            rows: vec![row(), ResultRow { cell: 2, sum_se: 0.1 + 0.2, ..row() }],
            traces: vec![],
        };
        let back = from_json(&to_json(&results).unwrap()).unwrap();
        assert_eq!(back, results);
    }

    #[test]
    fn export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::from_json(
            r#"{"name":"t","estimator":"MMSE","combiner":"MRC","modes":["i"],"n_drops":1}"#,
        )
        .unwrap();
        let results = ExperimentResults {
            spec,
            rows: vec![row()],
            traces: vec![],
        };
        let paths = export_all(&results, &dir.path().join("sub/t")).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.exists()));
    }

    proptest::proptest! {
        #[test]
        fn json_and_csv_agree_for_any_values(
            values in proptest::collection::vec((0.0f64..1e3, 0usize..500, 0usize..8, -1e3f64..1e3), 0..20),
        ) {
            let spec = ExperimentSpec::from_json(
                r#"{"name":"t","estimator":"MMSE","combiner":"MRC","modes":["i"],"n_drops":1}"#,
            )
            .unwrap();
            let rows: Vec<ResultRow> = values
                .iter()
                .map(|&(v, d, c, s)| ResultRow { sweep_value: v, drop: d, cell: c, sum_se: s, ..row() })
                .collect();
            let results = ExperimentResults { spec, rows, traces: vec![] };
            let back = from_json(&to_json(&results).unwrap()).unwrap();
            proptest::prop_assert_eq!(&back, &results);
            let text = csv_string(&results.rows);
            proptest::prop_assert_eq!(text.lines().count(), results.rows.len() + 1);
            for (line, r) in text.lines().skip(1).zip(&results.rows) {
                let sum: f64 = line.split(',').nth(6).unwrap().parse().unwrap();
                proptest::prop_assert_eq!(sum, r.sum_se);
            }
        }
    }
}

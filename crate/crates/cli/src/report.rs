//! Report emission. Plan runs write wide CSVs (one row per scenario and
//! overlap); the eval-* subcommands emit the long
//! (scenario, o, metric, level, value) layout plus a JSON mirror.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use polyshield_core::{AttackReport, EerPoint, TmrAtFmr};

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn overlap_cell(overlap: Option<usize>) -> String {
    overlap.map(|o| o.to_string()).unwrap_or_default()
}

/// One verification result row for the wide verify.csv.
pub struct VerifyRow {
    pub scenario: String,
    pub overlap: Option<usize>,
    pub tmr: Vec<TmrAtFmr>,
    pub eer: EerPoint,
}

pub fn write_verify_csv(path: &Path, levels: &[f64], rows: &[VerifyRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    let mut header = vec!["scenario".to_string(), "o".to_string()];
    for l in levels {
        header.push(format!("tmr_at_fmr_{l}"));
    }
    header.push("eer".to_string());
    header.push("eer_threshold".to_string());
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.scenario.clone(), overlap_cell(row.overlap)];
        for point in &row.tmr {
            rec.push(fmt_f64(point.tmr_percent));
        }
        rec.push(fmt_f64(row.eer.eer_percent));
        rec.push(fmt_f64(row.eer.threshold));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One identification result row for the wide identify.csv.
pub struct IdentifyRow {
    pub scenario: String,
    pub overlap: Option<usize>,
    pub tpir: Vec<(usize, f64)>,
}

pub fn write_identify_csv(path: &Path, ranks: &[usize], rows: &[IdentifyRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    let mut header = vec!["scenario".to_string(), "o".to_string()];
    for n in ranks {
        header.push(format!("tpir_{n}"));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.scenario.clone(), overlap_cell(row.overlap)];
        for (_, v) in &row.tpir {
            rec.push(fmt_f64(*v));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One attack aggregate row for attack.csv.
pub struct AttackRow {
    pub mode: String,
    pub overlap: usize,
    pub p: usize,
    pub report: AttackReport,
}

pub fn write_attack_csv(path: &Path, labels: &[String], rows: &[AttackRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    let mut header = vec![
        "mode".to_string(),
        "o".to_string(),
        "p".to_string(),
        "solution_rate".to_string(),
    ];
    for l in labels {
        header.push(format!("match_rate_{l}"));
    }
    for l in labels {
        header.push(format!("isr_{l}"));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.mode.clone(),
            row.overlap.to_string(),
            row.p.to_string(),
            fmt_f64(row.report.solution_rate_percent),
        ];
        for l in labels {
            rec.push(fmt_f64(row.report.match_rate_percent[l]));
        }
        for l in labels {
            rec.push(fmt_f64(row.report.isr_percent[l]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format row: (scenario, o, metric, level, value).
pub struct LongRow {
    pub scenario: String,
    pub overlap: Option<usize>,
    pub metric: String,
    pub level: String,
    pub value: f64,
}

pub fn long_rows_verify(
    scenario: &str,
    overlap: Option<usize>,
    tmr: &[TmrAtFmr],
    eer: &EerPoint,
) -> Vec<LongRow> {
    let mut rows = Vec::new();
    for point in tmr {
        rows.push(LongRow {
            scenario: scenario.to_string(),
            overlap,
            metric: "tmr_at_fmr".to_string(),
            level: fmt_f64(point.fmr_percent),
            value: point.tmr_percent,
        });
    }
    rows.push(LongRow {
        scenario: scenario.to_string(),
        overlap,
        metric: "eer".to_string(),
        level: String::new(),
        value: eer.eer_percent,
    });
    rows.push(LongRow {
        scenario: scenario.to_string(),
        overlap,
        metric: "eer_threshold".to_string(),
        level: String::new(),
        value: eer.threshold,
    });
    rows
}

pub fn long_rows_tpir(
    scenario: &str,
    overlap: Option<usize>,
    tpir: &[(usize, f64)],
) -> Vec<LongRow> {
    tpir.iter()
        .map(|(n, v)| LongRow {
            scenario: scenario.to_string(),
            overlap,
            metric: "tpir".to_string(),
            level: n.to_string(),
            value: *v,
        })
        .collect()
}

pub fn write_long_csv(out: &mut dyn Write, rows: &[LongRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "o", "metric", "level", "value"])?;
    for row in rows {
        w.write_record([
            row.scenario.as_str(),
            &overlap_cell(row.overlap),
            &row.metric,
            &row.level,
            &fmt_f64(row.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Report files: a `key: value` header followed by CSV tables. Floats are
//! written in shortest round-trip form, so reading a report back restores
//! every number exactly.

use std::path::Path;

use fmuda_core::metrics::{BoundRow, BoundTable, EnsembleDice, MetricsReport};

use crate::error::{self, Error, Result};

pub const TITLE: &str = "# fmuda report v1";
pub const NOT_COMPUTABLE: &str = "e_C: not computable";
const NA: &str = "n/a";

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_else(|| NA.into())
}

pub fn render(r: &MetricsReport) -> String {
    let mut out = format!("{TITLE}\n");
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("seed", r.seed.to_string());
    kv("target", r.target_id.clone());
    kv("sources", r.source_ids.join(","));
    kv("aggregation", r.aggregation.clone());
    kv("oracle_mode", r.oracle_mode.to_string());
    kv("lambda_conf", f(r.lambda_conf));
    kv("uniform_fallback", r.uniform_fallback.to_string());
    kv("target_label_reads_during_training", r.target_label_reads_during_training.to_string());
    if r.aggregation != "suda" {
        kv("dice_fmuda", opt(r.ensemble.fmuda));
        kv("dice_pv", opt(r.ensemble.popular_vote));
        kv("dice_av", opt(r.ensemble.average_vote));
    }
    kv("dice_suda", opt(r.ensemble.best_single));
    kv("target_ce", opt(r.target_ce));
    if let Some(b) = &r.bound {
        kv("xi", f(b.xi));
        kv("zeta", f(b.zeta));
        kv("bound_rhs", opt(b.right_hand_side()));
        kv("swd_term", "sliced estimate on latent codes".into());
        if b.rows.iter().any(|row| row.joint_error.is_none()) {
            out.push_str(NOT_COMPUTABLE);
            out.push('\n');
        } else {
            out.push_str("e_C: measured by joint training\n");
        }
    }
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("timestamp", r.timestamp.clone().unwrap_or_else(|| NA.into()));
    for (k, v) in &r.config {
        kv(&format!("config.{k}"), v.clone());
    }

    out.push_str("\n[models]\nsource,raw_count,weight,target_dice\n");
    for (i, id) in r.source_ids.iter().enumerate() {
        out.push_str(&format!(
            "{id},{},{},{}\n",
            r.raw_counts.get(i).map(u64::to_string).unwrap_or_else(|| NA.into()),
            r.weights.get(i).copied().map(f).unwrap_or_else(|| NA.into()),
            opt(r.per_model_dice.get(i).copied().flatten()),
        ));
    }
    if let Some(b) = &r.bound {
        out.push_str("\n[bound]\nsource,weight,e_S,swd,complexity,e_C,total\n");
        for row in &b.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.source_id,
                f(row.weight),
                f(row.source_error),
                f(row.swd),
                f(row.complexity),
                opt(row.joint_error),
                opt(row.total()),
            ));
        }
    }
    out
}

pub fn emit_report(r: &MetricsReport, path: &Path) -> Result<()> {
    error::write(path, render(r))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    parse(&error::read_text(path)?).map_err(|(line, reason)| Error::Format {
        module: "metrics",
        path: path.to_path_buf(),
        offset: line as u64,
        reason: format!("line {line}: {reason}"),
    })
}

/// The report text without its timestamp line, for reproducibility checks.
pub fn without_timestamp(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("timestamp:")).map(|l| format!("{l}\n")).collect()
}

type ParseResult<T> = std::result::Result<T, (usize, String)>;

fn num(s: &str, line: usize) -> ParseResult<f64> {
    s.parse().map_err(|_| (line, format!("`{s}` is not a number")))
}

fn opt_num(s: &str, line: usize) -> ParseResult<Option<f64>> {
    if s == NA {
        Ok(None)
    } else {
        num(s, line).map(Some)
    }
}

fn int<T: std::str::FromStr>(s: &str, line: usize) -> ParseResult<T> {
    s.parse().map_err(|_| (line, format!("`{s}` is not an integer")))
}

fn flag(s: &str, line: usize) -> ParseResult<bool> {
    s.parse().map_err(|_| (line, format!("`{s}` is not true/false")))
}

pub fn parse(text: &str) -> ParseResult<MetricsReport> {
    let mut r = MetricsReport::default();
    let mut ensemble = EnsembleDice::default();
    let (mut xi, mut zeta) = (None, None);
    let mut rows: Vec<BoundRow> = Vec::new();
    let mut section = "";
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            section = line;
            continue;
        }
        match section {
            "" => {
                let (k, v) = line.split_once(": ").ok_or((n, "expected `key: value`".to_string()))?;
                match k {
                    "seed" => r.seed = int(v, n)?,
                    "target" => r.target_id = v.into(),
                    "sources" => r.source_ids = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
                    "aggregation" => r.aggregation = v.into(),
                    "oracle_mode" => r.oracle_mode = flag(v, n)?,
                    "lambda_conf" => r.lambda_conf = num(v, n)?,
                    "uniform_fallback" => r.uniform_fallback = flag(v, n)?,
                    "target_label_reads_during_training" => r.target_label_reads_during_training = int(v, n)?,
                    "dice_fmuda" => ensemble.fmuda = opt_num(v, n)?,
                    "dice_pv" => ensemble.popular_vote = opt_num(v, n)?,
                    "dice_av" => ensemble.average_vote = opt_num(v, n)?,
                    "dice_suda" => ensemble.best_single = opt_num(v, n)?,
                    "target_ce" => r.target_ce = opt_num(v, n)?,
                    "xi" => xi = Some(num(v, n)?),
                    "zeta" => zeta = Some(num(v, n)?),
                    "timestamp" => r.timestamp = (v != NA).then(|| v.to_string()),
                    "bound_rhs" | "swd_term" | "e_C" => {}
                    k => match k.strip_prefix("config.") {
                        Some(key) => r.config.push((key.into(), v.into())),
                        None => return Err((n, format!("unknown key `{k}`"))),
                    },
                }
            }
            "[models]" => {
                if line.starts_with("source,") {
                    continue;
                }
                let c: Vec<&str> = line.split(',').collect();
                if c.len() != 4 {
                    return Err((n, "expected 4 model columns".into()));
                }
                r.raw_counts.push(int(c[1], n)?);
                r.weights.push(num(c[2], n)?);
                r.per_model_dice.push(opt_num(c[3], n)?);
            }
            "[bound]" => {
                if line.starts_with("source,") {
                    continue;
                }
                let c: Vec<&str> = line.split(',').collect();
                if c.len() != 7 {
                    return Err((n, "expected 7 bound columns".into()));
                }
                rows.push(BoundRow {
                    source_id: c[0].into(),
                    weight: num(c[1], n)?,
                    source_error: num(c[2], n)?,
                    swd: num(c[3], n)?,
                    complexity: num(c[4], n)?,
                    joint_error: opt_num(c[5], n)?,
                });
            }
            other => return Err((n, format!("unknown section {other}"))),
        }
    }
    r.ensemble = ensemble;
    if let (Some(xi), Some(zeta)) = (xi, zeta) {
        r.bound = Some(BoundTable { xi, zeta, rows });
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(oracle: bool) -> MetricsReport {
        MetricsReport {
            seed: 3,
            target_id: "d0".into(),
            aggregation: "fmuda".into(),
            oracle_mode: oracle,
            source_ids: vec!["d1".into(), "d2".into()],
            per_model_dice: vec![oracle.then_some(0.1 + 0.2), None],
            ensemble: EnsembleDice {
                fmuda: Some(1.0 / 3.0),
                popular_vote: None,
                average_vote: Some(0.5),
                best_single: Some(2.0f64.sqrt() / 2.0),
            },
            raw_counts: vec![30, 10],
            weights: vec![0.75, 0.25],
            lambda_conf: 0.9,
            uniform_fallback: false,
            bound: Some(BoundTable {
                xi: 0.05,
                zeta: 1.0,
                rows: vec![BoundRow {
                    source_id: "d1".into(),
                    weight: 0.75,
                    source_error: 1e-17,
                    swd: 0.123_456_789_012_345_68,
                    complexity: 0.2828,
                    joint_error: oracle.then_some(0.7),
                }],
            }),
            target_ce: None,
            target_label_reads_during_training: 0,
            config: vec![("net.depth".into(), "2".into())],
            timestamp: Some("1700000000".into()),
        }
    }

    #[test]
    fn round_trip_preserves_numbers() {
        for oracle in [false, true] {
            let r = sample(oracle);
            let text = render(&r);
            assert!(text.starts_with(TITLE));
            assert_eq!(parse(&text).unwrap(), r);
        }
    }

    #[test]
    fn marker_only_without_joint_terms() {
        assert!(render(&sample(false)).contains(NOT_COMPUTABLE));
        assert!(!render(&sample(true)).contains(NOT_COMPUTABLE));
    }

    #[test]
    fn suda_reports_only_best_single() {
        let mut r = sample(true);
        r.aggregation = "suda".into();
        let text = render(&r);
        assert!(text.contains("dice_suda:"));
        assert!(!text.contains("dice_fmuda") && !text.contains("dice_av") && !text.contains("dice_pv"));
    }

    #[test]
    fn timestamp_is_the_only_stripped_line() {
        let text = render(&sample(false));
        let stripped = without_timestamp(&text);
        assert_eq!(text.lines().count(), stripped.lines().count() + 1);
    }
}

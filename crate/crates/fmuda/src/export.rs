//! Line-oriented exports: training curves, latent embeddings, sweep tables
//! and the audit log.

use fmuda_core::adapt::{EpochRecord, StepRecord};
use fmuda_core::fednode::{AuditLog, Message, NodeId, NodeKind, PayloadKind};
use fmuda_core::EmbeddingBatch;

fn f(x: f64) -> String {
    format!("{x:?}")
}

/// `step,ce,swd,total`
pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("step,ce,swd,total\n");
    for s in steps {
        out.push_str(&format!("{},{},{},{}\n", s.step, f(s.ce), f(s.swd), f(s.total)));
    }
    out
}

/// `phase,epoch,ce,swd,total,target_dice`
pub fn epochs_csv(pretrain: &[EpochRecord], adapt: &[EpochRecord]) -> String {
    let mut out = String::from("phase,epoch,ce,swd,total,target_dice\n");
    for (phase, recs) in [("pretrain", pretrain), ("adapt", adapt)] {
        for e in recs {
            out.push_str(&format!(
                "{phase},{},{},{},{},{}\n",
                e.epoch,
                f(e.ce),
                f(e.swd),
                f(e.total),
                e.target_dice.map(f).unwrap_or_default()
            ));
        }
    }
    out
}

/// `domain_tag,dim_0,...,dim_{d-1}`; all batches must share a dimension.
pub fn embeddings_csv(batches: &[EmbeddingBatch]) -> String {
    let dim = batches.first().map_or(0, |b| b.dim());
    let mut out = String::from("domain_tag");
    for k in 0..dim {
        out.push_str(&format!(",dim_{k}"));
    }
    out.push('\n');
    for b in batches {
        assert_eq!(b.dim(), dim, "embedding batches differ in dimension");
        for i in 0..b.rows() {
            out.push_str(&b.domain_tag);
            for v in b.row(i) {
                out.push(',');
                out.push_str(&f(*v));
            }
            out.push('\n');
        }
    }
    out
}

/// Header `<param>,dice_<target>` then one row per swept value.
pub fn sweep_csv(param: &str, target: &str, rows: &[(f64, f64)]) -> String {
    let mut out = format!("{param},dice_{target}\n");
    for (v, d) in rows {
        out.push_str(&format!("{},{}\n", f(*v), f(*d)));
    }
    out
}

/// One message per line: `from<TAB>to<TAB>kind<TAB>bytes`, nodes as `name:kind`.
pub fn audit_lines(log: &AuditLog) -> String {
    log.records().iter().map(|m| format!("{}\t{}\t{}\t{}\n", m.from, m.to, m.kind.as_str(), m.byte_size)).collect()
}

fn node(s: &str) -> Option<NodeId> {
    let (name, kind) = s.rsplit_once(':')?;
    Some(NodeId { name: name.into(), kind: NodeKind::parse(kind)? })
}

/// Inverse of [`audit_lines`]; errors name the 1-based line.
pub fn parse_audit_lines(text: &str) -> Result<AuditLog, (usize, String)> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| (i + 1, format!("{what} in `{line}`"));
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        records.push(Message {
            from: node(c[0]).ok_or_else(|| bad("bad sender"))?,
            to: node(c[1]).ok_or_else(|| bad("bad recipient"))?,
            kind: PayloadKind::parse(c[2]).ok_or_else(|| bad("unknown payload kind"))?,
            byte_size: c[3].parse().map_err(|_| bad("bad byte count"))?,
        });
    }
    Ok(AuditLog::from_records(records))
}

//! Human-readable output.

use std::fmt::Write;

use vault_core::oplog::CompletedRecord;
use vault_core::ops::{ActiveOp, LineageNode, RecoveredOp};
use vault_core::store::{InstanceMeta, TableRecord};

fn target(t: &vault_core::oplog::OpTarget) -> String {
    match &t.instance {
        Some(i) => format!("{}/{i}", t.table),
        None => t.table.clone(),
    }
}

pub fn tables(tables: &[TableRecord]) -> String {
    let mut out = String::new();
    for t in tables {
        let c = &t.config;
        let deleted = if t.deleted_at.is_some() { "  deleted" } else { "" };
        let _ = writeln!(
            out,
            "{}  multi_active={}  allow_concurrent_exec={}{deleted}",
            c.name, c.multi_active, c.allow_concurrent_exec
        );
    }
    out
}

pub fn instances(metas: &[InstanceMeta]) -> String {
    let mut out = String::new();
    for m in metas {
        let active = if m.active { "  active" } else { "" };
        let _ = writeln!(out, "{}  {}{active}", m.instance, m.phase);
    }
    out
}

pub fn active_ops(ops: &[ActiveOp]) -> String {
    if ops.is_empty() {
        return "no active operations".into();
    }
    let mut out = String::new();
    for a in ops {
        let r = &a.record;
        let pid = r.process.map(|p| p.pid.to_string()).unwrap_or_else(|| "-".into());
        let alive = if a.alive { "running" } else { "interrupted" };
        let _ = writeln!(
            out,
            "{}  {}  {}  {}  user={}  pid={pid} ({alive})",
            r.op_id,
            r.op_type.as_str(),
            target(&r.target),
            r.state.as_str(),
            r.user
        );
    }
    out
}

pub fn completed_ops(ops: &[CompletedRecord]) -> String {
    let mut out = String::new();
    for c in ops {
        let r = &c.record;
        let reason = c.error.as_ref().map(|e| format!("  {}: {}", e.code, e.message)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{}  {}  {}  user={}  {}  {}{reason}",
            r.op_id,
            r.op_type.as_str(),
            target(&r.target),
            r.user,
            c.finished_at.to_rfc3339(),
            c.outcome.as_str()
        );
    }
    out
}

pub fn recovered(ops: &[RecoveredOp]) -> String {
    if ops.is_empty() {
        return "nothing to recover".into();
    }
    let mut out = String::new();
    for r in ops {
        let action = match r.action {
            vault_core::ops::Recovery::Resumed => "resumed",
            vault_core::ops::Recovery::RolledBack => "rolled back",
        };
        let reason = r.error.as_ref().map(|e| format!("  ({})", e.code)).unwrap_or_default();
        let _ = writeln!(out, "{}  {}  {action}{reason}", r.op_id, r.op_type.as_str());
    }
    out
}

pub fn lineage(node: &LineageNode) -> String {
    let mut out = String::new();
    lineage_into(node, 0, &mut out);
    out
}

fn lineage_into(node: &LineageNode, depth: usize, out: &mut String) {
    let pad = "    ".repeat(depth);
    let arrow = if depth == 0 { "" } else { "<- " };
    let phase = node.phase.map_or("MISSING", |p| p.as_str());
    let _ = writeln!(out, "{pad}{arrow}{}({})  {phase}", node.table, node.instance);
    for (builder, fp) in &node.fingerprints {
        let short: String = fp.chars().take(12).collect();
        let _ = writeln!(out, "{pad}      {builder}  {short}");
    }
    for up in &node.upstream {
        lineage_into(up, depth + 1, out);
    }
}

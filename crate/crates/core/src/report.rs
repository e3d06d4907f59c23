//! Fixed-width text tables for the `report` command.

use std::fmt::Write;

use crate::linkage::{ClassSummary, TargetCensus};
use crate::loader::AddressSpace;
use crate::weave::SizeReport;

fn signed(after: u64, before: u64) -> String {
    if after >= before {
        format!("+{}", after - before)
    } else {
        format!("-{}", before - after)
    }
}

/// Per-function sizes followed by the per-category breakdown.
pub fn size_table(r: &SizeReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<32} {:>10} {:>12} {:>8}", "function", "original", "instrumented", "delta");
    for f in &r.functions {
        let _ = writeln!(
            out,
            "{:<32} {:>10} {:>12} {:>8}",
            f.name,
            f.original,
            f.instrumented,
            signed(f.instrumented, f.original)
        );
    }
    let _ = writeln!(
        out,
        "{:<32} {:>10} {:>12} {:>8}",
        "total",
        r.original_total,
        r.instrumented_total,
        signed(r.instrumented_total, r.original_total)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<16} {:>8}", "category", "bytes");
    for (name, v) in [
        ("endbr", r.endbr_bytes),
        ("callee_irm", r.callee_irm_bytes),
        ("caller_irm", r.caller_irm_bytes),
        ("coldpath", r.coldpath_bytes),
        ("trampoline", r.trampoline_bytes),
        ("plt", r.plt_bytes),
    ] {
        let _ = writeln!(out, "{name:<16} {v:>8}");
    }
    let pct = if r.original_total == 0 { 0.0 } else { 100.0 * r.delta() as f64 / r.original_total as f64 };
    let _ = writeln!(out, "{:<16} {:>8} ({pct:.2}%)", "delta", r.delta());
    out
}

/// Landing-pad census, one row per image plus a total.
pub fn targets_table(rows: &[(String, TargetCensus)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>10} {:>10} {:>8} {:>10} {:>10} {:>10}",
        "image", "endbr.text", "endbr.plt", "total", "protected", "unchecked", "cfi_slots"
    );
    let mut total = TargetCensus::default();
    let row = |out: &mut String, name: &str, c: &TargetCensus| {
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>10} {:>8} {:>10} {:>10} {:>10}",
            name,
            c.endbr_in_text,
            c.endbr_in_plt_family,
            c.total_landing_pads,
            c.protected_landing_pads,
            c.unchecked_landing_pads,
            c.cfi_trampoline_slots
        );
    };
    for (name, c) in rows {
        row(&mut out, name, c);
        total += *c;
    }
    if rows.len() > 1 {
        row(&mut out, "total", &total);
    }
    out
}

/// Equivalence classes with their SIDs and members.
pub fn classes_table(classes: &[ClassSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>4} {:<28} {:>10} {:>5} {:>5} {:>5}  members", "id", "key", "sid", "fns", "imps", "sites");
    for c in classes {
        let sid = c.sid.map_or_else(|| "-".to_string(), |s| format!("{s:#010x}"));
        let members: Vec<&str> = c.functions.iter().chain(&c.imports).map(String::as_str).collect();
        let _ = writeln!(
            out,
            "{:>4} {:<28} {:>10} {:>5} {:>5} {:>5}  {}",
            c.id,
            c.key,
            sid,
            c.functions.len(),
            c.imports.len(),
            c.callsites.len(),
            members.join(" ")
        );
    }
    out
}

/// Landing-pad elision per image: notes, elided pads, private pages and KB.
pub fn nopout_table(space: &AddressSpace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>8} {:>10} {:>8} {:>8}", "image", "eligible", "AT-elided", "pages", "KB");
    for img in &space.images {
        let pages = img.pages.len();
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>10} {:>8} {:>8}",
            img.name(),
            img.image.nopout.len(),
            img.elided.len(),
            pages,
            pages * 4
        );
    }
    let s = space.nopout_stats();
    let _ = writeln!(out, "{:<24} {:>8} {:>10} {:>8} {:>8}", "total", s.noted, s.elided, s.cow_pages, s.cow_kb);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_table_columns_line_up() {
        let r = SizeReport {
            original_total: 10,
            instrumented_total: 39,
            endbr_bytes: 8,
            callee_irm_bytes: 16,
            caller_irm_bytes: 5,
            ..Default::default()
        };
        let t = size_table(&r);
        assert!(t.contains("total                                    10           39      +29"));
        assert!(t.contains("delta                  29 (290.00%)"));
    }

    #[test]
    fn single_image_has_no_total_row() {
        let t = targets_table(&[("a".into(), TargetCensus::default())]);
        assert_eq!(t.lines().count(), 2);
    }
}

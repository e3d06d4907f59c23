use std::fmt::Write;

use super::{Linkage, Program, ProgramFlag, Stmt, DEFAULT_FUNCTION_ALIGN, FASM_HEADER};

/// Canonical `.fasm` text for `p`. Deterministic, and re-parses to `p`.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    out.push_str(FASM_HEADER);
    out.push('\n');
    if !p.name.is_empty() {
        let _ = writeln!(out, ".program {}", p.name);
    }
    if p.flags.contains(&ProgramFlag::RelroFull) {
        out.push_str(".relro_full\n");
    }
    for i in &p.imports {
        let _ = writeln!(out, ".import {} {}", i.name, i.signature);
    }
    for d in &p.data_objects {
        let _ = write!(out, ".data {} {} {}", d.name, d.kind.keyword(), if d.writable { "rw" } else { "ro" });
        if !d.entries.is_empty() {
            let entries: Vec<String> = d.entries.iter().map(ToString::to_string).collect();
            let _ = write!(out, " = {}", entries.join(", "));
        }
        out.push('\n');
    }
    for f in &p.functions {
        out.push('\n');
        let _ = write!(out, ".func {}", f.name);
        if f.linkage == Linkage::Global {
            out.push_str(" global");
        }
        if f.align != DEFAULT_FUNCTION_ALIGN {
            let _ = write!(out, " align={}", f.align);
        }
        let _ = writeln!(out, " {}", f.signature);
        for s in &f.body {
            match s {
                Stmt::Label(l) => {
                    let _ = writeln!(out, "{l}:");
                }
                Stmt::Instr(i) => {
                    let _ = writeln!(out, "    {i}");
                }
            }
        }
    }
    out
}

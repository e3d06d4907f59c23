//! Program-to-program instrumentation passes and code-size accounting.
//!
//! * FineIBT basic: callers get `mov $SID, %sid`, protected callees get
//!   `endbr64; sub $SID, %sid; je F_entry; hlt` and direct calls are
//!   redirected to `F_entry`.
//! * FineIBT coldpath: the callee check becomes `sub; jne` to a local
//!   `.F_fineibt_coldpath` function laid out just before `F`.
//! * IBT only: `endbr64` on protected functions.
//! * Clang-CFI: per-class trampolines of 8-byte `jmp F.cfi` slots and a
//!   range check in front of every indirect site.
//! * An A64 text emitter for the BTI port of the coldpath IRM.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    entry_alias, Cond, Function, Instruction, IrError, Linkage, Program, Reg, RegisterId, Signature, Stmt, TypeTag,
    ENTRY_SUFFIX,
};
use crate::policy::{is_protected, CallsiteId, SidAssignment};

/// Violation handler called from coldpath blocks.
pub const CHK_FAIL: &str = "__fineibt_chk_fail";
/// Suffix Clang-CFI appends to the real body of an address-taken function.
pub const CFI_SUFFIX: &str = ".cfi";
/// Per-function label holding the Clang-CFI `ud2`.
pub const CFI_TRAP_LABEL: &str = "__cfi_trap";
/// Bytes per Clang-CFI trampoline slot.
pub const CFI_SLOT_BYTES: u64 = 8;
/// Default SID register (its 32-bit view is used by the checks).
pub const DEFAULT_SID_REG: RegisterId = RegisterId::R11;

/// Name of the coldpath block of `function`.
pub fn coldpath_name(function: &str) -> String {
    format!(".{function}_fineibt_coldpath")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrmVariant {
    None,
    IbtOnly,
    FineIbtBasic,
    FineIbtColdpath,
    ClangCfiBaseline,
}

impl IrmVariant {
    pub fn is_fineibt(self) -> bool {
        matches!(self, IrmVariant::FineIbtBasic | IrmVariant::FineIbtColdpath)
    }

    /// Whether images built with this variant run with IBT enforcement on.
    pub fn enables_ibt(self) -> bool {
        matches!(self, IrmVariant::IbtOnly | IrmVariant::FineIbtBasic | IrmVariant::FineIbtColdpath)
    }

    pub fn name(self) -> &'static str {
        match self {
            IrmVariant::None => "none",
            IrmVariant::IbtOnly => "ibt",
            IrmVariant::FineIbtBasic => "basic",
            IrmVariant::FineIbtColdpath => "coldpath",
            IrmVariant::ClangCfiBaseline => "clang-cfi",
        }
    }
}

impl fmt::Display for IrmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IrmVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "none" => IrmVariant::None,
            "ibt" => IrmVariant::IbtOnly,
            "basic" => IrmVariant::FineIbtBasic,
            "coldpath" => IrmVariant::FineIbtColdpath,
            "clang-cfi" => IrmVariant::ClangCfiBaseline,
            other => return Err(format!("unknown IRM variant `{other}`")),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeaveError {
    #[error("no SID for `{0}`")]
    MissingSid(String),
    #[error("instrumentation would define `{0}`, which already exists")]
    SymbolCollision(String),
    #[error("SID {0:#x} cannot be encoded as both a movz and a subs immediate")]
    SidNotEncodable(u32),
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn redirect(target: &str, f: &Function, map: &BTreeMap<String, String>) -> String {
    if f.has_label(target) {
        return target.to_string();
    }
    map.get(target).cloned().unwrap_or_else(|| target.to_string())
}

fn retarget(ins: &Instruction, f: &Function, map: &BTreeMap<String, String>) -> Instruction {
    match ins {
        Instruction::DirectCall { target } => Instruction::DirectCall { target: redirect(target, f, map) },
        Instruction::Jmp { target } => Instruction::Jmp { target: redirect(target, f, map) },
        Instruction::CondBranch { cond, target } => {
            Instruction::CondBranch { cond: *cond, target: redirect(target, f, map) }
        }
        other => other.clone(),
    }
}

fn ensure_free(p: &Program, name: &str) -> Result<(), WeaveError> {
    let taken = p.function(name).is_some()
        || p.import(name).is_some()
        || p.data_object(name).is_some()
        || p.functions.iter().any(|f| f.has_label(name));
    if taken {
        Err(WeaveError::SymbolCollision(name.to_string()))
    } else {
        Ok(())
    }
}

/// Rewrites `p` under `v`. `a` must have been built over `p`; `sid_reg` names
/// the register whose 32-bit view carries SIDs.
pub fn instrument(p: &Program, a: &SidAssignment, v: IrmVariant, sid_reg: RegisterId) -> Result<Program, WeaveError> {
    match v {
        IrmVariant::None => Ok(p.clone()),
        IrmVariant::ClangCfiBaseline => instrument_clang_cfi(p, a),
        IrmVariant::IbtOnly => {
            let mut out = p.clone();
            for f in &mut out.functions {
                if is_protected(f) {
                    f.body.insert(0, Stmt::Instr(Instruction::Endbr64));
                }
            }
            out.validate()?;
            Ok(out)
        }
        IrmVariant::FineIbtBasic | IrmVariant::FineIbtColdpath => fineibt(p, a, v, sid_reg),
    }
}

fn fineibt(p: &Program, a: &SidAssignment, v: IrmVariant, sid_reg: RegisterId) -> Result<Program, WeaveError> {
    let sid32 = Reg::r32(sid_reg);
    let mut entry_of = BTreeMap::new();
    for f in p.functions.iter().filter(|f| is_protected(f)) {
        let alias = entry_alias(&f.name);
        ensure_free(p, &alias)?;
        if v == IrmVariant::FineIbtColdpath {
            ensure_free(p, &coldpath_name(&f.name))?;
        }
        entry_of.insert(f.name.clone(), alias);
    }

    let mut out = Program { functions: Vec::new(), ..p.clone() };
    for f in &p.functions {
        let mut body = Vec::with_capacity(f.body.len() + 5);
        if let Some(alias) = entry_of.get(&f.name) {
            let sid = a.sid_of_symbol(&f.name).ok_or_else(|| WeaveError::MissingSid(f.name.clone()))?;
            body.push(Stmt::Instr(Instruction::Endbr64));
            body.push(Stmt::Instr(Instruction::SubImm { dst: sid32, imm: sid }));
            if v == IrmVariant::FineIbtColdpath {
                let cold = coldpath_name(&f.name);
                body.push(Stmt::Instr(Instruction::CondBranch { cond: Cond::Ne, target: cold.clone() }));
                let mut block = Function::new(cold, Linkage::Local, Signature::new(vec![], TypeTag::Void));
                block.align = 1;
                block.body.push(Stmt::Instr(Instruction::DirectCall { target: CHK_FAIL.to_string() }));
                out.functions.push(block);
            } else {
                body.push(Stmt::Instr(Instruction::CondBranch { cond: Cond::Eq, target: alias.clone() }));
                body.push(Stmt::Instr(Instruction::Hlt));
            }
            body.push(Stmt::Label(alias.clone()));
        }
        let mut site = 0;
        for s in &f.body {
            match s {
                Stmt::Label(l) => body.push(Stmt::Label(l.clone())),
                Stmt::Instr(ins) if ins.is_indirect_site() => {
                    let id = CallsiteId::new(&f.name, site);
                    site += 1;
                    let sid = a.sid_of_callsite(&id).ok_or_else(|| WeaveError::MissingSid(id.to_string()))?;
                    body.push(Stmt::Instr(Instruction::MovImm { dst: sid32, imm: sid }));
                    body.push(Stmt::Instr(ins.clone()));
                }
                Stmt::Instr(ins) => body.push(Stmt::Instr(retarget(ins, f, &entry_of))),
            }
        }
        out.functions.push(Function { body, ..f.clone() });
    }
    out.validate()?;
    Ok(out)
}

fn scratch_pair(target: RegisterId) -> (RegisterId, RegisterId) {
    let mut it =
        [RegisterId::Rcx, RegisterId::Rdx, RegisterId::R10, RegisterId::R11].into_iter().filter(|r| *r != target);
    (it.next().expect("four candidates"), it.next().expect("four candidates"))
}

/// Clang-CFI style instrumentation: address-taken functions move to `F.cfi`,
/// `F` becomes an 8-byte trampoline slot, and indirect sites range-check the
/// target against their class's slot run.
pub fn instrument_clang_cfi(p: &Program, a: &SidAssignment) -> Result<Program, WeaveError> {
    let mut slots: BTreeMap<usize, Vec<&Function>> = BTreeMap::new();
    let mut rename = BTreeMap::new();
    for f in p.functions.iter().filter(|f| f.address_taken) {
        let class = *a.function_to_class.get(&f.name).ok_or_else(|| WeaveError::MissingSid(f.name.clone()))?;
        slots.entry(class).or_default().push(f);
        let real = format!("{}{CFI_SUFFIX}", f.name);
        ensure_free(p, &real)?;
        rename.insert(f.name.clone(), real);
    }

    let mut out = Program { functions: Vec::new(), ..p.clone() };
    for f in &p.functions {
        let mut body = Vec::with_capacity(f.body.len());
        let mut site = 0;
        let mut needs_trap = false;
        for s in &f.body {
            let ins = match s {
                Stmt::Label(l) => {
                    body.push(Stmt::Label(l.clone()));
                    continue;
                }
                Stmt::Instr(ins) => ins,
            };
            if !ins.is_indirect_site() {
                body.push(Stmt::Instr(retarget(ins, f, &rename)));
                continue;
            }
            let id = CallsiteId::new(&f.name, site);
            site += 1;
            let class = *a.callsite_to_class.get(&id).ok_or_else(|| WeaveError::MissingSid(id.to_string()))?;
            let target = match ins {
                Instruction::IndirectCall { target, .. } | Instruction::IndirectJmpReg { target, .. } => target.id,
                _ => unreachable!("indirect sites are register-indirect"),
            };
            match slots.get(&class) {
                Some(members) => {
                    let (s1, s2) = scratch_pair(target);
                    let k = u32::try_from(members.len()).expect("class size fits in u32");
                    let seq = [
                        Instruction::LoadFnAddr { dst: Reg::r32(s1), symbol: members[0].name.clone() },
                        Instruction::MovReg { dst: Reg::r64(s2), src: Reg::r64(target) },
                        Instruction::SubReg { dst: Reg::r64(s2), src: Reg::r64(s1) },
                        Instruction::Rol { dst: Reg::r64(s2), amount: 0x3d },
                        Instruction::CmpImm { dst: Reg::r64(s2), imm: k },
                        Instruction::CondBranch { cond: Cond::Ae, target: CFI_TRAP_LABEL.to_string() },
                    ];
                    body.extend(seq.into_iter().map(Stmt::Instr));
                    needs_trap = true;
                }
                // No address-taken member: nothing may be reached.
                None => body.push(Stmt::Instr(Instruction::Ud2)),
            }
            body.push(Stmt::Instr(ins.clone()));
        }
        if needs_trap {
            if f.has_label(CFI_TRAP_LABEL) {
                return Err(WeaveError::SymbolCollision(format!("{}:{CFI_TRAP_LABEL}", f.name)));
            }
            body.push(Stmt::Label(CFI_TRAP_LABEL.to_string()));
            body.push(Stmt::Instr(Instruction::Ud2));
        }
        match rename.get(&f.name) {
            Some(real) => {
                out.functions.push(Function { name: real.clone(), linkage: Linkage::Local, body, ..f.clone() })
            }
            None => out.functions.push(Function { body, ..f.clone() }),
        }
    }
    for members in slots.values() {
        for f in members {
            let mut slot = Function::new(&f.name, f.linkage, f.signature.clone());
            slot.align = CFI_SLOT_BYTES as u32;
            slot.body = vec![
                Stmt::Instr(Instruction::Jmp { target: rename[&f.name].clone() }),
                Stmt::Instr(Instruction::Int3),
                Stmt::Instr(Instruction::Int3),
                Stmt::Instr(Instruction::Int3),
            ];
            out.functions.push(slot);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Whether `f` is a Clang-CFI trampoline slot of `p`.
pub fn is_cfi_slot(p: &Program, f: &Function) -> bool {
    let real = format!("{}{CFI_SUFFIX}", f.name);
    let shape: Vec<&Instruction> = f.instructions().collect();
    matches!(shape.as_slice(),
        [Instruction::Jmp { target }, Instruction::Int3, Instruction::Int3, Instruction::Int3] if *target == real)
        && p.function(&real).is_some()
}

/// Whether `f` is a coldpath block emitted by the coldpath variant.
pub fn is_coldpath(f: &Function) -> bool {
    f.name.starts_with('.') && f.name.ends_with("_fineibt_coldpath")
}

/// Header line of A64 listings.
pub const S64_HEADER: &str = ";s64 v1";
/// Violation handler called from BTI coldpath blocks.
pub const BTI_CHK_FAIL: &str = "__finebti_chk_fail";

/// `movz w9, #imm16, lsl #shift` form of `sid`, if one exists.
pub fn movz_encoding(sid: u32) -> Option<(u32, u32)> {
    [0u32, 16].into_iter().find_map(|s| {
        let imm = sid >> s;
        (imm <= 0xffff && imm << s == sid).then_some((imm, s))
    })
}

/// `subs w9, w9, #imm12, lsl #shift` form of `sid`, if one exists.
pub fn subs_encoding(sid: u32) -> Option<(u32, u32)> {
    [0u32, 12].into_iter().find_map(|s| {
        let imm = sid >> s;
        (imm <= 0xfff && imm << s == sid).then_some((imm, s))
    })
}

fn a64_reg(r: RegisterId) -> &'static str {
    match r {
        RegisterId::Rax => "x0",
        RegisterId::Rbx => "x1",
        RegisterId::Rcx => "x2",
        RegisterId::Rdx => "x3",
        RegisterId::Rsi => "x4",
        RegisterId::Rdi => "x5",
        RegisterId::R10 => "x10",
        RegisterId::R11 => "x11",
        RegisterId::R12 => "x12",
    }
}

/// A64 rendering of the coldpath IRM over `p` (emit-only). Every SID used
/// must be encodable by both `movz` and `subs`.
pub fn emit_bti_text(p: &Program, a: &SidAssignment) -> Result<String, WeaveError> {
    type Imm = (u32, u32);
    let encode = |sid: u32| -> Result<(Imm, Imm), WeaveError> {
        match (movz_encoding(sid), subs_encoding(sid)) {
            (Some(m), Some(s)) => Ok((m, s)),
            _ => Err(WeaveError::SidNotEncodable(sid)),
        }
    };
    let protected: BTreeSet<&str> = p.functions.iter().filter(|f| is_protected(f)).map(|f| f.name.as_str()).collect();
    let call_target = |f: &Function, t: &str| -> String {
        if !f.has_label(t) && protected.contains(t) {
            format!("{t}{ENTRY_SUFFIX}")
        } else {
            t.to_string()
        }
    };

    let mut out = String::new();
    out.push_str(S64_HEADER);
    out.push('\n');
    for f in &p.functions {
        out.push('\n');
        if protected.contains(f.name.as_str()) {
            let sid = a.sid_of_symbol(&f.name).ok_or_else(|| WeaveError::MissingSid(f.name.clone()))?;
            let (_, (imm, shift)) = encode(sid)?;
            let cold = format!(".{}_finebti_coldpath", f.name);
            let _ = writeln!(out, "{cold}:");
            let _ = writeln!(out, "    bl {BTI_CHK_FAIL}@PLT");
            let _ = writeln!(out, "{}:", f.name);
            out.push_str("    bti c\n");
            let _ = writeln!(out, "    subs w9, w9, #{imm:#x}, lsl #{shift} /* SID = {sid:#x} */");
            let _ = writeln!(out, "    bne {cold}");
            let _ = writeln!(out, "{}{ENTRY_SUFFIX}:", f.name);
        } else {
            let _ = writeln!(out, "{}:", f.name);
        }
        let mut site = 0;
        for s in &f.body {
            let ins = match s {
                Stmt::Label(l) => {
                    let _ = writeln!(out, "{l}:");
                    continue;
                }
                Stmt::Instr(i) => i,
            };
            match ins {
                Instruction::IndirectCall { target, .. } | Instruction::IndirectJmpReg { target, .. } => {
                    let id = CallsiteId::new(&f.name, site);
                    site += 1;
                    let sid = a.sid_of_callsite(&id).ok_or_else(|| WeaveError::MissingSid(id.to_string()))?;
                    let ((imm, shift), _) = encode(sid)?;
                    let _ = writeln!(out, "    movz w9, #{imm:#x}, lsl #{shift} /* SID = {sid:#x} */");
                    let op = if matches!(ins, Instruction::IndirectCall { .. }) { "blr" } else { "br" };
                    let _ = writeln!(out, "    {op} {}", a64_reg(target.id));
                }
                Instruction::DirectCall { target } => {
                    let _ = writeln!(out, "    bl {}", call_target(f, target));
                }
                Instruction::Jmp { target } => {
                    let _ = writeln!(out, "    b {}", call_target(f, target));
                }
                Instruction::Ret => out.push_str("    ret\n"),
                other => {
                    let _ = writeln!(out, "    /* {other} */");
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSize {
    pub name: String,
    pub original: u64,
    pub instrumented: u64,
}

/// Byte accounting of one instrumentation run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub functions: Vec<FunctionSize>,
    pub original_total: u64,
    pub instrumented_total: u64,
    pub endbr_bytes: u64,
    pub callee_irm_bytes: u64,
    pub caller_irm_bytes: u64,
    pub coldpath_bytes: u64,
    pub trampoline_bytes: u64,
    pub plt_bytes: u64,
}

impl SizeReport {
    /// Sum of the per-category deltas; equals `instrumented_total -
    /// original_total`.
    pub fn delta(&self) -> u64 {
        self.endbr_bytes
            + self.callee_irm_bytes
            + self.caller_irm_bytes
            + self.coldpath_bytes
            + self.trampoline_bytes
            + self.plt_bytes
    }

    /// Adds PLT-family bytes of the linked images to the totals.
    pub fn with_plt(mut self, before: u64, after: u64) -> Self {
        self.original_total += before;
        self.instrumented_total += after;
        self.plt_bytes = after.saturating_sub(before);
        self
    }
}

fn endbr_bytes(f: &Function) -> u64 {
    f.instructions().filter(|i| **i == Instruction::Endbr64).map(|i| u64::from(i.size())).sum()
}

/// Bytes of the IRM prologue of `f` (everything before `F_entry` except the
/// landing pad).
fn prologue_bytes(f: &Function) -> u64 {
    let Some(alias) = f.entry_alias() else { return 0 };
    let mut total = 0;
    for s in &f.body {
        match s {
            Stmt::Label(l) if *l == alias => break,
            Stmt::Instr(i) if *i != Instruction::Endbr64 => total += u64::from(i.size()),
            _ => {}
        }
    }
    total
}

/// Compares an original program with its instrumented form.
pub fn size_report(before: &Program, after: &Program) -> SizeReport {
    let mut r = SizeReport {
        original_total: before.code_bytes(),
        instrumented_total: after.code_bytes(),
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for f in &after.functions {
        let bytes = f.byte_size();
        if is_coldpath(f) {
            r.coldpath_bytes += bytes;
            continue;
        }
        if is_cfi_slot(after, f) {
            r.trampoline_bytes += bytes;
            continue;
        }
        let original_name = f.name.strip_suffix(CFI_SUFFIX).filter(|n| before.function(n).is_some()).unwrap_or(&f.name);
        let orig = before.function(original_name);
        let orig_bytes = orig.map_or(0, Function::byte_size);
        let endbr = endbr_bytes(f).saturating_sub(orig.map_or(0, endbr_bytes));
        let callee = prologue_bytes(f).saturating_sub(orig.map_or(0, prologue_bytes));
        r.endbr_bytes += endbr;
        r.callee_irm_bytes += callee;
        r.caller_irm_bytes += bytes.saturating_sub(orig_bytes + endbr + callee);
        seen.insert(original_name.to_string());
        r.functions.push(FunctionSize { name: original_name.to_string(), original: orig_bytes, instrumented: bytes });
    }
    for f in before.functions.iter().filter(|f| !seen.contains(&f.name)) {
        r.functions.push(FunctionSize { name: f.name.clone(), original: f.byte_size(), instrumented: 0 });
    }
    r
}

//! Deterministic register VM over an [`AddressSpace`]: IBT landing-pad
//! tracking, SID checks, an optional shadow stack and the lazy-binding
//! resolver.
//!
//! Memory is typed: text is fetched per item, GOT and data objects are
//! 64-bit cells. The only call stack is the VM's own; `ret` pops it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{entry_alias, Cond, Instruction, Reg, RegisterId, Width};
use crate::linkage::{PltFormat, Target, DATA, GOT};
use crate::loader::{AddressSpace, LoaderError};

/// Start of the intrinsic region, above every image.
pub const INTRINSIC_BASE: u64 = 0x7ff0_0000;
/// Return address planted below the entry frame; returning here ends the run.
pub const EXIT_ADDRESS: u64 = INTRINSIC_BASE + 0xff0;
pub const DEFAULT_STEP_LIMIT: u64 = 10_000_000;

/// Runtime-provided code with no image behind it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intrinsic {
    /// `__fineibt_chk_fail`, the violation handler called from coldpaths.
    ChkFail,
    /// `_dl_runtime_resolve`, reached through `GOT[2]`.
    Resolver,
}

impl Intrinsic {
    pub const ALL: [Intrinsic; 2] = [Intrinsic::ChkFail, Intrinsic::Resolver];

    pub fn symbol(self) -> &'static str {
        match self {
            Intrinsic::ChkFail => "__fineibt_chk_fail",
            Intrinsic::Resolver => "_dl_runtime_resolve",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.symbol() == s)
    }

    pub fn address(self) -> u64 {
        INTRINSIC_BASE + 0x10 * self as u64
    }

    pub fn from_address(addr: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.address() == addr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrapKind {
    EndbrViolation,
    SidMismatchHlt,
    ChkFailHandler,
    ClangCfiRangeUd2,
    ShadowStackMismatch,
    StepLimitExceeded,
    Int3,
    MemoryFault,
}

impl TrapKind {
    pub const ALL: [TrapKind; 8] = [
        TrapKind::EndbrViolation,
        TrapKind::SidMismatchHlt,
        TrapKind::ChkFailHandler,
        TrapKind::ClangCfiRangeUd2,
        TrapKind::ShadowStackMismatch,
        TrapKind::StepLimitExceeded,
        TrapKind::Int3,
        TrapKind::MemoryFault,
    ];
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TrapKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.to_string() == s).ok_or_else(|| format!("unknown trap kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trap {
    pub kind: TrapKind,
    pub pc: u64,
    pub location: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed { exit: i32 },
    Trapped(Trap),
}

impl Outcome {
    pub fn trap_kind(&self) -> Option<TrapKind> {
        match self {
            Outcome::Trapped(t) => Some(t.kind),
            Outcome::Completed { .. } => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Completed { exit } => write!(f, "completed exit={exit}"),
            Outcome::Trapped(t) if t.detail.is_empty() => write!(f, "trap={} pc={:#x} {}", t.kind, t.pc, t.location),
            Outcome::Trapped(t) => write!(f, "trap={} pc={:#x} {} ({})", t.kind, t.pc, t.location, t.detail),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: u64,
    pub pc: u64,
    pub location: String,
    pub instr: String,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:#x} {} {}", self.step, self.pc, self.location, self.instr)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub lines: Vec<TraceLine>,
    pub steps: u64,
    pub outcome: Outcome,
}

impl Trace {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out.push_str(&self.outcome.to_string());
        out.push('\n');
        out
    }

    /// Number of executed instructions whose text matches `pred`.
    pub fn count(&self, pred: impl Fn(&TraceLine) -> bool) -> usize {
        self.lines.iter().filter(|l| pred(l)).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffMode {
    Exact,
    /// Ignores addresses and locations and treats `F_entry` as `F`.
    LabelInsensitive,
}

/// First point where two traces disagree, as `(line index, left, right)`.
pub fn trace_diff(a: &Trace, b: &Trace, mode: DiffMode) -> Option<(usize, String, String)> {
    let render = |l: &TraceLine| match mode {
        DiffMode::Exact => l.to_string(),
        DiffMode::LabelInsensitive => l.instr.replace("_entry", ""),
    };
    let end = |t: &Trace| match (&t.outcome, mode) {
        (Outcome::Trapped(tr), DiffMode::LabelInsensitive) => format!("trap={}", tr.kind),
        (o, _) => o.to_string(),
    };
    let n = a.lines.len().max(b.lines.len());
    for i in 0..n {
        let (x, y) = (a.lines.get(i).map(render), b.lines.get(i).map(render));
        if x != y {
            return Some((i, x.unwrap_or_else(|| end(a)), y.unwrap_or_else(|| end(b))));
        }
    }
    let (x, y) = (end(a), end(b));
    (x != y).then_some((n, x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookAction {
    /// Overwrites the top of the regular stack (the shadow stack is untouched).
    CorruptReturn {
        target: u64,
    },
    SetRegister {
        reg: RegisterId,
        value: u64,
    },
}

/// Fires once, the first time `pc == at`, before that instruction runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hook {
    pub at: u64,
    pub action: HookAction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub shadow_stack: bool,
    pub step_limit: u64,
    pub hooks: Vec<Hook>,
    /// Record one trace line per executed instruction.
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { shadow_stack: false, step_limit: DEFAULT_STEP_LIMIT, hooks: Vec::new(), trace: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("entry symbol `{0}` is not defined by any loaded image")]
    UnknownEntry(String),
    #[error("cannot resolve location `{0}`")]
    UnknownLocation(String),
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Loader(#[from] LoaderError),
}

/// Where execution enters for `symbol`: its `F_entry` alias when present.
/// Exports are preferred over local definitions.
pub fn entry_address(space: &AddressSpace, symbol: &str) -> Result<u64, MachineError> {
    let find = |name: &str| {
        space
            .lookup(name)
            .map(|(_, a)| a)
            .or_else(|| space.images.iter().find_map(|i| i.image.symbols.get(name).map(|d| i.base + d.offset)))
    };
    find(&entry_alias(symbol)).or_else(|| find(symbol)).ok_or_else(|| MachineError::UnknownEntry(symbol.to_string()))
}

struct Vm<'a> {
    space: &'a mut AddressSpace,
    regs: [u64; 9],
    zf: bool,
    cf: bool,
    stack: Vec<u64>,
    shadow: Vec<u64>,
    pc: u64,
    endbr_expected: bool,
    ibt: bool,
    opts: &'a RunOptions,
    fired: Vec<bool>,
}

enum Step {
    Continue,
    Done(Outcome),
}

fn reg_index(id: RegisterId) -> usize {
    RegisterId::ALL.iter().position(|r| *r == id).expect("register in ALL")
}

fn sign_extend(imm: u32) -> u64 {
    imm as i32 as i64 as u64
}

impl Vm<'_> {
    fn get(&self, r: Reg) -> u64 {
        let v = self.regs[reg_index(r.id)];
        match r.width {
            Width::W32 => v & 0xffff_ffff,
            Width::W64 => v,
        }
    }

    fn set(&mut self, r: Reg, v: u64) {
        self.regs[reg_index(r.id)] = match r.width {
            Width::W32 => v & 0xffff_ffff,
            Width::W64 => v,
        };
    }

    fn trap(&self, kind: TrapKind, detail: impl Into<String>) -> Step {
        Step::Done(Outcome::Trapped(Trap {
            kind,
            pc: self.pc,
            location: self.space.symbolize(self.pc),
            detail: detail.into(),
        }))
    }

    /// Subtraction at the operand width, setting ZF and CF.
    fn sub_flags(&mut self, r: Reg, rhs: u64) -> u64 {
        let lhs = self.get(r);
        let (res, cf) = match r.width {
            Width::W32 => {
                let (l, rr) = (lhs as u32, rhs as u32);
                (u64::from(l.wrapping_sub(rr)), l < rr)
            }
            Width::W64 => (lhs.wrapping_sub(rhs), lhs < rhs),
        };
        self.zf = res == 0;
        self.cf = cf;
        res
    }

    fn imm_for(r: Reg, imm: u32) -> u64 {
        match r.width {
            Width::W32 => u64::from(imm),
            Width::W64 => sign_extend(imm),
        }
    }

    fn push_call(&mut self, ret: u64) {
        self.stack.push(ret);
        self.shadow.push(ret);
    }

    fn transfer(&mut self, to: u64, tracked: bool) {
        self.pc = to;
        self.endbr_expected = tracked && self.ibt;
    }

    fn data_cells(&mut self, img: usize, off: u64) -> Option<(String, &mut crate::loader::DataCells)> {
        let image = &self.space.images[img];
        let name = image.image.data.iter().find(|d| d.offset == off)?.name.clone();
        let cells = self.space.images[img].data.get_mut(&name)?;
        Some((name, cells))
    }

    fn resolver(&mut self) -> Step {
        let (Some(token), Some(reloc)) = (self.stack.pop(), self.stack.pop()) else {
            return self.trap(TrapKind::MemoryFault, "resolver: empty stack");
        };
        let Some(img) = self.space.images.get(token as usize) else {
            return self.trap(TrapKind::MemoryFault, "resolver: bad link-map token");
        };
        let sid_reg = Reg::r64(img.image.sid_reg);
        let checks_sid = img.image.plt == PltFormat::FineIbtPlt;
        if checks_sid && self.get(sid_reg) as u32 != img.image.resolver_sid {
            return self.trap(TrapKind::SidMismatchHlt, "resolver");
        }
        let Some(slot) = img.image.imports.get(reloc as usize).cloned() else {
            return self.trap(TrapKind::MemoryFault, "resolver: bad relocation index");
        };
        let Some((_, target)) = self.space.lookup(&slot.symbol) else {
            return self.trap(TrapKind::MemoryFault, format!("resolver: `{}` undefined", slot.symbol));
        };
        self.space.images[token as usize].got[slot.got_slot as usize] = target;
        if checks_sid {
            let high = self.get(sid_reg) >> 32;
            self.set(sid_reg, high);
        }
        self.transfer(target, true);
        Step::Continue
    }

    fn step(&mut self, trace: &mut Vec<TraceLine>, steps: u64) -> Step {
        for (i, h) in self.opts.hooks.iter().enumerate() {
            if h.at == self.pc && !self.fired[i] {
                self.fired[i] = true;
                match h.action {
                    HookAction::CorruptReturn { target } => {
                        if let Some(top) = self.stack.last_mut() {
                            *top = target;
                        }
                    }
                    HookAction::SetRegister { reg, value } => self.regs[reg_index(reg)] = value,
                }
            }
        }
        if let Some(intr) = Intrinsic::from_address(self.pc) {
            self.endbr_expected = false;
            return match intr {
                Intrinsic::ChkFail => self.trap(TrapKind::ChkFailHandler, ""),
                Intrinsic::Resolver => self.resolver(),
            };
        }
        let Some(img_idx) = self.space.image_at(self.pc) else {
            return self.trap(TrapKind::MemoryFault, "unmapped");
        };
        let img = &self.space.images[img_idx];
        let off = self.pc - img.base;
        let fetched = img.instr_at(off).filter(|(s, _, _)| *s != GOT && *s != DATA);
        let Some((section, idx, instr)) = fetched else {
            return self.trap(TrapKind::MemoryFault, "no instruction here");
        };
        let item = &img.image.sections[section].items[idx];
        let (target, got_slot, base) = (item.target, item.got_slot, img.base);
        if self.endbr_expected && instr != Instruction::Endbr64 {
            return self.trap(TrapKind::EndbrViolation, format!("landed on `{instr}`"));
        }
        self.endbr_expected = false;
        if self.opts.trace {
            trace.push(TraceLine {
                step: steps,
                pc: self.pc,
                location: self.space.symbolize(self.pc),
                instr: instr.to_string(),
            });
        }
        let next = self.pc + u64::from(instr.size());
        let abs = |t: Option<Target>| match t {
            Some(Target::Text(o)) | Some(Target::Data(o)) => Some(base + o),
            Some(Target::Intrinsic(i)) => Some(i.address()),
            None => None,
        };
        let data_off = match target {
            Some(Target::Data(o)) => Some(o),
            _ => None,
        };
        self.pc = next;
        match instr {
            Instruction::Endbr64 | Instruction::Nop { .. } => {}
            Instruction::MovImm { dst, imm } => self.set(dst, Self::imm_for(dst, imm)),
            Instruction::SubImm { dst, imm } => {
                let r = self.sub_flags(dst, Self::imm_for(dst, imm));
                self.set(dst, r);
            }
            Instruction::CmpImm { dst, imm } => {
                self.sub_flags(dst, Self::imm_for(dst, imm));
            }
            Instruction::XorImm { dst, imm } => {
                let r = self.get(dst) ^ Self::imm_for(dst, imm);
                self.zf = r & if dst.width == Width::W32 { 0xffff_ffff } else { u64::MAX } == 0;
                self.cf = false;
                self.set(dst, r);
            }
            Instruction::Shl { dst, amount } => {
                let v = match dst.width {
                    Width::W32 => u64::from((self.get(dst) as u32).wrapping_shl(u32::from(amount))),
                    Width::W64 => self.get(dst).wrapping_shl(u32::from(amount)),
                };
                self.set(dst, v);
            }
            Instruction::Rol { dst, amount } => {
                let v = match dst.width {
                    Width::W32 => u64::from((self.get(dst) as u32).rotate_left(u32::from(amount))),
                    Width::W64 => self.get(dst).rotate_left(u32::from(amount)),
                };
                self.set(dst, v);
            }
            Instruction::Or64Imm { dst, imm } => {
                let v = self.get(dst) | imm;
                self.set(dst, v);
            }
            Instruction::SubReg { dst, src } => {
                let r = self.sub_flags(dst, self.get(src));
                self.set(dst, r);
            }
            Instruction::MovReg { dst, src } => self.set(dst, self.get(src)),
            Instruction::CondBranch { cond, .. } => {
                let taken = match cond {
                    Cond::Eq => self.zf,
                    Cond::Ne => !self.zf,
                    Cond::Ae => !self.cf,
                };
                if taken {
                    self.pc = abs(target).expect("linked branch");
                }
            }
            Instruction::Jmp { .. } => self.pc = abs(target).expect("linked jmp"),
            Instruction::Hlt => {
                self.pc -= 1;
                return self.trap(TrapKind::SidMismatchHlt, "");
            }
            Instruction::Ud2 => {
                self.pc -= 2;
                return self.trap(TrapKind::ClangCfiRangeUd2, "");
            }
            Instruction::Int3 => {
                self.pc -= 1;
                return self.trap(TrapKind::Int3, "");
            }
            Instruction::DirectCall { .. } => {
                self.push_call(next);
                self.pc = abs(target).expect("linked call");
            }
            Instruction::IndirectCall { target: r, notrack, .. } => {
                self.push_call(next);
                self.transfer(self.get(r), !notrack);
            }
            Instruction::IndirectJmpReg { target: r, notrack, .. } => self.transfer(self.get(r), !notrack),
            Instruction::IndirectJmpGot { notrack, .. } => {
                let slot = got_slot.expect("linked GOT jmp") as usize;
                let Some(v) = self.space.images[img_idx].got.get(slot).copied() else {
                    return self.trap(TrapKind::MemoryFault, "GOT index");
                };
                self.transfer(v, !notrack);
            }
            Instruction::LoadFnAddr { dst, .. } => self.set(dst, abs(target).expect("linked lea")),
            Instruction::LoadData { dst, index, .. } => {
                let i = index.map_or(0, |r| self.get(r)) as usize;
                let v = data_off.and_then(|o| self.data_cells(img_idx, o)).and_then(|(_, c)| c.values.get(i).copied());
                match v {
                    Some(v) => self.set(dst, v),
                    None => return self.trap(TrapKind::MemoryFault, "load out of bounds"),
                }
            }
            Instruction::StoreData { src, .. } => {
                let v = self.get(src);
                match data_off.and_then(|o| self.data_cells(img_idx, o)) {
                    Some((_, c)) if c.writable && !c.values.is_empty() => c.values[0] = v,
                    Some((name, _)) => return self.trap(TrapKind::MemoryFault, format!("store to read-only `{name}`")),
                    None => return self.trap(TrapKind::MemoryFault, "store"),
                }
            }
            Instruction::PushImm { imm } => self.stack.push(sign_extend(imm)),
            Instruction::PushGotSlot { index } => {
                let v = self.space.images[img_idx].got.get(index as usize).copied().unwrap_or(0);
                self.stack.push(v);
            }
            Instruction::Ret => {
                let Some(ret) = self.stack.pop() else {
                    return self.trap(TrapKind::MemoryFault, "ret on empty stack");
                };
                let shadow = self.shadow.pop();
                if self.opts.shadow_stack && shadow != Some(ret) {
                    self.pc -= 1;
                    let expected = shadow.map_or_else(|| "none".to_string(), |s| format!("{s:#x}"));
                    return self.trap(TrapKind::ShadowStackMismatch, format!("ret to {ret:#x}, shadow {expected}"));
                }
                if ret == EXIT_ADDRESS {
                    return Step::Done(Outcome::Completed {
                        exit: self.regs[reg_index(RegisterId::Rax)] as u32 as i32,
                    });
                }
                self.pc = ret;
            }
            Instruction::SwitchJmp { index, notrack, .. } => {
                let i = self.get(index) as usize;
                let v = data_off.and_then(|o| self.data_cells(img_idx, o)).and_then(|(_, c)| c.values.get(i).copied());
                match v {
                    Some(v) => self.transfer(v, !notrack),
                    None => return self.trap(TrapKind::MemoryFault, "switch index out of bounds"),
                }
            }
            Instruction::Halt { code } => return Step::Done(Outcome::Completed { exit: code }),
        }
        Step::Continue
    }
}

/// Runs from absolute address `entry` until completion or a trap. GOT
/// writes made by the resolver persist in `space`.
pub fn run_at(space: &mut AddressSpace, entry: u64, opts: &RunOptions) -> Trace {
    let ibt = space.ibt_enabled();
    let mut vm = Vm {
        space,
        regs: [0; 9],
        zf: false,
        cf: false,
        stack: vec![EXIT_ADDRESS],
        shadow: vec![EXIT_ADDRESS],
        pc: entry,
        endbr_expected: false,
        ibt,
        opts,
        fired: vec![false; opts.hooks.len()],
    };
    let mut lines = Vec::new();
    let mut steps = 0u64;
    loop {
        if steps >= opts.step_limit {
            let Step::Done(outcome) = vm.trap(TrapKind::StepLimitExceeded, format!("{steps} steps")) else {
                unreachable!()
            };
            return Trace { lines, steps, outcome };
        }
        steps += 1;
        if let Step::Done(outcome) = vm.step(&mut lines, steps) {
            return Trace { lines, steps, outcome };
        }
    }
}

/// Runs exported function `entry` (through its `F_entry` alias when present).
pub fn run(space: &mut AddressSpace, entry: &str, opts: &RunOptions) -> Result<Trace, MachineError> {
    let at = entry_address(space, entry)?;
    Ok(run_at(space, at, opts))
}

/// Resolves `sym`, `sym+off`, `fn:label`, `image!sym` or a hex address.
pub fn resolve_location(space: &AddressSpace, text: &str) -> Result<u64, MachineError> {
    let unknown = || MachineError::UnknownLocation(text.to_string());
    if let Some(hex) = text.strip_prefix("0x") {
        return u64::from_str_radix(hex, 16).map_err(|_| unknown());
    }
    let (image, rest) = match text.split_once('!') {
        Some((i, r)) => (Some(i), r),
        None => (None, text),
    };
    let (sym, off) = match rest.rsplit_once('+') {
        Some((s, o)) => (s, parse_u64(o).ok_or_else(unknown)?),
        None => (rest, 0),
    };
    if let Some(i) = Intrinsic::from_symbol(sym) {
        return Ok(i.address() + off);
    }
    space
        .images
        .iter()
        .filter(|i| image.is_none_or(|n| i.name() == n))
        .find_map(|i| i.image.symbols.get(sym).map(|d| i.base + d.offset + off))
        .ok_or_else(unknown)
}

fn parse_u64(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expected {
    Completes { completes: i32 },
    Traps { traps: TrapKind },
    Rejected(IllegalMutation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IllegalMutation {
    IllegalMutation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    /// Overwrites one cell of a data object.
    WriteData {
        #[serde(default)]
        image: Option<String>,
        object: String,
        #[serde(default)]
        index: usize,
        #[serde(flatten)]
        value: Value,
    },
    /// Overwrites the GOT slot of an import.
    WriteGot {
        #[serde(default)]
        image: Option<String>,
        import: String,
        #[serde(flatten)]
        value: Value,
    },
    CorruptReturn {
        at: String,
        target: String,
    },
    SetRegister {
        at: String,
        reg: String,
        value: u64,
    },
    /// Stores the `dlsym` result for `symbol` into a data object.
    Dlsym {
        symbol: String,
        #[serde(default)]
        image: Option<String>,
        object: String,
        #[serde(default)]
        index: usize,
    },
}

/// A written value: a location or a raw number.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Value {
    #[serde(default)]
    pub symbol: Option<String>,
    #[serde(default)]
    pub value: Option<u64>,
    #[serde(default)]
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub entry: String,
    #[serde(default)]
    pub shadow_stack: bool,
    pub expected: Expected,
    #[serde(default)]
    pub mutations: Vec<Mutation>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, MachineError> {
        toml::from_str(text).map_err(|e| MachineError::Scenario(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioOutcome {
    Ran(Outcome),
    IllegalMutation(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioResult {
    pub name: String,
    pub outcome: ScenarioOutcome,
    pub trace: Option<Trace>,
    pub passed: bool,
}

impl ScenarioResult {
    pub fn summary(&self) -> String {
        let got = match &self.outcome {
            ScenarioOutcome::Ran(o) => o.to_string(),
            ScenarioOutcome::IllegalMutation(m) => format!("illegal_mutation ({m})"),
        };
        format!("{} {}: {got}", if self.passed { "PASS" } else { "FAIL" }, self.name)
    }
}

fn value_of(space: &AddressSpace, v: &Value) -> Result<u64, MachineError> {
    match (&v.symbol, v.value) {
        (Some(s), _) => Ok(resolve_location(space, s)? + v.offset),
        (None, Some(n)) => Ok(n + v.offset),
        (None, None) => Err(MachineError::Scenario("mutation needs `symbol` or `value`".into())),
    }
}

fn image_for(
    space: &AddressSpace,
    image: &Option<String>,
    has: impl Fn(&crate::loader::LoadedImage) -> bool,
) -> Result<usize, MachineError> {
    space
        .images
        .iter()
        .position(|i| image.as_ref().is_none_or(|n| i.name() == n) && has(i))
        .ok_or_else(|| MachineError::Scenario(format!("no image matches {image:?}")))
}

/// Applies `m`; `Ok(Some(reason))` reports a rejected write.
fn apply(space: &mut AddressSpace, m: &Mutation, hooks: &mut Vec<Hook>) -> Result<Option<String>, MachineError> {
    match m {
        Mutation::WriteData { image, object, index, value } => {
            let v = value_of(space, value)?;
            let i = image_for(space, image, |i| i.data.contains_key(object))?;
            let cells = space.images[i].data.get_mut(object).expect("checked");
            if !cells.writable {
                return Ok(Some(format!("`{object}` is read-only")));
            }
            let slot =
                cells.values.get_mut(*index).ok_or_else(|| MachineError::Scenario(format!("{object}[{index}]")))?;
            *slot = v;
        }
        Mutation::WriteGot { image, import, value } => {
            let v = value_of(space, value)?;
            let i = image_for(space, image, |i| i.image.import(import).is_some())?;
            let img = &mut space.images[i];
            if !img.got_writable {
                return Ok(Some(format!("GOT of `{}` is read-only", img.name())));
            }
            let slot = img.image.import(import).expect("checked").got_slot as usize;
            img.got[slot] = v;
        }
        Mutation::CorruptReturn { at, target } => {
            hooks.push(Hook {
                at: resolve_location(space, at)?,
                action: HookAction::CorruptReturn { target: resolve_location(space, target)? },
            });
        }
        Mutation::SetRegister { at, reg, value } => {
            let r = Reg::from_name(reg.trim_start_matches('%'))
                .ok_or_else(|| MachineError::UnknownRegister(reg.clone()))?;
            hooks.push(Hook {
                at: resolve_location(space, at)?,
                action: HookAction::SetRegister { reg: r.id, value: *value },
            });
        }
        Mutation::Dlsym { symbol, image, object, index } => {
            let addr = space.dlsym(symbol)?;
            let i = image_for(space, image, |i| i.data.contains_key(object))?;
            let cells = space.images[i].data.get_mut(object).expect("checked");
            let slot =
                cells.values.get_mut(*index).ok_or_else(|| MachineError::Scenario(format!("{object}[{index}]")))?;
            *slot = addr;
        }
    }
    Ok(None)
}

/// Applies the scenario's mutations to a copy of `space`, runs it and
/// compares the outcome with the expectation.
pub fn run_scenario(space: &AddressSpace, s: &Scenario, step_limit: u64) -> Result<ScenarioResult, MachineError> {
    let mut space = space.clone();
    let mut hooks = Vec::new();
    for m in &s.mutations {
        if let Some(reason) = apply(&mut space, m, &mut hooks)? {
            let passed = matches!(s.expected, Expected::Rejected(_));
            return Ok(ScenarioResult {
                name: s.name.clone(),
                outcome: ScenarioOutcome::IllegalMutation(reason),
                trace: None,
                passed,
            });
        }
    }
    let opts = RunOptions { shadow_stack: s.shadow_stack, step_limit, hooks, trace: true };
    let trace = run(&mut space, &s.entry, &opts)?;
    let passed = match (&s.expected, &trace.outcome) {
        (Expected::Completes { completes }, Outcome::Completed { exit }) => completes == exit,
        (Expected::Traps { traps }, Outcome::Trapped(t)) => *traps == t.kind,
        _ => false,
    };
    Ok(ScenarioResult {
        name: s.name.clone(),
        outcome: ScenarioOutcome::Ran(trace.outcome.clone()),
        trace: Some(trace),
        passed,
    })
}

/// Totals of trace lines per symbol, for quick inspection.
pub fn steps_by_symbol(t: &Trace) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for l in &t.lines {
        let sym = l.location.split('+').next().unwrap_or_default().to_string();
        *out.entry(sym).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use crate::linkage::{link_image, LinkConfig};
    use crate::loader::LoadOptions;
    use crate::policy::{assign, PolicyKind, SidOverrides};
    use crate::weave::{instrument, IrmVariant};

    fn space(src: &str, v: IrmVariant) -> AddressSpace {
        let p = parse_program(src).unwrap();
        let a = assign(&p, &PolicyKind::TypeStrict, 5, &SidOverrides::new()).unwrap();
        let out = instrument(&p, &a, v, RegisterId::R11).unwrap();
        let plt = if v.is_fineibt() { PltFormat::FineIbtPlt } else { PltFormat::IbtPlt };
        let img = link_image(&out, &a, &LinkConfig { variant: v, plt, sid_reg: RegisterId::R11 }).unwrap();
        AddressSpace::load(vec![img], LoadOptions::default()).unwrap()
    }

    const PROG: &str = "\
.program t
.data fp fnptr_slot rw = good
.data fp2 fnptr_slot rw = bad
.func main global () -> int32
    load fp, %rcx
    call *%rcx : (int64) -> int64
    ret
.func good local (int64) -> int64
    mov $0x7, %eax
    ret
.func bad local (int32) -> int32
    ret
";

    #[test]
    fn intrinsic_addresses_round_trip() {
        for i in Intrinsic::ALL {
            assert_eq!(Intrinsic::from_address(i.address()), Some(i));
            assert_eq!(Intrinsic::from_symbol(i.symbol()), Some(i));
        }
    }

    #[test]
    fn legit_call_completes_and_swap_traps() {
        let mut s = space(PROG, IrmVariant::FineIbtBasic);
        let t = run(&mut s.clone(), "main", &RunOptions::default()).unwrap();
        assert_eq!(t.outcome, Outcome::Completed { exit: 7 });
        let bad = resolve_location(&s, "bad").unwrap();
        s.images[0].data.get_mut("fp").unwrap().values[0] = bad;
        let t = run(&mut s, "main", &RunOptions::default()).unwrap();
        assert_eq!(t.outcome.trap_kind(), Some(TrapKind::SidMismatchHlt));
    }

    #[test]
    fn ibt_only_admits_any_endbr_target() {
        let mut s = space(PROG, IrmVariant::IbtOnly);
        let bad = resolve_location(&s, "bad").unwrap();
        s.images[0].data.get_mut("fp").unwrap().values[0] = bad;
        let t = run(&mut s.clone(), "main", &RunOptions::default()).unwrap();
        assert!(matches!(t.outcome, Outcome::Completed { .. }));
        s.images[0].data.get_mut("fp").unwrap().values[0] = bad + 4;
        let t = run(&mut s, "main", &RunOptions::default()).unwrap();
        assert_eq!(t.outcome.trap_kind(), Some(TrapKind::EndbrViolation));
    }

    #[test]
    fn shadow_stack_catches_corrupted_return() {
        let s = space(PROG, IrmVariant::FineIbtBasic);
        let scenario = Scenario::from_toml(
            r#"
name = "ret"
entry = "main"
shadow_stack = true
expected = { traps = "ShadowStackMismatch" }
[[mutations]]
kind = "corrupt_return"
at = "good:good_entry"
target = "main_entry"
"#,
        )
        .unwrap();
        let r = run_scenario(&s, &scenario, 1000).unwrap();
        assert!(r.passed, "{}", r.summary());
        let off = Scenario { shadow_stack: false, expected: Expected::Completes { completes: 7 }, ..scenario };
        let r = run_scenario(&s, &off, 1000).unwrap();
        assert!(r.passed, "{}", r.summary());
    }

    #[test]
    fn identical_runs_have_identical_traces() {
        let s = space(PROG, IrmVariant::FineIbtColdpath);
        let a = run(&mut s.clone(), "main", &RunOptions::default()).unwrap();
        let b = run(&mut s.clone(), "main", &RunOptions::default()).unwrap();
        assert_eq!(trace_diff(&a, &b, DiffMode::Exact), None);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn expected_forms_parse() {
        for (text, want) in [
            ("{ completes = 3 }", Expected::Completes { completes: 3 }),
            ("{ traps = \"Int3\" }", Expected::Traps { traps: TrapKind::Int3 }),
            ("\"illegal_mutation\"", Expected::Rejected(IllegalMutation::IllegalMutation)),
        ] {
            let s = Scenario::from_toml(&format!("name = \"x\"\nentry = \"m\"\nexpected = {text}\n")).unwrap();
            assert_eq!(s.expected, want);
        }
    }
}

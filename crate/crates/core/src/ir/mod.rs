//! Assembly-level intermediate representation shared by every pipeline stage.
//!
//! The IR is x86-64 flavoured: one instruction per statement, labels scoped to
//! their function, and a closed set of variants whose encoded sizes come from
//! [`size::instruction_size`]. Programs are parsed from and printed to the
//! `.fasm` text format (see `docs/grammar.md`).

mod parse;
mod print;
pub mod size;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_instruction, parse_program, parse_signature};
pub use print::print_program;
pub use size::{encode, instruction_size, ENDBR64_BYTES, NOP4_BYTES};

/// Version tag carried by the first line of every printed program.
pub const FASM_HEADER: &str = ";fasm v1";

/// Suffix of the alias symbol that marks the original prologue of a protected
/// function.
pub const ENTRY_SUFFIX: &str = "_entry";

/// Name of the entry alias for `function`.
pub fn entry_alias(function: &str) -> String {
    format!("{function}{ENTRY_SUFFIX}")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("undefined symbol `{symbol}` (line {line})")]
    UndefinedSymbol { symbol: String, line: usize },
    #[error("duplicate label `{label}` in `{function}` (line {line})")]
    DuplicateLabel { function: String, label: String, line: usize },
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("invalid program: {0}")]
    Invalid(String),
}

/// General-purpose registers available to programs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegisterId {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    R10,
    R11,
    R12,
}

impl RegisterId {
    pub const ALL: [RegisterId; 9] = [
        RegisterId::Rax,
        RegisterId::Rbx,
        RegisterId::Rcx,
        RegisterId::Rdx,
        RegisterId::Rsi,
        RegisterId::Rdi,
        RegisterId::R10,
        RegisterId::R11,
        RegisterId::R12,
    ];

    pub fn name64(self) -> &'static str {
        match self {
            RegisterId::Rax => "rax",
            RegisterId::Rbx => "rbx",
            RegisterId::Rcx => "rcx",
            RegisterId::Rdx => "rdx",
            RegisterId::Rsi => "rsi",
            RegisterId::Rdi => "rdi",
            RegisterId::R10 => "r10",
            RegisterId::R11 => "r11",
            RegisterId::R12 => "r12",
        }
    }

    pub fn name32(self) -> &'static str {
        match self {
            RegisterId::Rax => "eax",
            RegisterId::Rbx => "ebx",
            RegisterId::Rcx => "ecx",
            RegisterId::Rdx => "edx",
            RegisterId::Rsi => "esi",
            RegisterId::Rdi => "edi",
            RegisterId::R10 => "r10d",
            RegisterId::R11 => "r11d",
            RegisterId::R12 => "r12d",
        }
    }

    /// Registers that need a REX prefix in real encodings.
    pub fn is_extended(self) -> bool {
        matches!(self, RegisterId::R10 | RegisterId::R11 | RegisterId::R12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    W32,
    W64,
}

/// A register operand: a register together with the view being accessed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg {
    pub id: RegisterId,
    pub width: Width,
}

impl Reg {
    pub const fn r64(id: RegisterId) -> Self {
        Reg { id, width: Width::W64 }
    }

    pub const fn r32(id: RegisterId) -> Self {
        Reg { id, width: Width::W32 }
    }

    pub fn name(self) -> &'static str {
        match self.width {
            Width::W32 => self.id.name32(),
            Width::W64 => self.id.name64(),
        }
    }

    pub fn from_name(name: &str) -> Option<Reg> {
        RegisterId::ALL.iter().find_map(|&id| {
            if id.name64() == name {
                Some(Reg::r64(id))
            } else if id.name32() == name {
                Some(Reg::r32(id))
            } else {
                None
            }
        })
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.name())
    }
}

/// Closed set of parameter/return types used by the type-based policies.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TypeTag {
    Void,
    Int32,
    Int64,
    Ptr(Box<TypeTag>),
    FnPtr(Box<Signature>),
    Struct(String),
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeTag::Void => f.write_str("void"),
            TypeTag::Int32 => f.write_str("int32"),
            TypeTag::Int64 => f.write_str("int64"),
            TypeTag::Ptr(inner) => write!(f, "ptr({inner})"),
            TypeTag::FnPtr(sig) => write!(f, "fnptr({sig})"),
            TypeTag::Struct(name) => write!(f, "struct({name})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signature {
    pub ret: TypeTag,
    pub params: Vec<TypeTag>,
    pub variadic: bool,
}

impl Signature {
    pub fn new(params: Vec<TypeTag>, ret: TypeTag) -> Self {
        Signature { ret, params, variadic: false }
    }

    pub fn variadic(params: Vec<TypeTag>, ret: TypeTag) -> Self {
        Signature { ret, params, variadic: true }
    }

    pub fn arity(&self) -> usize {
        self.params.len()
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{p}")?;
        }
        if self.variadic {
            if !self.params.is_empty() {
                f.write_str(", ")?;
            }
            f.write_str("...")?;
        }
        write!(f, ") -> {}", self.ret)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Linkage {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cond {
    Eq,
    Ne,
    Ae,
}

impl Cond {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "je",
            Cond::Ne => "jne",
            Cond::Ae => "jae",
        }
    }
}

/// Operand of a memory-indirect jump through the GOT.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GotRef {
    /// The slot bound to an imported symbol (`*sym@GOT`).
    Symbol(String),
    /// A fixed slot by index (`*GOT[2]`).
    Slot(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Endbr64,
    MovImm { dst: Reg, imm: u32 },
    SubImm { dst: Reg, imm: u32 },
    CmpImm { dst: Reg, imm: u32 },
    XorImm { dst: Reg, imm: u32 },
    Shl { dst: Reg, amount: u8 },
    Rol { dst: Reg, amount: u8 },
    Or64Imm { dst: Reg, imm: u64 },
    SubReg { dst: Reg, src: Reg },
    MovReg { dst: Reg, src: Reg },
    CondBranch { cond: Cond, target: String },
    Jmp { target: String },
    Hlt,
    Ud2,
    Int3,
    Nop { width: u8 },
    DirectCall { target: String },
    IndirectCall { target: Reg, notrack: bool, sig: Option<Signature> },
    IndirectJmpReg { target: Reg, notrack: bool, sig: Option<Signature> },
    IndirectJmpGot { slot: GotRef, notrack: bool },
    LoadFnAddr { dst: Reg, symbol: String },
    LoadData { dst: Reg, object: String, index: Option<Reg> },
    StoreData { object: String, src: Reg },
    PushImm { imm: u32 },
    PushGotSlot { index: u32 },
    Ret,
    SwitchJmp { table: String, index: Reg, notrack: bool },
    Halt { code: i32 },
}

impl Instruction {
    /// Indirect call or register-indirect jump: the sites that carry a SID.
    pub fn is_indirect_site(&self) -> bool {
        matches!(self, Instruction::IndirectCall { .. } | Instruction::IndirectJmpReg { .. })
    }

    pub fn site_signature(&self) -> Option<&Signature> {
        match self {
            Instruction::IndirectCall { sig, .. } | Instruction::IndirectJmpReg { sig, .. } => sig.as_ref(),
            _ => None,
        }
    }

    pub fn size(&self) -> u32 {
        instruction_size(self)
    }

    /// Symbol-valued operand, if any (branch/call target, address-taken symbol).
    pub fn symbol_operand(&self) -> Option<&str> {
        match self {
            Instruction::CondBranch { target, .. }
            | Instruction::Jmp { target }
            | Instruction::DirectCall { target } => Some(target),
            Instruction::LoadFnAddr { symbol, .. } => Some(symbol),
            Instruction::IndirectJmpGot { slot: GotRef::Symbol(s), .. } => Some(s),
            _ => None,
        }
    }
}

impl Serialize for Instruction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Instruction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_instruction(&text).map_err(serde::de::Error::custom)
    }
}

/// One line of a function body.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Stmt {
    Label(String),
    Instr(Instruction),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub linkage: Linkage,
    /// Derived by [`Program::validate`]; never read from source text.
    pub address_taken: bool,
    pub signature: Signature,
    pub body: Vec<Stmt>,
    /// Start alignment in bytes; 16 unless overridden.
    pub align: u32,
}

pub const DEFAULT_FUNCTION_ALIGN: u32 = 16;

impl Function {
    pub fn new(name: impl Into<String>, linkage: Linkage, signature: Signature) -> Self {
        Function {
            name: name.into(),
            linkage,
            address_taken: false,
            signature,
            body: Vec::new(),
            align: DEFAULT_FUNCTION_ALIGN,
        }
    }

    pub fn with_body(mut self, body: Vec<Stmt>) -> Self {
        self.body = body;
        self
    }

    pub fn is_variadic(&self) -> bool {
        self.signature.variadic
    }

    pub fn is_global(&self) -> bool {
        self.linkage == Linkage::Global
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.body.iter().filter_map(|s| match s {
            Stmt::Instr(i) => Some(i),
            Stmt::Label(_) => None,
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.body.iter().filter_map(|s| match s {
            Stmt::Label(l) => Some(l.as_str()),
            Stmt::Instr(_) => None,
        })
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels().any(|l| l == label)
    }

    /// The entry alias label, when the body carries one.
    pub fn entry_alias(&self) -> Option<String> {
        let alias = entry_alias(&self.name);
        self.has_label(&alias).then_some(alias)
    }

    /// Indirect call/jmp sites in body order.
    pub fn indirect_sites(&self) -> impl Iterator<Item = &Instruction> {
        self.instructions().filter(|i| i.is_indirect_site())
    }

    pub fn byte_size(&self) -> u64 {
        self.instructions().map(|i| u64::from(i.size())).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    JumpTable,
    Vtable,
    FnptrSlot,
    Bytes,
}

impl DataKind {
    pub fn keyword(self) -> &'static str {
        match self {
            DataKind::JumpTable => "jump_table",
            DataKind::Vtable => "vtable",
            DataKind::FnptrSlot => "fnptr_slot",
            DataKind::Bytes => "bytes",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataEntry {
    /// Address of a function or import.
    Symbol(String),
    /// Address of a label inside a function (jump-table case targets).
    Label {
        function: String,
        label: String,
    },
    Value(u64),
}

impl fmt::Display for DataEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataEntry::Symbol(s) => f.write_str(s),
            DataEntry::Label { function, label } => write!(f, "{function}:{label}"),
            DataEntry::Value(v) => write!(f, "{v:#x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataObject {
    pub name: String,
    pub kind: DataKind,
    pub entries: Vec<DataEntry>,
    pub writable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportDecl {
    pub name: String,
    pub signature: Signature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProgramFlag {
    RelroFull,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub functions: Vec<Function>,
    pub data_objects: Vec<DataObject>,
    pub imports: Vec<ImportDecl>,
    pub flags: BTreeSet<ProgramFlag>,
}

/// What a global symbol name refers to inside a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolKind {
    Function,
    EntryAlias,
    Import,
    Data,
}

impl Program {
    pub fn new(name: impl Into<String>) -> Self {
        Program { name: name.into(), ..Default::default() }
    }

    pub fn relro_full(&self) -> bool {
        self.flags.contains(&ProgramFlag::RelroFull)
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn import(&self, name: &str) -> Option<&ImportDecl> {
        self.imports.iter().find(|i| i.name == name)
    }

    pub fn data_object(&self, name: &str) -> Option<&DataObject> {
        self.data_objects.iter().find(|d| d.name == name)
    }

    /// Global symbol table: functions, entry aliases, imports and data objects.
    pub fn symbols(&self) -> BTreeMap<String, SymbolKind> {
        let mut out = BTreeMap::new();
        for f in &self.functions {
            out.insert(f.name.clone(), SymbolKind::Function);
            if let Some(alias) = f.entry_alias() {
                out.insert(alias, SymbolKind::EntryAlias);
            }
        }
        for i in &self.imports {
            out.insert(i.name.clone(), SymbolKind::Import);
        }
        for d in &self.data_objects {
            out.insert(d.name.clone(), SymbolKind::Data);
        }
        out
    }

    /// Function owning the entry alias `alias`, if it is one.
    pub fn alias_owner(&self, alias: &str) -> Option<&Function> {
        let base = alias.strip_suffix(ENTRY_SUFFIX)?;
        self.function(base).filter(|f| f.has_label(alias))
    }

    /// Symbols whose address escapes: `lea` operands and data initializers.
    pub fn address_taken_symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for f in &self.functions {
            for i in f.instructions() {
                if let Instruction::LoadFnAddr { symbol, .. } = i {
                    out.insert(symbol.clone());
                }
            }
        }
        for d in &self.data_objects {
            for e in &d.entries {
                if let DataEntry::Symbol(s) = e {
                    out.insert(s.clone());
                }
            }
        }
        out
    }

    /// Total encoded code bytes of all function bodies.
    pub fn code_bytes(&self) -> u64 {
        self.functions.iter().map(Function::byte_size).sum()
    }

    /// Checks every structural invariant and recomputes `address_taken`.
    pub fn validate(&mut self) -> Result<(), IrError> {
        validate_with_lines(self, &LineTable::default())
    }
}

/// Source line numbers recorded by the parser, keyed by (function index,
/// statement index), used only for diagnostics.
#[derive(Default)]
pub(crate) struct LineTable {
    pub stmts: BTreeMap<(usize, usize), usize>,
    pub functions: BTreeMap<usize, usize>,
    pub data: BTreeMap<usize, usize>,
}

pub(crate) fn validate_with_lines(p: &mut Program, lines: &LineTable) -> Result<(), IrError> {
    let mut seen = BTreeSet::new();
    for f in &p.functions {
        if !seen.insert(f.name.as_str()) {
            return Err(IrError::DuplicateSymbol(f.name.clone()));
        }
    }
    for i in &p.imports {
        if !seen.insert(i.name.as_str()) {
            return Err(IrError::DuplicateSymbol(i.name.clone()));
        }
    }
    for d in &p.data_objects {
        if !seen.insert(d.name.as_str()) {
            return Err(IrError::DuplicateSymbol(d.name.clone()));
        }
    }

    for (fi, f) in p.functions.iter().enumerate() {
        let mut labels = BTreeSet::new();
        for (si, s) in f.body.iter().enumerate() {
            if let Stmt::Label(l) = s {
                if !labels.insert(l.as_str()) {
                    return Err(IrError::DuplicateLabel {
                        function: f.name.clone(),
                        label: l.clone(),
                        line: lines.stmts.get(&(fi, si)).copied().unwrap_or(0),
                    });
                }
            }
        }
        if !f.align.is_power_of_two() {
            return Err(IrError::Invalid(format!("alignment of `{}` is not a power of two", f.name)));
        }
    }

    let symbols = p.symbols();
    for (fi, f) in p.functions.iter().enumerate() {
        for (si, s) in f.body.iter().enumerate() {
            let Stmt::Instr(ins) = s else { continue };
            let line = lines.stmts.get(&(fi, si)).copied().unwrap_or(0);
            let undefined = |sym: &str| IrError::UndefinedSymbol { symbol: sym.to_string(), line };
            match ins {
                Instruction::CondBranch { target, .. } | Instruction::Jmp { target } => {
                    let ok = f.has_label(target)
                        || matches!(
                            symbols.get(target.as_str()),
                            Some(SymbolKind::Function | SymbolKind::EntryAlias | SymbolKind::Import)
                        );
                    if !ok {
                        return Err(undefined(target));
                    }
                }
                Instruction::DirectCall { target } => {
                    let ok = matches!(
                        symbols.get(target.as_str()),
                        Some(SymbolKind::Function | SymbolKind::EntryAlias | SymbolKind::Import)
                    ) || crate::machine::Intrinsic::from_symbol(target).is_some();
                    if !ok {
                        return Err(undefined(target));
                    }
                }
                Instruction::LoadFnAddr { symbol, .. } => {
                    if !symbols.contains_key(symbol.as_str()) {
                        return Err(undefined(symbol));
                    }
                }
                Instruction::IndirectJmpGot { slot: GotRef::Symbol(s), .. } => {
                    if symbols.get(s.as_str()) != Some(&SymbolKind::Import) {
                        return Err(undefined(s));
                    }
                }
                Instruction::LoadData { object, .. }
                | Instruction::StoreData { object, .. }
                | Instruction::SwitchJmp { table: object, .. } => {
                    if symbols.get(object.as_str()) != Some(&SymbolKind::Data) {
                        return Err(undefined(object));
                    }
                }
                Instruction::Nop { width } if !(1..=9).contains(width) => {
                    return Err(IrError::Invalid(format!("nop width {width} out of range (line {line})")));
                }
                _ => {}
            }
        }
    }

    for (di, d) in p.data_objects.iter().enumerate() {
        let line = lines.data.get(&di).copied().unwrap_or(0);
        for e in &d.entries {
            match (d.kind, e) {
                (DataKind::JumpTable, DataEntry::Label { function, label }) => {
                    let ok = p.function(function).is_some_and(|f| f.has_label(label));
                    if !ok {
                        return Err(IrError::UndefinedSymbol { symbol: e.to_string(), line });
                    }
                }
                (DataKind::JumpTable, _) => {
                    return Err(IrError::Invalid(format!(
                        "jump table `{}` entries must be `function:label` (line {line})",
                        d.name
                    )));
                }
                (DataKind::Vtable, DataEntry::Symbol(s)) => {
                    if !matches!(symbols.get(s.as_str()), Some(SymbolKind::Function | SymbolKind::Import)) {
                        return Err(IrError::UndefinedSymbol { symbol: s.clone(), line });
                    }
                }
                (DataKind::Vtable, _) => {
                    return Err(IrError::Invalid(format!(
                        "vtable `{}` entries must be function symbols (line {line})",
                        d.name
                    )));
                }
                (_, DataEntry::Symbol(s)) => {
                    if !matches!(symbols.get(s.as_str()), Some(SymbolKind::Function | SymbolKind::Import)) {
                        return Err(IrError::UndefinedSymbol { symbol: s.clone(), line });
                    }
                }
                (_, DataEntry::Label { function, label }) => {
                    if !p.function(function).is_some_and(|f| f.has_label(label)) {
                        return Err(IrError::UndefinedSymbol { symbol: e.to_string(), line });
                    }
                }
                (_, DataEntry::Value(_)) => {}
            }
        }
        if d.kind == DataKind::JumpTable && d.writable && p.relro_full() {
            return Err(IrError::Invalid(format!("jump table `{}` must be read-only under full RELRO", d.name)));
        }
    }

    let taken = p.address_taken_symbols();
    for f in &mut p.functions {
        f.address_taken = taken.contains(&f.name);
    }
    Ok(())
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nt = |notrack: bool| if notrack { "notrack " } else { "" };
        match self {
            Instruction::Endbr64 => f.write_str("endbr64"),
            Instruction::MovImm { dst, imm } => write!(f, "mov ${imm:#x}, {dst}"),
            Instruction::SubImm { dst, imm } => write!(f, "sub ${imm:#x}, {dst}"),
            Instruction::CmpImm { dst, imm } => write!(f, "cmp ${imm:#x}, {dst}"),
            Instruction::XorImm { dst, imm } => write!(f, "xor ${imm:#x}, {dst}"),
            Instruction::Shl { dst, amount } => write!(f, "shl ${amount:#x}, {dst}"),
            Instruction::Rol { dst, amount } => write!(f, "rol ${amount:#x}, {dst}"),
            Instruction::Or64Imm { dst, imm } => write!(f, "or ${imm:#x}, {dst}"),
            Instruction::SubReg { dst, src } => write!(f, "sub {src}, {dst}"),
            Instruction::MovReg { dst, src } => write!(f, "mov {src}, {dst}"),
            Instruction::CondBranch { cond, target } => write!(f, "{} {target}", cond.mnemonic()),
            Instruction::Jmp { target } => write!(f, "jmp {target}"),
            Instruction::Hlt => f.write_str("hlt"),
            Instruction::Ud2 => f.write_str("ud2"),
            Instruction::Int3 => f.write_str("int3"),
            Instruction::Nop { width: 1 } => f.write_str("nop"),
            Instruction::Nop { width } => write!(f, "nop {width}"),
            Instruction::DirectCall { target } => write!(f, "call {target}"),
            Instruction::IndirectCall { target, notrack, sig } => {
                write!(f, "{}call *{target}", nt(*notrack))?;
                if let Some(sig) = sig {
                    write!(f, " : {sig}")?;
                }
                Ok(())
            }
            Instruction::IndirectJmpReg { target, notrack, sig } => {
                write!(f, "{}jmp *{target}", nt(*notrack))?;
                if let Some(sig) = sig {
                    write!(f, " : {sig}")?;
                }
                Ok(())
            }
            Instruction::IndirectJmpGot { slot, notrack } => match slot {
                GotRef::Symbol(s) => write!(f, "{}jmp *{s}@GOT", nt(*notrack)),
                GotRef::Slot(i) => write!(f, "{}jmp *GOT[{i}]", nt(*notrack)),
            },
            Instruction::LoadFnAddr { dst, symbol } => write!(f, "lea {symbol}, {dst}"),
            Instruction::LoadData { dst, object, index } => match index {
                Some(ix) => write!(f, "load {object}[{ix}], {dst}"),
                None => write!(f, "load {object}, {dst}"),
            },
            Instruction::StoreData { object, src } => write!(f, "store {src}, {object}"),
            Instruction::PushImm { imm } => write!(f, "push ${imm:#x}"),
            Instruction::PushGotSlot { index } => write!(f, "push GOT[{index}]"),
            Instruction::Ret => f.write_str("ret"),
            Instruction::SwitchJmp { table, index, notrack } => {
                write!(f, "{}switch {table}[{index}]", nt(*notrack))
            }
            Instruction::Halt { code } => write!(f, "halt {code}"),
        }
    }
}

//! Per-DSO images: `.text` layout, GOT, the three PLT formats and the
//! landing-pad census.
//!
//! Offsets are image-relative; the loader adds a base. Every symbolic operand
//! is resolved here into a [`Target`], so the VM never looks names up.
//!
//! GOT layout: slot 0 is reserved, slot 1 holds the link-map token, slot 2
//! the resolver address, and import `k` (1-based) lives in slot `2 + k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    encode, entry_alias, Cond, DataEntry, DataKind, GotRef, Instruction, Linkage, Program, Reg, RegisterId, Stmt,
};
use crate::machine::Intrinsic;
use crate::policy::{SidAssignment, RESOLVER_SID};
use crate::weave::{is_cfi_slot, is_coldpath, IrmVariant, SizeReport};

pub const TEXT: &str = ".text";
pub const PLT: &str = ".plt";
pub const PLT_SEC: &str = ".plt.sec";
pub const PLT_FINEIBT: &str = ".plt.fineibt";
pub const PLT_ATFINEIBT: &str = ".plt.atfineibt";
pub const GOT: &str = ".got";
pub const DATA: &str = ".data";
/// Sections whose landing pads count as PLT-family targets.
pub const PLT_FAMILY: [&str; 4] = [PLT, PLT_SEC, PLT_FINEIBT, PLT_ATFINEIBT];

pub const SLOT_BYTES: u64 = 16;
pub const PAGE_SIZE: u64 = 4096;
/// First GOT slot used by imports.
pub const GOT_FIRST_IMPORT: u32 = 3;
/// Format tag of serialized images.
pub const IMAGE_FORMAT: &str = "fineibt-image/1";
/// Padding byte between functions.
pub const FILL_BYTE: u8 = 0xcc;

pub fn align_up(v: u64, align: u64) -> u64 {
    v.div_ceil(align) * align
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PltFormat {
    IbtPlt,
    FineIbtPlt,
    CompactPlt,
}

impl PltFormat {
    pub fn name(self) -> &'static str {
        match self {
            PltFormat::IbtPlt => "ibt",
            PltFormat::FineIbtPlt => "fineibt",
            PltFormat::CompactPlt => "compact",
        }
    }
}

impl fmt::Display for PltFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PltFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "ibt" => PltFormat::IbtPlt,
            "fineibt" => PltFormat::FineIbtPlt,
            "compact" => PltFormat::CompactPlt,
            other => return Err(format!("unknown PLT format `{other}`")),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("the compact PLT requires a full-RELRO program")]
    RelroRequired,
    #[error("no SID for import `{0}`")]
    MissingSid(String),
    #[error("IRM variant `{variant}` cannot be linked with the `{plt}` PLT")]
    IncompatiblePlt { variant: IrmVariant, plt: PltFormat },
    #[error("{section} slot for `{symbol}` needs {bytes} bytes")]
    SlotOverflow { section: String, symbol: String, bytes: u64 },
    #[error("unresolved symbol `{0}`")]
    Unresolved(String),
}

/// Resolved operand of an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Text(u64),
    Data(u64),
    Intrinsic(Intrinsic),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub offset: u64,
    pub instr: Instruction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub got_slot: Option<u32>,
}

impl Item {
    pub fn size(&self) -> u64 {
        u64::from(self.instr.size())
    }

    pub fn end(&self) -> u64 {
        self.offset + self.size()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub offset: u64,
    pub size: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<Item>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSymbolKind {
    Function,
    EntryAlias,
    Label,
    PltSlot,
    Data,
    Got,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolDef {
    pub section: String,
    pub offset: u64,
    pub kind: ImageSymbolKind,
    pub global: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Export {
    pub offset: u64,
    pub entry_alias: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSlot {
    pub symbol: String,
    pub signature: String,
    pub got_slot: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sid: Option<u32>,
    /// Lazy-binding entry (`PLT_k`), when the format has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plt: Option<u64>,
    /// Target of direct calls (`FPLT_k` or `SPLT_k`).
    pub call_stub: u64,
    /// Target of address-taking (`ATFPLT_k`, or `SPLT_k` for the IBT PLT).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address_stub: Option<u64>,
    pub address_taken: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataInit {
    Text(u64),
    Value(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataImage {
    pub name: String,
    pub kind: DataKind,
    pub writable: bool,
    pub offset: u64,
    pub entries: Vec<DataInit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionRole {
    Normal,
    Coldpath,
    CfiSlot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionInfo {
    pub name: String,
    pub offset: u64,
    pub size: u64,
    pub linkage: Linkage,
    pub address_taken: bool,
    pub role: FunctionRole,
    /// Offset of `F_entry` when the function carries a SID-checked prologue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sid: Option<u32>,
}

impl FunctionInfo {
    pub fn is_global(&self) -> bool {
        self.linkage == Linkage::Global
    }
}

/// One `.plt.nopout` note entry: a function whose landing pad may be elided
/// when nothing links with it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NopoutEntry {
    pub symbol: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub id: usize,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sid: Option<u32>,
    pub functions: Vec<String>,
    pub imports: Vec<String>,
    pub callsites: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub format: String,
    pub name: String,
    pub variant: IrmVariant,
    pub plt: PltFormat,
    pub ibt: bool,
    pub relro_full: bool,
    pub sid_reg: RegisterId,
    pub resolver_sid: u32,
    /// Mapped size, a multiple of the page size.
    pub size: u64,
    pub sections: BTreeMap<String, Section>,
    pub symbols: BTreeMap<String, SymbolDef>,
    pub exports: BTreeMap<String, Export>,
    pub imports: Vec<ImportSlot>,
    pub sid_of_import: BTreeMap<String, u32>,
    pub data: Vec<DataImage>,
    pub functions: Vec<FunctionInfo>,
    pub nopout: Vec<NopoutEntry>,
    pub classes: Vec<ClassSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_report: Option<SizeReport>,
}

impl Image {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    /// Items of a section (empty when absent).
    pub fn items(&self, name: &str) -> &[Item] {
        self.sections.get(name).map_or(&[], |s| s.items.as_slice())
    }

    pub fn function(&self, name: &str) -> Option<&FunctionInfo> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn import(&self, name: &str) -> Option<&ImportSlot> {
        self.imports.iter().find(|i| i.symbol == name)
    }

    pub fn data_object(&self, name: &str) -> Option<&DataImage> {
        self.data.iter().find(|d| d.name == name)
    }

    pub fn got_offset(&self, slot: u32) -> u64 {
        self.sections.get(GOT).map_or(0, |s| s.offset) + 8 * u64::from(slot)
    }

    pub fn got_slots(&self) -> u32 {
        self.sections.get(GOT).map_or(0, |s| (s.size / 8) as u32)
    }

    /// Section and index of the item starting exactly at `offset`.
    pub fn item_at(&self, offset: u64) -> Option<(&str, usize)> {
        self.sections
            .iter()
            .find_map(|(name, s)| s.items.binary_search_by_key(&offset, |i| i.offset).ok().map(|i| (name.as_str(), i)))
    }

    /// Bytes of every PLT-family item.
    pub fn plt_bytes(&self) -> u64 {
        PLT_FAMILY.iter().flat_map(|s| self.items(s)).map(Item::size).sum()
    }

    /// Pristine `.text` bytes as they appear in the file.
    pub fn text_bytes(&self) -> Vec<u8> {
        let Some(text) = self.sections.get(TEXT) else { return Vec::new() };
        let mut out = vec![FILL_BYTE; text.size as usize];
        for item in &text.items {
            let start = (item.offset - text.offset) as usize;
            let bytes = encode(&item.instr);
            out[start..start + bytes.len()].copy_from_slice(&bytes);
        }
        out
    }

    /// Nearest function or PLT slot at or before `offset`, as `name+off`.
    pub fn symbolize(&self, offset: u64) -> String {
        self.symbols
            .iter()
            .filter(|(_, d)| {
                matches!(d.kind, ImageSymbolKind::Function | ImageSymbolKind::PltSlot) && d.offset <= offset
            })
            .max_by_key(|(_, d)| (d.offset, d.kind == ImageSymbolKind::Function))
            .map_or_else(|| format!("{offset:#x}"), |(n, d)| format!("{n}+{}", offset - d.offset))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("images serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// How an instrumented program is turned into an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkConfig {
    pub variant: IrmVariant,
    pub plt: PltFormat,
    pub sid_reg: RegisterId,
}

struct Builder {
    sections: BTreeMap<String, Section>,
    symbols: BTreeMap<String, SymbolDef>,
}

impl Builder {
    fn define(&mut self, name: String, section: &str, offset: u64, kind: ImageSymbolKind, global: bool) {
        self.symbols.insert(name, SymbolDef { section: section.to_string(), offset, kind, global });
    }

    fn slot(
        &mut self,
        section: &str,
        symbol: String,
        cursor: &mut u64,
        capacity: u64,
        body: Vec<(Instruction, Option<Target>, Option<u32>)>,
    ) -> Result<u64, LinkError> {
        let start = *cursor;
        let used: u64 = body.iter().map(|(i, _, _)| u64::from(i.size())).sum();
        if used > capacity {
            return Err(LinkError::SlotOverflow { section: section.to_string(), symbol, bytes: used });
        }
        let sec =
            self.sections.entry(section.to_string()).or_insert_with(|| Section { offset: start, ..Default::default() });
        let mut at = start;
        for (instr, target, got_slot) in body {
            let size = u64::from(instr.size());
            sec.items.push(Item { offset: at, instr, target, got_slot });
            at += size;
        }
        let mut pad = capacity - used;
        while pad > 0 {
            let w = pad.min(9);
            sec.items.push(Item {
                offset: at,
                instr: Instruction::Nop { width: w as u8 },
                target: None,
                got_slot: None,
            });
            at += w;
            pad -= w;
        }
        sec.size = at - sec.offset;
        *cursor = at;
        self.define(symbol, section, start, ImageSymbolKind::PltSlot, false);
        Ok(start)
    }
}

/// Lays out `p` (already instrumented per `cfg.variant`) as an image.
pub fn link_image(p: &Program, a: &SidAssignment, cfg: &LinkConfig) -> Result<Image, LinkError> {
    let fine_plt = matches!(cfg.plt, PltFormat::FineIbtPlt | PltFormat::CompactPlt);
    if cfg.variant.is_fineibt() != fine_plt {
        return Err(LinkError::IncompatiblePlt { variant: cfg.variant, plt: cfg.plt });
    }
    if cfg.plt == PltFormat::CompactPlt && !p.relro_full() {
        return Err(LinkError::RelroRequired);
    }
    let sid32 = Reg::r32(cfg.sid_reg);
    let sid64 = Reg::r64(cfg.sid_reg);
    let taken = p.address_taken_symbols();
    let mut b = Builder { sections: BTreeMap::new(), symbols: BTreeMap::new() };

    // .text
    let mut cursor = 0u64;
    let mut functions = Vec::new();
    let mut labels: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut text = Section::default();
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        cursor = align_up(cursor, u64::from(f.align.max(1)));
        let start = cursor;
        b.define(f.name.clone(), TEXT, start, ImageSymbolKind::Function, f.linkage == Linkage::Global);
        let alias = f.entry_alias();
        let mut entry = None;
        for s in &f.body {
            match s {
                Stmt::Label(l) => {
                    labels.insert((f.name.clone(), l.clone()), cursor);
                    b.define(format!("{}:{l}", f.name), TEXT, cursor, ImageSymbolKind::Label, false);
                    if alias.as_deref() == Some(l.as_str()) {
                        entry = Some(cursor);
                        b.define(l.clone(), TEXT, cursor, ImageSymbolKind::EntryAlias, f.linkage == Linkage::Global);
                    }
                }
                Stmt::Instr(ins) => {
                    text.items.push(Item { offset: cursor, instr: ins.clone(), target: None, got_slot: None });
                    pending.push((fi, text.items.len() - 1));
                    cursor += u64::from(ins.size());
                }
            }
        }
        let role = if is_coldpath(f) {
            FunctionRole::Coldpath
        } else if is_cfi_slot(p, f) {
            FunctionRole::CfiSlot
        } else {
            FunctionRole::Normal
        };
        functions.push(FunctionInfo {
            name: f.name.clone(),
            offset: start,
            size: cursor - start,
            linkage: f.linkage,
            address_taken: f.address_taken,
            role,
            entry,
            sid: entry.and_then(|_| a.sid_of_symbol(&f.name)),
        });
    }
    text.size = cursor;
    let text_end = cursor;

    // PLT family
    let imports: Vec<_> = p.imports.iter().filter(|i| Intrinsic::from_symbol(&i.name).is_none()).collect();
    let mut slots = Vec::new();
    let mut sid_of_import = BTreeMap::new();
    cursor = align_up(text_end, SLOT_BYTES);
    if !imports.is_empty() {
        let plt0 = cursor;
        match cfg.plt {
            PltFormat::IbtPlt => {
                b.slot(
                    PLT,
                    "PLT0".into(),
                    &mut cursor,
                    SLOT_BYTES,
                    vec![
                        (Instruction::PushGotSlot { index: 1 }, None, Some(1)),
                        (Instruction::IndirectJmpGot { slot: GotRef::Slot(2), notrack: false }, None, Some(2)),
                    ],
                )?;
            }
            PltFormat::FineIbtPlt => {
                b.slot(
                    PLT,
                    "PLT0".into(),
                    &mut cursor,
                    2 * SLOT_BYTES,
                    vec![
                        (Instruction::Shl { dst: sid64, amount: 0x20 }, None, None),
                        (Instruction::Or64Imm { dst: sid64, imm: u64::from(RESOLVER_SID) }, None, None),
                        (Instruction::PushGotSlot { index: 1 }, None, Some(1)),
                        (Instruction::IndirectJmpGot { slot: GotRef::Slot(2), notrack: false }, None, Some(2)),
                    ],
                )?;
            }
            PltFormat::CompactPlt => {}
        }
        let mut plt_entries = Vec::new();
        for (k, imp) in imports.iter().enumerate() {
            let sid = if fine_plt {
                let sid = a.sid_of_symbol(&imp.name).ok_or_else(|| LinkError::MissingSid(imp.name.clone()))?;
                sid_of_import.insert(imp.name.clone(), sid);
                Some(sid)
            } else {
                None
            };
            let reloc = k as u32;
            let entry = match (cfg.plt, sid) {
                (PltFormat::IbtPlt, _) => Some(b.slot(
                    PLT,
                    format!("{}@PLT", imp.name),
                    &mut cursor,
                    SLOT_BYTES,
                    vec![
                        (Instruction::Endbr64, None, None),
                        (Instruction::PushImm { imm: reloc }, None, None),
                        (Instruction::Jmp { target: "PLT0".into() }, Some(Target::Text(plt0)), None),
                    ],
                )?),
                (PltFormat::FineIbtPlt, Some(sid)) => Some(b.slot(
                    PLT,
                    format!("{}@PLT", imp.name),
                    &mut cursor,
                    SLOT_BYTES,
                    vec![
                        (Instruction::Endbr64, None, None),
                        (Instruction::CmpImm { dst: sid32, imm: sid }, None, None),
                        (Instruction::PushImm { imm: reloc }, None, None),
                        (
                            Instruction::CondBranch { cond: Cond::Eq, target: "PLT0".into() },
                            Some(Target::Text(plt0)),
                            None,
                        ),
                        (Instruction::Hlt, None, None),
                    ],
                )?),
                _ => None,
            };
            plt_entries.push((sid, entry));
        }
        let mut stubs = Vec::new();
        for (k, imp) in imports.iter().enumerate() {
            let got = GOT_FIRST_IMPORT + k as u32;
            let jmp = |notrack| {
                (Instruction::IndirectJmpGot { slot: GotRef::Symbol(imp.name.clone()), notrack }, None, Some(got))
            };
            let stub = match cfg.plt {
                PltFormat::IbtPlt => b.slot(
                    PLT_SEC,
                    format!("{}@SPLT", imp.name),
                    &mut cursor,
                    SLOT_BYTES,
                    vec![(Instruction::Endbr64, None, None), jmp(false)],
                )?,
                PltFormat::FineIbtPlt => b.slot(
                    PLT_FINEIBT,
                    format!("{}@FPLT", imp.name),
                    &mut cursor,
                    SLOT_BYTES,
                    vec![
                        (
                            Instruction::MovImm { dst: sid32, imm: plt_entries[k].0.expect("fine PLT has SIDs") },
                            None,
                            None,
                        ),
                        jmp(false),
                    ],
                )?,
                PltFormat::CompactPlt => {
                    b.slot(PLT_FINEIBT, format!("{}@FPLT", imp.name), &mut cursor, SLOT_BYTES, vec![jmp(true)])?
                }
            };
            stubs.push(stub);
        }
        for (k, imp) in imports.iter().enumerate() {
            let at = taken.contains(&imp.name);
            let address_stub = match (cfg.plt, plt_entries[k].0) {
                (PltFormat::IbtPlt, _) => Some(stubs[k]),
                (_, Some(sid)) if at => Some(b.slot(
                    PLT_ATFINEIBT,
                    format!("{}@ATFPLT", imp.name),
                    &mut cursor,
                    SLOT_BYTES,
                    vec![
                        (Instruction::Endbr64, None, None),
                        (Instruction::SubImm { dst: sid32, imm: sid }, None, None),
                        (
                            Instruction::CondBranch { cond: Cond::Eq, target: format!("{}@FPLT", imp.name) },
                            Some(Target::Text(stubs[k])),
                            None,
                        ),
                        (Instruction::Hlt, None, None),
                    ],
                )?),
                _ => None,
            };
            slots.push(ImportSlot {
                symbol: imp.name.clone(),
                signature: imp.signature.to_string(),
                got_slot: GOT_FIRST_IMPORT + k as u32,
                sid: plt_entries[k].0,
                plt: plt_entries[k].1,
                call_stub: stubs[k],
                address_stub,
                address_taken: at,
            });
        }
    }
    let code_end = cursor;

    // .got and .data start on their own page.
    let got_start = align_up(code_end.max(1), PAGE_SIZE);
    let got_len = if slots.is_empty() { 3 } else { u64::from(GOT_FIRST_IMPORT) + slots.len() as u64 };
    b.sections.insert(GOT.to_string(), Section { offset: got_start, size: 8 * got_len, items: Vec::new() });
    b.define("GOT".to_string(), GOT, got_start, ImageSymbolKind::Got, false);
    cursor = got_start + 8 * got_len;
    let data_start = cursor;
    let mut data_offsets = BTreeMap::new();
    for d in &p.data_objects {
        data_offsets.insert(d.name.clone(), cursor);
        b.define(d.name.clone(), DATA, cursor, ImageSymbolKind::Data, false);
        cursor += 8 * (d.entries.len().max(1) as u64);
    }
    b.sections.insert(DATA.to_string(), Section { offset: data_start, size: cursor - data_start, items: Vec::new() });
    let size = align_up(cursor, PAGE_SIZE);

    // Resolution of symbolic operands.
    let fn_offset: BTreeMap<&str, u64> = functions.iter().map(|f| (f.name.as_str(), f.offset)).collect();
    let alias_offset: BTreeMap<String, u64> =
        functions.iter().filter_map(|f| f.entry.map(|e| (entry_alias(&f.name), e))).collect();
    let slot_of = |name: &str| slots.iter().find(|s| s.symbol == name);
    let stub_name = |name: &str| match cfg.plt {
        PltFormat::IbtPlt => format!("{name}@SPLT"),
        _ => format!("{name}@FPLT"),
    };
    let code_target = |owner: &str, target: &str| -> Option<(Target, Option<String>)> {
        if let Some(off) = labels.get(&(owner.to_string(), target.to_string())) {
            return Some((Target::Text(*off), None));
        }
        if let Some(off) = fn_offset.get(target).or_else(|| alias_offset.get(target)) {
            return Some((Target::Text(*off), None));
        }
        if let Some(s) = slot_of(target) {
            return Some((Target::Text(s.call_stub), Some(stub_name(target))));
        }
        Intrinsic::from_symbol(target).map(|i| (Target::Intrinsic(i), None))
    };
    for (fi, ii) in pending {
        let owner = &p.functions[fi].name;
        let item = &mut text.items[ii];
        let unresolved = |s: &str| LinkError::Unresolved(s.to_string());
        match &mut item.instr {
            Instruction::DirectCall { target }
            | Instruction::Jmp { target }
            | Instruction::CondBranch { target, .. } => {
                let (t, rename) = code_target(owner, target).ok_or_else(|| unresolved(target))?;
                item.target = Some(t);
                if let Some(r) = rename {
                    *target = r;
                }
            }
            Instruction::LoadFnAddr { symbol, .. } => {
                if let Some(off) = fn_offset.get(symbol.as_str()).or_else(|| alias_offset.get(symbol.as_str())) {
                    item.target = Some(Target::Text(*off));
                } else if let Some(s) = slot_of(symbol) {
                    let off = s.address_stub.ok_or_else(|| unresolved(symbol))?;
                    item.target = Some(Target::Text(off));
                    *symbol = match cfg.plt {
                        PltFormat::IbtPlt => format!("{symbol}@SPLT"),
                        _ => format!("{symbol}@ATFPLT"),
                    };
                } else if let Some(off) = data_offsets.get(symbol.as_str()) {
                    item.target = Some(Target::Data(*off));
                } else {
                    return Err(unresolved(symbol));
                }
            }
            Instruction::IndirectJmpGot { slot, .. } => {
                item.got_slot = Some(match slot {
                    GotRef::Slot(i) => *i,
                    GotRef::Symbol(s) => slot_of(s).ok_or_else(|| unresolved(s))?.got_slot,
                });
            }
            Instruction::PushGotSlot { index } => item.got_slot = Some(*index),
            Instruction::LoadData { object, .. }
            | Instruction::StoreData { object, .. }
            | Instruction::SwitchJmp { table: object, .. } => {
                item.target = Some(Target::Data(*data_offsets.get(object.as_str()).ok_or_else(|| unresolved(object))?));
            }
            _ => {}
        }
    }
    b.sections.insert(TEXT.to_string(), text);

    let mut data = Vec::new();
    for d in &p.data_objects {
        let mut entries = Vec::new();
        for e in &d.entries {
            entries.push(match e {
                DataEntry::Value(v) => DataInit::Value(*v),
                DataEntry::Label { function, label } => DataInit::Text(
                    *labels
                        .get(&(function.clone(), label.clone()))
                        .ok_or_else(|| LinkError::Unresolved(e.to_string()))?,
                ),
                DataEntry::Symbol(s) => {
                    if let Some(off) = fn_offset.get(s.as_str()).or_else(|| alias_offset.get(s.as_str())) {
                        DataInit::Text(*off)
                    } else if let Some(off) = slot_of(s).and_then(|sl| sl.address_stub) {
                        DataInit::Text(off)
                    } else {
                        return Err(LinkError::Unresolved(s.clone()));
                    }
                }
            });
        }
        data.push(DataImage {
            name: d.name.clone(),
            kind: d.kind,
            writable: d.writable,
            offset: data_offsets[&d.name],
            entries,
        });
    }

    let mut exports = BTreeMap::new();
    for f in functions.iter().filter(|f| f.is_global()) {
        exports.insert(f.name.clone(), Export { offset: f.offset, entry_alias: false });
        if let Some(e) = f.entry {
            exports.insert(entry_alias(&f.name), Export { offset: e, entry_alias: true });
        }
    }
    let nopout = if cfg.variant.is_fineibt() {
        functions
            .iter()
            .filter(|f| f.is_global() && !f.address_taken && f.entry.is_some())
            .map(|f| NopoutEntry { symbol: f.name.clone(), offset: f.offset })
            .collect()
    } else {
        Vec::new()
    };
    let classes = a
        .classes
        .iter()
        .map(|c| ClassSummary {
            id: c.id,
            key: c.key.clone(),
            sid: a.class_to_sid.get(&c.id).copied(),
            functions: c.functions.iter().cloned().collect(),
            imports: c.imports.iter().cloned().collect(),
            callsites: c.callsites.iter().map(ToString::to_string).collect(),
        })
        .collect();

    Ok(Image {
        format: IMAGE_FORMAT.to_string(),
        name: p.name.clone(),
        variant: cfg.variant,
        plt: cfg.plt,
        ibt: cfg.variant.enables_ibt(),
        relro_full: p.relro_full(),
        sid_reg: cfg.sid_reg,
        resolver_sid: RESOLVER_SID,
        size,
        sections: b.sections,
        symbols: b.symbols,
        exports,
        imports: slots,
        sid_of_import,
        data,
        functions,
        nopout,
        classes,
        size_report: None,
    })
}

/// Landing-pad counts of one image or address space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCensus {
    pub endbr_in_text: u64,
    pub endbr_in_plt_family: u64,
    pub total_landing_pads: u64,
    pub protected_landing_pads: u64,
    pub unchecked_landing_pads: u64,
    /// Clang-CFI trampoline slots (reported apart from landing pads).
    pub cfi_trampoline_slots: u64,
}

impl std::ops::AddAssign for TargetCensus {
    fn add_assign(&mut self, o: Self) {
        self.endbr_in_text += o.endbr_in_text;
        self.endbr_in_plt_family += o.endbr_in_plt_family;
        self.total_landing_pads += o.total_landing_pads;
        self.protected_landing_pads += o.protected_landing_pads;
        self.unchecked_landing_pads += o.unchecked_landing_pads;
        self.cfi_trampoline_slots += o.cfi_trampoline_slots;
    }
}

/// Census of a pristine image.
pub fn census(img: &Image) -> TargetCensus {
    census_with(img, &BTreeSet::new())
}

/// Census of an image whose landing pads at `elided` text offsets have been
/// replaced by `nop`s.
pub fn census_with(img: &Image, elided: &BTreeSet<u64>) -> TargetCensus {
    let mut c = TargetCensus::default();
    let checks_sid = |i: &Instruction| matches!(i, Instruction::SubImm { dst, .. } | Instruction::CmpImm { dst, .. } if dst.id == img.sid_reg);
    for (name, sec) in &img.sections {
        let in_plt = PLT_FAMILY.contains(&name.as_str());
        if name != TEXT && !in_plt {
            continue;
        }
        for (i, item) in sec.items.iter().enumerate() {
            if item.instr != Instruction::Endbr64 || (name == TEXT && elided.contains(&item.offset)) {
                continue;
            }
            if in_plt {
                c.endbr_in_plt_family += 1;
            } else {
                c.endbr_in_text += 1;
            }
            if sec.items.get(i + 1).is_some_and(|n| checks_sid(&n.instr)) {
                c.protected_landing_pads += 1;
            } else {
                c.unchecked_landing_pads += 1;
            }
        }
    }
    c.total_landing_pads = c.endbr_in_text + c.endbr_in_plt_family;
    c.cfi_trampoline_slots = img.functions.iter().filter(|f| f.role == FunctionRole::CfiSlot).count() as u64;
    c
}

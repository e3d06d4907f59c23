//! Address spaces: image placement, GOT binding, load-time `endbr64` elision
//! (NOPout) and its reversal on `dlopen`/`dlsym`.
//!
//! Live `.text` is the pristine item list plus a per-image overlay of
//! rewritten instructions. Restoring a landing pad copies the live page,
//! patches the copy, checks it against both the live page and the pristine
//! file bytes, and only then swaps it in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{encode, entry_alias, Instruction, ENDBR64_BYTES, NOP4_BYTES};
use crate::linkage::{align_up, census, census_with, Image, PltFormat, TargetCensus, PAGE_SIZE, TEXT};
use crate::machine::{Intrinsic, INTRINSIC_BASE};

pub const SPACE_FORMAT: &str = "fineibt-space/1";
/// Lowest possible image base.
pub const LOAD_BASE: u64 = 0x40_0000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    #[default]
    Eager,
    Lazy,
}

impl FromStr for Binding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eager" => Ok(Binding::Eager),
            "lazy" => Ok(Binding::Lazy),
            other => Err(format!("unknown binding mode `{other}`")),
        }
    }
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Binding::Eager => "eager",
            Binding::Lazy => "lazy",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoaderError {
    #[error("`{image}` imports `{symbol}`, which no loaded image exports")]
    UndefinedSymbol { image: String, symbol: String },
    #[error("no loaded image named `{0}`")]
    UnknownImage(String),
    #[error("no loaded image exports `{0}`")]
    UnknownSymbol(String),
    #[error("page {page:#x} of `{image}` differs from the expected bytes; `{symbol}` left untouched")]
    TamperDetected { image: String, symbol: String, page: u64 },
    #[error("`{0}` is not writable")]
    NotWritable(String),
    #[error("no item starts at offset {offset:#x} of `{image}`")]
    NoItem { image: String, offset: u64 },
    #[error("replacement for {offset:#x} in `{image}` must be {expected} bytes")]
    SizeMismatch { image: String, offset: u64, expected: u32 },
    #[error("address space exhausted below the intrinsic region")]
    BaseExhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageState {
    /// Private copy holding elided landing pads; the value counts copies made.
    Patched(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCells {
    pub writable: bool,
    pub values: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedImage {
    pub image: Image,
    pub base: u64,
    pub got: Vec<u64>,
    pub got_writable: bool,
    pub data: BTreeMap<String, DataCells>,
    /// Text offsets whose `endbr64` is currently a 4-byte `nop`.
    pub elided: BTreeSet<u64>,
    /// Live instructions that differ from the pristine items.
    pub overlay: BTreeMap<u64, Instruction>,
    pub pages: BTreeMap<u64, PageState>,
}

impl LoadedImage {
    pub fn name(&self) -> &str {
        &self.image.name
    }

    pub fn end(&self) -> u64 {
        self.base + self.image.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.base..self.end()).contains(&addr)
    }

    /// Live instruction starting at image offset `off`.
    pub fn instr_at(&self, off: u64) -> Option<(&str, usize, Instruction)> {
        let (section, idx) = self.image.item_at(off)?;
        let item = &self.image.sections[section].items[idx];
        let live = if section == TEXT { self.overlay.get(&off) } else { None };
        Some((section, idx, live.unwrap_or(&item.instr).clone()))
    }

    /// Live `.text` bytes.
    pub fn text_bytes(&self) -> Vec<u8> {
        let mut bytes = self.image.text_bytes();
        let start = self.image.section(TEXT).map_or(0, |s| s.offset);
        for (off, instr) in &self.overlay {
            let enc = encode(instr);
            let at = (off - start) as usize;
            bytes[at..at + enc.len()].copy_from_slice(&enc);
        }
        bytes
    }

    /// Absolute address of export `symbol`.
    pub fn export(&self, symbol: &str) -> Option<u64> {
        self.image.exports.get(symbol).map(|e| self.base + e.offset)
    }

    fn got_index_of(&self, addr: u64) -> Option<u64> {
        addr.checked_sub(self.base + self.image.got_offset(0)).filter(|d| d % 8 == 0).map(|d| d / 8)
    }

    /// GOT slot at absolute address `addr`.
    pub fn got_slot_at(&self, addr: u64) -> Option<u32> {
        self.got_index_of(addr).filter(|i| *i < self.got.len() as u64).map(|i| i as u32)
    }
}

/// A load-time event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LoadEvent {
    Loaded { image: String, base: u64 },
    Bound { image: String, symbol: String, address: u64 },
    Elided { image: String, symbol: String, offset: u64 },
    Restored { image: String, symbol: String, offset: u64 },
    Warning { message: String },
}

impl fmt::Display for LoadEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadEvent::Loaded { image, base } => write!(f, "loaded {image} at {base:#x}"),
            LoadEvent::Bound { image, symbol, address } => write!(f, "bound {image}:{symbol} -> {address:#x}"),
            LoadEvent::Elided { image, symbol, offset } => write!(f, "elided {image}:{symbol} at +{offset:#x}"),
            LoadEvent::Restored { image, symbol, offset } => write!(f, "restored {image}:{symbol} at +{offset:#x}"),
            LoadEvent::Warning { message } => write!(f, "warning: {message}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub binding: Binding,
    pub nopout: bool,
    pub base_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { binding: Binding::Eager, nopout: false, base_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressSpace {
    pub format: String,
    pub options: LoadOptions,
    pub images: Vec<LoadedImage>,
    pub log: Vec<LoadEvent>,
}

/// Page-copy hook run between patching a copy and verifying it.
pub type PageHook<'a> = &'a mut dyn FnMut(u64, &mut [u8]);

impl AddressSpace {
    pub fn new(options: LoadOptions) -> Self {
        AddressSpace { format: SPACE_FORMAT.to_string(), options, images: Vec::new(), log: Vec::new() }
    }

    /// IBT is enforced only when every image opted in.
    pub fn ibt_enabled(&self) -> bool {
        !self.images.is_empty() && self.images.iter().all(|i| i.image.ibt)
    }

    pub fn image_index(&self, name: &str) -> Option<usize> {
        self.images.iter().position(|i| i.name() == name)
    }

    pub fn image(&self, name: &str) -> Option<&LoadedImage> {
        self.images.iter().find(|i| i.name() == name)
    }

    /// Image containing absolute address `addr`.
    pub fn image_at(&self, addr: u64) -> Option<usize> {
        self.images.iter().position(|i| i.contains(addr))
    }

    /// First image in load order exporting `symbol`, with its address.
    pub fn lookup(&self, symbol: &str) -> Option<(usize, u64)> {
        self.images.iter().enumerate().find_map(|(i, img)| img.export(symbol).map(|a| (i, a)))
    }

    /// `image:symbol+off` for an absolute address.
    pub fn symbolize(&self, addr: u64) -> String {
        if let Some(i) = Intrinsic::from_address(addr) {
            return format!("<intrinsic>:{}", i.symbol());
        }
        match self.image_at(addr) {
            Some(i) => {
                let img = &self.images[i];
                format!("{}:{}", img.name(), img.image.symbolize(addr - img.base))
            }
            None => format!("{addr:#x}"),
        }
    }

    fn next_base(&self) -> Result<u64, LoaderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.base_seed);
        let mut base = LOAD_BASE + rng.gen_range(0..64u64) * 0x1_0000;
        for img in &self.images {
            base = align_up(img.end(), PAGE_SIZE) + rng.gen_range(1..16u64) * 0x1000;
        }
        Ok(base)
    }

    fn binding_for(&self, img: &Image) -> Binding {
        if img.relro_full || img.plt == PltFormat::CompactPlt {
            Binding::Eager
        } else {
            self.options.binding
        }
    }

    /// Address an import of `img` binds to: `F_entry` for the compact PLT.
    fn bind_target(&self, img: &Image, symbol: &str) -> Option<u64> {
        if img.plt == PltFormat::CompactPlt {
            if let Some((_, a)) = self.lookup(&entry_alias(symbol)) {
                return Some(a);
            }
        }
        self.lookup(symbol).map(|(_, a)| a)
    }

    fn map(&mut self, image: Image) -> Result<usize, LoaderError> {
        let base = self.next_base()?;
        if base + image.size > INTRINSIC_BASE {
            return Err(LoaderError::BaseExhausted);
        }
        let data = image
            .data
            .iter()
            .map(|d| {
                let values = d
                    .entries
                    .iter()
                    .map(|e| match e {
                        crate::linkage::DataInit::Text(off) => base + off,
                        crate::linkage::DataInit::Value(v) => *v,
                    })
                    .collect();
                (d.name.clone(), DataCells { writable: d.writable, values })
            })
            .collect();
        let idx = self.images.len();
        let mut got = vec![0u64; image.got_slots() as usize];
        if got.len() >= 3 {
            got[1] = idx as u64;
            got[2] = Intrinsic::Resolver.address();
        }
        self.log.push(LoadEvent::Loaded { image: image.name.clone(), base });
        self.images.push(LoadedImage {
            image,
            base,
            got,
            got_writable: true,
            data,
            elided: BTreeSet::new(),
            overlay: BTreeMap::new(),
            pages: BTreeMap::new(),
        });
        Ok(idx)
    }

    fn bind(&mut self, idx: usize) -> Result<(), LoaderError> {
        let img = &self.images[idx];
        let binding = self.binding_for(&img.image);
        let mut writes = Vec::new();
        for slot in &img.image.imports {
            let value = match binding {
                Binding::Eager => self.bind_target(&img.image, &slot.symbol).ok_or_else(|| {
                    LoaderError::UndefinedSymbol { image: img.name().to_string(), symbol: slot.symbol.clone() }
                })?,
                // Unresolved slots point back at the lazy PLT entry.
                Binding::Lazy => img.base + slot.plt.unwrap_or(slot.call_stub),
            };
            writes.push((slot.got_slot, slot.symbol.clone(), value, binding == Binding::Eager));
        }
        let relro = img.image.relro_full;
        let name = img.name().to_string();
        let img = &mut self.images[idx];
        for (slot, symbol, value, eager) in writes {
            img.got[slot as usize] = value;
            if eager {
                self.log.push(LoadEvent::Bound { image: name.clone(), symbol, address: value });
            }
        }
        img.got_writable = !relro;
        Ok(())
    }

    /// Whether any GOT slot in the space points at absolute address `addr`.
    pub fn is_linked(&self, addr: u64) -> bool {
        self.images.iter().any(|i| i.got.iter().skip(3).any(|v| *v == addr))
    }

    fn nopout_scan(&mut self, idx: usize) {
        if !self.options.nopout || !self.images[idx].image.variant.is_fineibt() {
            return;
        }
        if self.binding_for(&self.images[idx].image) == Binding::Lazy {
            let message = format!("{}: lazy binding, landing-pad elision skipped", self.images[idx].name());
            self.log.push(LoadEvent::Warning { message });
            return;
        }
        let notes = self.images[idx].image.nopout.clone();
        for n in notes {
            let img = &self.images[idx];
            if img.elided.contains(&n.offset) || self.is_linked(img.base + n.offset) {
                continue;
            }
            let image = img.name().to_string();
            let img = &mut self.images[idx];
            img.overlay.insert(n.offset, Instruction::Nop { width: 4 });
            img.elided.insert(n.offset);
            let page = n.offset / PAGE_SIZE;
            let copies = match img.pages.get(&page) {
                Some(PageState::Patched(c)) => *c,
                None => 1,
            };
            img.pages.insert(page, PageState::Patched(copies));
            self.log.push(LoadEvent::Elided { image, symbol: n.symbol, offset: n.offset });
        }
    }

    /// Maps `images` in order, binds them, then elides unlinked landing pads.
    pub fn load(images: Vec<Image>, options: LoadOptions) -> Result<Self, LoaderError> {
        let mut space = AddressSpace::new(options);
        let mut seen = BTreeSet::new();
        for img in images {
            if seen.insert(img.name.clone()) {
                space.map(img)?;
            }
        }
        for i in 0..space.images.len() {
            space.bind(i)?;
        }
        for i in 0..space.images.len() {
            space.nopout_scan(i);
        }
        Ok(space)
    }

    /// Loads one more image. Loading a name twice returns the first mapping.
    pub fn dlopen(&mut self, image: Image) -> Result<usize, LoaderError> {
        if let Some(i) = self.image_index(&image.name) {
            return Ok(i);
        }
        let idx = self.map(image)?;
        if let Err(e) = self.bind(idx) {
            self.images.pop();
            return Err(e);
        }
        let linked: Vec<u64> = self.images[idx].got.iter().skip(3).copied().collect();
        for addr in linked {
            if let Some(owner) = self.image_at(addr) {
                let img = &self.images[owner];
                let off = addr - img.base;
                if img.elided.contains(&off) {
                    let symbol = img.image.symbolize(off);
                    let symbol = symbol.split('+').next().unwrap_or_default().to_string();
                    self.restore_endbr(owner, &symbol, &mut |_, _| {})?;
                }
            }
        }
        self.nopout_scan(idx);
        Ok(idx)
    }

    /// Address of exported `symbol`, restoring its landing pad if elided.
    pub fn dlsym(&mut self, symbol: &str) -> Result<u64, LoaderError> {
        let (owner, addr) = self.lookup(symbol).ok_or_else(|| LoaderError::UnknownSymbol(symbol.to_string()))?;
        if self.images[owner].elided.contains(&(addr - self.images[owner].base)) {
            self.restore_endbr(owner, symbol, &mut |_, _| {})?;
        }
        Ok(addr)
    }

    /// Puts `endbr64` back at function `symbol` of image `idx` through a
    /// verified page copy. A no-op when the pad is not elided.
    pub fn restore_endbr(&mut self, idx: usize, symbol: &str, hook: PageHook<'_>) -> Result<(), LoaderError> {
        let img = &self.images[idx];
        let Some(f) = img.image.function(symbol) else {
            return Err(LoaderError::UnknownSymbol(symbol.to_string()));
        };
        let off = f.offset;
        if !img.elided.contains(&off) {
            return Ok(());
        }
        let text_start = img.image.section(TEXT).map_or(0, |s| s.offset);
        let page = off / PAGE_SIZE;
        let lo = (page * PAGE_SIZE).max(text_start);
        let hi = ((page + 1) * PAGE_SIZE).min(text_start + img.image.section(TEXT).map_or(0, |s| s.size));
        let (a, b) = ((lo - text_start) as usize, (hi - text_start) as usize);
        let live_text = img.text_bytes();
        let pristine_text = img.image.text_bytes();
        let live = &live_text[a..b];
        let pristine = &pristine_text[a..b];
        let mut copy = live.to_vec();
        let at = (off - lo) as usize;
        copy[at..at + 4].copy_from_slice(&ENDBR64_BYTES);
        hook(lo, &mut copy);

        let tamper = || LoaderError::TamperDetected {
            image: img.name().to_string(),
            symbol: symbol.to_string(),
            page: img.base + page * PAGE_SIZE,
        };
        // Copy versus live: only the restored pad may differ.
        for (i, (c, l)) in copy.iter().zip(live).enumerate() {
            if c != l && !(i >= at && i < at + 4 && *l == NOP4_BYTES[i - at] && *c == ENDBR64_BYTES[i - at]) {
                return Err(tamper());
            }
        }
        // Copy versus file: only still-elided pads may differ.
        let elided_here: Vec<usize> =
            img.elided.iter().filter(|o| **o != off && (lo..hi).contains(*o)).map(|o| (o - lo) as usize).collect();
        for (i, (c, p)) in copy.iter().zip(pristine).enumerate() {
            if c == p {
                continue;
            }
            let ok = elided_here
                .iter()
                .any(|&e| i >= e && i < e + 4 && *p == ENDBR64_BYTES[i - e] && *c == NOP4_BYTES[i - e]);
            if !ok {
                return Err(tamper());
            }
        }

        let name = img.name().to_string();
        let img = &mut self.images[idx];
        img.elided.remove(&off);
        img.overlay.remove(&off);
        if img.elided.iter().all(|o| o / PAGE_SIZE != page) {
            img.pages.remove(&page);
        } else if let Some(PageState::Patched(c)) = img.pages.get_mut(&page) {
            *c += 1;
        }
        self.log.push(LoadEvent::Restored { image: name, symbol: symbol.to_string(), offset: off });
        Ok(())
    }

    /// Overwrites the live instruction at `offset` of image `idx` without any
    /// checks, as an attacker or a buggy patcher would.
    pub fn tamper_text(&mut self, idx: usize, offset: u64, instr: Instruction) -> Result<(), LoaderError> {
        let img = &mut self.images[idx];
        let name = img.name().to_string();
        let (section, i) = img.image.item_at(offset).ok_or(LoaderError::NoItem { image: name.clone(), offset })?;
        let expected = img.image.sections[section].items[i].instr.size();
        if section != TEXT {
            return Err(LoaderError::NotWritable(format!("{name}:{section}")));
        }
        if instr.size() != expected {
            return Err(LoaderError::SizeMismatch { image: name, offset, expected });
        }
        img.overlay.insert(offset, instr);
        Ok(())
    }

    /// Number of private text page copies currently mapped.
    pub fn cow_pages(&self) -> usize {
        self.images.iter().map(|i| i.pages.len()).sum()
    }

    pub fn nopout_stats(&self) -> NopoutStats {
        let mut s = NopoutStats::default();
        for img in &self.images {
            s.noted += img.image.nopout.len();
            s.elided += img.elided.len();
            s.before += census(&img.image);
            s.after += census_with(&img.image, &img.elided);
        }
        s.restored = self.log.iter().filter(|e| matches!(e, LoadEvent::Restored { .. })).count();
        s.cow_pages = self.cow_pages();
        s.cow_kb = s.cow_pages as u64 * PAGE_SIZE / 1024;
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("address spaces serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Effect of landing-pad elision on one address space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NopoutStats {
    pub noted: usize,
    pub elided: usize,
    pub restored: usize,
    pub cow_pages: usize,
    pub cow_kb: u64,
    pub before: TargetCensus,
    pub after: TargetCensus,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, RegisterId};
    use crate::linkage::{link_image, LinkConfig};
    use crate::policy::{assign, PolicyKind, SidOverrides};
    use crate::weave::{instrument, IrmVariant};

    fn image(src: &str, plt: PltFormat) -> Image {
        let p = parse_program(src).unwrap();
        let a = assign(&p, &PolicyKind::TypeStrict, 9, &SidOverrides::new()).unwrap();
        let v = IrmVariant::FineIbtBasic;
        let out = instrument(&p, &a, v, RegisterId::R11).unwrap();
        link_image(&out, &a, &LinkConfig { variant: v, plt, sid_reg: RegisterId::R11 }).unwrap()
    }

    const LIB: &str = "\
.program libm
.func used global (int64) -> int64
    ret
.func unused global (int64) -> int64
    ret
";
    const APP: &str = "\
.program app
.import used (int64) -> int64
.func main global () -> int32
    call used
    halt 0
";

    fn eager_nopout() -> LoadOptions {
        LoadOptions { binding: Binding::Eager, nopout: true, base_seed: 1 }
    }

    #[test]
    fn elides_only_unlinked_globals() {
        let s = AddressSpace::load(
            vec![image(APP, PltFormat::FineIbtPlt), image(LIB, PltFormat::FineIbtPlt)],
            eager_nopout(),
        )
        .unwrap();
        let lib = s.image("libm").unwrap();
        let unused = lib.image.function("unused").unwrap().offset;
        assert_eq!(lib.elided, BTreeSet::from([unused]));
        // app's `main` is linked by nobody either.
        assert_eq!(s.image("app").unwrap().elided.len(), 1);
        assert_eq!(s.cow_pages(), 2);
    }

    #[test]
    fn lazy_binding_skips_elision() {
        let opts = LoadOptions { binding: Binding::Lazy, ..eager_nopout() };
        let s = AddressSpace::load(vec![image(APP, PltFormat::FineIbtPlt), image(LIB, PltFormat::FineIbtPlt)], opts)
            .unwrap();
        assert_eq!(s.cow_pages(), 0);
        assert!(s.log.iter().any(|e| matches!(e, LoadEvent::Warning { .. })));
    }

    #[test]
    fn dlsym_restores_and_is_idempotent() {
        let mut s = AddressSpace::load(vec![image(LIB, PltFormat::FineIbtPlt)], eager_nopout()).unwrap();
        let addr = s.dlsym("unused").unwrap();
        let lib = &s.images[0];
        let (_, _, live) = lib.instr_at(addr - lib.base).unwrap();
        assert_eq!(live, Instruction::Endbr64);
        assert_eq!(s.dlsym("unused").unwrap(), addr);
        assert_eq!(s.nopout_stats().restored, 1);
    }

    #[test]
    fn tampered_page_is_not_restored() {
        let mut s = AddressSpace::load(vec![image(LIB, PltFormat::FineIbtPlt)], eager_nopout()).unwrap();
        let used = s.images[0].image.function("used").unwrap().offset;
        let unused = s.images[0].image.function("unused").unwrap().offset;
        s.tamper_text(0, used + 4 + 5 + 2, Instruction::Int3).unwrap();
        let before = s.images[0].clone();
        let err = s.restore_endbr(0, "unused", &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, LoaderError::TamperDetected { .. }));
        assert_eq!(s.images[0], before);
        assert!(s.images[0].elided.contains(&unused));
    }

    #[test]
    fn faulty_copy_is_rejected() {
        let mut s = AddressSpace::load(vec![image(LIB, PltFormat::FineIbtPlt)], eager_nopout()).unwrap();
        let err = s.restore_endbr(0, "unused", &mut |_, page| page[0] ^= 0xff).unwrap_err();
        assert!(matches!(err, LoaderError::TamperDetected { .. }));
    }

    #[test]
    fn dlopen_restores_newly_linked_pads() {
        let mut s = AddressSpace::load(vec![image(LIB, PltFormat::FineIbtPlt)], eager_nopout()).unwrap();
        assert_eq!(s.images[0].elided.len(), 2);
        let app = APP
            .replace("call used", "call used\n    call unused")
            .replace(".import used (int64) -> int64", ".import used (int64) -> int64\n.import unused (int64) -> int64");
        s.dlopen(image(&app, PltFormat::FineIbtPlt)).unwrap();
        assert!(s.images[0].elided.is_empty());
        assert_eq!(s.dlopen(image(&app, PltFormat::FineIbtPlt)).unwrap(), 1);
        let back = AddressSpace::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bases_are_deterministic_and_disjoint() {
        let imgs = || vec![image(APP, PltFormat::FineIbtPlt), image(LIB, PltFormat::FineIbtPlt)];
        let a = AddressSpace::load(imgs(), eager_nopout()).unwrap();
        let b = AddressSpace::load(imgs(), eager_nopout()).unwrap();
        assert_eq!(a.images[1].base, b.images[1].base);
        assert!(a.images[0].end() <= a.images[1].base);
        assert_eq!(a.images[0].base % 0x1_0000, 0);
    }
}

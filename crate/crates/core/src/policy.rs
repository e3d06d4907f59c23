//! Equivalence classes over protected functions, imports and indirect
//! callsites, and the 32-bit SIDs that name them.
//!
//! Class keys are plain strings derived from the policy (`arity:2`,
//! `type:(int64) -> int64`, ...). SIDs are drawn from a PRNG seeded with the
//! run seed and the class key, so two independently built DSOs that agree on
//! a key also agree on its SID.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::{size::ENDBR32_BYTES, Function, Program, ENDBR64_BYTES};

/// SID whose little-endian image is the `endbr64` opcode.
pub const ENDBR64_SID: u32 = u32::from_le_bytes(ENDBR64_BYTES);
/// SID whose little-endian image is the `endbr32` opcode.
pub const ENDBR32_SID: u32 = u32::from_le_bytes(ENDBR32_BYTES);
/// SID checked by the lazy-binding resolver entry. Bit 31 is clear so the
/// sign-extended `or $imm32` in PLT0 leaves the upper half intact.
pub const RESOLVER_SID: u32 = 0x1d1a_b0bd;
/// Values never handed out to a class.
pub const RESERVED_SIDS: [u32; 4] = [0, ENDBR64_SID, ENDBR32_SID, RESOLVER_SID];

pub fn is_reserved_sid(sid: u32) -> bool {
    RESERVED_SIDS.contains(&sid)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("indirect callsite {0} is not covered by any MLTA pair")]
    UncoveredCallsite(CallsiteId),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("indirect callsite {0} has no signature annotation (required by the {1} policy)")]
    MissingSignature(CallsiteId, &'static str),
    #[error("conflicting SID overrides: {0}")]
    OverrideConflict(String),
    #[error("SID {0:#010x} is reserved")]
    ReservedSid(u32),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// An indirect call/jmp site: the `index`-th indirect site of `function`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallsiteId {
    pub function: String,
    pub index: usize,
}

impl CallsiteId {
    pub fn new(function: impl Into<String>, index: usize) -> Self {
        CallsiteId { function: function.into(), index }
    }

    /// Parses the `function#index` form.
    pub fn parse(text: &str) -> Option<Self> {
        let (f, i) = text.rsplit_once('#')?;
        Some(CallsiteId::new(f, i.parse().ok()?))
    }
}

impl fmt::Display for CallsiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.function, self.index)
    }
}

/// Allowed (caller, callsite index, callee) triples from an MLTA analysis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MltaPairs {
    pub allowed: BTreeSet<(String, usize, String)>,
}

impl MltaPairs {
    /// Parses `caller <tab> index <tab> callee` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut allowed = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| PolicyError::Parse { line: i + 1, msg: msg.to_string() };
            let [caller, index, callee] = parts[..] else {
                return Err(err("expected `caller<TAB>callsite_index<TAB>callee`"));
            };
            let index = index.parse().map_err(|_| err("callsite index is not a number"))?;
            allowed.insert((caller.to_string(), index, callee.to_string()));
        }
        Ok(MltaPairs { allowed })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    VanillaIbt,
    Arity,
    TypeStrict,
    Mlta(MltaPairs),
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::VanillaIbt => "vanilla",
            PolicyKind::Arity => "arity",
            PolicyKind::TypeStrict => "type",
            PolicyKind::Mlta(_) => "mlta",
        }
    }
}

pub type ClassId = usize;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceClass {
    pub id: ClassId,
    pub key: String,
    pub functions: BTreeSet<String>,
    pub imports: BTreeSet<String>,
    pub callsites: BTreeSet<CallsiteId>,
}

impl EquivalenceClass {
    /// Functions and imports together.
    pub fn targets(&self) -> impl Iterator<Item = &String> {
        self.functions.iter().chain(self.imports.iter())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SidAssignment {
    pub policy: String,
    pub classes: Vec<EquivalenceClass>,
    pub function_to_class: BTreeMap<String, ClassId>,
    pub import_to_class: BTreeMap<String, ClassId>,
    pub callsite_to_class: BTreeMap<CallsiteId, ClassId>,
    pub class_to_sid: BTreeMap<ClassId, u32>,
}

impl SidAssignment {
    /// SID of the class holding function or import `symbol`.
    pub fn sid_of_symbol(&self, symbol: &str) -> Option<u32> {
        let class = self.function_to_class.get(symbol).or_else(|| self.import_to_class.get(symbol))?;
        self.class_to_sid.get(class).copied()
    }

    pub fn sid_of_callsite(&self, site: &CallsiteId) -> Option<u32> {
        self.class_to_sid.get(self.callsite_to_class.get(site)?).copied()
    }

    pub fn class_of_symbol(&self, symbol: &str) -> Option<&EquivalenceClass> {
        let id = self.function_to_class.get(symbol).or_else(|| self.import_to_class.get(symbol))?;
        self.classes.get(*id)
    }

    /// Allocates SIDs for every class, honouring `overrides`.
    pub fn with_sids(mut self, seed: u64, overrides: &SidOverrides) -> Result<Self, PolicyError> {
        self.class_to_sid = allocate_sids(&self.classes, seed, overrides)?;
        Ok(self)
    }
}

/// Functions that receive a landing pad: address-taken or externally visible.
pub fn is_protected(f: &Function) -> bool {
    f.address_taken || f.is_global()
}

fn callsites(p: &Program) -> Vec<(CallsiteId, Option<&crate::ir::Signature>)> {
    let mut out = Vec::new();
    for f in &p.functions {
        for (i, ins) in f.indirect_sites().enumerate() {
            out.push((CallsiteId::new(&f.name, i), ins.site_signature()));
        }
    }
    out
}

fn arity_key(sig: &crate::ir::Signature) -> String {
    if sig.variadic {
        format!("arity:{}+", sig.arity())
    } else {
        format!("arity:{}", sig.arity())
    }
}

fn type_key(sig: &crate::ir::Signature) -> String {
    format!("type:{sig}")
}

#[derive(Default)]
struct Builder {
    by_key: BTreeMap<String, EquivalenceClass>,
}

impl Builder {
    fn class(&mut self, key: &str) -> &mut EquivalenceClass {
        self.by_key
            .entry(key.to_string())
            .or_insert_with(|| EquivalenceClass { key: key.to_string(), ..Default::default() })
    }

    fn finish(self, policy: &str) -> SidAssignment {
        let mut a = SidAssignment { policy: policy.to_string(), ..Default::default() };
        for (id, (_, mut class)) in self.by_key.into_iter().enumerate() {
            class.id = id;
            for f in &class.functions {
                a.function_to_class.insert(f.clone(), id);
            }
            for i in &class.imports {
                a.import_to_class.insert(i.clone(), id);
            }
            for c in &class.callsites {
                a.callsite_to_class.insert(c.clone(), id);
            }
            a.classes.push(class);
        }
        a
    }
}

/// Partitions protected functions, imports and indirect callsites of `p`
/// under `kind`. The result carries no SIDs yet; see
/// [`SidAssignment::with_sids`].
pub fn build_classes(p: &Program, kind: &PolicyKind) -> Result<SidAssignment, PolicyError> {
    let protected: Vec<&Function> = p.functions.iter().filter(|f| is_protected(f)).collect();
    let mut b = Builder::default();
    match kind {
        PolicyKind::VanillaIbt => {
            let sites = callsites(p);
            if !protected.is_empty() || !p.imports.is_empty() || !sites.is_empty() {
                let c = b.class("ibt");
                c.functions.extend(protected.iter().map(|f| f.name.clone()));
                c.imports.extend(p.imports.iter().map(|i| i.name.clone()));
                c.callsites.extend(sites.into_iter().map(|(s, _)| s));
            }
        }
        PolicyKind::Arity | PolicyKind::TypeStrict => {
            let key_of: fn(&crate::ir::Signature) -> String =
                if *kind == PolicyKind::Arity { arity_key } else { type_key };
            for f in &protected {
                b.class(&key_of(&f.signature)).functions.insert(f.name.clone());
            }
            for i in &p.imports {
                b.class(&key_of(&i.signature)).imports.insert(i.name.clone());
            }
            for (site, sig) in callsites(p) {
                let sig = sig.ok_or_else(|| PolicyError::MissingSignature(site.clone(), kind.name()))?;
                b.class(&key_of(sig)).callsites.insert(site);
            }
        }
        PolicyKind::Mlta(pairs) => return mlta_classes(p, &protected, pairs),
    }
    Ok(b.finish(kind.name()))
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    let mut cur = x;
    while parent[cur] != root {
        let next = parent[cur];
        parent[cur] = root;
        cur = next;
    }
    root
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Site(CallsiteId),
    Target(String),
}

fn mlta_classes(p: &Program, protected: &[&Function], pairs: &MltaPairs) -> Result<SidAssignment, PolicyError> {
    let sites = callsites(p);
    let site_set: BTreeSet<&CallsiteId> = sites.iter().map(|(s, _)| s).collect();
    let mut nodes: Vec<Node> = Vec::new();
    let mut index: BTreeMap<Node, usize> = BTreeMap::new();
    fn intern(n: Node, nodes: &mut Vec<Node>, index: &mut BTreeMap<Node, usize>) -> usize {
        *index.entry(n.clone()).or_insert_with(|| {
            nodes.push(n);
            nodes.len() - 1
        })
    }
    let mut edges = Vec::new();
    for (caller, idx, callee) in &pairs.allowed {
        let site = CallsiteId::new(caller, *idx);
        if !site_set.contains(&site) {
            return Err(PolicyError::UnknownSymbol(site.to_string()));
        }
        if p.function(callee).is_none() && p.import(callee).is_none() {
            return Err(PolicyError::UnknownSymbol(callee.clone()));
        }
        let a = intern(Node::Site(site), &mut nodes, &mut index);
        let t = intern(Node::Target(callee.clone()), &mut nodes, &mut index);
        edges.push((a, t));
    }
    for (site, _) in &sites {
        if !index.contains_key(&Node::Site(site.clone())) {
            return Err(PolicyError::UncoveredCallsite(site.clone()));
        }
    }
    for f in protected {
        intern(Node::Target(f.name.clone()), &mut nodes, &mut index);
    }
    for i in &p.imports {
        intern(Node::Target(i.name.clone()), &mut nodes, &mut index);
    }

    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    for (a, t) in edges {
        let (ra, rt) = (find(&mut parent, a), find(&mut parent, t));
        if ra != rt {
            parent[ra] = rt;
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for n in 0..nodes.len() {
        let r = find(&mut parent, n);
        components.entry(r).or_default().push(n);
    }

    let mut b = Builder::default();
    for members in components.values() {
        let key_name = members
            .iter()
            .filter_map(|&n| match &nodes[n] {
                Node::Target(t) => Some(t.as_str()),
                Node::Site(_) => None,
            })
            .min()
            .expect("every component holds a callee");
        let c = b.class(&format!("mlta:{key_name}"));
        for &n in members {
            match &nodes[n] {
                Node::Site(s) => {
                    c.callsites.insert(s.clone());
                }
                Node::Target(t) if p.import(t).is_some() => {
                    c.imports.insert(t.clone());
                }
                Node::Target(t) => {
                    c.functions.insert(t.clone());
                }
            }
        }
    }
    Ok(b.finish("mlta"))
}

/// Pinned SIDs keyed by function or import symbol.
pub type SidOverrides = BTreeMap<String, u32>;

/// Parses `symbol <tab> 0xSID` lines; `#` starts a comment.
pub fn parse_overrides(text: &str) -> Result<SidOverrides, PolicyError> {
    let mut out = SidOverrides::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| PolicyError::Parse { line: i + 1, msg: msg.to_string() };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [sym, sid] = parts[..] else {
            return Err(err("expected `symbol<TAB>0xSID`"));
        };
        let hex = sid.strip_prefix("0x").or_else(|| sid.strip_prefix("0X")).ok_or_else(|| err("SID must be hex"))?;
        let sid = u32::from_str_radix(hex, 16).map_err(|_| err("SID is not a 32-bit hex value"))?;
        if out.insert(sym.to_string(), sid).is_some_and(|prev| prev != sid) {
            return Err(PolicyError::OverrideConflict(format!("`{sym}` listed twice")));
        }
    }
    Ok(out)
}

/// Deterministic SID for `key` under `seed`, skipping reserved and `used`
/// values.
fn draw_sid(seed: u64, key: &str, used: &BTreeSet<u32>) -> u32 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    loop {
        let sid = rng.next_u32();
        if !is_reserved_sid(sid) && !used.contains(&sid) {
            return sid;
        }
    }
}

/// Assigns a distinct, non-reserved SID to every class.
pub fn allocate_sids(
    classes: &[EquivalenceClass],
    seed: u64,
    overrides: &SidOverrides,
) -> Result<BTreeMap<ClassId, u32>, PolicyError> {
    let mut pinned: BTreeMap<ClassId, (u32, &str)> = BTreeMap::new();
    for (sym, &sid) in overrides {
        if is_reserved_sid(sid) {
            return Err(PolicyError::ReservedSid(sid));
        }
        let class = classes
            .iter()
            .find(|c| c.functions.contains(sym) || c.imports.contains(sym))
            .ok_or_else(|| PolicyError::UnknownSymbol(sym.clone()))?;
        if let Some((prev, other)) = pinned.insert(class.id, (sid, sym)) {
            if prev != sid {
                return Err(PolicyError::OverrideConflict(format!(
                    "`{other}` and `{sym}` share a class but pin {prev:#x} and {sid:#x}"
                )));
            }
        }
    }
    let mut used = BTreeSet::new();
    for (id, (sid, _)) in &pinned {
        if !used.insert(*sid) {
            return Err(PolicyError::OverrideConflict(format!(
                "SID {sid:#x} pinned for more than one class (class {id})"
            )));
        }
    }
    let mut out = BTreeMap::new();
    let mut order: Vec<&EquivalenceClass> = classes.iter().collect();
    order.sort_by(|a, b| a.key.cmp(&b.key));
    for c in order {
        let sid = match pinned.get(&c.id) {
            Some((sid, _)) => *sid,
            None => {
                let sid = draw_sid(seed, &c.key, &used);
                used.insert(sid);
                sid
            }
        };
        out.insert(c.id, sid);
    }
    Ok(out)
}

/// Builds classes and allocates SIDs in one step.
pub fn assign(
    p: &Program,
    kind: &PolicyKind,
    seed: u64,
    overrides: &SidOverrides,
) -> Result<SidAssignment, PolicyError> {
    build_classes(p, kind)?.with_sids(seed, overrides)
}

fn join<'a>(items: impl Iterator<Item = &'a str>) -> String {
    let v: Vec<&str> = items.collect();
    if v.is_empty() {
        "-".to_string()
    } else {
        v.join(", ")
    }
}

/// Human-readable membership of the class holding `symbol`, which may be a
/// function, an import, or a callsite written `function#index`.
pub fn explain_class(a: &SidAssignment, symbol: &str) -> Result<String, PolicyError> {
    let id = a
        .function_to_class
        .get(symbol)
        .or_else(|| a.import_to_class.get(symbol))
        .or_else(|| CallsiteId::parse(symbol).and_then(|s| a.callsite_to_class.get(&s)))
        .ok_or_else(|| PolicyError::UnknownSymbol(symbol.to_string()))?;
    let c = &a.classes[*id];
    let sites: Vec<String> = c.callsites.iter().map(ToString::to_string).collect();
    let sid = a.class_to_sid.get(id).map_or_else(|| "unassigned".to_string(), |s| format!("{s:#010x}"));
    Ok(format!(
        "symbol:    {symbol}\npolicy:    {}\nclass:     {} ({})\nsid:       {sid}\nfunctions: {}\nimports:   {}\ncallsites: {}\n",
        a.policy,
        c.id,
        c.key,
        join(c.functions.iter().map(String::as_str)),
        join(c.imports.iter().map(String::as_str)),
        join(sites.iter().map(String::as_str)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    const SRC: &str = "\
.data fp fnptr_slot rw = f0
.data tbl vtable ro = f1, f2, f3
.func main global () -> int32
    load fp, %rcx
    call *%rcx : (int64) -> int64
    load tbl[%rbx], %rcx
    call *%rcx : (int64, int64) -> int64
    halt 0
.func f0 (int64) -> int64
    ret
.func f1 (int64) -> int64
    ret
.func f2 (int32) -> int32
    ret
.func f3 (int64, int64) -> int64
    ret
";

    #[test]
    fn reserved_images() {
        assert_eq!(ENDBR64_SID, 0xfa1e_0ff3);
        assert_eq!(ENDBR32_SID, 0xfb1e_0ff3);
        assert_eq!(RESOLVER_SID >> 31, 0);
    }

    #[test]
    fn type_strict_groups_identical_signatures() {
        let p = parse_program(SRC).unwrap();
        let a = build_classes(&p, &PolicyKind::TypeStrict).unwrap();
        assert_eq!(a.function_to_class["f0"], a.function_to_class["f1"]);
        assert_ne!(a.function_to_class["f0"], a.function_to_class["f2"]);
        assert_eq!(a.callsite_to_class[&CallsiteId::new("main", 0)], a.function_to_class["f0"]);
        assert_eq!(a.callsite_to_class[&CallsiteId::new("main", 1)], a.function_to_class["f3"]);
    }

    #[test]
    fn arity_buckets() {
        let p = parse_program(SRC).unwrap();
        let a = build_classes(&p, &PolicyKind::Arity).unwrap();
        // main (0), f0/f1/f2 (1), f3 (2)
        let mut sizes: Vec<usize> = a.classes.iter().map(|c| c.functions.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 3]);
    }

    #[test]
    fn mlta_components_and_uncovered_sites() {
        let p = parse_program(SRC).unwrap();
        let pairs = MltaPairs::parse("main\t0\tf0\nmain\t1\tf3\n").unwrap();
        let a = build_classes(&p, &PolicyKind::Mlta(pairs)).unwrap();
        let c0 = a.callsite_to_class[&CallsiteId::new("main", 0)];
        let c1 = a.callsite_to_class[&CallsiteId::new("main", 1)];
        assert_ne!(c0, c1);
        assert_eq!(a.classes[c0].functions, BTreeSet::from(["f0".to_string()]));
        let partial = MltaPairs::parse("main\t0\tf0\n").unwrap();
        assert_eq!(
            build_classes(&p, &PolicyKind::Mlta(partial)),
            Err(PolicyError::UncoveredCallsite(CallsiteId::new("main", 1)))
        );
        let bogus = MltaPairs::parse("main\t0\tnope\nmain\t1\tf3\n").unwrap();
        assert!(matches!(build_classes(&p, &PolicyKind::Mlta(bogus)), Err(PolicyError::UnknownSymbol(_))));
    }

    #[test]
    fn missing_site_signature_is_reported() {
        let p = parse_program(".data fp fnptr_slot rw = f\n.func main () -> void\n    load fp, %rax\n    call *%rax\n    ret\n.func f () -> void\n    ret\n").unwrap();
        assert!(matches!(build_classes(&p, &PolicyKind::Arity), Err(PolicyError::MissingSignature(..))));
        assert!(build_classes(&p, &PolicyKind::VanillaIbt).is_ok());
    }

    #[test]
    fn sids_are_deterministic_and_pinnable() {
        let p = parse_program(SRC).unwrap();
        let a1 = assign(&p, &PolicyKind::TypeStrict, 7, &SidOverrides::new()).unwrap();
        let a2 = assign(&p, &PolicyKind::TypeStrict, 7, &SidOverrides::new()).unwrap();
        assert_eq!(a1, a2);
        let sids: BTreeSet<u32> = a1.class_to_sid.values().copied().collect();
        assert_eq!(sids.len(), a1.classes.len());
        let pins = parse_overrides("f0\t0xc00010ff\nf2\t0xbaddcafe\n").unwrap();
        let a3 = assign(&p, &PolicyKind::TypeStrict, 7, &pins).unwrap();
        assert_eq!(a3.sid_of_symbol("f1"), Some(0xc00010ff));
        assert_eq!(a3.sid_of_symbol("f2"), Some(0xbaddcafe));
        let clash = parse_overrides("f0\t0x1\nf1\t0x2\n").unwrap();
        assert!(matches!(assign(&p, &PolicyKind::TypeStrict, 7, &clash), Err(PolicyError::OverrideConflict(_))));
        let reserved = parse_overrides("f0\t0xfa1e0ff3\n").unwrap();
        assert_eq!(assign(&p, &PolicyKind::TypeStrict, 7, &reserved), Err(PolicyError::ReservedSid(ENDBR64_SID)));
    }

    #[test]
    fn explain_renders_membership() {
        let p = parse_program(SRC).unwrap();
        let a = assign(&p, &PolicyKind::TypeStrict, 1, &SidOverrides::new()).unwrap();
        let text = explain_class(&a, "f0").unwrap();
        assert!(text.contains("functions: f0, f1"));
        assert!(text.contains("callsites: main#0"));
        assert!(explain_class(&a, "main#1").unwrap().contains("f3"));
        assert_eq!(explain_class(&a, "ghost"), Err(PolicyError::UnknownSymbol("ghost".into())));
    }
}

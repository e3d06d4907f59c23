//! Deterministic random programs and multi-image spaces for integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write;
use std::path::PathBuf;

use fineibt_core::ir::{parse_program, Program};
use fineibt_core::linkage::{Image, PltFormat};
use fineibt_core::loader::{AddressSpace, LoadOptions};
use fineibt_core::pipeline::{build, BuildOptions};
use fineibt_core::policy::PolicyKind;
use fineibt_core::weave::IrmVariant;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture_path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// Signatures drawn for generated functions and sites. Several share an arity
/// while differing in types.
pub const SIGNATURES: [&str; 7] = [
    "(int64) -> int64",
    "(int32) -> int32",
    "(int64) -> int32",
    "(int64, int64) -> int64",
    "(ptr(int32)) -> int64",
    "(int64, ...) -> int32",
    "() -> void",
];

/// Parameter count and variadic flag of a pool signature.
pub fn arity_key(sig: &str) -> (usize, bool) {
    let params = &sig[1..sig.find(')').unwrap_or(1)];
    let params = if sig.starts_with("(ptr(") { "ptr" } else { params };
    let variadic = params.contains("...");
    let n = params.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "...").count();
    (n, variadic)
}

#[derive(Clone, Debug)]
pub struct GenFn {
    pub name: String,
    pub sig: &'static str,
    pub global: bool,
    pub address_taken: bool,
}

impl GenFn {
    pub fn protected(&self) -> bool {
        self.global || self.address_taken
    }
}

#[derive(Clone, Debug)]
pub struct GenSite {
    /// Function holding the site; also the run entry.
    pub function: String,
    /// Writable slot the site loads its target from.
    pub slot: String,
    pub sig: &'static str,
    pub tail: bool,
}

#[derive(Clone, Debug)]
pub struct GenProgram {
    pub text: String,
    pub functions: Vec<GenFn>,
    pub sites: Vec<GenSite>,
}

impl GenProgram {
    pub fn parse(&self) -> Program {
        parse_program(&self.text).unwrap_or_else(|e| panic!("{e}\n{}", self.text))
    }

    pub fn protected(&self) -> usize {
        self.functions.iter().filter(|f| f.protected()).count()
    }
}

/// A program of up to `max_fns` functions `f{i}` and up to `max_sites`
/// indirect sites, each in its own function `site{c}`.
pub fn gen_program(seed: u64, max_fns: usize, max_sites: usize) -> GenProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_fns);
    let mut functions: Vec<GenFn> = (0..n)
        .map(|i| GenFn {
            name: format!("f{i}"),
            sig: SIGNATURES.choose(&mut rng).copied().unwrap_or(SIGNATURES[0]),
            global: rng.gen_bool(0.3),
            address_taken: rng.gen_bool(0.5),
        })
        .collect();
    functions[rng.gen_range(0..n)].address_taken = true;
    let taken: Vec<usize> = (0..n).filter(|&i| functions[i].address_taken).collect();
    let site_count = rng.gen_range(0..=max_sites);
    let sites: Vec<(GenSite, usize)> = (0..site_count)
        .map(|c| {
            let sig = if rng.gen_bool(0.6) {
                functions[*taken.choose(&mut rng).unwrap_or(&0)].sig
            } else {
                SIGNATURES.choose(&mut rng).copied().unwrap_or(SIGNATURES[0])
            };
            let site = GenSite { function: format!("site{c}"), slot: format!("s{c}"), sig, tail: rng.gen_bool(0.25) };
            (site, *taken.choose(&mut rng).unwrap_or(&0))
        })
        .collect();

    let mut text = format!(";fasm v1\n.program gen{seed}\n");
    for f in &functions {
        if f.address_taken {
            let _ = writeln!(text, ".data at_{0} fnptr_slot ro = {0}", f.name);
        }
    }
    for (s, init) in &sites {
        let _ = writeln!(text, ".data {} fnptr_slot rw = {}", s.slot, functions[*init].name);
    }
    for (i, f) in functions.iter().enumerate() {
        let linkage = if f.global { " global" } else { "" };
        let _ = writeln!(text, "\n.func {}{linkage} {}", f.name, f.sig);
        let _ = writeln!(text, "    mov ${i:#x}, %eax");
        if i + 1 < n && rng.gen_bool(0.3) {
            let _ = writeln!(text, "    call f{}", rng.gen_range(i + 1..n));
        }
        let _ = writeln!(text, "    ret");
    }
    for (s, _) in &sites {
        let _ = writeln!(text, "\n.func {} () -> int32", s.function);
        let _ = writeln!(text, "    load {}, %rax", s.slot);
        if s.tail {
            let _ = writeln!(text, "    jmp *%rax : {}", s.sig);
        } else {
            let _ = writeln!(text, "    call *%rax : {}", s.sig);
            let _ = writeln!(text, "    halt 0");
        }
    }
    GenProgram { text, functions, sites: sites.into_iter().map(|(s, _)| s).collect() }
}

/// One library or the application of a generated space.
#[derive(Clone, Debug)]
pub struct GenImage {
    pub name: String,
    pub text: String,
    pub plt: PltFormat,
    /// Global functions defined here.
    pub exports: Vec<String>,
    /// Exported functions whose address escapes into this image's data.
    pub address_taken: BTreeSet<String>,
    pub imports: Vec<String>,
}

/// An application followed by one to three libraries. Library `k` exports
/// `l{k}_g{i}`; each image imports a random subset of the other images'
/// exports and calls every import directly.
pub fn gen_space(seed: u64) -> Vec<GenImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let libs = rng.gen_range(1..=3);
    let mut exports: Vec<Vec<String>> = vec![vec!["main".to_string()]];
    for k in 0..libs {
        let count = rng.gen_range(1..=6);
        exports.push((0..count).map(|i| format!("l{k}_g{i}")).collect());
    }
    let mut out = Vec::new();
    for (idx, own) in exports.iter().enumerate() {
        let name = if idx == 0 { "app".to_string() } else { format!("lib{}", idx - 1) };
        let foreign: Vec<&String> =
            exports.iter().enumerate().filter(|(j, _)| *j != idx && *j != 0).flat_map(|(_, e)| e).collect();
        let imports: Vec<String> = foreign.into_iter().filter(|_| rng.gen_bool(0.4)).cloned().collect();
        let address_taken: BTreeSet<String> = own.iter().filter(|_| rng.gen_bool(0.25)).cloned().collect();
        let import_taken: Vec<&String> = imports.iter().filter(|_| rng.gen_bool(0.3)).collect();
        let plt = match rng.gen_range(0..3) {
            0 => PltFormat::CompactPlt,
            _ => PltFormat::FineIbtPlt,
        };
        let mut text = format!(";fasm v1\n.program {name}\n");
        if plt == PltFormat::CompactPlt {
            text.push_str(".relro_full\n");
        }
        for s in &imports {
            let _ = writeln!(text, ".import {s} (int64) -> int64");
        }
        for s in address_taken.iter().chain(import_taken.iter().copied()) {
            let _ = writeln!(text, ".data p_{s} fnptr_slot ro = {s}");
        }
        for (j, s) in own.iter().enumerate() {
            // Local filler so the pads spread over several pages.
            if rng.gen_bool(0.4) {
                let _ = writeln!(text, "\n.func pad{j} () -> void");
                for _ in 0..rng.gen_range(100..900) {
                    let _ = writeln!(text, "    mov $0x0, %eax");
                }
                let _ = writeln!(text, "    ret");
            }
            let _ = writeln!(text, "\n.func {s} global (int64) -> int64");
            for i in &imports {
                let _ = writeln!(text, "    call {i}");
            }
            let _ = writeln!(text, "    mov $0x1, %eax\n    ret");
        }
        out.push(GenImage { name, text, plt, exports: own.clone(), address_taken, imports });
    }
    out
}

pub fn build_image(src: &str, irm: IrmVariant, plt: Option<PltFormat>) -> Image {
    let p = parse_program(src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    let opts = BuildOptions { irm, plt, ..Default::default() };
    build(&p, &opts).unwrap_or_else(|e| panic!("{e}")).image
}

pub fn build_with(p: &Program, policy: PolicyKind, irm: IrmVariant) -> Image {
    let opts = BuildOptions { policy, irm, ..Default::default() };
    build(p, &opts).unwrap_or_else(|e| panic!("{e}")).image
}

pub fn load(images: Vec<Image>, options: LoadOptions) -> AddressSpace {
    AddressSpace::load(images, options).unwrap_or_else(|e| panic!("{e}"))
}

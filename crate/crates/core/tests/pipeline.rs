mod common;

use common::*;
use fineibt_core::ir::{parse_program, print_program};
use fineibt_core::linkage::PltFormat;
use fineibt_core::loader::{AddressSpace, Binding, LoadEvent, LoadOptions};
use fineibt_core::machine::{
    run, run_scenario, trace_diff, DiffMode, Outcome, RunOptions, Scenario, ScenarioOutcome, TrapKind,
};
use fineibt_core::pipeline::{build, BuildOptions};
use fineibt_core::policy::{parse_overrides, MltaPairs, PolicyKind};
use fineibt_core::weave::IrmVariant;

fn confirm(binding: Binding, nopout: bool) -> AddressSpace {
    let app = build_image(&fixture("confirm/app.fasm"), IrmVariant::FineIbtBasic, None);
    let lib = build_image(&fixture("confirm/libconfirm.fasm"), IrmVariant::FineIbtBasic, None);
    load(vec![app, lib], LoadOptions { binding, nopout, base_seed: 3 })
}

#[test]
fn listing_goldens_match() {
    let p = parse_program(&fixture("listing1.fasm")).unwrap();
    let overrides = parse_overrides(&fixture("listing1.sids")).unwrap();
    for (irm, golden) in [
        (IrmVariant::FineIbtBasic, "listing1.basic.golden.fasm"),
        (IrmVariant::FineIbtColdpath, "listing1.coldpath.golden.fasm"),
    ] {
        let opts = BuildOptions {
            irm,
            overrides: overrides.clone(),
            sid_reg: fineibt_core::ir::RegisterId::Rax,
            ..Default::default()
        };
        let built = build(&p, &opts).unwrap();
        assert_eq!(print_program(&built.instrumented), fixture(golden), "{irm}");
    }
}

#[test]
fn spaces_survive_json() {
    let space = confirm(Binding::Eager, true);
    let back = AddressSpace::from_json(&space.to_json()).unwrap();
    assert_eq!(back, space);
    let mut a = space.clone();
    let mut b = back;
    let ta = run(&mut a, "test_callback", &RunOptions::default()).unwrap();
    let tb = run(&mut b, "test_callback", &RunOptions::default()).unwrap();
    assert_eq!(trace_diff(&ta, &tb, DiffMode::Exact), None);
}

#[test]
fn relro_got_rejects_writes() {
    let app = fixture("confirm/app.fasm").replacen(".program app\n", ".program app\n.relro_full\n", 1);
    let app = build_image(&app, IrmVariant::FineIbtBasic, None);
    let lib = build_image(&fixture("confirm/libconfirm.fasm"), IrmVariant::FineIbtBasic, None);
    let space = load(vec![app, lib], LoadOptions { binding: Binding::Lazy, ..Default::default() });
    let s = Scenario::from_toml(
        "name = \"got\"\nentry = \"test_direct\"\nexpected = \"illegal_mutation\"\n\
         [[mutations]]\nkind = \"write_got\"\nimport = \"lib_add\"\nsymbol = \"lib_unused\"\n",
    )
    .unwrap();
    let r = run_scenario(&space, &s, 10_000).unwrap();
    assert!(r.passed, "{}", r.summary());
    assert!(matches!(r.outcome, ScenarioOutcome::IllegalMutation(_)));
}

#[test]
fn writable_got_hijack_is_caught_by_the_callee_check() {
    let space = confirm(Binding::Eager, false);
    let s = Scenario::from_toml(
        "name = \"hijack\"\nentry = \"test_direct\"\nexpected = { traps = \"EndbrViolation\" }\n\
         [[mutations]]\nkind = \"write_got\"\nimport = \"lib_add\"\nsymbol = \"libconfirm!lib_unused\"\noffset = 4\n",
    )
    .unwrap();
    let r = run_scenario(&space, &s, 10_000).unwrap();
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn dlopen_is_idempotent_and_restores_linked_pads() {
    let lib = build_image(&fixture("confirm/libconfirm.fasm"), IrmVariant::FineIbtBasic, None);
    let mut space = load(vec![lib.clone()], LoadOptions { binding: Binding::Eager, nopout: true, base_seed: 1 });
    let off = lib.function("lib_add").unwrap().offset;
    assert!(space.images[0].elided.contains(&off));
    assert_eq!(space.dlopen(lib).unwrap(), 0);

    let app = build_image(&fixture("confirm/app.fasm"), IrmVariant::FineIbtBasic, None);
    let idx = space.dlopen(app).unwrap();
    assert_eq!(idx, 1);
    assert!(!space.images[0].elided.contains(&off));
    assert!(space.log.iter().any(|e| matches!(e, LoadEvent::Restored { symbol, .. } if symbol == "lib_add")));
    let t = run(&mut space.clone(), "test_load_time_dynlnk", &RunOptions::default()).unwrap();
    assert_eq!(t.outcome, Outcome::Completed { exit: 0 });
}

const MID_FUNCTION: &str = "name = \"mid\"\nentry = \"test_fptr\"\nexpected = { traps = \"EndbrViolation\" }\n\
    [[mutations]]\nkind = \"write_data\"\nobject = \"cb_slot\"\nsymbol = \"cb\"\noffset = 4\n";

#[test]
fn mixed_ibt_space_runs_without_enforcement() {
    let app = build_image(&fixture("confirm/app.fasm"), IrmVariant::IbtOnly, None);
    let lib = build_image(&fixture("confirm/libconfirm.fasm"), IrmVariant::None, None);
    let space = load(vec![app, lib], LoadOptions::default());
    assert!(!space.ibt_enabled());
    let mid = Scenario::from_toml(MID_FUNCTION).unwrap();
    let r = run_scenario(&space, &mid, 10_000).unwrap();
    assert_eq!(r.outcome, ScenarioOutcome::Ran(Outcome::Completed { exit: 0 }));
}

#[test]
fn ibt_only_admits_cross_class_targets() {
    let app = build_image(&fixture("confirm/app.fasm"), IrmVariant::IbtOnly, None);
    let lib = build_image(&fixture("confirm/libconfirm.fasm"), IrmVariant::IbtOnly, None);
    let space = load(vec![app, lib], LoadOptions::default());
    assert!(space.ibt_enabled());
    let swap = Scenario::from_toml(&fixture("confirm/fptr_swap.toml")).unwrap();
    let r = run_scenario(&space, &swap, 10_000).unwrap();
    assert_eq!(r.outcome, ScenarioOutcome::Ran(Outcome::Completed { exit: 0 }));
    let r = run_scenario(&space, &Scenario::from_toml(MID_FUNCTION).unwrap(), 10_000).unwrap();
    assert!(r.passed, "{}", r.summary());
}

#[test]
fn label_insensitive_diff_ignores_entry_aliases() {
    let space = confirm(Binding::Eager, false);
    let mut a = space.clone();
    let ta = run(&mut a, "test_fptr", &RunOptions::default()).unwrap();
    let mut tb = ta.clone();
    for l in &mut tb.lines {
        l.instr = l.instr.replace("lib_add_entry", "lib_add");
        l.pc += 0x1000;
    }
    assert_eq!(trace_diff(&ta, &tb, DiffMode::LabelInsensitive), None);
    tb.outcome = Outcome::Completed { exit: 9 };
    assert!(trace_diff(&ta, &tb, DiffMode::LabelInsensitive).is_some());
}

#[test]
fn mlta_splits_a_type_class() {
    let src = ";fasm v1\n.program m\n\
        .data a fnptr_slot rw = f\n.data b fnptr_slot rw = g\n\
        .func f (int64) -> int64\n    ret\n\
        .func g (int64) -> int64\n    ret\n\
        .func site_f () -> int32\n    load a, %rax\n    call *%rax : (int64) -> int64\n    halt 0\n\
        .func site_g () -> int32\n    load b, %rax\n    call *%rax : (int64) -> int64\n    halt 0\n";
    let p = parse_program(src).unwrap();
    let pairs = MltaPairs::parse("site_f 0 f\nsite_g 0 g\n").unwrap();
    let img = build_with(&p, PolicyKind::Mlta(pairs), IrmVariant::FineIbtBasic);
    let space = load(vec![img], LoadOptions::default());
    let ok = run(&mut space.clone(), "site_f", &RunOptions::default()).unwrap();
    assert_eq!(ok.outcome, Outcome::Completed { exit: 0 });
    let mut s = space.clone();
    let g = s.images[0].base + s.images[0].image.function("g").unwrap().offset;
    s.images[0].data.get_mut("a").unwrap().values[0] = g;
    let t = run(&mut s, "site_f", &RunOptions::default()).unwrap();
    assert_eq!(t.outcome.trap_kind(), Some(TrapKind::SidMismatchHlt));

    let type_img = build_with(&p, PolicyKind::TypeStrict, IrmVariant::FineIbtBasic);
    let mut s = load(vec![type_img], LoadOptions::default());
    let g = s.images[0].base + s.images[0].image.function("g").unwrap().offset;
    s.images[0].data.get_mut("a").unwrap().values[0] = g;
    let t = run(&mut s, "site_f", &RunOptions::default()).unwrap();
    assert_eq!(t.outcome, Outcome::Completed { exit: 0 });
}

#[test]
fn compact_plt_needs_relro() {
    let p = parse_program(&fixture("confirm/app.fasm")).unwrap();
    let opts = BuildOptions { plt: Some(PltFormat::CompactPlt), ..Default::default() };
    let err = build(&p, &opts).unwrap_err();
    assert!(err.to_string().contains("RELRO"), "{err}");
}

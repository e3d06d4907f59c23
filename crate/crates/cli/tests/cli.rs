use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn fineibt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fineibt")).args(args).env_remove("FINEIBT_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Builds app and libconfirm into `dir` and loads them with elision on.
fn confirm_space(dir: &Path, extra: &[&str]) -> PathBuf {
    let out =
        fineibt(&["build", p(&fixture("confirm/app.fasm")), p(&fixture("confirm/libconfirm.fasm")), "-o", p(dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let space = dir.join("space.json");
    let (app, lib) = (dir.join("app.img.json"), dir.join("libconfirm.img.json"));
    let mut args = vec!["load", p(&app), p(&lib), "-o", p(&space)];
    args.extend_from_slice(extra);
    let out = fineibt(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    space
}

#[test]
fn listing1_builds_runs_and_reports() {
    let dir = scratch("listing1");
    let img = dir.join("l1.img.json");
    let sids = fixture("listing1.sids");
    let out = fineibt(&[
        "build",
        p(&fixture("listing1.fasm")),
        "--sid-overrides",
        p(&sids),
        "--sid-reg",
        "rax",
        "-o",
        p(&img),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("(+29 bytes)"));
    assert!(dir.join("l1.img.size.json").exists());

    let out = fineibt(&["report", p(&img), "--stats", "size"]);
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["endbr", "8"]));
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["callee_irm", "16"]));
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["caller_irm", "5"]));

    let out = fineibt(&["report", p(&img), "--stats", "classes"]);
    assert!(stdout(&out).contains("0xc00010ff") && stdout(&out).contains("0xbaddcafe"));

    let space = dir.join("space.json");
    assert!(fineibt(&["load", p(&img), "-o", p(&space)]).status.success());
    let out = fineibt(&["run", p(&space)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).ends_with("completed exit=0\n"));
    assert!(stdout(&out).contains("sub $0xc00010ff, %eax"));

    let out = fineibt(&["report", p(&space), "--stats", "targets"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("listing1"));
}

#[test]
fn trap_exits_with_one() {
    let dir = scratch("trap");
    let space = confirm_space(&dir, &[]);
    let swap = fixture("confirm/fptr_swap.toml");
    let out = fineibt(&["run", p(&space), "--scenario", p(&swap)]);
    // The scenario expects the trap, so it passes.
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("PASS fptr_swap"));
    assert!(stderr(&out).contains("trap=SidMismatchHlt"));

    let out = fineibt(&["run", p(&space), "--entry", "test_unmatched_pair", "--shadow-stack"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("trap=ShadowStackMismatch"));

    let out = fineibt(&["run", p(&space), "--entry", "test_ret"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn failing_scenario_exits_with_one() {
    let dir = scratch("failing");
    let space = confirm_space(&dir, &[]);
    let wrong = dir.join("wrong.toml");
    std::fs::write(&wrong, "name = \"wrong\"\nentry = \"test_fptr\"\nexpected = { completes = 3 }\n").unwrap();
    let out = fineibt(&["run", p(&space), "--scenario", p(&wrong)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL wrong"));
}

#[test]
fn every_compatibility_scenario_passes() {
    let dir = scratch("scenarios");
    let space = confirm_space(&dir, &["--nopout"]);
    let mut count = 0;
    for entry in std::fs::read_dir(fixture("confirm")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = fineibt(&["run", p(&space), "--scenario", p(&path)]);
            assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), stdout(&out));
            count += 1;
        }
    }
    assert!(count >= 9);
}

#[test]
fn nopout_load_logs_and_reports() {
    let dir = scratch("nopout");
    let space = dir.join("space.json");
    assert!(fineibt(&[
        "build",
        p(&fixture("confirm/app.fasm")),
        p(&fixture("confirm/libconfirm.fasm")),
        "-o",
        p(&dir)
    ])
    .status
    .success());
    let out = fineibt(&[
        "load",
        p(&dir.join("app.img.json")),
        p(&dir.join("libconfirm.img.json")),
        "--nopout",
        "-o",
        p(&space),
    ]);
    assert!(stdout(&out).contains("elided libconfirm:lib_unused"));
    let out = fineibt(&["report", p(&space), "--stats", "nopout"]);
    let total: Vec<String> = stdout(&out).lines().last().unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(total[0], "total");
    assert_eq!(total[3].parse::<u64>().unwrap() * 4, total[4].parse::<u64>().unwrap());

    let out = fineibt(&["report", p(&dir.join("app.img.json")), "--stats", "nopout"]);
    assert_eq!(out.status.code(), Some(2));

    let out = fineibt(&[
        "load",
        p(&dir.join("app.img.json")),
        p(&dir.join("libconfirm.img.json")),
        "--nopout",
        "--binding",
        "lazy",
        "-o",
        p(&space),
    ]);
    assert!(stdout(&out).contains("warning: app: lazy binding"));
}

#[test]
fn compact_plt_without_relro_is_an_error() {
    let dir = scratch("compact");
    let out = fineibt(&["build", p(&fixture("confirm/app.fasm")), "--plt", "compact", "-o", p(&dir.join("a.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn bad_input_is_an_error() {
    let dir = scratch("bad");
    let src = dir.join("bad.fasm");
    std::fs::write(&src, ";fasm v1\n.program bad\n.func f () -> void\n    frobnicate\n").unwrap();
    let out = fineibt(&["build", p(&src), "-o", p(&dir.join("x.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("at 4:5"), "{}", stderr(&out));
    let out = fineibt(&["build", p(&dir.join("missing.fasm")), "-o", p(&dir.join("x.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = fineibt(&["run", p(&src)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn emit_bti_reproduces_the_a64_lines() {
    let out = fineibt(&["emit-bti", p(&fixture("bti.fasm")), "--sid-overrides", p(&fixture("bti.sids"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("movz w9, #0x3a, lsl #16"));
    assert!(text.contains("subs w9, w9, #0x3a0, lsl #12"));
    assert!(text.contains("bne .func_finebti_coldpath"));

    let dir = scratch("bti");
    let pins = dir.join("pins");
    std::fs::write(&pins, "func 0x12345678\n").unwrap();
    let out = fineibt(&["emit-bti", p(&fixture("bti.fasm")), "--sid-overrides", p(&pins)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("0x12345678"));
}

#[test]
fn explain_names_the_class() {
    let out = fineibt(&["explain", p(&fixture("listing1.fasm")), "--symbol", "func0", "--policy", "arity"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("func0") && text.contains("func1"), "{text}");
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = scratch("seed");
    let build = |seed: Option<&str>, out: &Path| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_fineibt"));
        c.args(["build", p(&fixture("listing1.fasm")), "-o", p(out)]).env_remove("FINEIBT_SEED");
        if let Some(s) = seed {
            c.env("FINEIBT_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(out).unwrap()
    };
    let a = build(Some("7"), &dir.join("a.json"));
    let b = build(Some("7"), &dir.join("b.json"));
    let c = build(Some("8"), &dir.join("c.json"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let out = fineibt(&["build", p(&fixture("listing1.fasm")), "--seed", "7", "-o", p(&dir.join("d.json"))]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.join("d.json")).unwrap(), a);
}

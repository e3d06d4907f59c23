//! `fineibt`: build, load, run and report on FineIBT-instrumented programs.
//!
//! Exit status is 0 on success, 1 when a run traps (or a scenario does not
//! meet its expectation) and 2 on usage or build errors. Traps are tagged on
//! stderr as `trap=<Kind>`.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fineibt_core::ir::{parse_program, Program, Reg};
use fineibt_core::linkage::{census, census_with, Image, PltFormat, IMAGE_FORMAT};
use fineibt_core::loader::{AddressSpace, Binding, LoadOptions, SPACE_FORMAT};
use fineibt_core::machine::{run, run_scenario, Outcome, RunOptions, Scenario, ScenarioOutcome, DEFAULT_STEP_LIMIT};
use fineibt_core::pipeline::{build, BuildOptions};
use fineibt_core::policy::{
    assign, explain_class, parse_overrides, MltaPairs, PolicyKind, SidAssignment, SidOverrides,
};
use fineibt_core::report;
use fineibt_core::weave::{emit_bti_text, IrmVariant};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "fineibt", version, about = "Fine-grained CFI over IBT: build, load, run and report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instrument and link `.fasm` programs into images.
    Build(BuildArgs),
    /// Load images into an address space snapshot.
    Load(LoadArgs),
    /// Execute an address space from an entry symbol or a scenario file.
    Run(RunArgs),
    /// Print a fixed-width report for an image or an address space.
    Report(ReportArgs),
    /// Render the A64 form of a program's instrumentation.
    EmitBti(EmitBtiArgs),
    /// Show the equivalence class of a symbol or callsite (`fn#index`).
    Explain(ExplainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Vanilla,
    Arity,
    Type,
    Mlta,
}

#[derive(Clone, Copy, ValueEnum)]
enum IrmArg {
    None,
    Ibt,
    Basic,
    Coldpath,
    ClangCfi,
}

impl From<IrmArg> for IrmVariant {
    fn from(v: IrmArg) -> Self {
        match v {
            IrmArg::None => IrmVariant::None,
            IrmArg::Ibt => IrmVariant::IbtOnly,
            IrmArg::Basic => IrmVariant::FineIbtBasic,
            IrmArg::Coldpath => IrmVariant::FineIbtColdpath,
            IrmArg::ClangCfi => IrmVariant::ClangCfiBaseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PltArg {
    Ibt,
    Fineibt,
    Compact,
}

impl From<PltArg> for PltFormat {
    fn from(v: PltArg) -> Self {
        match v {
            PltArg::Ibt => PltFormat::IbtPlt,
            PltArg::Fineibt => PltFormat::FineIbtPlt,
            PltArg::Compact => PltFormat::CompactPlt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BindingArg {
    Eager,
    Lazy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stat {
    Size,
    Targets,
    Classes,
    Nopout,
}

#[derive(Args)]
struct PolicyArgs {
    /// Equivalence-class policy.
    #[arg(long, value_enum, default_value = "type")]
    policy: PolicyArg,
    /// SID seed.
    #[arg(long, env = "FINEIBT_SEED", default_value_t = 0)]
    seed: u64,
    /// File of `symbol 0xSID` lines pinning SIDs.
    #[arg(long)]
    sid_overrides: Option<PathBuf>,
    /// File of `caller index callee` lines (required by `--policy mlta`).
    #[arg(long)]
    mlta_pairs: Option<PathBuf>,
}

impl PolicyArgs {
    fn kind(&self) -> Result<PolicyKind> {
        Ok(match self.policy {
            PolicyArg::Vanilla => PolicyKind::VanillaIbt,
            PolicyArg::Arity => PolicyKind::Arity,
            PolicyArg::Type => PolicyKind::TypeStrict,
            PolicyArg::Mlta => {
                let path = self.mlta_pairs.as_ref().ok_or("--policy mlta requires --mlta-pairs")?;
                PolicyKind::Mlta(MltaPairs::parse(&read(path)?)?)
            }
        })
    }

    fn overrides(&self) -> Result<SidOverrides> {
        match &self.sid_overrides {
            Some(p) => Ok(parse_overrides(&read(p)?)?),
            None => Ok(SidOverrides::new()),
        }
    }

    fn assignment(&self, p: &Program) -> Result<SidAssignment> {
        Ok(assign(p, &self.kind()?, self.seed, &self.overrides()?)?)
    }
}

#[derive(Args)]
struct BuildArgs {
    /// Input `.fasm` programs.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Instrumentation variant.
    #[arg(long, value_enum, default_value = "basic")]
    irm: IrmArg,
    /// PLT format; defaults to `fineibt` for FineIBT variants and `ibt` otherwise.
    #[arg(long, value_enum)]
    plt: Option<PltArg>,
    /// Register whose 32-bit view carries SIDs.
    #[arg(long, default_value = "r11")]
    sid_reg: String,
    /// Output image (one input) or directory (several inputs).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct LoadArgs {
    /// Images in load order.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "eager")]
    binding: BindingArg,
    /// Elide landing pads of unlinked exported functions.
    #[arg(long)]
    nopout: bool,
    /// Seed for image base randomization.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Address space snapshot.
    space: PathBuf,
    /// Entry symbol; ignored with `--scenario`.
    #[arg(long, default_value = "main")]
    entry: String,
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    shadow_stack: bool,
    #[arg(long, default_value_t = DEFAULT_STEP_LIMIT)]
    step_limit: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Image or address space file.
    input: PathBuf,
    #[arg(long, value_enum)]
    stats: Stat,
}

#[derive(Args)]
struct EmitBtiArgs {
    program: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    program: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Function, import or callsite (`fn#index`).
    #[arg(long)]
    symbol: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_program(path: &Path) -> Result<Program> {
    parse_program(&read(path)?).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn cmd_build(a: &BuildArgs) -> Result<ExitCode> {
    let sid_reg = Reg::from_name(a.sid_reg.trim_start_matches('%'))
        .map(|r| r.id)
        .ok_or_else(|| format!("unknown register `{}`", a.sid_reg))?;
    let overrides = a.policy.overrides()?;
    let kind = a.policy.kind()?;
    let several = a.inputs.len() > 1;
    if several {
        fs::create_dir_all(&a.output)?;
    }
    for input in &a.inputs {
        let p = load_program(input)?;
        let opts = BuildOptions {
            policy: kind.clone(),
            irm: a.irm.into(),
            plt: a.plt.map(Into::into),
            seed: a.policy.seed,
            overrides: overrides.clone(),
            sid_reg,
        };
        let built = build(&p, &opts).map_err(|e| format!("{}: {e}", input.display()))?;
        let out = if several { a.output.join(format!("{}.img.json", built.image.name)) } else { a.output.clone() };
        write(&out, &built.image.to_json())?;
        let report = built.image.size_report.as_ref().expect("build sets the size report");
        let sidecar = out.with_extension("size.json");
        write(&sidecar, &serde_json::to_string_pretty(report)?)?;
        eprintln!("{} -> {} (+{} bytes)", input.display(), out.display(), report.delta());
    }
    Ok(ExitCode::SUCCESS)
}

fn read_image(path: &Path) -> Result<Image> {
    Image::from_json(&read(path)?).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn cmd_load(a: &LoadArgs) -> Result<ExitCode> {
    let images = a.images.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let binding = match a.binding {
        BindingArg::Eager => Binding::Eager,
        BindingArg::Lazy => Binding::Lazy,
    };
    let space = AddressSpace::load(images, LoadOptions { binding, nopout: a.nopout, base_seed: a.base_seed })?;
    for e in &space.log {
        println!("{e}");
    }
    write(&a.output, &space.to_json())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: &RunArgs) -> Result<ExitCode> {
    let mut space = AddressSpace::from_json(&read(&a.space)?)?;
    if let Some(path) = &a.scenario {
        let s = Scenario::from_toml(&read(path)?)?;
        let r = run_scenario(&space, &s, a.step_limit)?;
        if let Some(t) = &r.trace {
            print!("{}", t.to_text());
        }
        println!("{}", r.summary());
        if let ScenarioOutcome::Ran(Outcome::Trapped(t)) = &r.outcome {
            eprintln!("trap={}", t.kind);
        }
        return Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }
    let opts = RunOptions { shadow_stack: a.shadow_stack, step_limit: a.step_limit, ..RunOptions::default() };
    let trace = run(&mut space, &a.entry, &opts)?;
    print!("{}", trace.to_text());
    match &trace.outcome {
        Outcome::Completed { .. } => Ok(ExitCode::SUCCESS),
        Outcome::Trapped(t) => {
            eprintln!("trap={}", t.kind);
            Ok(ExitCode::from(1))
        }
    }
}

enum Input {
    Image(Box<Image>),
    Space(Box<AddressSpace>),
}

fn read_input(path: &Path) -> Result<Input> {
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(IMAGE_FORMAT) => Ok(Input::Image(Box::new(serde_json::from_value(value)?))),
        Some(SPACE_FORMAT) => Ok(Input::Space(Box::new(serde_json::from_value(value)?))),
        _ => Err(format!("{}: neither an image nor an address space", path.display()).into()),
    }
}

fn cmd_report(a: &ReportArgs) -> Result<ExitCode> {
    let input = read_input(&a.input)?;
    let images: Vec<&Image> = match &input {
        Input::Image(i) => vec![i],
        Input::Space(s) => s.images.iter().map(|i| &i.image).collect(),
    };
    let text = match a.stats {
        Stat::Size => {
            let mut out = String::new();
            for img in &images {
                let r = img.size_report.as_ref().ok_or_else(|| format!("`{}` carries no size report", img.name))?;
                if images.len() > 1 {
                    out.push_str(&format!("[{}]\n", img.name));
                }
                out.push_str(&report::size_table(r));
            }
            out
        }
        Stat::Targets => {
            let rows = match &input {
                Input::Image(i) => vec![(i.name.clone(), census(i))],
                Input::Space(s) => {
                    s.images.iter().map(|i| (i.name().to_string(), census_with(&i.image, &i.elided))).collect()
                }
            };
            report::targets_table(&rows)
        }
        Stat::Classes => {
            let mut out = String::new();
            for img in &images {
                if images.len() > 1 {
                    out.push_str(&format!("[{}]\n", img.name));
                }
                out.push_str(&report::classes_table(&img.classes));
            }
            out
        }
        Stat::Nopout => match &input {
            Input::Space(s) => report::nopout_table(s),
            Input::Image(_) => return Err("--stats nopout needs an address space".into()),
        },
    };
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_emit_bti(a: &EmitBtiArgs) -> Result<ExitCode> {
    let p = load_program(&a.program)?;
    let text = emit_bti_text(&p, &a.policy.assignment(&p)?)?;
    match &a.output {
        Some(out) => write(out, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_explain(a: &ExplainArgs) -> Result<ExitCode> {
    let p = load_program(&a.program)?;
    print!("{}", explain_class(&a.policy.assignment(&p)?, &a.symbol)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Load(a) => cmd_load(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::EmitBti(a) => cmd_emit_bti(a),
        Command::Explain(a) => cmd_explain(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

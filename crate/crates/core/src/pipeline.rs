//! One-call build: policy, instrumentation and linking of a parsed program.

use thiserror::Error;

use crate::ir::{Program, RegisterId};
use crate::linkage::{link_image, Image, LinkConfig, LinkError, PltFormat};
use crate::policy::{assign, PolicyError, PolicyKind, SidAssignment, SidOverrides};
use crate::weave::{instrument, size_report, IrmVariant, WeaveError, DEFAULT_SID_REG};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Weave(#[from] WeaveError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    pub policy: PolicyKind,
    pub irm: IrmVariant,
    /// Defaults to the FineIBT PLT for FineIBT variants and the IBT PLT
    /// otherwise.
    pub plt: Option<PltFormat>,
    pub seed: u64,
    pub overrides: SidOverrides,
    pub sid_reg: RegisterId,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            policy: PolicyKind::TypeStrict,
            irm: IrmVariant::FineIbtBasic,
            plt: None,
            seed: 0,
            overrides: SidOverrides::new(),
            sid_reg: DEFAULT_SID_REG,
        }
    }
}

impl BuildOptions {
    pub fn plt_format(&self) -> PltFormat {
        self.plt.unwrap_or(if self.irm.is_fineibt() { PltFormat::FineIbtPlt } else { PltFormat::IbtPlt })
    }
}

/// Everything a build produces.
#[derive(Clone, Debug)]
pub struct Built {
    pub assignment: SidAssignment,
    pub instrumented: Program,
    pub image: Image,
}

/// Assigns SIDs, instruments and links `p`. The image carries the size
/// report, PLT bytes included.
pub fn build(p: &Program, opts: &BuildOptions) -> Result<Built, BuildError> {
    let assignment = assign(p, &opts.policy, opts.seed, &opts.overrides)?;
    let instrumented = instrument(p, &assignment, opts.irm, opts.sid_reg)?;
    let cfg = LinkConfig { variant: opts.irm, plt: opts.plt_format(), sid_reg: opts.sid_reg };
    let mut image = link_image(&instrumented, &assignment, &cfg)?;
    image.size_report = Some(size_report(p, &instrumented).with_plt(0, image.plt_bytes()));
    Ok(Built { assignment, instrumented, image })
}

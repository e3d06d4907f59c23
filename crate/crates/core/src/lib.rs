//! Fine-grained forward-edge CFI on top of landing-pad hardware, modelled end
//! to end: an assembly-level IR, SID policies, caller/callee instrumentation,
//! PLT/GOT linking, load-time endbr elision and an IBT-enforcing VM.
//!
//! The pipeline is `ir` → `policy` → `weave` → `linkage` → `loader` →
//! `machine`, with `report` rendering the fixed-width tables and `pipeline`
//! running the build stages in one call.

pub mod ir;
pub mod linkage;
pub mod loader;
pub mod machine;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod weave;

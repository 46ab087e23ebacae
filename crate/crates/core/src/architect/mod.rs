//! Structure adaptation: the config DSL, plan compilation, and folding of
//! mergeable injections back into plain weights.

pub mod adapted;
pub mod dsl;
pub mod plan;

pub use adapted::{apply_plan, merge_reparam, restore_adapted, AdaptedModel};
pub use dsl::{parse_config, AdaptSpec, Hook, Method, Mode, ParseError};
pub use plan::{compile_plan, AdaptationPlan, Injection, InjectionKind, Side};

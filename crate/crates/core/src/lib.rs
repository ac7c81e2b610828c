//! Knowledge-base engine for household robotics.
//!
//! The engine keeps everything a robot knows in one concept graph: entity
//! concepts with default property values, concrete instances, value
//! domains, composable functions, and action/skill definitions. On top of
//! the graph sit an environment model (poses, interaction volumes, a
//! location graph over reference frames), a frame-by-frame skill
//! recognizer, an environment differ that maps state changes back to
//! actions, and an offline restructurer that extracts shared concepts and
//! function patterns.
//!
//! Modules, bottom to top:
//!
//! - [`pose`]: unit-quaternion rigid transforms.
//! - [`value`]: runtime values and value domains.
//! - [`hierarchy`]: the concept DAG, instances, default resolution.
//! - [`functions`]: the composable-function interpreter and builtins.
//! - [`acts`]: actions, skills, parameter matching, affordances.
//! - [`environment`]: frames, location graph, interaction volumes, diffing.
//! - [`recognizer`]: skill recognition over pose traces.
//! - [`restructure`]: offline concept/function extraction plans.
//! - [`io`]: the JSON hierarchy/trace formats and validation.
//! - [`cli`]: the command-line interface.

pub mod acts;
pub mod cli;
pub mod environment;
pub mod error;
pub mod functions;
pub mod hierarchy;
pub mod io;
pub mod pose;
pub mod recognizer;
pub mod restructure;
pub mod value;

pub use error::{Diagnostic, EvalError, KbError, PropertyError, Severity};
pub use hierarchy::{ConceptKind, ConceptNode, HierarchyGraph, InstanceRecord};
pub use value::{DomainRef, Location, LocationRef, Value};

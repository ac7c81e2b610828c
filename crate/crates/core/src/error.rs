//! Diagnostics and error types shared across the engine.
//!
//! Validation problems are collected as [`Diagnostic`] records so a load
//! reports every defect at once instead of stopping at the first. Runtime
//! failures (evaluation, recognition, environment updates) use dedicated
//! error enums that carry enough context to name the offending node.

use std::fmt;
use thiserror::Error;

/// Stable machine-readable diagnostic codes. The numeric ranges group by
/// subsystem: 00x graph shape, 01x defaults, 02x functions, 03x actions,
/// 04x skills, 05x instances, 06x document shape.
pub mod codes {
    pub const CYCLIC_PARENTS: &str = "CH001";
    pub const UNKNOWN_PARENT: &str = "CH002";
    pub const MISSING_PARENTS: &str = "CH003";
    pub const DUPLICATE_NAME: &str = "CH004";
    pub const UNKNOWN_DOMAIN: &str = "CH005";
    pub const CONFLICTING_DECLARATION: &str = "CH006";
    pub const UNDECLARED_DEFAULT: &str = "CH010";
    pub const DEFAULT_TYPE_MISMATCH: &str = "CH014";
    pub const UNKNOWN_CALL_TARGET: &str = "CH020";
    pub const CALL_SLOT_MISMATCH: &str = "CH021";
    pub const RECURSIVE_CALL_GRAPH: &str = "CH022";
    pub const BUILTIN_WITH_PROCEDURE: &str = "CH023";
    pub const RESULT_TYPE_MISMATCH: &str = "CH024";
    pub const UNBOUND_REFERENCE: &str = "CH025";
    pub const BAD_FUNCTION_SHAPE: &str = "CH026";
    pub const ACTION_STAGE_TYPE: &str = "CH030";
    pub const MULTIPLE_CHANGES_PER_ENTITY: &str = "CH031";
    pub const BAD_ACTION_SHAPE: &str = "CH032";
    pub const DUPLICATE_MANIPULATION: &str = "CH040";
    pub const BAD_ACTION_ASSOCIATION: &str = "CH041";
    pub const PARTIAL_ACTION_ASSOCIATION: &str = "CH042";
    pub const SKILL_STAGE_TYPE: &str = "CH043";
    pub const CONTRADICTORY_PARAMETER: &str = "CH044";
    pub const BAD_SKILL_SHAPE: &str = "CH045";
    pub const UNKNOWN_MEMBER_CONCEPT: &str = "CH050";
    pub const UNDECLARED_PROPERTY: &str = "CH051";
    pub const VALUE_TYPE_MISMATCH: &str = "CH052";
    pub const AMBIGUOUS_DEFAULTS: &str = "CH053";
    pub const BAD_INSTANCE_SHAPE: &str = "CH054";
    pub const UNKNOWN_INSTANCE: &str = "CH055";
    pub const BAD_DOCUMENT_SHAPE: &str = "CH060";
    pub const UNKNOWN_KEY: &str = "CH061";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Warning => write!(f, "warning"),
            Severity::Error => write!(f, "error"),
        }
    }
}

/// One validation finding, locatable by node name and document path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub code: &'static str,
    pub severity: Severity,
    /// Concept, instance, or function the finding is about.
    pub node: String,
    /// Dotted path into the source document, e.g. `concepts.Pouring.data.check`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn error(code: &'static str, node: &str, path: String, message: String) -> Diagnostic {
        Diagnostic { code, severity: Severity::Error, node: node.to_string(), path, message }
    }

    pub fn warning(code: &'static str, node: &str, path: String, message: String) -> Diagnostic {
        Diagnostic { code, severity: Severity::Warning, node: node.to_string(), path, message }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} [{}] {} (at {})",
            self.code, self.severity, self.node, self.message, self.path
        )
    }
}

/// Errors raised while resolving or mutating instance properties.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropertyError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("property `{property}` is not declared for instance `{instance}`")]
    Undeclared { instance: String, property: String },
    #[error("ambiguous defaults for `{instance}.{property}`: concepts {concepts:?} at distance {distance} disagree")]
    AmbiguousDefaults {
        instance: String,
        property: String,
        concepts: Vec<String>,
        distance: usize,
    },
    #[error("value for `{instance}.{property}` does not fit domain {domain}: {detail}")]
    TypeMismatch { instance: String, property: String, domain: String, detail: String },
    #[error("instance `{0}` would be left with no member concepts")]
    NoMembers(String),
    #[error("hook `{function}` on `{instance}.{property}` failed: {source}")]
    HookFailed {
        function: String,
        instance: String,
        property: String,
        #[source]
        source: Box<EvalError>,
    },
}

/// Errors raised by function evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("function `{0}` has no procedure and no builtin implementation")]
    NoImplementation(String),
    #[error("call to `{function}` is missing argument `{slot}`")]
    MissingArgument { function: String, slot: String },
    #[error("call to `{function}` passes undeclared slot `{slot}`")]
    UnknownSlot { function: String, slot: String },
    #[error("`{function}.{slot}` expects {expected}, got {got}")]
    ArgumentType { function: String, slot: String, expected: String, got: String },
    #[error("unknown-input: `{function}.{slot}` received UNKNOWN")]
    UnknownInput { function: String, slot: String },
    #[error("reference `{0}` is not bound in this evaluation")]
    UnboundReference(String),
    #[error("assignment target `{0}` is not a writable binding or property path")]
    BadAssignTarget(String),
    #[error("property access failed: {0}")]
    Property(#[from] PropertyError),
    #[error("no scene is attached, `{function}` cannot read entity geometry")]
    NoScene { function: String },
    #[error("no pose is known for entity `{0}`")]
    UnknownPose(String),
    #[error("sequence operation on `{function}`: {detail}")]
    Sequence { function: String, detail: String },
    #[error("evaluation produced a value outside {expected}: {got}")]
    ResultType { expected: String, got: String },
    #[error("evaluation exceeded the call-depth limit")]
    DepthExceeded,
}

/// Top-level failure for load and CLI paths.
#[derive(Debug, Error)]
pub enum KbError {
    #[error("IO error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON parse error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation failed with {} error(s)", .0.iter().filter(|d| d.severity == Severity::Error).count())]
    Validation(Vec<Diagnostic>),
    #[error("trace error at line {line}: {detail}")]
    Trace { line: usize, detail: String },
    #[error(transparent)]
    Property(#[from] PropertyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Other(String),
}

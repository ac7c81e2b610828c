//! Runtime values and the value domains they are checked against.
//!
//! Every property declaration names a domain: a primitive (`Number`,
//! `Boolean`, `String`, `Date`, `Location`), a typed sequence
//! (`Sequence<...>`), a concept (the value must reference an instance that
//! is subsumed by it), or the catch-all `ValueDomain`. Values are open
//! world: [`Value::Unknown`] inhabits every domain and is written as JSON
//! `null`.

use crate::hierarchy::HierarchyGraph;
use crate::pose::Pose;
use chrono::NaiveDate;
use std::fmt;

/// Reference frame a [`Location`] is expressed in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum LocationRef {
    /// The fixed world frame.
    Origin,
    /// The named entity's frame.
    Entity(String),
}

impl fmt::Display for LocationRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocationRef::Origin => write!(f, "Origin"),
            LocationRef::Entity(name) => write!(f, "{name}"),
        }
    }
}

/// A pose relative to a reference entity (or the origin).
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub reference: LocationRef,
    pub pose: Pose,
}

impl Location {
    pub fn at_origin(pose: Pose) -> Location {
        Location { reference: LocationRef::Origin, pose }
    }
}

/// Parsed form of a domain reference such as `Number` or `Sequence<Object>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomainRef {
    Number,
    Boolean,
    Text,
    Date,
    Location,
    /// The generic root domain: any value fits.
    Any,
    Sequence(Box<DomainRef>),
    /// A concept name; fitting values are references to subsumed instances.
    Concept(String),
}

impl DomainRef {
    /// Parses the textual domain syntax used in hierarchy files.
    /// Concept names are not resolved here; validation checks they exist.
    pub fn parse(text: &str) -> Result<DomainRef, String> {
        let text = text.trim();
        if text.is_empty() {
            return Err("empty domain reference".to_string());
        }
        if let Some(inner) = text.strip_prefix("Sequence<") {
            let inner = inner
                .strip_suffix('>')
                .ok_or_else(|| format!("unbalanced sequence domain `{text}`"))?;
            return Ok(DomainRef::Sequence(Box::new(DomainRef::parse(inner)?)));
        }
        Ok(match text {
            "Number" => DomainRef::Number,
            "Boolean" => DomainRef::Boolean,
            "String" => DomainRef::Text,
            "Date" => DomainRef::Date,
            "Location" => DomainRef::Location,
            "ValueDomain" => DomainRef::Any,
            name if name.contains(['<', '>']) => {
                return Err(format!("malformed domain reference `{name}`"))
            }
            name => DomainRef::Concept(name.to_string()),
        })
    }
}

impl fmt::Display for DomainRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainRef::Number => write!(f, "Number"),
            DomainRef::Boolean => write!(f, "Boolean"),
            DomainRef::Text => write!(f, "String"),
            DomainRef::Date => write!(f, "Date"),
            DomainRef::Location => write!(f, "Location"),
            DomainRef::Any => write!(f, "ValueDomain"),
            DomainRef::Sequence(inner) => write!(f, "Sequence<{inner}>"),
            DomainRef::Concept(name) => write!(f, "{name}"),
        }
    }
}

/// A runtime value. Properties, function arguments, and skill bindings all
/// carry these.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Boolean(bool),
    Text(String),
    Date(NaiveDate),
    Location(Location),
    /// Ordered list tagged with its element domain.
    Sequence { elem: DomainRef, items: Vec<Value> },
    /// Reference to an instance by name.
    EntityRef(String),
    /// The open-world "not stated" value. Compares equal only to itself.
    Unknown,
}

impl Value {
    pub fn sequence(elem: DomainRef, items: Vec<Value>) -> Value {
        Value::Sequence { elem, items }
    }

    pub fn entity_sequence(concept: &str, names: &[&str]) -> Value {
        Value::Sequence {
            elem: DomainRef::Concept(concept.to_string()),
            items: names.iter().map(|n| Value::EntityRef(n.to_string())).collect(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Number(_) => "Number",
            Value::Boolean(_) => "Boolean",
            Value::Text(_) => "String",
            Value::Date(_) => "Date",
            Value::Location(_) => "Location",
            Value::Sequence { .. } => "Sequence",
            Value::EntityRef(_) => "EntityRef",
            Value::Unknown => "UNKNOWN",
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Value::Unknown)
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_entity(&self) -> Option<&str> {
        match self {
            Value::EntityRef(name) => Some(name),
            _ => None,
        }
    }

    /// Deterministic key string: injective on values, usable for grouping
    /// and ordering where `Value` itself is not `Ord`.
    pub fn canonical_key(&self) -> String {
        match self {
            Value::Number(n) => format!("n:{n:?}"),
            Value::Boolean(b) => format!("b:{b}"),
            Value::Text(t) => format!("t:{t:?}"),
            Value::Date(d) => format!("d:{d}"),
            Value::Location(l) => {
                let a = l.pose.to_array();
                format!("l:{}:{:?}", l.reference, a)
            }
            Value::Sequence { items, .. } => {
                let parts: Vec<String> = items.iter().map(|v| v.canonical_key()).collect();
                format!("s:[{}]", parts.join(","))
            }
            Value::EntityRef(name) => format!("e:{name}"),
            Value::Unknown => "u".to_string(),
        }
    }
}

/// Checks that `value` inhabits `domain`. [`Value::Unknown`] fits every
/// domain. Entity references must name a loaded instance subsumed by the
/// domain concept. Returns a human-readable mismatch description.
pub fn typecheck_value(
    graph: &HierarchyGraph,
    value: &Value,
    domain: &DomainRef,
) -> Result<(), String> {
    if value.is_unknown() {
        return Ok(());
    }
    match (domain, value) {
        (DomainRef::Any, _) => Ok(()),
        (DomainRef::Number, Value::Number(_)) => Ok(()),
        (DomainRef::Boolean, Value::Boolean(_)) => Ok(()),
        (DomainRef::Text, Value::Text(_)) => Ok(()),
        (DomainRef::Date, Value::Date(_)) => Ok(()),
        (DomainRef::Location, Value::Location(_)) => Ok(()),
        (DomainRef::Sequence(elem), Value::Sequence { items, .. }) => {
            for (i, item) in items.iter().enumerate() {
                typecheck_value(graph, item, elem)
                    .map_err(|e| format!("element {i}: {e}"))?;
            }
            Ok(())
        }
        (DomainRef::Concept(concept), Value::EntityRef(name)) => {
            if !graph.has_instance(name) {
                return Err(format!("`{name}` is not a known instance"));
            }
            if graph.is_subconcept(name, concept) {
                Ok(())
            } else {
                Err(format!("instance `{name}` is not subsumed by `{concept}`"))
            }
        }
        _ => Err(format!("{} does not fit domain {domain}", value.kind_name())),
    }
}

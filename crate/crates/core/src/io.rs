//! Document IO: the JSON knowledge-base format, the value codec, and the
//! pose-trace reader.
//!
//! A knowledge-base document has two top-level arrays, `concepts` and
//! `instances`. A concept entry declares parents, property domains,
//! defaults, and hooks; entries carrying a `function`, `action`, or `skill`
//! payload land in the matching side table. Loading is two-pass so
//! procedures and defaults can reference anything declared anywhere in the
//! document. Every defect is collected as a [`Diagnostic`]; strict mode
//! fails on any error-severity finding, lenient mode returns the usable
//! part of the graph along with the findings.
//!
//! Values encode domain-directed: JSON `null` is UNKNOWN, strings decode to
//! text, dates, or entity references depending on the declared domain, and
//! locations accept either a bare 7-element pose array (origin frame) or
//! `{"reference": ..., "pose": [...]}`.
//!
//! Traces are JSON lines, one frame per line:
//! `{"timestamp": t, "entities": {name: pose}, "hands": {name: [x,y,z]},
//! "contacts": [[a, b], ...]}`. A missing `contacts` key means contacts
//! were not observed (the geometric fallback applies); an empty array means
//! nothing touches.

use crate::acts::{ActionAssociation, ActionDef, ExtractWhen, ParamSpec, SkillDef};
use crate::environment::Frame;
use crate::error::{codes, Diagnostic, KbError, Severity};
use crate::functions::{
    validate_functions, BuiltinRegistry, Call, FunctionDef, ProcExpr, RefPath,
};
use crate::hierarchy::{ConceptKind, ConceptNode, HierarchyGraph, InstanceRecord};
use crate::pose::Pose;
use crate::value::{typecheck_value, DomainRef, Location, LocationRef, Value};
use chrono::NaiveDate;
use serde_json::{json, Map, Value as Json};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Encodes a value for export. The encoding is domain-erased (sequences
/// lose their element domain, entity references become plain strings);
/// decoding recovers the tags from the declared domain.
pub fn encode_value(value: &Value) -> Json {
    match value {
        Value::Number(n) => serde_json::Number::from_f64(*n).map_or(Json::Null, Json::Number),
        Value::Boolean(b) => Json::Bool(*b),
        Value::Text(t) => Json::String(t.clone()),
        Value::Date(d) => Json::String(d.format(DATE_FORMAT).to_string()),
        Value::Location(l) => json!({
            "reference": l.reference.to_string(),
            "pose": l.pose.to_array().to_vec(),
        }),
        Value::Sequence { items, .. } => Json::Array(items.iter().map(encode_value).collect()),
        Value::EntityRef(name) => Json::String(name.clone()),
        Value::Unknown => Json::Null,
    }
}

/// Decodes a JSON value against a declared domain. `null` is UNKNOWN in
/// every domain. Instance existence is not checked here; the validation
/// pass typechecks against the graph.
pub fn decode_value(domain: &DomainRef, json: &Json) -> Result<Value, String> {
    if json.is_null() {
        return Ok(Value::Unknown);
    }
    match domain {
        DomainRef::Number => json
            .as_f64()
            .map(Value::Number)
            .ok_or_else(|| format!("expected a number, got {json}")),
        DomainRef::Boolean => json
            .as_bool()
            .map(Value::Boolean)
            .ok_or_else(|| format!("expected a boolean, got {json}")),
        DomainRef::Text => json
            .as_str()
            .map(|s| Value::Text(s.to_string()))
            .ok_or_else(|| format!("expected a string, got {json}")),
        DomainRef::Date => {
            let text = json.as_str().ok_or_else(|| format!("expected a date string, got {json}"))?;
            NaiveDate::parse_from_str(text, DATE_FORMAT)
                .map(Value::Date)
                .map_err(|e| format!("bad date `{text}`: {e}"))
        }
        DomainRef::Location => decode_location(json).map(Value::Location),
        DomainRef::Sequence(elem) => {
            let items = json
                .as_array()
                .ok_or_else(|| format!("expected an array, got {json}"))?;
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                out.push(decode_value(elem, item).map_err(|e| format!("element {i}: {e}"))?);
            }
            Ok(Value::Sequence { elem: (**elem).clone(), items: out })
        }
        DomainRef::Concept(_) => json
            .as_str()
            .map(|s| Value::EntityRef(s.to_string()))
            .ok_or_else(|| format!("expected an instance name, got {json}")),
        DomainRef::Any => infer_value(json),
    }
}

/// Best-effort decoding when no domain is declared: strings stay text,
/// arrays become `Sequence<ValueDomain>`.
pub fn infer_value(json: &Json) -> Result<Value, String> {
    match json {
        Json::Null => Ok(Value::Unknown),
        Json::Bool(b) => Ok(Value::Boolean(*b)),
        Json::Number(n) => n
            .as_f64()
            .map(Value::Number)
            .ok_or_else(|| format!("non-finite number {n}")),
        Json::String(s) => Ok(Value::Text(s.clone())),
        Json::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                out.push(infer_value(item).map_err(|e| format!("element {i}: {e}"))?);
            }
            Ok(Value::Sequence { elem: DomainRef::Any, items: out })
        }
        Json::Object(map) if map.contains_key("pose") => decode_location(json).map(Value::Location),
        Json::Object(_) => Err("cannot infer a value domain for an object".to_string()),
    }
}

fn decode_location(json: &Json) -> Result<Location, String> {
    match json {
        Json::Array(_) => Ok(Location::at_origin(decode_pose(json)?)),
        Json::Object(map) => {
            let pose = decode_pose(map.get("pose").ok_or("location object needs a `pose` key")?)?;
            let reference = match map.get("reference") {
                None => LocationRef::Origin,
                Some(Json::String(s)) if s == "Origin" => LocationRef::Origin,
                Some(Json::String(s)) => LocationRef::Entity(s.clone()),
                Some(other) => return Err(format!("bad location reference {other}")),
            };
            for key in map.keys() {
                if key != "pose" && key != "reference" {
                    return Err(format!("unexpected location key `{key}`"));
                }
            }
            Ok(Location { reference, pose })
        }
        other => Err(format!("expected a location, got {other}")),
    }
}

fn decode_pose(json: &Json) -> Result<Pose, String> {
    let items = json.as_array().ok_or_else(|| format!("expected a pose array, got {json}"))?;
    let mut values = Vec::with_capacity(items.len());
    for item in items {
        values.push(item.as_f64().ok_or_else(|| format!("non-numeric pose element {item}"))?);
    }
    Pose::from_array(&values).map_err(|e| e.to_string())
}

/// Loads a knowledge-base document from disk. See [`load_hierarchy_str`].
pub fn load_hierarchy(
    path: &Path,
    strict: bool,
) -> Result<(HierarchyGraph, Vec<Diagnostic>), KbError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    load_hierarchy_str(&text, strict, &path.display().to_string())
}

/// Parses and validates a knowledge-base document. In strict mode any
/// error-severity diagnostic fails the load; lenient mode skips defective
/// entries and returns the rest, still failing on structural breakage
/// (unknown parents, parent cycles) that would leave the graph unusable.
pub fn load_hierarchy_str(
    text: &str,
    strict: bool,
    path: &str,
) -> Result<(HierarchyGraph, Vec<Diagnostic>), KbError> {
    let doc: Json = serde_json::from_str(text)
        .map_err(|source| KbError::Json { path: path.to_string(), source })?;
    let mut diags = Vec::new();
    let graph = parse_document(&doc, &mut diags)?;
    if strict && diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(KbError::Validation(diags));
    }
    Ok((graph, diags))
}

fn parse_document(doc: &Json, diags: &mut Vec<Diagnostic>) -> Result<HierarchyGraph, KbError> {
    let Some(root) = doc.as_object() else {
        return Err(KbError::Validation(vec![Diagnostic::error(
            codes::BAD_DOCUMENT_SHAPE,
            "document",
            "$".to_string(),
            "top level must be an object with `concepts` and `instances`".to_string(),
        )]));
    };
    for key in root.keys() {
        if key != "concepts" && key != "instances" {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                "document",
                key.clone(),
                format!("unknown top-level key `{key}`"),
            ));
        }
    }

    let mut graph = HierarchyGraph::new();
    let mut deferred_defaults: Vec<(String, String, Json)> = Vec::new();
    let mut deferred_procedures: Vec<(String, Json)> = Vec::new();
    let mut deferred_values: Vec<(String, String, Json)> = Vec::new();

    if let Some(concepts) = root.get("concepts") {
        let Some(entries) = concepts.as_array() else {
            return Err(KbError::Validation(vec![shape_error(
                "document",
                "concepts",
                "`concepts` must be an array",
            )]));
        };
        for (i, entry) in entries.iter().enumerate() {
            parse_concept_entry(
                entry,
                i,
                &mut graph,
                diags,
                &mut deferred_defaults,
                &mut deferred_procedures,
            );
        }
    }
    if let Some(instances) = root.get("instances") {
        let Some(entries) = instances.as_array() else {
            return Err(KbError::Validation(vec![shape_error(
                "document",
                "instances",
                "`instances` must be an array",
            )]));
        };
        for (i, entry) in entries.iter().enumerate() {
            parse_instance_entry(entry, i, &mut graph, diags, &mut deferred_values);
        }
    }

    if let Err(structural) = graph.rebuild_index() {
        diags.extend(structural);
        return Err(KbError::Validation(std::mem::take(diags)));
    }
    lint_roots(&graph, diags);

    for (instance, property, raw) in deferred_values {
        let path = format!("instances.{instance}.propertyValues.{property}");
        let Some(domain) = graph.declared_domain(&instance, &property).cloned() else {
            diags.push(Diagnostic::error(
                codes::UNDECLARED_PROPERTY,
                &instance,
                path,
                format!("no member concept declares property `{property}`"),
            ));
            continue;
        };
        match decode_value(&domain, &raw) {
            Ok(value) => {
                if let Some(record) = graph.instance_mut(&instance) {
                    record.property_values.insert(property.clone(), value);
                }
            }
            Err(detail) => diags.push(Diagnostic::error(
                codes::VALUE_TYPE_MISMATCH,
                &instance,
                path,
                format!("value does not fit {domain}: {detail}"),
            )),
        }
    }
    for instance in graph.instance_names().map(str::to_string).collect::<Vec<_>>() {
        let record = graph.instance(&instance).cloned().expect("instance listed");
        for (property, value) in &record.property_values {
            let Some(domain) = graph.declared_domain(&instance, property) else {
                continue;
            };
            if let Err(detail) = typecheck_value(&graph, value, domain) {
                diags.push(Diagnostic::error(
                    codes::VALUE_TYPE_MISMATCH,
                    &instance,
                    format!("instances.{instance}.propertyValues.{property}"),
                    detail,
                ));
            }
        }
    }

    for (concept, property, raw) in deferred_defaults {
        let path = format!("concepts.{concept}.properties.{property}.default");
        let Some(domain) = graph.declared_domain_for_concept(&concept, &property).cloned() else {
            diags.push(Diagnostic::error(
                codes::UNDECLARED_DEFAULT,
                &concept,
                path,
                format!("default for `{property}`, which no ancestor declares"),
            ));
            continue;
        };
        let value = match decode_value(&domain, &raw) {
            Ok(value) => value,
            Err(detail) => {
                diags.push(Diagnostic::error(
                    codes::DEFAULT_TYPE_MISMATCH,
                    &concept,
                    path,
                    format!("default does not fit {domain}: {detail}"),
                ));
                continue;
            }
        };
        if let Err(detail) = typecheck_value(&graph, &value, &domain) {
            diags.push(Diagnostic::error(
                codes::DEFAULT_TYPE_MISMATCH,
                &concept,
                path,
                detail,
            ));
            continue;
        }
        if let Some(node) = graph.node_mut(&concept) {
            node.default_values.insert(property, value);
        }
    }

    for (function, raw) in deferred_procedures {
        match decode_procedure(&graph, &function, &raw) {
            Ok(procedure) => {
                if let Some(def) = graph.function_mut(&function) {
                    def.procedure = Some(procedure);
                }
            }
            Err(detail) => diags.push(Diagnostic::error(
                codes::BAD_FUNCTION_SHAPE,
                &function,
                format!("concepts.{function}.function.procedure"),
                detail,
            )),
        }
    }

    let builtins = BuiltinRegistry::standard();
    diags.extend(validate_functions(&graph, &builtins));
    diags.extend(crate::acts::validate_acts(&graph));
    Ok(graph)
}

fn lint_roots(graph: &HierarchyGraph, diags: &mut Vec<Diagnostic>) {
    let roots: Vec<&str> = graph
        .concepts()
        .filter(|n| {
            n.direct_parents.is_empty()
                && matches!(
                    n.kind,
                    ConceptKind::EntityConcept | ConceptKind::InstanceConcept | ConceptKind::ValueDomain
                )
        })
        .map(|n| n.name.as_str())
        .collect();
    if roots.len() > 1 {
        for name in &roots {
            diags.push(Diagnostic::warning(
                codes::MISSING_PARENTS,
                name,
                format!("concepts.{name}.direct_parents"),
                format!("one of {} parentless concepts: {}", roots.len(), roots.join(", ")),
            ));
        }
    }
}

fn shape_error(node: &str, path: &str, message: &str) -> Diagnostic {
    Diagnostic::error(codes::BAD_DOCUMENT_SHAPE, node, path.to_string(), message.to_string())
}

fn parse_concept_entry(
    entry: &Json,
    index: usize,
    graph: &mut HierarchyGraph,
    diags: &mut Vec<Diagnostic>,
    deferred_defaults: &mut Vec<(String, String, Json)>,
    deferred_procedures: &mut Vec<(String, Json)>,
) {
    let fallback = format!("concepts[{index}]");
    let Some(map) = entry.as_object() else {
        diags.push(shape_error("document", &fallback, "concept entry must be an object"));
        return;
    };
    let Some(name) = map.get("name").and_then(Json::as_str) else {
        diags.push(shape_error("document", &fallback, "concept entry needs a string `name`"));
        return;
    };
    if graph.has_concept(name) || graph.has_instance(name) {
        diags.push(Diagnostic::error(
            codes::DUPLICATE_NAME,
            name,
            format!("concepts.{name}"),
            "name already declared".to_string(),
        ));
        return;
    }
    let allowed =
        ["name", "direct_parents", "kind", "properties", "hooks", "function", "action", "skill"];
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                name,
                format!("concepts.{name}.{key}"),
                format!("unknown concept key `{key}`"),
            ));
        }
    }

    let mut parents: Vec<&str> = Vec::new();
    if let Some(raw) = map.get("direct_parents") {
        match raw.as_array() {
            Some(items) => {
                for item in items {
                    match item.as_str() {
                        Some(parent) => parents.push(parent),
                        None => diags.push(shape_error(
                            name,
                            &format!("concepts.{name}.direct_parents"),
                            "parents must be strings",
                        )),
                    }
                }
            }
            None => diags.push(shape_error(
                name,
                &format!("concepts.{name}.direct_parents"),
                "`direct_parents` must be an array of concept names",
            )),
        }
    }

    let declared_kind = map.get("kind").and_then(Json::as_str);
    let payload_kind = if map.contains_key("function") {
        Some(ConceptKind::Function)
    } else if map.contains_key("action") {
        Some(ConceptKind::Action)
    } else if map.contains_key("skill") {
        Some(ConceptKind::Skill)
    } else {
        None
    };
    let kind = match (declared_kind, payload_kind) {
        (None, Some(kind)) => kind,
        (None, None) => ConceptKind::EntityConcept,
        (Some(text), payload) => {
            let named = match text {
                "entity" => Some(ConceptKind::EntityConcept),
                "instance" => Some(ConceptKind::InstanceConcept),
                "domain" => Some(ConceptKind::ValueDomain),
                "function" => Some(ConceptKind::Function),
                "action" => Some(ConceptKind::Action),
                "skill" => Some(ConceptKind::Skill),
                _ => None,
            };
            match named {
                Some(kind) if payload.is_none() || payload == Some(kind) => kind,
                Some(kind) => {
                    diags.push(Diagnostic::error(
                        codes::CONFLICTING_DECLARATION,
                        name,
                        format!("concepts.{name}.kind"),
                        format!("kind `{text}` conflicts with the entry's payload"),
                    ));
                    kind
                }
                None => {
                    diags.push(Diagnostic::error(
                        codes::CONFLICTING_DECLARATION,
                        name,
                        format!("concepts.{name}.kind"),
                        format!("unknown kind `{text}`"),
                    ));
                    payload.unwrap_or(ConceptKind::EntityConcept)
                }
            }
        }
    };

    let mut node = ConceptNode::new(name, &parents).kind(kind);
    if let Some(raw) = map.get("properties") {
        match raw.as_object() {
            Some(properties) => {
                for (property, decl) in properties {
                    parse_property_decl(name, property, decl, &mut node, diags, deferred_defaults);
                }
            }
            None => diags.push(shape_error(
                name,
                &format!("concepts.{name}.properties"),
                "`properties` must be an object",
            )),
        }
    }
    if let Some(raw) = map.get("hooks") {
        match raw.as_object() {
            Some(hooks) => {
                for (property, function) in hooks {
                    match function.as_str() {
                        Some(function) => {
                            node.hooks.insert(property.clone(), function.to_string());
                        }
                        None => diags.push(shape_error(
                            name,
                            &format!("concepts.{name}.hooks.{property}"),
                            "hook target must be a function name",
                        )),
                    }
                }
            }
            None => diags.push(shape_error(
                name,
                &format!("concepts.{name}.hooks"),
                "`hooks` must be an object",
            )),
        }
    }
    graph.add_concept(node);

    if let Some(raw) = map.get("function") {
        match parse_function_payload(name, raw, diags) {
            Some((def, procedure)) => {
                graph.add_function(def);
                if let Some(procedure) = procedure {
                    deferred_procedures.push((name.to_string(), procedure));
                }
            }
            None => {}
        }
    }
    if let Some(raw) = map.get("action") {
        if let Some(def) = parse_action_payload(name, raw, diags) {
            graph.add_action(def);
        }
    }
    if let Some(raw) = map.get("skill") {
        if let Some(def) = parse_skill_payload(name, raw, diags) {
            graph.add_skill(def);
        }
    }
}

fn parse_property_decl(
    concept: &str,
    property: &str,
    decl: &Json,
    node: &mut ConceptNode,
    diags: &mut Vec<Diagnostic>,
    deferred_defaults: &mut Vec<(String, String, Json)>,
) {
    let path = format!("concepts.{concept}.properties.{property}");
    let (domain_text, default) = match decl {
        Json::String(domain) => (Some(domain.as_str()), None),
        Json::Object(map) => {
            for key in map.keys() {
                if key != "domain" && key != "default" {
                    diags.push(Diagnostic::error(
                        codes::UNKNOWN_KEY,
                        concept,
                        format!("{path}.{key}"),
                        format!("unknown property key `{key}`"),
                    ));
                }
            }
            let domain = match map.get("domain") {
                None => None,
                Some(Json::String(s)) => Some(s.as_str()),
                Some(_) => {
                    diags.push(shape_error(concept, &path, "`domain` must be a string"));
                    return;
                }
            };
            (domain, map.get("default"))
        }
        _ => {
            diags.push(shape_error(
                concept,
                &path,
                "property declaration must be a domain string or an object",
            ));
            return;
        }
    };
    if let Some(text) = domain_text {
        match DomainRef::parse(text) {
            Ok(domain) => {
                node.property_decls.insert(property.to_string(), domain);
            }
            Err(detail) => diags.push(Diagnostic::error(
                codes::UNKNOWN_DOMAIN,
                concept,
                path.clone(),
                detail,
            )),
        }
    }
    if let Some(default) = default {
        deferred_defaults.push((concept.to_string(), property.to_string(), default.clone()));
    }
    if domain_text.is_none() && default.is_none() {
        diags.push(shape_error(concept, &path, "property declares neither domain nor default"));
    }
}

fn parse_function_payload(
    name: &str,
    raw: &Json,
    diags: &mut Vec<Diagnostic>,
) -> Option<(FunctionDef, Option<Json>)> {
    let path = format!("concepts.{name}.function");
    let Some(map) = raw.as_object() else {
        diags.push(shape_error(name, &path, "`function` must be an object"));
        return None;
    };
    for key in map.keys() {
        if !["arguments", "result", "procedure", "builtin"].contains(&key.as_str()) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                name,
                format!("{path}.{key}"),
                format!("unknown function key `{key}`"),
            ));
        }
    }
    let mut def = FunctionDef::new(name);
    if let Some(arguments) = map.get("arguments") {
        let Some(items) = arguments.as_array() else {
            diags.push(shape_error(name, &format!("{path}.arguments"), "must be an array"));
            return None;
        };
        for (i, item) in items.iter().enumerate() {
            let arg_path = format!("{path}.arguments[{i}]");
            let Some(arg) = item.as_object() else {
                diags.push(shape_error(name, &arg_path, "argument must be an object"));
                return None;
            };
            let (Some(arg_name), Some(domain_text)) = (
                arg.get("name").and_then(Json::as_str),
                arg.get("domain").and_then(Json::as_str),
            ) else {
                diags.push(shape_error(name, &arg_path, "argument needs `name` and `domain`"));
                return None;
            };
            match DomainRef::parse(domain_text) {
                Ok(domain) => def = def.arg(arg_name, domain),
                Err(detail) => {
                    diags.push(Diagnostic::error(codes::UNKNOWN_DOMAIN, name, arg_path, detail));
                    return None;
                }
            }
        }
    }
    if let Some(result) = map.get("result") {
        let Some(text) = result.as_str() else {
            diags.push(shape_error(name, &format!("{path}.result"), "must be a domain string"));
            return None;
        };
        match DomainRef::parse(text) {
            Ok(domain) => def = def.result(domain),
            Err(detail) => {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_DOMAIN,
                    name,
                    format!("{path}.result"),
                    detail,
                ));
                return None;
            }
        }
    }
    let procedure = match map.get("procedure") {
        None | Some(Json::Null) => None,
        Some(raw) => Some(raw.clone()),
    };
    Some((def, procedure))
}

fn parse_param_specs(
    name: &str,
    raw: &Json,
    path: &str,
    diags: &mut Vec<Diagnostic>,
) -> Option<Vec<(String, ParamSpec)>> {
    let Some(items) = raw.as_array() else {
        diags.push(shape_error(name, path, "parameter list must be an array"));
        return None;
    };
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let item_path = format!("{path}[{i}]");
        let Some(map) = item.as_object() else {
            diags.push(shape_error(name, &item_path, "parameter must be an object"));
            return None;
        };
        let Some(param) = map.get("name").and_then(Json::as_str) else {
            diags.push(shape_error(name, &item_path, "parameter needs a string `name`"));
            return None;
        };
        let read_list = |key: &str| -> Option<Vec<String>> {
            match map.get(key) {
                None => Some(Vec::new()),
                Some(Json::Array(items)) => items
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>(),
                Some(_) => None,
            }
        };
        let (Some(required), Some(restricted)) = (read_list("concepts"), read_list("not")) else {
            diags.push(shape_error(
                name,
                &item_path,
                "`concepts` and `not` must be arrays of concept names",
            ));
            return None;
        };
        for key in map.keys() {
            if !["name", "concepts", "not"].contains(&key.as_str()) {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_KEY,
                    name,
                    format!("{item_path}.{key}"),
                    format!("unknown parameter key `{key}`"),
                ));
            }
        }
        out.push((param.to_string(), ParamSpec { required, restricted }));
    }
    Some(out)
}

fn parse_value_params(
    name: &str,
    raw: &Json,
    path: &str,
    diags: &mut Vec<Diagnostic>,
) -> Option<BTreeMap<String, DomainRef>> {
    let Some(map) = raw.as_object() else {
        diags.push(shape_error(name, path, "`values` must map parameter names to domains"));
        return None;
    };
    let mut out = BTreeMap::new();
    for (param, domain) in map {
        let Some(text) = domain.as_str() else {
            diags.push(shape_error(name, &format!("{path}.{param}"), "domain must be a string"));
            return None;
        };
        match DomainRef::parse(text) {
            Ok(domain) => {
                out.insert(param.clone(), domain);
            }
            Err(detail) => {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_DOMAIN,
                    name,
                    format!("{path}.{param}"),
                    detail,
                ));
                return None;
            }
        }
    }
    Some(out)
}

fn parse_action_payload(name: &str, raw: &Json, diags: &mut Vec<Diagnostic>) -> Option<ActionDef> {
    let path = format!("concepts.{name}.action");
    let Some(map) = raw.as_object() else {
        diags.push(shape_error(name, &path, "`action` must be an object"));
        return None;
    };
    for key in map.keys() {
        if !["parameters", "pre", "eff"].contains(&key.as_str()) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                name,
                format!("{path}.{key}"),
                format!("unknown action key `{key}`"),
            ));
        }
    }
    let Some(eff) = map.get("eff").and_then(Json::as_str) else {
        diags.push(Diagnostic::error(
            codes::BAD_ACTION_SHAPE,
            name,
            format!("{path}.eff"),
            "action needs an `eff` function".to_string(),
        ));
        return None;
    };
    let mut def = ActionDef::new(name, eff);
    if let Some(pre) = map.get("pre") {
        match pre.as_str() {
            Some(pre) => def = def.pre(pre),
            None => {
                diags.push(shape_error(name, &format!("{path}.pre"), "must be a function name"));
                return None;
            }
        }
    }
    if let Some(parameters) = map.get("parameters") {
        let Some(param_map) = parameters.as_object() else {
            diags.push(shape_error(name, &format!("{path}.parameters"), "must be an object"));
            return None;
        };
        for key in param_map.keys() {
            if !["entities", "values"].contains(&key.as_str()) {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_KEY,
                    name,
                    format!("{path}.parameters.{key}"),
                    format!("unknown parameter group `{key}`"),
                ));
            }
        }
        if let Some(entities) = param_map.get("entities") {
            def.entity_params =
                parse_param_specs(name, entities, &format!("{path}.parameters.entities"), diags)?;
        }
        if let Some(values) = param_map.get("values") {
            def.value_params =
                parse_value_params(name, values, &format!("{path}.parameters.values"), diags)?;
        }
    }
    Some(def)
}

fn parse_skill_payload(name: &str, raw: &Json, diags: &mut Vec<Diagnostic>) -> Option<SkillDef> {
    let path = format!("concepts.{name}.skill");
    let Some(map) = raw.as_object() else {
        diags.push(shape_error(name, &path, "`skill` must be an object"));
        return None;
    };
    let allowed =
        ["parameters", "pre", "check", "succ", "eff", "actions", "extractors", "behavior"];
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                name,
                format!("{path}.{key}"),
                format!("unknown skill key `{key}`"),
            ));
        }
    }
    let Some(check) = map.get("check").and_then(Json::as_str) else {
        diags.push(Diagnostic::error(
            codes::BAD_SKILL_SHAPE,
            name,
            format!("{path}.check"),
            "skill needs a `check` function".to_string(),
        ));
        return None;
    };
    let mut def = SkillDef::new(name, check);
    for (stage, set) in [
        ("pre", &mut def.pre as &mut Option<String>),
        ("succ", &mut def.succ),
        ("eff", &mut def.eff),
    ] {
        if let Some(raw) = map.get(stage) {
            match raw.as_str() {
                Some(function) => *set = Some(function.to_string()),
                None => {
                    diags.push(shape_error(
                        name,
                        &format!("{path}.{stage}"),
                        "must be a function name",
                    ));
                    return None;
                }
            }
        }
    }
    if let Some(parameters) = map.get("parameters") {
        let Some(param_map) = parameters.as_object() else {
            diags.push(shape_error(name, &format!("{path}.parameters"), "must be an object"));
            return None;
        };
        for key in param_map.keys() {
            if !["agents", "entities", "values"].contains(&key.as_str()) {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_KEY,
                    name,
                    format!("{path}.parameters.{key}"),
                    format!("unknown parameter group `{key}`"),
                ));
            }
        }
        if let Some(agents) = param_map.get("agents") {
            def.agent_params =
                parse_param_specs(name, agents, &format!("{path}.parameters.agents"), diags)?;
        }
        if let Some(entities) = param_map.get("entities") {
            def.entity_params =
                parse_param_specs(name, entities, &format!("{path}.parameters.entities"), diags)?;
        }
        if let Some(values) = param_map.get("values") {
            def.value_params =
                parse_value_params(name, values, &format!("{path}.parameters.values"), diags)?;
        }
    }
    if let Some(actions) = map.get("actions") {
        let Some(items) = actions.as_array() else {
            diags.push(shape_error(name, &format!("{path}.actions"), "must be an array"));
            return None;
        };
        for (i, item) in items.iter().enumerate() {
            let assoc_path = format!("{path}.actions[{i}]");
            let Some(assoc) = item.as_object() else {
                diags.push(shape_error(name, &assoc_path, "association must be an object"));
                return None;
            };
            let Some(action) = assoc.get("action").and_then(Json::as_str) else {
                diags.push(shape_error(name, &assoc_path, "association needs an `action` name"));
                return None;
            };
            let Some(mapping) = assoc.get("map").and_then(Json::as_object) else {
                diags.push(shape_error(name, &assoc_path, "association needs a `map` object"));
                return None;
            };
            let mut pairs = BTreeMap::new();
            for (source, target) in mapping {
                let Some(target) = target.as_str() else {
                    diags.push(shape_error(
                        name,
                        &format!("{assoc_path}.map.{source}"),
                        "map target must be an action parameter name",
                    ));
                    return None;
                };
                pairs.insert(source.clone(), target.to_string());
            }
            def.action_assoc.push(ActionAssociation { action: action.to_string(), param_map: pairs });
        }
    }
    if let Some(extractors) = map.get("extractors") {
        let Some(entries) = extractors.as_object() else {
            diags.push(shape_error(name, &format!("{path}.extractors"), "must be an object"));
            return None;
        };
        for (param, spec) in entries {
            let spec_path = format!("{path}.extractors.{param}");
            let (source, when) = match spec {
                Json::String(source) => (source.clone(), ExtractWhen::Finalization),
                Json::Object(map) => {
                    let Some(source) = map.get("source").and_then(Json::as_str) else {
                        diags.push(shape_error(name, &spec_path, "extractor needs a `source`"));
                        return None;
                    };
                    let when = match map.get("at").and_then(Json::as_str) {
                        None | Some("finalization") => ExtractWhen::Finalization,
                        Some("activation") => ExtractWhen::Activation,
                        Some(other) => {
                            diags.push(shape_error(
                                name,
                                &format!("{spec_path}.at"),
                                &format!("unknown extraction time `{other}`"),
                            ));
                            return None;
                        }
                    };
                    (source.to_string(), when)
                }
                _ => {
                    diags.push(shape_error(name, &spec_path, "extractor must be a source or object"));
                    return None;
                }
            };
            def = def.extract(param, &source, when);
        }
    }
    if let Some(behavior) = map.get("behavior") {
        def.behavior = Some(behavior.clone());
    }
    Some(def)
}

fn parse_instance_entry(
    entry: &Json,
    index: usize,
    graph: &mut HierarchyGraph,
    diags: &mut Vec<Diagnostic>,
    deferred_values: &mut Vec<(String, String, Json)>,
) {
    let fallback = format!("instances[{index}]");
    let Some(map) = entry.as_object() else {
        diags.push(shape_error("document", &fallback, "instance entry must be an object"));
        return;
    };
    let Some(name) = map.get("name").and_then(Json::as_str) else {
        diags.push(shape_error("document", &fallback, "instance entry needs a string `name`"));
        return;
    };
    if graph.has_concept(name) || graph.has_instance(name) {
        diags.push(Diagnostic::error(
            codes::DUPLICATE_NAME,
            name,
            format!("instances.{name}"),
            "name already declared".to_string(),
        ));
        return;
    }
    for key in map.keys() {
        if !["name", "members", "propertyValues", "surfaces", "geometryData"].contains(&key.as_str()) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                name,
                format!("instances.{name}.{key}"),
                format!("unknown instance key `{key}`"),
            ));
        }
    }
    let members: Vec<&str> = match map.get("members").and_then(Json::as_array) {
        Some(items) => {
            let mut members = Vec::new();
            for item in items {
                match item.as_str() {
                    Some(member) => members.push(member),
                    None => {
                        diags.push(shape_error(
                            name,
                            &format!("instances.{name}.members"),
                            "members must be concept names",
                        ));
                        return;
                    }
                }
            }
            members
        }
        None => {
            diags.push(Diagnostic::error(
                codes::BAD_INSTANCE_SHAPE,
                name,
                format!("instances.{name}.members"),
                "instance needs a `members` array".to_string(),
            ));
            return;
        }
    };
    if members.is_empty() {
        diags.push(Diagnostic::error(
            codes::BAD_INSTANCE_SHAPE,
            name,
            format!("instances.{name}.members"),
            "instance needs at least one member concept".to_string(),
        ));
        return;
    }
    let mut missing_member = false;
    for member in &members {
        if !graph.has_concept(member) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_MEMBER_CONCEPT,
                name,
                format!("instances.{name}.members"),
                format!("member concept `{member}` is not declared"),
            ));
            missing_member = true;
        }
    }
    if missing_member {
        return;
    }
    let mut record = InstanceRecord::new(name, &members);
    if let Some(raw) = map.get("surfaces") {
        match raw.as_array() {
            Some(items) => {
                for item in items {
                    match item.as_str() {
                        Some(surface) => record.surfaces.push(surface.to_string()),
                        None => diags.push(shape_error(
                            name,
                            &format!("instances.{name}.surfaces"),
                            "surfaces must be instance names",
                        )),
                    }
                }
            }
            None => diags.push(shape_error(
                name,
                &format!("instances.{name}.surfaces"),
                "`surfaces` must be an array",
            )),
        }
    }
    if let Some(geometry) = map.get("geometryData") {
        record.geometry = Some(geometry.clone());
    }
    if let Some(raw) = map.get("propertyValues") {
        match raw.as_object() {
            Some(values) => {
                for (property, value) in values {
                    deferred_values.push((name.to_string(), property.clone(), value.clone()));
                }
            }
            None => diags.push(shape_error(
                name,
                &format!("instances.{name}.propertyValues"),
                "`propertyValues` must be an object",
            )),
        }
    }
    graph.add_instance(record);
}

/// Decodes a procedure: an array of call objects. Literal slot values are
/// decoded against the callee's declared argument domain when the callee is
/// a document-defined function, and inferred otherwise.
fn decode_procedure(
    graph: &HierarchyGraph,
    function: &str,
    raw: &Json,
) -> Result<Vec<Call>, String> {
    let Some(items) = raw.as_array() else {
        return Err("procedure must be an array of calls".to_string());
    };
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        out.push(decode_call(graph, item).map_err(|e| format!("statement {i}: {e}"))?);
    }
    if out.is_empty() {
        return Err(format!("function `{function}` has an empty procedure"));
    }
    Ok(out)
}

pub(crate) fn decode_call(graph: &HierarchyGraph, raw: &Json) -> Result<Call, String> {
    let Some(map) = raw.as_object() else {
        return Err(format!("call must be an object, got {raw}"));
    };
    let Some(function) = map.get("function").and_then(Json::as_str) else {
        return Err("call needs a `function` name".to_string());
    };
    for key in map.keys() {
        if key != "function" && key != "slots" {
            return Err(format!("unknown call key `{key}`"));
        }
    }
    let mut call = Call::new(function);
    if let Some(slots) = map.get("slots") {
        let Some(slots) = slots.as_object() else {
            return Err("`slots` must be an object".to_string());
        };
        for (slot, expr) in slots {
            let domain = graph
                .function(function)
                .and_then(|def| def.argument_domains.get(slot))
                .cloned();
            let expr = decode_expr(graph, expr, domain.as_ref())
                .map_err(|e| format!("slot `{slot}` of `{function}`: {e}"))?;
            call.slots.insert(slot.clone(), expr);
        }
    }
    Ok(call)
}

fn decode_expr(
    graph: &HierarchyGraph,
    raw: &Json,
    domain: Option<&DomainRef>,
) -> Result<ProcExpr, String> {
    if let Some(map) = raw.as_object() {
        if let Some(reference) = map.get("ref") {
            let Some(path) = reference.as_str() else {
                return Err("`ref` must be a string path".to_string());
            };
            if map.len() != 1 {
                return Err("a reference object carries only `ref`".to_string());
            }
            return Ok(ProcExpr::Reference(RefPath::parse(path)));
        }
        if let Some(call) = map.get("call") {
            if map.len() != 1 {
                return Err("a call object carries only `call`".to_string());
            }
            return Ok(ProcExpr::Call(decode_call(graph, call)?));
        }
        if let Some(block) = map.get("block") {
            if map.len() != 1 {
                return Err("a block object carries only `block`".to_string());
            }
            let Some(items) = block.as_array() else {
                return Err("`block` must be an array of calls".to_string());
            };
            let mut calls = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                calls.push(decode_call(graph, item).map_err(|e| format!("block[{i}]: {e}"))?);
            }
            return Ok(ProcExpr::Block(calls));
        }
    }
    let value = match domain {
        Some(domain) => decode_value(domain, raw)?,
        None => infer_value(raw)?,
    };
    Ok(ProcExpr::Literal(value))
}

/// Serializes a graph back into the document format: canonical key order,
/// concepts and instances sorted by name. Loading the output reproduces an
/// equal graph.
pub fn serialize_hierarchy(graph: &HierarchyGraph) -> Json {
    let mut concepts = Vec::new();
    for node in graph.concepts() {
        let mut entry = Map::new();
        entry.insert("name".to_string(), node.name.clone().into());
        if !node.direct_parents.is_empty() {
            entry.insert(
                "direct_parents".to_string(),
                Json::Array(node.direct_parents.iter().map(|p| p.clone().into()).collect()),
            );
        }
        if node.kind != ConceptKind::EntityConcept && concept_payload_kind(node.kind).is_none() {
            entry.insert(
                "kind".to_string(),
                match node.kind {
                    ConceptKind::InstanceConcept => "instance",
                    ConceptKind::ValueDomain => "domain",
                    _ => unreachable!("payload kinds handled separately"),
                }
                .into(),
            );
        }
        let mut properties = Map::new();
        let declared: BTreeSet<&String> = node.property_decls.keys().collect();
        for (property, domain) in &node.property_decls {
            let mut decl = Map::new();
            decl.insert("domain".to_string(), domain.to_string().into());
            if let Some(default) = node.default_values.get(property) {
                decl.insert("default".to_string(), encode_value(default));
            }
            properties.insert(property.clone(), Json::Object(decl));
        }
        for (property, default) in &node.default_values {
            if !declared.contains(property) {
                properties.insert(
                    property.clone(),
                    json!({ "default": encode_value(default) }),
                );
            }
        }
        if !properties.is_empty() {
            entry.insert("properties".to_string(), Json::Object(properties));
        }
        if !node.hooks.is_empty() {
            entry.insert(
                "hooks".to_string(),
                Json::Object(
                    node.hooks.iter().map(|(p, f)| (p.clone(), f.clone().into())).collect(),
                ),
            );
        }
        if let Some(def) = graph.function(&node.name) {
            entry.insert("function".to_string(), encode_function(def));
        }
        if let Some(def) = graph.action(&node.name) {
            entry.insert("action".to_string(), encode_action(def));
        }
        if let Some(def) = graph.skill(&node.name) {
            entry.insert("skill".to_string(), encode_skill(def));
        }
        concepts.push(Json::Object(entry));
    }

    let mut instances = Vec::new();
    for record in graph.instances() {
        let mut entry = Map::new();
        entry.insert("name".to_string(), record.name.clone().into());
        entry.insert(
            "members".to_string(),
            Json::Array(record.member_concepts.iter().map(|m| m.clone().into()).collect()),
        );
        if !record.property_values.is_empty() {
            entry.insert(
                "propertyValues".to_string(),
                Json::Object(
                    record
                        .property_values
                        .iter()
                        .map(|(p, v)| (p.clone(), encode_value(v)))
                        .collect(),
                ),
            );
        }
        if !record.surfaces.is_empty() {
            entry.insert(
                "surfaces".to_string(),
                Json::Array(record.surfaces.iter().map(|s| s.clone().into()).collect()),
            );
        }
        if let Some(geometry) = &record.geometry {
            entry.insert("geometryData".to_string(), geometry.clone());
        }
        instances.push(Json::Object(entry));
    }

    json!({ "concepts": concepts, "instances": instances })
}

fn concept_payload_kind(kind: ConceptKind) -> Option<&'static str> {
    match kind {
        ConceptKind::Function => Some("function"),
        ConceptKind::Action => Some("action"),
        ConceptKind::Skill => Some("skill"),
        _ => None,
    }
}

fn encode_function(def: &FunctionDef) -> Json {
    let mut map = Map::new();
    if !def.argument_order.is_empty() {
        map.insert(
            "arguments".to_string(),
            Json::Array(
                def.argument_order
                    .iter()
                    .map(|name| {
                        json!({
                            "name": name,
                            "domain": def.argument_domains[name].to_string(),
                        })
                    })
                    .collect(),
            ),
        );
    }
    if let Some(result) = &def.result_domain {
        map.insert("result".to_string(), result.to_string().into());
    }
    if let Some(procedure) = &def.procedure {
        map.insert(
            "procedure".to_string(),
            Json::Array(procedure.iter().map(encode_call).collect()),
        );
    }
    Json::Object(map)
}

pub(crate) fn encode_call(call: &Call) -> Json {
    let mut map = Map::new();
    map.insert("function".to_string(), call.function.clone().into());
    if !call.slots.is_empty() {
        map.insert(
            "slots".to_string(),
            Json::Object(call.slots.iter().map(|(s, e)| (s.clone(), encode_expr(e))).collect()),
        );
    }
    Json::Object(map)
}

fn encode_expr(expr: &ProcExpr) -> Json {
    match expr {
        ProcExpr::Literal(value) => encode_value(value),
        ProcExpr::Reference(path) => json!({ "ref": path.to_text() }),
        ProcExpr::Call(call) => json!({ "call": encode_call(call) }),
        ProcExpr::Block(calls) => {
            json!({ "block": calls.iter().map(encode_call).collect::<Vec<_>>() })
        }
    }
}

fn encode_param_specs(params: &[(String, ParamSpec)]) -> Json {
    Json::Array(
        params
            .iter()
            .map(|(name, spec)| {
                let mut map = Map::new();
                map.insert("name".to_string(), name.clone().into());
                map.insert(
                    "concepts".to_string(),
                    Json::Array(spec.required.iter().map(|c| c.clone().into()).collect()),
                );
                if !spec.restricted.is_empty() {
                    map.insert(
                        "not".to_string(),
                        Json::Array(spec.restricted.iter().map(|c| c.clone().into()).collect()),
                    );
                }
                Json::Object(map)
            })
            .collect(),
    )
}

fn encode_value_params(params: &BTreeMap<String, DomainRef>) -> Json {
    Json::Object(params.iter().map(|(p, d)| (p.clone(), d.to_string().into())).collect())
}

fn encode_action(def: &ActionDef) -> Json {
    let mut map = Map::new();
    let mut parameters = Map::new();
    if !def.entity_params.is_empty() {
        parameters.insert("entities".to_string(), encode_param_specs(&def.entity_params));
    }
    if !def.value_params.is_empty() {
        parameters.insert("values".to_string(), encode_value_params(&def.value_params));
    }
    if !parameters.is_empty() {
        map.insert("parameters".to_string(), Json::Object(parameters));
    }
    if let Some(pre) = &def.pre {
        map.insert("pre".to_string(), pre.clone().into());
    }
    map.insert("eff".to_string(), def.eff.clone().into());
    Json::Object(map)
}

fn encode_skill(def: &SkillDef) -> Json {
    let mut map = Map::new();
    let mut parameters = Map::new();
    if !def.agent_params.is_empty() {
        parameters.insert("agents".to_string(), encode_param_specs(&def.agent_params));
    }
    if !def.entity_params.is_empty() {
        parameters.insert("entities".to_string(), encode_param_specs(&def.entity_params));
    }
    if !def.value_params.is_empty() {
        parameters.insert("values".to_string(), encode_value_params(&def.value_params));
    }
    if !parameters.is_empty() {
        map.insert("parameters".to_string(), Json::Object(parameters));
    }
    if let Some(pre) = &def.pre {
        map.insert("pre".to_string(), pre.clone().into());
    }
    map.insert("check".to_string(), def.check.clone().into());
    if let Some(succ) = &def.succ {
        map.insert("succ".to_string(), succ.clone().into());
    }
    if let Some(eff) = &def.eff {
        map.insert("eff".to_string(), eff.clone().into());
    }
    if !def.action_assoc.is_empty() {
        map.insert(
            "actions".to_string(),
            Json::Array(
                def.action_assoc
                    .iter()
                    .map(|assoc| {
                        json!({
                            "action": assoc.action,
                            "map": assoc
                                .param_map
                                .iter()
                                .map(|(s, t)| (s.clone(), Json::String(t.clone())))
                                .collect::<Map<_, _>>(),
                        })
                    })
                    .collect(),
            ),
        );
    }
    if !def.extractors.is_empty() {
        map.insert(
            "extractors".to_string(),
            Json::Object(
                def.extractors
                    .iter()
                    .map(|(param, spec)| {
                        let at = match spec.when {
                            ExtractWhen::Activation => "activation",
                            ExtractWhen::Finalization => "finalization",
                        };
                        (param.clone(), json!({ "source": spec.source, "at": at }))
                    })
                    .collect(),
            ),
        );
    }
    if let Some(behavior) = &def.behavior {
        map.insert("behavior".to_string(), behavior.clone());
    }
    Json::Object(map)
}

/// Reads an environment-state file and overlays it on a copy of `base`.
/// See [`apply_state_str`].
pub fn load_state(base: &HierarchyGraph, path: &Path) -> Result<HierarchyGraph, KbError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    apply_state_str(base, &text, &path.display().to_string())
}

/// Overlays an environment state on a copy of `base`. A state document is
/// the `instances` section of the knowledge-base format reduced to `name`
/// plus `values`: every listed property replaces the instance's stored
/// value, everything unlisted is untouched, and the named instances must
/// already exist. Values are decoded and typechecked against the declared
/// domains; any error fails the overlay.
pub fn apply_state_str(
    base: &HierarchyGraph,
    text: &str,
    path: &str,
) -> Result<HierarchyGraph, KbError> {
    let doc: Json = serde_json::from_str(text)
        .map_err(|source| KbError::Json { path: path.to_string(), source })?;
    let mut diags = Vec::new();
    let mut graph = base.clone();
    let Some(root) = doc.as_object() else {
        return Err(KbError::Validation(vec![shape_error(
            "state",
            "$",
            "state file must be an object with an `instances` array",
        )]));
    };
    for key in root.keys() {
        if key != "instances" {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_KEY,
                "state",
                key.clone(),
                format!("unknown state key `{key}`"),
            ));
        }
    }
    let Some(entries) = root.get("instances").and_then(Json::as_array) else {
        return Err(KbError::Validation(vec![shape_error(
            "state",
            "instances",
            "state file needs an `instances` array",
        )]));
    };
    for (i, entry) in entries.iter().enumerate() {
        let fallback = format!("instances[{i}]");
        let Some(map) = entry.as_object() else {
            diags.push(shape_error("state", &fallback, "state entry must be an object"));
            continue;
        };
        let Some(name) = map.get("name").and_then(Json::as_str) else {
            diags.push(shape_error("state", &fallback, "state entry needs a string `name`"));
            continue;
        };
        for key in map.keys() {
            if key != "name" && key != "propertyValues" {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_KEY,
                    name,
                    format!("instances.{name}.{key}"),
                    format!("unknown state entry key `{key}`"),
                ));
            }
        }
        if !graph.has_instance(name) {
            diags.push(Diagnostic::error(
                codes::UNKNOWN_INSTANCE,
                name,
                format!("instances.{name}"),
                "state names an instance the knowledge base does not have".to_string(),
            ));
            continue;
        }
        let Some(values) = map.get("propertyValues").and_then(Json::as_object) else {
            diags.push(shape_error(
                name,
                &format!("instances.{name}"),
                "state entry needs a `propertyValues` object",
            ));
            continue;
        };
        for (property, raw) in values {
            let location = format!("instances.{name}.propertyValues.{property}");
            let Some(domain) = graph.declared_domain(name, property).cloned() else {
                diags.push(Diagnostic::error(
                    codes::UNDECLARED_PROPERTY,
                    name,
                    location,
                    format!("no member concept declares property `{property}`"),
                ));
                continue;
            };
            let value = match decode_value(&domain, raw) {
                Ok(value) => value,
                Err(detail) => {
                    diags.push(Diagnostic::error(
                        codes::VALUE_TYPE_MISMATCH,
                        name,
                        location,
                        format!("value does not fit {domain}: {detail}"),
                    ));
                    continue;
                }
            };
            if let Err(detail) = typecheck_value(&graph, &value, &domain) {
                diags.push(Diagnostic::error(
                    codes::VALUE_TYPE_MISMATCH,
                    name,
                    location,
                    detail,
                ));
                continue;
            }
            let record = graph.instance_mut(name).expect("instance checked above");
            record.property_values.insert(property.clone(), value);
        }
    }
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(KbError::Validation(diags));
    }
    Ok(graph)
}

/// Reads a JSONL pose trace from disk. See [`parse_trace`].
pub fn load_trace(path: &Path) -> Result<Vec<Frame>, KbError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    parse_trace(&text)
}

/// Parses a JSONL pose trace: one frame object per non-empty line, with
/// strictly increasing timestamps. Errors carry the 1-based line number.
pub fn parse_trace(text: &str) -> Result<Vec<Frame>, KbError> {
    let mut frames = Vec::new();
    let mut last: Option<f64> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let json: Json = serde_json::from_str(trimmed)
            .map_err(|e| KbError::Trace { line, detail: e.to_string() })?;
        let frame = parse_frame(&json).map_err(|detail| KbError::Trace { line, detail })?;
        if let Some(last) = last {
            if frame.timestamp <= last {
                return Err(KbError::Trace {
                    line,
                    detail: format!(
                        "timestamp {} does not increase past {last}",
                        frame.timestamp
                    ),
                });
            }
        }
        last = Some(frame.timestamp);
        frames.push(frame);
    }
    Ok(frames)
}

fn parse_frame(json: &Json) -> Result<Frame, String> {
    let Some(map) = json.as_object() else {
        return Err("frame must be an object".to_string());
    };
    for key in map.keys() {
        if !["timestamp", "entities", "hands", "contacts"].contains(&key.as_str()) {
            return Err(format!("unknown frame key `{key}`"));
        }
    }
    let Some(timestamp) = map.get("timestamp").and_then(Json::as_f64) else {
        return Err("frame needs a numeric `timestamp`".to_string());
    };
    if !timestamp.is_finite() {
        return Err(format!("non-finite timestamp {timestamp}"));
    }
    let mut frame = Frame::at(timestamp);
    if let Some(entities) = map.get("entities") {
        let Some(entities) = entities.as_object() else {
            return Err("`entities` must map names to poses".to_string());
        };
        for (entity, pose) in entities {
            let pose = decode_pose(pose).map_err(|e| format!("pose of `{entity}`: {e}"))?;
            frame.entity_poses.insert(entity.clone(), pose);
        }
    }
    if let Some(hands) = map.get("hands") {
        let Some(hands) = hands.as_object() else {
            return Err("`hands` must map gripper names to positions".to_string());
        };
        for (gripper, position) in hands {
            let Some(items) = position.as_array() else {
                return Err(format!("position of `{gripper}` must be [x, y, z]"));
            };
            let coords: Option<Vec<f64>> = items.iter().map(Json::as_f64).collect();
            match coords.as_deref() {
                Some([x, y, z]) if [x, y, z].iter().all(|c| c.is_finite()) => {
                    frame.hand_positions.insert(gripper.clone(), [*x, *y, *z]);
                }
                _ => return Err(format!("position of `{gripper}` must be three finite numbers")),
            }
        }
    }
    if let Some(contacts) = map.get("contacts") {
        let Some(items) = contacts.as_array() else {
            return Err("`contacts` must be an array of [a, b] pairs".to_string());
        };
        let mut pairs = Vec::with_capacity(items.len());
        for item in items {
            match item.as_array().map(Vec::as_slice) {
                Some([Json::String(a), Json::String(b)]) => {
                    pairs.push((a.clone(), b.clone()));
                }
                _ => return Err(format!("contact {item} must be a pair of names")),
            }
        }
        frame.contacts = Some(pairs);
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Severity;
    use crate::functions::World;
    use crate::hierarchy::test_support::small_household;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_codec_round_trips_by_domain() {
        let cases = vec![
            (DomainRef::Number, Value::Number(2.5)),
            (DomainRef::Boolean, Value::Boolean(true)),
            (DomainRef::Text, Value::Text("cuboid".into())),
            (DomainRef::Date, Value::Date(NaiveDate::from_ymd_opt(2026, 3, 14).unwrap())),
            (DomainRef::Concept("Bowl".into()), Value::EntityRef("WhiteBowlInstance".into())),
            (DomainRef::Number, Value::Unknown),
            (
                DomainRef::Location,
                Value::Location(Location {
                    reference: LocationRef::Entity("TableInstance".into()),
                    pose: Pose::from_array(&[1.0, 0.0, 0.0, 0.0, 0.5, -0.25, 1.0]).unwrap(),
                }),
            ),
            (
                DomainRef::Sequence(Box::new(DomainRef::Number)),
                Value::sequence(DomainRef::Number, vec![Value::Number(1.0), Value::Unknown]),
            ),
        ];
        for (domain, value) in cases {
            let encoded = encode_value(&value);
            let decoded = decode_value(&domain, &encoded).unwrap();
            assert_eq!(decoded, value, "{domain}");
        }
    }

    #[test]
    fn unknown_is_null_in_every_domain() {
        for domain in [
            DomainRef::Number,
            DomainRef::Boolean,
            DomainRef::Text,
            DomainRef::Date,
            DomainRef::Location,
            DomainRef::Any,
            DomainRef::Sequence(Box::new(DomainRef::Text)),
            DomainRef::Concept("Object".into()),
        ] {
            assert_eq!(encode_value(&Value::Unknown), Json::Null);
            assert_eq!(decode_value(&domain, &Json::Null).unwrap(), Value::Unknown);
        }
    }

    #[test]
    fn crossed_scalar_decodes_fail() {
        assert!(decode_value(&DomainRef::Number, &json!("three")).is_err());
        assert!(decode_value(&DomainRef::Boolean, &json!(1)).is_err());
        assert!(decode_value(&DomainRef::Date, &json!("14-03-2026")).is_err());
        assert!(decode_value(&DomainRef::Location, &json!([1, 0, 0])).is_err());
        assert!(decode_value(&DomainRef::Sequence(Box::new(DomainRef::Number)), &json!([1, "x"]))
            .is_err());
    }

    fn random_value(rng: &mut ChaCha8Rng, domain: &DomainRef, depth: usize) -> Value {
        if rng.gen_bool(0.1) {
            return Value::Unknown;
        }
        match domain {
            DomainRef::Number => Value::Number((rng.gen_range(-1000..1000) as f64) / 8.0),
            DomainRef::Boolean => Value::Boolean(rng.gen()),
            DomainRef::Text => Value::Text(format!("t{}", rng.gen_range(0..100))),
            DomainRef::Date => Value::Date(
                NaiveDate::from_ymd_opt(2026, rng.gen_range(1..13), rng.gen_range(1..29)).unwrap(),
            ),
            DomainRef::Location => Value::Location(Location {
                reference: if rng.gen() {
                    LocationRef::Origin
                } else {
                    LocationRef::Entity(format!("E{}", rng.gen_range(0..5)))
                },
                pose: Pose::from_translation([
                    (rng.gen_range(-100..100) as f64) / 16.0,
                    (rng.gen_range(-100..100) as f64) / 16.0,
                    (rng.gen_range(-100..100) as f64) / 16.0,
                ]),
            }),
            DomainRef::Sequence(elem) => {
                let len = if depth > 2 { 0 } else { rng.gen_range(0..4) };
                Value::Sequence {
                    elem: (**elem).clone(),
                    items: (0..len).map(|_| random_value(rng, elem, depth + 1)).collect(),
                }
            }
            DomainRef::Concept(_) => Value::EntityRef(format!("I{}", rng.gen_range(0..9))),
            DomainRef::Any => Value::Text("any".into()),
        }
    }

    fn random_domain(rng: &mut ChaCha8Rng, depth: usize) -> DomainRef {
        match rng.gen_range(if depth > 2 { 0..6 } else { 0..7 }) {
            0 => DomainRef::Number,
            1 => DomainRef::Boolean,
            2 => DomainRef::Text,
            3 => DomainRef::Date,
            4 => DomainRef::Location,
            5 => DomainRef::Concept(format!("C{}", rng.gen_range(0..4))),
            _ => DomainRef::Sequence(Box::new(random_domain(rng, depth + 1))),
        }
    }

    #[test]
    fn randomized_codec_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8080);
        for round in 0..500 {
            let domain = random_domain(&mut rng, 0);
            let value = random_value(&mut rng, &domain, 0);
            let encoded = encode_value(&value);
            let decoded = decode_value(&domain, &encoded)
                .unwrap_or_else(|e| panic!("round {round}: {e} for {value:?}"));
            assert_eq!(decoded, value, "round {round}, domain {domain}");
        }
    }

    const SMALL_DOC: &str = r#"{
      "concepts": [
        {"name": "Concept"},
        {"name": "PhysicalEntity", "direct_parents": ["Concept"],
         "properties": {"location": "Location", "instanceName": "String"}},
        {"name": "Object", "direct_parents": ["PhysicalEntity"],
         "properties": {"basicShape": "String", "interactionVolume": "Number"}},
        {"name": "Container", "direct_parents": ["Object"],
         "properties": {
           "content": "Sequence<PhysicalEntity>",
           "basicShape": {"default": "cuboid"},
           "open": {"domain": "Boolean", "default": false}
         }},
        {"name": "Bowl", "direct_parents": ["Container"],
         "properties": {"basicShape": {"default": "hemisphere"}}},
        {"name": "SetShapeEff", "direct_parents": [], "function": {
          "arguments": [
            {"name": "o", "domain": "Object"},
            {"name": "shape", "domain": "String"}
          ],
          "procedure": [
            {"function": "Assign", "slots": {"who": {"ref": "o.basicShape"}, "what": {"ref": "shape"}}}
          ]
        }},
        {"name": "IsOpen", "direct_parents": [], "function": {
          "arguments": [{"name": "o", "domain": "Container"}],
          "result": "Boolean",
          "procedure": [
            {"function": "Assign", "slots": {"who": {"ref": "res"}, "what": {"ref": "o.open"}}}
          ]
        }},
        {"name": "SetShape", "direct_parents": ["Concept"], "action": {
          "parameters": {
            "entities": [{"name": "o", "concepts": ["Object"], "not": ["Bowl"]}],
            "values": {"shape": "String"}
          },
          "eff": "SetShapeEff"
        }}
      ],
      "instances": [
        {"name": "BoxInstance", "members": ["Container"],
         "propertyValues": {"content": [], "location": [1, 0, 0, 0, 0.5, 0.5, 0]}},
        {"name": "RiceBowlInstance", "members": ["Bowl"],
         "propertyValues": {"instanceName": "rice bowl"}}
      ]
    }"#;

    #[test]
    fn loads_a_document_and_resolves_defaults() {
        let (graph, diags) = load_hierarchy_str(SMALL_DOC, true, "test").unwrap();
        assert!(diags.is_empty(), "{diags:?}");
        assert_eq!(
            graph.resolve_property("RiceBowlInstance", "basicShape").unwrap(),
            Value::Text("hemisphere".into())
        );
        assert_eq!(
            graph.resolve_property("BoxInstance", "open").unwrap(),
            Value::Boolean(false)
        );
        assert_eq!(
            graph.resolve_property("BoxInstance", "instanceName").unwrap(),
            Value::Unknown
        );
        let action = graph.action("SetShape").unwrap();
        assert_eq!(action.entity_params[0].1.restricted, vec!["Bowl".to_string()]);
        assert_eq!(action.value_params["shape"], DomainRef::Text);
    }

    #[test]
    fn loaded_procedures_evaluate() {
        let (mut graph, _) = load_hierarchy_str(SMALL_DOC, true, "test").unwrap();
        let builtins = BuiltinRegistry::standard();
        let mut world = World::new(&mut graph, &builtins);
        let mut bindings = crate::functions::bindings(&[(
            "o",
            Value::EntityRef("BoxInstance".into()),
        )]);
        let result = world.evaluate("IsOpen", &mut bindings).unwrap();
        assert_eq!(result, Value::Boolean(false));
        let mut bindings = crate::functions::bindings(&[
            ("o", Value::EntityRef("BoxInstance".into())),
            ("shape", Value::Text("prism".into())),
        ]);
        world.evaluate("SetShapeEff", &mut bindings).unwrap();
        assert_eq!(
            graph.resolve_property("BoxInstance", "basicShape").unwrap(),
            Value::Text("prism".into())
        );
    }

    #[test]
    fn duplicate_names_are_flagged() {
        let doc = r#"{
          "concepts": [{"name": "A"}, {"name": "A"}],
          "instances": [{"name": "A1", "members": ["A"]}, {"name": "A1", "members": ["A"]}]
        }"#;
        let err = load_hierarchy_str(doc, true, "test").unwrap_err();
        let KbError::Validation(diags) = err else {
            panic!("expected validation failure");
        };
        assert_eq!(diags.iter().filter(|d| d.code == codes::DUPLICATE_NAME).count(), 2);
    }

    #[test]
    fn unknown_parent_fails_even_lenient() {
        let doc = r#"{"concepts": [{"name": "A", "direct_parents": ["Ghost"]}]}"#;
        let err = load_hierarchy_str(doc, false, "test").unwrap_err();
        let KbError::Validation(diags) = err else {
            panic!("expected validation failure");
        };
        assert!(diags.iter().any(|d| d.code == codes::UNKNOWN_PARENT));
    }

    #[test]
    fn value_and_member_defects_are_collected() {
        let doc = r#"{
          "concepts": [
            {"name": "A", "properties": {"size": "Number"}}
          ],
          "instances": [
            {"name": "I1", "members": ["Ghost"]},
            {"name": "I2", "members": ["A"], "propertyValues": {"size": "big"}},
            {"name": "I3", "members": ["A"], "propertyValues": {"color": "red"}},
            {"name": "I4", "members": []}
          ]
        }"#;
        let err = load_hierarchy_str(doc, true, "test").unwrap_err();
        let KbError::Validation(diags) = err else {
            panic!("expected validation failure");
        };
        let codes_seen: BTreeSet<&str> = diags.iter().map(|d| d.code).collect();
        assert!(codes_seen.contains(codes::UNKNOWN_MEMBER_CONCEPT));
        assert!(codes_seen.contains(codes::VALUE_TYPE_MISMATCH));
        assert!(codes_seen.contains(codes::UNDECLARED_PROPERTY));
        assert!(codes_seen.contains(codes::BAD_INSTANCE_SHAPE));
    }

    #[test]
    fn lenient_mode_returns_the_usable_part() {
        let doc = r#"{
          "concepts": [
            {"name": "A", "properties": {"size": "Number"}}
          ],
          "instances": [
            {"name": "I2", "members": ["A"], "propertyValues": {"size": "big"}}
          ]
        }"#;
        let (graph, diags) = load_hierarchy_str(doc, false, "test").unwrap();
        assert!(diags.iter().any(|d| d.code == codes::VALUE_TYPE_MISMATCH));
        assert!(graph.has_instance("I2"));
        assert_eq!(graph.resolve_property("I2", "size").unwrap(), Value::Unknown);
        assert!(load_hierarchy_str(doc, true, "test").is_err());
    }

    #[test]
    fn bad_defaults_are_flagged_with_dedicated_codes() {
        let doc = r#"{
          "concepts": [
            {"name": "A", "properties": {"size": "Number"}},
            {"name": "B", "direct_parents": ["A"], "properties": {
              "size": {"default": "large"},
              "phantom": {"default": 3}
            }}
          ]
        }"#;
        let err = load_hierarchy_str(doc, true, "test").unwrap_err();
        let KbError::Validation(diags) = err else {
            panic!("expected validation failure");
        };
        assert!(diags.iter().any(|d| d.code == codes::DEFAULT_TYPE_MISMATCH));
        assert!(diags.iter().any(|d| d.code == codes::UNDECLARED_DEFAULT));
    }

    #[test]
    fn unknown_keys_fail_strict_but_not_lenient() {
        let doc = r#"{
          "concepts": [{"name": "A", "color": "blue"}],
          "instances": [],
          "meta": {}
        }"#;
        let err = load_hierarchy_str(doc, true, "test").unwrap_err();
        let KbError::Validation(diags) = err else {
            panic!("expected validation failure");
        };
        assert_eq!(diags.iter().filter(|d| d.code == codes::UNKNOWN_KEY).count(), 2);
        let (graph, diags) = load_hierarchy_str(doc, false, "test").unwrap();
        assert!(graph.has_concept("A"));
        assert_eq!(diags.iter().filter(|d| d.code == codes::UNKNOWN_KEY).count(), 2);
    }

    #[test]
    fn multiple_roots_get_a_warning_only() {
        let doc = r#"{"concepts": [{"name": "A"}, {"name": "B"}]}"#;
        let (_, diags) = load_hierarchy_str(doc, true, "test").unwrap();
        let roots: Vec<_> =
            diags.iter().filter(|d| d.code == codes::MISSING_PARENTS).collect();
        assert_eq!(roots.len(), 2);
        assert!(roots.iter().all(|d| d.severity == Severity::Warning));
    }

    /// A graph touching every serializable feature, for round-trip tests.
    fn rich_graph() -> HierarchyGraph {
        let mut graph = small_household();
        graph.add_concept(
            ConceptNode::new("NotComposed", &[])
                .kind(ConceptKind::Function),
        );
        graph.add_function(
            FunctionDef::new("NotComposed")
                .arg("arg1", DomainRef::Boolean)
                .result(DomainRef::Boolean)
                .statement(
                    Call::new("Condition")
                        .slot("condition", crate::functions::refer("arg1"))
                        .slot(
                            "ifTrue",
                            crate::functions::call(
                                Call::new("Assign")
                                    .slot("who", crate::functions::refer("res"))
                                    .slot("what", crate::functions::lit(Value::Boolean(false))),
                            ),
                        )
                        .slot(
                            "ifFalse",
                            crate::functions::call(
                                Call::new("Assign")
                                    .slot("who", crate::functions::refer("res"))
                                    .slot("what", crate::functions::lit(Value::Boolean(true))),
                            ),
                        ),
                ),
        );
        graph.add_concept(
            ConceptNode::new("SetShapeEff", &[]).kind(ConceptKind::Function),
        );
        graph.add_function(
            FunctionDef::new("SetShapeEff")
                .arg("o", DomainRef::Concept("Object".into()))
                .arg("shape", DomainRef::Text)
                .statement(Call::assign("o.basicShape", crate::functions::refer("shape"))),
        );
        graph.add_concept(
            ConceptNode::new("ShapeKnown", &[]).kind(ConceptKind::Function),
        );
        graph.add_function(
            FunctionDef::new("ShapeKnown")
                .arg("o", DomainRef::Concept("Object".into()))
                .result(DomainRef::Boolean)
                .statement(Call::assign(
                    "res",
                    crate::functions::call(
                        Call::new("Not").slot("arg1", crate::functions::lit(Value::Boolean(false))),
                    ),
                )),
        );
        graph.add_concept(
            ConceptNode::new("SetShape", &["Concept"]).kind(ConceptKind::Action),
        );
        graph.add_action(
            ActionDef::new("SetShape", "SetShapeEff")
                .entity("o", ParamSpec::of(&["Object"]).excluding(&["Bowl"]))
                .value("shape", DomainRef::Text),
        );
        graph.add_concept(
            ConceptNode::new("Reshape", &["Concept"])
                .kind(ConceptKind::Skill)
                .property("manipulations", DomainRef::parse("Sequence<Sequence<String>>").unwrap())
                .default(
                    "manipulations",
                    crate::acts::encode_manipulations(&[["a", "g", "o"]]),
                ),
        );
        graph.add_skill(
            SkillDef::new("Reshape", "ShapeKnown")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("g", ParamSpec::of(&["Gripper"]))
                .entity("o", ParamSpec::of(&["Object"]))
                .value("shape", DomainRef::Text)
                .eff("SetShapeEff")
                .associate(ActionAssociation::new("SetShape", &[("o", "o"), ("shape", "shape")]))
                .extract("shape", "o.basicShape", ExtractWhen::Finalization),
        );
        graph.rebuild_index().unwrap();
        graph
    }

    #[test]
    fn serialize_load_round_trip_reproduces_the_graph() {
        let graph = rich_graph();
        let doc = serialize_hierarchy(&graph);
        let text = serde_json::to_string_pretty(&doc).unwrap();
        let (reloaded, diags) = load_hierarchy_str(&text, true, "round-trip").unwrap();
        let errors: Vec<_> =
            diags.iter().filter(|d| d.severity == Severity::Error).collect();
        assert!(errors.is_empty(), "{errors:?}");
        assert_eq!(reloaded, graph);
        let again = serde_json::to_string_pretty(&serialize_hierarchy(&reloaded)).unwrap();
        assert_eq!(again, text, "serialization is canonical");
    }

    #[test]
    fn trace_lines_parse_with_optional_contacts() {
        let text = r#"
{"timestamp": 0.0, "entities": {"BoxInstance": [1, 0, 0, 0, 0.5, 0, 0]}, "hands": {"LeftHandInstance": [0.1, 0.2, 0.3]}}
{"timestamp": 0.033, "contacts": []}
{"timestamp": 0.066, "contacts": [["LeftHandInstance", "BoxInstance"]]}
"#;
        let frames = parse_trace(text).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].contacts, None);
        assert_eq!(frames[1].contacts, Some(vec![]));
        assert_eq!(
            frames[2].contacts,
            Some(vec![("LeftHandInstance".to_string(), "BoxInstance".to_string())])
        );
        assert_eq!(frames[0].hand_positions["LeftHandInstance"], [0.1, 0.2, 0.3]);
        assert!(
            frames[0].entity_poses["BoxInstance"].translation_distance(
                &Pose::from_translation([0.5, 0.0, 0.0])
            ) < 1e-12
        );
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        let backwards = "{\"timestamp\": 1.0}\n{\"timestamp\": 0.5}";
        match parse_trace(backwards) {
            Err(KbError::Trace { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a trace error, got {other:?}"),
        }
        let garbage = "{\"timestamp\": 1.0}\nnot json";
        match parse_trace(garbage) {
            Err(KbError::Trace { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a trace error, got {other:?}"),
        }
        let missing = "{\"entities\": {}}";
        match parse_trace(missing) {
            Err(KbError::Trace { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected a trace error, got {other:?}"),
        }
        let bad_pose = "{\"timestamp\": 0.0, \"entities\": {\"X\": [1, 0, 0]}}";
        assert!(matches!(parse_trace(bad_pose), Err(KbError::Trace { line: 1, .. })));
    }
}

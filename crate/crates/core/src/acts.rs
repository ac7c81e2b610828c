//! Action and skill definitions, parameter matching, affordances, and the
//! predicate stages recognition drives.
//!
//! An action is the minimal unit of change: entity parameters, value
//! parameters, an optional precondition, and an effect function that
//! changes at most one property per bound entity. A skill is the richer
//! observable unit: agent and entity parameters, the four stage predicates
//! (precondition, active-check, success, effect), associations that map a
//! successful skill onto action instances, manipulation triples for grasp
//! bookkeeping, and an opaque behavior payload that is stored and
//! round-tripped but never interpreted here.
//!
//! Affordances are not stored on entities; they are computed from
//! parameter matching, so membership edits immediately change what an
//! entity affords.

use crate::error::{codes, Diagnostic, EvalError, KbError, PropertyError};
use crate::functions::{Call, ProcExpr, RefPath, World};
use crate::hierarchy::HierarchyGraph;
use crate::value::{DomainRef, Value};
use std::collections::{BTreeMap, BTreeSet};

/// Concept requirements for one entity or agent parameter: the entity must
/// be a member of every `required` concept and of no `restricted` concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub required: Vec<String>,
    pub restricted: Vec<String>,
}

impl ParamSpec {
    pub fn of(required: &[&str]) -> ParamSpec {
        ParamSpec {
            required: required.iter().map(|c| c.to_string()).collect(),
            restricted: Vec::new(),
        }
    }

    pub fn excluding(mut self, restricted: &[&str]) -> ParamSpec {
        self.restricted = restricted.iter().map(|c| c.to_string()).collect();
        self
    }
}

/// An action: entity parameters, value parameters, and stage functions.
/// The effect function is the action's identity; the precondition is
/// optional.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDef {
    pub name: String,
    pub entity_params: Vec<(String, ParamSpec)>,
    pub value_params: BTreeMap<String, DomainRef>,
    pub pre: Option<String>,
    pub eff: String,
}

impl ActionDef {
    pub fn new(name: &str, eff: &str) -> ActionDef {
        ActionDef {
            name: name.to_string(),
            entity_params: Vec::new(),
            value_params: BTreeMap::new(),
            pre: None,
            eff: eff.to_string(),
        }
    }

    pub fn entity(mut self, name: &str, spec: ParamSpec) -> ActionDef {
        self.entity_params.push((name.to_string(), spec));
        self
    }

    pub fn value(mut self, name: &str, domain: DomainRef) -> ActionDef {
        self.value_params.insert(name.to_string(), domain);
        self
    }

    pub fn pre(mut self, function: &str) -> ActionDef {
        self.pre = Some(function.to_string());
        self
    }

    pub fn param_names(&self) -> BTreeSet<&str> {
        self.entity_params
            .iter()
            .map(|(n, _)| n.as_str())
            .chain(self.value_params.keys().map(|k| k.as_str()))
            .collect()
    }
}

/// Maps a successful skill onto one action instance. Keys are sources on
/// the skill side (a parameter name, or a `param.property` read); values
/// are the target action's parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAssociation {
    pub action: String,
    pub param_map: BTreeMap<String, String>,
}

impl ActionAssociation {
    pub fn new(action: &str, pairs: &[(&str, &str)]) -> ActionAssociation {
        ActionAssociation {
            action: action.to_string(),
            param_map: pairs
                .iter()
                .map(|(from, to)| (from.to_string(), to.to_string()))
                .collect(),
        }
    }
}

/// When a non-entity parameter gets filled by observation rather than by
/// matching: at activation (first frame) or finalization (deactivation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtractWhen {
    Activation,
    #[default]
    Finalization,
}

/// Fills one value parameter from the world. A dotted `param.property`
/// source reads that property of the bound instance; a bare name calls the
/// function of that name with the skill bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSpec {
    pub source: String,
    pub when: ExtractWhen,
}

/// A skill: who performs it, on what, the four stage functions, action
/// associations, and the opaque behavior payload. Manipulation triples are
/// not stored here; they resolve through the concept hierarchy so a child
/// skill can override its parent's default.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillDef {
    pub name: String,
    pub agent_params: Vec<(String, ParamSpec)>,
    pub entity_params: Vec<(String, ParamSpec)>,
    pub value_params: BTreeMap<String, DomainRef>,
    pub pre: Option<String>,
    pub check: String,
    pub succ: Option<String>,
    pub eff: Option<String>,
    pub action_assoc: Vec<ActionAssociation>,
    pub extractors: BTreeMap<String, ExtractorSpec>,
    pub behavior: Option<serde_json::Value>,
}

impl SkillDef {
    pub fn new(name: &str, check: &str) -> SkillDef {
        SkillDef {
            name: name.to_string(),
            agent_params: Vec::new(),
            entity_params: Vec::new(),
            value_params: BTreeMap::new(),
            pre: None,
            check: check.to_string(),
            succ: None,
            eff: None,
            action_assoc: Vec::new(),
            extractors: BTreeMap::new(),
            behavior: None,
        }
    }

    pub fn agent(mut self, name: &str, spec: ParamSpec) -> SkillDef {
        self.agent_params.push((name.to_string(), spec));
        self
    }

    pub fn entity(mut self, name: &str, spec: ParamSpec) -> SkillDef {
        self.entity_params.push((name.to_string(), spec));
        self
    }

    pub fn value(mut self, name: &str, domain: DomainRef) -> SkillDef {
        self.value_params.insert(name.to_string(), domain);
        self
    }

    pub fn pre(mut self, function: &str) -> SkillDef {
        self.pre = Some(function.to_string());
        self
    }

    pub fn succ(mut self, function: &str) -> SkillDef {
        self.succ = Some(function.to_string());
        self
    }

    pub fn eff(mut self, function: &str) -> SkillDef {
        self.eff = Some(function.to_string());
        self
    }

    pub fn associate(mut self, assoc: ActionAssociation) -> SkillDef {
        self.action_assoc.push(assoc);
        self
    }

    pub fn extract(mut self, param: &str, source: &str, when: ExtractWhen) -> SkillDef {
        self.extractors
            .insert(param.to_string(), ExtractorSpec { source: source.to_string(), when });
        self
    }

    /// Agent parameters followed by entity parameters: the slots candidate
    /// entities are matched against, in declaration order.
    pub fn matchable_params(&self) -> Vec<(&str, &ParamSpec)> {
        self.agent_params
            .iter()
            .chain(self.entity_params.iter())
            .map(|(n, s)| (n.as_str(), s))
            .collect()
    }

    pub fn param_names(&self) -> BTreeSet<&str> {
        self.agent_params
            .iter()
            .chain(self.entity_params.iter())
            .map(|(n, _)| n.as_str())
            .chain(self.value_params.keys().map(|k| k.as_str()))
            .collect()
    }
}

/// The four stages a skill moves through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pre,
    Check,
    Succ,
    Eff,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Check => "check",
            Stage::Succ => "succ",
            Stage::Eff => "eff",
        }
    }
}

/// Outcome of evaluating one stage. Boolean stages yield `Holds`; the
/// effect stage yields `Applied`. A predicate touching UNKNOWN is
/// `Indeterminate` rather than false, preserving the open-world reading.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Holds(bool),
    Applied,
    Indeterminate(String),
}

impl StageOutcome {
    pub fn holds(&self) -> bool {
        matches!(self, StageOutcome::Holds(true))
    }
}

/// One concrete action emitted by a successful skill.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionInstance {
    pub action: String,
    pub params: BTreeMap<String, Value>,
}

/// True iff the entity is a member of every required concept and of no
/// restricted concept. Unknown concepts in the spec are an error so typos
/// do not silently match nothing.
pub fn entity_matches_parameter(
    graph: &HierarchyGraph,
    entity: &str,
    spec: &ParamSpec,
) -> Result<bool, KbError> {
    for concept in spec.required.iter().chain(spec.restricted.iter()) {
        if !graph.has_concept(concept) {
            return Err(KbError::Other(format!(
                "parameter spec names unknown concept `{concept}`"
            )));
        }
    }
    let required_ok = spec.required.iter().all(|c| graph.is_subconcept(entity, c));
    let restricted_ok = spec.restricted.iter().all(|c| !graph.is_subconcept(entity, c));
    Ok(required_ok && restricted_ok)
}

/// Everything the entity can fill: all (definition, parameter) pairs over
/// the loaded actions and skills where the entity matches. Computed fresh
/// from membership, never stored.
pub fn affordances(graph: &HierarchyGraph, entity: &str) -> BTreeSet<(String, String)> {
    let mut pairs = BTreeSet::new();
    for action in graph.actions() {
        for (param, spec) in &action.entity_params {
            if entity_matches_parameter(graph, entity, spec).unwrap_or(false) {
                pairs.insert((action.name.clone(), param.clone()));
            }
        }
    }
    for skill in graph.skills() {
        for (param, spec) in skill.matchable_params() {
            if entity_matches_parameter(graph, entity, spec).unwrap_or(false) {
                pairs.insert((skill.name.clone(), param.to_string()));
            }
        }
    }
    pairs
}

/// Affordance merging: all (definition, parameter tuple) pairs where the
/// i-th entity affords the i-th parameter and the parameter names are
/// pairwise distinct. The tuple length equals the entity count.
pub fn merge_affordances(
    graph: &HierarchyGraph,
    entities: &[&str],
) -> BTreeSet<(String, Vec<String>)> {
    assert!(!entities.is_empty(), "merge_affordances needs at least one entity");
    let per_entity: Vec<BTreeSet<(String, String)>> =
        entities.iter().map(|e| affordances(graph, e)).collect();
    let defs: BTreeSet<&String> = per_entity
        .iter()
        .flat_map(|pairs| pairs.iter().map(|(d, _)| d))
        .collect();
    let mut merged = BTreeSet::new();
    for def in defs {
        let choices: Vec<Vec<&String>> = per_entity
            .iter()
            .map(|pairs| {
                pairs
                    .iter()
                    .filter(|(d, _)| d == def)
                    .map(|(_, p)| p)
                    .collect::<Vec<_>>()
            })
            .collect();
        if choices.iter().any(|c| c.is_empty()) {
            continue;
        }
        let mut tuple: Vec<&String> = Vec::with_capacity(entities.len());
        fill_tuples(&choices, &mut tuple, &mut |tuple| {
            merged.insert((def.clone(), tuple.iter().map(|p| p.to_string()).collect()));
        });
    }
    merged
}

fn fill_tuples<'c>(
    choices: &[Vec<&'c String>],
    tuple: &mut Vec<&'c String>,
    emit: &mut impl FnMut(&[&'c String]),
) {
    if tuple.len() == choices.len() {
        emit(tuple);
        return;
    }
    for param in &choices[tuple.len()] {
        if tuple.contains(param) {
            continue;
        }
        tuple.push(param);
        fill_tuples(choices, tuple, emit);
        tuple.pop();
    }
}

fn stage_function(skill: &SkillDef, stage: Stage) -> Option<&str> {
    match stage {
        Stage::Pre => skill.pre.as_deref(),
        Stage::Check => Some(skill.check.as_str()),
        Stage::Succ => skill.succ.as_deref(),
        Stage::Eff => skill.eff.as_deref(),
    }
}

/// Evaluates one skill stage against the world. Absent optional stages
/// succeed vacuously: no precondition means always ready, no success
/// predicate means deactivation counts as success, no effect is a no-op.
/// Unknown-valued inputs surface as `Indeterminate`, other evaluation
/// failures propagate tagged with the stage.
pub fn skill_stage(
    world: &mut World<'_>,
    skill: &SkillDef,
    stage: Stage,
    bindings: &BTreeMap<String, Value>,
) -> Result<StageOutcome, KbError> {
    let Some(function) = stage_function(skill, stage) else {
        return Ok(match stage {
            Stage::Eff => StageOutcome::Applied,
            _ => StageOutcome::Holds(true),
        });
    };
    run_stage_function(world, &skill.name, function, stage, bindings)
}

/// Shared driver for skill stages and the action side (pre/eff): projects
/// the bindings onto the function's declared arguments and evaluates.
pub fn run_stage_function(
    world: &mut World<'_>,
    definition: &str,
    function: &str,
    stage: Stage,
    bindings: &BTreeMap<String, Value>,
) -> Result<StageOutcome, KbError> {
    let order = match world.graph.function(function) {
        Some(def) => def.argument_order.clone(),
        None => {
            return Err(KbError::Other(format!(
                "`{definition}` stage {} references unknown function `{function}`",
                stage.label()
            )))
        }
    };
    let mut args = BTreeMap::new();
    for arg in &order {
        let value = bindings.get(arg).cloned().unwrap_or(Value::Unknown);
        args.insert(arg.clone(), value);
    }
    match world.evaluate(function, &mut args) {
        Ok(Value::Boolean(b)) if stage != Stage::Eff => Ok(StageOutcome::Holds(b)),
        Ok(_) if stage == Stage::Eff => Ok(StageOutcome::Applied),
        Ok(Value::Unknown) => Ok(StageOutcome::Indeterminate(format!(
            "{function} returned UNKNOWN"
        ))),
        Ok(other) => Err(KbError::Other(format!(
            "`{definition}` stage {} expected a Boolean from `{function}`, got {}",
            stage.label(),
            other.kind_name()
        ))),
        Err(err @ EvalError::UnknownInput { .. }) => {
            Ok(StageOutcome::Indeterminate(err.to_string()))
        }
        Err(EvalError::Property(PropertyError::AmbiguousDefaults {
            instance,
            property,
            concepts,
            distance,
        })) => Err(KbError::Property(PropertyError::AmbiguousDefaults {
            instance,
            property,
            concepts,
            distance,
        })),
        Err(err) => Err(KbError::Other(format!(
            "`{definition}` stage {} failed in `{function}`: {err}",
            stage.label()
        ))),
    }
}

/// The skill's manipulation triples with parameter names substituted by
/// the bound instances. The triple set itself resolves through the concept
/// hierarchy (the skill node counts at distance zero), so a child skill's
/// default overrides its parent's.
pub fn manipulations_of(
    graph: &HierarchyGraph,
    skill: &SkillDef,
    bindings: &BTreeMap<String, Value>,
) -> Result<BTreeSet<[String; 3]>, KbError> {
    let raw = graph
        .resolve_concept_default(&skill.name, "manipulations")
        .map_err(KbError::Property)?;
    let Some(raw) = raw else {
        return Ok(BTreeSet::new());
    };
    let triples = decode_manipulations(&raw).map_err(|detail| {
        KbError::Other(format!("skill `{}` manipulations: {detail}", skill.name))
    })?;
    let mut out = BTreeSet::new();
    let mut pairs = BTreeSet::new();
    for [agent, gripper, object] in triples {
        let bound = |param: &str| -> Result<String, KbError> {
            match bindings.get(param) {
                Some(Value::EntityRef(name)) => Ok(name.clone()),
                Some(other) => Err(KbError::Other(format!(
                    "skill `{}` manipulation parameter `{param}` is bound to {}, not an entity",
                    skill.name,
                    other.kind_name()
                ))),
                None => Err(KbError::Other(format!(
                    "skill `{}` manipulation parameter `{param}` is unbound",
                    skill.name
                ))),
            }
        };
        let triple = [bound(&agent)?, bound(&gripper)?, bound(&object)?];
        if !pairs.insert((triple[0].clone(), triple[1].clone())) {
            return Err(KbError::Other(format!(
                "skill `{}` binds two manipulations to the same agent-gripper pair ({}, {})",
                skill.name, triple[0], triple[1]
            )));
        }
        out.insert(triple);
    }
    Ok(out)
}

/// Decodes the hierarchy encoding of a manipulation set: a sequence of
/// three-element text sequences naming (agent, gripper, object) params.
pub fn decode_manipulations(value: &Value) -> Result<Vec<[String; 3]>, String> {
    let Value::Sequence { items, .. } = value else {
        return Err(format!("expected a sequence of triples, got {}", value.kind_name()));
    };
    let mut triples = Vec::new();
    for item in items {
        let Value::Sequence { items: parts, .. } = item else {
            return Err(format!("expected a triple, got {}", item.kind_name()));
        };
        if parts.len() != 3 {
            return Err(format!("expected 3 parameter names, got {}", parts.len()));
        }
        let mut triple = [String::new(), String::new(), String::new()];
        for (slot, part) in triple.iter_mut().zip(parts) {
            match part {
                Value::Text(name) => *slot = name.clone(),
                other => return Err(format!("parameter name must be text, got {}", other.kind_name())),
            }
        }
        triples.push(triple);
    }
    Ok(triples)
}

/// Encodes manipulation triples for storage as a concept default.
pub fn encode_manipulations(triples: &[[&str; 3]]) -> Value {
    let elem = DomainRef::Sequence(Box::new(DomainRef::Text));
    let items = triples
        .iter()
        .map(|t| Value::Sequence {
            elem: DomainRef::Text,
            items: t.iter().map(|n| Value::Text(n.to_string())).collect(),
        })
        .collect();
    Value::Sequence { elem, items }
}

/// One action instance per association, parameters filled through the
/// mapping. Dotted sources read the current property of the bound
/// instance, so extraction-style mappings see post-effect values.
pub fn derive_actions(
    graph: &HierarchyGraph,
    skill: &SkillDef,
    bindings: &BTreeMap<String, Value>,
) -> Result<Vec<ActionInstance>, KbError> {
    let mut out = Vec::new();
    for assoc in &skill.action_assoc {
        let mut params = BTreeMap::new();
        for (source, action_param) in &assoc.param_map {
            let path = RefPath::parse(source);
            let root = bindings.get(&path.root).ok_or_else(|| {
                KbError::Other(format!(
                    "association `{} -> {}` references unbound `{}`",
                    skill.name, assoc.action, path.root
                ))
            })?;
            let value = match &path.property {
                None => root.clone(),
                Some(property) => {
                    let instance = root.as_entity().ok_or_else(|| {
                        KbError::Other(format!(
                            "association `{} -> {}` reads `{source}` but `{}` is not an entity",
                            skill.name, assoc.action, path.root
                        ))
                    })?;
                    graph.resolve_property(instance, property).map_err(KbError::Property)?
                }
            };
            params.insert(action_param.clone(), value);
        }
        out.push(ActionInstance { action: assoc.action.clone(), params });
    }
    Ok(out)
}

/// How an effect procedure writes one entity property, as far as a shallow
/// scan of its statements can tell. The diff engine unifies observed
/// changes against these shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum WriteShape {
    /// `Assign(entity.property, <param>)`
    SetFromParam { entity: String, property: String, source: String },
    /// `Assign(entity.property, <other.property>)`
    SetFromPath { entity: String, property: String, source: RefPath },
    /// `Assign(entity.property, <literal>)`
    SetLiteral { entity: String, property: String, value: Value },
    /// `Assign(entity.property, SequenceInsert(entity.property, <param>))`
    SeqInsert { entity: String, property: String, item: String },
    /// `Assign(entity.property, SequenceRemove(entity.property, <param>))`
    SeqRemove { entity: String, property: String, item: String },
    /// A write whose source expression is anything else.
    Opaque { entity: String, property: String },
}

impl WriteShape {
    pub fn target(&self) -> (&str, &str) {
        match self {
            WriteShape::SetFromParam { entity, property, .. }
            | WriteShape::SetFromPath { entity, property, .. }
            | WriteShape::SetLiteral { entity, property, .. }
            | WriteShape::SeqInsert { entity, property, .. }
            | WriteShape::SeqRemove { entity, property, .. }
            | WriteShape::Opaque { entity, property } => (entity, property),
        }
    }
}

/// Scans a function's statements (including condition branches, not
/// callees) for property-path writes. This is deliberately shallow: it
/// feeds a lint and the diff matcher, not a soundness proof.
pub fn write_shapes(graph: &HierarchyGraph, function: &str) -> Vec<WriteShape> {
    let mut out = Vec::new();
    let Some(def) = graph.function(function) else {
        return out;
    };
    let Some(procedure) = &def.procedure else {
        return out;
    };
    for statement in procedure {
        collect_write_shapes(statement, &mut out);
    }
    out
}

fn collect_write_shapes(call: &Call, out: &mut Vec<WriteShape>) {
    match call.function.as_str() {
        "Assign" => {
            let Some(ProcExpr::Reference(who)) = call.slots.get("who") else {
                return;
            };
            let Some(property) = &who.property else {
                return;
            };
            let entity = who.root.clone();
            let property = property.clone();
            let shape = match call.slots.get("what") {
                Some(ProcExpr::Reference(path)) => match &path.property {
                    None => WriteShape::SetFromParam {
                        entity,
                        property,
                        source: path.root.clone(),
                    },
                    Some(_) => WriteShape::SetFromPath { entity, property, source: path.clone() },
                },
                Some(ProcExpr::Literal(value)) => {
                    WriteShape::SetLiteral { entity, property, value: value.clone() }
                }
                Some(ProcExpr::Call(inner))
                    if inner.function == "SequenceInsert" || inner.function == "SequenceRemove" =>
                {
                    let self_read = matches!(
                        inner.slots.get("sequence"),
                        Some(ProcExpr::Reference(seq))
                            if seq.root == entity && seq.property.as_deref() == Some(&property)
                    );
                    let item = match inner.slots.get("item") {
                        Some(ProcExpr::Reference(item)) if item.property.is_none() => {
                            Some(item.root.clone())
                        }
                        _ => None,
                    };
                    match (self_read, item) {
                        (true, Some(item)) if inner.function == "SequenceInsert" => {
                            WriteShape::SeqInsert { entity, property, item }
                        }
                        (true, Some(item)) => WriteShape::SeqRemove { entity, property, item },
                        _ => WriteShape::Opaque { entity, property },
                    }
                }
                _ => WriteShape::Opaque { entity, property },
            };
            out.push(shape);
        }
        "Condition" => {
            for branch in ["ifTrue", "ifFalse"] {
                match call.slots.get(branch) {
                    Some(ProcExpr::Block(statements)) => {
                        for statement in statements {
                            collect_write_shapes(statement, out);
                        }
                    }
                    Some(ProcExpr::Call(single)) => collect_write_shapes(single, out),
                    _ => {}
                }
            }
        }
        _ => {}
    }
}

/// Load-time validation of every action and skill definition.
pub fn validate_acts(graph: &HierarchyGraph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for action in graph.actions() {
        validate_action(graph, action, &mut diags);
    }
    for skill in graph.skills() {
        validate_skill(graph, skill, &mut diags);
    }
    diags
}

fn validate_param_specs<'d>(
    graph: &HierarchyGraph,
    node: &str,
    path: &str,
    params: impl Iterator<Item = (&'d String, &'d ParamSpec)>,
    diags: &mut Vec<Diagnostic>,
) {
    let mut seen = BTreeSet::new();
    for (name, spec) in params {
        if !seen.insert(name.as_str()) {
            diags.push(Diagnostic::error(
                codes::CONFLICTING_DECLARATION,
                node,
                format!("{path}.{name}"),
                format!("parameter `{name}` is declared more than once"),
            ));
        }
        if spec.required.is_empty() {
            diags.push(Diagnostic::error(
                codes::CONTRADICTORY_PARAMETER,
                node,
                format!("{path}.{name}"),
                format!("parameter `{name}` requires no concepts; it would match anything"),
            ));
        }
        for concept in spec.required.iter().chain(spec.restricted.iter()) {
            if !graph.has_concept(concept) {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_DOMAIN,
                    node,
                    format!("{path}.{name}"),
                    format!("parameter `{name}` names unknown concept `{concept}`"),
                ));
            }
        }
        let required: BTreeSet<&String> = spec.required.iter().collect();
        for concept in &spec.restricted {
            if required.contains(concept) {
                diags.push(Diagnostic::error(
                    codes::CONTRADICTORY_PARAMETER,
                    node,
                    format!("{path}.{name}"),
                    format!("`{concept}` is both required and restricted for `{name}`"),
                ));
            }
        }
    }
}

/// Checks a stage function reference: it must exist, take only declared
/// parameters, and have the right result shape (Boolean for predicates,
/// none for effects).
fn validate_stage(
    graph: &HierarchyGraph,
    node: &str,
    code: &'static str,
    path: &str,
    stage: Stage,
    function: &str,
    params: &BTreeSet<&str>,
    diags: &mut Vec<Diagnostic>,
) {
    let Some(def) = graph.function(function) else {
        diags.push(Diagnostic::error(
            code,
            node,
            path.to_string(),
            format!("stage {} references unknown function `{function}`", stage.label()),
        ));
        return;
    };
    match stage {
        Stage::Eff => {
            if def.result_domain.is_some() {
                diags.push(Diagnostic::error(
                    code,
                    node,
                    path.to_string(),
                    format!("effect function `{function}` must not declare a result"),
                ));
            }
        }
        _ => {
            if def.result_domain != Some(DomainRef::Boolean) {
                diags.push(Diagnostic::error(
                    code,
                    node,
                    path.to_string(),
                    format!(
                        "stage {} function `{function}` must declare a Boolean result",
                        stage.label()
                    ),
                ));
            }
        }
    }
    for arg in &def.argument_order {
        if !params.contains(arg.as_str()) {
            diags.push(Diagnostic::error(
                code,
                node,
                path.to_string(),
                format!(
                    "stage {} function `{function}` takes `{arg}`, which is not a declared parameter",
                    stage.label()
                ),
            ));
        }
    }
}

fn validate_action(graph: &HierarchyGraph, action: &ActionDef, diags: &mut Vec<Diagnostic>) {
    let path = format!("concepts.{}.data", action.name);
    if let Some(node) = graph.node(&action.name) {
        if node.kind != crate::hierarchy::ConceptKind::Action {
            diags.push(Diagnostic::error(
                codes::BAD_ACTION_SHAPE,
                &action.name,
                path.clone(),
                format!("node kind is {:?}, expected Action", node.kind),
            ));
        }
    }
    validate_param_specs(
        graph,
        &action.name,
        &format!("{path}.entities"),
        action.entity_params.iter().map(|(n, s)| (n, s)),
        diags,
    );
    let params = action.param_names();
    if let Some(pre) = &action.pre {
        validate_stage(
            graph,
            &action.name,
            codes::ACTION_STAGE_TYPE,
            &format!("{path}.pre"),
            Stage::Pre,
            pre,
            &params,
            diags,
        );
    }
    validate_stage(
        graph,
        &action.name,
        codes::ACTION_STAGE_TYPE,
        &format!("{path}.eff"),
        Stage::Eff,
        &action.eff,
        &params,
        diags,
    );
    // One change per bound entity, as far as a shallow scan can see. Writes
    // to the same property in both branches of a condition count once.
    let mut per_entity: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let shapes = write_shapes(graph, &action.eff);
    for shape in &shapes {
        let (entity, property) = shape.target();
        per_entity.entry(entity).or_default().insert(property);
    }
    for (entity, properties) in per_entity {
        if properties.len() > 1 {
            diags.push(Diagnostic::error(
                codes::MULTIPLE_CHANGES_PER_ENTITY,
                &action.name,
                format!("{path}.eff"),
                format!(
                    "effect writes {} properties of `{entity}` ({}); an action changes one",
                    properties.len(),
                    properties.into_iter().collect::<Vec<_>>().join(", ")
                ),
            ));
        }
    }
}

fn validate_skill(graph: &HierarchyGraph, skill: &SkillDef, diags: &mut Vec<Diagnostic>) {
    let path = format!("concepts.{}.data", skill.name);
    if let Some(node) = graph.node(&skill.name) {
        if node.kind != crate::hierarchy::ConceptKind::Skill {
            diags.push(Diagnostic::error(
                codes::BAD_SKILL_SHAPE,
                &skill.name,
                path.clone(),
                format!("node kind is {:?}, expected Skill", node.kind),
            ));
        }
    }
    if skill.agent_params.is_empty() {
        diags.push(Diagnostic::error(
            codes::BAD_SKILL_SHAPE,
            &skill.name,
            format!("{path}.agents"),
            "a skill needs at least one agent parameter".to_string(),
        ));
    }
    validate_param_specs(
        graph,
        &skill.name,
        &format!("{path}.params"),
        skill.agent_params.iter().chain(skill.entity_params.iter()).map(|(n, s)| (n, s)),
        diags,
    );
    let params = skill.param_names();
    let stages: [(Stage, Option<&str>); 4] = [
        (Stage::Pre, skill.pre.as_deref()),
        (Stage::Check, Some(skill.check.as_str())),
        (Stage::Succ, skill.succ.as_deref()),
        (Stage::Eff, skill.eff.as_deref()),
    ];
    for (stage, function) in stages {
        if let Some(function) = function {
            validate_stage(
                graph,
                &skill.name,
                codes::SKILL_STAGE_TYPE,
                &format!("{path}.{}", stage.label()),
                stage,
                function,
                &params,
                diags,
            );
        }
    }
    for assoc in &skill.action_assoc {
        let assoc_path = format!("{path}.actions.{}", assoc.action);
        let Some(action) = graph.action(&assoc.action) else {
            diags.push(Diagnostic::error(
                codes::BAD_ACTION_ASSOCIATION,
                &skill.name,
                assoc_path,
                format!("association targets unknown action `{}`", assoc.action),
            ));
            continue;
        };
        let action_params = action.param_names();
        let mut covered = BTreeSet::new();
        for (source, action_param) in &assoc.param_map {
            let head = RefPath::parse(source).root;
            if !params.contains(head.as_str()) {
                diags.push(Diagnostic::error(
                    codes::BAD_ACTION_ASSOCIATION,
                    &skill.name,
                    format!("{assoc_path}.{source}"),
                    format!("association source `{source}` is not a declared skill parameter"),
                ));
            }
            if !action_params.contains(action_param.as_str()) {
                diags.push(Diagnostic::error(
                    codes::BAD_ACTION_ASSOCIATION,
                    &skill.name,
                    format!("{assoc_path}.{source}"),
                    format!(
                        "`{action_param}` is not a parameter of action `{}`",
                        assoc.action
                    ),
                ));
            }
            if !covered.insert(action_param.as_str()) {
                diags.push(Diagnostic::error(
                    codes::BAD_ACTION_ASSOCIATION,
                    &skill.name,
                    format!("{assoc_path}.{source}"),
                    format!("two sources map onto action parameter `{action_param}`"),
                ));
            }
        }
        for (entity_param, _) in &action.entity_params {
            if !covered.contains(entity_param.as_str()) {
                diags.push(Diagnostic::error(
                    codes::PARTIAL_ACTION_ASSOCIATION,
                    &skill.name,
                    assoc_path.clone(),
                    format!(
                        "association to `{}` leaves entity parameter `{entity_param}` unmapped",
                        assoc.action
                    ),
                ));
            }
        }
    }
    for (param, extractor) in &skill.extractors {
        let ex_path = format!("{path}.extractors.{param}");
        if !skill.value_params.contains_key(param) {
            diags.push(Diagnostic::error(
                codes::BAD_SKILL_SHAPE,
                &skill.name,
                ex_path.clone(),
                format!("extractor targets `{param}`, which is not a value parameter"),
            ));
        }
        let source = RefPath::parse(&extractor.source);
        match source.property {
            Some(_) => {
                if !params.contains(source.root.as_str()) {
                    diags.push(Diagnostic::error(
                        codes::BAD_SKILL_SHAPE,
                        &skill.name,
                        ex_path,
                        format!(
                            "extractor reads `{}`, whose head is not a declared parameter",
                            extractor.source
                        ),
                    ));
                }
            }
            None => {
                if graph.function(&source.root).is_none() {
                    diags.push(Diagnostic::error(
                        codes::BAD_SKILL_SHAPE,
                        &skill.name,
                        ex_path,
                        format!("extractor function `{}` is not defined", extractor.source),
                    ));
                }
            }
        }
    }
    match graph.resolve_concept_default(&skill.name, "manipulations") {
        Err(err) => diags.push(Diagnostic::error(
            codes::DUPLICATE_MANIPULATION,
            &skill.name,
            format!("{path}.manipulations"),
            format!("manipulation default cannot be resolved: {err}"),
        )),
        Ok(None) => {}
        Ok(Some(raw)) => match decode_manipulations(&raw) {
            Err(detail) => diags.push(Diagnostic::error(
                codes::DUPLICATE_MANIPULATION,
                &skill.name,
                format!("{path}.manipulations"),
                detail,
            )),
            Ok(triples) => {
                let mut pairs = BTreeSet::new();
                for triple in &triples {
                    for name in triple {
                        if !params.contains(name.as_str()) {
                            diags.push(Diagnostic::error(
                                codes::DUPLICATE_MANIPULATION,
                                &skill.name,
                                format!("{path}.manipulations"),
                                format!("manipulation names `{name}`, which is not a parameter"),
                            ));
                        }
                    }
                    if !pairs.insert((triple[0].as_str(), triple[1].as_str())) {
                        diags.push(Diagnostic::error(
                            codes::DUPLICATE_MANIPULATION,
                            &skill.name,
                            format!("{path}.manipulations"),
                            format!(
                                "two manipulations share the agent-gripper pair ({}, {})",
                                triple[0], triple[1]
                            ),
                        ));
                    }
                }
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::{call, lit, refer, BuiltinRegistry, FunctionDef};
    use crate::hierarchy::test_support::small_household;
    use crate::hierarchy::{ConceptKind, ConceptNode, InstanceRecord};
    use crate::value::DomainRef as D;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Bird taxonomy with a Fly skill restricted away from penguins.
    fn bird_world() -> HierarchyGraph {
        let mut graph = small_household();
        graph.add_concept(ConceptNode::new("Bird", &["PhysicalEntity"]));
        graph.add_concept(ConceptNode::new("Penguin", &["Bird"]));
        graph.add_concept(ConceptNode::new("Sparrow", &["Bird"]));
        graph.add_instance(InstanceRecord::new("Pingu", &["Penguin"]));
        graph.add_instance(InstanceRecord::new("Jack", &["Sparrow"]));
        graph.rebuild_index().unwrap();
        graph.add_function(
            FunctionDef::new("AlwaysTrue").result(D::Boolean).statement(Call::assign(
                "res",
                lit(Value::Boolean(true)),
            )),
        );
        graph.add_concept(ConceptNode::new("Fly", &["Concept"]).kind(ConceptKind::Skill));
        graph.add_skill(
            SkillDef::new("Fly", "AlwaysTrue")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("flyer", ParamSpec::of(&["Bird"]).excluding(&["Penguin"])),
        );
        graph.rebuild_index().unwrap();
        graph
    }

    #[test]
    fn restriction_concepts_exclude_penguins_from_flying() {
        let graph = bird_world();
        let spec = ParamSpec::of(&["Bird"]).excluding(&["Penguin"]);
        assert!(entity_matches_parameter(&graph, "Jack", &spec).unwrap());
        assert!(!entity_matches_parameter(&graph, "Pingu", &spec).unwrap());
        let plain = ParamSpec::of(&["Bird"]);
        assert!(entity_matches_parameter(&graph, "Pingu", &plain).unwrap());
        assert!(entity_matches_parameter(&graph, "Jack", &plain).unwrap());
    }

    #[test]
    fn unknown_concept_in_spec_is_an_error() {
        let graph = bird_world();
        let spec = ParamSpec::of(&["Pterodactyl"]);
        assert!(entity_matches_parameter(&graph, "Jack", &spec).is_err());
    }

    #[test]
    fn matching_agrees_with_set_algebra_over_random_memberships() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let mut graph = HierarchyGraph::default();
            graph.add_concept(ConceptNode::new("Concept", &[]));
            let concept_count = rng.gen_range(3..10);
            let mut names = vec!["Concept".to_string()];
            for i in 0..concept_count {
                let parent = names[rng.gen_range(0..names.len())].clone();
                let name = format!("C{i}");
                graph.add_concept(ConceptNode::new(&name, &[&parent]));
                names.push(name);
            }
            let member_count = rng.gen_range(1..3);
            let members: Vec<String> = (0..member_count)
                .map(|_| names[rng.gen_range(1..names.len())].clone())
                .collect();
            let member_refs: Vec<&str> = members.iter().map(|s| s.as_str()).collect();
            graph.add_instance(InstanceRecord::new("X", &member_refs));
            graph.rebuild_index().unwrap();

            // Independent closure: walk parent edges directly.
            let mut closure: BTreeSet<String> = BTreeSet::new();
            let mut frontier = members.clone();
            while let Some(next) = frontier.pop() {
                if closure.insert(next.clone()) {
                    frontier.extend(graph.node(&next).unwrap().direct_parents.clone());
                }
            }

            for _ in 0..20 {
                let pick = |rng: &mut ChaCha8Rng| -> Vec<String> {
                    (0..rng.gen_range(0..3))
                        .map(|_| names[rng.gen_range(0..names.len())].clone())
                        .collect()
                };
                let mut required = pick(&mut rng);
                if required.is_empty() {
                    required.push(names[rng.gen_range(0..names.len())].clone());
                }
                let restricted = pick(&mut rng);
                let spec = ParamSpec { required: required.clone(), restricted: restricted.clone() };
                let want = required.iter().all(|c| closure.contains(c))
                    && restricted.iter().all(|c| !closure.contains(c));
                let got = entity_matches_parameter(&graph, "X", &spec).unwrap();
                assert_eq!(got, want, "required {required:?} restricted {restricted:?}");
            }
        }
    }

    #[test]
    fn affordances_match_an_exhaustive_scan() {
        let graph = bird_world();
        for entity in ["Jack", "Pingu", "PersonInstance", "WhiteBowlInstance"] {
            let got = affordances(&graph, entity);
            let mut want = BTreeSet::new();
            for action in graph.actions() {
                for (param, spec) in &action.entity_params {
                    if entity_matches_parameter(&graph, entity, spec).unwrap_or(false) {
                        want.insert((action.name.clone(), param.clone()));
                    }
                }
            }
            for skill in graph.skills() {
                for (param, spec) in skill.matchable_params() {
                    if entity_matches_parameter(&graph, entity, spec).unwrap_or(false) {
                        want.insert((skill.name.clone(), param.to_string()));
                    }
                }
            }
            assert_eq!(got, want, "entity {entity}");
        }
    }

    #[test]
    fn sparrow_affords_flying_but_penguin_does_not() {
        let graph = bird_world();
        let jack = affordances(&graph, "Jack");
        assert!(jack.contains(&("Fly".to_string(), "flyer".to_string())));
        let pingu = affordances(&graph, "Pingu");
        assert!(!pingu.contains(&("Fly".to_string(), "flyer".to_string())));
        assert!(affordances(&graph, "GhostEntity").is_empty());
    }

    #[test]
    fn added_membership_only_removes_affordances_via_restrictions() {
        let mut graph = bird_world();
        let before = affordances(&graph, "Jack");
        // Becoming an agent only adds affordances.
        graph
            .mutate_instance_concepts("Jack", &["Human"], &[])
            .unwrap();
        let after = affordances(&graph, "Jack");
        assert!(after.is_superset(&before));
        // Becoming a penguin removes exactly the restriction-guarded pair.
        graph
            .mutate_instance_concepts("Jack", &["Penguin"], &[])
            .unwrap();
        let restricted = affordances(&graph, "Jack");
        let lost: BTreeSet<_> = after.difference(&restricted).cloned().collect();
        assert_eq!(
            lost,
            BTreeSet::from([("Fly".to_string(), "flyer".to_string())])
        );
    }

    #[test]
    fn merged_affordances_match_brute_force_tuples() {
        let graph = bird_world();
        let pools: &[&[&str]] = &[
            &["PersonInstance", "Jack"],
            &["PersonInstance", "LeftHandInstance"],
            &["PersonInstance", "Jack", "Pingu"],
            &["Jack"],
        ];
        for pool in pools {
            let got = merge_affordances(&graph, pool);
            let per_entity: Vec<BTreeSet<(String, String)>> =
                pool.iter().map(|e| affordances(&graph, e)).collect();
            let mut want = BTreeSet::new();
            let all_defs: BTreeSet<String> = graph
                .actions()
                .map(|a| a.name.clone())
                .chain(graph.skills().map(|s| s.name.clone()))
                .collect();
            for def in &all_defs {
                let mut params: Vec<Vec<String>> = Vec::new();
                for pairs in &per_entity {
                    params.push(
                        pairs
                            .iter()
                            .filter(|(d, _)| d == def)
                            .map(|(_, p)| p.clone())
                            .collect(),
                    );
                }
                let mut stack: Vec<Vec<String>> = vec![Vec::new()];
                for options in &params {
                    let mut next = Vec::new();
                    for partial in &stack {
                        for option in options {
                            if !partial.contains(option) {
                                let mut extended = partial.clone();
                                extended.push(option.clone());
                                next.push(extended);
                            }
                        }
                    }
                    stack = next;
                }
                for tuple in stack {
                    if tuple.len() == pool.len() {
                        want.insert((def.clone(), tuple));
                    }
                }
            }
            assert_eq!(got, want, "pool {pool:?}");
        }
    }

    #[test]
    fn merged_tuples_project_into_individual_affordances() {
        let graph = bird_world();
        let pool = ["PersonInstance", "Jack"];
        let merged = merge_affordances(&graph, &pool);
        assert!(merged.contains(&("Fly".to_string(), vec!["a".to_string(), "flyer".to_string()])));
        for (def, tuple) in &merged {
            for (entity, param) in pool.iter().zip(tuple) {
                assert!(
                    affordances(&graph, entity).contains(&(def.clone(), param.clone())),
                    "({def}, {param}) not afforded by {entity}"
                );
            }
            let distinct: BTreeSet<&String> = tuple.iter().collect();
            assert_eq!(distinct.len(), tuple.len(), "tuple params must be distinct");
        }
    }

    #[test]
    fn single_entity_merge_degenerates_to_its_affordances() {
        let graph = bird_world();
        let merged = merge_affordances(&graph, &["Jack"]);
        let want: BTreeSet<(String, Vec<String>)> = affordances(&graph, "Jack")
            .into_iter()
            .map(|(d, p)| (d, vec![p]))
            .collect();
        assert_eq!(merged, want);
    }

    /// Container world with a transfer-style effect: the moved portion
    /// leaves one content sequence, enters the other, and relocates.
    fn transfer_world() -> HierarchyGraph {
        let mut graph = small_household();
        graph.add_instance(
            InstanceRecord::new("MilkBoxInstance", &["Container"]).value(
                "content",
                Value::entity_sequence("PhysicalEntity", &["MilkPortionInstance"]),
            ),
        );
        graph.add_instance(InstanceRecord::new("MilkPortionInstance", &["PhysicalEntity"]));
        graph
            .instance_mut("WhiteBowlInstance")
            .unwrap()
            .property_values
            .insert("content".to_string(), Value::entity_sequence("PhysicalEntity", &[]));
        graph.rebuild_index().unwrap();
        graph.add_function(
            FunctionDef::new("TransferContentEff")
                .arg("from", D::Concept("Container".into()))
                .arg("to", D::Concept("Container".into()))
                .arg("what", D::Concept("PhysicalEntity".into()))
                .statement(Call::assign(
                    "from.content",
                    call(Call::new("SequenceRemove")
                        .slot("sequence", refer("from.content"))
                        .slot("item", refer("what"))),
                ))
                .statement(Call::assign(
                    "to.content",
                    call(Call::new("SequenceInsert")
                        .slot("sequence", refer("to.content"))
                        .slot("item", refer("what"))),
                ))
                .statement(Call::assign("what.location", refer("to.location"))),
        );
        graph.add_function(
            FunctionDef::new("ContainsWhat")
                .arg("from", D::Concept("Container".into()))
                .arg("what", D::Concept("PhysicalEntity".into()))
                .result(D::Boolean)
                .statement(Call::assign(
                    "res",
                    call(Call::new("SequenceContains")
                        .slot("sequence", refer("from.content"))
                        .slot("item", refer("what"))),
                )),
        );
        graph.add_concept(
            ConceptNode::new("TransferContent", &["Concept"]).kind(ConceptKind::Action),
        );
        graph.add_action(
            ActionDef::new("TransferContent", "TransferContentEff")
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("to", ParamSpec::of(&["Container"]))
                .entity("what", ParamSpec::of(&["PhysicalEntity"]))
                .pre("ContainsWhat"),
        );
        graph.rebuild_index().unwrap();
        graph
    }

    fn skill_node_with_manipulations(name: &str, parents: &[&str], triples: Option<&[[&str; 3]]>) -> ConceptNode {
        let mut node = ConceptNode::new(name, parents).kind(ConceptKind::Skill);
        if let Some(triples) = triples {
            node = node
                .property("manipulations", DomainRef::Sequence(Box::new(DomainRef::Sequence(Box::new(DomainRef::Text)))))
                .default("manipulations", encode_manipulations(triples));
        }
        node
    }

    #[test]
    fn effect_stage_transfers_content_and_location() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations("PourSkill", &["Concept"], None));
        graph.add_skill(
            SkillDef::new("PourSkill", "ContainsWhat")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("to", ParamSpec::of(&["Container"]))
                .entity("what", ParamSpec::of(&["PhysicalEntity"]))
                .eff("TransferContentEff"),
        );
        graph.rebuild_index().unwrap();
        let skill = graph.skill("PourSkill").unwrap().clone();
        let builtins = BuiltinRegistry::standard();
        let bindings = crate::functions::bindings(&[
            ("a", Value::EntityRef("PersonInstance".into())),
            ("from", Value::EntityRef("MilkBoxInstance".into())),
            ("to", Value::EntityRef("WhiteBowlInstance".into())),
            ("what", Value::EntityRef("MilkPortionInstance".into())),
        ]);
        let mut world = World::new(&mut graph, &builtins);
        let outcome = skill_stage(&mut world, &skill, Stage::Eff, &bindings).unwrap();
        assert_eq!(outcome, StageOutcome::Applied);
        assert_eq!(
            graph.resolve_property("MilkBoxInstance", "content").unwrap(),
            Value::entity_sequence("PhysicalEntity", &[])
        );
        assert_eq!(
            graph.resolve_property("WhiteBowlInstance", "content").unwrap(),
            Value::entity_sequence("PhysicalEntity", &["MilkPortionInstance"])
        );
        // One change per bound entity on the snapshot diff.
        let shapes = write_shapes(&graph, "TransferContentEff");
        let mut per_entity: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for shape in &shapes {
            let (entity, property) = shape.target();
            per_entity.entry(entity).or_default().insert(property);
        }
        assert!(per_entity.values().all(|props| props.len() == 1));
    }

    #[test]
    fn missing_success_stage_defaults_to_true() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations("PourSkill", &["Concept"], None));
        graph.add_skill(
            SkillDef::new("PourSkill", "ContainsWhat")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("what", ParamSpec::of(&["PhysicalEntity"])),
        );
        graph.rebuild_index().unwrap();
        let skill = graph.skill("PourSkill").unwrap().clone();
        let builtins = BuiltinRegistry::standard();
        let mut world = World::new(&mut graph, &builtins);
        let outcome = skill_stage(&mut world, &skill, Stage::Succ, &BTreeMap::new()).unwrap();
        assert_eq!(outcome, StageOutcome::Holds(true));
        // Absent effect stage applies vacuously.
        let outcome = skill_stage(&mut world, &skill, Stage::Eff, &BTreeMap::new()).unwrap();
        assert_eq!(outcome, StageOutcome::Applied);
    }

    #[test]
    fn unknown_valued_predicate_is_indeterminate_not_false() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations("PourSkill", &["Concept"], None));
        graph.add_skill(
            SkillDef::new("PourSkill", "ContainsWhat")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("what", ParamSpec::of(&["PhysicalEntity"])),
        );
        graph.rebuild_index().unwrap();
        let skill = graph.skill("PourSkill").unwrap().clone();
        let builtins = BuiltinRegistry::standard();
        // TeaCup has no content value, so the check reads UNKNOWN.
        let bindings = crate::functions::bindings(&[
            ("from", Value::EntityRef("TeaCupInstance".into())),
            ("what", Value::EntityRef("MilkPortionInstance".into())),
        ]);
        let mut world = World::new(&mut graph, &builtins);
        let outcome = skill_stage(&mut world, &skill, Stage::Check, &bindings).unwrap();
        assert!(matches!(outcome, StageOutcome::Indeterminate(_)), "{outcome:?}");
    }

    #[test]
    fn manipulation_defaults_inherit_and_override() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations(
            "PourSkill",
            &["Concept"],
            Some(&[["a", "g", "from"]]),
        ));
        graph.add_concept(skill_node_with_manipulations(
            "PourWithTwoGrippers",
            &["PourSkill"],
            Some(&[["a", "g", "from"], ["a", "g2", "into"]]),
        ));
        graph.add_concept(skill_node_with_manipulations("PourQuietly", &["PourSkill"], None));
        let base = SkillDef::new("PourSkill", "ContainsWhat")
            .agent("a", ParamSpec::of(&["Agent"]))
            .entity("g", ParamSpec::of(&["Gripper"]))
            .entity("from", ParamSpec::of(&["Container"]))
            .entity("what", ParamSpec::of(&["PhysicalEntity"]));
        let mut two = base.clone();
        two.name = "PourWithTwoGrippers".to_string();
        two = two.entity("g2", ParamSpec::of(&["Gripper"])).entity("into", ParamSpec::of(&["Container"]));
        let mut quiet = base.clone();
        quiet.name = "PourQuietly".to_string();
        graph.add_skill(base);
        graph.add_skill(two);
        graph.add_skill(quiet);
        graph.add_instance(InstanceRecord::new("RightHandInstance", &["Hand"]));
        graph.rebuild_index().unwrap();

        let bindings = crate::functions::bindings(&[
            ("a", Value::EntityRef("PersonInstance".into())),
            ("g", Value::EntityRef("LeftHandInstance".into())),
            ("g2", Value::EntityRef("RightHandInstance".into())),
            ("from", Value::EntityRef("MilkBoxInstance".into())),
            ("into", Value::EntityRef("WhiteBowlInstance".into())),
            ("what", Value::EntityRef("MilkPortionInstance".into())),
        ]);
        let base = graph.skill("PourSkill").unwrap();
        assert_eq!(
            manipulations_of(&graph, base, &bindings).unwrap(),
            BTreeSet::from([[
                "PersonInstance".to_string(),
                "LeftHandInstance".to_string(),
                "MilkBoxInstance".to_string()
            ]])
        );
        let two = graph.skill("PourWithTwoGrippers").unwrap();
        assert_eq!(
            manipulations_of(&graph, two, &bindings).unwrap(),
            BTreeSet::from([
                [
                    "PersonInstance".to_string(),
                    "LeftHandInstance".to_string(),
                    "MilkBoxInstance".to_string()
                ],
                [
                    "PersonInstance".to_string(),
                    "RightHandInstance".to_string(),
                    "WhiteBowlInstance".to_string()
                ]
            ])
        );
        // No own default: inherits the parent skill's triple set.
        let quiet = graph.skill("PourQuietly").unwrap();
        assert_eq!(
            manipulations_of(&graph, quiet, &bindings).unwrap(),
            manipulations_of(&graph, base, &bindings).unwrap()
        );
    }

    #[test]
    fn skill_without_manipulations_tracks_empty_set() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations("WaveSkill", &["Concept"], None));
        graph.add_skill(
            SkillDef::new("WaveSkill", "ContainsWhat").agent("a", ParamSpec::of(&["Agent"])),
        );
        graph.rebuild_index().unwrap();
        let skill = graph.skill("WaveSkill").unwrap();
        assert!(manipulations_of(&graph, skill, &BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn substituted_duplicate_agent_gripper_pair_is_rejected() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations(
            "DoublePour",
            &["Concept"],
            Some(&[["a", "g", "from"], ["a2", "g2", "into"]]),
        ));
        graph.add_skill(
            SkillDef::new("DoublePour", "ContainsWhat")
                .agent("a", ParamSpec::of(&["Agent"]))
                .agent("a2", ParamSpec::of(&["Agent"]))
                .entity("g", ParamSpec::of(&["Gripper"]))
                .entity("g2", ParamSpec::of(&["Gripper"]))
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("into", ParamSpec::of(&["Container"])),
        );
        graph.rebuild_index().unwrap();
        let skill = graph.skill("DoublePour").unwrap();
        // Distinct params bound to the same agent and gripper instances.
        let bindings = crate::functions::bindings(&[
            ("a", Value::EntityRef("PersonInstance".into())),
            ("a2", Value::EntityRef("PersonInstance".into())),
            ("g", Value::EntityRef("LeftHandInstance".into())),
            ("g2", Value::EntityRef("LeftHandInstance".into())),
            ("from", Value::EntityRef("MilkBoxInstance".into())),
            ("into", Value::EntityRef("WhiteBowlInstance".into())),
        ]);
        assert!(manipulations_of(&graph, skill, &bindings).is_err());
    }

    #[test]
    fn derived_actions_fill_parameters_through_the_mapping() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations("PourSkill", &["Concept"], None));
        graph.add_skill(
            SkillDef::new("PourSkill", "ContainsWhat")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("to", ParamSpec::of(&["Container"]))
                .entity("what", ParamSpec::of(&["PhysicalEntity"]))
                .associate(ActionAssociation::new(
                    "TransferContent",
                    &[("from", "from"), ("to", "to"), ("what", "what")],
                )),
        );
        graph.rebuild_index().unwrap();
        let skill = graph.skill("PourSkill").unwrap().clone();
        let bindings = crate::functions::bindings(&[
            ("a", Value::EntityRef("PersonInstance".into())),
            ("from", Value::EntityRef("MilkBoxInstance".into())),
            ("to", Value::EntityRef("WhiteBowlInstance".into())),
            ("what", Value::EntityRef("MilkPortionInstance".into())),
        ]);
        let actions = derive_actions(&graph, &skill, &bindings).unwrap();
        assert_eq!(actions.len(), 1);
        assert_eq!(actions[0].action, "TransferContent");
        assert_eq!(
            actions[0].params.get("what"),
            Some(&Value::EntityRef("MilkPortionInstance".into()))
        );
        // Empty association list derives nothing.
        let mut bare = skill.clone();
        bare.action_assoc.clear();
        assert!(derive_actions(&graph, &bare, &bindings).unwrap().is_empty());
        // Unbound mapping source is an error.
        let empty = BTreeMap::new();
        assert!(derive_actions(&graph, &skill, &empty).is_err());
    }

    #[test]
    fn dotted_association_sources_read_current_properties() {
        let mut graph = transfer_world();
        graph.add_concept(skill_node_with_manipulations("CarrySkill", &["Concept"], None));
        graph.add_concept(
            ConceptNode::new("ChangeLocation", &["Concept"]).kind(ConceptKind::Action),
        );
        graph.add_function(
            FunctionDef::new("SetLocation")
                .arg("e", D::Concept("PhysicalEntity".into()))
                .arg("toLocation", D::Location)
                .statement(Call::assign("e.location", refer("toLocation"))),
        );
        graph.add_action(
            ActionDef::new("ChangeLocation", "SetLocation")
                .entity("e", ParamSpec::of(&["PhysicalEntity"]))
                .value("toLocation", D::Location),
        );
        graph.add_skill(
            SkillDef::new("CarrySkill", "ContainsWhat")
                .agent("a", ParamSpec::of(&["Agent"]))
                .entity("o", ParamSpec::of(&["MovableObject"]))
                .associate(ActionAssociation::new(
                    "ChangeLocation",
                    &[("o", "e"), ("o.location", "toLocation")],
                )),
        );
        let carried_location = Value::Location(crate::value::Location::at_origin(
            crate::pose::Pose::from_array(&[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap(),
        ));
        graph
            .instance_mut("VittelBottleInstance")
            .unwrap()
            .property_values
            .insert("location".to_string(), carried_location.clone());
        graph.rebuild_index().unwrap();
        let skill = graph.skill("CarrySkill").unwrap().clone();
        let bindings = crate::functions::bindings(&[
            ("a", Value::EntityRef("PersonInstance".into())),
            ("o", Value::EntityRef("VittelBottleInstance".into())),
        ]);
        let actions = derive_actions(&graph, &skill, &bindings).unwrap();
        assert_eq!(actions[0].params.get("toLocation"), Some(&carried_location));
    }

    #[test]
    fn validation_accepts_the_transfer_world() {
        let graph = transfer_world();
        let diags = validate_acts(&graph);
        assert!(diags.is_empty(), "{diags:?}");
    }

    #[test]
    fn validation_flags_stage_and_shape_problems() {
        let mut graph = transfer_world();
        graph.add_function(
            FunctionDef::new("NumberResult").result(D::Number).statement(Call::assign(
                "res",
                lit(Value::Number(1.0)),
            )),
        );
        // Boolean stage with a Number result, unknown effect, param typo.
        graph.add_action(
            ActionDef::new("BrokenAction", "NoSuchEff")
                .entity("x", ParamSpec::of(&["Container"]).excluding(&["Container"]))
                .pre("NumberResult"),
        );
        graph.add_concept(skill_node_with_manipulations(
            "BrokenSkill",
            &["Concept"],
            Some(&[["a", "g", "o"], ["a", "g", "o2"]]),
        ));
        graph.add_skill(
            SkillDef::new("BrokenSkill", "ContainsWhat")
                .entity("g", ParamSpec::of(&["Gripper"]))
                .entity("o", ParamSpec::of(&["NoSuchConcept"]))
                .associate(ActionAssociation::new(
                    "TransferContent",
                    &[("o", "from"), ("ghost", "to"), ("o", "badParam")],
                )),
        );
        graph.rebuild_index().unwrap();
        let diags = validate_acts(&graph);
        let codes_seen: BTreeSet<&str> = diags.iter().map(|d| d.code).collect();
        assert!(codes_seen.contains(codes::ACTION_STAGE_TYPE), "{diags:?}");
        assert!(codes_seen.contains(codes::CONTRADICTORY_PARAMETER), "{diags:?}");
        assert!(codes_seen.contains(codes::UNKNOWN_DOMAIN), "{diags:?}");
        assert!(codes_seen.contains(codes::BAD_SKILL_SHAPE), "{diags:?}");
        assert!(codes_seen.contains(codes::BAD_ACTION_ASSOCIATION), "{diags:?}");
        assert!(codes_seen.contains(codes::PARTIAL_ACTION_ASSOCIATION), "{diags:?}");
        assert!(codes_seen.contains(codes::DUPLICATE_MANIPULATION), "{diags:?}");
    }

    #[test]
    fn validation_flags_multi_property_effects() {
        let mut graph = transfer_world();
        graph.add_function(
            FunctionDef::new("DoubleWrite")
                .arg("x", D::Concept("Container".into()))
                .statement(Call::assign("x.content", lit(Value::entity_sequence("PhysicalEntity", &[]))))
                .statement(Call::assign("x.basicShape", lit(Value::Text("cuboid".into())))),
        );
        graph.add_action(
            ActionDef::new("DoubleAction", "DoubleWrite")
                .entity("x", ParamSpec::of(&["Container"])),
        );
        let diags = validate_acts(&graph);
        assert!(
            diags.iter().any(|d| d.code == codes::MULTIPLE_CHANGES_PER_ENTITY),
            "{diags:?}"
        );
    }

    #[test]
    fn write_shapes_classify_assignment_sources() {
        let graph = transfer_world();
        let shapes = write_shapes(&graph, "TransferContentEff");
        assert_eq!(
            shapes,
            vec![
                WriteShape::SeqRemove {
                    entity: "from".into(),
                    property: "content".into(),
                    item: "what".into()
                },
                WriteShape::SeqInsert {
                    entity: "to".into(),
                    property: "content".into(),
                    item: "what".into()
                },
                WriteShape::SetFromPath {
                    entity: "what".into(),
                    property: "location".into(),
                    source: RefPath::parse("to.location")
                },
            ]
        );
        assert!(write_shapes(&graph, "NoSuchFunction").is_empty());
    }
}

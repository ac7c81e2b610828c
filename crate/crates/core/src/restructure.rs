//! Offline knowledge reorganization. Two extraction passes inspect a
//! settled graph and propose changes as a serializable plan: property
//! values shared by enough instances become a new concept carrying the
//! value as a default, and composition subtrees repeated across function
//! procedures become a new function that the occurrences call instead.
//!
//! Plans are reviewable JSON and are applied atomically: the graph is
//! cloned, mutated, revalidated, and probed for semantic preservation
//! (every property resolution that existed before must resolve to the
//! same value after); only then does the clone replace the original. A
//! fingerprint taken at extraction time rejects plans whose graph has
//! changed underneath them.
//!
//! Both passes are idempotent. A value cluster whose value is already a
//! default of a concept common to all members is skipped, so the concept
//! extracted by one pass suppresses the next. A subtree pattern that
//! already has a defining function (a function whose whole body is that
//! pattern over its own arguments) is skipped the same way.

use crate::error::{KbError, Severity};
use crate::functions::{
    validate_functions, BuiltinRegistry, Call, FunctionDef, ProcExpr, RefPath,
};
use crate::hierarchy::{ConceptKind, ConceptNode, HierarchyGraph};
use crate::io::{decode_call, decode_value, encode_call, encode_value};
use crate::value::{typecheck_value, DomainRef, Value};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

/// Extraction thresholds. A value cluster needs `min_cluster_size`
/// instances; a composition subtree needs `min_occurrences` occurrences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestructureOptions {
    pub min_cluster_size: usize,
    pub min_occurrences: usize,
}

impl Default for RestructureOptions {
    fn default() -> RestructureOptions {
        RestructureOptions { min_cluster_size: 3, min_occurrences: 2 }
    }
}

/// A reviewable, serializable batch of proposed graph changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestructurePlan {
    /// Fingerprint of the graph the plan was extracted from; applying to
    /// any other graph fails.
    pub source_fingerprint: String,
    #[serde(default)]
    pub new_concepts: Vec<ConceptExtraction>,
    #[serde(default)]
    pub new_functions: Vec<FunctionExtraction>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RestructurePlan {
    fn for_graph(graph: &HierarchyGraph) -> RestructurePlan {
        RestructurePlan {
            source_fingerprint: graph_fingerprint(graph),
            new_concepts: Vec::new(),
            new_functions: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.new_concepts.is_empty() && self.new_functions.is_empty()
    }
}

/// One planned concept: the cluster members become members of a concept
/// defaulting their shared value. Members keep their explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExtraction {
    pub name: String,
    pub parents: Vec<String>,
    pub property: String,
    pub domain: String,
    pub value: Json,
    pub members: Vec<String>,
}

/// One planned function: the shared subtree as a body, holes as
/// arguments, and every occurrence to rewrite into a call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionExtraction {
    pub name: String,
    pub arguments: Vec<ArgDecl>,
    pub result: Option<String>,
    /// The defining statement (`res` assigned the shared subtree), in the
    /// document call encoding.
    pub body: Json,
    pub sites: Vec<RewriteSite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgDecl {
    pub name: String,
    pub domain: String,
}

/// Where an occurrence lives: a statement of a function's procedure plus
/// the path from that statement down to the matched call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RewriteSite {
    pub function: String,
    pub statement: usize,
    pub path: Vec<PathStep>,
}

/// One step of a site path: into a call's slot, or into a branch block's
/// numbered statement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathStep {
    Stmt(usize),
    Slot(String),
}

/// Stable hash of the graph's canonical serialization. Two graphs share a
/// fingerprint exactly when they serialize identically.
pub fn graph_fingerprint(graph: &HierarchyGraph) -> String {
    let text = crate::io::serialize_hierarchy(graph).to_string();
    let mut hasher = DefaultHasher::new();
    text.hash(&mut hasher);
    format!("{:016x}", hasher.finish())
}

fn short_hash(text: &str) -> String {
    let mut hasher = DefaultHasher::new();
    text.hash(&mut hasher);
    format!("{:08x}", hasher.finish() as u32)
}

/// First name in `base`, `base_2`, `base_3`, … that collides with nothing
/// in the graph and nothing already planned.
fn unique_name(graph: &HierarchyGraph, base: &str, taken: &BTreeSet<String>) -> String {
    let free = |name: &str| {
        !graph.has_concept(name) && !graph.has_instance(name) && !taken.contains(name)
    };
    if free(base) {
        return base.to_string();
    }
    let mut i = 2;
    loop {
        let candidate = format!("{base}_{i}");
        if free(&candidate) {
            return candidate;
        }
        i += 1;
    }
}

pub fn extract_concepts(graph: &HierarchyGraph) -> RestructurePlan {
    extract_concepts_with(graph, &RestructureOptions::default())
}

/// Clusters explicit property values across instances. Every (property,
/// value) held by at least `min_cluster_size` instances and not already a
/// default of a concept common to all of them becomes a planned concept:
/// parents are the most specialized concepts the members share, the value
/// rides along as the default, and the members are rewired in.
pub fn extract_concepts_with(
    graph: &HierarchyGraph,
    options: &RestructureOptions,
) -> RestructurePlan {
    let mut plan = RestructurePlan::for_graph(graph);
    let mut clusters: BTreeMap<(String, String), (Value, Vec<String>)> = BTreeMap::new();
    for record in graph.instances() {
        for (property, value) in &record.property_values {
            if value.is_unknown() {
                continue;
            }
            clusters
                .entry((property.clone(), value.canonical_key()))
                .or_insert_with(|| (value.clone(), Vec::new()))
                .1
                .push(record.name.clone());
        }
    }

    let mut taken = BTreeSet::new();
    for ((property, _), (value, members)) in clusters {
        if members.len() < options.min_cluster_size {
            continue;
        }
        let mut common: Option<BTreeSet<String>> = None;
        for member in &members {
            let closure = graph.instance_closure(member);
            common = Some(match common {
                None => closure,
                Some(acc) => acc.intersection(&closure).cloned().collect(),
            });
        }
        let already_defaulted = common.unwrap_or_default().iter().any(|concept| {
            graph
                .node(concept)
                .and_then(|node| node.default_values.get(&property))
                == Some(&value)
        });
        if already_defaulted {
            continue;
        }
        let Some(domain) = graph.declared_domain(&members[0], &property) else {
            plan.notes.push(format!(
                "cluster on `{property}` skipped: no declared domain reachable from `{}`",
                members[0]
            ));
            continue;
        };
        let member_refs: Vec<&str> = members.iter().map(String::as_str).collect();
        let parents: Vec<String> =
            graph.most_specialized_common_concepts(&member_refs).into_iter().collect();
        let base = format!("Auto_{property}_{}", short_hash(&format!("{property}={}", value.canonical_key())));
        let name = unique_name(graph, &base, &taken);
        taken.insert(name.clone());
        plan.notes.push(format!(
            "members of `{name}` keep their explicit `{property}` values; the new default makes them redundant"
        ));
        plan.new_concepts.push(ConceptExtraction {
            name,
            parents,
            property,
            domain: domain.to_string(),
            value: encode_value(&value),
            members,
        });
    }
    plan
}

pub fn extract_functions(graph: &HierarchyGraph) -> RestructurePlan {
    extract_functions_with(graph, &RestructureOptions::default())
}

/// Finds composition subtrees repeated across procedures. Occurrences
/// match when their call structure, slot names, and the equality pattern
/// of their leaves coincide; leaves equal across every occurrence stay in
/// the shared body as literals, all other leaf classes become arguments.
/// Overlapping candidates resolve largest subtree first.
pub fn extract_functions_with(
    graph: &HierarchyGraph,
    options: &RestructureOptions,
) -> RestructurePlan {
    let mut plan = RestructurePlan::for_graph(graph);
    let mut groups: BTreeMap<String, Vec<Occurrence>> = BTreeMap::new();
    for def in graph.functions() {
        let Some(procedure) = &def.procedure else {
            continue;
        };
        for (index, statement) in procedure.iter().enumerate() {
            collect_occurrences(&def.name, index, statement, &mut Vec::new(), &mut groups);
        }
    }

    let mut candidates: Vec<(String, Vec<Occurrence>)> = groups
        .into_iter()
        .filter(|(_, occurrences)| {
            occurrences.len() >= options.min_occurrences
                && occurrences[0].call_count >= 2
                && !has_defining_function(graph, &occurrences[0])
        })
        .collect();
    candidates.sort_by(|(key_a, a), (key_b, b)| {
        b[0].call_count.cmp(&a[0].call_count).then_with(|| key_a.cmp(key_b))
    });

    let builtins = BuiltinRegistry::standard();
    let mut used: BTreeMap<(String, usize), Vec<Vec<PathStep>>> = BTreeMap::new();
    let mut taken = BTreeSet::new();
    for (key, occurrences) in candidates {
        let viable: Vec<&Occurrence> = occurrences
            .iter()
            .filter(|occurrence| {
                used.get(&(occurrence.function.clone(), occurrence.statement))
                    .map_or(true, |paths| {
                        !paths.iter().any(|path| overlaps(path, &occurrence.path))
                    })
            })
            .collect();
        if viable.len() < options.min_occurrences {
            continue;
        }
        let extraction = build_extraction(graph, &builtins, &key, &viable, &taken);
        taken.insert(extraction.name.clone());
        for occurrence in &viable {
            used.entry((occurrence.function.clone(), occurrence.statement))
                .or_default()
                .push(occurrence.path.clone());
        }
        plan.notes.push(format!(
            "`{}` replaces {} occurrence(s) of a shared {}-call subtree",
            extraction.name,
            extraction.sites.len(),
            viable[0].call_count
        ));
        plan.new_functions.push(extraction);
    }
    plan.new_functions.sort_by(|a, b| a.name.cmp(&b.name));
    plan
}

/// Convenience pass running both extractions over the same snapshot.
pub fn extract_all(graph: &HierarchyGraph) -> RestructurePlan {
    extract_all_with(graph, &RestructureOptions::default())
}

pub fn extract_all_with(
    graph: &HierarchyGraph,
    options: &RestructureOptions,
) -> RestructurePlan {
    let mut plan = extract_concepts_with(graph, options);
    let functions = extract_functions_with(graph, options);
    plan.new_functions = functions.new_functions;
    plan.notes.extend(functions.notes);
    plan
}

/// One matched subtree: where it lives, the leaf expression of each
/// equality class (in first-appearance order), and where each class first
/// plugs in (for domain inference).
struct Occurrence {
    function: String,
    statement: usize,
    path: Vec<PathStep>,
    call_count: usize,
    classes: Vec<ProcExpr>,
    class_positions: Vec<(String, String)>,
}

/// True when one path is the other or an ancestor of the other.
fn overlaps(a: &[PathStep], b: &[PathStep]) -> bool {
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

fn is_special(name: &str) -> bool {
    name == "Assign" || name == "Condition"
}

/// A subtree is extractable only when it is a plain composition: no
/// special forms, no blocks, anywhere below.
fn pure_call_tree(call: &Call) -> bool {
    if is_special(&call.function) {
        return false;
    }
    call.slots.values().all(|expr| match expr {
        ProcExpr::Call(inner) => pure_call_tree(inner),
        ProcExpr::Block(_) => false,
        ProcExpr::Literal(_) | ProcExpr::Reference(_) => true,
    })
}

/// Renders the skeleton key of a pure call tree: function and slot names
/// verbatim, every leaf replaced by its equality-class id. Two subtrees
/// share a key exactly when they have the same shape and the same pattern
/// of repeated leaves.
fn skeleton(
    call: &Call,
    classes: &mut Vec<ProcExpr>,
    positions: &mut Vec<(String, String)>,
    calls: &mut usize,
    out: &mut String,
) {
    *calls += 1;
    out.push_str(&call.function);
    out.push('(');
    for (slot, expr) in &call.slots {
        out.push_str(slot);
        out.push(':');
        match expr {
            ProcExpr::Call(inner) => skeleton(inner, classes, positions, calls, out),
            leaf => {
                let id = match classes.iter().position(|seen| seen == leaf) {
                    Some(id) => id,
                    None => {
                        classes.push(leaf.clone());
                        positions.push((call.function.clone(), slot.clone()));
                        classes.len() - 1
                    }
                };
                out.push('#');
                out.push_str(&id.to_string());
            }
        }
        out.push(',');
    }
    out.push(')');
}

fn collect_occurrences(
    function: &str,
    statement: usize,
    call: &Call,
    path: &mut Vec<PathStep>,
    groups: &mut BTreeMap<String, Vec<Occurrence>>,
) {
    if pure_call_tree(call) {
        let mut classes = Vec::new();
        let mut positions = Vec::new();
        let mut calls = 0;
        let mut key = String::new();
        skeleton(call, &mut classes, &mut positions, &mut calls, &mut key);
        groups.entry(key).or_default().push(Occurrence {
            function: function.to_string(),
            statement,
            path: path.clone(),
            call_count: calls,
            classes,
            class_positions: positions,
        });
    }
    for (slot, expr) in &call.slots {
        match expr {
            ProcExpr::Call(inner) => {
                path.push(PathStep::Slot(slot.clone()));
                collect_occurrences(function, statement, inner, path, groups);
                path.pop();
            }
            ProcExpr::Block(statements) => {
                for (i, inner) in statements.iter().enumerate() {
                    path.push(PathStep::Slot(slot.clone()));
                    path.push(PathStep::Stmt(i));
                    collect_occurrences(function, statement, inner, path, groups);
                    path.pop();
                    path.pop();
                }
            }
            ProcExpr::Literal(_) | ProcExpr::Reference(_) => {}
        }
    }
}

/// True when some function's whole body is exactly this pattern over its
/// own arguments, meaning the pattern is already extracted.
fn has_defining_function(graph: &HierarchyGraph, sample: &Occurrence) -> bool {
    let node = node_at_sample(graph, sample);
    graph.functions().any(|def| {
        let Some(procedure) = &def.procedure else {
            return false;
        };
        let [statement] = &procedure[..] else {
            return false;
        };
        if statement.function != "Assign" {
            return false;
        }
        let Some(ProcExpr::Reference(target)) = statement.slots.get("who") else {
            return false;
        };
        if target.root != "res" || target.property.is_some() {
            return false;
        }
        let Some(ProcExpr::Call(body)) = statement.slots.get("what") else {
            return false;
        };
        let Some(captures) = anti_unify_pair(node, body) else {
            return false;
        };
        let mut assignment: BTreeMap<&str, &ProcExpr> = BTreeMap::new();
        captures.iter().all(|(occurrence_leaf, body_leaf)| match body_leaf {
            ProcExpr::Reference(reference)
                if reference.property.is_none()
                    && def.argument_domains.contains_key(&reference.root) =>
            {
                match assignment.get(reference.root.as_str()) {
                    Some(seen) => *seen == *occurrence_leaf,
                    None => {
                        assignment.insert(&reference.root, occurrence_leaf);
                        true
                    }
                }
            }
            ProcExpr::Literal(literal) => {
                matches!(occurrence_leaf, ProcExpr::Literal(v) if v == literal)
            }
            _ => false,
        })
    })
}

/// Walks two same-skeleton trees in step and pairs up their leaves; None
/// when the shapes disagree after all.
fn anti_unify_pair<'a>(
    a: &'a Call,
    b: &'a Call,
) -> Option<Vec<(&'a ProcExpr, &'a ProcExpr)>> {
    if a.function != b.function || a.slots.len() != b.slots.len() {
        return None;
    }
    let mut pairs = Vec::new();
    for ((slot_a, expr_a), (slot_b, expr_b)) in a.slots.iter().zip(b.slots.iter()) {
        if slot_a != slot_b {
            return None;
        }
        match (expr_a, expr_b) {
            (ProcExpr::Call(inner_a), ProcExpr::Call(inner_b)) => {
                pairs.extend(anti_unify_pair(inner_a, inner_b)?);
            }
            (ProcExpr::Call(_), _) | (_, ProcExpr::Call(_)) => return None,
            (leaf_a, leaf_b) => pairs.push((leaf_a, leaf_b)),
        }
    }
    Some(pairs)
}

fn node_at_sample<'a>(graph: &'a HierarchyGraph, sample: &Occurrence) -> &'a Call {
    let def = graph.function(&sample.function).expect("occurrence host exists");
    let procedure = def.procedure.as_ref().expect("occurrence host has a body");
    follow_path(&procedure[sample.statement], &sample.path)
        .expect("occurrence path stays valid while the graph is unchanged")
}

fn follow_path<'a>(statement: &'a Call, path: &[PathStep]) -> Option<&'a Call> {
    let mut current = statement;
    let mut steps = path.iter();
    while let Some(step) = steps.next() {
        let PathStep::Slot(slot) = step else {
            return None;
        };
        match current.slots.get(slot)? {
            ProcExpr::Call(inner) => current = inner,
            ProcExpr::Block(statements) => {
                let PathStep::Stmt(index) = steps.next()? else {
                    return None;
                };
                current = statements.get(*index)?;
            }
            _ => return None,
        }
    }
    Some(current)
}

/// Builds the planned function for one occurrence group: leaf classes
/// equal across every occurrence stay as literals, the rest become
/// arguments named in first-appearance order, and the body is the first
/// occurrence's tree with leaves swapped accordingly.
fn build_extraction(
    graph: &HierarchyGraph,
    builtins: &BuiltinRegistry,
    key: &str,
    occurrences: &[&Occurrence],
    taken: &BTreeSet<String>,
) -> FunctionExtraction {
    let sample = occurrences[0];
    let class_count = sample.classes.len();
    let mut replacements: Vec<ProcExpr> = Vec::with_capacity(class_count);
    let mut arguments = Vec::new();
    for class in 0..class_count {
        let shared_literal = match &sample.classes[class] {
            ProcExpr::Literal(value) if value_is_scalar(value) => occurrences
                .iter()
                .all(|o| o.classes[class] == sample.classes[class])
                .then_some(value.clone()),
            _ => None,
        };
        if let Some(value) = shared_literal {
            replacements.push(ProcExpr::Literal(value));
            continue;
        }
        let arg = format!("arg{}", arguments.len() + 1);
        let (callee, slot) = &sample.class_positions[class];
        let mut domain = slot_domain(graph, builtins, callee, slot);
        let fits = occurrences.iter().all(|o| match &o.classes[class] {
            ProcExpr::Literal(value) => typecheck_value(graph, value, &domain).is_ok(),
            _ => true,
        });
        if !fits {
            domain = DomainRef::Any;
        }
        arguments.push(ArgDecl { name: arg.clone(), domain: domain.to_string() });
        replacements.push(ProcExpr::Reference(RefPath::parse(&arg)));
    }

    let body_expr = rebuild_with_leaves(node_at_sample(graph, sample), &sample.classes, &replacements);
    let result = result_domain(graph, builtins, &body_expr);
    let base = format!("AutoFn_{}", short_hash(key));
    let name = unique_name(graph, &base, taken);
    let statement = Call::assign("res", ProcExpr::Call(body_expr));
    let mut sites: Vec<RewriteSite> = occurrences
        .iter()
        .map(|o| RewriteSite {
            function: o.function.clone(),
            statement: o.statement,
            path: o.path.clone(),
        })
        .collect();
    sites.sort();
    FunctionExtraction {
        name,
        arguments,
        result: result.map(|d| d.to_string()),
        body: encode_call(&statement),
        sites,
    }
}

fn value_is_scalar(value: &Value) -> bool {
    matches!(value, Value::Number(_) | Value::Boolean(_) | Value::Text(_))
}

/// Clones a tree, replacing each leaf with the replacement assigned to
/// its equality class.
fn rebuild_with_leaves(call: &Call, classes: &[ProcExpr], replacements: &[ProcExpr]) -> Call {
    let mut out = Call::new(&call.function);
    for (slot, expr) in &call.slots {
        let rebuilt = match expr {
            ProcExpr::Call(inner) => {
                ProcExpr::Call(rebuild_with_leaves(inner, classes, replacements))
            }
            leaf => {
                let id = classes
                    .iter()
                    .position(|seen| seen == leaf)
                    .expect("every leaf belongs to a class");
                replacements[id].clone()
            }
        };
        out.slots.insert(slot.clone(), rebuilt);
    }
    out
}

fn slot_domain(
    graph: &HierarchyGraph,
    builtins: &BuiltinRegistry,
    function: &str,
    slot: &str,
) -> DomainRef {
    if let Some(domain) = graph.function(function).and_then(|d| d.argument_domains.get(slot)) {
        return domain.clone();
    }
    if builtins.get(function).is_some() {
        return match function {
            "Not" | "And" | "Or" => DomainRef::Boolean,
            "Add" | "Subtract" | "Multiply" | "LessThan" | "NumberEquals"
            | "NumberNotEquals" => DomainRef::Number,
            "IsClose" if slot == "threshold" => DomainRef::Number,
            _ => DomainRef::Any,
        };
    }
    DomainRef::Any
}

fn result_domain(
    graph: &HierarchyGraph,
    builtins: &BuiltinRegistry,
    root: &Call,
) -> Option<DomainRef> {
    if let Some(def) = graph.function(&root.function) {
        return def.result_domain.clone();
    }
    if builtins.get(&root.function).is_some() {
        return Some(match root.function.as_str() {
            "Add" | "Subtract" | "Multiply" | "GlobalDistance" => DomainRef::Number,
            "Not" | "And" | "Or" | "LessThan" | "NumberEquals" | "NumberNotEquals"
            | "Equals" | "SequenceContains" | "IsClose" | "InContact" => DomainRef::Boolean,
            _ => DomainRef::Any,
        });
    }
    None
}

/// Applies a plan atomically. The plan must have been extracted from this
/// exact graph; the mutated clone must revalidate cleanly and resolve
/// every pre-existing (instance, property) pair to the same value; only
/// then is the graph replaced.
pub fn apply_plan(graph: &mut HierarchyGraph, plan: &RestructurePlan) -> Result<(), KbError> {
    let fingerprint = graph_fingerprint(graph);
    if plan.source_fingerprint != fingerprint {
        return Err(KbError::Other(format!(
            "plan is stale: extracted from {} but the graph is now {fingerprint}",
            plan.source_fingerprint
        )));
    }
    if plan.is_empty() {
        return Ok(());
    }
    let mut next = graph.clone();

    for extraction in &plan.new_concepts {
        apply_concept(&mut next, extraction)?;
    }
    for extraction in &plan.new_functions {
        apply_function(&mut next, extraction)?;
    }

    next.rebuild_index().map_err(KbError::Validation)?;
    let mut diagnostics = validate_functions(&next, &BuiltinRegistry::standard());
    diagnostics.extend(crate::acts::validate_acts(&next));
    if diagnostics.iter().any(|d| d.severity == Severity::Error) {
        return Err(KbError::Validation(diagnostics));
    }

    for record in graph.instances() {
        for property in graph.declared_properties(&record.name).keys() {
            let before = probe(graph, &record.name, property);
            let after = probe(&next, &record.name, property);
            if before != after {
                return Err(KbError::Other(format!(
                    "plan changes `{}.{property}` from {before} to {after}; aborted",
                    record.name
                )));
            }
        }
    }

    *graph = next;
    Ok(())
}

/// Comparable form of a property resolution, mapping errors to their kind
/// so an ambiguity stays an ambiguity.
fn probe(graph: &HierarchyGraph, instance: &str, property: &str) -> String {
    match graph.resolve_property(instance, property) {
        Ok(value) => format!("value {}", value.canonical_key()),
        Err(err) => format!("error {err}"),
    }
}

fn apply_concept(graph: &mut HierarchyGraph, extraction: &ConceptExtraction) -> Result<(), KbError> {
    if graph.has_concept(&extraction.name) || graph.has_instance(&extraction.name) {
        return Err(KbError::Other(format!(
            "planned concept `{}` collides with an existing name",
            extraction.name
        )));
    }
    let domain = DomainRef::parse(&extraction.domain)
        .map_err(|e| KbError::Other(format!("planned concept `{}`: {e}", extraction.name)))?;
    let value = decode_value(&domain, &extraction.value)
        .map_err(|e| KbError::Other(format!("planned concept `{}`: {e}", extraction.name)))?;
    let parents: Vec<&str> = extraction.parents.iter().map(String::as_str).collect();
    graph.add_concept(
        ConceptNode::new(&extraction.name, &parents).default(&extraction.property, value),
    );
    for member in &extraction.members {
        let record = graph.instance_mut(member).ok_or_else(|| {
            KbError::Other(format!(
                "planned concept `{}` rewires missing instance `{member}`",
                extraction.name
            ))
        })?;
        record.member_concepts.push(extraction.name.clone());
    }
    Ok(())
}

fn apply_function(
    graph: &mut HierarchyGraph,
    extraction: &FunctionExtraction,
) -> Result<(), KbError> {
    if graph.has_concept(&extraction.name) || graph.has_instance(&extraction.name) {
        return Err(KbError::Other(format!(
            "planned function `{}` collides with an existing name",
            extraction.name
        )));
    }
    let fail = |detail: String| KbError::Other(format!("planned function `{}`: {detail}", extraction.name));
    let statement = decode_call(graph, &extraction.body).map_err(|e| fail(e))?;
    let Some(ProcExpr::Call(template)) = statement.slots.get("what").cloned() else {
        return Err(fail("body must assign a call to `res`".to_string()));
    };

    let mut def = FunctionDef::new(&extraction.name);
    for arg in &extraction.arguments {
        let domain = DomainRef::parse(&arg.domain).map_err(fail)?;
        def = def.arg(&arg.name, domain);
    }
    if let Some(result) = &extraction.result {
        def = def.result(DomainRef::parse(result).map_err(fail)?);
    }
    let def = def.statement(statement);
    graph.add_concept(ConceptNode::new(&extraction.name, &[]).kind(ConceptKind::Function));
    graph.add_function(def);

    for site in &extraction.sites {
        let mut host = graph
            .function(&site.function)
            .cloned()
            .ok_or_else(|| fail(format!("site names unknown function `{}`", site.function)))?;
        let procedure = host
            .procedure
            .as_mut()
            .ok_or_else(|| fail(format!("site host `{}` has no procedure", site.function)))?;
        let statement = procedure
            .get_mut(site.statement)
            .ok_or_else(|| fail(format!("site statement {} is out of range", site.statement)))?;
        rewrite_statement(statement, &site.path, &extraction.name, &template)
            .map_err(|e| fail(format!("site {}[{}]: {e}", site.function, site.statement)))?;
        graph.add_function(host);
    }
    Ok(())
}

fn rewrite_statement(
    statement: &mut Call,
    path: &[PathStep],
    name: &str,
    template: &Call,
) -> Result<(), String> {
    if path.is_empty() {
        *statement = replacement_call(statement, name, template)?;
        return Ok(());
    }
    let PathStep::Slot(slot) = &path[0] else {
        return Err("path step into a call must name a slot".to_string());
    };
    let expr = statement
        .slots
        .get_mut(slot)
        .ok_or_else(|| format!("no slot `{slot}` on `{}`", statement.function))?;
    rewrite_expr(expr, &path[1..], name, template)
}

fn rewrite_expr(
    expr: &mut ProcExpr,
    path: &[PathStep],
    name: &str,
    template: &Call,
) -> Result<(), String> {
    match expr {
        ProcExpr::Call(call) => rewrite_statement(call, path, name, template),
        ProcExpr::Block(statements) => {
            let Some(PathStep::Stmt(index)) = path.first() else {
                return Err("path step into a block must be a statement index".to_string());
            };
            let statement = statements
                .get_mut(*index)
                .ok_or_else(|| format!("block statement {index} is out of range"))?;
            rewrite_statement(statement, &path[1..], name, template)
        }
        _ => Err("path leads through a leaf".to_string()),
    }
}

/// Matches the occurrence against the template and produces the call that
/// replaces it: template references capture the occurrence's expressions
/// as the new call's arguments, template literals must match verbatim.
fn replacement_call(occurrence: &Call, name: &str, template: &Call) -> Result<Call, String> {
    let mut captures: BTreeMap<String, ProcExpr> = BTreeMap::new();
    capture(occurrence, template, &mut captures)?;
    let mut call = Call::new(name);
    call.slots = captures;
    Ok(call)
}

fn capture(
    occurrence: &Call,
    template: &Call,
    captures: &mut BTreeMap<String, ProcExpr>,
) -> Result<(), String> {
    if occurrence.function != template.function || occurrence.slots.len() != template.slots.len() {
        return Err(format!(
            "occurrence `{}` does not match template `{}`",
            occurrence.function, template.function
        ));
    }
    for ((slot_o, expr_o), (slot_t, expr_t)) in
        occurrence.slots.iter().zip(template.slots.iter())
    {
        if slot_o != slot_t {
            return Err(format!("slot `{slot_o}` does not match template slot `{slot_t}`"));
        }
        match (expr_o, expr_t) {
            (ProcExpr::Call(inner_o), ProcExpr::Call(inner_t)) => {
                capture(inner_o, inner_t, captures)?;
            }
            (expr, ProcExpr::Reference(hole)) if hole.property.is_none() => {
                match captures.get(&hole.root) {
                    Some(seen) if seen != expr => {
                        return Err(format!(
                            "hole `{}` captured two different expressions",
                            hole.root
                        ));
                    }
                    _ => {
                        captures.insert(hole.root.clone(), expr.clone());
                    }
                }
            }
            (ProcExpr::Literal(value), ProcExpr::Literal(fixed)) if value == fixed => {}
            _ => return Err("occurrence diverges from the template".to_string()),
        }
    }
    Ok(())
}

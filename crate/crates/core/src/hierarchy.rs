//! The concept graph: concepts, instances, and default inheritance.
//!
//! Concepts form a rooted DAG via `direct_parents`. Instances are not graph
//! nodes; they carry a mutable list of member concepts plus explicit
//! property values. Property lookup walks from explicit values outwards:
//!
//! 1. an explicit value on the instance wins,
//! 2. otherwise the default from the *closest* concept wins, where distance
//!    is the minimal number of parent edges from the instance (member
//!    concepts sit at distance 1),
//! 3. two different defaults at the same minimal distance are a hard
//!    ambiguity error,
//! 4. no default anywhere resolves to [`Value::Unknown`].
//!
//! Subsumption queries run against a precomputed reflexive ancestor index;
//! [`HierarchyGraph::rebuild_index`] must be called after structural edits
//! (loading does this automatically).

use crate::acts::{ActionDef, SkillDef};
use crate::error::{codes, Diagnostic, PropertyError};
use crate::functions::FunctionDef;
use crate::value::{typecheck_value, DomainRef, Value};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Role of a node in the graph. Purely descriptive: semantics key off the
/// side tables (functions, actions, skills) and the instances map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptKind {
    EntityConcept,
    InstanceConcept,
    ValueDomain,
    Function,
    Action,
    Skill,
}

/// One concept node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptNode {
    pub name: String,
    pub direct_parents: Vec<String>,
    pub kind: ConceptKind,
    /// Properties this concept declares for everything subsumed by it.
    pub property_decls: BTreeMap<String, DomainRef>,
    /// Default values this concept contributes.
    pub default_values: BTreeMap<String, Value>,
    /// Property-change hooks: property name to function name.
    pub hooks: BTreeMap<String, String>,
}

impl ConceptNode {
    pub fn new(name: &str, parents: &[&str]) -> ConceptNode {
        ConceptNode {
            name: name.to_string(),
            direct_parents: parents.iter().map(|p| p.to_string()).collect(),
            kind: ConceptKind::EntityConcept,
            property_decls: BTreeMap::new(),
            default_values: BTreeMap::new(),
            hooks: BTreeMap::new(),
        }
    }

    pub fn kind(mut self, kind: ConceptKind) -> ConceptNode {
        self.kind = kind;
        self
    }

    pub fn property(mut self, name: &str, domain: DomainRef) -> ConceptNode {
        self.property_decls.insert(name.to_string(), domain);
        self
    }

    pub fn default(mut self, name: &str, value: Value) -> ConceptNode {
        self.default_values.insert(name.to_string(), value);
        self
    }

    pub fn hook(mut self, property: &str, function: &str) -> ConceptNode {
        self.hooks.insert(property.to_string(), function.to_string());
        self
    }
}

/// One concrete entity.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub name: String,
    /// Concepts the instance belongs to, in declaration order.
    pub member_concepts: Vec<String>,
    pub property_values: BTreeMap<String, Value>,
    /// Shape data carried through untouched.
    pub geometry: Option<serde_json::Value>,
    /// Names of surface instances belonging to this entity.
    pub surfaces: Vec<String>,
}

impl InstanceRecord {
    pub fn new(name: &str, members: &[&str]) -> InstanceRecord {
        InstanceRecord {
            name: name.to_string(),
            member_concepts: members.iter().map(|m| m.to_string()).collect(),
            property_values: BTreeMap::new(),
            geometry: None,
            surfaces: Vec::new(),
        }
    }

    pub fn value(mut self, property: &str, value: Value) -> InstanceRecord {
        self.property_values.insert(property.to_string(), value);
        self
    }

    pub fn surface(mut self, name: &str) -> InstanceRecord {
        self.surfaces.push(name.to_string());
        self
    }
}

/// Where a resolved property value came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Explicit,
    Default { concept: String, distance: usize },
    Unknown,
}

/// The knowledge base graph: concepts plus instances, with typed side
/// tables for the concept kinds that carry executable payloads. A node in
/// `functions`/`actions`/`skills` also exists as a [`ConceptNode`] so it
/// participates in subsumption like any other concept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HierarchyGraph {
    nodes: BTreeMap<String, ConceptNode>,
    instances: BTreeMap<String, InstanceRecord>,
    functions: BTreeMap<String, FunctionDef>,
    actions: BTreeMap<String, ActionDef>,
    skills: BTreeMap<String, SkillDef>,
    /// Reflexive ancestor closure per concept.
    ancestor_index: BTreeMap<String, BTreeSet<String>>,
}

impl HierarchyGraph {
    pub fn new() -> HierarchyGraph {
        HierarchyGraph::default()
    }

    pub fn add_function(&mut self, def: FunctionDef) {
        self.functions.insert(def.name.clone(), def);
    }

    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.get(name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut FunctionDef> {
        self.functions.get_mut(name)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionDef> {
        self.functions.values()
    }

    pub fn add_action(&mut self, def: ActionDef) {
        self.actions.insert(def.name.clone(), def);
    }

    pub fn action(&self, name: &str) -> Option<&ActionDef> {
        self.actions.get(name)
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionDef> {
        self.actions.values()
    }

    pub fn add_skill(&mut self, def: SkillDef) {
        self.skills.insert(def.name.clone(), def);
    }

    pub fn skill(&self, name: &str) -> Option<&SkillDef> {
        self.skills.get(name)
    }

    pub fn skills(&self) -> impl Iterator<Item = &SkillDef> {
        self.skills.values()
    }

    pub fn add_concept(&mut self, node: ConceptNode) {
        self.nodes.insert(node.name.clone(), node);
    }

    pub fn add_instance(&mut self, record: InstanceRecord) {
        self.instances.insert(record.name.clone(), record);
    }

    pub fn remove_instance(&mut self, name: &str) -> Option<InstanceRecord> {
        self.instances.remove(name)
    }

    pub fn node(&self, name: &str) -> Option<&ConceptNode> {
        self.nodes.get(name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut ConceptNode> {
        self.nodes.get_mut(name)
    }

    pub fn instance(&self, name: &str) -> Option<&InstanceRecord> {
        self.instances.get(name)
    }

    pub fn instance_mut(&mut self, name: &str) -> Option<&mut InstanceRecord> {
        self.instances.get_mut(name)
    }

    pub fn has_concept(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn has_instance(&self, name: &str) -> bool {
        self.instances.contains_key(name)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &ConceptNode> {
        self.nodes.values()
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    pub fn instance_names(&self) -> impl Iterator<Item = &str> {
        self.instances.keys().map(|s| s.as_str())
    }

    /// Recomputes the reflexive ancestor closure for every concept.
    /// Reports unknown parents and parent cycles; on error the index is
    /// left empty so stale answers cannot leak.
    pub fn rebuild_index(&mut self) -> Result<(), Vec<Diagnostic>> {
        self.ancestor_index.clear();
        let mut diagnostics = Vec::new();
        for node in self.nodes.values() {
            for parent in &node.direct_parents {
                if !self.nodes.contains_key(parent) {
                    diagnostics.push(Diagnostic::error(
                        codes::UNKNOWN_PARENT,
                        &node.name,
                        format!("concepts.{}.direct_parents", node.name),
                        format!("parent `{parent}` is not a known concept"),
                    ));
                }
            }
        }
        if !diagnostics.is_empty() {
            return Err(diagnostics);
        }

        // Kahn's algorithm: anything left over sits on a parent cycle.
        let mut pending: BTreeMap<&str, usize> = self
            .nodes
            .values()
            .map(|n| (n.name.as_str(), n.direct_parents.len()))
            .collect();
        let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for node in self.nodes.values() {
            for parent in &node.direct_parents {
                children.entry(parent.as_str()).or_default().push(node.name.as_str());
            }
        }
        let mut ready: VecDeque<&str> = pending
            .iter()
            .filter(|(_, deg)| **deg == 0)
            .map(|(name, _)| *name)
            .collect();
        let mut order: Vec<&str> = Vec::with_capacity(self.nodes.len());
        while let Some(name) = ready.pop_front() {
            order.push(name);
            for child in children.get(name).into_iter().flatten() {
                let deg = pending.get_mut(child).expect("child listed in pending");
                *deg -= 1;
                if *deg == 0 {
                    ready.push_back(child);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let mut cyclic: Vec<&str> = pending
                .iter()
                .filter(|(name, _)| !order.contains(*name))
                .map(|(name, _)| *name)
                .collect();
            cyclic.sort_unstable();
            for name in &cyclic {
                diagnostics.push(Diagnostic::error(
                    codes::CYCLIC_PARENTS,
                    name,
                    format!("concepts.{name}.direct_parents"),
                    format!("`{name}` sits on a direct_parents cycle: {}", cyclic.join(" -> ")),
                ));
            }
            return Err(diagnostics);
        }

        let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for name in order {
            let mut closure = BTreeSet::new();
            closure.insert(name.to_string());
            for parent in &self.nodes[name].direct_parents {
                closure.extend(index[parent].iter().cloned());
            }
            index.insert(name.to_string(), closure);
        }
        self.ancestor_index = index;
        Ok(())
    }

    /// Reflexive ancestor set of a concept, from the index.
    pub fn concept_closure(&self, concept: &str) -> Option<&BTreeSet<String>> {
        self.ancestor_index.get(concept)
    }

    /// All concepts an instance belongs to, directly or through parents.
    pub fn instance_closure(&self, instance: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if let Some(record) = self.instances.get(instance) {
            for member in &record.member_concepts {
                if let Some(closure) = self.ancestor_index.get(member) {
                    out.extend(closure.iter().cloned());
                }
            }
        }
        out
    }

    /// Subsumption: is `child` the same as, or below, `ancestor`?
    /// `child` may be a concept or an instance; unknown names answer false.
    pub fn is_subconcept(&self, child: &str, ancestor: &str) -> bool {
        if child == ancestor && (self.has_concept(child) || self.has_instance(child)) {
            return true;
        }
        if let Some(closure) = self.ancestor_index.get(child) {
            return closure.contains(ancestor);
        }
        if let Some(record) = self.instances.get(child) {
            return record.member_concepts.iter().any(|member| {
                self.ancestor_index
                    .get(member)
                    .is_some_and(|closure| closure.contains(ancestor))
            });
        }
        false
    }

    /// Domain declared for `property` as seen from `instance`, if any
    /// member concept (or ancestor) declares it.
    pub fn declared_domain(&self, instance: &str, property: &str) -> Option<&DomainRef> {
        let record = self.instances.get(instance)?;
        let mut found: Option<&DomainRef> = None;
        for member in &record.member_concepts {
            if let Some(closure) = self.ancestor_index.get(member) {
                for concept in closure {
                    if let Some(domain) = self.nodes[concept].property_decls.get(property) {
                        found = Some(domain);
                    }
                }
            }
        }
        found
    }

    /// Domain declared for `property` as seen from a concept.
    pub fn declared_domain_for_concept(&self, concept: &str, property: &str) -> Option<&DomainRef> {
        let closure = self.ancestor_index.get(concept)?;
        closure
            .iter()
            .find_map(|c| self.nodes[c].property_decls.get(property))
    }

    /// Properties declared anywhere in the instance's closure.
    pub fn declared_properties(&self, instance: &str) -> BTreeMap<String, DomainRef> {
        let mut out = BTreeMap::new();
        for concept in self.instance_closure(instance) {
            for (prop, domain) in &self.nodes[&concept].property_decls {
                out.insert(prop.clone(), domain.clone());
            }
        }
        out
    }

    /// Resolves a property value plus where it came from.
    pub fn resolve_property_detailed(
        &self,
        instance: &str,
        property: &str,
    ) -> Result<(Value, Provenance), PropertyError> {
        let record = self
            .instances
            .get(instance)
            .ok_or_else(|| PropertyError::UnknownInstance(instance.to_string()))?;
        if self.declared_domain(instance, property).is_none() {
            return Err(PropertyError::Undeclared {
                instance: instance.to_string(),
                property: property.to_string(),
            });
        }
        if let Some(value) = record.property_values.get(property) {
            return Ok((value.clone(), Provenance::Explicit));
        }
        match self.nearest_default(&record.member_concepts, property, 1)? {
            Some((value, concept, distance)) => {
                Ok((value, Provenance::Default { concept, distance }))
            }
            None => Ok((Value::Unknown, Provenance::Unknown)),
        }
        .map_err(|e: PropertyError| self.contextualize_ambiguity(e, instance))
    }

    /// Resolves a property value for an instance. See the module docs for
    /// the full lookup order.
    pub fn resolve_property(&self, instance: &str, property: &str) -> Result<Value, PropertyError> {
        self.resolve_property_detailed(instance, property).map(|(value, _)| value)
    }

    /// Resolves the default a *concept* inherits for a property; the concept
    /// itself counts at distance 0. Used for skill-level defaults such as
    /// manipulation sets.
    pub fn resolve_concept_default(
        &self,
        concept: &str,
        property: &str,
    ) -> Result<Option<Value>, PropertyError> {
        if !self.has_concept(concept) {
            return Err(PropertyError::UnknownConcept(concept.to_string()));
        }
        Ok(self
            .nearest_default(std::slice::from_ref(&concept.to_string()), property, 0)?
            .map(|(value, _, _)| value))
    }

    fn contextualize_ambiguity(&self, error: PropertyError, instance: &str) -> PropertyError {
        match error {
            PropertyError::AmbiguousDefaults { property, concepts, distance, .. } => {
                PropertyError::AmbiguousDefaults {
                    instance: instance.to_string(),
                    property,
                    concepts,
                    distance,
                }
            }
            other => other,
        }
    }

    /// Breadth-first walk over parents from the given start concepts,
    /// returning the closest default. Equal-distance agreeing defaults are
    /// fine; disagreeing ones are an ambiguity error.
    fn nearest_default(
        &self,
        start: &[String],
        property: &str,
        start_distance: usize,
    ) -> Result<Option<(Value, String, usize)>, PropertyError> {
        let mut visited: BTreeSet<&str> = BTreeSet::new();
        let mut frontier: Vec<&str> = Vec::new();
        for concept in start {
            if self.nodes.contains_key(concept.as_str()) && visited.insert(concept) {
                frontier.push(concept);
            }
        }
        let mut distance = start_distance;
        while !frontier.is_empty() {
            let mut hits: Vec<(&str, &Value)> = Vec::new();
            for concept in &frontier {
                if let Some(value) = self.nodes[*concept].default_values.get(property) {
                    hits.push((concept, value));
                }
            }
            if !hits.is_empty() {
                hits.sort_by_key(|(name, _)| *name);
                let (first_name, first_value) = hits[0];
                if hits.iter().any(|(_, value)| *value != first_value) {
                    return Err(PropertyError::AmbiguousDefaults {
                        instance: String::new(),
                        property: property.to_string(),
                        concepts: hits.iter().map(|(name, _)| name.to_string()).collect(),
                        distance,
                    });
                }
                return Ok(Some((first_value.clone(), first_name.to_string(), distance)));
            }
            let mut next: Vec<&str> = Vec::new();
            for concept in &frontier {
                for parent in &self.nodes[*concept].direct_parents {
                    if visited.insert(parent) {
                        next.push(parent);
                    }
                }
            }
            frontier = next;
            distance += 1;
        }
        Ok(None)
    }

    /// Typechecks a prospective explicit value for an instance property.
    pub fn typecheck_for_instance(
        &self,
        instance: &str,
        property: &str,
        value: &Value,
    ) -> Result<(), PropertyError> {
        if !self.has_instance(instance) {
            return Err(PropertyError::UnknownInstance(instance.to_string()));
        }
        let domain = self.declared_domain(instance, property).ok_or_else(|| {
            PropertyError::Undeclared {
                instance: instance.to_string(),
                property: property.to_string(),
            }
        })?;
        typecheck_value(self, value, domain).map_err(|detail| PropertyError::TypeMismatch {
            instance: instance.to_string(),
            property: property.to_string(),
            domain: domain.to_string(),
            detail,
        })
    }

    /// Writes an explicit property value without typechecking or hooks.
    /// Callers that want the checked, hook-firing path go through
    /// [`crate::functions::World::set_property`].
    pub fn write_property_raw(
        &mut self,
        instance: &str,
        property: &str,
        value: Value,
    ) -> Result<Option<Value>, PropertyError> {
        let record = self
            .instances
            .get_mut(instance)
            .ok_or_else(|| PropertyError::UnknownInstance(instance.to_string()))?;
        Ok(record.property_values.insert(property.to_string(), value))
    }

    /// Hook functions that must fire when `instance.property` changes:
    /// every hook registered on the property anywhere in the instance's
    /// concept closure, each function once, in sorted name order.
    pub fn hooks_for(&self, instance: &str, property: &str) -> Vec<String> {
        let mut out = BTreeSet::new();
        for concept in self.instance_closure(instance) {
            if let Some(function) = self.nodes[&concept].hooks.get(property) {
                out.insert(function.clone());
            }
        }
        out.into_iter().collect()
    }

    /// Adds and removes member concepts on an instance. Removals run first,
    /// then additions (deduplicated, appended in argument order). Explicit
    /// values whose property is no longer declared afterwards are dropped;
    /// each drop is reported as a warning diagnostic.
    pub fn mutate_instance_concepts(
        &mut self,
        instance: &str,
        add: &[&str],
        remove: &[&str],
    ) -> Result<Vec<Diagnostic>, PropertyError> {
        if !self.has_instance(instance) {
            return Err(PropertyError::UnknownInstance(instance.to_string()));
        }
        for concept in add {
            if !self.has_concept(concept) {
                return Err(PropertyError::UnknownConcept(concept.to_string()));
            }
        }
        let record = self.instances.get(instance).expect("checked above");
        let mut members: Vec<String> = record
            .member_concepts
            .iter()
            .filter(|m| !remove.contains(&m.as_str()))
            .cloned()
            .collect();
        for concept in add {
            if !members.iter().any(|m| m == concept) {
                members.push(concept.to_string());
            }
        }
        if members.is_empty() {
            return Err(PropertyError::NoMembers(instance.to_string()));
        }
        self.instances.get_mut(instance).expect("checked above").member_concepts = members;

        let declared = self.declared_properties(instance);
        let record = self.instances.get_mut(instance).expect("checked above");
        let orphaned: Vec<String> = record
            .property_values
            .keys()
            .filter(|p| !declared.contains_key(*p))
            .cloned()
            .collect();
        let mut warnings = Vec::new();
        for property in orphaned {
            record.property_values.remove(&property);
            warnings.push(Diagnostic::warning(
                codes::UNDECLARED_PROPERTY,
                instance,
                format!("instances.{instance}.propertyValues.{property}"),
                format!("value dropped: `{property}` is no longer declared after membership change"),
            ));
        }
        Ok(warnings)
    }

    /// Concepts that subsume every listed instance and have no proper
    /// descendant with the same coverage.
    pub fn most_specialized_common_concepts(&self, instances: &[&str]) -> BTreeSet<String> {
        assert!(!instances.is_empty(), "most_specialized_common_concepts needs instances");
        let mut common: Option<BTreeSet<String>> = None;
        for instance in instances {
            let closure = self.instance_closure(instance);
            common = Some(match common {
                None => closure,
                Some(acc) => acc.intersection(&closure).cloned().collect(),
            });
        }
        let common = common.unwrap_or_default();
        common
            .iter()
            .filter(|candidate| {
                !common.iter().any(|other| {
                    *other != **candidate
                        && self.is_subconcept(other, candidate)
                })
            })
            .cloned()
            .collect()
    }
}

/// Small programmatic graphs for unit tests across modules.
#[cfg(any(test, feature = "test-fixtures"))]
pub mod test_support {
    use super::*;
    use crate::value::DomainRef as D;

    /// A compact household graph: containers with shape defaults, movable
    /// objects, an agent with two hands, and a few instances.
    pub fn small_household() -> HierarchyGraph {
        let mut g = HierarchyGraph::new();
        g.add_concept(ConceptNode::new("Concept", &[]));
        g.add_concept(
            ConceptNode::new("PhysicalEntity", &["Concept"])
                .property("location", D::Location)
                .property("instanceName", D::Text),
        );
        g.add_concept(
            ConceptNode::new("Object", &["PhysicalEntity"])
                .property("interactionVolume", D::Number)
                .property("basicShape", D::Text),
        );
        g.add_concept(ConceptNode::new("MovableObject", &["Object"]));
        g.add_concept(
            ConceptNode::new("Container", &["MovableObject"])
                .property("content", D::parse("Sequence<PhysicalEntity>").unwrap())
                .default("basicShape", Value::Text("cuboid".into())),
        );
        g.add_concept(
            ConceptNode::new("Bowl", &["Container"])
                .default("basicShape", Value::Text("hemisphere".into()))
                .default("interactionVolume", Value::Number(0.2)),
        );
        g.add_concept(
            ConceptNode::new("Bottle", &["Container"])
                .default("basicShape", Value::Text("cylinder".into())),
        );
        g.add_concept(ConceptNode::new("TeaCup", &["Bottle"]));
        g.add_concept(
            ConceptNode::new("Agent", &["PhysicalEntity"])
                .property("grippers", D::parse("Sequence<Gripper>").unwrap()),
        );
        g.add_concept(ConceptNode::new("Human", &["Agent"]));
        g.add_concept(
            ConceptNode::new("Gripper", &["PhysicalEntity"])
                .property("belongingAgent", D::Concept("Agent".into()))
                .property("interactionVolume", D::Number),
        );
        g.add_concept(
            ConceptNode::new("Hand", &["Gripper"]).default("interactionVolume", Value::Number(0.1)),
        );

        g.add_instance(
            InstanceRecord::new("WhiteBowlInstance", &["Bowl"])
                .value("instanceName", Value::Text("white bowl".into())),
        );
        g.add_instance(
            InstanceRecord::new("VittelBottleInstance", &["Bottle"])
                .value("basicShape", Value::Text("cuboid".into())),
        );
        g.add_instance(InstanceRecord::new("TeaCupInstance", &["TeaCup"]));
        g.add_instance(InstanceRecord::new("PersonInstance", &["Human"]));
        g.add_instance(
            InstanceRecord::new("LeftHandInstance", &["Hand"])
                .value("belongingAgent", Value::EntityRef("PersonInstance".into())),
        );
        g.rebuild_index().expect("small_household graph is well formed");
        g
    }
}

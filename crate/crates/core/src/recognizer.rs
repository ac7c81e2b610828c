//! Frame-by-frame skill recognition over a pose trace.
//!
//! Each frame the recognizer keeps three phases in order. Bookkeeping:
//! every active skill is re-checked (its manipulated objects must still be
//! inside the manipulating gripper's interaction volume and its check
//! predicate must still hold), and skills that fail long enough to exhaust
//! the debounce window deactivate. Discovery: for every detected agent and
//! each of its observed grippers, candidate parameter tuples are generated
//! from the gripper's interaction volume via merged affordances, extended
//! with collaborating agents found through the grasp relation; tuples
//! whose precondition and check hold for the debounce window activate.
//! Finalization: deactivated skills evaluate their success predicate,
//! apply their effect when successful, and emit an event carrying the
//! derived action instances.
//!
//! Debounce makes both directions sticky: a candidate must pass on
//! consecutive frames to activate, and an active skill must fail on
//! consecutive frames to deactivate, so single-frame sensor flicker
//! changes nothing. Predicate failures never abort a trace; they mark the
//! frame as failing and land in the warning list.

use crate::acts::{
    derive_actions, entity_matches_parameter, manipulations_of, skill_stage, ActionInstance,
    ExtractWhen, SkillDef, Stage, StageOutcome,
};
use crate::environment::{EnvironmentState, Frame};
use crate::error::KbError;
use crate::functions::{BuiltinRegistry, World};
use crate::hierarchy::HierarchyGraph;
use crate::io::encode_value;
use crate::value::{typecheck_value, Value};
use serde_json::{json, Map, Value as Json};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

/// Consecutive frames a candidate must pass to activate, and an active
/// skill must fail to deactivate.
pub const DEFAULT_DEBOUNCE: usize = 2;

/// Cap on objects considered per gripper volume in one frame; tuple
/// generation is combinatorial, so a cluttered volume is truncated (with a
/// warning) instead of stalling the trace.
pub const MAX_CANDIDATE_OBJECTS: usize = 12;

const AGENT_CONCEPT: &str = "Agent";
const GRIPPERS_PROPERTY: &str = "grippers";
const BELONGING_AGENT_PROPERTY: &str = "belongingAgent";

/// How a recognized skill ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Successful,
    Unsuccessful,
    /// The success predicate could not be decided (UNKNOWN inputs or an
    /// evaluation failure); the skill is reported, not dropped.
    Indeterminate,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Successful => "successful",
            Outcome::Unsuccessful => "unsuccessful",
            Outcome::Indeterminate => "indeterminate",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One recognized skill occurrence. `params` holds the entity bindings
/// from discovery plus any values the skill's extractors filled in;
/// `actions` is nonempty only for successful outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillEvent {
    pub skill: String,
    pub params: BTreeMap<String, Value>,
    pub t_start: f64,
    pub t_end: f64,
    pub outcome: Outcome,
    pub actions: Vec<ActionInstance>,
    /// The gripper whose discovery lane activated the skill.
    pub gripper: String,
}

/// Everything a trace produced: finalized events plus, per frame, the
/// identities of the skills that were active after discovery.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecognitionTimeline {
    pub events: Vec<SkillEvent>,
    pub active_per_frame: Vec<(f64, Vec<String>)>,
}

#[derive(Debug, Clone)]
struct ActiveSkill {
    skill: String,
    key: String,
    bindings: BTreeMap<String, Value>,
    t_start: f64,
    last_active: f64,
    fail_streak: usize,
    manipulations: BTreeSet<[String; 3]>,
    gripper: String,
}

#[derive(Debug, Clone, Copy)]
struct PendingCandidate {
    streak: usize,
    first_seen: f64,
}

enum Activation {
    Activated,
    /// Predicates hold but a manipulated object is outside its gripper
    /// volume; the candidate stays pending.
    Deferred,
    Abandoned,
}

/// The recognizer itself: active and pending skills, the grasp relation it
/// maintains on the scene, and the growing timeline.
#[derive(Debug)]
pub struct Recognizer {
    builtins: BuiltinRegistry,
    debounce: usize,
    active: Vec<ActiveSkill>,
    pending: BTreeMap<String, PendingCandidate>,
    grasped: BTreeMap<String, BTreeSet<String>>,
    timeline: RecognitionTimeline,
    pub warnings: Vec<String>,
}

impl Default for Recognizer {
    fn default() -> Recognizer {
        Recognizer::new()
    }
}

impl Recognizer {
    pub fn new() -> Recognizer {
        Recognizer::with_debounce(DEFAULT_DEBOUNCE)
    }

    pub fn with_debounce(debounce: usize) -> Recognizer {
        Recognizer {
            builtins: BuiltinRegistry::standard(),
            debounce: debounce.max(1),
            active: Vec::new(),
            pending: BTreeMap::new(),
            grasped: BTreeMap::new(),
            timeline: RecognitionTimeline::default(),
            warnings: Vec::new(),
        }
    }

    pub fn timeline(&self) -> &RecognitionTimeline {
        &self.timeline
    }

    pub fn into_timeline(self) -> RecognitionTimeline {
        self.timeline
    }

    /// Identities of the currently active skills, sorted.
    pub fn active_keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.active.iter().map(|r| r.key.as_str()).collect();
        keys.sort_unstable();
        keys
    }

    /// Absorbs one frame and returns the events finalized by it. Events
    /// for frames already processed never change: a later frame can only
    /// append.
    pub fn step(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &mut EnvironmentState,
        frame: Frame,
    ) -> Result<Vec<SkillEvent>, KbError> {
        env.push_frame(graph, frame)?;
        let ts = env.last_timestamp().expect("frame was just absorbed");
        let skills: BTreeMap<String, SkillDef> =
            graph.skills().map(|s| (s.name.clone(), s.clone())).collect();

        let mut dropped = self.weed_active(graph, env, &skills, ts);
        self.sync_grasps(env);
        self.discover(graph, env, &skills, ts);
        self.sync_grasps(env);

        let mut keys: Vec<String> = self.active.iter().map(|r| r.key.clone()).collect();
        keys.sort_unstable();
        self.timeline.active_per_frame.push((ts, keys));

        dropped.sort_by(|a, b| {
            a.t_start.total_cmp(&b.t_start).then_with(|| a.key.cmp(&b.key))
        });
        let events = dropped
            .into_iter()
            .map(|record| self.finalize(graph, env, &skills, record))
            .collect();
        Ok(events)
    }

    /// Ends the trace: every still-active skill finalizes at its last
    /// passing frame, and the grasp relation is cleared.
    pub fn finish(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &mut EnvironmentState,
    ) -> Vec<SkillEvent> {
        let skills: BTreeMap<String, SkillDef> =
            graph.skills().map(|s| (s.name.clone(), s.clone())).collect();
        let mut records = std::mem::take(&mut self.active);
        records.sort_by(|a, b| {
            a.t_start.total_cmp(&b.t_start).then_with(|| a.key.cmp(&b.key))
        });
        let events = records
            .into_iter()
            .map(|record| self.finalize(graph, env, &skills, record))
            .collect();
        self.pending.clear();
        self.sync_grasps(env);
        events
    }

    /// Bookkeeping: re-check every active skill, count failing frames, and
    /// pull out the ones whose failure outlasted the debounce window.
    fn weed_active(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        skills: &BTreeMap<String, SkillDef>,
        ts: f64,
    ) -> Vec<ActiveSkill> {
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for mut record in std::mem::take(&mut self.active) {
            let iv_ok = record.manipulations.iter().all(|[_, gripper, object]| {
                env.grippers
                    .get(gripper)
                    .is_some_and(|state| state.iv_objects.contains(object))
            });
            let mut passing = iv_ok;
            if iv_ok {
                passing = match skills.get(&record.skill) {
                    None => false,
                    Some(def) => {
                        let mut world =
                            World::with_scene(graph, &self.builtins, &env.scene);
                        match skill_stage(&mut world, def, Stage::Check, &record.bindings) {
                            Ok(StageOutcome::Holds(true)) => true,
                            Ok(StageOutcome::Holds(false)) | Ok(StageOutcome::Applied) => false,
                            Ok(StageOutcome::Indeterminate(reason)) => {
                                self.warnings.push(format!(
                                    "check of {} is indeterminate: {reason}",
                                    record.key
                                ));
                                false
                            }
                            Err(err) => {
                                self.warnings
                                    .push(format!("check of {} failed: {err}", record.key));
                                false
                            }
                        }
                    }
                };
            }
            if passing {
                record.fail_streak = 0;
                record.last_active = ts;
                keep.push(record);
            } else {
                record.fail_streak += 1;
                if record.fail_streak >= self.debounce {
                    if !iv_ok {
                        self.warnings.push(format!(
                            "{} deactivated after a manipulated object left its gripper volume",
                            record.key
                        ));
                    }
                    dropped.push(record);
                } else {
                    keep.push(record);
                }
            }
        }
        self.active = keep;
        dropped
    }

    /// Projects the grasp relation implied by the active manipulations
    /// onto the scene, clearing entries that no active skill supports.
    fn sync_grasps(&mut self, env: &mut EnvironmentState) {
        let mut current: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for record in &self.active {
            for [_, gripper, object] in &record.manipulations {
                current.entry(object.clone()).or_default().insert(gripper.clone());
            }
        }
        for object in self.grasped.keys() {
            if !current.contains_key(object) {
                env.scene.set_grasped_by(object, BTreeSet::new());
            }
        }
        for (object, grippers) in &current {
            env.scene.set_grasped_by(object, grippers.clone());
        }
        self.grasped = current;
    }

    fn discover(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        skills: &BTreeMap<String, SkillDef>,
        ts: f64,
    ) {
        let active_keys: BTreeSet<String> =
            self.active.iter().map(|r| r.key.clone()).collect();
        let mut evaluated = BTreeSet::new();
        let mut passed = BTreeSet::new();

        let agents: Vec<String> = graph
            .instance_names()
            .filter(|name| graph.is_subconcept(name, AGENT_CONCEPT))
            .map(str::to_string)
            .collect();
        for agent in &agents {
            for gripper in self.agent_grippers(graph, env, agent) {
                self.discover_lane(
                    graph,
                    env,
                    skills,
                    agent,
                    &gripper,
                    ts,
                    &active_keys,
                    &mut evaluated,
                    &mut passed,
                );
            }
        }
        self.pending.retain(|key, _| passed.contains(key));
    }

    /// The agent's grippers, in declared order, restricted to grippers the
    /// trace has observed.
    fn agent_grippers(
        &mut self,
        graph: &HierarchyGraph,
        env: &EnvironmentState,
        agent: &str,
    ) -> Vec<String> {
        match graph.resolve_property(agent, GRIPPERS_PROPERTY) {
            Ok(Value::Sequence { items, .. }) => items
                .iter()
                .filter_map(|v| v.as_entity())
                .filter(|g| env.grippers.contains_key(*g))
                .map(str::to_string)
                .collect(),
            Ok(Value::Unknown) => Vec::new(),
            Ok(other) => {
                self.warnings.push(format!(
                    "agent `{agent}` has {} where its grippers should be",
                    other.kind_name()
                ));
                Vec::new()
            }
            Err(err) => {
                self.warnings.push(format!("grippers of agent `{agent}`: {err}"));
                Vec::new()
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn discover_lane(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        skills: &BTreeMap<String, SkillDef>,
        agent: &str,
        gripper: &str,
        ts: f64,
        active_keys: &BTreeSet<String>,
        evaluated: &mut BTreeSet<String>,
        passed: &mut BTreeSet<String>,
    ) {
        let Some(state) = env.grippers.get(gripper) else {
            return;
        };
        let mut objects: Vec<String> = state.iv_objects.iter().cloned().collect();
        if objects.len() > MAX_CANDIDATE_OBJECTS {
            self.warnings.push(format!(
                "gripper {gripper} has {} objects in its interaction volume, keeping the first {MAX_CANDIDATE_OBJECTS}",
                objects.len()
            ));
            objects.truncate(MAX_CANDIDATE_OBJECTS);
        }

        let mut collaborator_grippers: Vec<String> = Vec::new();
        let mut collaborator_agents: Vec<String> = Vec::new();
        for object in &objects {
            let Some(holders) = self.grasped.get(object) else {
                continue;
            };
            for holder in holders.clone() {
                if holder == gripper || collaborator_grippers.contains(&holder) {
                    continue;
                }
                collaborator_grippers.push(holder.clone());
                match graph.resolve_property(&holder, BELONGING_AGENT_PROPERTY) {
                    Ok(Value::EntityRef(other)) => {
                        if other != agent && !collaborator_agents.contains(&other) {
                            collaborator_agents.push(other);
                        }
                    }
                    Ok(Value::Unknown) => {}
                    Ok(other) => self.warnings.push(format!(
                        "gripper `{holder}` has {} where its agent should be",
                        other.kind_name()
                    )),
                    Err(err) => {
                        self.warnings.push(format!("agent of gripper `{holder}`: {err}"))
                    }
                }
            }
        }
        collaborator_grippers.sort_unstable();
        collaborator_agents.sort_unstable();

        let mut agent_pool = vec![agent.to_string()];
        agent_pool.extend(collaborator_agents);
        let mut entity_pool = vec![gripper.to_string()];
        entity_pool.extend(collaborator_grippers);
        for object in objects {
            if !entity_pool.contains(&object) {
                entity_pool.push(object);
            }
        }

        for (name, pins) in crate::acts::merge_affordances(graph, &[agent, gripper]) {
            let Some(def) = skills.get(&name) else {
                continue;
            };
            let [agent_pin, gripper_pin] = &pins[..] else {
                continue;
            };
            if !def.agent_params.iter().any(|(n, _)| n == agent_pin) {
                continue;
            }
            if !def.entity_params.iter().any(|(n, _)| n == gripper_pin) {
                continue;
            }
            let pinned = BTreeMap::from([
                (agent_pin.clone(), agent.to_string()),
                (gripper_pin.clone(), gripper.to_string()),
            ]);
            for bindings in enumerate_tuples(graph, def, &agent_pool, &entity_pool, &pinned) {
                let key = identity_key(&name, &bindings);
                if active_keys.contains(&key) || evaluated.contains(&key) {
                    continue;
                }
                evaluated.insert(key.clone());
                if !self.predicates_pass(graph, env, def, &bindings) {
                    continue;
                }
                passed.insert(key.clone());
                let entry = self
                    .pending
                    .entry(key.clone())
                    .or_insert(PendingCandidate { streak: 0, first_seen: ts });
                entry.streak += 1;
                if entry.streak < self.debounce {
                    continue;
                }
                let first_seen = entry.first_seen;
                match self.try_activate(graph, env, def, bindings, &key, gripper, first_seen, ts)
                {
                    Activation::Activated | Activation::Abandoned => {
                        self.pending.remove(&key);
                    }
                    Activation::Deferred => {}
                }
            }
        }
    }

    /// Precondition and check, evaluated against the live scene. UNKNOWN
    /// predicates fail quietly (speculative candidates routinely probe
    /// unknown properties); evaluation defects are warned about.
    fn predicates_pass(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        def: &SkillDef,
        bindings: &BTreeMap<String, Value>,
    ) -> bool {
        for stage in [Stage::Pre, Stage::Check] {
            let mut world = World::with_scene(graph, &self.builtins, &env.scene);
            match skill_stage(&mut world, def, stage, bindings) {
                Ok(StageOutcome::Holds(true)) => {}
                Ok(StageOutcome::Holds(false))
                | Ok(StageOutcome::Applied)
                | Ok(StageOutcome::Indeterminate(_)) => return false,
                Err(err) => {
                    self.warnings.push(format!(
                        "discovery probe of `{}` stage {}: {err}",
                        def.name,
                        stage.label()
                    ));
                    return false;
                }
            }
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn try_activate(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        def: &SkillDef,
        mut bindings: BTreeMap<String, Value>,
        key: &str,
        gripper: &str,
        t_start: f64,
        ts: f64,
    ) -> Activation {
        let manipulations = match manipulations_of(graph, def, &bindings) {
            Ok(m) => m,
            Err(err) => {
                self.warnings.push(format!("manipulations of {key}: {err}"));
                return Activation::Abandoned;
            }
        };
        let iv_ok = manipulations.iter().all(|[_, g, o]| {
            env.grippers.get(g).is_some_and(|state| state.iv_objects.contains(o))
        });
        if !iv_ok {
            return Activation::Deferred;
        }
        self.run_extractors(graph, env, def, &mut bindings, ExtractWhen::Activation);
        for [_, g, o] in &manipulations {
            self.grasped.entry(o.clone()).or_default().insert(g.clone());
        }
        self.active.push(ActiveSkill {
            skill: def.name.clone(),
            key: key.to_string(),
            bindings,
            t_start,
            last_active: ts,
            fail_streak: 0,
            manipulations,
            gripper: gripper.to_string(),
        });
        Activation::Activated
    }

    /// Fills unbound value parameters from extractor sources. A dotted
    /// source reads a property of a bound entity parameter; a bare source
    /// names a function evaluated against the live scene. UNKNOWN results
    /// leave the parameter unbound.
    fn run_extractors(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        def: &SkillDef,
        bindings: &mut BTreeMap<String, Value>,
        when: ExtractWhen,
    ) {
        for (param, spec) in &def.extractors {
            if spec.when != when {
                continue;
            }
            if bindings.get(param).is_some_and(|v| !v.is_unknown()) {
                continue;
            }
            let value = if let Some((root, property)) = spec.source.split_once('.') {
                match bindings.get(root) {
                    Some(Value::EntityRef(entity)) => {
                        match graph.resolve_property(&entity.clone(), property) {
                            Ok(value) => value,
                            Err(err) => {
                                self.warnings.push(format!(
                                    "extractor for `{param}` of `{}`: {err}",
                                    def.name
                                ));
                                continue;
                            }
                        }
                    }
                    _ => {
                        self.warnings.push(format!(
                            "extractor for `{param}` of `{}`: `{root}` is not a bound entity parameter",
                            def.name
                        ));
                        continue;
                    }
                }
            } else {
                let Some(order) =
                    graph.function(&spec.source).map(|d| d.argument_order.clone())
                else {
                    self.warnings.push(format!(
                        "extractor for `{param}` of `{}` names unknown function `{}`",
                        def.name, spec.source
                    ));
                    continue;
                };
                let mut args: BTreeMap<String, Value> = order
                    .iter()
                    .map(|a| (a.clone(), bindings.get(a).cloned().unwrap_or(Value::Unknown)))
                    .collect();
                let mut world = World::with_scene(graph, &self.builtins, &env.scene);
                match world.evaluate(&spec.source, &mut args) {
                    Ok(value) => value,
                    Err(err) => {
                        self.warnings.push(format!(
                            "extractor for `{param}` of `{}`: {err}",
                            def.name
                        ));
                        continue;
                    }
                }
            };
            if value.is_unknown() {
                continue;
            }
            if let Some(domain) = def.value_params.get(param) {
                if let Err(detail) = typecheck_value(graph, &value, domain) {
                    self.warnings.push(format!(
                        "extractor for `{param}` of `{}` produced a misfit: {detail}",
                        def.name
                    ));
                    continue;
                }
            }
            bindings.insert(param.clone(), value);
        }
    }

    /// Finalization: extractors, success predicate, effect on success,
    /// action derivation, event emission.
    fn finalize(
        &mut self,
        graph: &mut HierarchyGraph,
        env: &EnvironmentState,
        skills: &BTreeMap<String, SkillDef>,
        mut record: ActiveSkill,
    ) -> SkillEvent {
        let Some(def) = skills.get(&record.skill) else {
            self.warnings.push(format!(
                "skill `{}` vanished from the knowledge base while active",
                record.skill
            ));
            let event = SkillEvent {
                skill: record.skill,
                params: record.bindings,
                t_start: record.t_start,
                t_end: record.last_active,
                outcome: Outcome::Indeterminate,
                actions: Vec::new(),
                gripper: record.gripper,
            };
            self.timeline.events.push(event.clone());
            return event;
        };
        self.run_extractors(graph, env, def, &mut record.bindings, ExtractWhen::Finalization);

        let mut outcome = {
            let mut world = World::with_scene(graph, &self.builtins, &env.scene);
            match skill_stage(&mut world, def, Stage::Succ, &record.bindings) {
                Ok(StageOutcome::Holds(true)) | Ok(StageOutcome::Applied) => Outcome::Successful,
                Ok(StageOutcome::Holds(false)) => Outcome::Unsuccessful,
                Ok(StageOutcome::Indeterminate(reason)) => {
                    self.warnings
                        .push(format!("success of {} is indeterminate: {reason}", record.key));
                    Outcome::Indeterminate
                }
                Err(err) => {
                    self.warnings.push(format!("success of {}: {err}", record.key));
                    Outcome::Indeterminate
                }
            }
        };
        let mut actions = Vec::new();
        if outcome == Outcome::Successful {
            let mut world = World::with_scene(graph, &self.builtins, &env.scene);
            match skill_stage(&mut world, def, Stage::Eff, &record.bindings) {
                Ok(StageOutcome::Applied) => {}
                Ok(StageOutcome::Indeterminate(reason)) => {
                    self.warnings
                        .push(format!("effect of {} did not apply: {reason}", record.key));
                    outcome = Outcome::Indeterminate;
                }
                Ok(_) => {}
                Err(err) => {
                    self.warnings.push(format!("effect of {}: {err}", record.key));
                    outcome = Outcome::Indeterminate;
                }
            }
        }
        if outcome == Outcome::Successful {
            match derive_actions(graph, def, &record.bindings) {
                Ok(derived) => actions = derived,
                Err(err) => {
                    self.warnings.push(format!("actions of {}: {err}", record.key));
                }
            }
        }
        let event = SkillEvent {
            skill: record.skill,
            params: record.bindings,
            t_start: record.t_start,
            t_end: record.last_active,
            outcome,
            actions,
            gripper: record.gripper,
        };
        self.timeline.events.push(event.clone());
        event
    }
}

/// The candidate's identity: skill name plus the canonical form of every
/// discovery binding. Stable across frames, so debounce streaks and the
/// duplicate-activation guard key on it.
fn identity_key(skill: &str, bindings: &BTreeMap<String, Value>) -> String {
    let mut key = String::from(skill);
    for (param, value) in bindings {
        key.push('|');
        key.push_str(param);
        key.push('=');
        key.push_str(&value.canonical_key());
    }
    key
}

/// All injective parameter tuples for the skill: agent parameters draw
/// from `agents`, entity parameters from `entities`, every entity used at
/// most once, every assignment respecting the parameter's concept
/// requirements.
pub fn generate_parameter_tuples(
    graph: &HierarchyGraph,
    skill: &SkillDef,
    agents: &[String],
    entities: &[String],
) -> Vec<BTreeMap<String, Value>> {
    enumerate_tuples(graph, skill, agents, entities, &BTreeMap::new())
}

fn enumerate_tuples(
    graph: &HierarchyGraph,
    skill: &SkillDef,
    agent_pool: &[String],
    entity_pool: &[String],
    pinned: &BTreeMap<String, String>,
) -> Vec<BTreeMap<String, Value>> {
    let slots = skill.matchable_params();
    let agent_count = skill.agent_params.len();
    let mut chosen: Vec<String> = Vec::with_capacity(slots.len());
    let mut out = Vec::new();
    fill_slot(
        graph, &slots, agent_count, agent_pool, entity_pool, pinned, &mut chosen, &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn fill_slot(
    graph: &HierarchyGraph,
    slots: &[(&str, &crate::acts::ParamSpec)],
    agent_count: usize,
    agent_pool: &[String],
    entity_pool: &[String],
    pinned: &BTreeMap<String, String>,
    chosen: &mut Vec<String>,
    out: &mut Vec<BTreeMap<String, Value>>,
) {
    let index = chosen.len();
    if index == slots.len() {
        out.push(
            slots
                .iter()
                .zip(chosen.iter())
                .map(|((name, _), entity)| {
                    (name.to_string(), Value::EntityRef(entity.clone()))
                })
                .collect(),
        );
        return;
    }
    let (name, spec) = slots[index];
    let pool = if index < agent_count { agent_pool } else { entity_pool };
    let forced = pinned.get(name);
    for entity in pool {
        if let Some(forced) = forced {
            if entity != forced {
                continue;
            }
        }
        if chosen.contains(entity) {
            continue;
        }
        if !entity_matches_parameter(graph, entity, spec).unwrap_or(false) {
            continue;
        }
        chosen.push(entity.clone());
        fill_slot(graph, slots, agent_count, agent_pool, entity_pool, pinned, chosen, out);
        chosen.pop();
    }
}

/// Timeline export encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Lanes,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<ExportFormat, String> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "lanes" => Ok(ExportFormat::Lanes),
            other => Err(format!("unknown export format `{other}`, expected `json` or `lanes`")),
        }
    }
}

/// Renders a timeline deterministically: events sorted by start, end,
/// skill, and bindings, so identical traces export byte-identically.
pub fn export_timeline(timeline: &RecognitionTimeline, format: ExportFormat) -> String {
    let mut events: Vec<&SkillEvent> = timeline.events.iter().collect();
    events.sort_by(|a, b| {
        a.t_start
            .total_cmp(&b.t_start)
            .then(a.t_end.total_cmp(&b.t_end))
            .then_with(|| a.skill.cmp(&b.skill))
            .then_with(|| identity_key(&a.skill, &a.params).cmp(&identity_key(&b.skill, &b.params)))
    });
    match format {
        ExportFormat::Json => export_json(&events),
        ExportFormat::Lanes => export_lanes(&events),
    }
}

fn export_json(events: &[&SkillEvent]) -> String {
    let rows: Vec<Json> = events
        .iter()
        .map(|event| {
            let params: Map<String, Json> = event
                .params
                .iter()
                .map(|(p, v)| (p.clone(), encode_value(v)))
                .collect();
            let actions: Vec<Json> = event
                .actions
                .iter()
                .map(|action| {
                    json!({
                        "action": action.action,
                        "params": action
                            .params
                            .iter()
                            .map(|(p, v)| (p.clone(), encode_value(v)))
                            .collect::<Map<String, Json>>(),
                    })
                })
                .collect();
            json!({
                "skill": event.skill,
                "t_start": event.t_start,
                "t_end": event.t_end,
                "outcome": event.outcome.label(),
                "gripper": event.gripper,
                "params": params,
                "actions": actions,
            })
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&json!({ "events": rows }))
        .expect("timeline encoding is infallible");
    text.push('\n');
    text
}

fn export_lanes(events: &[&SkillEvent]) -> String {
    let mut lanes: BTreeMap<&str, Vec<&SkillEvent>> = BTreeMap::new();
    for event in events {
        lanes.entry(event.gripper.as_str()).or_default().push(event);
    }
    let mut text = String::new();
    for (gripper, rows) in lanes {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&format!("=== {gripper} ===\n"));
        for event in rows {
            let params = event
                .params
                .iter()
                .map(|(p, v)| format!("{p}={}", encode_value(v)))
                .collect::<Vec<_>>()
                .join(" ");
            text.push_str(&format!(
                "[{:8.3} .. {:8.3}] {} {} {}\n",
                event.t_start,
                event.t_end,
                event.skill,
                event.outcome.label(),
                params
            ));
        }
    }
    text
}

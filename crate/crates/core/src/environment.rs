//! The world model: per-frame poses, the location graph, gripper
//! interaction volumes, bounded frame history, and environment diffing.
//!
//! Poses arrive in the origin frame; the location graph re-expresses each
//! entity relative to its reference object (the grasping gripper first,
//! then a supporting object, then the origin), so a parent moving rigidly
//! leaves its children's stored relative poses unchanged. Contact pairs
//! come from the trace when present; otherwise a geometric rule fires:
//! two surface patches touch when their centers are within 5 mm and their
//! normals oppose within 15 degrees.
//!
//! Diffing two states yields atomic differences (a changed value, one
//! sequence element gone, one element new) and greedily explains them as
//! instances of the loaded actions, largest explanation first. Whatever
//! no action explains is reported rather than dropped.

use crate::acts::{
    entity_matches_parameter, run_stage_function, ActionDef, ActionInstance, Stage, WriteShape,
};
use crate::error::KbError;
use crate::functions::{BuiltinRegistry, World};
use crate::hierarchy::HierarchyGraph;
use crate::pose::{distance, Pose};
use crate::value::{Location, LocationRef, Value};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Translation tolerance for treating two locations as equal (meters).
pub const LOCATION_TRANSLATION_TOLERANCE: f64 = 0.01;
/// Rotation tolerance for treating two locations as equal (radians).
pub const LOCATION_ROTATION_TOLERANCE: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Center distance below which two surfaces count as touching (meters).
pub const CONTACT_EPSILON: f64 = 0.005;
/// Maximum angle away from exact opposition for touching surface normals.
pub const NORMAL_OPPOSITION_TOLERANCE: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// Frames of history kept when no capacity is given.
pub const DEFAULT_HISTORY_DEPTH: usize = 30;

const AGENT_CONCEPT: &str = "Agent";
const GRIPPER_CONCEPT: &str = "Gripper";
const STABLE_SUPPORT_CONCEPT: &str = "ObjectStableSupportSurface";
const TO_SUPPORT_CONCEPT: &str = "SurfaceToSupport";

/// Frozen per-frame geometry handed to predicate evaluation: origin-frame
/// poses, current contact pairs, and the grasp relation maintained by the
/// recognizer. Built once per frame so evaluation never observes a
/// half-updated environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneView {
    poses: BTreeMap<String, Pose>,
    contacts: BTreeSet<(String, String)>,
    grasped_by: BTreeMap<String, BTreeSet<String>>,
}

impl SceneView {
    pub fn new() -> SceneView {
        SceneView::default()
    }

    pub fn set_pose(&mut self, entity: &str, pose: Pose) {
        self.poses.insert(entity.to_string(), pose);
    }

    pub fn pose_of(&self, entity: &str) -> Option<&Pose> {
        self.poses.get(entity)
    }

    pub fn posed_entities(&self) -> impl Iterator<Item = &str> {
        self.poses.keys().map(|s| s.as_str())
    }

    pub fn add_contact(&mut self, a: &str, b: &str) {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.contacts.insert((x.to_string(), y.to_string()));
    }

    pub fn clear_contacts(&mut self) {
        self.contacts.clear();
    }

    pub fn in_contact(&self, a: &str, b: &str) -> bool {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        self.contacts.contains(&(x.to_string(), y.to_string()))
    }

    pub fn contacts(&self) -> impl Iterator<Item = &(String, String)> {
        self.contacts.iter()
    }

    pub fn set_grasped_by(&mut self, object: &str, grippers: BTreeSet<String>) {
        if grippers.is_empty() {
            self.grasped_by.remove(object);
        } else {
            self.grasped_by.insert(object.to_string(), grippers);
        }
    }

    pub fn grasped_by(&self, object: &str) -> Option<&BTreeSet<String>> {
        self.grasped_by.get(object)
    }
}

/// One observation instant from a trace: entity poses in the origin frame,
/// gripper reference points, and optionally who touches whom. Contact
/// pairs may name entities or their surfaces. A frame without a contact
/// list triggers the geometric contact rule; an empty list means "nothing
/// touches".
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub entity_poses: BTreeMap<String, Pose>,
    pub hand_positions: BTreeMap<String, [f64; 3]>,
    pub contacts: Option<Vec<(String, String)>>,
}

impl Frame {
    pub fn at(timestamp: f64) -> Frame {
        Frame {
            timestamp,
            entity_poses: BTreeMap::new(),
            hand_positions: BTreeMap::new(),
            contacts: None,
        }
    }

    pub fn pose(mut self, entity: &str, pose: Pose) -> Frame {
        self.entity_poses.insert(entity.to_string(), pose);
        self
    }

    pub fn hand(mut self, gripper: &str, position: [f64; 3]) -> Frame {
        self.hand_positions.insert(gripper.to_string(), position);
        self
    }

    pub fn contact(mut self, a: &str, b: &str) -> Frame {
        self.contacts
            .get_or_insert_with(Vec::new)
            .push((a.to_string(), b.to_string()));
        self
    }

    /// Declares an explicit (possibly empty) contact list, disabling the
    /// geometric fallback for this frame.
    pub fn with_contacts(mut self) -> Frame {
        self.contacts.get_or_insert_with(Vec::new);
        self
    }
}

/// Every tracked entity re-expressed relative to its reference object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocationGraph {
    pub parent: BTreeMap<String, LocationRef>,
    pub relative_pose: BTreeMap<String, Pose>,
}

impl LocationGraph {
    pub fn parent_of(&self, entity: &str) -> Option<&LocationRef> {
        self.parent.get(entity)
    }

    pub fn relative_pose_of(&self, entity: &str) -> Option<&Pose> {
        self.relative_pose.get(entity)
    }

    /// Recomposes the origin-frame pose by walking parents. None if the
    /// entity is untracked or the chain is broken.
    pub fn origin_pose(&self, entity: &str) -> Option<Pose> {
        let mut pose = *self.relative_pose.get(entity)?;
        let mut cursor = self.parent.get(entity)?;
        let mut hops = 0;
        while let LocationRef::Entity(parent) = cursor {
            if hops > self.parent.len() {
                return None;
            }
            hops += 1;
            pose = self.relative_pose.get(parent)?.compose(&pose);
            cursor = self.parent.get(parent)?;
        }
        Some(pose)
    }
}

/// Per-gripper interaction-volume bookkeeping for the current frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GripperState {
    pub iv_objects: BTreeSet<String>,
    /// Objects that entered the volume this frame.
    pub entered: BTreeSet<String>,
    /// Objects that left the volume this frame.
    pub left: BTreeSet<String>,
}

/// Mutable world state for one trace: the frozen scene, the location
/// graph, gripper volumes, a bounded frame history, and the warnings
/// accumulated while absorbing imperfect observations.
#[derive(Debug, Clone)]
pub struct EnvironmentState {
    pub scene: SceneView,
    pub location: LocationGraph,
    pub grippers: BTreeMap<String, GripperState>,
    history: VecDeque<Frame>,
    capacity: usize,
    pub warnings: Vec<String>,
    last_timestamp: Option<f64>,
}

impl Default for EnvironmentState {
    fn default() -> EnvironmentState {
        EnvironmentState::with_capacity(DEFAULT_HISTORY_DEPTH)
    }
}

impl EnvironmentState {
    pub fn with_capacity(capacity: usize) -> EnvironmentState {
        EnvironmentState {
            scene: SceneView::new(),
            location: LocationGraph::default(),
            grippers: BTreeMap::new(),
            history: VecDeque::new(),
            capacity: capacity.max(1),
            warnings: Vec::new(),
            last_timestamp: None,
        }
    }

    /// Seeds origin-frame poses from the instances' stored location
    /// properties, so a knowledge base can be diffed or queried without a
    /// trace.
    pub fn seeded_from(graph: &HierarchyGraph) -> EnvironmentState {
        EnvironmentState::seeded_with_capacity(graph, DEFAULT_HISTORY_DEPTH)
    }

    /// [`EnvironmentState::seeded_from`] with an explicit history depth.
    pub fn seeded_with_capacity(graph: &HierarchyGraph, capacity: usize) -> EnvironmentState {
        let mut env = EnvironmentState::with_capacity(capacity);
        for name in graph.instance_names() {
            if let Ok(Value::Location(location)) = graph.resolve_property(name, "location") {
                if let Some(pose) = origin_location(graph, &location) {
                    env.scene.set_pose(name, pose);
                }
            }
        }
        env
    }

    pub fn history(&self) -> impl Iterator<Item = &Frame> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn last_timestamp(&self) -> Option<f64> {
        self.last_timestamp
    }

    fn warn(&mut self, message: String) {
        self.warnings.push(message);
    }

    /// Absorbs one frame: poses update, contacts normalize, the location
    /// graph rebuilds, instance location properties sync, interaction
    /// volumes recompute, and the frame joins the bounded history.
    pub fn push_frame(
        &mut self,
        graph: &mut HierarchyGraph,
        frame: Frame,
    ) -> Result<(), KbError> {
        if let Some(last) = self.last_timestamp {
            if frame.timestamp <= last {
                return Err(KbError::Other(format!(
                    "frame timestamp {} does not increase past {last}",
                    frame.timestamp
                )));
            }
        }
        for (entity, pose) in &frame.entity_poses {
            if graph.has_instance(entity) {
                self.scene.set_pose(entity, *pose);
            } else {
                self.warn(format!(
                    "frame {}: pose for unknown instance `{entity}` ignored",
                    frame.timestamp
                ));
            }
        }
        for (gripper, position) in &frame.hand_positions {
            if graph.has_instance(gripper) {
                self.scene.set_pose(gripper, Pose::from_translation(*position));
            } else {
                self.warn(format!(
                    "frame {}: position for unknown gripper `{gripper}` ignored",
                    frame.timestamp
                ));
            }
        }

        let surface_owner = surface_owner_map(graph);
        let surface_contacts = match &frame.contacts {
            Some(pairs) => self.normalize_contacts(graph, &surface_owner, pairs, frame.timestamp),
            None => self.geometric_contacts(graph, &surface_owner),
        };
        self.scene.clear_contacts();
        for (a, b) in &surface_contacts.entity_pairs {
            self.scene.add_contact(a, b);
        }

        self.location = self.rebuild_location_graph(graph, &surface_owner, &surface_contacts);
        self.sync_location_properties(graph);
        self.recompute_interaction_volumes(graph);

        self.history.push_back(frame.clone());
        while self.history.len() > self.capacity {
            self.history.pop_front();
        }
        self.last_timestamp = Some(frame.timestamp);
        Ok(())
    }

    fn normalize_contacts(
        &mut self,
        graph: &HierarchyGraph,
        surface_owner: &BTreeMap<String, String>,
        pairs: &[(String, String)],
        timestamp: f64,
    ) -> ContactInfo {
        let mut info = ContactInfo::default();
        for (a, b) in pairs {
            let resolve = |name: &str| -> Option<(String, Option<String>)> {
                if let Some(owner) = surface_owner.get(name) {
                    return Some((owner.clone(), Some(name.to_string())));
                }
                if graph.has_instance(name) {
                    return Some((name.to_string(), None));
                }
                None
            };
            match (resolve(a), resolve(b)) {
                (Some((ea, sa)), Some((eb, sb))) => {
                    if ea == eb {
                        continue;
                    }
                    info.entity_pairs.insert(ordered(&ea, &eb));
                    info.pairs.push(ContactPair {
                        entity_a: ea,
                        surface_a: sa,
                        entity_b: eb,
                        surface_b: sb,
                    });
                }
                _ => self.warn(format!(
                    "frame {timestamp}: contact ({a}, {b}) names no known instance or surface"
                )),
            }
        }
        info
    }

    /// Contact fallback for traces without annotations: every pair of
    /// surfaces from different entities whose centers sit within
    /// [`CONTACT_EPSILON`] and whose normals oppose within
    /// [`NORMAL_OPPOSITION_TOLERANCE`].
    fn geometric_contacts(
        &mut self,
        graph: &HierarchyGraph,
        surface_owner: &BTreeMap<String, String>,
    ) -> ContactInfo {
        let mut info = ContactInfo::default();
        let mut patches: Vec<(String, String, [f64; 3], [f64; 3])> = Vec::new();
        for (surface, owner) in surface_owner {
            let Some(owner_pose) = self.scene.pose_of(owner) else {
                continue;
            };
            let (Some(center), Some(normal)) = (
                read_vec3(graph, surface, "center"),
                read_vec3(graph, surface, "normal"),
            ) else {
                continue;
            };
            let world_center = owner_pose.apply(center);
            let world_normal = normalize(owner_pose.rotation.rotate(normal));
            let Some(world_normal) = world_normal else {
                continue;
            };
            patches.push((surface.clone(), owner.clone(), world_center, world_normal));
        }
        for i in 0..patches.len() {
            for j in (i + 1)..patches.len() {
                let (sa, ea, ca, na) = &patches[i];
                let (sb, eb, cb, nb) = &patches[j];
                if ea == eb {
                    continue;
                }
                if distance(*ca, *cb) > CONTACT_EPSILON {
                    continue;
                }
                let dot = na[0] * nb[0] + na[1] * nb[1] + na[2] * nb[2];
                if dot > -(NORMAL_OPPOSITION_TOLERANCE.cos()) {
                    continue;
                }
                info.entity_pairs.insert(ordered(ea, eb));
                info.pairs.push(ContactPair {
                    entity_a: ea.clone(),
                    surface_a: Some(sa.clone()),
                    entity_b: eb.clone(),
                    surface_b: Some(sb.clone()),
                });
            }
        }
        info
    }

    /// Assigns each posed entity its reference object: the grasping
    /// gripper if any (first by name), else the supporting object, else
    /// the origin. Cycles (contradictory support annotations) break at the
    /// lexicographically first entity involved, with a warning.
    fn rebuild_location_graph(
        &mut self,
        graph: &HierarchyGraph,
        surface_owner: &BTreeMap<String, String>,
        contacts: &ContactInfo,
    ) -> LocationGraph {
        let posed: Vec<String> =
            self.scene.posed_entities().map(|s| s.to_string()).collect();
        let posed_set: BTreeSet<&str> = posed.iter().map(|s| s.as_str()).collect();

        let mut grasp_parent: BTreeMap<&str, &str> = BTreeMap::new();
        for (a, b) in &contacts.entity_pairs {
            for (gripper, object) in [(a, b), (b, a)] {
                if graph.is_subconcept(gripper, GRIPPER_CONCEPT)
                    && !graph.is_subconcept(object, GRIPPER_CONCEPT)
                    && !graph.is_subconcept(object, AGENT_CONCEPT)
                    && posed_set.contains(gripper.as_str())
                {
                    let slot = grasp_parent.entry(object).or_insert(gripper);
                    if gripper.as_str() < *slot {
                        *slot = gripper;
                    }
                }
            }
        }

        let mut support_candidates: BTreeMap<&str, Vec<(f64, &str)>> = BTreeMap::new();
        for pair in &contacts.pairs {
            for (child, child_surface, parent, parent_surface) in [
                (&pair.entity_a, &pair.surface_a, &pair.entity_b, &pair.surface_b),
                (&pair.entity_b, &pair.surface_b, &pair.entity_a, &pair.surface_a),
            ] {
                if !self.supports(graph, surface_owner, child, child_surface, parent, parent_surface)
                {
                    continue;
                }
                let dist = self
                    .surface_distance(graph, child, child_surface, parent, parent_surface)
                    .unwrap_or(f64::INFINITY);
                support_candidates.entry(child).or_default().push((dist, parent));
            }
        }

        let mut result = LocationGraph::default();
        for entity in &posed {
            let parent = if graph.is_subconcept(entity, GRIPPER_CONCEPT)
                || graph.is_subconcept(entity, AGENT_CONCEPT)
            {
                LocationRef::Origin
            } else if let Some(gripper) = grasp_parent.get(entity.as_str()) {
                LocationRef::Entity(gripper.to_string())
            } else if let Some(candidates) = support_candidates.get(entity.as_str()) {
                let parents: BTreeSet<&str> = candidates.iter().map(|(_, p)| *p).collect();
                let best = candidates
                    .iter()
                    .filter(|(_, p)| posed_set.contains(*p))
                    .min_by(|(da, pa), (db, pb)| {
                        da.partial_cmp(db).unwrap_or(std::cmp::Ordering::Equal).then(pa.cmp(pb))
                    });
                match best {
                    Some((_, parent)) => {
                        if parents.len() > 1 {
                            self.warn(format!(
                                "`{entity}` has {} support contacts; keeping nearest (`{parent}`)",
                                parents.len()
                            ));
                        }
                        LocationRef::Entity(parent.to_string())
                    }
                    None => LocationRef::Origin,
                }
            } else {
                LocationRef::Origin
            };
            result.parent.insert(entity.clone(), parent);
        }

        // Contradictory annotations can close a support loop; break each
        // loop at its first entity in name order.
        for entity in &posed {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            seen.insert(entity.clone());
            let mut cursor = entity.clone();
            while let Some(LocationRef::Entity(parent)) = result.parent.get(&cursor) {
                let parent = parent.clone();
                if parent == *entity {
                    result.parent.insert(entity.clone(), LocationRef::Origin);
                    self.warn(format!(
                        "support contacts form a cycle through `{entity}`; reparenting it to the origin"
                    ));
                    break;
                }
                if !seen.insert(parent.clone()) {
                    break;
                }
                cursor = parent;
            }
        }

        for entity in &posed {
            let global = self.scene.pose_of(entity).copied().unwrap_or(Pose::IDENTITY);
            let relative = match result.parent.get(entity) {
                Some(LocationRef::Entity(parent)) => match self.scene.pose_of(parent) {
                    Some(parent_pose) => global.relative_to(parent_pose),
                    None => {
                        result.parent.insert(entity.clone(), LocationRef::Origin);
                        global
                    }
                },
                _ => global,
            };
            result.relative_pose.insert(entity.clone(), relative);
        }
        result
    }

    fn supports(
        &self,
        graph: &HierarchyGraph,
        _surface_owner: &BTreeMap<String, String>,
        child: &str,
        child_surface: &Option<String>,
        parent: &str,
        parent_surface: &Option<String>,
    ) -> bool {
        let stable = |surface: &Option<String>, entity: &str| -> bool {
            match surface {
                Some(s) => graph.is_subconcept(s, STABLE_SUPPORT_CONCEPT),
                None => graph.instance(entity).map_or(false, |i| {
                    i.surfaces.iter().any(|s| graph.is_subconcept(s, STABLE_SUPPORT_CONCEPT))
                }),
            }
        };
        let to_support = |surface: &Option<String>, entity: &str| -> bool {
            match surface {
                Some(s) => graph.is_subconcept(s, TO_SUPPORT_CONCEPT),
                None => graph.instance(entity).map_or(false, |i| {
                    i.surfaces.iter().any(|s| graph.is_subconcept(s, TO_SUPPORT_CONCEPT))
                }),
            }
        };
        stable(child_surface, child) && to_support(parent_surface, parent)
    }

    fn surface_distance(
        &self,
        graph: &HierarchyGraph,
        child: &str,
        child_surface: &Option<String>,
        parent: &str,
        parent_surface: &Option<String>,
    ) -> Option<f64> {
        let point = |entity: &str, surface: &Option<String>| -> Option<[f64; 3]> {
            let pose = self.scene.pose_of(entity)?;
            match surface {
                Some(s) => read_vec3(graph, s, "center").map(|c| pose.apply(c)),
                None => Some(pose.translation),
            }
        };
        Some(distance(point(child, child_surface)?, point(parent, parent_surface)?))
    }

    /// Mirrors the rebuilt location graph into each instance's `location`
    /// property as a reference-relative value.
    fn sync_location_properties(&mut self, graph: &mut HierarchyGraph) {
        let entries: Vec<(String, LocationRef, Pose)> = self
            .location
            .parent
            .iter()
            .filter_map(|(entity, parent)| {
                self.location
                    .relative_pose
                    .get(entity)
                    .map(|pose| (entity.clone(), parent.clone(), *pose))
            })
            .collect();
        for (entity, reference, pose) in entries {
            let value = Value::Location(Location { reference, pose });
            if let Err(err) = graph.write_property_raw(&entity, "location", value) {
                self.warn(format!("cannot sync location of `{entity}`: {err}"));
            }
        }
    }

    fn recompute_interaction_volumes(&mut self, graph: &HierarchyGraph) {
        let posed: Vec<String> =
            self.scene.posed_entities().map(|s| s.to_string()).collect();
        let grippers: Vec<String> = posed
            .iter()
            .filter(|e| graph.is_subconcept(e, GRIPPER_CONCEPT))
            .cloned()
            .collect();
        let objects: Vec<String> = posed
            .iter()
            .filter(|e| {
                !graph.is_subconcept(e, GRIPPER_CONCEPT) && !graph.is_subconcept(e, AGENT_CONCEPT)
            })
            .cloned()
            .collect();
        let mut next: BTreeMap<String, GripperState> = BTreeMap::new();
        for gripper in &grippers {
            let mut iv_objects = BTreeSet::new();
            for object in &objects {
                match in_interaction_volume(graph, &self.scene, gripper, object) {
                    Ok(true) => {
                        iv_objects.insert(object.clone());
                    }
                    Ok(false) => {}
                    Err(err) => self.warn(format!(
                        "interaction volume of `{gripper}`/`{object}` indeterminate: {err}"
                    )),
                }
            }
            let previous = self
                .grippers
                .get(gripper)
                .map(|g| g.iv_objects.clone())
                .unwrap_or_default();
            let entered = iv_objects.difference(&previous).cloned().collect();
            let left = previous.difference(&iv_objects).cloned().collect();
            next.insert(gripper.clone(), GripperState { iv_objects, entered, left });
        }
        self.grippers = next;
    }
}

#[derive(Debug, Clone, Default)]
struct ContactInfo {
    entity_pairs: BTreeSet<(String, String)>,
    pairs: Vec<ContactPair>,
}

#[derive(Debug, Clone)]
struct ContactPair {
    entity_a: String,
    surface_a: Option<String>,
    entity_b: String,
    surface_b: Option<String>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn surface_owner_map(graph: &HierarchyGraph) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for instance in graph.instances() {
        for surface in &instance.surfaces {
            map.insert(surface.clone(), instance.name.clone());
        }
    }
    map
}

fn read_vec3(graph: &HierarchyGraph, instance: &str, property: &str) -> Option<[f64; 3]> {
    match graph.resolve_property(instance, property) {
        Ok(Value::Sequence { items, .. }) if items.len() == 3 => {
            let mut out = [0.0; 3];
            for (slot, item) in out.iter_mut().zip(&items) {
                match item {
                    Value::Number(n) => *slot = *n,
                    _ => return None,
                }
            }
            Some(out)
        }
        _ => None,
    }
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len == 0.0 || !len.is_finite() {
        return None;
    }
    Some([v[0] / len, v[1] / len, v[2] / len])
}

/// Closed-ball membership test: the distance between the gripper and the
/// object is at most the sum of their interaction-volume radii. UNKNOWN
/// radii and missing poses are errors so callers can flag, not guess.
pub fn in_interaction_volume(
    graph: &HierarchyGraph,
    scene: &SceneView,
    gripper: &str,
    object: &str,
) -> Result<bool, KbError> {
    let radius = |entity: &str| -> Result<f64, KbError> {
        match graph.resolve_property(entity, "interactionVolume") {
            Ok(Value::Number(r)) => Ok(r),
            Ok(Value::Unknown) => Err(KbError::Other(format!(
                "`{entity}` has UNKNOWN interactionVolume"
            ))),
            Ok(other) => Err(KbError::Other(format!(
                "`{entity}` interactionVolume is {}, expected Number",
                other.kind_name()
            ))),
            Err(err) => Err(KbError::Property(err)),
        }
    };
    let pose = |entity: &str| -> Result<Pose, KbError> {
        scene
            .pose_of(entity)
            .copied()
            .ok_or_else(|| KbError::Other(format!("no pose for `{entity}`")))
    };
    let d = distance(pose(gripper)?.translation, pose(object)?.translation);
    Ok(d <= radius(gripper)? + radius(object)?)
}

/// Resolves a structured location to the origin frame by walking reference
/// entities' own location properties. None on broken or cyclic chains.
pub fn origin_location(graph: &HierarchyGraph, location: &Location) -> Option<Pose> {
    let mut pose = location.pose;
    let mut reference = location.reference.clone();
    let mut hops = 0;
    while let LocationRef::Entity(parent) = reference {
        if hops > 64 {
            return None;
        }
        hops += 1;
        match graph.resolve_property(&parent, "location") {
            Ok(Value::Location(outer)) => {
                pose = outer.pose.compose(&pose);
                reference = outer.reference;
            }
            _ => return None,
        }
    }
    Some(pose)
}

/// Origin-frame location equality within the shared tolerances. Locations
/// that cannot be resolved compare structurally.
pub fn locations_equal(graph_a: &HierarchyGraph, a: &Location, graph_b: &HierarchyGraph, b: &Location) -> bool {
    match (origin_location(graph_a, a), origin_location(graph_b, b)) {
        (Some(pa), Some(pb)) => {
            pa.translation_distance(&pb) <= LOCATION_TRANSLATION_TOLERANCE
                && pa.rotation.angle_to(&pb.rotation) <= LOCATION_ROTATION_TOLERANCE
        }
        _ => a == b,
    }
}

/// One indivisible observed difference between two states.
#[derive(Debug, Clone, PartialEq)]
pub enum AtomicDiff {
    ValueChanged { instance: String, property: String, old: Value, new: Value },
    SeqRemoved { instance: String, property: String, item: Value },
    SeqAdded { instance: String, property: String, item: Value },
}

impl AtomicDiff {
    pub fn instance(&self) -> &str {
        match self {
            AtomicDiff::ValueChanged { instance, .. }
            | AtomicDiff::SeqRemoved { instance, .. }
            | AtomicDiff::SeqAdded { instance, .. } => instance,
        }
    }

    pub fn property(&self) -> &str {
        match self {
            AtomicDiff::ValueChanged { property, .. }
            | AtomicDiff::SeqRemoved { property, .. }
            | AtomicDiff::SeqAdded { property, .. } => property,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            AtomicDiff::ValueChanged { instance, property, old, new } => format!(
                "{instance}.{property}: {} -> {}",
                old.kind_name(),
                new.kind_name()
            ),
            AtomicDiff::SeqRemoved { instance, property, item } => {
                format!("{instance}.{property}: removed {}", item.kind_name())
            }
            AtomicDiff::SeqAdded { instance, property, item } => {
                format!("{instance}.{property}: added {}", item.kind_name())
            }
        }
    }
}

/// What diffing two states produced: the actions explaining the observed
/// changes, whatever no action explains, and instances present on only
/// one side.
#[derive(Debug, Clone, Default)]
pub struct DiffReport {
    pub actions: Vec<ActionInstance>,
    pub unexplained: Vec<AtomicDiff>,
    pub missing_instances: Vec<String>,
}

/// Determines the property-level differences between two states of the
/// same world and explains them as instances of the loaded actions. The
/// definitions are read from the second (target) state.
pub fn diff_environments(graph_a: &HierarchyGraph, graph_b: &HierarchyGraph) -> DiffReport {
    let names_a: BTreeSet<&str> = graph_a.instance_names().collect();
    let names_b: BTreeSet<&str> = graph_b.instance_names().collect();
    let mut report = DiffReport::default();
    for name in names_a.difference(&names_b) {
        report.missing_instances.push(format!("only in first state: {name}"));
    }
    for name in names_b.difference(&names_a) {
        report.missing_instances.push(format!("only in second state: {name}"));
    }

    let atoms = atomic_diffs(graph_a, graph_b, names_a.intersection(&names_b));
    let mut candidates: Vec<(ActionInstance, BTreeSet<usize>)> = Vec::new();
    for action in graph_b.actions() {
        candidates.extend(action_candidates(graph_b, action, &atoms));
    }
    candidates.sort_by(|(ia, aa), (ib, ab)| {
        ab.len()
            .cmp(&aa.len())
            .then(ia.action.cmp(&ib.action))
            .then_with(|| format!("{:?}", ia.params).cmp(&format!("{:?}", ib.params)))
            .then_with(|| aa.cmp(ab))
    });
    let mut consumed: BTreeSet<usize> = BTreeSet::new();
    for (instance, atom_set) in candidates {
        if atom_set.iter().any(|i| consumed.contains(i)) {
            continue;
        }
        consumed.extend(atom_set.iter().copied());
        report.actions.push(instance);
    }
    for (i, atom) in atoms.into_iter().enumerate() {
        if !consumed.contains(&i) {
            report.unexplained.push(atom);
        }
    }
    report
}

fn atomic_diffs<'n>(
    graph_a: &HierarchyGraph,
    graph_b: &HierarchyGraph,
    common: impl Iterator<Item = &'n &'n str>,
) -> Vec<AtomicDiff> {
    let mut atoms = Vec::new();
    for name in common {
        let mut properties: BTreeSet<String> =
            graph_a.declared_properties(name).into_keys().collect();
        properties.extend(graph_b.declared_properties(name).into_keys());
        for property in properties {
            let va = graph_a.resolve_property(name, &property).unwrap_or(Value::Unknown);
            let vb = graph_b.resolve_property(name, &property).unwrap_or(Value::Unknown);
            match (&va, &vb) {
                (
                    Value::Sequence { items: items_a, .. },
                    Value::Sequence { items: items_b, .. },
                ) => {
                    let (removed, added) = multiset_delta(items_a, items_b);
                    for item in removed {
                        atoms.push(AtomicDiff::SeqRemoved {
                            instance: name.to_string(),
                            property: property.clone(),
                            item,
                        });
                    }
                    for item in added {
                        atoms.push(AtomicDiff::SeqAdded {
                            instance: name.to_string(),
                            property: property.clone(),
                            item,
                        });
                    }
                }
                (Value::Location(la), Value::Location(lb)) => {
                    if !locations_equal(graph_a, la, graph_b, lb) {
                        atoms.push(AtomicDiff::ValueChanged {
                            instance: name.to_string(),
                            property: property.clone(),
                            old: va.clone(),
                            new: vb.clone(),
                        });
                    }
                }
                _ => {
                    if va != vb {
                        atoms.push(AtomicDiff::ValueChanged {
                            instance: name.to_string(),
                            property: property.clone(),
                            old: va.clone(),
                            new: vb.clone(),
                        });
                    }
                }
            }
        }
    }
    atoms
}

/// Multiset difference by canonical key: items of `a` not matched in `b`
/// (removed) and items of `b` not matched in `a` (added).
fn multiset_delta(a: &[Value], b: &[Value]) -> (Vec<Value>, Vec<Value>) {
    let mut counts: BTreeMap<String, i64> = BTreeMap::new();
    let mut examples: BTreeMap<String, Value> = BTreeMap::new();
    for item in a {
        let key = item.canonical_key();
        *counts.entry(key.clone()).or_insert(0) += 1;
        examples.entry(key).or_insert_with(|| item.clone());
    }
    for item in b {
        let key = item.canonical_key();
        *counts.entry(key.clone()).or_insert(0) -= 1;
        examples.entry(key).or_insert_with(|| item.clone());
    }
    let mut removed = Vec::new();
    let mut added = Vec::new();
    for (key, count) in counts {
        let example = &examples[&key];
        for _ in 0..count.max(0) {
            removed.push(example.clone());
        }
        for _ in 0..(-count).max(0) {
            added.push(example.clone());
        }
    }
    (removed, added)
}

/// Tolerant value comparison used while binding action parameters:
/// locations compare in the origin frame, everything else exactly.
fn values_match(graph: &HierarchyGraph, a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Location(la), Value::Location(lb)) => locations_equal(graph, la, graph, lb),
        _ => a == b,
    }
}

struct MatchState {
    params: BTreeMap<String, Value>,
    used: BTreeSet<usize>,
    deferred: Vec<(String, String, Value)>,
}

/// Enumerates every way the action's effect shapes can explain a subset of
/// the atoms, yielding the bound action instance and the atoms it consumes.
fn action_candidates(
    graph: &HierarchyGraph,
    action: &ActionDef,
    atoms: &[AtomicDiff],
) -> Vec<(ActionInstance, BTreeSet<usize>)> {
    let shapes = crate::acts::write_shapes(graph, &action.eff);
    if shapes.is_empty() || shapes.iter().any(|s| matches!(s, WriteShape::Opaque { .. })) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut state =
        MatchState { params: BTreeMap::new(), used: BTreeSet::new(), deferred: Vec::new() };
    assign_shapes(graph, action, &shapes, atoms, &mut state, &mut out);
    out
}

fn bind(
    graph: &HierarchyGraph,
    params: &mut BTreeMap<String, Value>,
    name: &str,
    value: Value,
) -> bool {
    match params.get(name) {
        Some(existing) => values_match(graph, existing, &value),
        None => {
            params.insert(name.to_string(), value);
            true
        }
    }
}

fn assign_shapes(
    graph: &HierarchyGraph,
    action: &ActionDef,
    shapes: &[WriteShape],
    atoms: &[AtomicDiff],
    state: &mut MatchState,
    out: &mut Vec<(ActionInstance, BTreeSet<usize>)>,
) {
    let depth = state.used.len();
    if depth == shapes.len() {
        finish_candidate(graph, action, state, out);
        return;
    }
    let shape = &shapes[depth];
    for (i, atom) in atoms.iter().enumerate() {
        if state.used.contains(&i) {
            continue;
        }
        let saved_params = state.params.clone();
        let saved_deferred = state.deferred.len();
        let matched = try_match(graph, shape, atom, state);
        if matched {
            state.used.insert(i);
            assign_shapes(graph, action, shapes, atoms, state, out);
            state.used.remove(&i);
        }
        state.params = saved_params;
        state.deferred.truncate(saved_deferred);
    }
}

fn try_match(
    graph: &HierarchyGraph,
    shape: &WriteShape,
    atom: &AtomicDiff,
    state: &mut MatchState,
) -> bool {
    match (shape, atom) {
        (
            WriteShape::SetFromParam { entity, property, source },
            AtomicDiff::ValueChanged { instance, property: atom_property, new, .. },
        ) if property == atom_property => {
            bind(graph, &mut state.params, entity, Value::EntityRef(instance.clone()))
                && bind(graph, &mut state.params, source, new.clone())
        }
        (
            WriteShape::SetFromPath { entity, property, source },
            AtomicDiff::ValueChanged { instance, property: atom_property, new, .. },
        ) if property == atom_property => {
            if !bind(graph, &mut state.params, entity, Value::EntityRef(instance.clone())) {
                return false;
            }
            state.deferred.push((
                source.root.clone(),
                source.property.clone().unwrap_or_default(),
                new.clone(),
            ));
            true
        }
        (
            WriteShape::SetLiteral { entity, property, value },
            AtomicDiff::ValueChanged { instance, property: atom_property, new, .. },
        ) if property == atom_property => {
            values_match(graph, value, new)
                && bind(graph, &mut state.params, entity, Value::EntityRef(instance.clone()))
        }
        (
            WriteShape::SeqInsert { entity, property, item },
            AtomicDiff::SeqAdded { instance, property: atom_property, item: value },
        ) if property == atom_property => {
            bind(graph, &mut state.params, entity, Value::EntityRef(instance.clone()))
                && bind(graph, &mut state.params, item, value.clone())
        }
        (
            WriteShape::SeqRemove { entity, property, item },
            AtomicDiff::SeqRemoved { instance, property: atom_property, item: value },
        ) if property == atom_property => {
            bind(graph, &mut state.params, entity, Value::EntityRef(instance.clone()))
                && bind(graph, &mut state.params, item, value.clone())
        }
        _ => false,
    }
}

fn finish_candidate(
    graph: &HierarchyGraph,
    action: &ActionDef,
    state: &MatchState,
    out: &mut Vec<(ActionInstance, BTreeSet<usize>)>,
) {
    for (root, property, expected) in &state.deferred {
        let Some(Value::EntityRef(instance)) = state.params.get(root) else {
            return;
        };
        let Ok(actual) = graph.resolve_property(instance, property) else {
            return;
        };
        if !values_match(graph, &actual, expected) {
            return;
        }
    }
    for (param, spec) in &action.entity_params {
        let Some(Value::EntityRef(instance)) = state.params.get(param) else {
            return;
        };
        if !entity_matches_parameter(graph, instance, spec).unwrap_or(false) {
            return;
        }
    }
    for (param, domain) in &action.value_params {
        if let Some(value) = state.params.get(param) {
            if crate::value::typecheck_value(graph, value, domain).is_err() {
                return;
            }
        }
    }
    out.push((
        ActionInstance { action: action.name.clone(), params: state.params.clone() },
        state.used.clone(),
    ));
}

/// Applies each action's effect function to the graph, used to replay a
/// diff onto the source state.
pub fn apply_actions(
    graph: &mut HierarchyGraph,
    builtins: &BuiltinRegistry,
    actions: &[ActionInstance],
) -> Result<(), KbError> {
    for instance in actions {
        let eff = graph
            .action(&instance.action)
            .map(|a| a.eff.clone())
            .ok_or_else(|| KbError::Other(format!("unknown action `{}`", instance.action)))?;
        let mut world = World::new(graph, builtins);
        run_stage_function(&mut world, &instance.action, &eff, Stage::Eff, &instance.params)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acts::ParamSpec;
    use crate::functions::{call, refer, Call, FunctionDef};
    use crate::hierarchy::test_support::small_household;
    use crate::hierarchy::{ConceptKind, ConceptNode, InstanceRecord};
    use crate::value::DomainRef as D;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pose_at(x: f64, y: f64, z: f64) -> Pose {
        Pose::from_array(&[1.0, 0.0, 0.0, 0.0, x, y, z]).unwrap()
    }

    /// Household plus surface concepts and a table/cup pair with support
    /// surfaces; the cup's bottom sits flush on the table's top.
    fn surface_world() -> HierarchyGraph {
        let mut graph = small_household();
        graph.add_concept(
            ConceptNode::new("Surface", &["Concept"])
                .property("center", D::Sequence(Box::new(D::Number)))
                .property("normal", D::Sequence(Box::new(D::Number))),
        );
        graph.add_concept(ConceptNode::new("ObjectStableSupportSurface", &["Surface"]));
        graph.add_concept(ConceptNode::new("SurfaceToSupport", &["Surface"]));
        graph.add_concept(ConceptNode::new("Table", &["Object"]));
        graph.add_instance(
            InstanceRecord::new("TableInstance", &["Table"]).surface("TableInstance_top"),
        );
        graph.add_instance(
            InstanceRecord::new("TableInstance_top", &["SurfaceToSupport"])
                .value("center", number_seq(&[0.0, 0.0, 0.4]))
                .value("normal", number_seq(&[0.0, 0.0, 1.0])),
        );
        graph.add_instance(
            InstanceRecord::new("CupInstance", &["TeaCup"]).surface("CupInstance_bottom"),
        );
        graph.add_instance(
            InstanceRecord::new("CupInstance_bottom", &["ObjectStableSupportSurface"])
                .value("center", number_seq(&[0.0, 0.0, -0.05]))
                .value("normal", number_seq(&[0.0, 0.0, -1.0])),
        );
        graph.rebuild_index().unwrap();
        graph
    }

    fn number_seq(values: &[f64]) -> Value {
        Value::Sequence {
            elem: D::Number,
            items: values.iter().map(|v| Value::Number(*v)).collect(),
        }
    }

    #[test]
    fn history_is_a_bounded_ring() {
        let mut graph = small_household();
        let mut env = EnvironmentState::with_capacity(5);
        for i in 0..8 {
            env.push_frame(&mut graph, Frame::at(i as f64)).unwrap();
        }
        assert_eq!(env.history_len(), 5);
        let timestamps: Vec<f64> = env.history().map(|f| f.timestamp).collect();
        assert_eq!(timestamps, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!(env
            .push_frame(&mut graph, Frame::at(7.0))
            .is_err(), "timestamps must strictly increase");
    }

    #[test]
    fn empty_frame_changes_only_history() {
        let mut graph = small_household();
        let mut env = EnvironmentState::default();
        env.push_frame(
            &mut graph,
            Frame::at(0.0).pose("WhiteBowlInstance", pose_at(1.0, 0.0, 0.0)),
        )
        .unwrap();
        let scene_before = env.scene.clone();
        let location_before = env.location.clone();
        env.push_frame(&mut graph, Frame::at(1.0)).unwrap();
        assert_eq!(env.scene, scene_before);
        assert_eq!(env.location, location_before);
        assert_eq!(env.history_len(), 2);
    }

    #[test]
    fn unknown_instances_are_warned_about_and_ignored() {
        let mut graph = small_household();
        let mut env = EnvironmentState::default();
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("NoSuchThing", pose_at(0.0, 0.0, 0.0))
                .hand("NoSuchHand", [0.0; 3]),
        )
        .unwrap();
        assert!(env.scene.pose_of("NoSuchThing").is_none());
        assert!(env.scene.pose_of("NoSuchHand").is_none());
        assert_eq!(env.warnings.len(), 2);
    }

    #[test]
    fn object_entering_hand_volume_joins_iv_objects() {
        let mut graph = small_household();
        let mut env = EnvironmentState::default();
        // Hand IV 0.1 and bowl IV 0.2, both inherited defaults.
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .hand("LeftHandInstance", [0.0, 0.0, 0.0])
                .pose("WhiteBowlInstance", pose_at(2.0, 0.0, 0.0))
                .with_contacts(),
        )
        .unwrap();
        assert!(env.grippers["LeftHandInstance"].iv_objects.is_empty());
        env.push_frame(
            &mut graph,
            Frame::at(1.0).pose("WhiteBowlInstance", pose_at(0.25, 0.0, 0.0)).with_contacts(),
        )
        .unwrap();
        let state = &env.grippers["LeftHandInstance"];
        assert!(state.iv_objects.contains("WhiteBowlInstance"));
        assert!(state.entered.contains("WhiteBowlInstance"));
        env.push_frame(
            &mut graph,
            Frame::at(2.0).pose("WhiteBowlInstance", pose_at(2.0, 0.0, 0.0)).with_contacts(),
        )
        .unwrap();
        let state = &env.grippers["LeftHandInstance"];
        assert!(!state.iv_objects.contains("WhiteBowlInstance"));
        assert!(state.left.contains("WhiteBowlInstance"));
    }

    #[test]
    fn interaction_volume_boundary_is_closed() {
        let mut graph = small_household();
        let mut env = EnvironmentState::default();
        let boundary = 0.1 + 0.2;
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .hand("LeftHandInstance", [0.0, 0.0, 0.0])
                .pose("WhiteBowlInstance", pose_at(boundary, 0.0, 0.0))
                .with_contacts(),
        )
        .unwrap();
        assert!(
            in_interaction_volume(&graph, &env.scene, "LeftHandInstance", "WhiteBowlInstance")
                .unwrap()
        );
        for epsilon in [1e-9, 1e-6, 1e-3] {
            let mut scene = env.scene.clone();
            scene.set_pose("WhiteBowlInstance", pose_at(boundary + epsilon, 0.0, 0.0));
            assert!(
                !in_interaction_volume(&graph, &scene, "LeftHandInstance", "WhiteBowlInstance")
                    .unwrap(),
                "distance {boundary}+{epsilon} must be outside"
            );
            scene.set_pose("WhiteBowlInstance", pose_at(boundary - epsilon, 0.0, 0.0));
            assert!(
                in_interaction_volume(&graph, &scene, "LeftHandInstance", "WhiteBowlInstance")
                    .unwrap()
            );
        }
    }

    #[test]
    fn unknown_interaction_volume_is_an_error_and_a_warning() {
        let mut graph = small_household();
        // An object concept with no interactionVolume default anywhere.
        graph.add_concept(ConceptNode::new("Mystery", &["Object"]));
        graph.add_instance(InstanceRecord::new("MysteryInstance", &["Mystery"]));
        graph.rebuild_index().unwrap();
        let mut env = EnvironmentState::default();
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .hand("LeftHandInstance", [0.0, 0.0, 0.0])
                .pose("MysteryInstance", pose_at(0.1, 0.0, 0.0))
                .with_contacts(),
        )
        .unwrap();
        assert!(
            in_interaction_volume(&graph, &env.scene, "LeftHandInstance", "MysteryInstance")
                .is_err()
        );
        assert!(env.warnings.iter().any(|w| w.contains("MysteryInstance")));
        assert!(!env.grippers["LeftHandInstance"].iv_objects.contains("MysteryInstance"));
    }

    #[test]
    fn iv_objects_agree_with_the_predicate() {
        let mut graph = small_household();
        let mut env = EnvironmentState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // The bottle and the tea cup inherit no interaction volume, so
        // they stay out regardless of distance.
        let objects = ["WhiteBowlInstance", "VittelBottleInstance", "TeaCupInstance"];
        for t in 0..20 {
            let mut frame = Frame::at(t as f64)
                .hand("LeftHandInstance", [rng.gen_range(-0.3..0.3), 0.0, 0.0])
                .with_contacts();
            for object in objects {
                frame = frame.pose(object, pose_at(rng.gen_range(-0.5..0.5), 0.0, 0.0));
            }
            env.push_frame(&mut graph, frame).unwrap();
            for object in objects {
                let direct =
                    in_interaction_volume(&graph, &env.scene, "LeftHandInstance", object);
                let listed = env.grippers["LeftHandInstance"].iv_objects.contains(object);
                match direct {
                    Ok(inside) => assert_eq!(listed, inside, "frame {t}, object {object}"),
                    Err(_) => assert!(!listed, "frame {t}, object {object} has no volume"),
                }
            }
        }
    }

    #[test]
    fn grasped_object_reparents_to_the_gripper() {
        let mut graph = surface_world();
        let mut env = EnvironmentState::default();
        // The cup rests on the table and touches the hand: grasp wins.
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("TableInstance", pose_at(0.0, 0.0, 0.0))
                .pose("CupInstance", pose_at(0.0, 0.0, 0.45))
                .hand("LeftHandInstance", [0.0, 0.05, 0.45])
                .contact("CupInstance_bottom", "TableInstance_top")
                .contact("LeftHandInstance", "CupInstance"),
        )
        .unwrap();
        assert_eq!(
            env.location.parent_of("CupInstance"),
            Some(&LocationRef::Entity("LeftHandInstance".to_string()))
        );
        // Without the hand, support wins.
        env.push_frame(
            &mut graph,
            Frame::at(1.0).contact("CupInstance_bottom", "TableInstance_top"),
        )
        .unwrap();
        assert_eq!(
            env.location.parent_of("CupInstance"),
            Some(&LocationRef::Entity("TableInstance".to_string()))
        );
        // Without any contact, the origin holds it.
        env.push_frame(&mut graph, Frame::at(2.0).with_contacts()).unwrap();
        assert_eq!(env.location.parent_of("CupInstance"), Some(&LocationRef::Origin));
    }

    #[test]
    fn two_grasping_grippers_pick_the_first_by_name() {
        let mut graph = surface_world();
        graph.add_instance(InstanceRecord::new("RightHandInstance", &["Hand"]));
        graph.rebuild_index().unwrap();
        let mut env = EnvironmentState::default();
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("CupInstance", pose_at(0.0, 0.0, 0.45))
                .hand("LeftHandInstance", [0.0, 0.05, 0.45])
                .hand("RightHandInstance", [0.0, -0.05, 0.45])
                .contact("RightHandInstance", "CupInstance")
                .contact("LeftHandInstance", "CupInstance"),
        )
        .unwrap();
        assert_eq!(
            env.location.parent_of("CupInstance"),
            Some(&LocationRef::Entity("LeftHandInstance".to_string()))
        );
    }

    #[test]
    fn moving_a_parent_rigidly_keeps_child_relative_poses() {
        let mut graph = surface_world();
        let mut env = EnvironmentState::default();
        let table_pose = pose_at(1.0, 2.0, 0.0);
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("TableInstance", table_pose)
                .pose("CupInstance", table_pose.compose(&pose_at(0.1, 0.2, 0.45)))
                .contact("CupInstance_bottom", "TableInstance_top"),
        )
        .unwrap();
        let rel_before = *env.location.relative_pose_of("CupInstance").unwrap();
        let origin_before = env.location.origin_pose("CupInstance").unwrap();

        // The table moves and rotates; the cup rides along rigidly.
        let moved = Pose::from_array(&[0.9238795325112867, 0.0, 0.0, 0.3826834323650898, 3.0, 1.0, 0.2])
            .unwrap();
        env.push_frame(
            &mut graph,
            Frame::at(1.0)
                .pose("TableInstance", moved)
                .pose("CupInstance", moved.compose(&rel_before))
                .contact("CupInstance_bottom", "TableInstance_top"),
        )
        .unwrap();
        let rel_after = *env.location.relative_pose_of("CupInstance").unwrap();
        assert!(rel_before.translation_distance(&rel_after) < 1e-9);
        assert!(rel_before.rotation.angle_to(&rel_after.rotation) < 1e-9);
        let origin_after = env.location.origin_pose("CupInstance").unwrap();
        assert!(origin_before.translation_distance(&origin_after) > 1.0);
    }

    #[test]
    fn recomposed_poses_match_stored_globals() {
        let mut graph = surface_world();
        graph.add_instance(InstanceRecord::new("RightHandInstance", &["Hand"]));
        graph.rebuild_index().unwrap();
        let mut env = EnvironmentState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2025);
        for t in 0..15 {
            let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let table = Pose {
                rotation: crate::pose::Quaternion::from_axis_angle(axis, rng.gen_range(-3.0..3.0)),
                translation: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0],
            };
            let cup_rel = pose_at(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                0.45,
            );
            let cup = table.compose(&cup_rel);
            env.push_frame(
                &mut graph,
                Frame::at(t as f64)
                    .pose("TableInstance", table)
                    .pose("CupInstance", cup)
                    .hand("RightHandInstance", [rng.gen_range(-1.0..1.0), 0.0, 1.0])
                    .contact("CupInstance_bottom", "TableInstance_top"),
            )
            .unwrap();
            for entity in ["TableInstance", "CupInstance", "RightHandInstance"] {
                let recomposed = env.location.origin_pose(entity).unwrap();
                let stored = env.scene.pose_of(entity).unwrap();
                assert!(
                    recomposed.translation_distance(stored) < 1e-6,
                    "frame {t}, entity {entity}"
                );
            }
        }
    }

    #[test]
    fn support_cycles_break_deterministically_into_a_forest() {
        let mut graph = surface_world();
        // Give the table surfaces both ways so each supports the other.
        graph.add_instance(
            InstanceRecord::new("BoxInstance", &["Object"])
                .surface("BoxInstance_bottom")
                .surface("BoxInstance_top"),
        );
        graph.add_instance(
            InstanceRecord::new("BoxInstance_bottom", &["ObjectStableSupportSurface"])
                .value("center", number_seq(&[0.0, 0.0, -0.1]))
                .value("normal", number_seq(&[0.0, 0.0, -1.0])),
        );
        graph.add_instance(
            InstanceRecord::new("BoxInstance_top", &["SurfaceToSupport"])
                .value("center", number_seq(&[0.0, 0.0, 0.1]))
                .value("normal", number_seq(&[0.0, 0.0, 1.0])),
        );
        graph.add_instance(
            InstanceRecord::new("CrateInstance", &["Object"])
                .surface("CrateInstance_bottom")
                .surface("CrateInstance_top"),
        );
        graph.add_instance(
            InstanceRecord::new("CrateInstance_bottom", &["ObjectStableSupportSurface"])
                .value("center", number_seq(&[0.0, 0.0, -0.1]))
                .value("normal", number_seq(&[0.0, 0.0, -1.0])),
        );
        graph.add_instance(
            InstanceRecord::new("CrateInstance_top", &["SurfaceToSupport"])
                .value("center", number_seq(&[0.0, 0.0, 0.1]))
                .value("normal", number_seq(&[0.0, 0.0, 1.0])),
        );
        graph.rebuild_index().unwrap();
        let mut env = EnvironmentState::default();
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("BoxInstance", pose_at(0.0, 0.0, 0.0))
                .pose("CrateInstance", pose_at(0.0, 0.0, 0.2))
                .contact("BoxInstance_bottom", "CrateInstance_top")
                .contact("CrateInstance_bottom", "BoxInstance_top"),
        )
        .unwrap();
        // BoxInstance sorts first, so the cycle breaks there.
        assert_eq!(env.location.parent_of("BoxInstance"), Some(&LocationRef::Origin));
        assert_eq!(
            env.location.parent_of("CrateInstance"),
            Some(&LocationRef::Entity("BoxInstance".to_string()))
        );
        assert!(env.warnings.iter().any(|w| w.contains("cycle")));
        for entity in ["BoxInstance", "CrateInstance"] {
            assert!(env.location.origin_pose(entity).is_some(), "forest after break");
        }
    }

    #[test]
    fn geometric_fallback_detects_flush_surfaces_only() {
        let mut graph = surface_world();
        let mut env = EnvironmentState::default();
        // No contacts key at all: the geometric rule decides. The cup
        // bottom (z=-0.05 in cup frame) sits at z=0.402 with the table top
        // at z=0.4: 2 mm gap, normals exactly opposed.
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("TableInstance", pose_at(0.0, 0.0, 0.0))
                .pose("CupInstance", pose_at(0.0, 0.0, 0.452)),
        )
        .unwrap();
        assert!(env.scene.in_contact("CupInstance", "TableInstance"));
        assert_eq!(
            env.location.parent_of("CupInstance"),
            Some(&LocationRef::Entity("TableInstance".to_string()))
        );
        // 8 mm gap: too far.
        env.push_frame(
            &mut graph,
            Frame::at(1.0).pose("CupInstance", pose_at(0.0, 0.0, 0.458)),
        )
        .unwrap();
        assert!(!env.scene.in_contact("CupInstance", "TableInstance"));
        // Tilted with the bottom center kept 2 mm over the table center,
        // so opposition of the normals is the deciding check: 10 degrees
        // passes, 20 degrees does not.
        let tilted_cup = |degrees: f64| {
            let angle = degrees.to_radians();
            let rotation = crate::pose::Quaternion::from_axis_angle([1.0, 0.0, 0.0], angle);
            Pose {
                rotation,
                translation: [0.0, -0.05 * angle.sin(), 0.402 + 0.05 * angle.cos()],
            }
        };
        env.push_frame(&mut graph, Frame::at(2.0).pose("CupInstance", tilted_cup(10.0))).unwrap();
        assert!(env.scene.in_contact("CupInstance", "TableInstance"));
        env.push_frame(&mut graph, Frame::at(3.0).pose("CupInstance", tilted_cup(20.0))).unwrap();
        assert!(!env.scene.in_contact("CupInstance", "TableInstance"));
        // An empty explicit list suppresses the rule entirely.
        env.push_frame(
            &mut graph,
            Frame::at(4.0).pose("CupInstance", pose_at(0.0, 0.0, 0.452)).with_contacts(),
        )
        .unwrap();
        assert!(!env.scene.in_contact("CupInstance", "TableInstance"));
    }

    #[test]
    fn location_properties_mirror_the_location_graph() {
        let mut graph = surface_world();
        let mut env = EnvironmentState::default();
        env.push_frame(
            &mut graph,
            Frame::at(0.0)
                .pose("TableInstance", pose_at(1.0, 0.0, 0.0))
                .pose("CupInstance", pose_at(1.0, 0.0, 0.45))
                .contact("CupInstance_bottom", "TableInstance_top"),
        )
        .unwrap();
        let value = graph.resolve_property("CupInstance", "location").unwrap();
        let Value::Location(location) = value else {
            panic!("expected a location value, got {value:?}");
        };
        assert_eq!(location.reference, LocationRef::Entity("TableInstance".to_string()));
        assert!(location.pose.translation_distance(&pose_at(0.0, 0.0, 0.45)) < 1e-9);
        let table = graph.resolve_property("TableInstance", "location").unwrap();
        let Value::Location(table) = table else {
            panic!("expected a location value");
        };
        assert_eq!(table.reference, LocationRef::Origin);
    }

    /// World with location/content actions for diff tests.
    fn diff_world() -> HierarchyGraph {
        let mut graph = small_household();
        graph.add_function(
            FunctionDef::new("SetLocation")
                .arg("e", D::Concept("PhysicalEntity".into()))
                .arg("toLocation", D::Location)
                .statement(Call::assign("e.location", refer("toLocation"))),
        );
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
        graph.add_concept(
            ConceptNode::new("ChangeLocation", &["Concept"]).kind(ConceptKind::Action),
        );
        graph.add_concept(
            ConceptNode::new("TransferContent", &["Concept"]).kind(ConceptKind::Action),
        );
        graph.add_action(
            ActionDef::new("ChangeLocation", "SetLocation")
                .entity("e", ParamSpec::of(&["PhysicalEntity"]))
                .value("toLocation", D::Location),
        );
        graph.add_action(
            ActionDef::new("TransferContent", "TransferContentEff")
                .entity("from", ParamSpec::of(&["Container"]))
                .entity("to", ParamSpec::of(&["Container"]))
                .entity("what", ParamSpec::of(&["PhysicalEntity"])),
        );
        graph.rebuild_index().unwrap();
        graph
    }

    fn loc(x: f64, y: f64, z: f64) -> Value {
        Value::Location(Location::at_origin(pose_at(x, y, z)))
    }

    /// The two-scene setup: milk box and grey bowl move, one milk portion
    /// pours into the white bowl, one cereal portion likewise.
    fn figure_pair() -> (HierarchyGraph, HierarchyGraph) {
        let mut a = diff_world();
        for (name, members) in [
            ("MilkBoxInstance", vec!["Container"]),
            ("CerealBoxInstance", vec!["Container"]),
            ("GreyBowlInstance", vec!["Bowl"]),
            ("MilkPortionInstance", vec!["PhysicalEntity"]),
            ("CerealPortionInstance", vec!["PhysicalEntity"]),
        ] {
            let members: Vec<&str> = members.iter().copied().collect();
            a.add_instance(InstanceRecord::new(name, &members));
        }
        a.rebuild_index().unwrap();
        let set = |g: &mut HierarchyGraph, inst: &str, prop: &str, v: Value| {
            g.write_property_raw(inst, prop, v).unwrap();
        };
        set(&mut a, "MilkBoxInstance", "location", loc(0.0, 0.0, 0.0));
        set(&mut a, "GreyBowlInstance", "location", loc(1.0, 0.0, 0.0));
        set(&mut a, "WhiteBowlInstance", "location", loc(2.0, 0.0, 0.0));
        set(&mut a, "CerealBoxInstance", "location", loc(3.0, 0.0, 0.0));
        set(&mut a, "MilkPortionInstance", "location", loc(0.0, 0.0, 0.1));
        set(&mut a, "CerealPortionInstance", "location", loc(3.0, 0.0, 0.1));
        set(
            &mut a,
            "MilkBoxInstance",
            "content",
            Value::entity_sequence("PhysicalEntity", &["MilkPortionInstance"]),
        );
        set(
            &mut a,
            "CerealBoxInstance",
            "content",
            Value::entity_sequence("PhysicalEntity", &["CerealPortionInstance"]),
        );
        set(&mut a, "WhiteBowlInstance", "content", Value::entity_sequence("PhysicalEntity", &[]));
        set(&mut a, "GreyBowlInstance", "content", Value::entity_sequence("PhysicalEntity", &[]));

        let mut b = a.clone();
        set(&mut b, "MilkBoxInstance", "location", loc(0.5, 0.5, 0.0));
        set(&mut b, "GreyBowlInstance", "location", loc(1.5, 0.5, 0.0));
        set(&mut b, "MilkBoxInstance", "content", Value::entity_sequence("PhysicalEntity", &[]));
        set(&mut b, "CerealBoxInstance", "content", Value::entity_sequence("PhysicalEntity", &[]));
        set(
            &mut b,
            "WhiteBowlInstance",
            "content",
            Value::entity_sequence(
                "PhysicalEntity",
                &["MilkPortionInstance", "CerealPortionInstance"],
            ),
        );
        set(&mut b, "MilkPortionInstance", "location", loc(2.0, 0.0, 0.0));
        set(&mut b, "CerealPortionInstance", "location", loc(2.0, 0.0, 0.0));
        (a, b)
    }

    #[test]
    fn identical_states_diff_to_nothing() {
        let (a, _) = figure_pair();
        let report = diff_environments(&a, &a.clone());
        assert!(report.actions.is_empty());
        assert!(report.unexplained.is_empty());
        assert!(report.missing_instances.is_empty());
    }

    #[test]
    fn scene_pair_diff_recovers_moves_and_transfers() {
        let (a, b) = figure_pair();
        let report = diff_environments(&a, &b);
        let mut summary: Vec<String> = report
            .actions
            .iter()
            .map(|action| {
                let entity_keys: Vec<String> = action
                    .params
                    .iter()
                    .filter_map(|(k, v)| v.as_entity().map(|e| format!("{k}={e}")))
                    .collect();
                format!("{}({})", action.action, entity_keys.join(","))
            })
            .collect();
        summary.sort();
        assert_eq!(
            summary,
            vec![
                "ChangeLocation(e=GreyBowlInstance)",
                "ChangeLocation(e=MilkBoxInstance)",
                "TransferContent(from=CerealBoxInstance,to=WhiteBowlInstance,what=CerealPortionInstance)",
                "TransferContent(from=MilkBoxInstance,to=WhiteBowlInstance,what=MilkPortionInstance)",
            ]
        );
        assert!(report.unexplained.is_empty(), "{:?}", report.unexplained);
    }

    #[test]
    fn applying_the_diff_reproduces_the_target_state() {
        let (a, b) = figure_pair();
        let report = diff_environments(&a, &b);
        let mut replayed = a.clone();
        let builtins = BuiltinRegistry::standard();
        apply_actions(&mut replayed, &builtins, &report.actions).unwrap();
        for name in b.instance_names() {
            for (property, _) in b.declared_properties(name) {
                let want = b.resolve_property(name, &property).unwrap_or(Value::Unknown);
                let got = replayed.resolve_property(name, &property).unwrap_or(Value::Unknown);
                match (&want, &got) {
                    (Value::Sequence { items: wi, .. }, Value::Sequence { items: gi, .. }) => {
                        let (removed, added) = multiset_delta(wi, gi);
                        assert!(
                            removed.is_empty() && added.is_empty(),
                            "{name}.{property}: {want:?} vs {got:?}"
                        );
                    }
                    _ => assert_eq!(want, got, "{name}.{property}"),
                }
            }
        }
    }

    #[test]
    fn unmatched_changes_are_reported_not_dropped() {
        let (a, mut b) = figure_pair();
        // basicShape has no registered action writing it.
        b.write_property_raw("MilkBoxInstance", "basicShape", Value::Text("prism".into()))
            .unwrap();
        let report = diff_environments(&a, &b);
        assert!(report
            .unexplained
            .iter()
            .any(|atom| atom.instance() == "MilkBoxInstance" && atom.property() == "basicShape"));
    }

    #[test]
    fn missing_instances_are_reported() {
        let (a, mut b) = figure_pair();
        b.remove_instance("GreyBowlInstance");
        b.add_instance(InstanceRecord::new("NewcomerInstance", &["Bowl"]));
        b.rebuild_index().unwrap();
        let report = diff_environments(&a, &b);
        assert!(report
            .missing_instances
            .contains(&"only in first state: GreyBowlInstance".to_string()));
        assert!(report
            .missing_instances
            .contains(&"only in second state: NewcomerInstance".to_string()));
    }

    #[test]
    fn random_single_perturbations_yield_exactly_the_expected_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(424242);
        for round in 0..60 {
            let (a, _) = figure_pair();
            let mut b = a.clone();
            let containers = ["MilkBoxInstance", "CerealBoxInstance", "WhiteBowlInstance"];
            let movables = ["MilkBoxInstance", "GreyBowlInstance", "TeaCupInstance"];
            let (expected_action, expected_entity): (&str, String) = match rng.gen_range(0..2) {
                0 => {
                    let target = movables[rng.gen_range(0..movables.len())];
                    b.write_property_raw(
                        target,
                        "location",
                        loc(rng.gen_range(5.0..9.0), rng.gen_range(5.0..9.0), 0.0),
                    )
                    .unwrap();
                    ("ChangeLocation", target.to_string())
                }
                _ => {
                    // Move the milk portion between containers: remove,
                    // add, and relocate, exactly one transfer.
                    let to = loop {
                        let pick = containers[rng.gen_range(0..containers.len())];
                        if pick != "MilkBoxInstance" {
                            break pick;
                        }
                    };
                    b.write_property_raw(
                        "MilkBoxInstance",
                        "content",
                        Value::entity_sequence("PhysicalEntity", &[]),
                    )
                    .unwrap();
                    let mut receiving =
                        match b.resolve_property(to, "content").unwrap_or(Value::Unknown) {
                            Value::Sequence { items, .. } => items,
                            _ => Vec::new(),
                        };
                    receiving.push(Value::EntityRef("MilkPortionInstance".into()));
                    b.write_property_raw(
                        to,
                        "content",
                        Value::Sequence { elem: D::Concept("PhysicalEntity".into()), items: receiving },
                    )
                    .unwrap();
                    let target_location =
                        b.resolve_property(to, "location").unwrap_or(Value::Unknown);
                    b.write_property_raw("MilkPortionInstance", "location", target_location)
                        .unwrap();
                    ("TransferContent", to.to_string())
                }
            };
            let report = diff_environments(&a, &b);
            assert_eq!(report.actions.len(), 1, "round {round}: {:?}", report.actions);
            assert_eq!(report.actions[0].action, expected_action, "round {round}");
            assert!(report.unexplained.is_empty(), "round {round}: {:?}", report.unexplained);
            let bound_entities: Vec<&str> = report.actions[0]
                .params
                .values()
                .filter_map(|v| v.as_entity())
                .collect();
            assert!(
                bound_entities.contains(&expected_entity.as_str()),
                "round {round}: {expected_entity} not bound in {:?}",
                report.actions[0]
            );
        }
    }

    #[test]
    fn location_changes_within_tolerance_do_not_diff() {
        let (a, _) = figure_pair();
        let mut b = a.clone();
        b.write_property_raw("MilkBoxInstance", "location", loc(0.004, 0.0, 0.0)).unwrap();
        let report = diff_environments(&a, &b);
        assert!(report.actions.is_empty(), "{:?}", report.actions);
        assert!(report.unexplained.is_empty());
    }
}

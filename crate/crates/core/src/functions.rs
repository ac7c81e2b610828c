//! The composable-function interpreter.
//!
//! A function is either *composed* (its body is a procedure tree of calls
//! to other functions) or *native* (a registered builtin). Procedures are
//! statement lists; values flow call-by-value, arguments evaluate
//! depth-first in the callee's declared order, and results come back
//! through the reserved `res` binding.
//!
//! Two special forms exist. `Assign` writes its evaluated `what` into the
//! binding named by `who`; when `who` is a dotted path such as
//! `from.content`, the write goes through the checked property path of the
//! referenced instance, firing hooks. `Condition` evaluates its `condition`
//! and then exactly one of the `ifTrue`/`ifFalse` statement blocks.
//!
//! Evaluation never mutates the graph except through `Assign` targets
//! rooted at explicitly passed bindings (and the hooks those writes fire).
//! A builtin receiving [`Value::Unknown`] where it has no rule for it
//! raises an `unknown-input` error rather than guessing.

use crate::environment::{
    SceneView, LOCATION_ROTATION_TOLERANCE, LOCATION_TRANSLATION_TOLERANCE,
};
use crate::error::{codes, Diagnostic, EvalError, PropertyError};
use crate::hierarchy::HierarchyGraph;
use crate::pose::{distance, Pose};
use crate::value::{typecheck_value, DomainRef, Location, LocationRef, Value};
use std::collections::{BTreeMap, BTreeSet};

/// Hard cap on call nesting. Load-time validation rejects recursive call
/// graphs, so this only guards programmatically built graphs.
const MAX_EVAL_DEPTH: usize = 256;

/// A `binding` or `binding.property` reference inside a procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct RefPath {
    pub root: String,
    pub property: Option<String>,
}

impl RefPath {
    pub fn parse(text: &str) -> RefPath {
        match text.split_once('.') {
            Some((root, property)) => RefPath {
                root: root.to_string(),
                property: Some(property.to_string()),
            },
            None => RefPath { root: text.to_string(), property: None },
        }
    }

    pub fn to_text(&self) -> String {
        match &self.property {
            Some(p) => format!("{}.{p}", self.root),
            None => self.root.clone(),
        }
    }
}

/// One node of a procedure tree.
#[derive(Debug, Clone, PartialEq)]
pub enum ProcExpr {
    Literal(Value),
    Reference(RefPath),
    Call(Call),
    /// Statement list; valid only in `Condition` branch slots.
    Block(Vec<Call>),
}

/// A call: function name plus argument-slot expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub function: String,
    pub slots: BTreeMap<String, ProcExpr>,
}

impl Call {
    pub fn new(function: &str) -> Call {
        Call { function: function.to_string(), slots: BTreeMap::new() }
    }

    pub fn slot(mut self, name: &str, expr: ProcExpr) -> Call {
        self.slots.insert(name.to_string(), expr);
        self
    }

    /// Shorthand for the ubiquitous `Assign(who, what)`.
    pub fn assign(who: &str, what: ProcExpr) -> Call {
        Call::new("Assign")
            .slot("who", ProcExpr::Reference(RefPath::parse(who)))
            .slot("what", what)
    }
}

pub fn lit(value: Value) -> ProcExpr {
    ProcExpr::Literal(value)
}

pub fn refer(path: &str) -> ProcExpr {
    ProcExpr::Reference(RefPath::parse(path))
}

pub fn call(c: Call) -> ProcExpr {
    ProcExpr::Call(c)
}

/// A function definition: interface plus optional composed procedure.
/// Definitions without a procedure are backed by a registered builtin, or
/// fail with `NoImplementation` on first evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub name: String,
    pub argument_order: Vec<String>,
    pub argument_domains: BTreeMap<String, DomainRef>,
    pub result_domain: Option<DomainRef>,
    pub procedure: Option<Vec<Call>>,
}

impl FunctionDef {
    pub fn new(name: &str) -> FunctionDef {
        FunctionDef {
            name: name.to_string(),
            argument_order: Vec::new(),
            argument_domains: BTreeMap::new(),
            result_domain: None,
            procedure: None,
        }
    }

    pub fn arg(mut self, name: &str, domain: DomainRef) -> FunctionDef {
        self.argument_order.push(name.to_string());
        self.argument_domains.insert(name.to_string(), domain);
        self
    }

    pub fn result(mut self, domain: DomainRef) -> FunctionDef {
        self.result_domain = Some(domain);
        self
    }

    pub fn statement(mut self, call: Call) -> FunctionDef {
        self.procedure.get_or_insert_with(Vec::new).push(call);
        self
    }
}

/// Signature of a native builtin. Natives receive the evaluation context
/// (graph, scene, registry, hook guard) and their arguments by name.
pub type NativeFn =
    fn(&mut EvalCtx<'_>, &BTreeMap<String, Value>) -> Result<Value, EvalError>;

#[derive(Clone)]
pub struct BuiltinEntry {
    pub name: String,
    pub arguments: Vec<String>,
    /// Special forms (`Assign`, `Condition`) are interpreted structurally
    /// and cannot be replaced or called like plain functions.
    pub special: bool,
    pub run: NativeFn,
}

impl std::fmt::Debug for BuiltinEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuiltinEntry")
            .field("name", &self.name)
            .field("arguments", &self.arguments)
            .field("special", &self.special)
            .finish()
    }
}

/// Named native implementations available to procedures.
#[derive(Debug, Clone, Default)]
pub struct BuiltinRegistry {
    entries: BTreeMap<String, BuiltinEntry>,
}

impl BuiltinRegistry {
    pub fn empty() -> BuiltinRegistry {
        BuiltinRegistry::default()
    }

    /// Registers a native implementation. Rejects duplicate names and the
    /// reserved special forms.
    pub fn register(
        &mut self,
        name: &str,
        arguments: &[&str],
        run: NativeFn,
    ) -> Result<(), String> {
        if self.entries.contains_key(name) {
            return Err(format!("builtin `{name}` is already registered"));
        }
        self.entries.insert(
            name.to_string(),
            BuiltinEntry {
                name: name.to_string(),
                arguments: arguments.iter().map(|a| a.to_string()).collect(),
                special: false,
                run,
            },
        );
        Ok(())
    }

    fn register_special(&mut self, name: &str, arguments: &[&str]) {
        self.entries.insert(
            name.to_string(),
            BuiltinEntry {
                name: name.to_string(),
                arguments: arguments.iter().map(|a| a.to_string()).collect(),
                special: true,
                run: |_, _| unreachable!("special forms are interpreted structurally"),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&BuiltinEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// The shipped builtin set: special forms, boolean and numeric
    /// operators, sequence helpers, geometric predicates over the scene,
    /// and the gripper-ownership hook pair.
    pub fn standard() -> BuiltinRegistry {
        let mut reg = BuiltinRegistry::empty();
        reg.register_special("Assign", &["who", "what"]);
        reg.register_special("Condition", &["condition", "ifTrue", "ifFalse"]);
        let entries: &[(&str, &[&str], NativeFn)] = &[
            ("Not", &["arg1"], native_not),
            ("And", &["arg1", "arg2"], native_and),
            ("Or", &["arg1", "arg2"], native_or),
            ("NumberEquals", &["arg1", "arg2"], native_number_equals),
            ("NumberNotEquals", &["arg1", "arg2"], native_number_not_equals),
            ("Add", &["arg1", "arg2"], native_add),
            ("Subtract", &["arg1", "arg2"], native_subtract),
            ("Multiply", &["arg1", "arg2"], native_multiply),
            ("LessThan", &["arg1", "arg2"], native_less_than),
            ("Equals", &["arg1", "arg2"], native_equals),
            ("SequenceInsert", &["sequence", "item"], native_sequence_insert),
            ("SequenceRemove", &["sequence", "item"], native_sequence_remove),
            ("SequenceContains", &["sequence", "item"], native_sequence_contains),
            ("SequenceHead", &["sequence"], native_sequence_head),
            ("IsClose", &["arg1", "arg2", "threshold"], native_is_close),
            ("GlobalDistance", &["arg1", "arg2"], native_global_distance),
            ("InContact", &["arg1", "arg2"], native_in_contact),
            (
                "SyncGripperOwnership",
                &["instance", "oldValue", "newValue"],
                native_sync_gripper_ownership,
            ),
            (
                "SyncBelongingAgent",
                &["instance", "oldValue", "newValue"],
                native_sync_belonging_agent,
            ),
        ];
        for (name, args, run) in entries {
            reg.register(name, args, *run).expect("standard names are unique");
        }
        reg
    }
}

/// Convenience constructor for binding maps.
pub fn bindings(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Mutable view of everything evaluation may touch. The scene is optional;
/// geometric builtins fail cleanly without one.
pub struct World<'a> {
    pub graph: &'a mut HierarchyGraph,
    pub builtins: &'a BuiltinRegistry,
    pub scene: Option<&'a SceneView>,
}

impl<'a> World<'a> {
    pub fn new(graph: &'a mut HierarchyGraph, builtins: &'a BuiltinRegistry) -> World<'a> {
        World { graph, builtins, scene: None }
    }

    pub fn with_scene(
        graph: &'a mut HierarchyGraph,
        builtins: &'a BuiltinRegistry,
        scene: &'a SceneView,
    ) -> World<'a> {
        World { graph, builtins, scene: Some(scene) }
    }

    /// Evaluates a function against the given bindings. Bindings are
    /// mutated by `Assign` statements; the declared result comes back as
    /// the return value (functions without a result return UNKNOWN).
    pub fn evaluate(
        &mut self,
        function: &str,
        bindings: &mut BTreeMap<String, Value>,
    ) -> Result<Value, EvalError> {
        let mut ctx = EvalCtx {
            graph: self.graph,
            builtins: self.builtins,
            scene: self.scene,
            fired: BTreeSet::new(),
            depth: 0,
        };
        ctx.evaluate_function(function, bindings)
    }

    /// Typechecked property write that fires every hook registered on the
    /// property, each at most once per outermost call.
    pub fn set_property(
        &mut self,
        instance: &str,
        property: &str,
        value: Value,
    ) -> Result<(), PropertyError> {
        let mut ctx = EvalCtx {
            graph: self.graph,
            builtins: self.builtins,
            scene: self.scene,
            fired: BTreeSet::new(),
            depth: 0,
        };
        ctx.set_property(instance, property, value)
    }
}

/// Internal evaluation state: world access plus the per-call hook guard.
pub struct EvalCtx<'a> {
    pub graph: &'a mut HierarchyGraph,
    pub builtins: &'a BuiltinRegistry,
    pub scene: Option<&'a SceneView>,
    /// (function, instance, property) triples whose hook already ran in
    /// this outermost call; repeats are skipped so mutually hooked
    /// properties converge instead of looping.
    fired: BTreeSet<(String, String, String)>,
    depth: usize,
}

impl EvalCtx<'_> {
    pub fn evaluate_function(
        &mut self,
        name: &str,
        bindings: &mut BTreeMap<String, Value>,
    ) -> Result<Value, EvalError> {
        if self.depth >= MAX_EVAL_DEPTH {
            return Err(EvalError::DepthExceeded);
        }
        self.depth += 1;
        let result = self.evaluate_function_inner(name, bindings);
        self.depth -= 1;
        result
    }

    fn evaluate_function_inner(
        &mut self,
        name: &str,
        bindings: &mut BTreeMap<String, Value>,
    ) -> Result<Value, EvalError> {
        let def = self.graph.function(name).cloned();
        if let Some(entry) = self.builtins.get(name) {
            if entry.special {
                return Err(EvalError::NoImplementation(format!(
                    "{name} is a special form, not a callable function"
                )));
            }
            let run = entry.run;
            let expected: Vec<String> = entry.arguments.clone();
            if let Some(def) = &def {
                self.check_bindings(def, bindings)?;
            } else {
                for arg in &expected {
                    if !bindings.contains_key(arg) {
                        return Err(EvalError::MissingArgument {
                            function: name.to_string(),
                            slot: arg.clone(),
                        });
                    }
                }
            }
            return run(self, bindings);
        }
        let Some(def) = def else {
            return Err(EvalError::UnknownFunction(name.to_string()));
        };
        self.check_bindings(&def, bindings)?;
        let Some(procedure) = &def.procedure else {
            return Err(EvalError::NoImplementation(name.to_string()));
        };
        if def.result_domain.is_some() && !bindings.contains_key("res") {
            bindings.insert("res".to_string(), Value::Unknown);
        }
        for statement in procedure {
            self.evaluate_call(statement, bindings, &def)?;
        }
        let out = bindings.get("res").cloned().unwrap_or(Value::Unknown);
        if let Some(result_domain) = &def.result_domain {
            typecheck_value(self.graph, &out, result_domain).map_err(|detail| {
                EvalError::ResultType {
                    expected: result_domain.to_string(),
                    got: format!("{} ({detail})", out.kind_name()),
                }
            })?;
        }
        Ok(out)
    }

    fn check_bindings(
        &self,
        def: &FunctionDef,
        bindings: &BTreeMap<String, Value>,
    ) -> Result<(), EvalError> {
        for arg in &def.argument_order {
            let Some(value) = bindings.get(arg) else {
                return Err(EvalError::MissingArgument {
                    function: def.name.clone(),
                    slot: arg.clone(),
                });
            };
            let domain = &def.argument_domains[arg];
            typecheck_value(self.graph, value, domain).map_err(|detail| {
                EvalError::ArgumentType {
                    function: def.name.clone(),
                    slot: arg.clone(),
                    expected: domain.to_string(),
                    got: format!("{} ({detail})", value.kind_name()),
                }
            })?;
        }
        Ok(())
    }

    fn evaluate_call(
        &mut self,
        call: &Call,
        bindings: &mut BTreeMap<String, Value>,
        def: &FunctionDef,
    ) -> Result<Value, EvalError> {
        match call.function.as_str() {
            "Assign" => self.evaluate_assign(call, bindings, def),
            "Condition" => self.evaluate_condition(call, bindings, def),
            name => {
                let order = self.callee_argument_order(name)?;
                for slot in call.slots.keys() {
                    if !order.contains(slot) {
                        return Err(EvalError::UnknownSlot {
                            function: name.to_string(),
                            slot: slot.clone(),
                        });
                    }
                }
                let mut child = BTreeMap::new();
                for arg in &order {
                    let Some(expr) = call.slots.get(arg) else {
                        return Err(EvalError::MissingArgument {
                            function: name.to_string(),
                            slot: arg.clone(),
                        });
                    };
                    let value = self.evaluate_expr(expr, bindings, def)?;
                    child.insert(arg.clone(), value);
                }
                self.evaluate_function(name, &mut child)
            }
        }
    }

    fn callee_argument_order(&self, name: &str) -> Result<Vec<String>, EvalError> {
        if let Some(def) = self.graph.function(name) {
            return Ok(def.argument_order.clone());
        }
        if let Some(entry) = self.builtins.get(name) {
            return Ok(entry.arguments.clone());
        }
        Err(EvalError::UnknownFunction(name.to_string()))
    }

    fn evaluate_assign(
        &mut self,
        call: &Call,
        bindings: &mut BTreeMap<String, Value>,
        def: &FunctionDef,
    ) -> Result<Value, EvalError> {
        let who = match call.slots.get("who") {
            Some(ProcExpr::Reference(path)) => path.clone(),
            Some(ProcExpr::Literal(Value::Text(text))) => RefPath::parse(text),
            Some(_) => {
                return Err(EvalError::BadAssignTarget(
                    "`who` must be a binding name or property path".to_string(),
                ))
            }
            None => {
                return Err(EvalError::MissingArgument {
                    function: "Assign".to_string(),
                    slot: "who".to_string(),
                })
            }
        };
        let what = call.slots.get("what").ok_or_else(|| EvalError::MissingArgument {
            function: "Assign".to_string(),
            slot: "what".to_string(),
        })?;
        let value = self.evaluate_expr(what, bindings, def)?;
        match &who.property {
            None => {
                let domain = if who.root == "res" {
                    def.result_domain.clone()
                } else {
                    def.argument_domains.get(&who.root).cloned()
                };
                let Some(domain) = domain else {
                    return Err(EvalError::BadAssignTarget(who.to_text()));
                };
                typecheck_value(self.graph, &value, &domain).map_err(|detail| {
                    EvalError::ArgumentType {
                        function: def.name.clone(),
                        slot: who.root.clone(),
                        expected: domain.to_string(),
                        got: format!("{} ({detail})", value.kind_name()),
                    }
                })?;
                bindings.insert(who.root.clone(), value.clone());
            }
            Some(property) => {
                let root = bindings
                    .get(&who.root)
                    .ok_or_else(|| EvalError::UnboundReference(who.root.clone()))?;
                let instance = match root {
                    Value::EntityRef(name) => name.clone(),
                    Value::Unknown => {
                        return Err(EvalError::UnknownInput {
                            function: def.name.clone(),
                            slot: who.to_text(),
                        })
                    }
                    other => {
                        return Err(EvalError::BadAssignTarget(format!(
                            "`{}` is bound to {}, not an entity",
                            who.root,
                            other.kind_name()
                        )))
                    }
                };
                self.set_property(&instance, property, value.clone())
                    .map_err(EvalError::Property)?;
            }
        }
        Ok(value)
    }

    fn evaluate_condition(
        &mut self,
        call: &Call,
        bindings: &mut BTreeMap<String, Value>,
        def: &FunctionDef,
    ) -> Result<Value, EvalError> {
        let condition = call.slots.get("condition").ok_or_else(|| {
            EvalError::MissingArgument {
                function: "Condition".to_string(),
                slot: "condition".to_string(),
            }
        })?;
        let value = self.evaluate_expr(condition, bindings, def)?;
        let flag = match value {
            Value::Boolean(b) => b,
            Value::Unknown => {
                return Err(EvalError::UnknownInput {
                    function: "Condition".to_string(),
                    slot: "condition".to_string(),
                })
            }
            other => {
                return Err(EvalError::ArgumentType {
                    function: "Condition".to_string(),
                    slot: "condition".to_string(),
                    expected: "Boolean".to_string(),
                    got: other.kind_name().to_string(),
                })
            }
        };
        let branch = call.slots.get(if flag { "ifTrue" } else { "ifFalse" });
        match branch {
            None => Ok(Value::Unknown),
            Some(ProcExpr::Block(statements)) => {
                for statement in statements {
                    self.evaluate_call(statement, bindings, def)?;
                }
                Ok(Value::Unknown)
            }
            Some(ProcExpr::Call(single)) => {
                self.evaluate_call(single, bindings, def)?;
                Ok(Value::Unknown)
            }
            Some(_) => Err(EvalError::ResultType {
                expected: "statement block".to_string(),
                got: "literal or reference".to_string(),
            }),
        }
    }

    fn evaluate_expr(
        &mut self,
        expr: &ProcExpr,
        bindings: &mut BTreeMap<String, Value>,
        def: &FunctionDef,
    ) -> Result<Value, EvalError> {
        match expr {
            ProcExpr::Literal(value) => Ok(value.clone()),
            ProcExpr::Reference(path) => {
                let root = bindings
                    .get(&path.root)
                    .ok_or_else(|| EvalError::UnboundReference(path.root.clone()))?
                    .clone();
                match &path.property {
                    None => Ok(root),
                    Some(property) => match root {
                        Value::EntityRef(instance) => self
                            .graph
                            .resolve_property(&instance, property)
                            .map_err(EvalError::Property),
                        Value::Unknown => Err(EvalError::UnknownInput {
                            function: def.name.clone(),
                            slot: path.to_text(),
                        }),
                        other => Err(EvalError::ArgumentType {
                            function: def.name.clone(),
                            slot: path.to_text(),
                            expected: "EntityRef".to_string(),
                            got: other.kind_name().to_string(),
                        }),
                    },
                }
            }
            ProcExpr::Call(call) => self.evaluate_call(call, bindings, def),
            ProcExpr::Block(_) => Err(EvalError::ResultType {
                expected: "value".to_string(),
                got: "statement block".to_string(),
            }),
        }
    }

    /// Checked property write plus hook dispatch. The hook guard lives on
    /// the context, so hooks fired transitively by other hooks still count
    /// against the same per-call budget.
    pub fn set_property(
        &mut self,
        instance: &str,
        property: &str,
        value: Value,
    ) -> Result<(), PropertyError> {
        self.graph.typecheck_for_instance(instance, property, &value)?;
        let old = self
            .graph
            .resolve_property(instance, property)
            .unwrap_or(Value::Unknown);
        self.graph.write_property_raw(instance, property, value.clone())?;
        for hook in self.graph.hooks_for(instance, property) {
            let key = (hook.clone(), instance.to_string(), property.to_string());
            if !self.fired.insert(key) {
                continue;
            }
            let mut hook_bindings = bindings(&[
                ("instance", Value::EntityRef(instance.to_string())),
                ("oldValue", old.clone()),
                ("newValue", value.clone()),
            ]);
            self.evaluate_function(&hook, &mut hook_bindings).map_err(|source| {
                PropertyError::HookFailed {
                    function: hook.clone(),
                    instance: instance.to_string(),
                    property: property.to_string(),
                    source: Box::new(source),
                }
            })?;
        }
        Ok(())
    }

    fn entity_pose(&self, function: &str, value: &Value) -> Result<Pose, EvalError> {
        let name = match value {
            Value::EntityRef(name) => name.as_str(),
            Value::Unknown => {
                return Err(EvalError::UnknownInput {
                    function: function.to_string(),
                    slot: "entity".to_string(),
                })
            }
            other => {
                return Err(EvalError::ArgumentType {
                    function: function.to_string(),
                    slot: "entity".to_string(),
                    expected: "EntityRef".to_string(),
                    got: other.kind_name().to_string(),
                })
            }
        };
        let scene = self
            .scene
            .ok_or_else(|| EvalError::NoScene { function: function.to_string() })?;
        scene
            .pose_of(name)
            .copied()
            .ok_or_else(|| EvalError::UnknownPose(name.to_string()))
    }

    /// A location in the origin frame, resolving entity reference frames
    /// through the scene.
    fn origin_pose(&self, function: &str, location: &Location) -> Result<Pose, EvalError> {
        match &location.reference {
            LocationRef::Origin => Ok(location.pose),
            LocationRef::Entity(entity) => {
                let base = self.entity_pose(function, &Value::EntityRef(entity.clone()))?;
                Ok(base.compose(&location.pose))
            }
        }
    }
}

fn expect_number(
    function: &str,
    slot: &str,
    args: &BTreeMap<String, Value>,
) -> Result<f64, EvalError> {
    match args.get(slot) {
        Some(Value::Number(n)) => Ok(*n),
        Some(Value::Unknown) => Err(EvalError::UnknownInput {
            function: function.to_string(),
            slot: slot.to_string(),
        }),
        Some(other) => Err(EvalError::ArgumentType {
            function: function.to_string(),
            slot: slot.to_string(),
            expected: "Number".to_string(),
            got: other.kind_name().to_string(),
        }),
        None => Err(EvalError::MissingArgument {
            function: function.to_string(),
            slot: slot.to_string(),
        }),
    }
}

fn expect_boolean(
    function: &str,
    slot: &str,
    args: &BTreeMap<String, Value>,
) -> Result<bool, EvalError> {
    match args.get(slot) {
        Some(Value::Boolean(b)) => Ok(*b),
        Some(Value::Unknown) => Err(EvalError::UnknownInput {
            function: function.to_string(),
            slot: slot.to_string(),
        }),
        Some(other) => Err(EvalError::ArgumentType {
            function: function.to_string(),
            slot: slot.to_string(),
            expected: "Boolean".to_string(),
            got: other.kind_name().to_string(),
        }),
        None => Err(EvalError::MissingArgument {
            function: function.to_string(),
            slot: slot.to_string(),
        }),
    }
}

fn expect_sequence<'v>(
    function: &str,
    slot: &str,
    args: &'v BTreeMap<String, Value>,
) -> Result<(&'v DomainRef, &'v Vec<Value>), EvalError> {
    match args.get(slot) {
        Some(Value::Sequence { elem, items }) => Ok((elem, items)),
        Some(Value::Unknown) => Err(EvalError::UnknownInput {
            function: function.to_string(),
            slot: slot.to_string(),
        }),
        Some(other) => Err(EvalError::ArgumentType {
            function: function.to_string(),
            slot: slot.to_string(),
            expected: "Sequence".to_string(),
            got: other.kind_name().to_string(),
        }),
        None => Err(EvalError::MissingArgument {
            function: function.to_string(),
            slot: slot.to_string(),
        }),
    }
}

fn expect_present<'v>(
    function: &str,
    slot: &str,
    args: &'v BTreeMap<String, Value>,
) -> Result<&'v Value, EvalError> {
    let value = args.get(slot).ok_or_else(|| EvalError::MissingArgument {
        function: function.to_string(),
        slot: slot.to_string(),
    })?;
    if value.is_unknown() {
        return Err(EvalError::UnknownInput {
            function: function.to_string(),
            slot: slot.to_string(),
        });
    }
    Ok(value)
}

fn native_not(_: &mut EvalCtx, args: &BTreeMap<String, Value>) -> Result<Value, EvalError> {
    Ok(Value::Boolean(!expect_boolean("Not", "arg1", args)?))
}

fn native_and(_: &mut EvalCtx, args: &BTreeMap<String, Value>) -> Result<Value, EvalError> {
    let a = expect_boolean("And", "arg1", args)?;
    let b = expect_boolean("And", "arg2", args)?;
    Ok(Value::Boolean(a && b))
}

fn native_or(_: &mut EvalCtx, args: &BTreeMap<String, Value>) -> Result<Value, EvalError> {
    let a = expect_boolean("Or", "arg1", args)?;
    let b = expect_boolean("Or", "arg2", args)?;
    Ok(Value::Boolean(a || b))
}

fn native_number_equals(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let a = expect_number("NumberEquals", "arg1", args)?;
    let b = expect_number("NumberEquals", "arg2", args)?;
    Ok(Value::Boolean(a == b))
}

fn native_number_not_equals(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let a = expect_number("NumberNotEquals", "arg1", args)?;
    let b = expect_number("NumberNotEquals", "arg2", args)?;
    Ok(Value::Boolean(a != b))
}

fn native_add(_: &mut EvalCtx, args: &BTreeMap<String, Value>) -> Result<Value, EvalError> {
    Ok(Value::Number(expect_number("Add", "arg1", args)? + expect_number("Add", "arg2", args)?))
}

fn native_subtract(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    Ok(Value::Number(
        expect_number("Subtract", "arg1", args)? - expect_number("Subtract", "arg2", args)?,
    ))
}

fn native_multiply(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    Ok(Value::Number(
        expect_number("Multiply", "arg1", args)? * expect_number("Multiply", "arg2", args)?,
    ))
}

fn native_less_than(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let a = expect_number("LessThan", "arg1", args)?;
    let b = expect_number("LessThan", "arg2", args)?;
    Ok(Value::Boolean(a < b))
}

/// Deep equality. Locations compare in the origin frame within the shared
/// location tolerances; everything else compares exactly. UNKNOWN on either
/// side is an unknown-input error, not `false`.
fn native_equals(ctx: &mut EvalCtx, args: &BTreeMap<String, Value>) -> Result<Value, EvalError> {
    let a = expect_present("Equals", "arg1", args)?;
    let b = expect_present("Equals", "arg2", args)?;
    if let (Value::Location(la), Value::Location(lb)) = (a, b) {
        let pa = ctx.origin_pose("Equals", la)?;
        let pb = ctx.origin_pose("Equals", lb)?;
        let close = pa.translation_distance(&pb) <= LOCATION_TRANSLATION_TOLERANCE
            && pa.rotation.angle_to(&pb.rotation) <= LOCATION_ROTATION_TOLERANCE;
        return Ok(Value::Boolean(close));
    }
    Ok(Value::Boolean(a == b))
}

fn native_sequence_insert(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let (elem, items) = expect_sequence("SequenceInsert", "sequence", args)?;
    let item = expect_present("SequenceInsert", "item", args)?;
    let mut items = items.clone();
    items.push(item.clone());
    Ok(Value::Sequence { elem: elem.clone(), items })
}

/// Removes the first occurrence of `item`; a missing item leaves the
/// sequence unchanged.
fn native_sequence_remove(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let (elem, items) = expect_sequence("SequenceRemove", "sequence", args)?;
    let item = expect_present("SequenceRemove", "item", args)?;
    let mut items = items.clone();
    if let Some(pos) = items.iter().position(|v| v == item) {
        items.remove(pos);
    }
    Ok(Value::Sequence { elem: elem.clone(), items })
}

fn native_sequence_contains(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let (_, items) = expect_sequence("SequenceContains", "sequence", args)?;
    let item = expect_present("SequenceContains", "item", args)?;
    Ok(Value::Boolean(items.contains(item)))
}

/// First element of the sequence; an empty sequence yields UNKNOWN.
fn native_sequence_head(
    _: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let (_, items) = expect_sequence("SequenceHead", "sequence", args)?;
    Ok(items.first().cloned().unwrap_or(Value::Unknown))
}

/// True when the origin-frame distance between the two entities is at most
/// `threshold` (closed comparison, so the boundary counts as close).
fn native_is_close(
    ctx: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let a = ctx.entity_pose("IsClose", expect_present("IsClose", "arg1", args)?)?;
    let b = ctx.entity_pose("IsClose", expect_present("IsClose", "arg2", args)?)?;
    let threshold = expect_number("IsClose", "threshold", args)?;
    Ok(Value::Boolean(distance(a.translation, b.translation) <= threshold))
}

fn native_global_distance(
    ctx: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let a = ctx.entity_pose("GlobalDistance", expect_present("GlobalDistance", "arg1", args)?)?;
    let b = ctx.entity_pose("GlobalDistance", expect_present("GlobalDistance", "arg2", args)?)?;
    Ok(Value::Number(distance(a.translation, b.translation)))
}

/// True when the scene's contact relation holds between the two entities
/// (directly, or through one of their surfaces).
fn native_in_contact(
    ctx: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let a = expect_present("InContact", "arg1", args)?;
    let b = expect_present("InContact", "arg2", args)?;
    let (Value::EntityRef(a), Value::EntityRef(b)) = (a, b) else {
        return Err(EvalError::ArgumentType {
            function: "InContact".to_string(),
            slot: "arg1/arg2".to_string(),
            expected: "EntityRef".to_string(),
            got: format!("{}, {}", a.kind_name(), b.kind_name()),
        });
    };
    let scene = ctx
        .scene
        .ok_or_else(|| EvalError::NoScene { function: "InContact".to_string() })?;
    Ok(Value::Boolean(scene.in_contact(a, b)))
}

fn ref_names(value: &Value) -> Vec<String> {
    match value {
        Value::Sequence { items, .. } => items
            .iter()
            .filter_map(|v| v.as_entity().map(|s| s.to_string()))
            .collect(),
        Value::EntityRef(name) => vec![name.clone()],
        _ => Vec::new(),
    }
}

/// Hook for `Agent.grippers`: newly listed grippers point their
/// `belongingAgent` at the agent; dropped grippers lose it (only if they
/// still pointed at this agent, so handovers don't clobber the new owner).
fn native_sync_gripper_ownership(
    ctx: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let agent = match args.get("instance") {
        Some(Value::EntityRef(name)) => name.clone(),
        _ => {
            return Err(EvalError::ArgumentType {
                function: "SyncGripperOwnership".to_string(),
                slot: "instance".to_string(),
                expected: "EntityRef".to_string(),
                got: "other".to_string(),
            })
        }
    };
    let old: BTreeSet<String> =
        args.get("oldValue").map(ref_names).unwrap_or_default().into_iter().collect();
    let new: BTreeSet<String> =
        args.get("newValue").map(ref_names).unwrap_or_default().into_iter().collect();
    for gripper in old.difference(&new) {
        let current = ctx.graph.resolve_property(gripper, "belongingAgent");
        if current == Ok(Value::EntityRef(agent.clone())) {
            ctx.set_property(gripper, "belongingAgent", Value::Unknown)
                .map_err(EvalError::Property)?;
        }
    }
    for gripper in new.difference(&old) {
        ctx.set_property(gripper, "belongingAgent", Value::EntityRef(agent.clone()))
            .map_err(EvalError::Property)?;
    }
    Ok(Value::Unknown)
}

/// Hook for `Gripper.belongingAgent`: keeps both agents' `grippers`
/// sequences consistent with the new owner.
fn native_sync_belonging_agent(
    ctx: &mut EvalCtx,
    args: &BTreeMap<String, Value>,
) -> Result<Value, EvalError> {
    let gripper = match args.get("instance") {
        Some(Value::EntityRef(name)) => name.clone(),
        _ => {
            return Err(EvalError::ArgumentType {
                function: "SyncBelongingAgent".to_string(),
                slot: "instance".to_string(),
                expected: "EntityRef".to_string(),
                got: "other".to_string(),
            })
        }
    };
    let old_agent = args.get("oldValue").and_then(|v| v.as_entity().map(str::to_string));
    let new_agent = args.get("newValue").and_then(|v| v.as_entity().map(str::to_string));
    if old_agent == new_agent {
        return Ok(Value::Unknown);
    }
    if let Some(agent) = old_agent {
        if ctx.graph.has_instance(&agent) {
            if let Ok(Value::Sequence { elem, items }) =
                ctx.graph.resolve_property(&agent, "grippers")
            {
                let items: Vec<Value> = items
                    .into_iter()
                    .filter(|v| v.as_entity() != Some(gripper.as_str()))
                    .collect();
                ctx.set_property(&agent, "grippers", Value::Sequence { elem, items })
                    .map_err(EvalError::Property)?;
            }
        }
    }
    if let Some(agent) = new_agent {
        if ctx.graph.has_instance(&agent) {
            let current = ctx.graph.resolve_property(&agent, "grippers");
            let (elem, mut items) = match current {
                Ok(Value::Sequence { elem, items }) => (elem, items),
                _ => (DomainRef::Concept("Gripper".to_string()), Vec::new()),
            };
            if !items.iter().any(|v| v.as_entity() == Some(gripper.as_str())) {
                items.push(Value::EntityRef(gripper.clone()));
                ctx.set_property(&agent, "grippers", Value::Sequence { elem, items })
                    .map_err(EvalError::Property)?;
            }
        }
    }
    Ok(Value::Unknown)
}

/// Load-time validation of every function definition: interface shape,
/// call targets and arities, reference binding, static literal types,
/// builtin conflicts, and call-graph recursion.
pub fn validate_functions(graph: &HierarchyGraph, builtins: &BuiltinRegistry) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for def in graph.functions() {
        let path = format!("concepts.{}.data", def.name);
        for arg in &def.argument_order {
            if !def.argument_domains.contains_key(arg) {
                diags.push(Diagnostic::error(
                    codes::BAD_FUNCTION_SHAPE,
                    &def.name,
                    format!("{path}.interface.{arg}"),
                    format!("argument `{arg}` has no declared domain"),
                ));
            }
        }
        if let Some(entry) = builtins.get(&def.name) {
            if def.procedure.is_some() {
                diags.push(Diagnostic::error(
                    codes::BUILTIN_WITH_PROCEDURE,
                    &def.name,
                    format!("{path}.procedure"),
                    "a composed procedure clashes with the registered builtin".to_string(),
                ));
            }
            if entry.arguments != def.argument_order {
                diags.push(Diagnostic::error(
                    codes::CALL_SLOT_MISMATCH,
                    &def.name,
                    format!("{path}.interface.arguments"),
                    format!(
                        "declared arguments {:?} do not match the builtin signature {:?}",
                        def.argument_order, entry.arguments
                    ),
                ));
            }
        }
        if let Some(procedure) = &def.procedure {
            for (i, statement) in procedure.iter().enumerate() {
                validate_call(
                    graph,
                    builtins,
                    def,
                    statement,
                    &format!("{path}.procedure[{i}]"),
                    &mut diags,
                );
            }
        }
    }

    // Recursion over composed calls. A function is recursive exactly when
    // it can reach itself through composed-call edges, so walk forward from
    // each one and look for the way back.
    let mut edges: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for def in graph.functions() {
        if let Some(procedure) = &def.procedure {
            let mut targets = BTreeSet::new();
            for statement in procedure {
                collect_call_targets(statement, &mut targets);
            }
            targets.retain(|t| {
                graph.function(t).map(|d| d.procedure.is_some()).unwrap_or(false)
            });
            edges.insert(def.name.clone(), targets);
        }
    }
    for name in edges.keys() {
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        let mut frontier: Vec<&String> = edges[name].iter().collect();
        let mut recursive = false;
        while let Some(next) = frontier.pop() {
            if next == name {
                recursive = true;
                break;
            }
            if seen.insert(next) {
                if let Some(onward) = edges.get(next) {
                    frontier.extend(onward.iter());
                }
            }
        }
        if recursive {
            diags.push(Diagnostic::error(
                codes::RECURSIVE_CALL_GRAPH,
                name,
                format!("concepts.{name}.data.procedure"),
                "function participates in a recursive call cycle".to_string(),
            ));
        }
    }
    diags
}

fn collect_call_targets(call: &Call, out: &mut BTreeSet<String>) {
    if call.function != "Assign" && call.function != "Condition" {
        out.insert(call.function.clone());
    }
    for expr in call.slots.values() {
        match expr {
            ProcExpr::Call(inner) => collect_call_targets(inner, out),
            ProcExpr::Block(statements) => {
                for statement in statements {
                    collect_call_targets(statement, out);
                }
            }
            _ => {}
        }
    }
}

fn validate_call(
    graph: &HierarchyGraph,
    builtins: &BuiltinRegistry,
    def: &FunctionDef,
    call: &Call,
    path: &str,
    diags: &mut Vec<Diagnostic>,
) {
    match call.function.as_str() {
        "Assign" => {
            match call.slots.get("who") {
                Some(ProcExpr::Reference(target)) => {
                    let known_root = target.root == "res"
                        || def.argument_domains.contains_key(&target.root);
                    if !known_root {
                        diags.push(Diagnostic::error(
                            codes::UNBOUND_REFERENCE,
                            &def.name,
                            format!("{path}.Assign.who"),
                            format!("assignment target root `{}` is not an argument", target.root),
                        ));
                    }
                    if target.root == "res"
                        && target.property.is_none()
                        && def.result_domain.is_none()
                    {
                        diags.push(Diagnostic::error(
                            codes::RESULT_TYPE_MISMATCH,
                            &def.name,
                            format!("{path}.Assign.who"),
                            "assignment to `res` but the interface declares no result".to_string(),
                        ));
                    }
                }
                _ => diags.push(Diagnostic::error(
                    codes::BAD_FUNCTION_SHAPE,
                    &def.name,
                    format!("{path}.Assign.who"),
                    "Assign needs a `who` reference".to_string(),
                )),
            }
            match call.slots.get("what") {
                Some(expr) => validate_expr(graph, builtins, def, expr, path, diags),
                None => diags.push(Diagnostic::error(
                    codes::BAD_FUNCTION_SHAPE,
                    &def.name,
                    format!("{path}.Assign.what"),
                    "Assign needs a `what` expression".to_string(),
                )),
            }
        }
        "Condition" => {
            match call.slots.get("condition") {
                Some(expr) => validate_expr(graph, builtins, def, expr, path, diags),
                None => diags.push(Diagnostic::error(
                    codes::BAD_FUNCTION_SHAPE,
                    &def.name,
                    format!("{path}.Condition.condition"),
                    "Condition needs a `condition` expression".to_string(),
                )),
            }
            for branch in ["ifTrue", "ifFalse"] {
                match call.slots.get(branch) {
                    None => {}
                    Some(ProcExpr::Block(statements)) => {
                        for (i, statement) in statements.iter().enumerate() {
                            validate_call(
                                graph,
                                builtins,
                                def,
                                statement,
                                &format!("{path}.Condition.{branch}[{i}]"),
                                diags,
                            );
                        }
                    }
                    Some(ProcExpr::Call(single)) => validate_call(
                        graph,
                        builtins,
                        def,
                        single,
                        &format!("{path}.Condition.{branch}"),
                        diags,
                    ),
                    Some(_) => diags.push(Diagnostic::error(
                        codes::BAD_FUNCTION_SHAPE,
                        &def.name,
                        format!("{path}.Condition.{branch}"),
                        "branch must be a call or a list of calls".to_string(),
                    )),
                }
            }
        }
        name => {
            let callee_def = graph.function(name);
            let builtin = builtins.get(name);
            let order: Option<Vec<String>> = callee_def
                .map(|d| d.argument_order.clone())
                .or_else(|| builtin.map(|b| b.arguments.clone()));
            let Some(order) = order else {
                diags.push(Diagnostic::error(
                    codes::UNKNOWN_CALL_TARGET,
                    &def.name,
                    format!("{path}.{name}"),
                    format!("call target `{name}` is neither defined nor builtin"),
                ));
                return;
            };
            for slot in call.slots.keys() {
                if !order.contains(slot) {
                    diags.push(Diagnostic::error(
                        codes::CALL_SLOT_MISMATCH,
                        &def.name,
                        format!("{path}.{name}.{slot}"),
                        format!("`{name}` has no argument slot `{slot}`"),
                    ));
                }
            }
            for arg in &order {
                match call.slots.get(arg) {
                    None => diags.push(Diagnostic::error(
                        codes::CALL_SLOT_MISMATCH,
                        &def.name,
                        format!("{path}.{name}.{arg}"),
                        format!("call to `{name}` does not bind `{arg}`"),
                    )),
                    Some(ProcExpr::Literal(value)) => {
                        if let Some(domain) =
                            callee_def.and_then(|d| d.argument_domains.get(arg))
                        {
                            if let Err(detail) = typecheck_value(graph, value, domain) {
                                diags.push(Diagnostic::error(
                                    codes::CALL_SLOT_MISMATCH,
                                    &def.name,
                                    format!("{path}.{name}.{arg}"),
                                    format!("literal does not fit {domain}: {detail}"),
                                ));
                            }
                        }
                    }
                    Some(expr) => validate_expr(graph, builtins, def, expr, path, diags),
                }
            }
        }
    }
}

fn validate_expr(
    graph: &HierarchyGraph,
    builtins: &BuiltinRegistry,
    def: &FunctionDef,
    expr: &ProcExpr,
    path: &str,
    diags: &mut Vec<Diagnostic>,
) {
    match expr {
        ProcExpr::Literal(_) => {}
        ProcExpr::Reference(reference) => {
            let known = reference.root == "res"
                || def.argument_domains.contains_key(&reference.root);
            if !known {
                diags.push(Diagnostic::error(
                    codes::UNBOUND_REFERENCE,
                    &def.name,
                    path.to_string(),
                    format!("reference `{}` is not an argument of `{}`", reference.to_text(), def.name),
                ));
            }
        }
        ProcExpr::Call(inner) => validate_call(graph, builtins, def, inner, path, diags),
        ProcExpr::Block(_) => diags.push(Diagnostic::error(
            codes::BAD_FUNCTION_SHAPE,
            &def.name,
            path.to_string(),
            "statement block where a value is expected".to_string(),
        )),
    }
}

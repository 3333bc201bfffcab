//! Declarative device models: typed properties, constraints over them,
//! and an executable state machine, parsed from a small text format.
//!
//! A model is immutable after parsing and safe to share across threads.
//! `parse_model` resolves every name and type so that later evaluation is
//! total; `check_model` re-runs the semantic checks (useful for models
//! built programmatically) and performs the determinism analysis over
//! guard expressions.

pub mod expr;
pub mod parse;
pub mod print;
pub mod value;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::wire::{OutcomeClass, TICK};
use expr::{eval, type_check, EvalEnv, EvalError, Expr, Ty, TypeEnv};
use value::{Literal, PropertyType};

pub use parse::{parse_model, ParseError};
pub use print::print_model;

/// A device property: name, type, optional unit and default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    pub ty: PropertyType,
    pub unit: Option<String>,
    pub default: Option<Literal>,
}

/// A named boolean constraint over properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: String,
    pub expr: Expr,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub name: String,
    /// Actions run every time the state is entered.
    pub entry: Vec<Action>,
}

/// Actions a transition (or state entry) may carry. Plan verbs drive the
/// engine-level medication-plan runtime; everything else is a property
/// assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Assign { prop: String, expr: Expr },
    PlanLoad,
    PlanDispense,
    PlanConfirm,
    PlanMiss,
    PlanClear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub source: String,
    pub target: String,
    /// A declared API operation or the reserved `tick` event.
    pub trigger: String,
    /// Guard over properties, request fields, the clock, and plan
    /// bindings. `None` means always enabled.
    pub guard: Option<Expr>,
    pub actions: Vec<Action>,
    /// Notification kinds emitted when the transition fires.
    pub notify: Vec<String>,
    /// Outcome status reported when the transition fires.
    pub respond: OutcomeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMachine {
    pub states: Vec<State>,
    pub initial: String,
    pub transitions: Vec<Transition>,
}

/// Request field declaration of an API operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub ty: PropertyType,
}

/// One device API operation: its request schema and the names of the
/// properties/bindings echoed in responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointDef {
    pub operation: String,
    pub request: Vec<FieldDef>,
    pub response: Vec<String>,
}

/// A parsed, resolved device model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub name: String,
    pub version: String,
    pub properties: Vec<PropertyDef>,
    pub constraints: Vec<Constraint>,
    pub behavior: StateMachine,
    pub api: Vec<EndpointDef>,
}

impl DeviceModel {
    pub fn property(&self, name: &str) -> Option<&PropertyDef> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn endpoint(&self, operation: &str) -> Option<&EndpointDef> {
        self.api.iter().find(|e| e.operation == operation)
    }

    pub fn state(&self, name: &str) -> Option<&State> {
        self.behavior.states.iter().find(|s| s.name == name)
    }
}

/// Engine-provided bindings available to guards, actions, and response
/// fields. They reflect the medication-plan runtime at evaluation time.
pub fn builtin_binding_type(name: &str) -> Option<PropertyType> {
    match name {
        "plan_valid" | "dose_due" | "grace_expired" | "plan_exhausted" | "intake_pending" => {
            Some(PropertyType::Bool)
        }
        "roll_remaining" | "doses_remaining" => Some(PropertyType::Int),
        "next_due_at" => Some(PropertyType::Datetime),
        _ => None,
    }
}

pub const BUILTIN_BINDINGS: [&str; 8] = [
    "plan_valid",
    "dose_due",
    "grace_expired",
    "plan_exhausted",
    "intake_pending",
    "roll_remaining",
    "doses_remaining",
    "next_due_at",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
}

/// A well-formedness finding from `check_model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub message: String,
}

impl Diagnostic {
    fn error(code: &'static str, message: String) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            code,
            message,
        }
    }

    fn warning(code: &'static str, message: String) -> Diagnostic {
        Diagnostic {
            severity: Severity::Warning,
            code,
            message,
        }
    }
}

struct ModelEnv<'a> {
    model: &'a DeviceModel,
    /// Request fields of the trigger under check, if any.
    req_fields: Option<&'a [FieldDef]>,
    /// Constraints see only properties.
    properties_only: bool,
}

impl TypeEnv for ModelEnv<'_> {
    fn name_type(&self, name: &str) -> Option<Ty> {
        if let Some(p) = self.model.property(name) {
            return Some(Ty::of(&p.ty));
        }
        if self.properties_only {
            return None;
        }
        builtin_binding_type(name).map(|t| Ty::of(&t))
    }

    fn req_field_type(&self, name: &str) -> Option<Ty> {
        self.req_fields
            .and_then(|fs| fs.iter().find(|f| f.name == name))
            .map(|f| Ty::of(&f.ty))
    }

    fn clock_available(&self) -> bool {
        !self.properties_only
    }
}

/// Checks every model invariant and returns one diagnostic per violation.
/// An empty list means the model is well-formed.
pub fn check_model(model: &DeviceModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut work = model.clone();

    check_properties(&work, &mut out);
    check_api(&mut work, &mut out);
    check_constraints(&mut work, &mut out);
    check_behavior(&mut work, &mut out);
    if out.iter().all(|d| d.severity == Severity::Warning) {
        determinism_analysis(&work, &mut out);
    }
    out
}

fn check_properties(model: &DeviceModel, out: &mut Vec<Diagnostic>) {
    let mut seen = BTreeSet::new();
    for p in &model.properties {
        if !seen.insert(p.name.clone()) {
            out.push(Diagnostic::error(
                "duplicate-property",
                format!("property '{}' declared more than once", p.name),
            ));
        }
        if let PropertyType::Enum(domain) = &p.ty {
            if domain.is_empty() {
                out.push(Diagnostic::error(
                    "empty-enum",
                    format!("enum property '{}' has an empty domain", p.name),
                ));
            }
            let mut vals = BTreeSet::new();
            for v in domain {
                if !vals.insert(v) {
                    out.push(Diagnostic::error(
                        "duplicate-enum-value",
                        format!("enum property '{}' repeats value '{}'", p.name, v),
                    ));
                }
            }
        }
        if let Some(default) = &p.default {
            if !default.conforms_to(&p.ty) {
                out.push(Diagnostic::error(
                    "default-type",
                    format!(
                        "default for '{}' is {} but the property is {}",
                        p.name,
                        default.type_name(),
                        p.ty.name()
                    ),
                ));
            }
        }
    }
}

fn check_api(model: &mut DeviceModel, out: &mut Vec<Diagnostic>) {
    let mut seen = BTreeSet::new();
    let api = model.api.clone();
    for e in &api {
        if !seen.insert(e.operation.clone()) {
            out.push(Diagnostic::error(
                "duplicate-operation",
                format!("api operation '{}' declared more than once", e.operation),
            ));
        }
        // `tick` may be declared to give the timer event response fields,
        // but it cannot carry a request payload.
        if e.operation == TICK && !e.request.is_empty() {
            out.push(Diagnostic::error(
                "reserved-operation",
                format!("'{TICK}' cannot declare request fields"),
            ));
        }
        let mut fields = BTreeSet::new();
        for f in &e.request {
            if !fields.insert(f.name.clone()) {
                out.push(Diagnostic::error(
                    "duplicate-field",
                    format!(
                        "operation '{}' repeats request field '{}'",
                        e.operation, f.name
                    ),
                ));
            }
            if let PropertyType::Enum(domain) = &f.ty {
                if domain.is_empty() {
                    out.push(Diagnostic::error(
                        "empty-enum",
                        format!(
                            "request field '{}.{}' has an empty enum domain",
                            e.operation, f.name
                        ),
                    ));
                }
            }
        }
        for r in &e.response {
            if model.property(r).is_none() && builtin_binding_type(r).is_none() {
                out.push(Diagnostic::error(
                    "unknown-reference",
                    format!(
                        "response field '{}' of operation '{}' is neither a property nor a binding",
                        r, e.operation
                    ),
                ));
            }
        }
    }
}

fn check_constraints(model: &mut DeviceModel, out: &mut Vec<Diagnostic>) {
    let mut seen = BTreeSet::new();
    let mut constraints = model.constraints.clone();
    for c in &mut constraints {
        if !seen.insert(c.id.clone()) {
            out.push(Diagnostic::error(
                "duplicate-constraint",
                format!("constraint '{}' declared more than once", c.id),
            ));
        }
        let env = ModelEnv {
            model,
            req_fields: None,
            properties_only: true,
        };
        match type_check(&mut c.expr, &env) {
            Ok(Ty::Bool) => {}
            Ok(other) => out.push(Diagnostic::error(
                "constraint-type",
                format!("constraint '{}' is {:?}, expected bool", c.id, other),
            )),
            Err(e) => out.push(Diagnostic::error(
                "unknown-reference",
                format!("constraint '{}': {}", c.id, e),
            )),
        }
    }
    model.constraints = constraints;
}

fn check_behavior(model: &mut DeviceModel, out: &mut Vec<Diagnostic>) {
    let mut names = BTreeSet::new();
    for s in &model.behavior.states {
        if !names.insert(s.name.clone()) {
            out.push(Diagnostic::error(
                "duplicate-state",
                format!("state '{}' declared more than once", s.name),
            ));
        }
    }
    if !names.contains(&model.behavior.initial) {
        out.push(Diagnostic::error(
            "unknown-state",
            format!("initial state '{}' is not declared", model.behavior.initial),
        ));
    }

    let snapshot = model.clone();
    for s in &mut model.behavior.states {
        let mut entry = s.entry.clone();
        for a in &mut entry {
            check_action(&snapshot, None, a, &s.name, out);
        }
        s.entry = entry;
    }

    let mut transitions = model.behavior.transitions.clone();
    for t in &mut transitions {
        if !names.contains(&t.source) {
            out.push(Diagnostic::error(
                "unknown-state",
                format!("transition source '{}' is not a declared state", t.source),
            ));
        }
        if !names.contains(&t.target) {
            out.push(Diagnostic::error(
                "unknown-state",
                format!("transition target '{}' is not a declared state", t.target),
            ));
        }
        let req_fields = if t.trigger == TICK {
            Some(&[][..])
        } else {
            snapshot.endpoint(&t.trigger).map(|e| &e.request[..])
        };
        let Some(req_fields) = req_fields else {
            out.push(Diagnostic::error(
                "unknown-operation",
                format!(
                    "transition {} -> {} triggers on undeclared operation '{}'",
                    t.source, t.target, t.trigger
                ),
            ));
            continue;
        };
        if let Some(guard) = &mut t.guard {
            let env = ModelEnv {
                model: &snapshot,
                req_fields: Some(req_fields),
                properties_only: false,
            };
            match type_check(guard, &env) {
                Ok(Ty::Bool) => {}
                Ok(other) => out.push(Diagnostic::error(
                    "guard-type",
                    format!(
                        "guard of {} -> {} on {} is {:?}, expected bool",
                        t.source, t.target, t.trigger, other
                    ),
                )),
                Err(e) => out.push(Diagnostic::error(
                    "unknown-reference",
                    format!("guard of {} -> {} on {}: {}", t.source, t.target, t.trigger, e),
                )),
            }
        }
        for a in &mut t.actions {
            check_action(&snapshot, Some(req_fields), a, &t.source, out);
        }
    }
    model.behavior.transitions = transitions;
}

fn check_action(
    model: &DeviceModel,
    req_fields: Option<&[FieldDef]>,
    action: &mut Action,
    context: &str,
    out: &mut Vec<Diagnostic>,
) {
    if let Action::Assign { prop, expr } = action {
        let Some(p) = model.property(prop) else {
            out.push(Diagnostic::error(
                "unknown-reference",
                format!("assignment in '{context}' targets undeclared property '{prop}'"),
            ));
            return;
        };
        let env = ModelEnv {
            model,
            req_fields: req_fields.or(Some(&[])),
            properties_only: false,
        };
        match type_check(expr, &env) {
            Ok(ty) => {
                let expected = Ty::of(&p.ty);
                let ok = match (&expected, &ty) {
                    (Ty::Float, Ty::Int) => true,
                    (Ty::Enum(_), Ty::Str) | (Ty::Enum(_), Ty::Enum(_)) | (Ty::Str, Ty::Enum(_)) => {
                        true
                    }
                    _ => expected == ty,
                };
                if !ok {
                    out.push(Diagnostic::error(
                        "assignment-type",
                        format!("assignment to '{prop}' in '{context}' has mismatched type"),
                    ));
                }
            }
            Err(e) => out.push(Diagnostic::error(
                "unknown-reference",
                format!("assignment to '{prop}' in '{context}': {e}"),
            )),
        }
    }
}

/// Variables an expression reads, split by whether their domain is small
/// enough to enumerate.
fn guard_vars(expr: &Expr, model: &DeviceModel, req_fields: &[FieldDef]) -> GuardVars {
    let mut vars = GuardVars::default();
    collect_vars(expr, model, req_fields, &mut vars);
    vars
}

#[derive(Default)]
struct GuardVars {
    /// name -> candidate values
    enumerable: BTreeMap<String, Vec<Literal>>,
    non_enumerable: BTreeSet<String>,
}

fn collect_vars(expr: &Expr, model: &DeviceModel, req_fields: &[FieldDef], out: &mut GuardVars) {
    match expr {
        Expr::Lit(_) => {}
        Expr::Now => {
            out.non_enumerable.insert("now".to_string());
        }
        Expr::Name(name) => {
            let ty = model
                .property(name)
                .map(|p| p.ty.clone())
                .or_else(|| builtin_binding_type(name));
            record_var(name.clone(), ty, out);
        }
        Expr::ReqField(name) => {
            let ty = req_fields.iter().find(|f| f.name == *name).map(|f| f.ty.clone());
            record_var(format!("req.{name}"), ty, out);
        }
        Expr::Not(e) | Expr::Neg(e) => collect_vars(e, model, req_fields, out),
        Expr::Binary(_, l, r) => {
            collect_vars(l, model, req_fields, out);
            collect_vars(r, model, req_fields, out);
        }
        Expr::In(e, _) => collect_vars(e, model, req_fields, out),
    }
}

fn record_var(key: String, ty: Option<PropertyType>, out: &mut GuardVars) {
    match ty {
        Some(PropertyType::Bool) => {
            out.enumerable
                .entry(key)
                .or_insert_with(|| vec![Literal::Bool(false), Literal::Bool(true)]);
        }
        Some(PropertyType::Enum(domain)) => {
            out.enumerable
                .entry(key)
                .or_insert_with(|| domain.iter().map(|v| Literal::Str(v.clone())).collect());
        }
        _ => {
            out.non_enumerable.insert(key);
        }
    }
}

const ENUMERATION_CAP: usize = 4096;

/// Proves pairwise guard disjointness per (state, trigger) by enumerating
/// assignments when every referenced variable ranges over a small finite
/// domain (bools and enums). Otherwise emits a warning: runtime ties break
/// by declaration order.
fn determinism_analysis(model: &DeviceModel, out: &mut Vec<Diagnostic>) {
    let mut groups: BTreeMap<(String, String), Vec<&Transition>> = BTreeMap::new();
    for t in &model.behavior.transitions {
        groups
            .entry((t.source.clone(), t.trigger.clone()))
            .or_default()
            .push(t);
    }

    for ((state, trigger), group) in groups {
        if group.len() < 2 {
            continue;
        }
        let req_fields: Vec<FieldDef> = model
            .endpoint(&trigger)
            .map(|e| e.request.clone())
            .unwrap_or_default();

        let mut vars = GuardVars::default();
        for t in &group {
            if let Some(g) = &t.guard {
                let gv = guard_vars(g, model, &req_fields);
                for (k, v) in gv.enumerable {
                    vars.enumerable.entry(k).or_insert(v);
                }
                vars.non_enumerable.extend(gv.non_enumerable);
            }
        }

        if !vars.non_enumerable.is_empty() {
            out.push(Diagnostic::warning(
                "nondeterminism-unproven",
                format!(
                    "state '{state}', trigger '{trigger}': guards reference non-enumerable \
                     variables ({}); disjointness not proven, runtime ties break by \
                     declaration order",
                    vars.non_enumerable.iter().cloned().collect::<Vec<_>>().join(", ")
                ),
            ));
            continue;
        }

        let space: usize = vars
            .enumerable
            .values()
            .map(|v| v.len())
            .product();
        if space > ENUMERATION_CAP {
            out.push(Diagnostic::warning(
                "nondeterminism-unproven",
                format!(
                    "state '{state}', trigger '{trigger}': {space} assignments exceed the \
                     enumeration cap; disjointness not proven"
                ),
            ));
            continue;
        }

        let keys: Vec<&String> = vars.enumerable.keys().collect();
        let domains: Vec<&Vec<Literal>> = vars.enumerable.values().collect();
        let mut idx = vec![0usize; keys.len()];
        loop {
            let mut env = EvalEnv::default();
            for (k, (key, domain)) in keys.iter().zip(domains.iter()).enumerate() {
                let value = domain[idx[k]].clone();
                if let Some(field) = key.strip_prefix("req.") {
                    env.req.insert(field.to_string(), value);
                } else {
                    env.names.insert((*key).clone(), value);
                }
            }
            let mut enabled = Vec::new();
            for t in &group {
                let holds = match &t.guard {
                    None => true,
                    Some(g) => matches!(eval(g, &env), Ok(Literal::Bool(true))),
                };
                if holds {
                    enabled.push(format!("{} -> {}", t.source, t.target));
                }
            }
            if enabled.len() > 1 {
                out.push(Diagnostic::error(
                    "nondeterminism",
                    format!(
                        "state '{state}', trigger '{trigger}': guards overlap \
                         ({}) under assignment {:?}",
                        enabled.join("; "),
                        keys.iter()
                            .zip(idx.iter().enumerate().map(|(k, &i)| &domains[k][i]))
                            .map(|(k, v)| format!("{k}={v:?}"))
                            .collect::<Vec<_>>()
                    ),
                ));
                break;
            }

            // Advance the odometer.
            let mut done = true;
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < domains[k].len() {
                    done = false;
                    break;
                }
                idx[k] = 0;
            }
            if done || keys.is_empty() {
                break;
            }
        }
    }
}

/// Result of evaluating one constraint against concrete values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintOutcome {
    pub holds: bool,
    /// Present iff the constraint is violated.
    pub message: Option<String>,
}

/// Evaluates a constraint under the given property values. Pure: the same
/// inputs always produce the same outcome.
pub fn eval_constraint(
    c: &Constraint,
    values: &BTreeMap<String, Literal>,
) -> Result<ConstraintOutcome, EvalError> {
    let env = EvalEnv {
        names: values.clone(),
        req: BTreeMap::new(),
        now: None,
    };
    match eval(&c.expr, &env)? {
        Literal::Bool(true) => Ok(ConstraintOutcome {
            holds: true,
            message: None,
        }),
        Literal::Bool(false) => Ok(ConstraintOutcome {
            holds: false,
            message: Some(c.message.clone()),
        }),
        other => Err(EvalError::TypeMismatch {
            op: "constraint",
            lhs: other.type_name(),
            rhs: "bool",
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expr::BinOp;

    fn tiny_model() -> DeviceModel {
        parse_model(
            "twinmodel 1\n\
             device probe version \"0.1.0\"\n\
             properties {\n  armed: bool = false\n}\n\
             states {\n  initial Off\n}\n",
        )
        .unwrap()
    }

    #[test]
    fn minimal_model_is_well_formed() {
        let m = tiny_model();
        assert_eq!(m.properties.len(), 1);
        assert_eq!(m.behavior.initial, "Off");
        assert!(m.behavior.transitions.is_empty());
        assert_eq!(check_model(&m), vec![]);
    }

    #[test]
    fn eval_constraint_reports_violation_message() {
        let c = Constraint {
            id: "cap".into(),
            expr: Expr::Binary(
                BinOp::Gt,
                Box::new(Expr::Name("roll_capacity".into())),
                Box::new(Expr::Lit(Literal::Int(0))),
            ),
            message: "roll capacity must be positive".into(),
        };
        let mut values = BTreeMap::new();
        values.insert("roll_capacity".to_string(), Literal::Int(28));
        let ok = eval_constraint(&c, &values).unwrap();
        assert!(ok.holds && ok.message.is_none());

        values.insert("roll_capacity".to_string(), Literal::Int(0));
        let bad = eval_constraint(&c, &values).unwrap();
        assert!(!bad.holds);
        assert_eq!(bad.message.as_deref(), Some("roll capacity must be positive"));
    }

    #[test]
    fn overlapping_true_guards_are_nondeterministic() {
        let mut m = tiny_model();
        m.api.push(EndpointDef {
            operation: "load_plan".into(),
            request: vec![],
            response: vec![],
        });
        let t = Transition {
            source: "Off".into(),
            target: "Off".into(),
            trigger: "load_plan".into(),
            guard: Some(Expr::Lit(Literal::Bool(true))),
            actions: vec![],
            notify: vec![],
            respond: OutcomeClass::Accepted,
        };
        m.behavior.transitions.push(t.clone());
        m.behavior.transitions.push(t);
        let diags = check_model(&m);
        assert!(
            diags.iter().any(|d| d.code == "nondeterminism"),
            "expected a nondeterminism diagnostic, got {diags:?}"
        );
    }

    #[test]
    fn dangling_constraint_reference_is_reported() {
        let mut m = tiny_model();
        m.constraints.push(Constraint {
            id: "ghost".into(),
            expr: Expr::Binary(
                BinOp::Gt,
                Box::new(Expr::Name("dose_cnt".into())),
                Box::new(Expr::Lit(Literal::Int(0))),
            ),
            message: "x".into(),
        });
        let diags = check_model(&m);
        assert!(diags
            .iter()
            .any(|d| d.code == "unknown-reference" && d.message.contains("dose_cnt")));
    }

    #[test]
    fn disjoint_bool_guards_pass() {
        let mut m = tiny_model();
        m.api.push(EndpointDef {
            operation: "arm".into(),
            request: vec![],
            response: vec![],
        });
        let guard = |b: bool| {
            let e = Expr::Name("armed".into());
            Some(if b { e } else { Expr::Not(Box::new(e)) })
        };
        for (g, target) in [(guard(true), "Off"), (guard(false), "Off")] {
            m.behavior.transitions.push(Transition {
                source: "Off".into(),
                target: target.into(),
                trigger: "arm".into(),
                guard: g,
                actions: vec![],
                notify: vec![],
                respond: OutcomeClass::Accepted,
            });
        }
        assert_eq!(check_model(&m), vec![]);
    }
}

//! Model-based digital twins.
//!
//! The pipeline follows four steps: take a checked [`DeviceModel`], bind
//! input property values and validate them against the constraints
//! ([`instantiate`]), attach the state machine ([`make_executable`]), and
//! execute requests against the running twin ([`ExecutableDT::step`]).
//!
//! A twin is single-writer: all steps on one twin are serialized by the
//! caller. Distinct twins are independent. Execution is fully
//! deterministic: the response sequence is a pure function of
//! (model, inputs, seed, request sequence).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::model::expr::{eval, EvalEnv};
use crate::model::value::{literal_from_json, literal_to_json, Literal, PropertyType};
use crate::model::{check_model, parse_model, Action, DeviceModel, Severity, Transition};
use crate::time::{TimeOfDay, VirtualTime, MS_PER_DAY, MS_PER_MINUTE};
use crate::wire::{reasons, DeviceEvent, DeviceRequest, DeviceResponse, OutcomeClass, TICK};

/// Default grace window for confirming an intake after dispensing.
pub const DEFAULT_GRACE_MS: u64 = 30 * MS_PER_MINUTE;

/// A validated binding of input values to a device model.
#[derive(Debug, Clone)]
pub struct InstanceModel {
    pub model: Arc<DeviceModel>,
    pub values: BTreeMap<String, Literal>,
    pub created_at: VirtualTime,
}

/// One violated constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstantiateError {
    #[error("model failed check: {0}")]
    ModelInvalid(String),
    #[error("unknown input field '{0}'")]
    UnknownField(String),
    #[error("invalid input field '{name}': {detail}")]
    InvalidField { name: String, detail: String },
    #[error("no value or default for property '{0}'")]
    MissingInput(String),
    #[error("{} constraint(s) violated", .0.len())]
    Violations(Vec<Violation>),
}

/// Binds inputs (JSON property values) to the model, fills defaults, and
/// evaluates every constraint. Succeeds iff all constraints hold.
pub fn instantiate(
    model: &Arc<DeviceModel>,
    inputs: &BTreeMap<String, Value>,
    now: VirtualTime,
) -> Result<InstanceModel, InstantiateError> {
    let diags = check_model(model);
    if diags.iter().any(|d| d.severity == Severity::Error) {
        return Err(InstantiateError::ModelInvalid(
            diags
                .iter()
                .map(|d| d.message.clone())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }

    for key in inputs.keys() {
        if model.property(key).is_none() {
            return Err(InstantiateError::UnknownField(key.clone()));
        }
    }

    let mut values = BTreeMap::new();
    for p in &model.properties {
        let value = match inputs.get(&p.name) {
            Some(raw) => literal_from_json(&p.ty, raw).map_err(|detail| {
                InstantiateError::InvalidField {
                    name: p.name.clone(),
                    detail,
                }
            })?,
            None => p
                .default
                .clone()
                .ok_or_else(|| InstantiateError::MissingInput(p.name.clone()))?,
        };
        values.insert(p.name.clone(), value);
    }

    let mut violations = Vec::new();
    for c in &model.constraints {
        match crate::model::eval_constraint(c, &values) {
            Ok(outcome) if !outcome.holds => violations.push(Violation {
                id: c.id.clone(),
                message: outcome.message.unwrap_or_default(),
            }),
            Ok(_) => {}
            Err(e) => {
                return Err(InstantiateError::ModelInvalid(format!(
                    "constraint '{}' failed to evaluate: {e}",
                    c.id
                )))
            }
        }
    }
    if !violations.is_empty() {
        return Err(InstantiateError::Violations(violations));
    }

    Ok(InstanceModel {
        model: Arc::clone(model),
        values,
        created_at: now,
    })
}

/// A medication plan: schedule plus roll sizing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationPlan {
    /// Midnight of the first plan day.
    pub start_date: VirtualTime,
    /// Strictly increasing times of day.
    pub dose_times: Vec<TimeOfDay>,
    pub doses_per_intake: i64,
    pub plan_days: i64,
    pub roll_total: i64,
}

impl MedicationPlan {
    /// Validates plan fields against the plan invariants and the device's
    /// roll capacity. Checks run in the documented order so both device
    /// implementations report the same detail.
    pub fn validate(
        start_date: VirtualTime,
        dose_times_csv: &str,
        doses_per_intake: i64,
        plan_days: i64,
        roll_total: i64,
        roll_capacity: i64,
    ) -> Result<MedicationPlan, &'static str> {
        if doses_per_intake < 1 {
            return Err(reasons::plan::DOSES_PER_INTAKE);
        }
        if plan_days < 1 {
            return Err(reasons::plan::PLAN_DAYS);
        }
        if roll_total < 1 {
            return Err(reasons::plan::ROLL_TOTAL);
        }
        let mut dose_times = Vec::new();
        for part in dose_times_csv.split(',') {
            let part = part.trim();
            if part.is_empty() {
                return Err(reasons::plan::DOSE_TIMES);
            }
            dose_times.push(TimeOfDay::parse(part).ok_or(reasons::plan::DOSE_TIMES)?);
        }
        if dose_times.is_empty() {
            return Err(reasons::plan::DOSE_TIMES);
        }
        if dose_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(reasons::plan::DOSE_TIMES_ORDER);
        }
        let needed = doses_per_intake
            .checked_mul(dose_times.len() as i64)
            .and_then(|n| n.checked_mul(plan_days))
            .ok_or(reasons::plan::OVERCOMMITTED)?;
        if needed > roll_total {
            return Err(reasons::plan::OVERCOMMITTED);
        }
        if roll_total > roll_capacity {
            return Err(reasons::plan::ROLL_TOO_LARGE);
        }
        Ok(MedicationPlan {
            start_date,
            dose_times,
            doses_per_intake,
            plan_days,
            roll_total,
        })
    }

    /// Scheduled dispense instants, day-major and time-minor (so
    /// simultaneous backlogs resolve earliest dose time first).
    pub fn dose_instants(&self) -> impl Iterator<Item = VirtualTime> + '_ {
        (0..self.plan_days as u64).flat_map(move |day| {
            self.dose_times
                .iter()
                .map(move |t| VirtualTime(self.start_date.0 + day * MS_PER_DAY + t.as_millis()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotStatus {
    /// The instant predates plan load; never dispensable.
    Skipped,
    Pending,
    /// Dispensed, awaiting intake confirmation.
    Dispensed(VirtualTime),
    /// Intake confirmed.
    Taken(VirtualTime),
    Missed(VirtualTime),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoseSlot {
    pub due_at: VirtualTime,
    pub status: SlotStatus,
}

/// Live bookkeeping for the loaded plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRuntime {
    pub plan: MedicationPlan,
    pub slots: Vec<DoseSlot>,
    pub roll_remaining: i64,
    pub dispensed_total: i64,
    /// Index of the slot awaiting confirmation, if any.
    pub pending_slot: Option<usize>,
}

impl PlanRuntime {
    pub fn load(plan: MedicationPlan, now: VirtualTime) -> PlanRuntime {
        let slots = plan
            .dose_instants()
            .map(|due_at| DoseSlot {
                due_at,
                status: if due_at < now {
                    SlotStatus::Skipped
                } else {
                    SlotStatus::Pending
                },
            })
            .collect();
        PlanRuntime {
            roll_remaining: plan.roll_total,
            dispensed_total: 0,
            pending_slot: None,
            plan,
            slots,
        }
    }

    fn first_pending(&self) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| s.status == SlotStatus::Pending)
    }

    pub fn dose_due(&self, now: VirtualTime) -> bool {
        self.pending_slot.is_none()
            && self.roll_remaining >= self.plan.doses_per_intake
            && self
                .first_pending()
                .is_some_and(|i| self.slots[i].due_at <= now)
    }

    pub fn grace_expired(&self, now: VirtualTime, grace_ms: u64) -> bool {
        self.pending_slot.is_some_and(|i| match self.slots[i].status {
            SlotStatus::Dispensed(at) => now.0 >= at.0 + grace_ms,
            _ => false,
        })
    }

    pub fn exhausted(&self) -> bool {
        self.pending_slot.is_none()
            && (self.first_pending().is_none() || self.roll_remaining < self.plan.doses_per_intake)
    }

    pub fn doses_remaining(&self) -> i64 {
        self.slots
            .iter()
            .filter(|s| s.status == SlotStatus::Pending)
            .count() as i64
    }

    pub fn next_due_at(&self) -> Option<VirtualTime> {
        self.first_pending().map(|i| self.slots[i].due_at)
    }

    fn dispense(&mut self, now: VirtualTime) {
        if let Some(i) = self.first_pending() {
            if self.slots[i].due_at <= now && self.roll_remaining >= self.plan.doses_per_intake {
                self.slots[i].status = SlotStatus::Dispensed(now);
                self.pending_slot = Some(i);
                self.roll_remaining -= self.plan.doses_per_intake;
                self.dispensed_total += self.plan.doses_per_intake;
            }
        }
    }

    fn confirm(&mut self, now: VirtualTime) {
        if let Some(i) = self.pending_slot.take() {
            self.slots[i].status = SlotStatus::Taken(now);
        }
    }

    fn miss(&mut self, now: VirtualTime) {
        if let Some(i) = self.pending_slot.take() {
            self.slots[i].status = SlotStatus::Missed(now);
        }
    }
}

/// One entry per processed request, in virtual-time order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at: VirtualTime,
    pub operation: String,
    pub status: OutcomeClass,
    pub notified: Vec<String>,
}

/// A running model-based twin.
#[derive(Debug, Clone)]
pub struct ExecutableDT {
    pub id: String,
    pub instance: InstanceModel,
    pub current_state: String,
    pub plan: Option<PlanRuntime>,
    pub event_log: Vec<LogEntry>,
    pub rng_seed: u64,
    pub grace_ms: u64,
    pub last_time: VirtualTime,
}

/// Derives a twin id from the instance content and seed. Equal
/// (instance, seed) pairs produce the same id; fleets use distinct seeds.
fn twin_id(inst: &InstanceModel, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(inst.model.name.as_bytes());
    hasher.update(inst.model.version.as_bytes());
    for (k, v) in &inst.values {
        hasher.update(k.as_bytes());
        hasher.update(serde_json::to_vec(v).unwrap());
    }
    hasher.update(seed.to_le_bytes());
    format!("dt-{}", hex::encode(&hasher.finalize()[..6]))
}

/// Attaches the state machine to a validated instance.
pub fn make_executable(inst: InstanceModel, seed: u64) -> ExecutableDT {
    ExecutableDT {
        id: twin_id(&inst, seed),
        current_state: inst.model.behavior.initial.clone(),
        last_time: inst.created_at,
        instance: inst,
        plan: None,
        event_log: Vec::new(),
        rng_seed: seed,
        grace_ms: DEFAULT_GRACE_MS,
    }
}

enum PayloadError {
    Unknown(String),
    Missing(String),
    Invalid(String),
}

impl ExecutableDT {
    pub fn model(&self) -> &DeviceModel {
        &self.instance.model
    }

    pub fn with_grace(mut self, grace_ms: u64) -> ExecutableDT {
        self.grace_ms = grace_ms;
        self
    }

    /// Processes one request at its carried virtual time. Exactly one log
    /// entry is appended per call.
    pub fn step(&mut self, req: &DeviceRequest) -> DeviceResponse {
        let now = req.virtual_now;
        if now < self.last_time {
            return self.finish_protocol_error(req, reasons::TIME_REGRESSION.to_string());
        }

        let op = req.operation.as_str();
        let endpoint = self.model().endpoint(op);
        if op != TICK && endpoint.is_none() {
            return self.finish_protocol_error(req, reasons::unknown_operation(op));
        }

        // Validate the payload against the declared request schema.
        let declared = endpoint.map(|e| e.request.clone()).unwrap_or_default();
        let typed = match validate_payload(&declared, &req.payload) {
            Ok(typed) => typed,
            Err(PayloadError::Unknown(f)) => {
                return self.finish_protocol_error(req, reasons::unknown_field(&f))
            }
            Err(PayloadError::Missing(f)) => {
                return self.finish_protocol_error(req, reasons::missing_field(&f))
            }
            Err(PayloadError::Invalid(f)) => {
                return self.finish_protocol_error(req, reasons::invalid_field(&f))
            }
        };

        // Semantic plan validation feeds the plan_valid guard binding.
        let plan_validation = if op == "load_plan" {
            Some(self.validate_plan(&typed))
        } else {
            None
        };

        let env = self.guard_env(now, &typed, &plan_validation);
        let transition = self
            .model()
            .behavior
            .transitions
            .iter()
            .filter(|t| t.source == self.current_state && t.trigger == op)
            .find(|t| match &t.guard {
                None => true,
                Some(g) => matches!(eval(g, &env), Ok(Literal::Bool(true))),
            })
            .cloned();

        let Some(transition) = transition else {
            let reason = reasons::rejected_in_state(&self.current_state, op);
            return self.finish(
                req,
                now,
                OutcomeClass::RejectedInState,
                None,
                vec![],
                Some(reason),
            );
        };

        let mut events = Vec::new();
        self.run_actions(&transition.actions, now, &typed, &plan_validation);
        for kind in &transition.notify {
            events.push(DeviceEvent {
                kind: kind.clone(),
                at: now,
            });
        }
        let target = transition.target.clone();
        let entry_actions = self
            .model()
            .state(&target)
            .map(|s| s.entry.clone())
            .unwrap_or_default();
        self.current_state = target;
        self.run_actions(&entry_actions, now, &typed, &plan_validation);

        let reason = match (&plan_validation, transition.respond) {
            (Some(Err(detail)), OutcomeClass::Error) => Some(reasons::invalid_plan(detail)),
            _ => None,
        };

        self.finish(req, now, transition.respond, Some(&transition), events, reason)
    }

    fn validate_plan(
        &self,
        typed: &BTreeMap<String, Literal>,
    ) -> Result<MedicationPlan, &'static str> {
        let start_date = match typed.get("start_date") {
            Some(Literal::Datetime(t)) => *t,
            _ => return Err(reasons::plan::DOSE_TIMES),
        };
        let dose_times = match typed.get("dose_times") {
            Some(Literal::Str(s)) => s.clone(),
            _ => return Err(reasons::plan::DOSE_TIMES),
        };
        let get_int = |name: &str| match typed.get(name) {
            Some(Literal::Int(i)) => Some(*i),
            _ => None,
        };
        let (Some(doses_per_intake), Some(plan_days), Some(roll_total)) = (
            get_int("doses_per_intake"),
            get_int("plan_days"),
            get_int("roll_total"),
        ) else {
            return Err(reasons::plan::DOSE_TIMES);
        };
        let roll_capacity = match self.instance.values.get("roll_capacity") {
            Some(Literal::Int(i)) => *i,
            _ => i64::MAX,
        };
        MedicationPlan::validate(
            start_date,
            &dose_times,
            doses_per_intake,
            plan_days,
            roll_total,
            roll_capacity,
        )
    }

    fn guard_env(
        &self,
        now: VirtualTime,
        typed: &BTreeMap<String, Literal>,
        plan_validation: &Option<Result<MedicationPlan, &'static str>>,
    ) -> EvalEnv {
        let mut names = self.instance.values.clone();
        let plan = self.plan.as_ref();
        names.insert(
            "plan_valid".into(),
            Literal::Bool(matches!(plan_validation, Some(Ok(_)))),
        );
        names.insert(
            "dose_due".into(),
            Literal::Bool(plan.is_some_and(|p| p.dose_due(now))),
        );
        names.insert(
            "grace_expired".into(),
            Literal::Bool(plan.is_some_and(|p| p.grace_expired(now, self.grace_ms))),
        );
        names.insert(
            "plan_exhausted".into(),
            Literal::Bool(plan.is_some_and(|p| p.exhausted())),
        );
        names.insert(
            "intake_pending".into(),
            Literal::Bool(plan.is_some_and(|p| p.pending_slot.is_some())),
        );
        names.insert(
            "roll_remaining".into(),
            Literal::Int(plan.map_or(0, |p| p.roll_remaining)),
        );
        names.insert(
            "doses_remaining".into(),
            Literal::Int(plan.map_or(0, |p| p.doses_remaining())),
        );
        names.insert(
            "next_due_at".into(),
            Literal::Datetime(plan.and_then(|p| p.next_due_at()).unwrap_or(VirtualTime(0))),
        );
        EvalEnv {
            names,
            req: typed.clone(),
            now: Some(now),
        }
    }

    fn run_actions(
        &mut self,
        actions: &[Action],
        now: VirtualTime,
        typed: &BTreeMap<String, Literal>,
        plan_validation: &Option<Result<MedicationPlan, &'static str>>,
    ) {
        for action in actions {
            match action {
                Action::Assign { prop, expr } => {
                    let env = self.guard_env(now, typed, plan_validation);
                    if let Ok(value) = eval(expr, &env) {
                        // Int-to-float widening mirrors the type checker.
                        let value = match (self.instance.model.property(prop), &value) {
                            (Some(p), Literal::Int(i)) if p.ty == PropertyType::Float => {
                                Literal::Float(*i as f64)
                            }
                            _ => value,
                        };
                        self.instance.values.insert(prop.clone(), value);
                    }
                }
                Action::PlanLoad => {
                    if let Some(Ok(plan)) = plan_validation {
                        self.plan = Some(PlanRuntime::load(plan.clone(), now));
                    }
                }
                Action::PlanDispense => {
                    if let Some(p) = self.plan.as_mut() {
                        p.dispense(now);
                    }
                }
                Action::PlanConfirm => {
                    if let Some(p) = self.plan.as_mut() {
                        p.confirm(now);
                    }
                }
                Action::PlanMiss => {
                    if let Some(p) = self.plan.as_mut() {
                        p.miss(now);
                    }
                }
                Action::PlanClear => {
                    self.plan = None;
                }
            }
        }
    }

    fn response_fields(&self, op: &str, fired: bool) -> BTreeMap<String, Value> {
        let mut fields = BTreeMap::new();
        if !fired {
            return fields;
        }
        let Some(endpoint) = self.model().endpoint(op) else {
            return fields;
        };
        for name in &endpoint.response {
            let value = if let Some(v) = self.instance.values.get(name) {
                literal_to_json(v)
            } else {
                match name.as_str() {
                    "roll_remaining" => {
                        Value::from(self.plan.as_ref().map_or(0, |p| p.roll_remaining))
                    }
                    "doses_remaining" => {
                        Value::from(self.plan.as_ref().map_or(0, |p| p.doses_remaining()))
                    }
                    "next_due_at" => Value::from(
                        self.plan
                            .as_ref()
                            .and_then(|p| p.next_due_at())
                            .unwrap_or(VirtualTime(0))
                            .0,
                    ),
                    "intake_pending" => Value::from(
                        self.plan
                            .as_ref()
                            .is_some_and(|p| p.pending_slot.is_some()),
                    ),
                    "plan_exhausted" => {
                        Value::from(self.plan.as_ref().is_some_and(|p| p.exhausted()))
                    }
                    _ => Value::Null,
                }
            };
            fields.insert(name.clone(), value);
        }
        fields
    }

    fn finish_protocol_error(&mut self, req: &DeviceRequest, reason: String) -> DeviceResponse {
        let at = std::cmp::max(req.virtual_now, self.last_time);
        self.finish(req, at, OutcomeClass::Error, None, vec![], Some(reason))
    }

    fn finish(
        &mut self,
        req: &DeviceRequest,
        now: VirtualTime,
        status: OutcomeClass,
        fired: Option<&Transition>,
        events: Vec<DeviceEvent>,
        reason: Option<String>,
    ) -> DeviceResponse {
        let fields = self.response_fields(&req.operation, fired.is_some());
        self.last_time = now;
        self.event_log.push(LogEntry {
            seq: req.seq,
            at: now,
            operation: req.operation.clone(),
            status,
            notified: events.iter().map(|e| e.kind.clone()).collect(),
        });
        DeviceResponse {
            seq: req.seq,
            operation: req.operation.clone(),
            status,
            state: Some(self.current_state.clone()),
            fields,
            events,
            reason,
        }
    }

    /// Digest of the observable twin state (excluding the event log).
    pub fn state_digest(&self) -> String {
        let doc = self.state_doc();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&doc).unwrap());
        hex::encode(&hasher.finalize()[..16])
    }

    fn state_doc(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "state": self.current_state,
            "values": self.instance.values,
            "plan": self.plan,
            "last_time": self.last_time,
            "grace_ms": self.grace_ms,
            "seed": self.rng_seed,
        })
    }
}

fn validate_payload(
    declared: &[crate::model::FieldDef],
    payload: &BTreeMap<String, Value>,
) -> Result<BTreeMap<String, Literal>, PayloadError> {
    for key in payload.keys() {
        if !declared.iter().any(|f| f.name == *key) {
            return Err(PayloadError::Unknown(key.clone()));
        }
    }
    let mut typed = BTreeMap::new();
    for f in declared {
        let raw = payload
            .get(&f.name)
            .ok_or_else(|| PayloadError::Missing(f.name.clone()))?;
        let lit =
            literal_from_json(&f.ty, raw).map_err(|_| PayloadError::Invalid(f.name.clone()))?;
        typed.insert(f.name.clone(), lit);
    }
    Ok(typed)
}

// ---------------------------------------------------------------------------
// Snapshot persistence
// ---------------------------------------------------------------------------

pub const SNAPSHOT_FORMAT: &str = "twinforge-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotDoc {
    format: String,
    version: u32,
    sha256: String,
    twin: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TwinDoc {
    id: String,
    model_source: String,
    values: BTreeMap<String, Literal>,
    current_state: String,
    plan: Option<PlanRuntime>,
    event_log: Vec<LogEntry>,
    rng_seed: u64,
    grace_ms: u64,
    last_time: VirtualTime,
    created_at: VirtualTime,
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
    #[error("snapshot integrity check failed")]
    Integrity,
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("embedded model failed to parse: {0}")]
    Model(String),
}

fn twin_sha(twin: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(twin).unwrap());
    hex::encode(hasher.finalize())
}

/// Serializes the full twin (including its model, as source text) into a
/// self-describing, integrity-checked JSON document.
pub fn snapshot(dt: &ExecutableDT) -> Vec<u8> {
    let twin = serde_json::to_value(TwinDoc {
        id: dt.id.clone(),
        model_source: crate::model::print_model(dt.model()),
        values: dt.instance.values.clone(),
        current_state: dt.current_state.clone(),
        plan: dt.plan.clone(),
        event_log: dt.event_log.clone(),
        rng_seed: dt.rng_seed,
        grace_ms: dt.grace_ms,
        last_time: dt.last_time,
        created_at: dt.instance.created_at,
    })
    .expect("twin serializes");
    let doc = SnapshotDoc {
        format: SNAPSHOT_FORMAT.to_string(),
        version: SNAPSHOT_VERSION,
        sha256: twin_sha(&twin),
        twin,
    };
    serde_json::to_vec_pretty(&doc).expect("snapshot serializes")
}

/// Restores a twin from snapshot bytes. The restored twin behaves
/// identically to the original for all subsequent request sequences.
pub fn restore(bytes: &[u8]) -> Result<ExecutableDT, SnapshotError> {
    let doc: SnapshotDoc =
        serde_json::from_slice(bytes).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    if doc.format != SNAPSHOT_FORMAT {
        return Err(SnapshotError::Corrupt(format!(
            "unexpected format '{}'",
            doc.format
        )));
    }
    if doc.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version(doc.version));
    }
    if twin_sha(&doc.twin) != doc.sha256 {
        return Err(SnapshotError::Integrity);
    }
    let twin: TwinDoc =
        serde_json::from_value(doc.twin).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    let model =
        parse_model(&twin.model_source).map_err(|e| SnapshotError::Model(e.to_string()))?;
    Ok(ExecutableDT {
        id: twin.id,
        instance: InstanceModel {
            model: Arc::new(model),
            values: twin.values,
            created_at: twin.created_at,
        },
        current_state: twin.current_state,
        plan: twin.plan,
        event_log: twin.event_log,
        rng_seed: twin.rng_seed,
        grace_ms: twin.grace_ms,
        last_time: twin.last_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    pub fn medido_model() -> Arc<DeviceModel> {
        let src = include_str!("../examples/medido.twinmodel");
        Arc::new(parse_model(src).unwrap())
    }

    fn inputs(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn t(s: &str) -> VirtualTime {
        VirtualTime::parse(s).unwrap()
    }

    fn plan_payload(
        start: &str,
        times: &str,
        per_intake: i64,
        days: i64,
        roll: i64,
    ) -> BTreeMap<String, Value> {
        inputs(&[
            ("start_date", json!(start)),
            ("dose_times", json!(times)),
            ("doses_per_intake", json!(per_intake)),
            ("plan_days", json!(days)),
            ("roll_total", json!(roll)),
        ])
    }

    fn request(
        seq: u64,
        op: &str,
        now: VirtualTime,
        payload: BTreeMap<String, Value>,
    ) -> DeviceRequest {
        DeviceRequest {
            seq,
            operation: op.to_string(),
            virtual_now: now,
            payload,
        }
    }

    #[test]
    fn golden_model_checks_clean() {
        let model = medido_model();
        assert_eq!(model.behavior.states.len(), 5);
        assert_eq!(check_model(&model), vec![]);
    }

    #[test]
    fn instantiate_applies_defaults_and_validates() {
        let model = medido_model();
        let inst = instantiate(
            &model,
            &inputs(&[
                ("language", json!("no")),
                ("alarm_volume", json!("medium")),
                ("roll_capacity", json!(28)),
            ]),
            t("2026-01-01"),
        )
        .unwrap();
        assert_eq!(inst.values.get("plan_days"), Some(&Literal::Int(14)));

        // 3 doses/day for 10 days into a 28-slot roll: 30 > 28.
        let err = instantiate(
            &model,
            &inputs(&[
                ("doses_per_day", json!(3)),
                ("plan_days", json!(10)),
                ("roll_capacity", json!(28)),
            ]),
            t("2026-01-01"),
        )
        .unwrap_err();
        match err {
            InstantiateError::Violations(v) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].id, "plan_fits_roll");
            }
            other => panic!("unexpected error {other:?}"),
        }

        let err = instantiate(&model, &inputs(&[("colour", json!("red"))]), t("2026-01-01"))
            .unwrap_err();
        assert_eq!(err, InstantiateError::UnknownField("colour".into()));
    }

    #[test]
    fn make_executable_is_deterministic_with_distinct_ids_per_seed() {
        let model = medido_model();
        let inst = instantiate(&model, &inputs(&[]), t("2026-01-01")).unwrap();
        let a = make_executable(inst.clone(), 7);
        let b = make_executable(inst.clone(), 7);
        assert_eq!(a.id, b.id);
        assert_eq!(a.current_state, "Idle");
        assert_eq!(a.state_digest(), b.state_digest());

        let ids: std::collections::BTreeSet<String> = (0..100)
            .map(|i| make_executable(inst.clone(), i).id)
            .collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn golden_plan_scenario_reaches_dispensed() {
        let model = medido_model();
        let inst = instantiate(&model, &inputs(&[]), t("2026-01-01")).unwrap();
        let mut dt = make_executable(inst, 42);

        // Load a 2-dose/day plan starting today.
        let r = dt.step(&request(
            1,
            "load_plan",
            t("2026-01-01T07:00"),
            plan_payload("2026-01-01", "08:00,20:00", 1, 14, 28),
        ));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("PlanLoaded"));
        assert_eq!(r.fields["roll_remaining"], json!(28));
        assert_eq!(r.fields["doses_remaining"], json!(28));

        // Tick before the dose: accepted, no dispense.
        let r = dt.step(&DeviceRequest::tick(2, t("2026-01-01T07:30")));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("PlanLoaded"));

        // Tick at the dose time: dispense.
        let r = dt.step(&DeviceRequest::tick(3, t("2026-01-01T08:00")));
        assert_eq!(r.status, OutcomeClass::Dispensed);
        assert_eq!(r.state.as_deref(), Some("DispenseDue"));
        assert_eq!(r.fields["roll_remaining"], json!(27));

        // Confirm within the grace window.
        let r = dt.step(&request(
            4,
            "confirm_intake",
            t("2026-01-01T08:10"),
            inputs(&[]),
        ));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("Dispensed"));

        // Next tick settles back into PlanLoaded.
        let r = dt.step(&DeviceRequest::tick(5, t("2026-01-01T08:30")));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("PlanLoaded"));

        let plan = dt.plan.as_ref().unwrap();
        assert_eq!(plan.dispensed_total + plan.roll_remaining, 28);
    }

    #[test]
    fn missed_dose_notifies_after_grace_window() {
        let model = medido_model();
        let inst = instantiate(&model, &inputs(&[]), t("2026-01-01")).unwrap();
        let mut dt = make_executable(inst, 42);

        dt.step(&request(
            1,
            "load_plan",
            t("2026-01-01T07:00"),
            plan_payload("2026-01-01", "08:00", 1, 7, 28),
        ));
        let r = dt.step(&DeviceRequest::tick(2, t("2026-01-01T08:00")));
        assert_eq!(r.status, OutcomeClass::Dispensed);

        // Within grace: still waiting.
        let r = dt.step(&DeviceRequest::tick(3, t("2026-01-01T08:29")));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("DispenseDue"));

        // Grace expired (default 30 virtual minutes): missed-dose event.
        let r = dt.step(&DeviceRequest::tick(4, t("2026-01-01T08:30")));
        assert_eq!(r.status, OutcomeClass::MissedNotify);
        assert_eq!(r.state.as_deref(), Some("Missed"));
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.events[0].kind, "missed_dose");

        // A late confirm is rejected in Missed.
        let r = dt.step(&request(
            5,
            "confirm_intake",
            t("2026-01-01T08:31"),
            inputs(&[]),
        ));
        assert_eq!(r.status, OutcomeClass::RejectedInState);
        assert!(r.reason.as_deref().unwrap().contains("confirm_intake"));
    }

    #[test]
    fn invalid_plan_and_unknown_operation_are_errors_not_crashes() {
        let model = medido_model();
        let inst = instantiate(&model, &inputs(&[]), t("2026-01-01")).unwrap();
        let mut dt = make_executable(inst, 1);

        // 2 doses/day x 20 days = 40 > 28 roll_total.
        let r = dt.step(&request(
            1,
            "load_plan",
            t("2026-01-01T07:00"),
            plan_payload("2026-01-01", "08:00,20:00", 1, 20, 28),
        ));
        assert_eq!(r.status, OutcomeClass::Error);
        assert!(r
            .reason
            .as_deref()
            .unwrap()
            .contains(reasons::plan::OVERCOMMITTED));
        assert_eq!(r.state.as_deref(), Some("Idle"));

        let r = dt.step(&request(2, "reboot", t("2026-01-01T07:01"), inputs(&[])));
        assert_eq!(r.status, OutcomeClass::Error);
        assert_eq!(r.reason, Some(reasons::unknown_operation("reboot")));

        // Roll larger than the device capacity.
        let r = dt.step(&request(
            3,
            "load_plan",
            t("2026-01-01T07:02"),
            plan_payload("2026-01-01", "08:00", 1, 7, 50),
        ));
        assert_eq!(r.status, OutcomeClass::Error);
        assert!(r
            .reason
            .as_deref()
            .unwrap()
            .contains(reasons::plan::ROLL_TOO_LARGE));
    }

    #[test]
    fn snapshot_restore_round_trips_behavior() {
        let model = medido_model();
        let inst = instantiate(&model, &inputs(&[]), t("2026-01-01")).unwrap();
        let mut dt = make_executable(inst, 9);
        dt.step(&request(
            1,
            "load_plan",
            t("2026-01-01T07:00"),
            plan_payload("2026-01-01", "08:00,20:00", 1, 14, 28),
        ));
        dt.step(&DeviceRequest::tick(2, t("2026-01-01T08:00")));

        let bytes = snapshot(&dt);
        let mut restored = restore(&bytes).unwrap();
        assert_eq!(restored.state_digest(), dt.state_digest());
        assert_eq!(restored.event_log.len(), 2);

        // Subsequent steps agree bit for bit.
        let next = request(3, "confirm_intake", t("2026-01-01T08:05"), inputs(&[]));
        assert_eq!(
            dt.step(&next).canonical_json(),
            restored.step(&next).canonical_json()
        );

        // Corruption is detected.
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() / 2);
        assert!(matches!(restore(&truncated), Err(SnapshotError::Corrupt(_))));
        let tampered = String::from_utf8(bytes)
            .unwrap()
            .replace("\"current_state\": \"DispenseDue\"", "\"current_state\": \"Idle\"");
        assert!(matches!(
            restore(tampered.as_bytes()),
            Err(SnapshotError::Integrity)
        ));
    }

    #[test]
    fn time_regression_is_rejected() {
        let model = medido_model();
        let inst = instantiate(&model, &inputs(&[]), t("2026-01-01")).unwrap();
        let mut dt = make_executable(inst, 1);
        dt.step(&DeviceRequest::tick(1, t("2026-01-02")));
        let r = dt.step(&DeviceRequest::tick(2, t("2026-01-01")));
        assert_eq!(r.status, OutcomeClass::Error);
        assert_eq!(r.reason.as_deref(), Some(reasons::TIME_REGRESSION));
        // Log stays monotone.
        assert!(dt.event_log.windows(2).all(|w| w[0].at <= w[1].at));
    }
}

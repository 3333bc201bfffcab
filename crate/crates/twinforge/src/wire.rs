//! Wire types shared by twins, the reference device, the server, and the
//! harness. JSON is the interchange format everywhere.
//!
//! The reference emulator and the model-based twin implement the dispenser
//! semantics independently, but they must speak the same protocol down to
//! the byte: status strings, rejection reasons, and field ordering are all
//! defined here so that equivalent behavior serializes identically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::time::VirtualTime;

/// Outcome classes a device API can produce. This is also the label set
/// for the ML twin's classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeClass {
    #[serde(rename = "rejected-in-state")]
    RejectedInState,
    #[serde(rename = "dispensed")]
    Dispensed,
    #[serde(rename = "accepted")]
    Accepted,
    #[serde(rename = "missed-notify")]
    MissedNotify,
    #[serde(rename = "error")]
    Error,
}

/// All outcome classes, in scalar order.
///
/// The order doubles as the numeric encoding used by the statistical
/// tests. `Accepted` — the nominal outcome of a healthy campaign — sits
/// mid-scale so that outcome perturbations have headroom in both
/// directions.
pub const OUTCOME_CLASSES: [OutcomeClass; 5] = [
    OutcomeClass::RejectedInState,
    OutcomeClass::Dispensed,
    OutcomeClass::Accepted,
    OutcomeClass::MissedNotify,
    OutcomeClass::Error,
];

impl OutcomeClass {
    pub fn scalar_index(self) -> usize {
        OUTCOME_CLASSES.iter().position(|c| *c == self).unwrap()
    }

    pub fn from_scalar_index(i: usize) -> Option<OutcomeClass> {
        OUTCOME_CLASSES.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeClass::RejectedInState => "rejected-in-state",
            OutcomeClass::Dispensed => "dispensed",
            OutcomeClass::Accepted => "accepted",
            OutcomeClass::MissedNotify => "missed-notify",
            OutcomeClass::Error => "error",
        }
    }

    pub fn from_str(s: &str) -> Option<OutcomeClass> {
        OUTCOME_CLASSES.iter().copied().find(|c| c.as_str() == s)
    }
}

/// A request addressed to a device (twin or physical stand-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRequest {
    /// Sequence number assigned by the sender; echoed in the response.
    pub seq: u64,
    /// Declared API operation, or the reserved `tick` timer event.
    pub operation: String,
    /// Virtual timestamp of the request.
    pub virtual_now: VirtualTime,
    /// Operation payload fields.
    #[serde(default)]
    pub payload: BTreeMap<String, Value>,
}

/// The reserved timer trigger.
pub const TICK: &str = "tick";

impl DeviceRequest {
    pub fn tick(seq: u64, now: VirtualTime) -> DeviceRequest {
        DeviceRequest {
            seq,
            operation: TICK.to_string(),
            virtual_now: now,
            payload: BTreeMap::new(),
        }
    }
}

/// A notification emitted while processing a request (for example a
/// missed-dose alert destined for a caretaker).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub kind: String,
    pub at: VirtualTime,
}

/// The device's answer to a single request.
///
/// Field order and content are part of the protocol: two implementations
/// that behave identically must serialize identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResponse {
    pub seq: u64,
    pub operation: String,
    pub status: OutcomeClass,
    /// Device state after processing. ML twins do not track state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    /// Declared response fields (or class probabilities for ML twins).
    pub fields: BTreeMap<String, Value>,
    /// Notifications emitted during this step.
    pub events: Vec<DeviceEvent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl DeviceResponse {
    /// Canonical JSON encoding used for trace files and byte-level
    /// comparison. Struct field order plus `BTreeMap` keys make this
    /// deterministic.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

/// Rejection/error reason strings. Shared so independent device
/// implementations agree byte-for-byte.
pub mod reasons {
    pub fn unknown_operation(op: &str) -> String {
        format!("unknown operation '{op}'")
    }

    pub fn rejected_in_state(state: &str, op: &str) -> String {
        format!("operation '{op}' not enabled in state {state}")
    }

    pub fn invalid_field(field: &str) -> String {
        format!("invalid request field '{field}'")
    }

    pub fn missing_field(field: &str) -> String {
        format!("missing request field '{field}'")
    }

    pub fn invalid_plan(detail: &str) -> String {
        format!("invalid medication plan: {detail}")
    }

    pub fn unknown_field(field: &str) -> String {
        format!("unknown request field '{field}'")
    }

    pub const TIME_REGRESSION: &str = "virtual time regression";

    /// Medication-plan validation details, in the order the checks run:
    /// doses_per_intake, plan_days, roll_total, dose_times syntax,
    /// dose_times ordering, roll overcommit, device capacity.
    pub mod plan {
        pub const DOSES_PER_INTAKE: &str = "doses_per_intake must be positive";
        pub const PLAN_DAYS: &str = "plan_days must be positive";
        pub const ROLL_TOTAL: &str = "roll_total must be positive";
        pub const DOSE_TIMES: &str =
            "dose_times must be a non-empty comma-separated list of HH:MM times";
        pub const DOSE_TIMES_ORDER: &str = "dose times must be strictly increasing within a day";
        pub const OVERCOMMITTED: &str = "planned doses exceed the loaded roll";
        pub const ROLL_TOO_LARGE: &str = "roll does not fit the device";
    }
}

/// Standard error body returned by the HTTP servers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Vec<String>,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> ErrorBody {
        ErrorBody {
            code: code.to_string(),
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn with_details(mut self, details: Vec<String>) -> ErrorBody {
        self.details = details;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_scalar_order_round_trips() {
        for (i, c) in OUTCOME_CLASSES.iter().enumerate() {
            assert_eq!(c.scalar_index(), i);
            assert_eq!(OutcomeClass::from_scalar_index(i), Some(*c));
            assert_eq!(OutcomeClass::from_str(c.as_str()), Some(*c));
        }
        assert_eq!(OutcomeClass::Accepted.scalar_index(), 2);
    }

    #[test]
    fn response_serialization_is_stable() {
        let mut fields = BTreeMap::new();
        fields.insert("roll_remaining".to_string(), Value::from(26));
        fields.insert("doses_remaining".to_string(), Value::from(13));
        let resp = DeviceResponse {
            seq: 7,
            operation: "tick".to_string(),
            status: OutcomeClass::Dispensed,
            state: Some("DispenseDue".to_string()),
            fields,
            events: vec![],
            reason: None,
        };
        assert_eq!(
            resp.canonical_json(),
            "{\"seq\":7,\"operation\":\"tick\",\"status\":\"dispensed\",\
             \"state\":\"DispenseDue\",\"fields\":{\"doses_remaining\":13,\
             \"roll_remaining\":26},\"events\":[]}"
        );
        let back: DeviceResponse = serde_json::from_str(&resp.canonical_json()).unwrap();
        assert_eq!(back, resp);
    }
}

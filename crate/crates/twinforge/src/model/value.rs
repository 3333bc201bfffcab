//! Literal values and property types for the modeling language.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::time::{self, VirtualTime};

/// Type of a device property or request field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "values")]
pub enum PropertyType {
    Int,
    Float,
    Bool,
    Str,
    Enum(Vec<String>),
    Datetime,
    Duration,
}

impl PropertyType {
    pub fn name(&self) -> &'static str {
        match self {
            PropertyType::Int => "int",
            PropertyType::Float => "float",
            PropertyType::Bool => "bool",
            PropertyType::Str => "string",
            PropertyType::Enum(_) => "enum",
            PropertyType::Datetime => "datetime",
            PropertyType::Duration => "duration",
        }
    }
}

/// A runtime value. Enum values are carried as strings; their domain is
/// enforced where the enum type is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Literal {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    Datetime(VirtualTime),
    Duration(u64),
}

impl Literal {
    pub fn type_name(&self) -> &'static str {
        match self {
            Literal::Int(_) => "int",
            Literal::Float(_) => "float",
            Literal::Bool(_) => "bool",
            Literal::Str(_) => "string",
            Literal::Datetime(_) => "datetime",
            Literal::Duration(_) => "duration",
        }
    }

    /// Checks that the value inhabits the given type.
    pub fn conforms_to(&self, ty: &PropertyType) -> bool {
        match (self, ty) {
            (Literal::Int(_), PropertyType::Int) => true,
            (Literal::Float(_), PropertyType::Float) => true,
            (Literal::Int(_), PropertyType::Float) => true,
            (Literal::Bool(_), PropertyType::Bool) => true,
            (Literal::Str(_), PropertyType::Str) => true,
            (Literal::Str(s), PropertyType::Enum(domain)) => domain.iter().any(|v| v == s),
            (Literal::Datetime(_), PropertyType::Datetime) => true,
            (Literal::Duration(_), PropertyType::Duration) => true,
            _ => false,
        }
    }
}

/// Converts a JSON payload value to a typed literal.
pub fn literal_from_json(ty: &PropertyType, value: &Value) -> Result<Literal, String> {
    match ty {
        PropertyType::Int => value
            .as_i64()
            .map(Literal::Int)
            .ok_or_else(|| format!("expected integer, got {value}")),
        PropertyType::Float => value
            .as_f64()
            .map(Literal::Float)
            .ok_or_else(|| format!("expected number, got {value}")),
        PropertyType::Bool => value
            .as_bool()
            .map(Literal::Bool)
            .ok_or_else(|| format!("expected boolean, got {value}")),
        PropertyType::Str => value
            .as_str()
            .map(|s| Literal::Str(s.to_string()))
            .ok_or_else(|| format!("expected string, got {value}")),
        PropertyType::Enum(domain) => {
            let s = value
                .as_str()
                .ok_or_else(|| format!("expected one of {domain:?}, got {value}"))?;
            if domain.iter().any(|v| v == s) {
                Ok(Literal::Str(s.to_string()))
            } else {
                Err(format!("'{s}' is not one of {domain:?}"))
            }
        }
        PropertyType::Datetime => {
            if let Some(ms) = value.as_u64() {
                return Ok(Literal::Datetime(VirtualTime(ms)));
            }
            let s = value
                .as_str()
                .ok_or_else(|| format!("expected datetime string, got {value}"))?;
            VirtualTime::parse(s)
                .map(Literal::Datetime)
                .ok_or_else(|| format!("'{s}' is not a datetime"))
        }
        PropertyType::Duration => {
            if let Some(ms) = value.as_u64() {
                return Ok(Literal::Duration(ms));
            }
            let s = value
                .as_str()
                .ok_or_else(|| format!("expected duration string, got {value}"))?;
            time::parse_duration_ms(s)
                .map(Literal::Duration)
                .ok_or_else(|| format!("'{s}' is not a duration"))
        }
    }
}

pub fn literal_to_json(lit: &Literal) -> Value {
    match lit {
        Literal::Int(i) => Value::from(*i),
        Literal::Float(f) => Value::from(*f),
        Literal::Bool(b) => Value::from(*b),
        Literal::Str(s) => Value::from(s.clone()),
        Literal::Datetime(t) => Value::from(t.format()),
        Literal::Duration(ms) => Value::from(time::format_duration_ms(*ms)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn json_conversion_respects_types() {
        let enum_ty = PropertyType::Enum(vec!["low".into(), "medium".into(), "high".into()]);
        assert_eq!(
            literal_from_json(&enum_ty, &json!("medium")),
            Ok(Literal::Str("medium".into()))
        );
        assert!(literal_from_json(&enum_ty, &json!("mute")).is_err());
        assert!(literal_from_json(&PropertyType::Int, &json!(2.5)).is_err());
        assert_eq!(
            literal_from_json(&PropertyType::Datetime, &json!("2026-01-01")),
            Ok(Literal::Datetime(VirtualTime::parse("2026-01-01").unwrap()))
        );
    }

    #[test]
    fn conformance_covers_enum_domains() {
        let enum_ty = PropertyType::Enum(vec!["no".into(), "en".into()]);
        assert!(Literal::Str("no".into()).conforms_to(&enum_ty));
        assert!(!Literal::Str("de".into()).conforms_to(&enum_ty));
        assert!(Literal::Int(3).conforms_to(&PropertyType::Float));
        assert!(!Literal::Float(3.0).conforms_to(&PropertyType::Int));
    }
}

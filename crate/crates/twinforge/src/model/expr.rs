//! Boolean/arithmetic expression language used by constraints and
//! state-machine guards.
//!
//! Expressions are closed over declared properties, the request fields of
//! the triggering operation (`req.field`), the virtual clock (`now`), and
//! the engine's plan bindings. Type checking happens once per model, after
//! which evaluation cannot hit reference or type errors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::value::{Literal, PropertyType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
    Implies,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Implies => "implies",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Lit(Literal),
    /// A property or engine binding.
    Name(String),
    /// A field of the triggering request (`req.field`).
    ReqField(String),
    /// The virtual clock.
    Now,
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// Membership in a literal set.
    In(Box<Expr>, Vec<Literal>),
}

/// Scalar type used during checking. Enum domains are tracked so bare
/// identifiers can be resolved to enum literals.
#[derive(Debug, Clone, PartialEq)]
pub enum Ty {
    Int,
    Float,
    Bool,
    Str,
    Enum(Vec<String>),
    Datetime,
    Duration,
}

impl Ty {
    pub fn of(ty: &PropertyType) -> Ty {
        match ty {
            PropertyType::Int => Ty::Int,
            PropertyType::Float => Ty::Float,
            PropertyType::Bool => Ty::Bool,
            PropertyType::Str => Ty::Str,
            PropertyType::Enum(d) => Ty::Enum(d.clone()),
            PropertyType::Datetime => Ty::Datetime,
            PropertyType::Duration => Ty::Duration,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Ty::Int => "int",
            Ty::Float => "float",
            Ty::Bool => "bool",
            Ty::Str => "string",
            Ty::Enum(_) => "enum",
            Ty::Datetime => "datetime",
            Ty::Duration => "duration",
        }
    }

    fn is_numeric(&self) -> bool {
        matches!(self, Ty::Int | Ty::Float)
    }

    fn is_textual(&self) -> bool {
        matches!(self, Ty::Str | Ty::Enum(_))
    }
}

/// Name resolution environment for type checking.
pub trait TypeEnv {
    fn name_type(&self, name: &str) -> Option<Ty>;
    fn req_field_type(&self, name: &str) -> Option<Ty>;
    /// Whether `now` is available (false inside constraints).
    fn clock_available(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("unknown reference '{0}'")]
    UnknownName(String),
    #[error("unknown request field '{0}'")]
    UnknownReqField(String),
    #[error("'now' is not available in this context")]
    ClockUnavailable,
    #[error("type mismatch: {0}")]
    Type(String),
}

/// Type-checks `expr`, resolving bare identifiers that name enum values.
/// Returns the expression's type.
pub fn type_check(expr: &mut Expr, env: &dyn TypeEnv) -> Result<Ty, ExprError> {
    check_with_hint(expr, env, None)
}

fn check_with_hint(expr: &mut Expr, env: &dyn TypeEnv, hint: Option<&Ty>) -> Result<Ty, ExprError> {
    match expr {
        Expr::Lit(lit) => Ok(literal_ty(lit)),
        Expr::Name(name) => {
            if let Some(ty) = env.name_type(name) {
                return Ok(ty);
            }
            // A bare identifier compared against an enum resolves to one of
            // the enum's values.
            if let Some(Ty::Enum(domain)) = hint {
                if domain.iter().any(|v| v == name) {
                    let lit = Literal::Str(name.clone());
                    *expr = Expr::Lit(lit);
                    return Ok(Ty::Enum(domain.clone()));
                }
            }
            Err(ExprError::UnknownName(name.clone()))
        }
        Expr::ReqField(name) => env
            .req_field_type(name)
            .ok_or_else(|| ExprError::UnknownReqField(name.clone())),
        Expr::Now => {
            if env.clock_available() {
                Ok(Ty::Datetime)
            } else {
                Err(ExprError::ClockUnavailable)
            }
        }
        Expr::Not(inner) => {
            let ty = check_with_hint(inner, env, Some(&Ty::Bool))?;
            if ty == Ty::Bool {
                Ok(Ty::Bool)
            } else {
                Err(ExprError::Type(format!("'not' needs bool, got {}", ty.name())))
            }
        }
        Expr::Neg(inner) => {
            let ty = check_with_hint(inner, env, None)?;
            if ty.is_numeric() {
                Ok(ty)
            } else {
                Err(ExprError::Type(format!(
                    "negation needs a number, got {}",
                    ty.name()
                )))
            }
        }
        Expr::Binary(op, lhs, rhs) => {
            match op {
                BinOp::And | BinOp::Or | BinOp::Implies => {
                    for side in [lhs, rhs] {
                        let ty = check_with_hint(side, env, Some(&Ty::Bool))?;
                        if ty != Ty::Bool {
                            return Err(ExprError::Type(format!(
                                "'{}' needs bool operands, got {}",
                                op.symbol(),
                                ty.name()
                            )));
                        }
                    }
                    Ok(Ty::Bool)
                }
                BinOp::Eq | BinOp::Ne => {
                    let lt = check_with_hint(lhs, env, None);
                    // Resolve enum literals on either side.
                    let (lt, rt) = match lt {
                        Ok(lt) => {
                            let rt = check_with_hint(rhs, env, Some(&lt))?;
                            (lt, rt)
                        }
                        Err(ExprError::UnknownName(_)) => {
                            let rt = check_with_hint(rhs, env, None)?;
                            let lt = check_with_hint(lhs, env, Some(&rt))?;
                            (lt, rt)
                        }
                        Err(e) => return Err(e),
                    };
                    if comparable(&lt, &rt) {
                        Ok(Ty::Bool)
                    } else {
                        Err(ExprError::Type(format!(
                            "cannot compare {} with {}",
                            lt.name(),
                            rt.name()
                        )))
                    }
                }
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    let lt = check_with_hint(lhs, env, None)?;
                    let rt = check_with_hint(rhs, env, Some(&lt))?;
                    let ordered = (lt.is_numeric() && rt.is_numeric())
                        || (lt == Ty::Datetime && rt == Ty::Datetime)
                        || (lt == Ty::Duration && rt == Ty::Duration);
                    if ordered {
                        Ok(Ty::Bool)
                    } else {
                        Err(ExprError::Type(format!(
                            "cannot order {} with {}",
                            lt.name(),
                            rt.name()
                        )))
                    }
                }
                BinOp::Add | BinOp::Sub => {
                    let op = *op;
                    let lt = check_with_hint(lhs, env, None)?;
                    let rt = check_with_hint(rhs, env, None)?;
                    match (&lt, &rt, op) {
                        (l, r, _) if l.is_numeric() && r.is_numeric() => {
                            Ok(if lt == Ty::Float || rt == Ty::Float {
                                Ty::Float
                            } else {
                                Ty::Int
                            })
                        }
                        (Ty::Datetime, Ty::Duration, _) => Ok(Ty::Datetime),
                        (Ty::Datetime, Ty::Datetime, BinOp::Sub) => Ok(Ty::Duration),
                        (Ty::Duration, Ty::Duration, _) => Ok(Ty::Duration),
                        _ => Err(ExprError::Type(format!(
                            "cannot apply '{}' to {} and {}",
                            op.symbol(),
                            lt.name(),
                            rt.name()
                        ))),
                    }
                }
                BinOp::Mul | BinOp::Div | BinOp::Rem => {
                    let lt = check_with_hint(lhs, env, None)?;
                    let rt = check_with_hint(rhs, env, None)?;
                    if lt.is_numeric() && rt.is_numeric() {
                        Ok(if lt == Ty::Float || rt == Ty::Float {
                            Ty::Float
                        } else {
                            Ty::Int
                        })
                    } else {
                        Err(ExprError::Type(format!(
                            "cannot apply '{}' to {} and {}",
                            op.symbol(),
                            lt.name(),
                            rt.name()
                        )))
                    }
                }
            }
        }
        Expr::In(inner, set) => {
            let ty = check_with_hint(inner, env, None)?;
            if set.is_empty() {
                return Err(ExprError::Type("membership set is empty".to_string()));
            }
            for lit in set.iter() {
                let lt = literal_ty(lit);
                let ok = if ty.is_textual() {
                    lt.is_textual()
                } else {
                    comparable(&ty, &lt)
                };
                if !ok {
                    return Err(ExprError::Type(format!(
                        "set element {} does not match {}",
                        lt.name(),
                        ty.name()
                    )));
                }
            }
            Ok(Ty::Bool)
        }
    }
}

fn literal_ty(lit: &Literal) -> Ty {
    match lit {
        Literal::Int(_) => Ty::Int,
        Literal::Float(_) => Ty::Float,
        Literal::Bool(_) => Ty::Bool,
        Literal::Str(_) => Ty::Str,
        Literal::Datetime(_) => Ty::Datetime,
        Literal::Duration(_) => Ty::Duration,
    }
}

fn comparable(a: &Ty, b: &Ty) -> bool {
    (a.is_numeric() && b.is_numeric())
        || (a.is_textual() && b.is_textual())
        || (a == &Ty::Bool && b == &Ty::Bool)
        || (a == &Ty::Datetime && b == &Ty::Datetime)
        || (a == &Ty::Duration && b == &Ty::Duration)
}

/// Evaluation environment: concrete bindings for names and request fields.
#[derive(Debug, Clone, Default)]
pub struct EvalEnv {
    pub names: BTreeMap<String, Literal>,
    pub req: BTreeMap<String, Literal>,
    pub now: Option<crate::time::VirtualTime>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("missing binding for '{0}'")]
    MissingBinding(String),
    #[error("missing request field '{0}'")]
    MissingReqField(String),
    #[error("'now' not bound")]
    MissingClock,
    #[error("type mismatch evaluating '{op}': {lhs} vs {rhs}")]
    TypeMismatch {
        op: &'static str,
        lhs: &'static str,
        rhs: &'static str,
    },
    #[error("arithmetic error: {0}")]
    Arithmetic(&'static str),
}

/// Evaluates a type-checked expression. On checked expressions the only
/// reachable failures are arithmetic (division by zero, overflow).
pub fn eval(expr: &Expr, env: &EvalEnv) -> Result<Literal, EvalError> {
    match expr {
        Expr::Lit(lit) => Ok(lit.clone()),
        Expr::Name(name) => env
            .names
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::MissingBinding(name.clone())),
        Expr::ReqField(name) => env
            .req
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::MissingReqField(name.clone())),
        Expr::Now => env
            .now
            .map(Literal::Datetime)
            .ok_or(EvalError::MissingClock),
        Expr::Not(inner) => match eval(inner, env)? {
            Literal::Bool(b) => Ok(Literal::Bool(!b)),
            other => Err(type_mismatch("not", &other, &Literal::Bool(true))),
        },
        Expr::Neg(inner) => match eval(inner, env)? {
            Literal::Int(i) => i
                .checked_neg()
                .map(Literal::Int)
                .ok_or(EvalError::Arithmetic("integer overflow")),
            Literal::Float(f) => Ok(Literal::Float(-f)),
            other => Err(type_mismatch("neg", &other, &Literal::Int(0))),
        },
        Expr::Binary(op, lhs, rhs) => {
            // Short-circuit boolean operators.
            match op {
                BinOp::And => {
                    return match eval(lhs, env)? {
                        Literal::Bool(false) => Ok(Literal::Bool(false)),
                        Literal::Bool(true) => expect_bool(eval(rhs, env)?, "and"),
                        other => Err(type_mismatch("and", &other, &Literal::Bool(true))),
                    }
                }
                BinOp::Or => {
                    return match eval(lhs, env)? {
                        Literal::Bool(true) => Ok(Literal::Bool(true)),
                        Literal::Bool(false) => expect_bool(eval(rhs, env)?, "or"),
                        other => Err(type_mismatch("or", &other, &Literal::Bool(true))),
                    }
                }
                BinOp::Implies => {
                    return match eval(lhs, env)? {
                        Literal::Bool(false) => Ok(Literal::Bool(true)),
                        Literal::Bool(true) => expect_bool(eval(rhs, env)?, "implies"),
                        other => Err(type_mismatch("implies", &other, &Literal::Bool(true))),
                    }
                }
                _ => {}
            }
            let l = eval(lhs, env)?;
            let r = eval(rhs, env)?;
            eval_binary(*op, l, r)
        }
        Expr::In(inner, set) => {
            let v = eval(inner, env)?;
            for lit in set {
                if let Ok(Literal::Bool(true)) = eval_binary(BinOp::Eq, v.clone(), lit.clone()) {
                    return Ok(Literal::Bool(true));
                }
            }
            Ok(Literal::Bool(false))
        }
    }
}

fn expect_bool(lit: Literal, op: &'static str) -> Result<Literal, EvalError> {
    match lit {
        Literal::Bool(_) => Ok(lit),
        other => Err(type_mismatch(op, &other, &Literal::Bool(true))),
    }
}

fn type_mismatch(op: &'static str, lhs: &Literal, rhs: &Literal) -> EvalError {
    EvalError::TypeMismatch {
        op,
        lhs: lhs.type_name(),
        rhs: rhs.type_name(),
    }
}

fn eval_binary(op: BinOp, l: Literal, r: Literal) -> Result<Literal, EvalError> {
    use Literal::*;
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::Rem => match (&l, &r) {
            (Int(a), Int(b)) => int_arith(op, *a, *b),
            (Float(_), _) | (_, Float(_)) => {
                let a = as_f64(&l).ok_or_else(|| type_mismatch(op.symbol_static(), &l, &r))?;
                let b = as_f64(&r).ok_or_else(|| type_mismatch(op.symbol_static(), &l, &r))?;
                float_arith(op, a, b)
            }
            (Datetime(t), Duration(d)) => match op {
                BinOp::Add => Ok(Datetime(crate::time::VirtualTime(
                    t.0.checked_add(*d)
                        .ok_or(EvalError::Arithmetic("datetime overflow"))?,
                ))),
                BinOp::Sub => Ok(Datetime(crate::time::VirtualTime(
                    t.0.checked_sub(*d)
                        .ok_or(EvalError::Arithmetic("datetime underflow"))?,
                ))),
                _ => Err(type_mismatch(op.symbol_static(), &l, &r)),
            },
            (Datetime(a), Datetime(b)) if op == BinOp::Sub => Ok(Duration(a.0.abs_diff(b.0))),
            (Duration(a), Duration(b)) => match op {
                BinOp::Add => Ok(Duration(
                    a.checked_add(*b)
                        .ok_or(EvalError::Arithmetic("duration overflow"))?,
                )),
                BinOp::Sub => Ok(Duration(a.abs_diff(*b))),
                _ => Err(type_mismatch(op.symbol_static(), &l, &r)),
            },
            _ => Err(type_mismatch(op.symbol_static(), &l, &r)),
        },
        BinOp::Eq => Ok(Bool(lit_eq(&l, &r))),
        BinOp::Ne => Ok(Bool(!lit_eq(&l, &r))),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = lit_cmp(&l, &r).ok_or_else(|| type_mismatch(op.symbol_static(), &l, &r))?;
            let b = match op {
                BinOp::Lt => ord == std::cmp::Ordering::Less,
                BinOp::Le => ord != std::cmp::Ordering::Greater,
                BinOp::Gt => ord == std::cmp::Ordering::Greater,
                BinOp::Ge => ord != std::cmp::Ordering::Less,
                _ => unreachable!(),
            };
            Ok(Bool(b))
        }
        BinOp::And | BinOp::Or | BinOp::Implies => unreachable!("handled by eval"),
    }
}

impl BinOp {
    fn symbol_static(self) -> &'static str {
        self.symbol()
    }
}

fn as_f64(lit: &Literal) -> Option<f64> {
    match lit {
        Literal::Int(i) => Some(*i as f64),
        Literal::Float(f) => Some(*f),
        _ => None,
    }
}

fn int_arith(op: BinOp, a: i64, b: i64) -> Result<Literal, EvalError> {
    let out = match op {
        BinOp::Add => a.checked_add(b),
        BinOp::Sub => a.checked_sub(b),
        BinOp::Mul => a.checked_mul(b),
        BinOp::Div => {
            if b == 0 {
                return Err(EvalError::Arithmetic("division by zero"));
            }
            a.checked_div(b)
        }
        BinOp::Rem => {
            if b == 0 {
                return Err(EvalError::Arithmetic("division by zero"));
            }
            a.checked_rem(b)
        }
        _ => unreachable!(),
    };
    out.map(Literal::Int)
        .ok_or(EvalError::Arithmetic("integer overflow"))
}

fn float_arith(op: BinOp, a: f64, b: f64) -> Result<Literal, EvalError> {
    let out = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Rem => a % b,
        _ => unreachable!(),
    };
    if out.is_finite() {
        Ok(Literal::Float(out))
    } else {
        Err(EvalError::Arithmetic("non-finite result"))
    }
}

fn lit_eq(l: &Literal, r: &Literal) -> bool {
    use Literal::*;
    match (l, r) {
        (Int(a), Int(b)) => a == b,
        (Float(a), Float(b)) => a == b,
        (Int(a), Float(b)) | (Float(b), Int(a)) => (*a as f64) == *b,
        (Bool(a), Bool(b)) => a == b,
        (Str(a), Str(b)) => a == b,
        (Datetime(a), Datetime(b)) => a == b,
        (Duration(a), Duration(b)) => a == b,
        _ => false,
    }
}

fn lit_cmp(l: &Literal, r: &Literal) -> Option<std::cmp::Ordering> {
    use Literal::*;
    match (l, r) {
        (Int(a), Int(b)) => Some(a.cmp(b)),
        (Float(a), Float(b)) => a.partial_cmp(b),
        (Int(a), Float(b)) => (*a as f64).partial_cmp(b),
        (Float(a), Int(b)) => a.partial_cmp(&(*b as f64)),
        (Datetime(a), Datetime(b)) => Some(a.cmp(b)),
        (Duration(a), Duration(b)) => Some(a.cmp(b)),
        _ => None,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::model::print::print_expr(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct NoEnv;
    impl TypeEnv for NoEnv {
        fn name_type(&self, _: &str) -> Option<Ty> {
            None
        }
        fn req_field_type(&self, _: &str) -> Option<Ty> {
            None
        }
        fn clock_available(&self) -> bool {
            false
        }
    }

    fn env_with(vars: &[(&str, Literal)]) -> EvalEnv {
        EvalEnv {
            names: vars
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            req: BTreeMap::new(),
            now: None,
        }
    }

    #[test]
    fn arithmetic_and_comparison() {
        // doses_per_intake * plan_days <= roll_capacity with (3, 10, 28): 30 > 28
        let expr = Expr::Binary(
            BinOp::Le,
            Box::new(Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Name("doses_per_day".into())),
                Box::new(Expr::Name("plan_days".into())),
            )),
            Box::new(Expr::Name("roll_capacity".into())),
        );
        let env = env_with(&[
            ("doses_per_day", Literal::Int(3)),
            ("plan_days", Literal::Int(10)),
            ("roll_capacity", Literal::Int(28)),
        ]);
        assert_eq!(eval(&expr, &env), Ok(Literal::Bool(false)));
    }

    #[test]
    fn membership_and_short_circuit() {
        let expr = Expr::In(
            Box::new(Expr::Name("alarm_volume".into())),
            vec![
                Literal::Str("low".into()),
                Literal::Str("medium".into()),
                Literal::Str("high".into()),
            ],
        );
        let env = env_with(&[("alarm_volume", Literal::Str("mute".into()))]);
        assert_eq!(eval(&expr, &env), Ok(Literal::Bool(false)));

        // false and (1/0 == 1) must not evaluate the right side
        let div = Expr::Binary(
            BinOp::Eq,
            Box::new(Expr::Binary(
                BinOp::Div,
                Box::new(Expr::Lit(Literal::Int(1))),
                Box::new(Expr::Lit(Literal::Int(0))),
            )),
            Box::new(Expr::Lit(Literal::Int(1))),
        );
        let and = Expr::Binary(
            BinOp::And,
            Box::new(Expr::Lit(Literal::Bool(false))),
            Box::new(div),
        );
        assert_eq!(eval(&and, &env_with(&[])), Ok(Literal::Bool(false)));
    }

    #[test]
    fn missing_binding_and_type_mismatch_are_distinct() {
        let expr = Expr::Binary(
            BinOp::Gt,
            Box::new(Expr::Name("roll_capacity".into())),
            Box::new(Expr::Lit(Literal::Int(0))),
        );
        assert_eq!(
            eval(&expr, &env_with(&[])),
            Err(EvalError::MissingBinding("roll_capacity".into()))
        );
        let env = env_with(&[("roll_capacity", Literal::Str("oops".into()))]);
        assert!(matches!(
            eval(&expr, &env),
            Err(EvalError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn unknown_names_fail_type_check() {
        let mut expr = Expr::Name("dose_cnt".into());
        assert_eq!(
            type_check(&mut expr, &NoEnv),
            Err(ExprError::UnknownName("dose_cnt".into()))
        );
    }
}

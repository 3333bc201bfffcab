//! Canonical printer for device models. `parse(print(m))` yields a model
//! structurally equal to `m`.

use crate::model::expr::{BinOp, Expr};
use crate::model::value::{Literal, PropertyType};
use crate::model::{Action, DeviceModel, State, Transition};
use crate::time;
use crate::wire::OutcomeClass;

pub fn print_model(m: &DeviceModel) -> String {
    let mut out = String::new();
    out.push_str("twinmodel 1\n\n");
    out.push_str(&format!(
        "device {} version \"{}\"\n",
        m.name, m.version
    ));

    if !m.properties.is_empty() {
        out.push_str("\nproperties {\n");
        for p in &m.properties {
            out.push_str(&format!("  {}: {}", p.name, print_type(&p.ty)));
            if let Some(d) = &p.default {
                out.push_str(&format!(" = {}", print_literal(d)));
            }
            if let Some(u) = &p.unit {
                out.push_str(&format!(" unit \"{u}\""));
            }
            out.push('\n');
        }
        out.push_str("}\n");
    }

    if !m.constraints.is_empty() {
        out.push_str("\nconstraints {\n");
        for c in &m.constraints {
            out.push_str(&format!(
                "  {}: {} message \"{}\"\n",
                c.id,
                print_expr(&c.expr),
                escape(&c.message)
            ));
        }
        out.push_str("}\n");
    }

    out.push_str("\nstates {\n");
    for s in &m.behavior.states {
        out.push_str(&print_state(s, s.name == m.behavior.initial));
    }
    out.push_str("}\n");

    if !m.behavior.transitions.is_empty() {
        out.push_str("\ntransitions {\n");
        for t in &m.behavior.transitions {
            out.push_str(&print_transition(t));
        }
        out.push_str("}\n");
    }

    if !m.api.is_empty() {
        out.push_str("\napi {\n");
        for e in &m.api {
            out.push_str(&format!("  operation {} {{\n", e.operation));
            let fields = e
                .request
                .iter()
                .map(|f| format!("{}: {}", f.name, print_type(&f.ty)))
                .collect::<Vec<_>>()
                .join(", ");
            out.push_str(&format!("    request {{ {fields} }}\n"));
            out.push_str(&format!("    response {{ {} }}\n", e.response.join(", ")));
            out.push_str("  }\n");
        }
        out.push_str("}\n");
    }

    out
}

fn print_state(s: &State, initial: bool) -> String {
    let mut line = String::from("  ");
    if initial {
        line.push_str("initial ");
    }
    line.push_str(&s.name);
    if !s.entry.is_empty() {
        line.push_str(" do ");
        line.push_str(&print_actions(&s.entry));
    }
    line.push('\n');
    line
}

fn print_transition(t: &Transition) -> String {
    let mut line = format!("  {} -> {} on {}", t.source, t.target, t.trigger);
    if let Some(g) = &t.guard {
        line.push_str(&format!(" when {}", print_expr(g)));
    }
    if !t.actions.is_empty() {
        line.push_str(&format!(" do {}", print_actions(&t.actions)));
    }
    if !t.notify.is_empty() {
        line.push_str(&format!(" notify {}", t.notify.join(", ")));
    }
    line.push_str(&format!(" respond {}\n", print_status(t.respond)));
    line
}

fn print_status(status: OutcomeClass) -> &'static str {
    match status {
        OutcomeClass::Accepted => "accepted",
        OutcomeClass::RejectedInState => "rejected",
        OutcomeClass::Dispensed => "dispensed",
        OutcomeClass::MissedNotify => "missed",
        OutcomeClass::Error => "error",
    }
}

fn print_actions(actions: &[Action]) -> String {
    actions
        .iter()
        .map(|a| match a {
            Action::Assign { prop, expr } => format!("{prop} = {}", print_expr(expr)),
            Action::PlanLoad => "plan.load".to_string(),
            Action::PlanDispense => "plan.dispense".to_string(),
            Action::PlanConfirm => "plan.confirm".to_string(),
            Action::PlanMiss => "plan.miss".to_string(),
            Action::PlanClear => "plan.clear".to_string(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn print_type(ty: &PropertyType) -> String {
    match ty {
        PropertyType::Int => "int".to_string(),
        PropertyType::Float => "float".to_string(),
        PropertyType::Bool => "bool".to_string(),
        PropertyType::Str => "string".to_string(),
        PropertyType::Enum(domain) => format!("enum({})", domain.join(", ")),
        PropertyType::Datetime => "datetime".to_string(),
        PropertyType::Duration => "duration".to_string(),
    }
}

pub fn print_literal(lit: &Literal) -> String {
    match lit {
        Literal::Int(i) => i.to_string(),
        // {:?} prints the shortest string that parses back to the same f64.
        Literal::Float(f) => format!("{f:?}"),
        Literal::Bool(b) => b.to_string(),
        Literal::Str(s) => format!("\"{}\"", escape(s)),
        Literal::Datetime(t) => format!("\"{}\"", t.format()),
        Literal::Duration(ms) => time::format_duration_ms(*ms),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Implies, _, _) => 1,
        Expr::Binary(BinOp::Or, _, _) => 2,
        Expr::Binary(BinOp::And, _, _) => 3,
        Expr::Binary(
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge,
            _,
            _,
        )
        | Expr::In(_, _) => 4,
        Expr::Binary(BinOp::Add | BinOp::Sub, _, _) => 5,
        Expr::Binary(BinOp::Mul | BinOp::Div | BinOp::Rem, _, _) => 6,
        Expr::Not(_) | Expr::Neg(_) => 7,
        _ => 8,
    }
}

pub fn print_expr(e: &Expr) -> String {
    match e {
        Expr::Lit(lit) => print_literal(lit),
        Expr::Name(n) => n.clone(),
        Expr::ReqField(f) => format!("req.{f}"),
        Expr::Now => "now".to_string(),
        Expr::Not(inner) => format!("not {}", child(inner, 7)),
        Expr::Neg(inner) => format!("-{}", child(inner, 7)),
        Expr::Binary(op, lhs, rhs) => {
            let p = precedence(e);
            let (lp, rp) = match op {
                // implies is right-associative; comparisons do not chain.
                BinOp::Implies => (p + 1, p),
                BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    (p + 1, p + 1)
                }
                _ => (p, p + 1),
            };
            format!(
                "{} {} {}",
                child(lhs, lp),
                op.symbol(),
                child(rhs, rp)
            )
        }
        Expr::In(inner, set) => {
            let items = set
                .iter()
                .map(print_literal)
                .collect::<Vec<_>>()
                .join(", ");
            format!("{} in {{{items}}}", child(inner, 5))
        }
    }
}

fn child(e: &Expr, min_prec: u8) -> String {
    if precedence(e) < min_prec {
        format!("({})", print_expr(e))
    } else {
        print_expr(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    #[test]
    fn print_parse_round_trip_on_expressions() {
        let src = "twinmodel 1\n\
                   device x version \"1\"\n\
                   properties {\n\
                   \x20 a: int = 1\n\
                   \x20 b: int = 2\n\
                   \x20 c: bool = false\n\
                   \x20 mode: enum(eco, fast) = eco\n\
                   }\n\
                   constraints {\n\
                   \x20 k1: a * (b + 2) <= 10 message \"m1\"\n\
                   \x20 k2: not c and (a > 0 or b > 0) message \"m2\"\n\
                   \x20 k3: c implies a + b > 0 message \"m3\"\n\
                   \x20 k4: mode in {eco, fast} message \"m4\"\n\
                   \x20 k5: -a < b message \"m5\"\n\
                   }\n\
                   states {\n  initial S\n}\n";
        let m1 = parse_model(src).unwrap();
        let printed = print_model(&m1);
        let m2 = parse_model(&printed).unwrap();
        assert_eq!(m1, m2, "printed form:\n{printed}");
    }
}

//! Named property checks run by `brite verify`.

use std::fmt::Write as _;

use glob::Pattern;

use super::suite::{self, Check};
use crate::error::{Error, Result};
use crate::planner::ShapingFault;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub fault: ShapingFault,
}

/// Parse a `--inject-fault` value.
pub fn parse_fault(name: &str) -> Result<ShapingFault> {
    match name {
        "none" => Ok(ShapingFault::None),
        "flip-token-sign" => Ok(ShapingFault::FlipTokenSign),
        other => Err(Error::InvalidConfig {
            field: "inject-fault".into(),
            reason: format!("unknown fault `{other}` (expected none or flip-token-sign)"),
        }),
    }
}

pub struct Property {
    pub name: &'static str,
    /// Diagnostic properties are reported but never fail the run.
    pub diagnostic: bool,
    pub run: fn(&VerifyOptions) -> Check,
}

const fn hard(name: &'static str, run: fn(&VerifyOptions) -> Check) -> Property {
    Property { name, diagnostic: false, run }
}

pub fn registry() -> Vec<Property> {
    vec![
        hard("plan.softmax_equivalence", |_| suite::softmax_plan_equivalence(60)),
        hard("plan.shaping_posterior", |o| suite::shaping_posterior(o.fault)),
        hard("plan.policy_gradient", |_| suite::policy_gradient_posterior()),
        hard("elbo.bound", |_| suite::elbo_bound(24, 1000)),
        hard("kl.identity", |_| suite::kl_identity(100)),
        hard("grad.finite_difference", |_| suite::gradient_identity(100)),
        hard("em.monotone", |_| suite::em_monotone(12, 100)),
        hard("em.certificate", |_| suite::em_certificate(12, 100)),
        hard("em.convergence", |_| suite::em_convergence()),
        Property { name: "em.reference_gap", diagnostic: true, run: |_| suite::reference_gap_diagnostic(20, 10_000) },
        hard("unify.filter_sft", |_| suite::unify_filter_sft(12)),
        hard("unify.restem", |_| suite::unify_restem(12)),
        hard("dpo.reference_loss", |_| suite::dpo_reference_loss(20)),
        hard("dpo.gradient", |_| suite::dpo_gradient(20)),
        hard("dpo.shift_invariance", |_| suite::dpo_shift_invariance(10)),
        hard("trend.rejection", |_| suite::trend_rejection(5)),
        hard("trend.preference", |_| suite::trend_preference(5)),
        hard("harness.determinism", |_| suite::determinism()),
    ]
}

pub struct PropertyResult {
    pub name: &'static str,
    pub diagnostic: bool,
    pub check: Check,
}

pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn hard_failures(&self) -> usize {
        self.results.iter().filter(|r| !r.diagnostic && !r.check.passed).count()
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(self.hard_failures() > 0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let status = match (r.check.passed, r.diagnostic) {
                (true, _) => "PASS",
                (false, false) => "FAIL",
                (false, true) => "WARN",
            };
            let _ = writeln!(
                s,
                "{status} {} measured={:e} threshold={:e} instances={} {}",
                r.name, r.check.measured, r.check.threshold, r.check.instances, r.check.detail
            );
        }
        let _ = writeln!(s, "{} properties, {} hard failures", self.results.len(), self.hard_failures());
        s
    }
}

/// Run every registered property whose name matches `filter` (a glob).
pub fn cmd_verify(filter: Option<&str>, opts: &VerifyOptions) -> Result<VerifyReport> {
    let pattern = filter
        .map(Pattern::new)
        .transpose()
        .map_err(|e| Error::InvalidConfig { field: "filter".into(), reason: e.to_string() })?;
    let selected: Vec<Property> =
        registry().into_iter().filter(|p| pattern.as_ref().is_none_or(|pat| pat.matches(p.name))).collect();
    if selected.is_empty() {
        return Err(Error::InvalidConfig {
            field: "filter".into(),
            reason: format!("no property matches `{}`", filter.unwrap_or("")),
        });
    }
    let results = selected
        .into_iter()
        .map(|p| PropertyResult { name: p.name, diagnostic: p.diagnostic, check: (p.run)(opts) })
        .collect();
    Ok(VerifyReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names: std::collections::BTreeSet<_> = registry().iter().map(|p| p.name).collect();
        assert_eq!(names.len(), registry().len());
    }

    #[test]
    fn filter_selects_by_prefix() {
        let r = cmd_verify(Some("plan.softmax*"), &VerifyOptions::default()).unwrap();
        assert_eq!(r.results.len(), 1);
        assert_eq!(r.exit_code(), 0);
    }

    #[test]
    fn unknown_filter_and_fault_are_errors() {
        assert!(cmd_verify(Some("nothing.*"), &VerifyOptions::default()).is_err());
        assert!(parse_fault("bogus").is_err());
    }
}

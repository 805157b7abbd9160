//! Plain-text run summary laid out like a per-class intercept and slope table.

use std::fmt::Write;

use subtype_core::characterization::SurvivalCurve;
use subtype_core::lcmm::{Estimate, MembershipTable, TrajectorySummary};
use subtype_core::robustness::StabilityReport;
use subtype_core::selection::{InformationCriteria, SelectionReport};

use crate::files::FitFile;

fn estimate(e: &Estimate) -> String {
    match e.ci {
        Some((lo, hi)) => format!("{:.3} ({:.3}, {:.3})", e.value, lo, hi),
        None => format!("{:.3}", e.value),
    }
}

pub fn summary_text(
    file: &FitFile,
    memberships: &MembershipTable,
    criteria: &InformationCriteria,
    summary: &TrajectorySummary,
    survival: Option<&[SurvivalCurve]>,
    selection: Option<&SelectionReport>,
    stability: &[StabilityReport],
) -> String {
    let fit = &file.fit;
    let g = fit.n_classes();
    let link = match fit.spec.link {
        subtype_core::link::LinkKind::Identity => "identity",
        subtype_core::link::LinkKind::Beta => "beta",
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Latent-class mixed model: {g} class{} ({link} link)",
        if g == 1 { "" } else { "es" }
    );
    let _ = writeln!(
        s,
        "Eyes: {}  Log-likelihood: {:.4}  Parameters: {}  Converged: {}",
        fit.n_eyes,
        fit.loglik,
        fit.n_params,
        if fit.convergence.converged { "yes" } else { "no" }
    );
    let _ = writeln!(
        s,
        "AIC: {:.4}  BIC: {:.4}  ICL: {:.4}",
        criteria.aic, criteria.bic, criteria.icl
    );
    if g > 1 {
        let _ = writeln!(
            s,
            "Membership entropy: {:.4}  Mean maximum posterior: {:.4}",
            criteria.entropy,
            memberships.mean_max_posterior()
        );
    }
    if !summary.covariance_available {
        let _ = writeln!(s, "Standard errors unavailable: information matrix is singular");
    }
    let _ = writeln!(s);

    let counts = {
        let mut c = vec![0usize; g];
        for &k in &memberships.map_class {
            c[k] += 1;
        }
        c
    };
    let n = memberships.len().max(1) as f64;
    let _ = writeln!(
        s,
        "{:<6} {:<16} {:<11} {:<30} {:<30}",
        "Class", "Eyes (%)", "Proportion", "Intercept (95% CI)", "Slope per year (95% CI)"
    );
    for c in &summary.classes {
        let k = c.class - 1;
        let eyes = format!("{} ({:.1})", counts[k], 100.0 * counts[k] as f64 / n);
        let intercept = c.intercept.as_ref().map(estimate).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<6} {:<16} {:<11.4} {:<30} {:<30}",
            c.class,
            eyes,
            c.proportion,
            intercept,
            estimate(&c.slope)
        );
    }

    if let Some(curves) = survival {
        let _ = writeln!(s);
        let _ = writeln!(s, "Conversion-free survival at end of follow-up");
        for c in curves {
            let events: usize = c.points.iter().map(|p| p.n_event).sum();
            let _ = writeln!(
                s,
                "  class {}: {:.4} ({} events among {} eyes)",
                c.cluster,
                c.terminal_survival(),
                events,
                c.points.first().map_or(0, |p| p.n_risk)
            );
        }
    }

    if let Some(sel) = selection {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Class-count selection ({}): {} classes",
            sel.selection_rule, sel.selected_classes
        );
        for r in &sel.rows {
            match r.criteria {
                Some(c) => {
                    let _ = writeln!(
                        s,
                        "  G={}  ICL {:.4}  BIC {:.4}  AIC {:.4}{}",
                        r.n_classes,
                        c.icl,
                        c.bic,
                        c.aic,
                        if r.converged { "" } else { "  (not converged)" }
                    );
                }
                None => {
                    let _ = writeln!(s, "  G={}  no converged start", r.n_classes);
                }
            }
        }
    }

    for report in stability {
        let _ = writeln!(s);
        let _ = writeln!(s, "Membership stability ({})", report.protocol.name());
        for a in &report.aggregates {
            match (a.mean_accuracy, a.ci) {
                (Some(m), Some((lo, hi))) => {
                    let _ = writeln!(
                        s,
                        "  {}: {:.1}% ({:.1}, {:.1}) over {} trials",
                        a.parameter,
                        100.0 * m,
                        100.0 * lo,
                        100.0 * hi,
                        a.n_trials - a.n_failed
                    );
                }
                _ => {
                    let _ = writeln!(s, "  {}: no converged trial", a.parameter);
                }
            }
        }
    }
    s
}

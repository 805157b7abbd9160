//! Product-limit survival curves per cluster and the log-rank test.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::CharacterizationError;
use crate::cohort::EyeEvent;
use crate::lcmm::MembershipTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub time: f64,
    pub survival: f64,
    /// Eyes still at risk just before `time`.
    pub n_risk: usize,
    pub n_event: usize,
    pub n_censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    /// 1-based cluster label.
    pub cluster: usize,
    /// Starts with `(0, 1)` at the full risk set, then one point per distinct
    /// event or censoring time.
    pub points: Vec<SurvivalPoint>,
}

impl SurvivalCurve {
    /// Step-function value at `t` (right-continuous).
    pub fn survival_at(&self, t: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.time <= t)
            .last()
            .map_or(1.0, |p| p.survival)
    }

    pub fn terminal_survival(&self) -> f64 {
        self.points.last().map_or(1.0, |p| p.survival)
    }
}

/// Product-limit estimate for one group of `(time, event)` records.
pub fn product_limit(records: &[(f64, bool)]) -> Vec<SurvivalPoint> {
    let mut sorted: Vec<(f64, bool)> = records.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = vec![SurvivalPoint {
        time: 0.0,
        survival: 1.0,
        n_risk: sorted.len(),
        n_event: 0,
        n_censored: 0,
    }];
    let mut s = 1.0;
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let (mut d, mut c) = (0, 0);
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        if d > 0 {
            s *= (at_risk - d) as f64 / at_risk as f64;
        }
        if t == 0.0 && points.len() == 1 {
            points[0] = SurvivalPoint {
                time: 0.0,
                survival: s,
                n_risk: at_risk,
                n_event: d,
                n_censored: c,
            };
        } else {
            points.push(SurvivalPoint {
                time: t,
                survival: s,
                n_risk: at_risk,
                n_event: d,
                n_censored: c,
            });
        }
        at_risk -= d + c;
    }
    points
}

/// Groups event records by MAP cluster, checking every eye has a membership.
fn grouped(memberships: &MembershipTable, events: &[EyeEvent]) -> Result<Vec<Vec<(f64, bool)>>, CharacterizationError> {
    let index: HashMap<&str, usize> = memberships
        .eye_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut groups = vec![Vec::new(); memberships.n_classes()];
    for e in events {
        let t = e.record.event_time_years;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(CharacterizationError::Input(format!(
                "eye {}: invalid event time {t}",
                e.eye_id
            )));
        }
        let i = *index
            .get(e.eye_id.as_str())
            .ok_or_else(|| CharacterizationError::Input(format!("eye {} has no cluster membership", e.eye_id)))?;
        groups[memberships.map_class[i]].push((t, e.record.event));
    }
    Ok(groups)
}

/// One Kaplan-Meier curve per cluster (clusters without eyes get a flat curve
/// with an empty risk set).
pub fn kaplan_meier(
    memberships: &MembershipTable,
    events: &[EyeEvent],
) -> Result<Vec<SurvivalCurve>, CharacterizationError> {
    Ok(grouped(memberships, events)?
        .iter()
        .enumerate()
        .map(|(g, records)| SurvivalCurve {
            cluster: g + 1,
            points: product_limit(records),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// K-sample log-rank test over groups of `(time, event)` records. Empty
/// groups are dropped.
pub fn log_rank(groups: &[Vec<(f64, bool)>]) -> Result<LogRankTest, CharacterizationError> {
    let groups: Vec<&Vec<(f64, bool)>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let k = groups.len();
    if k < 2 {
        return Err(CharacterizationError::NoContrast(
            "log-rank test needs two non-empty groups".into(),
        ));
    }
    let mut times: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.iter().filter(|r| r.1).map(|r| r.0))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut observed_minus_expected = DVector::<f64>::zeros(k);
    let mut variance = DMatrix::<f64>::zeros(k, k);
    for &t in &times {
        let n_g: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|r| r.0 >= t).count() as f64)
            .collect();
        let d_g: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|r| r.0 == t && r.1).count() as f64)
            .collect();
        let n: f64 = n_g.iter().sum();
        let d: f64 = d_g.iter().sum();
        for a in 0..k {
            observed_minus_expected[a] += d_g[a] - d * n_g[a] / n;
        }
        if n > 1.0 {
            let f = d * (n - d) / (n - 1.0);
            for a in 0..k {
                for b in 0..k {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    variance[(a, b)] += f * (n_g[a] / n) * (delta - n_g[b] / n);
                }
            }
        }
    }
    let m = k - 1;
    let u = observed_minus_expected.rows(0, m).into_owned();
    let v = variance.view((0, 0), (m, m)).into_owned();
    let inv = v
        .cholesky()
        .ok_or_else(|| CharacterizationError::Numerical("log-rank variance matrix is singular".into()))?
        .inverse();
    let statistic = (u.transpose() * inv * &u)[(0, 0)];
    let chi = ChiSquared::new(m as f64).expect("positive degrees of freedom");
    Ok(LogRankTest {
        statistic,
        df: m,
        p_value: chi.sf(statistic).clamp(0.0, 1.0),
    })
}

/// Log-rank test across MAP clusters.
pub fn log_rank_across_clusters(
    memberships: &MembershipTable,
    events: &[EyeEvent],
) -> Result<LogRankTest, CharacterizationError> {
    log_rank(&grouped(memberships, events)?)
}

/// CSV with header `cluster,time,survival,n_risk,n_event,censored`.
pub fn survival_csv(curves: &[SurvivalCurve]) -> String {
    let mut out = String::from("cluster,time,survival,n_risk,n_event,censored\n");
    for c in curves {
        for p in &c.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.cluster, p.time, p.survival, p.n_risk, p.n_event, p.n_censored
            ));
        }
    }
    out
}

//! CSV and JSON serialization with a fixed layout.
//!
//! Floats are written with 17 significant digits so files compare
//! byte-for-byte between runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::analysis::{BoundReport, MomentumReport, ScalingRow};
use crate::error::Result;
use crate::fedsgd::RoundRecord;
use crate::staleness::{geometric_pmf, StalenessHistogram};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Upper edges (inclusive) of the staleness buckets in the record log; the
/// last bucket is open.
const TAU_BUCKETS: &[(u64, &str)] = &[
    (0, "tau_0"),
    (1, "tau_1"),
    (3, "tau_2_3"),
    (7, "tau_4_7"),
    (15, "tau_8_15"),
    (31, "tau_16_31"),
    (u64::MAX, "tau_32_plus"),
];

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn records_csv(records: &[RoundRecord], coherence: Option<&[Option<f64>]>) -> String {
    let mut out = String::from("t,f_w,grad_norm_sq,delta_w_norm,coherence,selected");
    for (_, name) in TAU_BUCKETS {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        let selected = r
            .selected
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        let mu = coherence.and_then(|c| c.get(i).copied().flatten());
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.t,
            fmt_f64(r.loss),
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.delta_w.norm()),
            opt_f64(mu),
            selected
        );
        let mut lo = 0u64;
        for &(hi, _) in TAU_BUCKETS {
            let n = r.staleness.iter().filter(|&&s| s >= lo && s <= hi).count();
            let _ = write!(out, ",{n}");
            lo = hi.saturating_add(1);
        }
        out.push('\n');
    }
    out
}

pub fn staleness_csv(hist: &StalenessHistogram, beta: f64) -> Result<String> {
    let mut out = String::from("l,empirical_pmf,theoretical_pmf\n");
    for l in 0..=hist.max_l() {
        let _ = writeln!(
            out,
            "{l},{},{}",
            fmt_f64(hist.empirical_pmf(l)),
            fmt_f64(geometric_pmf(beta, l as u64)?)
        );
    }
    Ok(out)
}

pub fn momentum_csv(report: &MomentumReport) -> String {
    let mut out = String::from("t,coord,residual,std_error,z\n");
    for r in &report.rounds {
        for (j, (m, se)) in r.residual.iter().zip(&r.std_error).enumerate() {
            let z = if *se > 0.0 { m.abs() / se } else { 0.0 };
            let _ = writeln!(out, "{},{j},{},{},{}", r.t, fmt_f64(*m), fmt_f64(*se), fmt_f64(z));
        }
    }
    out
}

pub fn coherence_csv(mu: &[Option<f64>], running_min: &[f64]) -> String {
    let mut out = String::from("t,mu_t,running_min\n");
    for (t, (m, r)) in mu.iter().zip(running_min).enumerate() {
        let _ = writeln!(out, "{t},{},{}", opt_f64(*m), fmt_f64(*r));
    }
    out
}

pub fn bound_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from(
        "N,T,seeds,beta,eta,L,f0,fstar,sigma2_at_w0,sigma2_at_w0_se,sigma2,mu_measured,mu,bound,measured_min_grad_norm_sq,valid,hypothesis_ok,asserted,satisfied,status\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.per_round,
            r.rounds,
            r.seeds,
            fmt_f64(r.beta),
            fmt_f64(r.eta),
            fmt_f64(r.smoothness),
            fmt_f64(r.f0),
            fmt_f64(r.fstar),
            fmt_f64(r.sigma2_at_w0),
            fmt_f64(r.sigma2_at_w0_std_error),
            fmt_f64(r.sigma2),
            fmt_f64(r.mu_measured),
            fmt_f64(r.mu),
            fmt_f64(r.bound),
            fmt_f64(r.measured_min_grad_norm_sq),
            r.valid,
            r.hypothesis_ok,
            r.asserted,
            r.satisfied,
            r.status
        );
    }
    out
}

pub fn mean_curve_csv(grad_norm_sq: &[f64], loss: &[f64]) -> String {
    let mut out = String::from("t,mean_grad_norm_sq,mean_loss\n");
    for (t, (g, f)) in grad_norm_sq.iter().zip(loss).enumerate() {
        let _ = writeln!(out, "{t},{},{}", fmt_f64(*g), fmt_f64(*f));
    }
    out
}

/// One row of the joined sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub per_round: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub beta: f64,
    pub eta: Option<f64>,
    pub scaling: Option<ScalingRow>,
    pub final_mean_loss: Option<f64>,
    pub status: String,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "N,T,H,beta,eta,seeds,mean_rounds_to_threshold,unreached,min_mean_grad_norm_sq,final_mean_loss,status\n",
    );
    for r in rows {
        let s = r.scaling.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.per_round,
            r.rounds,
            r.local_steps,
            fmt_f64(r.beta),
            opt_f64(r.eta),
            s.map_or(String::new(), |s| s.seeds.to_string()),
            opt_f64(s.map(|s| s.mean_rounds_to_threshold)),
            s.map_or(String::new(), |s| s.unreached.to_string()),
            opt_f64(s.map(|s| s.min_mean_grad_norm_sq)),
            opt_f64(r.final_mean_loss),
            r.status
        );
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

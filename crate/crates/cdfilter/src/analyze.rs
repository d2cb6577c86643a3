//! Closed-loop performance metrics and the filtration-efficiency surface.
//!
//! Metrics work on the trajectory's native controller-rate grid: ISE by
//! trapezoid, overshoot relative to the post-step reference, settling time
//! against a percentage band of the step size, and the population standard
//! deviation of the tracking error.

use serde::{Deserialize, Serialize};

use crate::plant;
use crate::simulate::{Record, ReferenceSignals, Signal, Trajectory};
use crate::{Error, Result};

/// Which trajectory variable a metric reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackedVariable {
    Omega,
    PV,
    CR,
    HCake,
    QF,
}

impl TrackedVariable {
    pub fn name(&self) -> &'static str {
        match self {
            TrackedVariable::Omega => "omega",
            TrackedVariable::PV => "p_v",
            TrackedVariable::CR => "c_r",
            TrackedVariable::HCake => "h_cake",
            TrackedVariable::QF => "q_f",
        }
    }

    fn read(&self, r: &Record) -> f64 {
        match self {
            TrackedVariable::Omega => r.state.omega,
            TrackedVariable::PV => r.state.p_v,
            TrackedVariable::CR => r.state.c_r,
            TrackedVariable::HCake => r.state.h_cake,
            TrackedVariable::QF => r.state.q_f,
        }
    }
}

fn samples_in<'a>(
    traj: &'a Trajectory,
    window: (f64, f64),
) -> impl Iterator<Item = &'a Record> + 'a {
    let (a, b) = window;
    let tol = 1e-9 * traj.ts.max(1.0);
    traj.records
        .iter()
        .filter(move |r| r.t >= a - tol && r.t <= b + tol)
}

/// Trapezoidal integral of the squared tracking error over `window`.
///
/// Windows are grid-aligned: samples with `a ≤ t ≤ b` participate, so ISE
/// over adjacent windows sums exactly to the ISE of their union.
pub fn ise(traj: &Trajectory, var: TrackedVariable, reference: &Signal, window: (f64, f64)) -> f64 {
    let pts: Vec<(f64, f64)> = samples_in(traj, window)
        .map(|r| {
            let e = reference.sample(r.t) - var.read(r);
            (r.t, e * e)
        })
        .collect();
    pts.windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum()
}

/// Peak excursion beyond the post-step reference, as a percentage of the
/// step size, searched after `step_time` and signed toward the step
/// direction. Monotone approaches score zero.
pub fn overshoot(
    traj: &Trajectory,
    var: TrackedVariable,
    step_time: f64,
    initial_ref: f64,
    final_ref: f64,
) -> Result<f64> {
    let step = final_ref - initial_ref;
    if step == 0.0 {
        return Err(Error::DegenerateStep(final_ref));
    }
    let direction = step.signum();
    let peak = traj
        .records
        .iter()
        .filter(|r| r.t >= step_time)
        .map(|r| (var.read(r) - final_ref) * direction)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(100.0 * peak.max(0.0) / step.abs())
}

/// Smallest time-after-step beyond which the variable stays within
/// `band_pct`% of the step size around the final reference; `None` when it
/// never settles within the trajectory.
pub fn settling_time(
    traj: &Trajectory,
    var: TrackedVariable,
    step_time: f64,
    initial_ref: f64,
    final_ref: f64,
    band_pct: f64,
) -> Option<f64> {
    let band = band_pct / 100.0 * (final_ref - initial_ref).abs();
    let mut settle_at: Option<f64> = None;
    for r in traj.records.iter().filter(|r| r.t >= step_time) {
        if (var.read(r) - final_ref).abs() <= band {
            settle_at.get_or_insert(r.t);
        } else {
            settle_at = None;
        }
    }
    settle_at.map(|t| t - step_time)
}

/// Population standard deviation of `(ref − value)` over the window.
pub fn error_stddev(
    traj: &Trajectory,
    var: TrackedVariable,
    reference: &Signal,
    window: (f64, f64),
) -> Result<f64> {
    let errors: Vec<f64> = samples_in(traj, window)
        .map(|r| reference.sample(r.t) - var.read(r))
        .collect();
    if errors.len() < 2 {
        return Err(Error::invalid(format!(
            "error_stddev needs >= 2 samples in the window, found {}",
            errors.len()
        )));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var_pop = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(var_pop.sqrt())
}

/// Reference step extracted from a signal schedule (the last step segment).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub time: f64,
    pub initial: f64,
    pub target: f64,
}

/// Find the last step-shaped reference change in a schedule.
pub fn detect_step(signal: &Signal) -> Option<StepInfo> {
    for idx in (1..signal.segments.len()).rev() {
        let seg = &signal.segments[idx];
        if matches!(seg.kind, crate::simulate::SegmentKind::StepTo) {
            let before = signal.sample(seg.t - 1e-9 * (1.0 + seg.t));
            if before != seg.value {
                return Some(StepInfo {
                    time: seg.t,
                    initial: before,
                    target: seg.value,
                });
            }
        }
    }
    None
}

/// Metrics of one tracked variable over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub variable: String,
    pub ise: f64,
    /// Absent when the reference schedule holds no step.
    pub overshoot_pct: Option<f64>,
    /// Absent when the variable never settles (or no step exists).
    pub settling_time: Option<f64>,
    pub settled: bool,
    pub error_stddev: f64,
    /// Settling band used, in percent of step size.
    pub band_pct: f64,
}

/// Per-variable metric summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<VariableMetrics>,
}

impl MetricsReport {
    pub fn get(&self, variable: &str) -> Option<&VariableMetrics> {
        self.entries.iter().find(|e| e.variable == variable)
    }
}

/// Compute the standard report for the tracked variables (q_f and C_R) over
/// the full run, using each variable's reference schedule for step metrics.
pub fn compute_metrics(
    traj: &Trajectory,
    references: &ReferenceSignals,
    band_pct: f64,
) -> Result<MetricsReport> {
    let span = (
        traj.records.first().map(|r| r.t).unwrap_or(0.0),
        traj.records.last().map(|r| r.t).unwrap_or(0.0),
    );
    let mut entries = Vec::new();
    for (var, reference) in [
        (TrackedVariable::QF, &references.q_f),
        (TrackedVariable::CR, &references.c_r),
    ] {
        let step = detect_step(reference);
        let (overshoot_pct, settling) = match step {
            Some(s) => (
                Some(overshoot(traj, var, s.time, s.initial, s.target)?),
                settling_time(traj, var, s.time, s.initial, s.target, band_pct),
            ),
            None => (None, None),
        };
        entries.push(VariableMetrics {
            variable: var.name().to_string(),
            ise: ise(traj, var, reference, span),
            overshoot_pct,
            settling_time: settling,
            settled: settling.is_some(),
            error_stddev: error_stddev(traj, var, reference, span)?,
            band_pct,
        });
    }
    Ok(MetricsReport { entries })
}

/// Cross-controller comparison: percentage reductions achieved by `candidate`
/// relative to `baseline` per variable (positive = candidate better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub variable: String,
    pub ise_reduction_pct: f64,
    pub stddev_reduction_pct: f64,
    pub overshoot_delta_pct: Option<f64>,
    pub settling_delta: Option<f64>,
}

pub fn diff_reports(baseline: &MetricsReport, candidate: &MetricsReport) -> Vec<ReportDiff> {
    let mut out = Vec::new();
    for b in &baseline.entries {
        let Some(c) = candidate.get(&b.variable) else {
            continue;
        };
        let reduction = |base: f64, cand: f64| {
            if base.abs() > 0.0 {
                100.0 * (base - cand) / base.abs()
            } else {
                0.0
            }
        };
        out.push(ReportDiff {
            variable: b.variable.clone(),
            ise_reduction_pct: reduction(b.ise, c.ise),
            stddev_reduction_pct: reduction(b.error_stddev, c.error_stddev),
            overshoot_delta_pct: match (b.overshoot_pct, c.overshoot_pct) {
                (Some(bo), Some(co)) => Some(bo - co),
                _ => None,
            },
            settling_delta: match (b.settling_time, c.settling_time) {
                (Some(bs), Some(cs)) => Some(bs - cs),
                _ => None,
            },
        });
    }
    out
}

/// Filtration-efficiency surface over inflow rate and inflow concentration
/// at fixed filtrate flow and vat concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub f_in: Vec<f64>,
    pub c_in: Vec<f64>,
    /// `eta[i][j]` for `(f_in[i], c_in[j])`.
    pub eta: Vec<Vec<f64>>,
    pub q_f: f64,
    pub c_r: f64,
}

impl SurfaceGrid {
    /// Every row and column strictly increasing (true whenever
    /// `q_f·c_r > 0`).
    pub fn is_strictly_monotone(&self) -> bool {
        for row in &self.eta {
            if row.windows(2).any(|w| w[1] <= w[0]) {
                return false;
            }
        }
        for j in 0..self.c_in.len() {
            for i in 1..self.f_in.len() {
                if self.eta[i][j] <= self.eta[i - 1][j] {
                    return false;
                }
            }
        }
        true
    }
}

fn linspace(range: (f64, f64), n: usize) -> Vec<f64> {
    let (a, b) = range;
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Evaluate the efficiency formula on a Cartesian grid.
pub fn efficiency_surface(
    q_f: f64,
    c_r: f64,
    fin_range: (f64, f64),
    cin_range: (f64, f64),
    n_fin: usize,
    n_cin: usize,
) -> Result<SurfaceGrid> {
    if n_fin < 2 || n_cin < 2 {
        return Err(Error::invalid("surface grid needs at least 2x2 points"));
    }
    if !(fin_range.0 > 0.0 && fin_range.1 > fin_range.0) {
        return Err(Error::invalid(format!(
            "f_in range must be positive and increasing, got {fin_range:?}"
        )));
    }
    if !(cin_range.0 > 0.0 && cin_range.1 > cin_range.0) {
        return Err(Error::invalid(format!(
            "c_in range must be positive and increasing, got {cin_range:?}"
        )));
    }
    let f_in = linspace(fin_range, n_fin);
    let c_in = linspace(cin_range, n_cin);
    let mut eta = Vec::with_capacity(n_fin);
    for &f in &f_in {
        let mut row = Vec::with_capacity(n_cin);
        for &c in &c_in {
            row.push(plant::efficiency(q_f, c_r, f, c)?);
        }
        eta.push(row);
    }
    Ok(SurfaceGrid {
        f_in,
        c_in,
        eta,
        q_f,
        c_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlantInput, PlantState};
    use crate::simulate::Record;
    use approx::assert_relative_eq;

    /// Build a synthetic trajectory from (t, value) pairs on one variable.
    fn synth(values: &[f64], ts: f64, var: TrackedVariable) -> Trajectory {
        let records = values
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let mut state = PlantState::ZERO;
                match var {
                    TrackedVariable::Omega => state.omega = v,
                    TrackedVariable::PV => state.p_v = v,
                    TrackedVariable::CR => state.c_r = v,
                    TrackedVariable::HCake => state.h_cake = v,
                    TrackedVariable::QF => state.q_f = v,
                }
                Record {
                    t: k as f64 * ts,
                    state,
                    input: PlantInput::ZERO,
                    ref_q_f: 0.0,
                    ref_c_r: 0.0,
                    ref_f_in: 0.0,
                    eta: f64::NAN,
                    flags: 0,
                    mpc: None,
                }
            })
            .collect();
        Trajectory {
            records,
            ts,
            final_state: PlantState::ZERO,
            solids_flow_integral: 0.0,
        }
    }

    #[test]
    fn ise_examples() {
        // Zero error.
        let traj = synth(&vec![3.0; 11], 1.0, TrackedVariable::CR);
        assert_eq!(
            ise(&traj, TrackedVariable::CR, &Signal::constant(3.0), (0.0, 10.0)),
            0.0
        );
        // Constant error 1 over 10 s.
        assert_relative_eq!(
            ise(&traj, TrackedVariable::CR, &Signal::constant(4.0), (0.0, 10.0)),
            10.0,
            max_relative = 1e-12
        );
        // Ramp error e = t on [0, 1] at 0.1 s sampling: trapezoid of t².
        let ramp: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let traj = synth(&ramp, 0.1, TrackedVariable::QF);
        let v = ise(&traj, TrackedVariable::QF, &Signal::constant(0.0), (0.0, 1.0));
        assert_relative_eq!(v, 0.335, max_relative = 1e-12);
        assert!((v - 1.0 / 3.0).abs() < 2e-3);
    }

    #[test]
    fn ise_additivity() {
        let values: Vec<f64> = (0..=20).map(|k| (k as f64 * 0.37).sin()).collect();
        let traj = synth(&values, 0.5, TrackedVariable::QF);
        let r = Signal::constant(0.2);
        let whole = ise(&traj, TrackedVariable::QF, &r, (0.0, 10.0));
        let left = ise(&traj, TrackedVariable::QF, &r, (0.0, 4.0));
        let right = ise(&traj, TrackedVariable::QF, &r, (4.0, 10.0));
        assert_relative_eq!(left + right, whole, epsilon = 1e-12);
    }

    #[test]
    fn overshoot_examples() {
        // Monotone first-order approach scores zero.
        let mono: Vec<f64> = (0..50).map(|k| 1.0 - (-(k as f64) * 0.2).exp()).collect();
        let traj = synth(&mono, 0.1, TrackedVariable::QF);
        assert_eq!(
            overshoot(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0).unwrap(),
            0.0
        );

        // Peak 1.52 on a unit step → 52 %.
        let mut peaked = mono.clone();
        peaked[10] = 1.52;
        let traj = synth(&peaked, 0.1, TrackedVariable::QF);
        assert_relative_eq!(
            overshoot(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0).unwrap(),
            52.0,
            max_relative = 1e-12
        );

        // Peak 1.0197 → 1.97 %.
        let mut slight = mono;
        slight[10] = 1.0197;
        let traj = synth(&slight, 0.1, TrackedVariable::QF);
        assert_relative_eq!(
            overshoot(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0).unwrap(),
            1.97,
            max_relative = 1e-9
        );

        assert!(matches!(
            overshoot(&traj, TrackedVariable::QF, 0.0, 1.0, 1.0),
            Err(Error::DegenerateStep(_))
        ));
    }

    #[test]
    fn overshoot_is_scale_invariant() {
        let base: Vec<f64> = (0..40).map(|k| 1.0 - (-(k as f64) * 0.3).exp()).collect();
        let mut with_peak = base.clone();
        with_peak[5] = 1.25;
        let scaled: Vec<f64> = with_peak.iter().map(|v| 7.0 + 3.0 * v).collect();
        let t1 = synth(&with_peak, 0.1, TrackedVariable::CR);
        let t2 = synth(&scaled, 0.1, TrackedVariable::CR);
        let o1 = overshoot(&t1, TrackedVariable::CR, 0.0, 0.0, 1.0).unwrap();
        let o2 = overshoot(&t2, TrackedVariable::CR, 0.0, 7.0, 10.0).unwrap();
        assert_relative_eq!(o1, o2, max_relative = 1e-12);
    }

    #[test]
    fn settling_time_examples() {
        // Instant jump settles immediately.
        let jump = vec![1.0; 20];
        let traj = synth(&jump, 0.1, TrackedVariable::QF);
        assert_eq!(
            settling_time(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0, 2.0),
            Some(0.0)
        );

        // First-order response: settles at ≈ ln(50)·τ for a 2 % band.
        let tau = 2.0;
        let ts = 0.01;
        let resp: Vec<f64> = (0..2000)
            .map(|k| 1.0 - (-(k as f64) * ts / tau).exp())
            .collect();
        let traj = synth(&resp, ts, TrackedVariable::QF);
        let t_settle = settling_time(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0, 2.0).unwrap();
        assert!((t_settle - 50f64.ln() * tau).abs() <= ts + 1e-12);

        // Never enters the band.
        let off = vec![0.5; 20];
        let traj = synth(&off, 0.1, TrackedVariable::QF);
        assert_eq!(
            settling_time(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0, 2.0),
            None
        );
    }

    #[test]
    fn settling_time_monotone_in_band() {
        let resp: Vec<f64> = (0..500)
            .map(|k| 1.0 - (-(k as f64) * 0.01 / 0.5).exp())
            .collect();
        let traj = synth(&resp, 0.01, TrackedVariable::QF);
        let mut last = f64::INFINITY;
        for band in [1.0, 2.0, 5.0, 10.0] {
            let t = settling_time(&traj, TrackedVariable::QF, 0.0, 0.0, 1.0, band).unwrap();
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn stddev_examples() {
        let traj = synth(&[1.0, -1.0], 0.1, TrackedVariable::CR);
        let sigma =
            error_stddev(&traj, TrackedVariable::CR, &Signal::constant(0.0), (0.0, 1.0)).unwrap();
        assert_relative_eq!(sigma, 1.0, max_relative = 1e-12);

        let flat = synth(&[2.0; 10], 0.1, TrackedVariable::CR);
        assert_eq!(
            error_stddev(&flat, TrackedVariable::CR, &Signal::constant(2.0), (0.0, 1.0)).unwrap(),
            0.0
        );

        // Diff arithmetic: σ_candidate = 0.199·σ_baseline → 80.1 % reduction.
        let reduction = 100.0 * (1.0 - 0.199);
        assert_relative_eq!(reduction, 80.1, max_relative = 1e-12);
    }

    #[test]
    fn surface_reference_cell_and_shape() {
        let grid = efficiency_surface(0.04, 25.0, (0.01, 0.05), (20.0, 100.0), 5, 5).unwrap();
        assert_relative_eq!(grid.eta[4][4], 80.0, max_relative = 1e-12);
        assert!(grid.is_strictly_monotone());
    }

    #[test]
    fn surface_zero_filtrate_is_flat_hundred() {
        let grid = efficiency_surface(0.0, 25.0, (0.01, 0.05), (20.0, 100.0), 3, 3).unwrap();
        assert!(grid
            .eta
            .iter()
            .flatten()
            .all(|&v| (v - 100.0).abs() < 1e-12));
    }

    #[test]
    fn surface_product_symmetry() {
        // Axes chosen so products collide: (1,4) and (2,2) and (4,1).
        let grid = efficiency_surface(0.04, 25.0, (1.0, 4.0), (1.0, 4.0), 4, 4).unwrap();
        let product = |i: usize, j: usize| grid.f_in[i] * grid.c_in[j];
        for i1 in 0..4 {
            for j1 in 0..4 {
                for i2 in 0..4 {
                    for j2 in 0..4 {
                        if (product(i1, j1) - product(i2, j2)).abs() < 1e-12 {
                            assert!((grid.eta[i1][j1] - grid.eta[i2][j2]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn step_detection() {
        let s = Signal::step(2.0, 30.0, 2.5);
        let step = detect_step(&s).unwrap();
        assert_eq!(step.time, 30.0);
        assert_eq!(step.initial, 2.0);
        assert_eq!(step.target, 2.5);
        assert!(detect_step(&Signal::constant(1.0)).is_none());
    }
}

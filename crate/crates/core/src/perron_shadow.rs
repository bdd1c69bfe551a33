//! Bounded solutions of the forced equation `x' = L(t) x_t + z(t)` through
//! the dichotomy Green's sum, and the shadowing harness built on it.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSpec;
use crate::dichotomy::{DichotomySplit, Verdict};
use crate::error::{Error, Result};
use crate::evolution::TransitionSequence;
use crate::integrator::{defect, defect_at, solve, Forcing, IvpProblem};
use crate::segment::{inf_norm, Segment};
use crate::trajectory::{extract_segment, Trajectory};

/// One-window increments `b(n)`: segment at `(n+1)h` of the forced solution
/// on `[nh, (n+1)h]` started from the zero segment.
#[derive(Debug, Clone)]
pub struct WindowForcing {
    pub increments: Vec<Segment>,
    /// `sup |z|` sampled at the integration mesh over the horizon.
    pub sup_z: f64,
}

impl WindowForcing {
    pub fn sup_b(&self) -> f64 {
        self.increments.iter().map(Segment::sup_norm).fold(0.0, f64::max)
    }
}

fn check_horizon(l: &CoefficientSpec, seq: &TransitionSequence) -> Result<()> {
    let horizon = seq.count() as f64 * seq.h;
    if horizon > l.t_max() + 1e-12 {
        return Err(Error::Parameter(format!("horizon {horizon} exceeds the coefficient time domain {}", l.t_max())));
    }
    if seq.grid.d() != l.d() || (seq.grid.r() - l.r()).abs() > 1e-14 * (1.0 + l.r()) {
        return Err(Error::Shape("sequence grid does not match coefficients".into()));
    }
    Ok(())
}

pub fn window_increments(l: &CoefficientSpec, z: &Forcing<'_>, seq: &TransitionSequence) -> Result<WindowForcing> {
    check_horizon(l, seq)?;
    let grid = &seq.grid;
    let increments = (0..seq.count())
        .into_par_iter()
        .map(|n| {
            let problem = IvpProblem {
                coefficients: l,
                s: seq.time(n),
                initial: Segment::zeros(grid.clone()),
                t_end: seq.time(n + 1),
                forcing: Some(z),
                step: seq.h_int,
            };
            extract_segment(&solve(&problem)?, seq.time(n + 1), grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let steps = ((seq.count() as f64 * seq.h) / seq.h_int).ceil() as usize;
    let mut buf = vec![0.0; l.d()];
    let mut sup_z = 0.0f64;
    for i in 0..=steps {
        z((i as f64 * seq.h_int).min(seq.count() as f64 * seq.h), &mut buf);
        sup_z = sup_z.max(inf_norm(&buf));
    }
    Ok(WindowForcing { increments, sup_z })
}

/// Bounded solution of the forced window recursion `w(n+1) = A(n) w(n) + b(n)`.
#[derive(Debug, Clone)]
pub struct PerronSolution {
    /// `w(n)`, `n = 0..=count`.
    pub w: Vec<Segment>,
    pub bound_a: f64,
    pub sup_w: f64,
    pub sup_z: f64,
    pub sup_b: f64,
    /// `max ||w(n+1) - A(n) w(n) - b(n)|| / sup ||b||` over non-transient windows.
    pub recurrence_residual: f64,
    /// Bound on the truncated anticausal tail at each `n`.
    pub tail_bound: Vec<f64>,
    pub ablated: bool,
}

/// Green's sum: causal part through `P`, anticausal part through the
/// restricted inverse on the unstable frames. With `ablate_anticausal` the
/// recursion is run forward from `w(0) = 0` instead (negative control).
pub fn greens_sum(seq: &TransitionSequence, split: &DichotomySplit, b: &WindowForcing, ablate_anticausal: bool) -> Result<PerronSolution> {
    if split.verdict != Verdict::Dichotomy {
        return Err(Error::Refusal(format!(
            "no dichotomy detected (verdict {:?}); a bounded solution is not guaranteed",
            split.verdict
        )));
    }
    let count = seq.count();
    if b.increments.len() != count || split.projections.len() != count + 1 {
        return Err(Error::Shape(format!("{} increments for {count} windows", b.increments.len())));
    }
    let bs: Vec<DVector<f64>> = b.increments.iter().map(Segment::flat).collect();
    let dim = seq.dim();

    let mut w = Vec::with_capacity(count + 1);
    if ablate_anticausal {
        w.push(DVector::zeros(dim));
        for n in 0..count {
            let next = seq.window(n) * &w[n] + &bs[n];
            w.push(next);
        }
    } else {
        let mut causal = Vec::with_capacity(count + 1);
        causal.push(DVector::zeros(dim));
        for n in 0..count {
            let next = &split.projections[n + 1] * (seq.window(n) * &causal[n] + &bs[n]);
            causal.push(next);
        }
        let k = split.k;
        let mut alpha = vec![DVector::zeros(k); count + 1];
        for n in (0..count).rev() {
            if k == 0 {
                break;
            }
            let rhs = &split.unstable_coordinates[n + 1] * &bs[n] + &alpha[n + 1];
            alpha[n] = split.unstable_coupling[n]
                .clone()
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SplittingDegeneracy { window: n, angle: 0.0 })?;
        }
        for n in 0..=count {
            let anti = &split.unstable_frames[n] * &alpha[n];
            w.push(&causal[n] - anti);
        }
    }

    let sup_b = bs.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let mut recurrence_residual = 0.0f64;
    for n in 0..count {
        if split.transient[n] || split.transient[n + 1] {
            continue;
        }
        let r = (&w[n + 1] - seq.window(n) * &w[n] - &bs[n]).amax();
        recurrence_residual = recurrence_residual.max(if sup_b > 0.0 { r / sup_b } else { r });
    }
    let tail_bound = (0..=count)
        .map(|n| match (split.k, split.d_u, split.lambda_u) {
            (0, _, _) => 0.0,
            (_, Some(d), Some(lam)) if lam > 0.0 => {
                d * (-lam * (count - n) as f64 * seq.h).exp() / (1.0 - (-lam * seq.h).exp()) * sup_b
            }
            _ => f64::INFINITY,
        })
        .collect();

    let w: Vec<Segment> = w.iter().map(|v| Segment::from_flat(seq.grid.clone(), v.as_slice())).collect::<Result<_>>()?;
    let sup_w = w.iter().map(Segment::sup_norm).fold(0.0, f64::max);
    let bound_a = if b.sup_z > 0.0 { sup_w / b.sup_z } else { 0.0 };
    Ok(PerronSolution { w, bound_a, sup_w, sup_z: b.sup_z, sup_b, recurrence_residual, tail_bound, ablated: ablate_anticausal })
}

/// Solution of the forced equation on the horizon from the segments `w(n)`,
/// one forced window solve per window, concatenated.
pub fn perron_trajectory(l: &CoefficientSpec, z: &Forcing<'_>, seq: &TransitionSequence, sol: &PerronSolution) -> Result<Trajectory> {
    check_horizon(l, seq)?;
    let pieces = (0..seq.count())
        .into_par_iter()
        .map(|n| {
            solve(&IvpProblem {
                coefficients: l,
                s: seq.time(n),
                initial: sol.w[n].clone(),
                t_end: seq.time(n + 1),
                forcing: Some(z),
                step: seq.h_int,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = l.d();
    let (mut times, mut states, mut derivs) = (Vec::new(), Vec::new(), Vec::new());
    let mut breakpoints = Vec::new();
    for (n, piece) in pieces.iter().enumerate() {
        // shared boundaries come from the later window, whose derivative is right-sided
        let skip_last = n + 1 < pieces.len();
        let len = piece.times().len() - usize::from(skip_last);
        for k in 0..len {
            times.push(piece.times()[k]);
            states.extend_from_slice(piece.state(k));
            derivs.extend_from_slice(piece.derivative(k));
        }
        breakpoints.extend_from_slice(piece.breakpoints());
    }
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(Trajectory::from_parts(d, Some(sol.w[0].clone()), times, states, derivs, breakpoints))
}

/// Result of shadowing a pseudo-solution by a true solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowReport {
    pub schema: String,
    pub delta: f64,
    pub shadow_distance: f64,
    pub kappa: f64,
    pub epsilon_requested: Option<f64>,
    pub epsilon_met: Option<bool>,
    /// Defect of the corrected trajectory itself.
    pub corrected_defect: f64,
    /// Distance between the corrected trajectory and a plain re-integration
    /// from its initial segment; large values signal unstable directions.
    pub reintegration_gap: Option<f64>,
    pub bound_a: f64,
    pub recurrence_residual: f64,
    pub ablated: bool,
    pub horizon: f64,
    #[serde(skip)]
    pub corrected: Option<Trajectory>,
}

fn sup_over(traj: &Trajectory) -> f64 {
    let samples = (0..traj.times().len()).map(|k| inf_norm(traj.state(k))).fold(0.0, f64::max);
    traj.history().map_or(samples, |h| samples.max(h.sup_norm()))
}

/// Corrects `y` by the bounded solution of `w' = L w_t - z`, `z` the defect of `y`.
pub fn shadow(
    l: &CoefficientSpec,
    y: &Trajectory,
    seq: &TransitionSequence,
    split: &DichotomySplit,
    epsilon: Option<f64>,
    ablate_anticausal: bool,
) -> Result<ShadowReport> {
    check_horizon(l, seq)?;
    let horizon = seq.count() as f64 * seq.h;
    if y.t_start() > -l.r() + 1e-12 || y.t_end() < horizon - 1e-12 {
        return Err(Error::InsufficientHistory { needed: -l.r(), available: y.t_start() });
    }
    let def = defect(l, y)?;
    let delta = def
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t <= horizon + 1e-12)
        .map(|(k, _)| inf_norm(def.at(k)))
        .fold(0.0, f64::max);
    let base = ShadowReport {
        schema: "v1".into(),
        delta,
        shadow_distance: 0.0,
        kappa: 0.0,
        epsilon_requested: epsilon,
        epsilon_met: epsilon.map(|_| true),
        corrected_defect: delta,
        reintegration_gap: None,
        bound_a: 0.0,
        recurrence_residual: 0.0,
        ablated: ablate_anticausal,
        horizon,
        corrected: Some(y.clone()),
    };
    if delta == 0.0 {
        return Ok(base);
    }

    let d = l.d();
    let forcing = |t: f64, out: &mut [f64]| match defect_at(l, y, t) {
        Ok(z) => out.iter_mut().zip(z).for_each(|(o, v)| *o = -v),
        Err(_) => out.fill(f64::NAN),
    };
    let b = window_increments(l, &forcing, seq)?;
    let sol = greens_sum(seq, split, &b, ablate_anticausal)?;
    let w = perron_trajectory(l, &forcing, seq, &sol)?;
    let shadow_distance = sup_over(&w);

    // corrected trajectory x = y + w on the mesh of w
    let mut states = Vec::with_capacity(w.times().len() * d);
    let mut derivs = Vec::with_capacity(w.times().len() * d);
    for (k, &t) in w.times().iter().enumerate() {
        let yt = y.eval(t)?;
        let dyt = y.derivative_at(t)?;
        states.extend(yt.iter().zip(w.state(k)).map(|(a, c)| a + c));
        derivs.extend(dyt.iter().zip(w.derivative(k)).map(|(a, c)| a + c));
    }
    let y0 = extract_segment(y, 0.0, &seq.grid)?;
    let x0 = y0.add(&sol.w[0])?;
    let x = Trajectory::from_samples(d, w.times().to_vec(), states, Some(derivs))?.with_history(x0.clone())?;
    let corrected_defect = defect(l, &x)?.delta;

    let reintegration_gap = solve(&IvpProblem {
        coefficients: l,
        s: 0.0,
        initial: x0,
        t_end: horizon,
        forcing: None,
        step: seq.h_int,
    })
    .ok()
    .map(|re| {
        (0..x.times().len())
            .map(|k| {
                let xr = re.eval(x.times()[k]).unwrap_or_else(|_| vec![f64::INFINITY; d]);
                xr.iter().zip(x.state(k)).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    });

    Ok(ShadowReport {
        shadow_distance,
        kappa: shadow_distance / delta,
        epsilon_met: epsilon.map(|e| shadow_distance <= e),
        corrected_defect,
        reintegration_gap,
        bound_a: sol.bound_a,
        recurrence_residual: sol.recurrence_residual,
        corrected: Some(x),
        ..base
    })
}

/// Perturbation profile `p_i(t) = sin(t + 1 + i) (1 - e^{-(t + r)})^2` for `t >= -r`.
fn perturbation(t: f64, r: f64, i: usize) -> (f64, f64) {
    let e = (-(t + r)).exp();
    let damp = 1.0 - e;
    let (s, c) = (t + 1.0 + i as f64).sin_cos();
    (s * damp * damp, c * damp * damp + 2.0 * s * damp * e)
}

/// True solution from `phi` plus `delta * p`. The perturbation starts at the
/// left end of the history with zero value and slope, so the pseudo-solution
/// has a smooth, perturbed initial segment `phi + delta * p_0`.
pub fn perturbed_solution(l: &CoefficientSpec, phi: &Segment, t_end: f64, delta: f64, h_int: f64) -> Result<Trajectory> {
    let truth = solve(&IvpProblem { coefficients: l, s: 0.0, initial: phi.clone(), t_end, forcing: None, step: h_int })?;
    let (d, r) = (l.d(), l.r());
    let mut states = Vec::with_capacity(truth.times().len() * d);
    let mut derivs = Vec::with_capacity(truth.times().len() * d);
    for (k, &t) in truth.times().iter().enumerate() {
        for i in 0..d {
            let (p, dp) = perturbation(t, r, i);
            states.push(truth.state(k)[i] + delta * p);
            derivs.push(truth.derivative(k)[i] + delta * dp);
        }
    }
    let history = Segment::from_fn(phi.grid().clone(), |theta| {
        let base = phi.eval(theta).expect("node inside segment domain");
        (0..d).map(|i| base[i] + delta * perturbation(theta, r, i).0).collect()
    })?;
    Trajectory::from_samples(d, truth.times().to_vec(), states, Some(derivs))?.with_history(history)
}

/// Bounded continuous forcing through values at equally spaced knots,
/// joined by smoothstep so that the forcing is C^1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnotForcing {
    pub spacing: f64,
    /// `knots[k][i]`: component `i` at time `k * spacing`.
    pub knots: Vec<Vec<f64>>,
}

impl KnotForcing {
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let u = (t / self.spacing).max(0.0);
        let k = (u.floor() as usize).min(self.knots.len().saturating_sub(2));
        let f = (u - k as f64).clamp(0.0, 1.0);
        let s = f * f * (3.0 - 2.0 * f);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.knots[k][i] * (1.0 - s) + self.knots[k + 1][i] * s;
        }
    }

    pub fn sup(&self) -> f64 {
        self.knots.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::MatrixFn;
    use crate::dichotomy::{analyze, DichotomyConfig};
    use crate::evolution::build_sequence;
    use crate::segment::make_grid;
    use approx::assert_abs_diff_eq;

    fn ode(a: f64, count: usize) -> (CoefficientSpec, TransitionSequence, DichotomySplit) {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::scalar(a)).unwrap();
        let grid = make_grid(0.0, 1, 1).unwrap();
        let seq = build_sequence(&l, 1.0, count, &grid, 1e-3).unwrap();
        let split = analyze(&seq, &DichotomyConfig { window_m: Some(4), ..Default::default() }).unwrap().split.unwrap();
        (l, seq, split)
    }

    #[test]
    fn zero_forcing_gives_zero_increments() {
        let (l, seq, split) = ode(-1.0, 12);
        let b = window_increments(&l, &|_, o: &mut [f64]| o.fill(0.0), &seq).unwrap();
        assert!(b.increments.iter().all(|s| s.sup_norm() == 0.0));
        let sol = greens_sum(&seq, &split, &b, false).unwrap();
        assert_eq!(sol.sup_w, 0.0);
    }

    #[test]
    fn pure_integration_increment() {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::scalar(0.0)).unwrap();
        let grid = make_grid(0.0, 1, 1).unwrap();
        let seq = build_sequence(&l, 1.0, 5, &grid, 1e-3).unwrap();
        let b = window_increments(&l, &|_, o: &mut [f64]| o.fill(1.0), &seq).unwrap();
        for s in &b.increments {
            assert_abs_diff_eq!(s.values()[(0, 0)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn delay_increment_first_interval() {
        let l = CoefficientSpec::new(1.0, 1).unwrap().with_discrete(1.0, MatrixFn::scalar(-1.0)).unwrap();
        let grid = make_grid(1.0, 1, 12).unwrap();
        let seq = build_sequence(&l, 1.0, 4, &grid, 1e-3).unwrap();
        let b = window_increments(&l, &|_, o: &mut [f64]| o.fill(1.0), &seq).unwrap();
        for (j, &theta) in grid.nodes().iter().enumerate() {
            assert_abs_diff_eq!(b.increments[0].values()[(0, j)], 1.0 + theta, epsilon = 1e-10);
        }
    }

    #[test]
    fn stable_ode_bounded_solution() {
        let (l, seq, split) = ode(-1.0, 30);
        let b = window_increments(&l, &|_, o: &mut [f64]| o.fill(1.0), &seq).unwrap();
        let sol = greens_sum(&seq, &split, &b, false).unwrap();
        for n in 20..=30 {
            assert_abs_diff_eq!(sol.w[n].values()[(0, 0)], 1.0, epsilon = 1e-6);
        }
        assert!(sol.recurrence_residual < 1e-12);
    }

    #[test]
    fn unstable_ode_anticausal_branch() {
        let (l, seq, split) = ode(1.0, 40);
        assert_eq!(split.k, 1);
        let b = window_increments(&l, &|_, o: &mut [f64]| o.fill(1.0), &seq).unwrap();
        let sol = greens_sum(&seq, &split, &b, false).unwrap();
        for n in 0..=20 {
            assert_abs_diff_eq!(sol.w[n].values()[(0, 0)], -1.0, epsilon = 1e-6);
        }
        assert!(sol.recurrence_residual < 1e-9);
        let ablated = greens_sum(&seq, &split, &b, true).unwrap();
        assert!(ablated.sup_w > 1e10);
    }

    #[test]
    fn refuses_without_dichotomy() {
        let (l, seq, _) = ode(0.0, 12);
        let split = analyze(&seq, &DichotomyConfig::default()).unwrap().split.unwrap();
        let b = window_increments(&l, &|_, o: &mut [f64]| o.fill(1.0), &seq).unwrap();
        assert!(matches!(greens_sum(&seq, &split, &b, false), Err(Error::Refusal(_))));
    }

    #[test]
    fn true_solution_is_its_own_shadow() {
        let (l, seq, split) = ode(-1.0, 12);
        let phi = Segment::constant(seq.grid.clone(), &[1.0]).unwrap();
        let y = perturbed_solution(&l, &phi, 12.0, 0.0, 1e-3).unwrap();
        let rep = shadow(&l, &y, &seq, &split, None, false).unwrap();
        assert!(rep.shadow_distance <= 1e-8);
    }

    #[test]
    fn scalar_shadow_removes_defect() {
        let (l, seq, split) = ode(-1.0, 12);
        let phi = Segment::constant(seq.grid.clone(), &[1.0]).unwrap();
        let y = perturbed_solution(&l, &phi, 12.0, 1e-3, 1e-3).unwrap();
        let rep = shadow(&l, &y, &seq, &split, Some(1e-2), false).unwrap();
        assert!(rep.delta > 1e-4 && rep.kappa.is_finite());
        assert!(rep.corrected_defect < 1e-8, "{}", rep.corrected_defect);
        assert_eq!(rep.epsilon_met, Some(true));
    }
}

//! Method-of-steps integration with classical RK4 and Hermite dense output.
//!
//! The step is snapped so that it divides every discrete delay; delayed
//! arguments then fall on completed steps and the breakpoints `s + k tau`
//! are mesh points.

use crate::coefficients::{CoefficientSpec, Refinement};
use crate::error::{Error, Result};
use crate::segment::inf_norm;
use crate::segment::Segment;
use crate::trajectory::{hermite, Trajectory};

/// Abort threshold for `|x(t)|_inf`.
pub const BLOW_UP: f64 = 1e12;

/// Continuous forcing `z(t)`, written into the output slice.
pub type Forcing<'f> = dyn Fn(f64, &mut [f64]) + Sync + 'f;

/// Initial value problem for `x'(t) = L(t) x_t + z(t)`, `x_s = phi`.
pub struct IvpProblem<'a> {
    pub coefficients: &'a CoefficientSpec,
    pub s: f64,
    pub initial: Segment,
    pub t_end: f64,
    pub forcing: Option<&'a Forcing<'a>>,
    pub step: f64,
}

/// Snaps `h_int` to `tau_min / ceil(tau_min / h_int)` and checks it divides every delay.
pub fn adjusted_step(l: &CoefficientSpec, h_int: f64) -> Result<f64> {
    if !(h_int > 0.0 && h_int.is_finite()) {
        return Err(Error::Configuration(format!("step must be positive, got {h_int}")));
    }
    let delays = l.delays();
    let Some(tau_min) = delays.iter().copied().reduce(f64::min) else {
        return Ok(h_int);
    };
    let h = tau_min / (tau_min / h_int - 1e-9).ceil().max(1.0);
    for &tau in &delays {
        let q = tau / h;
        if (q - q.round()).abs() * h > 1e-12 {
            return Err(Error::Configuration(format!(
                "no step near {h_int} divides all delays (tau = {tau}, h = {h})"
            )));
        }
    }
    Ok(h)
}

pub(crate) fn build_mesh(s: f64, t_end: f64, h: f64, refinements: &[Refinement]) -> Vec<f64> {
    let span = t_end - s;
    let tol = 1e-12 * (1.0 + t_end.abs().max(s.abs()));
    let steps = (span / h + 1e-9).floor() as usize;
    let mut base: Vec<f64> = (0..=steps).map(|k| s + k as f64 * h).collect();
    if let Some(last) = base.last_mut() {
        if (t_end - *last).abs() <= tol || *last > t_end {
            *last = t_end;
        } else {
            base.push(t_end);
        }
    }
    if span <= tol {
        return vec![s];
    }
    let active: Vec<&Refinement> = refinements.iter().filter(|r| r.end > s && r.start < t_end).collect();
    if active.is_empty() {
        return base;
    }
    let mut mesh = Vec::with_capacity(base.len());
    mesh.push(base[0]);
    let mut first = 0;
    for w in base.windows(2) {
        let (a, b) = (w[0], w[1]);
        while first < active.len() && active[first].end <= a {
            first += 1;
        }
        let mut cursor = a;
        for rf in active[first..].iter().take_while(|rf| rf.start < b) {
            let lo = rf.start.max(a);
            let hi = rf.end.min(b);
            if hi <= cursor {
                continue;
            }
            let lo = lo.max(cursor);
            if lo > cursor + tol {
                mesh.push(lo);
            }
            let k = ((hi - lo) / rf.max_step).ceil().max(1.0) as usize;
            for i in 1..=k {
                let t = if i == k { hi } else { lo + (hi - lo) * i as f64 / k as f64 };
                mesh.push(t);
            }
            cursor = hi;
        }
        if b > cursor + tol {
            mesh.push(b);
        } else if let Some(last) = mesh.last_mut() {
            *last = b;
        }
    }
    mesh.dedup_by(|x, y| (*x - *y).abs() <= tol);
    mesh
}

struct Samples {
    d: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
}

impl Samples {
    /// Hermite interpolation on completed samples; `t` must lie in `[t_0, t_last]`.
    fn eval(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        let d = self.d;
        if n == 1 || t >= self.times[n - 1] {
            out.copy_from_slice(&self.states[(n - 1) * d..n * d]);
            return;
        }
        let k = self.times.partition_point(|&x| x <= t).saturating_sub(1);
        hermite(
            self.times[k],
            self.times[k + 1],
            &self.states[k * d..(k + 1) * d],
            &self.derivs[k * d..(k + 1) * d],
            &self.states[(k + 1) * d..(k + 2) * d],
            &self.derivs[(k + 1) * d..(k + 2) * d],
            t,
            out,
        );
    }
}

struct Rhs<'a> {
    l: &'a CoefficientSpec,
    history: &'a Segment,
    s: f64,
    forcing: Option<&'a Forcing<'a>>,
}

impl Rhs<'_> {
    /// `f(t, x)` for a stage at `t` with stage state `x`; the last completed
    /// sample is `(t_n, x_n, dx_n)`.
    fn eval(&self, samples: &Samples, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = samples.times.len();
        let d = samples.d;
        let t_n = samples.times[n - 1];
        let x_n = &samples.states[(n - 1) * d..n * d];
        let dx_n = &samples.derivs[(n - 1) * d..n * d];
        let span = t - t_n;
        self.l.apply_with(
            t,
            x,
            |theta, buf| {
                let tt = t + theta;
                if tt < self.s {
                    let v = self.history.eval((tt - self.s).max(-self.history.grid().r()))?;
                    buf.copy_from_slice(v.as_slice());
                } else if tt <= t_n || span <= 0.0 {
                    samples.eval(tt.min(t_n), buf);
                } else {
                    // inside the running step: quadratic through (t_n, x_n, dx_n) and the stage
                    let tau = tt - t_n;
                    let q = (tau / span).powi(2);
                    for i in 0..buf.len() {
                        buf[i] = x_n[i] + dx_n[i] * tau + (x[i] - x_n[i] - dx_n[i] * span) * q;
                    }
                }
                Ok(())
            },
            out,
        )?;
        if let Some(z) = self.forcing {
            let mut zt = vec![0.0; out.len()];
            z(t, &mut zt);
            out.iter_mut().zip(&zt).for_each(|(o, v)| *o += v);
        }
        Ok(())
    }
}

/// Solves the initial value problem on `[s - r, t_end]`.
pub fn solve(problem: &IvpProblem<'_>) -> Result<Trajectory> {
    let l = problem.coefficients;
    let (s, t_end) = (problem.s, problem.t_end);
    if !(t_end >= s) {
        return Err(Error::Parameter(format!("t_end = {t_end} precedes s = {s}")));
    }
    let g = problem.initial.grid();
    if g.d() != l.d() || (g.r() - l.r()).abs() > 1e-14 * (1.0 + l.r()) {
        return Err(Error::Shape("initial segment grid does not match coefficients".into()));
    }
    l.check_time(s)?;
    l.check_time(t_end)?;
    let h = adjusted_step(l, problem.step)?;
    let mesh = build_mesh(s, t_end, h, l.refinements());
    let d = l.d();

    let mut breakpoints = vec![s];
    for tau in l.delays() {
        let mut k = 1;
        while s + k as f64 * tau <= t_end + 1e-12 {
            breakpoints.push(s + k as f64 * tau);
            k += 1;
        }
    }
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let rhs = Rhs { l, history: &problem.initial, s, forcing: problem.forcing };
    let x0 = problem.initial.eval(0.0)?;
    let mut samples = Samples {
        d,
        times: Vec::with_capacity(mesh.len()),
        states: Vec::with_capacity(mesh.len() * d),
        derivs: Vec::with_capacity(mesh.len() * d),
    };
    samples.times.push(s);
    samples.states.extend_from_slice(x0.as_slice());
    samples.derivs.extend(std::iter::repeat_n(0.0, d));

    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut stage = vec![0.0; d];
    let mut x = x0.as_slice().to_vec();

    // right-hand derivative at s
    rhs.eval(&samples, s, &x, &mut k1)?;
    samples.derivs[..d].copy_from_slice(&k1);

    for w in mesh.windows(2) {
        let (t_n, t_next) = (w[0], w[1]);
        let hn = t_next - t_n;
        let n = samples.times.len();
        k1.copy_from_slice(&samples.derivs[(n - 1) * d..n * d]);

        for i in 0..d {
            stage[i] = x[i] + 0.5 * hn * k1[i];
        }
        rhs.eval(&samples, t_n + 0.5 * hn, &stage, &mut k2)?;
        for i in 0..d {
            stage[i] = x[i] + 0.5 * hn * k2[i];
        }
        rhs.eval(&samples, t_n + 0.5 * hn, &stage, &mut k3)?;
        for i in 0..d {
            stage[i] = x[i] + hn * k3[i];
        }
        rhs.eval(&samples, t_next, &stage, &mut k4)?;
        for i in 0..d {
            x[i] += hn / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) || inf_norm(&x) > BLOW_UP {
            return Err(Error::BlowUp { last_valid_t: t_n });
        }
        samples.times.push(t_next);
        samples.states.extend_from_slice(&x);
        samples.derivs.extend(std::iter::repeat_n(0.0, d));
        let n = samples.times.len();
        let mut dx = vec![0.0; d];
        rhs.eval(&samples, t_next, &x, &mut dx)?;
        samples.derivs[(n - 1) * d..n * d].copy_from_slice(&dx);
    }

    Ok(Trajectory::from_parts(
        d,
        Some(problem.initial.clone()),
        samples.times,
        samples.states,
        samples.derivs,
        breakpoints,
    ))
}

/// Residual `z(t) = y'(t) - L(t) y_t` of a candidate solution.
#[derive(Debug, Clone)]
pub struct Defect {
    pub d: usize,
    pub times: Vec<f64>,
    /// Row-major samples of `z`, `values[k d + i]`.
    pub values: Vec<f64>,
    /// `max_k |z(t_k)|_inf`.
    pub delta: f64,
    /// Largest sample spacing; `y` is only resolved down to this scale.
    pub mesh_resolution: f64,
}

impl Defect {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }
}

/// `z(t) = y'(t) - L(t) y_t` at an arbitrary time, using the Hermite derivative of `y`.
pub fn defect_at(l: &CoefficientSpec, y: &Trajectory, t: f64) -> Result<Vec<f64>> {
    let dy = y.derivative_at(t)?;
    let x = y.eval(t)?;
    let mut ly = vec![0.0; l.d()];
    l.apply_with(t, &x, |theta, buf| y.eval_into((t + theta).max(y.t_start()), buf), &mut ly)?;
    Ok(dy.iter().zip(&ly).map(|(a, b)| a - b).collect())
}

/// Samples the defect on the trajectory mesh wherever `y_t` is defined.
pub fn defect(l: &CoefficientSpec, y: &Trajectory) -> Result<Defect> {
    if y.d() != l.d() {
        return Err(Error::Shape(format!("trajectory dimension {} vs d = {}", y.d(), l.d())));
    }
    let first = y.t_start() + l.r();
    if y.t_end() < first {
        return Err(Error::InsufficientHistory { needed: y.t_end() - l.r(), available: y.t_start() });
    }
    let d = l.d();
    let tol = 1e-12 * (1.0 + first.abs());
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut delta = 0.0f64;
    let mut ly = vec![0.0; d];
    for (k, &t) in y.times().iter().enumerate() {
        if t < first - tol || t > l.t_max() {
            continue;
        }
        let x = y.state(k);
        l.apply_with(t, x, |theta, buf| y.eval_into((t + theta).max(y.t_start()), buf), &mut ly)?;
        for i in 0..d {
            let z = y.derivative(k)[i] - ly[i];
            delta = delta.max(z.abs());
            values.push(z);
        }
        times.push(t);
    }
    Ok(Defect { d, times, values, delta, mesh_resolution: y.mesh_resolution() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::MatrixFn;
    use crate::segment::make_grid;
    use crate::trajectory::extract_segment;
    use approx::assert_abs_diff_eq;

    fn pure_delay(a: f64) -> CoefficientSpec {
        CoefficientSpec::new(1.0, 1).unwrap().with_discrete(1.0, MatrixFn::scalar(a)).unwrap()
    }

    fn run(l: &CoefficientSpec, phi: Segment, t_end: f64, h: f64) -> Trajectory {
        solve(&IvpProblem { coefficients: l, s: 0.0, initial: phi, t_end, forcing: None, step: h }).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let l = pure_delay(-1.0);
        let g = make_grid(1.0, 1, 8).unwrap();
        let traj = run(&l, Segment::zeros(g), 3.0, 1e-2);
        assert!(traj.times().iter().enumerate().all(|(k, _)| traj.state(k)[0] == 0.0));
    }

    #[test]
    fn first_interval_closed_form() {
        let l = pure_delay(-1.0);
        let g = make_grid(1.0, 1, 8).unwrap();
        let traj = run(&l, Segment::constant(g, &[1.0]).unwrap(), 2.0, 1e-3);
        for t in [0.0, 0.25, 0.5005, 0.77, 1.0] {
            assert_abs_diff_eq!(traj.eval(t).unwrap()[0], 1.0 - t, epsilon = 1e-10);
        }
        // second interval: x = 1 - t + (t - 1)^2 / 2
        assert_abs_diff_eq!(traj.eval(1.6).unwrap()[0], 1.0 - 1.6 + 0.18, epsilon = 1e-10);
        assert!(traj.breakpoints().contains(&1.0));
    }

    #[test]
    fn scalar_ode_matches_exponential() {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::scalar(-0.7)).unwrap();
        let g = make_grid(0.0, 1, 1).unwrap();
        let traj = run(&l, Segment::constant(g, &[2.0]).unwrap(), 3.0, 1e-3);
        assert_abs_diff_eq!(traj.eval(3.0).unwrap()[0], 2.0 * (-2.1f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn step_is_snapped_to_delays() {
        let l = pure_delay(1.0);
        assert_abs_diff_eq!(adjusted_step(&l, 0.3).unwrap(), 0.25, epsilon = 1e-15);
        let two = CoefficientSpec::new(1.0, 1)
            .unwrap()
            .with_discrete(1.0, MatrixFn::scalar(1.0))
            .unwrap()
            .with_discrete(1.0 / std::f64::consts::PI, MatrixFn::scalar(1.0))
            .unwrap();
        assert!(matches!(adjusted_step(&two, 1e-3), Err(Error::Configuration(_))));
    }

    #[test]
    fn blow_up_is_reported() {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::scalar(40.0)).unwrap();
        let g = make_grid(0.0, 1, 1).unwrap();
        let err = solve(&IvpProblem { coefficients: &l, s: 0.0, initial: Segment::constant(g, &[1.0]).unwrap(), t_end: 2.0, forcing: None, step: 1e-3 });
        assert!(matches!(err, Err(Error::BlowUp { .. })));
    }

    #[test]
    fn fourth_order_convergence_on_first_interval() {
        // x' = -x(t - 1) with phi(theta) = cos(3 theta): x(t) = 1 - sin(3) / 3 + sin(3 (1 - t)) / 3 ... on [0, 1]
        let l = pure_delay(-1.0);
        let g = make_grid(1.0, 1, 24).unwrap();
        let phi = Segment::from_fn(g, |t| vec![(3.0 * t).cos()]).unwrap();
        let exact = |t: f64| 1.0 - ((3.0 * (t - 1.0)).sin() + (3.0f64).sin()) / 3.0;
        let err = |h: f64| (run(&l, phi.clone(), 1.0, h).eval(1.0).unwrap()[0] - exact(1.0)).abs();
        let (e1, e2) = (err(0.1), err(0.05));
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio} ({e1:e}, {e2:e})");
    }

    #[test]
    fn flow_is_linear() {
        let l = CoefficientSpec::new(1.0, 1)
            .unwrap()
            .with_instantaneous(MatrixFn::scalar(0.3))
            .unwrap()
            .with_discrete(1.0, MatrixFn::scalar(-1.2))
            .unwrap();
        let g = make_grid(1.0, 1, 10).unwrap();
        let a = Segment::from_fn(g.clone(), |t| vec![t.sin()]).unwrap();
        let b = Segment::from_fn(g.clone(), |t| vec![1.0 + t * t]).unwrap();
        let ta = run(&l, a.clone(), 4.0, 1e-2);
        let tb = run(&l, b.clone(), 4.0, 1e-2);
        let tc = run(&l, a.scale(2.0).add(&b.scale(-0.5)).unwrap(), 4.0, 1e-2);
        for t in [0.3, 1.7, 3.9] {
            let lhs = tc.eval(t).unwrap()[0];
            let rhs = 2.0 * ta.eval(t).unwrap()[0] - 0.5 * tb.eval(t).unwrap()[0];
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn restart_reproduces_direct_solve() {
        let l = pure_delay(-1.0);
        let g = make_grid(1.0, 1, 32).unwrap();
        let phi = Segment::constant(g.clone(), &[1.0]).unwrap();
        let direct = run(&l, phi.clone(), 3.0, 1e-3);
        let first = run(&l, phi, 2.0, 1e-3);
        let seg = extract_segment(&first, 2.0, &g).unwrap();
        let second = solve(&IvpProblem { coefficients: &l, s: 2.0, initial: seg, t_end: 3.0, forcing: None, step: 1e-3 }).unwrap();
        assert_abs_diff_eq!(second.eval(3.0).unwrap()[0], direct.eval(3.0).unwrap()[0], epsilon = 1e-8);
    }

    #[test]
    fn defect_examples() {
        let l = pure_delay(-1.0);
        let g = make_grid(1.0, 1, 16).unwrap();
        let traj = run(&l, Segment::constant(g, &[1.0]).unwrap(), 4.0, 1e-3);
        assert!(defect(&l, &traj).unwrap().delta <= 1e-8);

        // y = 1 everywhere: y' = 0, L y_t = -1
        let times: Vec<f64> = (0..=50).map(|k| -1.0 + k as f64 * 0.1).collect();
        let n = times.len();
        let one = Trajectory::from_samples(1, times.clone(), vec![1.0; n], Some(vec![0.0; n])).unwrap();
        let z = defect(&l, &one).unwrap();
        assert_abs_diff_eq!(z.delta, 1.0, epsilon = 1e-14);

        // L = 0, y = eps sin t
        let zero = CoefficientSpec::new(1.0, 1).unwrap();
        let eps = 1e-3;
        let y = Trajectory::from_samples(
            1,
            times.clone(),
            times.iter().map(|t| eps * t.sin()).collect(),
            Some(times.iter().map(|t| eps * t.cos()).collect()),
        )
        .unwrap();
        let z = defect(&zero, &y).unwrap();
        assert_abs_diff_eq!(z.delta, eps, epsilon = 1e-15);
        assert_eq!(z.times[0], 0.0);
    }

    #[test]
    fn defect_needs_history() {
        let l = pure_delay(-1.0);
        let y = Trajectory::from_samples(1, vec![0.0, 0.5], vec![0.0, 0.0], None).unwrap();
        assert!(matches!(defect(&l, &y), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn refinement_inserts_substeps() {
        let rf = Refinement { start: 0.45, end: 0.55, max_step: 0.01 };
        let mesh = build_mesh(0.0, 1.0, 0.25, &[rf]);
        assert!(mesh.windows(2).all(|w| w[1] > w[0]));
        assert!(mesh.contains(&0.45) && mesh.contains(&0.55) && mesh.contains(&0.5));
        let inside = mesh.windows(2).filter(|w| w[0] >= 0.45 && w[1] <= 0.55).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!(inside <= 0.01 + 1e-15);
        assert_eq!(*mesh.last().unwrap(), 1.0);
    }
}

//! Dense trajectories with piecewise cubic Hermite interpolation.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::segment::{Grid, Segment};

/// A sampled solution or pseudo-solution on `[t_start, t_end]`.
///
/// Samples carry states and derivatives; between samples the trajectory is the
/// cubic Hermite interpolant. An optional history segment covers
/// `[t0 - r, t0]` exactly, where `t0` is the first sample time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    d: usize,
    history: Option<Segment>,
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
    breakpoints: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory from samples. Without derivatives, they are taken
    /// from the natural cubic spline through the states.
    pub fn from_samples(d: usize, times: Vec<f64>, states: Vec<f64>, derivs: Option<Vec<f64>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("state dimension must be positive".into()));
        }
        if times.is_empty() || states.len() != times.len() * d {
            return Err(Error::Shape(format!("{} samples with {} state entries (d = {d})", times.len(), states.len())));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("sample times must be strictly increasing".into()));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("trajectory states must be finite".into()));
        }
        let derivs = match derivs {
            Some(dv) => {
                if dv.len() != states.len() {
                    return Err(Error::Shape("derivative array does not match states".into()));
                }
                dv
            }
            None => spline_derivatives(d, &times, &states),
        };
        Ok(Self { d, history: None, times, states, derivs, breakpoints: Vec::new() })
    }

    pub(crate) fn from_parts(
        d: usize,
        history: Option<Segment>,
        times: Vec<f64>,
        states: Vec<f64>,
        derivs: Vec<f64>,
        breakpoints: Vec<f64>,
    ) -> Self {
        Self { d, history, times, states, derivs, breakpoints }
    }

    /// Attaches an exact history segment ending at the first sample time.
    pub fn with_history(mut self, history: Segment) -> Result<Self> {
        if history.grid().d() != self.d {
            return Err(Error::Shape("history dimension differs from trajectory".into()));
        }
        self.history = Some(history);
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn history(&self) -> Option<&Segment> {
        self.history.as_ref()
    }

    pub fn t_start(&self) -> f64 {
        match &self.history {
            Some(h) => self.times[0] - h.grid().r(),
            None => self.times[0],
        }
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d..(k + 1) * self.d]
    }

    pub fn derivative(&self, k: usize) -> &[f64] {
        &self.derivs[k * self.d..(k + 1) * self.d]
    }

    /// Method-of-steps knots `s + k tau` recorded by the integrator.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Largest spacing between consecutive samples.
    pub fn mesh_resolution(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    fn locate(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&x| x <= t);
        k.saturating_sub(1).min(self.times.len().saturating_sub(2))
    }

    fn check(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * (1.0 + t.abs());
        if t < self.t_start() - tol || t > self.t_end() + tol {
            return Err(Error::Domain(format!(
                "t = {t} outside trajectory range [{}, {}]",
                self.t_start(),
                self.t_end()
            )));
        }
        Ok(())
    }

    /// State at `t`, written into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check(t)?;
        if t < self.times[0] {
            if let Some(h) = &self.history {
                let theta = (t - self.times[0]).max(-h.grid().r());
                let v = h.eval(theta)?;
                out.copy_from_slice(v.as_slice());
                return Ok(());
            }
        }
        if self.times.len() == 1 {
            out.copy_from_slice(self.state(0));
            return Ok(());
        }
        let k = self.locate(t);
        hermite(
            self.times[k],
            self.times[k + 1],
            self.state(k),
            self.derivative(k),
            self.state(k + 1),
            self.derivative(k + 1),
            t,
            out,
        );
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// Derivative of the Hermite interpolant at `t >= t0` (right-hand at samples).
    pub fn derivative_at(&self, t: f64) -> Result<Vec<f64>> {
        self.check(t)?;
        if t < self.times[0] - 1e-12 * (1.0 + t.abs()) {
            return Err(Error::Domain(format!("derivative requested inside history at t = {t}")));
        }
        if self.times.len() == 1 {
            return Ok(self.derivative(0).to_vec());
        }
        let mut k = self.locate(t);
        if k + 1 < self.times.len() - 1 && t >= self.times[k + 1] {
            k += 1;
        }
        let mut out = vec![0.0; self.d];
        hermite_derivative(
            self.times[k],
            self.times[k + 1],
            self.state(k),
            self.derivative(k),
            self.state(k + 1),
            self.derivative(k + 1),
            t,
            &mut out,
        );
        Ok(out)
    }

    /// Writes `t, x_1..x_d, dx_1..dx_d` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.d).map(|i| format!("x{i}")));
        header.extend((1..=self.d).map(|i| format!("dx{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![format!("{t:.17e}")];
            row.extend(self.state(k).iter().map(|v| format!("{v:.17e}")));
            row.extend(self.derivative(k).iter().map(|v| format!("{v:.17e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV layout of [`Trajectory::write_csv`]; derivative columns are optional.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parameter("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(Error::Parameter("trajectory CSV must start with a 't' column".into()));
        }
        let nx = cols.iter().filter(|c| c.starts_with('x')).count();
        let ndx = cols.iter().filter(|c| c.starts_with("dx")).count();
        if nx == 0 || (ndx != 0 && ndx != nx) || cols.len() != 1 + nx + ndx {
            return Err(Error::Parameter(format!("unrecognized trajectory header '{header}'")));
        }
        let (mut times, mut states, mut derivs) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parameter(format!("line {}: {e}", lineno + 2)))?;
            if vals.len() != cols.len() {
                return Err(Error::Parameter(format!("line {}: expected {} fields", lineno + 2, cols.len())));
            }
            times.push(vals[0]);
            states.extend_from_slice(&vals[1..1 + nx]);
            derivs.extend_from_slice(&vals[1 + nx..]);
        }
        Self::from_samples(nx, times, states, if ndx > 0 { Some(derivs) } else { None })
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn hermite(t0: f64, t1: f64, x0: &[f64], m0: &[f64], x1: &[f64], m1: &[f64], t: f64, out: &mut [f64]) {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    for i in 0..out.len() {
        out[i] = h00 * x0[i] + h10 * h * m0[i] + h01 * x1[i] + h11 * h * m1[i];
    }
}

#[allow(clippy::too_many_arguments)]
fn hermite_derivative(t0: f64, t1: f64, x0: &[f64], m0: &[f64], x1: &[f64], m1: &[f64], t: f64, out: &mut [f64]) {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let d00 = (6.0 * s2 - 6.0 * s) / h;
    let d10 = 3.0 * s2 - 4.0 * s + 1.0;
    let d01 = (-6.0 * s2 + 6.0 * s) / h;
    let d11 = 3.0 * s2 - 2.0 * s;
    for i in 0..out.len() {
        out[i] = d00 * x0[i] + d10 * m0[i] + d01 * x1[i] + d11 * m1[i];
    }
}

/// Nodal derivatives of the natural cubic spline, component by component.
fn spline_derivatives(d: usize, times: &[f64], states: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut out = vec![0.0; states.len()];
    if n < 2 {
        return out;
    }
    if n == 2 {
        let h = times[1] - times[0];
        for i in 0..d {
            let slope = (states[d + i] - states[i]) / h;
            out[i] = slope;
            out[d + i] = slope;
        }
        return out;
    }
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    for i in 0..d {
        let y = |k: usize| states[k * d + i];
        // second derivatives M_k with M_0 = M_{n-1} = 0 (Thomas algorithm)
        let m = n - 2;
        let mut diag = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        let mut sub = vec![0.0; m];
        let mut sup = vec![0.0; m];
        for k in 1..n - 1 {
            diag[k - 1] = 2.0 * (h[k - 1] + h[k]);
            sub[k - 1] = h[k - 1];
            sup[k - 1] = h[k];
            rhs[k - 1] = 6.0 * ((y(k + 1) - y(k)) / h[k] - (y(k) - y(k - 1)) / h[k - 1]);
        }
        for k in 1..m {
            let w = sub[k] / diag[k - 1];
            diag[k] -= w * sup[k - 1];
            rhs[k] -= w * rhs[k - 1];
        }
        let mut second = vec![0.0; n];
        for k in (0..m).rev() {
            let next = if k + 1 < m { second[k + 2] } else { 0.0 };
            second[k + 1] = (rhs[k] - sup[k] * next) / diag[k];
        }
        for k in 0..n {
            out[k * d + i] = if k < n - 1 {
                (y(k + 1) - y(k)) / h[k] - h[k] * (2.0 * second[k] + second[k + 1]) / 6.0
            } else {
                (y(k) - y(k - 1)) / h[k - 1] + h[k - 1] * (second[k - 1] + 2.0 * second[k]) / 6.0
            };
        }
    }
    out
}

/// Segment `x_t` of a trajectory on `grid`: node values `x(t + theta_j)`.
pub fn extract_segment(traj: &Trajectory, t: f64, grid: &Arc<Grid>) -> Result<Segment> {
    if grid.d() != traj.d() {
        return Err(Error::Shape(format!("grid dimension {} vs trajectory dimension {}", grid.d(), traj.d())));
    }
    let needed = t - grid.r();
    let tol = 1e-12 * (1.0 + t.abs());
    if needed < traj.t_start() - tol {
        return Err(Error::InsufficientHistory { needed, available: traj.t_start() });
    }
    let mut values = DMatrix::zeros(grid.d(), grid.nodes().len());
    let mut buf = vec![0.0; grid.d()];
    for (j, &theta) in grid.nodes().iter().enumerate() {
        let tt = (t + theta).max(traj.t_start());
        traj.eval_into(tt, &mut buf)?;
        values.column_mut(j).copy_from_slice(&buf);
    }
    Segment::new(grid.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::make_grid;
    use approx::assert_abs_diff_eq;

    fn linear_traj() -> Trajectory {
        let times: Vec<f64> = (0..=60).map(|k| -1.0 + k as f64 * 0.1).collect();
        let states = times.clone();
        let derivs = vec![1.0; times.len()];
        Trajectory::from_samples(1, times, states, Some(derivs)).unwrap()
    }

    #[test]
    fn constant_trajectory_gives_constant_segment() {
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let n = times.len();
        let traj = Trajectory::from_samples(2, times, [3.0, -1.0].repeat(n), Some(vec![0.0; 2 * n])).unwrap();
        let g = make_grid(1.0, 2, 10).unwrap();
        for t in [1.0, 2.3, 5.0] {
            let seg = extract_segment(&traj, t, &g).unwrap();
            for j in 0..=10 {
                assert_eq!(seg.values()[(0, j)], 3.0);
                assert_eq!(seg.values()[(1, j)], -1.0);
            }
        }
    }

    #[test]
    fn linear_trajectory_segment() {
        let traj = linear_traj();
        let g = make_grid(1.0, 1, 8).unwrap();
        let seg = extract_segment(&traj, 2.0, &g).unwrap();
        for (j, theta) in g.nodes().iter().enumerate() {
            assert_abs_diff_eq!(seg.values()[(0, j)], 2.0 + theta, epsilon = 1e-13);
        }
    }

    #[test]
    fn insufficient_history_is_reported() {
        let traj = linear_traj();
        let g = make_grid(1.0, 1, 8).unwrap();
        assert!(matches!(extract_segment(&traj, -0.5, &g), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn spline_derivatives_recover_smooth_functions() {
        let times: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
        let states: Vec<f64> = times.iter().map(|t| t.sin()).collect();
        let traj = Trajectory::from_samples(1, times, states, None).unwrap();
        for t in [0.5, 1.7, 3.1] {
            assert_abs_diff_eq!(traj.derivative_at(t).unwrap()[0], f64::cos(t), epsilon = 1e-4);
        }
    }

    #[test]
    fn csv_round_trip_preserves_samples() {
        let traj = linear_traj();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.times(), traj.times());
        assert_eq!(back.state(17), traj.state(17));
        assert_eq!(back.derivative(3), traj.derivative(3));
    }
}

//! Matrix representations of the solution operators `T(t, s)` on segment
//! node values, and sequences of window operators `A(n) = T((n+1)h, nh)`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSpec;
use crate::error::{Error, Result};
use crate::integrator::{solve, IvpProblem};
use crate::segment::{matrix_inf_norm, Grid, Segment};
use crate::trajectory::extract_segment;

/// `T(t, s)` acting on flattened node values (index `j d + i`).
#[derive(Debug, Clone)]
pub struct EvolutionMatrix {
    pub s: f64,
    pub t: f64,
    pub grid: Arc<Grid>,
    pub entries: DMatrix<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    s: f64,
    t: f64,
    r: f64,
    d: usize,
    #[serde(rename = "N")]
    n: usize,
}

impl EvolutionMatrix {
    pub fn identity(grid: Arc<Grid>, s: f64) -> Self {
        let n = grid.dim();
        Self { s, t: s, grid, entries: DMatrix::identity(n, n) }
    }

    pub fn apply(&self, seg: &Segment) -> Result<Segment> {
        if !self.grid.same_shape(seg.grid()) {
            return Err(Error::Shape("segment grid differs from operator grid".into()));
        }
        Segment::from_flat(self.grid.clone(), (&self.entries * seg.flat()).as_slice())
    }

    /// CSV dump preceded by a one-line JSON header `# {"s":..,"t":..,"r":..,"d":..,"N":..}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header = MatrixHeader { s: self.s, t: self.t, r: self.grid.r(), d: self.grid.d(), n: self.grid.n() };
        writeln!(w, "# {}", serde_json::to_string(&header)?)?;
        for i in 0..self.entries.nrows() {
            let row: Vec<String> = self.entries.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Parameter("empty matrix file".into()))??;
        let json = first.strip_prefix('#').ok_or_else(|| Error::Parameter("missing JSON header".into()))?;
        let header: MatrixHeader = serde_json::from_str(json.trim())?;
        let grid = Arc::new(Grid::new(header.r, header.d, header.n.max(1))?);
        let n = grid.dim();
        let mut data = Vec::with_capacity(n * n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for v in line.split(',') {
                data.push(v.trim().parse::<f64>().map_err(|e| Error::Parameter(e.to_string()))?);
            }
        }
        if data.len() != n * n {
            return Err(Error::Shape(format!("matrix has {} entries, header implies {}", data.len(), n * n)));
        }
        Ok(Self { s: header.s, t: header.t, grid, entries: DMatrix::from_row_slice(n, n, &data) })
    }
}

/// Builds `T(t, s)` column by column from cardinal initial segments.
pub fn build_t(l: &CoefficientSpec, s: f64, t: f64, grid: &Arc<Grid>, h_int: f64) -> Result<EvolutionMatrix> {
    if !(t >= s && s >= 0.0) {
        return Err(Error::Parameter(format!("need t >= s >= 0, got s = {s}, t = {t}")));
    }
    if grid.d() != l.d() || (grid.r() - l.r()).abs() > 1e-14 * (1.0 + l.r()) {
        return Err(Error::Shape("grid does not match coefficients".into()));
    }
    if t == s {
        return Ok(EvolutionMatrix::identity(grid.clone(), s));
    }
    let n = grid.dim();
    let columns: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|c| {
            let problem = IvpProblem {
                coefficients: l,
                s,
                initial: Segment::cardinal(grid.clone(), c),
                t_end: t,
                forcing: None,
                step: h_int,
            };
            let traj = solve(&problem)?;
            let seg = extract_segment(&traj, t, grid)?;
            Ok(seg.flat().as_slice().to_vec())
        })
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (c, col) in columns.into_iter().enumerate() {
        let col = col.map_err(|e| Error::Column { column: c, source: Box::new(e) })?;
        entries.column_mut(c).copy_from_slice(&col);
    }
    Ok(EvolutionMatrix { s, t, grid: grid.clone(), entries })
}

/// `T(t2, s1) = T(t2, s2) T(t1, s1)` for `t1 = s2`.
pub fn compose(t2: &EvolutionMatrix, t1: &EvolutionMatrix) -> Result<EvolutionMatrix> {
    if (t1.t - t2.s).abs() > 1e-12 * (1.0 + t1.t.abs()) {
        return Err(Error::Composition(format!("T1 ends at {} but T2 starts at {}", t1.t, t2.s)));
    }
    if !t1.grid.same_shape(&t2.grid) {
        return Err(Error::Composition("operators live on different grids".into()));
    }
    Ok(EvolutionMatrix { s: t1.s, t: t2.t, grid: t1.grid.clone(), entries: &t2.entries * &t1.entries })
}

/// Induced max-norm of the node-value matrix.
pub fn op_norm(t: &EvolutionMatrix) -> f64 {
    matrix_inf_norm(&t.entries)
}

/// Singular values in descending order.
pub fn singular_values(t: &EvolutionMatrix) -> Vec<f64> {
    let mut sv: Vec<f64> = t.entries.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank at relative threshold `tol`.
pub fn numerical_rank(t: &EvolutionMatrix, tol: f64) -> usize {
    let sv = singular_values(t);
    let top = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > tol * top).count()
}

/// Window operators `A(n) = T((n+1)h, nh)`, `n = 0..count`.
#[derive(Debug, Clone)]
pub struct TransitionSequence {
    pub h: f64,
    pub h_int: f64,
    pub grid: Arc<Grid>,
    pub windows: Vec<EvolutionMatrix>,
}

impl TransitionSequence {
    pub fn count(&self) -> usize {
        self.windows.len()
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn window(&self, n: usize) -> &DMatrix<f64> {
        &self.windows[n].entries
    }

    /// Time of window boundary `n`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.h
    }

    /// `U(n, m) = A(n-1) ... A(m)` for `n >= m`.
    pub fn product(&self, n: usize, m: usize) -> DMatrix<f64> {
        assert!(n >= m && n <= self.count());
        let mut u = DMatrix::identity(self.dim(), self.dim());
        for k in m..n {
            u = self.window(k) * u;
        }
        u
    }

    /// Applies an orthogonal change of node coordinates `A(n) -> O^T A(n) O`.
    pub fn conjugated(&self, o: &DMatrix<f64>) -> Self {
        let windows = self
            .windows
            .iter()
            .map(|w| EvolutionMatrix { s: w.s, t: w.t, grid: w.grid.clone(), entries: o.transpose() * &w.entries * o })
            .collect();
        Self { h: self.h, h_int: self.h_int, grid: self.grid.clone(), windows }
    }
}

/// Builds `count` consecutive windows of length `h` starting at 0.
pub fn build_sequence(l: &CoefficientSpec, h: f64, count: usize, grid: &Arc<Grid>, h_int: f64) -> Result<TransitionSequence> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("window length must be positive, got {h}")));
    }
    if l.r() > 0.0 && h < l.r() * (1.0 - 1e-12) {
        return Err(Error::Window { h, r: l.r() });
    }
    if count == 0 {
        return Err(Error::Parameter("window count must be positive".into()));
    }
    let windows: Result<Vec<EvolutionMatrix>> = (0..count)
        .into_par_iter()
        .map(|n| build_t(l, n as f64 * h, (n + 1) as f64 * h, grid, h_int))
        .collect();
    Ok(TransitionSequence { h, h_int, grid: grid.clone(), windows: windows? })
}

/// Default window length `max(r, 1)`.
pub fn default_window(r: f64) -> f64 {
    r.max(1.0)
}

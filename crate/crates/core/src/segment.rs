//! Finite-dimensional model of the phase space `C([-r, 0], R^d)`.
//!
//! A [`Segment`] stores state values at the nodes of a [`Grid`] and is
//! evaluated between nodes by barycentric polynomial interpolation. All
//! norms on `R^d` are the max-norm, so operator norms reduce to row sums.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Midpoints inserted per node interval when approximating the sup-norm.
pub const OVERSAMPLING: usize = 8;

/// Node family of a [`Grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFamily {
    ChebyshevLobatto,
    /// Equispaced nodes. Ill-conditioned for large `N`; diagnostics only.
    Uniform,
}

/// Interpolation nodes on `[-r, 0]` for a `d`-dimensional state.
#[derive(Debug, Clone)]
pub struct Grid {
    r: f64,
    d: usize,
    family: NodeFamily,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    quadrature: Vec<f64>,
    oversample: DMatrix<f64>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.r == other.r && self.d == other.d && self.family == other.family && self.nodes == other.nodes
    }
}

/// Chebyshev–Lobatto nodes on `[-r, 0]`, ascending: `-r (1 + cos(pi j / n)) / 2`.
pub fn lobatto_nodes(r: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|j| {
            if j == 0 {
                -r
            } else if j == n {
                0.0
            } else {
                -0.5 * r * (1.0 + (PI * j as f64 / n as f64).cos())
            }
        })
        .collect()
}

/// Clenshaw–Curtis weights for the `n + 1` Lobatto points of an interval of length `len`.
pub fn clenshaw_curtis_weights(n: usize, len: f64) -> Vec<f64> {
    if n == 0 {
        return vec![len];
    }
    let nf = n as f64;
    let mut w = vec![0.0; n + 1];
    let theta: Vec<f64> = (0..=n).map(|j| PI * j as f64 / nf).collect();
    let mut v = vec![1.0; n.saturating_sub(1)];
    if n % 2 == 0 {
        w[0] = 1.0 / (nf * nf - 1.0);
        w[n] = w[0];
        for k in 1..n / 2 {
            let kf = k as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * (2.0 * kf * theta[i + 1]).cos() / (4.0 * kf * kf - 1.0);
            }
        }
        for (i, vi) in v.iter_mut().enumerate() {
            *vi -= (nf * theta[i + 1]).cos() / (nf * nf - 1.0);
        }
    } else {
        w[0] = 1.0 / (nf * nf);
        w[n] = w[0];
        for k in 1..=(n - 1) / 2 {
            let kf = k as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * (2.0 * kf * theta[i + 1]).cos() / (4.0 * kf * kf - 1.0);
            }
        }
    }
    for (i, vi) in v.iter().enumerate() {
        w[i + 1] = 2.0 * vi / nf;
    }
    // weights above integrate over [-1, 1]
    w.iter().map(|wi| wi * len / 2.0).collect()
}

fn barycentric_weights(nodes: &[f64], family: NodeFamily) -> Vec<f64> {
    let n = nodes.len() - 1;
    match family {
        NodeFamily::ChebyshevLobatto => (0..=n)
            .map(|j| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == n {
                    0.5 * sign
                } else {
                    sign
                }
            })
            .collect(),
        NodeFamily::Uniform => {
            // (-1)^j binom(n, j), rescaled to stay in range
            let mut w = vec![1.0; n + 1];
            for j in 1..=n {
                w[j] = -w[j - 1] * (n - j + 1) as f64 / j as f64;
            }
            let scale = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            w.iter().map(|x| x / scale).collect()
        }
    }
}

fn barycentric_row(nodes: &[f64], weights: &[f64], theta: f64, row: &mut [f64]) {
    if let Some(j) = nodes.iter().position(|&x| x == theta) {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[j] = 1.0;
        return;
    }
    let mut denom = 0.0;
    for (j, (&x, &w)) in nodes.iter().zip(weights).enumerate() {
        let c = w / (theta - x);
        row[j] = c;
        denom += c;
    }
    row.iter_mut().for_each(|v| *v /= denom);
}

impl Grid {
    /// Chebyshev–Lobatto grid on `[-r, 0]` with `n + 1` nodes (one node when `r = 0`).
    pub fn new(r: f64, d: usize, n: usize) -> Result<Self> {
        Self::with_family(r, d, n, NodeFamily::ChebyshevLobatto)
    }

    pub fn with_family(r: f64, d: usize, n: usize, family: NodeFamily) -> Result<Self> {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::Parameter(format!("delay horizon r must be >= 0, got {r}")));
        }
        if d == 0 {
            return Err(Error::Parameter("state dimension d must be positive".into()));
        }
        if r > 0.0 && n == 0 {
            return Err(Error::Parameter("node count N must be >= 1".into()));
        }
        let (nodes, quadrature) = if r == 0.0 {
            (vec![0.0], vec![0.0])
        } else {
            let nodes = match family {
                NodeFamily::ChebyshevLobatto => lobatto_nodes(r, n),
                NodeFamily::Uniform => (0..=n).map(|j| -r + r * j as f64 / n as f64).collect(),
            };
            (nodes, clenshaw_curtis_weights(n, r))
        };
        let weights = barycentric_weights(&nodes, family);

        let intervals = nodes.len() - 1;
        let mut oversample = DMatrix::zeros(intervals * OVERSAMPLING, nodes.len());
        let mut row = vec![0.0; nodes.len()];
        for j in 0..intervals {
            for k in 1..=OVERSAMPLING {
                let theta = nodes[j] + (nodes[j + 1] - nodes[j]) * k as f64 / (OVERSAMPLING + 1) as f64;
                barycentric_row(&nodes, &weights, theta, &mut row);
                for (c, v) in row.iter().enumerate() {
                    oversample[(j * OVERSAMPLING + k - 1, c)] = *v;
                }
            }
        }

        Ok(Self { r, d, family, nodes, weights, quadrature, oversample })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of node intervals (`N`); zero for the degenerate `r = 0` grid.
    pub fn n(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn family(&self) -> NodeFamily {
        self.family
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Clenshaw–Curtis weights on the nodes (meaningful for the Lobatto family).
    pub fn quadrature_weights(&self) -> &[f64] {
        &self.quadrature
    }

    /// Length of a flattened node-value vector, `d (N + 1)`.
    pub fn dim(&self) -> usize {
        self.d * self.nodes.len()
    }

    /// Cardinal interpolation weights of every node at `theta`.
    pub fn interpolation_row(&self, theta: f64) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut row = vec![0.0; self.nodes.len()];
        barycentric_row(&self.nodes, &self.weights, theta, &mut row);
        Ok(row)
    }

    fn check_theta(&self, theta: f64) -> Result<()> {
        let tol = 1e-12 * self.r.max(1.0);
        if !(theta >= -self.r - tol && theta <= tol) {
            return Err(Error::Domain(format!("theta = {theta} outside [-{}, 0]", self.r)));
        }
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &Grid) -> bool {
        self == other
    }
}

/// Discretized element of `C([-r, 0], R^d)`: a `d x (N + 1)` array of node values.
#[derive(Debug, Clone)]
pub struct Segment {
    grid: Arc<Grid>,
    values: DMatrix<f64>,
}

impl Segment {
    pub fn new(grid: Arc<Grid>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.d() || values.ncols() != grid.nodes().len() {
            return Err(Error::Shape(format!(
                "segment values are {}x{}, grid needs {}x{}",
                values.nrows(),
                values.ncols(),
                grid.d(),
                grid.nodes().len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("segment values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = DMatrix::zeros(grid.d(), grid.nodes().len());
        Self { grid, values }
    }

    pub fn constant(grid: Arc<Grid>, value: &[f64]) -> Result<Self> {
        if value.len() != grid.d() {
            return Err(Error::Shape(format!("constant has length {}, d = {}", value.len(), grid.d())));
        }
        let values = DMatrix::from_fn(grid.d(), grid.nodes().len(), |i, _| value[i]);
        Self::new(grid, values)
    }

    /// Samples `f(theta)` at every node.
    pub fn from_fn<F>(grid: Arc<Grid>, f: F) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let mut values = DMatrix::zeros(grid.d(), grid.nodes().len());
        for (j, &theta) in grid.nodes().iter().enumerate() {
            let v = f(theta);
            if v.len() != grid.d() {
                return Err(Error::Shape(format!("sampler returned {} components, d = {}", v.len(), grid.d())));
            }
            for (i, x) in v.into_iter().enumerate() {
                values[(i, j)] = x;
            }
        }
        Self::new(grid, values)
    }

    /// Rebuilds a segment from flattened node-major coordinates (index `j d + i`).
    pub fn from_flat(grid: Arc<Grid>, flat: &[f64]) -> Result<Self> {
        if flat.len() != grid.dim() {
            return Err(Error::Shape(format!("flat vector has length {}, grid needs {}", flat.len(), grid.dim())));
        }
        let values = DMatrix::from_column_slice(grid.d(), grid.nodes().len(), flat);
        Self::new(grid, values)
    }

    /// Cardinal basis segment: one at component `index % d` of node `index / d`.
    pub fn cardinal(grid: Arc<Grid>, index: usize) -> Self {
        let mut seg = Self::zeros(grid);
        let d = seg.grid.d();
        seg.values[(index % d, index / d)] = 1.0;
        seg
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Node-major flattening, `x[j d + i] = values[(i, j)]`.
    pub fn flat(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    /// Value at `theta` by barycentric interpolation; exact at nodes.
    pub fn eval(&self, theta: f64) -> Result<DVector<f64>> {
        let row = self.grid.interpolation_row(theta)?;
        Ok(&self.values * DVector::from_vec(row))
    }

    /// Node-plus-oversampling approximation of `sup |seg(theta)|_inf`.
    ///
    /// This is a lower bound on the true supremum; the gap is spectrally small
    /// for smooth segments.
    pub fn sup_norm(&self) -> f64 {
        let nodes_max = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if self.grid.n() == 0 {
            return nodes_max;
        }
        let dense = &self.grid.oversample * self.values.transpose();
        dense.iter().fold(nodes_max, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { grid: self.grid.clone(), values: &self.values * c }
    }

    pub fn add(&self, other: &Segment) -> Result<Self> {
        if !self.grid.same_shape(&other.grid) {
            return Err(Error::Shape("segments live on different grids".into()));
        }
        Ok(Self { grid: self.grid.clone(), values: &self.values + &other.values })
    }
}

/// Convenience constructor mirroring [`Grid::new`].
pub fn make_grid(r: f64, d: usize, n: usize) -> Result<Arc<Grid>> {
    Grid::new(r, d, n).map(Arc::new)
}

/// Maximum absolute value of a vector (the `R^d` norm used throughout).
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Induced max-norm of a matrix (largest absolute row sum).
pub fn matrix_inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn degenerate_grid_has_single_node() {
        let g = Grid::new(0.0, 1, 7).unwrap();
        assert_eq!(g.nodes(), &[0.0]);
        assert_eq!(g.n(), 0);
        assert_eq!(g.dim(), 1);
    }

    #[test]
    fn three_point_lobatto_grid() {
        let g = Grid::new(1.0, 1, 2).unwrap();
        assert_eq!(g.nodes()[0], -1.0);
        assert_abs_diff_eq!(g.nodes()[1], -0.5, epsilon = 1e-15);
        assert_eq!(g.nodes()[2], 0.0);
    }

    #[test]
    fn lobatto_nodes_match_formula() {
        let g = Grid::new(2.0, 3, 16).unwrap();
        assert_eq!(g.nodes().len(), 17);
        assert_eq!(g.nodes()[0], -2.0);
        assert_eq!(g.nodes()[16], 0.0);
        for j in 0..=16 {
            let direct = -2.0 * (1.0 + (PI * j as f64 / 16.0).cos()) / 2.0;
            assert_abs_diff_eq!(g.nodes()[j], direct, epsilon = 1e-14);
        }
        // clustering is symmetric about the midpoint
        for j in 0..=16 {
            assert_abs_diff_eq!(g.nodes()[j] + g.nodes()[16 - j], -2.0, epsilon = 1e-14);
        }
        assert!(g.nodes().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(Grid::new(-1.0, 1, 4), Err(Error::Parameter(_))));
        assert!(matches!(Grid::new(1.0, 0, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn interpolation_reproduces_constants_and_lines() {
        let g = make_grid(1.5, 2, 12).unwrap();
        let c = Segment::constant(g.clone(), &[1.0, 1.0]).unwrap();
        for theta in [-1.5, -1.2, -0.7, -0.01, 0.0] {
            let v = c.eval(theta).unwrap();
            assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-14);
        }
        let lin = Segment::from_fn(g, |t| vec![t, -t]).unwrap();
        assert_abs_diff_eq!(lin.eval(-0.75).unwrap()[0], -0.75, epsilon = 1e-14);
    }

    #[test]
    fn interpolation_of_exponential_is_spectral() {
        let g = make_grid(1.0, 1, 16).unwrap();
        let s = Segment::from_fn(g, |t| vec![t.exp()]).unwrap();
        assert_abs_diff_eq!(s.eval(-0.3).unwrap()[0], (-0.3f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn eval_outside_domain_fails() {
        let g = make_grid(1.0, 1, 4).unwrap();
        let s = Segment::zeros(g);
        assert!(matches!(s.eval(0.1), Err(Error::Domain(_))));
        assert!(matches!(s.eval(-1.1), Err(Error::Domain(_))));
    }

    #[test]
    fn sup_norm_examples() {
        let g = make_grid(1.0, 2, 8).unwrap();
        assert_eq!(Segment::zeros(g.clone()).sup_norm(), 0.0);
        assert_abs_diff_eq!(Segment::constant(g, &[2.0, -3.0]).unwrap().sup_norm(), 3.0, epsilon = 1e-13);

        let g = make_grid(1.0, 1, 16).unwrap();
        let s = Segment::from_fn(g, |t| vec![(5.0 * t).sin()]).unwrap();
        let brute = (0..=10_000)
            .map(|i| (5.0 * (-1.0 + i as f64 / 10_000.0)).sin().abs())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(s.sup_norm(), brute, epsilon = 1e-3);
    }

    #[test]
    fn clenshaw_curtis_integrates_polynomials() {
        let w = clenshaw_curtis_weights(10, 2.0);
        let nodes = lobatto_nodes(2.0, 10);
        let quad: f64 = w.iter().zip(&nodes).map(|(w, t)| w * t.powi(4)).sum();
        assert_abs_diff_eq!(quad, 32.0 / 5.0, epsilon = 1e-12);
        let odd = clenshaw_curtis_weights(7, 1.0);
        assert_abs_diff_eq!(odd.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_segment_round_trips() {
        let g = make_grid(0.0, 3, 5).unwrap();
        let s = Segment::from_flat(g, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(s.eval(0.0).unwrap().as_slice(), &[1.0, -2.0, 0.5]);
        assert_eq!(s.sup_norm(), 2.0);
    }

    proptest! {
        #[test]
        fn reproduces_polynomials_up_to_degree_n(coeffs in proptest::collection::vec(-1.0f64..1.0, 9), theta in -2.0f64..0.0) {
            let g = make_grid(2.0, 1, 8).unwrap();
            let p = |t: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c);
            let s = Segment::from_fn(g, |t| vec![p(t)]).unwrap();
            prop_assert!((s.eval(theta).unwrap()[0] - p(theta)).abs() < 1e-12);
        }

        #[test]
        fn sup_norm_is_a_norm(a in proptest::collection::vec(-5.0f64..5.0, 10), b in proptest::collection::vec(-5.0f64..5.0, 10), c in -3.0f64..3.0) {
            let g = make_grid(1.0, 2, 4).unwrap();
            let sa = Segment::from_flat(g.clone(), &a).unwrap();
            let sb = Segment::from_flat(g, &b).unwrap();
            prop_assert!((sa.scale(c).sup_norm() - c.abs() * sa.sup_norm()).abs() <= 1e-12 * (1.0 + sa.sup_norm()));
            prop_assert!(sa.add(&sb).unwrap().sup_norm() <= sa.sup_norm() + sb.sup_norm() + 1e-12);
        }
    }
}

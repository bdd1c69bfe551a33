//! Linear functionals `L(t): C -> R^d` built from an instantaneous term,
//! discrete delays and a distributed kernel.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{clenshaw_curtis_weights, lobatto_nodes, matrix_inf_norm, Segment};

type MatrixMap = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
type KernelMap = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;

/// A `d x d` matrix-valued function of time.
#[derive(Clone)]
pub enum MatrixFn {
    Constant(DMatrix<f64>),
    Varying(MatrixMap),
}

impl MatrixFn {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self::Constant(m)
    }

    pub fn scalar(a: f64) -> Self {
        Self::Constant(DMatrix::from_element(1, 1, a))
    }

    pub fn varying<F>(f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::Varying(Arc::new(f))
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            Self::Constant(m) => m.clone(),
            Self::Varying(f) => f(t),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant(_))
    }

    /// `out += M(t) x`.
    fn mul_add(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Constant(m) => gemv_add(m, x, out),
            Self::Varying(f) => gemv_add(&f(t), x, out),
        }
    }
}

impl fmt::Debug for MatrixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(m) => write!(f, "Constant({m:?})"),
            Self::Varying(_) => write!(f, "Varying(..)"),
        }
    }
}

/// Distributed kernel `K(t, theta)`.
#[derive(Clone)]
pub enum KernelFn {
    Constant(DMatrix<f64>),
    Varying(KernelMap),
}

impl KernelFn {
    pub fn at(&self, t: f64, theta: f64) -> DMatrix<f64> {
        match self {
            Self::Constant(m) => m.clone(),
            Self::Varying(f) => f(t, theta),
        }
    }
}

impl fmt::Debug for KernelFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(m) => write!(f, "Constant({m:?})"),
            Self::Varying(_) => write!(f, "Varying(..)"),
        }
    }
}

fn gemv_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (j, xj) in x.iter().enumerate() {
        if *xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * xj;
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteTerm {
    pub delay: f64,
    pub matrix: MatrixFn,
}

/// Time interval where the integrator must not exceed `max_step`.
///
/// Used for coefficients with narrow features (for example the spikes of the
/// unbounded-coefficient example) that a fixed step would step over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub start: f64,
    pub end: f64,
    pub max_step: f64,
}

/// Representation of `L(t) phi = A0(t) phi(0) + sum_i A_i(t) phi(-tau_i) + int K(t, theta) phi(theta) dtheta`.
#[derive(Debug, Clone)]
pub struct CoefficientSpec {
    r: f64,
    d: usize,
    instantaneous: Option<MatrixFn>,
    discrete: Vec<DiscreteTerm>,
    kernel: Option<KernelFn>,
    kernel_nodes: Vec<f64>,
    kernel_weights: Vec<f64>,
    t_max: f64,
    refinements: Vec<Refinement>,
}

/// Default Clenshaw–Curtis node count (minus one) for kernel terms.
pub const KERNEL_QUADRATURE_N: usize = 32;

impl CoefficientSpec {
    pub fn new(r: f64, d: usize) -> Result<Self> {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::Parameter(format!("delay horizon r must be >= 0, got {r}")));
        }
        if d == 0 {
            return Err(Error::Parameter("state dimension d must be positive".into()));
        }
        Ok(Self {
            r,
            d,
            instantaneous: None,
            discrete: Vec::new(),
            kernel: None,
            kernel_nodes: Vec::new(),
            kernel_weights: Vec::new(),
            t_max: f64::INFINITY,
            refinements: Vec::new(),
        })
    }

    fn check_matrix(&self, m: &MatrixFn) -> Result<()> {
        if let MatrixFn::Constant(m) = m {
            if m.nrows() != self.d || m.ncols() != self.d {
                return Err(Error::Shape(format!("coefficient is {}x{}, d = {}", m.nrows(), m.ncols(), self.d)));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("coefficient entries must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn with_instantaneous(mut self, m: MatrixFn) -> Result<Self> {
        self.check_matrix(&m)?;
        self.instantaneous = Some(m);
        Ok(self)
    }

    pub fn with_discrete(mut self, delay: f64, m: MatrixFn) -> Result<Self> {
        if !(delay > 0.0 && delay <= self.r * (1.0 + 1e-14)) {
            return Err(Error::Parameter(format!("delay {delay} not in (0, r = {}]", self.r)));
        }
        self.check_matrix(&m)?;
        self.discrete.push(DiscreteTerm { delay: delay.min(self.r), matrix: m });
        Ok(self)
    }

    pub fn with_kernel(self, k: KernelFn) -> Result<Self> {
        self.with_kernel_nodes(k, KERNEL_QUADRATURE_N)
    }

    pub fn with_kernel_nodes(mut self, k: KernelFn, n: usize) -> Result<Self> {
        if self.r == 0.0 {
            return Err(Error::Parameter("kernel terms need r > 0".into()));
        }
        if n == 0 {
            return Err(Error::Parameter("kernel quadrature needs at least two nodes".into()));
        }
        if let KernelFn::Constant(m) = &k {
            self.check_matrix(&MatrixFn::Constant(m.clone()))?;
        }
        self.kernel_nodes = lobatto_nodes(self.r, n);
        self.kernel_weights = clenshaw_curtis_weights(n, self.r);
        self.kernel = Some(k);
        Ok(self)
    }

    pub fn with_time_domain(mut self, t_max: f64) -> Result<Self> {
        if !(t_max > 0.0) {
            return Err(Error::Parameter(format!("time domain end must be positive, got {t_max}")));
        }
        self.t_max = t_max;
        Ok(self)
    }

    pub fn with_refinement(mut self, refinement: Refinement) -> Result<Self> {
        if !(refinement.end > refinement.start && refinement.max_step > 0.0) {
            return Err(Error::Parameter(format!("bad refinement interval {refinement:?}")));
        }
        self.refinements.push(refinement);
        self.refinements.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(self)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn instantaneous(&self) -> Option<&MatrixFn> {
        self.instantaneous.as_ref()
    }

    pub fn discrete_terms(&self) -> &[DiscreteTerm] {
        &self.discrete
    }

    pub fn kernel(&self) -> Option<&KernelFn> {
        self.kernel.as_ref()
    }

    pub fn refinements(&self) -> &[Refinement] {
        &self.refinements
    }

    pub fn delays(&self) -> Vec<f64> {
        self.discrete.iter().map(|t| t.delay).collect()
    }

    /// True when every term is time-invariant.
    pub fn is_autonomous(&self) -> bool {
        self.instantaneous.as_ref().is_none_or(MatrixFn::is_constant)
            && self.discrete.iter().all(|t| t.matrix.is_constant())
            && self.kernel.as_ref().is_none_or(|k| matches!(k, KernelFn::Constant(_)))
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * (1.0 + t.abs());
        if !(t >= -tol && t <= self.t_max + tol) {
            return Err(Error::Domain(format!("t = {t} outside time domain [0, {}]", self.t_max)));
        }
        Ok(())
    }

    /// Core evaluation: `lookup(theta, buf)` must write `phi(theta)`; `phi0` is `phi(0)`.
    pub(crate) fn apply_with<F>(&self, t: f64, phi0: &[f64], mut lookup: F, out: &mut [f64]) -> Result<()>
    where
        F: FnMut(f64, &mut [f64]) -> Result<()>,
    {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(a0) = &self.instantaneous {
            a0.mul_add(t, phi0, out);
        }
        let mut buf = vec![0.0; self.d];
        for term in &self.discrete {
            lookup(-term.delay, &mut buf)?;
            term.matrix.mul_add(t, &buf, out);
        }
        if let Some(k) = &self.kernel {
            let mut acc = vec![0.0; self.d];
            for (&theta, &w) in self.kernel_nodes.iter().zip(&self.kernel_weights) {
                if theta == 0.0 {
                    buf.copy_from_slice(phi0);
                } else {
                    lookup(theta, &mut buf)?;
                }
                buf.iter_mut().for_each(|v| *v *= w);
                match k {
                    KernelFn::Constant(m) => gemv_add(m, &buf, &mut acc),
                    KernelFn::Varying(f) => gemv_add(&f(t, theta), &buf, &mut acc),
                }
            }
            out.iter_mut().zip(&acc).for_each(|(o, a)| *o += a);
        }
        Ok(())
    }

    /// `L(t)` applied to a segment.
    pub fn apply(&self, t: f64, seg: &Segment) -> Result<DVector<f64>> {
        let g = seg.grid();
        if g.d() != self.d || (g.r() - self.r).abs() > 1e-14 * (1.0 + self.r) {
            return Err(Error::Shape(format!(
                "segment grid (r = {}, d = {}) does not match coefficients (r = {}, d = {})",
                g.r(),
                g.d(),
                self.r,
                self.d
            )));
        }
        self.check_time(t)?;
        let phi0 = seg.eval(0.0)?;
        let mut out = vec![0.0; self.d];
        self.apply_with(
            t,
            phi0.as_slice(),
            |theta, buf| {
                let v = seg.eval(theta.max(-self.r))?;
                buf.copy_from_slice(v.as_slice());
                Ok(())
            },
            &mut out,
        )?;
        Ok(DVector::from_vec(out))
    }

    /// `||A0(t)|| + sum ||A_i(t)|| + int ||K(t, .)||`, an upper bound for `||L(t)||`.
    pub fn norm_at(&self, t: f64) -> f64 {
        let mut m = self.instantaneous.as_ref().map_or(0.0, |a| matrix_inf_norm(&a.at(t)));
        m += self.discrete.iter().map(|term| matrix_inf_norm(&term.matrix.at(t))).sum::<f64>();
        if let Some(k) = &self.kernel {
            m += self
                .kernel_nodes
                .iter()
                .zip(&self.kernel_weights)
                .map(|(&theta, &w)| w * matrix_inf_norm(&k.at(t, theta)))
                .sum::<f64>();
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Analytic,
    Sampled,
}

/// Certificate for `M = sup ||L(t)||`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub m: f64,
    pub t_samples: Vec<f64>,
    pub method: BoundMethod,
    /// Sampling window; for sampled certificates `m` bounds `||L(t)||` on this window only.
    pub window: (f64, f64),
    pub window_only: bool,
    /// Time of the largest sampled norm.
    pub argmax: f64,
}

/// Window sampled when the time domain is unbounded.
pub const DEFAULT_BOUND_WINDOW: f64 = 100.0;

/// Bound certificate over the coefficient time domain.
pub fn norm_bound(l: &CoefficientSpec, step: f64) -> Result<BoundCertificate> {
    let end = if l.t_max.is_finite() { l.t_max } else { DEFAULT_BOUND_WINDOW };
    norm_bound_over(l, step, 0.0, end)
}

/// Bound certificate over `[t0, t1]`, densified inside refinement intervals.
pub fn norm_bound_over(l: &CoefficientSpec, step: f64, t0: f64, t1: f64) -> Result<BoundCertificate> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("sampling step must be positive, got {step}")));
    }
    if !(t1 >= t0) {
        return Err(Error::Parameter(format!("empty sampling window [{t0}, {t1}]")));
    }
    if l.is_autonomous() {
        return Ok(BoundCertificate {
            m: l.norm_at(t0),
            t_samples: vec![t0],
            method: BoundMethod::Analytic,
            window: (t0, t1),
            window_only: false,
            argmax: t0,
        });
    }
    let n = ((t1 - t0) / step).ceil() as usize;
    let mut ts: Vec<f64> = (0..=n).map(|k| (t0 + k as f64 * step).min(t1)).collect();
    for rf in &l.refinements {
        if rf.end < t0 || rf.start > t1 {
            continue;
        }
        let a = rf.start.max(t0);
        let b = rf.end.min(t1);
        let k = (((b - a) / rf.max_step).ceil() as usize).clamp(16, 4096);
        ts.extend((0..=k).map(|i| a + (b - a) * i as f64 / k as f64));
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let (mut m, mut argmax) = (0.0f64, t0);
    for &t in &ts {
        let v = l.norm_at(t);
        if v > m {
            m = v;
            argmax = t;
        }
    }
    Ok(BoundCertificate { m, t_samples: ts, method: BoundMethod::Sampled, window: (t0, t1), window_only: true, argmax })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::make_grid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn delay_eq(a0: f64, a1: f64) -> CoefficientSpec {
        CoefficientSpec::new(1.0, 1)
            .unwrap()
            .with_instantaneous(MatrixFn::scalar(a0))
            .unwrap()
            .with_discrete(1.0, MatrixFn::scalar(a1))
            .unwrap()
    }

    #[test]
    fn instantaneous_scalar() {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::scalar(-2.5)).unwrap();
        let seg = Segment::constant(make_grid(0.0, 1, 1).unwrap(), &[4.0]).unwrap();
        assert_eq!(l.apply(0.3, &seg).unwrap()[0], -10.0);
    }

    #[test]
    fn pure_delay_reads_left_endpoint() {
        let l = delay_eq(0.0, -1.0);
        let seg = Segment::from_fn(make_grid(1.0, 1, 8).unwrap(), |t| vec![t + 1.0]).unwrap();
        assert_abs_diff_eq!(l.apply(0.0, &seg).unwrap()[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unit_kernel_integrates_segment() {
        let l = CoefficientSpec::new(1.0, 1).unwrap().with_kernel(KernelFn::Constant(DMatrix::from_element(1, 1, 1.0))).unwrap();
        let seg = Segment::constant(make_grid(1.0, 1, 12).unwrap(), &[1.0]).unwrap();
        assert_abs_diff_eq!(l.apply(0.0, &seg).unwrap()[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn grid_mismatch_and_domain_errors() {
        let l = delay_eq(0.0, -1.0).with_time_domain(5.0).unwrap();
        let wrong = Segment::zeros(make_grid(2.0, 1, 4).unwrap());
        assert!(matches!(l.apply(0.0, &wrong), Err(Error::Shape(_))));
        let ok = Segment::zeros(make_grid(1.0, 1, 4).unwrap());
        assert!(matches!(l.apply(6.0, &ok), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_delay_beyond_horizon() {
        assert!(CoefficientSpec::new(1.0, 1).unwrap().with_discrete(1.5, MatrixFn::scalar(1.0)).is_err());
    }

    #[test]
    fn bounds_for_constant_coefficients() {
        assert_eq!(norm_bound(&delay_eq(0.0, -1.0), 0.1).unwrap().m, 1.0);
        let cert = norm_bound(&delay_eq(1.0, -2.0), 0.1).unwrap();
        assert_eq!(cert.m, 3.0);
        assert_eq!(cert.method, BoundMethod::Analytic);
    }

    #[test]
    fn sampled_bound_flags_window() {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::varying(|t| DMatrix::from_element(1, 1, t))).unwrap();
        let cert = norm_bound_over(&l, 0.5, 0.0, 4.0).unwrap();
        assert!(cert.window_only);
        assert_eq!(cert.m, 4.0);
    }

    proptest! {
        #[test]
        fn apply_is_linear_and_bounded(a in proptest::collection::vec(-2.0f64..2.0, 18), b in proptest::collection::vec(-2.0f64..2.0, 18), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let l = CoefficientSpec::new(1.0, 2).unwrap()
                .with_instantaneous(MatrixFn::constant(DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.2, 0.3]))).unwrap()
                .with_discrete(0.5, MatrixFn::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))).unwrap()
                .with_kernel(KernelFn::Constant(DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, -0.7]))).unwrap();
            let g = make_grid(1.0, 2, 8).unwrap();
            let pa = Segment::from_flat(g.clone(), &a).unwrap();
            let pb = Segment::from_flat(g, &b).unwrap();
            let lhs = l.apply(0.0, &pa.scale(alpha).add(&pb.scale(beta)).unwrap()).unwrap();
            let rhs = l.apply(0.0, &pa).unwrap() * alpha + l.apply(0.0, &pb).unwrap() * beta;
            prop_assert!((lhs - rhs).amax() < 1e-12);
            let m = norm_bound(&l, 0.1).unwrap().m;
            prop_assert!(l.apply(0.0, &pa).unwrap().amax() <= m * pa.sup_norm() + 1e-12);
        }
    }
}

//! Characteristic roots of autonomous equations and closed-form scalar flows,
//! used as independent ground truth for the dichotomy estimates.
//!
//! For `x' = A0 x(t) + sum_i A_i x(t - tau_i) + int_{-r}^0 K x(t + theta) dtheta`
//! the characteristic function is `det(lambda I - A0 - sum_i A_i e^{-lambda tau_i} - K g(lambda))`
//! with `g(lambda) = (1 - e^{-lambda r}) / lambda`.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSpec, KernelFn};
use crate::error::{Error, Result};

type C64 = Complex<f64>;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;
const DEDUP_TOL: f64 = 1e-8;
const ROOT_RESIDUAL: f64 = 1e-10;
/// Closer than this to a root on the contour, the winding count is unreliable.
const CONTOUR_TOL: f64 = 1e-12;

/// Constant-coefficient characteristic data.
#[derive(Debug, Clone)]
pub struct CharacteristicEquation {
    pub a0: DMatrix<f64>,
    pub delayed: Vec<(f64, DMatrix<f64>)>,
    /// Constant distributed kernel on `[-r, 0]`.
    pub kernel: Option<(f64, DMatrix<f64>)>,
}

impl CharacteristicEquation {
    pub fn new(a0: DMatrix<f64>, delayed: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        if !a0.is_square() || delayed.iter().any(|(_, m)| m.shape() != a0.shape()) {
            return Err(Error::Shape("coefficient matrices must be square and of equal size".into()));
        }
        Ok(Self { a0, delayed, kernel: None })
    }

    /// Extracts the constant coefficients of an autonomous specification.
    pub fn from_spec(l: &CoefficientSpec) -> Result<Self> {
        if !l.is_autonomous() {
            return Err(Error::Parameter("characteristic roots need time-independent coefficients".into()));
        }
        let d = l.d();
        let a0 = l.instantaneous().map_or_else(|| DMatrix::zeros(d, d), |m| m.at(0.0));
        let delayed = l.discrete_terms().iter().map(|t| (t.delay, t.matrix.at(0.0))).collect();
        let kernel = match l.kernel() {
            None => None,
            Some(KernelFn::Constant(k)) => Some((l.r(), k.clone())),
            Some(KernelFn::Varying(_)) => {
                return Err(Error::Parameter("only constant distributed kernels are supported".into()));
            }
        };
        Ok(Self { a0, delayed, kernel })
    }

    pub fn d(&self) -> usize {
        self.a0.nrows()
    }

    /// Characteristic matrix `M(lambda)` and its derivative.
    fn matrix(&self, lambda: C64) -> (DMatrix<C64>, DMatrix<C64>) {
        let d = self.d();
        let mut m = DMatrix::<C64>::identity(d, d) * lambda - self.a0.map(C64::from);
        let mut dm = DMatrix::<C64>::identity(d, d);
        for (tau, a) in &self.delayed {
            let e = (-lambda * *tau).exp();
            let ac = a.map(C64::from);
            m -= &ac * e;
            dm += ac * (e * *tau);
        }
        if let Some((r, k)) = &self.kernel {
            let e = (-lambda * *r).exp();
            let (g, dg) = if lambda.norm() < 1e-8 {
                (C64::from(*r) - lambda * (r * r / 2.0), C64::from(-r * r / 2.0))
            } else {
                ((C64::from(1.0) - e) / lambda, (lambda * *r * e - (C64::from(1.0) - e)) / (lambda * lambda))
            };
            let kc = k.map(C64::from);
            m -= &kc * g;
            dm -= kc * dg;
        }
        (m, dm)
    }

    pub fn char_value(&self, lambda: C64) -> C64 {
        self.matrix(lambda).0.determinant()
    }

    /// Newton step `char / char'` using `char' = char * tr(M^{-1} M')`.
    fn newton_step(&self, lambda: C64) -> Option<(C64, C64)> {
        let (m, dm) = self.matrix(lambda);
        let value = m.determinant();
        let lu = m.lu();
        let x = lu.solve(&dm)?;
        let trace = x.trace();
        if trace.norm() == 0.0 || !trace.is_finite() {
            return None;
        }
        Some((value, C64::from(1.0) / trace))
    }
}

/// Closed rectangle `[re_min, re_max] x [im_min, im_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootBox {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Default for RootBox {
    fn default() -> Self {
        Self { re_min: -5.0, re_max: 1.0, im_min: -50.0, im_max: 50.0 }
    }
}

impl RootBox {
    fn contains(&self, z: C64) -> bool {
        z.re >= self.re_min && z.re <= self.re_max && z.im >= self.im_min && z.im <= self.im_max
    }

    fn corners(&self) -> [C64; 4] {
        [
            C64::new(self.re_min, self.im_min),
            C64::new(self.re_max, self.im_min),
            C64::new(self.re_max, self.im_max),
            C64::new(self.re_min, self.im_max),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub re: f64,
    pub im: f64,
    pub residual: f64,
}

impl Root {
    pub fn value(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RootSet {
    /// Roots sorted by descending real part, then ascending imaginary part.
    pub roots: Vec<Root>,
    #[serde(rename = "box")]
    pub bounds: RootBox,
    /// Argument-principle count of zeros inside the box.
    pub certified_count: usize,
    /// Whether Newton found exactly `certified_count` roots.
    pub complete: bool,
}

impl RootSet {
    pub fn rightmost(&self) -> Option<&Root> {
        self.roots.first()
    }
}

/// Change of argument of `char` along the segment `a -> b`, bisecting where
/// the phase moves by more than a quarter turn between samples.
fn arg_change(eq: &CharacteristicEquation, a: C64, b: C64, fa: C64, fb: C64, depth: usize) -> Result<f64> {
    let step = (fb / fa).arg();
    if step.abs() < std::f64::consts::FRAC_PI_4 || depth == 0 {
        return Ok(step);
    }
    let mid = (a + b) * 0.5;
    let fm = eq.char_value(mid);
    if fm.norm() < CONTOUR_TOL {
        return Err(Error::BoxAdjust { re: mid.re, im: mid.im });
    }
    Ok(arg_change(eq, a, mid, fa, fm, depth - 1)? + arg_change(eq, mid, b, fm, fb, depth - 1)?)
}

/// Winding number of `char` around the box boundary.
pub fn winding_count(eq: &CharacteristicEquation, bounds: &RootBox, mesh: usize) -> Result<usize> {
    let corners = bounds.corners();
    let mut total = 0.0;
    for side in 0..4 {
        let (a, b) = (corners[side], corners[(side + 1) % 4]);
        let mut prev_z = a;
        let mut prev_f = eq.char_value(a);
        for i in 1..=mesh {
            let z = a + (b - a) * (i as f64 / mesh as f64);
            let f = eq.char_value(z);
            if f.norm() < CONTOUR_TOL || prev_f.norm() < CONTOUR_TOL {
                let at = if f.norm() < CONTOUR_TOL { z } else { prev_z };
                return Err(Error::BoxAdjust { re: at.re, im: at.im });
            }
            total += arg_change(eq, prev_z, z, prev_f, f, 30)?;
            prev_z = z;
            prev_f = f;
        }
    }
    let turns = total / std::f64::consts::TAU;
    Ok(turns.round().max(0.0) as usize)
}

fn newton(eq: &CharacteristicEquation, seed: C64) -> Option<C64> {
    let mut z = seed;
    for _ in 0..NEWTON_MAX_ITER {
        let (_, step) = eq.newton_step(z)?;
        z -= step;
        if !z.is_finite() {
            return None;
        }
        if step.norm() <= NEWTON_TOL * (1.0 + z.norm()) {
            return Some(z);
        }
    }
    None
}

/// All characteristic roots in `bounds`: winding count on a contour with
/// `mesh` points per side, Newton refinement from a seed grid that is
/// densified until the count is met (or a density cap is reached).
pub fn char_roots(eq: &CharacteristicEquation, bounds: &RootBox, mesh: usize) -> Result<RootSet> {
    if !(bounds.re_max > bounds.re_min && bounds.im_max > bounds.im_min) || mesh < 4 {
        return Err(Error::Parameter("empty box or contour mesh below 4".into()));
    }
    let certified_count = winding_count(eq, bounds, mesh)?;
    let mut roots: Vec<C64> = Vec::new();
    let mut spacing = 0.5f64;
    for _ in 0..4 {
        let nx = ((bounds.re_max - bounds.re_min) / spacing).ceil() as usize + 1;
        let ny = ((bounds.im_max - bounds.im_min) / spacing).ceil() as usize + 1;
        for i in 0..nx {
            for j in 0..ny {
                let seed = C64::new(
                    bounds.re_min + (bounds.re_max - bounds.re_min) * i as f64 / (nx - 1) as f64,
                    bounds.im_min + (bounds.im_max - bounds.im_min) * j as f64 / (ny - 1) as f64,
                );
                let Some(z) = newton(eq, seed) else { continue };
                if !bounds.contains(z) || eq.char_value(z).norm() > ROOT_RESIDUAL * (1.0 + z.norm()).powi(eq.d() as i32) {
                    continue;
                }
                if roots.iter().all(|r| (r - z).norm() > DEDUP_TOL * (1.0 + z.norm())) {
                    roots.push(z);
                }
            }
        }
        if roots.len() >= certified_count {
            break;
        }
        spacing /= 2.0;
    }
    let mut roots: Vec<Root> =
        roots.into_iter().map(|z| Root { re: z.re, im: z.im, residual: eq.char_value(z).norm() }).collect();
    roots.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
    let complete = roots.len() == certified_count;
    Ok(RootSet { roots, bounds: *bounds, certified_count, complete })
}

/// `v(s) / v(t)` evaluated as `exp(log v(s) - log v(t))`.
pub fn scalar_flow(log_v: impl Fn(f64) -> f64, s: f64, t: f64) -> f64 {
    if s == t {
        return 1.0;
    }
    (log_v(s) - log_v(t)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::MatrixFn;
    use approx::assert_abs_diff_eq;

    fn scalar_delay(b: f64) -> CharacteristicEquation {
        CharacteristicEquation::new(DMatrix::zeros(1, 1), vec![(1.0, DMatrix::from_element(1, 1, b))]).unwrap()
    }

    #[test]
    fn stable_delay_rightmost_pair() {
        let set = char_roots(&scalar_delay(-1.0), &RootBox::default(), 2000).unwrap();
        assert!(set.complete, "{} roots vs count {}", set.roots.len(), set.certified_count);
        let (a, b) = (set.roots[0], set.roots[1]);
        assert_abs_diff_eq!(a.re, -0.3181, epsilon = 1e-4);
        assert_abs_diff_eq!(a.im.abs(), 1.3372, epsilon = 1e-4);
        assert_abs_diff_eq!(a.im, -b.im, epsilon = 1e-10);
        assert!(set.roots.iter().all(|r| r.residual <= 1e-10 * (1.0 + r.value().norm())));
    }

    #[test]
    fn unstable_delay_real_root() {
        let set = char_roots(&scalar_delay(1.0), &RootBox::default(), 2000).unwrap();
        let top = set.rightmost().unwrap();
        assert_abs_diff_eq!(top.re, 0.567_143_290_409_783_8, epsilon = 1e-6);
        assert_abs_diff_eq!(top.im, 0.0, epsilon = 1e-10);
        assert_eq!(set.roots.iter().filter(|r| r.re > 0.0).count(), 1);
    }

    #[test]
    fn ode_root_is_coefficient() {
        let l = CoefficientSpec::new(0.0, 1).unwrap().with_instantaneous(MatrixFn::scalar(-0.7)).unwrap();
        let eq = CharacteristicEquation::from_spec(&l).unwrap();
        let set = char_roots(&eq, &RootBox::default(), 200).unwrap();
        assert_eq!(set.certified_count, 1);
        assert_abs_diff_eq!(set.roots[0].re, -0.7, epsilon = 1e-14);
    }

    #[test]
    fn distributed_kernel_matches_closed_form() {
        // x' = -2 int_{-1}^0 x: char = lambda + 2 (1 - e^{-lambda}) / lambda
        let l = CoefficientSpec::new(1.0, 1).unwrap().with_kernel(KernelFn::Constant(DMatrix::from_element(1, 1, -2.0))).unwrap();
        let eq = CharacteristicEquation::from_spec(&l).unwrap();
        let z = C64::new(0.3, 0.7);
        let expected = z + (C64::from(1.0) - (-z).exp()) * 2.0 / z;
        assert_abs_diff_eq!((eq.char_value(z) - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn root_on_contour_requests_adjustment() {
        let eq = CharacteristicEquation::new(DMatrix::from_element(1, 1, 1.0), vec![]).unwrap();
        let bounds = RootBox { re_min: -1.0, re_max: 1.0, im_min: -1.0, im_max: 1.0 };
        assert!(matches!(char_roots(&eq, &bounds, 8), Err(Error::BoxAdjust { .. })));
    }

    #[test]
    fn scalar_flow_examples() {
        assert_eq!(scalar_flow(|t| t, 3.0, 3.0), 1.0);
        assert_abs_diff_eq!(scalar_flow(|t| t, 0.0, 2.0), (-2.0f64).exp(), epsilon = 1e-15);
    }
}

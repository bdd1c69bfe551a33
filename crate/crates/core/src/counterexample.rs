//! A scalar ODE `x' = a(t) x` with `a = -v'/v` that is Hyers–Ulam stable but
//! admits no exponential dichotomy.
//!
//! `v(t) = e^t + sum_{n=2}^{n_max} H_n beta((t - c_n) / w_n)` with
//! `beta(u) = cos^2(pi u / 2)` on `|u| <= 1` (unit area, C^1), centers
//! `c_n = n - 1/n`, heights `H_n = (n + 1) e^n` and half-widths chosen so that
//! spike `n` has area `area_n` (default `2^-n`). Then
//!
//! * `int_0^t v <= v(t)` because the total spike area stays below the slack 1,
//! * `v(t) >= e^t -> infinity`,
//! * `v(n - 1/n) / v(n) = e^{-1/n} + n + 1 > n`.
//!
//! All evaluations are log-stabilized.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSpec, MatrixFn, Refinement};
use crate::dichotomy::{analyze, DichotomyConfig, DichotomyReport};
use crate::evolution::build_sequence;
use crate::segment::make_grid;
use crate::error::{Error, Result};

/// Points per spike support added to every evaluation mesh.
const SPIKE_SAMPLES: usize = 64;

fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        let c = (0.5 * PI * u).cos();
        c * c
    }
}

fn bump_slope(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        -0.5 * PI * (PI * u).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub n: usize,
    pub center: f64,
    pub height: f64,
    pub half_width: f64,
    pub area: f64,
}

impl Spike {
    pub fn support(&self) -> (f64, f64) {
        (self.center - self.half_width, self.center + self.half_width)
    }
}

/// The density `v` of the counterexample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikeDensity {
    pub n_max: usize,
    /// `spikes[i]` belongs to `n = i + 2`; empty for the spikeless control.
    pub spikes: Vec<Spike>,
}

pub fn alpha(n: usize) -> f64 {
    1.0 / n as f64
}

/// Standard construction with spike areas `2^-n`.
pub fn build_v(n_max: usize) -> Result<SpikeDensity> {
    SpikeDensity::with_area(n_max, |n| 0.5f64.powi(n as i32))
}

impl SpikeDensity {
    pub fn with_area(n_max: usize, area: impl Fn(usize) -> f64) -> Result<Self> {
        if n_max < 2 {
            return Err(Error::Parameter(format!("n_max must be >= 2, got {n_max}")));
        }
        let mut spikes: Vec<Spike> = Vec::with_capacity(n_max - 1);
        for n in 2..=n_max {
            let a = area(n);
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Construction(format!("spike {n} has area {a}")));
            }
            let height = (n as f64 + 1.0) * (n as f64).exp();
            let spike = Spike { n, center: n as f64 - alpha(n), height, half_width: a / height, area: a };
            let (lo, hi) = spike.support();
            let al = alpha(n);
            if lo <= n as f64 - 1.5 * al || hi >= n as f64 - 0.5 * al {
                return Err(Error::Construction(format!("spike {n} support [{lo}, {hi}] leaves its slot")));
            }
            if let Some(prev) = spikes.last() {
                if prev.support().1 >= lo {
                    return Err(Error::Construction(format!("spikes {} and {n} overlap", prev.n)));
                }
            }
            spikes.push(spike);
        }
        Ok(Self { n_max, spikes })
    }

    /// `v = e^t` (negative control).
    pub fn spikeless(n_max: usize) -> Self {
        Self { n_max, spikes: Vec::new() }
    }

    pub fn has_spikes(&self) -> bool {
        !self.spikes.is_empty()
    }

    /// Spike whose slot `(n - 1, n]` contains `t`.
    fn spike_at(&self, t: f64) -> Option<&Spike> {
        if t <= 1.0 {
            return None;
        }
        let n = t.ceil() as usize;
        let s = self.spikes.get(n.checked_sub(2)?)?;
        let (lo, hi) = s.support();
        (t > lo && t < hi).then_some(s)
    }

    /// `(H e^{-t} beta, H e^{-t} beta' / w)` for the active spike.
    fn relative_spike(&self, t: f64) -> (f64, f64) {
        match self.spike_at(t) {
            None => (0.0, 0.0),
            Some(s) => {
                let u = (t - s.center) / s.half_width;
                let scale = (s.n as f64 + 1.0) * (s.n as f64 - t).exp();
                (scale * bump(u), scale * bump_slope(u) / s.half_width)
            }
        }
    }

    pub fn log_v(&self, t: f64) -> f64 {
        t + self.relative_spike(t).0.ln_1p()
    }

    pub fn v(&self, t: f64) -> f64 {
        self.log_v(t).exp()
    }

    /// `a(t) = -v'(t) / v(t)`.
    pub fn a(&self, t: f64) -> f64 {
        let (s, ds) = self.relative_spike(t);
        -(1.0 + ds) / (1.0 + s)
    }

    /// `v(n - alpha_n) / v(n)` by the construction's closed form; valid for
    /// every `n >= 2` of the (infinite) construction.
    pub fn ratio(&self, n: usize) -> f64 {
        let base = (-alpha(n)).exp();
        if self.has_spikes() {
            base + n as f64 + 1.0
        } else {
            base
        }
    }

    /// Non-overlapping integration panel edges on `[0, t_max]`, split at spike edges and centers.
    fn panel_edges(&self, t_max: f64, step: f64) -> Vec<f64> {
        let mut edges: Vec<f64> = (0..=(t_max / step).floor() as usize).map(|k| k as f64 * step).collect();
        for s in &self.spikes {
            let (lo, hi) = s.support();
            if lo < t_max {
                for j in 0..=SPIKE_SAMPLES {
                    let t = lo + (hi - lo) * j as f64 / SPIKE_SAMPLES as f64;
                    if t < t_max {
                        edges.push(t);
                    }
                }
            }
        }
        edges.push(t_max);
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        edges
    }

    /// Coefficient specification of `x' = a(t) x` on `[0, n_max]`, with
    /// integrator refinement across every spike.
    pub fn coefficients(&self) -> Result<CoefficientSpec> {
        let me = self.clone();
        let mut spec = CoefficientSpec::new(0.0, 1)?
            .with_instantaneous(MatrixFn::varying(move |t| DMatrix::from_element(1, 1, me.a(t))))?
            .with_time_domain(self.n_max as f64)?;
        for s in &self.spikes {
            let (lo, hi) = s.support();
            spec = spec.with_refinement(Refinement { start: lo, end: hi, max_step: s.half_width / 200.0 })?;
        }
        Ok(spec)
    }

    /// Samples `t, log v, v, a` as CSV, densified inside spikes.
    pub fn write_csv<W: Write>(&self, mut w: W, t_max: f64, step: f64) -> Result<()> {
        writeln!(w, "t,log_v,v,a")?;
        for t in self.panel_edges(t_max, step) {
            writeln!(w, "{:.17e},{:.17e},{:.17e},{:.17e}", t, self.log_v(t), self.v(t), self.a(t))?;
        }
        Ok(())
    }
}

/// Adaptive Simpson on `[a, b]` with absolute tolerance `tol`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: usize) -> Result<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if diff.abs() <= 15.0 * tol {
            return Ok(left + right + diff / 15.0);
        }
        if depth == 0 {
            return Err(Error::Quadrature { a, b });
        }
        Ok(rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)? + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Relative panel tolerance of the quadratures.
const QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vpr1Report {
    pub pass: bool,
    pub t_max: f64,
    pub points: usize,
    /// `min_t (v(t) - int_0^t v)`.
    pub min_margin: f64,
    pub argmin: f64,
    /// `min_t (1 - int_0^t v / v(t))`.
    pub min_relative_margin: f64,
}

/// Checks `int_0^t v <= v(t)` on a mesh of spacing `quad_step`, densified in spikes.
pub fn check_vpr1(v: &SpikeDensity, t_max: f64, quad_step: f64) -> Result<Vpr1Report> {
    if !(t_max > 0.0 && t_max <= v.n_max as f64) || !(quad_step > 0.0) {
        return Err(Error::Parameter(format!("need 0 < t_max <= n_max and a positive step, got t_max = {t_max}")));
    }
    let edges = v.panel_edges(t_max, quad_step);
    // log of the running integral, panels scaled by e^{-b}
    let mut log_int = f64::NEG_INFINITY;
    let mut report = Vpr1Report {
        pass: true,
        t_max,
        points: edges.len() - 1,
        min_margin: f64::INFINITY,
        argmin: 0.0,
        min_relative_margin: f64::INFINITY,
    };
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let scaled = |s: f64| (v.log_v(s) - b).exp();
        let est = (b - a) * scaled(b).max(scaled(a)).max(scaled(0.5 * (a + b)));
        let panel = simpson(&scaled, a, b, QUAD_TOL * est.max(1e-300))?;
        let log_panel = panel.ln() + b;
        log_int = if log_int == f64::NEG_INFINITY {
            log_panel
        } else {
            let hi = log_int.max(log_panel);
            hi + ((log_int - hi).exp() + (log_panel - hi).exp()).ln()
        };
        let log_vb = v.log_v(b);
        let rel = -(log_int - log_vb).exp_m1();
        let margin = log_vb.exp() * rel;
        if margin < report.min_margin {
            report.min_margin = margin;
            report.argmin = b;
        }
        report.min_relative_margin = report.min_relative_margin.min(rel);
    }
    report.pass = report.min_margin >= 0.0;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Vpr3Witness {
    pub n: usize,
    /// Closed-form `v(n - alpha_n) / v(n)`.
    pub ratio: f64,
    /// Same ratio from the evaluated `log v`.
    pub ratio_evaluated: f64,
    pub holds: bool,
}

/// `v(n - alpha_n) / v(n) > n` for `n = 2..=n_max`.
pub fn check_vpr3(v: &SpikeDensity, n_max: usize) -> Result<Vec<Vpr3Witness>> {
    if n_max < 2 || n_max > v.n_max {
        return Err(Error::Parameter(format!("need 2 <= n_max <= {}, got {n_max}", v.n_max)));
    }
    Ok((2..=n_max)
        .map(|n| {
            let ratio = v.ratio(n);
            let ratio_evaluated = (v.log_v(n as f64 - alpha(n)) - v.log_v(n as f64)).exp();
            Vpr3Witness { n, ratio, ratio_evaluated, holds: ratio > n as f64 }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyersUlamReport {
    pub pass: bool,
    pub t_max: f64,
    pub sup_x: f64,
    pub sup_z: f64,
    pub argmax: f64,
    /// `sup |x| / sup |z|`, the empirical Hyers–Ulam constant.
    pub kappa: f64,
}

/// Bounded solution `x(t) = int_0^t (v(s) / v(t)) z(s) ds` of `x' = a x + z`
/// and the certificate `sup |x| <= sup |z|`.
pub fn hyers_ulam_certificate(v: &SpikeDensity, z: &dyn Fn(f64) -> f64, t_max: f64, step: f64) -> Result<HyersUlamReport> {
    if !(t_max > 0.0 && t_max <= v.n_max as f64) || !(step > 0.0) {
        return Err(Error::Parameter(format!("need 0 < t_max <= n_max and a positive step, got t_max = {t_max}")));
    }
    let edges = v.panel_edges(t_max, step);
    // x(b) = x(a) v(a)/v(b) + int_a^b (v(s)/v(b)) z(s) ds, all factors O(1)
    let mut x = 0.0f64;
    let mut sup_x = 0.0f64;
    let mut argmax = 0.0;
    let mut sup_z = z(0.0).abs();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let log_vb = v.log_v(b);
        let kernel = |s: f64| (v.log_v(s) - log_vb).exp() * z(s);
        let scale = (b - a) * (v.log_v(a) - log_vb).exp().max(1.0);
        let panel = simpson(&kernel, a, b, QUAD_TOL * scale)?;
        x = x * (v.log_v(a) - log_vb).exp() + panel;
        if x.abs() > sup_x {
            sup_x = x.abs();
            argmax = b;
        }
        sup_z = sup_z.max(z(b).abs()).max(z(0.5 * (a + b)).abs());
    }
    let kappa = if sup_z > 0.0 { sup_x / sup_z } else { 0.0 };
    Ok(HyersUlamReport { pass: sup_x <= sup_z * (1.0 + 1e-9), t_max, sup_x, sup_z, argmax, kappa })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RefutationEntry {
    pub d: f64,
    pub lambda: f64,
    /// Smallest `n` with `v(n - alpha_n) / v(n) > D e^{-lambda alpha_n}`.
    pub witness_n: Option<usize>,
    pub ratio: Option<f64>,
    pub bound: Option<f64>,
    /// `witness_n <= ceil(D) + 1`.
    pub within_expected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefutationReport {
    pub entries: Vec<RefutationEntry>,
    pub all_refuted: bool,
}

/// For each candidate `(D, lambda)` exhibits the first `n` violating
/// `v(n - alpha_n) / v(n) <= D e^{-lambda alpha_n}`, scanning up to `n_scan`.
pub fn dichotomy_refutation(v: &SpikeDensity, d_values: &[f64], lambdas: &[f64], n_scan: usize) -> RefutationReport {
    let mut entries = Vec::with_capacity(d_values.len() * lambdas.len());
    for &d in d_values {
        for &lambda in lambdas {
            let hit = (2..=n_scan.max(2)).find(|&n| v.ratio(n) > d * (-lambda * alpha(n)).exp());
            let expected = d.ceil() as usize + 1;
            entries.push(RefutationEntry {
                d,
                lambda,
                witness_n: hit,
                ratio: hit.map(|n| v.ratio(n)),
                bound: hit.map(|n| d * (-lambda * alpha(n)).exp()),
                within_expected: hit.is_some_and(|n| n <= expected),
            });
        }
    }
    let all_refuted = entries.iter().all(|e| e.witness_n.is_some());
    RefutationReport { entries, all_refuted }
}

/// Window length `1/2520` puts every spike center `n - 1/n` (`n <= 10`) on a window boundary.
pub const REMARK2_WINDOW: f64 = 1.0 / 2520.0;

/// Dichotomy configuration for the counterexample: windows are tiny, so the
/// default gap tolerance `0.05 / h` would exceed every exponent.
pub fn remark2_config() -> DichotomyConfig {
    DichotomyConfig { gap_tol: Some(0.05), ..DichotomyConfig::default() }
}

/// Runs the dichotomy pipeline on `x' = a(t) x` over `[0, n_max]`.
pub fn pipeline_cross_check(v: &SpikeDensity, h_int: f64) -> Result<DichotomyReport> {
    let l = v.coefficients()?;
    let grid = make_grid(0.0, 1, 1)?;
    let count = (v.n_max as f64 / REMARK2_WINDOW).round() as usize;
    let seq = build_sequence(&l, REMARK2_WINDOW, count, &grid, h_int)?;
    Ok(analyze(&seq, &remark2_config())?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn bump_has_unit_area() {
        let area = simpson(&bump, -1.0, 1.0, 1e-14).unwrap();
        assert_abs_diff_eq!(area, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn away_from_spikes_v_is_exponential() {
        let v = build_v(10).unwrap();
        for t in [0.0, 0.5, 2.0, 3.2, 7.0, 10.0] {
            assert_eq!(v.log_v(t), t);
            assert_eq!(v.a(t), -1.0);
        }
        assert_eq!(v.v(0.0), 1.0);
    }

    #[test]
    fn spike_ratio_at_five() {
        let v = build_v(10).unwrap();
        let direct = ((4.8f64).exp() + 6.0 * 5f64.exp()) / 5f64.exp();
        assert_relative_eq!(v.ratio(5), direct, max_relative = 1e-14);
        assert_relative_eq!(v.ratio(5), (-0.2f64).exp() + 6.0, max_relative = 1e-14);
        let evaluated = (v.log_v(4.8) - v.log_v(5.0)).exp();
        assert_relative_eq!(evaluated, direct, max_relative = 1e-12);
    }

    #[test]
    fn supports_are_disjoint_and_inside_slots() {
        let v = build_v(40).unwrap();
        let total: f64 = v.spikes.iter().map(|s| s.area).sum();
        assert!(total <= 0.5);
        for s in &v.spikes {
            let (lo, hi) = s.support();
            assert!(lo > s.n as f64 - 1.0 && hi < s.n as f64 - alpha(s.n) / 2.0);
        }
    }

    #[test]
    fn vpr1_spikeless_margin_is_one() {
        let rep = check_vpr1(&SpikeDensity::spikeless(10), 10.0, 0.25).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.min_margin, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn vpr1_adversarial_fails_after_first_spike() {
        let v = SpikeDensity::with_area(10, |_| 2.0).unwrap();
        let rep = check_vpr1(&v, 10.0, 0.25).unwrap();
        assert!(!rep.pass);
        let first = v.spikes[0].support();
        assert!(rep.argmin > first.0);
    }

    #[test]
    fn vpr3_and_negative_control() {
        let v = build_v(10).unwrap();
        let w = check_vpr3(&v, 10).unwrap();
        assert!(w.iter().all(|x| x.holds));
        assert_relative_eq!(w[0].ratio, (-0.5f64).exp() + 3.0, max_relative = 1e-15);
        assert_relative_eq!(w[8].ratio, (-0.1f64).exp() + 11.0, max_relative = 1e-15);
        let none = check_vpr3(&SpikeDensity::spikeless(10), 10).unwrap();
        assert!(none.iter().all(|x| !x.holds));
    }

    #[test]
    fn hyers_ulam_examples() {
        let flat = SpikeDensity::spikeless(8);
        let zero = hyers_ulam_certificate(&flat, &|_| 0.0, 8.0, 0.25).unwrap();
        assert_eq!(zero.sup_x, 0.0);
        let one = hyers_ulam_certificate(&flat, &|_| 1.0, 8.0, 0.25).unwrap();
        assert_relative_eq!(one.sup_x, 1.0 - (-8.0f64).exp(), max_relative = 1e-10);
        let rep = hyers_ulam_certificate(&build_v(10).unwrap(), &|_| 1.0, 8.0, 0.25).unwrap();
        assert!(rep.pass && rep.sup_x <= 1.0);
    }

    #[test]
    fn refutation_examples() {
        let v = build_v(10).unwrap();
        let rep = dichotomy_refutation(&v, &[5.0, 100.0], &[0.1, 1.0, 10.0], 1000);
        assert!(rep.all_refuted && rep.entries.iter().all(|e| e.within_expected));
        assert!(rep.entries.iter().filter(|e| e.d == 5.0).all(|e| e.witness_n.unwrap() <= 6));
        let control = dichotomy_refutation(&SpikeDensity::spikeless(10), &[1.0], &[1.0], 1000);
        assert_eq!(control.entries[0].witness_n, None);
    }

    #[test]
    fn evolution_matches_density_ratio() {
        let v = build_v(4).unwrap();
        let l = v.coefficients().unwrap();
        let grid = make_grid(0.0, 1, 1).unwrap();
        let c3 = v.spikes[1].center;
        for (s, t) in [(0.5, 1.5), (2.0, 2.5), (c3 - 0.01, c3 + 0.01), (c3 - 0.01, c3), (2.0, 4.0)] {
            let op = crate::evolution::build_t(&l, s, t, &grid, 1e-3).unwrap();
            let expected = crate::oracle::scalar_flow(|x| v.log_v(x), s, t);
            assert_relative_eq!(op.entries[(0, 0)], expected, max_relative = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn log_v_is_at_least_t(t in 0.0f64..10.0) {
            let v = build_v(10).unwrap();
            prop_assert!(v.log_v(t) >= t);
        }

        #[test]
        fn ratio_exceeds_n(n in 2usize..100_000) {
            prop_assert!(build_v(2).unwrap().ratio(n) > n as f64);
        }
    }
}

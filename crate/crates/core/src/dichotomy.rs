//! Detection and refutation of exponential dichotomies from a
//! [`TransitionSequence`].
//!
//! The pipeline is: discrete-QR Lyapunov exponents, unstable dimension from
//! the spectral gap at zero, a stable/unstable splitting with projections
//! `P(n)`, and uniform envelopes `g <= D exp(-lambda (n - m) h)` for the
//! forward stable and backward unstable dynamics. All verdicts are over the
//! computed horizon only.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::TransitionSequence;
use crate::segment::matrix_inf_norm;

/// Tunable thresholds of the dichotomy test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DichotomyConfig {
    /// Minimal distance of exponents from zero; `None` means `0.05 / h`.
    pub gap_tol: Option<f64>,
    pub lambda_min: f64,
    pub d_max: f64,
    /// Largest admissible ratio between the envelope constant required on
    /// the whole horizon and on its first half.
    pub growth_tol: f64,
    /// Minimal sine of the angle between stable and unstable frames.
    pub angle_tol: f64,
    /// Forward window (in windows) for the stable subspace; `None` picks
    /// `max(4, ceil(2 / (lambda h)))`.
    pub window_m: Option<usize>,
    /// Unstable dimension override.
    pub k: Option<usize>,
}

impl Default for DichotomyConfig {
    fn default() -> Self {
        Self {
            gap_tol: None,
            lambda_min: 1e-3,
            d_max: 1e6,
            growth_tol: 1.5,
            angle_tol: 1e-6,
            window_m: None,
            k: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentEstimate {
    /// Finite-time Lyapunov exponents, descending (`-inf` marks underflow).
    pub exponents: Vec<f64>,
    pub window_count: usize,
    pub window_length: f64,
    /// Number of exponents above the gap, when a gap straddles zero.
    pub gap_index: Option<usize>,
    pub gap_width: f64,
    pub gap_tol: f64,
}

impl ExponentEstimate {
    /// Exponent closest to zero, the one limiting the dichotomy rates.
    pub fn nearest_to_zero(&self) -> Option<f64> {
        self.exponents.iter().copied().filter(|e| e.is_finite()).min_by(|a, b| a.abs().total_cmp(&b.abs()))
    }
}

/// Discrete QR method: propagate a full orthonormal frame through `A(n)`.
pub fn lyapunov_exponents(seq: &TransitionSequence, gap_tol: Option<f64>) -> Result<ExponentEstimate> {
    let count = seq.count();
    if count < 4 {
        return Err(Error::Parameter(format!("need at least 4 windows, got {count}")));
    }
    let mut frame = image_frame(seq.window(0));
    let dim = seq.dim();
    let mut sums = vec![0.0f64; dim];
    for n in 0..count {
        let qr = (seq.window(n) * &frame).qr();
        let r = qr.r();
        for (i, s) in sums.iter_mut().enumerate() {
            let rii = r[(i, i)].abs();
            *s += if rii < 1e-300 { f64::NEG_INFINITY } else { rii.ln() };
        }
        frame = qr.q();
    }
    let horizon = count as f64 * seq.h;
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / horizon).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));

    let tol = gap_tol.unwrap_or(0.05 / seq.h);
    let k = exponents.iter().filter(|&&e| e > 0.0).count();
    let above = if k > 0 { exponents[k - 1] } else { f64::INFINITY };
    let below = exponents.get(k).copied().unwrap_or(f64::NEG_INFINITY);
    let gap_index = (above >= tol && below <= -tol).then_some(k);
    let gap_width = if k == 0 {
        -below
    } else if k == exponents.len() {
        above
    } else {
        above - below
    };
    Ok(ExponentEstimate { exponents, window_count: count, window_length: seq.h, gap_index, gap_width, gap_tol: tol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Dichotomy,
    NoDichotomy,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Some exponent lies within the gap tolerance of zero.
    ExponentInGap,
    /// Envelope slope below `lambda_min`.
    RateBelowMinimum,
    /// Envelope constant above `d_max`.
    ConstantExceedsCap,
    /// The constant needed keeps growing with the horizon.
    UnboundedEnvelope,
}

/// Record of the pair (or exponent) that breaks the dichotomy estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Witness {
    pub kind: ViolationKind,
    pub branch: Option<Branch>,
    /// Later and earlier window boundary of the violating pair.
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub t_n: Option<f64>,
    pub t_m: Option<f64>,
    pub norm: Option<f64>,
    /// Constant needed at `lambda_min` for this pair.
    pub required_d: Option<f64>,
    pub exponent: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Residuals {
    pub commutation: Option<f64>,
    pub idempotency: f64,
    pub min_angle: f64,
    pub stable_growth: Option<f64>,
    pub unstable_growth: Option<f64>,
}

/// Estimated splitting `C = S(n) + U(n)` with projections onto `S(n)` along `U(n)`.
#[derive(Debug, Clone)]
pub struct DichotomySplit {
    pub k: usize,
    pub window_m: usize,
    /// `P(n)`, `n = 0..=count`.
    pub projections: Vec<DMatrix<f64>>,
    /// Orthonormal bases `V(n)` of `U(n)` with `A(n) V(n) = V(n+1) R(n)`.
    pub unstable_frames: Vec<DMatrix<f64>>,
    /// Orthonormal bases of `S(n)`.
    pub stable_frames: Vec<DMatrix<f64>>,
    /// `R(n)`, the restriction of `A(n)` to the unstable frames.
    pub unstable_coupling: Vec<DMatrix<f64>>,
    /// Coordinates map `Q(n) = V(n) C(n)` with `C(n) = (W^T V)^{-1} W^T`.
    pub unstable_coordinates: Vec<DMatrix<f64>>,
    /// Boundaries whose subspace estimates carry convergence transients.
    pub transient: Vec<bool>,
    pub d_s: Option<f64>,
    pub lambda_s: Option<f64>,
    pub d_u: Option<f64>,
    pub lambda_u: Option<f64>,
    pub residuals: Residuals,
    pub verdict: Verdict,
    pub witness: Option<Witness>,
}

impl DichotomySplit {
    pub fn complementary(&self, n: usize) -> DMatrix<f64> {
        let p = &self.projections[n];
        DMatrix::identity(p.nrows(), p.ncols()) - p
    }

    /// Non-transient boundary range `lo..=hi`.
    pub fn usable_range(&self) -> Option<(usize, usize)> {
        let lo = self.transient.iter().position(|t| !t)?;
        let hi = self.transient.iter().rposition(|t| !t)?;
        Some((lo, hi))
    }
}

/// Left singular vectors of `a`: a full orthonormal frame whose leading
/// columns lie in the (smooth) range of the solution operator, so that no
/// exponent starts from a node-localized direction with a vanishing
/// component along the dominant modes.
fn image_frame(a: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = a.nrows();
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    DMatrix::from_fn(dim, dim, |i, j| u[(i, order[j])])
}

fn orthonormal_complement(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (dim, k) = w.shape();
    let mut aug = DMatrix::zeros(dim, k + dim);
    aug.columns_mut(0, k).copy_from(w);
    aug.columns_mut(k, dim).fill_with_identity();
    let q = aug.qr().q();
    q.columns(k, dim - k).into_owned()
}

/// Right singular vectors of `m`, ordered by descending singular value.
fn right_singular_vectors(m: DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.ncols();
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut v = DMatrix::zeros(dim, order.len());
    for (c, &i) in order.iter().enumerate() {
        v.column_mut(c).copy_from(&vt.row(i).transpose());
    }
    if v.ncols() < dim {
        // wide-rank completion for degenerate shapes
        let comp = orthonormal_complement(&v);
        let mut full = DMatrix::zeros(dim, dim);
        full.columns_mut(0, v.ncols()).copy_from(&v);
        full.columns_mut(v.ncols(), dim - v.ncols()).copy_from(&comp);
        return full;
    }
    v
}

/// Estimates the splitting for unstable dimension `k`.
///
/// `U(n)` comes from forward power iteration of a `k`-frame started on the
/// leading left singular vectors of `A(0)`; `S(n)` is the
/// span of the right singular vectors of `A(n+m-1)...A(n)` beyond the `k`
/// largest. The first and last `m` boundaries are flagged as transient
/// (none when `k = 0`, where `P = Id` needs no convergence).
pub fn estimate_split(seq: &TransitionSequence, k: usize, window_m: usize, angle_tol: f64) -> Result<DichotomySplit> {
    let count = seq.count();
    let dim = seq.dim();
    if k > dim {
        return Err(Error::Parameter(format!("unstable dimension {k} exceeds state dimension {dim}")));
    }
    if window_m < 2 {
        return Err(Error::Parameter(format!("window_m must be >= 2, got {window_m}")));
    }
    let transient_m = if k == 0 { 0 } else { window_m };
    let transient: Vec<bool> = (0..=count).map(|n| n < transient_m || n + transient_m > count).collect();

    if k == 0 {
        let eye = DMatrix::identity(dim, dim);
        return Ok(DichotomySplit {
            k,
            window_m,
            projections: vec![eye.clone(); count + 1],
            unstable_frames: vec![DMatrix::zeros(dim, 0); count + 1],
            stable_frames: vec![eye; count + 1],
            unstable_coupling: vec![DMatrix::zeros(0, 0); count],
            unstable_coordinates: vec![DMatrix::zeros(0, dim); count + 1],
            transient,
            d_s: None,
            lambda_s: None,
            d_u: None,
            lambda_u: None,
            residuals: Residuals { min_angle: 1.0, ..Residuals::default() },
            verdict: Verdict::Inconclusive,
            witness: None,
        });
    }

    let mut frames = Vec::with_capacity(count + 1);
    let mut coupling = Vec::with_capacity(count);
    // any complement of S(0) is admissible at n = 0; the leading image
    // directions of A(0) are smooth segments already close to U(0)
    frames.push(image_frame(seq.window(0)).columns(0, k).into_owned());
    for n in 0..count {
        let qr = (seq.window(n) * &frames[n]).qr();
        coupling.push(qr.r());
        frames.push(qr.q());
    }

    let mut projections = Vec::with_capacity(count + 1);
    let mut stable_frames = Vec::with_capacity(count + 1);
    let mut coordinates = Vec::with_capacity(count + 1);
    let mut min_angle = f64::INFINITY;
    let eye = DMatrix::<f64>::identity(dim, dim);
    for n in 0..=count {
        let end = (n + window_m).min(count);
        let (w, s) = if end > n {
            let rv = right_singular_vectors(seq.product(end, n));
            (rv.columns(0, k).into_owned(), rv.columns(k, dim - k).into_owned())
        } else {
            (frames[n].clone(), orthonormal_complement(&frames[n]))
        };
        let coupling_wv = w.transpose() * &frames[n];
        let smallest = coupling_wv.clone().singular_values().iter().copied().fold(f64::INFINITY, f64::min);
        min_angle = min_angle.min(smallest);
        if smallest < angle_tol {
            return Err(Error::SplittingDegeneracy { window: n, angle: smallest });
        }
        let inv = coupling_wv
            .try_inverse()
            .ok_or(Error::SplittingDegeneracy { window: n, angle: 0.0 })?;
        let coords = inv * w.transpose();
        let q = &frames[n] * &coords;
        projections.push(&eye - q);
        stable_frames.push(s);
        coordinates.push(coords);
    }

    let idempotency = projections.iter().map(|p| (p * p - p).amax()).fold(0.0, f64::max);
    Ok(DichotomySplit {
        k,
        window_m,
        projections,
        unstable_frames: frames,
        stable_frames,
        unstable_coupling: coupling,
        unstable_coordinates: coordinates,
        transient,
        d_s: None,
        lambda_s: None,
        d_u: None,
        lambda_u: None,
        residuals: Residuals { idempotency, min_angle, ..Residuals::default() },
        verdict: Verdict::Inconclusive,
        witness: None,
    })
}

/// Tightest uniform envelope `g(n, m) <= D exp(-lambda (n - m) h)` over a set of pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub d: f64,
    pub lambda: f64,
    /// Ratio of the constant needed at `lambda_min` on the full horizon to
    /// that on its first half.
    pub growth: f64,
    pub worst_n: usize,
    pub worst_m: usize,
    pub worst_norm: f64,
    pub worst_required_d: f64,
}

/// Accumulates log pair norms by lag and tracks the constant needed at `lambda_min`.
struct PairAccumulator {
    h: f64,
    lambda_min: f64,
    mid: usize,
    /// `ln max g` per lag.
    by_lag: Vec<f64>,
    /// (ln required D, n, m, ln g) of the worst pair.
    full: (f64, usize, usize, f64),
    half: f64,
}

impl PairAccumulator {
    fn new(max_lag: usize, h: f64, lambda_min: f64, mid: usize) -> Self {
        let neg = f64::NEG_INFINITY;
        Self { h, lambda_min, mid, by_lag: vec![neg; max_lag + 1], full: (neg, 0, 0, neg), half: neg }
    }

    /// Pair with later boundary `n`, earlier boundary `m` and `ln g(n, m)`.
    #[inline]
    fn push(&mut self, n: usize, m: usize, log_g: f64) {
        let lag = n - m;
        if log_g > self.by_lag[lag] {
            self.by_lag[lag] = log_g;
        }
        let need = log_g + self.lambda_min * lag as f64 * self.h;
        if need > self.full.0 {
            self.full = (need, n, m, log_g);
        }
        if n <= self.mid && need > self.half {
            self.half = need;
        }
    }

    fn finish(&self) -> Option<Envelope> {
        let pts: Vec<(f64, f64)> = self
            .by_lag
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_finite())
            .map(|(lag, &g)| (lag as f64 * self.h, g))
            .collect();
        let max_lag = self.by_lag.len() - 1;
        if max_lag < 2 || pts.len() < 3 {
            return None;
        }
        let hull = upper_hull(&pts);
        let span = max_lag as f64 * self.h;
        let (x_lo, x_hi) = (0.25 * span, 0.75 * span);
        let lambda = -(eval_hull(&hull, x_hi) - eval_hull(&hull, x_lo)) / (x_hi - x_lo);
        let log_d = pts.iter().map(|&(x, g)| g + lambda * x).fold(f64::NEG_INFINITY, f64::max);
        Some(Envelope {
            d: log_d.exp(),
            lambda,
            growth: (self.full.0 - self.half).exp(),
            worst_n: self.full.1,
            worst_m: self.full.2,
            worst_norm: self.full.3.exp(),
            worst_required_d: self.full.0.exp(),
        })
    }
}

/// Upper concave hull of points sorted by abscissa.
fn upper_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for &p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // drop b when it lies on or below the chord a-p
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

fn eval_hull(hull: &[(f64, f64)], x: f64) -> f64 {
    let i = hull.partition_point(|p| p.0 <= x).clamp(1, hull.len() - 1);
    let (a, b) = (hull[i - 1], hull[i]);
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

fn stable_envelope(seq: &TransitionSequence, split: &DichotomySplit, lo: usize, hi: usize, lambda_min: f64) -> Option<Envelope> {
    let mid = lo + (hi - lo) / 2;
    let mut acc = PairAccumulator::new(hi - lo, seq.h, lambda_min, mid);
    if seq.dim() == 1 {
        let logs = log_prefix(seq);
        for m in lo..=hi {
            let log_p = split.projections[m][(0, 0)].abs().ln();
            for n in m..=hi {
                acc.push(n, m, log_p + logs[n] - logs[m]);
            }
        }
    } else {
        for m in lo..=hi {
            // U(n, m) P(m) = P(n) U(n, m) P(m); re-projecting keeps estimation
            // errors in P from being amplified along the unstable directions
            let mut x = split.projections[m].clone();
            for n in m..=hi {
                acc.push(n, m, matrix_inf_norm(&x).ln());
                if n < hi {
                    x = &split.projections[n + 1] * (seq.window(n) * x);
                }
            }
        }
    }
    acc.finish()
}

/// Backward growth `||T(m, n) Q(n)||` through the restricted inverse on the unstable frames.
fn unstable_envelope(split: &DichotomySplit, h: f64, lo: usize, hi: usize, lambda_min: f64) -> Option<Envelope> {
    let mid = lo + (hi - lo) / 2;
    let mut acc = PairAccumulator::new(hi - lo, h, lambda_min, mid);
    for n in lo..=hi {
        let mut y = split.unstable_coordinates[n].clone();
        let mut m = n;
        loop {
            acc.push(n, m, matrix_inf_norm(&(&split.unstable_frames[m] * &y)).ln());
            if m == lo {
                break;
            }
            m -= 1;
            let r = &split.unstable_coupling[m];
            y = match r.clone().lu().solve(&y) {
                Some(v) => v,
                None => return None,
            };
        }
    }
    acc.finish()
}

fn log_prefix(seq: &TransitionSequence) -> Vec<f64> {
    let mut logs = Vec::with_capacity(seq.count() + 1);
    logs.push(0.0);
    for n in 0..seq.count() {
        let a = seq.window(n)[(0, 0)].abs();
        logs.push(logs[n] + if a > 0.0 { a.ln() } else { f64::NEG_INFINITY });
    }
    logs
}

fn envelope_witness(env: &Envelope, branch: Branch, kind: ViolationKind, h: f64) -> Witness {
    Witness {
        kind,
        branch: Some(branch),
        n: Some(env.worst_n),
        m: Some(env.worst_m),
        t_n: Some(env.worst_n as f64 * h),
        t_m: Some(env.worst_m as f64 * h),
        norm: Some(env.worst_norm),
        required_d: Some(env.worst_required_d),
        exponent: None,
    }
}

/// Fits `(D_s, lambda_s)` and `(D_u, lambda_u)` on non-transient pairs and assigns the verdict.
pub fn fit_constants(seq: &TransitionSequence, mut split: DichotomySplit, config: &DichotomyConfig) -> DichotomySplit {
    let Some((lo, hi)) = split.usable_range().filter(|(lo, hi)| hi > lo) else {
        split.verdict = Verdict::Inconclusive;
        return split;
    };
    let dim = seq.dim();
    let mut envelopes = Vec::new();
    if split.k < dim {
        match stable_envelope(seq, &split, lo, hi, config.lambda_min) {
            Some(env) => {
                split.d_s = Some(env.d);
                split.lambda_s = Some(env.lambda);
                split.residuals.stable_growth = Some(env.growth);
                envelopes.push((Branch::Stable, env));
            }
            None => {
                split.verdict = Verdict::Inconclusive;
                return split;
            }
        }
    }
    if split.k > 0 {
        match unstable_envelope(&split, seq.h, lo, hi, config.lambda_min) {
            Some(env) => {
                split.d_u = Some(env.d);
                split.lambda_u = Some(env.lambda);
                split.residuals.unstable_growth = Some(env.growth);
                envelopes.push((Branch::Unstable, env));
            }
            None => {
                split.verdict = Verdict::Inconclusive;
                return split;
            }
        }
    }

    split.verdict = Verdict::Dichotomy;
    split.witness = None;
    for (branch, env) in &envelopes {
        let kind = if !(env.lambda >= config.lambda_min) {
            Some(ViolationKind::RateBelowMinimum)
        } else if !(env.d <= config.d_max) {
            Some(ViolationKind::ConstantExceedsCap)
        } else if !(env.growth <= config.growth_tol) {
            Some(ViolationKind::UnboundedEnvelope)
        } else {
            None
        };
        if let Some(kind) = kind {
            split.verdict = Verdict::NoDichotomy;
            split.witness = Some(envelope_witness(env, *branch, kind, seq.h));
            break;
        }
    }
    split
}

/// `max ||P(n+1) A(n) - A(n) P(n)|| / ||A(n)||` over non-transient windows.
pub fn commutation_residual(seq: &TransitionSequence, split: &DichotomySplit) -> f64 {
    (0..seq.count())
        .filter(|&n| !split.transient[n] && !split.transient[n + 1])
        .map(|n| {
            let a = seq.window(n);
            let diff = &split.projections[n + 1] * a - a * &split.projections[n];
            let scale = matrix_inf_norm(a);
            if scale > 0.0 {
                matrix_inf_norm(&diff) / scale
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Exponential bound `||U(n, m)|| <= K exp(a (n - m) h)` over all pairs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExponentialBound {
    pub k: f64,
    pub a: f64,
}

/// Growth rate `a` from the slope of the norm envelope, then `K` as the
/// smallest constant covering every sampled pair. If that `K` exceeds ten
/// times the largest single-window norm, `K` is capped there and `a` raised
/// to the smallest value that still covers all pairs.
pub fn exp_bound_fit(seq: &TransitionSequence) -> Result<ExponentialBound> {
    let count = seq.count();
    if count < 2 {
        return Err(Error::Parameter(format!("need at least 2 windows, got {count}")));
    }
    let window_max = (0..count).map(|n| matrix_inf_norm(seq.window(n))).fold(1.0, f64::max);
    let mut acc = PairAccumulator::new(count, seq.h, 0.0, count);
    if seq.dim() == 1 {
        let logs = log_prefix(seq);
        for m in 0..=count {
            for n in m..=count {
                acc.push(n, m, logs[n] - logs[m]);
            }
        }
    } else {
        for m in 0..=count {
            let mut u = DMatrix::identity(seq.dim(), seq.dim());
            for n in m..=count {
                acc.push(n, m, matrix_inf_norm(&u).ln());
                if n < count {
                    u = seq.window(n) * u;
                }
            }
        }
    }
    let cap = 10.0 * window_max;
    if let Some(env) = acc.finish() {
        let k = env.d.max(1.0);
        if k <= cap {
            return Ok(ExponentialBound { k, a: -env.lambda });
        }
    }
    let a = acc
        .by_lag
        .iter()
        .enumerate()
        .skip(1)
        .map(|(lag, &g)| (g - cap.ln()) / (lag as f64 * seq.h))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ExponentialBound { k: cap, a })
}

/// Serializable summary of a full dichotomy analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DichotomyReport {
    pub schema: String,
    pub norm: String,
    pub horizon: f64,
    pub window_length: f64,
    pub window_count: usize,
    pub window_m: usize,
    pub k: usize,
    pub lambda_s: Option<f64>,
    pub lambda_u: Option<f64>,
    pub d_s: Option<f64>,
    pub d_u: Option<f64>,
    pub verdict: Verdict,
    pub residuals: Residuals,
    pub witness: Option<Witness>,
    pub exponents: ExponentEstimate,
    pub note: Option<String>,
}

/// Full analysis: exponents, splitting, constants, commutation residual.
pub struct Analysis {
    pub report: DichotomyReport,
    pub split: Option<DichotomySplit>,
}

pub const NORM_NOTE: &str = "max-norm on R^d; operators in the induced max-norm on node values";

/// Default forward window `max(4, ceil(2 / (lambda h)))`, kept below half the horizon.
pub fn default_window_m(estimate: &ExponentEstimate) -> usize {
    let lam = estimate.nearest_to_zero().map(f64::abs).unwrap_or(1.0).max(1e-6);
    let m = ((2.0 / (lam * estimate.window_length)).ceil() as usize).max(4);
    let cap = (estimate.window_count.saturating_sub(4) / 2).max(2);
    m.min(cap)
}

pub fn analyze(seq: &TransitionSequence, config: &DichotomyConfig) -> Result<Analysis> {
    let exps = lyapunov_exponents(seq, config.gap_tol)?;
    let positive = exps.exponents.iter().filter(|&&e| e > 0.0).count();
    let k = config.k.or(exps.gap_index).unwrap_or(positive);
    let m = config.window_m.unwrap_or_else(|| default_window_m(&exps));
    let mut report = DichotomyReport {
        schema: "v1".into(),
        norm: NORM_NOTE.into(),
        horizon: seq.count() as f64 * seq.h,
        window_length: seq.h,
        window_count: seq.count(),
        window_m: m,
        k,
        lambda_s: None,
        lambda_u: None,
        d_s: None,
        d_u: None,
        verdict: Verdict::Inconclusive,
        residuals: Residuals::default(),
        witness: None,
        exponents: exps.clone(),
        note: Some(format!("finite-horizon verdict over [0, {}]", seq.count() as f64 * seq.h)),
    };
    let split = match estimate_split(seq, k, m, config.angle_tol) {
        Ok(s) => s,
        Err(Error::SplittingDegeneracy { window, angle }) => {
            report.note = Some(format!("splitting degenerate at window {window} (sin angle {angle:e})"));
            return Ok(Analysis { report, split: None });
        }
        Err(e) => return Err(e),
    };
    let mut split = fit_constants(seq, split, config);
    split.residuals.commutation = Some(commutation_residual(seq, &split));
    if exps.gap_index.is_none() && config.k.is_none() && split.verdict != Verdict::NoDichotomy {
        let nearest = exps.nearest_to_zero();
        split.verdict = Verdict::NoDichotomy;
        split.witness = Some(Witness {
            kind: ViolationKind::ExponentInGap,
            branch: None,
            n: None,
            m: None,
            t_n: None,
            t_m: None,
            norm: None,
            required_d: None,
            exponent: nearest,
        });
    }
    report.lambda_s = split.lambda_s;
    report.lambda_u = split.lambda_u;
    report.d_s = split.d_s;
    report.d_u = split.d_u;
    report.verdict = split.verdict;
    report.residuals = split.residuals.clone();
    report.witness = split.witness.clone();
    Ok(Analysis { report, split: Some(split) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::EvolutionMatrix;
    use crate::segment::make_grid;
    use approx::assert_abs_diff_eq;

/// Deterministic generic starting frame.
fn starting_frame(dim: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, k, |i, j| {
        let x = ((i as f64 + 1.0) * 12.9898 + (j as f64 + 1.0) * 78.233).sin() * 43758.5453;
        x - x.floor() - 0.5
    })
}

    fn constant_sequence(a: DMatrix<f64>, h: f64, count: usize) -> TransitionSequence {
        let d = a.nrows();
        let grid = make_grid(0.0, d, 1).unwrap();
        let windows = (0..count)
            .map(|n| EvolutionMatrix { s: n as f64 * h, t: (n + 1) as f64 * h, grid: grid.clone(), entries: a.clone() })
            .collect();
        TransitionSequence { h, h_int: h, grid, windows }
    }

    #[test]
    fn hull_of_line_is_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 - 0.5 * i as f64)).collect();
        let hull = upper_hull(&pts);
        assert_abs_diff_eq!(eval_hull(&hull, 3.3), 2.0 - 1.65, epsilon = 1e-12);
    }

    #[test]
    fn scalar_exponents_are_exact() {
        let seq = constant_sequence(DMatrix::from_element(1, 1, (-0.7f64).exp()), 1.0, 10);
        let e = lyapunov_exponents(&seq, None).unwrap();
        assert_abs_diff_eq!(e.exponents[0], -0.7, epsilon = 1e-14);
        assert_eq!(e.gap_index, Some(0));
    }

    #[test]
    fn diagonal_system_gap_and_split() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0f64.exp(), (-0.5f64).exp()]));
        let seq = constant_sequence(a, 1.0, 20);
        let e = lyapunov_exponents(&seq, None).unwrap();
        assert_eq!(e.gap_index, Some(1));
        let split = estimate_split(&seq, 1, 5, 1e-6).unwrap();
        let v = &split.unstable_frames[10];
        assert_abs_diff_eq!(v[(0, 0)].abs(), 1.0, epsilon = 1e-9);
        let split = fit_constants(&seq, split, &DichotomyConfig::default());
        assert_eq!(split.verdict, Verdict::Dichotomy);
        assert_abs_diff_eq!(split.lambda_s.unwrap(), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(split.lambda_u.unwrap(), 1.0, epsilon = 1e-9);
        assert!(commutation_residual(&seq, &split) < 1e-12);
    }

    #[test]
    fn identity_has_no_dichotomy() {
        let seq = constant_sequence(DMatrix::identity(1, 1), 1.0, 12);
        let split = estimate_split(&seq, 0, 4, 1e-6).unwrap();
        let split = fit_constants(&seq, split, &DichotomyConfig::default());
        assert_eq!(split.lambda_s, Some(0.0));
        assert_eq!(split.verdict, Verdict::NoDichotomy);
        assert_eq!(split.witness.unwrap().kind, ViolationKind::RateBelowMinimum);
        let bound = exp_bound_fit(&seq).unwrap();
        assert_eq!(bound.k, 1.0);
        assert_abs_diff_eq!(bound.a, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn k_zero_split_commutes_exactly() {
        let seq = constant_sequence(DMatrix::from_element(1, 1, 0.5), 1.0, 8);
        let split = estimate_split(&seq, 0, 4, 1e-6).unwrap();
        assert_eq!(commutation_residual(&seq, &split), 0.0);
        assert!(split.projections.iter().all(|p| p == &DMatrix::identity(1, 1)));
    }

    #[test]
    fn random_projections_fail_commutation() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5, 0.3]));
        let seq = constant_sequence(a, 1.0, 10);
        let mut split = estimate_split(&seq, 1, 3, 1e-6).unwrap();
        for (n, p) in split.projections.iter_mut().enumerate() {
            let v = starting_frame(3, 1 + n % 2).qr().q();
            let w = starting_frame(3, 1 + n % 2).map(|x| x * 0.3 + 0.1).qr().q();
            let q = &v * (w.transpose() * &v).try_inverse().unwrap() * w.transpose();
            *p = DMatrix::identity(3, 3) - q;
        }
        assert!(commutation_residual(&seq, &split) >= 0.1);
    }

    #[test]
    fn too_few_windows() {
        let seq = constant_sequence(DMatrix::identity(1, 1), 1.0, 3);
        assert!(lyapunov_exponents(&seq, None).is_err());
    }
}

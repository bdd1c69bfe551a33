//! Subcommand implementations. Each writes its files under `out` and
//! returns the failure that decides the exit code, if any.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ddelab::counterexample::{
    build_v, check_vpr1, check_vpr3, dichotomy_refutation, hyers_ulam_certificate, pipeline_cross_check,
    HyersUlamReport,
};
use ddelab::dichotomy::{analyze, Analysis, Verdict};
use ddelab::evolution::{build_sequence, TransitionSequence};
use ddelab::integrator::{solve, IvpProblem};
use ddelab::perron_shadow::{perturbed_solution, shadow, KnotForcing, ShadowReport};
use ddelab::segment::{make_grid, Segment};
use ddelab::trajectory::{extract_segment, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::failure::Failure;
use crate::system::{SystemFile, SCHEMA};

type Outcome = Result<(), Failure>;

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display()), 1))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let p = self.path(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| Failure::new("io", format!("{}: {e}", p.display()), 1))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Outcome {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::new("io", e.to_string(), 1))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn trajectory(&self, name: &str, traj: &Trajectory) -> Outcome {
        let mut w = self.create(name)?;
        traj.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Constant initial segment; a single value is broadcast to every component.
fn initial_segment(sys: &SystemFile, phi: &[f64]) -> Result<Segment, Failure> {
    let d = sys.d();
    let values = match phi.len() {
        1 => vec![phi[0]; d],
        n if n == d => phi.to_vec(),
        n => return Err(Failure::schema(format!("--phi: expected 1 or {d} values, got {n}"))),
    };
    let grid = make_grid(sys.r(), d, sys.grid.n)?;
    Ok(Segment::constant(grid, &values)?)
}

pub fn integrate(sys: &SystemFile, phi: &[f64], t_end: f64, out: &Output) -> Outcome {
    let l = sys.coefficients()?;
    let initial = initial_segment(sys, phi)?;
    let grid = initial.grid().clone();
    let traj = solve(&IvpProblem { coefficients: &l, s: 0.0, initial, t_end, forcing: None, step: sys.integrator.h_int })?;
    out.trajectory("trajectory.csv", &traj)?;
    let final_norm = extract_segment(&traj, traj.t_end(), &grid)?.sup_norm();
    out.json(
        "integrate.json",
        &json!({
            "schema": SCHEMA,
            "command": "integrate",
            "t_end": traj.t_end(),
            "samples": traj.times().len(),
            "final_segment_norm": final_norm,
            "breakpoints": traj.breakpoints(),
        }),
    )?;
    println!("integrated to t = {} ({} samples), final segment norm {final_norm:.6e}", traj.t_end(), traj.times().len());
    Ok(())
}

fn run_dichotomy(sys: &SystemFile, out: &Output) -> Result<(TransitionSequence, Analysis), Failure> {
    let l = sys.coefficients()?;
    let grid = make_grid(sys.r(), sys.d(), sys.grid.n)?;
    let seq = build_sequence(&l, sys.window(), sys.dichotomy.count, &grid, sys.integrator.h_int)?;
    let analysis = analyze(&seq, &sys.dichotomy_config())?;
    out.json("dichotomy.json", &analysis.report)?;
    let mut w = out.create("exponents.csv")?;
    writeln!(w, "index,exponent")?;
    for (i, e) in analysis.report.exponents.exponents.iter().enumerate() {
        writeln!(w, "{i},{e:.17e}")?;
    }
    w.flush()?;
    Ok((seq, analysis))
}

fn verdict_name(v: Verdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

pub fn dichotomy(sys: &SystemFile, out: &Output) -> Outcome {
    let (_, a) = run_dichotomy(sys, out)?;
    let r = &a.report;
    println!("verdict {} (k = {}, window_m = {})", verdict_name(r.verdict), r.k, r.window_m);
    if let (Some(d), Some(l)) = (r.d_s, r.lambda_s) {
        println!("stable envelope D = {d:.6}, lambda = {l:.6}");
    }
    if let (Some(d), Some(l)) = (r.d_u, r.lambda_u) {
        println!("unstable envelope D = {d:.6}, lambda = {l:.6}");
    }
    if let Some(w) = &r.witness {
        println!("witness {}", serde_json::to_string(w).unwrap_or_default());
    }
    if r.verdict == Verdict::Inconclusive {
        let note = r.note.clone().unwrap_or_default();
        return Err(Failure::new("inconclusive", format!("dichotomy test inconclusive: {note}"), 4));
    }
    Ok(())
}

pub struct ShadowArgs<'a> {
    pub phi: &'a [f64],
    pub pseudo: Option<&'a Path>,
    pub perturb: f64,
    pub delta_sweep: Option<&'a [f64]>,
    pub epsilon: Option<f64>,
    pub ablate: bool,
}

pub fn shadow_cmd(sys: &SystemFile, args: &ShadowArgs<'_>, out: &Output) -> Outcome {
    let (seq, a) = run_dichotomy(sys, out)?;
    let split = match (&a.split, a.report.verdict) {
        (Some(s), Verdict::Dichotomy) => s,
        (_, v) => {
            return Err(Failure::new(
                "refusal",
                format!(
                    "verdict {}: the Perron correction needs an exponential dichotomy; shadowability alone does not \
                     give one when sup |L(t)| is infinite, so dichotomy => shadowing is the only usable direction \
                     (see {})",
                    verdict_name(v),
                    out.path("dichotomy.json").display()
                ),
                5,
            ))
        }
    };
    let l = sys.coefficients()?;
    let horizon = seq.count() as f64 * seq.h;
    let run = |y: &Trajectory| -> Result<ShadowReport, Failure> {
        Ok(shadow(&l, y, &seq, split, args.epsilon, args.ablate)?)
    };

    if let Some(path) = args.pseudo {
        let f = File::open(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display()), 1))?;
        let y = Trajectory::read_csv(BufReader::new(f))
            .map_err(|e| Failure::schema(format!("{}: {e}", path.display())))?;
        let rep = run(&y)?;
        return finish_single(&rep, out);
    }

    let phi = initial_segment(sys, args.phi)?;
    let Some(deltas) = args.delta_sweep else {
        let y = perturbed_solution(&l, &phi, horizon, args.perturb, sys.integrator.h_int)?;
        let rep = run(&y)?;
        return finish_single(&rep, out);
    };

    let mut reports = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let y = perturbed_solution(&l, &phi, horizon, delta, sys.integrator.h_int)?;
        reports.push(run(&y)?);
    }
    let mut w = out.create("kappa_sweep.csv")?;
    writeln!(w, "perturbation,delta,shadow_distance,kappa,corrected_defect")?;
    for (p, r) in deltas.iter().zip(&reports) {
        writeln!(w, "{p:.6e},{:.17e},{:.17e},{:.17e},{:.17e}", r.delta, r.shadow_distance, r.kappa, r.corrected_defect)?;
        println!("delta {:.3e}: distance {:.3e}, kappa {:.6}", r.delta, r.shadow_distance, r.kappa);
    }
    w.flush()?;
    let kappa = reports.iter().map(|r| r.kappa).fold(0.0, f64::max);
    out.json("shadow.json", &json!({"schema": SCHEMA, "kappa": kappa, "runs": reports}))?;
    if let Some(corrected) = reports.last().and_then(|r| r.corrected.as_ref()) {
        out.trajectory("corrected.csv", corrected)?;
    }
    println!("kappa = {kappa:.6}");
    Ok(())
}

fn finish_single(rep: &ShadowReport, out: &Output) -> Outcome {
    out.json("shadow.json", rep)?;
    if let Some(corrected) = &rep.corrected {
        out.trajectory("corrected.csv", corrected)?;
    }
    println!(
        "delta {:.3e}, shadow distance {:.3e}, kappa {:.6}, corrected defect {:.3e}",
        rep.delta, rep.shadow_distance, rep.kappa, rep.corrected_defect
    );
    Ok(())
}

/// Checks behind the unbounded-coefficient counterexample.
pub fn counterexample(n_max: usize, seed: u64, out: &Output) -> Outcome {
    let t_max = n_max as f64;
    let v = build_v(n_max)?;
    let vpr1 = check_vpr1(&v, t_max, 0.01)?;
    let vpr3 = check_vpr3(&v, n_max)?;
    let vpr3_pass = vpr3.iter().all(|w| w.holds);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hu: Vec<HyersUlamReport> = vec![hyers_ulam_certificate(&v, &|_| 1.0, t_max, 0.01)?];
    for _ in 0..3 {
        let knots = (0..(2.0 * t_max).ceil() as usize + 2).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let f = KnotForcing { spacing: 0.5, knots };
        let z = |t: f64| {
            let mut o = [0.0];
            f.eval(t, &mut o);
            o[0]
        };
        hu.push(hyers_ulam_certificate(&v, &z, t_max, 0.01)?);
    }
    let hu_pass = hu.iter().all(|r| r.pass);

    let refutation = dichotomy_refutation(&v, &[5.0, 1e2, 1e4, 1e6], &[0.1, 1.0, 10.0], 2_000_010);
    let pipeline = pipeline_cross_check(&v, 1e-4)?;
    let pipeline_pass = pipeline.verdict == Verdict::NoDichotomy;

    let mut w = out.create("v.csv")?;
    v.write_csv(&mut w, t_max, 1e-3)?;
    w.flush()?;

    let pass = vpr1.pass && vpr3_pass && hu_pass && refutation.all_refuted && pipeline_pass;
    let tag = |b: bool| if b { "PASS" } else { "FAIL" };
    println!("{} integrable weight: min margin {:.6} at t = {:.4}", tag(vpr1.pass), vpr1.min_margin, vpr1.argmin);
    println!("{} unbounded growth ratio: v(n)/v(n - 1/n) > n for n = 2..{n_max}", tag(vpr3_pass));
    let kappa = hu.iter().map(|r| r.kappa).fold(0.0, f64::max);
    println!("{} bounded response: {} forcings, kappa <= {kappa:.6}", tag(hu_pass), hu.len());
    println!("{} dichotomy refutation: {} (D, lambda) pairs", tag(refutation.all_refuted), refutation.entries.len());
    println!("{} pipeline verdict: {}", tag(pipeline_pass), verdict_name(pipeline.verdict));
    println!("{} counterexample", tag(pass));

    out.json(
        "counterexample.json",
        &json!({
            "schema": SCHEMA,
            "pass": pass,
            "n_max": n_max,
            "seed": seed,
            "vpr1": vpr1,
            "vpr3": vpr3,
            "hyers_ulam": hu,
            "refutation": refutation,
            "pipeline": pipeline,
        }),
    )?;
    if !pass {
        return Err(Failure::new("check_failed", "counterexample checks failed; see counterexample.json".into(), 1));
    }
    Ok(())
}

//! The acceptance criteria as runnable checks.

use std::time::Instant;

use anyhow::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use she_martin::geometry::{tree_automorphism, GraphSpace, VertexId, DEFAULT_MAX_VERTICES};
use she_martin::heat::{green_function, ExpMethod};
use she_martin::invariant::{
    attraction_run, cauchy_diagnostic, equivariance_check, fluctuation_run, invariant_symmetry_check, pullback_run,
    z_score,
};
use she_martin::noise::{ito_walsh_quadrature, sample_increments, walsh_integral, CovarianceKind, SeedRecord};
use she_martin::potential::{martin_kernel, martin_representation, solve_dirichlet};
use she_martin::solver::{Nonlinearity, Retention};
use she_martin::stats::{run_replicas, Estimate, ExperimentReport, Verdict};
use she_martin::{Model64, SimConfig64, StationaryConfig64};

use crate::config::{boundary_data, BoundaryShape, Config};
use crate::experiments::{simulate_with, Outcome};

pub const CRITERIA: usize = 11;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub replicas: u64,
    /// Replicas for the stationary second moment, whose estimator has a heavy tail.
    pub heavy_replicas: u64,
    /// Replaces the default β of the pullback and attraction checks.
    pub beta: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seed: crate::config::DEFAULT_SEED, replicas: 10_000, heavy_replicas: 100_000, beta: None }
    }
}

impl SuiteOptions {
    /// Seed and replica count from `mc.*`; an explicit `dynamics.beta` must be
    /// in weak disorder on every suite graph.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let beta = match cfg.dynamics.beta {
            Some(_) => {
                for m in [path(3, 0.01)?, tree(3, 0.05)?] {
                    cfg.dynamics.beta(m.lambda())?;
                }
                cfg.dynamics.beta
            }
            None => None,
        };
        Ok(SuiteOptions {
            seed: cfg.mc.seed,
            replicas: cfg.mc.replicas,
            heavy_replicas: cfg.mc.replicas.saturating_mul(10),
            beta,
        })
    }

    fn beta_for(&self, model: &Model64, rho: f64) -> f64 {
        self.beta.unwrap_or_else(|| (rho / model.lambda()).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Criterion {
    pub id: usize,
    pub title: &'static str,
    pub verdicts: Vec<Verdict>,
    pub seconds: f64,
}

impl Criterion {
    pub fn pass(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.pass)
    }

    /// Worst check: the first failing one, else the first.
    pub fn headline(&self) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| !v.pass).or(self.verdicts.first())
    }

    pub fn line(&self) -> String {
        let status = if self.pass() { "PASS" } else { "FAIL" };
        let passed = self.verdicts.iter().filter(|v| v.pass).count();
        let head = self
            .headline()
            .map(|v| format!("; {}: {:.6e} vs {:.6e}", v.check_name, v.statistic, v.bound))
            .unwrap_or_default();
        format!(
            "{status} criterion {:>2} {} ({passed}/{} checks, {:.1} s{head})",
            self.id,
            self.title,
            self.verdicts.len(),
            self.seconds
        )
    }
}

pub fn title(id: usize) -> &'static str {
    match id {
        1 => "lambda correctness",
        2 => "weak-disorder second-moment bound",
        3 => "linear-f moment recursion",
        4 => "pullback convergence and harmonic mean",
        5 => "stationary second moment closed form",
        6 => "attraction to the invariant field",
        7 => "Gaussian fluctuations",
        8 => "Martin kernel and representation",
        9 => "automorphism equivariance",
        10 => "Ito-Walsh isometry",
        11 => "determinism across worker counts",
        _ => "unknown",
    }
}

pub fn criterion(id: usize, opts: &SuiteOptions) -> Result<Criterion> {
    let start = Instant::now();
    let verdicts = match id {
        1 => lambda_checks()?,
        2 => weak_disorder_bound(opts)?,
        3 => linear_oracle(opts)?,
        4 => pullback_checks(opts)?,
        5 => stationary_second_moment(opts)?,
        6 => attraction_checks(opts)?,
        7 => fluctuation_checks(opts)?,
        8 => martin_checks(opts)?,
        9 => equivariance_checks(opts)?,
        10 => isometry_check(opts)?,
        11 => worker_independence(opts)?,
        _ => anyhow::bail!("no criterion {id}"),
    };
    Ok(Criterion { id, title: title(id), verdicts, seconds: start.elapsed().as_secs_f64() })
}

/// Runs every criterion; backs the `all` subcommand.
pub fn run_all(cfg: &Config) -> Result<Outcome> {
    let opts = SuiteOptions::from_config(cfg)?;
    let mut report = ExperimentReport::new("all", &["criterion", "check", "statistic", "bound", "pass"]);
    for id in 1..=CRITERIA {
        let c = criterion(id, &opts)?;
        log::info!("{}", c.line());
        for (k, v) in c.verdicts.iter().enumerate() {
            if !is_runtime(v) {
                report.push_row(vec![id as f64, k as f64, v.statistic, v.bound, f64::from(u8::from(v.pass))]);
            }
            let mut v = v.clone();
            v.check_name = format!("criterion {id}: {}", v.check_name);
            report.verdicts.push(v);
        }
    }
    Ok(Outcome { report, tables: vec![], json: None })
}

pub fn path(n: usize, dt: f64) -> she_martin::Result<Model64> {
    Model64::new(GraphSpace::path(n)?, CovarianceKind::White, dt)
}

pub fn tree(radius: usize, dt: f64) -> she_martin::Result<Model64> {
    Model64::new(GraphSpace::regular_tree(2, radius, DEFAULT_MAX_VERTICES)?, CovarianceKind::White, dt)
}

const RUNTIME: &str = "runtime";

/// Wall-clock checks stay out of CSV output, which must replay bit for bit.
fn runtime(name: impl Into<String>, seconds: f64, limit: f64) -> Verdict {
    Verdict::at_most(name, seconds, limit).with_detail(RUNTIME)
}

pub fn is_runtime(v: &Verdict) -> bool {
    v.detail.as_deref() == Some(RUNTIME)
}

fn timed<T>(f: impl FnOnce() -> she_martin::Result<T>) -> she_martin::Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn lambda_checks() -> Result<Vec<Verdict>> {
    let mut v = Vec::new();
    for (n, expected) in [(3, 0.5), (5, 1.0)] {
        let (m, secs) = timed(|| path(n, 0.05))?;
        v.push(Verdict::at_most(format!("path n={n}: |Lambda - {expected}|"), (m.lambda() - expected).abs(), 1e-6));
        v.push(runtime(format!("path n={n}: seconds"), secs, 1.0));
    }
    let g = GraphSpace::regular_tree(2, 4, DEFAULT_MAX_VERTICES)?;
    let (white, secs_white) = timed(|| Model64::new(g.clone(), CovarianceKind::White, 0.05))?;
    let k = white.generator.dim();
    let mu = white.generator.measure();
    let explicit = CovarianceKind::Explicit {
        matrix: (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 / mu[i] } else { 0.0 }).collect()).collect(),
    };
    let (quad, secs_quad) = timed(|| Model64::new(g, explicit, 0.05))?;
    let tail = quad.disorder.tail_bound;
    v.push(Verdict::at_most(
        "tree q=2 r=4: |Lambda_quadrature - Lambda_exact|",
        (quad.lambda() - white.lambda()).abs(),
        tail + 1e-6,
    ));
    v.push(Verdict::at_most("tree q=2 r=4: |Lambda_exact - (1 - 2^-4)|", (white.lambda() - 0.9375).abs(), 1e-6));
    v.push(runtime("tree q=2 r=4 exact: seconds", secs_white, 1.0));
    v.push(runtime("tree q=2 r=4 quadrature: seconds", secs_quad, 1.0));
    Ok(v)
}

/// q=2 r=3 tree, white noise, linear f, `(βL_f)²Λ = 0.5`, `u₀ = h* = 1`, `T = 5/gap`.
fn weak_disorder_config(opts: &SuiteOptions) -> Result<(Model64, SimConfig64)> {
    let m = tree(3, 0.05)?;
    let beta = (0.5 / m.lambda()).sqrt();
    let steps = m.steps_for(5.0 / m.gap());
    let nb = m.generator.boundary().len();
    let mut sim = SimConfig64::from_harmonic(&m, beta, vec![1.0; nb], steps)?;
    sim.retain = Retention::Every(steps / 2);
    sim.replicas = opts.replicas;
    sim.seed = opts.seed;
    Ok((m, sim))
}

fn weak_disorder_bound(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let start = Instant::now();
    let (m, sim) = weak_disorder_config(opts)?;
    let out = simulate_with(&m, &sim, "weak disorder")?;
    let mut v = vec![out.verdicts()[0].clone()];
    v.push(runtime("seconds", start.elapsed().as_secs_f64(), 120.0));
    Ok(v)
}

fn linear_oracle(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let (m, sim) = weak_disorder_config(opts)?;
    let out = simulate_with(&m, &sim, "linear oracle")?;
    Ok(out.verdicts()[1..].to_vec())
}

fn pullback_checks(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let start = Instant::now();
    let mut v = Vec::new();
    for (label, m) in [("path n=3", path(3, 0.01)?), ("tree q=2 r=3", tree(3, 0.05)?)] {
        let gap = m.gap();
        let ks: Vec<f64> = [2.0, 4.0, 8.0, 16.0].iter().map(|c| c / gap).collect();
        let beta = opts.beta_for(&m, 0.1);
        for shape in [BoundaryShape::Constant, BoundaryShape::Indicator, BoundaryShape::Ramp] {
            let data = boundary_data(&m, shape, 1.0, None)?;
            let mut st = StationaryConfig64::new(&m, beta, data);
            st.replicas = opts.replicas;
            st.seed = opts.seed;
            let run = pullback_run(&m, &st, &ks)?;
            let diag = cauchy_diagnostic(&run)?;
            let increases = diag.consecutive.windows(2).filter(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less)).count();
            let tag = format!("{label} {shape:?}");
            v.push(Verdict::at_most(format!("{tag}: non-decreasing steps of A(K,2K)"), increases as f64, 0.0));
            v.push(
                Verdict::at_most(format!("{tag}: |fitted rate / (2 gap) - 1|"), (diag.fitted_rate / (2.0 * gap) - 1.0).abs(), 0.2)
                    .with_detail(format!("rate {} vs 2 gap {}", diag.fitted_rate, 2.0 * gap)),
            );
            v.push(Verdict::at_most(format!("{tag}: max_x |E[Z](x) - h(x)| / SE"), run.mean_z(ks.len() - 1), 3.0));
        }
    }
    v.push(runtime("seconds", start.elapsed().as_secs_f64(), 300.0));
    Ok(v)
}

fn stationary_second_moment(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let dt = 0.002;
    let m = path(3, dt)?;
    let mut st = StationaryConfig64::new(&m, 1.0, vec![1.0, 1.0]);
    st.replicas = opts.heavy_replicas;
    st.seed = opts.seed;
    let run = pullback_run(&m, &st, &[8.0, 16.0])?;
    let z2 = run.second_moment(1, 0);
    let a2 = (-2.0 * dt).exp();
    let discrete = (1.0 - a2) / (1.0 - a2 - a2 * dt);
    Ok(vec![Verdict::at_most("path n=3, beta=1: |E[Z^2] - 2| / SE", z_score(z2, 2.0), 3.0).with_detail(format!(
        "E[Z^2] = {} (se {:?}); discrete-scheme fixed point {discrete}",
        z2.value, z2.se
    ))])
}

fn attraction_checks(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let mut v = Vec::new();
    for (label, m) in [("path n=3", path(3, 0.01)?), ("tree q=2 r=3", tree(3, 0.05)?)] {
        let nb = m.generator.boundary().len();
        let mut st = StationaryConfig64::new(&m, opts.beta_for(&m, 0.5), vec![1.0; nb]);
        st.replicas = opts.replicas;
        st.seed = opts.seed;
        let h = m.harmonic(&st.boundary_data)?;
        let initial: Vec<f64> =
            m.graph.vertices().map(|x| h.value(x) + if m.graph.is_interior(x) { 1.0 } else { 0.0 }).collect();
        let steps = m.steps_for(5.0 / m.gap());
        let rep = attraction_run(&m, &st, &initial, steps, Retention::Every(steps / 20))?;
        let mut b = rep.bound_verdict();
        b.check_name = format!("{label}: {}", b.check_name);
        let mut c = rep.contraction_verdict(0.05);
        c.check_name = format!("{label}: {}", c.check_name);
        v.extend([b, c]);
        if label.starts_with("path") {
            let err = rep.times.iter().zip(&rep.a).map(|(t, a)| (a - (-2.0 * t).exp()).abs()).fold(0.0, f64::max);
            v.push(Verdict::at_most("path n=3: max_t |a(t) - exp(-2t)|", err, 1e-12));
        }
    }
    Ok(v)
}

fn fluctuation_checks(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let betas = [0.4, 0.2, 0.1];
    let mut v = Vec::new();
    for (label, m) in [("path n=3", path(3, 0.002)?), ("tree q=2 r=3", tree(3, 0.05)?)] {
        let nb = m.generator.boundary().len();
        let mut st = StationaryConfig64::new(&m, 0.4, vec![1.0; nb]);
        st.replicas = opts.replicas;
        st.seed = opts.seed;
        let rep = fluctuation_run(&m, &st, &betas, 16.0 / m.gap())?;
        for e in &rep.entries {
            for mut verdict in [e.error_verdict(1.0, m.lambda()), e.m_verdict()] {
                verdict.check_name = format!("{label}: {}", verdict.check_name);
                v.push(verdict);
            }
        }
        v.push(Verdict::at_least(format!("{label}: log-log slope of the error in beta"), rep.error_slope, 1.5));
        if label.starts_with("path") {
            let var = Estimate::sampled(rep.gh_sample_covariance[0][0], Some(rep.gh_covariance_se[0][0]));
            v.push(
                Verdict::at_most("path n=3: |Var G_h - 0.5| / SE", z_score(var, 0.5), 3.0)
                    .with_detail(format!("Var G_h = {}", var.value)),
            );
            v.push(Verdict::at_most("path n=3: |Var G_h - quadrature| / SE", rep.gh_covariance_z, 3.0));
            v.push(Verdict::at_most("path n=3: |quadrature - 0.5|", (rep.gh_quadrature[0][0] - 0.5).abs(), rep.gh_tail_bound + 1e-6));
        }
    }
    Ok(v)
}

fn martin_checks(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let mut v = Vec::new();
    let m = path(5, 0.05)?;
    let green = green_function(&m.generator, m.graph.root())?;
    let k = martin_kernel(&green, &m.generator, &m.graph)?;
    v.push(Verdict::at_most("path n=5: |K(x1, left) - 1.5|", (k.get(VertexId(1), 0) - 1.5).abs(), 1e-10));

    let m = tree(3, 0.05)?;
    let green = green_function(&m.generator, m.graph.root())?;
    let k = martin_kernel(&green, &m.generator, &m.graph)?;
    let nb = m.generator.boundary().len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let data: Vec<f64> = (0..nb).map(|_| rng.random_range(0.01..10.0)).collect();
        let h = solve_dirichlet(&m.graph, &m.generator, &data)?;
        let nu = martin_representation(&h, &k)?;
        let back = nu.reconstruct(&k);
        worst = h.values().iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    v.push(Verdict::at_most("tree q=2 r=3: max round-trip error over 100 positive data", worst, 1e-8));
    let mut worst = 0.0f64;
    for b0 in 0..nb {
        let data = m.generator.restrict_boundary(&k.column(b0))?;
        let h = solve_dirichlet(&m.graph, &m.generator, &data)?;
        let nu = martin_representation(&h, &k)?;
        for (b, &w) in nu.weights().iter().enumerate() {
            worst = worst.max((w - if b == b0 { 1.0 } else { 0.0 }).abs());
        }
    }
    v.push(Verdict::at_most("tree q=2 r=3: max |nu - point mass| for h = K(., xi)", worst, 1e-9));
    Ok(v)
}

fn equivariance_checks(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let m = tree(2, 0.05)?;
    let a = tree_automorphism(&m.graph, (0, 1))?;
    let beta = (0.5 / m.lambda()).sqrt();
    let ramp = boundary_data(&m, BoundaryShape::Ramp, 1.0, None)?;
    let mut sim = SimConfig64::from_harmonic(&m, beta, ramp, 1000)?;
    sim.nonlinearity = Nonlinearity::Sine { a: 1.0 };
    let pathwise = equivariance_check(&m, &sim, &a, SeedRecord::new(opts.seed, 0))?;
    let nb = m.generator.boundary().len();
    let mut st = StationaryConfig64::new(&m, beta, vec![1.0; nb]);
    st.replicas = opts.replicas;
    st.seed = opts.seed;
    let sym = invariant_symmetry_check(&m, &st, &a, 8.0 / m.gap())?;
    Ok(vec![
        Verdict::at_most("tree q=2 r=2: max |a.u - u^a| over 1000 steps", pathwise, 1e-12),
        Verdict::at_most("tree q=2 r=2: two-sample max |z| for Z vs a.Z", sym.max_z, 3.0)
            .with_detail(format!("{} comparisons", 2 * sym.comparisons.len())),
    ])
}

fn isometry_check(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let dt = 0.05;
    let m = Model64::with_method(GraphSpace::path(5)?, CovarianceKind::DistanceDecay { c: 1.0, alpha: 2.0 }, dt, ExpMethod::Spectral)?;
    let k = m.generator.dim();
    let steps = 40;
    let f = DMatrix::from_fn(k, steps, |y, n| (1.0 + n as f64 * dt + y as f64).sin() * (-0.5 * n as f64 * dt).exp());
    let mu = m.generator.measure().clone();
    let exact = ito_walsh_quadrature(&f, &f, &m.covariance, &mu, dt)?;
    let acc = run_replicas(opts.replicas, 2, false, |r, out| {
        let w = sample_increments(&m.covariance, dt, steps, SeedRecord::new(opts.seed, r))?;
        let i = walsh_integral(&f, &w, &mu)?;
        out[0] = i;
        out[1] = i * i;
        Ok(())
    })?;
    let var = acc.variance(0).unwrap_or(f64::NAN);
    let se = acc.std_error(1);
    Ok(vec![
        Verdict::at_most("path n=5 decay alpha=2: |Var I - quadrature| / SE", z_score(Estimate::sampled(var, se), exact), 3.0)
            .with_detail(format!("Var I = {var}, quadrature = {exact}")),
        Verdict::at_most("path n=5 decay alpha=2: |E I| / SE", z_score(acc.estimate(0), 0.0), 3.0),
    ])
}

/// Reruns small simulations in thread pools of different sizes and compares CSV text.
fn worker_independence(opts: &SuiteOptions) -> Result<Vec<Verdict>> {
    let run = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        pool.install(|| {
            let (m, mut sim) = weak_disorder_config(opts)?;
            sim.replicas = 500;
            let mut text = simulate_with(&m, &sim, "determinism")?.report.to_csv();
            let mut st = StationaryConfig64::new(&m, sim.beta, sim.boundary_data.clone());
            st.replicas = 200;
            st.seed = opts.seed;
            let run = pullback_run(&m, &st, &[2.0, 4.0, 8.0])?;
            text.push_str(&crate::experiments::pullback_outcome(&run, m.gap(), "determinism")?.report.to_csv());
            Ok(text)
        })
    };
    let one = run(1)?;
    let many = run(4)?;
    let again = run(1)?;
    let differing = |a: &str, b: &str| a.lines().zip(b.lines()).filter(|(x, y)| x != y).count() + a.lines().count().abs_diff(b.lines().count());
    Ok(vec![
        Verdict::at_most("CSV lines differing between 1 and 4 workers", differing(&one, &many) as f64, 0.0),
        Verdict::at_most("CSV lines differing between reruns", differing(&one, &again) as f64, 0.0),
    ])
}

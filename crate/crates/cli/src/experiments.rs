//! One function per subcommand: build the model from the config, run, and
//! collect tables and verdicts.

use anyhow::{bail, Result};
use serde_json::json;
use she_martin::disorder::neumann_second_moment_bound;
use she_martin::geometry::{tree_automorphism, VertexId};
use she_martin::heat::heat_kernel;
use she_martin::invariant::{
    attraction_run, cauchy_diagnostic, equivariance_check, fluctuation_run, invariant_symmetry_check, pullback_run,
    AttractionReport, FluctuationReport, PullbackRun,
};
use she_martin::noise::SeedRecord;
use she_martin::potential::{martin_kernel, martin_representation};
use she_martin::solver::{compare_with_oracle, covariance_recursion_linear, second_moment_mc, Nonlinearity, Retention};
use she_martin::stats::{ExperimentReport, Verdict};
use she_martin::{Model64, SimConfig64, StationaryConfig64};

use crate::config::{BoundaryShape, Config};

/// Tables and verdicts of one subcommand.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    /// Written as `<name>.csv`.
    pub report: ExperimentReport,
    /// Further tables, each written as `<its name>.csv`.
    pub tables: Vec<ExperimentReport>,
    /// Written as `<name>.json` when present.
    pub json: Option<serde_json::Value>,
}

impl Outcome {
    pub fn verdicts(&self) -> &[Verdict] {
        &self.report.verdicts
    }

    pub fn all_pass(&self) -> bool {
        self.report.all_pass()
    }
}

pub const SUBCOMMANDS: [&str; 9] =
    ["heat", "lambda", "harmonic", "martin", "simulate", "pullback", "attract", "fluct", "equivariance"];

pub fn run(name: &str, cfg: &Config) -> Result<Outcome> {
    match name {
        "heat" => heat(cfg),
        "lambda" => lambda(cfg),
        "harmonic" => harmonic(cfg),
        "martin" => martin(cfg),
        "simulate" => simulate(cfg),
        "pullback" => pullback(cfg),
        "attract" => attract(cfg),
        "fluct" => fluct(cfg),
        "equivariance" => equivariance(cfg),
        "all" => crate::suite::run_all(cfg),
        other => bail!("unknown subcommand `{other}`"),
    }
}

struct Setup {
    model: Model64,
    beta: f64,
    f: Nonlinearity,
    data: Vec<f64>,
}

impl Setup {
    fn new(cfg: &Config) -> Result<Self> {
        let model = cfg.model()?;
        let beta = cfg.dynamics.beta(model.lambda())?;
        let data = cfg.dynamics.boundary_data(&model)?;
        Ok(Setup { model, beta, f: cfg.dynamics.nonlinearity(), data })
    }

    fn stationary(&self, cfg: &Config) -> Result<StationaryConfig64> {
        let mut s = StationaryConfig64::new(&self.model, self.beta, self.data.clone());
        s.nonlinearity = self.f;
        s.observe = cfg.dynamics.observed(&self.model)?;
        s.replicas = cfg.mc.replicas;
        s.seed = cfg.mc.seed;
        Ok(s)
    }

    fn horizon_steps(&self, cfg: &Config) -> usize {
        self.model.steps_for(cfg.dynamics.horizon_gap / self.model.gap())
    }
}

fn retention(steps: usize, intervals: usize) -> Retention {
    Retention::Every((steps / intervals.max(1)).max(1))
}

pub fn heat(cfg: &Config) -> Result<Outcome> {
    let model = cfg.model()?;
    let gen = &model.generator;
    let p = heat_kernel(gen, cfg.heat.t)?;
    let mut report = ExperimentReport::new("heat", &["row_vertex", "col_vertex", "value"]);
    for (i, x) in gen.interior().iter().enumerate() {
        for (j, y) in gen.interior().iter().enumerate() {
            report.push_row(vec![x.0 as f64, y.0 as f64, p[(i, j)]]);
        }
    }
    let row_sum = (0..p.nrows()).map(|i| p.row(i).sum()).fold(0.0, f64::max);
    report.verdicts.push(Verdict::at_most("heat: semigroup residual of the step kernel", model.cache.semigroup_residual(), 1e-10));
    report.verdicts.push(Verdict::at_most("heat: max row sum of p_t", row_sum, 1.0 + 1e-12));
    let json = json!({ "t": cfg.heat.t, "gap": model.gap(), "dt": cfg.heat.dt, "method": model.cache.method() });
    Ok(Outcome { report, tables: vec![], json: Some(json) })
}

pub fn lambda(cfg: &Config) -> Result<Outcome> {
    let s = Setup::new(cfg)?;
    let h = s.model.harmonic(&s.data)?;
    let u0_sup = h.sup_norm();
    let disorder = s.model.disorder.clone().with_margin(s.beta, s.f.lipschitz());
    let bound = neumann_second_moment_bound(u0_sup, s.beta, s.f.lipschitz(), disorder.lambda)?;
    let mut report =
        ExperimentReport::new("lambda", &["lambda", "tail_bound", "arg_sup_x", "arg_sup_y", "beta", "margin", "bound"]);
    let margin = disorder.margin.expect("set above");
    report.push_row(vec![
        disorder.lambda,
        disorder.tail_bound,
        disorder.arg_sup.0 .0 as f64,
        disorder.arg_sup.1 .0 as f64,
        s.beta,
        margin,
        bound.value(),
    ]);
    report.verdicts.push(Verdict::at_least("lambda: weak-disorder margin", margin, 0.0));
    report.verdicts.push(Verdict::at_most("lambda: quadrature tail bound", disorder.tail_bound, 1e-6));
    let json = json!({
        "lambda": disorder.lambda,
        "tail_bound": disorder.tail_bound,
        "arg_sup": [disorder.arg_sup.0, disorder.arg_sup.1],
        "margin": margin,
        "beta": s.beta,
        "bound": bound,
    });
    Ok(Outcome { report, tables: vec![], json: Some(json) })
}

pub fn harmonic(cfg: &Config) -> Result<Outcome> {
    let model = cfg.model()?;
    let data = cfg.dynamics.boundary_data(&model)?;
    let h = model.harmonic(&data)?;
    let mut report = ExperimentReport::new("harmonic", &["vertex", "interior", "h"]);
    for x in model.graph.vertices() {
        report.push_row(vec![x.0 as f64, f64::from(u8::from(model.graph.is_interior(x))), h.value(x)]);
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let excursion = h.values().iter().map(|&v| (lo - v).max(v - hi)).fold(0.0, f64::max);
    report.verdicts.push(Verdict::at_most("harmonic: residual of the Dirichlet solve", h.residual(), 1e-10));
    report.verdicts.push(Verdict::at_most("harmonic: excursion outside the boundary range", excursion, 1e-12));
    Ok(Outcome { report, tables: vec![], json: None })
}

pub fn martin(cfg: &Config) -> Result<Outcome> {
    let model = cfg.model()?;
    let green = model.green.as_ref().ok_or_else(|| anyhow::anyhow!("martin needs boundary vertices"))?;
    let kernel = martin_kernel(green, &model.generator, &model.graph)?;
    let boundary = model.generator.boundary();
    let mut header = vec!["vertex".to_string()];
    header.extend(boundary.iter().map(|b| format!("k_{}", b.0)));
    let mut report = ExperimentReport { name: "martin".into(), header, ..Default::default() };
    for x in model.graph.vertices() {
        let mut row = vec![x.0 as f64];
        row.extend((0..boundary.len()).map(|b| kernel.get(x, b)));
        report.push_row(row);
    }
    let data = cfg.dynamics.boundary_data(&model)?;
    let h = model.harmonic(&data)?;
    let nu = martin_representation(&h, &kernel)?;
    let base = kernel.base();
    let normalization = (0..boundary.len()).map(|b| (kernel.get(base, b) - 1.0).abs()).fold(0.0, f64::max);
    report.verdicts.push(Verdict::at_most("martin: |K(o, xi) - 1|", normalization, 1e-12));
    report.verdicts.push(Verdict::at_most("martin: reconstruction residual of h = K nu", nu.reconstruction_residual(), 1e-8));
    let weights: serde_json::Map<String, serde_json::Value> =
        boundary.iter().zip(nu.weights()).map(|(b, w)| (b.0.to_string(), json!(w))).collect();
    let json = json!({
        "nu": weights,
        "total_mass": nu.total_mass(),
        "residual": nu.reconstruction_residual(),
        "base": base,
        "inflow_weighted": kernel.inflow_weighted(),
    });
    Ok(Outcome { report, tables: vec![], json: Some(json) })
}

pub fn simulate(cfg: &Config) -> Result<Outcome> {
    let s = Setup::new(cfg)?;
    let steps = s.horizon_steps(cfg);
    let mut sim = SimConfig64::from_harmonic(&s.model, s.beta, s.data.clone(), steps)?;
    sim.nonlinearity = s.f;
    sim.observe = cfg.dynamics.observed(&s.model)?;
    sim.retain = retention(steps, cfg.dynamics.retained);
    sim.replicas = cfg.mc.replicas;
    sim.seed = cfg.mc.seed;
    simulate_with(&s.model, &sim, "simulate")
}

/// Moment table with the second-moment bound and, for linear f, the exact recursion.
pub fn simulate_with(model: &Model64, sim: &SimConfig64, name: &str) -> Result<Outcome> {
    let table = second_moment_mc(model, sim)?;
    let mut report = table.report(name);
    let sup = table.sup_second_moment()?;
    let bound = sim.neumann_bound(model)?;
    report.verdicts.push(
        Verdict::at_most(
            format!("{name}: sup E[u^2] <= |u0|^2/(1-rho) + 3SE"),
            sup.value,
            bound.value() + 3.0 * sup.se.unwrap_or(0.0),
        )
        .with_detail(format!("rho = {}, se = {:?}", bound.rho, sup.se)),
    );
    if sim.nonlinearity.is_linear() {
        let oracle = covariance_recursion_linear(model, sim)?;
        let agree = compare_with_oracle(&table, &oracle)?;
        report.verdicts.push(
            Verdict::at_most(format!("{name}: max |MC - exact moments| / SE"), agree.max_z(), 3.0)
                .with_detail(format!("{} comparisons", agree.comparisons)),
        );
    }
    Ok(Outcome { report, tables: vec![], json: None })
}

pub fn pullback(cfg: &Config) -> Result<Outcome> {
    let s = Setup::new(cfg)?;
    let st = s.stationary(cfg)?;
    let gap = s.model.gap();
    let ks: Vec<f64> = cfg.pullback.ladder.iter().map(|c| c / gap).collect();
    let run = pullback_run(&s.model, &st, &ks)?;
    pullback_outcome(&run, gap, "pullback")
}

pub fn pullback_outcome(run: &PullbackRun, gap: f64, name: &str) -> Result<Outcome> {
    let diag = cauchy_diagnostic(run)?;
    let mut report = ExperimentReport::new(name, &["k", "k_prime", "a", "a_se"]);
    for &(k, k2, a, se) in &diag.table {
        report.push_row(vec![k, k2, a, se]);
    }
    let last = run.ks.len() - 1;
    let mut means = ExperimentReport::new(format!("{name}_mean"), &["vertex", "h", "mean", "mean_se", "m2", "m2_se"]);
    for (vi, x) in run.vertices.iter().enumerate() {
        let (m, m2) = (run.mean(last, vi), run.second_moment(last, vi));
        means.push_row(vec![x.0 as f64, run.harmonic[vi], m.value, m.se_or_zero(), m2.value, m2.se_or_zero()]);
    }
    let increases = diag.consecutive.windows(2).filter(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less)).count();
    report.verdicts.push(Verdict::at_most(format!("{name}: A(K_i, K_i+1) non-decreasing steps"), increases as f64, 0.0));
    report.verdicts.push(
        Verdict::at_most(format!("{name}: |fitted rate / (2 gap) - 1|"), (diag.fitted_rate / (2.0 * gap) - 1.0).abs(), 0.2)
            .with_detail(format!("fitted rate {}, 2 gap {}", diag.fitted_rate, 2.0 * gap)),
    );
    report.verdicts.push(Verdict::at_most(format!("{name}: max_x |E[Z](x) - h(x)| / SE"), run.mean_z(last), 3.0));
    let json = serde_json::to_value(&diag)?;
    Ok(Outcome { report, tables: vec![means], json: Some(json) })
}

pub fn attract(cfg: &Config) -> Result<Outcome> {
    let s = Setup::new(cfg)?;
    let st = s.stationary(cfg)?;
    let h = s.model.harmonic(&s.data)?;
    let initial: Vec<f64> = s
        .model
        .graph
        .vertices()
        .map(|x| h.value(x) + if s.model.graph.is_interior(x) { cfg.dynamics.perturbation } else { 0.0 })
        .collect();
    let steps = s.horizon_steps(cfg);
    let rep = attraction_run(&s.model, &st, &initial, steps, retention(steps, cfg.dynamics.retained))?;
    Ok(attraction_outcome(&rep, "attract"))
}

pub fn attraction_outcome(rep: &AttractionReport, name: &str) -> Outcome {
    let mut report = ExperimentReport::new(name, &["t", "m", "m_se", "a", "bound"]);
    for (i, &t) in rep.times.iter().enumerate() {
        report.push_row(vec![t, rep.m[i].value, rep.m[i].se.unwrap_or(0.0), rep.a[i], rep.bound[i]]);
    }
    report.verdicts.push(rep.bound_verdict());
    report.verdicts.push(rep.contraction_verdict(0.05));
    Outcome { report, tables: vec![], json: None }
}

pub fn fluct(cfg: &Config) -> Result<Outcome> {
    let s = Setup::new(cfg)?;
    let mut st = s.stationary(cfg)?;
    let betas = &cfg.fluct.betas;
    st.beta = betas.iter().copied().fold(0.0, f64::max);
    let k = cfg.fluct.depth_gap / s.model.gap();
    let rep = fluctuation_run(&s.model, &st, betas, k)?;
    Ok(fluctuation_outcome(&rep, s.f.lipschitz(), s.model.lambda(), "fluct"))
}

pub fn fluctuation_outcome(rep: &FluctuationReport, lipschitz: f64, lambda: f64, name: &str) -> Outcome {
    let mut report = ExperimentReport::new(
        name,
        &["beta", "rho", "m_beta", "m_beta_se", "error", "error_se", "error_bound", "m_bound", "covariance_z"],
    );
    for e in &rep.entries {
        report.push_row(vec![
            e.beta,
            e.rho,
            e.m_beta.value,
            e.m_beta.se.unwrap_or(0.0),
            e.pathwise_error.value,
            e.pathwise_error.se.unwrap_or(0.0),
            e.error_bound,
            e.m_bound,
            e.covariance_z,
        ]);
        report.verdicts.push(e.error_verdict(lipschitz, lambda));
        report.verdicts.push(e.m_verdict());
    }
    report.verdicts.push(Verdict::at_least(format!("{name}: log-log slope of the error in beta"), rep.error_slope, 1.5));
    report.verdicts.push(Verdict::at_most(
        format!("{name}: max |sample Cov G_h - quadrature| / SE"),
        rep.gh_covariance_z,
        3.0,
    ));
    let mut gh = ExperimentReport::new(format!("{name}_gh"), &["x", "y", "sample", "sample_se", "quadrature"]);
    for (a, x) in rep.vertices.iter().enumerate() {
        for (b, y) in rep.vertices.iter().enumerate() {
            gh.push_row(vec![
                x.0 as f64,
                y.0 as f64,
                rep.gh_sample_covariance[a][b],
                rep.gh_covariance_se[a][b],
                rep.gh_quadrature[a][b],
            ]);
        }
    }
    let json = json!({ "k": rep.k, "gh_tail_bound": rep.gh_tail_bound, "error_slope": rep.error_slope });
    Outcome { report, tables: vec![gh], json: Some(json) }
}

pub fn equivariance(cfg: &Config) -> Result<Outcome> {
    let s = Setup::new(cfg)?;
    let e = &cfg.equivariance;
    let a = tree_automorphism(&s.model.graph, (e.swap[0], e.swap[1]))?;
    let mut sim = SimConfig64::from_harmonic(&s.model, s.beta, s.data.clone(), e.steps)?;
    sim.nonlinearity = s.f;
    let pathwise = equivariance_check(&s.model, &sim, &a, SeedRecord::new(cfg.mc.seed, 0))?;

    let mut st = s.stationary(cfg)?;
    if cfg.dynamics.boundary != BoundaryShape::Constant {
        st.boundary_data = crate::config::boundary_data(&s.model, BoundaryShape::Constant, cfg.dynamics.boundary_value, None)?;
    }
    let sym = invariant_symmetry_check(&s.model, &st, &a, e.depth_gap / s.model.gap())?;
    let mut report = ExperimentReport::new("equivariance", &["x", "ax", "z_mean", "z_second"]);
    for &(x, y, z1, z2) in &sym.comparisons {
        report.push_row(vec![x.0 as f64, y.0 as f64, z1, z2]);
    }
    report.verdicts.push(Verdict::at_most("equivariance: max |a.u - u^a| over the path", pathwise, 1e-12));
    report.verdicts.push(Verdict::at_most("equivariance: two-sample max |z| for Z vs a.Z", sym.max_z, 3.0));
    let moved: Vec<VertexId> = (0..a.len()).map(VertexId).filter(|&x| a.apply(x) != x).collect();
    let json = json!({ "pathwise": pathwise, "steps": e.steps, "moved_vertices": moved, "k": sym.k });
    Ok(Outcome { report, tables: vec![], json: Some(json) })
}

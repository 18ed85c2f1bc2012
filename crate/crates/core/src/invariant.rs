//! Invariant fields: pullback construction, attraction, fluctuations and
//! equivariance under graph automorphisms.
//!
//! Every experiment couples its solutions through one noise realization per
//! replica. Pullback solves started at time `−K` consume the increments of
//! steps `−K/dt, …, −1`, so all depths share the overlapping window.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::disorder::{require_weak_disorder, sandwich_integral};
use crate::error::{Error, Result};
use crate::geometry::{Automorphism, VertexId};
use crate::model::Model;
use crate::noise::{sample_increments, sample_window, transform_noise, NoiseIncrements, NoiseSource, SeedRecord};
use crate::scalar::Real;
use crate::solver::{solve_path, BoundaryMode, Integrator, Nonlinearity, Retention, SimConfig};
pub use crate::stats::z_score;
use crate::stats::{run_replicas, run_replicas_with, sup_of, Estimate, MomentAccumulator, SupEstimate, Verdict};

/// Default pullback ladder `{2, 4, 8, 16}/gap`.
pub fn default_ladder(gap: f64) -> Vec<f64> {
    [2.0, 4.0, 8.0, 16.0].iter().map(|c| c / gap).collect()
}

/// Shared parameters of the stationary experiments.
#[derive(Clone, Debug)]
pub struct StationaryConfig<T: Real> {
    pub beta: T,
    pub nonlinearity: Nonlinearity,
    /// Data on `generator.boundary()`.
    pub boundary_data: Vec<T>,
    pub observe: Vec<VertexId>,
    pub replicas: u64,
    pub seed: u64,
}

impl<T: Real> StationaryConfig<T> {
    pub fn new(model: &Model<T>, beta: T, boundary_data: Vec<T>) -> Self {
        StationaryConfig {
            beta,
            nonlinearity: Nonlinearity::Linear,
            boundary_data,
            observe: model.generator.interior().to_vec(),
            replicas: 1,
            seed: 0,
        }
    }

    /// Pinned simulation config starting from `h*`; checks weak disorder and stability.
    pub fn sim_config(&self, model: &Model<T>, steps: usize) -> Result<SimConfig<T>> {
        let mut cfg = SimConfig::from_harmonic(model, self.beta, self.boundary_data.clone(), steps)?;
        cfg.nonlinearity = self.nonlinearity;
        cfg.observe = self.observe.clone();
        cfg.replicas = self.replicas;
        cfg.seed = self.seed;
        cfg.validate(model)?;
        Ok(cfg)
    }

    fn observed_interior(&self, model: &Model<T>) -> Result<Vec<usize>> {
        self.observe
            .iter()
            .map(|&x| {
                model
                    .generator
                    .interior_index(x)
                    .ok_or_else(|| Error::InvalidArgument(format!("observation vertex {x} is not interior")))
            })
            .collect()
    }
}

/// Runs the pinned dynamics from `h*` over the last `depth` columns of `noise`.
fn pullback_solve<T: Real>(
    integ: &mut Integrator<'_, T>,
    noise: &NoiseIncrements<T>,
    depth: usize,
    end: usize,
) -> Result<DVector<T>> {
    let mut u = integ.pinned().clone();
    for n in end - depth..end {
        if !integ.advance(&mut u, noise.step(n).as_slice()) {
            return Err(Error::NonFinite {
                step: noise.start_step() + n as i64,
                replica: noise.seed().map(|s| s.stream),
            });
        }
    }
    Ok(u)
}

/// Coupled terminal fields `u^{K,h}(0,·)` for a ladder of depths.
#[derive(Clone, Debug)]
pub struct PullbackRun {
    pub ks: Vec<f64>,
    pub steps: Vec<usize>,
    pub vertices: Vec<VertexId>,
    /// `h*` at the observed vertices.
    pub harmonic: Vec<f64>,
    pub seed: u64,
    /// Layout: `[u^K(x)]`, `[u^K(x)²]` per (K, x), then `(u^{K_j} − u^{K_i})²` per pair i<j and x.
    acc: MomentAccumulator,
}

impl PullbackRun {
    fn nv(&self) -> usize {
        self.vertices.len()
    }

    pub fn replicas(&self) -> u64 {
        self.acc.count()
    }

    pub fn mean(&self, ki: usize, vi: usize) -> Estimate {
        self.acc.estimate(2 * (ki * self.nv() + vi))
    }

    pub fn second_moment(&self, ki: usize, vi: usize) -> Estimate {
        self.acc.estimate(2 * (ki * self.nv() + vi) + 1)
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        let nk = self.ks.len();
        i * nk - i * (i + 1) / 2 + (j - i - 1)
    }

    /// `E[(u^{K_j} − u^{K_i})(0,x)²]`.
    pub fn difference(&self, i: usize, j: usize, vi: usize) -> Estimate {
        if i == j {
            return Estimate::exact(0.0);
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let base = 2 * self.ks.len() * self.nv();
        self.acc.estimate(base + self.pair_index(a, b) * self.nv() + vi)
    }

    /// `A(K_i, K_j) = sup_x E[(u^{K_j} − u^{K_i})(0,x)²]`.
    pub fn a(&self, i: usize, j: usize) -> SupEstimate {
        sup_of((0..self.nv()).map(|vi| (vi, self.difference(i, j, vi)))).expect("nonempty observation set")
    }

    /// Largest `|E[u^K(0,x)] − h(x)| / SE` at depth index `ki`.
    pub fn mean_z(&self, ki: usize) -> f64 {
        (0..self.nv())
            .map(|vi| z_score(self.mean(ki, vi), self.harmonic[vi]))
            .fold(0.0, f64::max)
    }
}

pub fn pullback_run<T: Real>(model: &Model<T>, cfg: &StationaryConfig<T>, ks: &[f64]) -> Result<PullbackRun> {
    if ks.is_empty() || ks.windows(2).any(|w| !(w[1] > w[0])) || ks[0] <= 0.0 {
        return Err(Error::InvalidArgument("pullback depths must be positive and strictly increasing".into()));
    }
    let steps: Vec<usize> = ks.iter().map(|&k| model.steps_for(k)).collect();
    if steps.windows(2).any(|w| w[1] <= w[0]) || steps[0] == 0 {
        return Err(Error::InvalidArgument("pullback depths collide on the time grid".into()));
    }
    let n_max = *steps.last().unwrap();
    let sim = cfg.sim_config(model, n_max)?;
    let obs = cfg.observed_interior(model)?;
    let pinned = model.generator.restrict(&sim.initial)?;
    let nk = ks.len();
    let nv = obs.len();
    let width = 2 * nk * nv + nk * (nk - 1) / 2 * nv;
    let acc = run_replicas(cfg.replicas, width, false, |r, out| {
        let noise = sample_window(&model.covariance, model.dt(), -(n_max as i64), n_max, SeedRecord::new(cfg.seed, r))?;
        let mut integ = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned.clone());
        let mut finals = Vec::with_capacity(nk);
        for &n in &steps {
            finals.push(pullback_solve(&mut integ, &noise, n, n_max)?);
        }
        for (ki, u) in finals.iter().enumerate() {
            for (vi, &i) in obs.iter().enumerate() {
                let v = u[i].to_f64_lossy();
                out[2 * (ki * nv + vi)] = v;
                out[2 * (ki * nv + vi) + 1] = v * v;
            }
        }
        let mut k = 2 * nk * nv;
        for a in 0..nk {
            for b in a + 1..nk {
                for &i in &obs {
                    let d = (finals[b][i] - finals[a][i]).to_f64_lossy();
                    out[k] = d * d;
                    k += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(PullbackRun {
        ks: ks.to_vec(),
        steps,
        vertices: cfg.observe.clone(),
        harmonic: obs.iter().map(|&i| pinned[i].to_f64_lossy()).collect(),
        seed: cfg.seed,
        acc,
    })
}

/// `A(K, K′)` table and a log-linear fit of `A(K_i, K_{i+1})` against `K_i`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CauchyDiagnostic {
    /// Rows `(K, K′, A, SE)` for every pair `K < K′`.
    pub table: Vec<(f64, f64, f64, f64)>,
    /// Consecutive-ladder values `A(K_i, K_{i+1})`.
    pub consecutive: Vec<f64>,
    pub strictly_decreasing: bool,
    /// Fitted exponential decay rate; NaN when some `A` vanishes.
    pub fitted_rate: f64,
}

pub fn cauchy_diagnostic(run: &PullbackRun) -> Result<CauchyDiagnostic> {
    let nk = run.ks.len();
    if nk < 3 {
        return Err(Error::InvalidArgument(format!("Cauchy diagnostic needs at least 3 depths, got {nk}")));
    }
    let mut table = Vec::new();
    for i in 0..nk {
        for j in i + 1..nk {
            let a = run.a(i, j);
            table.push((run.ks[i], run.ks[j], a.value, a.se.unwrap_or(f64::NAN)));
        }
    }
    let consecutive: Vec<f64> = (0..nk - 1).map(|i| run.a(i, i + 1).value).collect();
    let strictly_decreasing = consecutive.windows(2).all(|w| w[1] < w[0]);
    let fitted_rate = if consecutive.iter().all(|&a| a > 0.0) {
        let xs = &run.ks[..nk - 1];
        let ys: Vec<f64> = consecutive.iter().map(|a| a.ln()).collect();
        -least_squares_slope(xs, &ys)
    } else {
        f64::NAN
    };
    Ok(CauchyDiagnostic { table, consecutive, strictly_decreasing, fitted_rate })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Samples of `Z^h` with mean, stationarity and convergence checks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariantFieldReport {
    pub k_max: f64,
    pub tau: f64,
    pub vertices: Vec<VertexId>,
    pub harmonic: Vec<f64>,
    pub mean: Vec<Estimate>,
    pub second_moment: Vec<Estimate>,
    /// `A(K_max/2, K_max)`.
    pub cauchy: SupEstimate,
    /// Largest `|E[Z(x)] − h(x)|/SE`.
    pub mean_z: f64,
    /// Largest paired z-score between time 0 and time `−τ` (first and second moments).
    pub stationarity_z: f64,
}

/// `Z^h ≈ u^{K_max,h}(0,·)`; `cauchy_tolerance` is relative to `sup_x E[Z(x)²]`.
pub fn estimate_invariant_field<T: Real>(
    model: &Model<T>,
    cfg: &StationaryConfig<T>,
    k_max: f64,
    tau: f64,
    cauchy_tolerance: f64,
) -> Result<InvariantFieldReport> {
    let n_max = model.steps_for(k_max);
    let n_half = model.steps_for(k_max / 2.0);
    let n_tau = model.steps_for(tau);
    if n_half == 0 || n_half >= n_max || n_tau == 0 {
        return Err(Error::InvalidArgument("K_max and τ must span several time steps".into()));
    }
    let sim = cfg.sim_config(model, n_max + n_tau)?;
    let obs = cfg.observed_interior(model)?;
    let pinned = model.generator.restrict(&sim.initial)?;
    let nv = obs.len();
    // per vertex: Z, Z², (Z − Z_{K/2})², Z − Z_{−τ}, Z² − Z_{−τ}²
    let width = 5 * nv;
    let total = n_max + n_tau;
    let acc = run_replicas(cfg.replicas, width, false, |r, out| {
        let noise = sample_window(&model.covariance, model.dt(), -(total as i64), total, SeedRecord::new(cfg.seed, r))?;
        let mut integ = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned.clone());
        let z = pullback_solve(&mut integ, &noise, n_max, total)?;
        let half = pullback_solve(&mut integ, &noise, n_half, total)?;
        let shifted = pullback_solve(&mut integ, &noise, n_max, n_max)?;
        for (vi, &i) in obs.iter().enumerate() {
            let (a, b, c) = (z[i].to_f64_lossy(), half[i].to_f64_lossy(), shifted[i].to_f64_lossy());
            out[5 * vi] = a;
            out[5 * vi + 1] = a * a;
            out[5 * vi + 2] = (a - b) * (a - b);
            out[5 * vi + 3] = a - c;
            out[5 * vi + 4] = a * a - c * c;
        }
        Ok(())
    })?;
    let harmonic: Vec<f64> = obs.iter().map(|&i| pinned[i].to_f64_lossy()).collect();
    let mean: Vec<Estimate> = (0..nv).map(|vi| acc.estimate(5 * vi)).collect();
    let second_moment: Vec<Estimate> = (0..nv).map(|vi| acc.estimate(5 * vi + 1)).collect();
    let cauchy = sup_of((0..nv).map(|vi| (vi, acc.estimate(5 * vi + 2))))?;
    let scale = second_moment.iter().map(|e| e.value).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if cauchy.value > cauchy_tolerance * scale {
        return Err(Error::Cauchy { achieved: cauchy.value / scale, target: cauchy_tolerance });
    }
    let mean_z = mean.iter().zip(&harmonic).map(|(e, h)| z_score(*e, *h)).fold(0.0, f64::max);
    let stationarity_z = (0..nv)
        .flat_map(|vi| [z_score(acc.estimate(5 * vi + 3), 0.0), z_score(acc.estimate(5 * vi + 4), 0.0)])
        .fold(0.0, f64::max);
    Ok(InvariantFieldReport {
        k_max,
        tau,
        vertices: cfg.observe.clone(),
        harmonic,
        mean,
        second_moment,
        cauchy,
        mean_z,
        stationarity_z,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttractionReport {
    pub times: Vec<f64>,
    /// `M(t) = sup_x E[δ(t,x)²]`.
    pub m: Vec<SupEstimate>,
    /// `a(t) = sup_x |P_t(u₀ − h*)(x)|²`, exact.
    pub a: Vec<f64>,
    /// `sup_{s≤t} a(s) / (1 − (βL_f)²Λ)`.
    pub bound: Vec<f64>,
    pub rho: f64,
}

impl AttractionReport {
    /// `M(t) ≤ bound(t) + 3 SE` at every retained time.
    pub fn bound_verdict(&self) -> Verdict {
        let worst = self
            .m
            .iter()
            .zip(&self.bound)
            .map(|(m, b)| m.value - b - 3.0 * m.se.unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        Verdict::at_most("attraction: max_t [M(t) - bound(t) - 3SE]", worst, 0.0)
    }

    /// `M(T_end) ≤ fraction · M(0)`.
    pub fn contraction_verdict(&self, fraction: f64) -> Verdict {
        let m0 = self.m[0].value;
        let end = self.m.last().unwrap().value;
        Verdict::at_most(format!("attraction: M(T_end) <= {fraction} M(0)"), end, fraction * m0)
    }
}

/// Couples the solution from `initial` with the one from `h*` on the same noise.
pub fn attraction_run<T: Real>(
    model: &Model<T>,
    cfg: &StationaryConfig<T>,
    initial: &[T],
    steps: usize,
    retain: Retention,
) -> Result<AttractionReport> {
    let gen = &model.generator;
    let mut sim = cfg.sim_config(model, steps)?;
    let pinned = gen.restrict(&sim.initial)?;
    sim.initial = initial.to_vec();
    sim.validate(model)?;
    let rho = 1.0 - require_weak_disorder(cfg.beta.to_f64_lossy(), cfg.nonlinearity.lipschitz(), model.lambda())?;
    let obs = cfg.observed_interior(model)?;
    let retained = retain.steps(steps);
    let u0 = gen.restrict(initial)?;
    let nv = obs.len();

    let p = model.cache.step_matrix();
    let mut d = &u0 - &pinned;
    let mut a = Vec::with_capacity(retained.len());
    let mut next = 0;
    for n in 0..=steps {
        if retained.get(next) == Some(&n) {
            a.push(obs.iter().map(|&i| d[i].to_f64_lossy().powi(2)).fold(0.0, f64::max));
            next += 1;
        }
        d = p * d;
    }
    let mut bound = Vec::with_capacity(a.len());
    let mut running = 0.0f64;
    for &v in &a {
        running = running.max(v);
        bound.push(running / (1.0 - rho));
    }

    let acc = run_replicas(cfg.replicas, retained.len() * nv, false, |r, out| {
        let mut noise = NoiseSource::new(&model.covariance, model.dt(), SeedRecord::new(cfg.seed, r))?;
        let mut iu = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned.clone());
        let mut iv = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned.clone());
        let mut u = u0.clone();
        let mut v = pinned.clone();
        let mut dw = DVector::zeros(gen.dim());
        let mut next = 0;
        for n in 0..=steps {
            if retained.get(next) == Some(&n) {
                for (vi, &i) in obs.iter().enumerate() {
                    out[next * nv + vi] = (u[i] - v[i]).to_f64_lossy().powi(2);
                }
                next += 1;
            }
            if n == steps {
                break;
            }
            noise.increment(n as i64, &mut dw);
            if !(iu.advance(&mut u, dw.as_slice()) && iv.advance(&mut v, dw.as_slice())) {
                return Err(Error::NonFinite { step: n as i64, replica: Some(r) });
            }
        }
        Ok(())
    })?;
    let m = (0..retained.len())
        .map(|ti| sup_of((0..nv).map(|vi| (vi, acc.estimate(ti * nv + vi)))))
        .collect::<Result<Vec<_>>>()?;
    let dt = model.dt().to_f64_lossy();
    Ok(AttractionReport { times: retained.iter().map(|&n| n as f64 * dt).collect(), m, a, bound, rho })
}

/// Per-β fluctuation statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationEntry {
    pub beta: f64,
    pub rho: f64,
    /// `M_β = sup_x E[Δ_β(x)²]`.
    pub m_beta: SupEstimate,
    /// `sup_x E[|Δ_β/β − G_h|²(x)]`.
    pub pathwise_error: SupEstimate,
    /// `L_f² Λ M_β`.
    pub error_bound: f64,
    /// `(βL_f)²Λ‖h‖²_∞/(1 − (βL_f)²Λ)`.
    pub m_bound: f64,
    /// Largest z-score between the sample covariance of `Δ_β/β` and the quadrature covariance of `G_h`.
    pub covariance_z: f64,
}

impl FluctuationEntry {
    /// `E|Δ/β − G|² ≤ L_f²ΛM_β + 3 SE`, SE combining both estimates.
    pub fn error_verdict(&self, lipschitz: f64, lambda: f64) -> Verdict {
        let c = lipschitz * lipschitz * lambda;
        let se = (self.pathwise_error.se.unwrap_or(0.0).powi(2) + (c * self.m_beta.se.unwrap_or(0.0)).powi(2)).sqrt();
        Verdict::at_most(
            format!("fluct(beta={}): E|D/b - G|^2 <= Lf^2 Lambda M_b + 3SE", self.beta),
            self.pathwise_error.value,
            self.error_bound + 3.0 * se,
        )
    }

    pub fn m_verdict(&self) -> Verdict {
        Verdict::at_most(
            format!("fluct(beta={}): M_b <= rho |h|^2/(1-rho) + 3SE", self.beta),
            self.m_beta.value,
            self.m_bound + 3.0 * self.m_beta.se.unwrap_or(0.0),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub k: f64,
    pub vertices: Vec<VertexId>,
    pub entries: Vec<FluctuationEntry>,
    /// Sample covariance of `G_h` over the observed vertices.
    pub gh_sample_covariance: Vec<Vec<f64>>,
    /// Standard errors of the sample covariance entries.
    pub gh_covariance_se: Vec<Vec<f64>>,
    /// Quadrature covariance of `G_h` over the observed vertices.
    pub gh_quadrature: Vec<Vec<f64>>,
    pub gh_tail_bound: f64,
    /// Largest z-score between sample and quadrature covariance of `G_h`.
    pub gh_covariance_z: f64,
    /// Log-log slope of the pathwise error against β.
    pub error_slope: f64,
}

/// Covariance of `G_h` restricted to the interior, with the tail bound.
pub fn gh_covariance_quadrature<T: Real>(
    model: &Model<T>,
    harmonic_interior: &DVector<T>,
    f: Nonlinearity,
    horizon: T,
) -> Result<(DMatrix<T>, f64)> {
    let k = model.generator.dim();
    let fh: Vec<T> = harmonic_interior.iter().map(|&v| f.eval(v)).collect();
    let r = model.covariance.matrix();
    let a = DMatrix::from_fn(k, k, |i, j| fh[i] * r[(i, j)] * fh[j]);
    let integral = sandwich_integral(&model.generator, &model.cache, &a, horizon)?;
    Ok((integral.matrix, integral.tail_bound))
}

/// Sample-covariance standard error under Gaussianity: `√((σ_ii σ_jj + σ_ij²)/(n−1))`.
fn covariance_se(cov: &DMatrix<f64>, i: usize, j: usize, n: u64) -> f64 {
    ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / (n as f64 - 1.0)).sqrt()
}

/// Builds `Z^h_β` for each β and `G_h` on the same noise window of depth `k`.
pub fn fluctuation_run<T: Real>(
    model: &Model<T>,
    cfg: &StationaryConfig<T>,
    betas: &[T],
    k: f64,
) -> Result<FluctuationReport> {
    if betas.is_empty() || betas.iter().any(|b| !(*b > T::zero())) {
        return Err(Error::InvalidArgument("fluctuation run needs positive β values".into()));
    }
    let n = model.steps_for(k);
    let lf = cfg.nonlinearity.lipschitz();
    let lambda = model.lambda();
    for &b in betas {
        let mut c = cfg.clone();
        c.beta = b;
        c.sim_config(model, n)?;
    }
    let sim = cfg.sim_config(model, n)?;
    let pinned = model.generator.restrict(&sim.initial)?;
    let obs = cfg.observed_interior(model)?;
    let h_sup = sim.boundary_data.iter().chain(sim.initial.iter()).map(|v| v.abs().to_f64_lossy()).fold(0.0, f64::max);
    let nv = obs.len();
    let nb = betas.len();
    let fh: DVector<T> = pinned.map(|v| cfg.nonlinearity.eval(v));
    // layout: [Δ_β/β (x) per β][G (x)] with pairs, then [Δ_β²(x)][(Δ_β/β − G)²(x)] per β
    let pair_block = (nb + 1) * nv;
    let width = pair_block + 2 * nb * nv;
    let p = model.cache.step_matrix();
    let acc = run_replicas_with(cfg.replicas, width, pair_block, |r, out| {
        let noise = sample_window(&model.covariance, model.dt(), -(n as i64), n, SeedRecord::new(cfg.seed, r))?;
        let mut g = DVector::zeros(pinned.len());
        let mut tmp = DVector::zeros(pinned.len());
        for col in 0..n {
            tmp.copy_from(&g);
            for (i, v) in tmp.iter_mut().enumerate() {
                *v += fh[i] * noise.step(col)[i];
            }
            p.mul_to(&tmp, &mut g);
        }
        for (vi, &i) in obs.iter().enumerate() {
            out[nb * nv + vi] = g[i].to_f64_lossy();
        }
        for (bi, &beta) in betas.iter().enumerate() {
            let mut integ = Integrator::new(model, beta, cfg.nonlinearity, pinned.clone());
            let z = pullback_solve(&mut integ, &noise, n, n)?;
            let b = beta.to_f64_lossy();
            for (vi, &i) in obs.iter().enumerate() {
                let delta = (z[i] - pinned[i]).to_f64_lossy();
                let scaled = delta / b;
                let err = scaled - g[i].to_f64_lossy();
                out[bi * nv + vi] = scaled;
                out[pair_block + bi * nv + vi] = delta * delta;
                out[pair_block + nb * nv + bi * nv + vi] = err * err;
            }
        }
        Ok(())
    })?;

    let horizon = T::lit(n as f64) * model.dt();
    let (quad_full, gh_tail_bound) = gh_covariance_quadrature(model, &pinned, cfg.nonlinearity, horizon)?;
    let quad = DMatrix::from_fn(nv, nv, |a, b| quad_full[(obs[a], obs[b])].to_f64_lossy());
    let sample_cov = |offset: usize| DMatrix::from_fn(nv, nv, |a, b| acc.covariance(offset + a, offset + b).unwrap_or(f64::NAN));
    let max_z = |cov: &DMatrix<f64>| {
        let mut worst = 0.0f64;
        for a in 0..nv {
            for b in a..nv {
                let se = covariance_se(cov, a, b, acc.count());
                worst = worst.max(z_score(Estimate::sampled(cov[(a, b)], Some(se)), quad[(a, b)]));
            }
        }
        worst
    };

    let mut entries = Vec::with_capacity(nb);
    for (bi, &beta) in betas.iter().enumerate() {
        let b = beta.to_f64_lossy();
        let rho = 1.0 - require_weak_disorder(b, lf, lambda)?;
        let m_beta = sup_of((0..nv).map(|vi| (vi, acc.estimate(pair_block + bi * nv + vi))))?;
        let pathwise_error = sup_of((0..nv).map(|vi| (vi, acc.estimate(pair_block + nb * nv + bi * nv + vi))))?;
        entries.push(FluctuationEntry {
            beta: b,
            rho,
            m_beta,
            pathwise_error,
            error_bound: lf * lf * lambda * m_beta.value,
            m_bound: rho * h_sup * h_sup / (1.0 - rho),
            covariance_z: max_z(&sample_cov(bi * nv)),
        });
    }
    let gh_cov = sample_cov(nb * nv);
    let gh_covariance_z = max_z(&gh_cov);
    let logs: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.pathwise_error.value > 0.0)
        .map(|e| (e.beta.ln(), e.pathwise_error.value.ln()))
        .collect();
    let error_slope = if logs.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = logs.into_iter().unzip();
        least_squares_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    let to_rows = |m: &DMatrix<f64>| (0..nv).map(|a| (0..nv).map(|b| m[(a, b)]).collect()).collect();
    let se_rows = (0..nv).map(|a| (0..nv).map(|b| covariance_se(&gh_cov, a, b, acc.count())).collect()).collect();
    Ok(FluctuationReport {
        k,
        vertices: cfg.observe.clone(),
        entries,
        gh_sample_covariance: to_rows(&gh_cov),
        gh_covariance_se: se_rows,
        gh_quadrature: to_rows(&quad),
        gh_tail_bound,
        gh_covariance_z,
        error_slope,
    })
}

/// Maximum over steps and vertices of `|a·u(t) − u^a(t)|`, where `u^a`
/// starts from `a·u₀` with boundary data `a·h_∂` under the transported noise.
pub fn equivariance_check<T: Real>(model: &Model<T>, cfg: &SimConfig<T>, a: &Automorphism, seed: SeedRecord) -> Result<f64> {
    let gen = &model.generator;
    let w = sample_increments(&model.covariance, model.dt(), cfg.steps, seed)?;
    let wa = transform_noise(&w, &model.covariance, gen, a)?;
    let mut cfg = cfg.clone();
    cfg.retain = Retention::All;
    let path = solve_path(model, &cfg, &w)?;
    let mut moved = cfg.clone();
    moved.initial = a.push_field(&cfg.initial);
    moved.boundary_data = match cfg.mode {
        BoundaryMode::Pinned => gen.restrict_boundary(&moved.initial)?,
        BoundaryMode::Killed => cfg.boundary_data.clone(),
    };
    let path_a = solve_path(model, &moved, &wa)?;
    let mut worst = 0.0f64;
    for (u, ua) in path.fields.iter().zip(&path_a.fields) {
        let pushed = a.push_field(u);
        for (x, y) in pushed.iter().zip(ua) {
            worst = worst.max((*x - *y).abs().to_f64_lossy());
        }
    }
    Ok(worst)
}

/// Two-sample comparison of invariant-field moments at `x` and `a·x`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariantSymmetryReport {
    pub k: f64,
    /// `(x, a·x, z for E[Z], z for E[Z²])` for every moved observed vertex.
    pub comparisons: Vec<(VertexId, VertexId, f64, f64)>,
    pub max_z: f64,
}

/// Compares `Z` with `a·Z` using independent replica sets.
///
/// Requires `a` to preserve the boundary data and `R`.
pub fn invariant_symmetry_check<T: Real>(
    model: &Model<T>,
    cfg: &StationaryConfig<T>,
    a: &Automorphism,
    k: f64,
) -> Result<InvariantSymmetryReport> {
    let gen = &model.generator;
    model.covariance.check_invariant(gen, a)?;
    let sim = cfg.sim_config(model, model.steps_for(k))?;
    let moved_data = gen.restrict_boundary(&a.push_field(&sim.initial))?;
    let same = moved_data.iter().zip(&sim.boundary_data).all(|(x, y)| (*x - *y).abs().to_f64_lossy() <= 1e-12);
    if !same {
        return Err(Error::InvalidArgument("boundary data is not invariant under the automorphism".into()));
    }
    let pairs: Vec<(VertexId, VertexId)> = cfg
        .observe
        .iter()
        .map(|&x| (x, a.apply(x)))
        .filter(|(x, y)| x != y && gen.interior_index(*y).is_some())
        .collect();
    let half = cfg.replicas / 2;
    let run = |offset: u64| -> Result<MomentAccumulator> {
        let n = model.steps_for(k);
        let pinned = gen.restrict(&sim.initial)?;
        run_replicas(half, 4 * pairs.len(), false, |r, out| {
            let noise = sample_window(&model.covariance, model.dt(), -(n as i64), n, SeedRecord::new(cfg.seed, offset + r))?;
            let mut integ = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned.clone());
            let z = gen.assemble(&pullback_solve(&mut integ, &noise, n, n)?, &sim.boundary_data);
            let az = a.push_field(&z);
            for (pi, (x, _)) in pairs.iter().enumerate() {
                let (u, v) = (z[x.0].to_f64_lossy(), az[x.0].to_f64_lossy());
                out[4 * pi] = u;
                out[4 * pi + 1] = u * u;
                out[4 * pi + 2] = v;
                out[4 * pi + 3] = v * v;
            }
            Ok(())
        })
    };
    let first = run(0)?;
    let second = run(half)?;
    let two_sample = |i: usize, j: usize| {
        let (e1, e2) = (first.estimate(i), second.estimate(j));
        let se = (e1.se.unwrap_or(0.0).powi(2) + e2.se.unwrap_or(0.0).powi(2)).sqrt();
        z_score(Estimate::sampled(e1.value - e2.value, Some(se)), 0.0)
    };
    let comparisons: Vec<(VertexId, VertexId, f64, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(pi, &(x, y))| (x, y, two_sample(4 * pi, 4 * pi + 2), two_sample(4 * pi + 1, 4 * pi + 3)))
        .collect();
    let max_z = comparisons.iter().map(|c| c.2.max(c.3)).fold(0.0, f64::max);
    Ok(InvariantSymmetryReport { k, comparisons, max_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{tree_automorphism, GraphSpace, DEFAULT_MAX_VERTICES};
    use crate::noise::CovarianceKind;
    use approx::assert_abs_diff_eq;

    fn path3(dt: f64) -> Model<f64> {
        Model::new(GraphSpace::path(3).unwrap(), CovarianceKind::White, dt).unwrap()
    }

    fn tree(r: usize, dt: f64) -> Model<f64> {
        Model::new(GraphSpace::regular_tree(2, r, DEFAULT_MAX_VERTICES).unwrap(), CovarianceKind::White, dt).unwrap()
    }

    #[test]
    fn pullback_without_noise_is_harmonic() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let data: Vec<f64> = (0..nb).map(|i| 1.0 + i as f64).collect();
        let mut cfg = StationaryConfig::new(&m, 0.0, data);
        cfg.replicas = 3;
        let run = pullback_run(&m, &cfg, &[1.0, 2.0, 4.0]).unwrap();
        for ki in 0..3 {
            for vi in 0..run.vertices.len() {
                assert_abs_diff_eq!(run.mean(ki, vi).value, run.harmonic[vi], epsilon = 1e-12);
            }
        }
        let diag = cauchy_diagnostic(&run).unwrap();
        assert!(diag.table.iter().all(|row| row.2 < 1e-24));
        assert!(diag.fitted_rate.is_nan() || diag.fitted_rate.is_finite());
        assert_eq!(run.difference(1, 1, 0), Estimate::exact(0.0));
    }

    #[test]
    fn pullback_rejects_bad_ladders() {
        let m = path3(0.01);
        let cfg = StationaryConfig::new(&m, 0.5, vec![1.0, 1.0]);
        assert!(pullback_run(&m, &cfg, &[2.0, 1.0]).is_err());
        assert!(pullback_run(&m, &cfg, &[]).is_err());
        let run = pullback_run(&m, &cfg, &[1.0, 2.0]).unwrap();
        assert!(cauchy_diagnostic(&run).is_err());
    }

    #[test]
    fn equal_depths_give_identical_fields() {
        let m = path3(0.01);
        let mut cfg = StationaryConfig::new(&m, 0.5, vec![1.0, 1.0]);
        cfg.replicas = 1;
        let noise = sample_window(&m.covariance, 0.01, -300, 300, SeedRecord::new(3, 0)).unwrap();
        let pinned = DVector::from_element(1, 1.0);
        let mut integ = Integrator::new(&m, 0.5, Nonlinearity::Linear, pinned);
        let a = pullback_solve(&mut integ, &noise, 200, 300).unwrap();
        let b = pullback_solve(&mut integ, &noise, 200, 300).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pullback_differences_decay_on_path() {
        let m = path3(0.01);
        let mut cfg = StationaryConfig::new(&m, 0.4, vec![1.0, 1.0]);
        cfg.replicas = 2000;
        cfg.seed = 5;
        let run = pullback_run(&m, &cfg, &[1.0, 2.0, 4.0, 8.0]).unwrap();
        let diag = cauchy_diagnostic(&run).unwrap();
        assert!(diag.strictly_decreasing, "{:?}", diag.consecutive);
        // second-moment rate 2 − β² for the scalar linear equation
        assert!((diag.fitted_rate - (2.0 - 0.16)).abs() < 0.2 * 2.0, "{}", diag.fitted_rate);
        assert!(run.mean_z(3) < 4.0);
    }

    #[test]
    fn invariant_field_scalar_second_moment() {
        let m = path3(0.01);
        let c = 1.5;
        let beta = 0.6;
        let mut cfg = StationaryConfig::new(&m, beta, vec![c, c]);
        cfg.replicas = 4000;
        cfg.seed = 8;
        let rep = estimate_invariant_field(&m, &cfg, 12.0, 2.0, 1e-3).unwrap();
        // discrete fixed point of the scalar recursion
        let a2 = (-2.0f64 * 0.01).exp();
        let exact = c * c * (1.0 - a2) / (1.0 - a2 - a2 * beta * beta * 0.01);
        assert!((exact - c * c / (1.0 - beta * beta / 2.0)).abs() < 0.01);
        assert!(z_score(rep.second_moment[0], exact) < 4.0, "{:?} vs {exact}", rep.second_moment[0]);
        assert!(rep.mean_z < 4.0);
        assert!(rep.stationarity_z < 4.0);
    }

    #[test]
    fn invariant_field_without_noise_and_cauchy_failure() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let mut cfg = StationaryConfig::new(&m, 0.0, vec![2.0; nb]);
        cfg.replicas = 2;
        let rep = estimate_invariant_field(&m, &cfg, 4.0, 1.0, 1e-3).unwrap();
        assert!(rep.mean.iter().all(|e| (e.value - 2.0).abs() < 1e-12));
        let mut noisy = StationaryConfig::new(&m, 0.8, vec![2.0; nb]);
        noisy.replicas = 200;
        // a depth far below the relaxation time cannot meet the tolerance
        assert!(matches!(estimate_invariant_field(&m, &noisy, 0.2, 0.1, 1e-6), Err(Error::Cauchy { .. })));
    }

    #[test]
    fn attraction_examples() {
        let m = path3(0.01);
        let mut cfg = StationaryConfig::new(&m, 0.0, vec![1.0, 1.0]);
        cfg.replicas = 10;
        let rep = attraction_run(&m, &cfg, &[1.0, 2.0, 1.0], 300, Retention::Every(50)).unwrap();
        for (t, (mm, a)) in rep.times.iter().zip(rep.m.iter().zip(&rep.a)) {
            assert_abs_diff_eq!(*a, (-2.0 * t).exp(), epsilon = 1e-12);
            assert_abs_diff_eq!(mm.value, *a, epsilon = 1e-12);
        }
        let same = attraction_run(&m, &cfg, &[1.0, 1.0, 1.0], 100, Retention::Every(50)).unwrap();
        assert!(same.m.iter().all(|e| e.value == 0.0));
        assert!(matches!(
            attraction_run(&m, &cfg, &[0.0, 2.0, 1.0], 100, Retention::Every(50)),
            Err(Error::BoundaryMismatch)
        ));
    }

    #[test]
    fn attraction_bound_with_noise() {
        let m = path3(0.01);
        let mut cfg = StationaryConfig::new(&m, 0.7, vec![1.0, 1.0]);
        cfg.replicas = 2000;
        cfg.seed = 3;
        let rep = attraction_run(&m, &cfg, &[1.0, 2.0, 1.0], 500, Retention::Every(25)).unwrap();
        assert!(rep.bound_verdict().pass);
        assert!(rep.contraction_verdict(0.05).pass);
    }

    #[test]
    fn gh_quadrature_examples() {
        let m = path3(0.01);
        let h = DVector::from_element(1, 1.0);
        let (cov, tail) = gh_covariance_quadrature(&m, &h, Nonlinearity::Linear, 20.0).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 0.5, epsilon = tail + 1e-9);
        let zero = DVector::from_element(1, 0.0);
        let (cov, _) = gh_covariance_quadrature(&m, &zero, Nonlinearity::Linear, 20.0).unwrap();
        assert_eq!(cov[(0, 0)], 0.0);
    }

    #[test]
    fn fluctuations_on_path() {
        let m = path3(0.01);
        let mut cfg = StationaryConfig::new(&m, 0.4, vec![1.0, 1.0]);
        cfg.replicas = 3000;
        cfg.seed = 12;
        let rep = fluctuation_run(&m, &cfg, &[0.4, 0.2, 0.1], 10.0).unwrap();
        for e in &rep.entries {
            assert!(e.error_verdict(1.0, m.lambda()).pass, "{e:?}");
            assert!(e.m_verdict().pass, "{e:?}");
        }
        assert!(rep.error_slope >= 1.5, "{}", rep.error_slope);
        assert!(rep.gh_covariance_z < 4.0);
        assert!((rep.gh_quadrature[0][0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn equivariance_identity_and_swap() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let cfg = SimConfig::from_harmonic(&m, 0.8, vec![1.0; nb], 200).unwrap();
        let id = Automorphism::identity(m.graph.n_vertices());
        assert_eq!(equivariance_check(&m, &cfg, &id, SeedRecord::new(1, 0)).unwrap(), 0.0);
        let a = tree_automorphism(&m.graph, (0, 2)).unwrap();
        let mut asym = cfg.clone();
        for x in m.generator.interior() {
            asym.initial[x.0] = 1.0 + 0.1 * x.0 as f64;
        }
        assert!(equivariance_check(&m, &asym, &a, SeedRecord::new(1, 0)).unwrap() <= 1e-12);
    }

    #[test]
    fn symmetric_invariant_statistics() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let a = tree_automorphism(&m.graph, (0, 1)).unwrap();
        let mut cfg = StationaryConfig::new(&m, 0.6, vec![1.0; nb]);
        cfg.replicas = 2000;
        cfg.seed = 4;
        let rep = invariant_symmetry_check(&m, &cfg, &a, 10.0).unwrap();
        assert!(!rep.comparisons.is_empty());
        assert!(rep.max_z < 4.0, "{rep:?}");
        let mut skew = cfg.clone();
        skew.boundary_data[0] = 2.0;
        assert!(invariant_symmetry_check(&m, &skew, &a, 10.0).is_err());
    }
}

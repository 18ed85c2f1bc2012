//! Exponential-Euler time stepping of the mild equation with pinned boundary.
//!
//! One step on the interior reads
//! `u_{n+1} = h* + P_dt (u_n − h* + β f(u_n) ⊙ ΔW_n)`,
//! where `h*` is the harmonic extension of the boundary data. In killed
//! mode `h* = 0` and the boundary is absorbing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disorder::{neumann_second_moment_bound, weak_disorder_margin, NeumannBound};
use crate::error::{Error, Result};
use crate::geometry::VertexId;
use crate::model::Model;
use crate::noise::{NoiseIncrements, NoiseSource, SeedRecord};
use crate::scalar::Real;
use crate::stats::{run_replicas, sup_of, z_score, Estimate, ExperimentReport, MomentAccumulator, SupEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `f(u) = u`.
    Linear,
    /// `f(u) = a·sin(u/a)`.
    Sine { a: f64 },
    /// `f(u) = sign(u)·min(|u|, c)`.
    Clip { c: f64 },
}

impl Nonlinearity {
    #[inline]
    pub fn eval<T: Real>(&self, u: T) -> T {
        match *self {
            Nonlinearity::Linear => u,
            Nonlinearity::Sine { a } => {
                let a = T::lit(a);
                a * (u / a).sin()
            }
            Nonlinearity::Clip { c } => {
                let c = T::lit(c);
                u.max(-c).min(c)
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Nonlinearity::Linear)
    }

    /// Checks parameters, `f(0) = 0` and the Lipschitz bound on random pairs.
    pub fn validate(&self, scale: f64) -> Result<()> {
        match *self {
            Nonlinearity::Sine { a } if !(a > 0.0 && a.is_finite()) => {
                return Err(Error::InvalidArgument(format!("sine amplitude must be positive, got {a}")));
            }
            Nonlinearity::Clip { c } if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::InvalidArgument(format!("clip level must be positive, got {c}")));
            }
            _ => {}
        }
        if self.eval(0.0f64) != 0.0 {
            return Err(Error::InvalidArgument("f(0) must vanish".into()));
        }
        let lf = self.lipschitz();
        let range = 10.0 * scale.max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..4096 {
            let u: f64 = rng.random_range(-range..range);
            let v: f64 = rng.random_range(-range..range);
            if (self.eval(u) - self.eval(v)).abs() > lf * (u - v).abs() * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::Lipschitz(u, v));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    #[default]
    Pinned,
    Killed,
}

/// Which steps a path or moment table keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    All,
    /// Steps `0, k, 2k, …` and the final step.
    Every(usize),
    /// Step 0 and the final step.
    Endpoints,
}

impl Retention {
    pub fn steps(&self, total: usize) -> Vec<usize> {
        let mut out: Vec<usize> = match *self {
            Retention::All => (0..=total).collect(),
            Retention::Every(k) => (0..=total).step_by(k.max(1)).collect(),
            Retention::Endpoints => vec![0],
        };
        if out.last() != Some(&total) {
            out.push(total);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig<T: Real> {
    pub beta: T,
    pub nonlinearity: Nonlinearity,
    pub steps: usize,
    /// Data on `generator.boundary()`, in that order.
    pub boundary_data: Vec<T>,
    /// Initial field over all vertices.
    pub initial: Vec<T>,
    pub observe: Vec<VertexId>,
    pub retain: Retention,
    pub replicas: u64,
    pub seed: u64,
    pub mode: BoundaryMode,
    /// Skips the weak-disorder requirement.
    pub allow_strong_disorder: bool,
}

impl<T: Real> SimConfig<T> {
    /// Starts at the harmonic extension of `boundary_data`, observing every interior vertex.
    pub fn from_harmonic(model: &Model<T>, beta: T, boundary_data: Vec<T>, steps: usize) -> Result<Self> {
        let h = model.harmonic(&boundary_data)?;
        Ok(SimConfig {
            beta,
            nonlinearity: Nonlinearity::Linear,
            steps,
            boundary_data,
            initial: h.values().to_vec(),
            observe: model.generator.interior().to_vec(),
            retain: Retention::All,
            replicas: 1,
            seed: 0,
            mode: BoundaryMode::Pinned,
            allow_strong_disorder: false,
        })
    }

    /// `dt·(βL_f)²·‖R‖`.
    pub fn stability_number(&self, model: &Model<T>) -> f64 {
        let bl = self.beta.to_f64_lossy() * self.nonlinearity.lipschitz();
        model.dt().to_f64_lossy() * bl * bl * model.covariance.operator_norm().to_f64_lossy()
    }

    pub fn margin(&self, model: &Model<T>) -> f64 {
        weak_disorder_margin(self.beta.to_f64_lossy(), self.nonlinearity.lipschitz(), model.lambda())
    }

    pub fn validate(&self, model: &Model<T>) -> Result<()> {
        let gen = &model.generator;
        if self.initial.len() != gen.n_vertices() {
            return Err(Error::Dimension { expected: gen.n_vertices(), got: self.initial.len() });
        }
        if self.boundary_data.len() != gen.boundary().len() {
            return Err(Error::Dimension { expected: gen.boundary().len(), got: self.boundary_data.len() });
        }
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!("β must be nonnegative, got {}", self.beta)));
        }
        if self.observe.iter().any(|x| x.0 >= gen.n_vertices()) {
            return Err(Error::InvalidArgument("observation vertex out of range".into()));
        }
        if self.initial.iter().chain(&self.boundary_data).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("initial or boundary data is not finite".into()));
        }
        if self.mode == BoundaryMode::Pinned {
            let on_boundary = gen.restrict_boundary(&self.initial)?;
            if on_boundary != self.boundary_data {
                return Err(Error::BoundaryMismatch);
            }
        }
        let scale = self.initial.iter().map(|v| v.abs().to_f64_lossy()).fold(1.0, f64::max);
        self.nonlinearity.validate(scale)?;
        let s = self.stability_number(model);
        if s > 0.1 {
            return Err(Error::Stability(s));
        }
        let margin = self.margin(model);
        if margin <= 0.0 && !self.allow_strong_disorder {
            return Err(Error::StrongDisorder(1.0 - margin));
        }
        Ok(())
    }

    pub fn neumann_bound(&self, model: &Model<T>) -> Result<NeumannBound> {
        let u0_sup = self.initial.iter().map(|v| v.abs().to_f64_lossy()).fold(0.0, f64::max);
        neumann_second_moment_bound(u0_sup, self.beta.to_f64_lossy(), self.nonlinearity.lipschitz(), model.lambda())
    }
}

/// Interior state stepper sharing the model's kernel.
pub struct Integrator<'a, T: Real> {
    step: &'a DMatrix<T>,
    pinned: DVector<T>,
    beta: T,
    f: Nonlinearity,
    buf: DVector<T>,
}

impl<'a, T: Real> Integrator<'a, T> {
    /// `pinned` is the interior restriction of `h*` (zero in killed mode).
    pub fn new(model: &'a Model<T>, beta: T, f: Nonlinearity, pinned: DVector<T>) -> Self {
        let k = model.generator.dim();
        assert_eq!(pinned.len(), k);
        Integrator { step: model.cache.step_matrix(), pinned, beta, f, buf: DVector::zeros(k) }
    }

    pub fn pinned(&self) -> &DVector<T> {
        &self.pinned
    }

    /// Advances `u` by one step; returns `false` if the result is not finite.
    #[inline]
    pub fn advance(&mut self, u: &mut DVector<T>, dw: &[T]) -> bool {
        for i in 0..u.len() {
            self.buf[i] = u[i] - self.pinned[i] + self.beta * self.f.eval(u[i]) * dw[i];
        }
        self.step.mul_to(&self.buf, u);
        let mut finite = true;
        for i in 0..u.len() {
            u[i] += self.pinned[i];
            finite &= u[i].is_finite();
        }
        finite
    }
}

/// Interior part of the pinned field `h*` for the configured mode.
pub fn pinned_interior<T: Real>(model: &Model<T>, cfg: &SimConfig<T>) -> Result<DVector<T>> {
    match cfg.mode {
        BoundaryMode::Pinned => model.generator.restrict(model.harmonic(&cfg.boundary_data)?.values()),
        BoundaryMode::Killed => Ok(DVector::zeros(model.generator.dim())),
    }
}

fn boundary_values<T: Real>(cfg: &SimConfig<T>) -> Vec<T> {
    match cfg.mode {
        BoundaryMode::Pinned => cfg.boundary_data.clone(),
        BoundaryMode::Killed => vec![T::zero(); cfg.boundary_data.len()],
    }
}

/// One step on a full vertex field.
pub fn step<T: Real>(model: &Model<T>, cfg: &SimConfig<T>, u: &[T], dw: &[T]) -> Result<Vec<T>> {
    let gen = &model.generator;
    if dw.len() != gen.dim() {
        return Err(Error::Dimension { expected: gen.dim(), got: dw.len() });
    }
    let mut x = gen.restrict(u)?;
    let mut integ = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned_interior(model, cfg)?);
    if !integ.advance(&mut x, dw) {
        return Err(Error::NonFinite { step: 0, replica: None });
    }
    Ok(gen.assemble(&x, &boundary_values(cfg)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldPath<T> {
    pub dt: f64,
    pub steps: Vec<usize>,
    /// Full vertex fields at the retained steps.
    pub fields: Vec<Vec<T>>,
}

impl<T: Real> FieldPath<T> {
    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&n| n as f64 * self.dt).collect()
    }

    pub fn last(&self) -> &[T] {
        self.fields.last().expect("paths retain the final step")
    }
}

/// Iterates [`step`] over the given increments.
pub fn solve_path<T: Real>(model: &Model<T>, cfg: &SimConfig<T>, w: &NoiseIncrements<T>) -> Result<FieldPath<T>> {
    cfg.validate(model)?;
    if w.steps() < cfg.steps || w.dim() != model.generator.dim() {
        return Err(Error::InvalidArgument(format!(
            "noise grid {}×{} does not cover {} steps on {} interior vertices",
            w.dim(),
            w.steps(),
            cfg.steps,
            model.generator.dim()
        )));
    }
    if (w.dt() - model.dt()).abs().to_f64_lossy() > 1e-12 * model.dt().to_f64_lossy() {
        return Err(Error::InvalidArgument("noise dt differs from kernel dt".into()));
    }
    let gen = &model.generator;
    let bnd = boundary_values(cfg);
    let retained = cfg.retain.steps(cfg.steps);
    let mut u = gen.restrict(&cfg.initial)?;
    let mut integ = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned_interior(model, cfg)?);
    let mut fields = Vec::with_capacity(retained.len());
    let mut next = 0;
    for n in 0..=cfg.steps {
        if retained.get(next) == Some(&n) {
            fields.push(gen.assemble(&u, &bnd));
            next += 1;
        }
        if n == cfg.steps {
            break;
        }
        let dw = w.step(n);
        if !integ.advance(&mut u, dw.as_slice()) {
            return Err(Error::NonFinite { step: n as i64, replica: w.seed().map(|s| s.stream) });
        }
    }
    Ok(FieldPath { dt: model.dt().to_f64_lossy(), steps: retained, fields })
}

/// Monte Carlo estimates of `E[u]` and `E[u²]` at retained steps and observed vertices.
#[derive(Clone, Debug)]
pub struct MomentTable {
    pub dt: f64,
    pub steps: Vec<usize>,
    pub vertices: Vec<VertexId>,
    pub acc: MomentAccumulator,
}

impl MomentTable {
    fn index(&self, ti: usize, vi: usize) -> usize {
        2 * (ti * self.vertices.len() + vi)
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&n| n as f64 * self.dt).collect()
    }

    pub fn mean(&self, ti: usize, vi: usize) -> Estimate {
        self.acc.estimate(self.index(ti, vi))
    }

    pub fn second_moment(&self, ti: usize, vi: usize) -> Estimate {
        self.acc.estimate(self.index(ti, vi) + 1)
    }

    /// `sup_{t,x} E[u(t,x)²]` over the table; `argmax` is `ti·|V_obs| + vi`.
    pub fn sup_second_moment(&self) -> Result<SupEstimate> {
        let nv = self.vertices.len();
        sup_of((0..self.steps.len()).flat_map(|ti| (0..nv).map(move |vi| (ti * nv + vi, self.second_moment(ti, vi)))))
    }

    pub fn report(&self, name: &str) -> ExperimentReport {
        let mut r = ExperimentReport::new(name, &["t", "vertex", "mean", "mean_se", "m2", "m2_se"]);
        for (ti, t) in self.times().into_iter().enumerate() {
            for (vi, v) in self.vertices.iter().enumerate() {
                let m = self.mean(ti, vi);
                let m2 = self.second_moment(ti, vi);
                r.push_row(vec![t, v.0 as f64, m.value, m.se_or_zero(), m2.value, m2.se_or_zero()]);
            }
        }
        r
    }
}

/// Replica-parallel estimates of the first two moments.
pub fn second_moment_mc<T: Real>(model: &Model<T>, cfg: &SimConfig<T>) -> Result<MomentTable> {
    cfg.validate(model)?;
    let gen = &model.generator;
    let retained = cfg.retain.steps(cfg.steps);
    let obs: Vec<Observed<T>> = cfg
        .observe
        .iter()
        .map(|&x| match gen.interior_index(x) {
            Some(i) => Observed::Interior(i),
            None => Observed::Fixed(boundary_values(cfg)[gen.boundary_index(x).unwrap()]),
        })
        .collect();
    let pinned = pinned_interior(model, cfg)?;
    let u0 = gen.restrict(&cfg.initial)?;
    let width = 2 * retained.len() * obs.len();
    let acc = run_replicas(cfg.replicas, width, false, |r, out| {
        let mut noise = NoiseSource::new(&model.covariance, model.dt(), SeedRecord::new(cfg.seed, r))?;
        let mut integ = Integrator::new(model, cfg.beta, cfg.nonlinearity, pinned.clone());
        let mut u = u0.clone();
        let mut dw = DVector::zeros(gen.dim());
        let mut next = 0;
        for n in 0..=cfg.steps {
            if retained.get(next) == Some(&n) {
                for (vi, o) in obs.iter().enumerate() {
                    let v = match *o {
                        Observed::Interior(i) => u[i],
                        Observed::Fixed(b) => b,
                    }
                    .to_f64_lossy();
                    let k = 2 * (next * obs.len() + vi);
                    out[k] = v;
                    out[k + 1] = v * v;
                }
                next += 1;
            }
            if n == cfg.steps {
                break;
            }
            noise.increment(n as i64, &mut dw);
            if !integ.advance(&mut u, dw.as_slice()) {
                return Err(Error::NonFinite { step: n as i64, replica: Some(r) });
            }
        }
        Ok(())
    })?;
    Ok(MomentTable { dt: model.dt().to_f64_lossy(), steps: retained, vertices: cfg.observe.clone(), acc })
}

#[derive(Clone, Copy)]
enum Observed<T> {
    Interior(usize),
    Fixed(T),
}

/// Exact first and second moments of the discrete scheme (linear f).
#[derive(Clone, Debug)]
pub struct LinearMoments<T: Real> {
    pub dt: f64,
    pub steps: Vec<usize>,
    /// Interior means per retained step.
    pub mean: Vec<DVector<T>>,
    /// Interior second-moment matrices `E[u uᵀ]` per retained step.
    pub second: Vec<DMatrix<T>>,
    interior_pos: Vec<Option<usize>>,
    boundary: Vec<(usize, T)>,
}

impl<T: Real> LinearMoments<T> {
    pub fn mean_at(&self, ti: usize, x: VertexId) -> f64 {
        match self.interior_pos[x.0] {
            Some(i) => self.mean[ti][i].to_f64_lossy(),
            None => self.boundary_value(x),
        }
    }

    pub fn second_at(&self, ti: usize, x: VertexId) -> f64 {
        match self.interior_pos[x.0] {
            Some(i) => self.second[ti][(i, i)].to_f64_lossy(),
            None => self.boundary_value(x).powi(2),
        }
    }

    fn boundary_value(&self, x: VertexId) -> f64 {
        self.boundary.iter().find(|(v, _)| *v == x.0).map(|(_, b)| b.to_f64_lossy()).unwrap_or(0.0)
    }
}

/// `m_{n+1} = c + P m_n` and
/// `U_{n+1} = c cᵀ + c (P m_n)ᵀ + (P m_n) cᵀ + P (U_n + β² dt U_n ∘ R) Pᵀ`
/// with `c = (I − P) h*`.
pub fn covariance_recursion_linear<T: Real>(model: &Model<T>, cfg: &SimConfig<T>) -> Result<LinearMoments<T>> {
    if !cfg.nonlinearity.is_linear() {
        return Err(Error::NonlinearOracle);
    }
    cfg.validate(model)?;
    let gen = &model.generator;
    let p = model.cache.step_matrix();
    let h = pinned_interior(model, cfg)?;
    let c = &h - p * &h;
    let noise = model.covariance.matrix() * (cfg.beta * cfg.beta * model.dt());
    let mut m = gen.restrict(&cfg.initial)?;
    let mut u = &m * m.transpose();
    let retained = cfg.retain.steps(cfg.steps);
    let mut out_m = Vec::with_capacity(retained.len());
    let mut out_u = Vec::with_capacity(retained.len());
    let mut next = 0;
    for n in 0..=cfg.steps {
        if retained.get(next) == Some(&n) {
            out_m.push(m.clone());
            out_u.push(u.clone());
            next += 1;
        }
        if n == cfg.steps {
            break;
        }
        let pm = p * &m;
        let inner = &u + u.component_mul(&noise);
        u = &c * c.transpose() + &c * pm.transpose() + &pm * c.transpose() + p * inner * p.transpose();
        m = &c + pm;
    }
    let mut interior_pos = vec![None; gen.n_vertices()];
    for (i, x) in gen.interior().iter().enumerate() {
        interior_pos[x.0] = Some(i);
    }
    let bvals = boundary_values(cfg);
    let boundary = gen.boundary().iter().zip(bvals).map(|(x, b)| (x.0, b)).collect();
    Ok(LinearMoments { dt: model.dt().to_f64_lossy(), steps: retained, mean: out_m, second: out_u, interior_pos, boundary })
}

/// Largest `|MC − exact|/SE` over a moment table, scored by [`z_score`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAgreement {
    pub max_z_mean: f64,
    pub max_z_second: f64,
    pub comparisons: usize,
}

impl OracleAgreement {
    pub fn max_z(&self) -> f64 {
        self.max_z_mean.max(self.max_z_second)
    }
}

pub fn compare_with_oracle<T: Real>(table: &MomentTable, oracle: &LinearMoments<T>) -> Result<OracleAgreement> {
    if table.steps != oracle.steps {
        return Err(Error::InvalidArgument("moment table and oracle retain different steps".into()));
    }
    let z = z_score;
    let mut agreement = OracleAgreement { max_z_mean: 0.0, max_z_second: 0.0, comparisons: 0 };
    for ti in 0..table.steps.len() {
        for (vi, &x) in table.vertices.iter().enumerate() {
            agreement.max_z_mean = agreement.max_z_mean.max(z(table.mean(ti, vi), oracle.mean_at(ti, x)));
            agreement.max_z_second = agreement.max_z_second.max(z(table.second_moment(ti, vi), oracle.second_at(ti, x)));
            agreement.comparisons += 2;
        }
    }
    Ok(agreement)
}

/// `1 − Σ_y p_T(x,y)`: mass lost to the boundary by time `T` (killed mode diagnostic).
pub fn truncation_error<T: Real>(model: &Model<T>, steps: usize) -> Vec<f64> {
    let k = model.generator.dim();
    let mut mass = DVector::from_element(k, T::one());
    let mut tmp = DVector::zeros(k);
    for _ in 0..steps {
        model.cache.step_matrix().mul_to(&mass, &mut tmp);
        std::mem::swap(&mut mass, &mut tmp);
    }
    mass.iter().map(|m| 1.0 - m.to_f64_lossy()).collect()
}

/// Observed convergence order from three successive refinements.
pub fn refinement_order(coarse: f64, mid: f64, fine: f64) -> f64 {
    ((coarse - mid).abs() / (mid - fine).abs()).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GraphSpace, DEFAULT_MAX_VERTICES};
    use crate::heat::apply_semigroup;
    use crate::noise::{sample_increments, CovarianceKind};
    use approx::assert_abs_diff_eq;

    fn path3(dt: f64) -> Model<f64> {
        Model::new(GraphSpace::path(3).unwrap(), CovarianceKind::White, dt).unwrap()
    }

    fn tree(r: usize, dt: f64) -> Model<f64> {
        Model::new(GraphSpace::regular_tree(2, r, DEFAULT_MAX_VERTICES).unwrap(), CovarianceKind::White, dt).unwrap()
    }

    #[test]
    fn nonlinearities() {
        assert_eq!(Nonlinearity::Linear.eval(2.5f64), 2.5);
        assert_abs_diff_eq!(Nonlinearity::Sine { a: 2.0 }.eval(1.0f64), 2.0 * 0.5f64.sin());
        assert_eq!(Nonlinearity::Clip { c: 1.0 }.eval(-3.0f64), -1.0);
        assert_eq!(Nonlinearity::Clip { c: 1.0 }.eval(0.5f64), 0.5);
        for f in [Nonlinearity::Linear, Nonlinearity::Sine { a: 0.3 }, Nonlinearity::Clip { c: 2.0 }] {
            f.validate(5.0).unwrap();
            assert_eq!(f.eval(0.0f64), 0.0);
        }
        assert!(Nonlinearity::Sine { a: 0.0 }.validate(1.0).is_err());
        assert!(Nonlinearity::Clip { c: -1.0 }.validate(1.0).is_err());
    }

    #[test]
    fn retention() {
        assert_eq!(Retention::Every(3).steps(7), vec![0, 3, 6, 7]);
        assert_eq!(Retention::Every(2).steps(4), vec![0, 2, 4]);
        assert_eq!(Retention::Endpoints.steps(5), vec![0, 5]);
        assert_eq!(Retention::All.steps(2), vec![0, 1, 2]);
    }

    #[test]
    fn harmonic_fixed_point_without_noise() {
        let m = tree(2, 0.1);
        let data: Vec<f64> = (0..m.generator.boundary().len()).map(|i| 1.0 + (i % 3) as f64).collect();
        let cfg = SimConfig::from_harmonic(&m, 0.0, data, 50).unwrap();
        let w = sample_increments(&m.covariance, 0.1, 50, SeedRecord::new(1, 0)).unwrap();
        let path = solve_path(&m, &cfg, &w).unwrap();
        for f in &path.fields {
            for (a, b) in f.iter().zip(&cfg.initial) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn zero_is_absorbing() {
        let m = tree(2, 0.1);
        let nb = m.generator.boundary().len();
        let mut cfg = SimConfig::from_harmonic(&m, 0.5, vec![0.0; nb], 30).unwrap();
        cfg.nonlinearity = Nonlinearity::Sine { a: 1.0 };
        let w = sample_increments(&m.covariance, 0.1, 30, SeedRecord::new(2, 0)).unwrap();
        let path = solve_path(&m, &cfg, &w).unwrap();
        assert!(path.fields.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_step_closed_form() {
        let m = path3(0.1);
        let h = 2.0;
        let mut cfg = SimConfig::from_harmonic(&m, 0.7, vec![h, h], 1).unwrap();
        let u0 = 3.5;
        cfg.initial[1] = u0;
        let dw = [0.3];
        let u1 = step(&m, &cfg, &cfg.initial, &dw).unwrap();
        let e = (-0.1f64).exp();
        assert_abs_diff_eq!(u1[1], h + e * (u0 - h) + 0.7 * e * u0 * 0.3, epsilon = 1e-14);
        assert_eq!((u1[0], u1[2]), (h, h));
    }

    #[test]
    fn deterministic_flow_matches_semigroup() {
        let m = tree(3, 0.05);
        let nb = m.generator.boundary().len();
        let data: Vec<f64> = (0..nb).map(|i| if i < nb / 3 { 1.0 } else { 0.2 }).collect();
        let mut cfg = SimConfig::from_harmonic(&m, 0.0, data, 40).unwrap();
        let hstar = cfg.initial.clone();
        for x in m.generator.interior() {
            cfg.initial[x.0] += 0.5 + 0.1 * x.0 as f64;
        }
        let w = sample_increments(&m.covariance, 0.05, 40, SeedRecord::new(3, 0)).unwrap();
        let end = solve_path(&m, &cfg, &w).unwrap().last().to_vec();
        let diff: Vec<f64> = cfg.initial.iter().zip(&hstar).map(|(a, b)| a - b).collect();
        let flowed = apply_semigroup(&m.generator, &m.cache, 40, &diff).unwrap();
        for x in m.generator.interior() {
            assert_abs_diff_eq!(end[x.0], hstar[x.0] + flowed[x.0], epsilon = 1e-12);
        }
        for x in m.generator.boundary() {
            assert_eq!(end[x.0], hstar[x.0]);
        }
    }

    #[test]
    fn boundary_stays_pinned_and_paths_are_reproducible() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let data: Vec<f64> = (0..nb).map(|i| 0.5 + i as f64 * 0.1).collect();
        let mut cfg = SimConfig::from_harmonic(&m, 0.8, data.clone(), 200).unwrap();
        cfg.nonlinearity = Nonlinearity::Clip { c: 1.0 };
        let w = sample_increments(&m.covariance, 0.05, 200, SeedRecord::new(4, 9)).unwrap();
        let a = solve_path(&m, &cfg, &w).unwrap();
        let b = solve_path(&m, &cfg, &sample_increments(&m.covariance, 0.05, 200, SeedRecord::new(4, 9)).unwrap()).unwrap();
        assert_eq!(a, b);
        for f in &a.fields {
            assert_eq!(m.generator.restrict_boundary(f).unwrap(), data);
        }
    }

    #[test]
    fn config_validation() {
        let m = path3(0.1);
        let cfg = SimConfig::from_harmonic(&m, 1.0, vec![1.0, 1.0], 10).unwrap();
        cfg.validate(&m).unwrap();
        let mut bad = cfg.clone();
        bad.initial[0] = 2.0;
        assert!(matches!(bad.validate(&m), Err(Error::BoundaryMismatch)));
        let mut bad = cfg.clone();
        bad.beta = 1.5;
        assert!(matches!(bad.validate(&m), Err(Error::Stability(_))));
        let m_fine = path3(0.01);
        let mut strong = SimConfig::from_harmonic(&m_fine, 1.5, vec![1.0, 1.0], 10).unwrap();
        assert!(matches!(strong.validate(&m_fine), Err(Error::StrongDisorder(_))));
        strong.allow_strong_disorder = true;
        strong.validate(&m_fine).unwrap();
        let mut nl = cfg.clone();
        nl.nonlinearity = Nonlinearity::Sine { a: 1.0 };
        assert!(matches!(covariance_recursion_linear(&m, &nl), Err(Error::NonlinearOracle)));
    }

    #[test]
    fn recursion_without_noise_is_outer_product() {
        let m = tree(2, 0.1);
        let nb = m.generator.boundary().len();
        let mut cfg = SimConfig::from_harmonic(&m, 0.0, vec![1.0; nb], 20).unwrap();
        for x in m.generator.interior() {
            cfg.initial[x.0] = 3.0 - x.0 as f64 * 0.2;
        }
        let rec = covariance_recursion_linear(&m, &cfg).unwrap();
        for (mean, second) in rec.mean.iter().zip(&rec.second) {
            let outer = mean * mean.transpose();
            assert!((second - outer).abs().max() < 1e-12);
        }
    }

    #[test]
    fn recursion_keeps_mean_harmonic() {
        let m = tree(3, 0.05);
        let nb = m.generator.boundary().len();
        let data: Vec<f64> = (0..nb).map(|i| (i % 4) as f64).collect();
        let cfg = SimConfig::from_harmonic(&m, 0.5, data, 100).unwrap();
        let rec = covariance_recursion_linear(&m, &cfg).unwrap();
        let h = m.generator.restrict(&cfg.initial).unwrap();
        for mean in &rec.mean {
            assert!((mean - &h).abs().max() < 1e-12);
        }
    }

    #[test]
    fn scalar_recursion_fixed_point() {
        // m2 = h² (1−a²)/(1−a²−a²β²dt) with a = e^{−dt}; tends to h²/(1−β²/2)
        for dt in [0.01, 0.002] {
            let m = path3(dt);
            let cfg = SimConfig::from_harmonic(&m, 1.0, vec![1.0, 1.0], m.steps_for(25.0)).unwrap();
            let rec = covariance_recursion_linear(&m, &cfg).unwrap();
            let a2 = (-2.0 * dt).exp();
            let fixed = (1.0 - a2) / (1.0 - a2 - a2 * dt);
            assert_abs_diff_eq!(rec.second.last().unwrap()[(0, 0)], fixed, epsilon = 1e-9);
            assert!((fixed - 2.0).abs() < 2.5 * dt);
        }
    }

    #[test]
    fn dt_refinement_order() {
        let horizon = 2.0;
        let values: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&dt| {
                let m = tree(2, dt);
                let nb = m.generator.boundary().len();
                let mut cfg = SimConfig::from_harmonic(&m, 0.9, vec![1.0; nb], m.steps_for(horizon)).unwrap();
                cfg.initial[0] += 1.0;
                cfg.retain = Retention::Endpoints;
                covariance_recursion_linear(&m, &cfg).unwrap().second.last().unwrap()[(0, 0)]
            })
            .collect();
        let order = refinement_order(values[0], values[1], values[2]);
        assert!(order >= 0.8, "observed order {order}");
    }

    #[test]
    fn monte_carlo_matches_recursion() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let mut cfg = SimConfig::from_harmonic(&m, 0.8, vec![1.0; nb], 60).unwrap();
        cfg.initial[0] = 1.5;
        cfg.replicas = 4000;
        cfg.retain = Retention::Every(20);
        cfg.observe = vec![VertexId(0), VertexId(1), VertexId(nb)];
        cfg.seed = 17;
        let table = second_moment_mc(&m, &cfg).unwrap();
        let oracle = covariance_recursion_linear(&m, &cfg).unwrap();
        let agreement = compare_with_oracle(&table, &oracle).unwrap();
        assert!(agreement.max_z() < 4.0, "{agreement:?}");
        // boundary observations are exact
        let last = table.steps.len() - 1;
        assert_eq!(table.mean(last, 2).value, 1.0);
        assert_eq!(table.mean(last, 2).se, Some(0.0));
    }

    #[test]
    fn mc_without_noise_is_exact() {
        let m = tree(2, 0.05);
        let nb = m.generator.boundary().len();
        let mut cfg = SimConfig::from_harmonic(&m, 0.0, vec![2.0; nb], 10).unwrap();
        cfg.replicas = 5;
        let table = second_moment_mc(&m, &cfg).unwrap();
        let sup = table.sup_second_moment().unwrap();
        assert_abs_diff_eq!(sup.value, 4.0, epsilon = 1e-12);
        assert!(sup.se.unwrap() < 1e-12);
    }

    #[test]
    fn killed_mode_truncation() {
        let m = path3(0.1);
        let mut cfg = SimConfig::from_harmonic(&m, 0.0, vec![1.0, 1.0], 10).unwrap();
        cfg.mode = BoundaryMode::Killed;
        cfg.initial = vec![0.0, 1.0, 0.0];
        let w = sample_increments(&m.covariance, 0.1, 10, SeedRecord::new(0, 0)).unwrap();
        let path = solve_path(&m, &cfg, &w).unwrap();
        assert_abs_diff_eq!(path.last()[1], (-1.0f64).exp(), epsilon = 1e-13);
        assert_eq!(path.last()[0], 0.0);
        assert_abs_diff_eq!(truncation_error(&m, 10)[0], 1.0 - (-1.0f64).exp(), epsilon = 1e-13);
    }

    #[test]
    fn f32_path() {
        let m = Model::<f32>::new(GraphSpace::path(5).unwrap(), CovarianceKind::White, 0.05).unwrap();
        let cfg = SimConfig::from_harmonic(&m, 0.3, vec![1.0, 2.0], 100).unwrap();
        let w = sample_increments(&m.covariance, 0.05, 100, SeedRecord::new(1, 0)).unwrap();
        let path = solve_path(&m, &cfg, &w).unwrap();
        assert!(path.last().iter().all(|v| v.is_finite()));
    }
}

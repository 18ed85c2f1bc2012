//! Spatial covariance kernels and space-time Gaussian increments.
//!
//! Noise lives on interior vertices, indexed by interior position as in
//! [`Generator`]. One increment `ΔW_n` is centered Gaussian with covariance
//! `dt·R`; the stochastic integral of a field `F` is `Σ_y F(y) ΔW_n(y) μ(y)`.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Automorphism, GraphSpace};
use crate::heat::Generator;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceKind {
    /// `R(y,y′) = 𝟙{y=y′}/μ(y)`.
    White,
    /// `R(y,y′) = c·(1+d(y,y′))^{-α}` with graph distance `d`.
    DistanceDecay { c: f64, alpha: f64 },
    /// Matrix over interior positions.
    Explicit { matrix: Vec<Vec<f64>> },
}

#[derive(Clone, Debug)]
pub struct CovarianceKernel<T: Real> {
    kind: CovarianceKind,
    matrix: DMatrix<T>,
    factor: DMatrix<T>,
    operator_norm: T,
    min_eigenvalue: f64,
}

impl<T: Real> CovarianceKernel<T> {
    pub fn kind(&self) -> &CovarianceKind {
        &self.kind
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// Symmetric square root `S` with `S·S = R`.
    pub fn factor(&self) -> &DMatrix<T> {
        &self.factor
    }

    /// Spectral norm `‖R‖₂`.
    pub fn operator_norm(&self) -> T {
        self.operator_norm
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn factor_residual(&self) -> f64 {
        (&self.factor * &self.factor - &self.matrix)
            .iter()
            .map(|v| v.abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Checks `R(a·y, a·y′) = R(y, y′)` over interior positions.
    pub fn check_invariant(&self, gen: &Generator<T>, a: &Automorphism) -> Result<()> {
        let perm = interior_permutation(gen, a)?;
        let scale = self.matrix.iter().map(|v| v.abs().to_f64_lossy()).fold(1.0, f64::max);
        let tol = T::tolerance(1e-12) * scale;
        let k = self.dim();
        for i in 0..k {
            for j in 0..k {
                let d = (self.matrix[(perm[i], perm[j])] - self.matrix[(i, j)]).abs().to_f64_lossy();
                if d > tol {
                    return Err(Error::NotInvariant(gen.interior()[i].0, gen.interior()[j].0));
                }
            }
        }
        Ok(())
    }
}

/// Interior positions permuted by `a`: `perm[i]` is the position of `a(x_i)`.
pub(crate) fn interior_permutation<T: Real>(gen: &Generator<T>, a: &Automorphism) -> Result<Vec<usize>> {
    if a.len() != gen.n_vertices() {
        return Err(Error::Dimension { expected: gen.n_vertices(), got: a.len() });
    }
    gen.interior()
        .iter()
        .map(|&x| {
            gen.interior_index(a.apply(x))
                .ok_or_else(|| Error::Graph(format!("automorphism maps interior vertex {x} to the boundary")))
        })
        .collect()
}

pub fn build_covariance<T: Real>(
    g: &GraphSpace<T>,
    gen: &Generator<T>,
    kind: CovarianceKind,
) -> Result<CovarianceKernel<T>> {
    let interior = gen.interior();
    let k = interior.len();
    let matrix = match &kind {
        CovarianceKind::White => {
            DMatrix::from_fn(k, k, |i, j| if i == j { T::one() / gen.measure()[i] } else { T::zero() })
        }
        CovarianceKind::DistanceDecay { c, alpha } => {
            if !(*c > 0.0 && *alpha > 0.0 && c.is_finite() && alpha.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "distance decay needs c > 0 and alpha > 0, got c={c}, alpha={alpha}"
                )));
            }
            let mut m = DMatrix::zeros(k, k);
            for (i, &x) in interior.iter().enumerate() {
                let dist = g.distances_from(x);
                for (j, &y) in interior.iter().enumerate() {
                    let d = dist[y.0].ok_or_else(|| Error::Graph(format!("{x} and {y} are disconnected")))?;
                    m[(i, j)] = T::lit(c * (1.0 + d as f64).powf(-alpha));
                }
            }
            m
        }
        CovarianceKind::Explicit { matrix } => {
            if matrix.len() != k || matrix.iter().any(|row| row.len() != k) {
                return Err(Error::Dimension { expected: k, got: matrix.len() });
            }
            if matrix.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("covariance matrix has non-finite entries".into()));
            }
            let m = DMatrix::from_fn(k, k, |i, j| T::lit(matrix[i][j]));
            let asym = (0..k)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs().to_f64_lossy())
                .fold(0.0, f64::max);
            let scale = m.iter().map(|v| v.abs().to_f64_lossy()).fold(0.0, f64::max);
            if asym > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidArgument(format!("covariance matrix is not symmetric (defect {asym:.3e})")));
            }
            m
        }
    };
    let (factor, operator_norm, min_eigenvalue) = symmetric_sqrt(&matrix)?;
    Ok(CovarianceKernel { kind, matrix, factor, operator_norm, min_eigenvalue })
}

/// Symmetric eigen square root with clamping of roundoff-negative modes.
fn symmetric_sqrt<T: Real>(m: &DMatrix<T>) -> Result<(DMatrix<T>, T, f64)> {
    let k = m.nrows();
    let sym = DMatrix::from_fn(k, k, |i, j| (m[(i, j)] + m[(j, i)]) * T::lit(0.5));
    let eig = sym.symmetric_eigen();
    let norm = eig.eigenvalues.iter().map(|v| v.abs()).fold(T::zero(), |a, b| a.max(b));
    let min = eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b));
    let min_f = min.to_f64_lossy();
    if min_f < -1e-10 * norm.to_f64_lossy() {
        return Err(Error::NotPsd { min_eigenvalue: min_f });
    }
    let roots = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
    let q = &eig.eigenvectors;
    let factor = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((factor, norm, min_f))
}

/// Identifies one stream of noise: a master seed and a stream id (replica).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master_seed: u64,
    pub stream: u64,
}

impl SeedRecord {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        SeedRecord { master_seed, stream }
    }
}

/// Counter-keyed generator: the normals for step `n` depend only on
/// `(master_seed, stream, n)` and the vertex position.
#[derive(Clone, Debug)]
pub struct NoiseSource<T: Real> {
    seed: SeedRecord,
    dt: T,
    sqrt_dt: T,
    factor: DMatrix<T>,
    white_scale: Option<DVector<T>>,
    rng: ChaCha8Rng,
    normals: DVector<T>,
}

/// ChaCha words reserved per step.
const WORDS_PER_STEP_LOG2: u32 = 32;
const STEP_OFFSET: i64 = 1 << 31;

impl<T: Real> NoiseSource<T> {
    pub fn new(kernel: &CovarianceKernel<T>, dt: T, seed: SeedRecord) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.master_seed);
        rng.set_stream(seed.stream);
        let k = kernel.dim();
        // diagonal kernels skip the dense factor
        let is_diagonal = (0..k).all(|i| (0..k).all(|j| i == j || kernel.matrix[(i, j)] == T::zero()));
        let white_scale = is_diagonal.then(|| DVector::from_fn(k, |i, _| kernel.factor[(i, i)]));
        Ok(NoiseSource {
            seed,
            dt,
            sqrt_dt: dt.sqrt(),
            factor: kernel.factor.clone(),
            white_scale,
            rng,
            normals: DVector::zeros(k),
        })
    }

    pub fn seed(&self) -> SeedRecord {
        self.seed
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.normals.len()
    }

    /// Writes `ΔW_step` into `out`. Steps may be negative (remote past).
    pub fn increment(&mut self, step: i64, out: &mut DVector<T>) {
        assert!((-STEP_OFFSET..STEP_OFFSET).contains(&step), "step index {step} out of range");
        let counter = ((step + STEP_OFFSET) as u128) << WORDS_PER_STEP_LOG2;
        self.rng.set_word_pos(counter);
        for z in self.normals.iter_mut() {
            let v: f64 = StandardNormal.sample(&mut self.rng);
            *z = T::lit(v);
        }
        match &self.white_scale {
            Some(s) => {
                for i in 0..out.len() {
                    out[i] = self.sqrt_dt * s[i] * self.normals[i];
                }
            }
            None => {
                self.factor.mul_to(&self.normals, out);
                *out *= self.sqrt_dt;
            }
        }
    }
}

/// Materialized increments for steps `start, start+1, …`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrements<T: Real> {
    dt: T,
    start_step: i64,
    values: DMatrix<T>,
    seed: Option<SeedRecord>,
}

impl<T: Real> NoiseIncrements<T> {
    /// Wraps given increments (columns are steps).
    pub fn from_matrix(dt: T, start_step: i64, values: DMatrix<T>) -> Self {
        NoiseIncrements { dt, start_step, values, seed: None }
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn start_step(&self) -> i64 {
        self.start_step
    }

    pub fn seed(&self) -> Option<SeedRecord> {
        self.seed
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    /// `ΔW` for the `n`-th stored step.
    pub fn step(&self, n: usize) -> DVectorView<'_, T> {
        self.values.column(n)
    }

    /// Sub-window of `steps` columns starting at stored column `offset`.
    pub fn window(&self, offset: usize, steps: usize) -> NoiseIncrements<T> {
        NoiseIncrements {
            dt: self.dt,
            start_step: self.start_step + offset as i64,
            values: self.values.columns(offset, steps).into_owned(),
            seed: self.seed,
        }
    }
}

/// Samples `steps` increments starting at step 0.
pub fn sample_increments<T: Real>(
    kernel: &CovarianceKernel<T>,
    dt: T,
    steps: usize,
    seed: SeedRecord,
) -> Result<NoiseIncrements<T>> {
    sample_window(kernel, dt, 0, steps, seed)
}

/// Samples increments for steps `start .. start+steps` (start may be negative).
pub fn sample_window<T: Real>(
    kernel: &CovarianceKernel<T>,
    dt: T,
    start: i64,
    steps: usize,
    seed: SeedRecord,
) -> Result<NoiseIncrements<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one noise step is required".into()));
    }
    let mut src = NoiseSource::new(kernel, dt, seed)?;
    let k = kernel.dim();
    let mut values = DMatrix::zeros(k, steps);
    let mut buf = DVector::zeros(k);
    for n in 0..steps {
        src.increment(start + n as i64, &mut buf);
        values.set_column(n, &buf);
    }
    Ok(NoiseIncrements { dt, start_step: start, values, seed: Some(seed) })
}

/// Transported noise `(W^a)_n(y) = ΔW_n(a⁻¹·y)`.
///
/// Requires `R` to be `a`-invariant so that the law is unchanged.
pub fn transform_noise<T: Real>(
    w: &NoiseIncrements<T>,
    kernel: &CovarianceKernel<T>,
    gen: &Generator<T>,
    a: &Automorphism,
) -> Result<NoiseIncrements<T>> {
    if w.dim() != kernel.dim() {
        return Err(Error::Dimension { expected: kernel.dim(), got: w.dim() });
    }
    kernel.check_invariant(gen, a)?;
    let perm = interior_permutation(gen, a)?;
    let mut values = DMatrix::zeros(w.dim(), w.steps());
    for (i, &p) in perm.iter().enumerate() {
        values.row_mut(p).copy_from(&w.values.row(i));
    }
    Ok(NoiseIncrements { dt: w.dt, start_step: w.start_step, values, seed: w.seed })
}

/// Discrete 𝓗_R inner product `Σ_n dt Σ_{y,y′} F_n(y) R(y,y′) F̃_n(y′) μ(y)μ(y′)`.
///
/// Columns of `f` and `g` are time steps over interior positions.
pub fn ito_walsh_quadrature<T: Real>(
    f: &DMatrix<T>,
    g: &DMatrix<T>,
    kernel: &CovarianceKernel<T>,
    measure: &DVector<T>,
    dt: T,
) -> Result<T> {
    if f.shape() != g.shape() {
        return Err(Error::InvalidArgument(format!("grid mismatch: {:?} vs {:?}", f.shape(), g.shape())));
    }
    if f.nrows() != kernel.dim() || measure.len() != kernel.dim() {
        return Err(Error::Dimension { expected: kernel.dim(), got: f.nrows() });
    }
    let weighted = DMatrix::from_fn(f.nrows(), f.nrows(), |i, j| kernel.matrix[(i, j)] * measure[i] * measure[j]);
    let rg = &weighted * g;
    Ok(f.component_mul(&rg).sum() * dt)
}

/// Discrete stochastic integral `Σ_n Σ_y F_n(y) ΔW_n(y) μ(y)`.
pub fn walsh_integral<T: Real>(f: &DMatrix<T>, w: &NoiseIncrements<T>, measure: &DVector<T>) -> Result<T> {
    if f.shape() != w.values.shape() {
        return Err(Error::InvalidArgument(format!("grid mismatch: {:?} vs {:?}", f.shape(), w.values.shape())));
    }
    let mut total = T::zero();
    for n in 0..f.ncols() {
        for y in 0..f.nrows() {
            total += f[(y, n)] * w.values[(y, n)] * measure[y];
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{tree_automorphism, DEFAULT_MAX_VERTICES};
    use crate::heat::build_generator;
    use crate::stats::run_replicas;
    use approx::assert_abs_diff_eq;

    fn setup(g: &GraphSpace<f64>) -> Generator<f64> {
        build_generator(g).unwrap()
    }

    #[test]
    fn white_on_counting_measure_is_identity() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        assert_eq!(r.matrix(), &DMatrix::identity(3, 3));
        assert_eq!(r.factor(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn white_uses_inverse_measure() {
        let g = GraphSpace::<f64>::regular_tree(2, 2, DEFAULT_MAX_VERTICES).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        for i in 0..gen.dim() {
            assert_abs_diff_eq!(r.matrix()[(i, i)] * gen.measure()[i], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn distance_decay_on_path() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::DistanceDecay { c: 1.0, alpha: 2.0 }).unwrap();
        assert_abs_diff_eq!(r.matrix()[(0, 2)], 1.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.matrix()[(0, 1)], 0.25, epsilon = 1e-15);
        for i in 0..3 {
            assert_eq!(r.matrix()[(i, i)], 1.0);
        }
        // eigenvalue oracle: (1,0,−1) gives 1−b; the symmetric block
        // [[1+b, √2a], [√2a, 1]] gives (2+b ± √(b²+8a²))/2
        let (a, b) = (0.25f64, 1.0 / 9.0);
        let low = ((2.0 + b) - (b * b + 8.0 * a * a).sqrt()) / 2.0;
        assert_abs_diff_eq!(r.min_eigenvalue(), low.min(1.0 - b), epsilon = 1e-12);
        assert!(r.min_eigenvalue() > 0.0);
        assert!(r.factor_residual() < 1e-10);
    }

    #[test]
    fn explicit_non_psd_is_rejected() {
        let g = GraphSpace::<f64>::path(4).unwrap();
        let gen = setup(&g);
        let bad = CovarianceKind::Explicit { matrix: vec![vec![1.0, 2.0], vec![2.0, 1.0]] };
        match build_covariance(&g, &gen, bad) {
            Err(Error::NotPsd { min_eigenvalue }) => assert_abs_diff_eq!(min_eigenvalue, -1.0, epsilon = 1e-12),
            other => panic!("expected NotPsd, got {other:?}"),
        }
        let singular = CovarianceKind::Explicit { matrix: vec![vec![1.0, 1.0], vec![1.0, 1.0]] };
        let r = build_covariance(&g, &gen, singular).unwrap();
        assert!(r.factor_residual() < 1e-10);
        let bad_params = CovarianceKind::DistanceDecay { c: 1.0, alpha: 0.0 };
        assert!(build_covariance(&g, &gen, bad_params).is_err());
    }

    #[test]
    fn zero_steps_is_an_error() {
        let g = GraphSpace::<f64>::path(3).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        assert!(sample_increments(&r, 0.1, 0, SeedRecord::new(1, 0)).is_err());
        assert!(sample_increments(&r, 0.0, 5, SeedRecord::new(1, 0)).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_counter_keyed() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::DistanceDecay { c: 1.0, alpha: 1.0 }).unwrap();
        let seed = SeedRecord::new(42, 3);
        let a = sample_increments(&r, 0.1, 50, seed).unwrap();
        let b = sample_increments(&r, 0.1, 50, seed).unwrap();
        assert_eq!(a, b);
        // a window starting later reproduces the same steps
        let w = sample_window(&r, 0.1, 10, 5, seed).unwrap();
        assert_eq!(w.values(), &a.values().columns(10, 5).into_owned());
        assert_eq!(a.window(10, 5).values(), w.values());
        let other = sample_increments(&r, 0.1, 50, SeedRecord::new(42, 4)).unwrap();
        assert_ne!(a.values(), other.values());
    }

    #[test]
    fn white_sample_variance() {
        let g = GraphSpace::<f64>::path(3).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        let n = 100_000;
        let w = sample_increments(&r, 0.1, n, SeedRecord::new(7, 0)).unwrap();
        let var = w.values().iter().map(|v| v * v).sum::<f64>() / n as f64;
        // chi-square: SE of the sample variance of N(0, σ²) is σ²·√(2/n)
        let se = 0.1 * (2.0 / n as f64).sqrt();
        assert!((var - 0.1).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn colored_sample_covariance() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::DistanceDecay { c: 1.0, alpha: 2.0 }).unwrap();
        let n = 100_000;
        let w = sample_increments(&r, 0.5, n, SeedRecord::new(8, 0)).unwrap();
        let cov = w.values() * w.values().transpose() / n as f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = 0.5 * r.matrix()[(i, j)];
                let se = 0.5 * ((r.matrix()[(i, i)] * r.matrix()[(j, j)] + r.matrix()[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov[(i, j)] - target).abs() < 4.0 * se, "({i},{j}) {} vs {target}", cov[(i, j)]);
            }
        }
    }

    #[test]
    fn transform_round_trip() {
        let g = GraphSpace::<f64>::regular_tree(2, 2, DEFAULT_MAX_VERTICES).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        let w = sample_increments(&r, 0.1, 20, SeedRecord::new(1, 1)).unwrap();
        let id = Automorphism::identity(g.n_vertices());
        assert_eq!(transform_noise(&w, &r, &gen, &id).unwrap(), w);
        let a = tree_automorphism(&g, (0, 1)).unwrap();
        let wa = transform_noise(&w, &r, &gen, &a).unwrap();
        assert_ne!(wa, w);
        let back = transform_noise(&wa, &r, &gen, &a.inverse()).unwrap();
        assert_eq!(back, w);
        // (W^a)(a·y) = W(y)
        for (i, &x) in gen.interior().iter().enumerate() {
            let j = gen.interior_index(a.apply(x)).unwrap();
            assert_eq!(wa.values().row(j), w.values().row(i));
        }
    }

    #[test]
    fn transform_rejects_non_invariant_kernel() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let m = vec![vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let r = build_covariance(&g, &gen, CovarianceKind::Explicit { matrix: m }).unwrap();
        let reflect = Automorphism::new(&g, vec![4, 3, 2, 1, 0]).unwrap();
        let w = sample_increments(&r, 0.1, 3, SeedRecord::new(0, 0)).unwrap();
        assert!(matches!(transform_noise(&w, &r, &gen, &reflect), Err(Error::NotInvariant(_, _))));
    }

    #[test]
    fn quadrature_examples() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        let zero = DMatrix::zeros(3, 4);
        assert_eq!(ito_walsh_quadrature(&zero, &zero, &r, gen.measure(), 0.1).unwrap(), 0.0);
        let mut one = DMatrix::zeros(3, 4);
        one[(1, 2)] = 1.0;
        assert_abs_diff_eq!(ito_walsh_quadrature(&one, &one, &r, gen.measure(), 0.1).unwrap(), 0.1, epsilon = 1e-16);
        assert!(ito_walsh_quadrature(&one, &DMatrix::zeros(3, 5), &r, gen.measure(), 0.1).is_err());
    }

    #[test]
    fn monte_carlo_isometry() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let gen = setup(&g);
        let r = build_covariance(&g, &gen, CovarianceKind::DistanceDecay { c: 1.0, alpha: 1.5 }).unwrap();
        let (dt, steps) = (0.05, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DMatrix::from_fn(3, steps, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let exact = ito_walsh_quadrature(&f, &f, &r, gen.measure(), dt).unwrap();
        let replicas = 10_000;
        let acc = run_replicas(replicas, 1, false, |rep, out| {
            let w = sample_increments(&r, dt, steps, SeedRecord::new(11, rep))?;
            out[0] = walsh_integral(&f, &w, gen.measure())?;
            Ok(())
        })
        .unwrap();
        let var = acc.variance(0).unwrap();
        let se = exact * (2.0 / (replicas - 1) as f64).sqrt();
        assert!((var - exact).abs() < 3.0 * se, "{var} vs {exact}");
        assert!(acc.mean(0).abs() < 3.0 * (exact / replicas as f64).sqrt());
    }

    #[test]
    fn f32_sampling() {
        let g = GraphSpace::<f32>::path(5).unwrap();
        let gen = build_generator(&g).unwrap();
        let r = build_covariance(&g, &gen, CovarianceKind::White).unwrap();
        let w = sample_increments(&r, 0.1f32, 10, SeedRecord::new(1, 0)).unwrap();
        assert!(w.values().iter().all(|v| v.is_finite()));
    }
}

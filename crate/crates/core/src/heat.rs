//! Killed generator, heat semigroup and Green matrix.
//!
//! The generator is the continuous-time random walk with unit total jump
//! rate, `L⁰(x,y) = w(x,y)/W(x)` between interior vertices and
//! `L⁰(x,x) = -1`. Jumps into boundary vertices are absorbed, so rows next to
//! the boundary lose mass. Kernel matrices are stored in operator form
//! `P_t(x,y) = p_t(x,y)·μ(y)`, i.e. `(P_t φ)(x) = Σ_y P_t(x,y) φ(y)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GraphSpace, VertexId};
use crate::scalar::{unit_roundoff, Real};

/// Killed generator restricted to the interior.
#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    n_vertices: usize,
    interior: Vec<VertexId>,
    boundary: Vec<VertexId>,
    interior_pos: Vec<Option<usize>>,
    boundary_pos: Vec<Option<usize>>,
    killed: DMatrix<T>,
    boundary_coupling: DMatrix<T>,
    measure: DVector<T>,
    rate: T,
}

/// Builds the killed generator with unit jump rate.
pub fn build_generator<T: Real>(g: &GraphSpace<T>) -> Result<Generator<T>> {
    Generator::new(g, T::one())
}

impl<T: Real> Generator<T> {
    /// Builds the killed generator with total jump rate `rate` (a time change).
    pub fn new(g: &GraphSpace<T>, rate: T) -> Result<Self> {
        if !(rate > T::zero()) {
            return Err(Error::InvalidArgument(format!("jump rate must be positive, got {rate}")));
        }
        let interior = g.interior_vertices();
        let boundary = g.boundary_vertices();
        if interior.is_empty() {
            return Err(Error::Graph("generator needs a nonempty interior".into()));
        }
        let n = g.n_vertices();
        let mut interior_pos = vec![None; n];
        let mut boundary_pos = vec![None; n];
        for (i, x) in interior.iter().enumerate() {
            interior_pos[x.0] = Some(i);
        }
        for (i, x) in boundary.iter().enumerate() {
            boundary_pos[x.0] = Some(i);
        }
        let k = interior.len();
        let mut killed = DMatrix::zeros(k, k);
        let mut boundary_coupling = DMatrix::zeros(k, boundary.len());
        for (i, &x) in interior.iter().enumerate() {
            let total = g.total_weight(x);
            if !(total > T::zero()) {
                return Err(Error::Graph(format!("isolated interior vertex {x}")));
            }
            killed[(i, i)] = -rate;
            for &(y, w) in g.neighbors(x) {
                let entry = rate * w / total;
                match (interior_pos[y], boundary_pos[y]) {
                    (Some(j), _) => killed[(i, j)] += entry,
                    (_, Some(j)) => boundary_coupling[(i, j)] += entry,
                    _ => unreachable!(),
                }
            }
        }
        let measure = DVector::from_iterator(k, interior.iter().map(|&x| g.measure(x)));
        let gen = Generator {
            n_vertices: n,
            interior,
            boundary,
            interior_pos,
            boundary_pos,
            killed,
            boundary_coupling,
            measure,
            rate,
        };
        let asym = gen.symmetry_residual();
        let bound = T::tolerance(1e-12);
        if asym > bound {
            return Err(Error::Graph(format!(
                "generator is not μ-symmetric (residual {asym:.3e}); choose μ proportional to the total edge weight"
            )));
        }
        Ok(gen)
    }

    /// The interior block `L⁰`.
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.killed
    }

    /// Jump rates from interior vertices into boundary vertices.
    pub fn boundary_coupling(&self) -> &DMatrix<T> {
        &self.boundary_coupling
    }

    pub fn rate(&self) -> T {
        self.rate
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn dim(&self) -> usize {
        self.interior.len()
    }

    pub fn interior(&self) -> &[VertexId] {
        &self.interior
    }

    pub fn boundary(&self) -> &[VertexId] {
        &self.boundary
    }

    pub fn interior_index(&self, x: VertexId) -> Option<usize> {
        self.interior_pos[x.0]
    }

    pub fn boundary_index(&self, x: VertexId) -> Option<usize> {
        self.boundary_pos[x.0]
    }

    /// μ restricted to the interior.
    pub fn measure(&self) -> &DVector<T> {
        &self.measure
    }

    /// max |μ(x)L⁰(x,y) − μ(y)L⁰(y,x)|.
    pub fn symmetry_residual(&self) -> f64 {
        let k = self.dim();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..i {
                let a = self.measure[i] * self.killed[(i, j)];
                let b = self.measure[j] * self.killed[(j, i)];
                worst = worst.max((a - b).abs().to_f64_lossy());
            }
        }
        worst
    }

    /// Restriction of a full vertex field to the interior.
    pub fn restrict(&self, field: &[T]) -> Result<DVector<T>> {
        if field.len() != self.n_vertices {
            return Err(Error::Dimension { expected: self.n_vertices, got: field.len() });
        }
        Ok(DVector::from_iterator(self.dim(), self.interior.iter().map(|x| field[x.0])))
    }

    /// Restriction of a full vertex field to the boundary.
    pub fn restrict_boundary(&self, field: &[T]) -> Result<Vec<T>> {
        if field.len() != self.n_vertices {
            return Err(Error::Dimension { expected: self.n_vertices, got: field.len() });
        }
        Ok(self.boundary.iter().map(|x| field[x.0]).collect())
    }

    /// Assembles a full vertex field from interior and boundary parts.
    pub fn assemble(&self, interior: &DVector<T>, boundary: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_vertices];
        for (i, x) in self.interior.iter().enumerate() {
            out[x.0] = interior[i];
        }
        for (i, x) in self.boundary.iter().enumerate() {
            out[x.0] = boundary[i];
        }
        out
    }

    /// Symmetric similarity transform `D^{1/2} L⁰ D^{-1/2}`.
    fn symmetrized(&self) -> DMatrix<T> {
        let k = self.dim();
        let sq: Vec<T> = self.measure.iter().map(|m| m.sqrt()).collect();
        let mut s = DMatrix::from_fn(k, k, |i, j| sq[i] * self.killed[(i, j)] / sq[j]);
        // symmetrize away roundoff so the eigensolver sees an exactly symmetric matrix
        for i in 0..k {
            for j in 0..i {
                let avg = (s[(i, j)] + s[(j, i)]) * T::lit(0.5);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }

    /// Eigendecomposition of the killed generator.
    pub fn spectral(&self) -> Spectral<T> {
        let eig = self.symmetrized().symmetric_eigen();
        let sq_inv: Vec<T> = self.measure.iter().map(|m| T::one() / m.sqrt()).collect();
        Spectral {
            eigenvalues: eig.eigenvalues,
            orthonormal: eig.eigenvectors,
            sqrt_measure: self.measure.map(|m| m.sqrt()),
            inv_sqrt_measure: DVector::from_vec(sq_inv),
        }
    }

    /// Smallest eigenvalue of `-L⁰`; zero (up to roundoff) without killing.
    pub fn spectral_gap(&self) -> T {
        self.spectral().gap()
    }
}

/// Spectral decomposition `L⁰ = D^{-1/2} U Λ Uᵀ D^{1/2}`.
///
/// Columns of `D^{-1/2} U` are orthonormal in the μ-weighted inner product.
#[derive(Clone, Debug)]
pub struct Spectral<T: Real> {
    pub eigenvalues: DVector<T>,
    orthonormal: DMatrix<T>,
    sqrt_measure: DVector<T>,
    inv_sqrt_measure: DVector<T>,
}

impl<T: Real> Spectral<T> {
    pub fn gap(&self) -> T {
        -self.eigenvalues.max()
    }

    /// Eigenvectors orthonormal in the μ-weighted inner product.
    pub fn eigenvectors(&self) -> DMatrix<T> {
        let mut v = self.orthonormal.clone();
        for (i, mut row) in v.row_iter_mut().enumerate() {
            row *= self.inv_sqrt_measure[i];
        }
        v
    }

    /// `f(L⁰)` for a scalar function `f` applied to eigenvalues.
    pub fn function(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        let k = self.eigenvalues.len();
        let mut scaled = self.orthonormal.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.eigenvalues[j]);
        }
        let mut out = &scaled * self.orthonormal.transpose();
        for i in 0..k {
            for j in 0..k {
                out[(i, j)] = out[(i, j)] * self.inv_sqrt_measure[i] * self.sqrt_measure[j];
            }
        }
        out
    }

    /// `exp(t·L⁰)`.
    pub fn exp(&self, t: T) -> DMatrix<T> {
        self.function(|lambda| (lambda * t).exp())
    }
}

/// How the matrix exponential is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpMethod {
    /// Symmetric eigendecomposition (falls back to Padé when its certificate fails).
    #[default]
    Spectral,
    /// Padé scaling and squaring.
    Pade,
}

/// Per-step kernel for a fixed time step, certified by the semigroup identity.
#[derive(Clone, Debug)]
pub struct HeatKernelCache<T: Real> {
    dt: T,
    step: DMatrix<T>,
    spectral: Spectral<T>,
    method: ExpMethod,
    semigroup_residual: f64,
}

/// Semigroup certificate `‖P_{t/2}·P_{t/2} − P_t‖_max ≤ 10·u·|V|`.
fn semigroup_bound<T: Real>(n_vertices: usize) -> f64 {
    10.0 * unit_roundoff::<T>() * n_vertices as f64
}

fn max_abs_diff<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().to_f64_lossy())
        .fold(0.0, f64::max)
}

/// Clears roundoff-scale negative entries; larger negatives are an accuracy failure.
fn clamp_nonnegative<T: Real>(m: &mut DMatrix<T>, bound: f64) -> Result<()> {
    for v in m.iter_mut() {
        if *v < T::zero() {
            let mag = v.abs().to_f64_lossy();
            if mag > bound {
                return Err(Error::Accuracy { what: "kernel positivity", achieved: mag, bound });
            }
            *v = T::zero();
        }
    }
    Ok(())
}

fn kernel_with<T: Real>(
    gen: &Generator<T>,
    spectral: &Spectral<T>,
    method: ExpMethod,
    t: T,
) -> Result<(DMatrix<T>, f64)> {
    let eval = |s: T| match method {
        ExpMethod::Spectral => spectral.exp(s),
        ExpMethod::Pade => (gen.matrix() * s).exp(),
    };
    let full = eval(t);
    let half = eval(t * T::lit(0.5));
    let residual = max_abs_diff(&(&half * &half), &full);
    Ok((full, residual))
}

/// `p_t = exp(t·L⁰)` in operator form.
///
/// Uses the spectral decomposition, falling back to Padé scaling and
/// squaring when the semigroup certificate fails.
pub fn heat_kernel<T: Real>(gen: &Generator<T>, t: T) -> Result<DMatrix<T>> {
    if t < T::zero() || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("heat kernel needs t ≥ 0, got {t}")));
    }
    let k = gen.dim();
    if t == T::zero() {
        return Ok(DMatrix::identity(k, k));
    }
    let spectral = gen.spectral();
    let bound = semigroup_bound::<T>(gen.n_vertices());
    let mut last = 0.0;
    for method in [ExpMethod::Spectral, ExpMethod::Pade] {
        let (mut p, residual) = kernel_with(gen, &spectral, method, t)?;
        if residual <= bound {
            clamp_nonnegative(&mut p, bound)?;
            return Ok(p);
        }
        last = residual;
    }
    Err(Error::Accuracy { what: "heat kernel semigroup", achieved: last, bound })
}

impl<T: Real> HeatKernelCache<T> {
    pub fn new(gen: &Generator<T>, dt: T) -> Result<Self> {
        Self::with_method(gen, dt, ExpMethod::Spectral)
    }

    pub fn with_method(gen: &Generator<T>, dt: T, preferred: ExpMethod) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let spectral = gen.spectral();
        let bound = semigroup_bound::<T>(gen.n_vertices());
        let order = match preferred {
            ExpMethod::Spectral => [ExpMethod::Spectral, ExpMethod::Pade],
            ExpMethod::Pade => [ExpMethod::Pade, ExpMethod::Spectral],
        };
        let mut last = 0.0;
        for method in order {
            // certify P_dt·P_dt = P_2dt
            let (p2, _) = kernel_with(gen, &spectral, method, dt * T::lit(2.0))?;
            let (mut step, _) = kernel_with(gen, &spectral, method, dt)?;
            let residual = max_abs_diff(&(&step * &step), &p2);
            if residual <= bound {
                clamp_nonnegative(&mut step, bound)?;
                if method != preferred {
                    log::warn!("exponential certificate failed for {preferred:?}; using {method:?}");
                }
                return Ok(HeatKernelCache { dt, step, spectral, method, semigroup_residual: residual });
            }
            last = residual;
        }
        Err(Error::Accuracy { what: "heat kernel semigroup", achieved: last, bound })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// `P_dt` in operator form.
    pub fn step_matrix(&self) -> &DMatrix<T> {
        &self.step
    }

    pub fn spectral(&self) -> &Spectral<T> {
        &self.spectral
    }

    pub fn method(&self) -> ExpMethod {
        self.method
    }

    pub fn semigroup_residual(&self) -> f64 {
        self.semigroup_residual
    }

    pub fn gap(&self) -> T {
        self.spectral.gap()
    }

    pub fn dim(&self) -> usize {
        self.step.nrows()
    }

    /// `P_{n·dt}` by repeated multiplication.
    pub fn power(&self, n: usize) -> DMatrix<T> {
        let k = self.dim();
        let mut out = DMatrix::identity(k, k);
        for _ in 0..n {
            out = &self.step * out;
        }
        out
    }
}

/// Applies `P_{n·dt}` to the interior restriction of a full vertex field.
///
/// The killed semigroup does not see boundary values; boundary entries of
/// the result are zero. Pinned boundary data is handled by the solver.
pub fn apply_semigroup<T: Real>(
    gen: &Generator<T>,
    cache: &HeatKernelCache<T>,
    n_steps: usize,
    field: &[T],
) -> Result<Vec<T>> {
    let mut x = gen.restrict(field)?;
    let mut y = DVector::zeros(x.len());
    for _ in 0..n_steps {
        cache.step_matrix().mul_to(&x, &mut y);
        std::mem::swap(&mut x, &mut y);
    }
    Ok(gen.assemble(&x, &vec![T::zero(); gen.boundary().len()]))
}

/// Green matrix `G = (−L⁰)^{-1}` in operator form.
#[derive(Clone, Debug)]
pub struct GreenMatrix<T: Real> {
    matrix: DMatrix<T>,
    base: VertexId,
    base_index: usize,
    residual: f64,
}

impl<T: Real> GreenMatrix<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn base(&self) -> VertexId {
        self.base
    }

    pub fn base_index(&self) -> usize {
        self.base_index
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Entry by interior positions.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.matrix[(i, j)]
    }
}

/// Direct solve for `G = (−L⁰)^{-1}` with a certified residual.
///
/// The base point is the graph root.
pub fn green_function<T: Real>(gen: &Generator<T>, base: VertexId) -> Result<GreenMatrix<T>> {
    let base_index = gen
        .interior_index(base)
        .ok_or_else(|| Error::InvalidArgument(format!("base point {base} is not interior")))?;
    let neg = -gen.matrix().clone();
    let k = gen.dim();
    let g = neg
        .clone()
        .lu()
        .solve(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Singular("−L⁰ is singular (no absorbing boundary?)".into()))?;
    let residual = max_abs_diff(&(&neg * &g), &DMatrix::identity(k, k));
    let bound = T::tolerance(1e-10);
    if residual > bound || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("Green residual {residual:.3e} exceeds {bound:.1e}")));
    }
    Ok(GreenMatrix { matrix: g, base, base_index, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_MAX_VERTICES;
    use approx::assert_abs_diff_eq;

    fn path(n: usize) -> (GraphSpace<f64>, Generator<f64>) {
        let g = GraphSpace::path(n).unwrap();
        let gen = build_generator(&g).unwrap();
        (g, gen)
    }

    fn tree(q: usize, r: usize) -> (GraphSpace<f64>, Generator<f64>) {
        let g = GraphSpace::regular_tree(q, r, DEFAULT_MAX_VERTICES).unwrap();
        let gen = build_generator(&g).unwrap();
        (g, gen)
    }

    #[test]
    fn path_generators() {
        let (_, gen) = path(3);
        assert_eq!(gen.matrix(), &DMatrix::from_element(1, 1, -1.0));
        let (_, gen) = path(5);
        let expected = DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.5, -1.0, 0.5, 0.0, 0.5, -1.0]);
        assert_eq!(gen.matrix(), &expected);
    }

    #[test]
    fn generator_invariants_on_trees() {
        let (_, gen) = tree(2, 4);
        assert!(gen.symmetry_residual() <= 1e-14);
        let l = gen.matrix();
        for i in 0..gen.dim() {
            assert_eq!(l[(i, i)], -1.0);
            let row: f64 = l.row(i).iter().sum();
            assert!(row <= 1e-15);
            for j in 0..gen.dim() {
                if i != j {
                    assert!(l[(i, j)] >= 0.0);
                }
            }
        }
        // rows next to the boundary lose mass
        let leaking = (0..gen.dim()).filter(|&i| gen.matrix().row(i).sum() < -1e-12).count();
        assert_eq!(leaking, 12);
    }

    #[test]
    fn rate_is_a_time_change() {
        let g = GraphSpace::<f64>::path(5).unwrap();
        let fast = Generator::new(&g, 2.0).unwrap();
        let slow = build_generator(&g).unwrap();
        let a = heat_kernel(&fast, 0.5).unwrap();
        let b = heat_kernel(&slow, 1.0).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-14);
        assert!(Generator::new(&g, 0.0).is_err());
    }

    #[test]
    fn asymmetric_measure_is_rejected() {
        let g = GraphSpace::<f64>::path(5).unwrap().with_measure(vec![1.0, 1.0, 2.0, 1.0, 1.0]).unwrap();
        assert!(build_generator(&g).is_err());
        // μ ∝ total weight restores symmetry for non-regular graphs
        let edges = [(0, 1, 1.0), (1, 2, 1.0), (1, 3, 1.0), (3, 4, 1.0)];
        let g = GraphSpace::<f64>::from_edges(5, &edges, &[0, 2, 4], 1, Some(vec![1.0, 3.0, 1.0, 2.0, 1.0])).unwrap();
        let gen = build_generator(&g).unwrap();
        assert!(gen.symmetry_residual() < 1e-15);
    }

    #[test]
    fn one_by_one_kernel() {
        let (_, gen) = path(3);
        let p = heat_kernel(&gen, 1.0).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(p[(0, 0)], 0.36787944117144233, epsilon = 1e-15);
        assert_eq!(heat_kernel(&gen, 0.0).unwrap(), DMatrix::identity(1, 1));
        assert!(heat_kernel(&gen, -1.0).is_err());
    }

    #[test]
    fn semigroup_identity() {
        for (_, gen) in [path(5), tree(2, 3)] {
            let grid = [0.1, 0.5, 1.0, 2.5];
            for &s in &grid {
                for &t in &grid {
                    let lhs = heat_kernel(&gen, s).unwrap() * heat_kernel(&gen, t).unwrap();
                    let rhs = heat_kernel(&gen, s + t).unwrap();
                    assert!(max_abs_diff(&lhs, &rhs) <= 1e-12, "s={s} t={t}");
                }
            }
        }
    }

    #[test]
    fn mass_decays() {
        let (_, gen) = tree(2, 3);
        let mut prev = vec![1.0; gen.dim()];
        for i in 1..40 {
            let p = heat_kernel(&gen, 0.25 * i as f64).unwrap();
            for (r, row) in p.row_iter().enumerate() {
                let mass: f64 = row.iter().sum();
                assert!(mass <= prev[r] + 1e-14);
                prev[r] = mass;
            }
        }
    }

    #[test]
    fn cache_invariants() {
        for (g, gen) in [path(3), path(5), tree(2, 3), tree(2, 4)] {
            let cache = HeatKernelCache::new(&gen, 0.01).unwrap();
            let p = cache.step_matrix();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!(p.row_iter().all(|r| r.sum() <= 1.0 + 1e-15));
            assert!(cache.semigroup_residual() <= 10.0 * f64::EPSILON / 2.0 * g.n_vertices() as f64);
            let mu = gen.measure();
            for i in 0..gen.dim() {
                for j in 0..gen.dim() {
                    assert!((mu[i] * p[(i, j)] - mu[j] * p[(j, i)]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pade_and_spectral_agree() {
        let (_, gen) = tree(2, 3);
        let a = HeatKernelCache::with_method(&gen, 0.05, ExpMethod::Spectral).unwrap();
        let b = HeatKernelCache::with_method(&gen, 0.05, ExpMethod::Pade).unwrap();
        assert_eq!(b.method(), ExpMethod::Pade);
        assert!(max_abs_diff(a.step_matrix(), b.step_matrix()) < 1e-14);
    }

    #[test]
    fn apply_semigroup_examples() {
        let (g, gen) = path(3);
        let cache = HeatKernelCache::new(&gen, 0.5).unwrap();
        let out = apply_semigroup(&gen, &cache, 1, &[0.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(out[1], 0.6065306597126334, epsilon = 1e-15);
        assert_eq!(apply_semigroup(&gen, &cache, 3, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(apply_semigroup(&gen, &cache, 1, &[0.0; 2]).is_err());
        assert_eq!(g.n_vertices(), 3);

        let (_, gen) = tree(2, 3);
        let cache = HeatKernelCache::new(&gen, 0.1).unwrap();
        let n = gen.n_vertices();
        let u: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let v: Vec<f64> = u.iter().map(|x| x + 0.5).collect();
        let pu = apply_semigroup(&gen, &cache, 7, &u).unwrap();
        let pv = apply_semigroup(&gen, &cache, 7, &v).unwrap();
        assert!(pu.iter().zip(&pv).all(|(a, b)| a <= b));
        assert!(pu.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn green_examples() {
        let (g, gen) = path(3);
        let green = green_function(&gen, g.root()).unwrap();
        assert_abs_diff_eq!(green.get(0, 0), 1.0, epsilon = 1e-15);

        let (g, gen) = path(5);
        let green = green_function(&gen, g.root()).unwrap();
        // fundamental matrix (I − Q)^{-1} of the absorbing chain
        let fundamental = [[1.5, 1.0, 0.5], [1.0, 2.0, 1.0], [0.5, 1.0, 1.5]];
        for (i, row) in fundamental.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_abs_diff_eq!(green.get(i, j), v, epsilon = 1e-14);
            }
        }
        assert_eq!(green.base_index(), 1);
        assert!(green.residual() <= 1e-10);
    }

    #[test]
    fn green_is_the_time_integral_of_the_kernel() {
        // Riemann sum Σ dt·P_{n dt} with a spectral tail bound
        let (g, gen) = tree(2, 2);
        let green = green_function(&gen, g.root()).unwrap();
        let gap = gen.spectral_gap();
        let horizon = 60.0;
        let tail = (-gap * horizon).exp() / gap;
        let mut errors = Vec::new();
        for dt in [0.02, 0.01, 0.005] {
            let cache = HeatKernelCache::new(&gen, dt).unwrap();
            let mut p = DMatrix::identity(gen.dim(), gen.dim());
            let mut sum = p.clone() * (0.5 * dt);
            for _ in 0..(horizon / dt) as usize {
                p = cache.step_matrix() * p;
                sum += &p * dt;
            }
            errors.push(max_abs_diff(&sum, green.matrix()));
        }
        // trapezoid error O(dt²) plus the tail
        assert!(errors[2] < 1e-4 + tail);
        assert!(errors[2] < errors[0]);
    }

    #[test]
    fn green_is_mu_symmetric_and_positive() {
        let edges = [(0, 1, 1.0), (1, 2, 2.0), (1, 3, 1.0), (3, 4, 1.0), (2, 3, 0.5)];
        let mu = vec![1.0, 4.0, 2.5, 2.5, 1.0];
        let g = GraphSpace::<f64>::from_edges(5, &edges, &[0, 4], 1, Some(mu)).unwrap();
        let gen = build_generator(&g).unwrap();
        let green = green_function(&gen, g.root()).unwrap();
        let m = gen.measure();
        for i in 0..gen.dim() {
            for j in 0..gen.dim() {
                assert!(green.get(i, j) > 0.0);
                assert!((green.get(i, j) / m[j] - green.get(j, i) / m[i]).abs() < 1e-13);
            }
        }
        // weighted μ goes through the same certified kernels
        let cache = HeatKernelCache::new(&gen, 0.1).unwrap();
        assert!(cache.step_matrix().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn spectral_positivity() {
        for (_, gen) in [path(3), path(5), tree(2, 2), tree(2, 4), tree(3, 3)] {
            let s = gen.spectral();
            assert!(s.eigenvalues.iter().all(|&l| l < 0.0));
            assert!(s.gap() > 0.0);
        }
        let (_, gen) = path(3);
        assert_abs_diff_eq!(gen.spectral_gap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn no_boundary_means_no_gap() {
        let edges = [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)];
        let g = GraphSpace::<f64>::from_edges(3, &edges, &[], 0, None).unwrap();
        let gen = build_generator(&g).unwrap();
        assert!(gen.spectral_gap().abs() < 1e-14);
        assert!(green_function(&gen, g.root()).is_err());
    }

    #[test]
    fn single_precision_kernel() {
        let g = GraphSpace::<f32>::regular_tree(2, 3, DEFAULT_MAX_VERTICES).unwrap();
        let gen = build_generator(&g).unwrap();
        let cache = HeatKernelCache::new(&gen, 0.1f32).unwrap();
        let g64 = GraphSpace::<f64>::regular_tree(2, 3, DEFAULT_MAX_VERTICES).unwrap();
        let gen64 = build_generator(&g64).unwrap();
        let cache64 = HeatKernelCache::new(&gen64, 0.1).unwrap();
        for (a, b) in cache.step_matrix().iter().zip(cache64.step_matrix().iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}

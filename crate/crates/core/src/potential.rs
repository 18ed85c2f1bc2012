//! Harmonic functions, harmonic measure and the Martin kernel on a finite
//! graph whose boundary vertices stand in for the Martin boundary.
//!
//! Boundary data vectors are indexed like [`Generator::boundary`], i.e. by
//! boundary vertices in increasing id order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Automorphism, GraphSpace, VertexId};
use crate::heat::{Generator, GreenMatrix};
use crate::scalar::Real;

/// Weights in `[-NEGATIVE_CLAMP, 0)` are treated as roundoff and cleared.
pub const NEGATIVE_CLAMP: f64 = 1e-9;

/// A harmonic function together with its boundary values and certificate.
#[derive(Clone, Debug)]
pub struct HarmonicFunction<T> {
    values: Vec<T>,
    boundary_data: Vec<T>,
    residual: f64,
}

impl<T: Real> HarmonicFunction<T> {
    /// Values at every vertex.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn value(&self, x: VertexId) -> T {
        self.values[x.0]
    }

    pub fn boundary_data(&self) -> &[T] {
        &self.boundary_data
    }

    /// max over interior x of |Σ_y L(x,y) h(y)|, including boundary neighbors.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn sup_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.values.iter().all(|&v| v > T::zero())
    }
}

/// Applies the full-graph generator (boundary neighbors included) at every
/// interior vertex and returns max |𝓛h(x)|.
pub fn harmonicity_residual<T: Real>(g: &GraphSpace<T>, rate: T, values: &[T]) -> f64 {
    g.interior_vertices()
        .into_iter()
        .map(|x| {
            let total = g.total_weight(x);
            let hx = values[x.0];
            let lh: T = g.neighbors(x).iter().map(|&(y, w)| w * (values[y] - hx)).sum();
            (rate * lh / total).abs().to_f64_lossy()
        })
        .fold(0.0, f64::max)
}

fn certify<T: Real>(g: &GraphSpace<T>, gen: &Generator<T>, values: Vec<T>, boundary_data: Vec<T>) -> Result<HarmonicFunction<T>> {
    let residual = harmonicity_residual(g, gen.rate(), &values);
    let scale = boundary_data.iter().fold(1.0f64, |m, v| m.max(v.abs().to_f64_lossy()));
    let bound = T::tolerance(1e-10) * scale;
    if residual > bound {
        return Err(Error::Accuracy { what: "harmonicity", achieved: residual, bound });
    }
    Ok(HarmonicFunction { values, boundary_data, residual })
}

/// Solves 𝓛h = 0 at the interior with the given boundary values.
pub fn solve_dirichlet<T: Real>(g: &GraphSpace<T>, gen: &Generator<T>, boundary_data: &[T]) -> Result<HarmonicFunction<T>> {
    let nb = gen.boundary().len();
    if boundary_data.len() != nb {
        return Err(Error::Dimension { expected: nb, got: boundary_data.len() });
    }
    if boundary_data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("boundary data must be finite".into()));
    }
    let inflow = gen.boundary_coupling() * DVector::from_column_slice(boundary_data);
    let interior = (-gen.matrix().clone())
        .lu()
        .solve(&inflow)
        .ok_or_else(|| Error::Singular("Dirichlet problem".into()))?;
    let values = gen.assemble(&interior, boundary_data);
    certify(g, gen, values, boundary_data.to_vec())
}

/// Hitting probability of `arc` for the walk started at each vertex.
///
/// An empty arc yields the zero function, which is harmonic but not
/// strictly positive; a warning is logged.
pub fn harmonic_measure<T: Real>(g: &GraphSpace<T>, gen: &Generator<T>, arc: &[VertexId]) -> Result<HarmonicFunction<T>> {
    let mut data = vec![T::zero(); gen.boundary().len()];
    for &xi in arc {
        let i = gen
            .boundary_index(xi)
            .ok_or_else(|| Error::InvalidArgument(format!("vertex {xi} is not a boundary vertex")))?;
        data[i] = T::one();
    }
    if arc.is_empty() {
        log::warn!("harmonic measure of an empty arc is identically zero");
    }
    solve_dirichlet(g, gen, &data)
}

/// Martin kernel `K(x, ξ)` for every vertex x and boundary vertex ξ.
///
/// For interior x and a boundary vertex ξ with a single interior neighbor ξ′,
/// `K(x,ξ) = G(x,ξ′)/G(o,ξ′)`. When ξ has several interior neighbors the
/// ratio is taken between inflow-weighted combinations
/// `Σ_ξ′ G(x,ξ′)·L(ξ′,ξ)`, which is the ratio of harmonic measures
/// `ω_x({ξ})/ω_o({ξ})`; such ξ are listed in [`inflow_weighted`]. Rows of
/// boundary vertices are `K(ξ′,ξ) = 𝟙{ξ′=ξ}/ω_o({ξ})`, the limit of the
/// same ratio as x approaches the boundary.
///
/// [`inflow_weighted`]: MartinKernelMatrix::inflow_weighted
#[derive(Clone, Debug)]
pub struct MartinKernelMatrix<T: Real> {
    matrix: DMatrix<T>,
    base: VertexId,
    base_harmonic_measure: Vec<T>,
    inflow_weighted: Vec<VertexId>,
}

impl<T: Real> MartinKernelMatrix<T> {
    /// Rows: all vertices; columns: boundary vertices.
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn get(&self, x: VertexId, boundary_index: usize) -> T {
        self.matrix[(x.0, boundary_index)]
    }

    pub fn base(&self) -> VertexId {
        self.base
    }

    /// ω_o({ξ}) for each boundary vertex.
    pub fn base_harmonic_measure(&self) -> &[T] {
        &self.base_harmonic_measure
    }

    /// Boundary vertices whose kernel column used the inflow-weighted extension.
    pub fn inflow_weighted(&self) -> &[VertexId] {
        &self.inflow_weighted
    }

    /// The minimal harmonic function K(·, ξ) as a full vertex field.
    pub fn column(&self, boundary_index: usize) -> Vec<T> {
        self.matrix.column(boundary_index).iter().copied().collect()
    }
}

pub fn martin_kernel<T: Real>(green: &GreenMatrix<T>, gen: &Generator<T>, g: &GraphSpace<T>) -> Result<MartinKernelMatrix<T>> {
    let o = green.base_index();
    let coupling = gen.boundary_coupling();
    let nb = gen.boundary().len();
    let n = g.n_vertices();
    let mut matrix = DMatrix::zeros(n, nb);
    let mut base_measure = Vec::with_capacity(nb);
    let mut inflow_weighted = Vec::new();
    let gm = green.matrix();
    for (b, &xi) in gen.boundary().iter().enumerate() {
        let feeders: Vec<usize> = (0..gen.dim()).filter(|&i| coupling[(i, b)] > T::zero()).collect();
        let omega_o: T = feeders.iter().map(|&i| gm[(o, i)] * coupling[(i, b)]).sum();
        match feeders.as_slice() {
            [] => {
                return Err(Error::Graph(format!("boundary vertex {xi} has no interior neighbor")));
            }
            &[last] => {
                for (r, x) in gen.interior().iter().enumerate() {
                    matrix[(x.0, b)] = gm[(r, last)] / gm[(o, last)];
                }
            }
            several => {
                inflow_weighted.push(xi);
                for (r, x) in gen.interior().iter().enumerate() {
                    let omega_x: T = several.iter().map(|&i| gm[(r, i)] * coupling[(i, b)]).sum();
                    matrix[(x.0, b)] = omega_x / omega_o;
                }
            }
        }
        matrix[(xi.0, b)] = T::one() / omega_o;
        base_measure.push(omega_o);
    }
    if !inflow_weighted.is_empty() {
        log::warn!(
            "Martin kernel used the inflow-weighted boundary extension for {} vertices",
            inflow_weighted.len()
        );
    }
    Ok(MartinKernelMatrix {
        matrix,
        base: green.base(),
        base_harmonic_measure: base_measure,
        inflow_weighted,
    })
}

/// A finite positive measure on the boundary vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMeasure<T> {
    weights: Vec<T>,
    reconstruction_residual: f64,
}

impl<T: Real> BoundaryMeasure<T> {
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn total_mass(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// max over all vertices x of |h(x) − Σ_ξ K(x,ξ)ν(ξ)|.
    pub fn reconstruction_residual(&self) -> f64 {
        self.reconstruction_residual
    }

    /// Σ_ξ K(·,ξ) ν(ξ) at every vertex.
    pub fn reconstruct(&self, kernel: &MartinKernelMatrix<T>) -> Vec<T> {
        (kernel.matrix() * DVector::from_column_slice(&self.weights)).iter().copied().collect()
    }

    /// `a_# ν`: the weight at ξ moves to a(ξ).
    pub fn pushforward(&self, gen: &Generator<T>, a: &Automorphism) -> BoundaryMeasure<T> {
        let mut weights = vec![T::zero(); self.weights.len()];
        for (i, &xi) in gen.boundary().iter().enumerate() {
            let j = gen.boundary_index(a.apply(xi)).expect("automorphism maps boundary to boundary");
            weights[j] = self.weights[i];
        }
        BoundaryMeasure { weights, reconstruction_residual: self.reconstruction_residual }
    }
}

/// Solves `h = Σ_ξ K(·,ξ)ν(ξ)` for a nonnegative ν by least squares over all
/// vertices, then certifies the reconstruction on the interior.
pub fn martin_representation<T: Real>(h: &HarmonicFunction<T>, kernel: &MartinKernelMatrix<T>) -> Result<BoundaryMeasure<T>> {
    let tol = T::tolerance(1e-10);
    if h.residual() > tol * h.sup_norm().to_f64_lossy().max(1.0) {
        return Err(Error::Accuracy { what: "harmonicity", achieved: h.residual(), bound: tol });
    }
    if let Some(&v) = h.values().iter().find(|&&v| v < T::zero()) {
        return Err(Error::NotPositive(v.to_f64_lossy()));
    }
    let k = kernel.matrix();
    if k.nrows() != h.values().len() {
        return Err(Error::Dimension { expected: k.nrows(), got: h.values().len() });
    }
    let rhs = DVector::from_column_slice(h.values());
    let svd = k.clone().svd(true, true);
    let eps = T::lit(T::EPSILON) * svd.singular_values.max() * T::lit(k.nrows().max(k.ncols()) as f64);
    let nu = svd.solve(&rhs, eps).map_err(|e| Error::Singular(e.to_string()))?;

    let clamp = T::tolerance(NEGATIVE_CLAMP);
    let mut weights = Vec::with_capacity(nu.len());
    for &w in nu.iter() {
        if w < T::zero() {
            if w.abs().to_f64_lossy() > clamp {
                return Err(Error::NotPositive(w.to_f64_lossy()));
            }
            weights.push(T::zero());
        } else {
            weights.push(w);
        }
    }
    let mut measure = BoundaryMeasure { weights, reconstruction_residual: 0.0 };
    let rebuilt = measure.reconstruct(kernel);
    let residual = rebuilt
        .iter()
        .zip(h.values())
        .map(|(r, v)| (*r - *v).abs().to_f64_lossy())
        .fold(0.0, f64::max);
    let bound = T::tolerance(1e-8) * h.sup_norm().to_f64_lossy().max(1.0);
    if residual > bound {
        return Err(Error::Accuracy { what: "Martin reconstruction", achieved: residual, bound });
    }
    measure.reconstruction_residual = residual;
    Ok(measure)
}

/// `(a·h)(x) = h(a⁻¹x)`, re-certified as harmonic.
pub fn pushforward_harmonic<T: Real>(
    g: &GraphSpace<T>,
    gen: &Generator<T>,
    h: &HarmonicFunction<T>,
    a: &Automorphism,
) -> Result<HarmonicFunction<T>> {
    let values = a.push_field(h.values());
    let boundary_data = gen.restrict_boundary(&values)?;
    certify(g, gen, values, boundary_data)
}

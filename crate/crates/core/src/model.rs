use crate::disorder::{lambda_exact_white, lambda_quadrature, DisorderReport};
use crate::error::{Error, Result};
use crate::geometry::GraphSpace;
use crate::heat::{green_function, ExpMethod, Generator, GreenMatrix, HeatKernelCache};
use crate::noise::{build_covariance, CovarianceKernel, CovarianceKind};
use crate::potential::{solve_dirichlet, HarmonicFunction};
use crate::scalar::Real;

/// Everything the dynamics need about one graph, noise and time step.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub graph: GraphSpace<T>,
    pub generator: Generator<T>,
    pub cache: HeatKernelCache<T>,
    pub covariance: CovarianceKernel<T>,
    pub green: Option<GreenMatrix<T>>,
    /// Continuous-time Λ of the killed semigroup.
    pub disorder: DisorderReport,
}

/// Target for the Λ quadrature tail when no closed form applies.
const LAMBDA_TAIL_TARGET: f64 = 1e-10;

impl<T: Real> Model<T> {
    pub fn new(graph: GraphSpace<T>, kind: CovarianceKind, dt: T) -> Result<Self> {
        Self::with_method(graph, kind, dt, ExpMethod::Spectral)
    }

    pub fn with_method(graph: GraphSpace<T>, kind: CovarianceKind, dt: T, method: ExpMethod) -> Result<Self> {
        Self::build(graph, kind, dt, method, T::one())
    }

    /// Generator scaled to total jump rate `rate`.
    pub fn build(graph: GraphSpace<T>, kind: CovarianceKind, dt: T, method: ExpMethod, rate: T) -> Result<Self> {
        let generator = Generator::new(&graph, rate)?;
        let cache = HeatKernelCache::with_method(&generator, dt, method)?;
        let covariance = build_covariance(&graph, &generator, kind)?;
        let green = if graph.has_boundary() { Some(green_function(&generator, graph.root())?) } else { None };
        let disorder = match (&green, covariance.kind()) {
            (Some(g), CovarianceKind::White) => lambda_exact_white(g, &generator),
            _ => {
                let gap = cache.gap().to_f64_lossy();
                if gap <= 1e-12 {
                    return Err(Error::Diverges);
                }
                let ratio = covariance.operator_norm().to_f64_lossy().max(1e-300) / (2.0 * gap * LAMBDA_TAIL_TARGET);
                let horizon = ratio.ln().max(1.0) / (2.0 * gap);
                let dt_f = dt.to_f64_lossy();
                let horizon = T::lit((horizon / dt_f).ceil() * dt_f);
                lambda_quadrature(&generator, &cache, &covariance, horizon)?
            }
        };
        Ok(Model { graph, generator, cache, covariance, green, disorder })
    }

    /// Same graph and noise with another time step.
    pub fn with_dt(&self, dt: T) -> Result<Self> {
        let cache = HeatKernelCache::with_method(&self.generator, dt, self.cache.method())?;
        Ok(Model { cache, ..self.clone() })
    }

    pub fn dt(&self) -> T {
        self.cache.dt()
    }

    pub fn lambda(&self) -> f64 {
        self.disorder.lambda
    }

    pub fn gap(&self) -> f64 {
        self.cache.gap().to_f64_lossy()
    }

    /// Harmonic extension of data given on the boundary vertices.
    pub fn harmonic(&self, boundary_data: &[T]) -> Result<HarmonicFunction<T>> {
        solve_dirichlet(&self.graph, &self.generator, boundary_data)
    }

    /// Number of whole steps in `t` (rounded up).
    pub fn steps_for(&self, t: f64) -> usize {
        (t / self.dt().to_f64_lossy() - 1e-9).ceil().max(0.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_MAX_VERTICES;

    #[test]
    fn lambda_sources_agree() {
        let g = GraphSpace::<f64>::regular_tree(2, 2, DEFAULT_MAX_VERTICES).unwrap();
        let white = Model::new(g.clone(), CovarianceKind::White, 0.05).unwrap();
        let explicit = CovarianceKind::Explicit {
            matrix: (0..white.generator.dim())
                .map(|i| (0..white.generator.dim()).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        };
        let quad = Model::new(g, explicit, 0.05).unwrap();
        assert!((white.lambda() - quad.lambda()).abs() < 1e-6);
        assert!(quad.disorder.tail_bound <= 1e-9);
        assert_eq!(white.with_dt(0.1).unwrap().steps_for(1.0), 10);
    }
}

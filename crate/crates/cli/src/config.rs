//! TOML run configuration with dotted `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use she_martin::geometry::{GraphSpace, VertexId, DEFAULT_MAX_VERTICES};
use she_martin::heat::ExpMethod;
use she_martin::noise::CovarianceKind;
use she_martin::solver::Nonlinearity;
use she_martin::Model64;

pub const DEFAULT_SEED: u64 = 20261017;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub graph: GraphConfig,
    pub heat: HeatConfig,
    pub noise: NoiseConfig,
    pub dynamics: DynamicsConfig,
    pub mc: McConfig,
    pub output: OutputConfig,
    pub pullback: PullbackConfig,
    pub fluct: FluctConfig,
    pub equivariance: EquivarianceConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    RegularTree,
    Path,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub kind: GraphKind,
    pub q: usize,
    pub radius: usize,
    /// Vertex count for paths.
    pub n: usize,
    /// Edge-list file for `custom`.
    pub edges: Option<PathBuf>,
    pub max_vertices: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { kind: GraphKind::RegularTree, q: 2, radius: 3, n: 3, edges: None, max_vertices: DEFAULT_MAX_VERTICES }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatConfig {
    /// Total jump rate of the generator.
    pub rate: f64,
    pub dt: f64,
    pub method: ExpMethod,
    /// Time at which `heat` dumps `p_t`.
    pub t: f64,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig { rate: 1.0, dt: 0.05, method: ExpMethod::Spectral, t: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindName {
    White,
    DistanceDecay,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKindName,
    pub c: f64,
    pub alpha: f64,
    /// Interior covariance rows for `explicit`.
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { kind: NoiseKindName::White, c: 1.0, alpha: 2.0, matrix: None }
    }
}

impl NoiseConfig {
    pub fn covariance(&self) -> Result<CovarianceKind, ConfigError> {
        Ok(match self.kind {
            NoiseKindName::White => CovarianceKind::White,
            NoiseKindName::DistanceDecay => CovarianceKind::DistanceDecay { c: self.c, alpha: self.alpha },
            NoiseKindName::Explicit => CovarianceKind::Explicit {
                matrix: self
                    .matrix
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("noise.kind = \"explicit\" needs noise.matrix".into()))?,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityName {
    Linear,
    Sine,
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryShape {
    Constant,
    /// Boundary vertices below the first child of the root.
    Indicator,
    /// `(i+1)/n_∂` along the boundary order.
    Ramp,
    /// `dynamics.boundary_values` verbatim.
    Values,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Noise strength; when absent it is derived from `rho`.
    pub beta: Option<f64>,
    /// Target `(βL_f)²Λ`.
    pub rho: f64,
    pub f: NonlinearityName,
    /// Amplitude for `sine`, level for `clip`.
    pub f_param: f64,
    pub boundary: BoundaryShape,
    pub boundary_value: f64,
    pub boundary_values: Option<Vec<f64>>,
    /// Horizon in units of `1/gap`.
    pub horizon_gap: f64,
    /// Number of retained time intervals.
    pub retained: usize,
    /// Interior shift of the initial datum in `attract`.
    pub perturbation: f64,
    pub observe: Option<Vec<usize>>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            beta: None,
            rho: 0.5,
            f: NonlinearityName::Linear,
            f_param: 1.0,
            boundary: BoundaryShape::Constant,
            boundary_value: 1.0,
            boundary_values: None,
            horizon_gap: 5.0,
            retained: 2,
            perturbation: 1.0,
            observe: None,
        }
    }
}

impl DynamicsConfig {
    pub fn nonlinearity(&self) -> Nonlinearity {
        match self.f {
            NonlinearityName::Linear => Nonlinearity::Linear,
            NonlinearityName::Sine => Nonlinearity::Sine { a: self.f_param },
            NonlinearityName::Clip => Nonlinearity::Clip { c: self.f_param },
        }
    }

    /// Explicit β, or the one giving `(βL_f)²Λ = rho`.
    pub fn beta(&self, lambda: f64) -> Result<f64, ConfigError> {
        let lf = self.nonlinearity().lipschitz();
        let beta = match self.beta {
            Some(b) => b,
            None => {
                if self.rho.is_nan() || self.rho < 0.0 {
                    return Err(ConfigError::Invalid(format!("dynamics.rho must be nonnegative, got {}", self.rho)));
                }
                (self.rho / lambda).sqrt() / lf
            }
        };
        let margin = she_martin::disorder::weak_disorder_margin(beta, lf, lambda);
        if margin.is_nan() || margin <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "beta = {beta} is outside weak disorder: margin 1 - (beta Lf)^2 Lambda = {margin:.6} <= 0"
            )));
        }
        Ok(beta)
    }

    /// Data on `model.generator.boundary()`.
    pub fn boundary_data(&self, model: &Model64) -> Result<Vec<f64>, ConfigError> {
        boundary_data(model, self.boundary, self.boundary_value, self.boundary_values.as_deref())
    }

    pub fn observed(&self, model: &Model64) -> Result<Vec<VertexId>, ConfigError> {
        match &self.observe {
            None => Ok(model.generator.interior().to_vec()),
            Some(list) => list
                .iter()
                .map(|&v| {
                    let x = VertexId(v);
                    if model.generator.interior_index(x).is_some() {
                        Ok(x)
                    } else {
                        Err(ConfigError::Invalid(format!("dynamics.observe: vertex {v} is not interior")))
                    }
                })
                .collect(),
        }
    }
}

pub fn boundary_data(
    model: &Model64,
    shape: BoundaryShape,
    value: f64,
    values: Option<&[f64]>,
) -> Result<Vec<f64>, ConfigError> {
    let boundary = model.generator.boundary();
    let nb = boundary.len();
    Ok(match shape {
        BoundaryShape::Constant => vec![value; nb],
        BoundaryShape::Ramp => (0..nb).map(|i| value * (i + 1) as f64 / nb as f64).collect(),
        BoundaryShape::Indicator => {
            let g = &model.graph;
            let top = *g
                .children(g.root())
                .first()
                .ok_or_else(|| ConfigError::Invalid("root has no children".into()))?;
            let mut below = vec![false; g.n_vertices()];
            let mut stack = vec![top];
            while let Some(x) = stack.pop() {
                below[x.0] = true;
                stack.extend(g.children(x));
            }
            boundary.iter().map(|b| if below[b.0] { value } else { 0.0 }).collect()
        }
        BoundaryShape::Values => {
            let v = values.ok_or_else(|| ConfigError::Invalid("dynamics.boundary = \"values\" needs dynamics.boundary_values".into()))?;
            if v.len() != nb {
                return Err(ConfigError::Invalid(format!("dynamics.boundary_values has {} entries, expected {nb}", v.len())));
            }
            v.to_vec()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub seed: u64,
    pub replicas: u64,
    /// Rayon worker threads; defaults to available parallelism.
    pub workers: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { seed: DEFAULT_SEED, replicas: 10_000, workers: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PullbackConfig {
    /// Depths in units of `1/gap`.
    pub ladder: Vec<f64>,
}

impl Default for PullbackConfig {
    fn default() -> Self {
        PullbackConfig { ladder: vec![2.0, 4.0, 8.0, 16.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluctConfig {
    pub betas: Vec<f64>,
    /// Pullback depth in units of `1/gap`.
    pub depth_gap: f64,
}

impl Default for FluctConfig {
    fn default() -> Self {
        FluctConfig { betas: vec![0.4, 0.2, 0.1], depth_gap: 16.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivarianceConfig {
    /// Children of the root whose subtrees are exchanged.
    pub swap: [usize; 2],
    pub steps: usize,
    /// Pullback depth of the two-sample check, in units of `1/gap`.
    pub depth_gap: f64,
}

impl Default for EquivarianceConfig {
    fn default() -> Self {
        EquivarianceConfig { swap: [0, 1], steps: 1000, depth_gap: 8.0 }
    }
}

impl Config {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !(self.heat.dt > 0.0 && self.heat.dt.is_finite()) {
            return Err(ConfigError::Invalid(format!("heat.dt must be positive, got {}", self.heat.dt)));
        }
        if !(self.heat.rate > 0.0 && self.heat.rate.is_finite()) {
            return Err(ConfigError::Invalid(format!("heat.rate must be positive, got {}", self.heat.rate)));
        }
        if self.mc.replicas == 0 {
            return Err(ConfigError::Invalid("mc.replicas must be at least 1".into()));
        }
        if self.mc.workers == Some(0) {
            return Err(ConfigError::Invalid("mc.workers must be at least 1".into()));
        }
        if self.graph.kind == GraphKind::Custom && self.graph.edges.is_none() {
            return Err(ConfigError::Invalid("graph.kind = \"custom\" needs graph.edges".into()));
        }
        if self.dynamics.horizon_gap.is_nan() || self.dynamics.horizon_gap <= 0.0 || self.dynamics.retained == 0 {
            return Err(ConfigError::Invalid("dynamics.horizon_gap and dynamics.retained must be positive".into()));
        }
        Ok(())
    }

    pub fn graph(&self) -> she_martin::Result<GraphSpace<f64>> {
        let g = &self.graph;
        match g.kind {
            GraphKind::RegularTree => GraphSpace::regular_tree(g.q, g.radius, g.max_vertices),
            GraphKind::Path => GraphSpace::path(g.n),
            GraphKind::Custom => GraphSpace::load_edge_list(g.edges.as_deref().expect("checked")),
        }
    }

    pub fn model(&self) -> anyhow::Result<Model64> {
        let kind = self.noise.covariance()?;
        Ok(Model64::build(self.graph()?, kind, self.heat.dt, self.heat.method, self.heat.rate)?)
    }
}

/// Inserts `a.b.c=value` into the table; the value is read as TOML, or as a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::Override(item.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(item.to_string()));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("`{part}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let back = Config::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = Config::from_toml("[graph]\nkind = \"path\"\nn = 5\n", &["graph.n=3".into(), "noise.kind=distance_decay".into()])
            .unwrap();
        assert_eq!(cfg.graph.n, 3);
        assert_eq!(cfg.noise.kind, NoiseKindName::DistanceDecay);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = Config::from_toml("[graph]\nradiuss = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("radiuss"), "{err}");
        let err = Config::from_toml("", &["mc.sed=1".into()]).unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn beta_outside_weak_disorder_is_rejected() {
        let d = DynamicsConfig { beta: Some(2.0), ..Default::default() };
        let err = d.beta(0.5).unwrap_err();
        assert!(err.to_string().contains("margin"));
        let d = DynamicsConfig { rho: 0.5, ..Default::default() };
        assert!((d.beta(0.5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_shapes_on_the_path() {
        let m = Model64::new(GraphSpace::path(3).unwrap(), CovarianceKind::White, 0.05).unwrap();
        assert_eq!(boundary_data(&m, BoundaryShape::Constant, 1.0, None).unwrap(), vec![1.0, 1.0]);
        assert_eq!(boundary_data(&m, BoundaryShape::Ramp, 1.0, None).unwrap(), vec![0.5, 1.0]);
        let ind = boundary_data(&m, BoundaryShape::Indicator, 1.0, None).unwrap();
        assert_eq!(ind.iter().sum::<f64>(), 1.0);
    }
}

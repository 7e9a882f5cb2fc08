//! Python bindings: point clouds, samplers, the overlap estimator and the
//! registration pipeline. Points cross the boundary as lists of `[x, y, z]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use overlap_sampling::error::Error;
use overlap_sampling::estimator::{self, EstimatorModel, ModelConfig, TrainConfig, TrainPair};
use overlap_sampling::geometry::{self, Correspondence, Vec3};
use overlap_sampling::harness;
use overlap_sampling::io::synth::{self, Regime, SceneConfig, ShapeKind};
use overlap_sampling::pipeline::{self, Method, PipelineConfig};
use overlap_sampling::samplers;
use overlap_sampling::spatial::SpatialIndex;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Parse { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFiniteTensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "PointCloud", frozen, from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: geometry::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<[f64; 3]>) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::PointCloud::from_xyz(&points).map_err(to_py)?,
        })
    }

    /// Reads an ASCII or binary little-endian PLY file.
    #[staticmethod]
    fn read_ply(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: overlap_sampling::io::ply::read_ply(&path).map_err(to_py)?,
        })
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points().iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    fn subset(&self, ids: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.subset(&ids).map_err(to_py)?,
        })
    }

    fn transformed(&self, t: &PyRigidTransform) -> Self {
        Self {
            inner: geometry::apply_transform(&self.inner, &t.inner),
        }
    }

    /// Ids of the `k` nearest points, nearest first.
    fn knn(&self, query: [f64; 3], k: usize) -> PyResult<Vec<usize>> {
        let index = SpatialIndex::build(&self.inner);
        let found = index.knn(&Vec3::from(query), k).map_err(to_py)?;
        Ok(found.into_iter().map(|n| n.id).collect())
    }

    /// Ids within distance `r`, ascending.
    fn radius_query(&self, query: [f64; 3], r: f64) -> Vec<usize> {
        SpatialIndex::build(&self.inner).radius_query(&Vec3::from(query), r)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.inner.len())
    }
}

#[pyclass(name = "RigidTransform", frozen, from_py_object)]
#[derive(Clone)]
struct PyRigidTransform {
    inner: geometry::RigidTransform,
}

#[pymethods]
impl PyRigidTransform {
    /// From a row-major 4×4 matrix given as 16 numbers.
    #[new]
    fn new(matrix: [f64; 16]) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::RigidTransform::from_row_major(&matrix).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: geometry::RigidTransform::identity(),
        }
    }

    fn matrix(&self) -> [f64; 16] {
        self.inner.to_row_major()
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.inner.apply(&Vec3::from(p));
        [q.x, q.y, q.z]
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    /// Rotation error in degrees.
    fn rotation_error(&self, other: &PyRigidTransform) -> f64 {
        self.inner.rotation_error(&other.inner)
    }

    fn translation_error(&self, other: &PyRigidTransform) -> f64 {
        self.inner.translation_error(&other.inner)
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: EstimatorModel,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised estimator with default settings.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            init_seed: seed,
            ..ModelConfig::default()
        };
        Ok(Self {
            inner: EstimatorModel::new(config).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EstimatorModel::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Pre-samples both clouds and returns per-sampled-point scores.
    #[pyo3(signature = (src, tgt, seed = 0))]
    fn score<'py>(
        &self,
        py: Python<'py>,
        src: &PyPointCloud,
        tgt: &PyPointCloud,
        seed: u64,
    ) -> PyResult<(Bound<'py, PyDict>, Bound<'py, PyDict>)> {
        let inf = estimator::score_pair(&self.inner, &src.inner, &tgt.inner, seed).map_err(to_py)?;
        let side = |s: &estimator::ScoredCloud| -> PyResult<Bound<'py, PyDict>> {
            let d = PyDict::new(py);
            d.set_item("ids", s.sampled_ids.clone())?;
            d.set_item("overlap", s.overlap.clone())?;
            d.set_item("matchability", s.matchability.clone())?;
            d.set_item("combined", s.combined.clone())?;
            Ok(d)
        };
        Ok((side(&inf.src)?, side(&inf.tgt)?))
    }
}

/// Synthetic pair: `(src, tgt, t_true, overlap_ratio)`. `regime` draws the
/// overlap from the regime's range; otherwise `overlap` is used.
#[pyfunction]
#[pyo3(signature = (seed = 0, points = 1000, regime = None, overlap = 0.5, noise = 0.005, shape = "room"))]
fn generate_pair(
    seed: u64,
    points: usize,
    regime: Option<&str>,
    overlap: f64,
    noise: f64,
    shape: &str,
) -> PyResult<(PyPointCloud, PyPointCloud, PyRigidTransform, f64)> {
    let cfg = SceneConfig {
        shape: parse::<ShapeKind>(shape)?,
        points_per_cloud: points,
        target_overlap: overlap,
        noise_sigma: noise,
        seed,
        ..SceneConfig::default()
    };
    let pair = match regime {
        Some(r) => synth::generate_regime_pair(parse::<Regime>(r)?, &cfg),
        None => synth::generate_pair(&cfg),
    }
    .map_err(to_py)?;
    Ok((
        PyPointCloud { inner: pair.src },
        PyPointCloud { inner: pair.tgt },
        PyRigidTransform { inner: pair.t_true },
        pair.overlap_ratio,
    ))
}

#[pyfunction]
fn random_sample(cloud: &PyPointCloud, budget: usize, seed: u64) -> PyResult<Vec<usize>> {
    Ok(samplers::random_sample(&cloud.inner, budget, seed).map_err(to_py)?.selected_ids)
}

/// Ids in pick order.
#[pyfunction]
#[pyo3(signature = (cloud, budget, start = 0))]
fn farthest_point_sample(cloud: &PyPointCloud, budget: usize, start: usize) -> PyResult<Vec<usize>> {
    Ok(samplers::farthest_point_sample(&cloud.inner, budget, start).map_err(to_py)?.selected_ids)
}

#[pyfunction]
fn poisson_disk_sample(cloud: &PyPointCloud, min_distance: f64, budget: usize) -> PyResult<Vec<usize>> {
    Ok(samplers::poisson_disk_sample(&cloud.inner, min_distance, budget).map_err(to_py)?.selected_ids)
}

/// Voxel centroids, in voxel key order.
#[pyfunction]
fn voxel_grid_sample(cloud: &PyPointCloud, voxel_size: f64) -> PyResult<PyPointCloud> {
    Ok(PyPointCloud {
        inner: samplers::voxel_grid_sample(&cloud.inner, voxel_size).map_err(to_py)?.centroids,
    })
}

#[pyfunction]
fn kabsch_align(src: Vec<[f64; 3]>, tgt: Vec<[f64; 3]>) -> PyResult<PyRigidTransform> {
    if src.len() != tgt.len() {
        return Err(PyValueError::new_err("src and tgt must have the same length"));
    }
    let c: Vec<Correspondence> = src
        .into_iter()
        .zip(tgt)
        .map(|(p, q)| Correspondence::new(Vec3::from(p), Vec3::from(q)))
        .collect();
    Ok(PyRigidTransform {
        inner: geometry::kabsch_align(&c).map_err(to_py)?,
    })
}

#[pyfunction]
fn registration_rmse(estimate: &PyRigidTransform, truth: &PyRigidTransform, cloud: &PyPointCloud) -> PyResult<f64> {
    geometry::registration_rmse(&estimate.inner, &truth.inner, &cloud.inner).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    harness::average_precision(&scores, &labels).map_err(to_py)
}

/// Samples both clouds with `method`, registers them and returns the
/// estimate with the memory ledger summary.
#[pyfunction]
#[pyo3(signature = (src, tgt, method = "random", budget = 0.2, model = None, seed = 0))]
fn run_pair<'py>(
    py: Python<'py>,
    src: &PyPointCloud,
    tgt: &PyPointCloud,
    method: &str,
    budget: f64,
    model: Option<&PyModel>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let method: Method = parse(method)?;
    let cfg = PipelineConfig::default();
    let run = pipeline::run_pair(&src.inner, &tgt.inner, method, budget, model.map(|m| &m.inner), &cfg, seed)
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item(
        "transform",
        run.registration.transform.map(|t| PyRigidTransform { inner: t }),
    )?;
    d.set_item("src_points", run.src.points.len())?;
    d.set_item("tgt_points", run.tgt.points.len())?;
    d.set_item("matches", run.registration.matches.len())?;
    d.set_item("inliers", run.registration.inliers.len())?;
    d.set_item("sampling_peak_bytes", run.ledger.sampling_peak())?;
    d.set_item("registration_peak_bytes", run.ledger.registration_peak())?;
    d.set_item("peak_bytes", run.ledger.reported())?;
    Ok(d)
}

/// Trains an estimator on `(src, tgt, t_true)` triples.
#[pyfunction]
#[pyo3(signature = (pairs, epochs = 4, seed = 0))]
fn train(pairs: Vec<(PyPointCloud, PyPointCloud, PyRigidTransform)>, epochs: usize, seed: u64) -> PyResult<PyModel> {
    let pairs: Vec<TrainPair> = pairs
        .into_iter()
        .map(|(s, t, x)| TrainPair {
            src: s.inner,
            tgt: t.inner,
            t_true: x.inner,
        })
        .collect();
    let mut cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    cfg.model.init_seed = seed;
    let out = estimator::train(&pairs, &cfg).map_err(to_py)?;
    Ok(PyModel { inner: out.model })
}

#[pymodule]
pub fn overlap_sampling_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(random_sample, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_disk_sample, m)?)?;
    m.add_function(wrap_pyfunction!(voxel_grid_sample, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch_align, m)?)?;
    m.add_function(wrap_pyfunction!(registration_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(run_pair, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}

//! Python bindings. Images cross the boundary as lists of rows
//! (`list[list[float]]`, one grayscale channel).

use std::path::PathBuf;

use demesh::facegen::{load_dataset, make_dataset, validate_dir, DatasetConfig, Split};
use demesh::fcn::ArchSpec;
use demesh::featnet::{build_phi, PhiMode, PhiSpec, PretrainConfig};
use demesh::losses::{pixel_loss as core_pixel_loss, reverse_huber as core_reverse_huber, Variant};
use demesh::selfcheck::run_suite;
use demesh::stn::Landmarks;
use demesh::tensor::Tensor;
use demesh::trainer::{evaluate as core_evaluate, train as core_train, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pydemesh, DemeshError, PyException);

fn err(e: demesh::error::DemeshError) -> PyErr {
    DemeshError::new_err(format!("{}: {e}", e.kind()))
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(DemeshError::new_err("invalid_argument: ragged image rows"));
    }
    Tensor::new(vec![1, h, w], rows.into_iter().flatten().collect()).map_err(err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().unwrap_or(&1);
    t.data().chunks(w.max(1)).map(<[f64]>::to_vec).collect()
}

fn eyes(e: (f64, f64, f64, f64)) -> Landmarks {
    Landmarks::new((e.0, e.1), (e.2, e.3))
}

/// The inpainting network ψ.
#[pyclass(name = "InpaintNet")]
struct PyInpaintNet {
    inner: demesh::fcn::InpaintNet,
}

#[pymethods]
impl PyInpaintNet {
    #[new]
    #[pyo3(signature = (seed=1, height=64, width=48, widths=vec![16, 32], kernel=3))]
    fn new(seed: u64, height: usize, width: usize, widths: Vec<usize>, kernel: usize) -> PyResult<Self> {
        let spec = ArchSpec {
            height,
            width,
            widths,
            kernel,
        };
        let inner = demesh::fcn::InpaintNet::build(spec, seed).map_err(err)?;
        Ok(PyInpaintNet { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        demesh::fcn::InpaintNet::load(&path).map(|inner| PyInpaintNet { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn forward(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_tensor(image)?;
        self.inner.forward(&x).map(|y| to_rows(&y)).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.spec().height, self.inner.spec().width)
    }
}

/// The frozen feature network φ.
#[pyclass(name = "FeatureNet")]
struct PyFeatureNet {
    inner: demesh::featnet::FeatureNet,
}

#[pymethods]
impl PyFeatureNet {
    #[staticmethod]
    fn fixed_random(seed: u64) -> PyResult<Self> {
        build_phi(PhiMode::FixedRandom, seed, PhiSpec::default(), &PretrainConfig::default())
            .map(|inner| PyFeatureNet { inner })
            .map_err(err)
    }

    /// Trains φ on a separate synthetic identity pool; takes tens of seconds.
    #[staticmethod]
    fn pretrained(seed: u64) -> PyResult<Self> {
        build_phi(PhiMode::Pretrain, seed, PhiSpec::default(), &PretrainConfig::default())
            .map(|inner| PyFeatureNet { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        demesh::featnet::FeatureNet::load(&path).map(|inner| PyFeatureNet { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn crop(&self) -> usize {
        self.inner.spec().crop
    }

    fn extract_feature(&self, crop: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = to_tensor(crop)?;
        self.inner.extract_feature(&x).map(|f| f.data().to_vec()).map_err(err)
    }
}

/// Writes a dataset directory; returns `(identities, triplets)`.
#[pyfunction]
#[pyo3(signature = (out, identities=100, per_id=20, seed=0, split="0.7/0.1/0.2", force=false))]
fn generate_dataset(out: PathBuf, identities: usize, per_id: usize, seed: u64, split: &str, force: bool) -> PyResult<(usize, usize)> {
    let cfg = DatasetConfig {
        identities,
        per_identity: per_id,
        seed,
        split: split.parse().map_err(err)?,
        ..DatasetConfig::default()
    };
    make_dataset(&cfg, &out, force).map_err(err)?;
    let r = validate_dir(&out).map_err(err)?;
    Ok((r.identities, r.triplets))
}

/// Triplets of one split as dicts with `name`, `x`, `y`, `mask`, `eyes`.
#[pyfunction]
#[pyo3(signature = (root, split="test"))]
fn load_triplets<'py>(py: Python<'py>, root: PathBuf, split: &str) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let split: Split = split.parse().map_err(err)?;
    let ds = load_dataset(&root).map_err(err)?;
    ds.triplets(split)
        .into_iter()
        .map(|t| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("name", t.name())?;
            d.set_item("x", to_rows(&t.x))?;
            d.set_item("y", to_rows(&t.y))?;
            d.set_item("mask", to_rows(&t.mask))?;
            d.set_item("eyes", (t.eyes.left.0, t.eyes.left.1, t.eyes.right.0, t.eyes.right.1))?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn psnr(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    demesh::verifier::psnr(&to_tensor(pred)?, &to_tensor(target)?, 1.0).map_err(err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let ta = Tensor::new(vec![a.len()], a).map_err(err)?;
    let tb = Tensor::new(vec![b.len()], b).map_err(err)?;
    demesh::verifier::cosine_similarity(&ta, &tb).map_err(err)
}

/// `(a, b, tx, ty)` mapping the canonical eyes onto normalized `eyes`.
#[pyfunction]
fn solve_similarity(eyes_norm: (f64, f64, f64, f64)) -> PyResult<(f64, f64, f64, f64)> {
    let p = demesh::stn::solve_similarity(&eyes(eyes_norm)).map_err(err)?;
    Ok((p.a, p.b, p.tx, p.ty))
}

#[pyfunction]
#[pyo3(signature = (image, eyes_px, crop_h=32, crop_w=32))]
fn align_face(image: Vec<Vec<f64>>, eyes_px: (f64, f64, f64, f64), crop_h: usize, crop_w: usize) -> PyResult<Vec<Vec<f64>>> {
    let (crop, _) = demesh::stn::align_face(&to_tensor(image)?, &eyes(eyes_px), crop_h, crop_w).map_err(err)?;
    Ok(to_rows(&crop))
}

/// `(value, grad)` of the weighted pixel loss for one image.
#[pyfunction]
fn pixel_loss(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>, mask: Vec<Vec<f64>>, mask_weight: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let l = core_pixel_loss(&to_tensor(pred)?, &to_tensor(target)?, &to_tensor(mask)?, mask_weight).map_err(err)?;
    Ok((l.value, to_rows(&l.grad)))
}

#[pyfunction]
fn reverse_huber(residuals: Vec<f64>, c: f64) -> PyResult<(f64, Vec<f64>)> {
    let r = Tensor::new(vec![residuals.len()], residuals).map_err(err)?;
    let l = core_reverse_huber(&r, c).map_err(err)?;
    Ok((l.value, l.grad.data().to_vec()))
}

/// Trains ψ; returns the network and the training log as TSV.
#[pyfunction]
#[pyo3(signature = (data, variant="DeMeshNet", steps=None, config=None, phi=None))]
fn train(
    py: Python<'_>,
    data: PathBuf,
    variant: &str,
    steps: Option<usize>,
    config: Option<&str>,
    phi: Option<PyRef<'_, PyFeatureNet>>,
) -> PyResult<(PyInpaintNet, String)> {
    let variant: Variant = variant.parse().map_err(err)?;
    let mut cfg = match config {
        Some(text) => TrainConfig::parse(text).map_err(err)?,
        None => TrainConfig::default(),
    };
    if cfg.variant != variant {
        cfg = cfg.with_variant(variant);
    }
    if let Some(s) = steps {
        cfg = cfg.with_steps(s);
    }
    let ds = load_dataset(&data).map_err(err)?;
    let phi = phi.map(|p| p.inner.clone());
    let (net, log) = py.detach(|| core_train(&cfg, &ds, phi.as_ref())).map_err(err)?;
    Ok((PyInpaintNet { inner: net }, log.to_tsv()))
}

/// Verification report TSV: the model row, then Clear and Corrupted.
#[pyfunction]
#[pyo3(signature = (net, data, phi, name="model"))]
fn evaluate(py: Python<'_>, net: PyRef<'_, PyInpaintNet>, data: PathBuf, phi: PyRef<'_, PyFeatureNet>, name: &str) -> PyResult<String> {
    let ds = load_dataset(&data).map_err(err)?;
    let (net, phi) = (net.inner.clone(), phi.inner.clone());
    let report = py.detach(|| core_evaluate(name, &net, &ds, &phi)).map_err(err)?;
    Ok(report.to_tsv())
}

/// `[(check, max_rel_error, passed)]` for one gradient suite.
#[pyfunction]
#[pyo3(signature = (module="all", seed=0))]
fn gradcheck(module: &str, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let suite = module.parse().map_err(err)?;
    let results = run_suite(suite, seed, false).map_err(err)?;
    Ok(results.into_iter().map(|r| (r.name.to_string(), r.max_rel_error, r.passed())).collect())
}

#[pymodule]
fn pydemesh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DemeshError", m.py().get_type::<DemeshError>())?;
    m.add_class::<PyInpaintNet>()?;
    m.add_class::<PyFeatureNet>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_triplets, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(solve_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(align_face, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_huber, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_roundtrip() {
        let rows = vec![vec![0.0, 0.5, 1.0], vec![0.25, 0.75, 0.125]];
        let t = to_tensor(rows.clone()).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(to_rows(&t), rows);
    }

    #[test]
    fn forward_keeps_extent() {
        let net = PyInpaintNet::new(3, 8, 12, vec![2], 3).unwrap();
        let y = net.forward(vec![vec![0.5; 12]; 8]).unwrap();
        assert_eq!((y.len(), y[0].len()), (8, 12));
    }
}

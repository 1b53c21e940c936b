//! Python bindings: XYZ parsing, molecule metrics, trend statistics and
//! latent operations on a saved checkpoint.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molflae::manipulate;
use molflae::metrics;
use molflae::moldata::{self, AtomVocabulary};
use molflae::training::{Checkpoint, Model, TrainConfig};
use molflae::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vocab(name: &str) -> PyResult<AtomVocabulary> {
    AtomVocabulary::named(name).map_err(py_err)
}

/// A molecule as element symbols and coordinates in Å.
#[pyclass(name = "Molecule", from_py_object)]
#[derive(Clone)]
pub struct PyMolecule {
    inner: moldata::Molecule,
    vocab: AtomVocabulary,
}

#[pymethods]
impl PyMolecule {
    #[new]
    #[pyo3(signature = (symbols, coords, vocab = "qm9"))]
    fn new(symbols: Vec<String>, coords: Vec<[f64; 3]>, vocab: &str) -> PyResult<Self> {
        let v = self::vocab(vocab)?;
        let types = symbols
            .iter()
            .map(|s| v.index_of(s).ok_or_else(|| PyValueError::new_err(format!("unknown element {s:?}"))))
            .collect::<PyResult<Vec<_>>>()?;
        let inner = moldata::Molecule::new(coords, types, v.size()).map_err(py_err)?;
        Ok(PyMolecule { inner, vocab: v })
    }

    #[getter]
    fn symbols(&self) -> Vec<String> {
        self.inner.types.iter().map(|&t| self.vocab.symbol(t).to_string()).collect()
    }

    #[getter]
    fn coords(&self) -> Vec<[f64; 3]> {
        self.inner.coords.clone()
    }

    #[getter]
    fn name(&self) -> Option<String> {
        self.inner.name.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.num_atoms()
    }

    fn centroid(&self) -> [f64; 3] {
        self.inner.centroid()
    }

    fn atom_stability(&self) -> f64 {
        metrics::atom_stability(&self.inner, &self.vocab)
    }

    fn is_stable(&self) -> bool {
        metrics::mol_stability(&self.inner, &self.vocab)
    }

    fn is_valid(&self) -> bool {
        metrics::validity(&self.inner, &self.vocab)
    }

    fn radius_of_gyration(&self) -> f64 {
        metrics::radius_of_gyration(&self.inner)
    }

    fn shape_similarity(&self, other: &PyMolecule) -> PyResult<f64> {
        metrics::shape_similarity(&self.inner, &other.inner, &self.vocab).map_err(py_err)
    }

    /// Returns `(type_accuracy, mean_distance)` against a same-size reference.
    fn recovery(&self, reference: &PyMolecule) -> PyResult<(f64, f64)> {
        let r = metrics::recovery(&reference.inner, &self.inner).map_err(py_err)?;
        Ok((r.type_accuracy, r.mean_distance))
    }

    fn to_xyz(&self) -> String {
        moldata::write_xyz(std::slice::from_ref(&self.inner), &self.vocab)
    }

    fn __repr__(&self) -> String {
        format!("Molecule({} atoms)", self.inner.num_atoms())
    }
}

fn wrap(mols: Vec<moldata::Molecule>, vocab: &AtomVocabulary) -> Vec<PyMolecule> {
    mols.into_iter()
        .map(|inner| PyMolecule {
            inner,
            vocab: vocab.clone(),
        })
        .collect()
}

/// Parses every frame of an XYZ document.
#[pyfunction]
#[pyo3(signature = (text, vocab = "qm9"))]
fn parse_xyz(text: &str, vocab: &str) -> PyResult<Vec<PyMolecule>> {
    let v = self::vocab(vocab)?;
    let mols = moldata::parse_xyz(text, &v).map_err(py_err)?;
    Ok(wrap(mols, &v))
}

/// Returns `(pearson_r, neg_log10_p)` of `values` against `sign * index`.
#[pyfunction]
#[pyo3(signature = (values, sign = 1.0, cap = 300.0))]
fn pearson_trend(values: Vec<f64>, sign: f64, cap: f64) -> PyResult<(f64, f64)> {
    let r = metrics::pearson_trend(&values, sign, cap).map_err(py_err)?;
    Ok((r.pearson_r, r.neg_log_p))
}

/// A trained autoencoder loaded from a checkpoint.
#[pyclass(name = "Model")]
pub struct PyModel {
    model: Model,
}

impl PyModel {
    fn own(&self, mol: &PyMolecule) -> PyResult<()> {
        if mol.vocab.symbols() != self.model.vocab.symbols() {
            return Err(PyValueError::new_err("molecule vocabulary differs from the model's"));
        }
        Ok(())
    }
}

#[pymethods]
impl PyModel {
    /// Untrained model with the count prior fitted to `dataset`.
    /// `config` holds `key=value` lines overriding the defaults.
    #[new]
    #[pyo3(signature = (dataset, config = ""))]
    fn new(dataset: Vec<PyMolecule>, config: &str) -> PyResult<Self> {
        let first = dataset.first().ok_or_else(|| PyValueError::new_err("empty dataset"))?;
        let vocab = first.vocab.clone();
        let mols: Vec<_> = dataset.iter().map(|m| m.inner.clone()).collect();
        let cfg = TrainConfig::parse(config).map_err(py_err)?;
        let prior = moldata::AtomCountPrior::fit(&mols).map_err(py_err)?;
        let model = Model::new(cfg, vocab, prior).map_err(py_err)?;
        Ok(PyModel { model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Ok(PyModel { model: ck.model })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let ck = Checkpoint::from_bytes(data).map_err(py_err)?;
        Ok(PyModel { model: ck.model })
    }

    #[getter]
    fn vocabulary(&self) -> Vec<String> {
        self.model.vocab.symbols().to_vec()
    }

    /// Posterior mean as `(z_x, z_h)` row lists, in the molecule's centred frame.
    fn encode(&self, mol: &PyMolecule) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.own(mol)?;
        let z = manipulate::encode_mean(&self.model, &mol.inner).map_err(py_err)?;
        let rows = |t: &molflae::tensor::Tensor| t.data.chunks(t.cols).map(<[f64]>::to_vec).collect();
        Ok((rows(&z.z_x), rows(&z.z_h)))
    }

    #[pyo3(signature = (count, steps = 100, seed = 0))]
    fn generate(&self, count: usize, steps: usize, seed: u64) -> PyResult<Vec<PyMolecule>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mols = manipulate::generate(&self.model, count, steps, &mut rng).map_err(py_err)?;
        Ok(wrap(mols, &self.model.vocab))
    }

    #[pyo3(signature = (mol, delta = 0, steps = 100, seed = 0))]
    fn analog(&self, mol: &PyMolecule, delta: i64, steps: usize, seed: u64) -> PyResult<PyMolecule> {
        self.own(mol)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = manipulate::analog(&self.model, &mol.inner, delta, steps, &mut rng).map_err(py_err)?;
        Ok(wrap(vec![out], &self.model.vocab).remove(0))
    }

    #[pyo3(signature = (a, b, steps = 100, seed = 0))]
    fn swap(&self, a: &PyMolecule, b: &PyMolecule, steps: usize, seed: u64) -> PyResult<(PyMolecule, PyMolecule)> {
        self.own(a)?;
        self.own(b)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = manipulate::swap(&self.model, &a.inner, &b.inner, steps, &mut rng).map_err(py_err)?;
        let mut out = wrap(vec![x, y], &self.model.vocab);
        let y = out.pop().unwrap();
        Ok((out.pop().unwrap(), y))
    }

    #[pyo3(signature = (a, b, points, steps = 100, seed = 0))]
    fn interpolate(&self, a: &PyMolecule, b: &PyMolecule, points: usize, steps: usize, seed: u64) -> PyResult<Vec<PyMolecule>> {
        self.own(a)?;
        self.own(b)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mols = manipulate::interpolate(&self.model, &a.inner, &b.inner, points, steps, &mut rng).map_err(py_err)?;
        Ok(wrap(mols, &self.model.vocab))
    }
}

/// Adds the classes and functions to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMolecule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_xyz, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_trend, m)?)?;
    Ok(())
}

#[pymodule]
fn molflae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

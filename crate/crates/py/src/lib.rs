//! Python module `terralabel`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use terralabel::clustering::{self, FcmParams, Spectra};
use terralabel::ingest::{self, Split};
use terralabel::matching;
use terralabel::projection::{self, Level, UmapParams};
use terralabel::superpixels::{self, SlicParams};

fn err(e: terralabel::Error) -> PyErr {
    match e {
        terralabel::Error::Io(io) => PyIOError::new_err(io.to_string()),
        terralabel::Error::Missing(p) => PyIOError::new_err(format!("missing {}", p.display())),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Row-major flattening that rejects ragged input.
fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(usize, usize, Vec<T>)> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok((rows.len(), cols, rows.iter().flatten().copied().collect()))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Square multiband chip, band-major.
#[pyclass(name = "Chip", module = "terralabel", frozen)]
pub struct PyChip(ingest::Chip);

#[pymethods]
impl PyChip {
    #[new]
    fn new(id: String, bands: usize, size: usize, data: Vec<f32>) -> PyResult<Self> {
        ingest::Chip::from_data(id, bands, size, data).map(Self).map_err(err)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn bands(&self) -> usize {
        self.0.bands
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    fn plane(&self, band: usize) -> PyResult<Vec<f32>> {
        if band >= self.0.bands {
            return Err(PyValueError::new_err(format!("band {band} out of range")));
        }
        Ok(self.0.plane(band).to_vec())
    }

    /// Counter-clockwise quarter turns.
    fn rotated(&self, quarter_turns: usize) -> Self {
        Self(self.0.rotated(quarter_turns))
    }

    fn __repr__(&self) -> String {
        format!("Chip({:?}, bands={}, size={})", self.0.id, self.0.bands, self.0.size)
    }
}

#[pyclass(name = "ChipStore", module = "terralabel", frozen)]
pub struct PyChipStore(ingest::ChipStore);

#[pymethods]
impl PyChipStore {
    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        ingest::ChipStore::open(path).map(Self).map_err(err)
    }

    #[getter]
    fn chip_size(&self) -> usize {
        self.0.manifest().chip_size
    }

    #[getter]
    fn bands(&self) -> usize {
        self.0.manifest().bands
    }

    fn chip_ids(&self) -> Vec<String> {
        self.0.chip_ids()
    }

    /// `"train"`, `"test"` or `None` for an unknown id.
    fn split_of(&self, id: &str) -> Option<&'static str> {
        self.0.split_of(id).map(split_name)
    }

    fn read_chip(&self, id: &str) -> PyResult<PyChip> {
        self.0.read_chip(id).map(PyChip).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.chip_ids().len()
    }
}

#[pyclass(name = "SegmentMap", module = "terralabel", frozen)]
pub struct PySegmentMap(superpixels::SegmentMap);

#[pymethods]
impl PySegmentMap {
    #[staticmethod]
    fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> PyResult<Self> {
        superpixels::SegmentMap::from_labels(height, width, &labels).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        superpixels::SegmentMap::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels.clone()
    }

    /// `(row, col)` per segment.
    fn centroids(&self) -> Vec<(f64, f64)> {
        self.0.centroids().into_iter().map(|[r, c]| (r, c)).collect()
    }

    fn pixel_counts(&self) -> Vec<usize> {
        self.0.segments.iter().map(|s| s.pixel_count).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "FcmModel", module = "terralabel", frozen)]
pub struct PyFcmModel(clustering::FcmModel);

#[pymethods]
impl PyFcmModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        clustering::FcmModel::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn clusters(&self) -> usize {
        self.0.clusters
    }

    #[getter]
    fn centroids(&self) -> Vec<Vec<f64>> {
        self.0.centroids.clone()
    }

    fn membership(&self, spectrum: Vec<f32>) -> PyResult<Vec<f64>> {
        if spectrum.len() != self.0.bands() {
            return Err(PyValueError::new_err(format!("expected {} bands", self.0.bands())));
        }
        Ok(self.0.membership(&spectrum))
    }

    /// Hard cluster per pixel of a chip.
    fn predict_chip(&self, chip: &PyChip) -> PyResult<Vec<usize>> {
        Ok(self.0.predict_chip(&chip.0).map_err(err)?.argmax())
    }
}

/// Fit fuzzy C-means; returns the model and the objective after each
/// iteration.
#[pyfunction]
#[pyo3(signature = (samples, clusters, m = 2.0, seed = 0))]
fn fcm_fit(samples: Vec<Vec<f32>>, clusters: usize, m: f64, seed: u64) -> PyResult<(PyFcmModel, Vec<f64>)> {
    flatten(&samples)?;
    let params = FcmParams {
        m,
        seed,
        ..FcmParams::new(clusters)
    };
    let fit = clustering::fcm_fit(&Spectra::from_rows(&samples), &params).map_err(err)?;
    Ok((PyFcmModel(fit.model), fit.objective))
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("labelings differ in length"));
    }
    Ok(clustering::adjusted_rand_index(&a, &b))
}

#[pyfunction]
#[pyo3(signature = (chip, n_segments, compactness = 10.0))]
fn slic(chip: &PyChip, n_segments: usize, compactness: f64) -> PyResult<PySegmentMap> {
    let params = SlicParams {
        compactness,
        ..SlicParams::with_segments(n_segments)
    };
    superpixels::slic(&chip.0, &params).map(PySegmentMap).map_err(err)
}

/// Mean of `channels` band-major maps inside each segment.
#[pyfunction]
fn segment_means(segments: &PySegmentMap, maps: Vec<f32>, channels: usize) -> PyResult<Vec<Vec<f32>>> {
    superpixels::segment_means(&segments.0, &maps, channels).map_err(err)
}

/// Chip rows and columns for a tile; errors if the tile is smaller than a chip.
#[pyfunction]
fn chip_grid(height: usize, width: usize, size: usize) -> PyResult<(usize, usize)> {
    ingest::chip_grid(height, width, size).map_err(err)
}

/// Minimum-cost assignment; returns `(row, col)` pairs and the total cost.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let (rows, cols, flat) = flatten(&cost)?;
    let a = matching::hungarian(rows, cols, &flat).map_err(err)?;
    Ok((a.pairs, a.total_cost))
}

/// Mean cosine similarity of optimally matched segment embeddings.
#[pyfunction]
fn chip_similarity(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>) -> PyResult<f64> {
    flatten(&a)?;
    flatten(&b)?;
    matching::chip_similarity(&a, &b).map_err(err)
}

#[pyfunction]
fn load_similarity(path: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let sim = matching::SimilarityMatrix::load(&path).map_err(err)?;
    let rows = (0..sim.len()).map(|i| sim.row(i).to_vec()).collect();
    Ok((sim.ids, rows))
}

/// 2-D UMAP layout of row vectors (Euclidean distance).
#[pyfunction]
#[pyo3(signature = (vectors, n_neighbors = 15, min_dist = 0.1, epochs = 200, seed = 0))]
fn umap(vectors: Vec<Vec<f32>>, n_neighbors: usize, min_dist: f64, epochs: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    flatten(&vectors)?;
    let ids = (0..vectors.len()).map(|i| i.to_string()).collect();
    let params = UmapParams {
        n_neighbors,
        min_dist,
        epochs,
        seed,
    };
    let p = projection::project_vectors(ids, &vectors, Level::Segment, params).map_err(err)?;
    Ok(p.coords.into_iter().map(|[x, y]| (x, y)).collect())
}

#[pyfunction]
fn load_projection(path: PathBuf) -> PyResult<(Vec<String>, Vec<(f64, f64)>)> {
    let p = projection::Projection2D::load(&path).map_err(err)?;
    Ok((p.ids, p.coords.into_iter().map(|[x, y]| (x, y)).collect()))
}

#[pymodule]
#[pyo3(name = "terralabel")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChip>()?;
    m.add_class::<PyChipStore>()?;
    m.add_class::<PySegmentMap>()?;
    m.add_class::<PyFcmModel>()?;
    m.add_function(wrap_pyfunction!(fcm_fit, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(slic, m)?)?;
    m.add_function(wrap_pyfunction!(segment_means, m)?)?;
    m.add_function(wrap_pyfunction!(chip_grid, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(chip_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(load_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(umap, m)?)?;
    m.add_function(wrap_pyfunction!(load_projection, m)?)?;
    Ok(())
}

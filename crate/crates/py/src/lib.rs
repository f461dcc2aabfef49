//! Python bindings. Images are nested lists of floats in [0, 1] (rows of
//! columns, one channel); masks are nested lists whose truthy entries are
//! foreground.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use rich_unet::harness::checkpoint::{decode_state, encode_state, load_checkpoint, save_checkpoint};
use rich_unet::harness::config::RunConfig;
use rich_unet::harness::data::{synth_dataset, SegmentationSample};
use rich_unet::harness::eval::{evaluate, predict_masks};
use rich_unet::harness::pgm::{decode_pgm, encode_pgm, parse_pgm, quantize};
use rich_unet::harness::train::{train, TrainState};
use rich_unet::metrics::{self, BinaryMask};
use rich_unet::tensor::Tensor;
use rich_unet::Error;

type Grid<T> = Vec<Vec<T>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn dims<T>(grid: &Grid<T>) -> PyResult<(usize, usize)> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || grid.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Ok((h, w))
}

fn to_image(grid: &Grid<f64>) -> PyResult<Tensor> {
    let (h, w) = dims(grid)?;
    Tensor::new(&[1, h, w], grid.concat()).map_err(py_err)
}

fn to_mask(grid: &Grid<i64>) -> PyResult<BinaryMask> {
    let (h, w) = dims(grid)?;
    BinaryMask::new(h, w, grid.iter().flatten().map(|&v| v != 0).collect()).map_err(py_err)
}

fn from_image(t: &Tensor) -> Grid<f64> {
    let w = *t.shape().last().unwrap();
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

fn from_mask(m: &BinaryMask) -> Grid<bool> {
    m.data().chunks(m.width()).map(<[bool]>::to_vec).collect()
}

fn samples(images: &[Grid<f64>], masks: &[Grid<i64>]) -> PyResult<Vec<SegmentationSample>> {
    if images.len() != masks.len() {
        return Err(PyValueError::new_err("images and masks differ in length"));
    }
    images
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (im, m))| SegmentationSample::new(to_image(im)?, to_mask(m)?, format!("{i:04}")).map_err(py_err))
        .collect()
}

/// Network, optimizer and RNG state of one training run.
#[pyclass]
struct Trainer {
    state: TrainState,
}

#[pymethods]
impl Trainer {
    /// `config` uses the same `key = value` text as the CLI config file.
    #[new]
    #[pyo3(signature = (config = "", seed = None))]
    fn new(config: &str, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = RunConfig::parse(config).map_err(py_err)?;
        if let Some(seed) = seed {
            cfg.train.seed = seed;
        }
        let state = TrainState::new(&cfg.net, cfg.train).map_err(py_err)?;
        Ok(Self { state })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            state: decode_state(data).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_state(&self.state))
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.state.net.store().num_scalars()
    }

    /// Trains until the step counter reaches `until`; returns
    /// `(step, loss, dice)` for each step taken.
    fn train(&mut self, images: Vec<Grid<f64>>, masks: Vec<Grid<i64>>, until: usize) -> PyResult<Vec<(usize, f64, f64)>> {
        let data = samples(&images, &masks)?;
        let log = train(&mut self.state, &data, until, |_, _| Ok(())).map_err(py_err)?;
        Ok(log.into_iter().map(|l| (l.step, l.loss, l.dice)).collect())
    }

    fn predict(&self, image: Grid<f64>) -> PyResult<Grid<bool>> {
        let t = to_image(&image)?;
        let batch = t.reshape(&[1, 1, t.shape()[1], t.shape()[2]]).map_err(py_err)?;
        self.state.net.config().validate_input(batch.shape()).map_err(py_err)?;
        let masks = predict_masks(&self.state.net, &batch).map_err(py_err)?;
        Ok(from_mask(&masks[0]))
    }

    /// Mean scores plus the per-sample CSV report.
    fn evaluate(&mut self, images: Vec<Grid<f64>>, masks: Vec<Grid<i64>>) -> PyResult<(f64, f64, Option<f64>, String)> {
        let data = samples(&images, &masks)?;
        let report = evaluate(&mut self.state.net, &data).map_err(py_err)?;
        Ok((report.mean_dice, report.mean_iou, report.mean_hd95, report.to_csv()))
    }
}

/// Generated ellipse dataset as `(id, image, mask)` triples.
#[pyfunction]
#[pyo3(signature = (n, size = 64, seed = 0))]
fn synth(n: usize, size: usize, seed: u64) -> PyResult<Vec<(String, Grid<f64>, Grid<bool>)>> {
    let data = synth_dataset(n, size, size, seed).map_err(py_err)?;
    Ok(data.iter().map(|s| (s.id.clone(), from_image(&s.image), from_mask(&s.mask))).collect())
}

#[pyfunction]
fn dice(pred: Grid<i64>, gt: Grid<i64>) -> PyResult<f64> {
    metrics::dice(&to_mask(&pred)?, &to_mask(&gt)?).map_err(py_err)
}

#[pyfunction]
fn iou(pred: Grid<i64>, gt: Grid<i64>) -> PyResult<f64> {
    metrics::iou(&to_mask(&pred)?, &to_mask(&gt)?).map_err(py_err)
}

/// Raises `ValueError` when either mask is empty.
#[pyfunction]
fn hd95(pred: Grid<i64>, gt: Grid<i64>) -> PyResult<f64> {
    metrics::hd95(&to_mask(&pred)?, &to_mask(&gt)?).map_err(py_err)
}

#[pyfunction]
fn read_pgm(data: &[u8]) -> PyResult<Grid<f64>> {
    Ok(from_image(&parse_pgm(data).map_err(py_err)?))
}

#[pyfunction]
fn write_pgm<'py>(py: Python<'py>, image: Grid<f64>) -> PyResult<Bound<'py, PyBytes>> {
    let (h, w, px) = quantize(&to_image(&image)?).map_err(py_err)?;
    Ok(PyBytes::new(py, &encode_pgm(h, w, &px)))
}

/// Raw 8-bit pixels of a P5 file as `(height, width, bytes)`.
#[pyfunction]
fn read_pgm_raw<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
    let (h, w, px) = decode_pgm(data).map_err(py_err)?;
    Ok((h, w, PyBytes::new(py, &px)))
}

#[pymodule]
fn rich_unet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(write_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm_raw, m)?)?;
    Ok(())
}

//! Python bindings: tensors, water synthesis, the network, losses, metrics
//! and HSI post-processing.
//!
//! Images cross the boundary as nested `[row][column][channel]` lists of
//! floats, so no array library is required on the Python side.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use uwcnn_core::error::Error;
use uwcnn_core::imageio::{self, Rgb8Image};
use uwcnn_core::model::{Model, ModelConfig};
use uwcnn_core::tensor::Tensor;
use uwcnn_core::verify::{self, SuiteOptions};
use uwcnn_core::watersim::{self, SynthesisParams, WaterType};
use uwcnn_core::{color, loss, quality, train};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::State(_) => PyRuntimeError::new_err(msg),
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::Format { .. } => {
            PyValueError::new_err(msg)
        }
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for uwcnn_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense `height × width × channels` image of floats.
#[pyclass(name = "Tensor", module = "uwcnn", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

impl From<Tensor> for PyTensor {
    fn from(inner: Tensor) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    /// Builds a tensor from nested `[row][column][channel]` lists.
    #[new]
    fn new(rows: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(h * w * c);
        for (y, row) in rows.iter().enumerate() {
            if row.len() != w {
                return Err(PyValueError::new_err(format!(
                    "row {y} has {} columns, expected {w}",
                    row.len()
                )));
            }
            for px in row {
                if px.len() != c {
                    return Err(PyValueError::new_err(format!(
                        "pixel in row {y} has {} channels, expected {c}",
                        px.len()
                    )));
                }
                data.extend_from_slice(px);
            }
        }
        Tensor::from_vec(h, w, c, data).py().map(Into::into)
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor::zeros(height, width, channels).into()
    }

    /// Reads an RGB PNG/PNM scaled to `[0, 1]`.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        imageio::read_image(path).py().map(Into::into)
    }

    /// Reads a 16-bit depth PNG normalized to `[0, 1]`.
    #[staticmethod]
    fn read_depth(path: &str) -> PyResult<Self> {
        imageio::read_depth(path).py().map(|d| d.depth.into())
    }

    /// Writes an 8-bit RGB image, clamping to `[0, 1]`.
    fn write(&self, path: &str) -> PyResult<()> {
        imageio::write_image(&self.inner, path).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<Vec<Vec<f64>>> {
        let (h, w, c) = self.inner.shape();
        let d = self.inner.data();
        (0..h)
            .map(|y| (0..w).map(|x| d[(y * w + x) * c..][..c].to_vec()).collect())
            .collect()
    }

    fn get(&self, y: usize, x: usize, c: usize) -> PyResult<f64> {
        let (h, w, ch) = self.inner.shape();
        if y >= h || x >= w || c >= ch {
            return Err(PyValueError::new_err(format!(
                "index ({y}, {x}, {c}) outside {h}x{w}x{ch}"
            )));
        }
        Ok(self.inner.get(y, x, c))
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.inner.shape();
        format!("Tensor({h}x{w}x{c})")
    }
}

/// One of the ten water types, by name (`"I"`, `"IA"`, ..., `"9"`).
#[pyclass(name = "WaterType", module = "uwcnn", from_py_object)]
#[derive(Clone)]
pub struct PyWaterType {
    inner: WaterType,
}

#[pymethods]
impl PyWaterType {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        name.parse().py().map(|inner| PyWaterType { inner })
    }

    #[staticmethod]
    fn names() -> Vec<&'static str> {
        WaterType::valid_names()
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    /// Fraction of light left per metre, `[red, green, blue]`.
    #[getter]
    fn residual_energy(&self) -> [f64; 3] {
        self.inner.residual_energy()
    }

    fn __repr__(&self) -> String {
        format!("WaterType({:?})", self.inner.name())
    }
}

/// Transmission `N^d` for a single-channel depth map in metres.
#[pyfunction]
fn transmission(water_type: &PyWaterType, depth: &PyTensor) -> PyResult<PyTensor> {
    watersim::transmission(water_type.inner, &depth.inner)
        .py()
        .map(Into::into)
}

/// Degrades `clean` with depth in metres and background light `background`.
#[pyfunction]
#[pyo3(signature = (clean, depth, water_type, background, depth_max=10.0, depth_min=0.5))]
fn synthesize(
    clean: &PyTensor,
    depth: &PyTensor,
    water_type: &PyWaterType,
    background: [f64; 3],
    depth_max: f64,
    depth_min: f64,
) -> PyResult<PyTensor> {
    let params = SynthesisParams {
        background,
        depth_min,
        depth_max,
        water_type: water_type.inner,
        seed: 0,
    };
    params.validate().py()?;
    watersim::synthesize(&clean.inner, &depth.inner, &params)
        .py()
        .map(Into::into)
}

/// The enhancement network.
#[pyclass(name = "Model", module = "uwcnn")]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0, residual_learning=true, dense_concat=true, num_blocks=3, convs_per_block=3, feature_maps=16))]
    fn new(
        seed: u64,
        residual_learning: bool,
        dense_concat: bool,
        num_blocks: usize,
        convs_per_block: usize,
        feature_maps: usize,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            num_blocks,
            convs_per_block,
            feature_maps,
            residual_learning,
            dense_concat,
            seed,
        };
        Model::build(config).py().map(|inner| PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Model::load(path).py().map(|inner| PyModel { inner })
    }

    #[pyo3(signature = (path, water_type_tag=""))]
    fn save(&self, path: &str, water_type_tag: &str) -> PyResult<()> {
        self.inner.save(path, water_type_tag).py()
    }

    /// Raw network output (input plus residual when residual learning is on).
    fn forward(&self, image: &PyTensor) -> PyResult<PyTensor> {
        self.inner.predict(&image.inner).py().map(Into::into)
    }

    /// Network output clamped to `[0, 1]`.
    fn enhance(&self, image: &PyTensor) -> PyResult<PyTensor> {
        train::enhance(&self.inner, &image.inner).py().map(Into::into)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Input channel count of every convolution layer, in order.
    #[getter]
    fn layer_input_channels(&self) -> Vec<usize> {
        self.inner.layers().iter().map(|l| l.in_channels()).collect()
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(blocks={}, convs_per_block={}, feature_maps={}, residual_learning={}, dense_concat={}, parameters={})",
            c.num_blocks,
            c.convs_per_block,
            c.feature_maps,
            c.residual_learning,
            c.dense_concat,
            self.inner.parameter_count()
        )
    }
}

/// `(mse, ssim_loss, total)` of the training objective.
#[pyfunction]
#[pyo3(signature = (prediction, target, include_ssim=true))]
fn training_loss(prediction: &PyTensor, target: &PyTensor, include_ssim: bool) -> PyResult<(f64, f64, f64)> {
    let r = loss::objective(&prediction.inner, &target.inner, include_ssim).py()?;
    Ok((r.mse, r.ssim_loss, r.total))
}

fn to_rgb8(t: &PyTensor) -> PyResult<Rgb8Image> {
    Rgb8Image::from_tensor(&t.inner).py()
}

/// `(mse, psnr, ssim)` on the 8-bit scale.
#[pyfunction]
fn image_quality(reference: &PyTensor, test: &PyTensor) -> PyResult<(f64, f64, f64)> {
    let (a, b) = (to_rgb8(reference)?, to_rgb8(test)?);
    Ok((
        quality::mse_metric(&a, &b).py()?,
        quality::psnr_metric(&a, &b).py()?,
        quality::ssim_metric(&a, &b).py()?,
    ))
}

#[pyfunction]
fn psnr_from_mse(mse: f64) -> f64 {
    quality::psnr_from_mse(mse)
}

/// HSI saturation/intensity stretch with hue kept fixed.
#[pyfunction]
fn postprocess(image: &PyTensor) -> PyResult<PyTensor> {
    color::postprocess(&image.inner).py().map(Into::into)
}

/// `(hue or None, saturation, intensity)` of one RGB pixel.
#[pyfunction]
fn rgb_to_hsi(r: f64, g: f64, b: f64) -> (Option<f64>, f64, f64) {
    color::rgb_pixel_to_hsi(r, g, b)
}

#[pyfunction]
#[pyo3(signature = (hue, saturation, intensity))]
fn hsi_to_rgb(hue: Option<f64>, saturation: f64, intensity: f64) -> PyResult<[f64; 3]> {
    color::hsi_pixel_to_rgb(hue, saturation, intensity).py()
}

/// Runs the finite-difference suite; returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (size=8, seed=0, weights_per_layer=32))]
fn gradient_check(py: Python<'_>, size: usize, seed: u64, weights_per_layer: usize) -> PyResult<(bool, String)> {
    let options = SuiteOptions {
        height: size,
        width: size,
        seed,
        weights_per_layer: (weights_per_layer > 0).then_some(weights_per_layer),
        ..Default::default()
    };
    let report = py.detach(|| verify::run_suite(&options)).py()?;
    Ok((report.passed(), report.to_text()))
}

#[pymodule]
fn uwcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyWaterType>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(transmission, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(training_loss, m)?)?;
    m.add_function(wrap_pyfunction!(image_quality, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_from_mse, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(rgb_to_hsi, m)?)?;
    m.add_function(wrap_pyfunction!(hsi_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}

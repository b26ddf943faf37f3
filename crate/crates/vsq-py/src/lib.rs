//! Python bindings: tensors, calibration, per-vector quantization, the
//! quantized network runner, and the analytical cost formulas.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vsq_core::calibration::{self, CalibMethod, Granularity};
use vsq_core::cost;
use vsq_core::datapath::{DatapathConfig, ScaleWidth};
use vsq_core::error::VsqError;
use vsq_core::fixture;
use vsq_core::nn::{self, RunMode};
use vsq_core::quant::{self, QuantConfig, Rounding, ScaleMode};

fn err(e: VsqError) -> PyErr {
    match e {
        VsqError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_granularity(name: &str, v: usize) -> PyResult<Granularity> {
    Ok(match name {
        "per-layer" => Granularity::PerLayer,
        "per-channel" => Granularity::PerChannel,
        "per-vector" => Granularity::PerVector { v },
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown granularity {name:?}"
            )))
        }
    })
}

/// A dense float32 tensor of rank 1-4.
#[pyclass(name = "Tensor")]
#[derive(Clone)]
struct PyTensor {
    inner: vsq_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: vsq_core::Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTensor {
            inner: vsq_core::Tensor::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed, scale=1.0))]
    fn seeded(shape: Vec<usize>, seed: u64, scale: f32) -> PyResult<Self> {
        Ok(PyTensor {
            inner: fixture::seeded_tensor(&shape, seed, scale).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Integer tensor plus its scale set.
#[pyclass(name = "QuantizedTensor")]
struct PyQuantizedTensor {
    inner: quant::QuantizedTensor,
}

#[pymethods]
impl PyQuantizedTensor {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    #[getter]
    fn int_data(&self) -> Vec<i32> {
        self.inner.int_data.clone()
    }

    #[getter]
    fn bits(&self) -> u8 {
        self.inner.bits
    }

    /// Floating-point scale per vector.
    #[getter]
    fn scales(&self) -> Vec<f64> {
        self.inner.scales.per_group_fp.clone()
    }

    /// Integer per-vector scale codes s_q (two-level only).
    #[getter]
    fn s_q(&self) -> Vec<u32> {
        self.inner.scales.per_vector_int.clone()
    }

    /// Coarse gamma per output channel (two-level only).
    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.scales.coarse_fp.clone()
    }

    #[getter]
    fn two_level(&self) -> bool {
        self.inner.scales.mode == ScaleMode::TwoLevel
    }

    fn reconstruct(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.reconstruct(),
        }
    }

    fn save(&self, path: &str) -> PyResult<()> {
        quant::save_vsq(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyQuantizedTensor {
            inner: quant::load_vsq(path).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizedTensor(shape={:?}, bits={}, two_level={})",
            self.inner.shape,
            self.inner.bits,
            self.two_level()
        )
    }
}

/// Clip-range calibration; returns one alpha per scaling group.
#[pyfunction]
#[pyo3(signature = (t, granularity="per-vector", v=16, method="max", q=0.999, bits=8))]
fn calibrate(
    t: &PyTensor,
    granularity: &str,
    v: usize,
    method: &str,
    q: f64,
    bits: u8,
) -> PyResult<Vec<f64>> {
    let g = parse_granularity(granularity, v)?;
    let m = match method {
        "max" => CalibMethod::Max,
        "percentile" => CalibMethod::Percentile { q },
        "entropy" => CalibMethod::Entropy { bits },
        "mse" => CalibMethod::Mse { bits },
        _ => return Err(PyValueError::new_err(format!("unknown method {method:?}"))),
    };
    Ok(calibration::calibrate(&t.inner, g, m).map_err(err)?.alphas)
}

/// Max-calibrated per-vector quantization; two-level factors the scale into
/// an M-bit integer and a per-channel gamma.
#[pyfunction]
#[pyo3(signature = (t, n=4, m=4, v=16, two_level=true))]
fn quantize(t: &PyTensor, n: u8, m: u8, v: usize, two_level: bool) -> PyResult<PyQuantizedTensor> {
    let g = Granularity::PerVector { v };
    let alphas = calibration::calibrate(&t.inner, g, CalibMethod::Max).map_err(err)?;
    let inner = if two_level {
        quant::quantize_two_level(
            &t.inner,
            n,
            true,
            false,
            m,
            v,
            &alphas,
            Rounding::HalfAwayFromZero,
        )
        .map_err(err)?
    } else {
        quant::quantize_single(
            &t.inner,
            n,
            true,
            false,
            g,
            &alphas,
            Rounding::HalfAwayFromZero,
        )
        .map_err(err)?
    };
    Ok(PyQuantizedTensor { inner })
}

/// Storage overhead M / (V * N).
#[pyfunction]
fn memory_overhead(n: u8, m: u8, v: usize) -> PyResult<f64> {
    cost::memory_overhead(n, m, v).map_err(err)
}

/// Effective storage bits per element: N + M/V.
#[pyfunction]
fn effective_bitwidth(n: u8, m: u8, v: usize) -> PyResult<f64> {
    cost::effective_bitwidth(n, m, v).map_err(err)
}

/// Datapath wire widths for a configuration; scale widths of None mean a
/// coarse-scaled operand.
#[pyfunction]
#[pyo3(signature = (n_w=4, n_a=4, m_w=Some(4), m_a=Some(4), v=16, scale_product_bits=None))]
fn datapath_widths<'py>(
    py: Python<'py>,
    n_w: u8,
    n_a: u8,
    m_w: Option<u8>,
    m_a: Option<u8>,
    v: usize,
    scale_product_bits: Option<u8>,
) -> PyResult<Bound<'py, PyDict>> {
    let width = |m: Option<u8>| m.map_or(ScaleWidth::Coarse, ScaleWidth::Bits);
    let cfg = DatapathConfig {
        n_w,
        n_a,
        m_w: width(m_w),
        m_a: width(m_a),
        v,
        scale_product_bits,
        accum_guard_bits: 12,
    };
    let report = cost::datapath_widths(&cfg).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("dot_width_bits", report.dot_width_bits)?;
    out.set_item("partial_sum_width_bits", report.partial_sum_width_bits)?;
    out.set_item("collector_width_bits", cfg.collector_width())?;
    out.set_item(
        "memory_overhead_w",
        report.weights.memory_overhead_fraction,
    )?;
    out.set_item("effective_bitwidth_w", report.weights.effective_bitwidth)?;
    out.set_item("extra_multiply_dims", report.extra_multiply_dims)?;
    Ok(out)
}

/// Signal-to-quantization-noise ratio in dB.
#[pyfunction]
fn sqnr_db(reference: Vec<f32>, quantized: Vec<f32>) -> PyResult<f64> {
    if reference.len() != quantized.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(nn::sqnr_db(&reference, &quantized))
}

/// Run the built-in seeded 3-layer CNN fixture in the given scaling mode and
/// return the per-layer error report as a list of dicts.
#[pyfunction]
#[pyo3(signature = (mode="pvaw", seed=42, n=4, m=4, v=16))]
fn simulate_fixture<'py>(
    py: Python<'py>,
    mode: &str,
    seed: u64,
    n: u8,
    m: u8,
    v: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let run_mode = RunMode::parse(mode).map_err(err)?;
    let (net, input) = fixture::fixture_network(seed);
    let cfg = QuantConfig {
        n_w: n,
        n_a: n,
        m_w: m,
        m_a: m,
        v,
        granularity_w: Granularity::PerVector { v },
        granularity_a: Granularity::PerVector { v },
        ..QuantConfig::default()
    };
    let (_, report) = nn::run_network(&net, &input, run_mode, &cfg, None).map_err(err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("layer", &r.layer)?;
            d.set_item("mode", &r.mode)?;
            d.set_item("mse", r.mse)?;
            d.set_item("sqnr_db", r.sqnr_db)?;
            d.set_item("max_abs_err", r.max_abs_err)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn vsq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyQuantizedTensor>()?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(memory_overhead, m)?)?;
    m.add_function(wrap_pyfunction!(effective_bitwidth, m)?)?;
    m.add_function(wrap_pyfunction!(datapath_widths, m)?)?;
    m.add_function(wrap_pyfunction!(sqnr_db, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_fixture, m)?)?;
    Ok(())
}

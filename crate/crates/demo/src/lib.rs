//! Browser bindings for three interactive views: the int8 group quantizer,
//! the per-position FPGA latency model, and the energy comparison.
//!
//! Each export wraps a plain Rust function so the logic is testable natively.

use q8llama::perf::{
    calibrate_head_multiplicity, compose_forward_cycles, efficiency_report, CycleTable, Device, DeviceRun,
    EnergyProfile,
};
use q8llama::quant::quantize_tensor;
use q8llama::sampler::XorShiftRng;
use q8llama::ModelConfig;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct QuantView {
    original: Vec<f32>,
    dequantized: Vec<f32>,
    scales: Vec<f32>,
    max_abs_error: f64,
    rmse: f64,
    max_scale: f64,
}

#[wasm_bindgen]
impl QuantView {
    pub fn original(&self) -> Vec<f32> {
        self.original.clone()
    }
    pub fn dequantized(&self) -> Vec<f32> {
        self.dequantized.clone()
    }
    pub fn scales(&self) -> Vec<f32> {
        self.scales.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn max_abs_error(&self) -> f64 {
        self.max_abs_error
    }
    #[wasm_bindgen(getter)]
    pub fn rmse(&self) -> f64 {
        self.rmse
    }
    #[wasm_bindgen(getter)]
    pub fn max_scale(&self) -> f64 {
        self.max_scale
    }
}

/// A noisy sine with one spike of height `outlier` at `outlier_at`.
pub fn signal(n: usize, outlier: f32, outlier_at: usize, seed: u64) -> Vec<f32> {
    let mut rng = XorShiftRng::new(seed);
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 * 0.15).sin() + 0.25 * (rng.next_f32() - 0.5)).collect();
    if let Some(x) = v.get_mut(outlier_at) {
        *x = outlier;
    }
    v
}

pub fn quantize_view(values: Vec<f32>, group_size: usize) -> q8llama::Result<QuantView> {
    let (q, stats) = quantize_tensor(&values, group_size)?;
    Ok(QuantView {
        dequantized: q8llama::quant::dequantize_tensor(&q),
        scales: q.scales().to_vec(),
        original: values,
        max_abs_error: stats.max_abs_error,
        rmse: stats.rmse,
        max_scale: stats.max_scale,
    })
}

/// Quantizes a generated signal; `n` is rounded down to a whole number of groups.
#[wasm_bindgen]
pub fn quantize_signal(
    n: usize,
    group_size: usize,
    outlier: f32,
    outlier_at: usize,
    seed: u64,
) -> Result<QuantView, JsError> {
    let n = if group_size == 0 { n } else { n - n % group_size };
    quantize_view(signal(n, outlier, outlier_at, seed), group_size).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct LatencyCurve {
    positions: Vec<u32>,
    latency_ms: Vec<f64>,
    head_multiplicity: usize,
    table_best_ms: f64,
    table_avg_ms: f64,
    table_worst_ms: f64,
}

#[wasm_bindgen]
impl LatencyCurve {
    pub fn positions(&self) -> Vec<u32> {
        self.positions.clone()
    }
    pub fn latency_ms(&self) -> Vec<f64> {
        self.latency_ms.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn head_multiplicity(&self) -> usize {
        self.head_multiplicity
    }
    #[wasm_bindgen(getter)]
    pub fn table_best_ms(&self) -> f64 {
        self.table_best_ms
    }
    #[wasm_bindgen(getter)]
    pub fn table_avg_ms(&self) -> f64 {
        self.table_avg_ms
    }
    #[wasm_bindgen(getter)]
    pub fn table_worst_ms(&self) -> f64 {
        self.table_worst_ms
    }
}

/// Composed per-token latency of the 110M model at `points` evenly spaced
/// positions. `head_multiplicity == 0` uses the calibrated value.
pub fn latency_curve_for(head_multiplicity: usize, points: usize) -> q8llama::Result<LatencyCurve> {
    let config = ModelConfig::STORIES_110M;
    let table = CycleTable::builtin();
    let m = match head_multiplicity {
        0 => calibrate_head_multiplicity(&config, &table)?,
        m => m,
    };
    let points = points.clamp(2, config.seq_len);
    let positions: Vec<u32> = (0..points).map(|i| (i * (config.seq_len - 1) / (points - 1)) as u32).collect();
    let latency_ms = positions
        .iter()
        .map(|&p| compose_forward_cycles(&config, &table, p as usize, m).map(|c| table.cycles_to_ms(c)))
        .collect::<q8llama::Result<_>>()?;
    let f = table.forward();
    Ok(LatencyCurve {
        positions,
        latency_ms,
        head_multiplicity: m,
        table_best_ms: table.cycles_to_ms(f.best as f64),
        table_avg_ms: table.cycles_to_ms(f.avg as f64),
        table_worst_ms: table.cycles_to_ms(f.worst as f64),
    })
}

#[wasm_bindgen]
pub fn latency_curve(head_multiplicity: usize, points: usize) -> Result<LatencyCurve, JsError> {
    latency_curve_for(head_multiplicity, points).map_err(|e| JsError::new(&e.to_string()))
}

/// Published `[fpga W, fpga ms, cpu W, cpu ms, gpu W, gpu ms]` for 256 or 1024 tokens.
#[wasm_bindgen]
pub fn published_inputs(tokens: usize) -> Vec<f64> {
    [Device::Fpga, Device::Cpu, Device::Gpu]
        .iter()
        .filter_map(|&d| DeviceRun::published(d, tokens).ok())
        .flat_map(|r| [r.profile.avg_power_watts, r.latency_ms])
        .collect()
}

pub fn efficiency_text(inputs: &[f64]) -> q8llama::Result<String> {
    let [fw, fms, cw, cms, gw, gms] = inputs else {
        return Err(q8llama::Error::Domain("expected six numbers".into()));
    };
    let run = |name: &str, w: f64, ms: f64| -> q8llama::Result<DeviceRun> {
        Ok(DeviceRun { profile: EnergyProfile::new(name, w)?, latency_ms: ms })
    };
    let runs = [run("fpga", *fw, *fms)?, run("cpu", *cw, *cms)?, run("gpu", *gw, *gms)?];
    Ok(efficiency_report(&runs, "fpga")?.to_text())
}

/// Energy and speed comparison for `[fpga W, fpga ms, cpu W, cpu ms, gpu W, gpu ms]`.
#[wasm_bindgen]
pub fn efficiency(inputs: Vec<f64>) -> Result<String, JsError> {
    efficiency_text(&inputs).map_err(|e| JsError::new(&e.to_string()))
}

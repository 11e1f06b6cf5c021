//! Composing per-module cycle counts into a forward-pass latency.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::cycles::CycleTable;

/// Pipeline shape of the matmul inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    /// int8 values fetched per cycle by one widened burst read.
    pub burst_width_values_per_cycle: usize,
    /// Cycles from the first to the last stage of one loop iteration.
    pub pipeline_depth: usize,
    /// Cycles between successive iteration launches.
    pub initiation_interval: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams { burst_width_values_per_cycle: 64, pipeline_depth: 1, initiation_interval: 1 }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        if self.burst_width_values_per_cycle == 0 || self.pipeline_depth == 0 || self.initiation_interval == 0 {
            return Err(Error::Model(format!("pipeline parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Per-row cycles beyond `II * d_in / burst`: a pipelined loop of `n`
    /// iterations finishes after `(n - 1) * II + depth` cycles.
    pub fn per_row_overhead(&self) -> f64 {
        self.pipeline_depth as f64 - self.initiation_interval as f64
    }
}

/// `cycles = d_out * (II * d_in / burst + per_row_overhead) + fixed_overhead`
pub fn analytic_matmul_cycles(d_in: usize, d_out: usize, params: &PipelineParams, fixed_overhead: f64) -> Result<f64> {
    params.validate()?;
    let burst = params.burst_width_values_per_cycle;
    if !d_in.is_multiple_of(burst) {
        return Err(Error::shape(format_args!("d_in {d_in} is not a multiple of the burst width {burst}")));
    }
    let per_row = (params.initiation_interval * d_in / burst) as f64 + params.per_row_overhead();
    Ok(d_out as f64 * per_row + fixed_overhead)
}

/// A matmul cycle model fitted to the table's `matmul_<d_in>_<d_out>_s` rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatmulModel {
    pub params: PipelineParams,
    pub fixed_overhead: f64,
}

impl MatmulModel {
    pub fn cycles(&self, d_in: usize, d_out: usize) -> Result<f64> {
        analytic_matmul_cycles(d_in, d_out, &self.params, self.fixed_overhead)
    }

    /// Least-squares fit of pipeline depth and fixed overhead for a given
    /// initiation interval and burst width.
    pub fn fit(samples: &[MatmulSample], burst_width: usize, initiation_interval: usize) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Model("need at least two matmul rows to calibrate".into()));
        }
        // y - d_out * II * d_in / burst = d_out * per_row + fixed
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .map(|s| {
                let base = (s.d_out * initiation_interval * s.d_in / burst_width) as f64;
                (s.d_out as f64, s.cycles as f64 - base)
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx == 0.0 {
            return Err(Error::Model("matmul rows must span more than one output size".into()));
        }
        let per_row = sxy / sxx;
        let depth = (per_row + initiation_interval as f64).round().max(1.0);
        let per_row = depth - initiation_interval as f64;
        let fixed = pts.iter().map(|p| p.1 - per_row * p.0).sum::<f64>() / n;
        Ok(MatmulModel {
            params: PipelineParams {
                burst_width_values_per_cycle: burst_width,
                pipeline_depth: depth as usize,
                initiation_interval,
            },
            fixed_overhead: fixed,
        })
    }

    /// Fits every initiation interval in `1..=max_ii` and keeps the one with
    /// the smallest squared relative error.
    pub fn calibrate(table: &CycleTable, burst_width: usize, max_ii: usize) -> Result<Self> {
        let samples = matmul_samples(table);
        let mut best: Option<(f64, MatmulModel)> = None;
        for ii in 1..=max_ii.max(1) {
            let m = Self::fit(&samples, burst_width, ii)?;
            let err = samples
                .iter()
                .map(|s| Ok(((m.cycles(s.d_in, s.d_out)? - s.cycles as f64) / s.cycles as f64).powi(2)))
                .sum::<Result<f64>>()?;
            if best.is_none_or(|(e, _)| err < e) {
                best = Some((err, m));
            }
        }
        Ok(best.expect("at least one candidate").1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulSample {
    pub d_in: usize,
    pub d_out: usize,
    pub cycles: u64,
}

/// Top-level `matmul_<d_in>_<d_out>_s` rows of the table.
pub fn matmul_samples(table: &CycleTable) -> Vec<MatmulSample> {
    table
        .rows()
        .iter()
        .filter_map(|r| {
            let dims = r.name.strip_prefix("matmul_")?.strip_suffix("_s")?;
            let (a, b) = dims.split_once('_')?;
            Some(MatmulSample { d_in: a.parse().ok()?, d_out: b.parse().ok()?, cycles: r.avg })
        })
        .collect()
}

/// How often a module runs per forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repeat {
    Once(usize),
    PerLayer(usize),
    /// Attention sub-loops, scaled by the head multiplicity.
    PerHead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub module: String,
    pub repeat: Repeat,
}

const ATTENTION_LOOPS: [&str; 7] = [
    "forward_Pipeline_iterate",
    "forward_Pipeline_max",
    "forward_Pipeline_exp",
    "forward_Pipeline_sum",
    "forward_Pipeline_norm",
    "forward_Pipeline_10",
    "forward_Pipeline_acc",
];

/// The kernel's module sequence for one token.
pub fn forward_schedule(config: &ModelConfig) -> Vec<Step> {
    let (d, h, kv, v) = (config.dim, config.hidden_dim, config.kv_dim(), config.vocab_size);
    let step = |module: String, repeat| Step { module, repeat };
    let mut s = vec![
        step("forward_Pipeline_1".into(), Repeat::Once(1)),
        step(format!("rmsnorm_{d}_s"), Repeat::PerLayer(2)),
        step(format!("quantize_{d}_s"), Repeat::PerLayer(2)),
        step(format!("matmul_{d}_{d}_s"), Repeat::PerLayer(2)),
        step(format!("matmul_{d}_{kv}_s"), Repeat::PerLayer(2)),
        step("forward_Pipeline_rotation1".into(), Repeat::PerLayer(1)),
        step("forward_Pipeline_3".into(), Repeat::PerLayer(1)),
        step("forward_Pipeline_4".into(), Repeat::PerLayer(1)),
    ];
    s.extend(ATTENTION_LOOPS.iter().map(|m| step(m.to_string(), Repeat::PerHead)));
    s.extend([
        step("forward_Pipeline_residual".into(), Repeat::PerLayer(1)),
        step(format!("matmul_{d}_{h}_s"), Repeat::PerLayer(2)),
        step("forward_Pipeline_swi_glu".into(), Repeat::PerLayer(1)),
        step("forward_Pipeline_14".into(), Repeat::PerLayer(1)),
        step(format!("quantize_{h}_s"), Repeat::PerLayer(1)),
        step(format!("matmul_{h}_{d}_s"), Repeat::PerLayer(1)),
        step("forward_Pipeline_residual2".into(), Repeat::PerLayer(1)),
        step(format!("rmsnorm_{d}_s"), Repeat::Once(1)),
        step(format!("quantize_{d}_s"), Repeat::Once(1)),
        step(format!("matmul_{d}_{v}_s"), Repeat::Once(1)),
    ]);
    s
}

/// Cycles of one module at `pos`: variable rows interpolate linearly from
/// `best` at position 0 to `worst` at `seq_len - 1`.
pub fn module_cycles_at(table: &CycleTable, module: &str, pos: usize, seq_len: usize) -> Result<f64> {
    let row = table.require(module)?;
    if !row.is_variable() || seq_len < 2 {
        return Ok(row.best as f64);
    }
    let t = pos as f64 / (seq_len - 1) as f64;
    Ok(row.best as f64 + (row.worst - row.best) as f64 * t)
}

/// Total cycles per step at `pos`.
pub fn compose_breakdown(
    config: &ModelConfig,
    table: &CycleTable,
    pos: usize,
    head_multiplicity: usize,
) -> Result<Vec<(Step, f64)>> {
    if pos >= config.seq_len {
        return Err(Error::Capacity { pos, seq_len: config.seq_len });
    }
    forward_schedule(config)
        .into_iter()
        .map(|step| {
            let per = module_cycles_at(table, &step.module, pos, config.seq_len)?;
            let times = match step.repeat {
                Repeat::Once(n) => n,
                Repeat::PerLayer(n) => n * config.n_layers,
                Repeat::PerHead => head_multiplicity * config.n_layers,
            };
            Ok((step, per * times as f64))
        })
        .collect()
}

/// Forward-pass cycles at `pos`.
pub fn compose_forward_cycles(
    config: &ModelConfig,
    table: &CycleTable,
    pos: usize,
    head_multiplicity: usize,
) -> Result<f64> {
    Ok(compose_breakdown(config, table, pos, head_multiplicity)?.iter().map(|(_, c)| c).sum())
}

/// Mean forward cycles over positions `0..tokens`.
pub fn compose_mean_cycles(
    config: &ModelConfig,
    table: &CycleTable,
    tokens: usize,
    head_multiplicity: usize,
) -> Result<f64> {
    if tokens == 0 || tokens > config.seq_len {
        return Err(Error::Model(format!("token count {tokens} must be in 1..={}", config.seq_len)));
    }
    // Linear in pos, so the mean is the value at the mean position.
    let lo = compose_forward_cycles(config, table, 0, head_multiplicity)?;
    let hi = compose_forward_cycles(config, table, tokens - 1, head_multiplicity)?;
    Ok((lo + hi) / 2.0)
}

/// Picks the integer head multiplicity in `1..=2 * n_heads` whose composed
/// forward pass best matches the table's `forward` best (position 0) and
/// worst (last position) cycles.
pub fn calibrate_head_multiplicity(config: &ModelConfig, table: &CycleTable) -> Result<usize> {
    let fwd = table.forward().clone();
    let last = config.seq_len - 1;
    let mut best: Option<(f64, usize)> = None;
    for m in 1..=2 * config.n_heads {
        let lo = compose_forward_cycles(config, table, 0, m)?;
        let hi = compose_forward_cycles(config, table, last, m)?;
        let err =
            ((lo - fwd.best as f64) / fwd.best as f64).powi(2) + ((hi - fwd.worst as f64) / fwd.worst as f64).powi(2);
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, m));
        }
    }
    Ok(best.expect("n_heads >= 1").1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b
    }

    #[test]
    fn calibrated_matmul_tracks_table() {
        let t = CycleTable::builtin();
        let m = MatmulModel::calibrate(&t, 64, 4).unwrap();
        assert!(rel(m.cycles(768, 768).unwrap(), 20_977.0) < 0.05, "{m:?}");
        assert!(rel(m.cycles(768, 32000).unwrap(), 864_311.0) < 0.05, "{m:?}");
    }

    #[test]
    fn matmul_dominant_term_is_linear_in_rows() {
        let p = PipelineParams::default();
        let a = analytic_matmul_cycles(768, 100, &p, 0.0).unwrap();
        let b = analytic_matmul_cycles(768, 200, &p, 0.0).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(matches!(analytic_matmul_cycles(100, 1, &p, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn samples_are_the_four_matmuls() {
        let s = matmul_samples(&CycleTable::builtin());
        assert_eq!(s.len(), 4);
        assert!(s.contains(&MatmulSample { d_in: 2048, d_out: 768, cycles: 52_659 }));
    }

    #[test]
    fn composition_hits_table_bounds() {
        let c = ModelConfig::STORIES_110M;
        let t = CycleTable::builtin();
        let m = calibrate_head_multiplicity(&c, &t).unwrap();
        assert_eq!(m, c.n_heads);
        let lo = compose_forward_cycles(&c, &t, 0, m).unwrap();
        let hi = compose_forward_cycles(&c, &t, 1023, m).unwrap();
        assert!(rel(lo, 4_160_107.0) < 0.10);
        assert!(rel(hi, 4_892_635.0) < 0.10);
    }

    #[test]
    fn missing_rows_are_model_errors() {
        let c = ModelConfig { dim: 512, ..ModelConfig::STORIES_110M };
        let t = CycleTable::builtin();
        assert!(matches!(compose_forward_cycles(&c, &t, 0, 1), Err(Error::Model(_))));
        assert!(matches!(compose_forward_cycles(&ModelConfig::STORIES_110M, &t, 1024, 1), Err(Error::Capacity { .. })));
    }
}

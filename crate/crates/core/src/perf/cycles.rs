use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Clock period implied by the synthesis report (250 MHz).
pub const DEFAULT_CLOCK_PERIOD_NS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleRow {
    pub name: String,
    pub best: u64,
    pub avg: u64,
    pub worst: u64,
}

impl CycleRow {
    pub fn is_variable(&self) -> bool {
        self.best != self.worst
    }
}

/// Per-module cycle counts from HLS synthesis of the 110M-parameter kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleTable {
    rows: Vec<CycleRow>,
    clock_period_ns: f64,
}

/// `(module, best, avg, worst)` for the synthesized forward kernel.
const SYNTHESIS_REPORT: &[(&str, u64, u64, u64)] = &[
    ("forward_Pipeline_1", 771, 771, 771),
    ("rmsnorm_768_Pipeline_1", 770, 770, 770),
    ("rmsnorm_768_Pipeline_2", 771, 771, 771),
    ("rmsnorm_768_Pipeline_sum_of_squares", 5413, 5413, 5413),
    ("rmsnorm_768_Pipeline_norm_and_scale", 23, 23, 23),
    ("rmsnorm_768_Pipeline_5", 770, 770, 770),
    ("rmsnorm_768_s", 7822, 7822, 7822),
    ("round", 1, 1, 1),
    ("p_hls_fptosi_float_i8", 1, 1, 1),
    ("quantize_768_Pipeline_main_loop", 198, 198, 198),
    ("quantize_768_Pipeline_2", 770, 770, 770),
    ("quantize_768_Pipeline_3", 14, 14, 14),
    ("quantize_768_s", 971, 971, 971),
    ("matmul_768_768_Pipeline_x_buff", 50, 50, 50),
    ("matmul_768_768_Pipeline_xs_buff", 5, 5, 5),
    ("matmul_768_768_Pipeline_VITIS_LOOP_225_1", 20900, 20900, 20900),
    ("matmul_768_768_s", 20977, 20977, 20977),
    ("pow_generic_float_s", 15, 15, 15),
    ("sin_or_cos_float_s", 18, 18, 18),
    ("forward_Pipeline_rotation1", 119, 119, 119),
    ("forward_Pipeline_3", 839, 839, 839),
    ("forward_Pipeline_4", 839, 839, 839),
    ("forward_Pipeline_iterate", 530, 1042, 1554),
    ("forward_Pipeline_max", 2, 133, 261),
    ("forward_Pipeline_exp", 24, 40, 56),
    ("forward_Pipeline_sum", 10, 778, 1546),
    ("forward_Pipeline_norm", 9, 17, 25),
    ("forward_Pipeline_10", 66, 66, 66),
    ("forward_Pipeline_acc", 89, 857, 1625),
    ("forward_Pipeline_residual", 61, 61, 61),
    ("matmul_768_2048_Pipeline_x_buff", 50, 50, 50),
    ("matmul_768_2048_Pipeline_xs_buff", 5, 5, 5),
    ("matmul_768_2048_Pipeline_VITIS_LOOP_225_1", 55460, 55460, 55460),
    ("matmul_768_2048_s", 55537, 55537, 55537),
    ("forward_Pipeline_swi_glu", 552, 552, 552),
    ("forward_Pipeline_14", 2050, 2050, 2050),
    ("quantize_2048_Pipeline_main_loop", 221, 221, 221),
    ("quantize_2048_Pipeline_2", 2050, 2050, 2050),
    ("quantize_2048_Pipeline_3", 34, 34, 34),
    ("quantize_2048_s", 2274, 2274, 2274),
    ("matmul_2048_768_Pipeline_x_buff", 130, 130, 130),
    ("matmul_2048_768_Pipeline_xs_buff", 10, 10, 10),
    ("matmul_2048_768_Pipeline_VITIS_LOOP_225_1", 52526, 52526, 52526),
    ("matmul_2048_768_s", 52659, 52659, 52659),
    ("forward_Pipeline_residual2", 58, 58, 58),
    ("matmul_768_32000_Pipeline_x_buff", 50, 50, 50),
    ("matmul_768_32000_Pipeline_xs_buff", 5, 5, 5),
    ("matmul_768_32000_Pipeline_VITIS_LOOP_225_1", 864190, 864190, 864190),
    ("matmul_768_32000_s", 864311, 864311, 864311),
    ("forward", 4160107, 4377403, 4892635),
];

pub const FORWARD: &str = "forward";

impl Default for CycleTable {
    fn default() -> Self {
        Self::builtin()
    }
}

impl CycleTable {
    /// The synthesis report for the 110M model at a 4 ns clock.
    pub fn builtin() -> Self {
        let rows = SYNTHESIS_REPORT
            .iter()
            .map(|&(name, best, avg, worst)| CycleRow { name: name.to_string(), best, avg, worst })
            .collect();
        CycleTable { rows, clock_period_ns: DEFAULT_CLOCK_PERIOD_NS }
    }

    pub fn new(rows: Vec<CycleRow>, clock_period_ns: f64) -> Result<Self> {
        if !(clock_period_ns > 0.0 && clock_period_ns.is_finite()) {
            return Err(Error::format(format_args!("clock period must be positive, got {clock_period_ns}")));
        }
        for r in &rows {
            if !(r.best <= r.avg && r.avg <= r.worst) {
                return Err(Error::format(format_args!(
                    "{}: expected best <= avg <= worst, got {} / {} / {}",
                    r.name, r.best, r.avg, r.worst
                )));
            }
        }
        if !rows.iter().any(|r| r.name == FORWARD) {
            return Err(Error::format(format_args!("cycle table has no `{FORWARD}` row")));
        }
        Ok(CycleTable { rows, clock_period_ns })
    }

    /// Parses the text form: one `name best avg worst` row per line (commas
    /// or whitespace between fields), `#` comments, and an optional
    /// `clock_period_ns <value>` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut clock = DEFAULT_CLOCK_PERIOD_NS;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
            let bad = |what: &str| Error::format(format_args!("line {}: {what}: `{line}`", n + 1));
            match fields.as_slice() {
                ["clock_period_ns", v] => clock = v.parse().map_err(|_| bad("invalid clock period"))?,
                [name, best, avg, worst] => {
                    let num = |s: &str| s.parse::<u64>().map_err(|_| bad("invalid cycle count"));
                    rows.push(CycleRow {
                        name: name.to_string(),
                        best: num(best)?,
                        avg: num(avg)?,
                        worst: num(worst)?,
                    });
                }
                _ => return Err(bad("expected `name best avg worst`")),
            }
        }
        Self::new(rows, clock)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("clock_period_ns {}\n# module best avg worst\n", self.clock_period_ns);
        for r in &self.rows {
            let _ = writeln!(out, "{} {} {} {}", r.name, r.best, r.avg, r.worst);
        }
        out
    }

    pub fn rows(&self) -> &[CycleRow] {
        &self.rows
    }

    pub fn clock_period_ns(&self) -> f64 {
        self.clock_period_ns
    }

    pub fn get(&self, name: &str) -> Option<&CycleRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&CycleRow> {
        self.get(name).ok_or_else(|| Error::Model(format!("cycle table has no `{name}` row")))
    }

    pub fn forward(&self) -> &CycleRow {
        self.get(FORWARD).expect("checked at construction")
    }

    pub fn cycles_to_ns(&self, cycles: f64) -> f64 {
        cycles * self.clock_period_ns
    }

    pub fn cycles_to_ms(&self, cycles: f64) -> f64 {
        cycles * self.clock_period_ns * 1e-6
    }

    /// Per-token latency straight from the `forward` row's average.
    pub fn table_forward_latency_ms(&self) -> f64 {
        self.cycles_to_ms(self.forward().avg as f64)
    }
}

//! Throughput, energy per token, and cross-device efficiency ratios.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    pub device_name: String,
    pub avg_power_watts: f64,
}

impl EnergyProfile {
    pub fn new(device_name: impl Into<String>, avg_power_watts: f64) -> Result<Self> {
        if !(avg_power_watts > 0.0 && avg_power_watts.is_finite()) {
            return Err(Error::Domain(format!("average power must be positive, got {avg_power_watts}")));
        }
        Ok(EnergyProfile { device_name: device_name.into(), avg_power_watts })
    }
}

pub fn throughput_toks_per_s(latency_ms: f64) -> f64 {
    1000.0 / latency_ms
}

/// `watts * seconds / 3.6`: joules to milliwatt-hours.
pub fn energy_per_token_mwh(profile: &EnergyProfile, latency_ms: f64) -> f64 {
    profile.avg_power_watts * (latency_ms / 1000.0) / 3.6
}

/// Rounds to `decimals` places, the precision figures are published at.
pub fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

/// Benchmarked hardware reported in the published comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Device {
    Cpu,
    Gpu,
    Fpga,
}

impl Device {
    pub const ALL: [Device; 3] = [Device::Cpu, Device::Gpu, Device::Fpga];

    pub fn name(self) -> &'static str {
        match self {
            Device::Cpu => "cpu",
            Device::Gpu => "gpu",
            Device::Fpga => "fpga",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Device::Cpu => "Intel Xeon E5-2686 v4",
            Device::Gpu => "NVIDIA RTX 3090",
            Device::Fpga => "Xilinx Virtex UltraScale+ VU9P",
        }
    }
}

/// Published per-token latency (ms) for the 256- and 1024-token runs.
pub fn published_latency_ms(device: Device, tokens: usize) -> Option<f64> {
    Some(match (device, tokens) {
        (Device::Cpu, 256) => 43.08,
        (Device::Cpu, 1024) => 50.94,
        (Device::Gpu, 256) => 9.34,
        (Device::Gpu, 1024) => 9.32,
        (Device::Fpga, 256 | 1024) => 17.51,
        _ => return None,
    })
}

/// Published tokens per second.
pub fn published_toks_per_s(device: Device, tokens: usize) -> Option<f64> {
    Some(match (device, tokens) {
        (Device::Cpu, 256) => 23.21,
        (Device::Cpu, 1024) => 19.63,
        (Device::Gpu, 256) => 107.00,
        (Device::Gpu, 1024) => 107.24,
        (Device::Fpga, 256 | 1024) => 57.11,
        _ => return None,
    })
}

/// Published average power (W).
pub fn published_power_w(device: Device, tokens: usize) -> Option<f64> {
    Some(match (device, tokens) {
        (Device::Cpu, 256 | 1024) => 42.5,
        (Device::Gpu, 256) => 126.9,
        (Device::Gpu, 1024) => 130.6,
        (Device::Fpga, 256 | 1024) => 9.0,
        _ => return None,
    })
}

/// One device's inputs to the report.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRun {
    pub profile: EnergyProfile,
    pub latency_ms: f64,
}

impl DeviceRun {
    pub fn published(device: Device, tokens: usize) -> Result<Self> {
        let missing = || Error::Domain(format!("no published {} figures for {tokens} tokens", device.name()));
        Ok(DeviceRun {
            profile: EnergyProfile::new(device.name(), published_power_w(device, tokens).ok_or_else(missing)?)?,
            latency_ms: published_latency_ms(device, tokens).ok_or_else(missing)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSummary {
    pub device: String,
    pub power_w: f64,
    pub latency_ms: f64,
    pub toks_per_s: f64,
    pub mwh_per_token: f64,
}

/// `baseline` relative to `target`. The `*_published` fields first round
/// throughput and energy to two decimals, as the published tables do, then
/// round the ratio to two decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub target: String,
    pub baseline: String,
    /// baseline energy / target energy
    pub energy_reduction: f64,
    pub energy_reduction_published: f64,
    /// target throughput / baseline throughput
    pub speedup: f64,
    pub speedup_published: f64,
    /// baseline power / target power
    pub power_reduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub devices: Vec<DeviceSummary>,
    pub comparisons: Vec<Comparison>,
}

/// Summarizes every run and compares each other device against `target`.
pub fn efficiency_report(runs: &[DeviceRun], target: &str) -> Result<EfficiencyReport> {
    if runs.len() < 2 {
        return Err(Error::Domain("efficiency report needs at least two devices".into()));
    }
    for r in runs {
        if !(r.latency_ms > 0.0 && r.latency_ms.is_finite()) {
            return Err(Error::Domain(format!("{}: latency must be positive", r.profile.device_name)));
        }
    }
    let devices: Vec<DeviceSummary> = runs
        .iter()
        .map(|r| DeviceSummary {
            device: r.profile.device_name.clone(),
            power_w: r.profile.avg_power_watts,
            latency_ms: r.latency_ms,
            toks_per_s: throughput_toks_per_s(r.latency_ms),
            mwh_per_token: energy_per_token_mwh(&r.profile, r.latency_ms),
        })
        .collect();
    let t = devices
        .iter()
        .find(|d| d.device == target)
        .ok_or_else(|| Error::Domain(format!("target device `{target}` is not among the runs")))?;
    let comparisons = devices
        .iter()
        .filter(|d| d.device != target)
        .map(|b| Comparison {
            target: t.device.clone(),
            baseline: b.device.clone(),
            energy_reduction: b.mwh_per_token / t.mwh_per_token,
            energy_reduction_published: round_to(round_to(b.mwh_per_token, 2) / round_to(t.mwh_per_token, 2), 2),
            speedup: t.toks_per_s / b.toks_per_s,
            speedup_published: round_to(round_to(t.toks_per_s, 2) / round_to(b.toks_per_s, 2), 2),
            power_reduction: b.power_w / t.power_w,
        })
        .collect();
    Ok(EfficiencyReport { devices, comparisons })
}

impl EfficiencyReport {
    pub fn device(&self, name: &str) -> Option<&DeviceSummary> {
        self.devices.iter().find(|d| d.device == name)
    }

    pub fn comparison(&self, baseline: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.baseline == baseline)
    }

    /// `key=value` lines with stable keys.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for d in &self.devices {
            let n = &d.device;
            let _ = writeln!(out, "{n}.power_w={}", d.power_w);
            let _ = writeln!(out, "{n}.latency_ms={:.3}", d.latency_ms);
            let _ = writeln!(out, "{n}.toks_per_s={:.2}", d.toks_per_s);
            let _ = writeln!(out, "{n}.mwh_per_token={:.4}", d.mwh_per_token);
        }
        for c in &self.comparisons {
            let k = format!("{}_vs_{}", c.target, c.baseline);
            let _ = writeln!(out, "{k}.energy_reduction={:.4}", c.energy_reduction);
            let _ = writeln!(out, "{k}.energy_reduction_published={:.2}", c.energy_reduction_published);
            let _ = writeln!(out, "{k}.speedup={:.4}", c.speedup);
            let _ = writeln!(out, "{k}.speedup_published={:.2}", c.speedup_published);
            let _ = writeln!(out, "{k}.power_reduction={:.2}", c.power_reduction);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ =
            writeln!(out, "{:<8} {:>9} {:>12} {:>10} {:>12}", "device", "power W", "latency ms", "toks/s", "mWh/token");
        for d in &self.devices {
            let _ = writeln!(
                out,
                "{:<8} {:>9.1} {:>12.3} {:>10.2} {:>12.4}",
                d.device, d.power_w, d.latency_ms, d.toks_per_s, d.mwh_per_token
            );
        }
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{} vs {}: {:.2}x less energy per token ({:.2}x at published precision), {:.2}x the speed ({:.2}x), {:.2}x less power",
                c.target,
                c.baseline,
                c.energy_reduction,
                c.energy_reduction_published,
                c.speedup,
                c.speedup_published,
                c.power_reduction
            );
        }
        out
    }
}

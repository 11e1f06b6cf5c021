//! Symmetric grouped int8 quantization ("Q8_0").
//!
//! A tensor is cut into contiguous groups of `group_size` values. Each group
//! stores int8 codes in `[-127, 127]` and one fp32 scale `max|w| / 127`.

use crate::error::{Error, Result};

/// Largest code magnitude; `-128` is never produced.
pub const Q_MAX: i32 = 127;

/// Default number of values sharing one scale. One group is one 256-bit burst
/// of int8 values on the accelerator's memory interface.
pub const DEFAULT_GROUP_SIZE: usize = 64;

/// Groups larger than this could overflow the `i32` accumulator in [`qmatmul`].
pub const MAX_GROUP_SIZE: usize = (i32::MAX / (Q_MAX * Q_MAX)) as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    values: Vec<i8>,
    scales: Vec<f32>,
    group_size: usize,
}

/// Roundtrip error summary of a quantization pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantStats {
    pub max_abs_error: f64,
    pub rmse: f64,
    pub count: usize,
    /// Largest group scale seen; `max_abs_error` never exceeds half of it.
    pub max_scale: f64,
}

impl QuantStats {
    /// Combines two summaries as if their elements were quantized together.
    pub fn merge(&self, other: &QuantStats) -> QuantStats {
        let count = self.count + other.count;
        let sq = self.rmse * self.rmse * self.count as f64 + other.rmse * other.rmse * other.count as f64;
        QuantStats {
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            rmse: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
            count,
            max_scale: self.max_scale.max(other.max_scale),
        }
    }
}

fn check_group_size(group_size: usize) -> Result<()> {
    if group_size == 0 || group_size > MAX_GROUP_SIZE {
        return Err(Error::shape(format_args!("group size {group_size} must be in 1..={MAX_GROUP_SIZE}")));
    }
    Ok(())
}

/// Quantizes one group into `codes`, returning its scale.
///
/// `scale = max|w| / 127` and each code is `w / scale` rounded half away from
/// zero. An all-zero group gets scale 0 and zero codes.
pub fn quantize_group_into(w: &[f32], codes: &mut [i8]) -> Result<f32> {
    debug_assert_eq!(w.len(), codes.len());
    let mut wmax = 0.0f32;
    for (index, &value) in w.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
        wmax = wmax.max(value.abs());
    }
    if wmax == 0.0 {
        codes.fill(0);
        return Ok(0.0);
    }
    let scale = wmax / Q_MAX as f32;
    let inv = scale as f64;
    for (c, &value) in codes.iter_mut().zip(w) {
        // f64::round rounds half away from zero.
        let q = (value as f64 / inv).round() as i32;
        *c = q.clamp(-Q_MAX, Q_MAX) as i8;
    }
    Ok(scale)
}

/// Quantizes a single group. See [`quantize_group_into`].
pub fn quantize_group(w: &[f32]) -> Result<(Vec<i8>, f32)> {
    check_group_size(w.len())?;
    let mut codes = vec![0i8; w.len()];
    let scale = quantize_group_into(w, &mut codes)?;
    Ok((codes, scale))
}

/// Quantizes `w` group by group and reports the roundtrip error.
pub fn quantize_tensor(w: &[f32], group_size: usize) -> Result<(QuantizedTensor, QuantStats)> {
    let mut t = QuantizedTensor::zeros(w.len(), group_size)?;
    t.quantize_from(w)?;
    let stats = t.error_stats(w);
    Ok((t, stats))
}

/// Expands codes back to fp32: `values[i] * scales[i / group_size]`.
pub fn dequantize_tensor(t: &QuantizedTensor) -> Vec<f32> {
    let mut out = vec![0.0; t.len()];
    t.dequantize_into(&mut out);
    out
}

impl QuantizedTensor {
    /// An all-zero tensor of `len` elements; used as a staging buffer.
    pub fn zeros(len: usize, group_size: usize) -> Result<Self> {
        check_group_size(group_size)?;
        if !len.is_multiple_of(group_size) {
            return Err(Error::shape(format_args!("length {len} is not a multiple of group size {group_size}")));
        }
        Ok(QuantizedTensor { values: vec![0; len], scales: vec![0.0; len / group_size], group_size })
    }

    /// Builds a tensor from raw parts, checking every invariant.
    pub fn from_parts(values: Vec<i8>, scales: Vec<f32>, group_size: usize) -> Result<Self> {
        check_group_size(group_size)?;
        if !values.len().is_multiple_of(group_size) || values.len() / group_size != scales.len() {
            return Err(Error::shape(format_args!(
                "{} values and {} scales do not fit group size {group_size}",
                values.len(),
                scales.len()
            )));
        }
        if let Some(i) = values.iter().position(|&v| v == i8::MIN) {
            return Err(Error::format(format_args!("code -128 at index {i}")));
        }
        for (g, (&s, group)) in scales.iter().zip(values.chunks_exact(group_size)).enumerate() {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::format(format_args!("invalid scale {s} for group {g}")));
            }
            if s == 0.0 && group.iter().any(|&v| v != 0) {
                return Err(Error::format(format_args!("group {g} has zero scale but non-zero codes")));
            }
        }
        Ok(QuantizedTensor { values, scales, group_size })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Overwrites this tensor with the quantization of `w` without allocating.
    pub fn quantize_from(&mut self, w: &[f32]) -> Result<()> {
        if w.len() != self.values.len() {
            return Err(Error::shape(format_args!(
                "cannot quantize {} values into a tensor of {}",
                w.len(),
                self.values.len()
            )));
        }
        let gs = self.group_size;
        for (g, (src, dst)) in w.chunks_exact(gs).zip(self.values.chunks_exact_mut(gs)).enumerate() {
            self.scales[g] = quantize_group_into(src, dst).map_err(|e| match e {
                Error::NonFinite { index, value } => Error::NonFinite { index: g * gs + index, value },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn dequantize_into(&self, out: &mut [f32]) {
        for ((dst, src), &s) in
            out.chunks_exact_mut(self.group_size).zip(self.values.chunks_exact(self.group_size)).zip(&self.scales)
        {
            for (d, &q) in dst.iter_mut().zip(src) {
                *d = q as f32 * s;
            }
        }
    }

    /// Dequantizes the contiguous range `[start, start + out.len())`.
    /// Both ends must sit on group boundaries.
    pub fn dequantize_range(&self, start: usize, out: &mut [f32]) {
        let gs = self.group_size;
        debug_assert!(start.is_multiple_of(gs) && out.len().is_multiple_of(gs));
        let g0 = start / gs;
        for (k, dst) in out.chunks_exact_mut(gs).enumerate() {
            let s = self.scales[g0 + k];
            let src = &self.values[start + k * gs..start + (k + 1) * gs];
            for (d, &q) in dst.iter_mut().zip(src) {
                *d = q as f32 * s;
            }
        }
    }

    /// Compares the dequantized tensor against the original values.
    pub fn error_stats(&self, original: &[f32]) -> QuantStats {
        let gs = self.group_size;
        let mut max_abs = 0.0f64;
        let mut sq = 0.0f64;
        for (i, &w) in original.iter().enumerate() {
            let d = (self.values[i] as f32 * self.scales[i / gs]) as f64;
            let e = (d - w as f64).abs();
            max_abs = max_abs.max(e);
            sq += e * e;
        }
        let count = original.len();
        QuantStats {
            max_abs_error: max_abs,
            rmse: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
            count,
            max_scale: self.scales.iter().fold(0.0f64, |m, &s| m.max(s as f64)),
        }
    }
}

fn check_matmul_shapes(x: &QuantizedTensor, w: &QuantizedTensor, d_in: usize, d_out: usize) -> Result<()> {
    if x.group_size != w.group_size {
        return Err(Error::shape(format_args!(
            "activation group size {} differs from weight group size {}",
            x.group_size, w.group_size
        )));
    }
    if !d_in.is_multiple_of(x.group_size) {
        return Err(Error::shape(format_args!(
            "input dimension {d_in} is not a multiple of group size {}",
            x.group_size
        )));
    }
    if x.len() != d_in || w.len() != d_in * d_out {
        return Err(Error::shape(format_args!(
            "qmatmul expects x[{d_in}] and W[{d_out}x{d_in}], got x[{}] and W[{}]",
            x.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Dot product of row `r` of `w` with `x`: exact `i32` sums within a group,
/// rescaled by both group scales and accumulated in fp32.
#[inline]
fn qdot_row(x: &QuantizedTensor, w: &QuantizedTensor, r: usize, d_in: usize) -> f32 {
    let gs = x.group_size;
    let row = &w.values[r * d_in..(r + 1) * d_in];
    let row_scales = &w.scales[r * d_in / gs..(r + 1) * d_in / gs];
    let mut val = 0.0f32;
    for (g, (xs, ws)) in x.values.chunks_exact(gs).zip(row.chunks_exact(gs)).enumerate() {
        let ival: i32 = xs.iter().zip(ws).map(|(&a, &b)| a as i32 * b as i32).sum();
        val += ival as f32 * row_scales[g] * x.scales[g];
    }
    val
}

/// `out = W x` for a row-major `W` of shape `d_out x d_in`, written into `out`.
pub fn qmatmul_into(
    out: &mut [f32],
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    check_matmul_shapes(x, w, d_in, d_out)?;
    if out.len() != d_out {
        return Err(Error::shape(format_args!("output buffer has {} slots, expected {d_out}", out.len())));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if d_out >= 256 {
            out.par_iter_mut().enumerate().for_each(|(r, o)| *o = qdot_row(x, w, r, d_in));
            return Ok(());
        }
    }
    for (r, o) in out.iter_mut().enumerate() {
        *o = qdot_row(x, w, r, d_in);
    }
    Ok(())
}

/// Allocating form of [`qmatmul_into`].
pub fn qmatmul(x: &QuantizedTensor, w: &QuantizedTensor, d_in: usize, d_out: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; d_out];
    qmatmul_into(&mut out, x, w, d_in, d_out)?;
    Ok(out)
}

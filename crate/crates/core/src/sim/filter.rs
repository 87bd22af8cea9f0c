use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};

/// Critically damped second-order low-pass `wc^2 / (s + wc)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: u8,
    pub cutoff_hz: f64,
}

impl FilterSpec {
    pub fn second_order(cutoff_hz: f64) -> Self {
        FilterSpec {
            order: 2,
            cutoff_hz,
        }
    }

    pub fn validate(&self, ts: f64) -> Result<()> {
        if self.order != 2 {
            return Err(DfcError::Invalid(format!(
                "only second-order filters are supported, got order {}",
                self.order
            )));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < 0.5 / ts) {
            return Err(DfcError::Invalid(format!(
                "cutoff {} Hz must lie in (0, Nyquist = {} Hz)",
                self.cutoff_hz,
                0.5 / ts
            )));
        }
        Ok(())
    }
}

/// Bilinear-transform discretization, run causally one sample at a time.
#[derive(Debug, Clone)]
pub struct LowPass2 {
    b0: f64,
    alpha: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl LowPass2 {
    pub fn new(spec: &FilterSpec, ts: f64) -> Result<Self> {
        spec.validate(ts)?;
        let wc = 2.0 * PI * spec.cutoff_hz;
        let k = 2.0 / ts;
        let g = wc / (k + wc);
        Ok(LowPass2 {
            b0: g * g,
            alpha: (k - wc) / (k + wc),
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        })
    }

    /// Put the filter in steady state for a constant input `value`.
    pub fn reset(&mut self, value: f64) {
        self.x1 = value;
        self.x2 = value;
        self.y1 = value;
        self.y2 = value;
    }

    pub fn step(&mut self, x: f64) -> f64 {
        let a = self.alpha;
        let y = self.b0 * (x + 2.0 * self.x1 + self.x2) + 2.0 * a * self.y1 - a * a * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Causal low-pass of every row of `series` (samples in columns), each row
/// started in steady state at its first sample.
pub fn lowpass_rows(series: &DMatrix<f64>, ts: f64, filter: &FilterSpec) -> Result<DMatrix<f64>> {
    lowpass_rows_from(series, ts, filter, None)
}

/// As [`lowpass_rows`], with every row started in steady state at
/// `initial` instead of its first sample.
fn lowpass_rows_from(series: &DMatrix<f64>, ts: f64, filter: &FilterSpec, initial: Option<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(series.nrows(), series.ncols());
    for i in 0..series.nrows() {
        let mut lp = LowPass2::new(filter, ts)?;
        if series.ncols() > 0 {
            lp.reset(initial.unwrap_or(series[(i, 0)]));
        }
        for k in 0..series.ncols() {
            out[(i, k)] = lp.step(series[(i, k)]);
        }
    }
    Ok(out)
}

/// Central differences (one-sided at the ends) passed through the low-pass.
/// The filter starts from rest: the signal is taken to have been constant
/// before the first sample, matching [`lowpass_rows`] on the signal itself.
pub fn filtered_derivative(x_meas: &DMatrix<f64>, ts: f64, filter: &FilterSpec) -> Result<DMatrix<f64>> {
    let len = x_meas.ncols();
    if len < 3 {
        return Err(DfcError::Invalid(format!(
            "numerical differentiation needs at least 3 samples, got {len}"
        )));
    }
    let mut raw = DMatrix::zeros(x_meas.nrows(), len);
    for i in 0..x_meas.nrows() {
        raw[(i, 0)] = (x_meas[(i, 1)] - x_meas[(i, 0)]) / ts;
        raw[(i, len - 1)] = (x_meas[(i, len - 1)] - x_meas[(i, len - 2)]) / ts;
        for k in 1..len - 1 {
            raw[(i, k)] = (x_meas[(i, k + 1)] - x_meas[(i, k - 1)]) / (2.0 * ts);
        }
    }
    lowpass_rows_from(&raw, ts, filter, Some(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TS: f64 = 1e-3;

    fn series(len: usize, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(1, len, |_, k| f(k as f64 * TS))
    }

    #[test]
    fn ramp_derivative_settles_to_slope() {
        let spec = FilterSpec::second_order(2.0);
        let d = filtered_derivative(&series(4000, |t| 0.3 * t), TS, &spec).unwrap();
        let settle = (5.0 / spec.cutoff_hz / TS) as usize;
        for k in settle..3999 {
            assert!((d[(0, k)] - 0.3).abs() < 3e-4, "k={k} d={}", d[(0, k)]);
        }
    }

    #[test]
    fn high_frequency_is_attenuated() {
        let spec = FilterSpec::second_order(2.0);
        let w = 2.0 * PI * 50.0;
        let d = filtered_derivative(&series(6000, |t| (w * t).sin()), TS, &spec).unwrap();
        let tail = (3000..6000).map(|k| d[(0, k)].abs()).fold(0.0, f64::max);
        assert!(tail < w / 20.0, "tail amplitude {tail} vs true {w}");
    }

    #[test]
    fn constant_signal_has_zero_derivative() {
        let spec = FilterSpec::second_order(2.0);
        let d = filtered_derivative(&series(3000, |_| 0.7), TS, &spec).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dc_gain_is_exactly_one() {
        let spec = FilterSpec::second_order(2.0);
        let mut lp = LowPass2::new(&spec, TS).unwrap();
        let mut y = 0.0;
        for _ in 0..20000 {
            y = lp.step(1.0);
        }
        assert!((y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_above_nyquist_rejected() {
        assert!(FilterSpec::second_order(600.0).validate(TS).is_err());
        assert!(filtered_derivative(&series(2, |t| t), TS, &FilterSpec::second_order(2.0)).is_err());
    }
}

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{DfcError, Result};

/// Uniformly sampled record of one run. Sample `k` of every series is
/// column `k` of the corresponding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ts: f64,
    pub t: Vec<f64>,
    /// True state.
    pub x: DMatrix<f64>,
    /// Measured state (true state + bias + sensor noise).
    pub x_meas: DMatrix<f64>,
    /// Measured state derivative.
    pub xdot_meas: DMatrix<f64>,
    /// Applied input.
    pub u: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(
        ts: f64,
        t: Vec<f64>,
        x: DMatrix<f64>,
        x_meas: DMatrix<f64>,
        xdot_meas: DMatrix<f64>,
        u: DMatrix<f64>,
    ) -> Result<Self> {
        let len = t.len();
        if len < 2 {
            return Err(DfcError::Invalid("trajectory needs at least 2 samples".into()));
        }
        if !(ts > 0.0) {
            return Err(DfcError::Invalid("sampling interval must be positive".into()));
        }
        let n = x.nrows();
        if x.ncols() != len
            || x_meas.shape() != (n, len)
            || xdot_meas.shape() != (n, len)
            || u.ncols() != len
        {
            return Err(DfcError::Dimension("trajectory series lengths differ".into()));
        }
        for (k, w) in t.windows(2).enumerate() {
            if ((w[1] - w[0]) - ts).abs() > 1e-9 * ts.max(1.0) {
                return Err(DfcError::Invalid(format!(
                    "time grid not uniform at sample {}",
                    k + 1
                )));
            }
        }
        Ok(Trajectory {
            ts,
            t,
            x,
            x_meas,
            xdot_meas,
            u,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn duration(&self) -> f64 {
        self.ts * (self.len() - 1) as f64
    }

    pub fn x_at(&self, k: usize) -> DVector<f64> {
        self.x.column(k).into_owned()
    }

    pub fn final_state(&self) -> DVector<f64> {
        self.x_at(self.len() - 1)
    }

    pub fn final_input(&self) -> DVector<f64> {
        self.u.column(self.len() - 1).into_owned()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.n();
        let m = self.m();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("xm{i}")));
        header.extend((1..=n).map(|i| format!("xd{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        wtr.write_record(&header)?;
        let mut row = Vec::with_capacity(1 + 3 * n + m);
        for k in 0..self.len() {
            row.clear();
            row.push(fmt(self.t[k]));
            for series in [&self.x, &self.x_meas, &self.xdot_meas] {
                row.extend(series.column(k).iter().map(|&v| fmt(v)));
            }
            row.extend(self.u.column(k).iter().map(|&v| fmt(v)));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                })
                .count()
        };
        let n = count("x");
        let m = count("u");
        if header.len() != 1 + 3 * n + m || header.get(0) != Some("t") || n == 0 {
            return Err(DfcError::Invalid(
                "trajectory CSV header must be t,x1..xn,xm1..xmn,xd1..xdn,u1..um".into(),
            ));
        }
        let mut t = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| DfcError::Invalid(format!("bad number in trajectory CSV: {e}")))?;
            if vals.len() != header.len() {
                return Err(DfcError::Invalid("ragged trajectory CSV row".into()));
            }
            t.push(vals[0]);
            cols.push(vals);
        }
        let len = t.len();
        let block = |offset: usize, rows: usize| DMatrix::from_fn(rows, len, |i, k| cols[k][offset + i]);
        let ts = if len >= 2 { t[1] - t[0] } else { 0.0 };
        Trajectory::new(
            ts,
            t,
            block(1, n),
            block(1 + n, n),
            block(1 + 2 * n, n),
            block(1 + 3 * n, m),
        )
    }

    /// Record with the samples before `t0 + duration` dropped.
    pub fn trimmed_front(&self, duration: f64) -> Result<Self> {
        let skip = (duration / self.ts).round() as usize;
        if skip == 0 {
            return Ok(self.clone());
        }
        if skip + 2 > self.len() {
            return Err(DfcError::Invalid(format!(
                "cannot drop {duration} s from a {} s record",
                self.duration()
            )));
        }
        let cols = |m: &DMatrix<f64>| m.columns(skip, self.len() - skip).into_owned();
        Trajectory::new(
            self.ts,
            self.t[skip..].to_vec(),
            cols(&self.x),
            cols(&self.x_meas),
            cols(&self.xdot_meas),
            cols(&self.u),
        )
    }

    /// Same record with the measured state and input passed through the
    /// filter that produced `xdot_meas`, so the three series describe one
    /// consistent trajectory of the linear plant.
    pub fn prefiltered(&self, filter: &super::FilterSpec) -> Result<Self> {
        let mut out = self.clone();
        out.x_meas = super::filter::lowpass_rows(&self.x_meas, self.ts, filter)?;
        out.u = super::filter::lowpass_rows(&self.u, self.ts, filter)?;
        Ok(out)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_roundtrip_is_bit_exact(
            vals in proptest::collection::vec(-1e6f64..1e6, 5 * 7),
            scale in -30i32..30,
        ) {
            let len = 5;
            let f = 10f64.powi(scale);
            let ts = 1e-3;
            let t: Vec<f64> = (0..len).map(|k| k as f64 * ts).collect();
            let m = |off: usize, rows: usize| DMatrix::from_fn(rows, len, |i, k| vals[(off + i) * len + k] * f);
            let traj = Trajectory::new(ts, t, m(0, 2), m(2, 2), m(4, 2), m(6, 1)).unwrap();
            let mut buf = Vec::new();
            traj.write_csv(&mut buf).unwrap();
            let back = Trajectory::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back.x, traj.x);
            prop_assert_eq!(back.x_meas, traj.x_meas);
            prop_assert_eq!(back.xdot_meas, traj.xdot_meas);
            prop_assert_eq!(back.u, traj.u);
            prop_assert_eq!(back.t, traj.t);
        }
    }

    #[test]
    fn header_layout() {
        let t = vec![0.0, 0.5];
        let z = |r| DMatrix::zeros(r, 2);
        let traj = Trajectory::new(0.5, t, z(2), z(2), z(2), z(1)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x1,x2,xm1,xm2,xd1,xd2,u1");
    }

    #[test]
    fn rejects_short_or_nonuniform() {
        let z = |r, c| DMatrix::zeros(r, c);
        assert!(Trajectory::new(1.0, vec![0.0], z(1, 1), z(1, 1), z(1, 1), z(1, 1)).is_err());
        assert!(Trajectory::new(1.0, vec![0.0, 1.0, 2.5], z(1, 3), z(1, 3), z(1, 3), z(1, 3)).is_err());
    }
}

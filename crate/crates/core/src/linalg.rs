//! Small dense linear-algebra helpers and the structured text encoding used
//! for every matrix written to disk.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};

/// Row-major matrix with an explicit `[rows, cols]` shape header.
///
/// Values are written with shortest round-trip formatting, so decoding an
/// encoded matrix reproduces every entry bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub shape: [usize; 2],
    pub data: Vec<Vec<f64>>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        MatrixRecord {
            shape: [m.nrows(), m.ncols()],
            data,
        }
    }
}

impl TryFrom<MatrixRecord> for DMatrix<f64> {
    type Error = DfcError;

    fn try_from(rec: MatrixRecord) -> Result<Self> {
        let [rows, cols] = rec.shape;
        if rec.data.len() != rows || rec.data.iter().any(|r| r.len() != cols) {
            return Err(DfcError::Dimension(format!(
                "matrix record declares shape {rows}x{cols} but data does not match"
            )));
        }
        Ok(DMatrix::from_fn(rows, cols, |i, j| rec.data[i][j]))
    }
}

/// `#[serde(with = "linalg::mat_serde")]` adapter for `DMatrix<f64>` fields.
pub mod mat_serde {
    use super::MatrixRecord;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rec = MatrixRecord::deserialize(d)?;
        DMatrix::try_from(rec).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `DVector<f64>` fields (plain array).
pub mod vec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

/// Serde adapter for a list of matrices.
pub mod mat_list_serde {
    use super::MatrixRecord;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let recs: Vec<MatrixRecord> = ms.iter().map(MatrixRecord::from).collect();
        recs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<MatrixRecord>::deserialize(d)?
            .into_iter()
            .map(|r| DMatrix::try_from(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Result<String> {
    Ok(serde_json::to_string(&MatrixRecord::from(m))?)
}

pub fn decode_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rec: MatrixRecord = serde_json::from_str(text)?;
    DMatrix::try_from(rec)
}

/// Column-stacking vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    m.clone().singular_values()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).max()
}

/// Errors unless the smallest singular value exceeds `1e-12 * ||m||_2`.
pub fn ensure_nonsingular(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(DfcError::Dimension(format!("{what} must be square")));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(DfcError::NonFinite(what));
    }
    let sv = singular_values(m);
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    let threshold = 1e-12 * sigma_max;
    if sigma_max == 0.0 || sigma_min <= threshold {
        return Err(DfcError::Singular {
            what,
            sigma_min,
            threshold,
        });
    }
    Ok(())
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    m.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Number of free entries of a symmetric `n x n` matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper-triangular index pairs in row order: (0,0), (0,1), ..., (1,1), ...
pub fn svec_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
}

/// Symmetric matrix from its upper-triangular entries (off-diagonals once).
pub fn from_svec(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for (k, (i, j)) in svec_pairs(n).enumerate() {
        p[(i, j)] = v[k];
        p[(j, i)] = v[k];
    }
    p
}

pub fn to_svec(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    DVector::from_iterator(svec_len(n), svec_pairs(n).map(|(i, j)| p[(i, j)]))
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn svec_roundtrip_is_symmetric() {
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let s = to_svec(&p);
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_svec(s.as_slice(), 3), p);
    }

    #[test]
    fn vec_is_column_stacking() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(vec_of(&m).as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(unvec(vec_of(&m).as_slice(), 2, 3), m);
    }

    #[test]
    fn singular_detection_is_scale_invariant() {
        let m = DMatrix::from_row_slice(2, 2, &[1e8, 2e8, 0.5e8, 1e8]);
        assert!(ensure_nonsingular(&m, "m").is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1e-8, 0.0, 0.0, 2e-8]);
        assert!(ensure_nonsingular(&m, "m").is_ok());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let rec = MatrixRecord {
            shape: [2, 2],
            data: vec![vec![1.0, 2.0]],
        };
        assert!(DMatrix::try_from(rec).is_err());
    }

    proptest! {
        #[test]
        fn matrix_text_roundtrip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 25),
        ) {
            let m = DMatrix::from_fn(rows, cols, |i, j| seed[i * 5 + j]);
            let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

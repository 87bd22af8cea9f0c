//! Linear time-invariant plant, quadratic weights, derivative feedback gains
//! and the closed-loop algebra shared by the rest of the crate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DfcError, Result};
use crate::linalg::{self, mat_serde};

/// `x' = A x + B u` with `A` nonsingular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord", into = "ModelRecord")]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    #[serde(with = "mat_serde")]
    a: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    b: DMatrix<f64>,
}

impl TryFrom<ModelRecord> for StateSpaceModel {
    type Error = DfcError;
    fn try_from(r: ModelRecord) -> Result<Self> {
        StateSpaceModel::new(r.a, r.b)
    }
}

impl From<StateSpaceModel> for ModelRecord {
    fn from(m: StateSpaceModel) -> Self {
        ModelRecord { a: m.a, b: m.b }
    }
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(DfcError::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(DfcError::Dimension(format!(
                "B must be {}xm with m >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(DfcError::NonFinite("B"));
        }
        linalg::ensure_nonsingular(&a, "A")?;
        Ok(StateSpaceModel { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a_inv(&self) -> DMatrix<f64> {
        // Nonsingularity is a construction invariant.
        self.a.clone().try_inverse().expect("A is nonsingular by construction")
    }
}

/// Quadratic weights on the state derivative (`Q`) and input (`R`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRecord", into = "WeightsRecord")]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsRecord {
    #[serde(with = "mat_serde")]
    q: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    r: DMatrix<f64>,
}

impl TryFrom<WeightsRecord> for CostWeights {
    type Error = DfcError;
    fn try_from(r: WeightsRecord) -> Result<Self> {
        CostWeights::new(r.q, r.r)
    }
}

impl From<CostWeights> for WeightsRecord {
    fn from(w: CostWeights) -> Self {
        WeightsRecord { q: w.q, r: w.r }
    }
}

impl CostWeights {
    /// Both weights are symmetrized; `Q` must be PSD (eigenvalues above
    /// `-1e-10`) and `R` positive definite.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(DfcError::Dimension("Q and R must be square".into()));
        }
        if q.iter().chain(r.iter()).any(|x| !x.is_finite()) {
            return Err(DfcError::NonFinite("cost weights"));
        }
        let q = linalg::symmetrize(&q);
        let r = linalg::symmetrize(&r);
        if linalg::sym_eigenvalues(&q).first().is_some_and(|&l| l < -1e-10) {
            return Err(DfcError::Invalid("Q must be positive semi-definite".into()));
        }
        if linalg::sym_eigenvalues(&r).first().is_none_or(|&l| l <= 0.0) {
            return Err(DfcError::Invalid("R must be positive definite".into()));
        }
        Ok(CostWeights { q, r })
    }

    /// `Q = I_n`, `R = diag(r_diag)`.
    pub fn identity_q(n: usize, r_diag: &[f64]) -> Result<Self> {
        CostWeights::new(
            DMatrix::identity(n, n),
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(r_diag)),
        )
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> DMatrix<f64> {
        self.r.clone().try_inverse().expect("R is positive definite by construction")
    }

    pub fn check_dims(&self, model: &StateSpaceModel) -> Result<()> {
        if self.q.nrows() != model.n() || self.r.nrows() != model.m() {
            return Err(DfcError::Dimension(format!(
                "weights are Q {0}x{0}, R {1}x{1} but model has n = {2}, m = {3}",
                self.q.nrows(),
                self.r.nrows(),
                model.n(),
                model.m()
            )));
        }
        Ok(())
    }
}

/// Derivative feedback gain `K` (m x n) of the law `u = -K x'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gain(#[serde(with = "mat_serde")] pub DMatrix<f64>);

impl Gain {
    pub fn zeros(m: usize, n: usize) -> Self {
        Gain(DMatrix::zeros(m, n))
    }

    pub fn from_rows(m: usize, n: usize, rows: &[f64]) -> Self {
        Gain(DMatrix::from_row_slice(m, n, rows))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn check_dims(&self, model: &StateSpaceModel) -> Result<()> {
        if self.0.nrows() != model.m() || self.0.ncols() != model.n() {
            return Err(DfcError::Dimension(format!(
                "gain is {}x{} but model needs {}x{}",
                self.0.nrows(),
                self.0.ncols(),
                model.m(),
                model.n()
            )));
        }
        Ok(())
    }
}

/// `(I + B K)^-1 A`, the state matrix of the loop closed by `u = -K x'`.
pub fn closed_loop_matrix(model: &StateSpaceModel, gain: &Gain) -> Result<DMatrix<f64>> {
    gain.check_dims(model)?;
    let n = model.n();
    let loop_matrix = DMatrix::identity(n, n) + model.b() * gain.matrix();
    if linalg::ensure_nonsingular(&loop_matrix, "I + BK").is_err() {
        return Err(DfcError::AlgebraicLoop);
    }
    loop_matrix
        .lu()
        .solve(model.a())
        .ok_or(DfcError::AlgebraicLoop)
}

/// True iff every eigenvalue of `m` has real part below `-margin`.
pub fn is_hurwitz(m: &DMatrix<f64>, margin: f64) -> Result<bool> {
    if !m.is_square() {
        return Err(DfcError::Dimension("Hurwitz test needs a square matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(DfcError::NonFinite("Hurwitz test input"));
    }
    Ok(linalg::eigenvalues(m).iter().all(|l| l.re < -margin))
}

/// Closed loop is asymptotically stable under `gain`.
pub fn is_stabilizing(model: &StateSpaceModel, gain: &Gain) -> Result<bool> {
    match closed_loop_matrix(model, gain) {
        Ok(m) => is_hurwitz(&m, 0.0),
        Err(DfcError::AlgebraicLoop) => Ok(false),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maglev;
    use proptest::prelude::*;

    fn companion(c1: f64, c0: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -c0, -c1])
    }

    #[test]
    fn zero_gain_returns_a_unchanged() {
        let model = maglev::printed_model();
        let cl = closed_loop_matrix(&model, &Gain::zeros(2, 4)).unwrap();
        assert_eq!(&cl, model.a());
    }

    #[test]
    fn singular_loop_is_reported() {
        let model = StateSpaceModel::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        )
        .unwrap();
        let err = closed_loop_matrix(&model, &Gain::from_rows(1, 1, &[-1.0])).unwrap_err();
        assert!(matches!(err, DfcError::AlgebraicLoop));
    }

    #[test]
    fn singular_a_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            StateSpaceModel::new(a, b),
            Err(DfcError::Singular { .. })
        ));
    }

    #[test]
    fn hurwitz_basic_cases() {
        assert!(is_hurwitz(&-DMatrix::<f64>::identity(3, 3), 0.0).unwrap());
        // (s + 1)(s + 2) = s^2 + 3 s + 2
        assert!(is_hurwitz(&companion(3.0, 2.0), 0.0).unwrap());
        assert!(!is_hurwitz(&companion(3.0, 2.0), 1.5).unwrap());
        assert!(!is_hurwitz(maglev::printed_model().a(), 0.0).unwrap());
        let mut bad = DMatrix::<f64>::identity(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(is_hurwitz(&bad, 0.0).is_err());
    }

    #[test]
    fn optimal_gain_stabilizes_nominal_plant() {
        let model = maglev::printed_model();
        let cl = closed_loop_matrix(&model, &maglev::k_are_printed()).unwrap();
        assert!(is_hurwitz(&cl, 0.0).unwrap());
    }

    #[test]
    fn placed_poles_match_characteristic_roots() {
        // Stable 2x2 plant x' = A x + b u; target DFC poles -3 and -4.
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let model = StateSpaceModel::new(a, b).unwrap();
        let k = crate::dfc::place_dfc_poles(&model, &[-3.0, -4.0]).unwrap();
        let cl = closed_loop_matrix(&model, &k).unwrap();
        // Oracle: roots of det(sI - M) = s^2 - tr(M) s + det(M).
        let tr = cl[(0, 0)] + cl[(1, 1)];
        let det = cl[(0, 0)] * cl[(1, 1)] - cl[(0, 1)] * cl[(1, 0)];
        let disc = tr * tr - 4.0 * det;
        assert!(disc >= 0.0);
        let mut roots = [(tr - disc.sqrt()) / 2.0, (tr + disc.sqrt()) / 2.0];
        roots.sort_by(f64::total_cmp);
        assert!((roots[0] + 4.0).abs() < 1e-8, "{roots:?}");
        assert!((roots[1] + 3.0).abs() < 1e-8, "{roots:?}");
    }

    #[test]
    fn weights_validation() {
        assert!(CostWeights::identity_q(2, &[1.0, 2.0]).is_ok());
        assert!(CostWeights::new(DMatrix::identity(2, 2), DMatrix::zeros(1, 1)).is_err());
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(CostWeights::new(q, DMatrix::identity(1, 1)).is_err());
        // slight asymmetry tolerated
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 1e-14, 0.0, 1.0]);
        let w = CostWeights::new(q, DMatrix::identity(1, 1)).unwrap();
        assert_eq!(w.q()[(0, 1)], w.q()[(1, 0)]);
    }

    #[test]
    fn model_json_validates_on_load() {
        let json = r#"{"a":{"shape":[1,1],"data":[[0.0]]},"b":{"shape":[1,1],"data":[[1.0]]}}"#;
        assert!(serde_json::from_str::<StateSpaceModel>(json).is_err());
        let model = maglev::printed_model();
        let text = serde_json::to_string(&model).unwrap();
        assert_eq!(serde_json::from_str::<StateSpaceModel>(&text).unwrap(), model);
    }

    proptest! {
        #[test]
        fn closed_loop_satisfies_loop_identity(
            a_entries in proptest::collection::vec(-3.0f64..3.0, 9),
            b_entries in proptest::collection::vec(-2.0f64..2.0, 6),
            k_entries in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let a = DMatrix::from_row_slice(3, 3, &a_entries) + DMatrix::identity(3, 3) * 7.0;
            let b = DMatrix::from_row_slice(3, 2, &b_entries);
            let Ok(model) = StateSpaceModel::new(a, b) else { return Ok(()); };
            let k = Gain::from_rows(2, 3, &k_entries);
            if let Ok(cl) = closed_loop_matrix(&model, &k) {
                let lhs = (DMatrix::identity(3, 3) + model.b() * k.matrix()) * cl;
                prop_assert!(linalg::rel_frobenius(&lhs, model.a()) < 1e-10);
            }
        }
    }
}

//! Observation sequences with per-entry missingness.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One observed sequence: `y` is `N×T` (one column per step) and
/// `observed[(n, t)]` says whether entry `n` at step `t` is present.
/// Missing entries of `y` are stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub y: DMatrix<f64>,
    pub observed: DMatrix<bool>,
}

impl Sequence {
    pub fn fully_observed(y: DMatrix<f64>) -> Self {
        let observed = DMatrix::from_element(y.nrows(), y.ncols(), true);
        Sequence { y, observed }
    }

    /// Builds a sequence, zeroing `y` wherever the entry is missing.
    pub fn new(mut y: DMatrix<f64>, observed: DMatrix<bool>) -> Result<Self> {
        if y.shape() != observed.shape() {
            return Err(Error::shape(
                "sequence mask",
                format!("{:?}", y.shape()),
                format!("{:?}", observed.shape()),
            ));
        }
        for (v, o) in y.iter_mut().zip(observed.iter()) {
            if !*o {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::NonFinite { what: "observation" });
            }
        }
        Ok(Sequence { y, observed })
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.y.ncols() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.y.nrows()
    }

    /// True when at least one entry of step `t` is present.
    pub fn step_observed(&self, t: usize) -> bool {
        self.observed.column(t).iter().any(|o| *o)
    }

    /// Marks every entry of step `t` missing, as if `y_t` were deleted.
    pub fn delete_step(&mut self, t: usize) {
        self.observed.column_mut(t).fill(false);
        self.y.column_mut(t).fill(0.0);
    }

    /// Marks dimension `n` missing at every step.
    pub fn hide_dim(&mut self, n: usize) {
        self.observed.row_mut(n).fill(false);
        self.y.row_mut(n).fill(0.0);
    }

    /// Steps `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Sequence {
        Sequence {
            y: self.y.columns(start, len).into_owned(),
            observed: self.observed.columns(start, len).into_owned(),
        }
    }

    /// Observed mask as 0/1 floats.
    pub fn mask_f64(&self) -> DMatrix<f64> {
        self.observed.map(|o| if o { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_entries_are_zeroed() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 3.0, 4.0]);
        let obs = DMatrix::from_row_slice(2, 2, &[true, false, true, true]);
        let s = Sequence::new(y, obs).unwrap();
        assert_eq!(s.y[(0, 1)], 0.0);
        assert!(s.step_observed(1));
        let mut s2 = s.clone();
        s2.delete_step(1);
        assert!(!s2.step_observed(1));
        assert!(Sequence::new(DMatrix::from_element(1, 1, f64::NAN), DMatrix::from_element(1, 1, true)).is_err());
    }
}

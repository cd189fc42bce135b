//! Reference detectors: exact ML by depth-first tree search and the linear
//! MMSE filter followed by a per-component slicer.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::signal::RealSystem;

/// Default bound on `|Q|^m` for [`detect_ml`].
pub const DEFAULT_ML_CAP: u64 = 1 << 20;

/// Exact minimizer of `d(x_1^m)` with the default search-space cap.
pub fn detect_ml(sys: &RealSystem) -> Result<Vec<f64>> {
    detect_ml_with_cap(sys, DEFAULT_ML_CAP)
}

/// Depth-first enumeration of the metric tree with branch-and-bound.
///
/// Children are visited in PAM order and a branch is cut as soon as its
/// partial metric reaches the incumbent, so ties resolve to the first
/// minimizer in enumeration order.
pub fn detect_ml_with_cap(sys: &RealSystem, cap: u64) -> Result<Vec<f64>> {
    let m = sys.m();
    let size = (sys.constellation().size() as f64).powi(m as i32);
    if size > cap as f64 {
        return Err(Error::Capacity { size, cap });
    }
    let mut search = MlSearch {
        sys,
        levels: sys.constellation().pam_levels(),
        x: vec![0.0; m],
        best: vec![0.0; m],
        best_metric: f64::INFINITY,
    };
    search.descend(m, 0.0);
    Ok(search.best)
}

struct MlSearch<'a> {
    sys: &'a RealSystem,
    levels: &'a [f64],
    x: Vec<f64>,
    best: Vec<f64>,
    best_metric: f64,
}

impl MlSearch<'_> {
    /// `fixed` is the number of leading rows (from the bottom) not yet decided,
    /// i.e. positions `fixed..m` are set.
    fn descend(&mut self, fixed: usize, partial: f64) {
        if fixed == 0 {
            if partial < self.best_metric {
                self.best_metric = partial;
                self.best.copy_from_slice(&self.x);
            }
            return;
        }
        let k = fixed - 1;
        for &candidate in self.levels {
            let d = partial + self.sys.branch_metric_at(&self.x, k, candidate);
            if d >= self.best_metric {
                continue;
            }
            self.x[k] = candidate;
            self.descend(k, d);
        }
    }
}

/// Unsliced MMSE estimate `(HᵀH + (σ_w²/σ_x²) I)⁻¹ Hᵀ y'` with per-real-
/// dimension variances.
pub fn mmse_filter_output(sys: &RealSystem) -> Result<Vec<f64>> {
    let h = sys.h();
    let m = sys.m();
    let ratio = sys.sigma_w2() / sys.constellation().real_symbol_energy();
    let gram = h.transpose() * h + DMatrix::<f64>::identity(m, m) * ratio;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("MMSE Gram matrix is not positive definite".into()))?;
    let estimate = chol.solve(sys.ht_y_prime());
    if estimate.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite MMSE estimate".into()));
    }
    Ok(estimate.iter().copied().collect())
}

/// Linear MMSE detection with nearest-level slicing.
pub fn detect_mmse(sys: &RealSystem) -> Result<Vec<f64>> {
    let q = sys.constellation();
    Ok(mmse_filter_output(sys)?.into_iter().map(|v| q.slice(v)).collect())
}

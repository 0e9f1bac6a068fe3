//! Bounded dual simplex for the pinball regression.
//!
//! State is a basis of `d` observations plus a bound flag for every
//! non-basic observation (`upper` ⇔ `η_j = 1 − α_j`). Each iteration
//! interpolates the scores on the basis, resets the non-basic flags from the
//! residual signs (dual feasibility), recovers the basic duals from
//! `Φᵀη = 0`, and if one of them leaves its box performs a long-step
//! (bound-flipping) ratio test along the edge that releases it. In primal
//! terms every step is an exact line search of the piecewise-linear
//! objective, so the objective never increases.

use super::{pinball_loss, BasisFactor, FeatureMatrix, QRSolution};
use crate::error::{Error, Result};

const DUAL_FEAS_TOL: f64 = 1e-10;
const RESIDUAL_REL_TOL: f64 = 1e-10;
const PIVOT_REL_TOL: f64 = 1e-11;

pub(crate) enum FaceOutcome {
    Optimal,
    /// The guard observation would have become interpolated.
    GuardHit,
}

pub(crate) struct SimplexSolver<'a> {
    features: &'a FeatureMatrix,
    scores: Vec<f64>,
    levels: &'a [f64],
    basis: Vec<usize>,
    position: Vec<Option<usize>>,
    upper: Vec<bool>,
    factor: Option<BasisFactor>,
    beta: Vec<f64>,
    residuals: Vec<f64>,
    basic_eta: Vec<f64>,
    iterations: usize,
}

impl<'a> SimplexSolver<'a> {
    /// Set up a solver. `warm` is a candidate basis (e.g. from a related
    /// solve); it is ignored when invalid or singular for these features.
    pub(crate) fn new(
        features: &'a FeatureMatrix,
        scores: &[f64],
        levels: &'a [f64],
        warm: Option<&[usize]>,
    ) -> Result<Self> {
        let n = features.rows();
        let d = features.cols();
        let mut s = Self {
            features,
            scores: scores.to_vec(),
            levels,
            basis: Vec::new(),
            position: vec![None; n],
            upper: vec![true; n],
            factor: None,
            beta: vec![0.0; d],
            residuals: vec![0.0; n],
            basic_eta: vec![0.0; d],
            iterations: 0,
        };
        let warm_ok = warm.is_some_and(|b| {
            b.len() == d && b.iter().all(|&i| i < n) && {
                let mut seen = vec![false; n];
                b.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
            }
        });
        if warm_ok {
            let b = warm.unwrap();
            if let Ok(f) = BasisFactor::from_rows(features, b) {
                s.set_basis(b.to_vec());
                s.factor = Some(f);
                return Ok(s);
            }
        }
        let b = s.cold_basis()?;
        s.factor = Some(BasisFactor::from_rows(features, &b).map_err(|_| {
            Error::DegenerateDesign("selected basis rows are numerically singular".into())
        })?);
        s.set_basis(b);
        Ok(s)
    }

    fn n(&self) -> usize {
        self.features.rows()
    }

    fn d(&self) -> usize {
        self.features.cols()
    }

    fn set_basis(&mut self, b: Vec<usize>) {
        self.position.iter_mut().for_each(|p| *p = None);
        for (k, &i) in b.iter().enumerate() {
            self.position[i] = Some(k);
        }
        self.basis = b;
    }

    fn lower_bound(&self, i: usize) -> f64 {
        -self.levels[i]
    }

    fn upper_bound(&self, i: usize) -> f64 {
        1.0 - self.levels[i]
    }

    fn nonbasic_eta(&self, j: usize) -> f64 {
        if self.upper[j] {
            self.upper_bound(j)
        } else {
            self.lower_bound(j)
        }
    }

    /// Pick `d` linearly independent rows, preferring observations whose
    /// score sits near the target quantile so the first vertex is close to
    /// optimal.
    fn cold_basis(&self) -> Result<Vec<usize>> {
        let n = self.n();
        let d = self.d();
        let mean_level = self.levels.iter().sum::<f64>() / n as f64;
        let mut sorted = self.scores.clone();
        sorted.sort_by(f64::total_cmp);
        let q_idx = (((1.0 - mean_level) * n as f64).ceil() as usize).clamp(1, n) - 1;
        let target = sorted[q_idx];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            (self.scores[a] - target)
                .abs()
                .total_cmp(&(self.scores[b] - target).abs())
                .then(a.cmp(&b))
        });

        let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut chosen = Vec::with_capacity(d);
        for i in order {
            let row = self.features.row(i);
            let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm0 == 0.0 {
                continue;
            }
            let mut w = row.to_vec();
            for q in &ortho {
                let proj: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= proj * qi);
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 * norm0 {
                w.iter_mut().for_each(|v| *v /= norm);
                ortho.push(w);
                chosen.push(i);
                if chosen.len() == d {
                    return Ok(chosen);
                }
            }
        }
        Err(Error::DegenerateDesign(format!(
            "feature matrix has rank {} < {d} columns",
            chosen.len()
        )))
    }

    fn residual_tol(&self, i: usize) -> f64 {
        let row = self.features.row(i);
        let mag: f64 = row.iter().zip(&self.beta).map(|(x, b)| (x * b).abs()).sum();
        RESIDUAL_REL_TOL * (self.scores[i].abs() + mag) + f64::MIN_POSITIVE
    }

    /// Interpolate on the basis, refresh residual-sign flags and basic duals.
    fn refresh(&mut self) -> Result<()> {
        if self.factor.is_none() {
            self.factor = Some(BasisFactor::from_rows(self.features, &self.basis)?);
        }
        let factor = self.factor.as_ref().unwrap();
        let sb: Vec<f64> = self.basis.iter().map(|&i| self.scores[i]).collect();
        self.beta = factor.solve(&sb);
        let d = self.d();
        let mut rhs = vec![0.0; d];
        for j in 0..self.n() {
            if self.position[j].is_some() {
                self.residuals[j] = 0.0;
                continue;
            }
            let r = self.scores[j] - self.features.dot_row(j, &self.beta);
            self.residuals[j] = r;
            let tol = self.residual_tol(j);
            if r > tol {
                self.upper[j] = true;
            } else if r < -tol {
                self.upper[j] = false;
            }
            let eta = self.nonbasic_eta(j);
            for (acc, x) in rhs.iter_mut().zip(self.features.row(j)) {
                *acc -= eta * x;
            }
        }
        self.basic_eta = factor.solve_transpose(&rhs);
        Ok(())
    }

    fn replace_basic(&mut self, k: usize, entering: usize) {
        let leaving = self.basis[k];
        self.position[leaving] = None;
        self.position[entering] = Some(k);
        self.basis[k] = entering;
        self.factor = None;
    }

    /// Non-basic breakpoints along `β + s·σ·ρ`, `s ≥ 0`: the step at which a
    /// residual reaches zero from the side its bound flag allows.
    fn breakpoints(&self, rho: &[f64], sigma: f64) -> Vec<(f64, usize, f64)> {
        let rho_mag: f64 = rho.iter().map(|v| v.abs()).sum();
        let mut out = Vec::new();
        for j in 0..self.n() {
            if self.position[j].is_some() {
                continue;
            }
            let row = self.features.row(j);
            let a = sigma * super::dot(row, rho);
            let scale: f64 = row.iter().map(|v| v.abs()).sum::<f64>() * rho_mag;
            if a.abs() <= PIVOT_REL_TOL * scale {
                continue;
            }
            let crosses = if self.upper[j] { a > 0.0 } else { a < 0.0 };
            if crosses {
                let s = (self.residuals[j] / a).max(0.0);
                out.push((s, j, a.abs()));
            }
        }
        out
    }

    fn max_iterations(&self) -> usize {
        50 * (self.n() + self.d()) + 1000
    }

    pub(crate) fn solve(&mut self) -> Result<QRSolution> {
        let limit = self.max_iterations();
        loop {
            self.refresh()?;
            // most infeasible basic dual leaves
            let mut leave: Option<(usize, f64, f64)> = None;
            for (k, &i) in self.basis.iter().enumerate() {
                let eta = self.basic_eta[k];
                let below = self.lower_bound(i) - eta;
                let above = eta - self.upper_bound(i);
                let (viol, sigma) = if below > above { (below, 1.0) } else { (above, -1.0) };
                if viol > DUAL_FEAS_TOL && leave.is_none_or(|(_, v, _)| viol > v) {
                    leave = Some((k, viol, sigma));
                }
            }
            let Some((k, viol, sigma)) = leave else {
                return Ok(self.snapshot());
            };
            if self.iterations >= limit {
                return Err(Error::NotConverged {
                    iterations: self.iterations,
                });
            }
            self.iterations += 1;

            let rho = self
                .factor
                .as_ref()
                .unwrap()
                .inverse_column(k, self.d());
            let mut bps = self.breakpoints(&rho, sigma);
            bps.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut slope = -viol;
            let mut entering = None;
            for (idx, &(_, j, mag)) in bps.iter().enumerate() {
                slope += mag;
                if slope >= -DUAL_FEAS_TOL {
                    entering = Some((idx, j));
                    break;
                }
            }
            let Some((stop, q)) = entering else {
                return Err(Error::DegenerateDesign(
                    "pinball regression is unbounded along a basis edge".into(),
                ));
            };
            for &(_, j, _) in &bps[..stop] {
                self.upper[j] = !self.upper[j];
            }
            let p = self.basis[k];
            self.upper[p] = sigma < 0.0;
            self.replace_basic(k, q);
        }
    }

    /// Among optimal vertices, move to one minimizing `cᵀβ`.
    ///
    /// Only degenerate pivots are taken: a basic dual sitting on its bound is
    /// released along the edge that keeps the objective flat, up to the first
    /// breakpoint. Bland's rule on observation indices prevents cycling.
    /// Call after [`Self::solve`].
    pub(crate) fn minimize_on_face(&mut self, c: &[f64], guard: usize) -> Result<FaceOutcome> {
        let limit = self.max_iterations();
        let c_scale: f64 = c.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        let mut steps = 0usize;
        loop {
            self.refresh()?;
            let d = self.d();
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by_key(|&k| self.basis[k]);
            let mut chosen = None;
            for k in order {
                let i = self.basis[k];
                let eta = self.basic_eta[k];
                let sigma = if (eta - self.lower_bound(i)).abs() <= DUAL_FEAS_TOL {
                    1.0
                } else if (eta - self.upper_bound(i)).abs() <= DUAL_FEAS_TOL {
                    -1.0
                } else {
                    continue;
                };
                let rho = self.factor.as_ref().unwrap().inverse_column(k, d);
                let rho_mag: f64 = rho.iter().map(|v| v.abs()).sum();
                let rate = sigma * super::dot(c, &rho);
                if rate < -PIVOT_REL_TOL * c_scale * rho_mag {
                    chosen = Some((k, sigma, rho));
                    break;
                }
            }
            let Some((k, sigma, rho)) = chosen else {
                return Ok(FaceOutcome::Optimal);
            };
            if steps >= limit {
                return Err(Error::NotConverged { iterations: steps });
            }
            steps += 1;
            let bps = self.breakpoints(&rho, sigma);
            let Some(&(_, q, _)) = bps
                .iter()
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            else {
                return Err(Error::DegenerateDesign(
                    "optimal face is unbounded in the secondary objective".into(),
                ));
            };
            if q == guard {
                return Ok(FaceOutcome::GuardHit);
            }
            let p = self.basis[k];
            self.upper[p] = sigma < 0.0;
            self.replace_basic(k, q);
        }
    }

    pub(crate) fn basis(&self) -> &[usize] {
        &self.basis
    }

    pub(crate) fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub(crate) fn is_basic(&self, i: usize) -> bool {
        self.position[i].is_some()
    }

    pub(crate) fn residual(&self, i: usize) -> f64 {
        self.residuals[i]
    }

    pub(crate) fn eta(&self, i: usize) -> f64 {
        match self.position[i] {
            Some(k) => self.basic_eta[k].clamp(self.lower_bound(i), self.upper_bound(i)),
            None => self.nonbasic_eta(i),
        }
    }

    pub(crate) fn snapshot(&self) -> QRSolution {
        let n = self.n();
        let duals: Vec<f64> = (0..n).map(|i| self.eta(i)).collect();
        let objective = (0..n)
            .map(|i| pinball_loss(self.residuals[i], self.levels[i]))
            .sum();
        QRSolution {
            beta: self.beta.clone(),
            duals,
            basis: self.basis.clone(),
            objective,
        }
    }
}

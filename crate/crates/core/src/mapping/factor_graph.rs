//! Factor graph over 3-D flower positions, solved as a nonlinear least
//! squares problem with Levenberg-Marquardt.
//!
//! The cost is the sum of squared Mahalanobis residuals of three factor
//! kinds: priors `x_o - x_i`, dynamics `x_j - f(x_{j-1})` (static model,
//! `f` = identity) and measurements `z_k - h_k(x_k)`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose3};

/// Observation function `h` and its Jacobian with respect to the position.
pub trait MeasurementModel: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &Vector3<f64>) -> DVector<f64>;
    /// `dim x 3`
    fn jacobian(&self, x: &Vector3<f64>) -> DMatrix<f64>;
}

/// Direct observation of the world position.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl MeasurementModel for IdentityModel {
    fn dim(&self) -> usize {
        3
    }

    fn predict(&self, x: &Vector3<f64>) -> DVector<f64> {
        DVector::from_column_slice(x.as_slice())
    }

    fn jacobian(&self, _x: &Vector3<f64>) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }
}

/// Pixel coordinates plus depth of the point as seen from a camera at
/// `camera_pose` (camera-to-world).
#[derive(Debug, Clone, Copy)]
pub struct PixelDepthModel {
    pub camera_pose: Pose3,
    pub intrinsics: CameraIntrinsics,
}

impl MeasurementModel for PixelDepthModel {
    fn dim(&self) -> usize {
        3
    }

    fn predict(&self, x: &Vector3<f64>) -> DVector<f64> {
        let p = self.camera_pose.inverse().transform_point(x);
        let k = &self.intrinsics;
        DVector::from_vec(vec![k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z])
    }

    fn jacobian(&self, x: &Vector3<f64>) -> DMatrix<f64> {
        let inv = self.camera_pose.inverse();
        let p = inv.transform_point(x);
        let k = &self.intrinsics;
        let z2 = p.z * p.z;
        let dproj = nalgebra::Matrix3::new(
            k.fx / p.z, 0.0, -k.fx * p.x / z2,
            0.0, k.fy / p.z, -k.fy * p.y / z2,
            0.0, 0.0, 1.0,
        );
        let rot = inv.orientation().to_rotation_matrix().into_inner();
        let j = dproj * rot;
        DMatrix::from_column_slice(3, 3, j.as_slice())
    }
}

#[derive(Debug, Clone)]
pub enum Factor {
    Prior {
        var: usize,
        mean: Vector3<f64>,
        cov: Matrix3<f64>,
    },
    /// Static motion model between two epochs of the same flower.
    Dynamics {
        from: usize,
        to: usize,
        cov: Matrix3<f64>,
    },
    Measurement {
        var: usize,
        z: DVector<f64>,
        model: Arc<dyn MeasurementModel>,
        cov: DMatrix<f64>,
    },
}

/// A factor with its residual whitened by the inverse Cholesky factor of
/// its covariance.
#[derive(Debug, Clone)]
struct Whitened {
    factor: Factor,
    /// `L^{-1}` with `cov = L L^T`.
    inv_sqrt: DMatrix<f64>,
}

fn inverse_sqrt(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1e-300) {
        return Err(Error::NotPositiveDefinite);
    }
    let chol = cov.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let n = chol.l().nrows();
    chol.l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite)
}

fn dmat3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    num_vars: usize,
    factors: Vec<Whitened>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self) -> usize {
        self.num_vars += 1;
        self.num_vars - 1
    }

    pub fn num_variables(&self) -> usize {
        self.num_vars
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    fn check_var(&self, v: usize) -> Result<()> {
        if v < self.num_vars {
            Ok(())
        } else {
            Err(Error::UnknownVariable(v))
        }
    }

    pub fn add_prior(&mut self, var: usize, mean: Vector3<f64>, cov: Matrix3<f64>) -> Result<()> {
        self.check_var(var)?;
        let inv_sqrt = inverse_sqrt(dmat3(&cov))?;
        self.factors.push(Whitened {
            factor: Factor::Prior { var, mean, cov },
            inv_sqrt,
        });
        Ok(())
    }

    pub fn add_dynamics(&mut self, from: usize, to: usize, cov: Matrix3<f64>) -> Result<()> {
        self.check_var(from)?;
        self.check_var(to)?;
        let inv_sqrt = inverse_sqrt(dmat3(&cov))?;
        self.factors.push(Whitened {
            factor: Factor::Dynamics { from, to, cov },
            inv_sqrt,
        });
        Ok(())
    }

    pub fn add_measurement(
        &mut self,
        var: usize,
        z: DVector<f64>,
        model: Arc<dyn MeasurementModel>,
        cov: DMatrix<f64>,
    ) -> Result<()> {
        self.check_var(var)?;
        if z.len() != model.dim() || cov.shape() != (z.len(), z.len()) {
            return Err(Error::DimensionMismatch(format!(
                "measurement of size {} for a {}-D model with {:?} covariance",
                z.len(),
                model.dim(),
                cov.shape()
            )));
        }
        let inv_sqrt = inverse_sqrt(cov.clone())?;
        self.factors.push(Whitened {
            factor: Factor::Measurement { var, z, model, cov },
            inv_sqrt,
        });
        Ok(())
    }

    /// Position measurement with the identity observation function.
    pub fn add_position_measurement(&mut self, var: usize, z: Vector3<f64>, cov: Matrix3<f64>) -> Result<()> {
        self.add_measurement(
            var,
            DVector::from_column_slice(z.as_slice()),
            Arc::new(IdentityModel),
            dmat3(&cov),
        )
    }

    pub fn factors(&self) -> impl Iterator<Item = &Factor> {
        self.factors.iter().map(|w| &w.factor)
    }

    /// Whitened residual and its Jacobian blocks `(var, dr/dx_var)`.
    fn linearize(w: &Whitened, x: &[Vector3<f64>]) -> (DVector<f64>, Vec<(usize, DMatrix<f64>)>) {
        let (r, blocks) = match &w.factor {
            Factor::Prior { var, mean, .. } => (
                DVector::from_column_slice((mean - x[*var]).as_slice()),
                vec![(*var, -DMatrix::identity(3, 3))],
            ),
            Factor::Dynamics { from, to, .. } => (
                DVector::from_column_slice((x[*to] - x[*from]).as_slice()),
                vec![(*to, DMatrix::identity(3, 3)), (*from, -DMatrix::identity(3, 3))],
            ),
            Factor::Measurement { var, z, model, .. } => (
                z - model.predict(&x[*var]),
                vec![(*var, -model.jacobian(&x[*var]))],
            ),
        };
        (
            &w.inv_sqrt * r,
            blocks.into_iter().map(|(v, j)| (v, &w.inv_sqrt * j)).collect(),
        )
    }

    /// Sum of squared Mahalanobis residuals.
    pub fn cost(&self, x: &[Vector3<f64>]) -> f64 {
        self.factors
            .iter()
            .map(|w| Self::linearize(w, x).0.norm_squared())
            .sum()
    }

    /// `cost(x) - cost(y)` summed per factor as `(a - b) . (a + b)`, which
    /// stays accurate when both costs are large and nearly equal.
    fn cost_decrease(&self, x: &[Vector3<f64>], y: &[Vector3<f64>]) -> f64 {
        self.factors
            .iter()
            .map(|w| {
                let a = Self::linearize(w, x).0;
                let b = Self::linearize(w, y).0;
                (&a - &b).dot(&(&a + &b))
            })
            .sum()
    }

    fn normal_equations(&self, x: &[Vector3<f64>]) -> (DMatrix<f64>, DVector<f64>, f64) {
        let n = 3 * self.num_vars;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut cost = 0.0;
        for w in &self.factors {
            let (r, blocks) = Self::linearize(w, x);
            cost += r.norm_squared();
            for (vi, ji) in &blocks {
                let gi = ji.transpose() * &r;
                let mut seg = g.rows_mut(3 * vi, 3);
                seg += &gi;
                for (vj, jj) in &blocks {
                    let hij = ji.transpose() * jj;
                    let mut view = h.view_mut((3 * vi, 3 * vj), (3, 3));
                    view += hij;
                }
            }
        }
        (h, g, cost)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this.
    pub cost_tolerance: f64,
    /// Initial damping relative to the diagonal of the normal matrix.
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            cost_tolerance: 1e-9,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub values: Vec<Vector3<f64>>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Marginal covariance of each variable, from the inverse of the
    /// Gauss-Newton normal matrix at the solution.
    pub covariances: Vec<Matrix3<f64>>,
}

pub fn optimize_tracks(graph: &FactorGraph, initial: &[Vector3<f64>]) -> Result<LmResult> {
    optimize_with(graph, initial, &LmOptions::default())
}

pub fn optimize_with(graph: &FactorGraph, initial: &[Vector3<f64>], opts: &LmOptions) -> Result<LmResult> {
    if initial.len() != graph.num_vars {
        return Err(Error::DimensionMismatch(format!(
            "{} initial values for {} variables",
            initial.len(),
            graph.num_vars
        )));
    }
    let mut used = vec![false; graph.num_vars];
    for f in graph.factors() {
        match f {
            Factor::Prior { var, .. } | Factor::Measurement { var, .. } => used[*var] = true,
            Factor::Dynamics { from, to, .. } => {
                used[*from] = true;
                used[*to] = true;
            }
        }
    }
    if let Some(v) = used.iter().position(|u| !u) {
        return Err(Error::SingularNormalEquations(v));
    }

    let mut x = initial.to_vec();
    let (mut h, mut g, mut cost) = graph.normal_equations(&x);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.initial_lambda;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            let d = h[(i, i)];
            if d <= 0.0 {
                return Err(Error::SingularNormalEquations(i / 3));
            }
            damped[(i, i)] += lambda * d;
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let delta = chol.solve(&(-&g));
        let candidate: Vec<Vector3<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, xi)| xi + Vector3::new(delta[3 * i], delta[3 * i + 1], delta[3 * i + 2]))
            .collect();
        let decrease = graph.cost_decrease(&x, &candidate);
        // a change lost in the rounding of a large cost still moves x closer
        // to the optimum; it also ends the loop below
        if decrease > -1e-12 * cost.max(1.0) {
            x = candidate;
            let prev = cost;
            (h, g, cost) = graph.normal_equations(&x);
            // rounding in the direct sum must not show up as an increase
            cost = cost.min(prev);
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-15);
            if decrease < opts.cost_tolerance {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }

    let covariances = match h.clone().try_inverse() {
        Some(inv) => (0..graph.num_vars)
            .map(|v| inv.fixed_view::<3, 3>(3 * v, 3 * v).into_owned())
            .collect(),
        None => return Err(Error::SingularNormalEquations(0)),
    };

    Ok(LmResult {
        values: x,
        initial_cost,
        final_cost: cost,
        iterations,
        cost_history: history,
        covariances,
    })
}

/// Closed-form information-weighted mean of position measurements,
/// `(sum Xi_k^{-1})^{-1} sum Xi_k^{-1} z_k`.
pub fn weighted_mean(measurements: &[(Vector3<f64>, Matrix3<f64>)]) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let mut info = Matrix3::zeros();
    let mut eta = Vector3::zeros();
    for (z, cov) in measurements {
        let inv = cov.try_inverse()?;
        info += inv;
        eta += inv * z;
    }
    let cov = info.try_inverse()?;
    Some((cov * eta, cov))
}

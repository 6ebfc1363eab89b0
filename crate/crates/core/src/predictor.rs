use nalgebra::{DMatrix, DVector};

use crate::{Error, FeatureKind, FeatureSequence, Result, Rows};

/// Affine map `y = W x + b` fitted by ridge least squares (bias unpenalized).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    /// Row-major `out_dim x in_dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
    ridge_lambda: f64,
}

impl LinearPredictor {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, in_dim: usize, ridge_lambda: f64) -> Result<Self> {
        if in_dim == 0 || bias.is_empty() || weight.len() != bias.len() * in_dim {
            return Err(Error::InvalidInput(format!(
                "weight of {} values does not form a {}x{in_dim} matrix",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("predictor has non-finite parameters".into()));
        }
        if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge_lambda {ridge_lambda} must be nonnegative")));
        }
        Ok(Self { weight, bias, in_dim, ridge_lambda })
    }

    /// The predictor that ignores its input and always returns `bias`.
    pub fn constant(in_dim: usize, bias: Vec<f64>) -> Result<Self> {
        Self::new(vec![0.0; bias.len() * in_dim], bias, in_dim, 0.0)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, inputs: &FeatureSequence) -> Result<FeatureSequence> {
        if inputs.dim() != self.in_dim {
            return Err(Error::InvalidInput(format!(
                "predictor expects dimension {}, got {}",
                self.in_dim,
                inputs.dim()
            )));
        }
        let mut data = Vec::with_capacity(inputs.len() * self.out_dim());
        for x in inputs.frames() {
            data.extend(self.apply(x));
        }
        FeatureSequence::new(data, self.out_dim(), inputs.frame_shift_ms(), FeatureKind::Stage)
    }

    /// Minimizes `||targets - (W inputs + b)||^2 + lambda ||W||^2`.
    pub fn fit(inputs: Rows<'_>, targets: Rows<'_>, ridge_lambda: f64) -> Result<Self> {
        Self::fit_weighted(inputs, targets, None, ridge_lambda)
    }

    /// Weighted variant: row `i` contributes `weights[i]` times to the squared error.
    /// A row with integer weight `n` is equivalent to `n` repeated rows.
    pub fn fit_weighted(inputs: Rows<'_>, targets: Rows<'_>, weights: Option<&[f64]>, ridge_lambda: f64) -> Result<Self> {
        if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge_lambda {ridge_lambda} must be nonnegative")));
        }
        let n = inputs.len();
        if n == 0 {
            return Err(Error::InsufficientData("cannot fit a predictor on zero frames".into()));
        }
        if targets.len() != n {
            return Err(Error::InvalidInput(format!("{n} input frames but {} target frames", targets.len())));
        }
        let ones;
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::InvalidInput(format!("{} weights for {n} frames", w.len())));
            }
            Some(w) if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
            }
            Some(w) => w,
            None => {
                ones = vec![1.0; n];
                &ones
            }
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData("all frame weights are zero".into()));
        }
        let (din, dout) = (inputs.dim(), targets.dim());
        let weighted_mean = |rows: Rows<'_>| {
            let mut m = vec![0.0; rows.dim()];
            for (r, w) in rows.iter().zip(weights) {
                for (a, v) in m.iter_mut().zip(r) {
                    *a += w * v;
                }
            }
            m.iter_mut().for_each(|a| *a /= total);
            m
        };
        let x_mean = weighted_mean(inputs);
        let y_mean = weighted_mean(targets);
        let mut xc = DMatrix::<f64>::zeros(n, din);
        let mut yc = DMatrix::<f64>::zeros(n, dout);
        for (i, ((x, y), w)) in inputs.iter().zip(targets.iter()).zip(weights).enumerate() {
            let s = w.sqrt();
            for j in 0..din {
                xc[(i, j)] = s * (x[j] - x_mean[j]);
            }
            for j in 0..dout {
                yc[(i, j)] = s * (y[j] - y_mean[j]);
            }
        }
        let mut gram = xc.tr_mul(&xc);
        for j in 0..din {
            gram[(j, j)] += ridge_lambda;
        }
        let rhs = xc.tr_mul(&yc);
        let solution = match gram.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => gram
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::Numeric(format!("ridge solve failed: {e}")))?,
        };
        let w_t = solution; // din x dout
        let mut weight = vec![0.0; dout * din];
        for o in 0..dout {
            for j in 0..din {
                weight[o * din + j] = w_t[(j, o)];
            }
        }
        let xm = DVector::from_vec(x_mean);
        let bias: Vec<f64> = (0..dout)
            .map(|o| y_mean[o] - (0..din).map(|j| w_t[(j, o)] * xm[j]).sum::<f64>())
            .collect();
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("ridge solution is not finite".into()));
        }
        Self::new(weight, bias, din, ridge_lambda)
    }

    /// Sum over frames of the squared prediction error.
    pub fn residual(&self, inputs: Rows<'_>, targets: Rows<'_>) -> f64 {
        inputs
            .iter()
            .zip(targets.iter())
            .map(|(x, y)| self.apply(x).iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>())
            .sum()
    }
}

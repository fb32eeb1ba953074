//! Central finite differences for gradient verification, plus the model-level
//! check that compares every parameter group's analytic gradient against the
//! oracle.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{self, ModelParams, ModelSpec, Objective};
use crate::rng::RngStream;

/// Central-difference gradient of a scalar function at `theta`.
///
/// Per coordinate j: (loss(theta + eps·e_j) - loss(theta - eps·e_j)) / (2·eps).
/// The loss function must be deterministic; a non-finite evaluation aborts
/// with an oracle error.
pub fn fd_gradient<F>(mut loss_fn: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("fd_gradient: eps = {eps} must be > 0")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = point[j];
        point[j] = orig + eps;
        let plus = loss_fn(&point)?;
        point[j] = orig - eps;
        let minus = loss_fn(&point)?;
        point[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite loss evaluation at coordinate {j} ({plus}, {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Max over coordinates of |analytic - fd| / max(1, |fd|).
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Result of checking one parameter group against the oracle.
#[derive(Clone, Debug)]
pub struct GroupGradCheck {
    pub group: String,
    pub params: usize,
    pub max_rel_err: f64,
}

/// Compare analytic gradients of every parameter group against central finite
/// differences on a random instance (params and batch derived from `seed`).
///
/// Under [`Objective::Joint`] the head groups are measured against the probe
/// objective (the sum of head cross-entropies) since that is what trains
/// them; all other groups are measured against the joint loss itself.
///
/// The instance generator redraws inputs whose ReLU pre-activations sit
/// within 1e-4 of the kink, where central differences are meaningless.
pub fn check_model_gradients(
    spec: &ModelSpec,
    batch: usize,
    seed: u64,
    cosine_scale: Option<f64>,
    objective: Objective,
    eps: f64,
) -> Result<Vec<GroupGradCheck>> {
    spec.validate()?;
    let mut init_rng = RngStream::new(seed, "gradcheck.init");
    let mut params = model::init_params(spec, &mut init_rng)?;

    let mut data_rng = RngStream::new(seed, "gradcheck.data");
    let (x_v, x_a, labels) = loop {
        let (x_v, x_a, labels) = random_instance(spec, batch, &mut data_rng);
        let fo = model::forward(spec, &params, &x_v, &x_a, cosine_scale)?;
        if model::min_abs_relu_preactivation(&fo) > 1e-4 {
            break (x_v, x_a, labels);
        }
    };

    params.zero_grads();
    let fo = model::forward(spec, &params, &x_v, &x_a, cosine_scale)?;
    let terms = model::multi_loss(&fo, &labels, objective)?;
    model::backward(spec, &mut params, &fo, &x_v, &x_a, &terms, objective)?;

    let mut results = Vec::new();
    for gi in 0..params.groups.len() {
        let analytic = params.groups[gi].flatten_grads();
        let theta = params.groups[gi].flatten();
        let is_head = params.groups[gi].name.starts_with("head");
        let reference = params.clone();
        let loss_fn = |flat: &[f64]| -> Result<f64> {
            let mut candidate = reference.clone();
            candidate.groups[gi].unflatten(flat)?;
            let fo = model::forward(spec, &candidate, &x_v, &x_a, cosine_scale)?;
            let terms = model::multi_loss(&fo, &labels, objective)?;
            if is_head && objective == Objective::Joint {
                Ok(terms.ce_uni.iter().sum())
            } else {
                Ok(terms.total)
            }
        };
        let fd = fd_gradient(loss_fn, &theta, eps)?;
        results.push(GroupGradCheck {
            group: params.groups[gi].name.clone(),
            params: theta.len(),
            max_rel_err: max_relative_error(&analytic, &fd),
        });
    }
    Ok(results)
}

fn random_instance(
    spec: &ModelSpec,
    batch: usize,
    rng: &mut RngStream,
) -> (Matrix, Matrix, Vec<usize>) {
    let mut x_v = Matrix::zeros(batch, spec.f_v);
    let mut x_a = Matrix::zeros(batch, spec.f_a);
    for v in x_v.data_mut() {
        *v = rng.normal();
    }
    for v in x_a.data_mut() {
        *v = rng.normal();
    }
    let labels = (0..batch).map(|_| rng.uniform_usize(spec.classes)).collect();
    (x_v, x_a, labels)
}

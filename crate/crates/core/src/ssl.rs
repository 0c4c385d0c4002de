//! Client-side two-view self-supervised model: a small tanh MLP with manual
//! backpropagation, vector-space augmentation, the alignment loss, and the
//! transport-regularized total loss
//!
//! ```text
//!   L = l_a(Z1, Z2) + lambda_u * (l_u(Z1) + l_u(Z2))
//! ```
//!
//! where `l_a` is the mean squared row difference between the two views and
//! `l_u` is the unbalanced-transport divergence to spherical-Gaussian
//! anchors. Gradients flow through the l2 normalization and the MLP by hand;
//! the transport plan is held fixed at its optimum for the backward pass.

use crate::error::{Result, SimError};
use crate::numerics::{self, Mat, RngStream};
use crate::uot::{self, TransportPlan, UotProblem};

/// Encoder shape: input D, hidden h, output d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl EncoderDims {
    pub fn param_len(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }
}

/// Two-layer perceptron D -> h -> d with tanh hidden activation and
/// l2-normalized output rows. Parameters are stored flat in the order
/// `[W1 (h x D), b1 (h), W2 (d x h), b2 (d)]`, all row-major.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub dims: EncoderDims,
    pub params: Vec<f64>,
}

/// Pre-normalization norms below this are replaced by the fixed direction
/// `e1` with zero gradient, avoiding NaN at pathological parameters.
const NORM_FLOOR: f64 = 1e-12;

impl Encoder {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(dims: EncoderDims, rng: &mut RngStream) -> Encoder {
        let mut params = vec![0.0; dims.param_len()];
        let (w1, _, w2, _) = split_offsets(&dims);
        let std1 = (1.0 / dims.input as f64).sqrt();
        for p in params[w1.0..w1.1].iter_mut() {
            *p = std1 * rng.next_gaussian();
        }
        let std2 = (1.0 / dims.hidden as f64).sqrt();
        for p in params[w2.0..w2.1].iter_mut() {
            *p = std2 * rng.next_gaussian();
        }
        Encoder { dims, params }
    }

    pub fn from_params(dims: EncoderDims, params: Vec<f64>) -> Encoder {
        assert_eq!(params.len(), dims.param_len(), "parameter layout mismatch");
        Encoder { dims, params }
    }

    /// Embed a batch; every output row has unit l2 norm.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(x)?.z)
    }

    fn forward_cached(&self, x: &Mat) -> Result<ForwardCache> {
        let dims = &self.dims;
        if x.cols() != dims.input {
            return Err(SimError::dim("encoder input", dims.input, x.cols()));
        }
        let b = x.rows();
        let (w1, b1, w2, b2) = split_offsets(dims);
        let w1 = &self.params[w1.0..w1.1];
        let b1 = &self.params[b1.0..b1.1];
        let w2 = &self.params[w2.0..w2.1];
        let b2 = &self.params[b2.0..b2.1];

        let mut hidden = Mat::zeros(b, dims.hidden);
        for i in 0..b {
            let xi = x.row(i);
            let hi = hidden.row_mut(i);
            for r in 0..dims.hidden {
                let row = &w1[r * dims.input..(r + 1) * dims.input];
                hi[r] = (numerics::dot(row, xi) + b1[r]).tanh();
            }
        }

        let mut z = Mat::zeros(b, dims.output);
        let mut norms = vec![0.0; b];
        let mut pre = vec![0.0; dims.output];
        for i in 0..b {
            let hi = hidden.row(i);
            for (r, p) in pre.iter_mut().enumerate() {
                let row = &w2[r * dims.hidden..(r + 1) * dims.hidden];
                *p = numerics::dot(row, hi) + b2[r];
            }
            let n = numerics::norm(&pre);
            if !n.is_finite() {
                return Err(SimError::NonFinite("encoder pre-normalization"));
            }
            norms[i] = n;
            if n < NORM_FLOOR {
                z.set(i, 0, 1.0);
            } else {
                for (r, p) in pre.iter().enumerate() {
                    z.set(i, r, p / n);
                }
            }
        }
        z.check_finite("encoder output")?;
        Ok(ForwardCache { hidden, z, norms })
    }

    /// Backpropagate `d_loss/d_z` through the normalization and both layers,
    /// accumulating into a flat gradient aligned with the parameter layout.
    fn backward(&self, x: &Mat, cache: &ForwardCache, dz: &Mat, grad: &mut [f64]) {
        let dims = &self.dims;
        let (w1o, b1o, w2o, b2o) = split_offsets(dims);
        let w2 = &self.params[w2o.0..w2o.1];

        for i in 0..x.rows() {
            let n = cache.norms[i];
            if n < NORM_FLOOR {
                continue; // zero-protected row carries no gradient
            }
            let zi = cache.z.row(i);
            let dzi = dz.row(i);
            let proj = numerics::dot(dzi, zi);
            // through z = y / ||y||: dy = (dz - (dz . zhat) zhat) / ||y||
            let dy: Vec<f64> = dzi
                .iter()
                .zip(zi)
                .map(|(dzv, zv)| (dzv - proj * zv) / n)
                .collect();

            let hi = cache.hidden.row(i);
            let mut dh = vec![0.0; dims.hidden];
            for r in 0..dims.output {
                let gw2 = &mut grad[w2o.0 + r * dims.hidden..w2o.0 + (r + 1) * dims.hidden];
                for (c, (g, h)) in gw2.iter_mut().zip(hi).enumerate() {
                    *g += dy[r] * h;
                    dh[c] += dy[r] * w2[r * dims.hidden + c];
                }
                grad[b2o.0 + r] += dy[r];
            }

            let xi = x.row(i);
            for r in 0..dims.hidden {
                let dpre = dh[r] * (1.0 - hi[r] * hi[r]);
                if dpre == 0.0 {
                    continue;
                }
                let gw1 = &mut grad[w1o.0 + r * dims.input..w1o.0 + (r + 1) * dims.input];
                for (g, xv) in gw1.iter_mut().zip(xi) {
                    *g += dpre * xv;
                }
                grad[b1o.0 + r] += dpre;
            }
        }
    }
}

struct ForwardCache {
    hidden: Mat,
    z: Mat,
    norms: Vec<f64>,
}

fn split_offsets(dims: &EncoderDims) -> ((usize, usize), (usize, usize), (usize, usize), (usize, usize)) {
    let w1_len = dims.hidden * dims.input;
    let b1_len = dims.hidden;
    let w2_len = dims.output * dims.hidden;
    let b2_len = dims.output;
    let w1 = (0, w1_len);
    let b1 = (w1.1, w1.1 + b1_len);
    let w2 = (b1.1, b1.1 + w2_len);
    let b2 = (w2.1, w2.1 + b2_len);
    (w1, b1, w2, b2)
}

/// Two augmented views of one source batch.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub x1: Mat,
    pub x2: Mat,
}

/// Additive Gaussian noise followed by independent coordinate masking; the
/// two views use disjoint substreams of `rng`.
pub fn augment(x: &Mat, rng: &RngStream, noise_sigma: f64, mask_prob: f64) -> ViewPair {
    let make = |tag: u64| {
        let mut stream = rng.substream(tag);
        let mut view = x.clone();
        for v in view.data_mut().iter_mut() {
            *v += noise_sigma * stream.next_gaussian();
        }
        if mask_prob > 0.0 {
            for v in view.data_mut().iter_mut() {
                if stream.next_bool(mask_prob) {
                    *v = 0.0;
                }
            }
        }
        view
    };
    ViewPair { x1: make(1), x2: make(2) }
}

/// Mean squared row difference; in `[0, 4]` for unit rows.
pub fn align_loss(z1: &Mat, z2: &Mat) -> Result<f64> {
    if z1.rows() != z2.rows() || z1.cols() != z2.cols() {
        return Err(SimError::dim(
            "align_loss",
            format!("{}x{}", z1.rows(), z1.cols()),
            format!("{}x{}", z2.rows(), z2.cols()),
        ));
    }
    let b = z1.rows().max(1) as f64;
    let mut total = 0.0;
    for i in 0..z1.rows() {
        total += numerics::squared_dist(z1.row(i), z2.row(i));
    }
    Ok(total / b)
}

/// Per-view transport settings for the uniformity term.
#[derive(Debug, Clone, Copy)]
pub struct UotSettings {
    pub tau_a: f64,
    pub tau_b: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for UotSettings {
    fn default() -> Self {
        UotSettings { tau_a: 0.8, tau_b: 0.8, max_iters: 500, tol: 1e-8 }
    }
}

/// Transport problem for one view. Marginal targets are uniform (1/N, 1/M);
/// the penalty coefficients are scaled by the batch sides so the marginal
/// pressure per sample does not vanish as the batch grows — with mass 1/N a
/// plan entry only activates when its cost is below `tau_a a_i + tau_b b_j`,
/// and unscaled coefficients would shut the coupling off entirely for any
/// realistic batch. Substituting pi -> pi/N shows this is the same problem as
/// unit per-sample masses with the nominal coefficients, at 1/N scale.
fn view_problem(z: &Mat, anchors: &Mat, settings: &UotSettings) -> Result<UotProblem> {
    let cost = uot::build_cost(z, anchors)?;
    let n = cost.rows() as f64;
    let m = cost.cols() as f64;
    UotProblem::with_uniform_marginals(cost, settings.tau_a * n, settings.tau_b * m)
}

/// Loss components; `total = align + lambda_u * (uniform1 + uniform2)`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    pub uniform1: f64,
    pub uniform2: f64,
    pub lambda_u: f64,
}

/// Outcome of one two-view loss evaluation: the breakdown, the flat parameter
/// gradient, and the per-view plans (kept for diagnostics and oracles).
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
    pub plan1: Option<TransportPlan>,
    pub plan2: Option<TransportPlan>,
}

/// Forward both views, solve one transport problem per view, and combine the
/// alignment gradient with the fixed-plan transport gradient through the
/// normalization and the MLP. With `lambda_u == 0` the transport solves are
/// skipped entirely.
pub fn total_loss_and_grad(
    enc: &Encoder,
    views: &ViewPair,
    anchors1: &Mat,
    anchors2: &Mat,
    lambda_u: f64,
    settings: &UotSettings,
) -> Result<LossEval> {
    let f1 = enc.forward_cached(&views.x1)?;
    let f2 = enc.forward_cached(&views.x2)?;
    let b = views.x1.rows().max(1) as f64;

    let align = align_loss(&f1.z, &f2.z)?;
    // d l_a / d z1 = (2/B)(z1 - z2); the z2 gradient is its negative
    let mut dz1 = Mat::from_fn(f1.z.rows(), f1.z.cols(), |i, j| {
        2.0 / b * (f1.z.get(i, j) - f2.z.get(i, j))
    });
    let mut dz2 = Mat::from_fn(f2.z.rows(), f2.z.cols(), |i, j| {
        -2.0 / b * (f1.z.get(i, j) - f2.z.get(i, j))
    });

    let uniform = |z: &Mat, anchors: &Mat, dz: &mut Mat| -> Result<(f64, Option<TransportPlan>)> {
        if lambda_u == 0.0 {
            return Ok((0.0, None));
        }
        if anchors.cols() != z.cols() {
            return Err(SimError::dim("anchor dim", z.cols(), anchors.cols()));
        }
        let prob = view_problem(z, anchors, settings)?;
        let plan = uot::solve(&prob, &prob.independent_plan(), settings.max_iters, settings.tol)?;
        let g = uot::grad_wrt_embeddings(z, anchors, &plan)?;
        for (d, gv) in dz.data_mut().iter_mut().zip(g.data()) {
            *d += lambda_u * gv;
        }
        Ok((plan.objective, Some(plan)))
    };

    let (u1, plan1) = uniform(&f1.z, anchors1, &mut dz1)?;
    let (u2, plan2) = uniform(&f2.z, anchors2, &mut dz2)?;

    let mut grad = vec![0.0; enc.dims.param_len()];
    enc.backward(&views.x1, &f1, &dz1, &mut grad);
    enc.backward(&views.x2, &f2, &dz2, &mut grad);

    if !numerics::all_finite(&grad) {
        return Err(SimError::NonFinite("loss gradient"));
    }
    let breakdown = LossBreakdown {
        total: align + lambda_u * (u1 + u2),
        align,
        uniform1: u1,
        uniform2: u2,
        lambda_u,
    };
    Ok(LossEval { breakdown, grad, plan1, plan2 })
}

/// Total objective with the transport plans frozen; the scalar that the
/// analytic gradient differentiates, used by finite-difference checks.
pub fn total_loss_frozen_plans(
    enc: &Encoder,
    views: &ViewPair,
    anchors1: &Mat,
    anchors2: &Mat,
    lambda_u: f64,
    settings: &UotSettings,
    plan1: Option<&TransportPlan>,
    plan2: Option<&TransportPlan>,
) -> Result<f64> {
    let z1 = enc.forward(&views.x1)?;
    let z2 = enc.forward(&views.x2)?;
    let align = align_loss(&z1, &z2)?;
    let mut total = align;
    let mut add_view = |z: &Mat, anchors: &Mat, plan: Option<&TransportPlan>| -> Result<()> {
        if let Some(plan) = plan {
            let prob = view_problem(z, anchors, settings)?;
            total += lambda_u * uot::objective(&prob, &plan.pi)?;
        }
        Ok(())
    };
    add_view(&z1, anchors1, plan1)?;
    add_view(&z2, anchors2, plan2)?;
    Ok(total)
}

/// Clip the gradient to norm at most `clip`, then take one descent step.
pub fn sgd_step(enc: &Encoder, grad: &[f64], lr: f64, clip: f64) -> Result<Encoder> {
    assert!(lr >= 0.0 && clip > 0.0);
    if grad.len() != enc.params.len() {
        return Err(SimError::dim("sgd gradient", enc.params.len(), grad.len()));
    }
    if !numerics::all_finite(grad) {
        return Err(SimError::NonFinite("sgd gradient"));
    }
    let gnorm = numerics::norm(grad);
    let scale = if gnorm > clip { clip / gnorm } else { 1.0 };
    let mut params = enc.params.clone();
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * scale * g;
    }
    if !numerics::all_finite(&params) {
        return Err(SimError::NonFinite("sgd parameters"));
    }
    Ok(Encoder { dims: enc.dims, params })
}

//! The reconstruction cost: data fidelity, the generator Jacobian penalty and
//! a temporal smoothness penalty on the latent sequence.
//!
//! For a minibatch `B` of the `N` frames,
//!
//! ```text
//! C = (N/|B|) sum_{i in B} ||A_i G(z_i) - b_i||^2
//!   + lambda1 * (N/|B|) sum_{i in B} ||J_G(z_i)||_F^2
//!   + lambda2 * sum_{i=1}^{N-1} ||z_{i+1} - z_i||^2
//! ```
//!
//! The `N/|B|` factor makes the minibatch terms unbiased estimates of their
//! full-sequence sums, so the same lambdas apply at any batch size. With all
//! frames selected the data term is exactly the summed fidelity. Fidelity is
//! not normalized by sample count; the lambda defaults assume the unitary DFT.

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::forward_model::{EncodingOperator, MeasurementFrame, MeasurementSet};
use crate::generator::GeneratorState;

/// Per-frame latent vectors `z` (`N x d`) with their time stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub z: Array2<f64>,
    pub frame_times: Vec<f64>,
}

impl LatentSequence {
    /// Uniform unit-spaced time stamps.
    pub fn new(z: Array2<f64>) -> Result<Self> {
        let frame_times = (0..z.nrows()).map(|i| i as f64).collect();
        let seq = Self { z, frame_times };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z.nrows() == 0 || self.z.ncols() == 0 {
            return Err(ReconError::Empty("latent sequence".into()));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(ReconError::NonFinite("latent sequence".into()));
        }
        if self.frame_times.len() != self.z.nrows() {
            return Err(ReconError::ShapeMismatch("frame_times length".into()));
        }
        if self.frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ReconError::InvalidConfig(
                "frame_times must increase".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegWeights {
    /// Weight of the generator Jacobian penalty.
    pub lambda1: f64,
    /// Weight of the temporal latent penalty.
    pub lambda2: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.001,
            lambda2: 2.0,
        }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0)
            || !self.lambda1.is_finite()
            || !self.lambda2.is_finite()
        {
            return Err(ReconError::InvalidConfig(
                "regularization weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted contributions of each term; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostTerms {
    pub data: f64,
    pub network: f64,
    pub temporal: f64,
    pub total: f64,
}

impl CostTerms {
    fn assemble(data: f64, network: f64, temporal: f64) -> Self {
        Self {
            data,
            network,
            temporal,
            total: data + network + temporal,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.is_finite()
            && self.network.is_finite()
            && self.temporal.is_finite()
            && self.total.is_finite()
    }
}

/// Gradient of the cost with respect to the generator parameters and latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub theta: Vec<f64>,
    pub z: Array2<f64>,
}

fn check_inputs(
    state: &GeneratorState,
    z: &ArrayView2<f64>,
    mset: &MeasurementSet,
    frame_indices: &[usize],
) -> Result<()> {
    if z.nrows() != mset.num_frames() {
        return Err(ReconError::ShapeMismatch(format!(
            "{} latents for {} measurement frames",
            z.nrows(),
            mset.num_frames()
        )));
    }
    if z.ncols() != state.latent_dim() {
        return Err(ReconError::ShapeMismatch("latent dimension".into()));
    }
    if state.output_shape() != mset.grid_shape {
        return Err(ReconError::ShapeMismatch(format!(
            "generator output {:?} vs measurement grid {:?}",
            state.output_shape(),
            mset.grid_shape
        )));
    }
    if frame_indices.is_empty() {
        return Err(ReconError::Empty("no frames selected".into()));
    }
    if let Some(&i) = frame_indices.iter().find(|&&i| i >= mset.num_frames()) {
        return Err(ReconError::IndexOutOfRange(format!(
            "frame {i} of {}",
            mset.num_frames()
        )));
    }
    Ok(())
}

/// `||A x - b||^2` summed over coils, and its gradient `2 A^H (A x - b)`.
pub fn frame_loss(
    op: &EncodingOperator,
    image: ArrayView2<Complex64>,
    frame: &MeasurementFrame,
    mset: &MeasurementSet,
) -> Result<(f64, Array2<Complex64>)> {
    let mut residual = op.forward(image, &frame.positions, &mset.coils)?;
    residual -= &frame.samples;
    let loss = residual.iter().map(|r| r.norm_sqr()).sum();
    let mut grad = op.adjoint(residual.view(), &frame.positions, &mset.coils)?;
    grad.mapv_inplace(|g| g * 2.0);
    Ok((loss, grad))
}

/// Unscaled sum over the selected frames of `||A_i G(z_i) - b_i||^2`.
pub fn data_fidelity(
    state: &GeneratorState,
    latents: &LatentSequence,
    mset: &MeasurementSet,
    frame_indices: &[usize],
) -> Result<f64> {
    check_inputs(state, &latents.z.view(), mset, frame_indices)?;
    let op = mset.operator();
    let mut total = 0.0;
    for &i in frame_indices {
        let z = latents.z.row(i).to_vec();
        let img = state.generate_one(&z)?;
        let y = op.forward(img.view(), &mset.frames[i].positions, &mset.coils)?;
        total += y
            .iter()
            .zip(mset.frames[i].samples.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>();
    }
    Ok(total)
}

/// `sum_i ||z_{i+1} - z_i||^2` over the whole sequence.
pub fn temporal_penalty(z: ArrayView2<f64>) -> f64 {
    z.axis_windows(Axis(0), 2)
        .into_iter()
        .map(|w| {
            w.row(1)
                .iter()
                .zip(w.row(0).iter())
                .map(|(b, a)| (b - a).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of [`temporal_penalty`].
pub fn temporal_penalty_grad(z: ArrayView2<f64>) -> Array2<f64> {
    let mut g = Array2::zeros(z.dim());
    for i in 0..z.nrows().saturating_sub(1) {
        for k in 0..z.ncols() {
            let diff = 2.0 * (z[[i + 1, k]] - z[[i, k]]);
            g[[i + 1, k]] += diff;
            g[[i, k]] -= diff;
        }
    }
    g
}

fn batch_scale(mset: &MeasurementSet, frame_indices: &[usize]) -> f64 {
    mset.num_frames() as f64 / frame_indices.len() as f64
}

/// The full cost on a minibatch, evaluated without gradients.
pub fn total_cost(
    state: &GeneratorState,
    latents: &LatentSequence,
    mset: &MeasurementSet,
    weights: &RegWeights,
    frame_indices: &[usize],
) -> Result<CostTerms> {
    weights.validate()?;
    let scale = batch_scale(mset, frame_indices);
    let data = scale * data_fidelity(state, latents, mset, frame_indices)?;
    let network = if weights.lambda1 != 0.0 {
        let selected = latents.z.select(Axis(0), frame_indices);
        weights.lambda1 * mset.num_frames() as f64 * state.network_penalty(selected.view())?
    } else {
        0.0
    };
    let temporal = weights.lambda2 * temporal_penalty(latents.z.view());
    Ok(CostTerms::assemble(data, network, temporal))
}

/// The minibatch cost and its exact gradient. The temporal term and its
/// gradient always cover the whole latent sequence.
pub fn cost_and_gradient(
    state: &GeneratorState,
    z: ArrayView2<f64>,
    mset: &MeasurementSet,
    weights: &RegWeights,
    frame_indices: &[usize],
    op: &EncodingOperator,
) -> Result<(CostTerms, Gradient)> {
    weights.validate()?;
    check_inputs(state, &z, mset, frame_indices)?;
    let scale = batch_scale(mset, frame_indices);
    let mut grad_theta = vec![0.0; state.num_parameters()];
    let mut grad_z = Array2::zeros(z.dim());
    let mut data = 0.0;
    let mut penalty = 0.0;
    for &i in frame_indices {
        let zi = z.row(i).to_vec();
        let mut gz = vec![0.0; zi.len()];
        let frame = &mset.frames[i];
        let terms = state.frame_gradient(
            &zi,
            weights.lambda1,
            |img| frame_loss(op, img, frame, mset),
            &mut grad_theta,
            &mut gz,
        )?;
        data += terms.data;
        penalty += terms.penalty;
        for (g, v) in grad_z.row_mut(i).iter_mut().zip(gz) {
            *g += v;
        }
    }
    grad_theta.iter_mut().for_each(|g| *g *= scale);
    grad_z.mapv_inplace(|g| g * scale);
    if weights.lambda2 != 0.0 {
        grad_z.scaled_add(weights.lambda2, &temporal_penalty_grad(z));
    }
    let terms = CostTerms::assemble(
        scale * data,
        weights.lambda1 * scale * penalty,
        weights.lambda2 * temporal_penalty(z),
    );
    Ok((
        terms,
        Gradient {
            theta: grad_theta,
            z: grad_z,
        },
    ))
}

//! Convolutional generator mapping a latent vector to a complex image frame.
//!
//! Architecture: a dense layer lifts the `d`-dimensional latent to a 4x4 grid
//! of `base_channels` channels; each of `upsample_stages` stages applies
//! nearest-neighbour 2x upsampling, a 3x3 convolution and the activation, with
//! the channel count halving per stage (floored at [`MIN_CHANNELS`]). A final
//! linear 3x3 convolution produces two channels read as (real, imag).
//!
//! Besides plain evaluation the generator propagates tangents (Jacobian-vector
//! products) alongside the primal pass, and differentiates through both. That
//! gives exact first derivatives of the Jacobian penalty
//! `sum_k ||J(z) e_k||^2`, which itself is a first derivative of the network,
//! so the gradient of the penalty is a second-order quantity.
//!
//! Activations:
//! - `Tanh` (default, smooth-saturating): `s(v) = tanh v`, `s' = 1 - s^2`,
//!   `s'' = -2 s (1 - s^2)`. The penalty gradient is continuous.
//! - `LeakyRelu` (piecewise-linear): slope 1 for `v > 0`, 0.2 otherwise. Cheaper,
//!   but `s''` is zero almost everywhere, so the penalty gradient ignores how
//!   kink locations move with `z`.
//! - `Linear`: identity, used to check the penalty against an explicit matrix.

mod layers;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{ReconError, Result};
use layers::{conv3x3, conv3x3_backward, upsample2, upsample2_adjoint, Dims, Workspace};

/// Lower bound on hidden channel counts as they halve per stage.
pub const MIN_CHANNELS: usize = 8;
const SEED_GRID: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    LeakyRelu,
    Linear,
}

impl Activation {
    #[inline]
    fn value(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
            Activation::Linear => v,
        }
    }

    /// First and second derivative given the pre-activation `v` and output `a`.
    #[inline]
    fn derivs(self, v: f64, a: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let d1 = 1.0 - a * a;
                (d1, -2.0 * a * d1)
            }
            Activation::LeakyRelu => (if v > 0.0 { 1.0 } else { LEAKY_SLOPE }, 0.0),
            Activation::Linear => (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub output_shape: (usize, usize),
    pub base_channels: usize,
    pub upsample_stages: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Square output of side `size`; the stage count is derived from it.
    pub fn new(latent_dim: usize, size: usize, base_channels: usize, seed: u64) -> Self {
        let stages = if size >= SEED_GRID {
            (size / SEED_GRID).max(1).ilog2() as usize
        } else {
            0
        };
        Self {
            latent_dim,
            output_shape: (size, size),
            base_channels,
            upsample_stages: stages,
            activation: Activation::Tanh,
            seed,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.output_shape;
        let bad = |m: String| Err(ReconError::InvalidConfig(m));
        if h != w {
            return bad(format!("generator output must be square, got {h}x{w}"));
        }
        if h < 16 || !h.is_power_of_two() {
            return bad(format!(
                "generator output side {h} must be a power of two >= 16"
            ));
        }
        if SEED_GRID << self.upsample_stages != h {
            return bad(format!(
                "upsample_stages {} inconsistent with output side {h}",
                self.upsample_stages
            ));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.base_channels < MIN_CHANNELS {
            return bad(format!("base_channels must be at least {MIN_CHANNELS}"));
        }
        Ok(())
    }

    /// Channel counts `[c0, c1, .., cS]` of the seed grid and each stage.
    pub fn channels(&self) -> Vec<usize> {
        (0..=self.upsample_stages)
            .map(|s| (self.base_channels >> s).max(MIN_CHANNELS.min(self.base_channels)))
            .collect()
    }

    /// Closed-form parameter count.
    pub fn num_parameters(&self) -> usize {
        let ch = self.channels();
        let grid = SEED_GRID * SEED_GRID;
        let dense = grid * ch[0] * (self.latent_dim + 1);
        let convs: usize = ch.windows(2).map(|p| 9 * p[0] * p[1] + p[1]).sum();
        let head = 9 * ch[self.upsample_stages] * 2 + 2;
        dense + convs + head
    }
}

/// A named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Weights are initialized randomly, biases start at zero.
    fn fan_in(&self) -> Option<usize> {
        if self.name.ends_with(".bias") {
            None
        } else {
            Some(self.shape[1..].iter().product())
        }
    }
}

fn build_layout(config: &GeneratorConfig) -> Vec<ParamSegment> {
    let ch = config.channels();
    let grid = SEED_GRID * SEED_GRID;
    let mut segs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        segs.push(ParamSegment {
            name,
            offset,
            shape,
        });
        offset += len;
    };
    push("dense.weight".into(), vec![grid * ch[0], config.latent_dim]);
    push("dense.bias".into(), vec![grid * ch[0]]);
    for s in 1..=config.upsample_stages {
        push(format!("stage{s}.weight"), vec![ch[s], ch[s - 1], 3, 3]);
        push(format!("stage{s}.bias"), vec![ch[s]]);
    }
    push(
        "head.weight".into(),
        vec![2, ch[config.upsample_stages], 3, 3],
    );
    push("head.bias".into(), vec![2]);
    segs
}

/// Generator architecture plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    config: GeneratorConfig,
    layout: Vec<ParamSegment>,
    params: Vec<f64>,
}

struct StageTape {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Tape {
    stages: Vec<StageTape>,
    output: Vec<f64>,
}

/// Per-frame values returned by [`GeneratorState::frame_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTerms {
    /// Value of the data loss supplied by the caller.
    pub data: f64,
    /// `sum_k ||J e_k||^2` at this latent; zero when the penalty weight is zero.
    pub penalty: f64,
}

impl GeneratorState {
    /// Random initialization: weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for seg in &layout {
            if let Some(fan_in) = seg.fan_in() {
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                for p in &mut params[seg.range()] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Builds a state from explicit parameters (length must match the config).
    pub fn from_parameters(config: GeneratorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_parameters() {
            return Err(ReconError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                config.num_parameters(),
                params.len()
            )));
        }
        let layout = build_layout(&config);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSegment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&ParamSegment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.config.output_shape
    }

    fn seg(&self, idx: usize) -> &[f64] {
        &self.params[self.layout[idx].range()]
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(ReconError::ShapeMismatch(format!(
                "latent has {} entries, generator expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ReconError::NonFinite("latent vector".into()));
        }
        Ok(())
    }

    /// Forward pass carrying one tangent block per entry of `dirs`.
    fn forward(&self, z: &[f64], dirs: &[&[f64]], ws: &mut Workspace) -> Tape {
        let ch = self.config.channels();
        let d = self.config.latent_dim;
        let blocks = 1 + dirs.len();
        let grid = SEED_GRID * SEED_GRID;

        let w = self.seg(0);
        let b = self.seg(1);
        let mut cur = vec![0.0; ch[0] * blocks * grid];
        for c in 0..ch[0] {
            for p in 0..grid {
                let row = &w[(c * grid + p) * d..][..d];
                cur[(c * blocks) * grid + p] =
                    b[c * grid + p] + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                for (k, dir) in dirs.iter().enumerate() {
                    cur[(c * blocks + k + 1) * grid + p] =
                        row.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }

        let act = self.config.activation;
        let mut side = SEED_GRID;
        let mut stages = Vec::with_capacity(self.config.upsample_stages);
        for s in 1..=self.config.upsample_stages {
            let coarse = Dims {
                channels: ch[s - 1],
                blocks,
                height: side,
                width: side,
            };
            let input = upsample2(&cur, coarse);
            side *= 2;
            let fine = Dims {
                channels: ch[s - 1],
                blocks,
                height: side,
                width: side,
            };
            let pre = conv3x3(
                &input,
                fine,
                self.seg(2 * s),
                self.seg(2 * s + 1),
                ch[s],
                ws,
            );
            let plane = side * side;
            let mut a = vec![0.0; pre.len()];
            for c in 0..ch[s] {
                let base = c * blocks * plane;
                for p in 0..plane {
                    let v = pre[base + p];
                    let y = act.value(v);
                    a[base + p] = y;
                    if blocks > 1 {
                        let (d1, _) = act.derivs(v, y);
                        for k in 1..blocks {
                            a[base + k * plane + p] = d1 * pre[base + k * plane + p];
                        }
                    }
                }
            }
            cur = a.clone();
            stages.push(StageTape { input, pre, act: a });
        }

        let last = self.config.upsample_stages;
        let dims = Dims {
            channels: ch[last],
            blocks,
            height: side,
            width: side,
        };
        let head = 2 * last + 2;
        let output = conv3x3(&cur, dims, self.seg(head), self.seg(head + 1), 2, ws);
        Tape { stages, output }
    }

    /// Reverse pass through a tape. Accumulates into `grad_theta` and `grad_z`.
    fn backward(
        &self,
        tape: &Tape,
        z: &[f64],
        dirs: &[&[f64]],
        grad_out: &[f64],
        grad_theta: &mut [f64],
        grad_z: &mut [f64],
        ws: &mut Workspace,
    ) {
        let ch = self.config.channels();
        let d = self.config.latent_dim;
        let blocks = 1 + dirs.len();
        let grid = SEED_GRID * SEED_GRID;
        let last = self.config.upsample_stages;
        let (h, _) = self.config.output_shape;

        let head = 2 * last + 2;
        let mut g = {
            let dims = Dims {
                channels: ch[last],
                blocks,
                height: h,
                width: h,
            };
            let kseg = &self.layout[head];
            let (gk, gb) =
                grad_theta[kseg.offset..kseg.offset + kseg.len() + 2].split_at_mut(kseg.len());
            let input = &tape.stages[last - 1].act;
            conv3x3_backward(input, dims, self.seg(head), grad_out, 2, gk, gb, true, ws)
        };

        let act = self.config.activation;
        let mut side = h;
        for s in (1..=last).rev() {
            let st = &tape.stages[s - 1];
            let plane = side * side;
            let mut g_pre = vec![0.0; st.pre.len()];
            for c in 0..ch[s] {
                let base = c * blocks * plane;
                for p in 0..plane {
                    let v = st.pre[base + p];
                    let (d1, d2) = act.derivs(v, st.act[base + p]);
                    let mut g0 = g[base + p] * d1;
                    for k in 1..blocks {
                        let gk = g[base + k * plane + p];
                        g0 += gk * d2 * st.pre[base + k * plane + p];
                        g_pre[base + k * plane + p] = gk * d1;
                    }
                    g_pre[base + p] = g0;
                }
            }
            let fine = Dims {
                channels: ch[s - 1],
                blocks,
                height: side,
                width: side,
            };
            let kseg = &self.layout[2 * s];
            let blen = self.layout[2 * s + 1].len();
            let (gk, gb) =
                grad_theta[kseg.offset..kseg.offset + kseg.len() + blen].split_at_mut(kseg.len());
            let g_in = conv3x3_backward(
                &st.input,
                fine,
                self.seg(2 * s),
                &g_pre,
                ch[s],
                gk,
                gb,
                true,
                ws,
            );
            side /= 2;
            let coarse = Dims {
                channels: ch[s - 1],
                blocks,
                height: side,
                width: side,
            };
            g = upsample2_adjoint(&g_in, coarse);
        }

        let w = self.seg(0);
        let (wseg, bseg) = (&self.layout[0], &self.layout[1]);
        for c in 0..ch[0] {
            for p in 0..grid {
                let r = c * grid + p;
                let g0 = g[(c * blocks) * grid + p];
                grad_theta[bseg.offset + r] += g0;
                let gw = &mut grad_theta[wseg.offset + r * d..][..d];
                for i in 0..d {
                    let mut acc = g0 * z[i];
                    for (k, dir) in dirs.iter().enumerate() {
                        acc += g[(c * blocks + k + 1) * grid + p] * dir[i];
                    }
                    gw[i] += acc;
                }
                for i in 0..d {
                    grad_z[i] += w[r * d + i] * g0;
                }
            }
        }
    }

    fn block_to_image(&self, out: &[f64], blocks: usize, k: usize) -> Array2<Complex64> {
        let (h, w) = self.config.output_shape;
        let plane = h * w;
        let re = &out[k * plane..][..plane];
        let im = &out[(blocks + k) * plane..][..plane];
        Array2::from_shape_fn((h, w), |(y, x)| {
            Complex64::new(re[y * w + x], im[y * w + x])
        })
    }

    /// `G(z)` for one latent.
    pub fn generate_one(&self, z: &[f64]) -> Result<Array2<Complex64>> {
        self.check_latent(z)?;
        let tape = self.forward(z, &[], &mut Workspace::default());
        Ok(self.block_to_image(&tape.output, 1, 0))
    }

    /// `G(z_i)` for every row of `z_batch` (shape `B x d`).
    pub fn generate(&self, z_batch: ArrayView2<f64>) -> Result<Array3<Complex64>> {
        let (h, w) = self.config.output_shape;
        let mut out = Array3::from_elem((z_batch.nrows(), h, w), Complex64::new(0.0, 0.0));
        let mut ws = Workspace::default();
        for (i, z) in z_batch.axis_iter(Axis(0)).enumerate() {
            let z = z.to_vec();
            self.check_latent(&z)?;
            let tape = self.forward(&z, &[], &mut ws);
            out.index_axis_mut(Axis(0), i)
                .assign(&self.block_to_image(&tape.output, 1, 0));
        }
        Ok(out)
    }

    /// Directional derivative `J(z) v`.
    pub fn jvp(&self, z: &[f64], v: &[f64]) -> Result<Array2<Complex64>> {
        self.check_latent(z)?;
        if v.len() != z.len() {
            return Err(ReconError::ShapeMismatch("direction length".into()));
        }
        let tape = self.forward(z, &[v], &mut Workspace::default());
        Ok(self.block_to_image(&tape.output, 2, 1))
    }

    /// Columns `J(z) e_k` of the latent-to-image Jacobian.
    pub fn jacobian(&self, z: &[f64]) -> Result<Vec<Array2<Complex64>>> {
        self.check_latent(z)?;
        let basis = unit_basis(self.config.latent_dim);
        let dirs: Vec<&[f64]> = basis.iter().map(|v| v.as_slice()).collect();
        let tape = self.forward(z, &dirs, &mut Workspace::default());
        Ok((1..=dirs.len())
            .map(|k| self.block_to_image(&tape.output, dirs.len() + 1, k))
            .collect())
    }

    /// Mean over the batch of the squared Frobenius norm of the Jacobian,
    /// computed exactly from `d` Jacobian-vector products per latent.
    pub fn network_penalty(&self, z_batch: ArrayView2<f64>) -> Result<f64> {
        if z_batch.nrows() == 0 {
            return Err(ReconError::Empty(
                "network_penalty needs at least one latent".into(),
            ));
        }
        let basis = unit_basis(self.config.latent_dim);
        let dirs: Vec<&[f64]> = basis.iter().map(|v| v.as_slice()).collect();
        let mut ws = Workspace::default();
        let plane = 2 * self.config.output_shape.0 * self.config.output_shape.1;
        let mut total = 0.0;
        for z in z_batch.axis_iter(Axis(0)) {
            let z = z.to_vec();
            self.check_latent(&z)?;
            let tape = self.forward(&z, &dirs, &mut ws);
            total += tangent_energy(&tape.output, dirs.len() + 1, plane / 2);
        }
        let value = total / z_batch.nrows() as f64;
        if !value.is_finite() {
            return Err(ReconError::NonFinite("network penalty".into()));
        }
        Ok(value)
    }

    /// Gradient of `data_loss(G(z)) + penalty_weight * sum_k ||J(z) e_k||^2`
    /// with respect to the parameters and `z`, accumulated into the buffers.
    ///
    /// `data_loss` receives the generated image and returns its loss and the
    /// gradient as a complex image `dL/dRe + i dL/dIm`.
    pub fn frame_gradient<F>(
        &self,
        z: &[f64],
        penalty_weight: f64,
        data_loss: F,
        grad_theta: &mut [f64],
        grad_z: &mut [f64],
    ) -> Result<FrameTerms>
    where
        F: FnOnce(ArrayView2<Complex64>) -> Result<(f64, Array2<Complex64>)>,
    {
        self.check_latent(z)?;
        if grad_theta.len() != self.params.len() || grad_z.len() != z.len() {
            return Err(ReconError::ShapeMismatch("gradient buffer sizes".into()));
        }
        let basis = if penalty_weight != 0.0 {
            unit_basis(self.config.latent_dim)
        } else {
            Vec::new()
        };
        let dirs: Vec<&[f64]> = basis.iter().map(|v| v.as_slice()).collect();
        let blocks = dirs.len() + 1;
        let mut ws = Workspace::default();
        let tape = self.forward(z, &dirs, &mut ws);

        let (h, w) = self.config.output_shape;
        let plane = h * w;
        let image = self.block_to_image(&tape.output, blocks, 0);
        let (data, gimg) = data_loss(image.view())?;
        if gimg.dim() != (h, w) {
            return Err(ReconError::ShapeMismatch("data-loss gradient shape".into()));
        }

        let mut grad_out = vec![0.0; tape.output.len()];
        for (p, g) in gimg.iter().enumerate() {
            grad_out[p] = g.re;
            grad_out[blocks * plane + p] = g.im;
        }
        let penalty = tangent_energy(&tape.output, blocks, plane);
        for k in 1..blocks {
            for c in 0..2 {
                let off = (c * blocks + k) * plane;
                for p in off..off + plane {
                    grad_out[p] = 2.0 * penalty_weight * tape.output[p];
                }
            }
        }
        self.backward(&tape, z, &dirs, &grad_out, grad_theta, grad_z, &mut ws);
        Ok(FrameTerms { data, penalty })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new("generator_checkpoint");
        a.set_meta(serde_json::to_value(&self.config)?);
        for seg in &self.layout {
            a.push_f64(&seg.name, &seg.shape, self.params[seg.range()].to_vec())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("generator_checkpoint")?;
        let config: GeneratorConfig = serde_json::from_value(a.meta().clone())?;
        config.validate()?;
        let layout = build_layout(&config);
        let mut params = vec![0.0; config.num_parameters()];
        for seg in &layout {
            if a.shape(&seg.name)? != seg.shape.as_slice() {
                return Err(ReconError::Format(format!(
                    "segment {} has wrong shape",
                    seg.name
                )));
            }
            params[seg.range()].copy_from_slice(a.f64(&seg.name)?);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }
}

fn unit_basis(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        })
        .collect()
}

/// Sum of squares of all tangent blocks of a 2-channel output bundle.
fn tangent_energy(output: &[f64], blocks: usize, plane: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..2 {
        for k in 1..blocks {
            total += output[(c * blocks + k) * plane..][..plane]
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
        }
    }
    total
}

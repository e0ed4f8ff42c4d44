//! Joint ADAM optimization of generator weights and latents, with
//! minibatching, the progressive-in-time schedule, a fixed-latent baseline
//! mode, checkpoints and history logging.
//!
//! A progressive run solves a sequence of problems on an increasing number of
//! frames. Stage `m` bins the measurements into `stage_frame_counts[m]`
//! groups of consecutive frames, initializes its latents by linear
//! interpolation of the previous stage's latents, warm-starts the generator
//! from the previous stage and trains. The last stage works on all frames.
//!
//! Every random choice comes from ChaCha8 streams derived from
//! `TrainConfig::seed` and the stage index, so a run is a pure function of
//! (seed, config, data), and resuming from a stage checkpoint reproduces the
//! uninterrupted run exactly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{ReconError, Result};
use crate::evaluation::{magnitude_ser, ser};
use crate::forward_model::{bin_measurements, MeasurementSet};
use crate::generator::{GeneratorConfig, GeneratorState};
use crate::objective::{
    cost_and_gradient, data_fidelity, temporal_penalty, total_cost, CostTerms, LatentSequence,
    RegWeights,
};
use crate::optim::Adam;

/// Scale of the uniform jitter added when a single latent is broadcast.
pub const BROADCAST_JITTER: f64 = 1e-2;

/// Standard deviation of the stage-0 latent initialization.
pub const INIT_LATENT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Generator weights and latents are both optimized.
    #[default]
    Joint,
    /// Latents stay at their random initialization; only the generator is
    /// optimized (the Time-DIP baseline).
    FixedLatent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: RegWeights,
    pub epochs_per_stage: Vec<usize>,
    /// Strictly ascending; the last entry equals the number of frames.
    pub stage_frame_counts: Vec<usize>,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_z: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    /// Log a history record every this many epochs (and at each stage end).
    pub eval_every: usize,
    /// Attach a latent snapshot to every this-many-th record; 0 disables.
    #[serde(default)]
    pub latent_snapshot_every: usize,
}

/// The default progressive schedule `[1, ceil(N/5), N]`, deduplicated.
pub fn default_schedule(num_frames: usize) -> Vec<usize> {
    let mut s = vec![1, num_frames.div_ceil(5), num_frames];
    s.dedup();
    s
}

impl TrainConfig {
    /// Progressive defaults with `epochs` per stage.
    pub fn progressive(num_frames: usize, epochs: usize) -> Self {
        let stages = default_schedule(num_frames);
        Self {
            weights: RegWeights::default(),
            epochs_per_stage: vec![epochs; stages.len()],
            stage_frame_counts: stages,
            batch_size: 10,
            lr_theta: 1e-4,
            lr_z: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 0,
            mode: TrainMode::Joint,
            eval_every: 1,
            latent_snapshot_every: 0,
        }
    }

    /// One stage over all frames.
    pub fn single_stage(num_frames: usize, epochs: usize) -> Self {
        Self {
            epochs_per_stage: vec![epochs],
            stage_frame_counts: vec![num_frames],
            ..Self::progressive(num_frames, epochs)
        }
    }

    /// Collapses the schedule to its final stage, keeping that stage's epochs.
    pub fn without_progression(mut self) -> Self {
        if let (Some(&n), Some(&e)) = (self.stage_frame_counts.last(), self.epochs_per_stage.last())
        {
            self.stage_frame_counts = vec![n];
            self.epochs_per_stage = vec![e];
        }
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stage_frame_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReconError::InvalidConfig(m.into()));
        self.weights.validate()?;
        if self.stage_frame_counts.is_empty() {
            return bad("stage_frame_counts must not be empty");
        }
        if self.stage_frame_counts[0] < 1 {
            return bad("stage_frame_counts must start at 1 or more");
        }
        if self.stage_frame_counts.windows(2).any(|w| w[0] >= w[1]) {
            return bad("stage_frame_counts must be strictly ascending");
        }
        if self.epochs_per_stage.len() != self.stage_frame_counts.len() {
            return bad("epochs_per_stage and stage_frame_counts differ in length");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_theta > 0.0 && self.lr_z > 0.0) {
            return bad("learning rates must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }

    fn validate_for(&self, num_frames: usize) -> Result<()> {
        self.validate()?;
        if *self.stage_frame_counts.last().unwrap() != num_frames {
            return Err(ReconError::InvalidConfig(format!(
                "last stage has {} frames but the data has {num_frames}",
                self.stage_frame_counts.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// Group size used to bin `num_frames` down to roughly `target` frames.
/// The stage then works on `ceil(num_frames / group)` frames.
pub fn stage_group_size(num_frames: usize, target: usize) -> usize {
    num_frames.div_ceil(target.max(1))
}

/// One logged point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: usize,
    /// Epoch within the stage; 0 marks the stage's starting point.
    pub epoch: usize,
    /// Epochs completed across all stages so far.
    pub global_epoch: usize,
    /// Optimizer steps completed across all stages so far.
    pub steps: usize,
    /// Training time so far, excluding evaluation and logging.
    pub wall_seconds: f64,
    /// Full-data cost when `full_data` is set, otherwise the mean minibatch
    /// cost over the epoch.
    pub cost: CostTerms,
    pub full_data: bool,
    pub ser_db: Option<f64>,
    pub ser_mag_db: Option<f64>,
    pub latents: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost.total).collect()
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let mut records = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

/// Piecewise-linear resampling of each latent coordinate from `M` rows onto
/// `K` rows, mapping source index range `[0, M-1]` onto `[0, K-1]`.
/// A single source row is broadcast.
pub fn resample_latents(z: ArrayView2<f64>, target_len: usize) -> Result<Array2<f64>> {
    let (m, d) = z.dim();
    if m == 0 {
        return Err(ReconError::Empty("no latents to resample".into()));
    }
    if target_len == 0 {
        return Err(ReconError::InvalidConfig(
            "target length must be at least 1".into(),
        ));
    }
    if m == target_len {
        return Ok(z.to_owned());
    }
    let mut out = Array2::zeros((target_len, d));
    for k in 0..target_len {
        let t = if target_len == 1 || m == 1 {
            0.0
        } else {
            k as f64 * (m - 1) as f64 / (target_len - 1) as f64
        };
        let i = (t.floor() as usize).min(m - 1);
        let frac = t - i as f64;
        for c in 0..d {
            let a = z[[i, c]];
            out[[k, c]] = if frac > 0.0 {
                a + frac * (z[[i + 1, c]] - a)
            } else {
                a
            };
        }
    }
    Ok(out)
}

/// Warm-start latents for the next stage: [`resample_latents`] onto `K >= M`
/// rows. When `M = 1` every row is a copy of the single latent plus
/// independent uniform jitter in `[-BROADCAST_JITTER, BROADCAST_JITTER]`
/// so that the frames can separate.
pub fn interpolate_latents(
    z: ArrayView2<f64>,
    target_len: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if target_len < z.nrows() {
        return Err(ReconError::InvalidConfig(format!(
            "cannot interpolate {} latents down to {target_len}",
            z.nrows()
        )));
    }
    let mut out = resample_latents(z, target_len)?;
    if z.nrows() == 1 && target_len > 1 {
        out.mapv_inplace(|v| v + rng.random_range(-BROADCAST_JITTER..=BROADCAST_JITTER));
    }
    Ok(out)
}

fn stage_rng(seed: u64, stage: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 8) | purpose);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Stage-0 latents: iid `N(0, INIT_LATENT_STD^2)`.
pub fn initial_latents(num_frames: usize, latent_dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = stage_rng(seed, 0, STREAM_INIT);
    Array2::from_shape_simple_fn((num_frames, latent_dim), || {
        INIT_LATENT_STD * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    })
}

/// Running clock that can be paused while evaluating.
struct Clock {
    offset: f64,
    started: Instant,
}

impl Clock {
    fn new(offset: f64) -> Self {
        Self {
            offset,
            started: Instant::now(),
        }
    }

    fn pause(&mut self) -> f64 {
        self.offset += self.started.elapsed().as_secs_f64();
        self.offset
    }

    fn resume(&mut self) {
        self.started = Instant::now();
    }
}

/// Counters carried across stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub global_epoch: usize,
    pub steps: usize,
    pub wall_seconds: f64,
}

fn evaluate_ser(
    state: &GeneratorState,
    z: ArrayView2<f64>,
    reference: Option<ArrayView3<Complex64>>,
) -> Result<(Option<f64>, Option<f64>)> {
    let Some(reference) = reference else {
        return Ok((None, None));
    };
    let n = reference.dim().0;
    let full = resample_latents(z, n)?;
    let images = state.generate(full.view())?;
    Ok((
        Some(ser(images.view(), reference)?),
        Some(magnitude_ser(images.view(), reference)?),
    ))
}

fn snapshot(z: &Array2<f64>) -> Vec<Vec<f64>> {
    z.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Trains one stage in place. `mset` must already be binned to the stage's
/// frame count and `latents` must have one row per frame. Records are
/// appended to `history`; `progress` is advanced.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    state: &mut GeneratorState,
    latents: &mut LatentSequence,
    mset: &MeasurementSet,
    config: &TrainConfig,
    stage: usize,
    reference: Option<ArrayView3<Complex64>>,
    progress: &mut Progress,
    history: &mut TrainHistory,
) -> Result<()> {
    config.validate()?;
    if stage >= config.num_stages() {
        return Err(ReconError::IndexOutOfRange(format!(
            "stage {stage} of {}",
            config.num_stages()
        )));
    }
    latents.validate()?;
    let k = mset.num_frames();
    if latents.len() != k {
        return Err(ReconError::ShapeMismatch(format!(
            "{} latents for {k} stage frames",
            latents.len()
        )));
    }
    if let Some(r) = reference {
        if (r.dim().1, r.dim().2) != mset.grid_shape {
            return Err(ReconError::ShapeMismatch("reference grid".into()));
        }
    }
    let op = mset.operator();
    let all: Vec<usize> = (0..k).collect();
    let epochs = config.epochs_per_stage[stage];
    let joint = config.mode == TrainMode::Joint;

    let record = |state: &GeneratorState,
                  z: &Array2<f64>,
                  epoch: usize,
                  cost,
                  full_data: bool,
                  progress: &Progress,
                  history: &mut TrainHistory|
     -> Result<()> {
        let (ser_db, ser_mag_db) = evaluate_ser(state, z.view(), reference)?;
        let index = history.records.len();
        let latents = (config.latent_snapshot_every > 0
            && index % config.latent_snapshot_every == 0)
            .then(|| snapshot(z));
        history.records.push(HistoryRecord {
            stage,
            epoch,
            global_epoch: progress.global_epoch,
            steps: progress.steps,
            wall_seconds: progress.wall_seconds,
            cost,
            full_data,
            ser_db,
            ser_mag_db,
            latents,
        });
        Ok(())
    };

    let start = full_cost(state, latents, mset, &config.weights, stage, progress.steps)?;
    record(state, &latents.z, 0, start, true, progress, history)?;
    if epochs == 0 {
        return Ok(());
    }

    let mut rng = stage_rng(config.seed, stage, STREAM_SHUFFLE);
    let mut adam_theta = Adam::new(state.num_parameters(), config.lr_theta, config.adam_betas);
    let mut adam_z = Adam::new(latents.z.len(), config.lr_z, config.adam_betas);
    let mut order = all.clone();
    let mut clock = Clock::new(progress.wall_seconds);

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut sum = CostTerms::default();
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (terms, grad) =
                cost_and_gradient(state, latents.z.view(), mset, &config.weights, batch, &op)?;
            if !terms.is_finite() || grad.theta.iter().any(|g| !g.is_finite()) {
                return Err(diverged(stage, progress.steps, &terms));
            }
            adam_theta.step(state.parameters_mut(), &grad.theta);
            if joint {
                let z = latents.z.as_slice_mut().expect("latents are contiguous");
                adam_z.step(z, grad.z.as_slice().expect("gradient is contiguous"));
            }
            progress.steps += 1;
            sum.data += terms.data;
            sum.network += terms.network;
            sum.temporal += terms.temporal;
            sum.total += terms.total;
            batches += 1;
        }
        progress.global_epoch += 1;
        let b = batches as f64;
        let mean = CostTerms {
            data: sum.data / b,
            network: sum.network / b,
            temporal: sum.temporal / b,
            total: sum.total / b,
        };
        if epoch % config.eval_every == 0 || epoch == epochs {
            progress.wall_seconds = clock.pause();
            record(state, &latents.z, epoch, mean, false, progress, history)?;
            clock.resume();
        }
    }
    progress.wall_seconds = clock.pause();

    let end = full_cost(state, latents, mset, &config.weights, stage, progress.steps)?;
    record(state, &latents.z, epochs, end, true, progress, history)?;
    Ok(())
}

/// Full-data cost; any non-finite term becomes a [`ReconError::Diverged`].
fn full_cost(
    state: &GeneratorState,
    latents: &LatentSequence,
    mset: &MeasurementSet,
    weights: &RegWeights,
    stage: usize,
    step: usize,
) -> Result<CostTerms> {
    let all: Vec<usize> = (0..mset.num_frames()).collect();
    let terms = match total_cost(state, latents, mset, weights, &all) {
        Err(ReconError::NonFinite(_)) => {
            let data = data_fidelity(state, latents, mset, &all)?;
            let temporal = weights.lambda2 * temporal_penalty(latents.z.view());
            CostTerms {
                data,
                network: f64::NAN,
                temporal,
                total: f64::NAN,
            }
        }
        other => other?,
    };
    if !terms.is_finite() {
        return Err(diverged(stage, step, &terms));
    }
    Ok(terms)
}

fn diverged(stage: usize, step: usize, t: &CostTerms) -> ReconError {
    ReconError::Diverged {
        stage,
        step,
        data: t.data,
        network: t.network,
        temporal: t.temporal,
    }
}

/// Output of a full reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub state: GeneratorState,
    pub latents: LatentSequence,
    /// `G(z_i)` for every frame, shape `(N, H, W)`.
    pub images: Array3<Complex64>,
    pub history: TrainHistory,
}

/// Resolved settings stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub completed_stages: usize,
    pub progress: Progress,
}

pub const CKPT_GENERATOR: &str = "generator.ckpt";
pub const CKPT_LATENTS: &str = "latents.bin";
pub const CKPT_HISTORY: &str = "history.jsonl";
pub const CKPT_CONFIG: &str = "config.json";

/// Latents as an archive of kind `latent_sequence`.
pub fn latents_to_archive(latents: &LatentSequence) -> Result<Archive> {
    let (n, d) = latents.z.dim();
    let mut a = Archive::new("latent_sequence");
    a.set_meta(serde_json::json!({ "num_frames": n, "latent_dim": d }));
    a.push_f64("z", &[n, d], latents.z.iter().copied().collect())?;
    a.push_f64("frame_times", &[n], latents.frame_times.clone())?;
    Ok(a)
}

pub fn latents_from_archive(a: &Archive) -> Result<LatentSequence> {
    a.expect_kind("latent_sequence")?;
    let shape = a.shape("z")?.to_vec();
    if shape.len() != 2 {
        return Err(ReconError::Format("latent block must be 2-D".into()));
    }
    let z = Array2::from_shape_vec((shape[0], shape[1]), a.f64("z")?.to_vec())
        .map_err(|e| ReconError::Format(e.to_string()))?;
    let seq = LatentSequence {
        z,
        frame_times: a.f64("frame_times")?.to_vec(),
    };
    seq.validate()?;
    Ok(seq)
}

fn write_checkpoint(
    dir: &Path,
    state: &GeneratorState,
    latents: &LatentSequence,
    history: &TrainHistory,
    info: &CheckpointInfo,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    state.to_archive()?.write(dir.join(CKPT_GENERATOR))?;
    latents_to_archive(latents)?.write(dir.join(CKPT_LATENTS))?;
    history.write_jsonl(dir.join(CKPT_HISTORY))?;
    fs::write(dir.join(CKPT_CONFIG), serde_json::to_string_pretty(info)?)?;
    Ok(())
}

/// Runs the full schedule. See [`reconstruct_with_checkpoints`].
pub fn reconstruct(
    mset: &MeasurementSet,
    gen_config: &GeneratorConfig,
    train_config: &TrainConfig,
    reference: Option<ArrayView3<Complex64>>,
) -> Result<Reconstruction> {
    let state = GeneratorState::init(gen_config.clone())?;
    run_stages(
        mset,
        state,
        None,
        train_config,
        reference,
        0..train_config.num_stages(),
        Progress::default(),
        TrainHistory::default(),
        None,
    )
}

/// Like [`reconstruct`], writing a checkpoint to `dir` after every stage.
pub fn reconstruct_with_checkpoints(
    mset: &MeasurementSet,
    gen_config: &GeneratorConfig,
    train_config: &TrainConfig,
    reference: Option<ArrayView3<Complex64>>,
    dir: &Path,
) -> Result<Reconstruction> {
    let state = GeneratorState::init(gen_config.clone())?;
    run_stages(
        mset,
        state,
        None,
        train_config,
        reference,
        0..train_config.num_stages(),
        Progress::default(),
        TrainHistory::default(),
        Some(dir),
    )
}

/// Continues a run from the checkpoint in `dir`, writing further
/// checkpoints there. A finished run is returned as is.
pub fn resume(
    mset: &MeasurementSet,
    reference: Option<ArrayView3<Complex64>>,
    dir: &Path,
) -> Result<Reconstruction> {
    let info: CheckpointInfo = serde_json::from_str(&fs::read_to_string(dir.join(CKPT_CONFIG))?)?;
    let state = GeneratorState::from_archive(&Archive::read(dir.join(CKPT_GENERATOR))?)?;
    if state.config() != &info.generator {
        return Err(ReconError::Format(
            "checkpoint generator config mismatch".into(),
        ));
    }
    let latents = latents_from_archive(&Archive::read(dir.join(CKPT_LATENTS))?)?;
    let history = TrainHistory::read_jsonl(dir.join(CKPT_HISTORY))?;
    run_stages(
        mset,
        state,
        Some(latents),
        &info.train,
        reference,
        info.completed_stages..info.train.num_stages(),
        info.progress,
        history,
        Some(dir),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_stages(
    mset: &MeasurementSet,
    mut state: GeneratorState,
    mut latents: Option<LatentSequence>,
    config: &TrainConfig,
    reference: Option<ArrayView3<Complex64>>,
    stages: std::ops::Range<usize>,
    mut progress: Progress,
    mut history: TrainHistory,
    checkpoint_dir: Option<&Path>,
) -> Result<Reconstruction> {
    mset.validate()?;
    let n = mset.num_frames();
    config.validate_for(n)?;
    if state.output_shape() != mset.grid_shape {
        return Err(ReconError::ShapeMismatch(format!(
            "generator output {:?} vs measurement grid {:?}",
            state.output_shape(),
            mset.grid_shape
        )));
    }
    if let Some(r) = reference {
        if r.dim() != (n, mset.grid_shape.0, mset.grid_shape.1) {
            return Err(ReconError::ShapeMismatch(
                "reference must match the measurement series".into(),
            ));
        }
    }
    let d = state.latent_dim();

    let finishing = stages.end == config.num_stages();
    for stage in stages {
        let group = stage_group_size(n, config.stage_frame_counts[stage]);
        let binned;
        let stage_mset = if group == 1 {
            mset
        } else {
            binned = bin_measurements(mset, group)?;
            &binned
        };
        let k = stage_mset.num_frames();
        let z = match latents.take() {
            None => initial_latents(k, d, config.seed),
            Some(prev) => {
                let mut rng = stage_rng(config.seed, stage, STREAM_INIT);
                interpolate_latents(prev.z.view(), k, &mut rng)?
            }
        };
        let mut seq = LatentSequence::new(z)?;
        train_stage(
            &mut state,
            &mut seq,
            stage_mset,
            config,
            stage,
            reference,
            &mut progress,
            &mut history,
        )?;
        if let Some(dir) = checkpoint_dir {
            let info = CheckpointInfo {
                generator: state.config().clone(),
                train: config.clone(),
                completed_stages: stage + 1,
                progress,
            };
            write_checkpoint(dir, &state, &seq, &history, &info)?;
        }
        latents = Some(seq);
    }

    let latents = latents.ok_or_else(|| ReconError::Empty("no stages were run".into()))?;
    if finishing && latents.len() != n {
        return Err(ReconError::ShapeMismatch(
            "final stage does not cover every frame".into(),
        ));
    }
    let images = state.generate(latents.z.view())?;
    Ok(Reconstruction {
        state,
        latents,
        images,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{make_golden_angle_patterns, CoilSensitivities};
    use crate::phantom::acquire;
    use ndarray::array;

    fn tiny_problem(n: usize) -> (MeasurementSet, Array3<Complex64>) {
        let truth = GeneratorState::init(GeneratorConfig::new(2, 16, 8, 77)).unwrap();
        let t: Vec<f64> = (0..n)
            .map(|i| i as f64 / n as f64 * std::f64::consts::TAU)
            .collect();
        let z = Array2::from_shape_fn(
            (n, 2),
            |(i, k)| if k == 0 { t[i].sin() } else { t[i].cos() },
        );
        let images = truth.generate(z.view()).unwrap();
        let patterns = make_golden_angle_patterns((16, 16), n, 4).unwrap();
        let mset = acquire(
            &images,
            patterns,
            CoilSensitivities::gaussian_bumps(16, 16, 2).unwrap(),
            0.0,
            0,
        )
        .unwrap();
        (mset, images)
    }

    fn tiny_config(n: usize) -> (GeneratorConfig, TrainConfig) {
        let gen = GeneratorConfig::new(2, 16, 8, 5);
        let mut train = TrainConfig::progressive(n, 4);
        train.batch_size = 3;
        train.lr_theta = 3e-3;
        train.lr_z = 1e-2;
        (gen, train)
    }

    #[test]
    fn interpolation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = array![[0.3, -1.0], [2.0, 4.0], [5.0, 5.5]];
        assert_eq!(interpolate_latents(z.view(), 3, &mut rng).unwrap(), z);

        let z = array![[0.0], [1.0]];
        assert_eq!(
            interpolate_latents(z.view(), 3, &mut rng).unwrap(),
            array![[0.0], [0.5], [1.0]]
        );

        let z = array![[0.4, -0.2]];
        let out = interpolate_latents(z.view(), 5, &mut rng).unwrap();
        assert_eq!(out.dim(), (5, 2));
        for row in out.rows() {
            assert!((row[0] - 0.4).abs() < 3e-2 && (row[1] + 0.2).abs() < 3e-2);
        }
        assert_ne!(out.row(0), out.row(1));

        assert!(interpolate_latents(array![[0.0], [1.0]].view(), 1, &mut rng).is_err());
    }

    #[test]
    fn interpolation_is_piecewise_linear() {
        // Oracle: numerical linear interpolation on the scaled grid.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = array![[0.0], [2.0], [-1.0], [3.0]];
        let out = interpolate_latents(z.view(), 10, &mut rng).unwrap();
        for k in 0..10 {
            let t = k as f64 * 3.0 / 9.0;
            let i = (t.floor() as usize).min(2);
            let expect = z[[i, 0]] + (t - i as f64) * (z[[i + 1, 0]] - z[[i, 0]]);
            assert!((out[[k, 0]] - expect).abs() < 1e-12);
        }
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[9, 0]], 3.0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::progressive(150, 3);
        assert_eq!(ok.stage_frame_counts, vec![1, 30, 150]);
        assert!(ok.validate_for(150).is_ok());
        assert!(ok.validate_for(149).is_err());
        let cases = [
            TrainConfig {
                stage_frame_counts: vec![1, 30, 30, 150],
                epochs_per_stage: vec![1; 4],
                ..ok.clone()
            },
            TrainConfig {
                stage_frame_counts: vec![0, 150],
                epochs_per_stage: vec![1; 2],
                ..ok.clone()
            },
            TrainConfig {
                epochs_per_stage: vec![1, 1],
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                lr_z: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                eval_every: 0,
                ..ok.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!(default_schedule(4), vec![1, 4]);
        assert_eq!(stage_group_size(150, 30), 5);
        assert_eq!(stage_group_size(150, 1), 150);
    }

    #[test]
    fn zero_epochs_leave_state_unchanged() {
        let (mset, _) = tiny_problem(6);
        let (gen, mut train) = tiny_config(6);
        train.stage_frame_counts = vec![6];
        train.epochs_per_stage = vec![0];
        let mut state = GeneratorState::init(gen).unwrap();
        let before = state.clone();
        let mut z = LatentSequence::new(initial_latents(6, 2, 0)).unwrap();
        let z_before = z.clone();
        let mut hist = TrainHistory::default();
        train_stage(
            &mut state,
            &mut z,
            &mset,
            &train,
            0,
            None,
            &mut Progress::default(),
            &mut hist,
        )
        .unwrap();
        assert_eq!(state, before);
        assert_eq!(z, z_before);
        assert_eq!(hist.records.len(), 1);
    }

    #[test]
    fn training_reduces_full_data_cost() {
        let (mset, reference) = tiny_problem(8);
        let (gen, mut train) = tiny_config(8);
        train.epochs_per_stage = vec![10, 10, 30];
        let out = reconstruct(&mset, &gen, &train, Some(reference.view())).unwrap();
        let first = out
            .history
            .records
            .iter()
            .find(|r| r.stage == 2 && r.full_data)
            .unwrap();
        let last = out.history.last().unwrap();
        assert!(last.full_data);
        assert!(
            last.cost.total < first.cost.total,
            "{} vs {}",
            last.cost.total,
            first.cost.total
        );
        assert_eq!(out.images.dim(), (8, 16, 16));
        assert!(last.ser_mag_db.is_some());
        // every stage starts with a finite logged full-data cost
        for s in 0..3 {
            let r = out.history.records.iter().find(|r| r.stage == s).unwrap();
            assert!(r.full_data && r.epoch == 0 && r.cost.total.is_finite());
        }
        let mut prev = 0.0;
        for r in &out.history.records {
            assert!(r.wall_seconds >= prev);
            prev = r.wall_seconds;
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (mset, _) = tiny_problem(6);
        let (gen, train) = tiny_config(6);
        let a = reconstruct(&mset, &gen, &train, None).unwrap();
        let b = reconstruct(&mset, &gen, &train, None).unwrap();
        assert_eq!(a.history.costs(), b.history.costs());
        assert_eq!(a.state, b.state);
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn fixed_latent_mode_never_moves_latents() {
        let (mset, _) = tiny_problem(6);
        let (gen, train) = tiny_config(6);
        let train = TrainConfig {
            mode: TrainMode::FixedLatent,
            ..train.without_progression()
        };
        let out = reconstruct(&mset, &gen, &train, None).unwrap();
        assert_eq!(out.latents.z, initial_latents(6, 2, train.seed));
        // generator does move
        assert_ne!(out.state, GeneratorState::init(gen).unwrap());
    }

    #[test]
    fn single_stage_schedule_matches_explicit_single_stage() {
        let (mset, _) = tiny_problem(6);
        let (gen, train) = tiny_config(6);
        let a = reconstruct(&mset, &gen, &train.clone().without_progression(), None).unwrap();
        let explicit = TrainConfig {
            stage_frame_counts: vec![6],
            epochs_per_stage: vec![*train.epochs_per_stage.last().unwrap()],
            ..train
        };
        let b = reconstruct(&mset, &gen, &explicit, None).unwrap();
        assert_eq!(a.history.costs(), b.history.costs());
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (mset, _) = tiny_problem(6);
        let (gen, train) = tiny_config(6);
        let full = reconstruct(&mset, &gen, &train, None).unwrap();

        // stop after two of three stages, as if interrupted
        let dir = tempfile::tempdir().unwrap();
        let state = GeneratorState::init(gen).unwrap();
        run_stages(
            &mset,
            state,
            None,
            &train,
            None,
            0..2,
            Progress::default(),
            TrainHistory::default(),
            Some(dir.path()),
        )
        .unwrap();
        let info: CheckpointInfo =
            serde_json::from_str(&fs::read_to_string(dir.path().join(CKPT_CONFIG)).unwrap())
                .unwrap();
        assert_eq!(info.completed_stages, 2);

        let resumed = resume(&mset, None, dir.path()).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.latents, full.latents);
        assert_eq!(resumed.history.costs(), full.history.costs());
        let info: CheckpointInfo =
            serde_json::from_str(&fs::read_to_string(dir.path().join(CKPT_CONFIG)).unwrap())
                .unwrap();
        assert_eq!(info.completed_stages, 3);
    }

    #[test]
    fn checkpoint_files_round_trip() {
        let (mset, _) = tiny_problem(6);
        let (gen, train) = tiny_config(6);
        let dir = tempfile::tempdir().unwrap();
        let out = reconstruct_with_checkpoints(&mset, &gen, &train, None, dir.path()).unwrap();
        let state =
            GeneratorState::from_archive(&Archive::read(dir.path().join(CKPT_GENERATOR)).unwrap())
                .unwrap();
        assert_eq!(state, out.state);
        let z =
            latents_from_archive(&Archive::read(dir.path().join(CKPT_LATENTS)).unwrap()).unwrap();
        assert_eq!(z, out.latents);
        let h = TrainHistory::read_jsonl(dir.path().join(CKPT_HISTORY)).unwrap();
        assert_eq!(h, out.history);
        // a finished run resumes to itself
        let again = resume(&mset, None, dir.path()).unwrap();
        assert_eq!(again.state, out.state);
    }

    #[test]
    fn divergence_reports_term_breakdown() {
        let (mset, _) = tiny_problem(6);
        let (gen, mut train) = tiny_config(6);
        train = train.without_progression();
        let mut state = GeneratorState::init(gen).unwrap();
        state.parameters_mut()[0] = f64::NAN;
        let mut z = LatentSequence::new(initial_latents(6, 2, 0)).unwrap();
        let err = train_stage(
            &mut state,
            &mut z,
            &mset,
            &train,
            0,
            None,
            &mut Progress::default(),
            &mut TrainHistory::default(),
        );
        match err {
            Err(ReconError::Diverged {
                stage: 0, step: 0, ..
            }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

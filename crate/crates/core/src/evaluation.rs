//! Reconstruction metrics and figure data: signal-to-error ratio, correlation
//! of learned latents with the phantom's motion phases, and time-to-threshold
//! comparisons between runs.
//!
//! SER is `20 log10(||ref|| / ||ref - recon||)` over all frames jointly.
//! Because a generator can only recover a complex image up to a global phase
//! when the data are ambiguous, a magnitude variant (on `|recon|`, `|ref|`)
//! is reported as well. A perfect reconstruction yields [`SER_CAP_DB`]
//! instead of infinity.

use std::fmt::Write as _;

use ndarray::{ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::phantom::PhantomTruth;
use crate::trainer::TrainHistory;

/// Reported in place of an infinite SER (zero error) and as an upper clamp.
pub const SER_CAP_DB: f64 = 300.0;

fn ser_from_norms(signal_sq: f64, error_sq: f64) -> Result<f64> {
    if !(signal_sq > 0.0) {
        return Err(ReconError::ZeroReference);
    }
    if !error_sq.is_finite() {
        return Err(ReconError::NonFinite("reconstruction".into()));
    }
    if error_sq == 0.0 {
        return Ok(SER_CAP_DB);
    }
    Ok((10.0 * (signal_sq / error_sq).log10()).min(SER_CAP_DB))
}

fn check_shapes(recon: &ArrayView3<Complex64>, reference: &ArrayView3<Complex64>) -> Result<()> {
    if recon.dim() != reference.dim() {
        return Err(ReconError::ShapeMismatch(format!(
            "recon {:?} vs reference {:?}",
            recon.dim(),
            reference.dim()
        )));
    }
    Ok(())
}

fn ser_with(
    recon: ArrayView3<Complex64>,
    reference: ArrayView3<Complex64>,
    f: impl Fn(Complex64, Complex64) -> (f64, f64),
) -> Result<f64> {
    check_shapes(&recon, &reference)?;
    let (mut s, mut e) = (0.0, 0.0);
    for (&x, &r) in recon.iter().zip(reference.iter()) {
        let (ds, de) = f(x, r);
        s += ds;
        e += de;
    }
    ser_from_norms(s, e)
}

fn complex_terms(x: Complex64, r: Complex64) -> (f64, f64) {
    (r.norm_sqr(), (r - x).norm_sqr())
}

fn magnitude_terms(x: Complex64, r: Complex64) -> (f64, f64) {
    let (a, b) = (r.norm(), x.norm());
    (a * a, (a - b) * (a - b))
}

/// Complex SER in dB over the whole series.
pub fn ser(recon: ArrayView3<Complex64>, reference: ArrayView3<Complex64>) -> Result<f64> {
    ser_with(recon, reference, complex_terms)
}

/// SER in dB between magnitude images.
pub fn magnitude_ser(
    recon: ArrayView3<Complex64>,
    reference: ArrayView3<Complex64>,
) -> Result<f64> {
    ser_with(recon, reference, magnitude_terms)
}

fn per_frame_with(
    recon: ArrayView3<Complex64>,
    reference: ArrayView3<Complex64>,
    f: fn(Complex64, Complex64) -> (f64, f64),
) -> Result<Vec<f64>> {
    check_shapes(&recon, &reference)?;
    recon
        .axis_iter(Axis(0))
        .zip(reference.axis_iter(Axis(0)))
        .map(|(x, r)| ser_with(x.insert_axis(Axis(0)), r.insert_axis(Axis(0)), f))
        .collect()
}

pub fn per_frame_ser(
    recon: ArrayView3<Complex64>,
    reference: ArrayView3<Complex64>,
) -> Result<Vec<f64>> {
    per_frame_with(recon, reference, complex_terms)
}

pub fn per_frame_magnitude_ser(
    recon: ArrayView3<Complex64>,
    reference: ArrayView3<Complex64>,
) -> Result<Vec<f64>> {
    per_frame_with(recon, reference, magnitude_terms)
}

/// Motion modes of the phantom, in the column order of the correlation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Cardiac,
    Respiratory,
}

pub const MOTIONS: [Motion; 2] = [Motion::Cardiac, Motion::Respiratory];

/// Absolute correlations of each latent channel with each motion and the
/// injective channel-to-motion assignment maximizing their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCorrelation {
    /// One row per latent channel: `[cardiac, respiratory]`.
    pub corr: Vec<[f64; 2]>,
    /// Per channel: the motion it is matched to, if any.
    pub assignment: Vec<Option<Motion>>,
}

impl LatentCorrelation {
    /// `|corr|` of the channel assigned to `motion`, if one is.
    pub fn assigned(&self, motion: Motion) -> Option<f64> {
        let col = MOTIONS.iter().position(|&m| m == motion)?;
        self.assignment
            .iter()
            .position(|&a| a == Some(motion))
            .map(|ch| self.corr[ch][col])
    }

    /// Smallest assigned correlation; 0 when nothing is assigned.
    pub fn min_assigned(&self) -> f64 {
        let vals: Vec<f64> = MOTIONS.iter().filter_map(|&m| self.assigned(m)).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.into_iter().fold(f64::INFINITY, f64::min)
        }
    }
}

/// Pearson correlation; 0 if either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // relative threshold: treat round-off-level spread as constant
    let tiny = |s: f64, m: f64| s <= 1e-24 * (1.0 + m * m) * n;
    if tiny(saa, ma) || tiny(sbb, mb) {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Correlates each latent channel (columns of `z`, `N x d`) with the sine and
/// cosine of each motion phase, keeping the larger absolute value per mode.
pub fn latent_motion_correlation(
    z: ArrayView2<f64>,
    cardiac_phase: &[f64],
    resp_phase: &[f64],
) -> Result<LatentCorrelation> {
    let (n, d) = z.dim();
    if cardiac_phase.len() != n || resp_phase.len() != n {
        return Err(ReconError::ShapeMismatch(format!(
            "{n} latents vs {} / {} phases",
            cardiac_phase.len(),
            resp_phase.len()
        )));
    }
    let signals: Vec<[Vec<f64>; 2]> = [cardiac_phase, resp_phase]
        .iter()
        .map(|p| {
            [
                p.iter().map(|x| x.sin()).collect(),
                p.iter().map(|x| x.cos()).collect(),
            ]
        })
        .collect();
    let mut corr = vec![[0.0; 2]; d];
    for ch in 0..d {
        let col = z.column(ch).to_vec();
        for (m, pair) in signals.iter().enumerate() {
            corr[ch][m] = pair
                .iter()
                .map(|s| pearson(&col, s).abs())
                .fold(0.0, f64::max);
        }
    }
    let assignment = best_assignment(&corr);
    Ok(LatentCorrelation { corr, assignment })
}

pub fn latent_motion_correlation_truth(
    z: ArrayView2<f64>,
    truth: &PhantomTruth,
) -> Result<LatentCorrelation> {
    latent_motion_correlation(z, &truth.cardiac_phase, &truth.resp_phase)
}

/// Exhaustive maximum-weight matching of motions to distinct channels.
/// With a single channel only its best motion is assigned.
fn best_assignment(corr: &[[f64; 2]]) -> Vec<Option<Motion>> {
    let d = corr.len();
    let mut out = vec![None; d];
    if d == 0 {
        return out;
    }
    if d == 1 {
        out[0] = Some(if corr[0][0] >= corr[0][1] {
            MOTIONS[0]
        } else {
            MOTIONS[1]
        });
        return out;
    }
    let mut best = (f64::NEG_INFINITY, 0, 1);
    for a in 0..d {
        for b in 0..d {
            if a != b {
                let score = corr[a][0] + corr[b][1];
                if score > best.0 {
                    best = (score, a, b);
                }
            }
        }
    }
    out[best.1] = Some(Motion::Cardiac);
    out[best.2] = Some(Motion::Respiratory);
    out
}

/// Time for one run to first reach the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub run: String,
    /// `None` when the run never reached the threshold.
    pub wall_seconds: Option<f64>,
    pub global_epoch: Option<usize>,
    pub final_ser_mag_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub threshold_db: f64,
    pub rows: Vec<TimingRow>,
}

pub const NOT_REACHED: &str = "not_reached";

impl TimingTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,threshold_db,wall_seconds,global_epoch,final_ser_mag_db\n");
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_else(|| NOT_REACHED.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.run,
                self.threshold_db,
                opt(r.wall_seconds.map(|v| format!("{v:.6}"))),
                opt(r.global_epoch.map(|v| v.to_string())),
                r.final_ser_mag_db
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default(),
            );
        }
        s
    }

    pub fn get(&self, run: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.run == run)
    }
}

/// First logged time at which each run's magnitude SER reaches `threshold_db`.
pub fn compare_runs(histories: &[(&str, &TrainHistory)], threshold_db: f64) -> TimingTable {
    let rows = histories
        .iter()
        .map(|(name, h)| {
            let hit = h
                .records
                .iter()
                .find(|r| r.ser_mag_db.is_some_and(|s| s >= threshold_db));
            TimingRow {
                run: name.to_string(),
                wall_seconds: hit.map(|r| r.wall_seconds),
                global_epoch: hit.map(|r| r.global_epoch),
                final_ser_mag_db: h.records.last().and_then(|r| r.ser_mag_db),
            }
        })
        .collect();
    TimingTable { threshold_db, rows }
}

/// Plot data for one run, one line per history record.
pub fn history_csv(history: &TrainHistory) -> String {
    let mut s = String::from(
        "stage,epoch,global_epoch,steps,wall_seconds,full_data,cost_total,cost_data,cost_network,cost_temporal,ser_db,ser_mag_db\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in &history.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
            r.stage,
            r.epoch,
            r.global_epoch,
            r.steps,
            r.wall_seconds,
            u8::from(r.full_data),
            r.cost.total,
            r.cost.data,
            r.cost.network,
            r.cost.temporal,
            opt(r.ser_db),
            opt(r.ser_mag_db),
        );
    }
    s
}

/// Latent trajectories per frame, optionally alongside the true phases.
pub fn latents_csv(z: ArrayView2<f64>, truth: Option<&PhantomTruth>) -> String {
    let d = z.ncols();
    let mut s = String::from("frame");
    for k in 0..d {
        let _ = write!(s, ",z{k}");
    }
    if truth.is_some() {
        s.push_str(",cardiac_phase,resp_phase");
    }
    s.push('\n');
    for (i, row) in z.rows().into_iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v:.9e}");
        }
        if let Some(t) = truth {
            let _ = write!(s, ",{:.9},{:.9}", t.cardiac_phase[i], t.resp_phase[i]);
        }
        s.push('\n');
    }
    s
}

/// Summary of one reconstruction against the phantom truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ser_db: f64,
    pub ser_mag_db: f64,
    pub per_frame_ser_db: Vec<f64>,
    pub per_frame_ser_mag_db: Vec<f64>,
    pub zero_filled_ser_mag_db: Option<f64>,
    pub latent_corr: Option<LatentCorrelation>,
    pub timing: Option<TimingTable>,
}

impl EvalReport {
    pub fn new(
        recon: ArrayView3<Complex64>,
        truth: &PhantomTruth,
        latents: Option<ArrayView2<f64>>,
        zero_filled: Option<ArrayView3<Complex64>>,
    ) -> Result<Self> {
        let reference = truth.images.view();
        Ok(Self {
            ser_db: ser(recon, reference)?,
            ser_mag_db: magnitude_ser(recon, reference)?,
            per_frame_ser_db: per_frame_ser(recon, reference)?,
            per_frame_ser_mag_db: per_frame_magnitude_ser(recon, reference)?,
            zero_filled_ser_mag_db: zero_filled
                .map(|zf| magnitude_ser(zf, reference))
                .transpose()?,
            latent_corr: latents
                .map(|z| latent_motion_correlation_truth(z, truth))
                .transpose()?,
            timing: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

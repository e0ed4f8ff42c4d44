//! Undersampled multi-coil Fourier encoding.
//!
//! k-space is indexed in a centered layout: row `r` of a mask holds the
//! frequency `ky = r - H/2`, column `c` holds `kx = c - W/2`. The transform is
//! the unitary 2-D DFT, so `A^H A = I` for a full mask and a single unit coil.
//!
//! Acquisition trajectories are emulated by pseudo-radial lines through the
//! k-space center, rotated by the golden angle from one line to the next.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde_json::json;

use crate::archive::Archive;
use crate::error::{ReconError, Result};

/// Golden-angle increment, `pi / phi` (about 111.246 degrees).
pub const GOLDEN_ANGLE: f64 = PI * 0.618_033_988_749_894_8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPattern {
    pub frame_index: usize,
    /// Centered-layout mask over the H x W frequency grid.
    pub mask: Array2<bool>,
    /// Line angles in radians, each in `[0, pi)`.
    pub lines: Vec<f64>,
}

impl SamplingPattern {
    pub fn grid_shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// Row-major flat indices of the true mask entries.
    pub fn positions(&self) -> Vec<u32> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn num_sampled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn sampling_fraction(&self) -> f64 {
        self.num_sampled() as f64 / self.mask.len() as f64
    }
}

/// Rounds to the nearest integer with exact halves going toward zero, so
/// `round(-v) == -round(v)`.
fn round_half_toward_zero(v: f64) -> i64 {
    let a = v.abs();
    let f = a.floor();
    let k = if a - f > 0.5 { f + 1.0 } else { f };
    (k as i64) * if v < 0.0 { -1 } else { 1 }
}

/// Rasterizes a line through the k-space center at `angle` (radians, measured
/// from the kx axis toward ky). Steps one pixel along the dominant axis and
/// rounds the minor coordinate. Returns centered-layout `(row, col)` pairs.
pub fn rasterize_line(height: usize, width: usize, angle: f64) -> Vec<(usize, usize)> {
    let (s, c) = angle.sin_cos();
    let (h2, w2) = ((height / 2) as i64, (width / 2) as i64);
    let mut out = Vec::new();
    if c.abs() >= s.abs() {
        let slope = s / c;
        for kx in -w2..w2 {
            let ky = round_half_toward_zero(kx as f64 * slope);
            if (-h2..h2).contains(&ky) {
                out.push(((ky + h2) as usize, (kx + w2) as usize));
            }
        }
    } else {
        let slope = c / s;
        for ky in -h2..h2 {
            let kx = round_half_toward_zero(ky as f64 * slope);
            if (-w2..w2).contains(&kx) {
                out.push(((ky + h2) as usize, (kx + w2) as usize));
            }
        }
    }
    out
}

pub fn validate_grid(height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(ReconError::InvalidConfig(format!(
            "grid {height}x{width}: dimensions must be even and at least 8"
        )));
    }
    Ok(())
}

/// Golden-angle pseudo-radial patterns: frame `k` holds lines at angles
/// `(k * L + j) * GOLDEN_ANGLE mod pi` for `j in 0..L`.
pub fn make_golden_angle_patterns(
    grid_shape: (usize, usize),
    num_frames: usize,
    lines_per_frame: usize,
) -> Result<Vec<SamplingPattern>> {
    let (h, w) = grid_shape;
    validate_grid(h, w)?;
    if num_frames == 0 || lines_per_frame == 0 {
        return Err(ReconError::InvalidConfig(
            "num_frames and lines_per_frame must be at least 1".into(),
        ));
    }
    Ok((0..num_frames)
        .map(|k| {
            let lines: Vec<f64> = (0..lines_per_frame)
                .map(|j| ((k * lines_per_frame + j) as f64 * GOLDEN_ANGLE).rem_euclid(PI))
                .collect();
            let mut mask = Array2::from_elem((h, w), false);
            for &angle in &lines {
                for (r, c) in rasterize_line(h, w, angle) {
                    mask[[r, c]] = true;
                }
            }
            SamplingPattern {
                frame_index: k,
                mask,
                lines,
            }
        })
        .collect())
}

/// Complex coil sensitivity maps, shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    maps: Array3<Complex64>,
}

impl CoilSensitivities {
    pub fn new(maps: Array3<Complex64>) -> Result<Self> {
        let (c, h, w) = maps.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(ReconError::InvalidConfig(
                "coil maps must be non-empty".into(),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let sos: f64 = (0..c).map(|k| maps[[k, y, x]].norm_sqr()).sum();
                if !(sos > 0.0) || !sos.is_finite() {
                    return Err(ReconError::InvalidConfig(format!(
                        "coil sum-of-squares not positive at ({y}, {x})"
                    )));
                }
            }
        }
        Ok(Self { maps })
    }

    /// A single coil of uniform unit sensitivity.
    pub fn unit(height: usize, width: usize) -> Self {
        Self {
            maps: Array3::from_elem((1, height, width), Complex64::new(1.0, 0.0)),
        }
    }

    /// Smooth synthetic receive coils arranged around the field of view: a
    /// Gaussian magnitude bump on a constant floor, times a slow phase ramp
    /// that differs per coil.
    pub fn gaussian_bumps(height: usize, width: usize, num_coils: usize) -> Result<Self> {
        if num_coils == 0 {
            return Err(ReconError::InvalidConfig(
                "num_coils must be at least 1".into(),
            ));
        }
        if num_coils == 1 {
            return Ok(Self::unit(height, width));
        }
        let mut maps = Array3::from_elem((num_coils, height, width), ZERO);
        for k in 0..num_coils {
            let theta = 2.0 * PI * k as f64 / num_coils as f64;
            let (cy, cx) = (0.7 * theta.sin(), 0.7 * theta.cos());
            for y in 0..height {
                let v = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
                for x in 0..width {
                    let u = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    let mag = 0.25 + (-d2 / (2.0 * 0.5f64.powi(2))).exp();
                    let phase = 0.5 * (u * theta.cos() + v * theta.sin()) + theta;
                    maps[[k, y, x]] = Complex64::from_polar(mag, phase);
                }
            }
        }
        Self::new(maps)
    }

    pub fn maps(&self) -> &Array3<Complex64> {
        &self.maps
    }

    pub fn num_coils(&self) -> usize {
        self.maps.dim().0
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }
}

/// Unitary 2-D DFT on a fixed grid with cached plans.
pub struct EncodingOperator {
    height: usize,
    width: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for EncodingOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncodingOperator")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl EncodingOperator {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            fwd_row: planner.plan_fft_forward(width),
            fwd_col: planner.plan_fft_forward(height),
            inv_row: planner.plan_fft_inverse(width),
            inv_col: planner.plan_fft_inverse(height),
        }
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Maps a centered-layout flat index to the unshifted FFT output index.
    #[inline]
    fn raw_index(&self, pos: u32) -> usize {
        let (h, w) = (self.height, self.width);
        let (r, c) = (pos as usize / w, pos as usize % w);
        ((r + h / 2) % h) * w + (c + w / 2) % w
    }

    fn transform(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.height, self.width);
        row.process(buf);
        let mut t = vec![ZERO; h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        col.process(&mut t);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y] * scale;
            }
        }
    }

    fn fft_raw(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.fwd_row, &self.fwd_col);
    }

    fn ifft_raw(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.inv_row, &self.inv_col);
    }

    fn check_image(&self, image: &ArrayView2<Complex64>) -> Result<()> {
        if image.dim() != (self.height, self.width) {
            return Err(ReconError::ShapeMismatch(format!(
                "image {:?} vs grid {:?}",
                image.dim(),
                (self.height, self.width)
            )));
        }
        Ok(())
    }

    fn check_coils(&self, coils: &CoilSensitivities) -> Result<()> {
        if coils.grid_shape() != (self.height, self.width) {
            return Err(ReconError::ShapeMismatch(format!(
                "coil maps {:?} vs grid {:?}",
                coils.grid_shape(),
                (self.height, self.width)
            )));
        }
        Ok(())
    }

    /// Full unitary DFT with the result in centered layout.
    pub fn fft2_centered(&self, image: ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
        self.check_image(&image)?;
        let mut buf: Vec<Complex64> = image.iter().copied().collect();
        self.fft_raw(&mut buf);
        let (h, w) = (self.height, self.width);
        Ok(Array2::from_shape_fn((h, w), |(r, c)| {
            buf[self.raw_index((r * w + c) as u32)]
        }))
    }

    /// Inverse of [`fft2_centered`](Self::fft2_centered).
    pub fn ifft2_centered(&self, kspace: ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
        self.check_image(&kspace)?;
        let (h, w) = (self.height, self.width);
        let mut buf = vec![ZERO; h * w];
        for (pos, v) in kspace.iter().enumerate() {
            buf[self.raw_index(pos as u32)] = *v;
        }
        self.ifft_raw(&mut buf);
        Ok(Array2::from_shape_vec((h, w), buf).unwrap())
    }

    /// Samples of `F(coil_c * image)` at `positions` for each coil: shape `(C, M)`.
    pub fn forward(
        &self,
        image: ArrayView2<Complex64>,
        positions: &[u32],
        coils: &CoilSensitivities,
    ) -> Result<Array2<Complex64>> {
        self.check_image(&image)?;
        self.check_coils(coils)?;
        let hw = self.height * self.width;
        if let Some(&p) = positions.iter().find(|&&p| p as usize >= hw) {
            return Err(ReconError::IndexOutOfRange(format!("k-space position {p}")));
        }
        let nc = coils.num_coils();
        let mut out = Array2::from_elem((nc, positions.len()), ZERO);
        let mut buf = vec![ZERO; hw];
        for c in 0..nc {
            let map = coils.maps.index_axis(Axis(0), c);
            for ((b, x), s) in buf.iter_mut().zip(image.iter()).zip(map.iter()) {
                *b = x * s;
            }
            self.fft_raw(&mut buf);
            for (o, &p) in out.row_mut(c).iter_mut().zip(positions) {
                *o = buf[self.raw_index(p)];
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`forward`](Self::forward): scatter-add, inverse
    /// unitary DFT, multiply by the conjugate coil map, sum over coils.
    pub fn adjoint(
        &self,
        samples: ArrayView2<Complex64>,
        positions: &[u32],
        coils: &CoilSensitivities,
    ) -> Result<Array2<Complex64>> {
        self.check_coils(coils)?;
        let nc = coils.num_coils();
        if samples.dim() != (nc, positions.len()) {
            return Err(ReconError::ShapeMismatch(format!(
                "samples {:?} vs ({nc}, {})",
                samples.dim(),
                positions.len()
            )));
        }
        let (h, w) = (self.height, self.width);
        if let Some(&p) = positions.iter().find(|&&p| p as usize >= h * w) {
            return Err(ReconError::IndexOutOfRange(format!("k-space position {p}")));
        }
        let mut out = Array2::from_elem((h, w), ZERO);
        let mut buf = vec![ZERO; h * w];
        for c in 0..nc {
            buf.iter_mut().for_each(|b| *b = ZERO);
            for (s, &p) in samples.row(c).iter().zip(positions) {
                buf[self.raw_index(p)] += s;
            }
            self.ifft_raw(&mut buf);
            let map = coils.maps.index_axis(Axis(0), c);
            for ((o, b), s) in out.iter_mut().zip(&buf).zip(map.iter()) {
                *o += b * s.conj();
            }
        }
        Ok(out)
    }
}

/// `A_i x` for one pattern: per-coil samples at the pattern's true mask entries.
pub fn apply_forward(
    image: ArrayView2<Complex64>,
    pattern: &SamplingPattern,
    coils: &CoilSensitivities,
) -> Result<Array2<Complex64>> {
    let (h, w) = pattern.grid_shape();
    EncodingOperator::new(h, w).forward(image, &pattern.positions(), coils)
}

/// `A_i^H y` for one pattern.
pub fn apply_adjoint(
    samples: ArrayView2<Complex64>,
    pattern: &SamplingPattern,
    coils: &CoilSensitivities,
) -> Result<Array2<Complex64>> {
    let (h, w) = pattern.grid_shape();
    EncodingOperator::new(h, w).adjoint(samples, &pattern.positions(), coils)
}

/// One (possibly binned) frame of measurements.
///
/// `positions` lists the centered-layout k-space index of every stored sample.
/// For an acquired frame it equals `pattern.positions()`. A binned frame keeps
/// one entry per originating frame, so positions may repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub pattern: SamplingPattern,
    pub positions: Vec<u32>,
    /// Shape `(C, positions.len())`.
    pub samples: Array2<Complex64>,
}

impl MeasurementFrame {
    pub fn num_entries(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub frames: Vec<MeasurementFrame>,
    pub noise_sigma: f64,
    pub grid_shape: (usize, usize),
    pub coils: CoilSensitivities,
}

impl MeasurementSet {
    pub fn new(
        frames: Vec<MeasurementFrame>,
        noise_sigma: f64,
        coils: CoilSensitivities,
    ) -> Result<Self> {
        let grid_shape = coils.grid_shape();
        let set = Self {
            frames,
            noise_sigma,
            grid_shape,
            coils,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(ReconError::Empty("measurement set has no frames".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(ReconError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if self.coils.grid_shape() != self.grid_shape {
            return Err(ReconError::ShapeMismatch("coil maps vs grid_shape".into()));
        }
        let nc = self.num_coils();
        let hw = self.grid_shape.0 * self.grid_shape.1;
        for (i, f) in self.frames.iter().enumerate() {
            if f.pattern.grid_shape() != self.grid_shape {
                return Err(ReconError::ShapeMismatch(format!("frame {i} mask shape")));
            }
            if f.samples.dim() != (nc, f.positions.len()) {
                return Err(ReconError::ShapeMismatch(format!(
                    "frame {i}: samples {:?}, expected ({nc}, {})",
                    f.samples.dim(),
                    f.positions.len()
                )));
            }
            for &p in &f.positions {
                if p as usize >= hw || !f.pattern.mask.as_slice().unwrap()[p as usize] {
                    return Err(ReconError::ShapeMismatch(format!(
                        "frame {i}: sample position {p} not on the mask"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_coils(&self) -> usize {
        self.coils.num_coils()
    }

    /// Total count of complex scalar measurements over all frames and coils.
    pub fn total_samples(&self) -> usize {
        self.frames.iter().map(|f| f.samples.len()).sum()
    }

    pub fn operator(&self) -> EncodingOperator {
        EncodingOperator::new(self.grid_shape.0, self.grid_shape.1)
    }

    /// Zero-filled reconstruction: the adjoint applied frame by frame.
    pub fn zero_filled(&self) -> Result<Array3<Complex64>> {
        let op = self.operator();
        let (h, w) = self.grid_shape;
        let mut out = Array3::from_elem((self.num_frames(), h, w), ZERO);
        for (i, f) in self.frames.iter().enumerate() {
            let img = op.adjoint(f.samples.view(), &f.positions, &self.coils)?;
            out.index_axis_mut(Axis(0), i).assign(&img);
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let (h, w) = self.grid_shape;
        let nc = self.num_coils();
        let mut a = Archive::new("measurement_set");
        a.set_meta(json!({
            "grid_shape": [h, w],
            "num_coils": nc,
            "num_frames": self.num_frames(),
            "noise_sigma": self.noise_sigma,
            "frame_indices": self.frames.iter().map(|f| f.pattern.frame_index).collect::<Vec<_>>(),
        }));
        a.push_complex(
            "coil_maps",
            &[nc, h, w],
            self.coils.maps.as_slice().unwrap(),
        )?;
        for (i, f) in self.frames.iter().enumerate() {
            a.push_f64(
                &format!("frame{i}.lines"),
                &[f.pattern.lines.len()],
                f.pattern.lines.clone(),
            )?;
            let mask_idx = f.pattern.positions();
            a.push_u32(&format!("frame{i}.mask"), &[mask_idx.len()], mask_idx)?;
            a.push_u32(
                &format!("frame{i}.positions"),
                &[f.positions.len()],
                f.positions.clone(),
            )?;
            let samples: Vec<Complex64> = f.samples.iter().copied().collect();
            a.push_complex(
                &format!("frame{i}.samples"),
                &[nc, f.positions.len()],
                &samples,
            )?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("measurement_set")?;
        let meta = a.meta();
        let bad = |what: &str| ReconError::Format(format!("measurement_set header: {what}"));
        let grid = meta["grid_shape"]
            .as_array()
            .ok_or_else(|| bad("grid_shape"))?;
        let h = grid
            .first()
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("grid_shape"))? as usize;
        let w = grid
            .get(1)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("grid_shape"))? as usize;
        let nc = meta["num_coils"].as_u64().ok_or_else(|| bad("num_coils"))? as usize;
        let n = meta["num_frames"]
            .as_u64()
            .ok_or_else(|| bad("num_frames"))? as usize;
        let noise_sigma = meta["noise_sigma"]
            .as_f64()
            .ok_or_else(|| bad("noise_sigma"))?;
        let frame_indices = meta["frame_indices"]
            .as_array()
            .ok_or_else(|| bad("frame_indices"))?;
        let maps = Array3::from_shape_vec((nc, h, w), a.complex("coil_maps")?)
            .map_err(|e| ReconError::Format(e.to_string()))?;
        let coils = CoilSensitivities::new(maps)?;
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            let lines = a.f64(&format!("frame{i}.lines"))?.to_vec();
            let mut mask = Array2::from_elem((h, w), false);
            for &p in a.u32(&format!("frame{i}.mask"))? {
                *mask
                    .as_slice_mut()
                    .unwrap()
                    .get_mut(p as usize)
                    .ok_or_else(|| bad("mask index"))? = true;
            }
            let positions = a.u32(&format!("frame{i}.positions"))?.to_vec();
            let samples = Array2::from_shape_vec(
                (nc, positions.len()),
                a.complex(&format!("frame{i}.samples"))?,
            )
            .map_err(|e| ReconError::Format(e.to_string()))?;
            let frame_index = frame_indices
                .get(i)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("frame_indices"))? as usize;
            frames.push(MeasurementFrame {
                pattern: SamplingPattern {
                    frame_index,
                    mask,
                    lines,
                },
                positions,
                samples,
            });
        }
        Self::new(frames, noise_sigma, coils)
    }
}

/// Merges consecutive groups of `group_size` frames into one frame each.
///
/// The merged mask is the union of the group's masks, angle lists are
/// concatenated, and every originating sample is retained (so positions
/// sampled by several frames appear several times).
pub fn bin_measurements(mset: &MeasurementSet, group_size: usize) -> Result<MeasurementSet> {
    if mset.frames.is_empty() {
        return Err(ReconError::Empty(
            "cannot bin an empty measurement set".into(),
        ));
    }
    if group_size == 0 {
        return Err(ReconError::InvalidConfig(
            "group_size must be at least 1".into(),
        ));
    }
    let nc = mset.num_coils();
    let frames = mset
        .frames
        .chunks(group_size)
        .enumerate()
        .map(|(g, group)| {
            let mut mask = group[0].pattern.mask.clone();
            let mut lines = Vec::new();
            let mut positions = Vec::new();
            for f in group {
                mask.zip_mut_with(&f.pattern.mask, |a, &b| *a |= b);
                lines.extend_from_slice(&f.pattern.lines);
                positions.extend_from_slice(&f.positions);
            }
            let mut samples = Array2::from_elem((nc, positions.len()), ZERO);
            let mut col = 0;
            for f in group {
                let m = f.positions.len();
                samples
                    .slice_mut(ndarray::s![.., col..col + m])
                    .assign(&f.samples);
                col += m;
            }
            MeasurementFrame {
                pattern: SamplingPattern {
                    frame_index: if group_size == 1 {
                        group[0].pattern.frame_index
                    } else {
                        g
                    },
                    mask,
                    lines,
                },
                positions,
                samples,
            }
        })
        .collect();
    Ok(MeasurementSet {
        frames,
        noise_sigma: mset.noise_sigma,
        grid_shape: mset.grid_shape,
        coils: mset.coils.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
    }

    /// Bresenham-free reference rasterizer: for every grid pixel, checks
    /// whether it is the rounded point of the line at its own major coordinate.
    fn oracle_line_pixels(h: usize, w: usize, angle: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (s, c) = angle.sin_cos();
        for r in 0..h {
            for col in 0..w {
                let ky = r as f64 - (h / 2) as f64;
                let kx = col as f64 - (w / 2) as f64;
                let hit = if c.abs() >= s.abs() {
                    let exact = kx * s / c;
                    let d = (ky - exact).abs();
                    d < 0.5 || (d == 0.5 && ky.abs() < exact.abs())
                } else {
                    let exact = ky * c / s;
                    let d = (kx - exact).abs();
                    d < 0.5 || (d == 0.5 && kx.abs() < exact.abs())
                };
                if hit {
                    out.push((r, col));
                }
            }
        }
        out
    }

    #[test]
    fn golden_angle_value() {
        assert!((GOLDEN_ANGLE.to_degrees() - 111.246).abs() < 1e-3);
    }

    #[test]
    fn rounding_is_symmetric() {
        for v in [0.5, 1.5, 2.49, 2.51, -0.5, -1.5, 3.0] {
            assert_eq!(round_half_toward_zero(-v), -round_half_toward_zero(v));
        }
        assert_eq!(round_half_toward_zero(0.5), 0);
        assert_eq!(round_half_toward_zero(1.5), 1);
        assert_eq!(round_half_toward_zero(1.51), 2);
    }

    #[test]
    fn rasterizer_matches_oracle() {
        for k in 0..40 {
            let angle = (k as f64 * GOLDEN_ANGLE).rem_euclid(PI);
            let mut got = rasterize_line(64, 64, angle);
            got.sort();
            assert_eq!(got, oracle_line_pixels(64, 64, angle), "angle {angle}");
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(make_golden_angle_patterns((6, 6), 1, 1).is_err());
        assert!(make_golden_angle_patterns((64, 63), 1, 1).is_err());
        assert!(make_golden_angle_patterns((64, 64), 0, 1).is_err());
        assert!(make_golden_angle_patterns((64, 64), 1, 0).is_err());
    }

    #[test]
    fn frames_use_successive_golden_angles() {
        let p = make_golden_angle_patterns((64, 64), 2, 6).unwrap();
        assert_ne!(p[0].mask, p[1].mask);
        assert_eq!(p[0].lines.len(), 6);
        for (k, pat) in p.iter().enumerate() {
            for (j, &a) in pat.lines.iter().enumerate() {
                let want = ((k * 6 + j) as f64 * GOLDEN_ANGLE).rem_euclid(PI);
                assert_eq!(a, want);
            }
        }
        // each frame mask is the union of exactly its six rasterized lines
        for pat in &p {
            let mut m = Array2::from_elem((64, 64), false);
            for &a in &pat.lines {
                for (r, c) in oracle_line_pixels(64, 64, a) {
                    m[[r, c]] = true;
                }
            }
            assert_eq!(m, pat.mask);
        }
    }

    #[test]
    fn sampling_fraction_for_six_lines() {
        let p = make_golden_angle_patterns((64, 64), 150, 6).unwrap();
        for pat in &p {
            // independent count from the brute-force rasterizer
            let mut m = Array2::from_elem((64, 64), false);
            for &a in &pat.lines {
                for (r, c) in oracle_line_pixels(64, 64, a) {
                    m[[r, c]] = true;
                }
            }
            let count = m.iter().filter(|&&b| b).count();
            assert_eq!(count, pat.num_sampled());
            let frac = count as f64 / 4096.0;
            assert!((0.05..=0.35).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn dense_line_limit_covers_grid() {
        // 64 lines rasterized one pixel per major-axis step cannot cover a
        // 64x64 grid (edge columns get at most one pixel per line); the
        // dense limit is reached around 4*H lines.
        let sparse = make_golden_angle_patterns((64, 64), 1, 64).unwrap();
        assert!(sparse[0].sampling_fraction() > 0.65);
        let dense = make_golden_angle_patterns((64, 64), 1, 256).unwrap();
        assert!(dense[0].sampling_fraction() >= 0.95);
    }

    #[test]
    fn union_over_consecutive_frames_covers_grid() {
        let frames = (PI / GOLDEN_ANGLE * 64.0).ceil() as usize;
        let p = make_golden_angle_patterns((64, 64), frames, 6).unwrap();
        let mut union = Array2::from_elem((64, 64), false);
        for pat in &p {
            union.zip_mut_with(&pat.mask, |a, &b| *a |= b);
        }
        let frac = union.iter().filter(|&&b| b).count() as f64 / 4096.0;
        assert!(frac >= 0.95, "coverage {frac}");
    }

    #[test]
    fn patterns_are_reproducible() {
        let a = make_golden_angle_patterns((32, 32), 5, 3).unwrap();
        let b = make_golden_angle_patterns((32, 32), 5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_image_gives_zero_samples() {
        let p = &make_golden_angle_patterns((16, 16), 1, 3).unwrap()[0];
        let coils = CoilSensitivities::unit(16, 16);
        let y = apply_forward(Array2::from_elem((16, 16), ZERO).view(), p, &coils).unwrap();
        assert!(y.iter().all(|v| *v == ZERO));
        let x = apply_adjoint(Array2::from_elem(y.dim(), ZERO).view(), p, &coils).unwrap();
        assert!(x.iter().all(|v| *v == ZERO));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let (h, w) = (16, 8);
        let mut img = Array2::from_elem((h, w), ZERO);
        img[[h / 2, w / 2]] = Complex64::new(1.0, 0.0);
        let pattern = SamplingPattern {
            frame_index: 0,
            mask: Array2::from_elem((h, w), true),
            lines: vec![],
        };
        let y = apply_forward(img.view(), &pattern, &CoilSensitivities::unit(h, w)).unwrap();
        let expect = 1.0 / ((h * w) as f64).sqrt();
        for v in y.iter() {
            assert!((v.norm() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_full_dft_then_gather() {
        let (h, w) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, h, w);
        let p = &make_golden_angle_patterns((h, w), 3, 6).unwrap()[2];
        let y = apply_forward(img.view(), p, &CoilSensitivities::unit(h, w)).unwrap();
        // naive O(N^4) unitary DFT in centered layout
        let scale = 1.0 / ((h * w) as f64).sqrt();
        let pos = p.positions();
        for (v, &q) in y.row(0).iter().zip(&pos) {
            let (r, c) = (q as usize / w, q as usize % w);
            let (ky, kx) = (r as f64 - (h / 2) as f64, c as f64 - (w / 2) as f64);
            let mut acc = ZERO;
            for yy in 0..h {
                for xx in 0..w {
                    let phase = -2.0 * PI * (ky * yy as f64 / h as f64 + kx * xx as f64 / w as f64);
                    acc += img[[yy, xx]] * Complex64::from_polar(1.0, phase);
                }
            }
            assert!((acc * scale - v).norm() < 1e-10);
        }
    }

    #[test]
    fn adjoint_identity_multicoil() {
        let (h, w) = (32, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coils = CoilSensitivities::gaussian_bumps(h, w, 4).unwrap();
        let op = EncodingOperator::new(h, w);
        for trial in 0..20 {
            let p = &make_golden_angle_patterns((h, w), trial + 1, 5).unwrap()[trial];
            let pos = p.positions();
            let x = random_image(&mut rng, h, w);
            let y = Array2::from_shape_fn((4, pos.len()), |_| {
                Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            });
            let ax = op.forward(x.view(), &pos, &coils).unwrap();
            let ahy = op.adjoint(y.view(), &pos, &coils).unwrap();
            let lhs = inner(ax.as_slice().unwrap(), y.as_slice().unwrap());
            let rhs = inner(x.as_slice().unwrap(), ahy.as_slice().unwrap());
            let nx = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!((lhs - rhs).norm() / (nx * ny) < 1e-10);
        }
    }

    #[test]
    fn full_mask_round_trip() {
        let (h, w) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, h, w);
        let p = SamplingPattern {
            frame_index: 0,
            mask: Array2::from_elem((h, w), true),
            lines: vec![],
        };
        let coils = CoilSensitivities::unit(h, w);
        let y = apply_forward(x.view(), &p, &coils).unwrap();
        let back = apply_adjoint(y.view(), &p, &coils).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let p = &make_golden_angle_patterns((16, 16), 1, 2).unwrap()[0];
        let coils = CoilSensitivities::unit(16, 16);
        assert!(apply_forward(Array2::from_elem((8, 16), ZERO).view(), p, &coils).is_err());
        assert!(apply_adjoint(Array2::from_elem((1, 3), ZERO).view(), p, &coils).is_err());
        let wrong = CoilSensitivities::unit(8, 8);
        assert!(apply_forward(Array2::from_elem((16, 16), ZERO).view(), p, &wrong).is_err());
    }

    #[test]
    fn coil_maps_must_be_positive() {
        let mut maps = Array3::from_elem((2, 8, 8), Complex64::new(1.0, 0.0));
        maps[[0, 3, 3]] = ZERO;
        maps[[1, 3, 3]] = ZERO;
        assert!(CoilSensitivities::new(maps).is_err());
        assert!(CoilSensitivities::gaussian_bumps(16, 16, 4).is_ok());
    }

    fn toy_set(n: usize) -> MeasurementSet {
        let (h, w) = (16, 16);
        let coils = CoilSensitivities::gaussian_bumps(h, w, 2).unwrap();
        let op = EncodingOperator::new(h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = make_golden_angle_patterns((h, w), n, 2)
            .unwrap()
            .into_iter()
            .map(|pattern| {
                let positions = pattern.positions();
                let x = random_image(&mut rng, h, w);
                let samples = op.forward(x.view(), &positions, &coils).unwrap();
                MeasurementFrame {
                    pattern,
                    positions,
                    samples,
                }
            })
            .collect();
        MeasurementSet::new(frames, 0.0, coils).unwrap()
    }

    #[test]
    fn binning_group_sizes() {
        let set = toy_set(10);
        assert_eq!(bin_measurements(&set, 1).unwrap(), set);

        let binned = bin_measurements(&set, 3).unwrap();
        assert_eq!(binned.num_frames(), 4);
        let sizes: Vec<usize> = binned
            .frames
            .iter()
            .map(|f| f.pattern.lines.len() / 2)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(binned.total_samples(), set.total_samples());
        binned.validate().unwrap();

        let all = bin_measurements(&set, 10).unwrap();
        assert_eq!(all.num_frames(), 1);
        let mut union = Array2::from_elem((16, 16), false);
        for f in &set.frames {
            union.zip_mut_with(&f.pattern.mask, |a, &b| *a |= b);
        }
        assert_eq!(all.frames[0].pattern.mask, union);
        assert!(bin_measurements(&set, 0).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let set = bin_measurements(&toy_set(5), 2).unwrap();
        let bytes = set.to_archive().unwrap().to_bytes().unwrap();
        let back = MeasurementSet::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_archive().unwrap().to_bytes().unwrap(), bytes);
    }
}

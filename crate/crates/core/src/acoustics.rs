//! Shoebox room acoustics: Sabine absorption, image-source RIR synthesis,
//! near/far source placement and convolution.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Microphone height; the floor-plan position is the room center.
pub const MIC_HEIGHT: f64 = 1.5;
pub const DEFAULT_MAX_ORDER: u32 = 10;
pub const DEFAULT_HIGHPASS_HZ: f64 = 20.0;
const SINC_TAPS: i64 = 81;
const WALL_MARGIN: f64 = 0.05;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub rt60: f64,
    pub mic_position: Point,
}

impl RoomSpec {
    /// Room with the microphone at the floor-plan center, [`MIC_HEIGHT`] up.
    pub fn centered(length: f64, width: f64, height: f64, rt60: f64) -> Self {
        Self { length, width, height, rt60, mic_position: [length / 2.0, width / 2.0, MIC_HEIGHT] }
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn surface(&self) -> f64 {
        2.0 * (self.length * self.width + self.length * self.height + self.width * self.height)
    }

    pub fn dims(&self) -> Point {
        [self.length, self.width, self.height]
    }

    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        p.iter().zip(self.dims()).all(|(&c, d)| c > margin && c < d - margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldClass {
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub field_class: FieldClass,
    /// Horizontal mic-to-source distance in meters.
    pub distance: f64,
    pub azimuth: f64,
    pub source_height: f64,
    pub position: Point,
}

/// Uniform sampling ranges for one reverberant collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainRanges {
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub rt60: (f64, f64),
    pub source_height: (f64, f64),
    pub far: (f64, f64),
    pub near: (f64, f64),
}

impl DomainRanges {
    /// Reverberant LibriSpeech-style rooms.
    pub const SLIB: DomainRanges = DomainRanges {
        length: (9.0, 11.0),
        width: (9.0, 11.0),
        height: (2.6, 3.5),
        rt60: (0.3, 0.6),
        source_height: (1.5, 2.0),
        far: (1.7, 3.0),
        near: (0.2, 0.6),
    };

    /// Reverberant VoxForge-style rooms.
    pub const SVOX: DomainRanges = DomainRanges {
        length: (8.0, 10.0),
        width: (8.0, 10.0),
        height: (2.75, 3.25),
        rt60: (0.4, 0.6),
        source_height: (1.6, 1.9),
        far: (1.5, 2.5),
        near: (0.3, 0.5),
    };

    pub fn distance_range(&self, class: FieldClass) -> (f64, f64) {
        match class {
            FieldClass::Near => self.near,
            FieldClass::Far => self.far,
        }
    }

    pub fn sample_room<R: Rng + ?Sized>(&self, rng: &mut R) -> RoomSpec {
        RoomSpec::centered(
            uniform(rng, self.length),
            uniform(rng, self.width),
            uniform(rng, self.height),
            uniform(rng, self.rt60),
        )
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Result of the Sabine conversion; `clamped` records the warning branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Absorption {
    pub alpha: f64,
    pub clamped: bool,
}

pub const MAX_ABSORPTION: f64 = 0.99;

/// Uniform wall absorption from Sabine's formula, `0.161 V / (S rt60)`.
pub fn sabine_absorption(room: &RoomSpec) -> Result<Absorption> {
    if !(room.rt60 > 0.0) {
        return Err(Error::Config(format!("rt60 must be positive, got {}", room.rt60)));
    }
    let alpha = 0.161 * room.volume() / (room.surface() * room.rt60);
    if alpha >= 1.0 {
        log::warn!(
            "rt60 {:.3} s too short for a {:.1} m^3 room; absorption clamped to {}",
            room.rt60,
            room.volume(),
            MAX_ABSORPTION
        );
        return Ok(Absorption { alpha: MAX_ABSORPTION, clamped: true });
    }
    Ok(Absorption { alpha, clamped: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl Rir {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    pub fn peak_index(&self) -> usize {
        self.taps
            .iter()
            .enumerate()
            .fold((0, 0.0), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
            .0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsmOptions {
    pub max_order: u32,
    pub highpass_hz: Option<f64>,
    /// Overrides the Sabine absorption when set.
    pub absorption: Option<f64>,
}

impl Default for IsmOptions {
    fn default() -> Self {
        Self { max_order: DEFAULT_MAX_ORDER, highpass_hz: Some(DEFAULT_HIGHPASS_HZ), absorption: None }
    }
}

fn image_coord(n: i64, src: f64, len: f64) -> f64 {
    if n % 2 == 0 {
        n as f64 * len + src
    } else {
        (n + 1) as f64 * len - src
    }
}

fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Image-source RIR with the default high-pass and Sabine absorption.
pub fn image_source_rir(room: &RoomSpec, src: &SourcePlacement, max_order: u32, fs: u32) -> Result<Rir> {
    image_source_rir_with(room, &src.position, fs, &IsmOptions { max_order, ..IsmOptions::default() })
}

pub fn image_source_rir_with(room: &RoomSpec, src: &Point, fs: u32, opts: &IsmOptions) -> Result<Rir> {
    if !room.contains(src, 0.0) {
        return Err(Error::Config(format!("source {src:?} outside room")));
    }
    if !room.contains(&room.mic_position, 0.0) {
        return Err(Error::Config(format!("microphone {:?} outside room", room.mic_position)));
    }
    let alpha = match opts.absorption {
        Some(a) => a.clamp(0.0, 1.0),
        None => sabine_absorption(room)?.alpha,
    };
    let beta = (1.0 - alpha).max(0.0).sqrt();
    let fs_f = fs as f64;
    let order = opts.max_order as i64;
    let dims = room.dims();
    let mic = room.mic_position;
    let half = SINC_TAPS / 2;

    let mut images: Vec<(f64, f64)> = Vec::new();
    for nx in -order..=order {
        let rx = nx.abs();
        for ny in -(order - rx)..=(order - rx) {
            let ry = ny.abs();
            for nz in -(order - rx - ry)..=(order - rx - ry) {
                let hits = (rx + ry + nz.abs()) as i32;
                let amp_refl = if hits == 0 { 1.0 } else { beta.powi(hits) };
                if amp_refl == 0.0 {
                    continue;
                }
                let p = [
                    image_coord(nx, src[0], dims[0]),
                    image_coord(ny, src[1], dims[1]),
                    image_coord(nz, src[2], dims[2]),
                ];
                let d = distance(&p, &mic);
                images.push((d / SPEED_OF_SOUND * fs_f, amp_refl / (4.0 * PI * d)));
            }
        }
    }
    let max_delay = images.iter().map(|(t, _)| *t).fold(0.0, f64::max);
    let len = max_delay.ceil() as usize + half as usize + 2;
    let mut taps = vec![0.0; len];
    for (delay, amp) in images {
        let center = delay.round() as i64;
        for k in (center - half)..=(center + half) {
            if k < 0 || k as usize >= len {
                continue;
            }
            let x = k as f64 - delay;
            let window = 0.5 * (1.0 + (2.0 * PI * x / SINC_TAPS as f64).cos());
            if x.abs() > (SINC_TAPS / 2) as f64 + 0.5 {
                continue;
            }
            taps[k as usize] += amp * sinc(x) * window;
        }
    }
    if let Some(fc) = opts.highpass_hz {
        highpass_in_place(&mut taps, fc, fs_f);
    }
    if !taps.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("RIR taps".into()));
    }
    Ok(Rir { taps, sample_rate: fs })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Second-order Butterworth high-pass (bilinear transform).
fn highpass_in_place(x: &mut [f64], fc: f64, fs: f64) {
    let k = (PI * fc / fs).tan();
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let norm = 1.0 / (1.0 + k / q + k * k);
    let b0 = norm;
    let b1 = -2.0 * norm;
    let b2 = norm;
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - k / q + k * k) * norm;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let x0 = *v;
        let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0;
    }
}

/// Draw a source position of the given field class around the centered mic.
pub fn place_source<R: Rng + ?Sized>(
    room: &RoomSpec,
    field_class: FieldClass,
    ranges: &DomainRanges,
    rng: &mut R,
) -> Result<SourcePlacement> {
    const MAX_REJECTIONS: usize = 100;
    let dist_range = ranges.distance_range(field_class);
    for _ in 0..MAX_REJECTIONS {
        let distance = uniform(rng, dist_range);
        let azimuth = rng.gen_range(0.0..2.0 * PI);
        let source_height = uniform(rng, ranges.source_height);
        let position = [
            room.mic_position[0] + distance * azimuth.cos(),
            room.mic_position[1] + distance * azimuth.sin(),
            source_height,
        ];
        if room.contains(&position, WALL_MARGIN) {
            return Ok(SourcePlacement { field_class, distance, azimuth, source_height, position });
        }
    }
    Err(Error::Config(format!(
        "could not place a {field_class:?} source in a {:.2}x{:.2}x{:.2} m room after {MAX_REJECTIONS} draws",
        room.length, room.width, room.height
    )))
}

/// Linear convolution with `rir`, truncated to the input length.
pub fn spatialize(w: &Waveform, rir: &Rir) -> Result<Waveform> {
    if w.sample_rate != rir.sample_rate {
        return Err(Error::Shape(format!(
            "waveform at {} Hz, RIR at {} Hz",
            w.sample_rate, rir.sample_rate
        )));
    }
    let n = w.len();
    if n == 0 || rir.taps.is_empty() {
        return Ok(Waveform::zeros(n, w.sample_rate));
    }
    let taps = &rir.taps[..rir.taps.len().min(n)];
    let out = if n * taps.len() <= 1 << 16 {
        let mut out = vec![0.0; n];
        for (k, &h) in taps.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            for (o, &s) in out[k..].iter_mut().zip(&w.samples) {
                *o += h * s;
            }
        }
        out
    } else {
        fft_convolve(&w.samples, taps, n)
    };
    Ok(Waveform::new(out, w.sample_rate))
}

fn fft_convolve(a: &[f64], b: &[f64], keep: usize) -> Vec<f64> {
    let size = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let to_buf = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut fa = to_buf(a);
    let mut fb = to_buf(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.iter().take(keep).map(|c| c.re / size as f64).collect()
}

/// Reverberation time from Schroeder backward integration, fitted on the
/// -5 dB to -25 dB stretch of the decay curve and extrapolated to 60 dB.
pub fn schroeder_t60(rir: &Rir) -> Option<f64> {
    let mut edc = vec![0.0; rir.taps.len()];
    let mut acc = 0.0;
    for (i, t) in rir.taps.iter().enumerate().rev() {
        acc += t * t;
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0)?;
    let end = db.iter().position(|&d| d <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    // least-squares slope in dB per sample
    let pts = &db[start..=end];
    let n = pts.len() as f64;
    let mean_x = (pts.len() - 1) as f64 / 2.0;
    let mean_y = pts.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in pts.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    if slope >= 0.0 {
        return None;
    }
    Some(-60.0 / slope / rir.sample_rate as f64)
}

/// On-disk cache of float32 RIR taps keyed by a content hash of the inputs.
#[derive(Debug, Clone)]
pub struct RirCache {
    dir: PathBuf,
}

impl RirCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(room: &RoomSpec, src: &Point, fs: u32, opts: &IsmOptions) -> String {
        let mut h = Sha256::new();
        for v in [room.length, room.width, room.height, room.rt60]
            .iter()
            .chain(room.mic_position.iter())
            .chain(src.iter())
        {
            h.update(v.to_le_bytes());
        }
        h.update(opts.max_order.to_le_bytes());
        h.update(opts.highpass_hz.unwrap_or(-1.0).to_le_bytes());
        h.update(opts.absorption.unwrap_or(-1.0).to_le_bytes());
        h.update(fs.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.f32"))
    }

    pub fn get_or_compute(&self, room: &RoomSpec, src: &Point, fs: u32, opts: &IsmOptions) -> Result<Rir> {
        let path = self.path(&Self::key(room, src, fs, opts));
        if path.exists() {
            return read_taps(&path, fs);
        }
        let rir = image_source_rir_with(room, src, fs, opts)?;
        let bytes: Vec<u8> = rir.taps.iter().flat_map(|&t| (t as f32).to_le_bytes()).collect();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(rir)
    }
}

fn read_taps(path: &Path, fs: u32) -> Result<Rir> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Audio { path: path.to_path_buf(), reason: "truncated tap file".into() });
    }
    let taps = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Rir { taps, sample_rate: fs })
}

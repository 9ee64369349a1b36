//! Pitch-shift augmentation by linear-interpolation resampling.

use rand::Rng;

use crate::audio::{AudioFrame, FrameGeometry, Recording};
use crate::dataset::LabelVector;
use crate::{Error, Result, N_NOTES};

pub const MAX_INTEGRAL: i32 = 5;
pub const MAX_CONTINUOUS: f64 = 0.1;

/// A pitch shift in semitones: an integral part that moves labels and a
/// sub-semitone part that does not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    integral: i32,
    continuous: f64,
}

impl ShiftSpec {
    pub fn new(integral: i32, continuous: f64) -> Result<Self> {
        if integral.abs() > MAX_INTEGRAL {
            return Err(Error::InvalidArgument(format!(
                "integral shift {integral} outside [-{MAX_INTEGRAL}, {MAX_INTEGRAL}]"
            )));
        }
        if !(continuous.abs() <= MAX_CONTINUOUS) {
            return Err(Error::InvalidArgument(format!(
                "continuous shift {continuous} outside [-{MAX_CONTINUOUS}, {MAX_CONTINUOUS}]"
            )));
        }
        Ok(ShiftSpec { integral, continuous })
    }

    pub fn none() -> Self {
        ShiftSpec {
            integral: 0,
            continuous: 0.0,
        }
    }

    pub fn integral(&self) -> i32 {
        self.integral
    }

    pub fn continuous(&self) -> f64 {
        self.continuous
    }

    /// Source samples read per output sample.
    pub fn rate(&self) -> f64 {
        2f64.powf((self.integral as f64 + self.continuous) / 12.0)
    }
}

/// Read `len` samples of `rec` at rate `rate`, anchored so that output
/// position `len/2` lands on source position `center`. Positions outside
/// the recording read as zero.
pub fn resample_window(rec: &Recording, center: f64, len: usize, rate: f64) -> Vec<f64> {
    let start = center - (len / 2) as f64 * rate;
    (0..len)
        .map(|n| {
            let pos = start + n as f64 * rate;
            let base = pos.floor();
            let t = pos - base;
            let i = base as i64;
            let a = rec.at(i);
            if t == 0.0 {
                a
            } else {
                a * (1.0 - t) + rec.at(i + 1) * t
            }
        })
        .collect()
}

/// The frame around `center` with its pitch raised by `shift` semitones.
/// A zero shift reproduces [`crate::audio::extract_frame`] exactly.
pub fn pitch_shift(rec: &Recording, center: usize, geom: &FrameGeometry, shift: ShiftSpec) -> AudioFrame {
    let raw = resample_window(rec, center as f64, geom.frame_len, shift.rate());
    AudioFrame::normalize(raw, rec.id.clone(), center)
}

/// Move every active note up by `integral`, dropping notes that leave 0..=127.
pub fn shift_labels(y: LabelVector, integral: i32) -> LabelVector {
    let mut out = LabelVector::empty();
    for n in y.notes() {
        let m = n as i32 + integral;
        if (0..N_NOTES as i32).contains(&m) {
            out.set(m as u8, true);
        }
    }
    out
}

/// Independent uniform draws of both shift components.
pub fn random_shift<R: Rng + ?Sized>(rng: &mut R) -> ShiftSpec {
    ShiftSpec {
        integral: rng.random_range(-MAX_INTEGRAL..=MAX_INTEGRAL),
        continuous: rng.random_range(-MAX_CONTINUOUS..=MAX_CONTINUOUS),
    }
}

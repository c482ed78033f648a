//! MERL binary BRDF tables and the Rusinkiewicz half/difference parameterization.
//!
//! A MERL file holds three little-endian `i32` dimensions `(90, 90, 180)` followed by
//! `3 * 90 * 90 * 180` little-endian `f64` samples, all red values first, then green,
//! then blue. Within a channel block the sample for `(i_theta_h, i_theta_d, i_phi_d)`
//! lives at `(i_theta_h * 90 + i_theta_d) * 180 + i_phi_d`.
//!
//! The half-vector elevation uses the quadratic index mapping
//! `theta_h = 90 deg * (i / 90)^2`, which is the sampling used by the public dataset.
//! Swap [`theta_h_from_index`] / [`theta_h_to_index`] together if a dataset variant uses
//! a different convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const N_THETA_H: usize = 90;
pub const N_THETA_D: usize = 90;
pub const N_PHI_D: usize = 180;
pub const SAMPLES_PER_CHANNEL: usize = N_THETA_H * N_THETA_D * N_PHI_D;
pub const SAMPLE_COUNT: usize = 3 * SAMPLES_PER_CHANNEL;

/// Per-channel factor converting stored values to reflectance (red, green, blue).
pub const MERL_SCALES: [f64; 3] = [1.0 / 1500.0, 1.5 / 1500.0, 1.66 / 1500.0];

/// A measured isotropic BRDF on the 90 x 90 x 180 half/difference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MerlBrdf {
    pub name: String,
    /// Channel-major samples, length [`SAMPLE_COUNT`].
    pub samples: Vec<f64>,
}

impl MerlBrdf {
    pub fn new(name: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        let brdf = MerlBrdf {
            name: name.into(),
            samples,
        };
        brdf.validate()?;
        Ok(brdf)
    }

    /// A table with every entry set to `value` in all three channels.
    pub fn constant(name: impl Into<String>, value: f64) -> Self {
        MerlBrdf {
            name: name.into(),
            samples: vec![value; SAMPLE_COUNT],
        }
    }

    pub fn resolution(&self) -> (usize, usize, usize) {
        (N_THETA_H, N_THETA_D, N_PHI_D)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != SAMPLE_COUNT {
            return Err(Error::Precondition(format!(
                "MERL table must hold {} samples, found {}",
                SAMPLE_COUNT,
                self.samples.len()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, channel: usize, ih: usize, id: usize, ip: usize) -> f64 {
        self.samples[sample_index(channel, ih, id, ip)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, ih: usize, id: usize, ip: usize, value: f64) {
        self.samples[sample_index(channel, ih, id, ip)] = value;
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.samples[channel * SAMPLES_PER_CHANNEL..(channel + 1) * SAMPLES_PER_CHANNEL]
    }
}

#[inline]
pub fn sample_index(channel: usize, ih: usize, id: usize, ip: usize) -> usize {
    channel * SAMPLES_PER_CHANNEL + (ih * N_THETA_D + id) * N_PHI_D + ip
}

/// Reads a MERL binary file; the material name is the file stem.
pub fn read_merl(path: impl AsRef<Path>) -> Result<MerlBrdf> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = File::open(path)?;
    read_merl_from(BufReader::new(file), name)
}

pub fn read_merl_from(mut reader: impl Read, name: impl Into<String>) -> Result<MerlBrdf> {
    let mut dims = [0i32; 3];
    reader.read_i32_into::<LittleEndian>(&mut dims)?;
    if dims != [N_THETA_H as i32, N_THETA_D as i32, N_PHI_D as i32] {
        return Err(Error::Format(format!(
            "expected dimensions (90, 90, 180), found ({}, {}, {})",
            dims[0], dims[1], dims[2]
        )));
    }
    let mut samples = vec![0.0f64; SAMPLE_COUNT];
    reader.read_f64_into::<LittleEndian>(&mut samples)?;
    Ok(MerlBrdf {
        name: name.into(),
        samples,
    })
}

pub fn write_merl(brdf: &MerlBrdf, path: impl AsRef<Path>) -> Result<()> {
    brdf.validate()?;
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write_merl_to(brdf, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn write_merl_to(brdf: &MerlBrdf, mut writer: impl Write) -> Result<()> {
    brdf.validate()?;
    for dim in [N_THETA_H, N_THETA_D, N_PHI_D] {
        writer.write_i32::<LittleEndian>(dim as i32)?;
    }
    for &v in &brdf.samples {
        writer.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Half/difference angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RusinkiewiczAngles {
    pub theta_h: f64,
    pub theta_d: f64,
    pub phi_d: f64,
}

impl RusinkiewiczAngles {
    pub fn is_in_range(&self) -> bool {
        (0.0..90.0).contains(&self.theta_h)
            && (0.0..90.0).contains(&self.theta_d)
            && (0.0..180.0).contains(&self.phi_d)
    }
}

pub type Vec3 = [f64; 3];

/// Incident and outgoing unit directions in the local frame with normal `(0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionPair {
    pub incident: Vec3,
    pub outgoing: Vec3,
}

#[inline]
pub fn theta_h_from_index(i: usize) -> f64 {
    let t = i as f64 / N_THETA_H as f64;
    90.0 * t * t
}

/// Nearest quadratic bin for a half-vector elevation in degrees.
#[inline]
pub fn theta_h_to_index(theta_h: f64) -> usize {
    if theta_h <= 0.0 {
        return 0;
    }
    let idx = ((theta_h / 90.0).sqrt() * N_THETA_H as f64).round() as usize;
    idx.min(N_THETA_H - 1)
}

pub fn index_to_angles(ih: usize, id: usize, ip: usize) -> Result<RusinkiewiczAngles> {
    if ih >= N_THETA_H || id >= N_THETA_D || ip >= N_PHI_D {
        return Err(Error::Bounds(format!(
            "({ih}, {id}, {ip}) outside (90, 90, 180)"
        )));
    }
    Ok(RusinkiewiczAngles {
        theta_h: theta_h_from_index(ih),
        theta_d: 90.0 * id as f64 / N_THETA_D as f64,
        phi_d: 180.0 * ip as f64 / N_PHI_D as f64,
    })
}

/// Nearest table bin for a set of angles (angles outside the table are clamped,
/// `phi_d` wraps with period 180 degrees).
pub fn angles_to_index(a: &RusinkiewiczAngles) -> (usize, usize, usize) {
    let ih = theta_h_to_index(a.theta_h);
    let id = (a.theta_d.max(0.0).round() as usize).min(N_THETA_D - 1);
    let ip = (a.phi_d.rem_euclid(180.0).round() as usize) % N_PHI_D;
    (ih, id, ip)
}

#[inline]
fn rotate_y(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [v[0] * c + v[2] * s, v[1], -v[0] * s + v[2] * c]
}

#[inline]
fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

#[inline]
pub fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Builds the direction pair for a set of angles, with the half vector at azimuth 0.
/// Returns `None` when either direction lies below the horizon.
pub fn angles_to_directions(a: &RusinkiewiczAngles) -> Option<DirectionPair> {
    let th = a.theta_h.to_radians();
    let td = a.theta_d.to_radians();
    let pd = a.phi_d.to_radians();
    let (st, ct) = td.sin_cos();
    let diff = [st * pd.cos(), st * pd.sin(), ct];
    let mirrored = [-diff[0], -diff[1], diff[2]];
    let incident = rotate_y(diff, th);
    let outgoing = rotate_y(mirrored, th);
    if incident[2] < 0.0 || outgoing[2] < 0.0 {
        return None;
    }
    Some(DirectionPair { incident, outgoing })
}

/// Inverse of [`angles_to_directions`] for arbitrary directions in the local frame.
pub fn directions_to_angles(incident: Vec3, outgoing: Vec3) -> RusinkiewiczAngles {
    let half = normalize([
        incident[0] + outgoing[0],
        incident[1] + outgoing[1],
        incident[2] + outgoing[2],
    ]);
    let theta_h = half[2].clamp(-1.0, 1.0).acos();
    let phi_h = half[1].atan2(half[0]);
    let diff = rotate_y(rotate_z(incident, -phi_h), -theta_h);
    let theta_d = diff[2].clamp(-1.0, 1.0).acos();
    let mut phi_d = diff[1].atan2(diff[0]);
    if phi_d < 0.0 {
        phi_d += std::f64::consts::PI;
    }
    RusinkiewiczAngles {
        theta_h: theta_h.to_degrees(),
        theta_d: theta_d.to_degrees(),
        phi_d: phi_d.to_degrees(),
    }
}

/// Whether both directions of bin `(ih, id, ip)` lie on or above the horizon.
pub fn bin_above_horizon(ih: usize, id: usize, ip: usize) -> bool {
    static MASK: OnceLock<Vec<bool>> = OnceLock::new();
    let mask = MASK.get_or_init(|| {
        let mut m = vec![false; SAMPLES_PER_CHANNEL];
        for ih in 0..N_THETA_H {
            for id in 0..N_THETA_D {
                for ip in 0..N_PHI_D {
                    let a = index_to_angles(ih, id, ip).expect("in range");
                    m[(ih * N_THETA_D + id) * N_PHI_D + ip] = angles_to_directions(&a).is_some();
                }
            }
        }
        m
    });
    mask[(ih * N_THETA_D + id) * N_PHI_D + ip]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub rgb: [f64; 3],
    pub valid: bool,
}

impl Lookup {
    const INVALID: Lookup = Lookup {
        rgb: [0.0; 3],
        valid: false,
    };
}

/// Nearest-bin evaluation, scaled to reflectance with [`MERL_SCALES`].
/// Negative stored entries evaluate to zero in their channel.
pub fn brdf_lookup(brdf: &MerlBrdf, incident: Vec3, outgoing: Vec3) -> Lookup {
    if incident[2] < 0.0 || outgoing[2] < 0.0 {
        return Lookup::INVALID;
    }
    let angles = directions_to_angles(incident, outgoing);
    let (ih, id, ip) = angles_to_index(&angles);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let v = brdf.get(c, ih, id, ip);
        if v >= 0.0 {
            *out = v * MERL_SCALES[c];
        }
    }
    Lookup { rgb, valid: true }
}

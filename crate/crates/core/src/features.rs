//! Per-frame observations: keypoints with binary descriptors and instance
//! detections with their fitted ellipses.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::{fit_ellipse, BBox, Ellipse2D, GeometryError, Intrinsics};

/// 256-bit binary descriptor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub const BITS: usize = 256;

    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }

    /// Bitwise majority over a set of descriptors; ties resolve to 0.
    pub fn majority<'a>(descs: impl IntoIterator<Item = &'a Descriptor>) -> Option<Descriptor> {
        let mut counts = [0u32; Self::BITS];
        let mut n = 0u32;
        for d in descs {
            n += 1;
            for (i, c) in counts.iter_mut().enumerate() {
                *c += d.bit(i) as u32;
            }
        }
        if n == 0 {
            return None;
        }
        let mut out = Descriptor::default();
        for (i, &c) in counts.iter().enumerate() {
            if 2 * c > n {
                out.flip(i);
            }
        }
        Some(out)
    }
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Descriptor({self})")
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.0 {
            write!(f, "{w:016x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("descriptor must be 64 hex digits")]
pub struct ParseDescriptorError;

impl FromStr for Descriptor {
    type Err = ParseDescriptorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(ParseDescriptorError);
        }
        let mut words = [0u64; 4];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16).map_err(|_| ParseDescriptorError)?;
        }
        Ok(Descriptor(words))
    }
}

impl Serialize for Descriptor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Descriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A feature point in an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    pub descriptor: Descriptor,
    /// Measured depth, when the sensor provides one.
    pub depth: Option<f64>,
}

/// Which ellipse represents a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationModel {
    /// Axis-aligned ellipse inscribed in the detection box.
    BoxInscribed,
    /// Ellipse fitted to the instance contour.
    #[default]
    ContourFit,
}

/// An instance detection with its fitted ellipse.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category: u32,
    pub confidence: f64,
    pub contour: Vec<Vector2<f64>>,
    pub ellipse: Ellipse2D,
    pub bbox: BBox,
    /// Indices of frame keypoints lying inside the instance region.
    pub keypoint_indices: Vec<usize>,
    /// Fraction of contour points touching the image border.
    pub border_fraction: f64,
}

/// Contour points closer than this to the image edge count as truncated.
pub const BORDER_MARGIN_PX: f64 = 2.0;

impl Detection {
    /// Fits the ellipse and collects the keypoints that fall inside the contour.
    pub fn from_contour(
        category: u32,
        confidence: f64,
        contour: Vec<Vector2<f64>>,
        keypoints: &[Keypoint],
        k: &Intrinsics,
    ) -> Result<Self, GeometryError> {
        let ellipse = fit_ellipse(&contour)?;
        let bbox = BBox::from_points(&contour).ok_or(GeometryError::TooFewPoints(0))?;
        let keypoint_indices = keypoints
            .iter()
            .enumerate()
            .filter(|(_, kp)| point_in_polygon(&kp.pixel, &contour))
            .map(|(i, _)| i)
            .collect();
        let touching = contour.iter().filter(|p| !k.contains(p, BORDER_MARGIN_PX)).count();
        Ok(Self {
            category,
            confidence,
            border_fraction: touching as f64 / contour.len() as f64,
            contour,
            ellipse,
            bbox,
            keypoint_indices,
        })
    }

    pub fn observation_ellipse(&self, model: ObservationModel) -> Ellipse2D {
        match model {
            ObservationModel::ContourFit => self.ellipse,
            ObservationModel::BoxInscribed => Ellipse2D::inscribed_in(&self.bbox).unwrap_or(self.ellipse),
        }
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

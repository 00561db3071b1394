//! Raster value types and label conventions.
//!
//! Every image carried through the pipeline is a [`RasterImage`]: row-major,
//! channel-interleaved `f64` samples in `[0, 1]`. Eight-bit values only appear
//! at file boundaries (see [`crate::data`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec. 601 luma weights for R, G and B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Dense multi-channel raster with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    /// Wraps `data` after checking its length and that every sample is finite and in `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster of {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("raster sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a raster by clamping every value into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "raster length mismatch");
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::from_clamped(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::from_clamped(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies channel `c` out as a single-channel image.
    pub fn channel(&self, c: usize) -> RasterImage {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Planar copy of channel `c` (row-major, `width * height` samples).
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.channel(c).data
    }

    /// Interleaves equally sized single-channel planes into one image.
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> RasterImage {
        let channels = planes.len();
        let mut data = vec![0.0; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            assert_eq!(plane.len(), width * height);
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = clamp_unit(*v);
            }
        }
        RasterImage {
            width,
            height,
            channels,
            data,
        }
    }

    /// Concatenates images along the channel axis, in order.
    pub fn stack(parts: &[&RasterImage]) -> Result<RasterImage> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        let (w, h) = (first.width, first.height);
        if parts.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::invalid("stacked images must share dimensions"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Ok(RasterImage {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    /// Extracts the `size`×`size` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> RasterImage {
        assert!(x0 + cw <= self.width && y0 + ch <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(cw * ch * self.channels);
        for y in y0..y0 + ch {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + cw * self.channels]);
        }
        RasterImage {
            width: cw,
            height: ch,
            channels: self.channels,
            data,
        }
    }

    /// Quantizes every sample to 8 bits and back.
    pub fn quantized(&self) -> RasterImage {
        let data = self.data.iter().map(|v| f64::from(to_u8(*v)) / 255.0).collect();
        RasterImage { data, ..*self }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            bytes.iter().map(|b| f64::from(*b) / 255.0).collect(),
        )
    }
}

#[inline]
pub fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Luminance of a 3-channel image using the Rec. 601 weights.
pub fn to_grayscale(img: &RasterImage) -> Result<RasterImage> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| clamp_unit(LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]))
        .collect();
    Ok(RasterImage {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    })
}

/// Pre- and post-event acquisitions of the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub pre: RasterImage,
    pub post: RasterImage,
}

impl ImagePair {
    pub fn new(pre: RasterImage, post: RasterImage) -> Result<Self> {
        if pre.channels != 3 || post.channels != 3 {
            return Err(Error::invalid("image pair members must have 3 channels"));
        }
        if pre.width != post.width || pre.height != post.height {
            return Err(Error::invalid(format!(
                "pre is {}x{} but post is {}x{}",
                pre.width, pre.height, post.width, post.height
            )));
        }
        Ok(Self { pre, post })
    }

    pub fn width(&self) -> usize {
        self.pre.width
    }

    pub fn height(&self) -> usize {
        self.pre.height
    }
}

/// Damage severity labels. Background is label 0 and is not a variant here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DamageClass {
    NoDamage = 1,
    Minor = 2,
    Major = 3,
    Destroyed = 4,
}

impl DamageClass {
    pub const ALL: [DamageClass; 4] = [
        DamageClass::NoDamage,
        DamageClass::Minor,
        DamageClass::Major,
        DamageClass::Destroyed,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(DamageClass::NoDamage),
            2 => Some(DamageClass::Minor),
            3 => Some(DamageClass::Major),
            4 => Some(DamageClass::Destroyed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DamageClass::NoDamage => "No-Damage",
            DamageClass::Minor => "Minor",
            DamageClass::Major => "Major",
            DamageClass::Destroyed => "Destroyed",
        }
    }
}

/// Label value used for background pixels in a [`DamageMask`].
pub const BACKGROUND: u8 = 0;
/// Highest valid [`DamageMask`] label.
pub const MAX_DAMAGE_LABEL: u8 = 4;

macro_rules! label_mask {
    ($name:ident, $max:expr, $what:literal) => {
        #[derive(Clone, Debug, PartialEq, Eq)]
        pub struct $name {
            width: usize,
            height: usize,
            data: Vec<u8>,
        }

        impl $name {
            pub const MAX_LABEL: u8 = $max;

            pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
                if data.len() != width * height {
                    return Err(Error::invalid(format!(
                        concat!($what, " of {}x{} needs {} labels, got {}"),
                        width,
                        height,
                        width * height,
                        data.len()
                    )));
                }
                if let Some(bad) = data.iter().find(|v| **v > $max) {
                    return Err(Error::invalid(format!(
                        concat!($what, " label {} outside 0..={}"),
                        bad, $max
                    )));
                }
                Ok(Self {
                    width,
                    height,
                    data,
                })
            }

            pub fn zeros(width: usize, height: usize) -> Self {
                Self {
                    width,
                    height,
                    data: vec![0; width * height],
                }
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn data(&self) -> &[u8] {
                &self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> u8 {
                self.data[y * self.width + x]
            }

            pub fn same_shape(&self, width: usize, height: usize) -> bool {
                self.width == width && self.height == height
            }

            pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Self {
                assert!(x0 + cw <= self.width && y0 + ch <= self.height, "crop out of bounds");
                let mut data = Vec::with_capacity(cw * ch);
                for y in y0..y0 + ch {
                    let start = y * self.width + x0;
                    data.extend_from_slice(&self.data[start..start + cw]);
                }
                Self {
                    width: cw,
                    height: ch,
                    data,
                }
            }
        }
    };
}

label_mask!(BinaryMask, 1, "binary mask");
label_mask!(DamageMask, MAX_DAMAGE_LABEL, "damage mask");

impl DamageMask {
    /// Building footprint: every pixel with a label above background.
    pub fn footprint(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| u8::from(*v > BACKGROUND)).collect(),
        }
    }

    /// Pixel counts per label 0..=4.
    pub fn histogram(&self) -> [usize; 5] {
        let mut h = [0usize; 5];
        for v in &self.data {
            h[*v as usize] += 1;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grayscale_of_black_is_black() {
        let img = RasterImage::filled(4, 3, 3, 0.0);
        let g = to_grayscale(&img).unwrap();
        assert_eq!(g.channels(), 1);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grayscale_of_white_is_one() {
        let img = RasterImage::filled(4, 3, 3, 1.0);
        let g = to_grayscale(&img).unwrap();
        assert!(g.data().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn grayscale_of_pure_red() {
        let img = RasterImage::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_grayscale(&img).unwrap().data(), &[0.299]);
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        let img = RasterImage::filled(2, 2, 1, 0.5);
        assert!(matches!(to_grayscale(&img), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn new_rejects_out_of_range_and_bad_length() {
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(RasterImage::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(RasterImage::new(2, 1, 1, vec![0.5]).is_err());
    }

    #[test]
    fn masks_validate_labels() {
        assert!(DamageMask::new(2, 1, vec![0, 4]).is_ok());
        assert!(DamageMask::new(2, 1, vec![0, 5]).is_err());
        assert!(BinaryMask::new(1, 1, vec![2]).is_err());
    }

    #[test]
    fn stack_and_channel_layout() {
        let a = RasterImage::from_fn(2, 2, 3, |x, y, c| (x + y + c) as f64 / 10.0);
        let b = RasterImage::filled(2, 2, 1, 0.9);
        let s = RasterImage::stack(&[&a, &b]).unwrap();
        assert_eq!(s.channels(), 4);
        assert_eq!(s.channel(3).data(), b.data());
        assert_eq!(s.channel(1), a.channel(1));
    }

    proptest! {
        #[test]
        fn quantization_round_trip_is_within_one_step(vals in prop::collection::vec(0.0f64..=1.0, 12)) {
            let img = RasterImage::new(2, 2, 3, vals).unwrap();
            let q = img.quantized();
            for (a, b) in img.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }

        #[test]
        fn grayscale_is_idempotent_on_gray_images(vals in prop::collection::vec(0.0f64..=1.0, 6)) {
            let img = RasterImage::from_fn(3, 2, 3, |x, y, _| vals[y * 3 + x]);
            let g = to_grayscale(&img).unwrap();
            for (a, b) in g.data().iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let again = RasterImage::from_fn(3, 2, 3, |x, y, _| g.get(x, y, 0));
            let g2 = to_grayscale(&again).unwrap();
            for (a, b) in g.data().iter().zip(g2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

//! Channel-planar images in `[0, 1]` and binary PGM/PPM codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("empty image {height}×{width}")));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{channels}×{height}×{width} image needs {} pixels, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, pixels)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(mut self) -> Self {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        self
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.pixels[(c * self.height + y) * self.width + x] =
                        self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.pixels.clone())
            .expect("image dims are valid tensor dims")
    }

    /// Builds an image from a c×h×w tensor without clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            s => Err(Error::dim(format!("expected c×h×w tensor for image, got {s:?}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        // planar → interleaved
        let hw = self.height * self.width;
        out.reserve(self.pixels.len());
        for i in 0..hw {
            for c in 0..self.channels {
                out.push(quantize(self.pixels[c * hw + i]));
            }
        }
        out
    }

    pub fn decode_pnm(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.token()?;
        let channels = match magic.as_slice() {
            b"P5" => 1,
            b"P6" => 3,
            _ => {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "bad magic number {:?}, expected P5 or P6",
                        String::from_utf8_lossy(&magic)
                    ),
                })
            }
        };
        let (width, _) = cur.number("width")?;
        let (height, _) = cur.number("height")?;
        let (maxval, maxval_at) = cur.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format {
                offset: maxval_at,
                message: format!("maxval {maxval} unsupported, only 255"),
            });
        }
        if width == 0 || height == 0 {
            return Err(Error::Format {
                offset: maxval_at,
                message: format!("empty image {width}×{height}"),
            });
        }
        // exactly one whitespace byte separates the header from the payload
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => {
                return Err(Error::Format {
                    offset: cur.pos,
                    message: "missing whitespace after maxval".into(),
                })
            }
        }
        let hw = width * height;
        let need = hw * channels;
        let payload = &bytes[cur.pos..];
        if payload.len() < need {
            return Err(Error::Format {
                offset: bytes.len(),
                message: format!("truncated payload: need {need} bytes, found {}", payload.len()),
            });
        }
        let mut pixels = vec![0.0; need];
        for i in 0..hw {
            for c in 0..channels {
                pixels[c * hw + i] = f64::from(payload[i * channels + c]) / 255.0;
            }
        }
        Image::new(channels, height, width, pixels)
    }
}

/// `round(255 · clamp(v, 0, 1))` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * v + 0.5).floor() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<Vec<u8>> {
        self.skip_space();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format {
                offset: start,
                message: "unexpected end of header".into(),
            });
        }
        Ok(self.bytes[start..self.pos].to_vec())
    }

    /// Next decimal header field and the offset where it starts.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space();
        let at = self.pos;
        let tok = self.token()?;
        std::str::from_utf8(&tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .map(|v| (v, at))
            .ok_or_else(|| Error::Format {
                offset: at,
                message: format!("invalid {what} {:?}", String::from_utf8_lossy(&tok)),
            })
    }
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
    Image::decode_pnm(&fs::read(path)?)
}

pub fn save_pnm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, img.encode_pnm())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_p5_bytes() {
        let mut file = b"P5\n2 2\n255\n".to_vec();
        file.extend([0u8, 255, 128, 64]);
        let img = Image::decode_pnm(&file).unwrap();
        assert_eq!(img.dims(), (1, 2, 2));
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in img.pixels().iter().zip(expect) {
            assert_eq!(*a, b);
        }
        assert!((img.pixels()[2] - 0.50196).abs() < 1e-5);
        assert!((img.pixels()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut file = b"P5 # comment\n# another\n1 1 255\n".to_vec();
        file.push(7);
        assert_eq!(Image::decode_pnm(&file).unwrap().to_bytes(), vec![7]);
    }

    #[test]
    fn rejects_bad_headers() {
        let err = Image::decode_pnm(b"P2\n1 1\n255\n0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        let err = Image::decode_pnm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 7, .. }), "{err}");
        let err = Image::decode_pnm(b"P5\n2 2\n255\n\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("truncated"));
        assert!(Image::decode_pnm(b"P5\nx 2\n255\n").is_err());
    }

    #[test]
    fn quantization_rules() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-3.0), 0);
        let zeros = Image::filled(1, 3, 3, 0.0).unwrap().encode_pnm();
        assert!(zeros.ends_with(&[0u8; 9]));
    }

    #[test]
    fn p6_is_interleaved() {
        let img = Image::from_fn(3, 1, 2, |c, _, x| (c * 2 + x) as f64 / 255.0).unwrap();
        let bytes = img.encode_pnm();
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 2, 4, 1, 3, 5]);
        assert_eq!(Image::decode_pnm(&bytes).unwrap(), img);
    }

    #[test]
    fn save_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(1, 4, 5, |_, y, x| (y * 5 + x) as f64 / 19.0).unwrap();
        let p = dir.path().join("a.pgm");
        save_pnm(&img, &p).unwrap();
        let back = load_pnm(&p).unwrap();
        assert!(back
            .pixels()
            .iter()
            .zip(img.pixels())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        assert!(save_pnm(&img, dir.path().join("missing/dir/a.pgm")).is_err());
    }

    proptest! {
        #[test]
        fn byte_level_round_trip(channels in prop::sample::select(vec![1usize, 3]),
                                 h in 1usize..6, w in 1usize..6,
                                 seed in any::<u64>()) {
            let n = channels * h * w;
            let payload: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let magic = if channels == 1 { "P5" } else { "P6" };
            let mut file = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            file.extend(&payload);
            let img = Image::decode_pnm(&file).unwrap();
            prop_assert_eq!(img.encode_pnm(), file);
        }

        #[test]
        fn load_after_save_within_quantization(vals in prop::collection::vec(-0.5f64..1.5, 12)) {
            let img = Image::new(3, 2, 2, vals).unwrap();
            let back = Image::decode_pnm(&img.encode_pnm()).unwrap();
            for (a, b) in back.pixels().iter().zip(img.clamped().pixels()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}

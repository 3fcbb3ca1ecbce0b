//! RGB rasters and the binary netpbm codecs (P6 for images, P5 for masks).

use thiserror::Error;

use crate::nnkernel::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("netpbm: {0}")]
    Format(String),
    #[error("netpbm: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, self.width - 1 - c, self.pixel(r, c));
            }
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::new(width, height);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for r in 0..height {
            let fy = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for c in 0..width {
                let fx = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let (a, b, cc, d) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                let mut px = [0.0; 3];
                for k in 0..3 {
                    let top = a[k] + (b[k] - a[k]) * tx;
                    let bot = cc[k] + (d[k] - cc[k]) * tx;
                    px[k] = top + (bot - top) * ty;
                }
                out.set_pixel(r, c, px);
            }
        }
        out
    }

    /// Writes this image as channel-planar data into `dst` (length `3*H*W`).
    pub fn write_chw<T: Scalar>(&self, dst: &mut [T]) {
        let plane = self.width * self.height;
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                dst[k * plane + p] = T::from_f32(px[k]);
            }
        }
    }
}

/// Stacks images of identical size into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&RgbImage]) -> Tensor<T> {
    let (h, w) = images
        .first()
        .map(|i| (i.height, i.width))
        .unwrap_or((0, 0));
    let mut t = Tensor::zeros(&[images.len(), 3, h, w]);
    let per = 3 * h * w;
    for (n, img) in images.iter().enumerate() {
        assert_eq!((img.height, img.width), (h, w), "image sizes differ");
        img.write_chw(&mut t.data_mut()[n * per..(n + 1) * per]);
    }
    t
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    out
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ImageError::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Format(format!("missing header field {k}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Format(format!("bad header field {k}")))?;
    }
    if fields[2] != 255 {
        return Err(ImageError::Format(format!(
            "only maxval 255 is supported, got {}",
            fields[2]
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Format("missing separator after header".into()));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        offset: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let h = parse_header(bytes, b"P6")?;
    let n = h.width * h.height * 3;
    let payload = &bytes[h.offset..];
    if payload.len() < n {
        return Err(ImageError::Truncated {
            expected: n,
            found: payload.len(),
        });
    }
    let data = payload[..n].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data,
    })
}

/// Returns `(width, height, bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let h = parse_header(bytes, b"P5")?;
    let n = h.width * h.height;
    let payload = &bytes[h.offset..];
    if payload.len() < n {
        return Err(ImageError::Truncated {
            expected: n,
            found: payload.len(),
        });
    }
    Ok((h.width, h.height, payload[..n].to_vec()))
}

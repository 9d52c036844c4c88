//! Binary portable pixmap IO: P6 for RGB images, P5 for label masks.

use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

/// RGB image with interleaved channels in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i] = rgb[0];
        self.rgb[i + 1] = rgb[1];
        self.rgb[i + 2] = rgb[2];
    }
}

/// Single-channel label image; 0 is background, 1..K are object ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            labels: vec![0; width * height],
        }
    }
}

/// `[0,1]` value to byte, round half up.
fn quantize(v: f32) -> u8 {
    let x = (v * 255.0 + 0.5).floor();
    x.clamp(0.0, 255.0) as u8
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image.rgb.iter().map(|&v| quantize(v)).collect();
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let (width, height, payload_offset) = parse_header(&bytes, b"P6")?;
    let need = width * height * 3;
    let payload = &bytes[payload_offset..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!(
                "truncated P6 payload: need {need} bytes, have {}",
                payload.len()
            ),
        });
    }
    Ok(Image {
        width,
        height,
        rgb: payload[..need].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    file.write_all(&mask.labels)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path)?;
    let (width, height, payload_offset) = parse_header(&bytes, b"P5")?;
    let need = width * height;
    let payload = &bytes[payload_offset..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!(
                "truncated P5 payload: need {need} bytes, have {}",
                payload.len()
            ),
        });
    }
    Ok(Mask {
        width,
        height,
        labels: payload[..need].to_vec(),
    })
}

/// Parse "Pn <w> <h> <maxval>" allowing whitespace and `#` comments; returns
/// (w, h, payload offset). Only maxval 255 is accepted.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic, expected {}",
                std::str::from_utf8(magic).unwrap_or("??")
            ),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            if pos >= bytes.len() {
                return Err(Error::Format {
                    offset: pos,
                    msg: "truncated header".into(),
                });
            }
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Format {
                offset: pos,
                msg: format!("expected digit, found byte {:#04x}", bytes[pos]),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format {
                offset: start,
                msg: "unparsable header field".into(),
            })?;
    }
    if fields[2] != 255 {
        return Err(Error::Format {
            offset: pos,
            msg: format!("only maxval 255 is supported, got {}", fields[2]),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format {
            offset: pos,
            msg: "missing whitespace before payload".into(),
        });
    }
    Ok((fields[0], fields[1], pos + 1))
}

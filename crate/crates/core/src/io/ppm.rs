//! Binary PPM (P6, maxval 255) images.

use std::fs;
use std::io;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageF32;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Values quantized to the nearest of the 256 levels a PPM can store.
pub fn quantized(img: &ImageF32) -> ImageF32 {
    let data = img.data().iter().map(|&v| quantize(v) as f32 / 255.0).collect();
    ImageF32::new(img.height(), img.width(), img.channels(), data).expect("same dims")
}

pub fn encode_ppm(img: &ImageF32) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Format(format!("PPM needs 3 channels, image has {}", img.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed("truncated PPM header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| malformed("non-ASCII PPM header"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageF32> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "P6" => {}
        m @ ("P1" | "P2" | "P3" | "P4" | "P5") => {
            return Err(Error::Format(format!("expected binary RGB PPM (P6), found {m}")))
        }
        m => return Err(malformed(format!("not a PPM file (magic {m:?})"))),
    }
    let mut num = |what: &str| -> Result<usize> {
        token(bytes, &mut pos)?.parse().map_err(|_| malformed(format!("bad PPM {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("expected maxval 255, found {maxval}")));
    }
    pos += 1;
    let n = w * h * 3;
    let payload = bytes.get(pos..pos + n).ok_or_else(|| malformed(format!("PPM payload shorter than {n} bytes")))?;
    ImageF32::new(h, w, 3, payload.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn save_image(path: &Path, img: &ImageF32) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<ImageF32> {
    decode_ppm(&fs::read(path)?)
}

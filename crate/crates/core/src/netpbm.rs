//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::binio::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, NodeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

struct Raster<'a> {
    kind: Kind,
    width: usize,
    height: usize,
    /// Interleaved samples.
    samples: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Raster<'_>> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => Kind::Gray,
        Some(b"P6") => Kind::Rgb,
        Some([b'P', d]) if (b'1'..=b'7').contains(d) => {
            return Err(Error::UnsupportedFormat(format!(
                "netpbm variant P{}; only binary P5/P6 are supported",
                *d as char
            )))
        }
        _ => return Err(Error::UnsupportedFormat("not a netpbm file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each header number.
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
        if i == 0 && pos == 2 {
            return Err(Error::malformed("netpbm", "missing whitespace after magic"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = digits
            .parse()
            .map_err(|_| Error::malformed("netpbm", format!("bad header field at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::malformed(
            "netpbm",
            "missing whitespace after maxval",
        ));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval}; only 255 is supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::malformed("netpbm", "zero-sized raster"));
    }
    let expected = width * height * kind.channels();
    let actual = bytes.len() - pos;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    Ok(Raster {
        kind,
        width,
        height,
        samples: &bytes[pos..pos + expected],
    })
}

fn header(kind: Kind, width: usize, height: usize) -> Vec<u8> {
    let magic = match kind {
        Kind::Gray => "P5",
        Kind::Rgb => "P6",
    };
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let raster = parse(bytes)?;
    let c = raster.kind.channels();
    let plane = raster.width * raster.height;
    let mut data = vec![0.0; c * plane];
    for (i, &b) in raster.samples.iter().enumerate() {
        data[(i % c) * plane + i / c] = b as f64 / 255.0;
    }
    Image::new(c, raster.height, raster.width, data)
}

/// Gray images become P5, three-channel images P6.
pub fn encode_image(image: &Image) -> Result<Vec<u8>> {
    let kind = match image.channels() {
        1 => Kind::Gray,
        3 => Kind::Rgb,
        c => {
            return Err(Error::UnsupportedFormat(format!(
                "{c}-channel image; netpbm holds 1 or 3"
            )))
        }
    };
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = header(kind, w, h);
    out.reserve(h * w * c);
    for p in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(image.plane(ch)[p]));
        }
    }
    Ok(out)
}

/// Reads a P5 file as raw labels on a pixel grid.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let raster = parse(bytes)?;
    if raster.kind != Kind::Gray {
        return Err(Error::UnsupportedFormat(
            "label maps must be grayscale P5".into(),
        ));
    }
    LabelMap::new(
        NodeGrid::new(raster.height, raster.width, 1)?,
        raster.samples.to_vec(),
    )
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    encode_gray(
        labels.grid().height(),
        labels.grid().width(),
        labels.labels(),
    )
}

pub fn encode_gray(height: usize, width: usize, samples: &[u8]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), height * width);
    let mut out = header(Kind::Gray, width, height);
    out.extend_from_slice(samples);
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_image(image)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_labels(labels))
}

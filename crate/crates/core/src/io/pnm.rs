//! Binary Netpbm: P6 for color images, P5 for masks and grayscale.
//! Values map to [0,1] by /255 on read and round(v*255) clamped on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("invalid integer"))
    }
}

/// Read a P6 (3-channel) or P5 (1-channel) binary Netpbm file.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if bytes.len() < 2 {
        return Err(cur.err("truncated header"));
    }
    let channels = match &bytes[0..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(cur.err(format!("unsupported magic {:?}", &bytes[0..2.min(bytes.len())]))),
    };
    cur.pos = 2;
    let width = cur.read_uint()?;
    let height = cur.read_uint()?;
    let maxval = cur.read_uint()?;
    if maxval != 255 {
        return Err(cur.err(format!("maxval must be 255, got {maxval}")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace after maxval"));
    }
    cur.pos += 1;
    let expected = width * height * channels;
    if bytes.len() - cur.pos < expected {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated pixel data: need {expected} bytes, have {}",
            bytes.len().saturating_sub(cur.pos)
        )));
    }
    let raster = &bytes[cur.pos..cur.pos + expected];
    // interleaved -> CHW
    let mut data = vec![0.0; expected];
    let hw = width * height;
    for p in 0..hw {
        for c in 0..channels {
            data[c * hw + p] = raster[p * channels + c] as f64 / 255.0;
        }
    }
    Image::new(channels, height, width, data)
}

/// Write P6 when the image has 3 channels, P5 when it has 1.
pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let magic = match img.channels {
        3 => "P6",
        1 => "P5",
        c => {
            return Err(Error::contract(format!(
                "can only write 1- or 3-channel images, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let hw = img.width * img.height;
    out.reserve(hw * img.channels);
    for p in 0..hw {
        for c in 0..img.channels {
            let v = (img.data[c * hw + p] * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

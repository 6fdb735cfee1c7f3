//! Image files: binary PPM (P6, maxval 255), PNG, and a raw format made of
//! an ASCII `W H` line followed by `W·H·3` bytes of RGB.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::pyramid::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Ppm,
    Png,
    Raw,
}

impl FileFormat {
    /// Format implied by a file extension; PPM when unknown.
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => FileFormat::Png,
            Some("rgb" | "raw") => FileFormat::Raw,
            _ => FileFormat::Ppm,
        }
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("raw image lacks a size line".into()))?;
    let line =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("raw size line is not text".into()))?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("bad raw size line {line:?}")))
        })
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::Format(format!("bad raw size line {line:?}")));
    };
    let data = &bytes[nl + 1..];
    if w.checked_mul(h).and_then(|n| n.checked_mul(3)) != Some(data.len()) {
        return Err(Error::Format(format!(
            "raw image of {w}×{h} needs {} bytes",
            3 * w * h
        )));
    }
    Image::new(w, h, data.to_vec())
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = format!("{} {}\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Decodes PPM or PNG bytes; only 8-bit RGB content is accepted.
pub fn decode_image(bytes: &[u8], format: FileFormat) -> Result<Image> {
    let fmt = match format {
        FileFormat::Raw => return decode_raw(bytes),
        FileFormat::Ppm => ImageFormat::Pnm,
        FileFormat::Png => ImageFormat::Png,
    };
    let dynamic = ImageReader::with_format(Cursor::new(bytes), fmt)
        .decode()
        .map_err(|e| Error::Format(e.to_string()))?;
    match dynamic {
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            Image::new(w as usize, h as usize, rgb.into_raw())
        }
        other => Err(Error::Format(format!(
            "only 8-bit RGB images are supported, got {:?}",
            other.color()
        ))),
    }
}

pub fn encode_image(img: &Image, format: FileFormat) -> Result<Vec<u8>> {
    match format {
        FileFormat::Ppm => Ok(encode_ppm(img)),
        FileFormat::Raw => Ok(encode_raw(img)),
        FileFormat::Png => {
            let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
                .expect("buffer matches dimensions");
            let mut out = Cursor::new(Vec::new());
            buf.write_to(&mut out, ImageFormat::Png)
                .map_err(|e| Error::Format(e.to_string()))?;
            Ok(out.into_inner())
        }
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_image(&std::fs::read(path)?, FileFormat::from_path(path))
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_image(img, FileFormat::from_path(path))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::synth::natural_image;

    #[test]
    fn formats_round_trip() {
        let img = natural_image(7, 5, 3);
        for f in [FileFormat::Ppm, FileFormat::Png, FileFormat::Raw] {
            assert_eq!(
                decode_image(&encode_image(&img, f).unwrap(), f).unwrap(),
                img,
                "{f:?}"
            );
        }
        assert!(encode_ppm(&img).starts_with(b"P6\n7 5\n255\n"));
    }

    #[test]
    fn ppm_with_comments() {
        let mut b = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_image(&b, FileFormat::Ppm).unwrap();
        assert_eq!(img.pixel(0, 1), [4, 5, 6]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_image(b"P6\n2 1\n255\n\x01", FileFormat::Ppm).is_err());
        assert!(decode_image(b"P5\n1 1\n255\n\x01", FileFormat::Ppm).is_err());
        assert!(decode_image(b"P6\n1 1\n65535\n\x01\x02\x03\x04\x05\x06", FileFormat::Ppm).is_err());
        assert!(decode_raw(b"2 2\n\x00").is_err());
        assert!(decode_raw(b"2\n").is_err());
        assert_eq!(FileFormat::from_path(Path::new("a.PNG")), FileFormat::Png);
    }
}

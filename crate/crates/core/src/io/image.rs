//! Binary PPM (P6, RGB) and PGM (P5, gray) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::Frame;
use crate::tensor::Tensor;

/// Encode a frame; 3 channels produce P6, 1 channel P5. Values are clamped
/// to `[0, 1]` and quantized to bytes.
pub fn write_image_bytes(frame: &Frame) -> Vec<u8> {
    let frame = frame.clamped();
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = frame.data.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push((d[(ch * h + y) * w + x] * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn read_image_bytes(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 0usize;
    let mut next_token = |what: &str| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(format!("missing {what}"), Some(start as u64)));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token("magic")?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::format(format!("unsupported image magic {other:?}"), Some(0))),
    };
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::format(format!("bad {what} {s:?}"), None))
    };
    let w = parse(next_token("width")?, "width")?;
    let h = parse(next_token("height")?, "height")?;
    let maxval = parse(next_token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("maxval {maxval}, only 255 supported"), None));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(format!("degenerate image size {w}x{h}"), None));
    }
    pos += 1; // single whitespace byte after maxval
    let needed = w * h * channels;
    if bytes.len() < pos + needed {
        return Err(Error::format(
            format!("expected {needed} pixel bytes, only {} available", bytes.len().saturating_sub(pos)),
            Some(pos as u64),
        ));
    }
    let raster = &bytes[pos..pos + needed];
    let mut data = vec![0.0f64; needed];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                data[(ch * h + y) * w + x] = raster[(y * w + x) * channels + ch] as f64 / 255.0;
            }
        }
    }
    Frame::new(Tensor::from_vec(vec![channels, h, w], data))
}

pub fn write_image(frame: &Frame, path: &Path) -> Result<()> {
    std::fs::write(path, write_image_bytes(frame))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Frame> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_image_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ppm_file_level_roundtrip() {
        let mut rng = Rng::new(33);
        let values: Vec<f64> = (0..3 * 5 * 7).map(|_| (rng.below(256) as f64) / 255.0).collect();
        let frame = Frame::from_fn(3, 5, 7, |c, y, x| values[(c * 5 + y) * 7 + x]);
        let bytes = write_image_bytes(&frame);
        let back = read_image_bytes(&bytes).unwrap();
        assert_eq!(write_image_bytes(&back), bytes);
        for (a, b) in back.data.data().iter().zip(frame.data.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_grayscale_roundtrip() {
        let frame = Frame::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64 / 15.0);
        let bytes = write_image_bytes(&frame);
        assert!(bytes.starts_with(b"P5"));
        let back = read_image_bytes(&bytes).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(write_image_bytes(&back), bytes);
    }

    #[test]
    fn values_clamped_on_write() {
        let frame = Frame::from_fn(1, 2, 2, |_, y, x| if (y, x) == (0, 0) { 1.5 } else { -0.2 });
        let bytes = write_image_bytes(&frame);
        let back = read_image_bytes(&bytes).unwrap();
        assert_eq!(back.data.at(&[0, 0, 0]), 1.0);
        assert_eq!(back.data.at(&[0, 0, 1]), 0.0);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let frame = Frame::from_fn(1, 3, 3, |_, _, _| 0.5);
        let bytes = write_image_bytes(&frame);
        assert!(read_image_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(read_image_bytes(b"P3\n1 1\n255\n0 0 0\n").is_err());
    }
}

//! Binary PPM (P6) and PGM (P5) decoding into [0, 1] tensors, and P6
//! encoding for the synthetic dataset writer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    payload_at: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 {
        return Err(bad("not a PPM/PGM file".into()));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(bad("unsupported magic (want P5 or P6)".into())),
    };

    // Whitespace-separated fields with '#' comments running to end of line.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
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
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range".into()))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !matches!(bytes[pos], b' ' | b'\t' | b'\r' | b'\n') {
        return Err(bad("missing separator before pixel data".into()));
    }
    pos += 1;

    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("max value {maxval} unsupported (want 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension".into()));
    }
    Ok(Header {
        channels,
        width,
        height,
        payload_at: pos,
    })
}

/// Reads a binary PPM/PGM into a (1, 3, h, w) tensor scaled to [0, 1].
/// Grayscale input is replicated across the three channels.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let hdr = parse_header(&bytes, path)?;
    let expect = hdr.width * hdr.height * hdr.channels;
    let payload = &bytes[hdr.payload_at..];
    if payload.len() < expect {
        return Err(Error::Format(format!(
            "{}: pixel payload has {} bytes, expected {expect}",
            path.display(),
            payload.len()
        )));
    }

    let mut out = Tensor::zeros([1, 3, hdr.height, hdr.width]);
    let plane = hdr.height * hdr.width;
    for y in 0..hdr.height {
        for x in 0..hdr.width {
            let p = (y * hdr.width + x) * hdr.channels;
            for c in 0..3 {
                let v = payload[p + c.min(hdr.channels - 1)] as f32 / 255.0;
                out.data_mut()[c * plane + y * hdr.width + x] = v;
            }
        }
    }
    Ok(out)
}

/// Writes a (1, 3, h, w) tensor in [0, 1] as binary P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::Config(format!(
            "write_ppm expects a (1, 3, h, w) tensor, got {:?}",
            image.shape()
        )));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                let v = image.data()[ci * plane + y * w + x];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmpfile(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mbfcn_ppm_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    #[test]
    fn p6_all_white() {
        let path = tmpfile("white.ppm", b"P6\n2 2\n255\n\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff");
        let t = read_image(&path).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn p6_layout_mapping() {
        // Red pixel at (0,0), rest black.
        let mut payload = vec![0u8; 12];
        payload[0] = 255;
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(payload);
        let path = tmpfile("red.ppm", &bytes);
        let t = read_image(&path).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 0), 0.0);
        assert_eq!(t.at(0, 2, 0, 0), 0.0);
    }

    #[test]
    fn p5_replicates_channels() {
        let path = tmpfile("gray.pgm", b"P5\n2 1\n255\n\x80\x40");
        let t = read_image(&path).unwrap();
        for c in 0..3 {
            assert_eq!(t.at(0, c, 0, 0), 128.0 / 255.0);
            assert_eq!(t.at(0, c, 0, 1), 64.0 / 255.0);
        }
    }

    #[test]
    fn comments_and_errors() {
        let path = tmpfile("comment.ppm", b"P6 # a comment\n2 1 # sizes\n255\n\0\0\0\0\0\0");
        assert!(read_image(&path).is_ok());

        let path = tmpfile("short.ppm", b"P6\n4 4\n255\n\0\0\0");
        assert!(matches!(read_image(&path), Err(Error::Format(_))));

        let path = tmpfile("magic.ppm", b"P3\n1 1\n255\n0 0 0");
        assert!(matches!(read_image(&path), Err(Error::Format(_))));
    }

    #[test]
    fn write_read_roundtrip() {
        let mut t = Tensor::zeros([1, 3, 3, 5]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let dir = std::env::temp_dir().join("mbfcn_ppm_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ppm");
        write_ppm(&path, &t).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }
}

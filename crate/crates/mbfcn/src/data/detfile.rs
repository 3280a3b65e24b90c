//! Detection dump format: per image a header line `# <image_id>` followed by
//! one `x y w h score` line per detection, fixed six-decimal reals.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::eval::Detection;

pub fn write_detections(path: &Path, by_image: &BTreeMap<String, Vec<Detection>>) -> Result<()> {
    let mut out = String::new();
    for (image_id, dets) in by_image {
        out.push_str(&format!("# {image_id}\n"));
        for d in dets {
            out.push_str(&format!(
                "{:.6} {:.6} {:.6} {:.6} {:.6}\n",
                d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let text = fs::read_to_string(path)?;
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(id) = line.strip_prefix('#') {
            let id = id.trim().to_string();
            by_image.entry(id.clone()).or_default();
            current = Some(id);
            continue;
        }
        let image_id = current.clone().ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: ln + 1,
            msg: "detection line before any '# <image_id>' header".into(),
        })?;
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: ln + 1,
                msg: format!("bad number: {e}"),
            })?;
        if vals.len() != 5 {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: ln + 1,
                msg: format!("expected 5 fields (x y w h score), got {}", vals.len()),
            });
        }
        by_image.entry(image_id.clone()).or_default().push(Detection {
            bbox: BBox::new(vals[0], vals[1], vals[2], vals[3]),
            score: vals[4],
            branch: 0,
            image_id,
        });
    }
    Ok(by_image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(id: &str, x: f32, score: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, 2.0, 10.0, 12.0),
            score,
            branch: 0,
            image_id: id.to_string(),
        }
    }

    #[test]
    fn roundtrip_within_tolerance() {
        let mut by_image = BTreeMap::new();
        by_image.insert(
            "img_a".to_string(),
            vec![det("img_a", 1.234567, 0.123456789), det("img_a", 7.0, 0.5)],
        );
        by_image.insert("img_b".to_string(), Vec::new());

        let dir = std::env::temp_dir().join("mbfcn_det_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dets.txt");
        write_detections(&path, &by_image).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        // Six-decimal fixed point: 0.123456789 rounds to 0.123457.
        assert!(text.contains("0.123457"), "{text}");
        // Empty image keeps its header line only.
        assert!(text.contains("# img_b\n"));

        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back["img_b"].is_empty());
        for (a, b) in by_image["img_a"].iter().zip(&back["img_a"]) {
            assert!((a.bbox.x - b.bbox.x).abs() < 1e-6);
            assert!((a.score - b.score).abs() < 1e-6);
        }
    }

    #[test]
    fn body_before_header_is_an_error() {
        let dir = std::env::temp_dir().join("mbfcn_det_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("headless.txt");
        std::fs::write(&path, "1 2 3 4 0.5\n").unwrap();
        assert!(matches!(
            read_detections(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

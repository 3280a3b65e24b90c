//! Annotation files. The internal layout is one line `<image_path> <n>`
//! followed by n lines `x y w h`; the WIDER-style layout is an image path
//! line, a face-count line, then count lines each starting with four numbers
//! (trailing attribute fields ignored).

use std::fs;
use std::path::Path;

use crate::anchors::BBox;
use crate::error::{Error, Result};

use super::image_id_of;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    Internal,
    Wider,
}

impl AnnotationFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(AnnotationFormat::Internal),
            "wider" => Ok(AnnotationFormat::Wider),
            other => Err(Error::Config(format!(
                "unknown annotation format '{other}' (expected internal|wider)"
            ))),
        }
    }
}

/// One annotated image: the path as written in the file plus its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub image_id: String,
    pub boxes: Vec<BBox>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;

    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let (image_path, count, mut cursor) = match format {
            AnnotationFormat::Internal => {
                // `<path> <n>` on one line.
                let mut parts = lines[i].rsplitn(2, char::is_whitespace);
                let count_str = parts.next().unwrap_or_default();
                let p = parts.next().unwrap_or_default().trim();
                let count: usize = count_str.parse().map_err(|_| {
                    parse_err(path, i + 1, format!("bad face count '{count_str}'"))
                })?;
                if p.is_empty() {
                    return Err(parse_err(path, i + 1, "missing image path"));
                }
                (p.to_string(), count, i + 1)
            }
            AnnotationFormat::Wider => {
                let p = lines[i].trim().to_string();
                let count_line = lines
                    .get(i + 1)
                    .ok_or_else(|| parse_err(path, i + 2, "missing face-count line"))?;
                let count: usize = count_line.trim().parse().map_err(|_| {
                    parse_err(path, i + 2, format!("bad face count '{}'", count_line.trim()))
                })?;
                (p, count, i + 2)
            }
        };

        let mut boxes = Vec::with_capacity(count);
        for k in 0..count {
            let line = lines
                .get(cursor)
                .ok_or_else(|| parse_err(path, cursor + 1, "unexpected end of annotation block"))?;
            let mut fields = line.split_whitespace();
            let mut vals = [0.0f32; 4];
            for (vi, v) in vals.iter_mut().enumerate() {
                let tok = fields.next().ok_or_else(|| {
                    parse_err(path, cursor + 1, format!("box line has fewer than 4 fields"))
                })?;
                *v = tok.parse().map_err(|_| {
                    parse_err(path, cursor + 1, format!("bad coordinate '{tok}' (field {vi})"))
                })?;
            }
            let b = BBox::new(vals[0], vals[1], vals[2], vals[3]);
            if b.is_valid() {
                boxes.push(b);
            } else {
                eprintln!(
                    "warning: {}:{}: dropping degenerate box {}x{} (face {} of {})",
                    path.display(),
                    cursor + 1,
                    b.w,
                    b.h,
                    k + 1,
                    count
                );
            }
            cursor += 1;
        }

        records.push(AnnotationRecord {
            image_id: image_id_of(&image_path),
            image_path,
            boxes,
        });
        i = cursor;
    }
    Ok(records)
}

/// Writer for the internal layout; exact inverse of the internal parser.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&format!("{} {}\n", rec.image_path, rec.boxes.len()));
        for b in &rec.boxes {
            out.push_str(&format!("{} {} {} {}\n", b.x, b.y, b.w, b.h));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("mbfcn_annot_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn wider_block() {
        let path = write_tmp("wider.txt", "img/a.ppm\n1\n10 20 30 40 0 0 0 0 0 0\n");
        let recs = parse_annotations(&path, AnnotationFormat::Wider).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image_path, "img/a.ppm");
        assert_eq!(recs[0].image_id, "a");
        assert_eq!(recs[0].boxes, vec![BBox::new(10.0, 20.0, 30.0, 40.0)]);
    }

    #[test]
    fn wider_zero_count_has_no_box_lines() {
        let path = write_tmp("wider0.txt", "a.ppm\n0\nb.ppm\n1\n1 2 3 4\n");
        let recs = parse_annotations(&path, AnnotationFormat::Wider).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].boxes.is_empty());
        assert_eq!(recs[1].boxes.len(), 1);
    }

    #[test]
    fn degenerate_box_dropped() {
        let path = write_tmp("degen.txt", "a.ppm\n2\n5 5 0 10 1 1\n1 1 4 4\n");
        let recs = parse_annotations(&path, AnnotationFormat::Wider).unwrap();
        assert_eq!(recs[0].boxes, vec![BBox::new(1.0, 1.0, 4.0, 4.0)]);
    }

    #[test]
    fn short_block_reports_line() {
        let path = write_tmp("short.txt", "a.ppm\n3\n1 1 4 4\n");
        match parse_annotations(&path, AnnotationFormat::Wider) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let path = write_tmp("badcount.txt", "a.ppm\nx\n");
        assert!(matches!(
            parse_annotations(&path, AnnotationFormat::Wider),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn internal_roundtrip_is_exact() {
        let records = vec![
            AnnotationRecord {
                image_path: "images/img_00000.ppm".into(),
                image_id: "img_00000".into(),
                boxes: vec![BBox::new(1.0, 2.0, 3.0, 4.0), BBox::new(0.5, 6.25, 10.0, 12.5)],
            },
            AnnotationRecord {
                image_path: "images/img_00001.ppm".into(),
                image_id: "img_00001".into(),
                boxes: vec![],
            },
        ];
        let dir = std::env::temp_dir().join("mbfcn_annot_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.txt");
        write_annotations(&path, &records).unwrap();
        let back = parse_annotations(&path, AnnotationFormat::Internal).unwrap();
        assert_eq!(back, records);
    }
}

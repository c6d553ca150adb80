//! IDX container reader/writer (big-endian header, `u8` payload).

use std::path::Path;

use super::{Image, Sample};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

/// Parses a 3-D `u8` image file into `(count, rows, cols, payload)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, 8, "zero image dimension"));
    }
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: header promises {need} bytes after offset 16, file has {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(format_err(path, 16 + need, "trailing bytes after payload"));
    }
    Ok((n, rows, cols, payload))
}

/// Parses a 1-D `u8` label file.
pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: header promises {n} labels after offset 8, file has {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(format_err(path, 8 + n, "trailing bytes after payload"));
    }
    Ok(payload)
}

/// Reads an image/label file pair. Sample ids are the record indices.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
    let img_bytes = read(images_path)?;
    let lbl_bytes = read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if labels.len() != n {
        return Err(format_err(
            labels_path,
            4,
            format!(
                "label count {} does not match image count {n} in {}",
                labels.len(),
                images_path.display()
            ),
        ));
    }
    let size = rows * cols;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            id: i as u64,
            label: label as u32,
            image: Image {
                channels: 1,
                height: rows,
                width: cols,
                pixels: pixels[i * size..(i + 1) * size].to_vec(),
            },
        })
        .collect())
}

/// Writes single-channel samples of identical size as an IDX pair.
pub fn write_idx(images_path: &Path, labels_path: &Path, samples: &[Sample]) -> Result<()> {
    let (rows, cols) = samples
        .first()
        .map_or((1, 1), |s| (s.image.height, s.image.width));
    let mut img = Vec::with_capacity(16 + samples.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, samples.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    let mut lbl = Vec::with_capacity(8 + samples.len());
    for v in [IDX_LABELS_MAGIC, samples.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    for s in samples {
        if s.image.channels != 1 || s.image.height != rows || s.image.width != cols {
            return Err(crate::error::invalid!("IDX output needs equally sized single-channel images"));
        }
        if s.label > u8::MAX as u32 {
            return Err(crate::error::invalid!("label {} does not fit in u8", s.label));
        }
        img.extend_from_slice(&s.image.pixels);
        lbl.push(s.label as u8);
    }
    let write = |p: &Path, b: &[u8]| std::fs::write(p, b).map_err(|e| Error::io(format!("writing {}", p.display()), e));
    write(images_path, &img)?;
    write(labels_path, &lbl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, n_images: u32, n_labels: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n_images, 2, 3] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n_images * 6).map(|v| (v * 10) as u8));
        let mut lbl = Vec::new();
        for v in [IDX_LABELS_MAGIC, n_labels] {
            lbl.extend_from_slice(&v.to_be_bytes());
        }
        lbl.extend((0..n_labels).map(|v| v as u8 + 4));
        let (pi, pl) = (dir.join("img"), dir.join("lbl"));
        std::fs::write(&pi, img).unwrap();
        std::fs::write(&pl, lbl).unwrap();
        (pi, pl)
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = fixture(dir.path(), 2, 2);
        let s = load_idx(&pi, &pl).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, 4);
        assert_eq!(s[1].label, 5);
        assert_eq!((s[1].image.height, s[1].image.width), (2, 3));
        assert_eq!(s[0].image.pixels, vec![0, 10, 20, 30, 40, 50]);
        assert_eq!(s[1].image.pixels, vec![60, 70, 80, 90, 100, 110]);
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = fixture(dir.path(), 2, 3);
        match load_idx(&pi, &pl) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 4);
                assert!(message.contains("does not match"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let p = Path::new("f");
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4];
        assert!(matches!(parse_idx_images(&bytes, p), Err(Error::Format { offset: 0, .. })));
        bytes[3] = 3;
        assert!(parse_idx_images(&bytes, p).is_ok());
        bytes.pop();
        assert!(matches!(parse_idx_images(&bytes, p), Err(Error::Format { offset: 19, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 5, 1], p), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = fixture(dir.path(), 3, 3);
        let s = load_idx(&pi, &pl).unwrap();
        let (qi, ql) = (dir.path().join("a"), dir.path().join("b"));
        write_idx(&qi, &ql, &s).unwrap();
        assert_eq!(std::fs::read(&pi).unwrap(), std::fs::read(&qi).unwrap());
        assert_eq!(std::fs::read(&pl).unwrap(), std::fs::read(&ql).unwrap());
    }
}

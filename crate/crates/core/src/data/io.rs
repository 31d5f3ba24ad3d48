//! Dataset file formats.
//!
//! - IDX image/label pairs: big-endian, magic `0x00000803` for images and
//!   `0x00000801` for labels; pixels are unsigned bytes scaled to [0, 1].
//! - CSV: UTF-8, comma-separated, header row, one `label` column of
//!   integers; every other column is a feature. Saved floats use the
//!   shortest round-trip representation, so save/load is exact.
//!
//! Malformed input reports the byte offset of the offending field.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numkit::matrix::Matrix;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated: need {} bytes, have {}", end, bytes.len()),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image file and its companion label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let magic = read_be_u32(&img, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&img, 4)? as usize;
    let rows = read_be_u32(&img, 8)? as usize;
    let cols = read_be_u32(&img, 12)? as usize;
    let pixel_count = n * rows * cols;
    if img.len() != 16 + pixel_count {
        return Err(Error::Format {
            offset: img.len().min(16 + pixel_count) as u64,
            msg: format!(
                "image payload is {} bytes, header promises {}",
                img.len() - 16.min(img.len()),
                pixel_count
            ),
        });
    }

    let lab = fs::read(labels_path)?;
    let magic = read_be_u32(&lab, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"),
        });
    }
    let n_labels = read_be_u32(&lab, 4)? as usize;
    if n_labels != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{n_labels} labels for {n} images"),
        });
    }
    if lab.len() != 8 + n {
        return Err(Error::Format {
            offset: lab.len().min(8 + n) as u64,
            msg: format!("label payload is {} bytes, header promises {}", lab.len() - 8.min(lab.len()), n),
        });
    }

    let d = rows * cols;
    let mut features = Matrix::zeros(n, d);
    for j in 0..n {
        for l in 0..d {
            features[(j, l)] = img[16 + j * d + l] as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}

/// Loads a CSV dataset. The header must contain a `label` column; all
/// other columns are features in header order.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut lines = text.lines();

    let header = lines.next().ok_or(Error::Format {
        offset: 0,
        msg: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns.iter().position(|&c| c == "label").ok_or(Error::Format {
        offset: 0,
        msg: "header has no `label` column".into(),
    })?;
    let d = columns.len() - 1;
    offset += header.len() as u64 + 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for line in lines {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Format {
                offset: line_offset,
                msg: format!("{} fields, header has {}", fields.len(), columns.len()),
            });
        }
        let mut feat = Vec::with_capacity(d);
        for (i, field) in fields.iter().enumerate() {
            if i == label_col {
                let y: usize = field.parse().map_err(|_| Error::Format {
                    offset: line_offset,
                    msg: format!("label `{field}` is not a non-negative integer"),
                })?;
                labels.push(y);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Format {
                    offset: line_offset,
                    msg: format!("feature `{field}` is not a number"),
                })?;
                feat.push(v);
            }
        }
        rows.push(feat);
    }

    let n = rows.len();
    let mut features = Matrix::zeros(n, d);
    for (j, feat) in rows.into_iter().enumerate() {
        features.row_mut(j).copy_from_slice(&feat);
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}

/// Saves a dataset as CSV (`f0..f{d-1},label`), LF line endings, floats in
/// shortest round-trip form.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for l in 0..ds.dim() {
        write!(out, "f{l},")?;
    }
    writeln!(out, "label")?;
    for j in 0..ds.len() {
        for &v in ds.features.row(j) {
            write!(out, "{v},")?;
        }
        writeln!(out, "{}", ds.labels[j])?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_mixture;
    use crate::numkit::rng::Rng;

    fn idx_image_bytes(images: &[[u8; 4]]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&(images.len() as u32).to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        for img in images {
            b.extend_from_slice(img);
        }
        b
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_pair_round_trip() {
        let dir = std::env::temp_dir().join("arblab_idx_test");
        fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("img.idx");
        let lab_path = dir.join("lab.idx");
        fs::write(&img_path, idx_image_bytes(&[[0, 51, 102, 255], [255, 0, 0, 0]])).unwrap();
        fs::write(&lab_path, idx_label_bytes(&[1, 0])).unwrap();

        let ds = load_idx(&img_path, &lab_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels, vec![1, 0]);
        assert!((ds.features[(0, 3)] - 1.0).abs() < 1e-15);
        assert!((ds.features[(0, 1)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let dir = std::env::temp_dir().join("arblab_idx_test");
        fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("bad.idx");
        let lab_path = dir.join("bad_lab.idx");
        let mut bytes = idx_image_bytes(&[[0, 0, 0, 0]]);
        bytes[3] = 0x99;
        fs::write(&img_path, bytes).unwrap();
        fs::write(&lab_path, idx_label_bytes(&[0])).unwrap();
        match load_idx(&img_path, &lab_path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_reports_offset() {
        let dir = std::env::temp_dir().join("arblab_idx_test");
        fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("two.idx");
        let lab_path = dir.join("three_lab.idx");
        fs::write(&img_path, idx_image_bytes(&[[0; 4], [0; 4]])).unwrap();
        fs::write(&lab_path, idx_label_bytes(&[0, 1, 1])).unwrap();
        match load_idx(&img_path, &lab_path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_non_integer_label_is_format_error() {
        let dir = std::env::temp_dir().join("arblab_csv_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_label.csv");
        fs::write(&path, "f0,f1,label\n0.5,0.25,1.5\n").unwrap();
        match load_csv(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 12); // start of the data line
                assert!(msg.contains("label"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_missing_label_column_is_format_error() {
        let dir = std::env::temp_dir().join("arblab_csv_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("no_label.csv");
        fs::write(&path, "f0,f1\n0.5,0.25\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("arblab_csv_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.csv");
        let ds = synth_gaussian_mixture(&mut Rng::new(12), 3, 5, &[4, 3, 2], 2.0).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, ds.num_classes);
        for (a, b) in back.features.data().iter().zip(ds.features.data()) {
            assert!((a - b).abs() <= 1e-9);
            assert_eq!(a, b); // shortest round-trip printing is exact
        }
    }
}

//! On-disk datasets: one `P5` graymap per image plus an `index.csv` with
//! header `filename,label,meta_x,meta_y`. Meta fields may be empty.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::synth::LabeledImage;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct IndexRow {
    filename: String,
    label: usize,
    meta_x: Option<f64>,
    meta_y: Option<f64>,
}

pub fn image_filename(i: usize) -> String {
    format!("img_{i:05}.pgm")
}

pub fn save_dataset(dir: &Path, data: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = csv::Writer::from_writer(Vec::new());
    // header is written explicitly so an empty dataset still has one
    index
        .write_record(["filename", "label", "meta_x", "meta_y"])
        .map_err(csv_err)?;
    for (i, item) in data.iter().enumerate() {
        let name = image_filename(i);
        pgm::write_image(&dir.join(&name), &item.image)?;
        let (mx, my) = match item.meta {
            Some((x, y)) => (x.to_string(), y.to_string()),
            None => (String::new(), String::new()),
        };
        index
            .write_record([name, item.label.to_string(), mx, my])
            .map_err(csv_err)?;
    }
    let bytes = index.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(dir.join(INDEX_FILE), bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// Parses one index line (without header) for inspection.
pub fn parse_index_row(line: &str) -> Result<(String, usize, Option<(f64, f64)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes());
    let row: IndexRow = rdr
        .deserialize()
        .next()
        .ok_or_else(|| Error::Format("empty index row".into()))?
        .map_err(csv_err)?;
    let meta = meta_of(&row)?;
    Ok((row.filename, row.label, meta))
}

fn meta_of(row: &IndexRow) -> Result<Option<(f64, f64)>> {
    match (row.meta_x, row.meta_y) {
        (Some(x), Some(y)) => Ok(Some((x, y))),
        (None, None) => Ok(None),
        _ => Err(Error::Format(format!("{}: half-specified meta", row.filename))),
    }
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.is_file() {
        return Err(Error::Format(format!("missing {}", index_path.display())));
    }
    let mut rdr = csv::Reader::from_path(&index_path).map_err(csv_err)?;
    let mut out = Vec::new();
    let mut side = None;
    for row in rdr.deserialize::<IndexRow>() {
        let row = row.map_err(csv_err)?;
        if row.label > 1 {
            return Err(Error::Format(format!("{}: label {} not in {{0,1}}", row.filename, row.label)));
        }
        let path = dir.join(&row.filename);
        if !path.is_file() {
            return Err(Error::Consistency(format!("index lists missing file {}", row.filename)));
        }
        let image = pgm::read_image(&path)?;
        let shape = image.shape().to_vec();
        if shape[1] != shape[2] {
            return Err(Error::Consistency(format!("{} is not square: {shape:?}", row.filename)));
        }
        match side {
            None => side = Some(shape[1]),
            Some(s) if s != shape[1] => {
                return Err(Error::Consistency(format!(
                    "{} is {}px, earlier images are {s}px",
                    row.filename, shape[1]
                )))
            }
            _ => {}
        }
        let meta = meta_of(&row)?;
        if let Some((x, y)) = meta {
            let s = shape[1] as f64;
            if !(0.0..s).contains(&x) || !(0.0..s).contains(&y) {
                return Err(Error::Consistency(format!("{}: meta ({x}, {y}) outside image", row.filename)));
            }
        }
        out.push(LabeledImage {
            image,
            label: row.label,
            meta,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn index_row_format() {
        let (name, label, meta) = parse_index_row("img_00007.pgm,1,31,12").unwrap();
        assert_eq!(name, "img_00007.pgm");
        assert_eq!(label, 1);
        assert_eq!(meta, Some((31.0, 12.0)));
        let (_, label, meta) = parse_index_row("img_00008.pgm,0,,").unwrap();
        assert_eq!((label, meta), (0, None));
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[]).unwrap();
        let idx = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(idx, "filename,label,meta_x,meta_y\n");
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_index_and_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
        let item = LabeledImage {
            image: Tensor::filled(&[1, 4, 4], 0.5),
            label: 1,
            meta: Some((1.0, 2.0)),
        };
        save_dataset(dir.path(), &[item]).unwrap();
        fs::remove_file(dir.path().join(image_filename(0))).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Consistency(_))));
    }
}

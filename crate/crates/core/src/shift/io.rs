//! Dataset files: CSV with the target in the first column, and the IDX
//! binary format.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Provenance, Targets};

/// Whether the first CSV column holds a real value or a class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Regression,
    Classification { classes: usize },
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![if ds.targets().is_classification() { "label".to_string() } else { "y".to_string() }];
    header.extend((1..=ds.dim()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut row = Vec::with_capacity(ds.dim() + 1);
        row.push(match ds.targets() {
            Targets::Values(v) => v[i].to_string(),
            Targets::Labels { labels, .. } => labels[i].to_string(),
        });
        row.extend(ds.x(i).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path, kind: TargetKind) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let d = r.headers()?.len().saturating_sub(1);
    if d == 0 {
        return Err(Error::Format(format!("{}: need a target column and at least one feature", path.display())));
    }
    let mut data = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{} row {}: column {j}: {e}", path.display(), line + 1)))
        };
        match kind {
            TargetKind::Regression => values.push(field(0)?),
            TargetKind::Classification { .. } => labels.push(rec[0].trim().parse::<usize>().map_err(|e| {
                Error::Format(format!("{} row {}: label: {e}", path.display(), line + 1))
            })?),
        }
        for j in 1..=d {
            data.push(field(j)?);
        }
    }
    let n = data.len() / d;
    let targets = match kind {
        TargetKind::Regression => Targets::Values(values),
        TargetKind::Classification { classes } => Targets::Labels { labels, classes },
    };
    Dataset::new(Tensor::matrix(n, d, data)?, targets, Provenance::default())
}

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let found = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: bad IDX magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let shape = (0..dims)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected: usize = shape.iter().product();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} payload bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((shape, bytes))
}

/// Reads an IDX image/label pair into a classification dataset with pixels
/// scaled to `[0, 1]` and flattened per image.
pub fn read_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (shape, pixels) = read_idx(images, IDX_IMAGES, 3)?;
    let (lshape, raw_labels) = read_idx(labels, IDX_LABELS, 1)?;
    if shape[0] != lshape[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            shape[0], lshape[0]
        )));
    }
    let d = shape[1] * shape[2];
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        Tensor::matrix(shape[0], d, data)?,
        Targets::Labels {
            labels: raw_labels.iter().map(|&l| l as usize).collect(),
            classes,
        },
        Provenance::default(),
    )
}

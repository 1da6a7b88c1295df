//! Labelled image sets and the `VQTD` container.
//!
//! ```text
//! "VQTD" version count channels height width classes   (u32 LE)
//! count * channels * height * width f32 LE images
//! count u32 LE labels
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::vit::io::{put_f32s, put_u32, Reader};
use crate::vit::FormatError;

pub const DATASET_MAGIC: &[u8; 4] = b"VQTD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// `channels x height x width` each, f32-representable values.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn image_refs(&self, idx: &[usize]) -> Vec<&Tensor> {
        idx.iter().map(|&i| &self.images[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), FormatError> {
        w.write_all(DATASET_MAGIC)?;
        for v in [
            DATASET_VERSION as usize,
            self.len(),
            self.channels,
            self.height,
            self.width,
            self.classes,
        ] {
            let v = u32::try_from(v).map_err(|_| FormatError::Header {
                field: "dataset header",
                detail: format!("{v} does not fit in u32"),
            })?;
            put_u32(w, v)?;
        }
        let shape = [self.channels, self.height, self.width];
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != shape {
                return Err(FormatError::Shape(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            put_f32s(w, img.data())?;
        }
        for &y in &self.labels {
            put_u32(w, y as u32)?;
        }
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Dataset, FormatError> {
        let mut r = Reader::new(r);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(FormatError::Version(version));
        }
        let count = r.u32("count")? as usize;
        let channels = r.u32("channels")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let classes = r.u32("classes")? as usize;
        if classes < 2 {
            return Err(FormatError::Header {
                field: "classes",
                detail: format!("{classes} classes"),
            });
        }
        let per = channels * height * width;
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let data = r.f32s(per, &format!("image {i}"))?;
            images.push(Tensor::new(vec![channels, height, width], data).expect("sized"));
        }
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let y = r.u32(&format!("label {i}"))? as usize;
            if y >= classes {
                return Err(FormatError::Header {
                    field: "label",
                    detail: format!("label {y} of sample {i} with {classes} classes"),
                });
            }
            labels.push(y);
        }
        let left = r.rest()?.len();
        if left != 0 {
            return Err(FormatError::Trailing(left));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            classes,
            images,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, FormatError> {
        Dataset::read(BufReader::new(File::open(path)?))
    }
}

//! Samples, on-disk dataset layout, synthetic data, augmentation, batching.
//!
//! Layout: `<root>/<split>/<id>_img.ppm` paired with `<root>/<split>/<id>_lab.pgm`.

pub mod augment;
pub mod batch;
pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::tensor::Tensor;

pub use augment::{color_jitter, horizontal_flip, random_crop, AugmentConfig};
pub use batch::{batch_iter, Batch, BatchIter};
pub use pnm::{encode_pnm, parse_pnm, Pnm, PnmKind};
pub use synth::{synth_generate, synth_render, PALETTE_SIZE};

pub const IMAGE_SUFFIX: &str = "_img.ppm";
pub const LABEL_SUFFIX: &str = "_lab.pgm";

/// One image `[c, h, w]` in `[0, 1]` with its `[1, h, w]` label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: LabelMap,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, label: LabelMap, id: impl Into<String>) -> Result<Self> {
        let &[_, h, w] = image.shape() else {
            return Err(shape_err!("sample image must be [c, h, w], got {:?}", image.shape()));
        };
        if label.shape() != [1, h, w] {
            return Err(shape_err!(
                "label {:?} does not match image {:?}",
                label.shape(),
                image.shape()
            ));
        }
        Ok(Sample {
            image,
            label,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: String,
    pub num_classes: usize,
    pub ignore_index: u8,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: impl Into<String>, num_classes: usize) -> Self {
        DatasetSpec {
            root: root.into(),
            split: split.into(),
            num_classes,
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    /// `(id, image path, label path)` for every pair, sorted by id.
    pub fn pairs(&self) -> Result<Vec<(String, PathBuf, PathBuf)>> {
        let dir = self.dir();
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(IMAGE_SUFFIX) {
                images.push(id.to_owned());
            } else if let Some(id) = name.strip_suffix(LABEL_SUFFIX) {
                labels.push(id.to_owned());
            }
        }
        images.sort();
        labels.sort();
        if let Some(id) = images.iter().find(|id| labels.binary_search(id).is_err()) {
            return Err(Error::Data(format!(
                "image {} has no label partner {id}{LABEL_SUFFIX}",
                dir.join(format!("{id}{IMAGE_SUFFIX}")).display()
            )));
        }
        if let Some(id) = labels.iter().find(|id| images.binary_search(id).is_err()) {
            return Err(Error::Data(format!(
                "label {} has no image partner {id}{IMAGE_SUFFIX}",
                dir.join(format!("{id}{LABEL_SUFFIX}")).display()
            )));
        }
        Ok(images
            .into_iter()
            .map(|id| {
                let img = dir.join(format!("{id}{IMAGE_SUFFIX}"));
                let lab = dir.join(format!("{id}{LABEL_SUFFIX}"));
                (id, img, lab)
            })
            .collect())
    }

    pub fn load(&self) -> Result<Vec<Sample>> {
        self.pairs()?
            .into_iter()
            .map(|(id, img, lab)| load_sample_with_id(&img, &lab, self, id))
            .collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn id_of(image_path: &Path) -> String {
    let name = image_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_suffix(IMAGE_SUFFIX)
        .map(str::to_owned)
        .unwrap_or_else(|| name.rsplit_once('.').map_or(name.clone(), |(s, _)| s.to_owned()))
}

/// Reads a P6 image scaled to `[0, 1]` and a P5 label map.
pub fn load_sample(image_path: &Path, label_path: &Path, spec: &DatasetSpec) -> Result<Sample> {
    load_sample_with_id(image_path, label_path, spec, id_of(image_path))
}

fn load_sample_with_id(image_path: &Path, label_path: &Path, spec: &DatasetSpec, id: String) -> Result<Sample> {
    let img = parse_pnm(&read(image_path)?, PnmKind::Rgb, image_path)?;
    let lab = parse_pnm(&read(label_path)?, PnmKind::Gray, label_path)?;
    if (img.width, img.height) != (lab.width, lab.height) {
        return Err(Error::Data(format!(
            "{} is {}x{} but {} is {}x{}",
            image_path.display(),
            img.width,
            img.height,
            label_path.display(),
            lab.width,
            lab.height
        )));
    }
    if let Some(i) = lab
        .pixels
        .iter()
        .position(|&v| v != spec.ignore_index && v as usize >= spec.num_classes)
    {
        return Err(Error::DataAt {
            path: label_path.to_path_buf(),
            offset: lab.header_len + i,
            message: format!(
                "label value {} is not a class in 0..{} nor the ignore value {}",
                lab.pixels[i], spec.num_classes, spec.ignore_index
            ),
        });
    }
    Ok(Sample {
        image: image_from_rgb(&img.pixels, img.height, img.width)?,
        label: LabelMap::new(1, lab.height, lab.width, lab.pixels)?,
        id,
    })
}

/// Interleaved RGB bytes to a planar `[3, h, w]` tensor in `[0, 1]`.
pub fn image_from_rgb(rgb: &[u8], h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Planar `[3, h, w]` in `[0, 1]` to interleaved RGB bytes (rounded).
pub fn image_to_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(shape_err!(
            "RGB export needs a [3, h, w] image, got {:?}",
            image.shape()
        ));
    };
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm_image(path: &Path) -> Result<Tensor> {
    let img = parse_pnm(&read(path)?, PnmKind::Rgb, path)?;
    image_from_rgb(&img.pixels, img.height, img.width)
}

pub fn write_pgm_labels(path: &Path, label: &LabelMap) -> Result<()> {
    let [n, h, w] = label.shape();
    if n != 1 {
        return Err(shape_err!("PGM export needs a single label map, got {n}"));
    }
    fs::write(path, encode_pnm(PnmKind::Gray, w, h, label.data())).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<id>_img.ppm` and `<dir>/<id>_lab.pgm`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (sample.height(), sample.width());
    let img_path = dir.join(format!("{}{IMAGE_SUFFIX}", sample.id));
    fs::write(&img_path, encode_pnm(PnmKind::Rgb, w, h, &image_to_rgb(&sample.image)?))
        .map_err(|e| Error::io(&img_path, e))?;
    write_pgm_labels(&dir.join(format!("{}{LABEL_SUFFIX}", sample.id)), &sample.label)
}

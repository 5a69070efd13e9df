//! Image sources: ordered collections of images with stable identifiers and
//! content digests used for the train/test disjointness checks.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::encoders::FeatureMap;
use crate::error::{Result, UapError};
use crate::types::{ImageTensor, Shape3};

#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub id: String,
    /// Truncated SHA-256 over the pixel values.
    pub digest: String,
    pub image: ImageTensor,
}

impl CorpusImage {
    pub fn new(id: impl Into<String>, image: ImageTensor) -> Self {
        let digest = image_digest(&image);
        Self {
            id: id.into(),
            digest,
            image,
        }
    }
}

pub fn image_digest(image: &ImageTensor) -> String {
    let mut h = Sha256::new();
    let (a, b, c) = image.shape();
    for v in [a, b, c] {
        h.update((v as u64).to_le_bytes());
    }
    for v in image.data().iter() {
        h.update(v.to_le_bytes());
    }
    crate::encoders::hex_digest(&h.finalize()[..8])
}

/// A file that could not be decoded during ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    images: Vec<CorpusImage>,
    pub skipped: Vec<SkippedFile>,
}

impl Corpus {
    pub fn new(images: Vec<CorpusImage>) -> Self {
        Self {
            images,
            skipped: Vec::new(),
        }
    }

    pub fn from_tensors(prefix: &str, images: impl IntoIterator<Item = ImageTensor>) -> Self {
        Self::new(
            images
                .into_iter()
                .enumerate()
                .map(|(i, img)| CorpusImage::new(format!("{prefix}{i:04}"), img))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &CorpusImage {
        &self.images[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CorpusImage> {
        self.images.iter()
    }

    pub fn images(&self) -> &[CorpusImage] {
        &self.images
    }

    /// First `n` images, in order.
    pub fn take(&self, n: usize) -> Corpus {
        Corpus::new(self.images.iter().take(n).cloned().collect())
    }

    pub fn digests(&self) -> BTreeSet<String> {
        self.images.iter().map(|i| i.digest.clone()).collect()
    }

    pub fn check_shape(&self, shape: Shape3) -> Result<()> {
        for img in &self.images {
            if img.image.shape() != shape {
                return Err(UapError::Contract(format!(
                    "image {} has shape {:?}, expected {:?}",
                    img.id,
                    img.image.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Fails if any image of `self` also appears (by content) in `other`.
    pub fn ensure_disjoint(&self, other: &BTreeSet<String>, what: &str) -> Result<()> {
        if let Some(img) = self.images.iter().find(|i| other.contains(&i.digest)) {
            return Err(UapError::Config(format!(
                "image {} appears in both the test corpus and the {what}",
                img.id
            )));
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a CorpusImage;
    type IntoIter = std::slice::Iter<'a, CorpusImage>;

    fn into_iter(self) -> Self::IntoIter {
        self.images.iter()
    }
}

/// Reads every decodable image under `dir` (non-recursive) in lexicographic
/// file-name order, resized to `target` and scaled to [0,1].
///
/// Undecodable files are skipped and listed in [`Corpus::skipped`].
pub fn ingest_corpus(dir: &Path, target: Shape3) -> Result<Corpus> {
    let (h, w, c) = target;
    if c != 1 && c != 3 {
        return Err(UapError::Config(format!("unsupported channel count {c}")));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| UapError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut corpus = Corpus::default();
    for path in paths {
        match image::open(&path) {
            Ok(img) => {
                let resized = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
                let data = if c == 3 {
                    let rgb = resized.to_rgb8();
                    Array3::from_shape_fn((h, w, 3), |(i, j, k)| {
                        rgb.get_pixel(j as u32, i as u32)[k] as f64 / 255.0
                    })
                } else {
                    let l = resized.to_luma8();
                    Array3::from_shape_fn((h, w, 1), |(i, j, _)| l.get_pixel(j as u32, i as u32)[0] as f64 / 255.0)
                };
                let id = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                corpus.images.push(CorpusImage::new(
                    id,
                    ImageTensor::new(data).expect("decoded pixels are finite"),
                ));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                corpus.skipped.push(SkippedFile {
                    path,
                    reason: e.to_string(),
                });
            }
        }
    }
    if corpus.is_empty() {
        return Err(UapError::Config(format!("no decodable images in {}", dir.display())));
    }
    Ok(corpus)
}

/// Writes an image in [0,1] as an 8-bit PNG (values are clamped).
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w, c) = image.shape();
    let data = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (data[[y as usize, x as usize, k.min(c - 1)]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => UapError::io(path, io),
        other => UapError::format(path, other.to_string()),
    })
}

/// Clean feature maps per corpus index, computed on demand.
pub(crate) struct FeatureCache {
    slots: Vec<Option<FeatureMap>>,
}

impl FeatureCache {
    pub(crate) fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub(crate) fn get_or_insert_with(
        &mut self,
        i: usize,
        f: impl FnOnce() -> Result<FeatureMap>,
    ) -> Result<&FeatureMap> {
        if self.slots[i].is_none() {
            self.slots[i] = Some(f()?);
        }
        Ok(self.slots[i].as_ref().expect("filled"))
    }

    pub(crate) fn get(&self, i: usize) -> Option<&FeatureMap> {
        self.slots[i].as_ref()
    }
}

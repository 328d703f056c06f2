//! Datasets, fold splitting and sample preprocessing.

pub mod cornell;
pub mod jacquard;
pub mod preprocess;
pub mod split;
pub mod synthetic;

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use image::RgbImage;

use crate::codec::GraspRectangle;
use crate::error::{Error, Result};

pub use preprocess::{preprocess, Augment, Channels, PrepConfig, Prepared, Transform};
pub use split::{split, Fold, SplitMode};

/// Single-channel float image, row-major. Zero and non-finite values mark
/// missing measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "depth image",
                format!("{} values for {width}x{height}", data.len()),
            ));
        }
        Ok(DepthImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        DepthImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn has_valid(&self) -> bool {
        self.data.iter().any(|v| is_valid_depth(*v))
    }
}

pub fn is_valid_depth(v: f32) -> bool {
    v.is_finite() && v != 0.0
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Option<RgbImage>,
    pub depth: Option<DepthImage>,
    /// Positive grasps in pixel coordinates of the stored images.
    pub rects: Vec<GraspRectangle>,
    pub object_id: String,
    pub source: String,
}

impl Sample {
    pub fn new(
        rgb: Option<RgbImage>,
        depth: Option<DepthImage>,
        rects: Vec<GraspRectangle>,
        object_id: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let source = source.into();
        match (&rgb, &depth) {
            (None, None) => {
                return Err(Error::Invalid(format!("sample {source} has neither rgb nor depth")))
            }
            (Some(r), Some(d)) if (r.width() as usize, r.height() as usize) != (d.width, d.height) => {
                return Err(Error::shape(
                    "sample",
                    format!(
                        "{source}: rgb {}x{} vs depth {}x{}",
                        r.width(),
                        r.height(),
                        d.width,
                        d.height
                    ),
                ))
            }
            _ => {}
        }
        Ok(Sample {
            rgb,
            depth,
            rects,
            object_id: object_id.into(),
            source,
        })
    }

    /// `(width, height)` of the stored images.
    pub fn size(&self) -> (usize, usize) {
        match (&self.rgb, &self.depth) {
            (Some(r), _) => (r.width() as usize, r.height() as usize),
            (None, Some(d)) => (d.width, d.height),
            (None, None) => (0, 0),
        }
    }

    /// A sample without grasps cannot be used for training.
    pub fn usable(&self) -> bool {
        !self.rects.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Cornell,
    Jacquard,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Cornell => "cornell",
            Provenance::Jacquard => "jacquard",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cornell" => Ok(Provenance::Cornell),
            "jacquard" => Ok(Provenance::Jacquard),
            "synthetic" => Ok(Provenance::Synthetic),
            _ => Err(Error::config(
                "dataset",
                format!("unknown dataset {s:?} (expected cornell, jacquard or synthetic)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples that carry at least one grasp.
    pub fn usable_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].usable()).collect()
    }
}

/// Load an image file as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::parse(path, e.to_string()))
}

/// Load a single-channel depth image from TIFF (any sample type) or PNG
/// (8/16-bit grey, or colour reduced to its first channel).
pub fn load_depth(path: &Path) -> Result<DepthImage> {
    let is_tiff = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"));
    if is_tiff {
        return load_depth_tiff(path);
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let g = img.to_luma32f();
    let scale = match img.color() {
        image::ColorType::L16 | image::ColorType::La16 => 65535.0,
        image::ColorType::Rgb32F | image::ColorType::Rgba32F => 1.0,
        _ => 255.0,
    };
    let (w, h) = (g.width() as usize, g.height() as usize);
    DepthImage::new(w, h, g.into_raw().into_iter().map(|v| v * scale).collect())
}

fn load_depth_tiff(path: &Path) -> Result<DepthImage> {
    use tiff::decoder::{Decoder, DecodingResult};
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: tiff::TiffError| Error::parse(path, e.to_string());
    let mut dec = Decoder::new(std::io::BufReader::new(file)).map_err(bad)?;
    let (w, h) = dec.dimensions().map_err(bad)?;
    let (w, h) = (w as usize, h as usize);
    let data: Vec<f32> = match dec.read_image().map_err(bad)? {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(Error::parse(path, "unsupported TIFF sample type")),
    };
    if data.len() != w * h {
        return Err(Error::parse(
            path,
            format!("expected one channel, got {} values for {w}x{h}", data.len()),
        ));
    }
    DepthImage::new(w, h, data)
}

/// Write a depth image as a 32-bit float TIFF.
pub fn save_depth_tiff(img: &DepthImage, path: &Path) -> Result<()> {
    use tiff::encoder::{colortype::Gray32Float, TiffEncoder};
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: tiff::TiffError| Error::parse(path, e.to_string());
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(bad)?;
    enc.write_image::<Gray32Float>(img.width as u32, img.height as u32, &img.data)
        .map_err(bad)?;
    Ok(())
}

/// Files below `root` (recursively) whose name satisfies `keep`, sorted by
/// path so iteration order depends only on directory contents.
pub(crate) fn find_files(root: &Path, keep: &dyn Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            let ft = entry.file_type().map_err(|e| Error::io(&path, e))?;
            if ft.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()).is_some_and(keep) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Open a dataset by kind.
pub fn load_dataset(kind: Provenance, root: &Path) -> Result<Dataset> {
    match kind {
        Provenance::Cornell => cornell::parse_cornell(root),
        Provenance::Jacquard => jacquard::parse_jacquard(root),
        Provenance::Synthetic => Err(Error::config(
            "dataset",
            "synthetic data is generated, not loaded from a directory",
        )),
    }
}

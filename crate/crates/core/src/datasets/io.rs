use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, SyntheticSpec};
use crate::domain::{GroundTruthMask, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassesFile {
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticSpec>,
    pub ids: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Writes the dataset in the standard layout under `root`. Channel values
/// are stored as 8-bit, so images made of `k / 255` values round-trip
/// exactly.
pub fn save_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<(), DatasetError> {
    dataset.validate()?;
    let root = root.as_ref();
    for dir in [root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    dataset.images.par_iter().zip(&dataset.masks).try_for_each(|(img, mask)| {
        let (h, w) = (img.height() as u32, img.width() as u32);
        let rgb: Vec<u8> = img.pixels().iter().map(|&v| to_u8(v)).collect();
        let path = image_path(root, img.id());
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, rgb)
            .expect("buffer sized from image")
            .save(&path)
            .map_err(|e| DatasetError::Decode { path: path.clone(), message: e.to_string() })?;
        let path = mask_path(root, mask.image_id());
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, mask.classes().to_vec())
            .expect("buffer sized from mask")
            .save(&path)
            .map_err(|e| DatasetError::Decode { path: path.clone(), message: e.to_string() })
    })?;
    write_json(
        &root.join("classes.json"),
        &ClassesFile { names: dataset.class_names.clone(), palette: dataset.palette.clone(), keys: dataset.keys.clone() },
    )?;
    let first = &dataset.images.first();
    write_json(
        &root.join("manifest.json"),
        &Manifest {
            num_images: dataset.len(),
            height: first.map_or(0, |i| i.height()),
            width: first.map_or(0, |i| i.width()),
            num_classes: dataset.num_classes(),
            seed: dataset.spec.as_ref().map(|s| s.seed),
            spec: dataset.spec.clone(),
            ids: dataset.images.iter().map(|i| i.id().to_string()).collect(),
        },
    )
}

/// PNG bytes of an image, 8 bits per channel.
pub fn encode_png(image: &Image) -> Vec<u8> {
    let rgb: Vec<u8> = image.pixels().iter().map(|&v| to_u8(v)).collect();
    let buffer = ImageBuffer::<Rgb<u8>, _>::from_raw(image.width() as u32, image.height() as u32, rgb)
        .expect("buffer sized from image");
    let mut out = std::io::Cursor::new(Vec::new());
    buffer.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn decode(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    let reader = image::ImageReader::open(path).map_err(io_err(path))?;
    reader.decode().map_err(|e| DatasetError::Decode { path: path.to_path_buf(), message: e.to_string() })
}

fn load_pair(root: &Path, id: &str, num_classes: usize) -> Result<(Image, GroundTruthMask), DatasetError> {
    let ipath = image_path(root, id);
    let rgb = decode(&ipath)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    let image = Image::new(id, h, w, pixels)?;

    let mpath = mask_path(root, id);
    if !mpath.exists() {
        return Err(DatasetError::MissingMask(id.to_string()));
    }
    let mask = match decode(&mpath)? {
        image::DynamicImage::ImageLuma8(m) => m,
        other => {
            return Err(DatasetError::Decode {
                path: mpath,
                message: format!("mask must be 8-bit single channel, found {:?}", other.color()),
            })
        }
    };
    let (mw, mh) = (mask.width() as usize, mask.height() as usize);
    if (mh, mw) != (h, w) {
        return Err(DatasetError::DimensionMismatch { id: id.to_string(), image_h: h, image_w: w, mask_h: mh, mask_w: mw });
    }
    let mask = GroundTruthMask::new(id, h, w, num_classes, mask.into_raw())?;
    Ok((image, mask))
}

/// Image ids from the manifest, or the sorted stems of `images/*.png` when
/// there is no manifest.
fn list_ids(root: &Path) -> Result<(Vec<String>, Option<Manifest>), DatasetError> {
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let manifest: Manifest = read_json(&manifest_path)?;
        return Ok((manifest.ids.clone(), Some(manifest)));
    }
    let dir = root.join("images");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok((ids, None))
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let root = root.as_ref();
    let classes: ClassesFile = read_json(&root.join("classes.json"))?;
    if classes.names.len() < 2 {
        return Err(DatasetError::Inconsistent(format!("classes.json lists {} classes", classes.names.len())));
    }
    let (ids, manifest) = list_ids(root)?;
    let pairs: Vec<(Image, GroundTruthMask)> =
        ids.par_iter().map(|id| load_pair(root, id, classes.names.len())).collect::<Result<_, _>>()?;
    let (images, masks) = pairs.into_iter().unzip();
    let dataset = Dataset {
        images,
        masks,
        class_names: classes.names,
        palette: classes.palette,
        keys: classes.keys,
        spec: manifest.and_then(|m| m.spec),
    };
    dataset.validate()?;
    Ok(dataset)
}

//! Dataset ingest and representation: directory-format Re-ID datasets with
//! `<identity>_c<camera>_<rest>.<ext>` filenames, a CSV-like manifest route
//! for everything else, and the synthetic multi-domain generator.

pub mod sequence;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

pub use sequence::{sequence_config, SequenceOrder, SequenceStep};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    /// In-memory (H, W, 3) 8-bit pixels, shared so records stay cheap to clone.
    Memory(Arc<Array3<u8>>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Contiguous identity label in [1, n_id] within this record's split group.
    pub identity: u32,
    /// Identity as found in the source (filename or manifest).
    pub orig_identity: u32,
    pub camera: String,
    pub source: ImageSource,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub train: Vec<ImageRecord>,
    pub query: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
    pub n_train_ids: usize,
    pub cameras: BTreeSet<String>,
}

impl DatasetSpec {
    pub fn train_labels(&self) -> Vec<u32> {
        self.train.iter().map(|r| r.identity).collect()
    }

    pub fn n_train_images(&self) -> usize {
        self.train.len()
    }
}

/// Parse `<identity>_c<camera>_<rest>.<ext>` into (identity, camera).
pub fn parse_reid_filename(name: &str) -> Option<(u32, u32)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let mut parts = stem.split('_');
    let identity: u32 = parts.next()?.parse().ok()?;
    let cam_part = parts.next()?;
    let camera: u32 = cam_part.strip_prefix('c')?.parse().ok()?;
    parts.next()?; // require the `<rest>` component
    Some((identity, camera))
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn scan_split(dir: &Path) -> Result<(Vec<(u32, u32, PathBuf)>, usize)> {
    let mut raws = Vec::new();
    let mut skipped = 0usize;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    for path in paths {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        match parse_reid_filename(name) {
            Some((identity, camera)) => raws.push((identity, camera, path)),
            None => skipped += 1,
        }
    }
    Ok((raws, skipped))
}

/// Map original identities to contiguous labels starting at 1, in sorted
/// original order (a bijection by construction).
fn remap_identities(ids: &BTreeSet<u32>) -> BTreeMap<u32, u32> {
    ids.iter()
        .enumerate()
        .map(|(i, &orig)| (orig, i as u32 + 1))
        .collect()
}

/// Load a directory-format dataset. `query/` and `gallery/` are required;
/// `train/` may be absent, which yields an evaluation-only dataset.
pub fn load_reid_directory(root: &Path) -> Result<DatasetSpec> {
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    for split in ["query", "gallery"] {
        if !root.join(split).is_dir() {
            return Err(Error::MissingSplit(root.to_path_buf(), match split {
                "query" => "query",
                _ => "gallery",
            }));
        }
    }
    let (query_raw, query_skipped) = scan_split(&root.join("query"))?;
    let (gallery_raw, gallery_skipped) = scan_split(&root.join("gallery"))?;
    let train_dir = root.join("train");
    let (train_raw, train_skipped) = if train_dir.is_dir() {
        scan_split(&train_dir)?
    } else {
        (Vec::new(), 0)
    };
    let skipped = query_skipped + gallery_skipped + train_skipped;
    if skipped > 0 {
        eprintln!("warning: {name}: skipped {skipped} files with malformed names");
    }
    if query_raw.is_empty() || gallery_raw.is_empty() {
        return Err(Error::NoImages(root.to_path_buf()));
    }

    let train_ids: BTreeSet<u32> = train_raw.iter().map(|r| r.0).collect();
    let test_ids: BTreeSet<u32> = query_raw
        .iter()
        .chain(gallery_raw.iter())
        .map(|r| r.0)
        .collect();
    if let Some(&shared) = train_ids.intersection(&test_ids).next() {
        return Err(Error::SplitOverlap(name, shared));
    }
    let train_map = remap_identities(&train_ids);
    let test_map = remap_identities(&test_ids);

    let build = |raws: Vec<(u32, u32, PathBuf)>, map: &BTreeMap<u32, u32>| -> Vec<ImageRecord> {
        raws.into_iter()
            .map(|(orig, cam, path)| ImageRecord {
                identity: map[&orig],
                orig_identity: orig,
                camera: format!("c{cam}"),
                source: ImageSource::Path(path),
            })
            .collect()
    };
    let train = build(train_raw, &train_map);
    let query = build(query_raw, &test_map);
    let gallery = build(gallery_raw, &test_map);
    let cameras = train
        .iter()
        .chain(query.iter())
        .chain(gallery.iter())
        .map(|r| r.camera.clone())
        .collect();
    Ok(DatasetSpec {
        name,
        n_train_ids: train_ids.len(),
        train,
        query,
        gallery,
        cameras,
    })
}

/// Manifest ingest for datasets that do not follow the filename convention.
/// Lines are `split,path,identity,camera`; paths are relative to the
/// manifest's directory; a header line is allowed.
pub fn load_manifest(manifest: &Path) -> Result<DatasetSpec> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let name = base
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut raw: BTreeMap<&str, Vec<(u32, String, PathBuf)>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("split")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "{}: line {} has {} fields, expected 4",
                manifest.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let split = match fields[0] {
            s @ ("train" | "query" | "gallery") => s,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "{}: unknown split `{other}` on line {}",
                    manifest.display(),
                    lineno + 1
                )))
            }
        };
        let identity: u32 = fields[2].parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "{}: bad identity `{}` on line {}",
                manifest.display(),
                fields[2],
                lineno + 1
            ))
        })?;
        raw.entry(split).or_default().push((
            identity,
            fields[3].to_string(),
            base.join(fields[1]),
        ));
    }
    let empty = Vec::new();
    let train_raw = raw.get("train").unwrap_or(&empty);
    let query_raw = raw.get("query").unwrap_or(&empty);
    let gallery_raw = raw.get("gallery").unwrap_or(&empty);
    if query_raw.is_empty() || gallery_raw.is_empty() {
        return Err(Error::NoImages(manifest.to_path_buf()));
    }
    let train_ids: BTreeSet<u32> = train_raw.iter().map(|r| r.0).collect();
    let test_ids: BTreeSet<u32> = query_raw
        .iter()
        .chain(gallery_raw.iter())
        .map(|r| r.0)
        .collect();
    if let Some(&shared) = train_ids.intersection(&test_ids).next() {
        return Err(Error::SplitOverlap(name, shared));
    }
    let train_map = remap_identities(&train_ids);
    let test_map = remap_identities(&test_ids);
    let build = |raws: &[(u32, String, PathBuf)], map: &BTreeMap<u32, u32>| -> Vec<ImageRecord> {
        raws.iter()
            .map(|(orig, cam, path)| ImageRecord {
                identity: map[orig],
                orig_identity: *orig,
                camera: cam.clone(),
                source: ImageSource::Path(path.clone()),
            })
            .collect()
    };
    let train = build(train_raw, &train_map);
    let query = build(query_raw, &test_map);
    let gallery = build(gallery_raw, &test_map);
    let cameras = train
        .iter()
        .chain(query.iter())
        .chain(gallery.iter())
        .map(|r| r.camera.clone())
        .collect();
    Ok(DatasetSpec {
        name,
        n_train_ids: train_ids.len(),
        train,
        query,
        gallery,
        cameras,
    })
}

/// Resolve a dataset argument: a directory in the standard layout, a
/// directory containing `manifest.csv`, or a manifest file itself.
pub fn load_dataset(path: &Path) -> Result<DatasetSpec> {
    if path.is_file() {
        return load_manifest(path);
    }
    let manifest = path.join("manifest.csv");
    if manifest.is_file() {
        return load_manifest(&manifest);
    }
    load_reid_directory(path)
}

fn decode_u8_image(record: &ImageRecord) -> Result<Array3<u8>> {
    match &record.source {
        ImageSource::Memory(pixels) => Ok(pixels.as_ref().clone()),
        ImageSource::Path(path) => {
            let img = image::open(path)?.to_rgb8();
            let (w, h) = img.dimensions();
            let mut out = Array3::zeros((h as usize, w as usize, 3));
            for (x, y, pixel) in img.enumerate_pixels() {
                for c in 0..3 {
                    out[[y as usize, x as usize, c]] = pixel[c];
                }
            }
            Ok(out)
        }
    }
}

fn resize_u8(pixels: &Array3<u8>, h: usize, w: usize) -> Array3<u8> {
    let (sh, sw, _) = pixels.dim();
    if sh == h && sw == w {
        return pixels.clone();
    }
    let mut buf = image::RgbImage::new(sw as u32, sh as u32);
    for y in 0..sh {
        for x in 0..sw {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([pixels[[y, x, 0]], pixels[[y, x, 1]], pixels[[y, x, 2]]]),
            );
        }
    }
    let resized = image::imageops::resize(
        &buf,
        w as u32,
        h as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = pixel[c];
        }
    }
    out
}

/// Decode a record into the resized 8-bit (H, W, 3) form used for exemplar
/// storage and byte accounting.
pub fn record_to_u8(record: &ImageRecord, h: usize, w: usize) -> Result<Array3<u8>> {
    Ok(resize_u8(&decode_u8_image(record)?, h, w))
}

/// Decode a record into the (3, H, W) float tensor fed to the backbone,
/// scaled to [0, 1].
pub fn record_to_tensor(record: &ImageRecord, h: usize, w: usize) -> Result<Array3<f32>> {
    Ok(u8_to_tensor(&record_to_u8(record, h, w)?))
}

pub fn u8_to_tensor(pixels: &Array3<u8>) -> Array3<f32> {
    let (h, w, _) = pixels.dim();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = pixels[[y, x, c]] as f32 / 255.0;
            }
        }
    }
    out
}

pub fn stack_batch(tensors: &[Array3<f32>]) -> Array4<f32> {
    assert!(!tensors.is_empty());
    let (c, h, w) = tensors[0].dim();
    let mut out = Array4::zeros((tensors.len(), c, h, w));
    for (i, t) in tensors.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(t);
    }
    out
}

/// Write a dataset to disk as 8-bit PNG files plus a manifest, preserving
/// original identities and camera ids.
pub fn materialize_dataset(spec: &DatasetSpec, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("split,path,identity,camera\n");
    for (split, records) in [
        ("train", &spec.train),
        ("query", &spec.query),
        ("gallery", &spec.gallery),
    ] {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, record) in records.iter().enumerate() {
            let pixels = decode_u8_image(record)?;
            let (h, w, _) = pixels.dim();
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            pixels[[y, x, 0]],
                            pixels[[y, x, 1]],
                            pixels[[y, x, 2]],
                        ]),
                    );
                }
            }
            let rel = format!("{split}/{:05}.png", i);
            let path = dir.join(&rel);
            img.save(&path)?;
            manifest.push_str(&format!(
                "{split},{rel},{},{}\n",
                record.orig_identity, record.camera
            ));
        }
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filename_parsing() {
        assert_eq!(parse_reid_filename("0042_c3_000151.jpg"), Some((42, 3)));
        assert_eq!(parse_reid_filename("1_c1_0.png"), Some((1, 1)));
        assert_eq!(parse_reid_filename("notaname.jpg"), None);
        assert_eq!(parse_reid_filename("12_d3_x.jpg"), None);
        assert_eq!(parse_reid_filename("12_c3.jpg"), None);
    }

    #[test]
    fn remap_is_contiguous_bijection() {
        let ids: BTreeSet<u32> = [7, 42, 9].into();
        let map = remap_identities(&ids);
        let mut values: Vec<u32> = map.values().cloned().collect();
        values.sort();
        assert_eq!(values, vec![1, 2, 3]);
        assert_eq!(map[&7], 1);
        assert_eq!(map[&9], 2);
        assert_eq!(map[&42], 3);
    }

    #[test]
    fn u8_tensor_round() {
        let mut px = Array3::<u8>::zeros((2, 2, 3));
        px[[0, 0, 0]] = 255;
        px[[1, 1, 2]] = 51;
        let t = u8_to_tensor(&px);
        assert_eq!(t.dim(), (3, 2, 2));
        assert!((t[[0, 0, 0]] - 1.0).abs() < 1e-6);
        assert!((t[[2, 1, 1]] - 0.2).abs() < 1e-6);
    }
}

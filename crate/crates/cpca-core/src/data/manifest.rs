//! Plain-text dataset manifests plus PNG trees on disk.
//!
//! Layout written by [`save_dataset`]:
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/images/<id>.png    8-bit RGB
//! <dir>/labels/<id>.png    8-bit single channel, 255 = ignore
//! ```
//!
//! Manifest format: `key = value` lines with `entry` repeated per sample as
//! `entry = <domain>,<image path>,<label path>,<id>`, paths relative to the
//! manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{png_io, Dataset, Domain, Sample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Write a dataset as PNGs plus a manifest under `dir`. Returns the
/// manifest path. Files are written via temp-then-rename.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;

    ds.samples
        .par_iter()
        .try_for_each(|s| -> Result<()> {
            let (h, w) = (s.height(), s.width());
            let mut rgb = vec![0u8; h * w * 3];
            for c in 0..3 {
                for p in 0..h * w {
                    rgb[p * 3 + c] = (s.image.data()[c * h * w + p] * 255.0).round() as u8;
                }
            }
            png_io::write_rgb8(&images.join(format!("{}.png", s.id)), w, h, &rgb)?;
            png_io::write_gray8(&labels.join(format!("{}.png", s.id)), w, h, &s.labels.data)?;
            Ok(())
        })?;

    let mut text = String::new();
    writeln!(text, "# CPCA dataset manifest").unwrap();
    writeln!(text, "version = 1").unwrap();
    writeln!(text, "num_classes = {}", ds.num_classes).unwrap();
    writeln!(text, "class_names = {}", ds.class_names.join(",")).unwrap();
    if let Some(seed) = ds.seed {
        writeln!(text, "seed = {seed}").unwrap();
    }
    for s in &ds.samples {
        writeln!(
            text,
            "entry = {},images/{id}.png,labels/{id}.png,{id}",
            s.domain.as_str(),
            id = s.id
        )
        .unwrap();
    }
    let path = dir.join(MANIFEST_NAME);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Atomically replace `path` with `bytes` (write temp, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a dataset from a manifest file.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };

    let mut num_classes: Option<usize> = None;
    let mut class_names: Vec<String> = Vec::new();
    let mut seed: Option<u64> = None;
    let mut entries: Vec<(Domain, String, String, String)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "version" => {
                if value != "1" {
                    return Err(parse_err(format!("unsupported manifest version {value}")));
                }
            }
            "num_classes" => {
                num_classes = Some(value.parse().map_err(|_| {
                    parse_err(format!("line {}: bad num_classes `{value}`", lineno + 1))
                })?);
            }
            "class_names" => {
                class_names = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            "seed" => {
                seed = Some(value.parse().map_err(|_| {
                    parse_err(format!("line {}: bad seed `{value}`", lineno + 1))
                })?);
            }
            "entry" => {
                let fields: Vec<&str> = value.split(',').map(|s| s.trim()).collect();
                if fields.len() != 4 {
                    return Err(parse_err(format!(
                        "line {}: entry needs `domain,image,label,id`",
                        lineno + 1
                    )));
                }
                let domain = Domain::parse(fields[0]).ok_or_else(|| {
                    parse_err(format!("line {}: unknown domain `{}`", lineno + 1, fields[0]))
                })?;
                entries.push((
                    domain,
                    fields[1].to_string(),
                    fields[2].to_string(),
                    fields[3].to_string(),
                ));
            }
            other => return Err(parse_err(format!("unknown manifest key `{other}`"))),
        }
    }

    let num_classes = num_classes.ok_or_else(|| parse_err("missing num_classes".into()))?;
    if num_classes < 2 {
        return Err(parse_err("num_classes must be >= 2".into()));
    }
    if entries.is_empty() {
        return Err(parse_err("manifest has no entries".into()));
    }
    if class_names.is_empty() {
        class_names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    }
    if class_names.len() != num_classes {
        return Err(parse_err(format!(
            "{} class names for {} classes",
            class_names.len(),
            num_classes
        )));
    }

    let samples: Result<Vec<Sample>> = entries
        .par_iter()
        .map(|(domain, image_rel, label_rel, id)| load_sample(&root, *domain, image_rel, label_rel, id))
        .collect();

    let ds = Dataset {
        num_classes,
        class_names,
        samples: samples?,
        seed,
    };
    for s in &ds.samples {
        s.labels.validate(num_classes).map_err(|e| Error::DatasetLoad {
            entry: s.id.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(ds)
}

fn load_sample(
    root: &Path,
    domain: Domain,
    image_rel: &str,
    label_rel: &str,
    id: &str,
) -> Result<Sample> {
    let wrap = |e: Error| Error::DatasetLoad {
        entry: id.to_string(),
        reason: e.to_string(),
    };
    let (iw, ih, rgb) = png_io::read_rgb8(&root.join(image_rel)).map_err(wrap)?;
    let (lw, lh, lab) = png_io::read_gray8(&root.join(label_rel)).map_err(wrap)?;
    if (iw, ih) != (lw, lh) {
        return Err(Error::DatasetLoad {
            entry: id.to_string(),
            reason: format!("image {iw}x{ih} vs label {lw}x{lh}"),
        });
    }
    let mut image = Tensor::zeros(&[3, ih, iw]);
    for p in 0..ih * iw {
        for c in 0..3 {
            image.data_mut()[c * ih * iw + p] = rgb[p * 3 + c] as f64 / 255.0;
        }
    }
    Ok(Sample {
        image,
        labels: LabelMap::new(ih, iw, lab),
        domain,
        id: id.to_string(),
    })
}

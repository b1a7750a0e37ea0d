//! Color-coded label tiles: palette parsing and RGB <-> class-index maps.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// Ordered (R, G, B) -> class-index mapping; unmatched colors fall back to
/// [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<(u8, u8, u8)>,
    names: Vec<String>,
}

impl Palette {
    /// Build from (color, name) entries ordered by class index.
    pub fn new(entries: Vec<((u8, u8, u8), String)>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Contract("palette needs at least 2 classes".into()));
        }
        let mut seen = HashMap::new();
        for (i, (c, _)) in entries.iter().enumerate() {
            if let Some(prev) = seen.insert(*c, i) {
                return Err(Error::Contract(format!(
                    "palette color {c:?} assigned to classes {prev} and {i}"
                )));
            }
        }
        let (colors, names) = entries.into_iter().unzip();
        Ok(Palette { colors, names })
    }

    pub fn num_classes(&self) -> usize {
        self.colors.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn color(&self, class: usize) -> (u8, u8, u8) {
        self.colors[class]
    }

    /// Parse a palette file: one `index r g b name` line per class,
    /// `#` comments allowed. Indices must form 0..K-1.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let mut rows: Vec<(usize, (u8, u8, u8), String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(parse_err(format!(
                    "line {}: expected `index r g b name`, got `{line}`",
                    lineno + 1
                )));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("line {}: bad index", lineno + 1)))?;
            let mut rgb = [0u8; 3];
            for (slot, f) in rgb.iter_mut().zip(&fields[1..4]) {
                *slot = f
                    .parse()
                    .map_err(|_| parse_err(format!("line {}: bad color component", lineno + 1)))?;
            }
            rows.push((idx, (rgb[0], rgb[1], rgb[2]), fields[4].to_string()));
        }
        rows.sort_by_key(|r| r.0);
        for (expect, row) in rows.iter().enumerate() {
            if row.0 != expect {
                return Err(parse_err(format!(
                    "class indices must form 0..K-1, missing or duplicate index {expect}"
                )));
            }
        }
        Palette::new(rows.into_iter().map(|(_, c, n)| (c, n)).collect())
    }
}

/// Decode a color-coded label tile. Exact palette colors map to their class
/// index, anything else maps to [`IGNORE`]. Returns the map and the number
/// of unmatched pixels.
pub fn rgb_to_labels(rgb: &[u8], height: usize, width: usize, palette: &Palette) -> (LabelMap, usize) {
    assert_eq!(rgb.len(), height * width * 3);
    let lut: HashMap<(u8, u8, u8), u8> = palette
        .colors
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i as u8))
        .collect();
    let mut data = Vec::with_capacity(height * width);
    let mut unmatched = 0usize;
    for px in rgb.chunks_exact(3) {
        match lut.get(&(px[0], px[1], px[2])) {
            Some(&cls) => data.push(cls),
            None => {
                data.push(IGNORE);
                unmatched += 1;
            }
        }
    }
    (LabelMap::new(height, width, data), unmatched)
}

/// Encode a label map back to palette colors. [`IGNORE`] pixels render
/// black, which is deliberately outside every shipped palette.
pub fn labels_to_rgb(labels: &LabelMap, palette: &Palette) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.data.len() * 3);
    for &v in &labels.data {
        if v == IGNORE || (v as usize) >= palette.num_classes() {
            out.extend_from_slice(&[0, 0, 0]);
        } else {
            let (r, g, b) = palette.colors[v as usize];
            out.extend_from_slice(&[r, g, b]);
        }
    }
    out
}

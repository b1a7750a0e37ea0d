//! Synthetic paired-domain segmentation data.
//!
//! Class identity is carried entirely by shape family and binary texture
//! period; color never encodes class, so the per-domain style transform
//! (channel affine + optional band rotation + noise) is purely non-causal
//! by construction.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Domain, Sample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Per-domain style transform applied to the shared luminance rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleShift {
    pub source_gain: [f64; 3],
    pub source_bias: [f64; 3],
    pub target_gain: [f64; 3],
    pub target_bias: [f64; 3],
    /// Rotate target channels (R,G,B) -> (G,B,R); stands in for a band swap.
    pub permute_target_channels: bool,
    /// Std-dev of per-pixel Gaussian noise added after the affine.
    pub noise_sigma: f64,
}

impl Default for StyleShift {
    /// Desk-benchmark shift: band rotation plus a contrast-compressing
    /// affine on the target side.
    fn default() -> Self {
        StyleShift {
            source_gain: [1.0, 0.85, 0.7],
            source_bias: [0.0, 0.05, 0.12],
            target_gain: [0.55, 0.85, 0.6],
            target_bias: [0.28, 0.02, 0.18],
            permute_target_channels: true,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub shift: StyleShift,
    /// Same label maps in both domains, index by index.
    pub paired: bool,
    /// Minimum fraction of pixels each class must occupy in every map.
    pub min_class_coverage: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            height: 64,
            width: 64,
            n_source: 200,
            n_target: 200,
            shift: StyleShift::default(),
            paired: true,
            min_class_coverage: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Contract("synth: num_classes must be >= 2".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Contract("synth: image size must be >= 32".into()));
        }
        for g in self.shift.source_gain.iter().chain(&self.shift.target_gain) {
            if *g <= 0.0 {
                return Err(Error::Contract("synth: gains must be > 0".into()));
            }
        }
        if self.shift.noise_sigma < 0.0 {
            return Err(Error::Contract("synth: noise sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.min_class_coverage) {
            return Err(Error::Contract("synth: coverage must be in [0, 1)".into()));
        }
        if self.min_class_coverage * self.num_classes as f64 > 1.0 {
            return Err(Error::Contract(
                "synth: min_class_coverage * num_classes must be <= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    let family = match (c - 1) % 3 {
                        0 => "vstripe",
                        1 => "hstripe",
                        _ => "checker",
                    };
                    format!("{family}_{c}")
                }
            })
            .collect()
    }
}

/// Generate the source and target datasets. Deterministic in `(cfg, seed)`:
/// every sample draws from a stream derived from the seed and its index, so
/// generation order (and parallelism) cannot change the result.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let source = gen_domain(cfg, seed, Domain::Source, cfg.n_source)?;
    let target = gen_domain(cfg, seed, Domain::Target, cfg.n_target)?;
    Ok((source, target))
}

fn gen_domain(cfg: &SynthConfig, seed: u64, domain: Domain, count: usize) -> Result<Dataset> {
    let samples: Result<Vec<Sample>> = (0..count)
        .into_par_iter()
        .map(|i| gen_sample(cfg, seed, domain, i))
        .collect();
    Ok(Dataset {
        num_classes: cfg.num_classes,
        class_names: cfg.class_names(),
        samples: samples?,
        seed: Some(seed),
    })
}

fn gen_sample(cfg: &SynthConfig, seed: u64, domain: Domain, index: usize) -> Result<Sample> {
    // Paired datasets share the label stream across domains.
    let label_domain_tag = if cfg.paired || domain == Domain::Source {
        tag::SOURCE
    } else {
        tag::TARGET
    };
    let mut label_rng = rng::stream(seed, &[tag::LABELS, label_domain_tag, index as u64]);
    let labels = draw_label_map(cfg, &mut label_rng)?;

    let domain_tag = match domain {
        Domain::Source => tag::SOURCE,
        Domain::Target => tag::TARGET,
    };
    let mut style_rng = rng::stream(seed, &[tag::STYLE, domain_tag, index as u64]);
    let image = render(cfg, &labels, domain, &mut style_rng);

    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    Ok(Sample {
        image,
        labels,
        domain,
        id: format!("{prefix}_{index:04}"),
    })
}

const COVERAGE_RETRIES: usize = 64;

fn draw_label_map(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<LabelMap> {
    let min_px = (cfg.min_class_coverage * (cfg.height * cfg.width) as f64).ceil() as usize;
    for _ in 0..COVERAGE_RETRIES {
        let map = draw_primitives(cfg, rng);
        let hist = map.histogram(cfg.num_classes);
        if hist.iter().all(|&c| c >= min_px) {
            return Ok(map);
        }
    }
    Err(Error::Generation(format!(
        "could not reach {:.1}% coverage for all {} classes after {} attempts",
        cfg.min_class_coverage * 100.0,
        cfg.num_classes,
        COVERAGE_RETRIES
    )))
}

fn draw_primitives(cfg: &SynthConfig, rng: &mut impl Rng) -> LabelMap {
    let (h, w) = (cfg.height, cfg.width);
    let mut map = LabelMap::filled(h, w, 0);
    let min_side = h.min(w) as f64;
    for class in 1..cfg.num_classes as u8 {
        let n_prims = rng.gen_range(1..=3);
        for _ in 0..n_prims {
            let family = (class as usize - 1) % 3;
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let ry = rng.gen_range(0.12..0.28) * min_side;
            let rx = rng.gen_range(0.12..0.28) * min_side;
            match family {
                0 => paint_rect(&mut map, cy, cx, ry, rx, class),
                1 => paint_ellipse(&mut map, cy, cx, ry, rx, class),
                _ => {
                    let orientation = rng.gen_range(0..4);
                    let offset = rng.gen_range(0.0..(h + w) as f64);
                    let band = rng.gen_range(0.08..0.16) * min_side;
                    paint_band(&mut map, orientation, offset, band, class);
                }
            }
        }
    }
    map
}

fn paint_rect(map: &mut LabelMap, cy: f64, cx: f64, ry: f64, rx: f64, class: u8) {
    let y0 = (cy - ry).max(0.0) as usize;
    let y1 = ((cy + ry) as usize).min(map.height - 1);
    let x0 = (cx - rx).max(0.0) as usize;
    let x1 = ((cx + rx) as usize).min(map.width - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            map.set(y, x, class);
        }
    }
}

fn paint_ellipse(map: &mut LabelMap, cy: f64, cx: f64, ry: f64, rx: f64, class: u8) {
    let y0 = (cy - ry).max(0.0) as usize;
    let y1 = (((cy + ry) as usize) + 1).min(map.height);
    let x0 = (cx - rx).max(0.0) as usize;
    let x1 = (((cx + rx) as usize) + 1).min(map.width);
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                map.set(y, x, class);
            }
        }
    }
}

/// Stripe band in one of four orientations: the two diagonals, horizontal,
/// vertical. Orientation varies per primitive so class layout carries no
/// fixed spatial prior across images.
fn paint_band(map: &mut LabelMap, orientation: usize, offset: f64, band: f64, class: u8) {
    for y in 0..map.height {
        for x in 0..map.width {
            let coord = match orientation {
                0 => (x + y) as f64,
                1 => x as f64 - y as f64 + map.height as f64,
                2 => 2.0 * y as f64,
                _ => 2.0 * x as f64,
            };
            if (coord - offset).abs() <= band {
                map.set(y, x, class);
            }
        }
    }
}

/// Binary texture luminance for a class at a pixel. Background is flat;
/// other classes alternate 0.3/0.7 with a class-specific pattern and period.
fn luminance(class: u8, y: usize, x: usize) -> f64 {
    if class == 0 {
        return 0.5;
    }
    let c = class as usize;
    let period = 4 * (1 + (c - 1) / 3);
    let half = period / 2;
    let on = match (c - 1) % 3 {
        0 => (x / half).is_multiple_of(2),
        1 => (y / half).is_multiple_of(2),
        _ => ((x / half) + (y / half)).is_multiple_of(2),
    };
    if on {
        0.7
    } else {
        0.3
    }
}

fn render(cfg: &SynthConfig, labels: &LabelMap, domain: Domain, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let (gain, bias) = match domain {
        Domain::Source => (&cfg.shift.source_gain, &cfg.shift.source_bias),
        Domain::Target => (&cfg.shift.target_gain, &cfg.shift.target_bias),
    };
    let mut img = Tensor::zeros(&[3, h, w]);
    let sigma = cfg.shift.noise_sigma;
    for y in 0..h {
        for x in 0..w {
            let lum = luminance(labels.at(y, x), y, x);
            let mut ch = [0.0f64; 3];
            for c in 0..3 {
                ch[c] = gain[c] * lum + bias[c];
            }
            if domain == Domain::Target && cfg.shift.permute_target_channels {
                ch = [ch[1], ch[2], ch[0]];
            }
            for (c, &v) in ch.iter().enumerate() {
                let noise = if sigma > 0.0 {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * sigma
                } else {
                    0.0
                };
                // Quantize to the 8-bit grid so in-memory generation and a
                // PNG round trip agree exactly.
                let q = ((v + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
                img.data_mut()[(c * h + y) * w + x] = q;
            }
        }
    }
    img
}

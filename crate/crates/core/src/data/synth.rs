use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derived_rng, subgroup_bits, AttributeVector, Dataset, Image, Sample};
use crate::error::{Error, Result};

const LABEL_STREAM: u64 = 1;
const IMAGE_STREAM: u64 = 2;

/// Parameters of the synthetic biased-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub attribute_names: Vec<String>,
    /// Sample count of every subgroup, indexed by subgroup id.
    pub subgroup_counts: Vec<usize>,
    pub positive_rates: Vec<f64>,
    /// Amplitude of each attribute's visual confound.
    pub confound_strength: Vec<f64>,
    /// Per-image relative spread of confound amplitude: each present
    /// confound is scaled by `1 + jitter·U(-1, 1)`.
    pub confound_jitter: f64,
    /// Peak intensity of the disease ellipse.
    pub signal_strength: f64,
    /// Attributes whose presence inverts the lesion contrast (dark instead
    /// of bright), so the lesion reads differently across subgroups. Empty
    /// means no attribute flips.
    pub contrast_flip: Vec<bool>,
    /// Probability that a negative carries a lesion of the opposite contrast.
    pub mimic_rate: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            attribute_names: vec!["sex".into(), "age60".into(), "race_white".into()],
            subgroup_counts: vec![500; 8],
            positive_rates: vec![0.30, 0.34, 0.38, 0.42, 0.30, 0.34, 0.38, 0.42],
            confound_strength: vec![0.25; 3],
            confound_jitter: 0.0,
            signal_strength: 0.25,
            contrast_flip: Vec::new(),
            mimic_rate: 0.0,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.attribute_names.len();
        if d == 0 || d > 16 {
            return Err(Error::Config(format!("need 1..=16 attributes, got {d}")));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image size {}x{} is below the 8x8 minimum",
                self.height, self.width
            )));
        }
        let groups = 1usize << d;
        if self.subgroup_counts.len() != groups || self.positive_rates.len() != groups {
            return Err(Error::Config(format!(
                "expected {groups} subgroup counts and positive rates, got {} and {}",
                self.subgroup_counts.len(),
                self.positive_rates.len()
            )));
        }
        if let Some(g) = self.subgroup_counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("subgroup {g} has zero samples")));
        }
        if let Some(r) = self
            .positive_rates
            .iter()
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return Err(Error::Config(format!("positive rate {r} outside [0, 1]")));
        }
        if self.confound_strength.len() != d {
            return Err(Error::Config(format!(
                "expected {d} confound strengths, got {}",
                self.confound_strength.len()
            )));
        }
        if self
            .confound_strength
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::Config("confound strengths must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.confound_jitter) {
            return Err(Error::Config(format!(
                "confound jitter {} outside [0, 1]",
                self.confound_jitter
            )));
        }
        if !self.contrast_flip.is_empty() && self.contrast_flip.len() != d {
            return Err(Error::Config(format!(
                "expected 0 or {d} contrast flags, got {}",
                self.contrast_flip.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.mimic_rate) {
            return Err(Error::Config(format!("mimic rate {} outside [0, 1]", self.mimic_rate)));
        }
        if !self.signal_strength.is_finite() || !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(
                "signal strength must be finite and noise finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a dataset whose positives carry an ellipse lesion (bright unless
/// an odd number of contrast-flipping attributes is present) and whose
/// attributes each toggle one additive visual confound: a corner marker, a
/// bright border frame, or a horizontal stripe texture (cycling in that order
/// for more than three attributes).
pub fn generate_synthetic(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let d = config.num_attributes();
    let names: Arc<[String]> = config.attribute_names.clone().into();
    let mut samples = Vec::with_capacity(config.subgroup_counts.iter().sum());
    let mut index = 0u64;
    for (g, (&count, &rate)) in config
        .subgroup_counts
        .iter()
        .zip(&config.positive_rates)
        .enumerate()
    {
        let positives = (count as f64 * rate).round() as usize;
        let mut labels: Vec<u8> = (0..count).map(|i| u8::from(i < positives)).collect();
        labels.shuffle(&mut derived_rng(config.seed, LABEL_STREAM, g as u64));
        let attrs = AttributeVector::new(Arc::clone(&names), subgroup_bits(g, d))?;
        for label in labels {
            let image = render(config, &attrs, label, index);
            samples.push(Sample::new(
                format!("s{index:06}"),
                image,
                label,
                attrs.clone(),
            )?);
            index += 1;
        }
    }
    Ok(Dataset {
        attribute_names: names,
        height: config.height,
        width: config.width,
        samples,
    })
}

fn render(config: &DatasetConfig, attrs: &AttributeVector, label: u8, index: u64) -> Image {
    let (h, w) = (config.height, config.width);
    let mut rng = derived_rng(config.seed, IMAGE_STREAM, index);
    let mut px = vec![0.35f64; h * w];

    // Smooth anatomy-like background from a few Gaussian blobs.
    for _ in 0..3 {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sigma = rng.random_range(0.12..0.25) * h.min(w) as f64;
        let amp = rng.random_range(-0.1..0.1);
        for y in 0..h {
            for x in 0..w {
                let r2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * sigma * sigma);
                px[y * w + x] += amp * (-r2).exp();
            }
        }
    }

    // Draw the ellipse geometry for every sample so that the random stream
    // consumed by later steps does not depend on the label.
    let ey = rng.random_range(0.3..0.7) * h as f64;
    let ex = rng.random_range(0.3..0.7) * w as f64;
    let ry = rng.random_range(0.08..0.16) * h as f64;
    let rx = rng.random_range(0.08..0.16) * w as f64;
    let angle = rng.random_range(0.0..PI);
    let mimic = rng.random::<f64>() < config.mimic_rate;
    if label == 1 || mimic {
        let flips = attrs
            .values()
            .iter()
            .zip(&config.contrast_flip)
            .filter(|(&v, &f)| v == 1 && f)
            .count();
        let sign = if (flips % 2 == 1) == (label == 1) { -1.0 } else { 1.0 };
        let amplitude = sign * config.signal_strength;
        let (sin, cos) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - ey;
                let dx = x as f64 - ex;
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                let inside = ((1.0 - (u * u + v * v)) * 3.0).clamp(0.0, 1.0);
                px[y * w + x] += amplitude * inside;
            }
        }
    }

    let phase = rng.random_range(0.0..2.0 * PI);
    let scales: Vec<f64> = (0..attrs.len())
        .map(|_| 1.0 + config.confound_jitter * rng.random_range(-1.0..1.0))
        .collect();
    for (j, (&value, &base)) in attrs
        .values()
        .iter()
        .zip(&config.confound_strength)
        .enumerate()
    {
        if value == 0 || base == 0.0 {
            continue;
        }
        let strength = base * scales[j];
        match j % 3 {
            0 => {
                let size = (h.min(w) / 4).max(2);
                let corner = (j / 3) % 4;
                let y0 = if corner >= 2 { h - size } else { 0 };
                let x0 = if corner % 2 == 1 { w - size } else { 0 };
                for y in y0..y0 + size {
                    for x in x0..x0 + size {
                        px[y * w + x] += strength;
                    }
                }
            }
            1 => {
                let t = (h.min(w) / 16).max(1) + j / 3;
                for y in 0..h {
                    for x in 0..w {
                        if y < t || x < t || y >= h - t || x >= w - t {
                            px[y * w + x] += strength;
                        }
                    }
                }
            }
            _ => {
                let period = 4.0 + (j / 3) as f64;
                for y in 0..h {
                    let s = strength * (2.0 * PI * y as f64 / period + phase).sin();
                    for x in 0..w {
                        px[y * w + x] += s;
                    }
                }
            }
        }
    }

    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("finite noise");
        for p in px.iter_mut() {
            *p += normal.sample(&mut rng);
        }
    }
    let pixels = px.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect();
    Image::new(h, w, pixels).expect("rendered size")
}

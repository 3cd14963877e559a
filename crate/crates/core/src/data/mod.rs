//! Samples, demographic attributes and dataset construction.

mod manifest;
mod split;
mod subsample;
mod synth;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub use manifest::{
    load_dataset_dir, load_manifest, write_dataset_dir, write_raw_image, read_raw_image,
    BinarizationRules, ManifestLoad, KNOWN_ATTRIBUTES,
};
pub use split::{make_splits, read_split_plan, write_split_plan, SplitPlan};
pub use subsample::{positive_rate_disparity, subsample_for_disparity};
pub use synth::{generate_synthetic, DatasetConfig};

/// Ordered binary demographic flags with their names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVector {
    names: Arc<[String]>,
    values: Vec<u8>,
}

impl AttributeVector {
    pub fn new(names: Arc<[String]>, values: Vec<u8>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("at least one attribute is required".into()));
        }
        if names.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} attribute names for {} values",
                names.len(),
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("attribute values must be 0/1: {values:?}")));
        }
        Ok(Self { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<u8> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    /// Copy with attribute `index` flipped.
    pub fn flipped(&self, index: usize) -> Self {
        let mut values = self.values.clone();
        values[index] ^= 1;
        Self {
            names: Arc::clone(&self.names),
            values,
        }
    }
}

/// Big-endian binary encoding of the attribute flags: `[1,0,1] → 5`.
pub fn derive_subgroup(attrs: &AttributeVector) -> usize {
    attrs
        .values()
        .iter()
        .fold(0usize, |acc, &v| (acc << 1) | v as usize)
}

/// Inverse of [`derive_subgroup`] for `num_attributes` flags.
pub fn subgroup_bits(subgroup: usize, num_attributes: usize) -> Vec<u8> {
    (0..num_attributes)
        .map(|i| ((subgroup >> (num_attributes - 1 - i)) & 1) as u8)
        .collect()
}

/// Single-channel image with values in [0, 1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: u8,
    pub attrs: AttributeVector,
    pub subgroup: usize,
}

impl Sample {
    pub fn new(id: String, image: Image, label: u8, attrs: AttributeVector) -> Result<Self> {
        if label > 1 {
            return Err(Error::Data(format!("sample {id}: label {label} is not binary")));
        }
        let subgroup = derive_subgroup(&attrs);
        Ok(Self {
            id,
            image,
            label,
            attrs,
            subgroup,
        })
    }

    /// Copy with new attributes and the matching subgroup id.
    pub fn with_attrs(&self, attrs: AttributeVector) -> Self {
        let subgroup = derive_subgroup(&attrs);
        Self {
            attrs,
            subgroup,
            ..self.clone()
        }
    }
}

/// A collection of samples sharing image size and attribute names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub attribute_names: Arc<[String]>,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn num_subgroups(&self) -> usize {
        1 << self.num_attributes()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown attribute {name:?}")))
    }

    /// Samples in the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let index: std::collections::HashMap<&str, &Sample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("sample id {id} not in dataset")))
            })
            .collect()
    }

    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            attribute_names: Arc::clone(&self.attribute_names),
            height: self.height,
            width: self.width,
            samples,
        }
    }
}

/// Stacks images into the encoder's pixel layout (`n·h·w × 1`).
pub fn pixel_matrix(samples: &[&Sample]) -> Matrix {
    let per = samples
        .first()
        .map(|s| s.image.pixels.len())
        .unwrap_or(0);
    let mut data = Vec::with_capacity(per * samples.len());
    for s in samples {
        data.extend(s.image.pixels.iter().map(|&p| p as f64));
    }
    Matrix::from_shape_vec((data.len(), 1), data).expect("column vector")
}

/// `n × 1` label matrix.
pub fn label_matrix(samples: &[&Sample]) -> Matrix {
    Matrix::from_shape_fn((samples.len(), 1), |(i, _)| samples[i].label as f64)
}

/// `n × d_a` attribute matrix.
pub fn attribute_matrix(samples: &[&Sample]) -> Matrix {
    let d = samples.first().map(|s| s.attrs.len()).unwrap_or(0);
    Matrix::from_shape_fn((samples.len(), d), |(i, j)| samples[i].attrs.values()[j] as f64)
}

/// Independent RNG for `(seed, purpose, index)`.
pub(crate) fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Arc<[String]> {
        (0..n).map(|i| format!("a{i}")).collect::<Vec<_>>().into()
    }

    #[test]
    fn subgroup_encoding_examples() {
        let n = names(3);
        let zero = AttributeVector::new(n.clone(), vec![0, 0, 0]).unwrap();
        assert_eq!(derive_subgroup(&zero), 0);
        let five = AttributeVector::new(n, vec![1, 0, 1]).unwrap();
        assert_eq!(derive_subgroup(&five), 5);
    }

    #[test]
    fn subgroup_encoding_is_bijective() {
        for d in 1..=5 {
            let n = names(d);
            let mut seen = std::collections::HashSet::new();
            for g in 0..(1usize << d) {
                let bits = subgroup_bits(g, d);
                let attrs = AttributeVector::new(n.clone(), bits).unwrap();
                let id = derive_subgroup(&attrs);
                assert_eq!(id, g);
                assert!(seen.insert(id));
            }
        }
    }

    #[test]
    fn attribute_vector_validation() {
        assert!(AttributeVector::new(names(2), vec![0, 2]).is_err());
        assert!(AttributeVector::new(names(2), vec![0]).is_err());
        assert!(AttributeVector::new(names(0), vec![]).is_err());
    }
}

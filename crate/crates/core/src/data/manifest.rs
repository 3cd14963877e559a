//! Manifest ingestion and the on-disk dataset layout.
//!
//! A manifest is comma-separated text with header `id,path,label,sex,age,race`.
//! Images are raw little-endian `f32` arrays preceded by an 8-byte header
//! holding height and width as little-endian `u32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AttributeVector, Dataset, Image, Sample};
use crate::error::{Error, Result};

pub const KNOWN_ATTRIBUTES: [&str; 3] = ["sex", "age60", "race_white"];
const HEADER: [&str; 6] = ["id", "path", "label", "sex", "age", "race"];
const ATTRIBUTES_FILE: &str = "attributes.txt";

/// Which demographics become binary attributes, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinarizationRules {
    /// Ordered subset of `sex`, `age60`, `race_white`.
    pub attributes: Vec<String>,
    /// Ages at or above this map to `age60 = 1`.
    pub age_threshold: u32,
}

impl Default for BinarizationRules {
    fn default() -> Self {
        Self {
            attributes: KNOWN_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            age_threshold: 60,
        }
    }
}

impl BinarizationRules {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("binarization rules name no attributes".into()));
        }
        for a in &self.attributes {
            if !KNOWN_ATTRIBUTES.contains(&a.as_str()) {
                return Err(Error::Config(format!(
                    "unknown attribute {a:?}; expected one of {KNOWN_ATTRIBUTES:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ManifestLoad {
    pub dataset: Dataset,
    /// Rows dropped for missing demographics.
    pub dropped: usize,
}

#[derive(Debug, Deserialize)]
struct Row {
    id: String,
    path: String,
    label: String,
    sex: String,
    age: String,
    race: String,
}

enum Binarized {
    Value(u8),
    Missing,
}

fn binarize(row: &Row, attr: &str, rules: &BinarizationRules, line: usize) -> Result<Binarized> {
    let bad = |message: String| Error::ManifestRow { row: line, message };
    match attr {
        "sex" => match row.sex.trim().to_ascii_lowercase().as_str() {
            "" => Ok(Binarized::Missing),
            "male" | "m" => Ok(Binarized::Value(1)),
            "female" | "f" => Ok(Binarized::Value(0)),
            other => Err(bad(format!("unrecognized sex {other:?}"))),
        },
        "age60" => {
            let raw = row.age.trim();
            if raw.is_empty() {
                return Ok(Binarized::Missing);
            }
            let age: u32 = raw
                .parse()
                .map_err(|_| bad(format!("age {raw:?} is not an integer")))?;
            Ok(Binarized::Value(u8::from(age >= rules.age_threshold)))
        }
        "race_white" => {
            let raw = row.race.trim();
            if raw.is_empty() {
                Ok(Binarized::Missing)
            } else {
                Ok(Binarized::Value(u8::from(raw.eq_ignore_ascii_case("white"))))
            }
        }
        other => Err(Error::Config(format!("unknown attribute {other:?}"))),
    }
}

/// Reads a manifest, binarizing demographics and loading each image.
/// Rows lacking a configured demographic are dropped and counted.
pub fn load_manifest(path: &Path, rules: &BinarizationRules) -> Result<ManifestLoad> {
    rules.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::ManifestRow {
            row: 1,
            message: format!("header must be {}", HEADER.join(",")),
        });
    }
    let names: Arc<[String]> = rules.attributes.clone().into();
    let mut samples = Vec::new();
    let mut dropped = 0;
    let mut size: Option<(usize, usize)> = None;
    for (i, record) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = record.map_err(|e| Error::ManifestRow {
            row: line,
            message: e.to_string(),
        })?;
        let label = match row.label.as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::ManifestRow {
                    row: line,
                    message: format!("label {other:?} is not 0 or 1"),
                })
            }
        };
        let mut values = Vec::with_capacity(names.len());
        let mut missing = false;
        for attr in names.iter() {
            match binarize(&row, attr, rules, line)? {
                Binarized::Value(v) => values.push(v),
                Binarized::Missing => missing = true,
            }
        }
        if missing {
            dropped += 1;
            continue;
        }
        let image_path = base.join(&row.path);
        let image = read_raw_image(&image_path).map_err(|e| Error::ManifestRow {
            row: line,
            message: e.to_string(),
        })?;
        match size {
            None => size = Some((image.height, image.width)),
            Some(s) if s != (image.height, image.width) => {
                return Err(Error::ManifestRow {
                    row: line,
                    message: format!(
                        "image is {}x{} but earlier rows are {}x{}",
                        image.height, image.width, s.0, s.1
                    ),
                })
            }
            _ => {}
        }
        let attrs = AttributeVector::new(Arc::clone(&names), values)?;
        samples.push(Sample::new(row.id, image, label, attrs)?);
    }
    if samples.is_empty() {
        log::warn!("{}: manifest yielded no samples", path.display());
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} rows with missing demographics",
            path.display()
        );
    }
    let (height, width) = size.unwrap_or((0, 0));
    Ok(ManifestLoad {
        dataset: Dataset {
            attribute_names: names,
            height,
            width,
            samples,
        },
        dropped,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_raw_image(path: &Path, image: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + image.pixels.len() * 4);
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    for p in &image.pixels {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{}: missing image header", path.display())));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != h * w * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes of pixels for {h}x{w}, found {}",
            path.display(),
            h * w * 4,
            body.len()
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Image::new(h, w, pixels)
}

/// Writes `manifest.csv`, `attributes.txt` and `images/<id>.f32`.
///
/// Attribute names must come from [`KNOWN_ATTRIBUTES`]; columns for
/// attributes the dataset lacks are left empty.
pub fn write_dataset_dir(dir: &Path, dataset: &Dataset) -> Result<()> {
    for name in dataset.attribute_names.iter() {
        if !KNOWN_ATTRIBUTES.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "attribute {name:?} cannot be written to a manifest"
            )));
        }
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::from("id,path,label,sex,age,race\n");
    for s in &dataset.samples {
        let rel = PathBuf::from("images").join(format!("{}.f32", s.id));
        write_raw_image(&dir.join(&rel), &s.image)?;
        let sex = match s.attrs.get("sex") {
            Some(1) => "Male",
            Some(_) => "Female",
            None => "",
        };
        let age = match s.attrs.get("age60") {
            Some(1) => "70",
            Some(_) => "40",
            None => "",
        };
        let race = match s.attrs.get("race_white") {
            Some(1) => "White",
            Some(_) => "Non-white",
            None => "",
        };
        manifest.push_str(&format!(
            "{},{},{},{sex},{age},{race}\n",
            s.id,
            rel.display(),
            s.label
        ));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(ATTRIBUTES_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for name in dataset.attribute_names.iter() {
        writeln!(f, "{name}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads a directory written by [`write_dataset_dir`] (or any directory
/// holding a `manifest.csv`; all known attributes are used when
/// `attributes.txt` is absent).
pub fn load_dataset_dir(dir: &Path) -> Result<ManifestLoad> {
    let attr_path = dir.join(ATTRIBUTES_FILE);
    let mut rules = BinarizationRules::default();
    if attr_path.exists() {
        let text = fs::read_to_string(&attr_path).map_err(|e| Error::io(&attr_path, e))?;
        rules.attributes = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
    }
    load_manifest(&dir.join("manifest.csv"), &rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        let img = Image::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        write_raw_image(&dir.join("a.f32"), &img).unwrap();
        let mut text = String::from("id,path,label,sex,age,race\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let path = dir.join("manifest.csv");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn binarizes_demographics() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                "p1,a.f32,1,Male,59,Asian",
                "p2,a.f32,0,Female,60,White",
                "p3,a.f32,0,F,85,black",
            ],
        );
        let load = load_manifest(&path, &BinarizationRules::default()).unwrap();
        let s = &load.dataset.samples;
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].attrs.values(), &[1, 0, 0]);
        assert_eq!(s[1].attrs.values(), &[0, 1, 1]);
        assert_eq!(s[2].attrs.values(), &[0, 1, 0]);
        assert_eq!(s[1].subgroup, 3);
        assert_eq!(s[0].image.pixels, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn drops_rows_with_missing_demographics() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &["p1,a.f32,1,Male,,White", "p2,a.f32,0,Female,61,White"],
        );
        let load = load_manifest(&path, &BinarizationRules::default()).unwrap();
        assert_eq!(load.dropped, 1);
        assert_eq!(load.dataset.len(), 1);

        // Only configured attributes need to be present.
        let rules = BinarizationRules {
            attributes: vec!["sex".into()],
            ..Default::default()
        };
        let load = load_manifest(&path, &rules).unwrap();
        assert_eq!(load.dropped, 0);
        assert_eq!(load.dataset.len(), 2);
    }

    #[test]
    fn empty_manifest_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[]);
        let load = load_manifest(&path, &BinarizationRules::default()).unwrap();
        assert!(load.dataset.is_empty());
    }

    #[test]
    fn malformed_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &["p1,a.f32,1,Male,70,White", "p2,a.f32,maybe,Male,70,White"],
        );
        match load_manifest(&path, &BinarizationRules::default()) {
            Err(Error::ManifestRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        let path = write_manifest(dir.path(), &["p1,a.f32,1,Male,old,White"]);
        assert!(matches!(
            load_manifest(&path, &BinarizationRules::default()),
            Err(Error::ManifestRow { row: 2, .. })
        ));
    }

    #[test]
    fn unknown_attribute_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[]);
        let rules = BinarizationRules {
            attributes: vec!["income".into()],
            ..Default::default()
        };
        assert!(matches!(load_manifest(&path, &rules), Err(Error::Config(_))));
    }

    #[test]
    fn raw_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = dir.path().join("x.f32");
        write_raw_image(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(read_raw_image(&p).unwrap(), img);
    }
}

//! Text manifests of (image, mask, landmarks) records and in-memory datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{load_image, load_mask, save_image, save_mask};
use crate::pipeline::{Sample, SampleStore};
use crate::preprocess::{align, resize_pair, Landmarks5};
use crate::schema::LabelSchema;

pub const MANIFEST_HEADER: &str = "# maskface-manifest v1";

/// One manifest line: `id image mask x1 y1 … x5 y5 [group]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub landmarks: Landmarks5,
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut ids = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::format(origin, format!("line {}: {msg}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 13 && fields.len() != 14 {
                return Err(bad(&format!("expected 13 or 14 fields, got {}", fields.len())));
            }
            let mut pts = [[0.0; 2]; 5];
            for (i, v) in fields[3..13].iter().enumerate() {
                pts[i / 2][i % 2] = v.parse::<f64>().map_err(|_| bad(&format!("bad coordinate {v:?}")))?;
            }
            if !ids.insert(fields[0].to_string()) {
                return Err(bad(&format!("duplicate id {}", fields[0])));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image: fields[1].into(),
                mask: fields[2].into(),
                landmarks: Landmarks5(pts),
                group: fields.get(13).map(|s| s.to_string()),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            write!(out, "{} {} {}", e.id, e.image.display(), e.mask.display()).unwrap();
            for [x, y] in e.landmarks.0 {
                write!(out, " {x} {y}").unwrap();
            }
            if let Some(g) = &e.group {
                write!(out, " {g}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Aligned samples held in memory, addressable by id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: LabelSchema,
    pub samples: Vec<Sample>,
    pub groups: Vec<Option<String>>,
    pub landmarks: Vec<Landmarks5>,
    index: BTreeMap<String, usize>,
    root: PathBuf,
}

impl Dataset {
    pub fn new(
        schema: LabelSchema,
        samples: Vec<Sample>,
        groups: Vec<Option<String>>,
        landmarks: Vec<Landmarks5>,
    ) -> Result<Self> {
        if groups.len() != samples.len() || landmarks.len() != samples.len() {
            return Err(Error::Shape("dataset columns differ in length".into()));
        }
        let mut index = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            s.mask.validate(&schema)?;
            if s.mask.height() != s.image.height() || s.mask.width() != s.image.width() {
                return Err(Error::Shape(format!("sample {}: image and mask sizes differ", s.id)));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            schema,
            samples,
            groups,
            landmarks,
            index,
            root: PathBuf::from("."),
        })
    }

    /// Loads every record of a prepared (already aligned) manifest. Samples
    /// not at `resolution` are resized.
    pub fn load(manifest_path: &Path, schema: &LabelSchema, resolution: usize) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(manifest.entries.len());
        let mut groups = Vec::new();
        let mut landmarks = Vec::new();
        for e in &manifest.entries {
            let image = load_image(&resolve(base, &e.image))?;
            let mask = load_mask(&resolve(base, &e.mask), schema)?;
            if mask.height() != image.height() || mask.width() != image.width() {
                return Err(Error::format(&e.mask, "mask size differs from image"));
            }
            let (image, mask) = if image.height() == resolution && image.width() == resolution {
                (image, mask)
            } else {
                resize_pair(&image, &mask, resolution, resolution)
            };
            samples.push(Sample {
                id: e.id.clone(),
                image,
                mask,
            });
            groups.push(e.group.clone());
            landmarks.push(e.landmarks);
        }
        let mut ds = Self::new(schema.clone(), samples, groups, landmarks)?;
        ds.root = base.to_path_buf();
        Ok(ds)
    }

    /// Writes images, masks, the schema and a manifest under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir, e))?;
        }
        let mut manifest = Manifest::default();
        for (i, s) in self.samples.iter().enumerate() {
            let image = PathBuf::from(format!("images/{}.png", s.id));
            let mask = PathBuf::from(format!("masks/{}.png", s.id));
            save_image(&s.image, &dir.join(&image))?;
            save_mask(&s.mask, &self.schema, &dir.join(&mask))?;
            manifest.entries.push(ManifestEntry {
                id: s.id.clone(),
                image,
                mask,
                landmarks: self.landmarks[i],
                group: self.groups[i].clone(),
            });
        }
        self.schema.save(&dir.join("schema.toml"))?;
        let path = dir.join("manifest.txt");
        manifest.save(&path)?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn resolution(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.height())
    }

    /// First `n` samples and the rest, as two datasets.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| {
            Self::new(
                self.schema.clone(),
                self.samples[r.clone()].to_vec(),
                self.groups[r.clone()].to_vec(),
                self.landmarks[r].to_vec(),
            )
        };
        Ok((part(0..n)?, part(n..self.len())?))
    }
}

impl SampleStore for Dataset {
    fn sample(&self, id: &str) -> Result<Sample> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no sample with id {id:?}")))
    }

    /// A sample id, or failing that a mask file path relative to the dataset.
    fn mask(&self, id: &str) -> Result<crate::image::LabelMask> {
        if let Some(s) = self.get(id) {
            return Ok(s.mask.clone());
        }
        let path = resolve(&self.root, Path::new(id));
        if path.is_file() {
            return load_mask(&path, &self.schema);
        }
        Err(Error::Lookup(format!("no sample or mask file {id:?}")))
    }
}

/// Aligns every raw record to the canonical landmarks at `resolution` and
/// writes the prepared dataset under `out_dir`.
pub fn prepare(raw_manifest: &Path, schema: &LabelSchema, resolution: usize, out_dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(raw_manifest)?;
    let base = raw_manifest.parent().unwrap_or(Path::new("."));
    let canonical = Landmarks5::canonical(resolution);
    let mut samples = Vec::new();
    let mut groups = Vec::new();
    let mut landmarks = Vec::new();
    for e in &manifest.entries {
        let image = load_image(&resolve(base, &e.image))?;
        let mask = load_mask(&resolve(base, &e.mask), schema)?;
        let aligned = align(&image, &mask, &e.landmarks, &canonical, resolution)
            .map_err(|err| match err {
                Error::Alignment(m) => Error::Alignment(format!("{}: {m}", e.id)),
                other => other,
            })?;
        landmarks.push(e.landmarks.map(&aligned.transform));
        samples.push(Sample {
            id: e.id.clone(),
            image: aligned.image,
            mask: aligned.mask,
        });
        groups.push(e.group.clone());
    }
    let ds = Dataset::new(schema.clone(), samples, groups, landmarks)?;
    ds.save(out_dir)?;
    Ok(ds)
}

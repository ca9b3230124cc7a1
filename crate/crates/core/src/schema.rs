//! Label schemas and the five-way facial component taxonomy.
//!
//! A schema is an ordered label table (`id` 0 is always background) plus a
//! map from each label to the component it belongs to. Every component crop,
//! placement and background extraction downstream is driven by this map.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five editable facial components, in the fixed channel order used by
/// the assembled feature tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentId {
    LeftEye = 0,
    RightEye = 1,
    Mouth = 2,
    SkinNose = 3,
    Hair = 4,
}

impl ComponentId {
    pub const ALL: [ComponentId; 5] = [
        ComponentId::LeftEye,
        ComponentId::RightEye,
        ComponentId::Mouth,
        ComponentId::SkinNose,
        ComponentId::Hair,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentId::LeftEye => "left_eye",
            ComponentId::RightEye => "right_eye",
            ComponentId::Mouth => "mouth",
            ComponentId::SkinNose => "skin_nose",
            ComponentId::Hair => "hair",
        }
    }

    /// Crop size (height, width) at the 256-pixel reference resolution.
    pub fn reference_crop_size(self) -> (usize, usize) {
        match self {
            ComponentId::LeftEye | ComponentId::RightEye => (32, 48),
            ComponentId::Mouth => (80, 144),
            ComponentId::SkinNose | ComponentId::Hair => (256, 256),
        }
    }

    /// Crop size (height, width) at `resolution`, scaled from the 256 reference
    /// and rounded to the nearest positive multiple of `multiple`.
    pub fn crop_size(self, resolution: usize, multiple: usize) -> (usize, usize) {
        let (h, w) = self.reference_crop_size();
        let scale = |v: usize| {
            let exact = v as f64 * resolution as f64 / 256.0;
            let m = multiple.max(1) as f64;
            (((exact / m).round() as usize).max(1) * multiple.max(1)).min(resolution)
        };
        (scale(h), scale(w))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown component `{s}`")))
    }
}

/// What a label belongs to: the background or one facial component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    LeftEye,
    RightEye,
    Mouth,
    SkinNose,
    Hair,
}

impl Region {
    pub fn component(self) -> Option<ComponentId> {
        match self {
            Region::Background => None,
            Region::LeftEye => Some(ComponentId::LeftEye),
            Region::RightEye => Some(ComponentId::RightEye),
            Region::Mouth => Some(ComponentId::Mouth),
            Region::SkinNose => Some(ComponentId::SkinNose),
            Region::Hair => Some(ComponentId::Hair),
        }
    }
}

impl From<ComponentId> for Region {
    fn from(c: ComponentId) -> Self {
        match c {
            ComponentId::LeftEye => Region::LeftEye,
            ComponentId::RightEye => Region::RightEye,
            ComponentId::Mouth => Region::Mouth,
            ComponentId::SkinNose => Region::SkinNose,
            ComponentId::Hair => Region::Hair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: u8,
    pub name: String,
    pub region: Region,
    /// Display color used in indexed mask files.
    pub color: [u8; 3],
}

pub const SCHEMA_FORMAT_VERSION: u32 = 1;

/// Ordered label table with its component map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub version: u32,
    pub name: String,
    pub labels: Vec<Label>,
}

impl LabelSchema {
    pub fn new(name: impl Into<String>, labels: Vec<Label>) -> Result<Self> {
        let schema = Self {
            version: SCHEMA_FORMAT_VERSION,
            name: name.into(),
            labels,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// The 11-label Helen face parsing scheme. Eyebrows travel with their eye.
    pub fn helen() -> Self {
        use Region::*;
        let table: [(&str, Region, [u8; 3]); 11] = [
            ("background", Background, [0, 0, 0]),
            ("skin", SkinNose, [204, 153, 102]),
            ("left_eyebrow", LeftEye, [102, 51, 0]),
            ("right_eyebrow", RightEye, [153, 76, 0]),
            ("left_eye", LeftEye, [0, 102, 255]),
            ("right_eye", RightEye, [0, 204, 255]),
            ("nose", SkinNose, [255, 204, 153]),
            ("upper_lip", Mouth, [255, 0, 0]),
            ("inner_mouth", Mouth, [128, 0, 64]),
            ("lower_lip", Mouth, [255, 102, 102]),
            ("hair", Hair, [64, 32, 16]),
        ];
        Self::from_table("helen", &table)
    }

    /// Six-label schema of the procedural toy corpus.
    pub fn toy() -> Self {
        use Region::*;
        let table: [(&str, Region, [u8; 3]); 6] = [
            ("background", Background, [0, 0, 0]),
            ("skin", SkinNose, [204, 153, 102]),
            ("left_eye", LeftEye, [0, 102, 255]),
            ("right_eye", RightEye, [0, 204, 255]),
            ("mouth", Mouth, [255, 0, 0]),
            ("hair", Hair, [64, 32, 16]),
        ];
        Self::from_table("toy", &table)
    }

    fn from_table(name: &str, table: &[(&str, Region, [u8; 3])]) -> Self {
        let labels = table
            .iter()
            .enumerate()
            .map(|(i, &(n, region, color))| Label {
                id: i as u8,
                name: n.to_string(),
                region,
                color,
            })
            .collect();
        Self {
            version: SCHEMA_FORMAT_VERSION,
            name: name.to_string(),
            labels,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "helen" => Ok(Self::helen()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Schema(format!("no built-in schema named `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema version {}",
                self.version
            )));
        }
        if self.labels.is_empty() || self.labels.len() > 256 {
            return Err(Error::Schema(format!(
                "label count {} outside 1..=256",
                self.labels.len()
            )));
        }
        for (i, label) in self.labels.iter().enumerate() {
            if label.id as usize != i {
                return Err(Error::Schema(format!(
                    "label ids must be contiguous from 0; found {} at position {i}",
                    label.id
                )));
            }
        }
        if self.labels[0].region != Region::Background {
            return Err(Error::Schema("label 0 must be background".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn region_of(&self, label: u8) -> Result<Region> {
        self.labels
            .get(label as usize)
            .map(|l| l.region)
            .ok_or_else(|| self.out_of_range(label))
    }

    pub fn check_label(&self, label: u8) -> Result<()> {
        if (label as usize) < self.labels.len() {
            Ok(())
        } else {
            Err(self.out_of_range(label))
        }
    }

    fn out_of_range(&self, label: u8) -> Error {
        Error::Schema(format!(
            "label {label} not in schema `{}` ({} labels)",
            self.name,
            self.labels.len()
        ))
    }

    /// Lookup table label id -> component (None for background).
    pub fn component_table(&self) -> Vec<Option<ComponentId>> {
        self.labels.iter().map(|l| l.region.component()).collect()
    }

    pub fn labels_of(&self, c: ComponentId) -> Vec<u8> {
        self.labels
            .iter()
            .filter(|l| l.region.component() == Some(c))
            .map(|l| l.id)
            .collect()
    }

    /// Label permutation applied by a horizontal flip (left/right parts swap).
    pub fn mirror_table(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| {
                let twin = l
                    .name
                    .strip_prefix("left_")
                    .map(|rest| format!("right_{rest}"))
                    .or_else(|| l.name.strip_prefix("right_").map(|r| format!("left_{r}")));
                twin.and_then(|t| self.labels.iter().find(|o| o.name == t))
                    .map_or(l.id, |o| o.id)
            })
            .collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.labels.iter().map(|l| l.color).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: Self =
            toml::from_str(text).map_err(|e| Error::Schema(format!("schema file: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_schemas_validate() {
        for s in [LabelSchema::helen(), LabelSchema::toy()] {
            s.validate().unwrap();
            for c in ComponentId::ALL {
                assert!(!s.labels_of(c).is_empty(), "{} has no {c}", s.name);
            }
        }
        assert_eq!(LabelSchema::helen().len(), 11);
    }

    #[test]
    fn helen_mouth_is_lip_union() {
        let s = LabelSchema::helen();
        assert_eq!(s.labels_of(ComponentId::Mouth), vec![7, 8, 9]);
        assert_eq!(s.labels_of(ComponentId::LeftEye), vec![2, 4]);
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let mut s = LabelSchema::toy();
        s.labels[2].id = 9;
        assert!(matches!(s.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let s = LabelSchema::helen();
        assert_eq!(LabelSchema::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn mirror_swaps_sides() {
        let s = LabelSchema::helen();
        let m = s.mirror_table();
        assert_eq!(m[2], 3);
        assert_eq!(m[5], 4);
        assert_eq!(m[10], 10);
    }

    #[test]
    fn crop_sizes_scale_with_resolution() {
        assert_eq!(ComponentId::LeftEye.crop_size(256, 4), (32, 48));
        assert_eq!(ComponentId::Mouth.crop_size(256, 4), (80, 144));
        assert_eq!(ComponentId::Hair.crop_size(256, 4), (256, 256));
        assert_eq!(ComponentId::LeftEye.crop_size(64, 4), (8, 12));
        assert_eq!(ComponentId::Mouth.crop_size(64, 4), (20, 36));
        assert_eq!(ComponentId::SkinNose.crop_size(64, 4), (64, 64));
    }
}

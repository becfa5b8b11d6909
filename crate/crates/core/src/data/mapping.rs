//! Raw dataset label ids to dense training ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAPPING_VERSION: u32 = 1;

const PANDASET: &str = include_str!("../../configs/pandaset_mapping.toml");
const SYNTHETIC: &str = include_str!("../../configs/synthetic_mapping.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingEntry {
    #[serde(default)]
    pub name: String,
    pub id: u32,
    pub train_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingFile {
    format_version: u32,
    ignore_id: u32,
    classes: Vec<String>,
    map: Vec<MappingEntry>,
}

/// Training classes are `0..num_classes()`; `ignore_id` marks pixels and
/// points excluded from loss and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMapping {
    classes: Vec<String>,
    ignore_id: u32,
    table: BTreeMap<u32, u32>,
    entries: Vec<MappingEntry>,
}

impl ClassMapping {
    pub fn new(classes: Vec<String>, ignore_id: u32, entries: Vec<MappingEntry>) -> Result<Self> {
        let c = classes.len() as u32;
        if c == 0 {
            return Err(Error::config("class mapping lists no classes"));
        }
        if ignore_id < c {
            return Err(Error::config(format!(
                "ignore id {ignore_id} collides with training class ids 0..{c}"
            )));
        }
        let mut table = BTreeMap::new();
        for e in &entries {
            if e.train_id >= c && e.train_id != ignore_id {
                return Err(Error::config(format!(
                    "raw id {} maps to {}, outside 0..{c} and not the ignore id",
                    e.id, e.train_id
                )));
            }
            if table.insert(e.id, e.train_id).is_some() {
                return Err(Error::config(format!("raw id {} mapped twice", e.id)));
            }
        }
        Ok(Self {
            classes,
            ignore_id,
            table,
            entries,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: MappingFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if f.format_version != MAPPING_VERSION {
            return Err(Error::config(format!(
                "class mapping format_version {} unsupported",
                f.format_version
            )));
        }
        Self::new(f.classes, f.ignore_id, f.map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        let f = MappingFile {
            format_version: MAPPING_VERSION,
            ignore_id: self.ignore_id,
            classes: self.classes.clone(),
            map: self.entries.clone(),
        };
        toml::to_string(&f).expect("serialisable")
    }

    /// Mapping shipped for PandaSet's 42 semantic classes.
    pub fn pandaset() -> Self {
        Self::from_toml(PANDASET).expect("bundled mapping is valid")
    }

    /// Mapping of the synthetic generator's raw ids.
    pub fn synthetic() -> Self {
        Self::from_toml(SYNTHETIC).expect("bundled mapping is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    /// Train id of a raw label; the upper 16 (instance) bits are discarded.
    pub fn map(&self, raw: u32) -> Result<u32> {
        let sem = raw & 0xffff;
        self.table
            .get(&sem)
            .copied()
            .ok_or_else(|| Error::Label(format!("raw label id {sem} has no mapping")))
    }

    /// `None` for the ignore id.
    pub fn target(&self, train_id: u32) -> Option<usize> {
        (train_id != self.ignore_id).then_some(train_id as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pandaset_examples() {
        let m = ClassMapping::pandaset();
        assert_eq!(m.num_classes(), 14);
        assert_eq!(m.map(13).unwrap(), 0);
        assert_eq!(m.map(1).unwrap(), 14);
        assert_eq!(m.map(42).unwrap(), 12);
        assert_eq!(m.map((7 << 16) | 13).unwrap(), 0);
        assert!(matches!(m.map(99), Err(Error::Label(_))));
        assert_eq!(m.target(14), None);
        assert_eq!(m.target(3), Some(3));
    }

    #[test]
    fn toml_roundtrip() {
        let m = ClassMapping::synthetic();
        assert_eq!(ClassMapping::from_toml(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn rejects_out_of_range_train_ids() {
        let e = vec![MappingEntry {
            name: String::new(),
            id: 1,
            train_id: 5,
        }];
        assert!(ClassMapping::new(vec!["a".into(), "b".into()], 9, e).is_err());
    }
}

//! Tab-separated triplet files and name-map sidecars.
//!
//! A triplet file holds one `head<TAB>relation<TAB>tail` line per fact; lines
//! starting with `#` and blank lines are skipped. Name maps hold one name per
//! line, the line number being the index.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Triplet;

/// Bidirectional name ↔ index map; indices follow first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameMap {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl NameMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut map = Self::new();
        for name in names {
            if map.lookup.contains_key(&name) {
                return Err(Error::Invalid(format!("duplicate name {name:?}")));
            }
            map.intern(&name);
        }
        Ok(map)
    }

    /// Generated names `{prefix}{i}` for `0..n`.
    pub fn numbered(prefix: &str, n: usize) -> Self {
        Self::from_names((0..n).map(|i| format!("{prefix}{i}"))).expect("numbered names are unique")
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.lookup.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.lookup.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut map = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if map.lookup.contains_key(line) {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: lineno + 1,
                    message: format!("duplicate name {line:?}"),
                });
            }
            map.intern(line);
        }
        Ok(map)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameMaps {
    pub nodes: NameMap,
    pub relations: NameMap,
}

impl NameMaps {
    pub fn numbered(num_nodes: usize, num_relations: usize) -> Self {
        Self {
            nodes: NameMap::numbered("e", num_nodes),
            relations: NameMap::numbered("r", num_relations),
        }
    }
}

/// Parses triplet text, interning names into `maps`. Lines keep file order.
pub fn parse_triplets(text: &str, path: &Path, maps: &mut NameMaps) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                message: format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                ),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                message: "empty field".into(),
            });
        }
        let head = maps.nodes.intern(fields[0]);
        let relation = maps.relations.intern(fields[1]);
        let tail = maps.nodes.intern(fields[2]);
        out.push(Triplet::new(head, relation, tail));
    }
    Ok(out)
}

/// Reads a triplet file with fresh name maps.
pub fn read_triplets(path: &Path) -> Result<(Vec<Triplet>, NameMaps)> {
    let mut maps = NameMaps::default();
    let triplets = read_triplets_with(path, &mut maps)?;
    Ok((triplets, maps))
}

/// Reads a triplet file, extending existing name maps.
pub fn read_triplets_with(path: &Path, maps: &mut NameMaps) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path)?;
    parse_triplets(&text, path, maps)
}

pub fn format_triplets(triplets: &[Triplet], maps: &NameMaps) -> String {
    let mut out = String::new();
    for t in triplets {
        out.push_str(maps.nodes.name(t.head));
        out.push('\t');
        out.push_str(maps.relations.name(t.relation));
        out.push('\t');
        out.push_str(maps.nodes.name(t.tail));
        out.push('\n');
    }
    out
}

/// Writes triplets in the given order.
pub fn write_triplets(triplets: &[Triplet], maps: &NameMaps, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_triplets(triplets, maps).as_bytes())?;
    Ok(())
}

//! The seven-rank taxonomy: paths, level-truncated names and the tree built
//! from a labelled dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub const NUM_LEVELS: usize = 7;

/// Joins level names in a truncated taxonomic name.
pub const SEPARATOR: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaxonomyLevel(usize);

impl TaxonomyLevel {
    pub const KINGDOM: TaxonomyLevel = TaxonomyLevel(0);
    pub const GENUS: TaxonomyLevel = TaxonomyLevel(5);
    pub const SPECIES: TaxonomyLevel = TaxonomyLevel(6);

    pub fn new(index: usize) -> Result<Self, TaxonomyError> {
        if index < NUM_LEVELS {
            Ok(TaxonomyLevel(index))
        } else {
            Err(TaxonomyError::LevelOutOfRange(index))
        }
    }

    /// Panics when `index > 6`.
    pub fn at(index: usize) -> Self {
        assert!(index < NUM_LEVELS, "taxonomy level {index} out of range");
        TaxonomyLevel(index)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self) -> &'static str {
        LEVEL_NAMES[self.0]
    }

    pub fn all() -> impl Iterator<Item = TaxonomyLevel> {
        (0..NUM_LEVELS).map(TaxonomyLevel)
    }
}

impl fmt::Display for TaxonomyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const LEVEL_NAMES: [&str; NUM_LEVELS] = ["Kingdom", "Phylum", "Class", "Order", "Family", "Genus", "Species"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("record {record}: missing {} name", LEVEL_NAMES[*level])]
    MissingLevel { record: String, level: usize },
    #[error("species {species} appears under two ancestries: {first} and {second}")]
    DuplicateSpeciesConflict { species: String, first: String, second: String },
    #[error("unknown taxon path {0}")]
    UnknownPath(String),
    #[error("taxonomy level {0} out of range (0..=6)")]
    LevelOutOfRange(usize),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Full Kingdom→Species name list of one species.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaxonPath {
    names: [String; NUM_LEVELS],
}

impl TaxonPath {
    /// Builds a path from per-level names; names are trimmed and must be
    /// non-empty. `record` labels errors.
    pub fn from_levels<S: AsRef<str>>(names: &[S], record: &str) -> Result<Self, TaxonomyError> {
        let mut out: [String; NUM_LEVELS] = Default::default();
        for (level, slot) in out.iter_mut().enumerate() {
            let name = names.get(level).map(|s| s.as_ref().trim()).unwrap_or("");
            if name.is_empty() {
                return Err(TaxonomyError::MissingLevel { record: record.to_string(), level });
            }
            *slot = name.to_string();
        }
        Ok(TaxonPath { names: out })
    }

    /// Parses a full `K-P-C-O-F-G-S` name.
    pub fn parse(full: &str) -> Result<Self, TaxonomyError> {
        let parts: Vec<&str> = full.trim().split(SEPARATOR).collect();
        if parts.len() > NUM_LEVELS {
            return Err(TaxonomyError::UnknownPath(full.to_string()));
        }
        Self::from_levels(&parts, full)
    }

    pub fn name(&self, level: TaxonomyLevel) -> &str {
        &self.names[level.0]
    }

    pub fn names(&self) -> &[String; NUM_LEVELS] {
        &self.names
    }

    pub fn species(&self) -> &str {
        &self.names[NUM_LEVELS - 1]
    }

    /// Names of levels `0..=level` joined by [`SEPARATOR`].
    pub fn prefix(&self, level: TaxonomyLevel) -> String {
        self.names[..=level.0].join(SEPARATOR)
    }

    pub fn full_name(&self) -> String {
        self.prefix(TaxonomyLevel::SPECIES)
    }
}

impl fmt::Display for TaxonPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.full_name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaxonNode {
    pub children: BTreeSet<String>,
    pub species_count: usize,
    pub sample_count: usize,
}

/// Taxonomy tree keyed by `(level, truncated name)`. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaxonomyTree {
    nodes: BTreeMap<(usize, String), TaxonNode>,
    species: BTreeMap<String, TaxonPath>,
}

impl TaxonomyTree {
    /// Builds the tree from labelled samples, one path per sample.
    pub fn from_paths<'a>(paths: impl IntoIterator<Item = &'a TaxonPath>) -> Result<Self, TaxonomyError> {
        let mut tree = TaxonomyTree::default();
        let mut species_owner: BTreeMap<String, String> = BTreeMap::new();
        for path in paths {
            let full = path.full_name();
            let ancestry = path.prefix(TaxonomyLevel(NUM_LEVELS - 2));
            match species_owner.get(path.species()) {
                Some(prev) if *prev != ancestry => {
                    return Err(TaxonomyError::DuplicateSpeciesConflict {
                        species: path.species().to_string(),
                        first: prev.clone(),
                        second: ancestry,
                    })
                }
                Some(_) => {}
                None => {
                    species_owner.insert(path.species().to_string(), ancestry);
                }
            }
            let new_species = !tree.species.contains_key(&full);
            if new_species {
                tree.species.insert(full.clone(), path.clone());
            }
            for level in 0..NUM_LEVELS {
                let key = path.prefix(TaxonomyLevel(level));
                let node = tree.nodes.entry((level, key)).or_default();
                node.sample_count += 1;
                if new_species {
                    node.species_count += 1;
                }
                if level + 1 < NUM_LEVELS {
                    node.children.insert(path.prefix(TaxonomyLevel(level + 1)));
                }
            }
        }
        Ok(tree)
    }

    /// Builds a tree from `(path, sample count)` pairs.
    pub fn from_counts(counts: &[(TaxonPath, usize)]) -> Result<Self, TaxonomyError> {
        let expanded: Vec<&TaxonPath> =
            counts.iter().flat_map(|(p, n)| std::iter::repeat_n(p, *n)).collect();
        Self::from_paths(expanded)
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn species_count(&self) -> usize {
        self.species.len()
    }

    /// All species paths sorted by full name.
    pub fn species(&self) -> impl Iterator<Item = &TaxonPath> {
        self.species.values()
    }

    pub fn contains(&self, path: &TaxonPath) -> bool {
        self.species.contains_key(&path.full_name())
    }

    pub fn node(&self, level: TaxonomyLevel, prefix: &str) -> Option<&TaxonNode> {
        self.nodes.get(&(level.0, prefix.to_string()))
    }

    pub fn sample_count(&self, path: &TaxonPath) -> usize {
        self.node(TaxonomyLevel::SPECIES, &path.full_name()).map_or(0, |n| n.sample_count)
    }

    /// Sorted distinct level-`level` truncated names.
    pub fn level_vocabulary(&self, level: TaxonomyLevel) -> Vec<String> {
        self.nodes.keys().filter(|(l, _)| *l == level.0).map(|(_, k)| k.clone()).collect()
    }

    /// Species sharing `path`'s level-`level` prefix, including `path`.
    pub fn siblings(&self, path: &TaxonPath, level: TaxonomyLevel) -> Result<Vec<TaxonPath>, TaxonomyError> {
        if !self.contains(path) {
            return Err(TaxonomyError::UnknownPath(path.full_name()));
        }
        let key = path.prefix(level);
        Ok(self.species.values().filter(|p| p.prefix(level) == key).cloned().collect())
    }

    /// One species per distinct level-`level` prefix (the first in sorted
    /// order), paired with that prefix.
    pub fn representatives(&self, level: TaxonomyLevel) -> Vec<(String, TaxonPath)> {
        let mut out: BTreeMap<String, TaxonPath> = BTreeMap::new();
        for p in self.species.values() {
            out.entry(p.prefix(level)).or_insert_with(|| p.clone());
        }
        out.into_iter().collect()
    }

    /// Line-oriented serialization: `<sample count>\t<full name>` per species.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (full, path) in &self.species {
            s.push_str(&format!("{}\t{}\n", self.sample_count(path), full));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TaxonomyError> {
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (count, name) = line.split_once('\t').ok_or_else(|| TaxonomyError::Malformed {
                line: i + 1,
                msg: "expected <count>\\t<path>".into(),
            })?;
            let count: usize = count.trim().parse().map_err(|_| TaxonomyError::Malformed {
                line: i + 1,
                msg: format!("bad sample count {count:?}"),
            })?;
            counts.push((TaxonPath::parse(name)?, count));
        }
        Self::from_counts(&counts)
    }

    /// Indented human-readable dump used by `taxa inspect`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ((level, key), node) in &self.nodes {
            if *level != 0 {
                continue;
            }
            self.dump_node(*level, key, node, &mut out);
        }
        out
    }

    fn dump_node(&self, level: usize, key: &str, node: &TaxonNode, out: &mut String) {
        let leaf = key.rsplit(SEPARATOR).next().unwrap_or(key);
        out.push_str(&format!(
            "{}{} {} (species: {}, samples: {})\n",
            "  ".repeat(level),
            LEVEL_NAMES[level],
            leaf,
            node.species_count,
            node.sample_count
        ));
        for child in &node.children {
            if let Some(cn) = self.nodes.get(&(level + 1, child.clone())) {
                self.dump_node(level + 1, child, cn, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(s: &str) -> TaxonPath {
        TaxonPath::parse(s).unwrap()
    }

    #[test]
    fn lion_and_hyena_share_the_order_prefix() {
        let lion = path("Animalia-Chordata-Mammalia-Carnivora-Felidae-Panthera-Leo");
        let hyena = path("Animalia-Chordata-Mammalia-Carnivora-Hyaenidae-Crocuta-Crocuta");
        assert_eq!(lion.prefix(TaxonomyLevel(3)), "Animalia-Chordata-Mammalia-Carnivora");
        assert_eq!(lion.prefix(TaxonomyLevel(3)), hyena.prefix(TaxonomyLevel(3)));
        assert_eq!(lion.prefix(TaxonomyLevel::KINGDOM), "Animalia");
        for i in 0..6 {
            assert!(lion.prefix(TaxonomyLevel(i + 1)).starts_with(&lion.prefix(TaxonomyLevel(i))));
        }
    }

    #[test]
    fn cat_is_a_single_leaf_under_felidae() {
        let cat = path("Animalia-Chordata-Mammalia-Carnivora-Felidae-Felis-Catus");
        let tree = TaxonomyTree::from_paths([&cat]).unwrap();
        let fam = tree.node(TaxonomyLevel(4), "Animalia-Chordata-Mammalia-Carnivora-Felidae").unwrap();
        assert_eq!(fam.species_count, 1);
        assert_eq!(tree.species_count(), 1);
    }

    #[test]
    fn empty_input_gives_empty_tree() {
        let tree = TaxonomyTree::from_paths(std::iter::empty()).unwrap();
        assert!(tree.is_empty());
        assert!(tree.level_vocabulary(TaxonomyLevel(0)).is_empty());
    }

    #[test]
    fn duplicate_records_aggregate_sample_counts() {
        let cat = path("Animalia-Chordata-Mammalia-Carnivora-Felidae-Felis-Catus");
        let tree = TaxonomyTree::from_paths([&cat, &cat]).unwrap();
        assert_eq!(tree.species_count(), 1);
        assert_eq!(tree.sample_count(&cat), 2);
    }

    #[test]
    fn missing_level_is_reported() {
        let err = TaxonPath::from_levels(&["A", "B", "C", "D", "E", "F"], "rec7").unwrap_err();
        assert_eq!(err, TaxonomyError::MissingLevel { record: "rec7".into(), level: 6 });
        let err = TaxonPath::from_levels(&["A", "  ", "C", "D", "E", "F", "G"], "rec8").unwrap_err();
        assert_eq!(err, TaxonomyError::MissingLevel { record: "rec8".into(), level: 1 });
    }

    #[test]
    fn names_are_trimmed_but_case_sensitive() {
        let a = TaxonPath::from_levels(&[" A", "B ", "C", "D", "E", "F", "G"], "r").unwrap();
        assert_eq!(a.full_name(), "A-B-C-D-E-F-G");
        assert_ne!(a, path("a-B-C-D-E-F-G"));
    }

    #[test]
    fn species_under_two_ancestries_conflict() {
        let a = path("A-B-C-D-E-F-Same");
        let b = path("A-B-C-D-E-G-Same");
        assert!(matches!(
            TaxonomyTree::from_paths([&a, &b]),
            Err(TaxonomyError::DuplicateSpeciesConflict { .. })
        ));
    }

    #[test]
    fn siblings_at_species_and_kingdom() {
        let a = path("A-B-C-D-E-F-s1");
        let b = path("A-B-C-D-E-F-s2");
        let c = path("A-B-C-D-X-Y-s3");
        let tree = TaxonomyTree::from_paths([&a, &b, &b, &c]).unwrap();
        assert_eq!(tree.siblings(&a, TaxonomyLevel::SPECIES).unwrap(), vec![a.clone()]);
        assert_eq!(tree.siblings(&a, TaxonomyLevel::KINGDOM).unwrap().len(), 3);
        assert_eq!(tree.siblings(&a, TaxonomyLevel::GENUS).unwrap(), vec![a.clone(), b.clone()]);
        let unknown = path("A-B-C-D-E-F-s9");
        assert!(matches!(tree.siblings(&unknown, TaxonomyLevel(3)), Err(TaxonomyError::UnknownPath(_))));
    }

    #[test]
    fn text_round_trip_preserves_tree() {
        let a = path("A-B-C-D-E-F-s1");
        let b = path("A-B-C-D-E-F-s2");
        let tree = TaxonomyTree::from_paths([&a, &b, &b]).unwrap();
        let again = TaxonomyTree::from_text(&tree.to_text()).unwrap();
        assert_eq!(tree, again);
    }

    #[test]
    fn level_out_of_range() {
        assert!(TaxonomyLevel::new(7).is_err());
        assert_eq!(TaxonomyLevel::new(6).unwrap(), TaxonomyLevel::SPECIES);
    }
}

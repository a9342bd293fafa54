//! Dataset manifests (JSON Lines) and on-disk synthetic dataset builds.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ppm::{self, PpmError};
use crate::synth::{self, SynthError, TaxaSpec};
use crate::taxonomy::{TaxonPath, TaxonomyError, TaxonomyTree, NUM_LEVELS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    Collision(String),
    #[error("manifest references missing file {0}")]
    MissingFile(String),
    #[error("cannot decode image: {0}")]
    BadImage(#[from] PpmError),
    #[error("image {path} is {got}x{got_h}, expected {want}x{want}")]
    WrongSize { path: String, got: usize, got_h: usize, want: usize },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub path: TaxonPath,
    pub pose_seed: u64,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image: String,
    kingdom: Option<String>,
    phylum: Option<String>,
    class: Option<String>,
    order: Option<String>,
    family: Option<String>,
    genus: Option<String>,
    species: Option<String>,
    #[serde(default)]
    pose_seed: u64,
    #[serde(default = "default_split")]
    split: Split,
}

fn default_split() -> Split {
    Split::Train
}

impl ManifestLine {
    fn from_record(r: &ManifestRecord) -> Self {
        let n = r.path.names();
        ManifestLine {
            image: r.image.clone(),
            kingdom: Some(n[0].clone()),
            phylum: Some(n[1].clone()),
            class: Some(n[2].clone()),
            order: Some(n[3].clone()),
            family: Some(n[4].clone()),
            genus: Some(n[5].clone()),
            species: Some(n[6].clone()),
            pose_seed: r.pose_seed,
            split: r.split,
        }
    }

    fn levels(&self) -> [&Option<String>; NUM_LEVELS] {
        [&self.kingdom, &self.phylum, &self.class, &self.order, &self.family, &self.genus, &self.species]
    }
}

/// Validated list of labelled images rooted at a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// One decoded image with its label, pixels in `[0, 1]`, `H x W x 3`.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub path: TaxonPath,
    pub pixels: Vec<f64>,
}

impl DatasetManifest {
    pub fn tree(&self) -> Result<TaxonomyTree, TaxonomyError> {
        TaxonomyTree::from_paths(self.records.iter().map(|r| &r.path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&ManifestLine::from_record(r)).expect("manifest line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self) -> Result<(), DatasetError> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_jsonl()).map_err(io_err(&path))
    }

    /// Decodes every image of `split` and checks it is `size x size`.
    pub fn load_images(&self, split: Split, size: usize) -> Result<Vec<LabeledImage>, DatasetError> {
        self.split(split)
            .map(|r| {
                let file = self.image_path(r);
                let (w, h, rgb) = ppm::read_ppm(&file)?;
                if w != size || h != size {
                    return Err(DatasetError::WrongSize { path: file.display().to_string(), got: w, got_h: h, want: size });
                }
                Ok(LabeledImage { path: r.path.clone(), pixels: rgb.iter().map(|&b| b as f64 / 255.0).collect() })
            })
            .collect()
    }
}

/// Reads and validates a manifest. Every referenced image must exist and
/// decode; every record must carry all seven levels.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| TaxonomyError::Malformed { line: line_no, msg: e.to_string() })?;
        let record_id = format!("line {line_no} ({})", parsed.image);
        let mut names = Vec::with_capacity(NUM_LEVELS);
        for (level, name) in parsed.levels().iter().enumerate() {
            match name {
                Some(n) if !n.trim().is_empty() => names.push(n.clone()),
                _ => return Err(TaxonomyError::MissingLevel { record: record_id, level }.into()),
            }
        }
        let taxon = TaxonPath::from_levels(&names, &record_id)?;
        let image_file = root.join(&parsed.image);
        if !image_file.is_file() {
            return Err(DatasetError::MissingFile(image_file.display().to_string()));
        }
        ppm::read_ppm(&image_file)?;
        records.push(ManifestRecord { image: parsed.image, path: taxon, pose_seed: parsed.pose_seed, split: parsed.split });
    }
    let manifest = DatasetManifest { root, records };
    manifest.tree()?;
    Ok(manifest)
}

pub fn species_slug(species: &str) -> String {
    species
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Renders the synthetic dataset for `spec` into `out_dir` and writes its
/// manifest. Refuses a non-empty directory unless `force`.
pub fn build_dataset(spec: &TaxaSpec, out_dir: &Path, force: bool) -> Result<DatasetManifest, DatasetError> {
    let (_, traits) = synth::generate_taxonomy(spec)?;
    let counts = synth::species_counts(spec)?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_some();
        if non_empty && !force {
            return Err(DatasetError::Collision(out_dir.display().to_string()));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut records = Vec::new();
    for (species_index, (path, count)) in counts.iter().enumerate() {
        let slug = species_slug(path.species());
        let dir = out_dir.join(&slug);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let abundant = *count == spec.images_per_species;
        for index in 0..*count {
            let pose_seed = synth::pose_seed(spec.seed, species_index, index);
            let img = synth::render_species(&traits, path, pose_seed, spec.image_size)?;
            let rel = format!("{slug}/{index}.ppm");
            ppm::write_ppm(&out_dir.join(&rel), spec.image_size, spec.image_size, &img.to_rgb8())?;
            let split =
                if abundant && index >= count - spec.eval_per_species { Split::Eval } else { Split::Train };
            records.push(ManifestRecord { image: rel, path: path.clone(), pose_seed, split });
        }
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records };
    manifest.write()?;
    let stamp = out_dir.join("taxaspec.json");
    let mut f = fs::File::create(&stamp).map_err(io_err(&stamp))?;
    f.write_all(serde_json::to_string_pretty(spec).expect("spec serializes").as_bytes())
        .map_err(io_err(&stamp))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaxaSpec {
        TaxaSpec { branching: vec![1, 1, 1, 2, 1, 2, 2], images_per_species: 4, eval_per_species: 1, rare_genera: 1, ..TaxaSpec::default() }
    }

    #[test]
    fn build_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(&small_spec(), dir.path(), false).unwrap();
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(built, loaded);
        // one species of one genus is rare with 2 samples
        assert_eq!(loaded.records.len(), 7 * 4 + 2);
    }

    #[test]
    fn non_empty_dir_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&small_spec(), dir.path(), false).unwrap();
        assert!(matches!(build_dataset(&small_spec(), dir.path(), false), Err(DatasetError::Collision(_))));
        build_dataset(&small_spec(), dir.path(), true).unwrap();
    }

    #[test]
    fn missing_level_reports_species() {
        let dir = tempfile::tempdir().unwrap();
        ppm::write_ppm(&dir.path().join("x.ppm"), 1, 1, &[0, 0, 0]).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        fs::write(&m, r#"{"image":"x.ppm","kingdom":"K","phylum":"P","class":"C","order":"O","family":"F","genus":"G"}"#)
            .unwrap();
        match load_manifest(&m) {
            Err(DatasetError::Taxonomy(TaxonomyError::MissingLevel { level, .. })) => assert_eq!(level, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deleted_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(&small_spec(), dir.path(), false).unwrap();
        let victim = built.image_path(&built.records[3]);
        fs::remove_file(&victim).unwrap();
        match load_manifest(&dir.path().join(MANIFEST_FILE)) {
            Err(DatasetError::MissingFile(p)) => assert!(p.ends_with(&built.records[3].image)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        fs::write(&m, "\n{not json}\n").unwrap();
        assert!(matches!(
            load_manifest(&m),
            Err(DatasetError::Taxonomy(TaxonomyError::Malformed { line: 2, .. }))
        ));
    }
}

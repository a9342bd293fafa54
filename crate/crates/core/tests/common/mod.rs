#![allow(dead_code)]

use taxa_core::config::ProjectConfig;
use taxa_core::dataset::{build_dataset, LabeledImage, Split};
use taxa_core::synth::TaxaSpec;
use taxa_core::taxonomy::TaxonomyTree;

/// Eight species on 8x8 canvases with a narrow network: every level
/// trains in well under a second.
pub fn tiny_config() -> ProjectConfig {
    let mut c = ProjectConfig::default();
    c.data.spec = TaxaSpec {
        branching: vec![1, 1, 1, 2, 1, 2, 2],
        images_per_species: 4,
        eval_per_species: 1,
        rare_genera: 1,
        image_size: 8,
        ..TaxaSpec::default()
    };
    c.model.channels = [8, 16];
    c.model.cond_tokens = 4;
    c.model.cond_dim = 16;
    c.model.cond_heads = 2;
    c.model.time_dim = 16;
    c.model.attn_heads = 2;
    c.schedule.steps = 20;
    c.guidance.steps = 20;
    c.training.iterations_per_level = 3;
    c.training.batch_size = 4;
    c.probe.epochs = 2;
    c.probe.channels = [8, 8, 8];
    c
}

pub struct Data {
    pub tree: TaxonomyTree,
    pub train: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
    _dir: tempfile::TempDir,
}

pub fn dataset(spec: &TaxaSpec) -> Data {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(spec, dir.path(), false).unwrap();
    Data {
        tree: manifest.tree().unwrap(),
        train: manifest.load_images(Split::Train, spec.image_size).unwrap(),
        eval: manifest.load_images(Split::Eval, spec.image_size).unwrap(),
        _dir: dir,
    }
}

mod common;

use proptest::prelude::*;
use taxa_core::config::{GuidanceMode, Strategy};
use taxa_core::sampler::{
    combine_cfg, combine_taxa, read_sidecar, sample, sample_file_name, sample_jobs, write_samples, GuidanceConfig,
    SampleError, SampleRecord, SampleRun, SIDECAR_FILE,
};
use taxa_core::taxonomy::{TaxonPath, TaxonomyLevel};
use taxa_core::trainer::{Project, TrainData, TrainOptions};
use taxa_numeric::Tensor;

use common::{dataset, tiny_config};

fn trained(through: usize) -> Project<f32> {
    let cfg = tiny_config();
    let data = dataset(&cfg.data.spec);
    let train = TrainData::<f32>::from_images(&data.train).unwrap();
    let mut p = Project::<f32>::new(cfg, data.tree.clone()).unwrap();
    p.train(&train, Strategy::Progressive, &TrainOptions { through_level: Some(through), ..Default::default() }).unwrap();
    p
}

fn first_species(p: &Project<f32>) -> TaxonPath {
    p.tree.species().next().unwrap().clone()
}

fn run(seed: u64, batch: usize) -> SampleRun {
    SampleRun { seed, steps: 20, batch }
}

#[test]
fn sampling_is_deterministic_and_in_range() {
    let p = trained(6);
    let path = first_species(&p);
    let g = GuidanceConfig::new(GuidanceMode::Taxa, 6.0, 6);
    let a = sample(&p, &path, 3, &g, &run(1, 8)).unwrap();
    let b = sample(&p, &path, 3, &g, &run(1, 8)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|img| img.len() == 8 * 8 * 3 && img.iter().all(|v| (0.0..=1.0).contains(v))));
    assert_ne!(a, sample(&p, &path, 3, &g, &run(2, 8)).unwrap());
    assert_ne!(a[0], a[1]);
}

#[test]
fn image_depends_only_on_seed_and_index() {
    let p = trained(6);
    let species: Vec<TaxonPath> = p.tree.species().cloned().collect();
    let jobs: Vec<(TaxonPath, u64)> = (0..5u64).map(|k| (species[k as usize % species.len()].clone(), k)).collect();
    let g = GuidanceConfig::new(GuidanceMode::Cfg, 3.0, 6);
    let whole = sample_jobs(&p, &jobs, &g, &run(9, 5)).unwrap();
    let singles = sample_jobs(&p, &jobs, &g, &run(9, 1)).unwrap();
    let pairs = sample_jobs(&p, &jobs, &g, &run(9, 2)).unwrap();
    let prefix = sample_jobs(&p, &jobs[..3], &g, &run(9, 3)).unwrap();
    assert_eq!(whole, singles);
    assert_eq!(whole, pairs);
    assert_eq!(whole[..3], prefix[..]);
}

#[test]
fn zero_scale_taxa_equals_unguided() {
    let p = trained(6);
    let path = first_species(&p);
    let none = sample(&p, &path, 4, &GuidanceConfig::new(GuidanceMode::None, 6.0, 6), &run(5, 4)).unwrap();
    let taxa = sample(&p, &path, 4, &GuidanceConfig::new(GuidanceMode::Taxa, 0.0, 6), &run(5, 4)).unwrap();
    let cfg = sample(&p, &path, 4, &GuidanceConfig::new(GuidanceMode::Cfg, 0.0, 6), &run(5, 4)).unwrap();
    assert_eq!(none, taxa);
    assert_eq!(none, cfg);
}

#[test]
fn level_zero_taxa_is_unguided_bit_for_bit() {
    let p = trained(2);
    let path = first_species(&p);
    let none = sample(&p, &path, 10, &GuidanceConfig::new(GuidanceMode::None, 6.0, 0), &run(0, 10)).unwrap();
    let taxa = sample(&p, &path, 10, &GuidanceConfig::new(GuidanceMode::Taxa, 6.0, 0), &run(0, 10)).unwrap();
    let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&none), bits(&taxa));
}

#[test]
fn guidance_changes_deeper_samples() {
    let p = trained(6);
    let path = first_species(&p);
    let none = sample(&p, &path, 2, &GuidanceConfig::new(GuidanceMode::None, 6.0, 6), &run(0, 2)).unwrap();
    let taxa = sample(&p, &path, 2, &GuidanceConfig::new(GuidanceMode::Taxa, 6.0, 6), &run(0, 2)).unwrap();
    assert_ne!(none, taxa);
}

#[test]
fn requests_are_validated() {
    let p = trained(1);
    let path = first_species(&p);
    let g = |level| GuidanceConfig::new(GuidanceMode::Taxa, 6.0, level);
    assert!(matches!(
        sample(&p, &path, 1, &g(2), &run(0, 1)),
        Err(SampleError::UntrainedLevel { level: 2, trained_through: Some(1) })
    ));
    let stranger = TaxonPath::parse("Regnum00-Phylum00-Classis00-Ordo00-Familia00-Genus00-species77").unwrap();
    assert!(matches!(sample(&p, &stranger, 1, &g(1), &run(0, 1)), Err(SampleError::UnknownPath(_))));
    assert!(matches!(sample(&p, &path, 1, &g(9), &run(0, 1)), Err(SampleError::Invalid(_))));
    let too_many = SampleRun { seed: 0, steps: 21, batch: 1 };
    assert!(matches!(sample(&p, &path, 1, &g(1), &too_many), Err(SampleError::Invalid(_))));
    let negative = GuidanceConfig::new(GuidanceMode::Cfg, -1.0, 1);
    assert!(matches!(sample(&p, &path, 1, &negative, &run(0, 1)), Err(SampleError::Invalid(_))));
    let deep_anchor = GuidanceConfig { anchor: 2, ..g(1) };
    assert!(matches!(sample(&p, &path, 1, &deep_anchor, &run(0, 1)), Err(SampleError::Invalid(_))));
}

#[test]
fn fewer_steps_than_training_schedule_still_sample() {
    let p = trained(1);
    let path = first_species(&p);
    let g = GuidanceConfig::new(GuidanceMode::Taxa, 6.0, 1);
    let short = sample(&p, &path, 2, &g, &SampleRun { seed: 0, steps: 5, batch: 2 }).unwrap();
    assert!(short.iter().flatten().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn ten_images_write_ten_files_and_records() {
    let p = trained(6);
    let path = first_species(&p);
    let g = GuidanceConfig::new(GuidanceMode::Taxa, 6.0, 6);
    let images = sample(&p, &path, 10, &g, &run(3, 10)).unwrap();
    let records: Vec<(SampleRecord, Vec<f64>)> = images
        .into_iter()
        .enumerate()
        .map(|(k, px)| {
            let file = sample_file_name(&path, &g, 3, k as u64);
            (SampleRecord { file, level: 6, mode: g.mode, w: 6.0, seed: 3, path: path.full_name() }, px)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let sidecar = write_samples(dir.path(), &records, 8).unwrap();
    assert_eq!(sidecar, dir.path().join(SIDECAR_FILE));
    let ppm_count = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm")).count();
    assert_eq!(ppm_count, 10);
    let back = read_sidecar(&sidecar).unwrap();
    assert_eq!(back.len(), 10);
    assert!(back.iter().all(|r| r.path == path.full_name() && r.level == 6 && r.mode == GuidanceMode::Taxa && r.w == 6.0));
    // writing the same files again replaces their records
    write_samples(dir.path(), &records[..4], 8).unwrap();
    assert_eq!(read_sidecar(&sidecar).unwrap().len(), 10);
    assert!(sample_file_name(&path, &g, 3, 0).starts_with(&taxa_core::dataset::species_slug(&path.prefix(TaxonomyLevel::SPECIES))));
}

fn tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[v.len()], v).unwrap()
}

proptest! {
    #[test]
    fn combining_equal_estimates_is_identity(a in prop::collection::vec(-1e6f64..1e6, 1..32), w in 0.0f64..50.0) {
        let t = tensor(&a);
        prop_assert_eq!(combine_cfg(&t, &t, w).unwrap().to_le_bytes(), t.to_le_bytes());
        prop_assert_eq!(combine_taxa(&t, &t, w).unwrap().to_le_bytes(), t.to_le_bytes());
    }

    #[test]
    fn combination_is_the_affine_formula(
        pair in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..16),
        w in 0.0f64..20.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let got = combine_cfg(&tensor(&a), &tensor(&b), w).unwrap();
        for ((&x, &y), &z) in a.iter().zip(&b).zip(got.data()) {
            let expect = (1.0 + w) * x - w * y;
            prop_assert!((z - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }
}

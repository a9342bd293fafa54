//! Procedural taxonomy whose visual traits are inherited down the tree.
//!
//! Class fixes the body silhouette, Order the appendages, Family the body
//! pattern, Genus the hue and Species a small marking. Renders are a pure
//! function of `(traits, path, pose seed)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use taxa_numeric::rng;
use thiserror::Error;

use crate::taxonomy::{TaxonPath, TaxonomyError, TaxonomyLevel, TaxonomyTree, NUM_LEVELS};

const TRAIT_STREAM: u64 = 0x7472_6169_7473;
const POSE_STREAM: u64 = 0x706f_7365;
const HUE_BINS: usize = 12;
const LEVEL_STEMS: [&str; NUM_LEVELS] = ["Regnum", "Phylum", "Classis", "Ordo", "Familia", "Genus", "species"];

/// Geometry is authored for this canvas size and scaled to others.
const REFERENCE_SIZE: f64 = 16.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("branching must list one positive child count per level (7 entries), got {0:?}")]
    InvalidBranching(Vec<usize>),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RareSpecies {
    pub species: String,
    pub count: usize,
}

/// Shape of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaxaSpec {
    pub branching: Vec<usize>,
    pub images_per_species: usize,
    /// Trailing images of each abundant species held out for evaluation.
    pub eval_per_species: usize,
    /// Explicit rare species; `None` picks one species in each of
    /// `rare_genera` evenly spaced genera, with `rare_count` samples.
    pub rare: Option<Vec<RareSpecies>>,
    pub rare_genera: usize,
    pub rare_count: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for TaxaSpec {
    fn default() -> Self {
        TaxaSpec {
            branching: vec![1, 1, 2, 2, 2, 2, 3],
            images_per_species: 30,
            eval_per_species: 6,
            rare: None,
            rare_genera: 3,
            rare_count: 2,
            image_size: 16,
            seed: 0,
        }
    }
}

impl TaxaSpec {
    pub fn species_count(&self) -> usize {
        self.branching.iter().product()
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.branching.len() != NUM_LEVELS || self.branching.contains(&0) {
            return Err(SynthError::InvalidBranching(self.branching.clone()));
        }
        if self.images_per_species == 0 {
            return Err(SynthError::InvalidSpec("images_per_species must be positive".into()));
        }
        if self.eval_per_species >= self.images_per_species {
            return Err(SynthError::InvalidSpec("eval_per_species must leave training images".into()));
        }
        if self.image_size < 4 {
            return Err(SynthError::InvalidSpec("image_size must be at least 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Silhouette {
    Disc,
    Ellipse,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appendages {
    pub count: usize,
    /// Placement angle of the first appendage, radians.
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    Stripes,
    Spots,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub kind: PatternKind,
    /// Spatial period of stripes/spots in body units; smaller is denser.
    pub period: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marking {
    pub dx: f64,
    pub dy: f64,
    pub radius: f64,
}

/// Per-node visual traits, keyed by truncated taxonomic name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraitAssignment {
    pub silhouette: BTreeMap<String, Silhouette>,
    pub appendages: BTreeMap<String, Appendages>,
    pub pattern: BTreeMap<String, Pattern>,
    pub hue_bin: BTreeMap<String, usize>,
    pub marking: BTreeMap<String, Marking>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl Pose {
    pub fn from_seed(pose_seed: u64, image_size: usize) -> Pose {
        let mut r = rng::stream(pose_seed, POSE_STREAM);
        let max_shift = 0.125 * image_size as f64;
        Pose {
            rotation: r.random_range(-30.0..=30.0f64).to_radians(),
            tx: r.random_range(-max_shift..=max_shift),
            ty: r.random_range(-max_shift..=max_shift),
            scale: r.random_range(0.8..=1.2),
        }
    }
}

/// Rendered RGB image, values in `[0, 1]`, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxaImage {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub pose: Pose,
}

impl TaxaImage {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// Which pixels each trait channel painted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraitMasks {
    pub body: Vec<bool>,
    pub appendage: Vec<bool>,
    pub pattern: Vec<bool>,
    pub marking: Vec<bool>,
    pub hue_bin: usize,
}

impl TraitMasks {
    pub fn foreground(&self) -> Vec<bool> {
        self.body.iter().zip(&self.appendage).map(|(&b, &a)| b || a).collect()
    }
}

fn node_name(level: usize, index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(2);
    format!("{}{:0width$}", LEVEL_STEMS[level], index, width = width)
}

/// All species paths implied by `branching`, in generation order.
pub fn species_paths(branching: &[usize]) -> Vec<TaxonPath> {
    let mut level_totals = Vec::with_capacity(NUM_LEVELS);
    let mut acc = 1;
    for &b in branching {
        acc *= b;
        level_totals.push(acc);
    }
    let mut out = Vec::new();
    let species = level_totals[NUM_LEVELS - 1];
    for s in 0..species {
        let mut names = Vec::with_capacity(NUM_LEVELS);
        for level in 0..NUM_LEVELS {
            // global index of the ancestor at `level`
            let below: usize = branching[level + 1..].iter().product();
            let idx = s / below;
            names.push(node_name(level, idx, level_totals[level]));
        }
        out.push(TaxonPath::from_levels(&names, "synthetic").expect("generated names are non-empty"));
    }
    out
}

/// Per-species sample counts with rare overrides applied.
pub fn species_counts(spec: &TaxaSpec) -> Result<Vec<(TaxonPath, usize)>, SynthError> {
    spec.validate()?;
    let paths = species_paths(&spec.branching);
    let mut counts: Vec<(TaxonPath, usize)> = paths.into_iter().map(|p| (p, spec.images_per_species)).collect();
    for rare in rare_species(spec, &counts)? {
        let slot = counts
            .iter_mut()
            .find(|(p, _)| p.species() == rare.species)
            .ok_or_else(|| SynthError::InvalidSpec(format!("unknown rare species {}", rare.species)))?;
        if rare.count == 0 {
            return Err(SynthError::InvalidSpec(format!("rare species {} needs at least 1 sample", rare.species)));
        }
        slot.1 = rare.count;
    }
    Ok(counts)
}

/// Resolved rare-species list. The automatic choice takes the middle
/// species of evenly spaced genera so each rare species keeps abundant
/// genus siblings.
pub fn rare_species(spec: &TaxaSpec, counts: &[(TaxonPath, usize)]) -> Result<Vec<RareSpecies>, SynthError> {
    if let Some(explicit) = &spec.rare {
        return Ok(explicit.clone());
    }
    let genus = TaxonomyLevel::GENUS;
    let mut genera: Vec<String> = counts.iter().map(|(p, _)| p.prefix(genus)).collect();
    genera.dedup();
    let per_genus = spec.branching[NUM_LEVELS - 1];
    if spec.rare_genera == 0 {
        return Ok(Vec::new());
    }
    if spec.rare_genera > genera.len() || per_genus < 2 {
        return Err(SynthError::InvalidSpec(format!(
            "cannot place {} rare species in {} genera of {} species",
            spec.rare_genera,
            genera.len(),
            per_genus
        )));
    }
    Ok((0..spec.rare_genera)
        .map(|k| {
            let g = k * genera.len() / spec.rare_genera;
            let members: Vec<&TaxonPath> =
                counts.iter().map(|(p, _)| p).filter(|p| p.prefix(genus) == genera[g]).collect();
            RareSpecies { species: members[members.len() / 2].species().to_string(), count: spec.rare_count }
        })
        .collect())
}

/// Builds the synthetic tree (with per-species sample counts) and assigns
/// traits to every node.
pub fn generate_taxonomy(spec: &TaxaSpec) -> Result<(TaxonomyTree, TraitAssignment), SynthError> {
    let counts = species_counts(spec)?;
    let tree = TaxonomyTree::from_counts(&counts)?;
    let mut r = rng::stream(spec.seed, TRAIT_STREAM);
    let mut traits = TraitAssignment::default();

    let mut hue_deck: Vec<usize> = (0..HUE_BINS).collect();
    hue_deck.shuffle(&mut r);
    let mut hue_cursor = 0;
    let marking_slots = [(1.8, 0.0), (-1.6, 1.5), (-1.6, -1.5), (0.0, 0.0)];

    for level in 1..NUM_LEVELS {
        for parent in tree.level_vocabulary(TaxonomyLevel::at(level - 1)) {
            let children: Vec<String> = tree
                .node(TaxonomyLevel::at(level - 1), &parent)
                .map(|n| n.children.iter().cloned().collect())
                .unwrap_or_default();
            match level {
                2 => {
                    let mut kinds = [Silhouette::Disc, Silhouette::Ellipse, Silhouette::Triangle];
                    kinds.shuffle(&mut r);
                    for (k, child) in children.into_iter().enumerate() {
                        traits.silhouette.insert(child, kinds[k % kinds.len()]);
                    }
                }
                3 => {
                    let mut counts = [0usize, 2, 4];
                    counts.shuffle(&mut r);
                    for (k, child) in children.into_iter().enumerate() {
                        let angle = r.random_range(0.0..PI / 2.0);
                        traits.appendages.insert(child, Appendages { count: counts[k % counts.len()], angle });
                    }
                }
                4 => {
                    let mut kinds = [PatternKind::Stripes, PatternKind::Spots, PatternKind::Plain];
                    kinds.shuffle(&mut r);
                    for (k, child) in children.into_iter().enumerate() {
                        let period = r.random_range(2.4..3.4);
                        traits.pattern.insert(child, Pattern { kind: kinds[k % kinds.len()], period });
                    }
                }
                5 => {
                    for child in children {
                        traits.hue_bin.insert(child, hue_deck[hue_cursor % HUE_BINS]);
                        hue_cursor += 1;
                    }
                }
                6 => {
                    let mut slots = marking_slots;
                    slots.shuffle(&mut r);
                    for (k, child) in children.into_iter().enumerate() {
                        let (dx, dy) = slots[k % slots.len()];
                        let radius = if r.random_bool(0.5) { 0.7 } else { 0.85 };
                        traits.marking.insert(child, Marking { dx, dy, radius });
                    }
                }
                _ => {}
            }
        }
    }
    Ok((tree, traits))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside_body(sil: Silhouette, u: f64, v: f64) -> bool {
    match sil {
        Silhouette::Disc => u * u + v * v <= 4.5 * 4.5,
        Silhouette::Ellipse => (u / 5.8).powi(2) + (v / 3.4).powi(2) <= 1.0,
        Silhouette::Triangle => {
            let verts = [(6.4, 0.0), (-4.4, 5.6), (-4.4, -5.6)];
            (0..3).all(|i| {
                let (x0, y0) = verts[i];
                let (x1, y1) = verts[(i + 1) % 3];
                (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0.0
            })
        }
    }
}

fn on_appendage(app: Appendages, u: f64, v: f64) -> bool {
    (0..app.count).any(|k| {
        let a = app.angle + 2.0 * PI * k as f64 / app.count as f64;
        let (dx, dy) = (a.cos(), a.sin());
        let along = u * dx + v * dy;
        let perp = (u * dy - v * dx).abs();
        (2.0..=7.2).contains(&along) && perp <= 0.8
    })
}

fn on_pattern(p: Pattern, u: f64, v: f64) -> bool {
    match p.kind {
        PatternKind::Plain => false,
        PatternKind::Stripes => (2.0 * PI * u / p.period).cos() > 0.35,
        PatternKind::Spots => {
            let fu = u.rem_euclid(p.period) - p.period / 2.0;
            let fv = v.rem_euclid(p.period) - p.period / 2.0;
            fu * fu + fv * fv < (0.3 * p.period).powi(2)
        }
    }
}

const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.10];
const APPENDAGE_COLOR: [f64; 3] = [0.78, 0.76, 0.70];
const MARKING_COLOR: [f64; 3] = [1.0, 1.0, 1.0];

/// Renders one image of `path` and reports the pixels each trait painted.
pub fn render_with_masks(
    traits: &TraitAssignment,
    path: &TaxonPath,
    pose_seed: u64,
    image_size: usize,
) -> Result<(TaxaImage, TraitMasks), SynthError> {
    let unknown = || SynthError::Taxonomy(TaxonomyError::UnknownPath(path.full_name()));
    let sil = *traits.silhouette.get(&path.prefix(TaxonomyLevel::at(2))).ok_or_else(unknown)?;
    let app = *traits.appendages.get(&path.prefix(TaxonomyLevel::at(3))).ok_or_else(unknown)?;
    let pat = *traits.pattern.get(&path.prefix(TaxonomyLevel::at(4))).ok_or_else(unknown)?;
    let hue_bin = *traits.hue_bin.get(&path.prefix(TaxonomyLevel::at(5))).ok_or_else(unknown)?;
    let mark = *traits.marking.get(&path.prefix(TaxonomyLevel::at(6))).ok_or_else(unknown)?;

    let pose = Pose::from_seed(pose_seed, image_size);
    let n = image_size;
    let unit = n as f64 / REFERENCE_SIZE;
    let hue = hue_bin as f64 / HUE_BINS as f64;
    let body_color = hsv(hue, 0.85, 0.9);
    let pattern_color = hsv(hue, 0.85, 0.42);
    let (sin, cos) = pose.rotation.sin_cos();
    let cx = n as f64 / 2.0 + pose.tx;
    let cy = n as f64 / 2.0 + pose.ty;

    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut masks = TraitMasks {
        body: vec![false; n * n],
        appendage: vec![false; n * n],
        pattern: vec![false; n * n],
        marking: vec![false; n * n],
        hue_bin,
    };
    for y in 0..n {
        for x in 0..n {
            let rx = x as f64 + 0.5 - cx;
            let ry = y as f64 + 0.5 - cy;
            // inverse rotation, then undo scale; body units are reference pixels
            let u = (cos * rx + sin * ry) / (pose.scale * unit);
            let v = (-sin * rx + cos * ry) / (pose.scale * unit);
            let i = y * n + x;
            let body = inside_body(sil, u, v);
            masks.body[i] = body;
            masks.appendage[i] = !body && on_appendage(app, u, v);
            masks.pattern[i] = body && on_pattern(pat, u, v);
            masks.marking[i] = body && (u - mark.dx).powi(2) + (v - mark.dy).powi(2) <= mark.radius * mark.radius;
            let color = if masks.marking[i] {
                MARKING_COLOR
            } else if masks.pattern[i] {
                pattern_color
            } else if body {
                body_color
            } else if masks.appendage[i] {
                APPENDAGE_COLOR
            } else {
                BACKGROUND
            };
            pixels.extend_from_slice(&color);
        }
    }
    Ok((TaxaImage { size: n, pixels, pose }, masks))
}

pub fn render_species(
    traits: &TraitAssignment,
    path: &TaxonPath,
    pose_seed: u64,
    image_size: usize,
) -> Result<TaxaImage, SynthError> {
    render_with_masks(traits, path, pose_seed, image_size).map(|(img, _)| img)
}

/// Pose seed of image `index` of the `species_index`-th species.
pub fn pose_seed(dataset_seed: u64, species_index: usize, index: usize) -> u64 {
    rng::split(rng::split(dataset_seed, species_index as u64), index as u64)
}

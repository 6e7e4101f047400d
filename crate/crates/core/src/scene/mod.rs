//! Synthetic before/after scene pairs with a single known change.
//!
//! Scenes live on an `H×W` grid. A pair differs by exactly the recorded
//! change; the "after" view is additionally shifted by an integer viewpoint
//! jitter and perturbed with per-cell noise when rendered.

mod caption;
mod dataset;
mod render;

pub use caption::{
    build_vocabulary, grammar_corpus, realize_caption, realize_words, CaptionSample, Vocabulary, BOS, EOS, PAD, TAGS,
    UNK,
};
pub use dataset::{generate_dataset, load_dataset, save_dataset, Sample};
pub use render::{footprint, render_feature_grid, FeatureGrid, Renderer};

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Gray,
    Red,
    Blue,
    Green,
    Brown,
    Purple,
    Cyan,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Rubber,
    Metal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Gray,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Cyan,
        Color::Yellow,
    ];
    pub fn word(self) -> &'static str {
        match self {
            Color::Gray => "gray",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Brown => "brown",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Yellow => "yellow",
        }
    }
}

impl Material {
    pub const ALL: [Material; 2] = [Material::Rubber, Material::Metal];
    pub fn word(self) -> &'static str {
        match self {
            Material::Rubber => "rubber",
            Material::Metal => "metal",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub color: Color,
    pub material: Material,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Color,
    Texture,
    Add,
    Drop,
    Move,
    None,
}

impl ChangeKind {
    pub const ALL: [ChangeKind; 6] = [
        ChangeKind::Color,
        ChangeKind::Texture,
        ChangeKind::Add,
        ChangeKind::Drop,
        ChangeKind::Move,
        ChangeKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChangeKind::Color => "color",
            ChangeKind::Texture => "texture",
            ChangeKind::Add => "add",
            ChangeKind::Drop => "drop",
            ChangeKind::Move => "move",
            ChangeKind::None => "none",
        }
    }
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The single semantic difference between the two scenes. `before`/`after`
/// hold the affected object's state on each side (absent for add/drop
/// respectively, both absent for `None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub kind: ChangeKind,
    pub object: Option<u32>,
    pub before: Option<SceneObject>,
    pub after: Option<SceneObject>,
}

/// Viewpoint perturbation applied to the "after" rendering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub drow: i32,
    pub dcol: i32,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            drow: 0,
            dcol: 0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// L1 size of the translation; the bucketing key for robustness reports.
    pub fn magnitude(&self) -> u32 {
        self.drow.unsigned_abs() + self.dcol.unsigned_abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub before: Vec<SceneObject>,
    pub after: Vec<SceneObject>,
    pub change: Change,
    pub jitter: Jitter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeWeights {
    pub color: f64,
    pub texture: f64,
    pub add: f64,
    pub drop: f64,
    #[serde(rename = "move")]
    pub move_: f64,
    pub none: f64,
}

impl Default for ChangeWeights {
    fn default() -> Self {
        ChangeWeights {
            color: 1.0,
            texture: 1.0,
            add: 1.0,
            drop: 1.0,
            move_: 1.0,
            none: 1.0,
        }
    }
}

impl ChangeWeights {
    pub fn only(kind: ChangeKind) -> Self {
        let mut w = ChangeWeights {
            color: 0.0,
            texture: 0.0,
            add: 0.0,
            drop: 0.0,
            move_: 0.0,
            none: 0.0,
        };
        *w.get_mut(kind) = 1.0;
        w
    }

    pub fn get(&self, kind: ChangeKind) -> f64 {
        match kind {
            ChangeKind::Color => self.color,
            ChangeKind::Texture => self.texture,
            ChangeKind::Add => self.add,
            ChangeKind::Drop => self.drop,
            ChangeKind::Move => self.move_,
            ChangeKind::None => self.none,
        }
    }

    fn get_mut(&mut self, kind: ChangeKind) -> &mut f64 {
        match kind {
            ChangeKind::Color => &mut self.color,
            ChangeKind::Texture => &mut self.texture,
            ChangeKind::Add => &mut self.add,
            ChangeKind::Drop => &mut self.drop,
            ChangeKind::Move => &mut self.move_,
            ChangeKind::None => &mut self.none,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub change_weights: ChangeWeights,
    pub jitter_max: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub embedding_seed: u64,
    pub footprint_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid_h: 7,
            grid_w: 7,
            channels: 32,
            n_objects_min: 3,
            n_objects_max: 5,
            change_weights: ChangeWeights::default(),
            jitter_max: 1,
            noise_sigma: 0.1,
            seed: 1,
            embedding_seed: 1234,
            footprint_sigma: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return Err(Error::invalid("scene.grid_h/grid_w/channels: must be positive"));
        }
        if self.n_objects_min < 2 || self.n_objects_min > self.n_objects_max {
            return Err(Error::invalid(
                "scene.n_objects_min: need 2 <= n_objects_min <= n_objects_max",
            ));
        }
        // a move or add needs one free placement cell beyond the largest scene
        if self.placement_cells().len() < self.n_objects_max + 1 {
            return Err(Error::invalid(format!(
                "scene.n_objects_max: grid {}x{} with jitter margin {} cannot hold {} objects",
                self.grid_h, self.grid_w, self.jitter_max, self.n_objects_max
            )));
        }
        let w = &self.change_weights;
        let ws = ChangeKind::ALL.map(|k| w.get(k));
        if ws.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(
                "scene.change_weights: must be non-negative with a positive sum",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.footprint_sigma > 0.0) {
            return Err(Error::invalid(
                "scene.noise_sigma/footprint_sigma: noise must be >= 0, footprint > 0",
            ));
        }
        Ok(())
    }

    /// Cells objects may occupy: the grid minus a `jitter_max` border, so a
    /// jittered object centre always stays on the grid.
    pub fn placement_cells(&self) -> Vec<(usize, usize)> {
        let m = self.jitter_max;
        if self.grid_h <= 2 * m || self.grid_w <= 2 * m {
            return vec![];
        }
        (m..self.grid_h - m)
            .flat_map(|r| (m..self.grid_w - m).map(move |c| (r, c)))
            .collect()
    }
}

/// Per-sample generator: ChaCha8 seeded with the master seed, using the
/// sample index as the stream id.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_object<R: Rng + ?Sized>(rng: &mut R, id: u32, cell: (usize, usize)) -> SceneObject {
    SceneObject {
        id,
        shape: *Shape::ALL.choose(rng).expect("non-empty"),
        color: *Color::ALL.choose(rng).expect("non-empty"),
        material: *Material::ALL.choose(rng).expect("non-empty"),
        size: *Size::ALL.choose(rng).expect("non-empty"),
        row: cell.0,
        col: cell.1,
    }
}

fn pick_kind<R: Rng + ?Sized>(rng: &mut R, weights: &ChangeWeights) -> ChangeKind {
    let total: f64 = ChangeKind::ALL.iter().map(|&k| weights.get(k)).sum();
    let mut x = rng.random::<f64>() * total;
    for k in ChangeKind::ALL {
        let w = weights.get(k);
        if x < w {
            return k;
        }
        x -= w;
    }
    // floating-point slack: last kind with positive weight
    *ChangeKind::ALL
        .iter()
        .rev()
        .find(|&&k| weights.get(k) > 0.0)
        .expect("positive total")
}

pub fn sample_scene_pair<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<ScenePair> {
    config.validate()?;
    let kind = pick_kind(rng, &config.change_weights);
    let n = rng.random_range(config.n_objects_min..=config.n_objects_max);

    let mut cells = config.placement_cells();
    // partial Fisher-Yates: the first n+1 cells are a uniform draw without replacement
    for i in 0..=n {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    let base: Vec<SceneObject> = (0..n).map(|i| random_object(rng, i as u32, cells[i])).collect();
    let spare = cells[n];

    let (before, after, change) = match kind {
        ChangeKind::None => (
            base.clone(),
            base,
            Change {
                kind,
                object: None,
                before: None,
                after: None,
            },
        ),
        ChangeKind::Color | ChangeKind::Texture | ChangeKind::Move => {
            let idx = rng.random_range(0..n);
            let old = base[idx];
            let mut new = old;
            match kind {
                ChangeKind::Color => {
                    let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != old.color).collect();
                    new.color = *others.choose(rng).expect("palette has alternatives");
                }
                ChangeKind::Texture => {
                    new.material = match old.material {
                        Material::Rubber => Material::Metal,
                        Material::Metal => Material::Rubber,
                    };
                }
                _ => {
                    let free = &cells[n..];
                    let far: Vec<(usize, usize)> = free
                        .iter()
                        .copied()
                        .filter(|&(r, c)| r.abs_diff(old.row) + c.abs_diff(old.col) >= 2)
                        .collect();
                    let dest = far.choose(rng).copied().unwrap_or(spare);
                    new.row = dest.0;
                    new.col = dest.1;
                }
            }
            let mut after = base.clone();
            after[idx] = new;
            (
                base,
                after,
                Change {
                    kind,
                    object: Some(old.id),
                    before: Some(old),
                    after: Some(new),
                },
            )
        }
        ChangeKind::Add => {
            // the after scene holds n objects, the newcomer being the last
            let mut before = base;
            let mut added = before.pop().expect("n >= 2");
            added.row = spare.0;
            added.col = spare.1;
            let mut after = before.clone();
            after.push(added);
            (
                before,
                after,
                Change {
                    kind,
                    object: Some(added.id),
                    before: None,
                    after: Some(added),
                },
            )
        }
        ChangeKind::Drop => {
            let idx = rng.random_range(0..n);
            let gone = base[idx];
            let mut after = base.clone();
            after.remove(idx);
            (
                base,
                after,
                Change {
                    kind,
                    object: Some(gone.id),
                    before: Some(gone),
                    after: None,
                },
            )
        }
    };

    let j = config.jitter_max as i32;
    let jitter = Jitter {
        drow: rng.random_range(-j..=j),
        dcol: rng.random_range(-j..=j),
        noise_sigma: config.noise_sigma,
        noise_seed: rng.random(),
    };
    Ok(ScenePair {
        before,
        after,
        change,
        jitter,
    })
}

use super::store::{image_tensor, ImageSource};
use super::MetadataRow;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const MIN_SIDE: usize = 16;

const SHAPES: [&str; 12] = [
    "disk", "square", "triangle", "diamond", "plus", "ring", "hbar", "vbar", "cross", "wedge", "dome",
    "frame",
];
pub const MAX_SHAPES: usize = SHAPES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Rendered as fill hues.
    pub n_states: usize,
    /// Rendered as shapes.
    pub n_objects: usize,
    /// Compositions drawn from the `n_states * n_objects` grid; all of them
    /// when unset.
    pub n_compositions: Option<usize>,
    pub samples_per_composition: usize,
    pub image_side: usize,
    /// Standard deviation of additive pixel noise, in units of full scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_states: 6,
            n_objects: 5,
            n_compositions: Some(25),
            samples_per_composition: 40,
            image_side: 32,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < MIN_SIDE {
            return Err(Error::Config(format!(
                "image side {} is below the {MIN_SIDE} pixels shapes need",
                self.image_side
            )));
        }
        if self.n_states == 0 || self.n_objects == 0 || self.samples_per_composition == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.n_objects > MAX_SHAPES {
            return Err(Error::Config(format!(
                "{} objects requested, the renderer has {MAX_SHAPES} shapes",
                self.n_objects
            )));
        }
        let grid = self.n_states * self.n_objects;
        if let Some(k) = self.n_compositions {
            if k == 0 || k > grid {
                return Err(Error::Config(format!("{k} compositions from a grid of {grid}")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }

    pub fn state_names(&self) -> Vec<String> {
        (0..self.n_states)
            .map(|i| format!("hue{:03}", i * 360 / self.n_states))
            .collect()
    }

    pub fn object_names(&self) -> Vec<String> {
        SHAPES[..self.n_objects].iter().map(|s| s.to_string()).collect()
    }
}

/// Everything needed to re-render one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Recipe {
    pub shape: usize,
    pub color: usize,
    pub n_colors: usize,
    pub side: usize,
    /// Noise level in millionths of full scale, so recipes stay hashable.
    pub noise_ppm: u32,
    pub seed: u64,
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => r <= 1.0,
        1 => au.max(av) <= 0.85,
        2 => (-0.8..=0.8).contains(&v) && au <= 0.5 * (v + 0.8),
        3 => au + av <= 1.0,
        4 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        5 => (0.55..=1.0).contains(&r),
        6 => au <= 1.0 && av <= 0.35,
        7 => av <= 1.0 && au <= 0.35,
        8 => ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4) && au.max(av) <= 0.9,
        9 => (-0.8..=0.8).contains(&v) && au <= 0.5 * (0.8 - v),
        10 => r <= 1.0 && v >= 0.0,
        _ => (0.55..=0.9).contains(&au.max(av)),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders `(rgb, mask)`: interleaved 8-bit RGB of `side * side` pixels and
/// the shape mask. The mask depends only on the shape and the seed.
pub fn render(recipe: &Recipe) -> (Vec<u8>, Vec<bool>) {
    let mut rng = rng::stream(recipe.seed, 0);
    let side = recipe.side;
    let cx = 0.5 + rng::uniform(&mut rng, -0.08, 0.08);
    let cy = 0.5 + rng::uniform(&mut rng, -0.08, 0.08);
    let scale = rng::uniform(&mut rng, 0.28, 0.38);
    let mask: Vec<bool> = (0..side * side)
        .map(|i| {
            let x = ((i % side) as f64 + 0.5) / side as f64;
            let y = ((i / side) as f64 + 0.5) / side as f64;
            inside(recipe.shape, (x - cx) / scale, (y - cy) / scale)
        })
        .collect();

    let gray = rng::uniform(&mut rng, 0.3, 0.5);
    let hue = recipe.color as f64 / recipe.n_colors as f64 + rng::uniform(&mut rng, -0.01, 0.01);
    let value = rng::uniform(&mut rng, 0.85, 0.95);
    let fill = hsv_to_rgb(hue, 0.85, value);
    let sigma = recipe.noise_ppm as f64 * 1e-6;
    let mut rgb = Vec::with_capacity(side * side * 3);
    for &m in &mask {
        for ch in fill {
            let base = if m { ch } else { gray };
            let n: f64 = rng.sample(StandardNormal);
            rgb.push(((base + sigma * n).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (rgb, mask)
}

/// A rendered-on-demand synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub spec: DatasetSpec,
    pub rows: Vec<MetadataRow>,
    pub recipes: HashMap<String, Recipe>,
}

impl SyntheticData {
    pub fn recipe(&self, sample_id: &str) -> Result<&Recipe> {
        self.recipes
            .get(sample_id)
            .ok_or_else(|| Error::Invalid(format!("unknown sample {sample_id}")))
    }
}

impl ImageSource for SyntheticData {
    fn image(&self, sample_id: &str) -> Result<Tensor<f32>> {
        let r = self.recipe(sample_id)?;
        image_tensor(&render(r).0, r.side, r.side)
    }
}

/// Builds metadata rows and recipes for every sample; pixels are rendered
/// when requested.
pub fn synthesize(spec: &DatasetSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::streams::DATA);
    let mut grid: Vec<(usize, usize)> = (0..spec.n_states)
        .flat_map(|s| (0..spec.n_objects).map(move |o| (s, o)))
        .collect();
    if let Some(k) = spec.n_compositions {
        grid.shuffle(&mut rng);
        grid.truncate(k);
        grid.sort_unstable();
    }
    let states = spec.state_names();
    let objects = spec.object_names();
    let noise_ppm = (spec.noise * 1e6).round() as u32;
    let mut rows = Vec::with_capacity(grid.len() * spec.samples_per_composition);
    let mut recipes = HashMap::new();
    for &(s, o) in &grid {
        for k in 0..spec.samples_per_composition {
            let id = format!("{}-{}-{k:04}", states[s], objects[o]);
            recipes.insert(
                id.clone(),
                Recipe {
                    shape: o,
                    color: s,
                    n_colors: spec.n_states,
                    side: spec.image_side,
                    noise_ppm,
                    seed: rng.random(),
                },
            );
            rows.push(MetadataRow {
                sample_id: id,
                state: states[s].clone(),
                object: objects[o].clone(),
                pixel_path: None,
            });
        }
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        rows,
        recipes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_spec() {
        let spec = DatasetSpec {
            n_states: 3,
            n_objects: 2,
            n_compositions: None,
            samples_per_composition: 10,
            ..DatasetSpec::default()
        };
        let d = synthesize(&spec).unwrap();
        assert_eq!(d.rows.len(), 60);
        let pairs: std::collections::BTreeSet<_> =
            d.rows.iter().map(|r| (r.state.clone(), r.object.clone())).collect();
        assert_eq!(pairs.len(), 6);
    }

    #[test]
    fn small_images_rejected() {
        let spec = DatasetSpec {
            image_side: 12,
            ..DatasetSpec::default()
        };
        assert!(synthesize(&spec).is_err());
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = DatasetSpec::default();
        let (a, b) = (synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
        for r in a.rows.iter().take(20) {
            assert_eq!(render(a.recipe(&r.sample_id).unwrap()), render(b.recipe(&r.sample_id).unwrap()));
        }
    }

    #[test]
    fn state_changes_fill_not_mask() {
        let base = Recipe {
            shape: 2,
            color: 0,
            n_colors: 6,
            side: 32,
            noise_ppm: 50_000,
            seed: 99,
        };
        let other = Recipe { color: 3, ..base };
        let (pa, ma) = render(&base);
        let (pb, mb) = render(&other);
        assert_eq!(ma, mb);
        assert!(ma.iter().any(|&m| m) && ma.iter().any(|&m| !m));
        let mean_red = |px: &[u8], mask: &[bool]| -> f64 {
            let inside: Vec<f64> = mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| px[3 * i] as f64)
                .collect();
            inside.iter().sum::<f64>() / inside.len() as f64
        };
        assert!((mean_red(&pa, &ma) - mean_red(&pb, &mb)).abs() > 50.0);
    }

    #[test]
    fn labels_recoverable_from_recipes() {
        let spec = DatasetSpec::default();
        let d = synthesize(&spec).unwrap();
        let (states, objects) = (spec.state_names(), spec.object_names());
        for r in &d.rows {
            let rec = d.recipe(&r.sample_id).unwrap();
            assert_eq!(states[rec.color], r.state);
            assert_eq!(objects[rec.shape], r.object);
        }
    }
}

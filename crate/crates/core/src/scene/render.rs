use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ChangeKind, Jitter, SceneConfig, SceneObject, ScenePair};

/// A `C×H×W` feature grid stored cell-major: the `C` channels of cell
/// `(r, c)` are contiguous at offset `(r * W + c) * C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::shape(format!(
                "feature grid {channels}x{height}x{width} from {} values",
                data.len()
            )));
        }
        Ok(FeatureGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }

    /// `[H·W, C]` matrix view, rows in raster order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.cells(), self.channels], self.data.clone()).expect("consistent grid")
    }

    /// Cyclic translation: the cell at `(r, c)` moves to `(r + dr, c + dc)` mod the grid.
    pub fn roll(&self, drow: isize, dcol: isize) -> FeatureGrid {
        let (h, w, ch) = (self.height as isize, self.width as isize, self.channels);
        let mut data = vec![0.0; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let (tr, tc) = ((r + drow).rem_euclid(h), (c + dcol).rem_euclid(w));
                let src = ((r * w + c) as usize) * ch;
                let dst = ((tr * w + tc) as usize) * ch;
                data[dst..dst + ch].copy_from_slice(&self.data[src..src + ch]);
            }
        }
        FeatureGrid { data, ..*self }
    }
}

/// Fixed random embeddings standing in for CNN features. Each object
/// contributes the sum of its four attribute embeddings, spread over the
/// grid by an isotropic Gaussian around its (jittered) centre.
#[derive(Clone, Debug)]
pub struct Renderer {
    height: usize,
    width: usize,
    channels: usize,
    sigma: f64,
    background: Vec<f64>,
    shape: Vec<Vec<f64>>,
    color: Vec<Vec<f64>>,
    material: Vec<Vec<f64>>,
    size: Vec<Vec<f64>>,
}

impl Renderer {
    pub fn new(config: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.embedding_seed);
        let c = config.channels;
        let mut table = |rows: usize, std: f64| -> Vec<Vec<f64>> {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..rows)
                .map(|_| (0..c).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let background = table(1, 0.3).remove(0);
        Renderer {
            height: config.grid_h,
            width: config.grid_w,
            channels: c,
            sigma: config.footprint_sigma,
            background,
            shape: table(3, 0.5),
            color: table(8, 0.5),
            material: table(2, 0.5),
            size: table(2, 0.5),
        }
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn object_embedding(&self, o: &SceneObject) -> Vec<f64> {
        let parts = [
            &self.shape[o.shape as usize],
            &self.color[o.color as usize],
            &self.material[o.material as usize],
            &self.size[o.size as usize],
        ];
        (0..self.channels).map(|k| parts.iter().map(|p| p[k]).sum()).collect()
    }

    pub fn render(&self, objects: &[SceneObject], jitter: &Jitter) -> FeatureGrid {
        let (h, w, ch) = (self.height, self.width, self.channels);
        let mut data: Vec<f64> = (0..h * w).flat_map(|_| self.background.iter().copied()).collect();
        let two_s2 = 2.0 * self.sigma * self.sigma;
        for o in objects {
            let emb = self.object_embedding(o);
            let cr = o.row as f64 + jitter.drow as f64;
            let cc = o.col as f64 + jitter.dcol as f64;
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    let weight = (-d2 / two_s2).exp();
                    let cell = &mut data[(r * w + c) * ch..(r * w + c + 1) * ch];
                    for (x, e) in cell.iter_mut().zip(&emb) {
                        *x += weight * e;
                    }
                }
            }
        }
        if jitter.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(jitter.noise_seed);
            let normal = Normal::new(0.0, jitter.noise_sigma).expect("finite sigma");
            data.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        FeatureGrid {
            channels: ch,
            height: h,
            width: w,
            data,
        }
    }

    /// Before view (no jitter, no noise) and after view (jittered, noisy).
    pub fn render_pair(&self, pair: &ScenePair) -> (FeatureGrid, FeatureGrid) {
        (
            self.render(&pair.before, &Jitter::none()),
            self.render(&pair.after, &pair.jitter),
        )
    }

    /// Per-cell squared distance from the background embedding.
    pub fn foreground_energy(&self, grid: &FeatureGrid) -> Vec<f64> {
        grid.data
            .chunks(self.channels)
            .map(|cell| cell.iter().zip(&self.background).map(|(x, b)| (x - b).powi(2)).sum())
            .collect()
    }
}

pub fn render_feature_grid(objects: &[SceneObject], jitter: &Jitter, config: &SceneConfig) -> FeatureGrid {
    Renderer::new(config).render(objects, jitter)
}

/// Cells within unit distance of the changed object's centre, in the frame
/// the localizer is scored on: the before view for drops, the jittered after
/// view otherwise. A move marks both the vacated and the new location.
pub fn footprint(pair: &ScenePair, config: &SceneConfig) -> Vec<(usize, usize)> {
    let (dr, dc) = (pair.jitter.drow as isize, pair.jitter.dcol as isize);
    let centres: Vec<(isize, isize)> = match pair.change.kind {
        ChangeKind::None => vec![],
        ChangeKind::Drop => pair
            .change
            .before
            .iter()
            .map(|o| (o.row as isize, o.col as isize))
            .collect(),
        ChangeKind::Move => [pair.change.after, pair.change.before]
            .iter()
            .flatten()
            .map(|o| (o.row as isize + dr, o.col as isize + dc))
            .collect(),
        _ => pair
            .change
            .after
            .iter()
            .map(|o| (o.row as isize + dr, o.col as isize + dc))
            .collect(),
    };
    let mut cells = Vec::new();
    for r in 0..config.grid_h as isize {
        for c in 0..config.grid_w as isize {
            if centres.iter().any(|&(cr, cc)| (r - cr).pow(2) + (c - cc).pow(2) <= 1) {
                cells.push((r as usize, c as usize));
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::super::{sample_rng, sample_scene_pair, Color, Material, Shape, Size};
    use super::*;

    fn object(row: usize, col: usize) -> SceneObject {
        SceneObject {
            id: 0,
            shape: Shape::Cube,
            color: Color::Brown,
            material: Material::Rubber,
            size: Size::Small,
            row,
            col,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let cfg = SceneConfig::default();
        let r = Renderer::new(&cfg);
        let g = r.render(&[], &Jitter::none());
        for row in 0..cfg.grid_h {
            for col in 0..cfg.grid_w {
                assert_eq!(g.cell(row, col), r.background());
            }
        }
    }

    #[test]
    fn single_object_peaks_at_its_cell() {
        let cfg = SceneConfig::default();
        let r = Renderer::new(&cfg);
        let g = r.render(&[object(2, 4)], &Jitter::none());
        let e = r.foreground_energy(&g);
        let argmax = e.iter().enumerate().fold(0, |b, (i, v)| if *v > e[b] { i } else { b });
        assert_eq!(argmax, 2 * cfg.grid_w + 4);
    }

    #[test]
    fn jitter_shifts_rows() {
        let cfg = SceneConfig::default();
        let r = Renderer::new(&cfg);
        let objs = [
            object(2, 3),
            SceneObject {
                id: 1,
                row: 4,
                col: 1,
                ..object(0, 0)
            },
        ];
        let base = r.render(&objs, &Jitter::none());
        let moved = r.render(
            &objs,
            &Jitter {
                drow: 1,
                ..Jitter::none()
            },
        );
        // compare against a direct shift oracle; row 0 of the jittered view
        // has no source row, and the Gaussian tail wrapping is not modelled
        for row in 1..cfg.grid_h {
            for col in 0..cfg.grid_w {
                for (a, b) in moved.cell(row, col).iter().zip(base.cell(row - 1, col)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn footprint_holds_peak_difference() {
        let cfg = SceneConfig {
            jitter_max: 0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let r = Renderer::new(&cfg);
        let mut seen = 0;
        for i in 0..300 {
            let p = sample_scene_pair(&mut sample_rng(21, i), &cfg).unwrap();
            if p.change.kind == ChangeKind::None {
                continue;
            }
            seen += 1;
            let (b, a) = r.render_pair(&p);
            let diff: Vec<f64> = b
                .data()
                .chunks(cfg.channels)
                .zip(a.data().chunks(cfg.channels))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum())
                .collect();
            let best = diff
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > diff[b] { i } else { b });
            let cell = (best / cfg.grid_w, best % cfg.grid_w);
            assert!(footprint(&p, &cfg).contains(&cell), "{:?} {cell:?}", p.change.kind);
        }
        assert!(seen > 200);
    }

    #[test]
    fn roll_is_cyclic() {
        let g = FeatureGrid::new(1, 2, 3, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let r = g.roll(1, 1);
        assert_eq!(r.data(), &[5., 3., 4., 2., 0., 1.]);
        assert_eq!(r.roll(-1, -1), g);
    }
}

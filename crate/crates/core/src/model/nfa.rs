//! Neighbourhood feature aggregating: every grid cell attends over its `r×r`
//! spatial neighbourhood with cosine-similarity scores and adds the pooled
//! context back through a residual branch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::tensor::{Graph, Init, Tensor, Var};

use super::config::{ModelSpec, Padding};

/// Guards the cosine denominator against zero vectors.
pub const COSINE_EPS: f64 = 1e-8;

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Result<()> {
    let d = spec.d();
    store.init("nfa.m_v", &[spec.channels, d], Init::UniformScaled, rng)?;
    store.init("nfa.b_v", &[d], Init::Zeros, rng)?;
    store.init("nfa.pos_row", &[spec.height, d / 2], Init::NormalScaled, rng)?;
    store.init("nfa.pos_col", &[spec.width, d / 2], Init::NormalScaled, rng)?;
    for l in 0..spec.config.nfa_layers {
        for f in ["q", "k", "v", "t"] {
            init_linear(store, &format!("nfa.{l}.{f}"), d, d, rng)?;
        }
    }
    Ok(())
}

/// `[pos_row[row]; pos_col[col]]`.
pub fn position_embed(row: usize, col: usize, pos_row: &Tensor, pos_col: &Tensor) -> Result<Vec<f64>> {
    let (h, half) = (pos_row.shape()[0], pos_row.numel() / pos_row.shape()[0]);
    let w = pos_col.shape()[0];
    if row >= h || col >= w {
        return Err(Error::invalid(format!(
            "position ({row}, {col}) outside the {h}x{w} grid"
        )));
    }
    let mut v = pos_row.values()[row * half..(row + 1) * half].to_vec();
    let half_c = pos_col.numel() / w;
    v.extend_from_slice(&pos_col.values()[col * half_c..(col + 1) * half_c]);
    Ok(v)
}

/// Position embeddings of every cell in raster order, `[H·W, D]`.
pub fn position_grid(g: &mut Graph, p: &Bound, spec: &ModelSpec) -> Result<Var> {
    let rows: Vec<Option<usize>> = (0..spec.cells()).map(|i| Some(i / spec.width)).collect();
    let cols: Vec<Option<usize>> = (0..spec.cells()).map(|i| Some(i % spec.width)).collect();
    let pr = g.gather_rows(p.get("nfa.pos_row")?, &rows)?;
    let pc = g.gather_rows(p.get("nfa.pos_col")?, &cols)?;
    g.concat_cols(&[pr, pc])
}

/// `x′_i = x_i M_v + b_v + pos(i)` for a raw grid `x: [H·W, C]`.
pub fn project_grid(g: &mut Graph, p: &Bound, spec: &ModelSpec, x: Var) -> Result<Var> {
    if g.shape(x) != [spec.cells(), spec.channels] {
        return Err(Error::shape(format!(
            "project_grid: expected [{}x{}], got {:?}",
            spec.cells(),
            spec.channels,
            g.shape(x)
        )));
    }
    let y = g.matmul(x, p.get("nfa.m_v")?)?;
    let y = g.add_row(y, p.get("nfa.b_v")?)?;
    let pos = position_grid(g, p, spec)?;
    g.add(y, pos)
}

/// Source cell of every neighbourhood slot: entry `i·r² + s` is the cell
/// seen by cell `i` through slot `s` (slots in raster order, centre slot
/// `r²/2`), or `None` for zero padding outside the grid.
pub fn neighborhood_index(height: usize, width: usize, r: usize, padding: Padding) -> Result<Vec<Option<usize>>> {
    if r.is_multiple_of(2) {
        return Err(Error::invalid(format!("neighbourhood size must be odd, got {r}")));
    }
    if r > height.min(width) {
        return Err(Error::invalid(format!(
            "neighbourhood {r} exceeds the {height}x{width} grid"
        )));
    }
    let half = (r / 2) as isize;
    let (h, w) = (height as isize, width as isize);
    let mut index = Vec::with_capacity(height * width * r * r);
    for row in 0..h {
        for col in 0..w {
            for dr in -half..=half {
                for dc in -half..=half {
                    let (sr, sc) = (row + dr, col + dc);
                    index.push(match padding {
                        Padding::Cyclic => Some((sr.rem_euclid(h) * w + sc.rem_euclid(w)) as usize),
                        Padding::Zero if sr >= 0 && sr < h && sc >= 0 && sc < w => Some((sr * w + sc) as usize),
                        Padding::Zero => None,
                    });
                }
            }
        }
    }
    Ok(index)
}

/// Stacks each cell's `r×r` neighbours: `[H·W·r², D]`.
pub fn gather_neighborhood(g: &mut Graph, x: Var, spec: &ModelSpec) -> Result<Var> {
    let c = &spec.config;
    let index = neighborhood_index(spec.height, spec.width, c.neighborhood, c.padding)?;
    g.gather_rows(x, &index)
}

pub struct Aggregated {
    pub output: Var,
    /// Neighbourhood weights `[H·W, r²]`.
    pub attention: Var,
}

/// One aggregation layer over `x: [H·W, D]`. Keys and values of padded
/// slots are the maps applied to a zero feature, i.e. their biases.
pub fn aggregate(g: &mut Graph, p: &Bound, spec: &ModelSpec, layer: usize, x: Var) -> Result<Aggregated> {
    let c = &spec.config;
    let index = neighborhood_index(spec.height, spec.width, c.neighborhood, c.padding)?;
    let pre = |f: &str| format!("nfa.{layer}.{f}");

    let q = linear(g, p, &pre("q"), x)?;
    let k_lin = g.matmul(x, p.get(&pre("k.w"))?)?;
    let k = g.gather_rows(k_lin, &index)?;
    let k = g.add_row(k, p.get(&pre("k.b"))?)?;
    let v_lin = g.matmul(x, p.get(&pre("v.w"))?)?;
    let v = g.gather_rows(v_lin, &index)?;
    let v = g.add_row(v, p.get(&pre("v.b"))?)?;

    let qn = g.normalize_rows(q, COSINE_EPS);
    let kn = g.normalize_rows(k, COSINE_EPS);
    let e = g.block_dot(qn, kn)?;
    let attention = g.softmax_last(e);
    let pooled = g.block_weighted_sum(attention, v)?;
    let t = linear(g, p, &pre("t"), pooled)?;
    let output = g.add(x, t)?;
    Ok(Aggregated { output, attention })
}

/// Projection followed by every aggregation layer; positions are added
/// once, before the first layer. Returns `(x′, x̂)`.
pub fn nfa_forward(g: &mut Graph, p: &Bound, spec: &ModelSpec, x: Var) -> Result<(Var, Var)> {
    let projected = project_grid(g, p, spec, x)?;
    let mut h = projected;
    for l in 0..spec.config.nfa_layers {
        h = aggregate(g, p, spec, l, h)?.output;
    }
    Ok((projected, h))
}

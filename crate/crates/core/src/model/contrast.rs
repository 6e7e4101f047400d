//! Common feature distilling, contrastive fusion and the change localizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::tensor::{Graph, Init, Var};

use super::config::ModelSpec;

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Result<()> {
    let d = spec.d();
    let r = spec.config.neighborhood;
    store.init("cfd.depthwise", &[d, r * r], Init::UniformScaled, rng)?;
    store.init("cfd.pointwise", &[d, d], Init::UniformScaled, rng)?;
    init_linear(store, "cfd.fuse", 2 * d, d, rng)?;
    for head in localizer_heads(spec) {
        init_linear(store, &format!("loc.{head}.hidden"), 2 * d, d, rng)?;
        init_linear(store, &format!("loc.{head}.out"), d, 1, rng)?;
    }
    Ok(())
}

fn localizer_heads(spec: &ModelSpec) -> &'static [&'static str] {
    if spec.config.share_localizer {
        &["shared"]
    } else {
        &["bef", "aft"]
    }
}

/// Depthwise `r×r` convolution (zero same-padding) then a pointwise `D×D`
/// mix; `x: [H·W, D]` in, `[H·W, D]` out.
pub fn depthwise_project(g: &mut Graph, p: &Bound, spec: &ModelSpec, x: Var) -> Result<Var> {
    let y = g.depthwise_conv(x, p.get("cfd.depthwise")?, spec.height, spec.width)?;
    g.matmul(y, p.get("cfd.pointwise")?)
}

/// Row-stochastic `softmax_j(a_i · b_j / τ)`.
pub fn similarity_matrix(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "similarity_matrix: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let logits = g.matmul_t(a, b)?;
    let logits = if temperature == 1.0 {
        logits
    } else {
        g.scale(logits, 1.0 / temperature)
    };
    Ok(g.softmax_last(logits))
}

/// Common content `B · X_other`.
pub fn distill_common(g: &mut Graph, b: Var, other: Var) -> Result<Var> {
    g.matmul(b, other)
}

pub fn change_features(g: &mut Graph, own: Var, common: Var) -> Result<Var> {
    g.sub(own, common)
}

/// `ReLU([c_bef; c_aft] W_h + b_h)`.
pub fn fuse_contrastive(g: &mut Graph, p: &Bound, change_bef: Var, change_aft: Var) -> Result<Var> {
    let cat = g.concat_cols(&[change_bef, change_aft])?;
    let h = linear(g, p, "cfd.fuse", cat)?;
    Ok(g.relu(h))
}

pub struct Distilled {
    /// Depthwise-projected grids `X̃`.
    pub x_bef: Var,
    pub x_aft: Var,
    /// Similarity matrices for the before→after and after→before directions
    /// (absent when distilling is disabled).
    pub sim_bef: Option<Var>,
    pub sim_aft: Option<Var>,
    pub change_bef: Var,
    pub change_aft: Var,
    pub fused: Var,
}

/// Projects both aggregated grids, removes the content each shares with the
/// other, and fuses the two residues. With `distill == false` the projected
/// grids are fused directly.
pub fn cfd_forward(g: &mut Graph, p: &Bound, spec: &ModelSpec, bef: Var, aft: Var, distill: bool) -> Result<Distilled> {
    let x_bef = depthwise_project(g, p, spec, bef)?;
    let x_aft = depthwise_project(g, p, spec, aft)?;
    let (sim_bef, sim_aft, change_bef, change_aft) = if distill {
        let tau = spec.config.temperature;
        let sb = similarity_matrix(g, x_bef, x_aft, tau)?;
        let sa = similarity_matrix(g, x_aft, x_bef, tau)?;
        let ub = distill_common(g, sb, x_aft)?;
        let ua = distill_common(g, sa, x_bef)?;
        let cb = change_features(g, x_bef, ub)?;
        let ca = change_features(g, x_aft, ua)?;
        (Some(sb), Some(sa), cb, ca)
    } else {
        (None, None, x_bef, x_aft)
    };
    let fused = fuse_contrastive(g, p, change_bef, change_aft)?;
    Ok(Distilled {
        x_bef,
        x_aft,
        sim_bef,
        sim_aft,
        change_bef,
        change_aft,
        fused,
    })
}

/// Pooled change vectors (`[1, D]` each) and the localizer maps
/// (`[H·W, 1]`, raster order).
#[derive(Clone, Copy, Debug)]
pub struct ChangeSummary {
    pub l_bef: Var,
    pub l_aft: Var,
    pub l_diff: Var,
    pub gamma_bef: Var,
    pub gamma_aft: Var,
}

fn attend(g: &mut Graph, p: &Bound, head: &str, query: Var, image: Var) -> Result<(Var, Var)> {
    let cat = g.concat_cols(&[query, image])?;
    let h = linear(g, p, &format!("loc.{head}.hidden"), cat)?;
    let h = g.relu(h);
    let s = linear(g, p, &format!("loc.{head}.out"), h)?;
    let gamma = g.sigmoid(s);
    let gt = g.transpose(gamma)?;
    let pooled = g.matmul(gt, image)?;
    Ok((gamma, pooled))
}

/// Scores every cell of each image against the change query and pools the
/// image with those scores; `l_diff = l_aft − l_bef`.
pub fn localize(g: &mut Graph, p: &Bound, spec: &ModelSpec, query: Var, bef: Var, aft: Var) -> Result<ChangeSummary> {
    let heads = localizer_heads(spec);
    let (hb, ha) = (heads[0], heads[heads.len() - 1]);
    let (gamma_bef, l_bef) = attend(g, p, hb, query, bef)?;
    let (gamma_aft, l_aft) = attend(g, p, ha, query, aft)?;
    let l_diff = g.sub(l_aft, l_bef)?;
    Ok(ChangeSummary {
        l_bef,
        l_aft,
        l_diff,
        gamma_bef,
        gamma_aft,
    })
}

/// Ablation: the localizer is queried with the plain difference
/// `aft − bef` instead of the distilled contrastive features.
pub fn diff_sub_baseline(g: &mut Graph, p: &Bound, spec: &ModelSpec, bef: Var, aft: Var) -> Result<ChangeSummary> {
    let diff = g.sub(aft, bef)?;
    localize(g, p, spec, diff, bef, aft)
}

//! Transformer decoder over the three-slot visual sequence, with a word
//! head and a dependency-tag head on the shared final states.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::tensor::{Graph, Init, Var};

use super::config::ModelSpec;
use super::contrast::ChangeSummary;

pub const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax value for masked attention slots.
pub const MASK_VALUE: f64 = -1e9;

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Result<()> {
    let c = &spec.config;
    let d = c.d_model;
    store.init("dec.tok", &[spec.vocab_size, c.word_dim], Init::NormalScaled, rng)?;
    store.init("dec.pos", &[c.max_len, c.word_dim], Init::NormalScaled, rng)?;
    init_linear(store, "dec.adapt", c.word_dim, d, rng)?;
    for l in 0..c.decoder_layers {
        for block in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                store.init(&format!("dec.{l}.{block}.{w}"), &[d, d], Init::UniformScaled, rng)?;
            }
        }
        for ln in ["ln1", "ln2", "ln3"] {
            store.fill(&format!("dec.{l}.{ln}.g"), &[d], 1.0)?;
            store.fill(&format!("dec.{l}.{ln}.b"), &[d], 0.0)?;
        }
        init_linear(store, &format!("dec.{l}.ffn1"), d, c.ffn_dim, rng)?;
        init_linear(store, &format!("dec.{l}.ffn2"), c.ffn_dim, d, rng)?;
    }
    init_linear(store, "head.word", d, spec.vocab_size, rng)?;
    init_linear(store, "head.dep", d, spec.tagset_size, rng)
}

/// Rows `[l_bef; l_aft; l_diff]`, `[3, D]`.
pub fn build_visual_sequence(g: &mut Graph, s: &ChangeSummary) -> Result<Var> {
    g.concat_rows(&[s.l_bef, s.l_aft, s.l_diff])
}

/// `[t, t]` additive mask letting position `i` see positions `≤ i`.
pub fn causal_mask(g: &mut Graph, t: usize) -> Result<Var> {
    let values = (0..t * t)
        .map(|k| if k % t > k / t { MASK_VALUE } else { 0.0 })
        .collect();
    g.constant(vec![t, t], values)
}

pub struct Attention {
    pub output: Var,
    /// One `[T_q, T_v]` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` column slices of the projected
/// queries, keys and values; heads are concatenated and mixed by `W^O`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    heads: usize,
    query: Var,
    memory: Var,
    mask: Option<Var>,
) -> Result<Attention> {
    let (tq, d) = (g.shape(query)[0], g.shape(query)[1]);
    let tv = g.shape(memory)[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
    }
    if let Some(m) = mask {
        if g.shape(m) != [tq, tv] {
            return Err(Error::shape(format!(
                "attention mask {:?} for [{tq}x{tv}] scores",
                g.shape(m)
            )));
        }
    }
    let q = g.matmul(query, p.get(&format!("{prefix}.wq"))?)?;
    let k = g.matmul(memory, p.get(&format!("{prefix}.wk"))?)?;
    let v = g.matmul(memory, p.get(&format!("{prefix}.wv"))?)?;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let s = g.matmul_t(qh, kh)?;
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax_last(s);
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = g.concat_cols(&outs)?;
    let output = g.matmul(cat, p.get(&format!("{prefix}.wo"))?)?;
    Ok(Attention { output, weights })
}

fn add_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var, y: Var) -> Result<Var> {
    let s = g.add(x, y)?;
    g.layer_norm(
        s,
        p.get(&format!("{prefix}.g"))?,
        p.get(&format!("{prefix}.b"))?,
        LN_EPS,
    )
}

/// `LN(E + MultiHead(E, E, E))` under the causal mask.
pub fn masked_self_attention_layer(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    layer: usize,
    e: Var,
) -> Result<(Var, Attention)> {
    let mask = causal_mask(g, g.shape(e)[0])?;
    let att = multi_head_attention(g, p, &format!("dec.{layer}.self"), spec.config.heads, e, e, Some(mask))?;
    let out = add_norm(g, p, &format!("dec.{layer}.ln1"), e, att.output)?;
    Ok((out, att))
}

/// `LN(Ĥ + MultiHead(Ĥ, V, V))`.
pub fn cross_attention_layer(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    layer: usize,
    h: Var,
    visual: Var,
) -> Result<(Var, Attention)> {
    let att = multi_head_attention(g, p, &format!("dec.{layer}.cross"), spec.config.heads, h, visual, None)?;
    let out = add_norm(g, p, &format!("dec.{layer}.ln2"), h, att.output)?;
    Ok((out, att))
}

/// `LN(H + GELU(H W_1 + b_1) W_2 + b_2)`.
pub fn feed_forward_layer(g: &mut Graph, p: &Bound, layer: usize, h: Var) -> Result<Var> {
    let f = linear(g, p, &format!("dec.{layer}.ffn1"), h)?;
    let f = g.gelu(f);
    let f = linear(g, p, &format!("dec.{layer}.ffn2"), f)?;
    add_norm(g, p, &format!("dec.{layer}.ln3"), h, f)
}

pub struct DecoderOutput {
    /// `[T, U]`.
    pub word_logits: Var,
    /// `[T, n]`; skipped when the dependency head is not requested.
    pub dep_logits: Option<Var>,
    pub self_attention: Vec<Attention>,
    pub cross_attention: Vec<Attention>,
}

/// Token embeddings plus learned positions, adapted to model width.
pub fn embed_tokens(g: &mut Graph, p: &Bound, spec: &ModelSpec, tokens: &[usize]) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::invalid("cannot decode an empty token sequence"));
    }
    if t > spec.config.max_len {
        return Err(Error::invalid(format!(
            "sequence of {t} tokens exceeds max_len {}",
            spec.config.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= spec.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    let idx: Vec<Option<usize>> = tokens.iter().map(|&tok| Some(tok)).collect();
    let emb = g.gather_rows(p.get("dec.tok")?, &idx)?;
    let pos = g.slice_rows(p.get("dec.pos")?, 0, t)?;
    let e = g.add(emb, pos)?;
    linear(g, p, "dec.adapt", e)
}

pub fn decoder_forward(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    tokens: &[usize],
    visual: Var,
    with_dep: bool,
) -> Result<DecoderOutput> {
    if g.shape(visual) != [3, spec.d()] {
        return Err(Error::shape(format!(
            "visual sequence must be [3x{}], got {:?}",
            spec.d(),
            g.shape(visual)
        )));
    }
    let mut h = embed_tokens(g, p, spec, tokens)?;
    let mut self_attention = Vec::new();
    let mut cross_attention = Vec::new();
    for l in 0..spec.config.decoder_layers {
        let (e, sa) = masked_self_attention_layer(g, p, spec, l, h)?;
        let (c, ca) = cross_attention_layer(g, p, spec, l, e, visual)?;
        h = feed_forward_layer(g, p, l, c)?;
        self_attention.push(sa);
        cross_attention.push(ca);
    }
    let word_logits = linear(g, p, "head.word", h)?;
    let dep_logits = if with_dep {
        Some(linear(g, p, "head.dep", h)?)
    } else {
        None
    };
    Ok(DecoderOutput {
        word_logits,
        dep_logits,
        self_attention,
        cross_attention,
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

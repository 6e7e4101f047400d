//! The captioning model: aggregation, distilling and localization over a
//! before/after grid pair, followed by the syntax-aware decoder.

pub mod config;
pub mod contrast;
pub mod decoder;
pub mod nfa;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, ModelSpec, Padding};
pub use contrast::{ChangeSummary, Distilled};
pub use decoder::{argmax, DecoderOutput};

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::scene::{FeatureGrid, BOS, EOS};
use crate::tensor::{Graph, Tensor, Var};

/// Architecture switches for the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_nfa: bool,
    pub use_cfd: bool,
    /// Replaces aggregation and distilling with a plain difference query;
    /// overrides the other two switches.
    pub diff_sub: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_nfa: true,
            use_cfd: true,
            diff_sub: false,
        }
    }
}

impl Ablation {
    pub fn diff_sub() -> Self {
        Ablation {
            diff_sub: true,
            ..Default::default()
        }
    }
}

pub struct Encoded {
    pub visual: Var,
    pub summary: ChangeSummary,
    pub distilled: Option<Distilled>,
}

/// Grid pair (`[H·W, C]` each) to the `[3, D]` visual sequence.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    spec: &ModelSpec,
    ablation: Ablation,
    before: Var,
    after: Var,
) -> Result<Encoded> {
    let (summary, distilled) = if ablation.diff_sub {
        let xb = nfa::project_grid(g, p, spec, before)?;
        let xa = nfa::project_grid(g, p, spec, after)?;
        (contrast::diff_sub_baseline(g, p, spec, xb, xa)?, None)
    } else {
        let (hb, ha) = if ablation.use_nfa {
            (
                nfa::nfa_forward(g, p, spec, before)?.1,
                nfa::nfa_forward(g, p, spec, after)?.1,
            )
        } else {
            (
                nfa::project_grid(g, p, spec, before)?,
                nfa::project_grid(g, p, spec, after)?,
            )
        };
        let d = contrast::cfd_forward(g, p, spec, hb, ha, ablation.use_cfd)?;
        let s = contrast::localize(g, p, spec, d.fused, d.x_bef, d.x_aft)?;
        (s, Some(d))
    };
    let visual = decoder::build_visual_sequence(g, &summary)?;
    Ok(Encoded {
        visual,
        summary,
        distilled,
    })
}

fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("head.")
}

/// Output of greedy decoding, without `<bos>`/`<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub tags: Vec<usize>,
}

/// Visual sequence and localizer maps of one pair, detached from any graph.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub visual: Tensor,
    pub gamma_bef: Vec<f64>,
    pub gamma_aft: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.config.init_seed);
        let mut params = ParamStore::new();
        nfa::init_params(&mut params, &spec, &mut rng)?;
        contrast::init_params(&mut params, &spec, &mut rng)?;
        decoder::init_params(&mut params, &spec, &mut rng)?;
        Ok(Model { spec, params })
    }

    pub fn grid_var(&self, g: &mut Graph, grid: &FeatureGrid) -> Result<Var> {
        g.constant(vec![grid.cells(), grid.channels()], grid.data().to_vec())
    }

    pub fn encode(&self, ablation: Ablation, before: &FeatureGrid, after: &FeatureGrid) -> Result<Encoding> {
        let mut g = Graph::new();
        let p = self.params.bind_filtered(&mut g, |n| !is_decoder_param(n));
        let b = self.grid_var(&mut g, before)?;
        let a = self.grid_var(&mut g, after)?;
        let e = encode(&mut g, &p, &self.spec, ablation, b, a)?;
        Ok(Encoding {
            visual: g.to_tensor(e.visual),
            gamma_bef: g.value(e.summary.gamma_bef).to_vec(),
            gamma_aft: g.value(e.summary.gamma_aft).to_vec(),
        })
    }

    /// Appends the argmax word until `<eos>` or `max_len` positions; the tag
    /// of each word is the argmax of the dependency logits at the position
    /// that produced it.
    pub fn greedy_decode(&self, visual: &Tensor, max_len: usize) -> Result<Decoded> {
        let max_len = max_len.min(self.spec.config.max_len);
        let mut seq = vec![BOS];
        let mut tags = Vec::new();
        while seq.len() < max_len {
            let mut g = Graph::new();
            let p = self.params.bind_filtered(&mut g, is_decoder_param);
            let v = g.leaf(visual);
            let out = decoder::decoder_forward(&mut g, &p, &self.spec, &seq, v, true)?;
            let (u, n) = (self.spec.vocab_size, self.spec.tagset_size);
            let t = seq.len();
            let word = argmax(&g.value(out.word_logits)[(t - 1) * u..t * u]);
            if word == EOS {
                break;
            }
            let dep = out.dep_logits.expect("dependency head requested");
            tags.push(argmax(&g.value(dep)[(t - 1) * n..t * n]));
            seq.push(word);
        }
        seq.remove(0);
        Ok(Decoded { tokens: seq, tags })
    }
}

//! Named parameter storage and its binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{finite_difference_check, GradCheckReport, Graph, Init, Tensor, Var};

/// Optimisation partition: the dependency head (`W_d`, `b_d`) versus
/// everything else, which feeds the caption path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Caption,
    Dependency,
}

/// Prefix that places a parameter in [`ParamGroup::Dependency`].
pub const DEPENDENCY_PREFIX: &str = "head.dep.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_grad()));
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], scheme: Init, rng: &mut R) -> Result<()> {
        self.insert(name, Tensor::init(shape, scheme, rng)?)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Overwrites the values of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if t.numel() != values.len() {
            return Err(Error::shape(format!(
                "parameter `{name}` holds {} values, got {}",
                t.numel(),
                values.len()
            )));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with(DEPENDENCY_PREFIX) {
            ParamGroup::Dependency
        } else {
            ParamGroup::Caption
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_filtered(g, |_| true)
    }

    /// Records only the parameters accepted by `keep`.
    pub fn bind_filtered(&self, g: &mut Graph, keep: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, t)| (n.clone(), g.leaf_named(t, n)))
            .collect();
        Bound { vars }
    }

    /// Adds `scale ·` the graph gradients of every bound parameter into the
    /// stored accumulators.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound, scale: f64) -> Result<()> {
        for (name, &var) in &bound.vars {
            if let (Some(grad), Some(&i)) = (g.grad(var), self.index.get(name)) {
                self.entries[i].1.accumulate_grad(grad, scale)?;
            }
        }
        Ok(())
    }

    /// Global L2 norm of all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for (_, t) in self.entries.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
}

/// Parameter name → graph handle for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<S: AsRef<str>>(names: &[S], vars: &[Var]) -> Self {
        Bound {
            vars: names
                .iter()
                .map(|n| n.as_ref().to_string())
                .zip(vars.iter().copied())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Finite-difference check of the parameters accepted by `select`; the
/// remaining parameters enter `f` as constants.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let (chosen, fixed): (Vec<_>, Vec<_>) = store.entries.iter().cloned().partition(|(n, _)| select(n));
    if chosen.is_empty() {
        return Err(Error::invalid("no parameters selected for gradient checking"));
    }
    let names: Vec<&str> = chosen.iter().map(|(n, _)| n.as_str()).collect();
    finite_difference_check(
        |g, vars| {
            let mut bound = Bound::from_pairs(&names, vars);
            for (n, t) in &fixed {
                let v = g.constant(t.shape().to_vec(), t.values().to_vec())?;
                bound.insert(n, v);
            }
            f(g, &bound)
        },
        &chosen,
        h,
        tol,
    )
}

/// `x · W + b` with `W` and `b` stored as `{prefix}.w` / `{prefix}.b`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add_row(y, p.get(&format!("{prefix}.b"))?)
}

/// Glorot weight `[fan_in, fan_out]` plus zero bias under `prefix`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.init(&format!("{prefix}.w"), &[fan_in, fan_out], Init::UniformScaled, rng)?;
    store.init(&format!("{prefix}.b"), &[fan_out], Init::Zeros, rng)
}

//! Flat parameter layouts and the maps between constrained and unconstrained
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::domain::inv_logit;

/// Map from an unconstrained coordinate `u` to its constrained value `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// `x = u`
    Identity,
    /// `x = exp(u)`, for positive scales.
    Log,
    /// `x = inv_logit(u)`, for values in (0, 1).
    Logit,
}

impl Transform {
    pub fn constrain(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit => inv_logit(u),
        }
    }

    pub fn unconstrain(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Logit => (x / (1.0 - x)).ln(),
        }
    }

    /// `ln |dx/du|` at `u`.
    pub fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => u,
            Transform::Logit => -softplus(-u) - softplus(u),
        }
    }

    /// Returns `(dx/du, d ln|dx/du| / du)` at the constrained value `x`.
    pub fn derivatives(self, x: f64) -> (f64, f64) {
        match self {
            Transform::Identity => (1.0, 0.0),
            Transform::Log => (x, 1.0),
            Transform::Logit => (x * (1.0 - x), 1.0 - 2.0 * x),
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// A named group of coordinates sharing one transform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// Element labels; `None` marks a scalar.
    pub labels: Option<Vec<String>>,
    pub transform: Transform,
}

impl BlockSpec {
    pub fn scalar(name: &str, transform: Transform) -> Self {
        Self {
            name: name.to_string(),
            labels: None,
            transform,
        }
    }

    pub fn vector(name: &str, labels: Vec<String>, transform: Transform) -> Self {
        Self {
            name: name.to_string(),
            labels: Some(labels),
            transform,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.as_ref().map_or(1, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_names(&self) -> Vec<String> {
        match &self.labels {
            None => vec![self.name.clone()],
            Some(labels) => labels.iter().map(|l| format!("{}[{l}]", self.name)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub spec: BlockSpec,
    pub offset: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.spec.len()
    }
}

/// Ordered blocks covering every free parameter exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    dim: usize,
}

impl ParamLayout {
    pub fn new(specs: Vec<BlockSpec>) -> Self {
        let mut offset = 0;
        let blocks = specs
            .into_iter()
            .map(|spec| {
                let block = Block { spec, offset };
                offset += block.spec.len();
                block
            })
            .collect();
        Self {
            blocks,
            dim: offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.spec.name == name)
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        self.block(name)
            .unwrap_or_else(|| panic!("layout has no block '{name}'"))
            .range()
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.spec.element_names()).collect()
    }

    /// Constrained values and the log absolute Jacobian of the inverse map.
    pub fn constrain(&self, u: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(u.len(), self.dim, "vector does not match layout");
        let mut x = Vec::with_capacity(self.dim);
        let mut log_jac = 0.0;
        for block in &self.blocks {
            let t = block.spec.transform;
            for &ui in &u[block.range()] {
                x.push(t.constrain(ui));
                log_jac += t.log_jacobian(ui);
            }
        }
        (x, log_jac)
    }

    /// Unconstrained coordinates of `x` and the same log Jacobian that
    /// [`ParamLayout::constrain`] reports for them.
    pub fn unconstrain(&self, x: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(x.len(), self.dim, "vector does not match layout");
        let mut u = Vec::with_capacity(self.dim);
        let mut log_jac = 0.0;
        for block in &self.blocks {
            let t = block.spec.transform;
            for &xi in &x[block.range()] {
                let ui = t.unconstrain(xi);
                u.push(ui);
                log_jac += t.log_jacobian(ui);
            }
        }
        (u, log_jac)
    }

    /// Per-coordinate transform of the layout.
    pub fn transforms(&self) -> Vec<Transform> {
        self.blocks
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.spec.transform, b.spec.len()))
            .collect()
    }
}

/// A point in unconstrained space paired with the layout that names it.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedVector<'a> {
    pub layout: &'a ParamLayout,
    pub values: Vec<f64>,
}

impl UnconstrainedVector<'_> {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }
}

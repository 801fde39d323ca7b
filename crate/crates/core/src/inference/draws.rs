use serde::{Deserialize, Serialize};

use super::InferenceError;
use crate::domain::GridShape;

/// Post-warmup output of one chain. `values` is row-major, one row per draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub values: Vec<f64>,
    pub lp: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub step_size: f64,
    pub tree_depth: Vec<u32>,
    pub n_leapfrog: Vec<u32>,
    pub divergent: Vec<bool>,
}

impl ChainDraws {
    pub fn len(&self) -> usize {
        self.lp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lp.is_empty()
    }
}

/// Draws from every chain, merged in chain order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    /// Grid behind the `eta[...]` columns, when there is one.
    pub grid: Option<GridShape>,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, chains: Vec<ChainDraws>, grid: Option<GridShape>) -> Self {
        let draws = Self { names, chains, grid };
        draws.check_shapes();
        draws
    }

    fn check_shapes(&self) {
        let n = self.names.len();
        for (c, chain) in self.chains.iter().enumerate() {
            let len = chain.len();
            assert_eq!(chain.values.len(), len * n, "chain {c}: value array shape");
            assert!(
                chain.accept_stat.len() == len
                    && chain.tree_depth.len() == len
                    && chain.n_leapfrog.len() == len
                    && chain.divergent.len() == len,
                "chain {c}: sampler statistics shape"
            );
        }
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Draws per chain (chains are equally long by construction).
    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, ChainDraws::len)
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, chain: usize, index: usize) -> Vec<f64> {
        let n = self.names.len();
        self.chains[chain].values.iter().skip(index).step_by(n).copied().collect()
    }

    pub fn by_chain(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let i = self.index_of(name)?;
        Some((0..self.n_chains()).map(|c| self.column(c, i)).collect())
    }

    /// All draws of one parameter, chain after chain.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        self.by_chain(name).map(|c| c.concat())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(ChainDraws::len).sum()
    }

    pub fn divergence_rate(&self) -> f64 {
        let total = self.total_draws();
        if total == 0 {
            return 0.0;
        }
        let divergent: usize = self
            .chains
            .iter()
            .map(|c| c.divergent.iter().filter(|&&d| d).count())
            .sum();
        divergent as f64 / total as f64
    }

    pub fn check_divergences(&self, limit: f64) -> Result<(), InferenceError> {
        let rate = self.divergence_rate();
        if rate > limit {
            Err(InferenceError::TooManyDivergences { rate, limit })
        } else {
            Ok(())
        }
    }
}

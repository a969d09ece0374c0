//! Mixture-of-experts LoRA adapter.
//!
//! Each expert is a rank-`r` product `B·A` with `A: r×d` and `B: d×r`.
//! A router `R: d×N_e` scores the routed experts per token; the `K` best
//! logits go through a softmax and weight their experts, while shared
//! experts are always applied with weight 1:
//!
//! `out(h) = Σ_{i∈TopK} G_i · B_i A_i h + Σ_shared B_0 A_0 h`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::ag::{self, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    /// Always-active experts.
    pub shared: usize,
    /// Experts selected per token by the router.
    pub routed: usize,
    /// Routed experts activated per token; 0 runs the shared experts only.
    pub top_k: usize,
    pub rank: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            shared: 1,
            routed: 8,
            top_k: 2,
            rank: 8,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= width {
            return Err(Error::Config(format!(
                "expert rank must satisfy 0 < r < d, got r={} d={width}",
                self.rank
            )));
        }
        if self.top_k > self.routed {
            return Err(Error::Config(format!(
                "top_k={} exceeds routed expert count {}",
                self.top_k, self.routed
            )));
        }
        if self.shared + self.routed == 0 {
            return Err(Error::Config("adapter needs at least one expert".into()));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.shared + self.routed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraExpert {
    pub a: ParamId,
    pub b: ParamId,
}

/// Which expert to evaluate on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertRef {
    Shared(usize),
    /// 1-based routed expert id.
    Routed(usize),
}

/// Router decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateResult<T> {
    /// 1-based routed expert ids, strongest first.
    pub indices: Vec<usize>,
    /// Mixing weights aligned with `indices`; they sum to 1.
    pub weights: Vec<T>,
}

/// Top-K then softmax over the surviving logits. Ties go to the lower id.
pub fn gate<T: Scalar>(logits: &[T], k: usize) -> GateResult<T> {
    let sel = ag::top_k_indices(logits, k);
    let vals: Vec<T> = sel.iter().map(|&i| logits[i]).collect();
    GateResult {
        indices: sel.iter().map(|&i| i + 1).collect(),
        weights: ag::softmax(&vals),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeAdapter {
    pub router: ParamId,
    pub shared: Vec<LoraExpert>,
    pub routed: Vec<LoraExpert>,
    pub top_k: usize,
    pub rank: usize,
    pub width: usize,
}

impl MoeAdapter {
    /// Registers router and expert parameters under `prefix`.
    /// `B = 0` and `A ~ U(−1/√d, 1/√d)`, so a fresh adapter outputs exactly zero.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        cfg: &MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let bound = 1.0 / (width as f64).sqrt();
        let uni = Uniform::new(-bound, bound).expect("valid bounds");
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut sample = |n: usize, dist: &dyn Fn(&mut R) -> f64| -> Vec<f64> { (0..n).map(|_| dist(rng)).collect() };

        let router_vals = sample(width * cfg.routed, &|r| normal.sample(r));
        let router = store.add(
            format!("{prefix}.router"),
            Tensor::from_f64(vec![width, cfg.routed], &router_vals)?,
            true,
        )?;
        let mut make = |store: &mut ParamStore<T>, name: String| -> Result<LoraExpert> {
            let a_vals = sample(cfg.rank * width, &|r| uni.sample(r));
            let a = store.add(format!("{name}.a"), Tensor::from_f64(vec![cfg.rank, width], &a_vals)?, true)?;
            let b = store.add(format!("{name}.b"), Tensor::zeros(vec![width, cfg.rank]), true)?;
            Ok(LoraExpert { a, b })
        };
        let shared = (0..cfg.shared)
            .map(|j| make(store, format!("{prefix}.shared{j}")))
            .collect::<Result<Vec<_>>>()?;
        let routed = (1..=cfg.routed)
            .map(|i| make(store, format!("{prefix}.expert{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            router,
            shared,
            routed,
            top_k: cfg.top_k,
            rank: cfg.rank,
            width,
        })
    }

    pub fn num_routed(&self) -> usize {
        self.routed.len()
    }

    pub fn num_experts(&self) -> usize {
        self.shared.len() + self.routed.len()
    }

    /// Experts in variant order: shared first, then routed by id.
    pub fn expert_refs(&self) -> Vec<ExpertRef> {
        (0..self.shared.len())
            .map(ExpertRef::Shared)
            .chain((1..=self.routed.len()).map(ExpertRef::Routed))
            .collect()
    }

    pub fn expert(&self, which: ExpertRef) -> LoraExpert {
        match which {
            ExpertRef::Shared(j) => self.shared[j],
            ExpertRef::Routed(i) => self.routed[i - 1],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.router)
            .chain(self.shared.iter().chain(&self.routed).flat_map(|e| [e.a, e.b]))
            .collect()
    }

    pub fn router_logits<T: Scalar>(&self, store: &ParamStore<T>, h: &[T]) -> Vec<T> {
        let r = store.get(self.router);
        let n = self.routed.len();
        let mut out = vec![T::zero(); n];
        for (d, &hd) in h.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o + hd * r.data()[d * n + j];
            }
        }
        out
    }

    /// Gate for a single (already normalized) token.
    pub fn route<T: Scalar>(&self, store: &ParamStore<T>, h: &[T]) -> GateResult<T> {
        gate(&self.router_logits(store, h), self.top_k)
    }

    /// `B A h` for one expert.
    pub fn apply_expert<T: Scalar>(&self, store: &ParamStore<T>, which: ExpertRef, h: &[T]) -> Vec<T> {
        let e = self.expert(which);
        let a = store.get(e.a);
        let b = store.get(e.b);
        let z: Vec<T> = a.rows().map(|row| ag::dot(row, h)).collect();
        b.rows().map(|row| ag::dot(row, &z)).collect()
    }

    /// Mixture output for one token, evaluated directly from stored values.
    pub fn adapter_forward<T: Scalar>(&self, store: &ParamStore<T>, h: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.width];
        for j in 0..self.shared.len() {
            for (o, v) in out.iter_mut().zip(self.apply_expert(store, ExpertRef::Shared(j), h)) {
                *o = *o + v;
            }
        }
        if self.top_k > 0 && !self.routed.is_empty() {
            let gr = self.route(store, h);
            for (&i, &w) in gr.indices.iter().zip(&gr.weights) {
                for (o, v) in out.iter_mut().zip(self.apply_expert(store, ExpertRef::Routed(i), h)) {
                    *o = *o + w * v;
                }
            }
        }
        out
    }

    /// `x · Aᵀ · Bᵀ` for `x: [n, d]`.
    pub fn expert_output<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        which: ExpertRef,
    ) -> Result<Var> {
        let e = self.expert(which);
        let a = g.param(store, e.a);
        let b = g.param(store, e.b);
        let z = g.matmul_t(x, a, false, true)?;
        g.matmul_t(z, b, false, true)
    }

    /// Mixture output for every row of `x: [n, d]`. Also returns the gate
    /// node (`[n, N_e]`) whose recorded selections feed load statistics.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Option<Var>)> {
        let mut acc: Option<Var> = None;
        let add = |g: &mut Graph<T>, acc: &mut Option<Var>, y: Var| -> Result<()> {
            *acc = Some(match *acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
            Ok(())
        };
        for j in 0..self.shared.len() {
            let y = self.expert_output(g, store, x, ExpertRef::Shared(j))?;
            add(g, &mut acc, y)?;
        }
        let mut gates = None;
        if self.top_k > 0 && !self.routed.is_empty() {
            let r = g.param(store, self.router);
            let logits = g.matmul(x, r)?;
            let gv = g.top_k_softmax(logits, self.top_k);
            let mut used = vec![false; self.routed.len()];
            for sel in g.top_k_selection(gv).expect("top-k node") {
                for &i in sel {
                    used[i] = true;
                }
            }
            // Experts no token selected contribute exact zeros; skip them.
            for (i, _) in used.iter().enumerate().filter(|(_, &u)| u) {
                let y = self.expert_output(g, store, x, ExpertRef::Routed(i + 1))?;
                let w = g.slice(gv, 1, i, 1)?;
                let wy = g.mul(y, w)?;
                add(g, &mut acc, wy)?;
            }
            gates = Some(gv);
        }
        let out = match acc {
            Some(a) => a,
            None => {
                let n = g.shape(x)[0];
                g.input(Tensor::zeros(vec![n, self.width]))
            }
        };
        Ok((out, gates))
    }
}

/// Token counts per routed expert.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub counts: Vec<u64>,
}

impl LoadStats {
    pub fn new(num_routed: usize) -> Self {
        Self {
            counts: vec![0; num_routed],
        }
    }

    /// Records 0-based expert selections, one list per token.
    pub fn record_selection(&mut self, selected: &[Vec<usize>]) {
        for sel in selected {
            for &i in sel {
                self.counts[i] += 1;
            }
        }
    }

    pub fn record_gate<T>(&mut self, gate: &GateResult<T>) {
        for &i in &gate.indices {
            self.counts[i - 1] += 1;
        }
    }

    pub fn merge(&mut self, other: &LoadStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn assignments(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of token-expert assignments handled by each expert.
    pub fn shares(&self) -> Result<Vec<f64>> {
        let total = self.assignments();
        if total == 0 {
            return Err(Error::Data("load statistics over an empty batch".into()));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

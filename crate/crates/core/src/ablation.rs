//! Ablation grids over adapter rank, activated experts, expert split and
//! the alignment components, plus expert-load inspection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ag::Graph;
use crate::dataset::{Dataset, Phase, WorldMode};
use crate::encoders::PromptKind;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig};
use crate::model::{EvaModel, ModelConfig};
use crate::moe::LoadStats;
use crate::scalar::Scalar;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Expert rank `r`.
    Rank,
    /// Activated routed experts `K`.
    K,
    /// Shared + routed expert counts.
    Split,
    /// Alignment components added one at a time.
    Alignment,
    /// The configured run alone.
    Base,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Rank, Axis::K, Axis::Split, Axis::Alignment, Axis::Base];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Rank => "r",
            Axis::K => "K",
            Axis::Split => "split",
            Axis::Alignment => "alignment",
            Axis::Base => "base",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" | "rank" => Ok(Axis::Rank),
            "K" | "k" | "topk" => Ok(Axis::K),
            "split" => Ok(Axis::Split),
            "alignment" | "va" => Ok(Axis::Alignment),
            "base" => Ok(Axis::Base),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (r|K|split|alignment|base)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The configurations of one axis, derived from a base configuration.
pub fn grid(axis: Axis, model: &ModelConfig, train: &TrainConfig) -> Vec<AblationRow> {
    let row = |label: String, model: ModelConfig, train: TrainConfig| AblationRow {
        axis,
        label,
        model,
        train,
    };
    match axis {
        Axis::Rank => [8, 16, 32, 64, 128]
            .into_iter()
            .map(|r| {
                let mut m = model.clone();
                m.moe.rank = r;
                // rank must stay below the hidden width
                if r >= m.encoder.width {
                    m.encoder.width = 256.max(m.encoder.width);
                }
                row(format!("r={r}"), m, train.clone())
            })
            .collect(),
        Axis::K => [0, 1, 2, 4, 8]
            .into_iter()
            .map(|k| {
                let mut m = model.clone();
                m.moe.routed = m.moe.routed.max(8);
                m.moe.top_k = k;
                row(format!("K={k}"), m, train.clone())
            })
            .collect(),
        Axis::Split => [(0, 8), (1, 8), (2, 8), (4, 4)]
            .into_iter()
            .map(|(s, r)| {
                let mut m = model.clone();
                m.moe.shared = s;
                m.moe.routed = r;
                m.moe.top_k = m.moe.top_k.min(r);
                row(format!("{s}+{r}"), m, train.clone())
            })
            .collect(),
        Axis::Alignment => {
            let mk = |l1: f64, l2: f64, alpha: f64| TrainConfig {
                lambda1: l1,
                lambda2: l2,
                alpha,
                ..train.clone()
            };
            vec![
                row("Baseline".into(), model.clone(), mk(0.0, 0.0, 0.0)),
                row("+t2i alignment".into(), model.clone(), mk(0.5, 0.0, 0.0)),
                row("+inter-model affinity".into(), model.clone(), mk(0.5, 0.1, 0.0)),
                row("+intra-modal affinity".into(), model.clone(), mk(0.5, 0.1, 0.5)),
            ]
        }
        Axis::Base => vec![row("base".into(), model.clone(), train.clone())],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: String,
    pub label: String,
    pub unseen: f64,
    pub seen: f64,
    pub auc: f64,
    pub hm: f64,
    pub best_epoch: usize,
}

/// Trains and evaluates one row on the closed-world test split.
pub fn run_row<T: Scalar>(row: &AblationRow, ds: &Dataset, eval: &EvalConfig) -> Result<AblationResult> {
    let mut model = EvaModel::<T>::new(row.model.clone())?;
    let out = train(&mut model, ds, &row.train, |_| {})?;
    let r = evaluate(&model, ds, Phase::Test, WorldMode::Closed, eval)?;
    Ok(AblationResult {
        axis: row.axis.to_string(),
        label: row.label.clone(),
        unseen: r.best_unseen,
        seen: r.best_seen,
        auc: r.auc,
        hm: r.best_hm,
        best_epoch: out.best_epoch,
    })
}

/// Routed-expert load of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    pub counts: Vec<u64>,
    pub shares: Vec<f64>,
}

/// Routes every prompt of one family (state or object) through the text
/// encoder and counts token-to-expert assignments per layer.
pub fn expert_load<T: Scalar>(model: &EvaModel<T>, kind: PromptKind) -> Result<Vec<LayerLoad>> {
    if model.cfg.moe.top_k == 0 || model.cfg.moe.routed == 0 {
        return Err(Error::Config("no routed experts to inspect (shared-only adapters)".into()));
    }
    if !model.cfg.adapters {
        return Err(Error::Config("adapters are disabled in this model".into()));
    }
    let items: Vec<(usize, usize)> = match kind {
        PromptKind::State => (0..model.cfg.n_states).map(|s| (s, 0)).collect(),
        PromptKind::Object => (0..model.cfg.n_objects).map(|o| (0, o)).collect(),
        PromptKind::Composition => (0..model.cfg.n_states)
            .flat_map(|s| (0..model.cfg.n_objects).map(move |o| (s, o)))
            .collect(),
    };
    let mut g = Graph::<T>::inference();
    let (tokens, len) = model
        .text
        .build_prompts(&mut g, &model.store, &model.prompts, kind, &items)?;
    let (_, gates) = model
        .text
        .encode(&mut g, &model.store, tokens, items.len(), len, true)?;
    gates
        .iter()
        .enumerate()
        .map(|(layer, gv)| {
            let gv = gv.ok_or_else(|| Error::Config("layer has no router".into()))?;
            let mut stats = LoadStats::new(model.cfg.moe.routed);
            stats.record_selection(g.top_k_selection(gv).expect("gate node"));
            Ok(LayerLoad {
                layer,
                shares: stats.shares()?,
                counts: stats.counts,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_table_shapes() {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        let labels = |a| grid(a, &m, &t).into_iter().map(|r| r.label).collect::<Vec<_>>();
        assert_eq!(labels(Axis::Rank), ["r=8", "r=16", "r=32", "r=64", "r=128"]);
        assert_eq!(labels(Axis::K), ["K=0", "K=1", "K=2", "K=4", "K=8"]);
        assert_eq!(labels(Axis::Split), ["0+8", "1+8", "2+8", "4+4"]);
        assert_eq!(labels(Axis::Alignment).len(), 4);
        assert_eq!(labels(Axis::Base).len(), 1);
        for r in grid(Axis::Rank, &m, &t) {
            r.model.validate().unwrap();
        }
        assert!("depth".parse::<Axis>().is_err());
    }
}

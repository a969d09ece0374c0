//! Composition scoring, text-to-image primitive scoring, and image-to-text
//! variant alignment.
//!
//! Every scoring rule exists twice: as a plain function over values (used
//! at inference and as the reference in tests) and as a graph builder
//! (used for training losses). Tests pin the two against each other.

use serde::{Deserialize, Serialize};

use crate::ag::{self, argmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How text-to-image primitive scores are formed from composition scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// `p_s(s) = τ_s · max_{c ∋ s} p_c(c)`; rows are not normalized.
    Literal,
    /// `p_s = softmax_s(τ_s · max_{c ∋ s} logit_c)`; `τ_s` acts as an inverse temperature.
    #[default]
    Renormalized,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "renormalized" => Ok(Self::Renormalized),
            other => Err(Error::Config(format!("unknown score mode `{other}`"))),
        }
    }
}

/// Compositions of a target space as `(state, object)` pairs, with the
/// column groups each primitive owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositionTable {
    pub pairs: Vec<(usize, usize)>,
    pub n_states: usize,
    pub n_objects: usize,
}

impl CompositionTable {
    pub fn new(pairs: Vec<(usize, usize)>, n_states: usize, n_objects: usize) -> Result<Self> {
        if let Some(&(s, o)) = pairs.iter().find(|&&(s, o)| s >= n_states || o >= n_objects) {
            return Err(Error::Data(format!("composition ({s}, {o}) outside {n_states}x{n_objects}")));
        }
        Ok(Self {
            pairs,
            n_states,
            n_objects,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// For each state, the columns of compositions containing it.
    pub fn state_groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.n_states];
        for (c, &(s, _)) in self.pairs.iter().enumerate() {
            g[s].push(c);
        }
        g
    }

    pub fn object_groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.n_objects];
        for (c, &(_, o)) in self.pairs.iter().enumerate() {
            g[o].push(c);
        }
        g
    }
}

/// Cosine logits `f · t_c / τ` for one image against every text feature row.
pub fn composition_logits<T: Scalar>(image: &[T], text: &Tensor<T>, tau: T) -> Vec<T> {
    text.rows().map(|t| ag::dot(image, t) / tau).collect()
}

/// Softmax of the cosine logits over the target composition space.
pub fn composition_probs<T: Scalar>(image: &[T], text: &Tensor<T>, tau: T) -> Result<Vec<T>> {
    if text.numel() == 0 {
        return Err(Error::Data("empty target composition space".into()));
    }
    Ok(ag::softmax(&composition_logits(image, text, tau)))
}

/// Mean negative log-probability of the labelled class, from logits.
pub fn loss_composition<T: Scalar>(logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Data(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    let mut total = T::zero();
    for (row, &y) in logits.iter().zip(labels) {
        let lp = ag::log_softmax(row);
        total = total - *lp.get(y).ok_or_else(|| Error::Data(format!("label {y} out of range")))?;
    }
    Ok(total / T::lit(labels.len() as f64))
}

fn grouped_max<T: Scalar>(row: &[T], groups: &[Vec<usize>]) -> Vec<Option<T>> {
    groups
        .iter()
        .map(|g| g.iter().map(|&c| row[c]).reduce(T::max))
        .collect()
}

fn primitive_scores<T: Scalar>(comp_logits: &[T], groups: &[Vec<usize>], temp: T, mode: ScoreMode) -> Vec<T> {
    match mode {
        ScoreMode::Literal => {
            let p = ag::softmax(comp_logits);
            grouped_max(&p, groups)
                .into_iter()
                .map(|m| m.map_or(T::zero(), |m| m * temp))
                .collect()
        }
        ScoreMode::Renormalized => {
            let logits: Vec<T> = grouped_max(comp_logits, groups)
                .into_iter()
                .map(|m| m.map_or(T::neg_infinity(), |m| m * temp))
                .collect();
            ag::softmax(&logits)
        }
    }
}

/// State scores for one image from its composition logits.
pub fn t2i_state_scores<T: Scalar>(comp_logits: &[T], table: &CompositionTable, tau_s: T, mode: ScoreMode) -> Vec<T> {
    primitive_scores(comp_logits, &table.state_groups(), tau_s, mode)
}

/// Object scores for one image from its composition logits.
pub fn t2i_object_scores<T: Scalar>(comp_logits: &[T], table: &CompositionTable, tau_o: T, mode: ScoreMode) -> Vec<T> {
    primitive_scores(comp_logits, &table.object_groups(), tau_o, mode)
}

/// `−mean log score` at the labelled entries. Scores are floored at the
/// smallest positive value so an exact zero gives a large finite loss.
pub fn mean_neg_log<T: Scalar>(scores: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Data(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    let mut total = T::zero();
    for (row, &y) in scores.iter().zip(labels) {
        let p = *row.get(y).ok_or_else(|| Error::Data(format!("label {y} out of range")))?;
        total = total - p.max(T::min_positive_value()).ln();
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// `(L_s, L_o)` for text-to-image primitive scores.
pub fn loss_t2i<T: Scalar>(
    state_scores: &[Vec<T>],
    object_scores: &[Vec<T>],
    labels: &[(usize, usize)],
) -> Result<(T, T)> {
    let ls: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let lo: Vec<usize> = labels.iter().map(|l| l.1).collect();
    Ok((mean_neg_log(state_scores, &ls)?, mean_neg_log(object_scores, &lo)?))
}

/// Variant affinities for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityBundle<T> {
    /// `V t_s`
    pub state: Vec<T>,
    /// `V t_o`
    pub object: Vec<T>,
    /// `V f_c`
    pub global: Vec<T>,
    /// `A_s + α A_v`
    pub overall_state: Vec<T>,
    /// `A_o + α A_v`
    pub overall_object: Vec<T>,
    pub alpha: T,
    pub selected_state: usize,
    pub selected_object: usize,
}

/// Affinities of each variant row to the labelled state/object text
/// features and to the image's own global feature.
pub fn variant_affinities<T: Scalar>(
    variants: &Tensor<T>,
    t_state: &[T],
    t_object: &[T],
    f_global: &[T],
    alpha: T,
) -> AffinityBundle<T> {
    let state: Vec<T> = variants.rows().map(|v| ag::dot(v, t_state)).collect();
    let object: Vec<T> = variants.rows().map(|v| ag::dot(v, t_object)).collect();
    let global: Vec<T> = variants.rows().map(|v| ag::dot(v, f_global)).collect();
    let overall_state: Vec<T> = state.iter().zip(&global).map(|(&a, &v)| a + alpha * v).collect();
    let overall_object: Vec<T> = object.iter().zip(&global).map(|(&a, &v)| a + alpha * v).collect();
    AffinityBundle {
        selected_state: argmax(&overall_state),
        selected_object: argmax(&overall_object),
        state,
        object,
        global,
        overall_state,
        overall_object,
        alpha,
    }
}

/// The variant rows picked by the overall affinities (ties → lowest row).
pub fn select_variants<T: Scalar>(bundle: &AffinityBundle<T>, variants: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    (
        variants.row(bundle.selected_state).to_vec(),
        variants.row(bundle.selected_object).to_vec(),
    )
}

/// `(L_s^v, L_o^v)`: cross-entropy of selected variants against all state
/// and all object text features at temperature `τ`.
pub fn loss_i2t<T: Scalar>(
    f_state: &[Vec<T>],
    f_object: &[Vec<T>],
    state_text: &Tensor<T>,
    object_text: &Tensor<T>,
    labels: &[(usize, usize)],
    tau: T,
) -> Result<(T, T)> {
    let sl: Vec<Vec<T>> = f_state.iter().map(|f| composition_logits(f, state_text, tau)).collect();
    let ol: Vec<Vec<T>> = f_object.iter().map(|f| composition_logits(f, object_text, tau)).collect();
    let ls: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let lo: Vec<usize> = labels.iter().map(|l| l.1).collect();
    Ok((loss_composition(&sl, &ls)?, loss_composition(&ol, &lo)?))
}

/// `[B, N]` cosine logits between unit image rows and unit text rows, over `τ`.
pub fn logits_graph<T: Scalar>(g: &mut Graph<T>, image: Var, text: Var, tau: T) -> Result<Var> {
    let sims = g.matmul_t(image, text, false, true)?;
    Ok(g.scale(sims, T::one() / tau))
}

/// Mean text-to-image primitive loss for one primitive family.
pub fn t2i_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    comp_logits: Var,
    groups: &[Vec<usize>],
    temp: Var,
    labels: &[usize],
    mode: ScoreMode,
) -> Result<Var> {
    match mode {
        ScoreMode::Renormalized => {
            let m = g.segment_max(comp_logits, groups)?;
            let z = g.mul(m, temp)?;
            g.cross_entropy(z, labels)
        }
        ScoreMode::Literal => {
            let p = g.softmax(comp_logits);
            let m = g.segment_max(p, groups)?;
            let s = g.mul(m, temp)?;
            let ls = g.log(s);
            let picked = g.pick_last(ls, labels)?;
            let mean = g.mean(picked);
            Ok(g.scale(mean, -T::one()))
        }
    }
}

/// Hard variant selection for a batch: returns the selected `(state, object)`
/// row of each image within its `n_variants` block.
pub fn select_batch<T: Scalar>(
    variants: &Tensor<T>,
    n_variants: usize,
    globals: &Tensor<T>,
    state_text: &Tensor<T>,
    object_text: &Tensor<T>,
    labels: &[(usize, usize)],
    alpha: T,
) -> Vec<(usize, usize)> {
    let jw = variants.last_dim();
    labels
        .iter()
        .enumerate()
        .map(|(b, &(s, o))| {
            let block = Tensor::new(
                vec![n_variants, jw],
                variants.data()[b * n_variants * jw..(b + 1) * n_variants * jw].to_vec(),
            )
            .expect("variant block");
            let bundle = variant_affinities(&block, state_text.row(s), object_text.row(o), globals.row(b), alpha);
            (bundle.selected_state, bundle.selected_object)
        })
        .collect()
}

/// Image-to-text losses on hard-selected variants. Gradients reach only the
/// selected rows and the text features.
#[allow(clippy::too_many_arguments)]
pub fn i2t_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    variants: Var,
    n_variants: usize,
    global: Var,
    state_text: Var,
    object_text: Var,
    labels: &[(usize, usize)],
    alpha: T,
    tau: T,
) -> Result<(Var, Var)> {
    let picks = select_batch(
        g.value(variants),
        n_variants,
        g.value(global),
        g.value(state_text),
        g.value(object_text),
        labels,
        alpha,
    );
    let s_rows: Vec<usize> = picks.iter().enumerate().map(|(b, p)| b * n_variants + p.0).collect();
    let o_rows: Vec<usize> = picks.iter().enumerate().map(|(b, p)| b * n_variants + p.1).collect();
    let f_s = g.gather(variants, &s_rows)?;
    let f_o = g.gather(variants, &o_rows)?;
    let ls_logits = logits_graph(g, f_s, state_text, tau)?;
    let lo_logits = logits_graph(g, f_o, object_text, tau)?;
    let ls: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let lo: Vec<usize> = labels.iter().map(|l| l.1).collect();
    Ok((g.cross_entropy(ls_logits, &ls)?, g.cross_entropy(lo_logits, &lo)?))
}

//! Inference scoring, calibration-bias sweep and the seen/unseen metric suite.

use serde::{Deserialize, Serialize};

use crate::ag::{self, argmax, Graph, Tensor};
use crate::alignment::{composition_logits, t2i_object_scores, t2i_state_scores, CompositionTable};
use crate::dataset::{Dataset, LabelSpace, Phase, Sample, WorldMode};
use crate::error::{Error, Result};
use crate::model::EvaModel;
use crate::scalar::Scalar;

/// `score(c) = p_c(c) + β (p_s(s_c) + p_o(o_c))` for every column of `table`.
pub fn combine_scores(p_c: &[f64], p_s: &[f64], p_o: &[f64], table: &CompositionTable, beta: f64) -> Vec<f64> {
    table
        .pairs
        .iter()
        .zip(p_c)
        .map(|(&(s, o), &pc)| pc + beta * (p_s[s] + p_o[o]))
        .collect()
}

/// Column indices of the `k` best scores, best first (ties → lower column).
pub fn ranking(scores: &[f64], k: usize) -> Vec<usize> {
    ag::top_k_indices(scores, k)
}

/// Ground truth of one evaluated image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Truth {
    /// Column of the true composition, if it is in the target space.
    pub column: Option<usize>,
    /// Whether the true composition is unseen in training.
    pub unseen: bool,
}

impl Truth {
    pub fn at(column: usize, unseen_cols: &[bool]) -> Self {
        Self {
            column: Some(column),
            unseen: unseen_cols[column],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ordered by increasing bias.
    pub curve: Vec<CurvePoint>,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub auc: f64,
    pub best_hm: f64,
}

/// Per-image outcome of the two competing predictions.
struct Contest {
    gap: f64,
    seen_right: bool,
    unseen_right: bool,
    unseen: bool,
}

fn best_in(scores: &[f64], mask: &[bool], want: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&s, &m)) in scores.iter().zip(mask).enumerate() {
        if m == want && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

fn harmonic(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Trapezoidal area under the seen/unseen operating curve.
pub fn curve_auc(points: &[CurvePoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.unseen, p.seen)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn summarize(curve: Vec<CurvePoint>) -> SweepResult {
    let best_seen = curve.iter().map(|p| p.seen).fold(0.0, f64::max);
    let best_unseen = curve.iter().map(|p| p.unseen).fold(0.0, f64::max);
    let best_hm = curve.iter().map(|p| harmonic(p.seen, p.unseen)).fold(0.0, f64::max);
    SweepResult {
        auc: curve_auc(&curve),
        curve,
        best_seen,
        best_unseen,
        best_hm,
    }
}

/// Sweeps a bias added to every unseen column. Candidate biases are
/// `−∞`, each distinct per-image gap `max seen − max unseen`, and `+∞`;
/// between consecutive gaps the predictions do not change. At a bias equal
/// to an image's gap the unseen column wins.
pub fn calibration_sweep(scores: &[Vec<f64>], truths: &[Truth], unseen_cols: &[bool]) -> Result<SweepResult> {
    if scores.len() != truths.len() {
        return Err(Error::Data(format!("{} score rows for {} truths", scores.len(), truths.len())));
    }
    let n_unseen = truths.iter().filter(|t| t.unseen).count();
    let n_seen = truths.len() - n_unseen;
    if n_seen == 0 {
        return Err(Error::Data("seen-image subset is empty".into()));
    }
    if n_unseen == 0 {
        return Err(Error::Data("unseen-image subset is empty".into()));
    }
    let mut contests: Vec<Contest> = scores
        .iter()
        .zip(truths)
        .map(|(row, t)| {
            let s = best_in(row, unseen_cols, false);
            let u = best_in(row, unseen_cols, true);
            let gap = match (s, u) {
                (Some((_, a)), Some((_, b))) => a - b,
                (None, _) => f64::NEG_INFINITY,
                (_, None) => f64::INFINITY,
            };
            Contest {
                gap,
                seen_right: s.is_some_and(|(i, _)| t.column == Some(i)),
                unseen_right: u.is_some_and(|(i, _)| t.column == Some(i)),
                unseen: t.unseen,
            }
        })
        .collect();
    contests.sort_by(|a, b| a.gap.total_cmp(&b.gap));

    // Start with every image predicting its best seen column.
    let (mut right_s, mut right_u) = (0usize, 0usize);
    for c in &contests {
        if c.seen_right {
            if c.unseen {
                right_u += 1;
            } else {
                right_s += 1;
            }
        }
    }
    let point = |bias: f64, rs: usize, ru: usize| CurvePoint {
        bias,
        seen: rs as f64 / n_seen as f64,
        unseen: ru as f64 / n_unseen as f64,
    };
    let mut curve = vec![point(f64::NEG_INFINITY, right_s, right_u)];
    let flip = |c: &Contest, rs: &mut usize, ru: &mut usize| {
        let counter = if c.unseen { ru } else { rs };
        *counter = *counter + usize::from(c.unseen_right) - usize::from(c.seen_right);
    };
    let mut i = 0;
    while i < contests.len() {
        let g = contests[i].gap;
        while i < contests.len() && contests[i].gap == g {
            flip(&contests[i], &mut right_s, &mut right_u);
            i += 1;
        }
        if g.is_finite() {
            curve.push(point(g, right_s, right_u));
        }
    }
    // +∞: images without an unseen column keep their seen prediction.
    curve.push(point(f64::INFINITY, right_s, right_u));
    Ok(summarize(curve))
}

/// Seen/unseen accuracy at one fixed bias, by direct argmax.
pub fn accuracy_at(scores: &[Vec<f64>], truths: &[Truth], unseen_cols: &[bool], bias: f64) -> CurvePoint {
    let (mut rs, mut ru, mut ns, mut nu) = (0, 0, 0, 0);
    for (row, t) in scores.iter().zip(truths) {
        let pred = if bias == f64::NEG_INFINITY {
            best_in(row, unseen_cols, false).or_else(|| best_in(row, unseen_cols, true))
        } else if bias == f64::INFINITY {
            best_in(row, unseen_cols, true).or_else(|| best_in(row, unseen_cols, false))
        } else {
            let s = best_in(row, unseen_cols, false);
            let u = best_in(row, unseen_cols, true).map(|(i, v)| (i, v + bias));
            match (s, u) {
                (Some(a), Some(b)) => Some(if b.1 >= a.1 { b } else { a }),
                (a, b) => a.or(b),
            }
        };
        let right = pred.is_some_and(|(i, _)| t.column == Some(i));
        if t.unseen {
            nu += 1;
            ru += usize::from(right);
        } else {
            ns += 1;
            rs += usize::from(right);
        }
    }
    CurvePoint {
        bias,
        seen: rs as f64 / ns.max(1) as f64,
        unseen: ru as f64 / nu.max(1) as f64,
    }
}

/// Open-world pairs whose feasibility reaches `threshold`; seen pairs are
/// always kept.
///
/// For `(s, o)` the object term is the best cosine between `t_o` and the
/// object features of `s`'s seen partners, the state term the mirror over
/// `o`'s seen partners, and the feasibility their mean. A primitive with no
/// seen partner contributes −1.
pub fn feasibility_filter(
    labels: &LabelSpace,
    state_text: &Tensor<f64>,
    object_text: &Tensor<f64>,
    threshold: f64,
) -> Result<CompositionTable> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("feasibility threshold {threshold} outside [-1, 1]")));
    }
    let cos = |a: &[f64], b: &[f64]| ag::dot(a, b).clamp(-1.0, 1.0);
    let mut kept = Vec::new();
    for s in 0..labels.n_states {
        for o in 0..labels.n_objects {
            if labels.is_seen((s, o)) {
                kept.push((s, o));
                continue;
            }
            let obj = labels
                .seen
                .iter()
                .filter(|p| p.0 == s)
                .map(|p| cos(object_text.row(o), object_text.row(p.1)))
                .fold(-1.0, f64::max);
            let st = labels
                .seen
                .iter()
                .filter(|p| p.1 == o)
                .map(|p| cos(state_text.row(s), state_text.row(p.0)))
                .fold(-1.0, f64::max);
            if (obj + st) / 2.0 >= threshold {
                kept.push((s, o));
            }
        }
    }
    CompositionTable::new(kept, labels.n_states, labels.n_objects)
}

/// Per-image scores over one target space.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub comp_logits: Vec<Vec<f64>>,
    pub comp_probs: Vec<Vec<f64>>,
    pub state_scores: Vec<Vec<f64>>,
    pub object_scores: Vec<Vec<f64>>,
    /// Inference scores with the `β` primitive term.
    pub combined: Vec<Vec<f64>>,
}

/// Joint-space text features of every state and object prompt.
pub fn primitive_text<T: Scalar>(model: &EvaModel<T>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut g = Graph::inference();
    let s = model.state_text(&mut g)?;
    let o = model.object_text(&mut g)?;
    let conv = |t: &Tensor<T>| Tensor::new(t.shape().to_vec(), t.to_f64_vec()).expect("same shape");
    Ok((conv(g.value(s)), conv(g.value(o))))
}

/// Scores `samples` against `table` in batches.
pub fn score_samples<T: Scalar>(
    model: &EvaModel<T>,
    ds: &Dataset,
    samples: &[&Sample],
    table: &CompositionTable,
    beta: f64,
    batch_size: usize,
) -> Result<ScoreTable> {
    if table.is_empty() {
        return Err(Error::Data("empty target composition space".into()));
    }
    let text: Tensor<T> = {
        let mut g = Graph::inference();
        let t = model.composition_text(&mut g, &table.pairs)?;
        g.value(t).clone()
    };
    let (tau_s, tau_o) = model.temperature_values();
    let mode = model.cfg.score_mode;
    let mut out = ScoreTable {
        comp_logits: Vec::with_capacity(samples.len()),
        comp_probs: Vec::with_capacity(samples.len()),
        state_scores: Vec::with_capacity(samples.len()),
        object_scores: Vec::with_capacity(samples.len()),
        combined: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::inference();
        let x = g.input(ds.batch_tokens::<T>(chunk));
        let feats = model.image_features(&mut g, x, false)?;
        for f in g.value(feats.global).rows() {
            let logits = composition_logits(f, &text, model.tau());
            let ps = t2i_state_scores(&logits, table, tau_s, mode);
            let po = t2i_object_scores(&logits, table, tau_o, mode);
            let f64s = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
            let (logits, ps, po) = (f64s(&logits), f64s(&ps), f64s(&po));
            let pc = ag::softmax(&logits);
            out.combined.push(combine_scores(&pc, &ps, &po, table, beta));
            out.comp_logits.push(logits);
            out.comp_probs.push(pc);
            out.state_scores.push(ps);
            out.object_scores.push(po);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beta: f64,
    /// Open-world feasibility threshold; −1 keeps the full space.
    pub feasibility_threshold: f64,
    pub batch_size: usize,
    /// Predictions kept per image in the dump.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            feasibility_threshold: -1.0,
            batch_size: 128,
            top_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: usize,
    pub truth: (usize, usize),
    pub top: Vec<((usize, usize), f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: WorldMode,
    pub target_size: usize,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub auc: f64,
    pub best_hm: f64,
    /// `[bias, seen, unseen]`; infinite biases serialize as null.
    pub curve: Vec<[f64; 3]>,
    pub predictions: Vec<Prediction>,
}

/// Evaluates the seen and unseen images of one phase.
pub fn evaluate<T: Scalar>(
    model: &EvaModel<T>,
    ds: &Dataset,
    phase: Phase,
    mode: WorldMode,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let labels = &ds.labels;
    if labels.n_states != model.cfg.n_states || labels.n_objects != model.cfg.n_objects {
        return Err(Error::Data(format!(
            "dataset has {}x{} primitives, model {}x{}",
            labels.n_states, labels.n_objects, model.cfg.n_states, model.cfg.n_objects
        )));
    }
    let (mut table, _) = labels.target(phase, mode);
    if mode == WorldMode::Open && cfg.feasibility_threshold > -1.0 {
        let (st, ot) = primitive_text(model)?;
        table = feasibility_filter(labels, &st, &ot, cfg.feasibility_threshold)?;
    }
    let unseen_cols: Vec<bool> = table.pairs.iter().map(|&p| !labels.is_seen(p)).collect();
    let [seen_split, unseen_split] = phase.splits();
    let samples: Vec<&Sample> = ds
        .samples
        .iter()
        .filter(|s| s.split == seen_split || s.split == unseen_split)
        .collect();
    let scores = score_samples(model, ds, &samples, &table, cfg.beta, cfg.batch_size)?;
    let truths: Vec<Truth> = samples
        .iter()
        .map(|s| Truth {
            column: table.pairs.iter().position(|&p| p == (s.state, s.object)),
            unseen: !labels.is_seen((s.state, s.object)),
        })
        .collect();
    let sweep = calibration_sweep(&scores.combined, &truths, &unseen_cols)?;
    let predictions = samples
        .iter()
        .zip(&scores.combined)
        .map(|(s, row)| Prediction {
            id: s.id,
            truth: (s.state, s.object),
            top: ranking(row, cfg.top_k)
                .into_iter()
                .map(|c| (table.pairs[c], row[c]))
                .collect(),
        })
        .collect();
    Ok(EvalReport {
        mode,
        target_size: table.len(),
        best_seen: sweep.best_seen,
        best_unseen: sweep.best_unseen,
        auc: sweep.auc,
        best_hm: sweep.best_hm,
        curve: sweep.curve.iter().map(|p| [p.bias, p.seen, p.unseen]).collect(),
        predictions,
    })
}

/// Top-1 accuracy of the raw argmax over a score table (no bias).
pub fn top1(scores: &[Vec<f64>], truths: &[Truth]) -> f64 {
    let right = scores
        .iter()
        .zip(truths)
        .filter(|(row, t)| t.column == Some(argmax(row)))
        .count();
    right as f64 / truths.len().max(1) as f64
}

//! Total objective, Adam with decoupled weight decay, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ag::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::alignment::{i2t_loss_graph, logits_graph, t2i_loss_graph};
use crate::dataset::{Dataset, LabelSpace, Phase, Sample, Split, WorldMode};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig};
use crate::model::EvaModel;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the text-to-image primitive losses.
    pub lambda1: f64,
    /// Weight of the image-to-text variant losses.
    pub lambda2: f64,
    /// Weight of the variant-to-image affinity in variant selection.
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Keep the epoch with the best closed-world validation AUC.
    pub select_best: bool,
    /// Inference `β` used for validation.
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            alpha: 0.5,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            max_steps: None,
            select_best: true,
            beta: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.lambda1) || !finite_nonneg(self.lambda2) || !finite_nonneg(self.alpha) {
            return Err(Error::Config("lambda1, lambda2 and alpha must be non-negative".into()));
        }
        if !(self.lr > 0.0) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value and its five components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_o: f64,
    pub l_sv: f64,
    pub l_ov: f64,
}

impl LossBreakdown {
    /// `L_c + λ1 (L_s + L_o) + λ2 (L_sv + L_ov)` from the logged parts.
    pub fn weighted(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.l_c + lambda1 * (self.l_s + self.l_o) + lambda2 * (self.l_sv + self.l_ov)
    }

    fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.l_c += w * other.l_c;
        self.l_s += w * other.l_s;
        self.l_o += w * other.l_o;
        self.l_sv += w * other.l_sv;
        self.l_ov += w * other.l_ov;
    }
}

/// Builds the total loss for a batch of `tokens: [batch, patches, patch_dim]`
/// labelled with `(state, object)` pairs from the seen space.
///
/// Components with zero weight are not built, so `λ1 = λ2 = 0` gives exactly
/// `L_c`. Unbuilt components are reported as 0.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &EvaModel<T>,
    labels: &LabelSpace,
    tokens: Var,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let comp: Vec<usize> = pairs
        .iter()
        .map(|&p| {
            labels
                .seen_index(p)
                .ok_or_else(|| Error::Data(format!("label {p:?} is not a seen composition")))
        })
        .collect::<Result<_>>()?;
    let (w1, w2) = (T::lit(cfg.lambda1), T::lit(cfg.lambda2));
    let want_variants = cfg.lambda2 > 0.0;
    let feats = model.image_features(g, tokens, want_variants)?;
    let t_c = model.composition_text(g, &labels.seen)?;
    let logits = logits_graph(g, feats.global, t_c, model.tau())?;
    let l_c = g.cross_entropy(logits, &comp)?;
    let mut total = l_c;
    let mut parts = LossBreakdown {
        l_c: g.value(l_c).item().as_f64(),
        ..Default::default()
    };
    let states: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let objects: Vec<usize> = pairs.iter().map(|p| p.1).collect();

    if cfg.lambda1 > 0.0 {
        let table = labels.seen_table();
        let (tau_s, tau_o) = model.temperatures(g);
        let mode = model.cfg.score_mode;
        let l_s = t2i_loss_graph(g, logits, &table.state_groups(), tau_s, &states, mode)?;
        let l_o = t2i_loss_graph(g, logits, &table.object_groups(), tau_o, &objects, mode)?;
        parts.l_s = g.value(l_s).item().as_f64();
        parts.l_o = g.value(l_o).item().as_f64();
        let sum = g.add(l_s, l_o)?;
        let term = g.scale(sum, w1);
        total = g.add(total, term)?;
    }
    if want_variants {
        let t_s = model.state_text(g)?;
        let t_o = model.object_text(g)?;
        // Without adapters every variant equals the global feature.
        let (variants, nv) = match feats.variants {
            Some(v) => (v, feats.n_variants),
            None => (feats.global, 1),
        };
        let (l_sv, l_ov) = i2t_loss_graph(
            g,
            variants,
            nv,
            feats.global,
            t_s,
            t_o,
            pairs,
            T::lit(cfg.alpha),
            model.tau(),
        )?;
        parts.l_sv = g.value(l_sv).item().as_f64();
        parts.l_ov = g.value(l_ov).item().as_f64();
        let sum = g.add(l_sv, l_ov)?;
        let term = g.scale(sum, w2);
        total = g.add(total, term)?;
    }
    parts.total = g.value(total).item().as_f64();
    Ok((total, parts))
}

/// Adam with bias correction and decoupled weight decay, over the
/// trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. Non-finite gradients abort before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, gr) in grads.iter() {
            if !gr.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for `{}`", store.name(id))));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (T::lit(self.lr), T::lit(self.eps), T::lit(self.lr * self.weight_decay));
        for (id, gr) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let shape = gr.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(shape));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(gr.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - wd * *p - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Epoch whose parameters the model holds afterwards (0 = initialization).
    pub best_epoch: usize,
    pub steps: usize,
    pub logs: Vec<EpochLog>,
}

/// One optimizer step on a batch; returns the loss breakdown.
pub fn train_step<T: Scalar>(
    model: &mut EvaModel<T>,
    opt: &mut Adam<T>,
    ds: &Dataset,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let x = g.input(ds.batch_tokens::<T>(batch));
    let pairs: Vec<(usize, usize)> = batch.iter().map(|s| (s.state, s.object)).collect();
    let (loss, parts) = total_loss(&mut g, model, &ds.labels, x, &pairs, cfg)?;
    if !parts.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {parts:?}")));
    }
    let grads = g.backward(loss, &model.store)?;
    opt.step(&mut model.store, &grads)?;
    Ok(parts)
}

/// Trains on the `train` split. With `select_best` and validation data,
/// the model ends holding the epoch with the best validation AUC;
/// otherwise it holds the final parameters.
pub fn train<T: Scalar>(
    model: &mut EvaModel<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut order = ds.split(Split::Train);
    if order.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let validate = cfg.select_best && ds.count(Split::ValSeen) > 0 && ds.count(Split::ValUnseen) > 0;
    let eval_cfg = EvalConfig {
        beta: cfg.beta,
        ..EvalConfig::default()
    };
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut logs = Vec::new();
    let mut steps = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        let mut stop = false;
        for batch in order.chunks(cfg.batch_size) {
            let parts = train_step(model, &mut opt, ds, batch, cfg)?;
            sum.accumulate(&parts, batch.len() as f64);
            seen += batch.len();
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        let mut mean = LossBreakdown::default();
        mean.accumulate(&sum, 1.0 / seen as f64);
        let val_auc = if validate {
            Some(evaluate(model, ds, Phase::Val, WorldMode::Closed, &eval_cfg)?.auc)
        } else {
            None
        };
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|b| auc > b.0) {
                best = Some((auc, epoch, model.store.clone()));
            }
        }
        let log = EpochLog {
            epoch,
            steps,
            loss: mean,
            val_auc,
        };
        on_epoch(&log);
        logs.push(log);
        if stop {
            break 'epochs;
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => logs.last().map_or(0, |l| l.epoch),
    };
    Ok(TrainOutcome {
        best_epoch,
        steps,
        logs,
    })
}

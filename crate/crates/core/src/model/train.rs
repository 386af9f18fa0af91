//! Balanced, early-stopped Adam training of the head.

use std::io::{self, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{bce_from_logit, dropout_keep, HeadParams, HeadShape, Inputs, ModelError, DEFAULT_HIDDEN};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    ValLoss,
    ValAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub val_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_share: bool,
    pub use_reference: bool,
    pub hidden: usize,
    pub early_stop: EarlyStopMetric,
    /// Class prevalence used to reweight the balanced sample when forming
    /// reference embeddings; `None` uses the positive rate of the data.
    pub reference_prevalence: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2048,
            dropout_p: 0.2,
            val_fraction: 0.10,
            max_epochs: 100,
            patience: 10,
            weight_share: true,
            use_reference: true,
            hidden: DEFAULT_HIDDEN,
            early_stop: EarlyStopMetric::ValLoss,
            reference_prevalence: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::CannotTrain(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("patience, max_epochs, batch_size and hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Labeled examples with the video each belongs to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    /// Video index per row, `0..n_groups`.
    pub group: Vec<usize>,
    pub layout: String,
}

impl Dataset {
    pub fn n_groups(&self) -> usize {
        self.group.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_positive: usize,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.epochs {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// All positives plus an equal number of seeded negatives (or the reverse
/// when negatives are the minority), returned in ascending row order.
pub fn balanced_subsample(y: &[u8], seed: u64) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| y[i] == 1);
    let mut rng = keyed_rng(seed, "balance", &[]);
    if pos.len() <= neg.len() {
        neg.shuffle(&mut rng);
        neg.truncate(pos.len());
    } else {
        pos.shuffle(&mut rng);
        pos.truncate(neg.len());
    }
    let mut out = pos;
    out.extend(neg);
    out.sort_unstable();
    out
}

/// Weighted per-group mean of the selected rows; groups without selected
/// rows get a zero row.
pub fn reference_rows(
    x: ArrayView2<'_, f64>,
    group: &[usize],
    rows: &[usize],
    weight: impl Fn(usize) -> f64,
    n_groups: usize,
) -> Array2<f64> {
    let mut acc = Array2::zeros((n_groups, x.ncols()));
    let mut tot = vec![0.0; n_groups];
    for &i in rows {
        let w = weight(i);
        let g = group[i];
        tot[g] += w;
        acc.row_mut(g).scaled_add(w, &x.row(i));
    }
    for (mut row, t) in acc.outer_iter_mut().zip(tot) {
        if t > 0.0 {
            row /= t;
        }
    }
    acc
}

fn mean_loss(params: &HeadParams, inp: &Inputs<'_>, y: &[u8]) -> (f64, Vec<f64>) {
    let p = params.forward(inp, None);
    let loss = p
        .logit
        .iter()
        .zip(y)
        .map(|(&l, &t)| bce_from_logit(l, f64::from(t)))
        .sum::<f64>()
        / y.len() as f64;
    (loss, p.logit.to_vec())
}

/// Trains a head on a balanced subsample of `data`, holding out whole
/// videos for validation, and returns the best-validation parameters.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(HeadParams, TrainLog), ModelError> {
    config.validate()?;
    let n_pos = data.y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == data.y.len() {
        return Err(ModelError::CannotTrain("dataset contains a single class".into()));
    }
    let selected = balanced_subsample(&data.y, config.seed);
    let n_groups = data.n_groups();
    let prevalence = config
        .reference_prevalence
        .unwrap_or(n_pos as f64 / data.y.len() as f64);
    let refs = reference_rows(
        data.x.view(),
        &data.group,
        &selected,
        |i| if data.y[i] == 1 { prevalence } else { 1.0 - prevalence },
        n_groups,
    );

    let mut groups: Vec<usize> = selected.iter().map(|&i| data.group[i]).collect();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return Err(ModelError::CannotTrain(
            "need at least two videos for a grouped validation split".into(),
        ));
    }
    groups.shuffle(&mut keyed_rng(config.seed, "val-split", &[]));
    let mut per_group = vec![0usize; n_groups];
    for &i in &selected {
        per_group[data.group[i]] += 1;
    }
    let target = config.val_fraction * selected.len() as f64;
    let mut val_groups = vec![false; n_groups];
    let mut n_val = 0usize;
    for &g in &groups[..groups.len() - 1] {
        if n_val as f64 >= target {
            break;
        }
        val_groups[g] = true;
        n_val += per_group[g];
    }
    let (val_rows, train_rows): (Vec<usize>, Vec<usize>) =
        selected.iter().partition(|&&i| val_groups[data.group[i]]);

    let val_x = data.x.select(Axis(0), &val_rows);
    let val_y: Vec<u8> = val_rows.iter().map(|&i| data.y[i]).collect();
    let val_g: Vec<usize> = val_rows.iter().map(|&i| data.group[i]).collect();
    let val_inp = Inputs::new(val_x.view(), refs.view(), &val_g);

    let shape = HeadShape {
        d_in: data.x.ncols(),
        hidden: config.hidden,
        weight_share: config.weight_share,
        use_reference: config.use_reference,
    };
    let mut params = HeadParams::init(shape, data.layout.clone(), config.seed);
    let mut adam = Adam::new(params.theta.len(), config.lr);
    let mut best = params.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut order = train_rows.clone();

    for epoch in 1..=config.max_epochs {
        order.clone_from(&train_rows);
        order.shuffle(&mut keyed_rng(config.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let bx = data.x.select(Axis(0), chunk);
            let by: Vec<u8> = chunk.iter().map(|&i| data.y[i]).collect();
            let bg: Vec<usize> = chunk.iter().map(|&i| data.group[i]).collect();
            let keep = (config.dropout_p > 0.0).then(|| {
                let mut rng = keyed_rng(config.seed, "dropout", &[epoch as u64, b as u64]);
                dropout_keep(chunk.len(), config.hidden, config.dropout_p, &mut rng)
            });
            let inp = Inputs::new(bx.view(), refs.view(), &bg);
            let lg = params.loss_and_grads(&inp, &by, keep)?;
            loss_sum += lg.loss * chunk.len() as f64;
            adam.step(&mut params.theta, &lg.grad);
        }
        let train_loss = loss_sum / order.len() as f64;
        let (val_loss, val_logits) = mean_loss(&params, &val_inp, &val_y);
        if !val_loss.is_finite() || !params.is_finite() {
            return Err(ModelError::NumericalFailure {
                context: format!("validation at epoch {epoch}"),
                loss: val_loss,
                max_abs_logit: val_logits.iter().fold(0.0, |m: f64, l| m.max(l.abs())),
                batch: val_y.len(),
            });
        }
        let val_auc = crate::eval::auc(&val_logits, &val_y).ok();
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc,
        });
        let score = match config.early_stop {
            EarlyStopMetric::ValLoss => val_loss,
            EarlyStopMetric::ValAuc => -val_auc.unwrap_or(0.5),
        };
        if score < best_score {
            best_score = score;
            best.theta.clone_from(&params.theta);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    log::debug!(
        "trained head: {} epochs, best {} (train {}, val {})",
        epochs.len(),
        best_epoch,
        train_rows.len(),
        val_rows.len()
    );
    Ok((
        best,
        TrainLog {
            epochs,
            best_epoch,
            n_train: train_rows.len(),
            n_val: val_rows.len(),
            n_positive: n_pos,
        },
    ))
}

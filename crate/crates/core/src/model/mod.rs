//! The classification head.
//!
//! ```text
//! a = relu(W1 e_x + b1)          r = relu(W1' e_ref + b1')   (W1' = W1 when shared)
//! z = dropout(relu(W2 [a; r] + b2))
//! logit = w3 . z + b3,  p = sigmoid(logit)
//! ```
//!
//! All parameters live in one flat `f64` vector so the optimizer and the
//! finite-difference tests can treat them uniformly. Batches carry their
//! reference embeddings deduplicated (one row per video) with an index per
//! example, so the reference branch is evaluated once per video.

mod checkpoint;
mod train;

pub use checkpoint::{decode_tagged, encode_tagged, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use train::{
    balanced_subsample, reference_rows, train, Adam, Dataset, EarlyStopMetric, EpochRecord,
    TrainConfig, TrainLog,
};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::Layout;
use crate::rng::keyed_rng;

pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite loss {loss} in {context}: max |logit| {max_abs_logit}, batch size {batch}")]
    NumericalFailure {
        context: String,
        loss: f64,
        max_abs_logit: f64,
        batch: usize,
    },
    #[error("cannot train: {0}")]
    CannotTrain(String),
    #[error("layer {0:?} is not part of the model layout {1:?}")]
    UnknownLayer(String, String),
    #[error(transparent)]
    Layout(#[from] crate::embedstore::EmbedError),
}

/// Structural hyperparameters of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub d_in: usize,
    pub hidden: usize,
    pub weight_share: bool,
    pub use_reference: bool,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w1r: usize,
    b1r: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl HeadShape {
    fn offsets(&self) -> Offsets {
        let (h, d) = (self.hidden, self.d_in);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w1r = b1 + h;
        let (b1r, w2) = if self.weight_share {
            (w1r, w1r)
        } else {
            (w1r + h * d, w1r + h * d + h)
        };
        let b2 = w2 + 2 * h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        Offsets {
            w1,
            b1,
            w1r,
            b1r,
            w2,
            b2,
            w3,
            b3,
            len: b3 + 1,
        }
    }

    pub fn n_params(&self) -> usize {
        self.offsets().len
    }
}

/// Parameters of a head plus the input layout it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub shape: HeadShape,
    pub theta: Vec<f64>,
    pub layout: String,
    pub seed: u64,
}

/// Where to take a gradient for concept sensitivity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivationLayer {
    InputPart(String),
    H1,
}

impl std::fmt::Display for ActivationLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationLayer::InputPart(p) => f.write_str(p),
            ActivationLayer::H1 => f.write_str("h1"),
        }
    }
}

impl std::str::FromStr for ActivationLayer {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == "h1" {
            ActivationLayer::H1
        } else {
            ActivationLayer::InputPart(s.to_string())
        })
    }
}

/// Inputs for a batch: one row of `x` per example, deduplicated reference
/// rows, and the reference row used by each example.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub x: ArrayView2<'a, f64>,
    pub refs: ArrayView2<'a, f64>,
    pub ref_idx: &'a [usize],
}

impl<'a> Inputs<'a> {
    pub fn new(x: ArrayView2<'a, f64>, refs: ArrayView2<'a, f64>, ref_idx: &'a [usize]) -> Self {
        assert_eq!(x.nrows(), ref_idx.len(), "one reference index per example");
        assert_eq!(x.ncols(), refs.ncols(), "e_x and e_ref widths differ");
        assert!(ref_idx.iter().all(|&i| i < refs.nrows()), "reference index out of range");
        Self { x, refs, ref_idx }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    pub a_pre: Array2<f64>,
    pub a: Array2<f64>,
    /// Per reference row; empty when the reference path is off.
    pub r_pre: Array2<f64>,
    pub r: Array2<f64>,
    pub z_pre: Array2<f64>,
    /// After dropout scaling.
    pub z: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)), if dropout was applied.
    pub keep: Option<Array2<f64>>,
    pub logit: Array1<f64>,
}

/// Gradients of the mean loss plus per-example input sensitivities.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// Same layout as `HeadParams::theta`.
    pub grad: Vec<f64>,
    /// Row `i` is d logit_i / d e_x for example `i`.
    pub dlogit_dx: Array2<f64>,
}

pub fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy from a logit, `max(l,0) - l y + ln(1 + e^{-|l|})`.
pub fn bce_from_logit(l: f64, y: f64) -> f64 {
    l.max(0.0) - l * y + (-l.abs()).exp().ln_1p()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl HeadParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias.
    pub fn init(shape: HeadShape, layout: impl Into<String>, seed: u64) -> Self {
        let o = shape.offsets();
        let mut theta = vec![0.0; o.len];
        let mut rng = keyed_rng(seed, "head-init", &[]);
        let d = shape.d_in as f64;
        let h = shape.hidden as f64;
        let mut fill = |range: std::ops::Range<usize>, fan_in: f64| {
            let bound = 1.0 / fan_in.sqrt();
            for v in &mut theta[range] {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(o.w1..o.b1r + if shape.weight_share { 0 } else { shape.hidden }, d);
        fill(o.w2..o.w3, 2.0 * h);
        fill(o.w3..o.len, h);
        Self {
            shape,
            theta,
            layout: layout.into(),
            seed,
        }
    }

    pub fn zeros(shape: HeadShape, layout: impl Into<String>) -> Self {
        Self {
            shape,
            theta: vec![0.0; shape.n_params()],
            layout: layout.into(),
            seed: 0,
        }
    }

    fn o(&self) -> Offsets {
        self.shape.offsets()
    }

    pub fn w1(&self) -> ArrayView2<'_, f64> {
        let o = self.o();
        ArrayView2::from_shape((self.shape.hidden, self.shape.d_in), &self.theta[o.w1..o.b1]).unwrap()
    }

    pub fn b1(&self) -> ArrayView1<'_, f64> {
        let o = self.o();
        ArrayView1::from(&self.theta[o.b1..o.b1 + self.shape.hidden])
    }

    /// Reference-branch weights (the shared ones when weight sharing is on).
    pub fn w1_ref(&self) -> ArrayView2<'_, f64> {
        if self.shape.weight_share {
            return self.w1();
        }
        let o = self.o();
        ArrayView2::from_shape((self.shape.hidden, self.shape.d_in), &self.theta[o.w1r..o.b1r]).unwrap()
    }

    pub fn b1_ref(&self) -> ArrayView1<'_, f64> {
        if self.shape.weight_share {
            return self.b1();
        }
        let o = self.o();
        ArrayView1::from(&self.theta[o.b1r..o.w2])
    }

    pub fn w2(&self) -> ArrayView2<'_, f64> {
        let o = self.o();
        ArrayView2::from_shape((self.shape.hidden, 2 * self.shape.hidden), &self.theta[o.w2..o.b2]).unwrap()
    }

    pub fn b2(&self) -> ArrayView1<'_, f64> {
        let o = self.o();
        ArrayView1::from(&self.theta[o.b2..o.w3])
    }

    pub fn w3(&self) -> ArrayView1<'_, f64> {
        let o = self.o();
        ArrayView1::from(&self.theta[o.w3..o.b3])
    }

    pub fn b3(&self) -> f64 {
        self.theta[self.o().b3]
    }

    pub fn set_b3(&mut self, v: f64) {
        let i = self.o().b3;
        self.theta[i] = v;
    }

    pub fn parsed_layout(&self) -> Result<Layout, ModelError> {
        Ok(self.layout.parse()?)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Forward pass. `keep` holds inverted-dropout multipliers per example
    /// and hidden unit of h2; `None` means inference mode.
    pub fn forward(&self, inp: &Inputs<'_>, keep: Option<Array2<f64>>) -> Cache {
        let h = self.shape.hidden;
        assert_eq!(inp.x.ncols(), self.shape.d_in, "input width does not match the head");
        let mut a_pre = inp.x.dot(&self.w1().t());
        a_pre += &self.b1();
        let a = a_pre.mapv(relu);
        let w2 = self.w2();
        let mut z_pre = a.dot(&w2.slice(s![.., ..h]).t());
        let (r_pre, r) = if self.shape.use_reference {
            let mut r_pre = inp.refs.dot(&self.w1_ref().t());
            r_pre += &self.b1_ref();
            let r = r_pre.mapv(relu);
            let rw = r.dot(&w2.slice(s![.., h..]).t());
            for (mut row, &j) in z_pre.outer_iter_mut().zip(inp.ref_idx) {
                row += &rw.row(j);
            }
            (r_pre, r)
        } else {
            (Array2::zeros((0, h)), Array2::zeros((0, h)))
        };
        z_pre += &self.b2();
        let mut z = z_pre.mapv(relu);
        if let Some(k) = &keep {
            assert_eq!(k.dim(), z.dim(), "dropout mask shape");
            z *= k;
        }
        let mut logit = z.dot(&self.w3());
        logit += self.b3();
        Cache {
            a_pre,
            a,
            r_pre,
            r,
            z_pre,
            z,
            keep,
            logit,
        }
    }

    /// Probabilities without dropout.
    pub fn predict(&self, inp: &Inputs<'_>) -> Vec<f64> {
        self.forward(inp, None).logit.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Single-example forward without dropout: (probability, cache).
    pub fn forward_one(&self, e_x: &[f64], e_ref: &[f64]) -> (f64, Cache) {
        let x = ArrayView2::from_shape((1, e_x.len()), e_x).unwrap();
        let r = ArrayView2::from_shape((1, e_ref.len()), e_ref).unwrap();
        let cache = self.forward(&Inputs::new(x, r, &[0]), None);
        (sigmoid(cache.logit[0]), cache)
    }

    /// Mean BCE over the batch, its gradient for every parameter, and the
    /// per-example gradient of the logit with respect to `e_x`.
    pub fn loss_and_grads(
        &self,
        inp: &Inputs<'_>,
        y: &[u8],
        keep: Option<Array2<f64>>,
    ) -> Result<LossGrads, ModelError> {
        let n = inp.len();
        assert!(n > 0, "empty batch");
        assert_eq!(y.len(), n, "one label per example");
        let h = self.shape.hidden;
        let o = self.o();
        let c = self.forward(inp, keep);
        let loss = c
            .logit
            .iter()
            .zip(y)
            .map(|(&l, &t)| bce_from_logit(l, f64::from(t)))
            .sum::<f64>()
            / n as f64;
        if !loss.is_finite() {
            return Err(ModelError::NumericalFailure {
                context: "loss_and_grads".into(),
                loss,
                max_abs_logit: c.logit.iter().fold(0.0, |m: f64, l| m.max(l.abs())),
                batch: n,
            });
        }
        // d loss / d logit per example
        let coef: Array1<f64> = c
            .logit
            .iter()
            .zip(y)
            .map(|(&l, &t)| (sigmoid(l) - f64::from(t)) / n as f64)
            .collect();

        // d logit / d z_pre per example (unscaled by coef)
        let w3 = self.w3();
        let mut dzp1 = Array2::zeros((n, h));
        Zip::from(&mut dzp1)
            .and(&c.z_pre)
            .and_broadcast(&w3)
            .for_each(|g, &zp, &w| *g = if zp > 0.0 { w } else { 0.0 });
        if let Some(k) = &c.keep {
            dzp1 *= k;
        }
        let w2 = self.w2();
        let w2a = w2.slice(s![.., ..h]);
        let mut da1 = dzp1.dot(&w2a);
        Zip::from(&mut da1).and(&c.a_pre).for_each(|g, &ap| {
            if ap <= 0.0 {
                *g = 0.0
            }
        });
        let dlogit_dx = da1.dot(&self.w1());

        let col = coef.view().insert_axis(Axis(1));
        let dzp = &dzp1 * &col;
        let dap = &da1 * &col;

        let mut grad = vec![0.0; o.len];
        grad[o.b3] = coef.sum();
        let g_w3 = c.z.t().dot(&coef);
        grad[o.w3..o.b3].copy_from_slice(g_w3.as_slice().unwrap());
        let g_b2 = dzp.sum_axis(Axis(0));
        grad[o.b2..o.w3].copy_from_slice(g_b2.as_slice().unwrap());

        let mut g_w2 = Array2::zeros((h, 2 * h));
        g_w2.slice_mut(s![.., ..h]).assign(&dzp.t().dot(&c.a));
        let g_w1 = dap.t().dot(&inp.x);
        let g_b1 = dap.sum_axis(Axis(0));
        add_into(&mut grad[o.w1..o.b1], g_w1.as_slice().unwrap());
        add_into(&mut grad[o.b1..o.b1 + h], g_b1.as_slice().unwrap());

        if self.shape.use_reference {
            let u = inp.refs.nrows();
            let mut s_ref = Array2::zeros((u, h));
            for (row, &j) in dzp.outer_iter().zip(inp.ref_idx) {
                let mut acc = s_ref.row_mut(j);
                acc += &row;
            }
            g_w2.slice_mut(s![.., h..]).assign(&s_ref.t().dot(&c.r));
            let mut dr = s_ref.dot(&w2.slice(s![.., h..]));
            Zip::from(&mut dr).and(&c.r_pre).for_each(|g, &rp| {
                if rp <= 0.0 {
                    *g = 0.0
                }
            });
            let g_w1r = dr.t().dot(&inp.refs);
            let g_b1r = dr.sum_axis(Axis(0));
            let (wr, br) = if self.shape.weight_share {
                (o.w1, o.b1)
            } else {
                (o.w1r, o.b1r)
            };
            add_into(&mut grad[wr..wr + h * self.shape.d_in], g_w1r.as_slice().unwrap());
            add_into(&mut grad[br..br + h], g_b1r.as_slice().unwrap());
        }
        grad[o.w2..o.b2].copy_from_slice(g_w2.as_slice().unwrap());
        Ok(LossGrads {
            loss,
            grad,
            dlogit_dx,
        })
    }

    /// d logit / d e_x for one example, dropout off, reference held fixed.
    pub fn input_gradient(&self, e_x: &[f64], e_ref: &[f64]) -> Vec<f64> {
        let (_, c) = self.forward_one(e_x, e_ref);
        let da = self.h1_gradient_from(&c, 0);
        let mut da1 = da;
        for (g, &ap) in da1.iter_mut().zip(c.a_pre.row(0)) {
            if ap <= 0.0 {
                *g = 0.0;
            }
        }
        Array1::from(da1).dot(&self.w1()).to_vec()
    }

    fn h1_gradient_from(&self, c: &Cache, row: usize) -> Vec<f64> {
        let h = self.shape.hidden;
        let w3 = self.w3();
        let dz: Array1<f64> = c
            .z_pre
            .row(row)
            .iter()
            .zip(w3)
            .map(|(&zp, &w)| if zp > 0.0 { w } else { 0.0 })
            .collect();
        dz.dot(&self.w2().slice(s![.., ..h])).to_vec()
    }

    /// Gradient of the logit with respect to an activation, dropout off.
    /// For an input part this is the slice of d logit / d e_x belonging to
    /// the part; for `H1` it is d logit / d a with a = h1(e_x).
    pub fn grad_wrt_activation(
        &self,
        e_x: &[f64],
        e_ref: &[f64],
        layer: &ActivationLayer,
    ) -> Result<Vec<f64>, ModelError> {
        match layer {
            ActivationLayer::H1 => {
                let (_, c) = self.forward_one(e_x, e_ref);
                Ok(self.h1_gradient_from(&c, 0))
            }
            ActivationLayer::InputPart(name) => {
                let range = self
                    .parsed_layout()?
                    .range(name)
                    .ok_or_else(|| ModelError::UnknownLayer(name.clone(), self.layout.clone()))?;
                Ok(self.input_gradient(e_x, e_ref)[range].to_vec())
            }
        }
    }

    /// Batched form of [`grad_wrt_activation`](Self::grad_wrt_activation):
    /// one row per example.
    pub fn grad_wrt_activation_batch(
        &self,
        inp: &Inputs<'_>,
        layer: &ActivationLayer,
    ) -> Result<Array2<f64>, ModelError> {
        let h = self.shape.hidden;
        let c = self.forward(inp, None);
        let w3 = self.w3();
        let mut dz = Array2::zeros(c.z_pre.dim());
        Zip::from(&mut dz)
            .and(&c.z_pre)
            .and_broadcast(&w3)
            .for_each(|g, &zp, &w| *g = if zp > 0.0 { w } else { 0.0 });
        let mut da = dz.dot(&self.w2().slice(s![.., ..h]));
        match layer {
            ActivationLayer::H1 => Ok(da),
            ActivationLayer::InputPart(name) => {
                let range = self
                    .parsed_layout()?
                    .range(name)
                    .ok_or_else(|| ModelError::UnknownLayer(name.clone(), self.layout.clone()))?;
                Zip::from(&mut da).and(&c.a_pre).for_each(|g, &ap| {
                    if ap <= 0.0 {
                        *g = 0.0
                    }
                });
                let w1 = self.w1();
                Ok(da.dot(&w1.slice(s![.., range])))
            }
        }
    }

    /// h1(e_x) rows without dropout.
    pub fn h1_activations(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.dot(&self.w1().t());
        a += &self.b1();
        a.mapv_inplace(relu);
        a
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Inverted-dropout multipliers: each entry is 0 with probability `p`,
/// otherwise `1/(1-p)`.
pub fn dropout_keep(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let scale = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { scale })
}

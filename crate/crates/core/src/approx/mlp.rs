//! Trained approximators: a bottleneck MLP and a residual MLP with layer
//! norms. Parameters live in f64; gradients are derived by hand.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::ops::{silu, silu_derivative, GeluVariant};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Layer norm epsilon inside the residual MLP.
pub const RESMLP_NORM_EPS: f64 = 1e-5;

/// Rows of the fitting set used to report the loss before and after training.
const REPORT_ROWS: usize = 4096;

const PAR_ROWS: usize = 64;

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-k, k)).collect();
        let b = (0..fan_out).map(|_| rng.uniform_range(-k, k)).collect();
        Self { fan_in, fan_out, w, b }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (fi, fo) = (self.fan_in, self.fan_out);
        debug_assert_eq!(x.len(), n * fi);
        let mut out = vec![0.0; n * fo];
        out.par_chunks_mut(fo * PAR_ROWS)
            .zip(x.par_chunks(fi * PAR_ROWS))
            .for_each(|(o, xin)| {
                for (orow, xrow) in o.chunks_mut(fo).zip(xin.chunks(fi)) {
                    orow.copy_from_slice(&self.b);
                    for (i, &xi) in xrow.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        for (ov, &wv) in orow.iter_mut().zip(&self.w[i * fo..(i + 1) * fo]) {
                            *ov += xi * wv;
                        }
                    }
                }
            });
        out
    }

    /// Returns `(dx, dw, db)` for upstream gradient `g`.
    pub fn backward(&self, x: &[f64], g: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (fi, fo) = (self.fan_in, self.fan_out);
        let mut dw = vec![0.0; fi * fo];
        dw.par_chunks_mut(fo).enumerate().for_each(|(i, dwi)| {
            for r in 0..n {
                let xi = x[r * fi + i];
                if xi == 0.0 {
                    continue;
                }
                for (d, &gv) in dwi.iter_mut().zip(&g[r * fo..(r + 1) * fo]) {
                    *d += xi * gv;
                }
            }
        });
        let mut db = vec![0.0; fo];
        for grow in g.chunks(fo) {
            for (d, &gv) in db.iter_mut().zip(grow) {
                *d += gv;
            }
        }
        let mut dx = vec![0.0; n * fi];
        dx.par_chunks_mut(fi * PAR_ROWS)
            .zip(g.par_chunks(fo * PAR_ROWS))
            .for_each(|(dxc, gc)| {
                for (dxr, gr) in dxc.chunks_mut(fi).zip(gc.chunks(fo)) {
                    for (i, d) in dxr.iter_mut().enumerate() {
                        *d = self.w[i * fo..(i + 1) * fo].iter().zip(gr).map(|(a, b)| a * b).sum();
                    }
                }
            });
        (dx, dw, db)
    }

    pub fn param_count(&self) -> u64 {
        (self.w.len() + self.b.len()) as u64
    }
}

/// Row-wise layer norm with affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

struct NormCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

impl Norm {
    pub fn new(d: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            eps,
        }
    }

    fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, NormCache) {
        let d = self.gamma.len();
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let iv = 1.0 / (var + self.eps).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let h = (row[j] - mean) * iv;
                xhat[r * d + j] = h;
                y[r * d + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        (y, NormCache { xhat, inv })
    }

    /// Returns `(dx, dgamma, dbeta)`.
    fn backward(&self, cache: &NormCache, g: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.gamma.len();
        let mut dx = vec![0.0; n * d];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let gr = &g[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                dgamma[j] += gr[j] * xh[j];
                dbeta[j] += gr[j];
                dxhat[j] = gr[j] * self.gamma[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx[r * d + j] = cache.inv[r] * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        (dx, dgamma, dbeta)
    }
}

/// Sum of squared row differences divided by the row count, and its
/// gradient with respect to `y`.
fn mse_loss(y: &[f64], t: &[f64], n: usize) -> (f64, Vec<f64>) {
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = y
        .iter()
        .zip(t)
        .map(|(a, b)| {
            let diff = a - b;
            loss += diff * diff;
            2.0 * diff * scale
        })
        .collect();
    (loss * scale, grad)
}

/// A model trained by [`train`].
pub trait Trainable {
    fn dim(&self) -> usize;
    /// Named parameter tensors in a fixed order.
    fn params(&self) -> Vec<(&'static str, &[f64])>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    /// Inference forward pass over `n` rows.
    fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64>;
    /// Loss and gradients (ordered as [`Trainable::params`]). Dropout masks
    /// are drawn from `dropout` when given.
    fn loss_grad(&self, x: &[f64], t: &[f64], n: usize, dropout: Option<&mut Rng>) -> (f64, Vec<Vec<f64>>);

    fn loss(&self, x: &[f64], t: &[f64], n: usize) -> f64 {
        mse_loss(&self.forward_rows(x, n), t, n).0
    }
}

/// `Linear(d, d/2) -> GELU -> Linear(d/2, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpApprox {
    pub fc1: Dense,
    pub fc2: Dense,
    pub gelu: GeluVariant,
}

impl MlpApprox {
    pub fn new(d: usize, rng: &mut Rng) -> Result<Self> {
        if d < 2 {
            return Err(Error::Argument(format!("mlp approximator needs d >= 2, got {d}")));
        }
        let h = d / 2;
        let fc1 = Dense::init(d, h, rng);
        let fc2 = Dense::init(h, d, rng);
        Ok(Self {
            fc1,
            fc2,
            gelu: GeluVariant::Tanh,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.fan_out
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

impl Trainable for MlpApprox {
    fn dim(&self) -> usize {
        self.fc1.fan_in
    }

    fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("fc1.weight", &self.fc1.w),
            ("fc1.bias", &self.fc1.b),
            ("fc2.weight", &self.fc2.w),
            ("fc2.bias", &self.fc2.b),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.fc1.w, &mut self.fc1.b, &mut self.fc2.w, &mut self.fc2.b]
    }

    fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let g = self.gelu;
        let a: Vec<f64> = self.fc1.forward(x, n).into_iter().map(|v| g.eval(v)).collect();
        self.fc2.forward(&a, n)
    }

    fn loss_grad(&self, x: &[f64], t: &[f64], n: usize, _dropout: Option<&mut Rng>) -> (f64, Vec<Vec<f64>>) {
        let g = self.gelu;
        let h = self.fc1.forward(x, n);
        let a: Vec<f64> = h.iter().map(|&v| g.eval(v)).collect();
        let y = self.fc2.forward(&a, n);
        let (loss, gy) = mse_loss(&y, t, n);
        let (da, dw2, db2) = self.fc2.backward(&a, &gy, n);
        let dh: Vec<f64> = da.iter().zip(&h).map(|(d, &v)| d * g.derivative(v)).collect();
        let (_, dw1, db1) = self.fc1.backward(x, &dh, n);
        (loss, vec![dw1, db1, dw2, db2])
    }
}

/// `x_n = LN1(x)`, `y = LN2(ff(x_n) + x_n)` with
/// `ff = Linear(d, d) -> SiLU -> Dropout(p) -> Linear(d, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResMlpApprox {
    pub norm1: Norm,
    pub ff0: Dense,
    pub ff3: Dense,
    pub norm2: Norm,
    pub dropout_p: f64,
}

impl ResMlpApprox {
    pub fn new(d: usize, dropout_p: f64, rng: &mut Rng) -> Result<Self> {
        if d < 2 {
            return Err(Error::Argument(format!("res-mlp approximator needs d >= 2, got {d}")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Argument(format!("dropout probability must be in [0, 1), got {dropout_p}")));
        }
        let ff0 = Dense::init(d, d, rng);
        let ff3 = Dense::init(d, d, rng);
        Ok(Self {
            norm1: Norm::new(d, RESMLP_NORM_EPS),
            ff0,
            ff3,
            norm2: Norm::new(d, RESMLP_NORM_EPS),
            dropout_p,
        })
    }

    pub fn param_count(&self) -> u64 {
        let d = self.dim() as u64;
        4 * d + self.ff0.param_count() + self.ff3.param_count()
    }

    fn run(&self, x: &[f64], n: usize, mask: Option<&[f64]>) -> ResMlpTrace {
        let (xn, c1) = self.norm1.forward(x, n);
        let h = self.ff0.forward(&xn, n);
        let mut a: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
        if let Some(m) = mask {
            a.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let f = self.ff3.forward(&a, n);
        let z: Vec<f64> = f.iter().zip(&xn).map(|(a, b)| a + b).collect();
        let (y, c2) = self.norm2.forward(&z, n);
        ResMlpTrace { xn, c1, h, a, y, c2 }
    }
}

struct ResMlpTrace {
    xn: Vec<f64>,
    c1: NormCache,
    h: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
    c2: NormCache,
}

impl Trainable for ResMlpApprox {
    fn dim(&self) -> usize {
        self.norm1.gamma.len()
    }

    fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("norm1.weight", &self.norm1.gamma),
            ("norm1.bias", &self.norm1.beta),
            ("ff.0.weight", &self.ff0.w),
            ("ff.0.bias", &self.ff0.b),
            ("ff.3.weight", &self.ff3.w),
            ("ff.3.bias", &self.ff3.b),
            ("norm2.weight", &self.norm2.gamma),
            ("norm2.bias", &self.norm2.beta),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.norm1.gamma,
            &mut self.norm1.beta,
            &mut self.ff0.w,
            &mut self.ff0.b,
            &mut self.ff3.w,
            &mut self.ff3.b,
            &mut self.norm2.gamma,
            &mut self.norm2.beta,
        ]
    }

    fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.run(x, n, None).y
    }

    fn loss_grad(&self, x: &[f64], t: &[f64], n: usize, dropout: Option<&mut Rng>) -> (f64, Vec<Vec<f64>>) {
        let p = self.dropout_p;
        let mask: Option<Vec<f64>> = match dropout {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(
                    (0..n * self.ff0.fan_out)
                        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
                        .collect(),
                )
            }
            _ => None,
        };
        let tr = self.run(x, n, mask.as_deref());
        let (loss, gy) = mse_loss(&tr.y, t, n);
        let (gz, dg2, db2) = self.norm2.backward(&tr.c2, &gy, n);
        let (mut ga, dw3, db3) = self.ff3.backward(&tr.a, &gz, n);
        if let Some(m) = &mask {
            ga.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let gh: Vec<f64> = ga.iter().zip(&tr.h).map(|(g, &v)| g * silu_derivative(v)).collect();
        let (mut gxn, dw0, db0) = self.ff0.backward(&tr.xn, &gh, n);
        gxn.iter_mut().zip(&gz).for_each(|(a, b)| *a += b);
        let (_, dg1, db1) = self.norm1.backward(&tr.c1, &gxn, n);
        (loss, vec![dg1, db1, dw0, db0, dw3, db3, dg2, db2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch: 256,
            dropout_p: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on a fixed evaluation sample of the fitting rows.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval_rows: usize,
    /// Mini-batch loss at every step.
    pub step_losses: Vec<f64>,
}

pub(crate) fn gather_rows(x: &Tensor, idx: &[usize]) -> Vec<f64> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend(x.row(i).iter().map(|&v| v as f64));
    }
    out
}

/// Adam on mini-batches sampled (without replacement within a batch) from
/// the seeded rng.
pub fn train<M: Trainable>(model: &mut M, xs: &Tensor, xe: &Tensor, cfg: &TrainConfig) -> Result<TrainReport> {
    ensure_dim!(xs.shape() == xe.shape(), "fitting shapes {:?} vs {:?}", xs.shape(), xe.shape());
    ensure_dim!(xs.last_dim() == model.dim(), "fitting width {} vs model width {}", xs.last_dim(), model.dim());
    let n = xs.rows();
    if n == 0 || cfg.batch == 0 {
        return Err(Error::Argument("training needs at least one row and a positive batch size".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut batch_rng = rng.fork(1);
    let mut drop_rng = rng.fork(2);
    let mut eval_rng = rng.fork(3);
    let eval_idx = if n <= REPORT_ROWS {
        (0..n).collect()
    } else {
        let mut idx = eval_rng.sample_indices(n, REPORT_ROWS);
        idx.sort_unstable();
        idx
    };
    let ex = gather_rows(xs, &eval_idx);
    let et = gather_rows(xe, &eval_idx);
    round_to_f32(model);
    let initial_loss = model.loss(&ex, &et, eval_idx.len());

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut states = model
        .params()
        .iter()
        .map(|(_, p)| AdamState::new(p.len(), adam))
        .collect::<Result<Vec<_>>>()?;
    let bs = cfg.batch.min(n);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batch_rng.sample_indices(n, bs);
        let bx = gather_rows(xs, &idx);
        let bt = gather_rows(xe, &idx);
        let (loss, grads) = model.loss_grad(&bx, &bt, bs, Some(&mut drop_rng));
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became non-finite at step {step}")));
        }
        step_losses.push(loss);
        for ((p, g), st) in model.params_mut().into_iter().zip(&grads).zip(&mut states) {
            st.update(p, g)?;
        }
    }
    round_to_f32(model);
    let final_loss = model.loss(&ex, &et, eval_idx.len());
    if !final_loss.is_finite() {
        return Err(Error::Numeric(format!("training loss non-finite after step {}", cfg.steps)));
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        eval_rows: eval_idx.len(),
        step_losses,
    })
}

/// Parameters are persisted as f32; keep the in-memory model identical.
fn round_to_f32<M: Trainable>(model: &mut M) {
    for p in model.params_mut() {
        p.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Applies a trained model to every row of an f32 token matrix.
pub fn apply_rows<M: Trainable + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    ensure_dim!(x.last_dim() == model.dim(), "input width {} vs approximator width {}", x.last_dim(), model.dim());
    let y = model.forward_rows(&x.to_f64(), x.rows());
    Tensor::from_f64(x.shape().to_vec(), &y)
}

/// Writes parameters as f32 tensors shaped like their layers.
pub(crate) fn store_params(c: &mut Container, prefix: &str, named: &[(&'static str, &[f64])], shapes: &[Vec<usize>]) -> Result<()> {
    for ((name, data), shape) in named.iter().zip(shapes) {
        c.insert(format!("{prefix}{name}"), Tensor::from_f64(shape.clone(), data)?);
    }
    Ok(())
}

pub(crate) fn load_param(c: &Container, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    Ok(c.tensor_shaped(name, shape)?.to_f64())
}

impl MlpApprox {
    pub(crate) fn shapes(&self) -> Vec<Vec<usize>> {
        let (d, h) = (self.fc1.fan_in, self.fc1.fan_out);
        vec![vec![d, h], vec![h], vec![h, d], vec![d]]
    }

    pub(crate) fn load(c: &Container, prefix: &str, d: usize, gelu: GeluVariant) -> Result<Self> {
        let h = d / 2;
        let get = |n: &str, s: &[usize]| load_param(c, &format!("{prefix}{n}"), s);
        Ok(Self {
            fc1: Dense {
                fan_in: d,
                fan_out: h,
                w: get("fc1.weight", &[d, h])?,
                b: get("fc1.bias", &[h])?,
            },
            fc2: Dense {
                fan_in: h,
                fan_out: d,
                w: get("fc2.weight", &[h, d])?,
                b: get("fc2.bias", &[d])?,
            },
            gelu,
        })
    }
}

impl ResMlpApprox {
    pub(crate) fn shapes(&self) -> Vec<Vec<usize>> {
        let d = self.dim();
        vec![vec![d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d], vec![d]]
    }

    pub(crate) fn load(c: &Container, prefix: &str, d: usize, dropout_p: f64) -> Result<Self> {
        let get = |n: &str, s: &[usize]| load_param(c, &format!("{prefix}{n}"), s);
        Ok(Self {
            norm1: Norm {
                gamma: get("norm1.weight", &[d])?,
                beta: get("norm1.bias", &[d])?,
                eps: RESMLP_NORM_EPS,
            },
            ff0: Dense {
                fan_in: d,
                fan_out: d,
                w: get("ff.0.weight", &[d, d])?,
                b: get("ff.0.bias", &[d])?,
            },
            ff3: Dense {
                fan_in: d,
                fan_out: d,
                w: get("ff.3.weight", &[d, d])?,
                b: get("ff.3.bias", &[d])?,
            },
            norm2: Norm {
                gamma: get("norm2.weight", &[d])?,
                beta: get("norm2.bias", &[d])?,
                eps: RESMLP_NORM_EPS,
            },
            dropout_p,
        })
    }
}

/// Central finite-difference gradients of the dropout-free loss.
pub fn numeric_grad<M: Trainable + Clone>(model: &M, x: &[f64], t: &[f64], n: usize, h: f64) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    let mut probe = model.clone();
    for (pi, &len) in sizes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = probe.params_mut()[pi][k];
            probe.params_mut()[pi][k] = orig + h;
            let up = probe.loss(x, t, n);
            probe.params_mut()[pi][k] = orig - h;
            let down = probe.loss(x, t, n);
            probe.params_mut()[pi][k] = orig;
            *gk = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

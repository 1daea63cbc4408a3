//! Affine classification head and feature projector fine-tuned on
//! pseudo-labels with a classification, distillation and triplet loss.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::{argmax, softmax};
use crate::error::{Error, Result};
use crate::reconcile::{mine_triplet_indices, LabelRef};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadHyper {
    pub alpha: f64,
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_triplets: usize,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper {
            alpha: 0.7,
            margin: 0.3,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 10,
            batch_size: 16,
            max_triplets: 64,
        }
    }
}

impl HeadHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::InvalidConfig("margin must lie in [0, 1]".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "optimizer settings must be >= 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Row-major affine maps: `logits = wc·x + bc`, `proj = wp·x + bp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub n_classes: usize,
    pub dim: usize,
    pub proj_dim: usize,
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    pub wp: Vec<f64>,
    pub bp: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(n_classes: usize, dim: usize, proj_dim: usize) -> Self {
        HeadParams {
            n_classes,
            dim,
            proj_dim,
            wc: vec![0.0; n_classes * dim],
            bc: vec![0.0; n_classes],
            wp: vec![0.0; proj_dim * dim],
            bp: vec![0.0; proj_dim],
        }
    }

    /// Gaussian init with standard deviation `scale / sqrt(dim)`.
    pub fn init(n_classes: usize, dim: usize, proj_dim: usize, scale: f64, seed: u64) -> Self {
        let mut p = HeadParams::zeros(n_classes, dim, proj_dim);
        let mut r = rng::stream(seed, &[0x4EAD]);
        let s = scale / (dim as f64).sqrt();
        for w in p.wc.iter_mut().chain(p.wp.iter_mut()) {
            let n: f64 = StandardNormal.sample(&mut r);
            *w = s * n;
        }
        p
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.wc, &mut self.bc, &mut self.wp, &mut self.bp]
    }

    fn slices(&self) -> [&Vec<f64>; 4] {
        [&self.wc, &self.bc, &self.wp, &self.bp]
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub feature: Vec<f64>,
    pub label: u32,
    pub soft: Vec<f64>,
    pub u: u32,
    pub frame_id: u32,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bi)| {
            bi + w[r * d..(r + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

pub fn forward(params: &HeadParams, feature: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if feature.len() != params.dim {
        return Err(Error::InvalidConfig(format!(
            "feature has {} dims, head expects {}",
            feature.len(),
            params.dim
        )));
    }
    if feature.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("feature"));
    }
    Ok((
        affine(&params.wc, &params.bc, feature),
        affine(&params.wp, &params.bp, feature),
    ))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn loss_head(logits: &[f64], label: u32) -> f64 {
    -log_softmax(logits)[label as usize]
}

pub fn loss_distil(logits: &[f64], soft: &[f64]) -> f64 {
    log_softmax(logits)
        .iter()
        .zip(soft)
        .map(|(l, s)| if *s == 0.0 { 0.0 } else { -s * l })
        .sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn loss_triplet(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (dist(a, p) - dist(a, n) + margin).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub head: f64,
    pub distil: f64,
    pub im: f64,
    pub total: f64,
}

/// Mean of each term over the batch (and triplets), combined as
/// `im + alpha * distil + head`, with gradients for every parameter.
pub fn loss_detection(
    params: &HeadParams,
    batch: &[TrainSample],
    triplets: &[(usize, usize, usize)],
    alpha: f64,
    margin: f64,
) -> Result<(LossBreakdown, HeadParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let d = params.dim;
    let mut grad = HeadParams::zeros(params.n_classes, d, params.proj_dim);
    let mut out = LossBreakdown::default();
    let n = batch.len() as f64;
    let mut projs = Vec::with_capacity(batch.len());
    for s in batch {
        let (logits, proj) = forward(params, &s.feature)?;
        projs.push(proj);
        out.head += loss_head(&logits, s.label) / n;
        out.distil += loss_distil(&logits, &s.soft) / n;
        let p = softmax(&logits);
        let soft_mass: f64 = s.soft.iter().sum();
        for c in 0..params.n_classes {
            let onehot = if c as u32 == s.label { 1.0 } else { 0.0 };
            let g = ((p[c] - onehot) + alpha * (soft_mass * p[c] - s.soft[c])) / n;
            grad.bc[c] += g;
            for (w, x) in grad.wc[c * d..(c + 1) * d].iter_mut().zip(&s.feature) {
                *w += g * x;
            }
        }
    }
    if !triplets.is_empty() {
        let m = triplets.len() as f64;
        let dp = params.proj_dim;
        let mut gproj = vec![vec![0.0; dp]; batch.len()];
        for &(a, p, ng) in triplets {
            let (pa, pp, pn) = (&projs[a], &projs[p], &projs[ng]);
            let dap = dist(pa, pp);
            let dan = dist(pa, pn);
            let l = dap - dan + margin;
            if l <= 0.0 {
                continue;
            }
            out.im += l / m;
            for k in 0..dp {
                if dap > 0.0 {
                    let g = (pa[k] - pp[k]) / dap / m;
                    gproj[a][k] += g;
                    gproj[p][k] -= g;
                }
                if dan > 0.0 {
                    let g = (pa[k] - pn[k]) / dan / m;
                    gproj[a][k] -= g;
                    gproj[ng][k] += g;
                }
            }
        }
        for (s, g) in batch.iter().zip(&gproj) {
            for (r, gr) in g.iter().enumerate() {
                if *gr == 0.0 {
                    continue;
                }
                grad.bp[r] += gr;
                for (w, x) in grad.wp[r * d..(r + 1) * d].iter_mut().zip(&s.feature) {
                    *w += gr * x;
                }
            }
        }
    }
    out.total = out.im + alpha * out.distil + out.head;
    if !out.total.is_finite() {
        return Err(Error::NonFinite("detection loss"));
    }
    Ok((out, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub head: f64,
    pub distil: f64,
    pub im: f64,
    pub total: f64,
}

pub fn curve_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,L_head,L_distil,L_im,total\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.head, e.distil, e.im, e.total
        ));
    }
    s
}

/// SGD with momentum and weight decay. Shuffles and triplet choices derive
/// from `seed` only.
pub fn train(
    params: &HeadParams,
    samples: &[TrainSample],
    hyper: &HeadHyper,
    seed: u64,
) -> Result<(HeadParams, Vec<EpochLog>)> {
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut w = params.clone();
    let mut vel = HeadParams::zeros(w.n_classes, w.dim, w.proj_dim);
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..hyper.epochs {
        let mut r = rng::stream(seed, &[0x7EA1, epoch as u64]);
        order.shuffle(&mut r);
        let mut acc = LossBreakdown::default();
        let mut n_batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&k| samples[k].clone()).collect();
            let keys: Vec<LabelRef> = batch
                .iter()
                .map(|s| LabelRef {
                    frame_id: s.frame_id,
                    u: s.u,
                })
                .collect();
            let triplets = mine_triplet_indices(&keys, hyper.max_triplets, &mut r);
            let (loss, grad) = loss_detection(&w, &batch, &triplets, hyper.alpha, hyper.margin)
                .map_err(|e| Error::Diverged {
                    epoch,
                    message: e.to_string(),
                })?;
            for ((pw, pv), pg) in w
                .slices_mut()
                .into_iter()
                .zip(vel.slices_mut())
                .zip(grad.slices())
            {
                for ((x, v), g) in pw.iter_mut().zip(pv.iter_mut()).zip(pg.iter()) {
                    *v = hyper.momentum * *v + g + hyper.weight_decay * *x;
                    *x -= hyper.lr * *v;
                }
            }
            if !w.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("parameters non-finite after loss {:.4}", loss.total),
                });
            }
            acc.head += loss.head;
            acc.distil += loss.distil;
            acc.im += loss.im;
            acc.total += loss.total;
            n_batches += 1;
        }
        let k = n_batches as f64;
        let entry = EpochLog {
            epoch,
            head: acc.head / k,
            distil: acc.distil / k,
            im: acc.im / k,
            total: acc.total / k,
        };
        log::debug!(
            "epoch {epoch}: head {:.4} distil {:.4} im {:.4} total {:.4}",
            entry.head,
            entry.distil,
            entry.im,
            entry.total
        );
        log.push(entry);
    }
    Ok((w, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub accuracy: f64,
    /// `None` for classes absent from the holdout.
    pub per_class: Vec<Option<f64>>,
    pub n: usize,
}

pub fn evaluate_head(params: &HeadParams, holdout: &[(Vec<f64>, u32)]) -> Result<HeadEval> {
    if holdout.is_empty() {
        return Err(Error::Empty("holdout"));
    }
    let c = params.n_classes;
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (x, y) in holdout {
        let (logits, _) = forward(params, x)?;
        let y = *y as usize;
        totals[y] += 1;
        if argmax(&logits) == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(HeadEval {
        accuracy: correct as f64 / holdout.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        n: holdout.len(),
    })
}

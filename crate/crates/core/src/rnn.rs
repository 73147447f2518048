//! Stateful recurrent network: dense PReLU embedding, two stacked LSTMs and
//! a sigmoid output, trained with truncated back-propagation through time.
//!
//! All arithmetic is in `f64`. Parameters live in one flat vector so that
//! gradient clipping and Adam operate on a single buffer.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode::{ColumnStats, EncodedSample, NormalizationStats};
use crate::error::{Error, Result};
use crate::sequencing::{build_buckets, iterate_for_training, Batch, SequencingConfig};

pub const MODEL_HEADER: &str = "#attend-rnn v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnDims {
    /// Value columns plus the time-delta column.
    pub input: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    w_in: Range<usize>,
    b_in: Range<usize>,
    slope: Range<usize>,
    w1: Range<usize>,
    u1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    u2: Range<usize>,
    b2: Range<usize>,
    w_out: Range<usize>,
    b_out: usize,
    len: usize,
}

impl Layout {
    fn new(d: RnnDims) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let g = 4 * d.hidden;
        let w_in = take(d.input * d.embed);
        let b_in = take(d.embed);
        let slope = take(d.embed);
        let w1 = take(d.embed * g);
        let u1 = take(d.hidden * g);
        let b1 = take(g);
        let w2 = take(d.hidden * g);
        let u2 = take(d.hidden * g);
        let b2 = take(g);
        let w_out = take(d.hidden);
        let b_out = take(1).start;
        Layout {
            w_in,
            b_in,
            slope,
            w1,
            u1,
            b1,
            w2,
            u2,
            b2,
            w_out,
            b_out,
            len: at,
        }
    }

    fn blocks(&self) -> [(&'static str, Range<usize>); 11] {
        [
            ("w_in", self.w_in.clone()),
            ("b_in", self.b_in.clone()),
            ("prelu_slope", self.slope.clone()),
            ("lstm1_w", self.w1.clone()),
            ("lstm1_u", self.u1.clone()),
            ("lstm1_b", self.b1.clone()),
            ("lstm2_w", self.w2.clone()),
            ("lstm2_u", self.u2.clone()),
            ("lstm2_b", self.b2.clone()),
            ("out_w", self.w_out.clone()),
            ("out_b", self.b_out..self.b_out + 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub dims: RnnDims,
    pub data: Vec<f64>,
    layout: Layout,
}

pub const INITIAL_PRELU_SLOPE: f64 = 0.25;

impl RnnParams {
    pub fn zeros(dims: RnnDims) -> RnnParams {
        let layout = Layout::new(dims);
        RnnParams {
            dims,
            data: vec![0.0; layout.len],
            layout,
        }
    }

    /// Weights uniform in `±scale`, zero biases except a forget-gate bias of
    /// one, PReLU slopes at 0.25.
    pub fn init(dims: RnnDims, scale: f64, seed: u64) -> RnnParams {
        let mut p = RnnParams::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = p.layout.clone();
        for r in [&l.w_in, &l.w1, &l.u1, &l.w2, &l.u2, &l.w_out] {
            for v in &mut p.data[r.clone()] {
                *v = rng.gen_range(-scale..=scale);
            }
        }
        p.data[l.slope.clone()].fill(INITIAL_PRELU_SLOPE);
        let h = dims.hidden;
        for b in [&l.b1, &l.b2] {
            p.data[b.start + h..b.start + 2 * h].fill(1.0);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn block(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    /// Named parameter blocks with their flat contents.
    pub fn named_blocks(&self) -> Vec<(&'static str, &[f64])> {
        self.layout
            .blocks()
            .into_iter()
            .map(|(name, r)| (name, &self.data[r]))
            .collect()
    }
}

/// `c = a·b + beta·c` on row-major matrices; `a` is `m×k` (or its
/// transpose when `ta`), `b` is `k×n` (or its transpose when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees that every index reachable
    // through these dimensions and strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(z: f64) -> f64 {
    crate::gbt::sigmoid(z)
}

/// Recurrent state for a number of parallel slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnState {
    pub slots: usize,
    pub hidden: usize,
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl RnnState {
    pub fn zeros(slots: usize, hidden: usize) -> RnnState {
        let n = slots * hidden;
        RnnState {
            slots,
            hidden,
            h1: vec![0.0; n],
            c1: vec![0.0; n],
            h2: vec![0.0; n],
            c2: vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        for v in [&mut self.h1, &mut self.c1, &mut self.h2, &mut self.c2] {
            v.fill(0.0);
        }
    }
}

/// Dense view of `steps × slots` samples. Row `t * slots + b` is slot `b`
/// at step `t`; padded positions have no values and zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub slots: usize,
    pub steps: usize,
    /// Sparse inputs over `dims.input` columns (the last is the time delta).
    pub x: Vec<Vec<(u16, f64)>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

impl SeqBatch {
    pub fn from_samples(slots: &[&[EncodedSample]], steps: usize, width: usize) -> SeqBatch {
        let b = slots.len();
        let mut out = SeqBatch {
            slots: b,
            steps,
            x: vec![Vec::new(); steps * b],
            y: vec![0.0; steps * b],
            w: vec![0.0; steps * b],
        };
        for (slot, samples) in slots.iter().enumerate() {
            for (t, s) in samples.iter().take(steps).enumerate() {
                let i = t * b + slot;
                let mut x = s.x.clone();
                if s.dt != 0.0 {
                    x.push((width as u16, s.dt));
                }
                out.x[i] = x;
                out.y[i] = if s.y == Some(true) { 1.0 } else { 0.0 };
                out.w[i] = if s.y.is_some() { s.w } else { 0.0 };
            }
        }
        out
    }

    pub fn from_batch(batch: &Batch<'_>, width: usize) -> SeqBatch {
        SeqBatch::from_samples(&batch.slots, batch.seq_len, width)
    }

    pub fn total_weight(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Activations of one time step, kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct StepCache {
    z: Vec<f64>,
    e: Vec<f64>,
    gates1: Vec<f64>,
    c1: Vec<f64>,
    tc1: Vec<f64>,
    h1: Vec<f64>,
    gates2: Vec<f64>,
    c2: Vec<f64>,
    tc2: Vec<f64>,
    h2: Vec<f64>,
}

/// Applies gate nonlinearities in place (order input, forget, candidate,
/// output) and advances the cell and hidden state.
fn lstm_cell(a: &mut [f64], c_prev: &[f64], slots: usize, h: usize, c: &mut [f64], tc: &mut [f64], out: &mut [f64]) {
    let g4 = 4 * h;
    for b in 0..slots {
        let row = &mut a[b * g4..(b + 1) * g4];
        for j in 0..h {
            let i = sigmoid(row[j]);
            let f = sigmoid(row[h + j]);
            let g = row[2 * h + j].tanh();
            let o = sigmoid(row[3 * h + j]);
            row[j] = i;
            row[h + j] = f;
            row[2 * h + j] = g;
            row[3 * h + j] = o;
            let k = b * h + j;
            c[k] = f * c_prev[k] + i * g;
            tc[k] = c[k].tanh();
            out[k] = o * tc[k];
        }
    }
}

impl RnnParams {
    fn step(&self, x: &[Vec<(u16, f64)>], state: &mut RnnState, cache: &mut StepCache) -> Vec<f64> {
        let RnnDims {
            embed: e,
            hidden: h,
            input,
        } = self.dims;
        let l = &self.layout;
        let b = state.slots;
        let g4 = 4 * h;
        let w_in = self.block(&l.w_in);
        let b_in = self.block(&l.b_in);
        let slope = self.block(&l.slope);

        cache.z.clear();
        cache.z.resize(b * e, 0.0);
        for (slot, row) in x.iter().enumerate() {
            let z = &mut cache.z[slot * e..(slot + 1) * e];
            z.copy_from_slice(b_in);
            for &(c, v) in row {
                let c = c as usize;
                debug_assert!(c < input);
                for (zj, wj) in z.iter_mut().zip(&w_in[c * e..(c + 1) * e]) {
                    *zj += v * wj;
                }
            }
        }
        cache.e.clear();
        cache.e.extend(
            cache
                .z
                .iter()
                .enumerate()
                .map(|(k, &z)| if z > 0.0 { z } else { slope[k % e] * z }),
        );

        let layer = |inp: &[f64],
                     in_dim: usize,
                     w: &Range<usize>,
                     u: &Range<usize>,
                     bias: &Range<usize>,
                     h_state: &mut Vec<f64>,
                     c_state: &mut Vec<f64>,
                     gates: &mut Vec<f64>,
                     c_out: &mut Vec<f64>,
                     tc: &mut Vec<f64>,
                     h_out: &mut Vec<f64>| {
            gates.clear();
            for _ in 0..b {
                gates.extend_from_slice(&self.data[bias.clone()]);
            }
            gemm(b, in_dim, g4, inp, false, &self.data[w.clone()], false, 1.0, gates);
            gemm(b, h, g4, h_state, false, &self.data[u.clone()], false, 1.0, gates);
            c_out.resize(b * h, 0.0);
            tc.resize(b * h, 0.0);
            h_out.resize(b * h, 0.0);
            lstm_cell(gates, c_state, b, h, c_out, tc, h_out);
            h_state.copy_from_slice(h_out);
            c_state.copy_from_slice(c_out);
        };
        let emb = std::mem::take(&mut cache.e);
        layer(
            &emb,
            e,
            &l.w1,
            &l.u1,
            &l.b1,
            &mut state.h1,
            &mut state.c1,
            &mut cache.gates1,
            &mut cache.c1,
            &mut cache.tc1,
            &mut cache.h1,
        );
        cache.e = emb;
        let h1 = std::mem::take(&mut cache.h1);
        layer(
            &h1,
            h,
            &l.w2,
            &l.u2,
            &l.b2,
            &mut state.h2,
            &mut state.c2,
            &mut cache.gates2,
            &mut cache.c2,
            &mut cache.tc2,
            &mut cache.h2,
        );
        cache.h1 = h1;

        let w_out = self.block(&l.w_out);
        let b_out = self.data[l.b_out];
        (0..b)
            .map(|slot| {
                b_out
                    + cache.h2[slot * h..(slot + 1) * h]
                        .iter()
                        .zip(w_out)
                        .map(|(a, w)| a * w)
                        .sum::<f64>()
            })
            .collect()
    }

    fn check_state(&self, state: &RnnState) -> Result<()> {
        if state.hidden != self.dims.hidden {
            return Err(Error::Shape {
                expected: self.dims.hidden,
                found: state.hidden,
            });
        }
        Ok(())
    }

    /// Output logits for every position, advancing `state`.
    pub fn forward_logits(&self, batch: &SeqBatch, state: &mut RnnState) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if state.slots != batch.slots {
            return Err(Error::Shape {
                expected: state.slots,
                found: batch.slots,
            });
        }
        let mut cache = StepCache::default();
        let mut out = Vec::with_capacity(batch.x.len());
        for t in 0..batch.steps {
            let rows = &batch.x[t * batch.slots..(t + 1) * batch.slots];
            out.extend(self.step(rows, state, &mut cache));
        }
        Ok(out)
    }

    /// Output probabilities for every position, advancing `state`.
    pub fn forward(&self, batch: &SeqBatch, state: &mut RnnState) -> Result<Vec<f64>> {
        Ok(self.forward_logits(batch, state)?.into_iter().map(sigmoid).collect())
    }

    /// One sample of one user: the probability and the advanced state.
    pub fn predict_stream(&self, state: &RnnState, sample: &EncodedSample) -> Result<(f64, RnnState)> {
        let width = self.dims.input - 1;
        if let Some(&(c, _)) = sample.x.iter().find(|(c, _)| *c as usize >= width) {
            return Err(Error::Shape {
                expected: width,
                found: c as usize + 1,
            });
        }
        let mut next = state.clone();
        if next.slots != 1 {
            return Err(Error::Shape {
                expected: 1,
                found: next.slots,
            });
        }
        let batch = SeqBatch::from_samples(&[std::slice::from_ref(sample)], 1, width);
        let p = self.forward(&batch, &mut next)?;
        Ok((p[0], next))
    }

    /// Weighted cross-entropy and its exact gradient, with back-propagation
    /// truncated at the start of the batch. Returns `None` for the gradient
    /// when the batch holds no weight.
    pub fn loss_and_gradient(&self, batch: &SeqBatch, state: &mut RnnState) -> Result<(f64, Option<Vec<f64>>)> {
        self.check_state(state)?;
        let RnnDims {
            embed: e, hidden: h, ..
        } = self.dims;
        let l = &self.layout;
        let b = batch.slots;
        let g4 = 4 * h;
        let initial = state.clone();
        let mut caches: Vec<StepCache> = Vec::with_capacity(batch.steps);
        let mut logits = Vec::with_capacity(batch.x.len());
        for t in 0..batch.steps {
            let mut cache = StepCache::default();
            logits.extend(self.step(&batch.x[t * b..(t + 1) * b], state, &mut cache));
            caches.push(cache);
        }
        let total_w = batch.total_weight();
        if total_w <= 0.0 {
            return Ok((0.0, None));
        }
        let mut loss = 0.0;
        let mut dlogit = vec![0.0; logits.len()];
        for (i, &z) in logits.iter().enumerate() {
            let w = batch.w[i];
            if w == 0.0 {
                continue;
            }
            let y = batch.y[i];
            loss += w * bce_with_logit(z, y);
            dlogit[i] = w * (sigmoid(z) - y) / total_w;
        }
        loss /= total_w;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("batch loss {loss}")));
        }

        let mut grad = vec![0.0; self.len()];
        let mut dh2_next = vec![0.0; b * h];
        let mut dc2_next = vec![0.0; b * h];
        let mut dh1_next = vec![0.0; b * h];
        let mut dc1_next = vec![0.0; b * h];
        let mut da = vec![0.0; b * g4];
        let mut dh = vec![0.0; b * h];
        let mut de = vec![0.0; b * e];
        let w_out = self.block(&l.w_out).to_vec();
        let slope = self.block(&l.slope).to_vec();
        let w_in_rows = l.w_in.start;

        for t in (0..batch.steps).rev() {
            let cache = &caches[t];
            let (h1_prev, c1_prev, h2_prev, c2_prev) = if t == 0 {
                (&initial.h1, &initial.c1, &initial.h2, &initial.c2)
            } else {
                let p = &caches[t - 1];
                (&p.h1, &p.c1, &p.h2, &p.c2)
            };
            // Output head.
            for slot in 0..b {
                let d = dlogit[t * b + slot];
                grad[l.b_out] += d;
                let h2 = &cache.h2[slot * h..(slot + 1) * h];
                for j in 0..h {
                    grad[l.w_out.start + j] += d * h2[j];
                    dh[slot * h + j] = d * w_out[j] + dh2_next[slot * h + j];
                }
            }
            // Second LSTM.
            lstm_backward(&cache.gates2, &cache.tc2, c2_prev, &dh, &mut dc2_next, &mut da, b, h);
            gemm(h, b, g4, &cache.h1, true, &da, false, 1.0, &mut grad[l.w2.clone()]);
            gemm(h, b, g4, h2_prev, true, &da, false, 1.0, &mut grad[l.u2.clone()]);
            add_column_sums(&da, b, g4, &mut grad[l.b2.clone()]);
            gemm(b, g4, h, &da, false, &self.data[l.u2.clone()], true, 0.0, &mut dh2_next);
            dh.copy_from_slice(&dh1_next);
            gemm(b, g4, h, &da, false, &self.data[l.w2.clone()], true, 1.0, &mut dh);
            // First LSTM.
            lstm_backward(&cache.gates1, &cache.tc1, c1_prev, &dh, &mut dc1_next, &mut da, b, h);
            gemm(e, b, g4, &cache.e, true, &da, false, 1.0, &mut grad[l.w1.clone()]);
            gemm(h, b, g4, h1_prev, true, &da, false, 1.0, &mut grad[l.u1.clone()]);
            add_column_sums(&da, b, g4, &mut grad[l.b1.clone()]);
            gemm(b, g4, h, &da, false, &self.data[l.u1.clone()], true, 0.0, &mut dh1_next);
            gemm(b, g4, e, &da, false, &self.data[l.w1.clone()], true, 0.0, &mut de);
            // PReLU embedding.
            for slot in 0..b {
                for j in 0..e {
                    let k = slot * e + j;
                    let z = cache.z[k];
                    let dz = if z > 0.0 {
                        de[k]
                    } else {
                        grad[l.slope.start + j] += de[k] * z;
                        de[k] * slope[j]
                    };
                    de[k] = dz;
                    grad[l.b_in.start + j] += dz;
                }
                for &(c, v) in &batch.x[t * b + slot] {
                    let row = w_in_rows + c as usize * e;
                    for j in 0..e {
                        grad[row + j] += v * de[slot * e + j];
                    }
                }
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient component {i}")));
        }
        Ok((loss, Some(grad)))
    }
}

/// Gate pre-activation gradients from the hidden-state gradient `dh` and the
/// cell gradient flowing back from the next step (`dc`, updated in place to
/// the gradient for the previous cell state).
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    gates: &[f64],
    tc: &[f64],
    c_prev: &[f64],
    dh: &[f64],
    dc: &mut [f64],
    da: &mut [f64],
    b: usize,
    h: usize,
) {
    let g4 = 4 * h;
    for slot in 0..b {
        for j in 0..h {
            let k = slot * h + j;
            let base = slot * g4;
            let (i, f, g, o) = (
                gates[base + j],
                gates[base + h + j],
                gates[base + 2 * h + j],
                gates[base + 3 * h + j],
            );
            let t = tc[k];
            let dcell = dh[k] * o * (1.0 - t * t) + dc[k];
            da[base + j] = dcell * g * i * (1.0 - i);
            da[base + h + j] = dcell * c_prev[k] * f * (1.0 - f);
            da[base + 2 * h + j] = dcell * i * (1.0 - g * g);
            da[base + 3 * h + j] = dh[k] * t * o * (1.0 - o);
            dc[k] = dcell * f;
        }
    }
}

fn add_column_sums(m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

/// Cross-entropy of a logit against a 0/1 target, computed without
/// overflow.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

pub const LOG_EPS: f64 = 1e-12;

/// Weighted mean cross-entropy of probabilities with clamped logarithms;
/// zero when no weight is present.
pub fn weighted_loss(probs: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for ((&p, &y), &w) in probs.iter().zip(labels).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
        let ce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        sum += w * if ce < 1e-11 { 0.0 } else { ce };
    }
    sum / total
}

/// Scales `grad` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, step_size: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            step_size,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.step_size * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnTrainConfig {
    pub embed: usize,
    pub hidden: usize,
    pub sequencing: SequencingConfig,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for RnnTrainConfig {
    fn default() -> Self {
        RnnTrainConfig {
            embed: 50,
            hidden: 500,
            sequencing: SequencingConfig::default(),
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 5,
            max_epochs: 50,
            clip_norm: 5.0,
            init_scale: 0.05,
            seed: 0,
        }
    }
}

impl RnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sequencing.validate()?;
        if self.patience == 0 || !(self.clip_norm > 0.0) || self.embed == 0 || self.hidden == 0 || self.max_epochs == 0
        {
            return Err(Error::Config(
                "RNN training needs patience >= 1, clip > 0, max_epochs >= 1 and non-empty layers".into(),
            ));
        }
        if !(self.step_size > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        Ok(())
    }
}

/// Patience-based early stopping on a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub epochs_seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.epochs_seen += 1;
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = self.epochs_seen;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_seen - self.best_epoch >= self.patience
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_metric: f64,
    pub seconds: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub diverged: bool,
}

/// Trains on per-user streams (weights already attached), monitoring
/// `validate` after every epoch and returning the best parameters seen.
pub fn train<S, F>(
    streams: &[S],
    width: usize,
    config: &RnnTrainConfig,
    mut validate: F,
) -> Result<(RnnParams, TrainHistory)>
where
    S: AsRef<[EncodedSample]>,
    F: FnMut(&RnnParams) -> Result<f64>,
{
    config.validate()?;
    let dims = RnnDims {
        input: width + 1,
        embed: config.embed,
        hidden: config.hidden,
    };
    let buckets = build_buckets(streams, &config.sequencing)?;
    let l = config.sequencing.seq_len;
    let batches: Vec<(bool, SeqBatch)> = iterate_for_training(streams, &buckets, l)
        .map(|b| (b.carry, SeqBatch::from_batch(&b, width)))
        .collect();
    let mut params = RnnParams::init(dims, config.init_scale, config.seed);
    let mut adam = Adam::new(params.len(), config.step_size, config.beta1, config.beta2, config.eps);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut history = TrainHistory::default();
    let slots = buckets.iter().map(|b| b.users.len()).max().unwrap_or(0);
    let mut state = RnnState::zeros(slots, dims.hidden);

    'epochs: for epoch in 1..=config.max_epochs {
        let started = std::time::Instant::now();
        let (mut loss_sum, mut loss_batches, mut updates) = (0.0, 0usize, 0usize);
        for (carry, batch) in &batches {
            if !carry || state.slots != batch.slots {
                state = RnnState::zeros(batch.slots, dims.hidden);
            }
            let result = params.loss_and_gradient(batch, &mut state);
            let (loss, grad) = match result {
                Ok(r) => r,
                Err(Error::Numeric(_)) => {
                    history.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Some(mut g) = grad {
                clip_global_norm(&mut g, config.clip_norm);
                adam.update(&mut params.data, &g);
                loss_sum += loss;
                loss_batches += 1;
                updates += 1;
            }
        }
        if params.data.iter().any(|v| !v.is_finite()) {
            history.diverged = true;
            break;
        }
        let metric = validate(&params)?;
        if stopper.observe(metric) {
            best = params.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: if loss_batches > 0 {
                loss_sum / loss_batches as f64
            } else {
                0.0
            },
            validation_metric: metric,
            seconds: started.elapsed().as_secs_f64(),
            updates,
        });
        if stopper.should_stop() {
            break;
        }
    }
    if history.epochs.is_empty() {
        return Err(Error::Numeric(
            "training diverged before the first epoch finished".into(),
        ));
    }
    history.best_epoch = stopper.best_epoch;
    Ok((best, history))
}

/// Runs every stream from a zero state (all streams side by side) and
/// returns the probability at every position.
pub fn predict_streams<S: AsRef<[EncodedSample]>>(params: &RnnParams, streams: &[S]) -> Result<Vec<Vec<f64>>> {
    let width = params.dims.input - 1;
    let slots: Vec<&[EncodedSample]> = streams.iter().map(|s| s.as_ref()).collect();
    let mut out: Vec<Vec<f64>> = slots.iter().map(|s| Vec::with_capacity(s.len())).collect();
    if slots.is_empty() {
        return Ok(out);
    }
    let longest = slots.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut state = RnnState::zeros(slots.len(), params.dims.hidden);
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < longest {
        let views: Vec<&[EncodedSample]> = slots
            .iter()
            .map(|s| &s[start.min(s.len())..(start + CHUNK).min(s.len())])
            .collect();
        let batch = SeqBatch::from_samples(&views, CHUNK.min(longest - start), width);
        let probs = params.forward(&batch, &mut state)?;
        for (slot, view) in views.iter().enumerate() {
            for t in 0..view.len() {
                out[slot].push(probs[t * slots.len() + slot]);
            }
        }
        start += CHUNK;
    }
    Ok(out)
}

/// A trained network together with the input scaling it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    pub params: RnnParams,
    pub normalization: NormalizationStats,
    pub seed: u64,
}

fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push('\t');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

impl RnnModel {
    pub fn to_text(&self) -> String {
        let d = self.params.dims;
        let mut out = String::new();
        let _ = writeln!(out, "{MODEL_HEADER}");
        let _ = writeln!(out, "schema\t{}", self.normalization.schema_hash);
        let _ = writeln!(out, "dims\t{}\t{}\t{}", d.input, d.embed, d.hidden);
        let _ = writeln!(out, "seed\t{}", self.seed);
        let n = &self.normalization;
        for (name, pick) in [("cap", 0usize), ("lo", 1), ("hi", 2)] {
            let _ = write!(out, "norm_{name}\t");
            let vals: Vec<f64> = n
                .columns
                .iter()
                .chain(std::iter::once(&n.dt))
                .map(|c| [c.cap, c.lo, c.hi][pick])
                .collect();
            push_floats(&mut out, &vals);
        }
        for (name, values) in self.params.named_blocks() {
            let _ = write!(out, "block\t{name}\t{}\t", values.len());
            push_floats(&mut out, values);
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<RnnModel> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, m: &str| Error::parse(path, line, m);
        let fields = |i: usize| -> Result<Vec<&str>> {
            Ok(lines
                .get(i)
                .ok_or_else(|| bad(i + 1, "unexpected end of model file"))?
                .split('\t')
                .collect())
        };
        let floats = |f: &[&str], line: usize| -> Result<Vec<f64>> {
            f.iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad(line, "bad number")))
                .collect()
        };
        if lines.first() != Some(&MODEL_HEADER) {
            return Err(bad(1, "missing model header"));
        }
        let schema = fields(1)?;
        let dims = fields(2)?;
        let seed = fields(3)?;
        if schema[0] != "schema" || dims.len() != 4 || seed[0] != "seed" {
            return Err(bad(2, "malformed model preamble"));
        }
        let num = |s: &str, line: usize| s.parse::<usize>().map_err(|_| bad(line, "bad integer"));
        let dims = RnnDims {
            input: num(dims[1], 3)?,
            embed: num(dims[2], 3)?,
            hidden: num(dims[3], 3)?,
        };
        let mut norm = Vec::new();
        for (k, name) in ["norm_cap", "norm_lo", "norm_hi"].iter().enumerate() {
            let f = fields(4 + k)?;
            if f[0] != *name {
                return Err(bad(5 + k, "expected normalization block"));
            }
            norm.push(floats(&f[1..], 5 + k)?);
        }
        if norm.iter().any(|v| v.len() != dims.input) {
            return Err(bad(5, "normalization width does not match network input"));
        }
        let mut stats: Vec<ColumnStats> = (0..dims.input)
            .map(|i| ColumnStats {
                cap: norm[0][i],
                lo: norm[1][i],
                hi: norm[2][i],
            })
            .collect();
        let dt = stats.pop().expect("input has the dt column");
        let mut params = RnnParams::zeros(dims);
        for (k, (name, range)) in params.layout.blocks().into_iter().enumerate() {
            let line = 7 + k;
            let f = fields(line)?;
            if f.len() < 3 || f[0] != "block" || f[1] != name || num(f[2], line + 1)? != range.len() {
                return Err(bad(
                    line + 1,
                    &format!("expected block {name} of {} values", range.len()),
                ));
            }
            let values = floats(&f[3..], line + 1)?;
            if values.len() != range.len() {
                return Err(bad(line + 1, "block length mismatch"));
            }
            params.data[range].copy_from_slice(&values);
        }
        Ok(RnnModel {
            params,
            normalization: NormalizationStats {
                schema_hash: schema.get(1).unwrap_or(&"").to_string(),
                columns: stats,
                dt,
            },
            seed: seed.get(1).and_then(|s| s.parse().ok()).unwrap_or(0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RnnModel> {
        RnnModel::from_text(&fs::read_to_string(path)?, path)
    }
}

/// Relative difference used by gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient and a five-point
/// central difference of the loss, over every parameter.
pub fn gradient_check(params: &RnnParams, batch: &SeqBatch, state: &RnnState, step: f64) -> Result<f64> {
    let (_, grad) = params.loss_and_gradient(batch, &mut state.clone())?;
    let Some(grad) = grad else {
        return Ok(0.0);
    };
    let mut probe = params.clone();
    let mut loss_at = |i: usize, x: f64| -> Result<f64> {
        probe.data[i] = x;
        Ok(probe.loss_and_gradient(batch, &mut state.clone())?.0)
    };
    let mut worst: f64 = 0.0;
    for (i, &g) in grad.iter().enumerate() {
        let x = params.data[i];
        let numeric = (8.0 * (loss_at(i, x + step)? - loss_at(i, x - step)?) - loss_at(i, x + 2.0 * step)?
            + loss_at(i, x - 2.0 * step)?)
            / (12.0 * step);
        loss_at(i, x)?;
        worst = worst.max(relative_error(g, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn random_batch(rng: &mut ChaCha8Rng, input: usize, slots: usize, steps: usize) -> SeqBatch {
        let n = slots * steps;
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::new();
            for c in 0..input as u16 {
                if rng.gen::<f64>() < 0.5 {
                    row.push((c, rng.gen_range(0.05..1.0)));
                }
            }
            x.push(row);
        }
        SeqBatch {
            slots,
            steps,
            x,
            y: (0..n).map(|_| f64::from(rng.gen::<bool>() as u8)).collect(),
            w: (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < 0.4 {
                        rng.gen_range(0.1..2.0)
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    fn tiny() -> RnnDims {
        RnnDims {
            input: 4,
            embed: 3,
            hidden: 5,
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, slots: usize, hidden: usize) -> RnnState {
        let mut s = RnnState::zeros(slots, hidden);
        for v in [&mut s.h1, &mut s.c1, &mut s.h2, &mut s.c2] {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        s
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let p = RnnParams::zeros(tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 4, 2, 3);
        let mut state = RnnState::zeros(2, 5);
        let probs = p.forward(&batch, &mut state).unwrap();
        assert!(probs.iter().all(|&x| x == 0.5));
        assert_eq!(state, RnnState::zeros(2, 5));
    }

    #[test]
    fn loss_examples() {
        assert!((weighted_loss(&[0.5, 0.5], &[1.0, 0.0], &[1.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(weighted_loss(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 3.0]), 0.0);
        assert_eq!(weighted_loss(&[0.3], &[1.0], &[0.0]), 0.0);
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(800.0, 0.0).is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let p = RnnParams::init(tiny(), 0.5, trial);
            let batch = random_batch(&mut rng, 4, 2, 4);
            let state = random_state(&mut rng, 2, 5);
            let err = gradient_check(&p, &batch, &state, 1e-4).unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn zero_weight_labels_are_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = RnnParams::init(tiny(), 0.3, 1);
        let batch = random_batch(&mut rng, 4, 3, 5);
        let mut flipped = batch.clone();
        for i in 0..flipped.y.len() {
            if flipped.w[i] == 0.0 {
                flipped.y[i] = 1.0 - flipped.y[i];
            }
        }
        let (la, ga) = p.loss_and_gradient(&batch, &mut RnnState::zeros(3, 5)).unwrap();
        let (lb, gb) = p.loss_and_gradient(&flipped, &mut RnnState::zeros(3, 5)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);

        let mut empty = batch.clone();
        empty.w.fill(0.0);
        let (l, g) = p.loss_and_gradient(&empty, &mut RnnState::zeros(3, 5)).unwrap();
        assert_eq!((l, g), (0.0, None));
    }

    #[test]
    fn streaming_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RnnParams::init(tiny(), 0.4, 2);
        let samples: Vec<EncodedSample> = (0..12)
            .map(|i| EncodedSample {
                x: vec![(0, rng.gen_range(0.05..1.0)), (2, 1.0)],
                dt: (i % 3) as f64 * 0.4,
                ..EncodedSample::padding()
            })
            .collect();
        let batch = SeqBatch::from_samples(&[&samples], samples.len(), 3);
        let all = p.forward(&batch, &mut RnnState::zeros(1, 5)).unwrap();
        let mut state = RnnState::zeros(1, 5);
        for (t, s) in samples.iter().enumerate() {
            let (prob, next) = p.predict_stream(&state, s).unwrap();
            assert!((prob - all[t]).abs() < 1e-12);
            assert!(prob > 0.0 && prob < 1.0);
            state = next;
        }
        let again = predict_streams(&p, &[&samples[..]]).unwrap();
        assert!(again[0].iter().zip(&all).all(|(a, b)| (a - b).abs() < 1e-12));
        let bad = EncodedSample {
            x: vec![(3, 1.0)],
            ..EncodedSample::padding()
        };
        assert!(p.predict_stream(&RnnState::zeros(1, 5), &bad).is_err());
    }

    #[test]
    fn patience_example() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for (i, m) in [0.6, 0.61, 0.60, 0.60, 0.60, 0.60, 0.60].into_iter().enumerate() {
            s.observe(m);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn model_file_round_trip() {
        let p = RnnParams::init(tiny(), 0.1, 4);
        let model = RnnModel {
            params: p,
            normalization: NormalizationStats {
                schema_hash: "abc".into(),
                columns: vec![
                    ColumnStats {
                        cap: 2.0,
                        lo: 0.5,
                        hi: 2.0
                    };
                    3
                ],
                dt: ColumnStats {
                    cap: 60.0,
                    lo: 0.1,
                    hi: 60.0,
                },
            },
            seed: 4,
        };
        let text = model.to_text();
        assert_eq!(RnnModel::from_text(&text, Path::new("m")).unwrap(), model);
    }

    #[test]
    fn training_learns_a_simple_rule() {
        // Label follows the column-0 value of the same step.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let streams: Vec<Vec<EncodedSample>> = (0..4)
            .map(|_| {
                (0..120)
                    .map(|i| {
                        let on = rng.gen::<bool>();
                        EncodedSample {
                            x: vec![(if on { 0 } else { 1 }, 1.0)],
                            y: Some(on),
                            w: 1.0,
                            dt: 1.0,
                            time: i,
                            first_time: i,
                            category: None,
                        }
                    })
                    .collect()
            })
            .collect();
        let cfg = RnnTrainConfig {
            embed: 4,
            hidden: 6,
            sequencing: SequencingConfig {
                seq_len: 10,
                batch_lo: 2,
                batch_hi: 4,
            },
            step_size: 0.02,
            max_epochs: 15,
            patience: 15,
            ..Default::default()
        };
        let eval = streams.clone();
        let (params, history) = train(&streams, 2, &cfg, |p| {
            let probs = predict_streams(p, &eval)?;
            let mut loss = 0.0;
            for (s, pr) in eval.iter().zip(&probs) {
                let y: Vec<f64> = s.iter().map(|x| f64::from(x.y == Some(true))).collect();
                loss += weighted_loss(pr, &y, &vec![1.0; y.len()]);
            }
            Ok(-loss)
        })
        .unwrap();
        assert!(history.epochs.last().unwrap().validation_metric > -4.0 * 0.3);
        assert_eq!(params.dims.input, 3);
    }
}

//! The reference toy learner.
//!
//! Question words are hashed into 256 count features and projected to a
//! small dense code `c = E x_w`. Digit features are pair crosses of the
//! first two operands (units with units, tens with tens) plus a bias. The
//! hidden layer `h = relu(W1 [c; x_d] + b1)` feeds one softmax head per
//! answer position, conditioned on the previous token:
//! `logits_p = W2_p [h; onehot(prev)] + b2_p`.
//!
//! Answers are emitted least significant digit first and end with END.
//! Low-rank adapters act on the word projection (`proj`) and on the heads
//! (`head`); the hidden layer stays frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use super::adapter::{LayerAdapter, LowRankAdapter};
use super::{Evaluation, FineTuneOutcome, Generation, Learner};
use crate::error::{Result, SageError};
use crate::lora_store::AdapterConfig;
use crate::sample::Sample;
use crate::text::normalize_answer;

pub const VOCAB: usize = 12;
pub const MINUS: usize = 10;
/// Previous-token input at the first position.
pub const BOS: usize = MINUS;
pub const END: usize = 11;
pub const WORD_FEATURES: usize = 256;
pub const DIGIT_FEATURES: usize = 256;
pub const D_IN: usize = WORD_FEATURES + DIGIT_FEATURES;
/// Index of the bias feature within the digit block.
pub const BIAS_FEATURE: usize = DIGIT_FEATURES - 1;

pub const PROJ_LAYER: &str = "proj";
pub const HEAD_LAYER: &str = "head";
/// Global gradient-norm ceiling for adapter updates.
pub const ADAPTER_GRAD_CLIP: f64 = 5.0;

/// Non-zero entries of the 512-dim input.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    /// (word bucket, count), sorted by bucket.
    pub words: Vec<(usize, f64)>,
    /// Active digit-block indices, all with value 1.
    pub digits: Vec<usize>,
}

impl SparseFeatures {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut x = vec![0.0; D_IN];
        for &(w, v) in &self.words {
            x[w] += v;
        }
        for &d in &self.digits {
            x[WORD_FEATURES + d] = 1.0;
        }
        x
    }
}

fn word_and_number_tokens(question: &str) -> Vec<String> {
    let lower = question.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_digit = false;
    for ch in lower.chars() {
        let is_alpha = ch.is_ascii_lowercase();
        let is_digit = ch.is_ascii_digit();
        if (is_alpha || is_digit) && (cur.is_empty() || cur_digit == is_digit) {
            cur.push(ch);
            cur_digit = is_digit;
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if is_alpha || is_digit {
                cur.push(ch);
                cur_digit = is_digit;
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn word_bucket(word: &str) -> usize {
    (crc32fast::hash(word.as_bytes()) % WORD_FEATURES as u32) as usize
}

pub fn featurize(question: &str) -> SparseFeatures {
    let tokens = word_and_number_tokens(question);
    let mut counts = std::collections::BTreeMap::new();
    let mut numbers = Vec::new();
    for t in &tokens {
        if t.as_bytes()[0].is_ascii_digit() {
            // very long digit runs saturate; only the last two digits matter
            let tail = &t[t.len().saturating_sub(2)..];
            numbers.push(tail.parse::<usize>().unwrap_or(0));
        } else {
            *counts.entry(word_bucket(t)).or_insert(0.0) += 1.0;
        }
    }
    let mut digits = Vec::new();
    if numbers.len() >= 2 {
        let (a, b) = (numbers[0], numbers[1]);
        digits.push((a % 10) * 10 + b % 10);
        digits.push(100 + (a / 10 % 10) * 10 + b / 10 % 10);
    }
    digits.push(BIAS_FEATURE);
    SparseFeatures {
        words: counts.into_iter().collect(),
        digits,
    }
}

/// Answer text to target tokens (reversed, END appended). `None` when the
/// text holds anything but digits and minus signs.
pub fn encode_answer(text: &str) -> Option<Vec<usize>> {
    let t = normalize_answer(text);
    if t.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(t.len() + 1);
    for ch in t.chars().rev() {
        match ch {
            '0'..='9' => out.push(ch as usize - '0' as usize),
            '-' => out.push(MINUS),
            _ => return None,
        }
    }
    out.push(END);
    Some(out)
}

pub fn decode_tokens(tokens: &[usize]) -> String {
    tokens
        .iter()
        .rev()
        .map(|&t| match t {
            0..=9 => char::from(b'0' + t as u8),
            MINUS => '-',
            _ => '?',
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Canonical tasks per operation.
    pub per_kind: usize,
    pub epochs: usize,
    /// Samples per Adam step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub code_dim: usize,
    pub hidden: usize,
    pub positions: usize,
    /// Standard deviation of the word projection at initialization.
    pub word_init_std: f64,
    pub init_std: f64,
    pub holdout_per_kind: usize,
    pub target_id_em: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            per_kind: 4000,
            epochs: 6,
            batch_size: 16,
            learning_rate: 3e-3,
            code_dim: 16,
            hidden: 768,
            positions: 4,
            word_init_std: 2.0,
            init_std: 0.01,
            holdout_per_kind: 300,
            target_id_em: 0.95,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_kind == 0 || self.epochs == 0 || self.batch_size == 0 || self.holdout_per_kind == 0 {
            return Err(SageError::Config("pretraining sizes must be positive".into()));
        }
        if self.code_dim == 0 || self.hidden == 0 {
            return Err(SageError::Config("model dimensions must be positive".into()));
        }
        if !(2..=8).contains(&self.positions) {
            return Err(SageError::Config("answer positions must be within 2..=8".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SageError::Config("pretraining learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub code_dim: usize,
    pub hidden: usize,
    pub positions: usize,
    /// `code_dim x 256`
    e: Vec<f64>,
    /// `hidden x (code_dim + 256)`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `(positions * VOCAB) x (hidden + VOCAB)`
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Adapter factors in working precision.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub rank: usize,
    pub scale: f64,
    /// `rank x 256`
    pub pa: Vec<f64>,
    /// `code_dim x rank`
    pub pb: Vec<f64>,
    /// `rank x (hidden + VOCAB)`
    pub ha: Vec<f64>,
    /// `(positions * VOCAB) x rank`
    pub hb: Vec<f64>,
}

/// Gradients of the mean token loss with respect to the adapter factors.
#[derive(Debug, Clone)]
pub struct AdapterGrad {
    pub pa: Vec<f64>,
    pub pb: Vec<f64>,
    pub ha: Vec<f64>,
    pub hb: Vec<f64>,
}

struct Hidden {
    c: Vec<f64>,
    /// `A_proj` times the (dropped-out) word features.
    v: Vec<f64>,
    /// Word features after dropout.
    xw: Vec<(usize, f64)>,
    pre: Vec<f64>,
    h: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn dropout_scale(rng: Option<&mut ChaCha8Rng>, p: f64) -> f64 {
    match rng {
        Some(r) if p > 0.0 => {
            if r.random::<f64>() < p {
                0.0
            } else {
                1.0 / (1.0 - p)
            }
        }
        _ => 1.0,
    }
}

impl ToyModel {
    fn zi(&self) -> usize {
        self.hidden + VOCAB
    }

    fn w1_cols(&self) -> usize {
        self.code_dim + DIGIT_FEATURES
    }

    pub fn init(config: &PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = Normal::new(0.0, config.word_init_std).map_err(|e| SageError::Config(e.to_string()))?;
        let small = Normal::new(0.0, config.init_std).map_err(|e| SageError::Config(e.to_string()))?;
        let (k, h, p) = (config.code_dim, config.hidden, config.positions);
        let mut draw = |n: usize, d: &Normal<f64>| -> Vec<f64> { (0..n).map(|_| d.sample(&mut rng)).collect() };
        Ok(ToyModel {
            code_dim: k,
            hidden: h,
            positions: p,
            e: draw(k * WORD_FEATURES, &words),
            w1: draw(h * (k + DIGIT_FEATURES), &small),
            b1: vec![0.0; h],
            w2: draw(p * VOCAB * (h + VOCAB), &small),
            b2: vec![0.0; p * VOCAB],
        })
    }

    fn hidden_state(&self, f: &SparseFeatures, ad: Option<&AdapterParams>, p_drop: f64, mut rng: Option<&mut ChaCha8Rng>) -> Hidden {
        let k = self.code_dim;
        let mut c = vec![0.0; k];
        for &(w, val) in &f.words {
            for (i, ci) in c.iter_mut().enumerate() {
                *ci += self.e[i * WORD_FEATURES + w] * val;
            }
        }
        let mut v = Vec::new();
        let mut xw = Vec::new();
        if let Some(a) = ad {
            xw = f
                .words
                .iter()
                .map(|&(w, val)| (w, val * dropout_scale(rng.as_deref_mut(), p_drop)))
                .collect();
            v = vec![0.0; a.rank];
            for &(w, val) in &xw {
                for (j, vj) in v.iter_mut().enumerate() {
                    *vj += a.pa[j * WORD_FEATURES + w] * val;
                }
            }
            for (i, ci) in c.iter_mut().enumerate() {
                let row = &a.pb[i * a.rank..(i + 1) * a.rank];
                *ci += a.scale * row.iter().zip(&v).map(|(b, x)| b * x).sum::<f64>();
            }
        }
        let cols = self.w1_cols();
        let mut pre = self.b1.clone();
        for (u, pu) in pre.iter_mut().enumerate() {
            let row = &self.w1[u * cols..(u + 1) * cols];
            let mut s = row[..k].iter().zip(&c).map(|(w, x)| w * x).sum::<f64>();
            for &d in &f.digits {
                s += row[k + d];
            }
            *pu += s;
        }
        let h = pre.iter().map(|&x| x.max(0.0)).collect();
        Hidden { c, v, xw, pre, h }
    }

    /// Logits at `pos` given the hidden state and previous token. With an
    /// adapter, also returns the dropped-out head input mask and `A_head z~`.
    fn head_logits(
        &self,
        hs: &Hidden,
        prev: usize,
        pos: usize,
        ad: Option<&AdapterParams>,
        p_drop: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let zi = self.zi();
        let mut logits = vec![0.0; VOCAB];
        for (t, lt) in logits.iter_mut().enumerate() {
            let r = pos * VOCAB + t;
            let row = &self.w2[r * zi..(r + 1) * zi];
            *lt = self.b2[r] + row[..self.hidden].iter().zip(&hs.h).map(|(w, x)| w * x).sum::<f64>() + row[self.hidden + prev];
        }
        let mut mask = Vec::new();
        let mut u = Vec::new();
        if let Some(a) = ad {
            mask = (0..zi).map(|_| dropout_scale(rng.as_deref_mut(), p_drop)).collect();
            u = vec![0.0; a.rank];
            for (j, uj) in u.iter_mut().enumerate() {
                let arow = &a.ha[j * zi..(j + 1) * zi];
                let mut s = 0.0;
                for i in 0..self.hidden {
                    s += arow[i] * hs.h[i] * mask[i];
                }
                s += arow[self.hidden + prev] * mask[self.hidden + prev];
                *uj = s;
            }
            for (t, lt) in logits.iter_mut().enumerate() {
                let r = pos * VOCAB + t;
                let brow = &a.hb[r * a.rank..(r + 1) * a.rank];
                *lt += a.scale * brow.iter().zip(&u).map(|(b, x)| b * x).sum::<f64>();
            }
        }
        (logits, mask, u)
    }

    pub fn params(&self, adapter: &LowRankAdapter) -> Result<AdapterParams> {
        let proj = adapter.layer(PROJ_LAYER)?;
        let head = adapter.layer(HEAD_LAYER)?;
        let r = proj.rank;
        let expect = |l: &LayerAdapter, d_out: usize, d_in: usize| -> Result<()> {
            if l.rank != r || l.d_out != d_out || l.d_in != d_in {
                return Err(SageError::InvalidInput(format!(
                    "adapter layer {} has shape r={} {}x{}, model expects r={r} {d_out}x{d_in}",
                    l.name, l.rank, l.d_out, l.d_in
                )));
            }
            Ok(())
        };
        expect(proj, self.code_dim, WORD_FEATURES)?;
        expect(head, self.positions * VOCAB, self.zi())?;
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        Ok(AdapterParams {
            rank: r,
            scale: adapter.scaling,
            pa: widen(&proj.a),
            pb: widen(&proj.b),
            ha: widen(&head.a),
            hb: widen(&head.b),
        })
    }

    fn to_adapter(&self, f: &AdapterParams, dropout: f64) -> LowRankAdapter {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        LowRankAdapter {
            scaling: f.scale,
            dropout,
            layers: vec![
                LayerAdapter {
                    name: PROJ_LAYER.into(),
                    rank: f.rank,
                    d_in: WORD_FEATURES,
                    d_out: self.code_dim,
                    a: narrow(&f.pa),
                    b: narrow(&f.pb),
                },
                LayerAdapter {
                    name: HEAD_LAYER.into(),
                    rank: f.rank,
                    d_in: self.zi(),
                    d_out: self.positions * VOCAB,
                    a: narrow(&f.ha),
                    b: narrow(&f.hb),
                },
            ],
        }
    }

    /// Zero-effect adapter: `A` drawn from N(0, 1/d_in), `B = 0`, scaling 2.
    pub fn init_adapter(&self, rank: usize, dropout: f64, seed: u64) -> Result<LowRankAdapter> {
        if rank == 0 {
            return Err(SageError::Config("adapter rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, d_in: usize| -> Vec<f64> {
            let d = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let f = AdapterParams {
            rank,
            scale: 2.0,
            pa: gauss(rank * WORD_FEATURES, WORD_FEATURES),
            pb: vec![0.0; self.code_dim * rank],
            ha: gauss(rank * self.zi(), self.zi()),
            hb: vec![0.0; self.positions * VOCAB * rank],
        };
        Ok(self.to_adapter(&f, dropout))
    }

    fn decode(&self, f: &SparseFeatures, ad: Option<&AdapterParams>) -> Generation {
        let hs = self.hidden_state(f, ad, 0.0, None);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut step_logits = Vec::new();
        for pos in 0..self.positions {
            let (logits, _, _) = self.head_logits(&hs, prev, pos, ad, 0.0, None);
            let t = argmax(&logits);
            step_logits.push(logits);
            if t == END {
                break;
            }
            tokens.push(t);
            prev = t;
        }
        Generation {
            text: decode_tokens(&tokens),
            step_logits,
        }
    }

    /// Target tokens truncated to the number of answer positions.
    fn targets(&self, answer: &str) -> Option<Vec<usize>> {
        encode_answer(answer).map(|mut t| {
            t.truncate(self.positions);
            t
        })
    }

    /// Summed token cross-entropy and token count under teacher forcing.
    fn sample_loss(&self, f: &SparseFeatures, targets: &[usize], ad: Option<&AdapterParams>) -> (f64, usize) {
        let hs = self.hidden_state(f, ad, 0.0, None);
        let mut prev = BOS;
        let mut loss = 0.0;
        for (pos, &y) in targets.iter().enumerate() {
            let (logits, _, _) = self.head_logits(&hs, prev, pos, ad, 0.0, None);
            loss -= softmax(&logits)[y].max(f64::MIN_POSITIVE).ln();
            prev = y;
        }
        (loss, targets.len())
    }

    fn mean_loss(&self, data: &[(SparseFeatures, Vec<usize>)], ad: Option<&AdapterParams>) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for (f, t) in data {
            let (l, c) = self.sample_loss(f, t, ad);
            total += l;
            n += c;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    /// Mean token loss of a batch and its gradient with respect to the
    /// adapter factors. Dropout is applied when `rng` is given.
    fn adapter_grad(
        &self,
        ad: &AdapterParams,
        batch: &[(&SparseFeatures, &[usize])],
        p_drop: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (f64, AdapterGrad) {
        let (k, r, zi, hid) = (self.code_dim, ad.rank, self.zi(), self.hidden);
        let mut g = AdapterGrad {
            pa: vec![0.0; ad.pa.len()],
            pb: vec![0.0; ad.pb.len()],
            ha: vec![0.0; ad.ha.len()],
            hb: vec![0.0; ad.hb.len()],
        };
        let n_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
        if n_tokens == 0 {
            return (0.0, g);
        }
        let norm = 1.0 / n_tokens as f64;
        let mut loss = 0.0;
        for (f, targets) in batch {
            let hs = self.hidden_state(f, Some(ad), p_drop, rng.as_deref_mut());
            let mut dh = vec![0.0; hid];
            let mut prev = BOS;
            for (pos, &y) in targets.iter().enumerate() {
                let (logits, mask, u) = self.head_logits(&hs, prev, pos, Some(ad), p_drop, rng.as_deref_mut());
                let mut p = softmax(&logits);
                loss -= p[y].max(f64::MIN_POSITIVE).ln();
                p[y] -= 1.0;
                let dlog: Vec<f64> = p.iter().map(|v| v * norm).collect();
                let mut du = vec![0.0; r];
                for (t, &gt) in dlog.iter().enumerate() {
                    let row = pos * VOCAB + t;
                    let w = &self.w2[row * zi..row * zi + hid];
                    for (d, wv) in dh.iter_mut().zip(w) {
                        *d += gt * wv;
                    }
                    for j in 0..r {
                        g.hb[row * r + j] += ad.scale * gt * u[j];
                        du[j] += ad.scale * gt * ad.hb[row * r + j];
                    }
                }
                for (j, &duj) in du.iter().enumerate() {
                    let arow = &ad.ha[j * zi..(j + 1) * zi];
                    let grow = &mut g.ha[j * zi..(j + 1) * zi];
                    for i in 0..hid {
                        let zt = hs.h[i] * mask[i];
                        grow[i] += duj * zt;
                        dh[i] += duj * arow[i] * mask[i];
                    }
                    grow[hid + prev] += duj * mask[hid + prev];
                }
                prev = y;
            }
            let cols = self.w1_cols();
            let mut dc = vec![0.0; k];
            for (u, &dhu) in dh.iter().enumerate() {
                if hs.pre[u] <= 0.0 || dhu == 0.0 {
                    continue;
                }
                let row = &self.w1[u * cols..u * cols + k];
                for (d, w) in dc.iter_mut().zip(row) {
                    *d += dhu * w;
                }
            }
            let mut dv = vec![0.0; r];
            for i in 0..k {
                for j in 0..r {
                    g.pb[i * r + j] += ad.scale * dc[i] * hs.v[j];
                    dv[j] += ad.scale * dc[i] * ad.pb[i * r + j];
                }
            }
            for &(w, val) in &hs.xw {
                for (j, &dvj) in dv.iter().enumerate() {
                    g.pa[j * WORD_FEATURES + w] += dvj * val;
                }
            }
        }
        (loss * norm, g)
    }

    /// Mean token loss of `samples` and its exact gradient with respect to
    /// the adapter factors, without dropout.
    pub fn adapter_loss_grad(&self, params: &AdapterParams, samples: &[Sample]) -> Result<(f64, AdapterGrad)> {
        let data = samples
            .iter()
            .map(|s| {
                self.targets(&s.real_answer)
                    .map(|t| (featurize(&s.question), t))
                    .ok_or_else(|| SageError::InvalidInput(format!("answer {:?} has no token encoding", s.real_answer)))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<(&SparseFeatures, &[usize])> = data.iter().map(|(f, t)| (f, t.as_slice())).collect();
        Ok(self.adapter_grad(params, &batch, 0.0, None))
    }

    /// Rounds working-precision factors into a storable adapter.
    pub fn adapter_from_params(&self, params: &AdapterParams, dropout: f64) -> LowRankAdapter {
        self.to_adapter(params, dropout)
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [&self.e, &self.w1, &self.b1, &self.w2, &self.b2] {
            for v in part.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("model serializes");
        std::fs::write(path, text).map_err(|e| SageError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SageError::io(path, e))?;
        let m: ToyModel = serde_json::from_str(&text).map_err(|e| SageError::load(path, "model", e))?;
        let (k, h, p) = (m.code_dim, m.hidden, m.positions);
        let ok = m.e.len() == k * WORD_FEATURES
            && m.w1.len() == h * (k + DIGIT_FEATURES)
            && m.b1.len() == h
            && m.w2.len() == p * VOCAB * (h + VOCAB)
            && m.b2.len() == p * VOCAB;
        if !ok {
            return Err(SageError::load(path, "weights", "matrix sizes do not match the stored dimensions"));
        }
        Ok(m)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

fn adam_step(params: &mut [f64], grad: &[f64], state: &mut Adam, lr: f64, t: i32) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        params[i] -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
    }
}

struct BaseGrad {
    e: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ToyModel {
    fn base_grad(&self, batch: &[&(SparseFeatures, Vec<usize>)], g: &mut BaseGrad) -> f64 {
        for part in [&mut g.e, &mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2] {
            part.iter_mut().for_each(|x| *x = 0.0);
        }
        let (k, hid, zi, cols) = (self.code_dim, self.hidden, self.zi(), self.w1_cols());
        let n_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
        let norm = 1.0 / n_tokens.max(1) as f64;
        let mut loss = 0.0;
        for (f, targets) in batch {
            let hs = self.hidden_state(f, None, 0.0, None);
            let mut dh = vec![0.0; hid];
            let mut prev = BOS;
            for (pos, &y) in targets.iter().enumerate() {
                let (logits, _, _) = self.head_logits(&hs, prev, pos, None, 0.0, None);
                let mut p = softmax(&logits);
                loss -= p[y].max(f64::MIN_POSITIVE).ln();
                p[y] -= 1.0;
                for (t, pt) in p.iter().enumerate() {
                    let gt = pt * norm;
                    let row = pos * VOCAB + t;
                    g.b2[row] += gt;
                    let w = &self.w2[row * zi..row * zi + hid];
                    let gw = &mut g.w2[row * zi..(row + 1) * zi];
                    for i in 0..hid {
                        gw[i] += gt * hs.h[i];
                        dh[i] += gt * w[i];
                    }
                    gw[hid + prev] += gt;
                }
                prev = y;
            }
            let mut dc = vec![0.0; k];
            for u in 0..hid {
                if hs.pre[u] <= 0.0 {
                    continue;
                }
                let d = dh[u];
                g.b1[u] += d;
                let row = &self.w1[u * cols..u * cols + k];
                let grow = &mut g.w1[u * cols..(u + 1) * cols];
                for i in 0..k {
                    grow[i] += d * hs.c[i];
                    dc[i] += d * row[i];
                }
                for &dg in &f.digits {
                    grow[k + dg] += d;
                }
            }
            for &(w, val) in &f.words {
                for (i, &dci) in dc.iter().enumerate() {
                    g.e[i * WORD_FEATURES + w] += dci * val;
                }
            }
        }
        loss * norm
    }
}

/// Trains a base model on canonical tasks with Adam, then checks held-out
/// in-distribution exact match against `config.target_id_em`.
pub fn pretrain_base(id_tasks: &[Sample], holdout: &[Sample], config: &PretrainConfig, seed: u64) -> Result<ToyModel> {
    config.validate()?;
    if id_tasks.is_empty() || holdout.is_empty() {
        return Err(SageError::InvalidInput("pretraining needs training and held-out tasks".into()));
    }
    let mut model = ToyModel::init(config, seed)?;
    let data: Vec<(SparseFeatures, Vec<usize>)> = id_tasks
        .iter()
        .map(|s| {
            model
                .targets(&s.real_answer)
                .map(|t| (featurize(&s.question), t))
                .ok_or_else(|| SageError::InvalidInput(format!("answer {:?} is not an integer", s.real_answer)))
        })
        .collect::<Result<_>>()?;
    let mut grad = BaseGrad {
        e: vec![0.0; model.e.len()],
        w1: vec![0.0; model.w1.len()],
        b1: vec![0.0; model.b1.len()],
        w2: vec![0.0; model.w2.len()],
        b2: vec![0.0; model.b2.len()],
    };
    let mut opt: Vec<Adam> = [model.e.len(), model.w1.len(), model.b1.len(), model.w2.len(), model.b2.len()]
        .into_iter()
        .map(Adam::new)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&(SparseFeatures, Vec<usize>)> = chunk.iter().map(|&i| &data[i]).collect();
            last = model.base_grad(&batch, &mut grad);
            if !last.is_finite() {
                return Err(SageError::Numeric("non-finite pretraining loss".into()));
            }
            let t = opt[0].t + 1;
            for o in opt.iter_mut() {
                o.t = t;
            }
            let lr = config.learning_rate;
            adam_step(&mut model.e, &grad.e, &mut opt[0], lr, t);
            adam_step(&mut model.w1, &grad.w1, &mut opt[1], lr, t);
            adam_step(&mut model.b1, &grad.b1, &mut opt[2], lr, t);
            adam_step(&mut model.w2, &grad.w2, &mut opt[3], lr, t);
            adam_step(&mut model.b2, &grad.b2, &mut opt[4], lr, t);
        }
    }
    let em = model.evaluate(None, holdout).accuracy;
    log::info!("pretraining finished: last batch loss {last:.4}, held-out ID EM {em:.4}");
    if em < config.target_id_em {
        return Err(SageError::Pretraining(format!(
            "held-out EM {em:.4} below {:.2}; raise epochs or change the seed",
            config.target_id_em
        )));
    }
    Ok(model)
}

impl Learner for ToyModel {
    fn vocab_size(&self) -> usize {
        VOCAB
    }

    fn generate(&self, adapter: Option<&LowRankAdapter>, question: &str) -> Result<Generation> {
        if question.trim().is_empty() {
            return Err(SageError::InvalidInput("question is empty".into()));
        }
        let f = adapter.map(|a| self.params(a)).transpose()?;
        Ok(self.decode(&featurize(question), f.as_ref()))
    }

    fn fine_tune(&self, samples: &[Sample], config: &AdapterConfig) -> Result<FineTuneOutcome> {
        config.validate()?;
        if samples.len() < 2 {
            return Err(SageError::InvalidInput("fine-tuning needs at least 2 samples".into()));
        }
        let data: Vec<(SparseFeatures, Vec<usize>)> = samples
            .iter()
            .map(|s| {
                self.targets(&s.real_answer)
                    .map(|t| (featurize(&s.question), t))
                    .ok_or_else(|| SageError::InvalidInput(format!("answer {:?} has no token encoding", s.real_answer)))
            })
            .collect::<Result<_>>()?;
        let init = self.init_adapter(config.rank, config.dropout, config.seed)?;
        let mut f = self.params(&init)?;
        let initial_loss = self.mean_loss(&data, Some(&f));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<(&SparseFeatures, &[usize])> =
                    chunk.iter().map(|&i| (&data[i].0, data[i].1.as_slice())).collect();
                let (loss, g) = self.adapter_grad(&f, &batch, config.dropout, Some(&mut rng));
                if !loss.is_finite() || g.hb.iter().chain(&g.ha).chain(&g.pa).chain(&g.pb).any(|v| !v.is_finite()) {
                    return Err(SageError::Numeric("non-finite loss during fine-tuning".into()));
                }
                let norm = g.pa.iter().chain(&g.pb).chain(&g.ha).chain(&g.hb).map(|v| v * v).sum::<f64>().sqrt();
                let lr = config.learning_rate * (ADAPTER_GRAD_CLIP / norm).min(1.0);
                for (p, d) in [(&mut f.pa, &g.pa), (&mut f.pb, &g.pb), (&mut f.ha, &g.ha), (&mut f.hb, &g.hb)] {
                    p.iter_mut().zip(d).for_each(|(x, gx)| *x -= lr * gx);
                }
            }
            let l = self.mean_loss(&data, Some(&f));
            if !l.is_finite() {
                return Err(SageError::Numeric("non-finite loss during fine-tuning".into()));
            }
            epoch_losses.push(l);
        }
        let adapter = self.to_adapter(&f, config.dropout);
        // score what will actually be stored
        let stored = self.params(&adapter)?;
        let final_train_loss = self.mean_loss(&data, Some(&stored));
        Ok(FineTuneOutcome {
            adapter,
            initial_loss,
            final_train_loss,
            epoch_losses,
        })
    }

    fn evaluate(&self, adapter: Option<&LowRankAdapter>, samples: &[Sample]) -> Evaluation {
        let f = match adapter.map(|a| self.params(a)).transpose() {
            Ok(f) => f,
            Err(e) => {
                log::warn!("adapter does not fit the model: {e}");
                return Evaluation {
                    accuracy: 0.0,
                    ce_loss: f64::INFINITY,
                };
            }
        };
        if samples.is_empty() {
            return Evaluation {
                accuracy: 0.0,
                ce_loss: 0.0,
            };
        }
        let mut correct = 0usize;
        let (mut loss, mut n) = (0.0, 0usize);
        for s in samples {
            let feats = featurize(&s.question);
            let g = self.decode(&feats, f.as_ref());
            if crate::pipeline::metrics::exact_match(&g.text, &s.real_answer) {
                correct += 1;
            }
            if let Some(t) = self.targets(&s.real_answer) {
                let (l, c) = self.sample_loss(&feats, &t, f.as_ref());
                loss += l;
                n += c;
            }
        }
        Evaluation {
            accuracy: correct as f64 / samples.len() as f64,
            ce_loss: if n == 0 { 0.0 } else { loss / n as f64 },
        }
    }

    fn checksum(&self) -> String {
        ToyModel::checksum(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyModel {
        let cfg = PretrainConfig {
            code_dim: 4,
            hidden: 12,
            positions: 4,
            init_std: 0.3,
            ..PretrainConfig::default()
        };
        ToyModel::init(&cfg, 3).unwrap()
    }

    #[test]
    fn features_follow_the_layout() {
        let f = featurize("What is 37 plus 45?");
        assert!(f.digits.contains(&(7 * 10 + 5)));
        assert!(f.digits.contains(&(100 + 3 * 10 + 4)));
        assert!(f.digits.contains(&BIAS_FEATURE));
        assert_eq!(f.words.iter().map(|w| w.1).sum::<f64>(), 3.0);
        let x = f.to_dense();
        assert_eq!(x.len(), D_IN);
        assert_eq!(x[D_IN - 1], 1.0);
    }

    #[test]
    fn template_words_do_not_collide() {
        use crate::learner::{gen_tasks, TaskKind, TemplateFamily};
        let mut vocab: Vec<std::collections::BTreeSet<String>> = Vec::new();
        for family in [TemplateFamily::Canonical, TemplateFamily::Story] {
            for kind in TaskKind::ALL {
                let q = &gen_tasks(family, kind, 1, 1, 0).unwrap()[0].question;
                vocab.push(crate::text::tokenize(q).into_iter().filter(|w| !w.chars().all(|c| c.is_ascii_digit())).collect());
            }
        }
        // distinct words from different templates never share a bucket
        for (i, a) in vocab.iter().enumerate() {
            for b in &vocab[i + 1..] {
                for w in a {
                    for v in b {
                        assert!(w == v || word_bucket(w) != word_bucket(v), "{w} and {v} collide");
                    }
                }
            }
        }
    }

    #[test]
    fn answer_codec() {
        assert_eq!(encode_answer("072"), Some(vec![2, 7, END]));
        assert_eq!(encode_answer("-5"), Some(vec![5, MINUS, END]));
        assert_eq!(encode_answer("abc"), None);
        assert_eq!(decode_tokens(&[2, 7]), "72");
        assert_eq!(decode_tokens(&[5, MINUS]), "-5");
    }

    #[test]
    fn generation_shape_and_determinism() {
        let m = tiny();
        let a = m.generate(None, "What is 3 plus 4?").unwrap();
        assert_eq!(a, m.generate(None, "What is 3 plus 4?").unwrap());
        assert!(!a.step_logits.is_empty());
        assert!(a.step_logits.iter().all(|l| l.len() == VOCAB));
        assert!(m.generate(None, "  ").is_err());
    }

    #[test]
    fn zero_adapter_is_identity() {
        let m = tiny();
        let ad = m.init_adapter(3, 0.0, 1).unwrap();
        for q in ["What is 3 plus 4?", "Sam had 9 bags and then put 2 marbles in each bag."] {
            assert_eq!(m.generate(None, q).unwrap(), m.generate(Some(&ad), q).unwrap());
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 { diff } else { diff / scale }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ad = m.init_adapter(2, 0.0, 4).unwrap();
        let mut f = m.params(&ad).unwrap();
        let nrm = Normal::new(0.0, 0.5).unwrap();
        for v in f.pb.iter_mut().chain(f.hb.iter_mut()) {
            *v = nrm.sample(&mut rng);
        }
        let qs = [("What is 12 plus 30?", "42"), ("Sam had 5 marbles", "7"), ("What is 9 times 9?", "81")];
        let data: Vec<(SparseFeatures, Vec<usize>)> =
            qs.iter().map(|(q, a)| (featurize(q), m.targets(a).unwrap())).collect();
        let batch: Vec<(&SparseFeatures, &[usize])> = data.iter().map(|(f, t)| (f, t.as_slice())).collect();
        let (_, g) = m.adapter_grad(&f, &batch, 0.0, None);
        let loss_at = |f: &AdapterParams| m.adapter_grad(f, &batch, 0.0, None).0;
        let eps = 1e-6;
        let numeric = |sel: fn(&mut AdapterParams) -> &mut Vec<f64>| -> Vec<f64> {
            let n = sel(&mut f.clone()).len();
            (0..n)
                .map(|i| {
                    let mut plus = f.clone();
                    sel(&mut plus)[i] += eps;
                    let mut minus = f.clone();
                    sel(&mut minus)[i] -= eps;
                    (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps)
                })
                .collect()
        };
        assert!(rel_err(&g.pb, &numeric(|f| &mut f.pb)) < 1e-4);
        assert!(rel_err(&g.hb, &numeric(|f| &mut f.hb)) < 1e-4);
        assert!(rel_err(&g.pa, &numeric(|f| &mut f.pa)) < 1e-4);
        assert!(rel_err(&g.ha, &numeric(|f| &mut f.ha)) < 1e-4);
    }
}

//! A small decoder-only transformer trained from scratch on a synthetic
//! corpus where a marker token (`A` or `B`) earlier in the sequence decides
//! the class token (`X` or `Y`) that follows the query token `?`.
//!
//! Pre-norm blocks (parameter-free RMSNorm, causal multi-head attention,
//! ReLU MLP), learned token and position embeddings, untied unembedding.
//! Everything is f32 and single-threaded, so runs are bit-reproducible.
//! The hidden state of layer `l` is the residual stream after block `l`,
//! which is also where interventions are added.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::ConceptVectorSet;
use crate::steer::{InterventionSpec, Steerable};
use crate::stimulus::SupervisedItem;
use crate::store::{self, ActivationDump, Manifest, Polarity};

pub const BOS: usize = 0;
pub const QUERY: usize = 1;
pub const MARKER_A: usize = 2;
pub const MARKER_B: usize = 3;
pub const CLASS_X: usize = 4;
pub const CLASS_Y: usize = 5;
pub const FIRST_FILLER: usize = 6;

pub const MODEL_ID: &str = "toylm/post-block-residual";
pub const CONCEPT: &str = "marker_a";
pub const RUN_FILE: &str = "train.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

const RMS_EPS: f32 = 1e-5;
const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;
const CLIP_NORM: f32 = 1.0;
const EVAL_SEQUENCES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 64,
            context_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.context_len == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size < FIRST_FILLER + 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be at least {}",
                FIRST_FILLER + 2
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub checkpoint_every: usize,
    pub learning_rate: f32,
    /// Linear warmup length; the step size then decays linearly to a tenth
    /// of `learning_rate` at the last step.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub corpus_seed: u64,
    /// Tokens per training sequence, class token included.
    pub seq_len: usize,
    /// Probability that the class token agrees with the marker.
    pub p_signal: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            checkpoint_every: 100,
            learning_rate: 3e-4,
            warmup_steps: 0,
            batch_size: 16,
            corpus_seed: 0,
            seq_len: 16,
            p_signal: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mc: &ModelConfig) -> Result<()> {
        if self.steps == 0 || self.checkpoint_every == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps, checkpoint_every and batch_size must be positive".into()));
        }
        if !self.steps.is_multiple_of(self.checkpoint_every) {
            return Err(Error::InvalidConfig(format!(
                "checkpoint_every {} does not divide steps {}",
                self.checkpoint_every, self.steps
            )));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::InvalidConfig("warmup_steps must be smaller than steps".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.seq_len < 5 || self.seq_len > mc.context_len {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} must lie in [5, context_len {}]",
                self.seq_len, mc.context_len
            )));
        }
        if !(0.0..=1.0).contains(&self.p_signal) {
            return Err(Error::InvalidConfig("p_signal must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_checkpoints(&self) -> usize {
        self.steps / self.checkpoint_every
    }
}

pub fn token_name(id: usize) -> String {
    match id {
        BOS => "<bos>".into(),
        QUERY => "?".into(),
        MARKER_A => "A".into(),
        MARKER_B => "B".into(),
        CLASS_X => "X".into(),
        CLASS_Y => "Y".into(),
        k => format!("w{}", k - FIRST_FILLER),
    }
}

pub fn tokenize(text: &str, vocab_size: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            let id = match w {
                "<bos>" => Some(BOS),
                "?" => Some(QUERY),
                "A" => Some(MARKER_A),
                "B" => Some(MARKER_B),
                "X" => Some(CLASS_X),
                "Y" => Some(CLASS_Y),
                _ => w
                    .strip_prefix('w')
                    .and_then(|n| n.parse::<usize>().ok())
                    .map(|n| n + FIRST_FILLER),
            };
            id.filter(|&i| i < vocab_size)
                .ok_or_else(|| Error::Tokenization(format!("unknown token `{w}`")))
        })
        .collect()
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

/// `<bos>`, fillers with one marker at `marker_at`, then `?`.
fn prompt_tokens(rng: &mut ChaCha8Rng, seq_len: usize, vocab_size: usize) -> (Vec<usize>, usize) {
    let body = seq_len - 3;
    let marker_at = 1 + rng.random_range(0..body);
    let mut t = Vec::with_capacity(seq_len);
    t.push(BOS);
    for _ in 0..body {
        t.push(rng.random_range(FIRST_FILLER..vocab_size));
    }
    t.push(QUERY);
    (t, marker_at)
}

/// One training sequence: prompt, then the class token, which follows the
/// marker with probability `p_signal`.
pub fn sample_sequence(rng: &mut ChaCha8Rng, tc: &TrainConfig, vocab_size: usize) -> Vec<usize> {
    let (mut t, at) = prompt_tokens(rng, tc.seq_len, vocab_size);
    let is_a = rng.random_bool(0.5);
    t[at] = if is_a { MARKER_A } else { MARKER_B };
    let agree = rng.random_bool(tc.p_signal);
    t.push(if is_a == agree { CLASS_X } else { CLASS_Y });
    t
}

/// The first `n` sequences of the training stream, one line of token ids
/// each.
pub fn corpus_lines(tc: &TrainConfig, vocab_size: usize, n: usize) -> String {
    let mut rng = corpus_rng(tc.corpus_seed);
    let mut out = String::new();
    for _ in 0..n {
        let line: Vec<String> = sample_sequence(&mut rng, tc, vocab_size).iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn corpus_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn eval_corpus(tc: &TrainConfig, vocab_size: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.corpus_seed);
    rng.set_stream(2);
    (0..EVAL_SEQUENCES).map(|_| sample_sequence(&mut rng, tc, vocab_size)).collect()
}

/// Paired prompts for the `A` concept: identical fillers and marker slot,
/// `A` in the positive prompt and `B` in the negative one.
pub fn marker_pairs(seq_len: usize, vocab_size: usize, n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    (0..n)
        .map(|_| {
            let (mut t, at) = prompt_tokens(&mut rng, seq_len, vocab_size);
            t[at] = MARKER_A;
            let pos = detokenize(&t);
            t[at] = MARKER_B;
            (pos, detokenize(&t))
        })
        .collect()
}

/// Prompts with no marker at all; the concept's class `X` is marked
/// correct, so steering toward `A` should raise accuracy.
pub fn unmarked_items(seq_len: usize, vocab_size: usize, n: usize, seed: u64) -> Vec<SupervisedItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    (0..n)
        .map(|_| {
            let (t, _) = prompt_tokens(&mut rng, seq_len, vocab_size);
            SupervisedItem {
                question: detokenize(&t),
                correct_answer: "X".into(),
                incorrect_answer: "Y".into(),
                options: vec!["X".into(), "Y".into()],
                answer_index: 0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const W1: usize = 4;
const B1: usize = 5;
const W2: usize = 6;
const B2: usize = 7;
const PER_BLOCK: usize = 8;

fn block_id(block: usize, k: usize) -> usize {
    2 + block * PER_BLOCK + k
}

impl Layout {
    fn new(mc: &ModelConfig) -> Self {
        let (d, h, v) = (mc.hidden_dim, mc.mlp_dim(), mc.vocab_size);
        let mut entries: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![v, d]),
            ("pos_emb".into(), vec![mc.context_len, d]),
        ];
        for b in 0..mc.num_layers {
            for (name, shape) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("w1", vec![d, h]),
                ("b1", vec![h]),
                ("w2", vec![h, d]),
                ("b2", vec![d]),
            ] {
                entries.push((format!("block{b}.{name}"), shape));
            }
        }
        entries.push(("unembed".into(), vec![d, v]));
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for (_, shape) in &entries {
            offsets.push(total);
            total += shape.iter().product::<usize>();
        }
        let (names, shapes) = entries.into_iter().unzip();
        Layout {
            names,
            shapes,
            offsets,
            total,
        }
    }

    fn unembed_id(&self) -> usize {
        self.names.len() - 1
    }

    fn range(&self, id: usize) -> std::ops::Range<usize> {
        let start = self.offsets[id];
        start..start + self.shapes[id].iter().product::<usize>()
    }

    fn mat<'a>(&self, buf: &'a [f32], id: usize) -> ArrayView2<'a, f32> {
        let sh = &self.shapes[id];
        ArrayView2::from_shape((sh[0], sh[1]), &buf[self.range(id)]).expect("layout shape")
    }

    fn mat_mut<'a>(&self, buf: &'a mut [f32], id: usize) -> ArrayViewMut2<'a, f32> {
        let sh = &self.shapes[id];
        let r = self.range(id);
        ArrayViewMut2::from_shape((sh[0], sh[1]), &mut buf[r]).expect("layout shape")
    }

    fn vec<'a>(&self, buf: &'a [f32], id: usize) -> ArrayView1<'a, f32> {
        ArrayView1::from(&buf[self.range(id)])
    }

    fn vec_mut<'a>(&self, buf: &'a mut [f32], id: usize) -> ArrayViewMut1<'a, f32> {
        let r = self.range(id);
        ArrayViewMut1::from(&mut buf[r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f32>,
}

struct BlockCache {
    x: Array2<f32>,
    r1: Array1<f32>,
    n1: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    /// Attention probabilities per (sequence, head).
    probs: Vec<Array2<f32>>,
    o: Array2<f32>,
    x2: Array2<f32>,
    r2: Array1<f32>,
    n2: Array2<f32>,
    a: Array2<f32>,
    z: Array2<f32>,
}

struct ForwardPass {
    blocks: Vec<BlockCache>,
    /// Residual stream after each block.
    hidden: Vec<Array2<f32>>,
    rf: Array1<f32>,
    nf: Array2<f32>,
    logits: Array2<f32>,
}

fn rms_norm(x: &Array2<f32>) -> (Array2<f32>, Array1<f32>) {
    let d = x.ncols() as f32;
    let r: Array1<f32> = x
        .rows()
        .into_iter()
        .map(|row| 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt())
        .collect();
    let n = x * &r.view().insert_axis(Axis(1));
    (n, r)
}

/// Gradient through `n = x * r(x)`.
fn rms_norm_backward(x: &Array2<f32>, r: &Array1<f32>, dn: &Array2<f32>) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut dx = Array2::zeros(x.dim());
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let xi = x.row(i);
        let gi = dn.row(i);
        let ri = r[i];
        let dot = gi.dot(&xi);
        let c = ri * ri * ri * dot / d;
        for ((o, &g), &xv) in row.iter_mut().zip(gi).zip(xi) {
            *o = ri * g - c * xv;
        }
    }
    dx
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
}

impl ToyLm {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(layout.total);
        let d = config.hidden_dim as f32;
        let out_scale = 1.0 / (2.0 * config.num_layers as f32).sqrt();
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let n: usize = shape.iter().product();
            let fan_in = shape[0] as f32;
            let std = match name.rsplit('.').next().unwrap_or(name) {
                "tok_emb" | "pos_emb" => 1.0,
                "b1" | "b2" => 0.0,
                "wo" | "w2" => out_scale / fan_in.sqrt(),
                "unembed" => 1.0 / d.sqrt(),
                _ => 1.0 / fan_in.sqrt(),
            };
            if std == 0.0 {
                params.extend(std::iter::repeat_n(0.0, n));
            } else {
                params.extend(normal_vec(&mut rng, n, std));
            }
        }
        Ok(ToyLm {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, batch: &[Vec<usize>], spec: Option<&InterventionSpec>) -> Result<ForwardPass> {
        let mc = &self.config;
        let t_len = batch.first().map_or(0, Vec::len);
        if t_len == 0 || batch.iter().any(|s| s.len() != t_len) {
            return Err(Error::Shape("forward batch must hold equal-length, non-empty sequences".into()));
        }
        if t_len > mc.context_len {
            return Err(Error::ContextOverflow {
                len: t_len,
                max: mc.context_len,
            });
        }
        if let Some(&bad) = batch.iter().flatten().find(|&&t| t >= mc.vocab_size) {
            return Err(Error::Tokenization(format!("token id {bad} outside vocabulary")));
        }
        if let Some(s) = spec {
            s.validate_for(mc.num_layers, mc.hidden_dim)?;
        }
        let (d, heads, dh) = (mc.hidden_dim, mc.num_heads, mc.head_dim());
        let lay = &self.layout;
        let p = &self.params;
        let n_rows = batch.len() * t_len;
        let tok = lay.mat(p, TOK_EMB);
        let pos = lay.mat(p, POS_EMB);
        let mut x = Array2::zeros((n_rows, d));
        for (b, seq) in batch.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                let mut row = x.row_mut(b * t_len + t);
                row.assign(&tok.row(id));
                row += &pos.row(t);
            }
        }

        let scale = 1.0 / (dh as f32).sqrt();
        let mut blocks = Vec::with_capacity(mc.num_layers);
        let mut hidden = Vec::with_capacity(mc.num_layers);
        for l in 0..mc.num_layers {
            let (n1, r1) = rms_norm(&x);
            let q = n1.dot(&lay.mat(p, block_id(l, WQ)));
            let k = n1.dot(&lay.mat(p, block_id(l, WK)));
            let v = n1.dot(&lay.mat(p, block_id(l, WV)));
            let mut o = Array2::zeros((n_rows, d));
            let mut probs = Vec::with_capacity(batch.len() * heads);
            for b in 0..batch.len() {
                let rows = b * t_len..(b + 1) * t_len;
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = k.slice(s![rows.clone(), cols.clone()]);
                    let vh = v.slice(s![rows.clone(), cols.clone()]);
                    let mut sc = qh.dot(&kh.t()) * scale;
                    for i in 0..t_len {
                        for j in i + 1..t_len {
                            sc[[i, j]] = f32::NEG_INFINITY;
                        }
                    }
                    softmax_rows(&mut sc);
                    o.slice_mut(s![rows.clone(), cols]).assign(&sc.dot(&vh));
                    probs.push(sc);
                }
            }
            let x2 = &x + &o.dot(&lay.mat(p, block_id(l, WO)));
            let (n2, r2) = rms_norm(&x2);
            let a = n2.dot(&lay.mat(p, block_id(l, W1))) + lay.vec(p, block_id(l, B1));
            let z = a.mapv(|v| v.max(0.0));
            let mut x3 = &x2 + &(z.dot(&lay.mat(p, block_id(l, W2))) + lay.vec(p, block_id(l, B2)));
            if let Some(off) = spec.and_then(|s| s.offset_f32(l)) {
                let off = ArrayView1::from(&off[..]);
                for mut row in x3.rows_mut() {
                    row += &off;
                }
            }
            hidden.push(x3.clone());
            blocks.push(BlockCache {
                x,
                r1,
                n1,
                q,
                k,
                v,
                probs,
                o,
                x2,
                r2,
                n2,
                a,
                z,
            });
            x = x3;
        }
        let (nf, rf) = rms_norm(&x);
        let logits = nf.dot(&lay.mat(p, lay.unembed_id()));
        Ok(ForwardPass {
            blocks,
            hidden,
            rf,
            nf,
            logits,
        })
    }

    /// Mean next-token cross-entropy over every position but the last.
    pub fn loss(&self, batch: &[Vec<usize>]) -> Result<f64> {
        let fp = self.forward(batch, None)?;
        Ok(cross_entropy(&fp.logits, batch).0)
    }

    /// Loss and gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Vec<usize>]) -> Result<(f64, Vec<f32>)> {
        let fp = self.forward(batch, None)?;
        let (loss, dlogits) = cross_entropy(&fp.logits, batch);
        let mc = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let (heads, dh) = (mc.num_heads, mc.head_dim());
        let t_len = batch[0].len();
        let mut g = vec![0.0f32; lay.total];

        let ue = lay.unembed_id();
        lay.mat_mut(&mut g, ue).assign(&fp.nf.t().dot(&dlogits));
        let dnf = dlogits.dot(&lay.mat(p, ue).t());
        let x_last = fp.hidden.last().expect("at least one layer");
        let mut dx = rms_norm_backward(x_last, &fp.rf, &dnf);

        let scale = 1.0 / (dh as f32).sqrt();
        for l in (0..mc.num_layers).rev() {
            let c = &fp.blocks[l];
            // MLP branch.
            let dm = &dx;
            lay.vec_mut(&mut g, block_id(l, B2)).assign(&dm.sum_axis(Axis(0)));
            lay.mat_mut(&mut g, block_id(l, W2)).assign(&c.z.t().dot(dm));
            let mut da = dm.dot(&lay.mat(p, block_id(l, W2)).t());
            da.zip_mut_with(&c.a, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            lay.vec_mut(&mut g, block_id(l, B1)).assign(&da.sum_axis(Axis(0)));
            lay.mat_mut(&mut g, block_id(l, W1)).assign(&c.n2.t().dot(&da));
            let dn2 = da.dot(&lay.mat(p, block_id(l, W1)).t());
            let dx2 = &dx + &rms_norm_backward(&c.x2, &c.r2, &dn2);

            // Attention branch.
            lay.mat_mut(&mut g, block_id(l, WO)).assign(&c.o.t().dot(&dx2));
            let d_o = dx2.dot(&lay.mat(p, block_id(l, WO)).t());
            let mut dq = Array2::zeros(c.q.dim());
            let mut dk = Array2::zeros(c.k.dim());
            let mut dv = Array2::zeros(c.v.dim());
            for b in 0..batch.len() {
                let rows = b * t_len..(b + 1) * t_len;
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let pr = &c.probs[b * heads + h];
                    let doh = d_o.slice(s![rows.clone(), cols.clone()]);
                    let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                    let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                    let dp = doh.dot(&vh.t());
                    dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&pr.t().dot(&doh));
                    let mut ds = pr * &dp;
                    let row_sums = ds.sum_axis(Axis(1));
                    for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                        row.scaled_add(-row_sums[i], &pr.row(i));
                    }
                    ds *= scale;
                    dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
                }
            }
            lay.mat_mut(&mut g, block_id(l, WQ)).assign(&c.n1.t().dot(&dq));
            lay.mat_mut(&mut g, block_id(l, WK)).assign(&c.n1.t().dot(&dk));
            lay.mat_mut(&mut g, block_id(l, WV)).assign(&c.n1.t().dot(&dv));
            let dn1 = dq.dot(&lay.mat(p, block_id(l, WQ)).t())
                + dk.dot(&lay.mat(p, block_id(l, WK)).t())
                + dv.dot(&lay.mat(p, block_id(l, WV)).t());
            dx = &dx2 + &rms_norm_backward(&c.x, &c.r1, &dn1);
        }

        for (b, seq) in batch.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                let row = dx.row(b * t_len + t);
                lay.mat_mut(&mut g, TOK_EMB).row_mut(id).scaled_add(1.0, &row);
                lay.mat_mut(&mut g, POS_EMB).row_mut(t).scaled_add(1.0, &row);
            }
        }
        Ok((loss, g))
    }

    /// Logits at every position of one sequence.
    pub fn logits(&self, tokens: &[usize], spec: Option<&InterventionSpec>) -> Result<Array2<f32>> {
        Ok(self.forward(&[tokens.to_vec()], spec)?.logits)
    }

    /// Residual stream after each block for one sequence, `[layer][position]`.
    pub fn hidden_states(&self, tokens: &[usize], spec: Option<&InterventionSpec>) -> Result<Vec<Array2<f32>>> {
        Ok(self.forward(&[tokens.to_vec()], spec)?.hidden)
    }

    fn tensor(&self, id: usize) -> &[f32] {
        &self.params[self.layout.range(id)]
    }
}

/// Mean cross-entropy of predicting token `t + 1` from position `t`, and
/// its gradient with respect to the logits.
fn cross_entropy(logits: &Array2<f32>, batch: &[Vec<usize>]) -> (f64, Array2<f32>) {
    let t_len = batch[0].len();
    let count = (batch.len() * (t_len - 1)).max(1);
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0f64;
    for (b, seq) in batch.iter().enumerate() {
        for t in 0..t_len - 1 {
            let r = b * t_len + t;
            let row = logits.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
            let target = seq[t + 1];
            total += sum.ln() - f64::from(row[target] - max);
            let mut g = grad.row_mut(r);
            for (k, gv) in g.iter_mut().enumerate() {
                let pk = (f64::from(row[k] - max).exp() / sum) as f32;
                *gv = pk / count as f32;
            }
            g[target] -= 1.0 / count as f32;
        }
    }
    (total / count as f64, grad)
}

impl Steerable for ToyLm {
    fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self.config.vocab_size)
    }

    fn next_token_logits(&self, tokens: &[usize], spec: Option<&InterventionSpec>) -> Result<Vec<f32>> {
        let logits = self.logits(tokens, spec)?;
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub label: String,
    /// Mean training loss over the steps since the previous checkpoint.
    pub train_loss: f64,
    /// Loss on the fixed held-out sequences.
    pub eval_loss: f64,
    pub model: ToyLm,
}

fn learning_rate_at(tc: &TrainConfig, step: usize) -> f32 {
    if step <= tc.warmup_steps {
        return tc.learning_rate * step as f32 / tc.warmup_steps as f32;
    }
    let rest = (tc.steps - tc.warmup_steps).max(1) as f32;
    tc.learning_rate * (1.0 - 0.9 * (step - tc.warmup_steps) as f32 / rest)
}

/// Trains with Adam (linear warmup then linear decay, global-norm clipping)
/// and snapshots the model every `checkpoint_every` steps.
pub fn train_with_checkpoints(mc: &ModelConfig, tc: &TrainConfig) -> Result<Vec<Checkpoint>> {
    tc.validate(mc)?;
    let mut model = ToyLm::init(mc.clone())?;
    let mut rng = corpus_rng(tc.corpus_seed);
    let eval = eval_corpus(tc, mc.vocab_size);
    let n = model.params.len();
    let mut m1 = vec![0.0f32; n];
    let mut m2 = vec![0.0f32; n];
    let mut checkpoints = Vec::with_capacity(tc.num_checkpoints());
    let mut interval_loss = 0.0;
    for step in 1..=tc.steps {
        let batch: Vec<Vec<usize>> = (0..tc.batch_size)
            .map(|_| sample_sequence(&mut rng, tc, mc.vocab_size))
            .collect();
        let (loss, mut grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                step,
                loss: loss as f32,
            });
        }
        interval_loss += loss;
        let norm = grad.iter().map(|g| g * g).sum::<f32>().sqrt();
        if norm > CLIP_NORM {
            let k = CLIP_NORM / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        let lr = learning_rate_at(tc, step);
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for i in 0..n {
            let gi = grad[i];
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * gi;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = m1[i] / bc1;
            let vh = m2[i] / bc2;
            model.params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        if step % tc.checkpoint_every == 0 {
            let eval_loss = model.loss(&eval)?;
            if !eval_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: eval_loss as f32,
                });
            }
            checkpoints.push(Checkpoint {
                step,
                label: format!("{}%", step * 100 / tc.steps),
                train_loss: interval_loss / tc.checkpoint_every as f64,
                eval_loss,
                model: model.clone(),
            });
            interval_loss = 0.0;
        }
    }
    Ok(checkpoints)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    model_config: ModelConfig,
    step: usize,
    label: String,
    train_loss: f64,
    eval_loss: f64,
    tensors: Vec<TensorEntry>,
    dtype: store::Dtype,
    endianness: store::Endianness,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.f32")
}

pub fn write_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let lay = &ckpt.model.layout;
    for (id, name) in lay.names.iter().enumerate() {
        store::write_f32_shard(&dir.join(tensor_file(name)), ckpt.model.tensor(id))?;
    }
    let header = CheckpointHeader {
        format_version: store::FORMAT_VERSION,
        model_config: ckpt.model.config.clone(),
        step: ckpt.step,
        label: ckpt.label.clone(),
        train_loss: ckpt.train_loss,
        eval_loss: ckpt.eval_loss,
        tensors: lay
            .names
            .iter()
            .zip(&lay.shapes)
            .map(|(n, s)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
        dtype: store::Dtype::F32,
        endianness: store::Endianness::Little,
    };
    fs::write(dir.join(CHECKPOINT_FILE), store::sorted_json(&header)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.clone() },
        _ => Error::Io(e),
    })?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format_version != store::FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: store::FORMAT_VERSION,
        });
    }
    header.model_config.validate()?;
    let layout = Layout::new(&header.model_config);
    let expected: Vec<TensorEntry> = layout
        .names
        .iter()
        .zip(&layout.shapes)
        .map(|(n, s)| TensorEntry {
            name: n.clone(),
            shape: s.clone(),
        })
        .collect();
    if header.tensors != expected {
        return Err(Error::Shape("checkpoint tensors do not match the model config".into()));
    }
    let mut params = Vec::with_capacity(layout.total);
    for (id, name) in layout.names.iter().enumerate() {
        let len = layout.range(id).len();
        let values = store::read_f32_shard(&dir.join(tensor_file(name)), len)?;
        store::check_finite(&values, "checkpoint tensor")?;
        params.extend_from_slice(&values);
    }
    Ok(Checkpoint {
        step: header.step,
        label: header.label,
        train_loss: header.train_loss,
        eval_loss: header.eval_loss,
        model: ToyLm {
            config: header.model_config,
            layout,
            params,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub checkpoint_labels: Vec<String>,
    pub eval_losses: Vec<f64>,
}

/// Writes `train.json`, `eval_corpus.txt` and one `ckpt_<i>/` per checkpoint.
pub fn write_run(mc: &ModelConfig, tc: &TrainConfig, ckpts: &[Checkpoint], root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, c) in ckpts.iter().enumerate() {
        write_checkpoint(c, &root.join(crate::extract::checkpoint_dir_name(i)))?;
    }
    let manifest = RunManifest {
        format_version: store::FORMAT_VERSION,
        model_config: mc.clone(),
        train_config: tc.clone(),
        checkpoint_labels: ckpts.iter().map(|c| c.label.clone()).collect(),
        eval_losses: ckpts.iter().map(|c| c.eval_loss).collect(),
    };
    fs::write(root.join(RUN_FILE), store::sorted_json(&manifest)?)?;
    let eval: String = eval_corpus(tc, mc.vocab_size)
        .iter()
        .map(|s| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    fs::write(root.join("eval_corpus.txt"), eval)?;
    Ok(())
}

pub fn read_run(root: &Path) -> Result<(RunManifest, Vec<Checkpoint>)> {
    let path = root.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.clone() },
        _ => Error::Io(e),
    })?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let ckpts = (0..manifest.checkpoint_labels.len())
        .map(|i| read_checkpoint(&root.join(crate::extract::checkpoint_dir_name(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, ckpts))
}

fn resolve_position(p: i64, len: usize) -> Result<usize> {
    let idx = if p < 0 { len as i64 + p } else { p };
    if idx < 0 || idx >= len as i64 {
        return Err(Error::Index(format!("token position {p} outside a {len}-token prompt")));
    }
    Ok(idx as usize)
}

/// Hidden states at `positions` for every prompt, as one shard per layer
/// with rows ordered prompt-major.
pub fn forward_collect(model: &ToyLm, prompts: &[Vec<usize>], positions: &[i64]) -> Result<Vec<Vec<f32>>> {
    let layers = model.config.num_layers;
    let mut shards = vec![Vec::with_capacity(prompts.len() * positions.len() * model.config.hidden_dim); layers];
    for prompt in prompts {
        if prompt.len() > model.config.context_len {
            return Err(Error::ContextOverflow {
                len: prompt.len(),
                max: model.config.context_len,
            });
        }
        let hidden = model.hidden_states(prompt, None)?;
        let idx = positions
            .iter()
            .map(|&p| resolve_position(p, prompt.len()))
            .collect::<Result<Vec<_>>>()?;
        for (shard, h) in shards.iter_mut().zip(&hidden) {
            for &i in &idx {
                shard.extend(h.row(i).iter());
            }
        }
    }
    Ok(shards)
}

/// A dump over all checkpoints for one polarity of prompts.
pub fn dump_checkpoints(
    ckpts: &[Checkpoint],
    prompts: &[String],
    positions: &[i64],
    polarity: Polarity,
    seed: u64,
) -> Result<ActivationDump> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::InvalidConfig("no checkpoints to dump".into()))?;
    let mc = &first.model.config;
    let tokens = prompts
        .iter()
        .map(|p| tokenize(p, mc.vocab_size))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::new(
        MODEL_ID,
        ckpts.iter().map(|c| c.label.clone()).collect(),
        mc.num_layers,
        mc.hidden_dim,
        prompts.len(),
        polarity,
        CONCEPT,
        seed,
    );
    manifest.token_positions = positions.to_vec();
    let mut per_ckpt = ckpts
        .iter()
        .map(|c| forward_collect(&c.model, &tokens, positions))
        .collect::<Result<Vec<_>>>()?;
    ActivationDump::from_shards(manifest, |c, l| Ok(std::mem::take(&mut per_ckpt[c][l])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<usize>,
    /// `(logit X, logit Y)` at every decoding step.
    pub class_logits: Vec<(f32, f32)>,
}

/// Greedy decoding; stops early when the context is full.
pub fn generate_with_intervention(
    model: &ToyLm,
    prompt: &[usize],
    spec: Option<&InterventionSpec>,
    max_tokens: usize,
) -> Result<GenerationTrace> {
    if prompt.len() > model.config.context_len {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            max: model.config.context_len,
        });
    }
    let mut context = prompt.to_vec();
    let mut trace = GenerationTrace {
        tokens: Vec::new(),
        class_logits: Vec::new(),
    };
    for _ in 0..max_tokens {
        if context.len() >= model.config.context_len {
            break;
        }
        let logits = model.next_token_logits(&context, spec)?;
        let next = crate::steer::argmax_first(&logits.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        trace.class_logits.push((logits[CLASS_X], logits[CLASS_Y]));
        trace.tokens.push(next);
        context.push(next);
    }
    Ok(trace)
}

/// `logit X - logit Y` for the token after `prompt`.
pub fn class_margin(model: &ToyLm, prompt: &[usize], spec: Option<&InterventionSpec>) -> Result<f64> {
    let trace = generate_with_intervention(model, prompt, spec, 1)?;
    let (x, y) = trace.class_logits[0];
    Ok(f64::from(x) - f64::from(y))
}

/// Mean change in `logit X - logit Y` caused by `spec` over the prompts.
pub fn mean_logit_shift(model: &ToyLm, prompts: &[Vec<usize>], spec: &InterventionSpec) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for p in prompts {
        total += class_margin(model, p, Some(spec))? - class_margin(model, p, None)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Tokenized positive and negative prompts of the pairs at `ids`, interleaved.
pub fn paired_prompt_tokens(pairs: &[(String, String)], ids: &[usize], vocab_size: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(ids.len() * 2);
    for &i in ids {
        let (p, n) = pairs
            .get(i)
            .ok_or_else(|| Error::Index(format!("pair {i} out of range for {} pairs", pairs.len())))?;
        out.push(tokenize(p, vocab_size)?);
        out.push(tokenize(n, vocab_size)?);
    }
    Ok(out)
}

/// Mean logit shift at every checkpoint, each steered by its own vectors
/// at `layers` with `scale`.
pub fn shift_table(
    ckpts: &[Checkpoint],
    vsets: &[ConceptVectorSet],
    layers: &[usize],
    scale: f64,
    prompts: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if ckpts.len() != vsets.len() {
        return Err(Error::Shape(format!(
            "{} checkpoints for {} vector sets",
            ckpts.len(),
            vsets.len()
        )));
    }
    ckpts
        .iter()
        .zip(vsets)
        .map(|(c, v)| {
            if c.label != v.checkpoint_label {
                return Err(Error::Provenance(format!(
                    "checkpoint `{}` paired with vectors fitted at `{}`",
                    c.label, v.checkpoint_label
                )));
            }
            let spec = InterventionSpec::new(v.clone(), layers, scale)?;
            mean_logit_shift(&c.model, prompts, &spec)
        })
        .collect()
}

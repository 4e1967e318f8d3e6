//! Per-layer concept directions from paired hidden states.
//!
//! The default route z-scores the pair differences per dimension and takes
//! the first principal component by power iteration. The mean-difference
//! route (the K=2 clustering with polarities as labels) is the closed-form
//! alternative. Both are oriented so positive stimuli project higher.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{self, validate_pairing, ActivationDump};

pub const ZSCORE_EPS: f64 = 1e-8;
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;
/// Repeated squarings applied to the covariance before iterating.
pub const POWER_SQUARINGS: usize = 10;
pub const ORIENTATION_MIN_MARGIN: f64 = 1e-12;
pub const NUM_REPORTED_RATIOS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    PerDimZscore,
    PerRowL2,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Pca,
    Kmeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMatrix {
    pub values: Array2<f64>,
    pub layer: usize,
    pub checkpoint: usize,
    pub normalization: Normalization,
}

impl TrainMatrix {
    pub fn at(mut self, checkpoint: usize, layer: usize) -> Self {
        self.checkpoint = checkpoint;
        self.layer = layer;
        self
    }
}

/// `normalized(h_pos - h_neg)`, one row per stimulus pair.
pub fn diff_normalize(
    h_pos: ArrayView2<f64>,
    h_neg: ArrayView2<f64>,
    mode: Normalization,
) -> Result<TrainMatrix> {
    if h_pos.dim() != h_neg.dim() {
        return Err(Error::Shape(format!(
            "positive states {:?} vs negative states {:?}",
            h_pos.dim(),
            h_neg.dim()
        )));
    }
    if h_pos.nrows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: h_pos.nrows(),
        });
    }
    let mut d = &h_pos - &h_neg;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::RejectNonFinite {
            context: "difference matrix".into(),
        });
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateDifference);
    }
    match mode {
        Normalization::None => {}
        Normalization::PerDimZscore => {
            let n = d.nrows() as f64;
            for mut col in d.axis_iter_mut(Axis(1)) {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt().max(ZSCORE_EPS);
                col.mapv_inplace(|v| (v - mean) / std);
            }
        }
        Normalization::PerRowL2 => {
            for mut row in d.axis_iter_mut(Axis(0)) {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row.mapv_inplace(|v| v / norm);
                }
            }
        }
    }
    Ok(TrainMatrix {
        values: d,
        layer: 0,
        checkpoint: 0,
        normalization: mode,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Unit-norm first principal direction (sign arbitrary).
    pub vector: Array1<f64>,
    /// Explained-variance ratios of the leading components, at most five.
    pub ratios: Vec<f64>,
    pub iterations: usize,
}

/// First principal direction of the column-centred matrix by power
/// iteration, plus explained-variance ratios of the first five components
/// by deflation.
///
/// Iterates on the smaller of the covariance (`m x m`) and Gram (`n x n`)
/// matrices; both share the nonzero spectrum. The start vector is the
/// normalized all-ones direction in feature space.
pub fn pca_first_component(h: &TrainMatrix) -> Result<PcaResult> {
    let x = h.values.view();
    let (n, m) = x.dim();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let xc = &x - &mean;
    let scale: f64 = x.iter().map(|v| v * v).sum();
    let total: f64 = xc.iter().map(|v| v * v).sum();
    if !(total > 1e-20 * scale) {
        return Err(Error::DegenerateDifference);
    }

    let use_gram = n < m;
    let s = if use_gram { xc.dot(&xc.t()) } else { xc.t().dot(&xc) };
    let trace = s.diag().sum();

    let ones = Array1::from_elem(m, 1.0 / (m as f64).sqrt());
    let start = if use_gram { xc.dot(&ones) } else { ones };

    let first = power_iterate(&s, start.view(), true)?;
    let vector = if use_gram {
        let v = xc.t().dot(&first.vector);
        let norm = v.dot(&v).sqrt();
        v / norm
    } else {
        first.vector.clone()
    };

    let ratios = leading_ratios(s, &first, trace);
    Ok(PcaResult {
        vector,
        ratios,
        iterations: first.iterations,
    })
}

struct Eigen {
    vector: Array1<f64>,
    value: f64,
    iterations: usize,
}

/// `s^(2^POWER_SQUARINGS)`, rescaled to unit Frobenius norm after every
/// squaring. Same eigenvectors as `s`, with eigenvalue ratios raised to a
/// large power, so nearly tied spectra still converge within the cap.
fn squared_power(s: &Array2<f64>) -> Array2<f64> {
    let mut t = s.clone();
    for _ in 0..POWER_SQUARINGS {
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            break;
        }
        t /= norm;
        t = t.dot(&t);
    }
    let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        t /= norm;
    }
    t
}

/// Power iteration for the dominant eigenvector of a symmetric PSD matrix,
/// run on [`squared_power`] of it; the eigenvalue is the Rayleigh quotient
/// on `s` itself. When the iterate collapses (start orthogonal to the
/// dominant eigenspace) it restarts from the next standard basis vector.
fn power_iterate(s: &Array2<f64>, start: ArrayView1<f64>, strict: bool) -> Result<Eigen> {
    let dim = s.nrows();
    let t = squared_power(s);
    let t_collapse = 1e-14 * t.diag().sum().max(f64::MIN_POSITIVE);
    let candidates = std::iter::once(start.to_owned()).chain((0..dim).map(|k| {
        let mut e = Array1::zeros(dim);
        e[k] = 1.0;
        e
    }));
    let mut total_iters = 0;
    'restart: for mut u in candidates {
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            continue;
        }
        u /= norm;
        let mut residual = f64::INFINITY;
        for it in 1..=POWER_MAX_ITERS {
            total_iters += 1;
            let w = t.dot(&u);
            let wn = w.dot(&w).sqrt();
            if wn <= t_collapse {
                continue 'restart;
            }
            let next = w / wn;
            let delta = (&next - &u).mapv(|v| v * v).sum().sqrt();
            u = next;
            if delta < POWER_TOL {
                let value = u.dot(&s.dot(&u));
                return Ok(Eigen {
                    vector: u,
                    value,
                    iterations: it,
                });
            }
            if it == POWER_MAX_ITERS {
                let su = s.dot(&u);
                let lambda = u.dot(&su);
                residual = (&su - &(&u * lambda)).mapv(|v| v * v).sum().sqrt();
            }
        }
        if strict {
            return Err(Error::Convergence {
                iterations: POWER_MAX_ITERS,
                residual,
            });
        }
        let value = u.dot(&s.dot(&u));
        return Ok(Eigen {
            vector: u,
            value,
            iterations: total_iters,
        });
    }
    // Every candidate collapsed: the matrix is numerically zero.
    Ok(Eigen {
        vector: Array1::zeros(dim),
        value: 0.0,
        iterations: total_iters,
    })
}

fn leading_ratios(mut s: Array2<f64>, first: &Eigen, trace: f64) -> Vec<f64> {
    let k = NUM_REPORTED_RATIOS.min(s.nrows());
    let mut ratios = Vec::with_capacity(k);
    let mut current = Eigen {
        vector: first.vector.clone(),
        value: first.value,
        iterations: 0,
    };
    for i in 0..k {
        let mut r = (current.value / trace).clamp(0.0, 1.0);
        if let Some(&prev) = ratios.last() {
            // Deflated estimates carry convergence error; keep the sequence monotone.
            r = r.min(prev);
        }
        ratios.push(r);
        if i + 1 == k {
            break;
        }
        let u = &current.vector;
        let outer = u
            .view()
            .insert_axis(Axis(1))
            .dot(&u.view().insert_axis(Axis(0)));
        s.scaled_add(-current.value, &outer);
        let start = Array1::from_elem(s.nrows(), 1.0);
        current = power_iterate(&s, start.view(), false).expect("non-strict");
    }
    ratios
}

/// `normalize(mean(h_pos) - mean(h_neg))`.
pub fn kmeans_direction(h_pos: ArrayView2<f64>, h_neg: ArrayView2<f64>) -> Result<Array1<f64>> {
    if h_pos.ncols() != h_neg.ncols() {
        return Err(Error::Shape(format!(
            "hidden_dim {} vs {}",
            h_pos.ncols(),
            h_neg.ncols()
        )));
    }
    if h_pos.nrows() == 0 || h_neg.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let diff = h_pos.mean_axis(Axis(0)).expect("rows") - h_neg.mean_axis(Axis(0)).expect("rows");
    let norm = diff.dot(&diff).sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateDifference);
    }
    Ok(diff / norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orientation {
    pub vector: Array1<f64>,
    pub margin: f64,
    pub ambiguous: bool,
}

/// Flips `v` so the mean of `(h_pos - h_neg) . v` is non-negative.
pub fn orient(v: ArrayView1<f64>, h_pos: ArrayView2<f64>, h_neg: ArrayView2<f64>) -> Result<Orientation> {
    if h_pos.dim() != h_neg.dim() || h_pos.ncols() != v.len() {
        return Err(Error::Shape(format!(
            "orientation inputs {:?}, {:?}, vector {}",
            h_pos.dim(),
            h_neg.dim(),
            v.len()
        )));
    }
    if h_pos.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let proj = (&h_pos - &h_neg).dot(&v).mean().expect("rows");
    let vector = if proj >= 0.0 { v.to_owned() } else { -&v };
    let margin = proj.abs();
    Ok(Orientation {
        vector,
        margin,
        ambiguous: margin < ORIENTATION_MIN_MARGIN,
    })
}

/// Strict form of [`orient`]: an ambiguous margin is an error.
pub fn orient_sign(
    v: ArrayView1<f64>,
    h_pos: ArrayView2<f64>,
    h_neg: ArrayView2<f64>,
) -> Result<(Array1<f64>, f64)> {
    let o = orient(v, h_pos, h_neg)?;
    if o.ambiguous {
        return Err(Error::AmbiguousOrientation { margin: o.margin });
    }
    Ok((o.vector, o.margin))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVectorSet {
    pub concept: String,
    pub checkpoint_label: String,
    pub method: Method,
    pub normalization: Normalization,
    /// One unit vector per layer.
    pub vectors: Vec<Array1<f64>>,
    /// First-component ratios per layer; empty for the mean-difference route.
    pub explained_ratios: Vec<Vec<f64>>,
    pub orientation_margins: Vec<f64>,
    /// Layers whose orientation margin fell below the ambiguity threshold.
    pub ambiguous_layers: Vec<usize>,
    /// Layers whose train differences were all zero; their vector is a
    /// placeholder and carries no direction.
    pub degenerate_layers: Vec<usize>,
}

impl ConceptVectorSet {
    pub fn num_layers(&self) -> usize {
        self.vectors.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub method: Method,
    pub normalization: Normalization,
    /// Emit a flagged placeholder instead of failing on zero-difference
    /// cells (noiseless pre-onset checkpoints, for instance).
    pub allow_degenerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Method::Pca,
            normalization: Normalization::PerDimZscore,
            allow_degenerate: false,
        }
    }
}

/// Gathers the primary-position rows of `ids` for one (checkpoint, layer).
pub(crate) fn gather_rows(dump: &ActivationDump, checkpoint: usize, layer: usize, ids: &[usize]) -> Array2<f64> {
    let m = dump.manifest();
    let pos = m.primary_position();
    gather_rows_at(dump, checkpoint, layer, ids, pos)
}

pub(crate) fn gather_rows_at(
    dump: &ActivationDump,
    checkpoint: usize,
    layer: usize,
    ids: &[usize],
    position: usize,
) -> Array2<f64> {
    let dim = dump.manifest().hidden_dim;
    let mut out = Array2::zeros((ids.len(), dim));
    for (r, &i) in ids.iter().enumerate() {
        let row = dump.row(checkpoint, layer, i, position);
        for (dst, &src) in out.row_mut(r).iter_mut().zip(row) {
            *dst = f64::from(src);
        }
    }
    out
}

/// Fits one concept direction per (checkpoint, layer) from the train pairs.
///
/// For the PCA route every other pair difference is sign-flipped before
/// normalization so that the contrast axis carries the variance that
/// column centering would otherwise remove; orientation restores the sign.
pub fn fit_concept(
    pos: &ActivationDump,
    neg: &ActivationDump,
    train_ids: &[usize],
    opts: FitOptions,
) -> Result<Vec<ConceptVectorSet>> {
    validate_pairing(pos, neg)?;
    let m = pos.manifest();
    if let Some(&bad) = train_ids.iter().find(|&&i| i >= m.num_samples) {
        return Err(Error::Index(format!(
            "train id {bad} out of range for {} samples",
            m.num_samples
        )));
    }
    let mut out = Vec::with_capacity(m.num_checkpoints());
    for c in 0..m.num_checkpoints() {
        let mut vectors = Vec::with_capacity(m.num_layers);
        let mut ratios = Vec::new();
        let mut margins = Vec::with_capacity(m.num_layers);
        let mut ambiguous = Vec::new();
        let mut degenerate = Vec::new();
        for l in 0..m.num_layers {
            let hp = gather_rows(pos, c, l, train_ids);
            let hn = gather_rows(neg, c, l, train_ids);
            if opts.allow_degenerate && hp == hn {
                degenerate.push(l);
                ambiguous.push(l);
                margins.push(0.0);
                if opts.method == Method::Pca {
                    ratios.push(vec![0.0; NUM_REPORTED_RATIOS]);
                }
                vectors.push(Array1::from_elem(m.hidden_dim, 1.0 / (m.hidden_dim as f64).sqrt()));
                continue;
            }
            let v = match opts.method {
                Method::Pca => {
                    let (a, b) = alternate_pairs(&hp, &hn);
                    let h = diff_normalize(a.view(), b.view(), opts.normalization)
                        .map_err(|e| e.at_cell(c, l))?
                        .at(c, l);
                    let pca = pca_first_component(&h).map_err(|e| e.at_cell(c, l))?;
                    ratios.push(pca.ratios);
                    pca.vector
                }
                Method::Kmeans => kmeans_direction(hp.view(), hn.view()).map_err(|e| e.at_cell(c, l))?,
            };
            let o = orient(v.view(), hp.view(), hn.view()).map_err(|e| e.at_cell(c, l))?;
            if o.ambiguous {
                ambiguous.push(l);
            }
            margins.push(o.margin);
            vectors.push(o.vector);
        }
        out.push(ConceptVectorSet {
            concept: m.concept.clone(),
            checkpoint_label: m.checkpoint_labels[c].clone(),
            method: opts.method,
            normalization: opts.normalization,
            vectors,
            explained_ratios: ratios,
            orientation_margins: margins,
            ambiguous_layers: ambiguous,
            degenerate_layers: degenerate,
        });
    }
    Ok(out)
}

/// Swaps the polarity of every odd row.
fn alternate_pairs(hp: &Array2<f64>, hn: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut a = hp.clone();
    let mut b = hn.clone();
    for r in (1..hp.nrows()).step_by(2) {
        a.row_mut(r).assign(&hn.row(r));
        b.row_mut(r).assign(&hp.row(r));
    }
    (a, b)
}

pub const VECTORS_FILE: &str = "vectors.json";
pub const FIT_FILE: &str = "fit.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorSetHeader {
    format_version: u32,
    concept: String,
    checkpoint_label: String,
    method: Method,
    normalization: Normalization,
    num_layers: usize,
    hidden_dim: usize,
    explained_ratios: Vec<Vec<f64>>,
    orientation_margins: Vec<f64>,
    ambiguous_layers: Vec<usize>,
    #[serde(default)]
    degenerate_layers: Vec<usize>,
    sign_convention: String,
    dtype: store::Dtype,
    endianness: store::Endianness,
}

pub fn vector_shard_name(layer: usize) -> String {
    format!("v_{layer}.f32")
}

pub fn write_vector_set(vset: &ConceptVectorSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (l, v) in vset.vectors.iter().enumerate() {
        let values: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        store::check_finite(&values, "concept vector")?;
        store::write_f32_shard(&dir.join(vector_shard_name(l)), &values)?;
    }
    let header = VectorSetHeader {
        format_version: store::FORMAT_VERSION,
        concept: vset.concept.clone(),
        checkpoint_label: vset.checkpoint_label.clone(),
        method: vset.method,
        normalization: vset.normalization,
        num_layers: vset.num_layers(),
        hidden_dim: vset.hidden_dim(),
        explained_ratios: vset.explained_ratios.clone(),
        orientation_margins: vset.orientation_margins.clone(),
        ambiguous_layers: vset.ambiguous_layers.clone(),
        degenerate_layers: vset.degenerate_layers.clone(),
        sign_convention: "positive mean projection of train pair differences".into(),
        dtype: store::Dtype::F32,
        endianness: store::Endianness::Little,
    };
    fs::write(dir.join(VECTORS_FILE), store::sorted_json(&header)?)?;
    Ok(())
}

/// Reads a vector set; vectors are renormalized after the f32 round trip.
pub fn read_vector_set(dir: &Path) -> Result<ConceptVectorSet> {
    let path = dir.join(VECTORS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.clone() },
        _ => Error::Io(e),
    })?;
    let header: VectorSetHeader = serde_json::from_str(&text)?;
    if header.format_version != store::FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: store::FORMAT_VERSION,
        });
    }
    let mut vectors = Vec::with_capacity(header.num_layers);
    for l in 0..header.num_layers {
        let raw = store::read_f32_shard(&dir.join(vector_shard_name(l)), header.hidden_dim)?;
        store::check_finite(&raw, "concept vector")?;
        let v: Array1<f64> = raw.iter().map(|&x| f64::from(x)).collect();
        let norm = v.dot(&v).sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateDifference);
        }
        vectors.push(v / norm);
    }
    Ok(ConceptVectorSet {
        concept: header.concept,
        checkpoint_label: header.checkpoint_label,
        method: header.method,
        normalization: header.normalization,
        vectors,
        explained_ratios: header.explained_ratios,
        orientation_margins: header.orientation_margins,
        ambiguous_layers: header.ambiguous_layers,
        degenerate_layers: header.degenerate_layers,
    })
}

/// A fitted concept across checkpoints together with the split it used.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub vsets: Vec<ConceptVectorSet>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub split_seed: u64,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitHeader {
    format_version: u32,
    concept: String,
    checkpoint_labels: Vec<String>,
    method: Method,
    normalization: Normalization,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    split_seed: u64,
    train_fraction: f64,
}

pub fn checkpoint_dir_name(checkpoint: usize) -> String {
    format!("ckpt_{checkpoint}")
}

pub fn write_fit(record: &FitRecord, root: &Path) -> Result<()> {
    let first = record
        .vsets
        .first()
        .ok_or_else(|| Error::InvalidConfig("fit record has no checkpoints".into()))?;
    fs::create_dir_all(root)?;
    for (c, vset) in record.vsets.iter().enumerate() {
        write_vector_set(vset, &root.join(checkpoint_dir_name(c)))?;
    }
    let header = FitHeader {
        format_version: store::FORMAT_VERSION,
        concept: first.concept.clone(),
        checkpoint_labels: record.vsets.iter().map(|v| v.checkpoint_label.clone()).collect(),
        method: first.method,
        normalization: first.normalization,
        train_ids: record.train_ids.clone(),
        test_ids: record.test_ids.clone(),
        split_seed: record.split_seed,
        train_fraction: record.train_fraction,
    };
    fs::write(root.join(FIT_FILE), store::sorted_json(&header)?)?;
    Ok(())
}

pub fn read_fit(root: &Path) -> Result<FitRecord> {
    let path = root.join(FIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.clone() },
        _ => Error::Io(e),
    })?;
    let header: FitHeader = serde_json::from_str(&text)?;
    if header.format_version != store::FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: store::FORMAT_VERSION,
        });
    }
    let vsets = (0..header.checkpoint_labels.len())
        .map(|c| read_vector_set(&root.join(checkpoint_dir_name(c))))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitRecord {
        vsets,
        train_ids: header.train_ids,
        test_ids: header.test_ids,
        split_seed: header.split_seed,
        train_fraction: header.train_fraction,
    })
}

//! ID scores, checkpoint-by-layer matrices and the emergence cues derived
//! from them: per-checkpoint entropy over layers, adjacent-layer
//! differences, cross-checkpoint cosine similarity and token-position
//! profiles.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{gather_rows_at, ConceptVectorSet};
use crate::store::{validate_pairing, ActivationDump};

pub const ENTROPY_EPS: f64 = 1e-15;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_SCALE: f64 = 40.0;
pub const DEFAULT_COSINE_THRESHOLD: f64 = 0.3;
/// Spike significance below which a report flags "no emergence": the 0.99
/// quantile over 100 null scenarios (10 checkpoints, 8 layers, 32 test
/// pairs), rounded up. See `synthgen::calibrate_spike_floor`.
pub const DEFAULT_SPIKE_FLOOR: f64 = 3.8;

/// Significance reported when the pooled standard error is zero.
const SIGNIFICANCE_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    GlobalMinmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdMatrix {
    pub concept: String,
    pub model_id: String,
    /// Seed of the dumps the matrix was scored on.
    pub seed: u64,
    pub checkpoint_labels: Vec<String>,
    /// `[checkpoint, layer]` mean ID score over the test pairs.
    pub raw: Array2<f64>,
    /// Global min-max view of `raw`, in `[0, 1]`.
    pub normalized: Array2<f64>,
    /// Standard error of each mean in `raw`.
    pub stderr: Array2<f64>,
    pub n_test: usize,
    pub aggregation: Aggregation,
    pub norm_scheme: NormScheme,
}

impl IdMatrix {
    pub fn from_raw(
        concept: impl Into<String>,
        checkpoint_labels: Vec<String>,
        raw: Array2<f64>,
        stderr: Array2<f64>,
        n_test: usize,
    ) -> Result<Self> {
        if raw.nrows() != checkpoint_labels.len() || raw.dim() != stderr.dim() {
            return Err(Error::Shape(format!(
                "raw {:?}, stderr {:?}, {} labels",
                raw.dim(),
                stderr.dim(),
                checkpoint_labels.len()
            )));
        }
        if raw.iter().chain(stderr.iter()).any(|v| !v.is_finite()) {
            return Err(Error::RejectNonFinite {
                context: "ID matrix".into(),
            });
        }
        Ok(IdMatrix {
            concept: concept.into(),
            model_id: String::new(),
            seed: 0,
            checkpoint_labels,
            normalized: minmax_normalize(raw.view()),
            raw,
            stderr,
            n_test,
            aggregation: Aggregation::Mean,
            norm_scheme: NormScheme::GlobalMinmax,
        })
    }

    pub fn with_provenance(mut self, model_id: impl Into<String>, seed: u64) -> Self {
        self.model_id = model_id.into();
        self.seed = seed;
        self
    }

    pub fn num_checkpoints(&self) -> usize {
        self.raw.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.raw.ncols()
    }

    pub fn raw_csv(&self) -> String {
        matrix_csv(&self.checkpoint_labels, self.raw.view())
    }

    pub fn normalized_csv(&self) -> String {
        matrix_csv(&self.checkpoint_labels, self.normalized.view())
    }
}

/// `(x - min) / (max - min)` over the whole matrix; all 0.5 when flat.
pub fn minmax_normalize(m: ArrayView2<f64>) -> Array2<f64> {
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        m.mapv(|v| ((v - min) / (max - min)).clamp(0.0, 1.0))
    } else {
        Array2::from_elem(m.dim(), 0.5)
    }
}

/// CSV with a header of layer indices and checkpoint labels down the first
/// column.
pub fn matrix_csv(row_labels: &[String], m: ArrayView2<f64>) -> String {
    let mut out = String::from("checkpoint");
    for l in 0..m.ncols() {
        write!(out, ",{l}").unwrap();
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(m.rows()) {
        out.push_str(&csv_field(label));
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Inner products of each row of `test_states[l]` with layer `l`'s vector.
pub fn id_scores(vset: &ConceptVectorSet, test_states: &[ArrayView2<f64>]) -> Result<Vec<Vec<f64>>> {
    if test_states.len() != vset.num_layers() {
        return Err(Error::Shape(format!(
            "{} layers of test states for {} concept vectors",
            test_states.len(),
            vset.num_layers()
        )));
    }
    vset.vectors
        .iter()
        .zip(test_states)
        .map(|(v, states)| {
            if states.ncols() != v.len() {
                return Err(Error::Shape(format!(
                    "test states have dim {}, vector has {}",
                    states.ncols(),
                    v.len()
                )));
            }
            Ok(states.dot(v).to_vec())
        })
        .collect()
}

fn mean_and_stderr(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() < 2 {
        return (mean, 0.0);
    }
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-pair ID score differences `h_pos . v - h_neg . v` for one checkpoint
/// at one token position, per layer.
fn pair_scores(
    vset: &ConceptVectorSet,
    pos: &ActivationDump,
    neg: &ActivationDump,
    checkpoint: usize,
    test_ids: &[usize],
    position: usize,
) -> Result<Vec<Vec<f64>>> {
    let layers = pos.manifest().num_layers;
    let hp: Vec<Array2<f64>> = (0..layers)
        .map(|l| gather_rows_at(pos, checkpoint, l, test_ids, position))
        .collect();
    let hn: Vec<Array2<f64>> = (0..layers)
        .map(|l| gather_rows_at(neg, checkpoint, l, test_ids, position))
        .collect();
    let sp = id_scores(vset, &hp.iter().map(|a| a.view()).collect::<Vec<_>>())?;
    let sn = id_scores(vset, &hn.iter().map(|a| a.view()).collect::<Vec<_>>())?;
    Ok(sp
        .into_iter()
        .zip(sn)
        .map(|(p, n)| p.into_iter().zip(n).map(|(a, b)| a - b).collect())
        .collect())
}

/// Mean test-pair ID score for every (checkpoint, layer).
pub fn build_id_matrix(
    vsets: &[ConceptVectorSet],
    pos: &ActivationDump,
    neg: &ActivationDump,
    test_ids: &[usize],
) -> Result<IdMatrix> {
    validate_pairing(pos, neg)?;
    let m = pos.manifest();
    if test_ids.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(&bad) = test_ids.iter().find(|&&i| i >= m.num_samples) {
        return Err(Error::Index(format!("test id {bad} out of range")));
    }
    if vsets.len() != m.num_checkpoints() {
        return Err(Error::Shape(format!(
            "{} vector sets for {} checkpoints",
            vsets.len(),
            m.num_checkpoints()
        )));
    }
    let position = m.primary_position();
    let mut raw = Array2::zeros((m.num_checkpoints(), m.num_layers));
    let mut stderr = Array2::zeros(raw.dim());
    for (c, vset) in vsets.iter().enumerate() {
        if vset.checkpoint_label != m.checkpoint_labels[c] {
            return Err(Error::Pairing {
                field: "checkpoint_labels",
            });
        }
        let scores = pair_scores(vset, pos, neg, c, test_ids, position)?;
        for (l, s) in scores.iter().enumerate() {
            let (mean, se) = mean_and_stderr(s);
            raw[[c, l]] = mean;
            stderr[[c, l]] = se;
        }
    }
    Ok(
        IdMatrix::from_raw(m.concept.clone(), m.checkpoint_labels.clone(), raw, stderr, test_ids.len())?
            .with_provenance(m.model_id.clone(), m.seed),
    )
}

/// Shannon entropy (nats) of one checkpoint's normalized row, after
/// shifting it to be non-negative.
pub fn entropy_per_checkpoint(m: &IdMatrix, checkpoint: usize) -> Result<f64> {
    if checkpoint >= m.num_checkpoints() {
        return Err(Error::Index(format!("checkpoint {checkpoint} out of range")));
    }
    Ok(row_entropy(m.normalized.row(checkpoint).as_slice().expect("standard layout")))
}

pub fn row_entropy(row: &[f64]) -> f64 {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = row.iter().map(|v| v - min + ENTROPY_EPS).collect();
    let total: f64 = shifted.iter().sum();
    shifted
        .iter()
        .map(|v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

pub fn entropy_series(m: &IdMatrix) -> Vec<f64> {
    (0..m.num_checkpoints())
        .map(|c| row_entropy(m.normalized.row(c).as_slice().expect("standard layout")))
        .collect()
}

/// `I_l - I_{l-1}` along one checkpoint's normalized row.
pub fn layer_diff(m: &IdMatrix, checkpoint: usize) -> Result<Vec<f64>> {
    if m.num_layers() < 2 {
        return Err(Error::TooFewLayers(m.num_layers()));
    }
    if checkpoint >= m.num_checkpoints() {
        return Err(Error::Index(format!("checkpoint {checkpoint} out of range")));
    }
    Ok(adjacent_diffs(m.normalized.row(checkpoint).iter().copied()))
}

fn adjacent_diffs(row: impl Iterator<Item = f64>) -> Vec<f64> {
    let row: Vec<f64> = row.collect();
    row.windows(2).map(|w| w[1] - w[0]).collect()
}

fn cosine(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    let denom = (a.dot(a) * b.dot(b)).sqrt();
    if denom > 0.0 {
        (a.dot(b) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Pairwise cosine similarity of layer `layer`'s vectors across checkpoints.
pub fn cosine_across_checkpoints(vsets: &[ConceptVectorSet], layer: usize) -> Result<Array2<f64>> {
    let vs = layer_vectors(vsets, layer)?;
    let n = vs.len();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        s[[i, i]] = 1.0;
        for j in i + 1..n {
            let c = cosine(vs[i], vs[j]);
            s[[i, j]] = c;
            s[[j, i]] = c;
        }
    }
    Ok(s)
}

fn layer_vectors(vsets: &[ConceptVectorSet], layer: usize) -> Result<Vec<&ndarray::Array1<f64>>> {
    vsets
        .iter()
        .map(|v| {
            v.vectors
                .get(layer)
                .ok_or_else(|| Error::Index(format!("layer {layer} missing from `{}`", v.checkpoint_label)))
        })
        .collect()
}

/// Cosine between adjacent checkpoints' vectors: entry `c - 1` compares
/// checkpoints `c - 1` and `c`.
pub fn adjacent_cosines(vsets: &[ConceptVectorSet], layer: usize) -> Result<Vec<f64>> {
    let vs = layer_vectors(vsets, layer)?;
    Ok(vs.windows(2).map(|w| cosine(w[0], w[1])).collect())
}

/// First checkpoint whose vector's cosine with its predecessor is at most
/// `1 - threshold`. Transitions touching a degenerate placeholder are
/// skipped.
pub fn detect_cosine_drop(vsets: &[ConceptVectorSet], layer: usize, threshold: f64) -> Result<Option<usize>> {
    Ok(detect_cosine_drops(vsets, layer, threshold)?.first().copied())
}

/// Every checkpoint that satisfies the [`detect_cosine_drop`] condition.
pub fn detect_cosine_drops(vsets: &[ConceptVectorSet], layer: usize, threshold: f64) -> Result<Vec<usize>> {
    if vsets.len() < 2 {
        return Err(Error::Shape(format!(
            "cosine drop needs at least 2 checkpoints, got {}",
            vsets.len()
        )));
    }
    let placeholder = |c: usize| vsets[c].degenerate_layers.contains(&layer);
    Ok(adjacent_cosines(vsets, layer)?
        .iter()
        .enumerate()
        .filter(|&(i, &c)| c <= 1.0 - threshold && !placeholder(i) && !placeholder(i + 1))
        .map(|(i, _)| i + 1)
        .collect())
}

/// Mean pair ID score per (token position, layer) at one checkpoint,
/// min-max normalized over the whole profile.
pub fn token_position_profile(
    vset: &ConceptVectorSet,
    pos: &ActivationDump,
    neg: &ActivationDump,
    test_ids: &[usize],
) -> Result<Array2<f64>> {
    validate_pairing(pos, neg)?;
    let m = pos.manifest();
    let positions = m.token_positions.len();
    if positions < 2 {
        return Err(Error::TooFewPositions(positions));
    }
    if test_ids.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let checkpoint = m
        .checkpoint_labels
        .iter()
        .position(|l| *l == vset.checkpoint_label)
        .ok_or_else(|| Error::Provenance(format!("checkpoint `{}` not in dump", vset.checkpoint_label)))?;
    let mut profile = Array2::zeros((positions, m.num_layers));
    for p in 0..positions {
        let scores = pair_scores(vset, pos, neg, checkpoint, test_ids, p)?;
        for (l, s) in scores.iter().enumerate() {
            profile[[p, l]] = mean_and_stderr(s).0;
        }
    }
    Ok(minmax_normalize(profile.view()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub checkpoint: usize,
    pub label: String,
    /// Layer `l` of the largest `I_l - I_{l-1}` at the spike checkpoint.
    pub layer: usize,
    /// Spike height on the normalized matrix.
    pub magnitude: f64,
    /// Spike height on the raw matrix.
    pub raw_magnitude: f64,
    /// Raw height divided by the pooled standard error of the two cells.
    pub significance: f64,
}

/// Checkpoint whose largest adjacent-layer increase is greatest; earliest
/// checkpoint on exact ties.
pub fn detect_spike(m: &IdMatrix) -> Result<Spike> {
    if m.num_layers() < 2 {
        return Err(Error::TooFewLayers(m.num_layers()));
    }
    if m.num_checkpoints() < 2 {
        return Err(Error::Shape(format!(
            "spike detection needs at least 2 checkpoints, got {}",
            m.num_checkpoints()
        )));
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for c in 0..m.num_checkpoints() {
        let diffs = layer_diff(m, c)?;
        let (l, s) = diffs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        if best.is_none_or(|(_, _, b)| s > b) {
            best = Some((c, l + 1, s));
        }
    }
    let (c, l, magnitude) = best.expect("at least one checkpoint");
    let raw_magnitude = m.raw[[c, l]] - m.raw[[c, l - 1]];
    let significance = step_significance(m, c, l);
    Ok(Spike {
        checkpoint: c,
        label: m.checkpoint_labels[c].clone(),
        layer: l,
        magnitude,
        raw_magnitude,
        significance,
    })
}

/// Raw step `I_l - I_{l-1}` over its pooled standard error.
fn step_significance(m: &IdMatrix, c: usize, l: usize) -> f64 {
    let step = m.raw[[c, l]] - m.raw[[c, l - 1]];
    let se = (m.stderr[[c, l]].powi(2) + m.stderr[[c, l - 1]].powi(2)).sqrt();
    if se > 0.0 {
        (step / se).min(SIGNIFICANCE_CAP)
    } else if step > 0.0 {
        SIGNIFICANCE_CAP
    } else {
        0.0
    }
}

/// Earliest checkpoint holding an adjacent-layer step whose significance
/// reaches `floor`.
pub fn detect_onset(m: &IdMatrix, floor: f64) -> Result<Option<usize>> {
    if m.num_layers() < 2 {
        return Err(Error::TooFewLayers(m.num_layers()));
    }
    Ok((0..m.num_checkpoints()).find(|&c| (1..m.num_layers()).any(|l| step_significance(m, c, l) >= floor)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub top_k: usize,
    pub scale: f64,
    pub cosine_threshold: f64,
    pub spike_floor: f64,
    /// Layer used for the cosine-drop cue; defaults to the top-ranked layer.
    pub cosine_layer: Option<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            top_k: DEFAULT_TOP_K,
            scale: DEFAULT_SCALE,
            cosine_threshold: DEFAULT_COSINE_THRESHOLD,
            spike_floor: DEFAULT_SPIKE_FLOOR,
            cosine_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerabilityReport {
    pub concept: String,
    pub model_id: String,
    pub seed: u64,
    pub checkpoint_labels: Vec<String>,
    pub spike_checkpoint: String,
    pub spike_checkpoint_index: usize,
    pub spike_layer: usize,
    pub spike_magnitude: f64,
    pub spike_raw_magnitude: f64,
    pub spike_significance: f64,
    pub spike_floor: f64,
    pub emergence_detected: bool,
    pub cosine_layer: usize,
    pub cosine_threshold: f64,
    pub cosine_drop_checkpoint: Option<String>,
    pub cosine_drop_checkpoints: Vec<String>,
    /// Earliest checkpoint with a significant adjacent-layer step.
    pub onset_checkpoint: Option<String>,
    pub entropy_series: Vec<f64>,
    pub recommended_layers: Vec<usize>,
    pub recommended_scale: f64,
    pub notes: Vec<String>,
}

/// Layers ranked by the final checkpoint's normalized score (ties to the
/// lower layer), best first.
pub fn rank_layers(m: &IdMatrix) -> Vec<usize> {
    let last = m.normalized.row(m.num_checkpoints() - 1);
    let mut layers: Vec<usize> = (0..m.num_layers()).collect();
    layers.sort_by(|&a, &b| last[b].total_cmp(&last[a]).then(a.cmp(&b)));
    layers
}

pub fn make_report(m: &IdMatrix, vsets: &[ConceptVectorSet], config: &ReportConfig) -> Result<SteerabilityReport> {
    if vsets.len() != m.num_checkpoints() {
        return Err(Error::Shape(format!(
            "{} vector sets for {} checkpoints",
            vsets.len(),
            m.num_checkpoints()
        )));
    }
    if !config.scale.is_finite() {
        return Err(Error::InvalidConfig("scale must be finite".into()));
    }
    let spike = detect_spike(m)?;
    let ranked = rank_layers(m);
    let cosine_layer = config.cosine_layer.unwrap_or(ranked[0]);
    if cosine_layer >= m.num_layers() {
        return Err(Error::Index(format!("cosine layer {cosine_layer} out of range")));
    }
    let drops = detect_cosine_drops(vsets, cosine_layer, config.cosine_threshold)?;
    let onset = detect_onset(m, config.spike_floor)?;
    let label = |c: usize| m.checkpoint_labels[c].clone();
    let mut recommended: Vec<usize> = ranked.iter().copied().take(config.top_k.min(m.num_layers())).collect();
    recommended.sort_unstable();
    let emergence = spike.significance >= config.spike_floor;

    let mut notes = vec![
        "spike, cosine-drop and entropy outputs are heuristic cues, not measurements of steerability".to_string(),
        "ID scores: mean over test pairs of (h_pos - h_neg) . v; heatmap uses global min-max normalization".to_string(),
        "recommended layers ranked by final-checkpoint normalized ID score".to_string(),
        format!("vectors oriented by positive-class margin; method {:?}, normalization {:?}", vsets[0].method, vsets[0].normalization),
    ];
    if !emergence {
        notes.push(format!(
            "no emergence: spike significance {:.3} below floor {:.3}",
            spike.significance, config.spike_floor
        ));
    }

    Ok(SteerabilityReport {
        concept: m.concept.clone(),
        model_id: m.model_id.clone(),
        seed: m.seed,
        checkpoint_labels: m.checkpoint_labels.clone(),
        spike_checkpoint: spike.label.clone(),
        spike_checkpoint_index: spike.checkpoint,
        spike_layer: spike.layer,
        spike_magnitude: spike.magnitude,
        spike_raw_magnitude: spike.raw_magnitude,
        spike_significance: spike.significance,
        spike_floor: config.spike_floor,
        emergence_detected: emergence,
        cosine_layer,
        cosine_threshold: config.cosine_threshold,
        cosine_drop_checkpoint: drops.first().map(|&c| label(c)),
        cosine_drop_checkpoints: drops.iter().map(|&c| label(c)).collect(),
        onset_checkpoint: onset.map(label),
        entropy_series: entropy_series(m),
        recommended_layers: recommended,
        recommended_scale: config.scale,
        notes,
    })
}

/// Mean over checkpoints of the adjacent-layer differences, as a
/// `[checkpoint, layer - 1]` matrix.
pub fn layer_diff_matrix(m: &IdMatrix) -> Result<Array2<f64>> {
    if m.num_layers() < 2 {
        return Err(Error::TooFewLayers(m.num_layers()));
    }
    let mut out = Array2::zeros((m.num_checkpoints(), m.num_layers() - 1));
    for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (dst, d) in row.iter_mut().zip(layer_diff(m, c)?) {
            *dst = d;
        }
    }
    Ok(out)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{Method, Normalization};
    use ndarray::{array, Array1};

    fn matrix(raw: Array2<f64>) -> IdMatrix {
        let labels = (0..raw.nrows()).map(|c| format!("c{c}")).collect();
        let se = Array2::zeros(raw.dim());
        IdMatrix::from_raw("t", labels, raw, se, 4).unwrap()
    }

    fn vset(label: &str, vectors: Vec<Array1<f64>>) -> ConceptVectorSet {
        let n = vectors.len();
        ConceptVectorSet {
            concept: "t".into(),
            checkpoint_label: label.into(),
            method: Method::Kmeans,
            normalization: Normalization::None,
            vectors,
            explained_ratios: vec![],
            orientation_margins: vec![1.0; n],
            ambiguous_layers: vec![],
            degenerate_layers: vec![],
        }
    }

    #[test]
    fn dot_product_scores() {
        let vs = vset("a", vec![array![1.0, 0.0]]);
        let h = array![[0.5, 2.0]];
        assert_eq!(id_scores(&vs, &[h.view()]).unwrap(), vec![vec![0.5]]);

        let h = array![3.0, 4.0];
        let vs = vset("a", vec![&h / 5.0]);
        let s = id_scores(&vs, &[h.view().insert_axis(Axis(0))]).unwrap();
        assert!((s[0][0] - 5.0).abs() < 1e-12);

        let vs = vset("a", vec![array![0.0, 1.0]]);
        assert_eq!(id_scores(&vs, &[array![[2.0, 0.0]].view()]).unwrap()[0][0], 0.0);
        assert!(matches!(
            id_scores(&vs, &[array![[2.0, 0.0, 1.0]].view()]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn normalization_views() {
        assert!(matrix(Array2::from_elem((2, 3), 1.7)).normalized.iter().all(|&v| v == 0.5));
        let m = matrix(array![[0.0, 1.6], [2.0, 1.0]]);
        assert!((m.normalized[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn entropy_cases() {
        let m = matrix(array![[0.3, 0.3, 0.3, 0.3], [0.0, 0.0, 1.0, 0.0], [0.1, 0.5, 0.2, 0.7]]);
        let e = entropy_series(&m);
        assert!((e[0] - 4f64.ln()).abs() < 1e-9);
        assert!(e[1].abs() < 1e-9);
        assert!(e[2] >= 0.0 && e[2] <= 4f64.ln());
    }

    #[test]
    fn layer_diffs() {
        let m = matrix(array![[0.0, 0.4, 1.0], [0.0, 0.0, 0.0]]);
        let d = layer_diff(&m, 0).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-12 && (d[1] - 0.6).abs() < 1e-12);
        assert_eq!(layer_diff(&m, 1).unwrap(), vec![0.0, 0.0]);
        let single = matrix(array![[1.0], [2.0]]);
        assert!(matches!(layer_diff(&single, 0), Err(Error::TooFewLayers(1))));
    }

    #[test]
    fn constant_matrix_spike() {
        let s = detect_spike(&matrix(Array2::from_elem((4, 3), 2.0))).unwrap();
        assert_eq!((s.checkpoint, s.magnitude), (0, 0.0));
    }

    #[test]
    fn planted_step() {
        let m = matrix(array![[0.0, 0.0, 0.0, 0.0], [0.0, 0.1, 1.0, 1.0]]);
        let s = detect_spike(&m).unwrap();
        assert_eq!((s.checkpoint, s.layer), (1, 2));
    }

    #[test]
    fn cosine_cases() {
        let e0 = array![1.0, 0.0];
        let e1 = array![0.0, 1.0];
        let sets: Vec<_> = (0..8)
            .map(|c| vset(&format!("c{c}"), vec![if c < 5 { e0.clone() } else { e1.clone() }]))
            .collect();
        assert_eq!(detect_cosine_drop(&sets, 0, 0.3).unwrap(), Some(5));
        let s = cosine_across_checkpoints(&sets, 0).unwrap();
        assert_eq!(s[[0, 1]], 1.0);
        assert_eq!(s[[4, 5]], 0.0);
        assert_eq!(s, s.t());
        let same: Vec<_> = (0..4).map(|c| vset(&format!("c{c}"), vec![e0.clone()])).collect();
        assert_eq!(detect_cosine_drop(&same, 0, 0.3).unwrap(), None);
    }

    #[test]
    fn report_defaults_on_wide_model() {
        let raw = Array2::from_shape_fn((3, 32), |(c, l)| (c * l) as f64 / 64.0);
        let m = matrix(raw);
        let sets: Vec<_> = (0..3)
            .map(|c| vset(&format!("c{c}"), vec![array![1.0, 0.0]; 32]))
            .collect();
        let r = make_report(&m, &sets, &ReportConfig::default()).unwrap();
        assert_eq!(r.recommended_layers, (22..32).collect::<Vec<_>>());
        assert_eq!(r.recommended_scale, 40.0);

        let m3 = matrix(Array2::from_shape_fn((2, 3), |(c, l)| (c + l) as f64));
        let sets3: Vec<_> = (0..2).map(|c| vset(&format!("c{c}"), vec![array![1.0]; 3])).collect();
        let r = make_report(&m3, &sets3, &ReportConfig::default()).unwrap();
        assert_eq!(r.recommended_layers, vec![0, 1, 2]);
    }

    #[test]
    fn csv_layout() {
        let m = matrix(array![[0.0, 1.0], [0.5, 0.25]]);
        assert_eq!(m.raw_csv(), "checkpoint,0,1\nc0,0,1\nc1,0.5,0.25\n");
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        // ranks of y: [1.5, 1.5, 3]; Pearson on ranks by hand
        let r = spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 9.0]).unwrap();
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12);
    }
}

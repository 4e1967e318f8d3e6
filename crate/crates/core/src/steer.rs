//! Activation addition and logit-based multiple-choice scoring.
//!
//! Any backend that can tokenize and return next-token logits with an
//! optional [`InterventionSpec`] applied implements [`Steerable`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{read_vector_set, write_vector_set, ConceptVectorSet};
use crate::stimulus::SupervisedItem;
use crate::store;

pub const INTERVENTION_FILE: &str = "intervention.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    pub concept: String,
    pub vectors: ConceptVectorSet,
    /// Sorted, unique layer indices.
    pub layers: Vec<usize>,
    pub scale: f64,
    pub mode: InterventionMode,
}

impl InterventionSpec {
    pub fn new(vectors: ConceptVectorSet, layers: &[usize], scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::InvalidConfig(format!("scale {scale} is not finite")));
        }
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        if let Some(&l) = layers.iter().find(|&&l| l >= vectors.num_layers()) {
            return Err(Error::Index(format!(
                "intervention layer {l} out of range for {} layers",
                vectors.num_layers()
            )));
        }
        Ok(InterventionSpec {
            concept: vectors.concept.clone(),
            vectors,
            layers,
            scale,
            mode: InterventionMode::Add,
        })
    }

    /// Checks the spec against a target model's shape.
    pub fn validate_for(&self, num_layers: usize, hidden_dim: usize) -> Result<()> {
        if let Some(&l) = self.layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Index(format!(
                "intervention layer {l} out of range for a {num_layers}-layer model"
            )));
        }
        if self.vectors.hidden_dim() != hidden_dim {
            return Err(Error::Shape(format!(
                "intervention vectors have dim {}, model has {hidden_dim}",
                self.vectors.hidden_dim()
            )));
        }
        Ok(())
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.scale != 0.0 && self.layers.binary_search(&layer).is_ok()
    }

    /// `scale * v_layer` as f32, or `None` when the layer is untouched.
    pub fn offset_f32(&self, layer: usize) -> Option<Vec<f32>> {
        self.applies_to(layer)
            .then(|| self.vectors.vectors[layer].iter().map(|&x| (self.scale * x) as f32).collect())
    }
}

/// `activation + scale * v_layer`; layers outside the spec pass through.
pub fn apply_intervention(activation: ArrayView1<f64>, spec: &InterventionSpec, layer: usize) -> Result<Array1<f64>> {
    let v = spec
        .vectors
        .vectors
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} out of range")))?;
    if v.len() != activation.len() {
        return Err(Error::Shape(format!(
            "activation has dim {}, vector has {}",
            activation.len(),
            v.len()
        )));
    }
    if !spec.applies_to(layer) {
        return Ok(activation.to_owned());
    }
    Ok(&activation + &(v * spec.scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionScoring {
    /// Logit of each option's first token at the last prompt position.
    #[default]
    FirstToken,
    /// Summed log-probability of every option token, teacher-forced.
    FullSequence,
}

/// A model that exposes next-token logits with optional steering.
pub trait Steerable {
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn tokenize(&self, text: &str) -> Result<Vec<usize>>;
    /// Logits for the token following `tokens`.
    fn next_token_logits(&self, tokens: &[usize], spec: Option<&InterventionSpec>) -> Result<Vec<f32>>;
}

fn option_scores<M: Steerable + ?Sized>(
    model: &M,
    prompt: &[usize],
    options: &[String],
    spec: Option<&InterventionSpec>,
    scoring: OptionScoring,
) -> Result<Vec<f64>> {
    let option_tokens = options
        .iter()
        .map(|o| {
            let t = model.tokenize(o)?;
            if t.is_empty() {
                return Err(Error::Tokenization(format!("option `{o}` tokenizes to nothing")));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    match scoring {
        OptionScoring::FirstToken => {
            let logits = model.next_token_logits(prompt, spec)?;
            option_tokens
                .iter()
                .map(|t| {
                    logits
                        .get(t[0])
                        .map(|&x| f64::from(x))
                        .ok_or_else(|| Error::Tokenization(format!("token {} outside vocabulary", t[0])))
                })
                .collect()
        }
        OptionScoring::FullSequence => option_tokens
            .iter()
            .map(|t| {
                let mut context = prompt.to_vec();
                let mut total = 0.0;
                for &tok in t {
                    let logits = model.next_token_logits(&context, spec)?;
                    total += log_softmax_at(&logits, tok)?;
                    context.push(tok);
                }
                Ok(total)
            })
            .collect(),
    }
}

fn log_softmax_at(logits: &[f32], index: usize) -> Result<f64> {
    let target = *logits
        .get(index)
        .ok_or_else(|| Error::Tokenization(format!("token {index} outside vocabulary")))?;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = logits.iter().map(|&x| f64::from(x - max).exp()).sum();
    Ok(f64::from(target - max) - sum.ln())
}

/// Index of the highest score; the earliest on exact ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn score_multiple_choice<M: Steerable + ?Sized>(
    model: &M,
    item: &SupervisedItem,
    spec: Option<&InterventionSpec>,
    scoring: OptionScoring,
) -> Result<usize> {
    item.validate()?;
    let prompt = model.tokenize(&item.question)?;
    Ok(argmax_first(&option_scores(model, &prompt, &item.options, spec, scoring)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceEvalResult {
    pub chosen: Vec<usize>,
    pub correct: Vec<bool>,
    pub accuracy: f64,
    pub baseline_chosen: Vec<usize>,
    pub baseline_accuracy: f64,
    pub n_items: usize,
}

/// Accuracy with `spec` applied, and the unsteered baseline.
pub fn eval_accuracy<M: Steerable + ?Sized>(
    model: &M,
    items: &[SupervisedItem],
    spec: Option<&InterventionSpec>,
    scoring: OptionScoring,
) -> Result<ChoiceEvalResult> {
    if items.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(s) = spec {
        s.validate_for(model.num_layers(), model.hidden_dim())?;
    }
    let mut chosen = Vec::with_capacity(items.len());
    let mut baseline_chosen = Vec::with_capacity(items.len());
    for item in items {
        let base = score_multiple_choice(model, item, None, scoring)?;
        baseline_chosen.push(base);
        chosen.push(match spec {
            Some(s) => score_multiple_choice(model, item, Some(s), scoring)?,
            None => base,
        });
    }
    let accuracy_of = |picks: &[usize]| {
        picks.iter().zip(items).filter(|(c, it)| **c == it.answer_index).count() as f64 / items.len() as f64
    };
    let correct = chosen.iter().zip(items).map(|(c, it)| *c == it.answer_index).collect();
    Ok(ChoiceEvalResult {
        accuracy: accuracy_of(&chosen),
        baseline_accuracy: accuracy_of(&baseline_chosen),
        chosen,
        correct,
        baseline_chosen,
        n_items: items.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterventionHeader {
    format_version: u32,
    concept: String,
    layers: Vec<usize>,
    scale: f64,
    mode: InterventionMode,
    checkpoint_label: String,
}

/// Writes the vector set plus `intervention.json` into `dir`.
pub fn write_intervention(spec: &InterventionSpec, dir: &Path) -> Result<()> {
    write_vector_set(&spec.vectors, dir)?;
    let header = InterventionHeader {
        format_version: store::FORMAT_VERSION,
        concept: spec.concept.clone(),
        layers: spec.layers.clone(),
        scale: spec.scale,
        mode: spec.mode,
        checkpoint_label: spec.vectors.checkpoint_label.clone(),
    };
    fs::write(dir.join(INTERVENTION_FILE), store::sorted_json(&header)?)?;
    Ok(())
}

pub fn read_intervention(dir: &Path) -> Result<InterventionSpec> {
    let path = dir.join(INTERVENTION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.clone() },
        _ => Error::Io(e),
    })?;
    let header: InterventionHeader = serde_json::from_str(&text)?;
    if header.format_version != store::FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: store::FORMAT_VERSION,
        });
    }
    let vectors = read_vector_set(dir)?;
    if vectors.concept != header.concept || vectors.checkpoint_label != header.checkpoint_label {
        return Err(Error::Provenance(
            "intervention header does not match its vector set".into(),
        ));
    }
    let mut spec = InterventionSpec::new(vectors, &header.layers, header.scale)?;
    spec.mode = header.mode;
    Ok(spec)
}

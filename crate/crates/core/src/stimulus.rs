//! Contrastive stimulus sets: emotion-style template pairs and
//! correct/incorrect statement pairs for multiple-choice datasets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

/// Emotions with bundled scenario corpora.
pub const BUNDLED_EMOTIONS: [&str; 6] =
    ["happiness", "sadness", "anger", "fear", "disgust", "surprise"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub positive_label: String,
    pub negative_label: String,
    pub kind: ConceptKind,
}

impl Concept {
    pub fn new(
        name: impl Into<String>,
        positive_label: impl Into<String>,
        negative_label: impl Into<String>,
        kind: ConceptKind,
    ) -> Result<Self> {
        let c = Concept {
            name: name.into(),
            positive_label: positive_label.into(),
            negative_label: negative_label.into(),
            kind,
        };
        if c.name.is_empty() {
            return Err(Error::InvalidConfig("concept name is empty".into()));
        }
        if c.positive_label == c.negative_label {
            return Err(Error::InvalidConfig(format!(
                "concept `{}` has identical polarity labels",
                c.name
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioPair {
    pub positive_scenario: String,
    pub negative_scenario: String,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisedItem {
    pub question: String,
    pub correct_answer: String,
    pub incorrect_answer: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

/// One line of a supervised JSON-lines file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedRecord {
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl SupervisedItem {
    /// Builds an item whose incorrect answer is `options[incorrect_index]`.
    pub fn from_record(record: &SupervisedRecord, incorrect_index: usize) -> Result<Self> {
        if record.options.len() < 2 {
            return Err(Error::Index(format!(
                "need at least 2 options, got {}",
                record.options.len()
            )));
        }
        let n = record.options.len();
        if record.answer_index >= n || incorrect_index >= n || incorrect_index == record.answer_index {
            return Err(Error::Index(format!(
                "answer_index {} / incorrect index {incorrect_index} invalid for {n} options",
                record.answer_index
            )));
        }
        Ok(SupervisedItem {
            question: record.question.clone(),
            correct_answer: record.options[record.answer_index].clone(),
            incorrect_answer: record.options[incorrect_index].clone(),
            options: record.options.clone(),
            answer_index: record.answer_index,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Index(format!(
                "need at least 2 options, got {}",
                self.options.len()
            )));
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::Index(format!(
                "answer_index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            )));
        }
        if self.options[self.answer_index] != self.correct_answer {
            return Err(Error::Index(
                "correct_answer does not match options[answer_index]".into(),
            ));
        }
        Ok(())
    }
}

pub fn render_unsupervised(concept: &Concept, pair: &ScenarioPair) -> Result<(String, String)> {
    if concept.kind != ConceptKind::Unsupervised {
        return Err(Error::InvalidConfig(format!(
            "concept `{}` is not unsupervised",
            concept.name
        )));
    }
    if pair.positive_scenario.trim().is_empty() || pair.negative_scenario.trim().is_empty() {
        return Err(Error::EmptyScenario);
    }
    Ok((
        emotion_prompt(&concept.positive_label, &pair.positive_scenario),
        emotion_prompt(&concept.negative_label, &pair.negative_scenario),
    ))
}

fn emotion_prompt(label: &str, scenario: &str) -> String {
    format!("Given the {label} circumstance:\n{scenario}\nThe intensity of {label} is:")
}

pub fn render_supervised(item: &SupervisedItem) -> Result<(String, String)> {
    item.validate()?;
    let pos = format!(
        "Given the statement {} {}, the probability of this statement being true/factual/correct is:",
        item.question, item.correct_answer
    );
    let neg = format!(
        "Given the statement {} {}, the probability of this statement being false/wrong/incorrect is:",
        item.question, item.incorrect_answer
    );
    Ok((pos, neg))
}

/// Seeded partition of `0..set_size` into sorted train and test ids.
pub fn split_train_test(
    set_size: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if set_size < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: set_size,
        });
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n_train = ((train_fraction * set_size as f64).round() as usize).clamp(1, set_size - 1);
    let mut ids: Vec<usize> = (0..set_size).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeDraw {
    /// Negative scenario drawn uniformly (by seed) from the other concepts.
    UniformOther,
    /// Incorrect answer drawn uniformly from the wrong options.
    WrongOption,
    /// Negative prompt built alongside the positive one (a token swap).
    Paired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPair {
    pub id: usize,
    pub positive_prompt: String,
    pub negative_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub concept: Concept,
    pub pairs: Vec<RenderedPair>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
    pub negative_draw: NegativeDraw,
}

impl StimulusSet {
    fn finish(
        concept: Concept,
        pairs: Vec<RenderedPair>,
        seed: u64,
        train_fraction: f64,
        negative_draw: NegativeDraw,
    ) -> Result<Self> {
        let (train_ids, test_ids) = split_train_test(pairs.len(), seed, train_fraction)?;
        Ok(StimulusSet {
            concept,
            pairs,
            train_ids,
            test_ids,
            seed,
            negative_draw,
        })
    }

    /// A set over prompt pairs built elsewhere, ids in input order.
    pub fn from_prompts(
        concept: Concept,
        prompts: Vec<(String, String)>,
        seed: u64,
        train_fraction: f64,
        negative_draw: NegativeDraw,
    ) -> Result<Self> {
        let pairs = prompts
            .into_iter()
            .enumerate()
            .map(|(id, (p, n))| RenderedPair {
                id,
                positive_prompt: p,
                negative_prompt: n,
            })
            .collect();
        Self::finish(concept, pairs, seed, train_fraction, negative_draw)
    }

    /// Checks id uniqueness and that the split is a disjoint cover.
    pub fn validate(&self) -> Result<()> {
        let n = self.pairs.len();
        let mut seen = vec![false; n];
        for p in &self.pairs {
            if p.id >= n || std::mem::replace(&mut seen[p.id], true) {
                return Err(Error::Index(format!("pair id {} duplicated or out of range", p.id)));
            }
        }
        let mut covered = vec![0u8; n];
        for &i in self.train_ids.iter().chain(&self.test_ids) {
            if i >= n {
                return Err(Error::Index(format!("split id {i} out of range")));
            }
            covered[i] += 1;
        }
        if covered.iter().any(|&c| c != 1) {
            return Err(Error::InvalidConfig("train and test ids must partition the pairs".into()));
        }
        Ok(())
    }

    pub fn positive_prompts(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.positive_prompt.as_str()).collect()
    }

    pub fn negative_prompts(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.negative_prompt.as_str()).collect()
    }
}

/// A named pool of scenarios used as the negative side of emotion pairs.
#[derive(Debug, Clone)]
pub struct ScenarioPool {
    pub label: String,
    pub scenarios: Vec<String>,
}

/// Builds `size` emotion pairs: positive scenarios are sampled without
/// replacement (cycling when exhausted), each negative side draws a pool
/// uniformly and a scenario uniformly within it.
pub fn build_unsupervised_set(
    concept_label: &str,
    positives: &[String],
    negative_pools: &[ScenarioPool],
    size: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<StimulusSet> {
    if positives.is_empty() || negative_pools.iter().all(|p| p.scenarios.is_empty()) {
        return Err(Error::EmptyScenario);
    }
    let pools: Vec<&ScenarioPool> = negative_pools
        .iter()
        .filter(|p| !p.scenarios.is_empty() && p.label != concept_label)
        .collect();
    if pools.is_empty() {
        return Err(Error::InvalidConfig("no negative scenario pools".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(size);
    for id in 0..size {
        let pool = pools[rng.random_range(0..pools.len())];
        let neg = &pool.scenarios[rng.random_range(0..pool.scenarios.len())];
        let concept = Concept::new(
            concept_label,
            concept_label,
            pool.label.as_str(),
            ConceptKind::Unsupervised,
        )?;
        let pair = ScenarioPair {
            positive_scenario: positives[order[id % order.len()]].clone(),
            negative_scenario: neg.clone(),
            id,
        };
        let (p, n) = render_unsupervised(&concept, &pair)?;
        pairs.push(RenderedPair {
            id,
            positive_prompt: p,
            negative_prompt: n,
        });
    }
    let concept = Concept::new(concept_label, concept_label, "other", ConceptKind::Unsupervised)?;
    StimulusSet::finish(concept, pairs, seed, train_fraction, NegativeDraw::UniformOther)
}

/// Builds one correct/incorrect pair per record, drawing the incorrect
/// option uniformly among the wrong ones.
pub fn build_supervised_set(
    name: &str,
    records: &[SupervisedRecord],
    seed: u64,
    train_fraction: f64,
) -> Result<StimulusSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut pairs = Vec::with_capacity(records.len());
    for (id, record) in records.iter().enumerate() {
        if record.options.len() < 2 {
            return Err(Error::Index(format!(
                "record {id}: need at least 2 options, got {}",
                record.options.len()
            )));
        }
        let mut wrong = rng.random_range(0..record.options.len() - 1);
        if wrong >= record.answer_index {
            wrong += 1;
        }
        let item = SupervisedItem::from_record(record, wrong)?;
        let (p, n) = render_supervised(&item)?;
        pairs.push(RenderedPair {
            id,
            positive_prompt: p,
            negative_prompt: n,
        });
    }
    let concept = Concept::new(name, "correct", "incorrect", ConceptKind::Supervised)?;
    StimulusSet::finish(concept, pairs, seed, train_fraction, NegativeDraw::WrongOption)
}

pub const STIMULUS_FILE: &str = "stimuli.json";

pub fn write_stimulus_set(set: &StimulusSet, path: &Path) -> Result<()> {
    set.validate()?;
    fs::write(path, crate::store::sorted_json(set)?)?;
    Ok(())
}

pub fn read_stimulus_set(path: &Path) -> Result<StimulusSet> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.to_path_buf() },
        _ => Error::Io(e),
    })?;
    let set: StimulusSet = serde_json::from_str(&text)?;
    set.validate()?;
    Ok(set)
}

/// Parses a scenario file: one scenario per line, `#` comments and blank
/// lines ignored.
pub fn parse_scenarios(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn parse_supervised_jsonl(text: &str) -> Result<Vec<SupervisedRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Bundled scenarios for one of [`BUNDLED_EMOTIONS`].
pub fn bundled_scenarios(emotion: &str) -> Option<Vec<String>> {
    let text = match emotion {
        "happiness" => include_str!("../data/scenarios/happiness.txt"),
        "sadness" => include_str!("../data/scenarios/sadness.txt"),
        "anger" => include_str!("../data/scenarios/anger.txt"),
        "fear" => include_str!("../data/scenarios/fear.txt"),
        "disgust" => include_str!("../data/scenarios/disgust.txt"),
        "surprise" => include_str!("../data/scenarios/surprise.txt"),
        _ => return None,
    };
    Some(parse_scenarios(text))
}

/// Emotion pairs for `emotion` against the other bundled emotions.
pub fn bundled_emotion_set(
    emotion: &str,
    size: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<StimulusSet> {
    let positives = bundled_scenarios(emotion)
        .ok_or_else(|| Error::InvalidConfig(format!("no bundled scenarios for `{emotion}`")))?;
    let pools: Vec<ScenarioPool> = BUNDLED_EMOTIONS
        .iter()
        .filter(|e| **e != emotion)
        .map(|e| ScenarioPool {
            label: e.to_string(),
            scenarios: bundled_scenarios(e).unwrap_or_default(),
        })
        .collect();
    build_unsupervised_set(emotion, &positives, &pools, size, seed, train_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn happy() -> Concept {
        Concept::new("happiness", "happiness", "sadness", ConceptKind::Unsupervised).unwrap()
    }

    #[test]
    fn compliment_prompt() {
        let pair = ScenarioPair {
            positive_scenario: "You receive an unexpected compliment from a friend.".into(),
            negative_scenario: "You see an old photograph that reminds you of someone you lost."
                .into(),
            id: 0,
        };
        let (p, n) = render_unsupervised(&happy(), &pair).unwrap();
        assert_eq!(
            p,
            "Given the happiness circumstance:\nYou receive an unexpected compliment from a friend.\nThe intensity of happiness is:"
        );
        assert!(n.starts_with("Given the sadness circumstance:\n"));
        assert!(n.ends_with("\nThe intensity of sadness is:"));
    }

    #[test]
    fn empty_scenario_rejected() {
        let pair = ScenarioPair {
            positive_scenario: "".into(),
            negative_scenario: "x".into(),
            id: 0,
        };
        assert!(matches!(render_unsupervised(&happy(), &pair), Err(Error::EmptyScenario)));
    }

    #[test]
    fn supervised_templates() {
        let item = SupervisedItem {
            question: "The sun rises in the".into(),
            correct_answer: "east".into(),
            incorrect_answer: "west".into(),
            options: vec!["east".into(), "west".into()],
            answer_index: 0,
        };
        let (p, n) = render_supervised(&item).unwrap();
        assert_eq!(
            p,
            "Given the statement The sun rises in the east, the probability of this statement being true/factual/correct is:"
        );
        assert_eq!(
            n,
            "Given the statement The sun rises in the west, the probability of this statement being false/wrong/incorrect is:"
        );
    }

    #[test]
    fn single_option_rejected() {
        let item = SupervisedItem {
            question: "q".into(),
            correct_answer: "a".into(),
            incorrect_answer: "b".into(),
            options: vec!["a".into()],
            answer_index: 0,
        };
        assert!(matches!(render_supervised(&item), Err(Error::Index(_))));
    }

    #[test]
    fn split_counts() {
        let (train, test) = split_train_test(256, 7, 0.5).unwrap();
        assert_eq!((train.len(), test.len()), (128, 128));
        assert_eq!(split_train_test(256, 7, 0.5).unwrap(), (train, test));

        let (a, b) = split_train_test(4, 99, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (2, 2));
        let all: BTreeSet<usize> = a.iter().chain(&b).copied().collect();
        assert_eq!(all, (0..4).collect());

        assert!(matches!(split_train_test(1, 0, 0.5), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn bundled_corpora_are_large_enough() {
        for e in BUNDLED_EMOTIONS {
            assert!(bundled_scenarios(e).unwrap().len() >= 64, "{e}");
        }
    }

    #[test]
    fn emotion_set_uses_other_labels() {
        let set = bundled_emotion_set("happiness", 32, 3, 0.5).unwrap();
        assert_eq!(set.pairs.len(), 32);
        for p in &set.pairs {
            assert!(p.positive_prompt.starts_with("Given the happiness circumstance:"));
            assert!(!p.negative_prompt.contains("happiness"));
        }
        assert_eq!(set, bundled_emotion_set("happiness", 32, 3, 0.5).unwrap());
    }

    #[test]
    fn jsonl_schema() {
        let text = r#"{"question": "2+2 =", "options": ["3", "4", "5"], "answer_index": 1}
{"question": "Sky is", "options": ["blue", "green"], "answer_index": 0}
"#;
        let recs = parse_supervised_jsonl(text).unwrap();
        let set = build_supervised_set("arith", &recs, 1, 0.5).unwrap();
        assert!(set.pairs[0].positive_prompt.contains("2+2 = 4,"));
        assert!(!set.pairs[0].negative_prompt.contains("2+2 = 4,"));
        assert!(parse_supervised_jsonl(r#"{"question": "q", "options": [], "answer_index": 0, "x": 1}"#).is_err());
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 2usize..300, seed in any::<u64>(), f in 0.05f64..0.95) {
            let (train, test) = split_train_test(n, seed, f).unwrap();
            let tr: BTreeSet<usize> = train.iter().copied().collect();
            let te: BTreeSet<usize> = test.iter().copied().collect();
            prop_assert!(tr.is_disjoint(&te));
            prop_assert_eq!(tr.len() + te.len(), n);
            let expected = ((f * n as f64).round() as usize).clamp(1, n - 1);
            prop_assert_eq!(train.len(), expected);
        }

        #[test]
        fn template_skeleton_shared(pos in "[a-z]{3,12}( [a-z]{3,12}){0,3}", neg in "[a-z]{3,12}( [a-z]{3,12}){0,3}") {
            let pair = ScenarioPair { positive_scenario: pos.clone(), negative_scenario: neg.clone(), id: 0 };
            let (p, n) = render_unsupervised(&happy(), &pair).unwrap();
            let lp: Vec<&str> = p.split('\n').collect();
            let ln: Vec<&str> = n.split('\n').collect();
            prop_assert_eq!(lp.len(), 3);
            prop_assert_eq!(ln.len(), 3);
            prop_assert_eq!(lp[1], pos.as_str());
            prop_assert_eq!(ln[1], neg.as_str());
            for i in [0, 2] {
                prop_assert_eq!(lp[i].replace("happiness", "{L}"), ln[i].replace("sadness", "{L}"));
            }
        }
    }
}

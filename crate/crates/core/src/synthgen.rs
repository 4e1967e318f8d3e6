//! Synthetic activation dumps with planted emergence: a concept direction
//! that switches on at a known checkpoint in a known set of layers, with
//! optional rotations, under Gaussian noise. The gold labels are the
//! ground truth every detector is scored against.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{fit_concept, ConceptVectorSet, FitOptions};
use crate::metrics::{build_id_matrix, make_report, IdMatrix, ReportConfig, SteerabilityReport};
use crate::stimulus::split_train_test;
use crate::store::{self, ActivationDump, Manifest, Polarity};

pub const MODEL_ID: &str = "synthgen";
pub const GOLD_FILE: &str = "gold.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationEvent {
    pub checkpoint: usize,
    pub angle_degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmergenceScenario {
    pub num_checkpoints: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_samples: usize,
    pub onset_checkpoint: usize,
    pub signal_layers: BTreeSet<usize>,
    /// Gain `g_c` per checkpoint.
    pub gain_schedule: Vec<f64>,
    #[serde(default)]
    pub rotation_events: Vec<RotationEvent>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// The signal lives only at `-1` (or the last listed position).
    #[serde(default = "default_positions")]
    pub token_positions: Vec<i64>,
}

fn default_positions() -> Vec<i64> {
    vec![-1]
}

/// Gains that are zero before `onset` and rise linearly to `peak` over
/// `ramp_len` checkpoints starting at `onset`.
pub fn ramp_schedule(num_checkpoints: usize, onset: usize, ramp_len: usize, peak: f64) -> Vec<f64> {
    let ramp_len = ramp_len.max(1);
    (0..num_checkpoints)
        .map(|c| {
            if c < onset {
                0.0
            } else {
                peak * ((c - onset + 1).min(ramp_len) as f64) / ramp_len as f64
            }
        })
        .collect()
}

impl EmergenceScenario {
    /// Ramp scenario with the signal in the upper half of the layers.
    pub fn ramp(
        num_checkpoints: usize,
        num_layers: usize,
        hidden_dim: usize,
        num_samples: usize,
        onset: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        EmergenceScenario {
            num_checkpoints,
            num_layers,
            hidden_dim,
            num_samples,
            onset_checkpoint: onset,
            signal_layers: (num_layers / 2..num_layers).collect(),
            gain_schedule: ramp_schedule(num_checkpoints, onset, 4, 2.0),
            rotation_events: Vec::new(),
            noise_sigma,
            seed,
            token_positions: default_positions(),
        }
    }

    /// Pure-noise scenario: every gain is zero.
    pub fn null(num_checkpoints: usize, num_layers: usize, hidden_dim: usize, num_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut s = Self::ramp(num_checkpoints, num_layers, hidden_dim, num_samples, 0, noise_sigma, seed);
        s.gain_schedule = vec![0.0; num_checkpoints];
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_checkpoints == 0 || self.num_layers == 0 || self.hidden_dim == 0 || self.num_samples == 0 {
            return bad("scenario dimensions must all be >= 1".into());
        }
        if self.onset_checkpoint >= self.num_checkpoints {
            return bad(format!("onset {} out of range", self.onset_checkpoint));
        }
        if self.signal_layers.is_empty() {
            return bad("signal_layers is empty".into());
        }
        if let Some(&l) = self.signal_layers.iter().find(|&&l| l >= self.num_layers) {
            return bad(format!("signal layer {l} out of range"));
        }
        if self.gain_schedule.len() != self.num_checkpoints {
            return bad(format!(
                "gain schedule has {} entries for {} checkpoints",
                self.gain_schedule.len(),
                self.num_checkpoints
            ));
        }
        if self.gain_schedule.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad("gains must be finite and non-negative".into());
        }
        if self.gain_schedule[..self.onset_checkpoint].iter().any(|&g| g != 0.0) {
            return bad("gains must be zero before onset".into());
        }
        if self.gain_schedule[self.onset_checkpoint..].windows(2).any(|w| w[1] < w[0]) {
            return bad("gains must be non-decreasing after onset".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        for e in &self.rotation_events {
            if e.checkpoint == 0 || e.checkpoint >= self.num_checkpoints || !e.angle_degrees.is_finite() {
                return bad(format!("rotation at checkpoint {} is invalid", e.checkpoint));
            }
        }
        if self.rotation_events.windows(2).any(|w| w[1].checkpoint <= w[0].checkpoint) {
            return bad("rotation events must have increasing checkpoints".into());
        }
        if self.hidden_dim < 2 && !self.rotation_events.is_empty() {
            return bad("rotations need hidden_dim >= 2".into());
        }
        if self.token_positions.is_empty() {
            return bad("token_positions is empty".into());
        }
        Ok(())
    }

    pub fn checkpoint_labels(&self) -> Vec<String> {
        let n = self.num_checkpoints;
        (0..n)
            .map(|c| {
                if n <= 100 {
                    format!("{}%", (c + 1) * 100 / n)
                } else {
                    format!("step{c}")
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldLabels {
    pub seed: u64,
    pub checkpoint_labels: Vec<String>,
    pub onset_checkpoint: usize,
    pub signal_layers: BTreeSet<usize>,
    pub rotation_checkpoints: Vec<usize>,
    pub gain_schedule: Vec<f64>,
    /// Planted unit direction `u_c` per checkpoint.
    pub directions: Vec<Vec<f64>>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn planted_directions(s: &EmergenceScenario, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let mut u = gaussian_unit(rng, s.hidden_dim);
    let mut out = Vec::with_capacity(s.num_checkpoints);
    for c in 0..s.num_checkpoints {
        if let Some(e) = s.rotation_events.iter().find(|e| e.checkpoint == c) {
            // Unit vector orthogonal to the current direction.
            let w = loop {
                let r = gaussian_unit(rng, s.hidden_dim);
                let w = &r - &(&u * r.dot(&u));
                let n = w.dot(&w).sqrt();
                if n > 1e-6 {
                    break w / n;
                }
            };
            let theta = e.angle_degrees.to_radians();
            u = &u * theta.cos() + &w * theta.sin();
            u /= u.dot(&u).sqrt();
        }
        out.push(u.clone());
    }
    out
}

/// Draws the positive and negative dumps plus the gold labels.
pub fn generate(s: &EmergenceScenario) -> Result<(ActivationDump, ActivationDump, GoldLabels)> {
    s.validate()?;
    let mut dir_rng = ChaCha8Rng::seed_from_u64(s.seed);
    let directions = planted_directions(s, &mut dir_rng);
    let labels = s.checkpoint_labels();
    let mut manifest = Manifest::new(
        MODEL_ID,
        labels.clone(),
        s.num_layers,
        s.hidden_dim,
        s.num_samples,
        Polarity::Positive,
        "planted",
        s.seed,
    );
    manifest.token_positions = s.token_positions.clone();
    let signal_position = manifest.primary_position();
    let positions = s.token_positions.len();

    let mut dumps = Vec::with_capacity(2);
    for (stream, polarity, sign) in [(1u64, Polarity::Positive, 1.0), (2, Polarity::Negative, -1.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(stream);
        let mut m = manifest.clone();
        m.polarity = polarity;
        let dump = ActivationDump::from_shards(m, |c, l| {
            let signal = s.signal_layers.contains(&l) && s.gain_schedule[c] > 0.0;
            let shift = &directions[c] * (sign * s.gain_schedule[c]);
            let mut shard = Vec::with_capacity(s.num_samples * positions * s.hidden_dim);
            for _ in 0..s.num_samples {
                for p in 0..positions {
                    for k in 0..s.hidden_dim {
                        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * s.noise_sigma;
                        let base = if signal && p == signal_position { shift[k] } else { 0.0 };
                        shard.push((base + noise) as f32);
                    }
                }
            }
            Ok(shard)
        })?;
        dumps.push(dump);
    }
    let neg = dumps.pop().expect("two dumps");
    let pos = dumps.pop().expect("two dumps");
    let gold = GoldLabels {
        seed: s.seed,
        checkpoint_labels: labels,
        onset_checkpoint: s.onset_checkpoint,
        signal_layers: s.signal_layers.clone(),
        rotation_checkpoints: s.rotation_events.iter().map(|e| e.checkpoint).collect(),
        gain_schedule: s.gain_schedule.clone(),
        directions: directions.iter().map(|d| d.to_vec()).collect(),
    };
    Ok((pos, neg, gold))
}

/// Writes `pos/`, `neg/`, `scenario.json` and `gold.json` under `root`.
pub fn write_scenario(s: &EmergenceScenario, root: &Path) -> Result<GoldLabels> {
    let (pos, neg, gold) = generate(s)?;
    fs::create_dir_all(root)?;
    store::write_dump(&pos, &root.join("pos"))?;
    store::write_dump(&neg, &root.join("neg"))?;
    fs::write(root.join("scenario.json"), store::sorted_json(s)?)?;
    fs::write(root.join(GOLD_FILE), store::sorted_json(&gold)?)?;
    Ok(gold)
}

pub fn read_gold(path: &Path) -> Result<GoldLabels> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldScore {
    /// Detected spike checkpoint minus the planted onset.
    pub spike_offset: i64,
    /// Detected onset cue minus the planted onset, when an onset was found.
    pub onset_offset: Option<i64>,
    pub layer_recall: f64,
    pub layer_precision: f64,
    pub rotation_hits: usize,
    pub rotation_misses: usize,
    pub rotation_false_alarms: usize,
    pub emergence_detected: bool,
}

impl GoldScore {
    pub fn spike_within(&self, tolerance: usize) -> bool {
        self.spike_offset.unsigned_abs() as usize <= tolerance
    }
}

pub fn gold_check(report: &SteerabilityReport, gold: &GoldLabels) -> Result<GoldScore> {
    if report.seed != gold.seed {
        return Err(Error::Provenance(format!(
            "report seed {} does not match gold seed {}",
            report.seed, gold.seed
        )));
    }
    if report.checkpoint_labels != gold.checkpoint_labels {
        return Err(Error::Provenance("checkpoint labels differ from gold".into()));
    }
    let index = |label: &str| {
        report
            .checkpoint_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Provenance(format!("unknown checkpoint `{label}` in report")))
    };
    let onset = gold.onset_checkpoint as i64;
    let spike_offset = index(&report.spike_checkpoint)? as i64 - onset;
    let onset_offset = match &report.onset_checkpoint {
        Some(l) => Some(index(l)? as i64 - onset),
        None => None,
    };
    let recommended: BTreeSet<usize> = report.recommended_layers.iter().copied().collect();
    let hit_layers = recommended.intersection(&gold.signal_layers).count() as f64;
    let drops = report
        .cosine_drop_checkpoints
        .iter()
        .map(|l| index(l))
        .collect::<Result<BTreeSet<_>>>()?;
    let planted: BTreeSet<usize> = gold.rotation_checkpoints.iter().copied().collect();
    let rotation_hits = drops.intersection(&planted).count();
    Ok(GoldScore {
        spike_offset,
        onset_offset,
        layer_recall: hit_layers / gold.signal_layers.len() as f64,
        layer_precision: if recommended.is_empty() {
            0.0
        } else {
            hit_layers / recommended.len() as f64
        },
        rotation_hits,
        rotation_misses: planted.len() - rotation_hits,
        rotation_false_alarms: drops.len() - rotation_hits,
        emergence_detected: report.emergence_detected,
    })
}

/// Everything produced by one run of the detector on a scenario.
#[derive(Debug, Clone)]
pub struct DetectorRun {
    pub gold: GoldLabels,
    pub vsets: Vec<ConceptVectorSet>,
    pub matrix: IdMatrix,
    pub report: SteerabilityReport,
    pub score: GoldScore,
}

/// Split, fit, score and report on a freshly generated scenario. The split
/// seed is the scenario seed.
pub fn run_detector(s: &EmergenceScenario, fit: FitOptions, config: &ReportConfig) -> Result<DetectorRun> {
    let (pos, neg, gold) = generate(s)?;
    let (train, test) = split_train_test(s.num_samples, s.seed, crate::stimulus::DEFAULT_TRAIN_FRACTION)?;
    let vsets = fit_concept(&pos, &neg, &train, fit)?;
    let matrix = build_id_matrix(&vsets, &pos, &neg, &test)?;
    let report = make_report(&matrix, &vsets, config)?;
    let score = gold_check(&report, &gold)?;
    Ok(DetectorRun {
        gold,
        vsets,
        matrix,
        report,
        score,
    })
}

/// Nearest-rank `quantile` of a sorted sample.
fn nearest_rank(sorted: &[f64], quantile: f64) -> f64 {
    let rank = (quantile * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// The nearest-rank `quantile` of spike significances over the given null
/// scenarios.
pub fn calibrate_spike_floor(nulls: &[EmergenceScenario], fit: FitOptions, quantile: f64) -> Result<f64> {
    if nulls.is_empty() || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidConfig("calibration needs scenarios and a quantile in [0, 1]".into()));
    }
    let config = ReportConfig::default();
    let mut sig = nulls
        .iter()
        .map(|s| run_detector(s, fit, &config).map(|r| r.report.spike_significance))
        .collect::<Result<Vec<_>>>()?;
    sig.sort_by(f64::total_cmp);
    Ok(nearest_rank(&sig, quantile))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Ramp scenarios and evaluation nulls use seeds `seed_start..seed_start + runs`.
    pub runs: usize,
    pub seed_start: u64,
    /// Calibration nulls use seeds `null_seed_start..null_seed_start + null_runs`.
    pub null_runs: usize,
    pub null_seed_start: u64,
    pub quantile: f64,
    /// Fixed floor; calibrated from the calibration nulls when absent.
    pub spike_floor: Option<f64>,
    pub noise_sigma: f64,
    pub num_checkpoints: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_samples: usize,
    pub ramp_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            runs: 100,
            seed_start: 0,
            null_runs: 100,
            null_seed_start: 1000,
            quantile: 0.99,
            spike_floor: None,
            noise_sigma: 0.5,
            num_checkpoints: 10,
            num_layers: 8,
            hidden_dim: 64,
            num_samples: 64,
            ramp_len: 4,
        }
    }
}

impl BenchConfig {
    /// Planted onset for a seed; late enough to leave a clean prefix and
    /// early enough for the ramp to finish.
    pub fn onset_for(&self, seed: u64) -> usize {
        let span = self.num_checkpoints.saturating_sub(self.ramp_len).max(1) as u64;
        (1 + seed % span) as usize
    }

    pub fn ramp_scenario(&self, seed: u64) -> EmergenceScenario {
        let onset = self.onset_for(seed).min(self.num_checkpoints - 1);
        let mut s = EmergenceScenario::ramp(
            self.num_checkpoints,
            self.num_layers,
            self.hidden_dim,
            self.num_samples,
            onset,
            self.noise_sigma,
            seed,
        );
        s.gain_schedule = ramp_schedule(self.num_checkpoints, onset, self.ramp_len, 2.0);
        s
    }

    pub fn null_scenario(&self, seed: u64) -> EmergenceScenario {
        EmergenceScenario::null(
            self.num_checkpoints,
            self.num_layers,
            self.hidden_dim,
            self.num_samples,
            self.noise_sigma,
            seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub seed: u64,
    pub onset_checkpoint: Option<usize>,
    pub spike_checkpoint: usize,
    pub spike_offset: Option<i64>,
    pub onset_cue_offset: Option<i64>,
    pub spike_significance: f64,
    pub emergence_detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub spike_floor: f64,
    pub floor_calibrated: bool,
    pub ramp_runs: Vec<BenchRun>,
    pub null_runs: Vec<BenchRun>,
    /// Ramp runs whose spike lies within one checkpoint of the onset.
    pub spike_within_one: usize,
    /// Ramp runs whose onset cue lies within one checkpoint of the onset.
    pub onset_cue_within_one: usize,
    /// Evaluation nulls reported without emergence.
    pub null_no_emergence: usize,
}

fn bench_run(run: &DetectorRun, onset: Option<usize>) -> BenchRun {
    let index = |label: &Option<String>| {
        label
            .as_ref()
            .and_then(|l| run.report.checkpoint_labels.iter().position(|x| x == l))
    };
    let spike = run.report.spike_checkpoint_index;
    let cue = index(&run.report.onset_checkpoint);
    BenchRun {
        seed: run.gold.seed,
        onset_checkpoint: onset,
        spike_checkpoint: spike,
        spike_offset: onset.map(|o| spike as i64 - o as i64),
        onset_cue_offset: onset.and_then(|o| cue.map(|c| c as i64 - o as i64)),
        spike_significance: run.report.spike_significance,
        emergence_detected: run.report.emergence_detected,
    }
}

/// Detector recovery on ramp scenarios and false-positive control on
/// pure-noise scenarios, with the floor calibrated on disjoint seeds.
pub fn bench(config: &BenchConfig, fit: FitOptions) -> Result<BenchReport> {
    if config.runs == 0 {
        return Err(Error::InvalidConfig("bench needs at least one run".into()));
    }
    let (spike_floor, floor_calibrated) = match config.spike_floor {
        Some(f) => (f, false),
        None => {
            let nulls: Vec<EmergenceScenario> = (0..config.null_runs as u64)
                .map(|i| config.null_scenario(config.null_seed_start + i))
                .collect();
            (calibrate_spike_floor(&nulls, fit, config.quantile)?, true)
        }
    };
    let report_config = ReportConfig {
        spike_floor,
        ..Default::default()
    };
    let seeds = config.seed_start..config.seed_start + config.runs as u64;
    let ramp_runs = seeds
        .clone()
        .map(|seed| {
            let s = config.ramp_scenario(seed);
            run_detector(&s, fit, &report_config).map(|r| bench_run(&r, Some(s.onset_checkpoint)))
        })
        .collect::<Result<Vec<_>>>()?;
    let null_runs = seeds
        .map(|seed| run_detector(&config.null_scenario(seed), fit, &report_config).map(|r| bench_run(&r, None)))
        .collect::<Result<Vec<_>>>()?;
    let within = |o: Option<i64>| o.is_some_and(|o| o.abs() <= 1);
    Ok(BenchReport {
        spike_within_one: ramp_runs.iter().filter(|r| within(r.spike_offset)).count(),
        onset_cue_within_one: ramp_runs.iter().filter(|r| within(r.onset_cue_offset)).count(),
        null_no_emergence: null_runs.iter().filter(|r| !r.emergence_detected).count(),
        config: config.clone(),
        spike_floor,
        floor_calibrated,
        ramp_runs,
        null_runs,
    })
}

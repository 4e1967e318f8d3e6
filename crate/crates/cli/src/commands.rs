use std::fs;
use std::path::Path;

use steerscope::extract::{fit_concept, read_fit, write_fit, FitOptions, FitRecord};
use steerscope::metrics::{
    build_id_matrix, cosine_across_checkpoints, layer_diff_matrix, make_report, matrix_csv, token_position_profile,
    ReportConfig, SteerabilityReport,
};
use steerscope::plot::{PlotSpec, Series};
use steerscope::steer::{write_intervention, InterventionSpec};
use steerscope::stimulus::{
    build_supervised_set, build_unsupervised_set, bundled_emotion_set, parse_scenarios, parse_supervised_jsonl,
    split_train_test, write_stimulus_set, ScenarioPool,
};
use steerscope::store::{read_dump, validate_pairing};
use steerscope::synthgen::{self, ramp_schedule, write_scenario, BenchConfig, EmergenceScenario};
use steerscope::{Error, Result};

use crate::output::{write_json, write_svg, write_text};
use crate::{BenchArgs, FitArgs, RenderArgs, ReportArgs, SpecArgs, SynthArgs, ValidateArgs};

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingShard { path: path.to_path_buf() },
        _ => Error::Io(e),
    })
}

pub fn render(a: RenderArgs) -> Result<()> {
    let set = if let Some(emotion) = &a.emotion {
        bundled_emotion_set(emotion, a.size, a.seed, a.train_fraction)?
    } else if let Some(path) = &a.scenarios {
        let positives = parse_scenarios(&read_text(path)?);
        let pools = a
            .negatives
            .iter()
            .map(|p| {
                Ok(ScenarioPool {
                    label: file_stem(p),
                    scenarios: parse_scenarios(&read_text(p)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let concept = a.concept.clone().unwrap_or_else(|| file_stem(path));
        build_unsupervised_set(&concept, &positives, &pools, a.size, a.seed, a.train_fraction)?
    } else if let Some(path) = &a.supervised {
        let records = parse_supervised_jsonl(&read_text(path)?)?;
        let concept = a.concept.clone().unwrap_or_else(|| file_stem(path));
        build_supervised_set(&concept, &records, a.seed, a.train_fraction)?
    } else {
        return Err(Error::InvalidConfig(
            "one of --emotion, --scenarios or --supervised is required".into(),
        ));
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_stimulus_set(&set, &a.out)?;
    println!(
        "{} pairs for `{}` ({} train / {} test)",
        set.pairs.len(),
        set.concept.name,
        set.train_ids.len(),
        set.test_ids.len()
    );
    Ok(())
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let dump = read_dump(&a.dump)?;
    let m = dump.manifest();
    println!(
        "ok: {} checkpoints x {} layers, {} samples x {} positions, dim {}, concept `{}`, {:?}",
        m.num_checkpoints(),
        m.num_layers,
        m.num_samples,
        m.token_positions.len(),
        m.hidden_dim,
        m.concept,
        m.polarity
    );
    if let Some(pair) = &a.pair {
        validate_pairing(&dump, &read_dump(pair)?)?;
        println!("ok: pairing");
    }
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<()> {
    let pos = read_dump(&a.pos)?;
    let neg = read_dump(&a.neg)?;
    validate_pairing(&pos, &neg)?;
    let (train_ids, test_ids) = split_train_test(pos.manifest().num_samples, a.split_seed, a.train_fraction)?;
    let opts = FitOptions {
        method: a.method.into(),
        normalization: a.normalization.into(),
        allow_degenerate: a.allow_degenerate,
    };
    let vsets = fit_concept(&pos, &neg, &train_ids, opts)?;
    let record = FitRecord {
        vsets,
        train_ids,
        test_ids,
        split_seed: a.split_seed,
        train_fraction: a.train_fraction,
    };
    write_fit(&record, &a.out)?;
    let ambiguous: usize = record.vsets.iter().map(|v| v.ambiguous_layers.len()).sum();
    println!(
        "fitted {} checkpoints x {} layers on {} train pairs ({} ambiguous cells)",
        record.vsets.len(),
        record.vsets[0].num_layers(),
        record.train_ids.len(),
        ambiguous
    );
    Ok(())
}

fn layer_labels(n: usize) -> Vec<String> {
    (0..n).map(|l| l.to_string()).collect()
}

pub fn report(a: ReportArgs) -> Result<()> {
    let record = read_fit(&a.fit)?;
    let pos = read_dump(&a.pos)?;
    let neg = read_dump(&a.neg)?;
    let matrix = build_id_matrix(&record.vsets, &pos, &neg, &record.test_ids)?;
    let config = ReportConfig {
        top_k: a.top_k,
        scale: a.scale,
        cosine_threshold: a.cosine_threshold,
        spike_floor: a.spike_floor,
        cosine_layer: a.cosine_layer,
    };
    let report = make_report(&matrix, &record.vsets, &config)?;
    let out = &a.out;
    fs::create_dir_all(out)?;
    let labels = matrix.checkpoint_labels.clone();
    let layers = layer_labels(matrix.num_layers());

    write_text(&out.join("id_raw.csv"), &matrix.raw_csv())?;
    write_text(&out.join("id_normalized.csv"), &matrix.normalized_csv())?;
    write_text(&out.join("id_stderr.csv"), &matrix_csv(&labels, matrix.stderr.view()))?;
    let mut entropy = String::from("checkpoint,entropy\n");
    for (l, e) in labels.iter().zip(&report.entropy_series) {
        entropy.push_str(&format!("{l},{e}\n"));
    }
    write_text(&out.join("entropy.csv"), &entropy)?;
    let diffs = layer_diff_matrix(&matrix).ok();
    if let Some(d) = &diffs {
        write_text(&out.join("layer_diff.csv"), &matrix_csv(&labels, d.view()))?;
    }
    if record.vsets.iter().all(|v| !v.explained_ratios.is_empty()) {
        let ratios = ndarray::Array2::from_shape_fn((labels.len(), matrix.num_layers()), |(c, l)| {
            record.vsets[c].explained_ratios[l][0]
        });
        write_text(&out.join("explained_ratio.csv"), &matrix_csv(&labels, ratios.view()))?;
    }
    write_json(&out.join("report.json"), &report)?;

    let heatmap = PlotSpec::heatmap(
        &format!("ID score: {}", matrix.concept),
        "layer",
        "checkpoint",
        labels.clone(),
        layers.clone(),
        matrix.normalized.clone(),
    );
    write_svg(&out.join("heatmap.svg"), &heatmap)?;
    let entropy_plot = PlotSpec::line(
        "ID-score entropy across layers",
        "checkpoint",
        "entropy (nats)",
        labels.clone(),
        vec![Series {
            name: "entropy".into(),
            values: report.entropy_series.clone(),
        }],
    );
    write_svg(&out.join("entropy.svg"), &entropy_plot)?;
    let cos = cosine_across_checkpoints(&record.vsets, report.cosine_layer)?;
    let cos_plot = PlotSpec::matrix(
        &format!("Concept-vector cosine, layer {}", report.cosine_layer),
        labels.clone(),
        cos,
        (-1.0, 1.0),
    );
    write_svg(&out.join("cosine.svg"), &cos_plot)?;
    if let Some(d) = diffs {
        let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let bound = lo.abs().max(hi.abs()).max(1e-12);
        let mut spec = PlotSpec::heatmap(
            "Adjacent-layer ID difference",
            "layer step",
            "checkpoint",
            labels.clone(),
            (1..matrix.num_layers()).map(|l| format!("{}-{l}", l - 1)).collect(),
            d,
        );
        spec.color_range = (-bound, bound);
        write_svg(&out.join("layer_diff.svg"), &spec)?;
    }
    if pos.manifest().token_positions.len() >= 2 {
        let last = record.vsets.last().expect("fit has checkpoints");
        let profile = token_position_profile(last, &pos, &neg, &record.test_ids)?;
        let rows = pos.manifest().token_positions.iter().map(|p| p.to_string()).collect();
        let spec = PlotSpec::heatmap(
            &format!("Token-position profile at {}", last.checkpoint_label),
            "layer",
            "token position",
            rows,
            layers,
            profile,
        );
        write_svg(&out.join("token_profile.svg"), &spec)?;
    }
    print_report_summary(&report);
    Ok(())
}

fn print_report_summary(r: &SteerabilityReport) {
    println!(
        "spike at {} layer {} (significance {:.2}, floor {:.2}): emergence {}",
        r.spike_checkpoint,
        r.spike_layer,
        r.spike_significance,
        r.spike_floor,
        if r.emergence_detected { "detected" } else { "not detected" }
    );
    if let Some(onset) = &r.onset_checkpoint {
        println!("onset cue at {onset}");
    }
    println!("recommended layers {:?} at scale {}", r.recommended_layers, r.recommended_scale);
}

pub fn read_report(path: &Path) -> Result<SteerabilityReport> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Layers and scale from explicit flags or a report.
pub fn steering_choice(layers: &[usize], report: Option<&Path>, scale: Option<f64>) -> Result<(Vec<usize>, f64)> {
    match report {
        Some(path) => {
            let r = read_report(path)?;
            Ok((r.recommended_layers, scale.unwrap_or(r.recommended_scale)))
        }
        None => Ok((layers.to_vec(), scale.unwrap_or(steerscope::metrics::DEFAULT_SCALE))),
    }
}

pub fn checkpoint_index(labels: &[String], wanted: Option<&str>) -> Result<usize> {
    match wanted {
        None => labels
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::InvalidConfig("no checkpoints".into())),
        Some(w) => labels
            .iter()
            .position(|l| l == w)
            .ok_or_else(|| Error::Index(format!("checkpoint `{w}` not found"))),
    }
}

pub fn spec(a: SpecArgs) -> Result<()> {
    let record = read_fit(&a.fit)?;
    let labels: Vec<String> = record.vsets.iter().map(|v| v.checkpoint_label.clone()).collect();
    let c = checkpoint_index(&labels, a.checkpoint.as_deref())?;
    let (layers, scale) = steering_choice(&a.layers, a.report.as_deref(), a.scale)?;
    let spec = InterventionSpec::new(record.vsets[c].clone(), &layers, scale)?;
    fs::create_dir_all(&a.out)?;
    write_intervention(&spec, &a.out)?;
    println!(
        "spec: `{}` at {} on layers {:?}, scale {}",
        spec.concept, labels[c], spec.layers, spec.scale
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut s = if a.null {
        EmergenceScenario::null(a.checkpoints, a.layers, a.dim, a.samples, a.sigma, a.seed)
    } else {
        let mut s = EmergenceScenario::ramp(a.checkpoints, a.layers, a.dim, a.samples, a.onset, a.sigma, a.seed);
        s.gain_schedule = ramp_schedule(a.checkpoints, a.onset, a.ramp_len, a.peak);
        s
    };
    s.rotation_events = a.rotation;
    s.token_positions = a.positions;
    let gold = write_scenario(&s, &a.out)?;
    println!(
        "scenario: {} checkpoints x {} layers, onset {:?}, signal layers {:?}",
        s.num_checkpoints, s.num_layers, gold.onset_checkpoint, gold.signal_layers
    );
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let config = BenchConfig {
        runs: a.runs,
        seed_start: a.seed_start,
        null_runs: a.null_runs,
        null_seed_start: a.null_seed_start,
        quantile: a.quantile,
        spike_floor: a.spike_floor,
        noise_sigma: a.sigma,
        num_checkpoints: a.checkpoints,
        num_layers: a.layers,
        hidden_dim: a.dim,
        num_samples: a.samples,
        ramp_len: a.ramp_len,
    };
    let report = synthgen::bench(&config, FitOptions::default())?;
    write_json(&a.out, &report)?;
    println!(
        "floor {:.3}{}: spike within +-1 {}/{}, onset cue within +-1 {}/{}, null without emergence {}/{}",
        report.spike_floor,
        if report.floor_calibrated { " (calibrated)" } else { "" },
        report.spike_within_one,
        report.ramp_runs.len(),
        report.onset_cue_within_one,
        report.ramp_runs.len(),
        report.null_no_emergence,
        report.null_runs.len()
    );
    Ok(())
}

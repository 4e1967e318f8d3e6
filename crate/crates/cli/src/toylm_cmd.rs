use std::fs;

use serde::Serialize;
use steerscope::extract::read_fit;
use steerscope::metrics::spearman;
use steerscope::plot::{PlotSpec, Series};
use steerscope::steer::{eval_accuracy, read_intervention, InterventionSpec};
use steerscope::stimulus::{read_stimulus_set, write_stimulus_set, Concept, ConceptKind, NegativeDraw, StimulusSet};
use steerscope::store::{write_dump, Polarity};
use steerscope::toylm::{
    dump_checkpoints, marker_pairs, paired_prompt_tokens, read_run, shift_table, train_with_checkpoints,
    unmarked_items, write_run, ModelConfig, TrainConfig, CONCEPT,
};
use steerscope::{Error, Result};

use crate::commands::{checkpoint_index, steering_choice};
use crate::output::{write_json, write_svg, write_text};
use crate::{DumpArgs, EvalArgs, InterveneArgs, TrainArgs};

pub fn train(a: TrainArgs) -> Result<()> {
    let mc = ModelConfig {
        num_layers: a.layers,
        hidden_dim: a.dim,
        num_heads: a.heads,
        vocab_size: a.vocab,
        context_len: a.context,
        seed: a.seed,
    };
    let tc = TrainConfig {
        steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        learning_rate: a.lr,
        warmup_steps: a.warmup,
        batch_size: a.batch,
        corpus_seed: a.corpus_seed.unwrap_or(a.seed),
        seq_len: a.seq_len,
        p_signal: a.p_signal,
    };
    mc.validate()?;
    let ckpts = train_with_checkpoints(&mc, &tc)?;
    write_run(&mc, &tc, &ckpts, &a.out)?;
    for c in &ckpts {
        println!(
            "{:>6} step {:>6}  train loss {:.4}  eval loss {:.4}",
            c.label, c.step, c.train_loss, c.eval_loss
        );
    }
    Ok(())
}

pub fn dump(a: DumpArgs) -> Result<()> {
    let (manifest, ckpts) = read_run(&a.run)?;
    let tc = &manifest.train_config;
    let pairs = marker_pairs(tc.seq_len - 1, manifest.model_config.vocab_size, a.pairs, a.seed);
    let pos: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let neg: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
    let dp = dump_checkpoints(&ckpts, &pos, &a.positions, Polarity::Positive, a.seed)?;
    let dn = dump_checkpoints(&ckpts, &neg, &a.positions, Polarity::Negative, a.seed)?;
    write_dump(&dp, &a.out.join("pos"))?;
    write_dump(&dn, &a.out.join("neg"))?;
    let concept = Concept::new(CONCEPT, "marker_a", "marker_b", ConceptKind::Unsupervised)?;
    let set = StimulusSet::from_prompts(concept, pairs, a.seed, a.train_fraction, NegativeDraw::Paired)?;
    write_stimulus_set(&set, &a.out.join("stimuli.json"))?;
    println!(
        "dumped {} pairs x {} checkpoints x {} layers",
        a.pairs,
        ckpts.len(),
        manifest.model_config.num_layers
    );
    Ok(())
}

#[derive(Serialize)]
struct ShiftSummary {
    checkpoint_labels: Vec<String>,
    steps: Vec<usize>,
    shifts: Vec<f64>,
    layers: Vec<usize>,
    scale: f64,
    num_prompts: usize,
    spearman: Option<f64>,
}

pub fn intervene(a: InterveneArgs) -> Result<()> {
    let (manifest, ckpts) = read_run(&a.run)?;
    let record = read_fit(&a.fit)?;
    let stimuli = read_stimulus_set(&a.stimuli)?;
    let (layers, scale) = steering_choice(&a.layers, a.report.as_deref(), a.scale)?;
    let pairs: Vec<(String, String)> = stimuli
        .pairs
        .iter()
        .map(|p| (p.positive_prompt.clone(), p.negative_prompt.clone()))
        .collect();
    let prompts = paired_prompt_tokens(&pairs, &record.test_ids, manifest.model_config.vocab_size)?;
    let shifts = shift_table(&ckpts, &record.vsets, &layers, scale, &prompts)?;
    let order: Vec<f64> = (0..shifts.len()).map(|i| i as f64).collect();
    let rho = spearman(&order, &shifts);
    let summary = ShiftSummary {
        checkpoint_labels: ckpts.iter().map(|c| c.label.clone()).collect(),
        steps: ckpts.iter().map(|c| c.step).collect(),
        shifts,
        layers,
        scale,
        num_prompts: prompts.len(),
        spearman: rho,
    };

    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("checkpoint,step,eval_loss,logit_shift\n");
    println!("{:>8} {:>8} {:>10} {:>12}", "ckpt", "step", "eval loss", "logit shift");
    for (c, s) in ckpts.iter().zip(&summary.shifts) {
        csv.push_str(&format!("{},{},{},{}\n", c.label, c.step, c.eval_loss, s));
        println!("{:>8} {:>8} {:>10.4} {:>12.4}", c.label, c.step, c.eval_loss, s);
    }
    match rho {
        Some(r) => println!("spearman over checkpoints: {r:.3}"),
        None => println!("spearman over checkpoints: undefined (constant shifts)"),
    }
    write_text(&a.out.join("shifts.csv"), &csv)?;
    write_json(&a.out.join("shifts.json"), &summary)?;
    let plot = PlotSpec::line(
        &format!("Logit shift under steering (scale {scale})"),
        "checkpoint",
        "mean logit(X) - logit(Y) shift",
        summary.checkpoint_labels.clone(),
        vec![Series {
            name: "shift".into(),
            values: summary.shifts.clone(),
        }],
    );
    write_svg(&a.out.join("shifts.svg"), &plot)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a str,
    #[serde(flatten)]
    result: steerscope::steer::ChoiceEvalResult,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.spec == "null" && a.scale.is_some() {
        return Err(Error::InvalidConfig("--scale needs a spec directory".into()));
    }
    let (manifest, ckpts) = read_run(&a.run)?;
    let c = checkpoint_index(&manifest.checkpoint_labels, a.checkpoint.as_deref())?;
    let spec = match a.spec.as_str() {
        "null" => None,
        dir => {
            let mut s = read_intervention(std::path::Path::new(dir))?;
            if let Some(scale) = a.scale {
                s = InterventionSpec::new(s.vectors, &s.layers, scale)?;
            }
            Some(s)
        }
    };
    let items = unmarked_items(
        manifest.train_config.seq_len - 1,
        manifest.model_config.vocab_size,
        a.items,
        a.seed,
    );
    let result = eval_accuracy(&ckpts[c].model, &items, spec.as_ref(), a.scoring.into())?;
    println!(
        "{}: accuracy {:.3} (baseline {:.3}) over {} items",
        manifest.checkpoint_labels[c], result.accuracy, result.baseline_accuracy, result.n_items
    );
    write_json(
        &a.out,
        &EvalOutput {
            checkpoint: &manifest.checkpoint_labels[c],
            result,
        },
    )?;
    Ok(())
}

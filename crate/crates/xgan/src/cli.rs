//! Command implementations behind the `xgan` binary: dataset generation,
//! teacher and probe training, model training, translation, evaluation, and
//! the ablation suite. Exit codes: 0 success, 1 runtime/numeric failure,
//! 2 usage or configuration error.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{render_config, RunConfig};
use crate::domains::{
    self, build_corpus, default_schema, AttributeSchema, StyleId,
};
use crate::error::{Result, XganError};
use crate::evalkit::{self, ablation_suite, AblationMode, EvalData, LabeledSet, SuiteInputs};
use crate::model::{DomainId, ImageBatch};
use crate::teacher::{train_teacher, TeacherNet};
use crate::trainer::{self, load_train_state, save_train_state, train, MetricRecord, TrainState};

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(XganError::Config(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| XganError::io(path, e))
}

/// Writes the effective configuration into the output directory, so the run
/// is reproducible from that file alone.
fn echo_config(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("config.toml");
    std::fs::write(&path, render_config(cfg)?).map_err(|e| XganError::io(&path, e))
}

pub fn load_schema(cfg: &RunConfig) -> Result<AttributeSchema> {
    let synth = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| XganError::Config("this command needs synthetic data with attributes".into()))?;
    let schema = match &synth.schema_path {
        Some(path) => {
            require_file(path, "schema file")?;
            let text = std::fs::read_to_string(path).map_err(|e| XganError::io(path, e))?;
            toml::from_str(&text)
                .map_err(|e| XganError::Config(format!("{}: {e}", path.display())))?
        }
        None => default_schema(),
    };
    schema.validate()?;
    Ok(schema)
}

fn split_seed(corpus_seed: u64) -> u64 {
    corpus_seed ^ 0x73706c6974 // distinct stream for the train/test split
}

/// Train/test split of one labeled corpus.
pub struct SplitSet {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Builds both synthetic corpora in memory and splits them 80/20 with the
/// same deterministic split the manifests record.
pub fn build_synthetic_sets(cfg: &RunConfig) -> Result<(AttributeSchema, SplitSet, SplitSet)> {
    let schema = load_schema(cfg)?;
    let synth = cfg.data.synthetic.as_ref().unwrap();
    let mut sets = Vec::new();
    for spec in [&synth.d1, &synth.d2] {
        let (images, labels) = build_corpus(&schema, spec)?;
        let mut rng = crate::rng::Rng::seed_from(split_seed(spec.seed));
        let (train_idx, test_idx) = domains::split_indices(images.n(), cfg.test_fraction, &mut rng);
        let all = LabeledSet { images, labels };
        sets.push(SplitSet {
            train: all.select(&train_idx),
            test: all.select(&test_idx),
        });
    }
    let d2 = sets.pop().unwrap();
    let d1 = sets.pop().unwrap();
    Ok((schema, d1, d2))
}

/// Training corpora for either data source. Synthetic sources train on the
/// 80% split; directory sources use every image.
fn training_corpora(cfg: &RunConfig) -> Result<(ImageBatch<f32>, ImageBatch<f32>)> {
    if cfg.data.synthetic.is_some() {
        let (_, d1, d2) = build_synthetic_sets(cfg)?;
        Ok((d1.train.images, d2.train.images))
    } else {
        let dirs = cfg.data.dirs.as_ref().unwrap();
        let mut corpora = Vec::new();
        for dir in [&dirs.d1, &dirs.d2] {
            let (images, warnings) = domains::load_image_dir(dir, dirs.image_size)?;
            for w in &warnings {
                eprintln!("warning: {}: {w}", dir.display());
            }
            if !warnings.is_empty() {
                eprintln!(
                    "warning: {}: skipped {} unreadable files, loaded {}",
                    dir.display(),
                    warnings.len(),
                    images.n()
                );
            }
            corpora.push(images);
        }
        let d2 = corpora.pop().unwrap();
        let d1 = corpora.pop().unwrap();
        Ok((d1, d2))
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg)?;
    let schema = load_schema(cfg)?;
    let synth = cfg.data.synthetic.as_ref().unwrap();
    for (name, spec) in [("d1", &synth.d1), ("d2", &synth.d2)] {
        let dir = cfg.output_dir.join("data").join(name);
        let (images, attrs) = build_corpus(&schema, spec)?;
        domains::export_corpus(&dir, &images, &attrs)?;
        let (n_train, n_test) =
            domains::write_split_manifests(&dir, images.n(), cfg.test_fraction, split_seed(spec.seed))?;
        println!(
            "{name}: {} samples ({} train / {} test) in {}",
            images.n(),
            n_train,
            n_test,
            dir.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-teacher / train-probes
// ---------------------------------------------------------------------------

pub fn cmd_train_teacher(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    echo_config(cfg)?;
    let (schema, d1, _) = build_synthetic_sets(cfg)?;
    let teacher = train_teacher::<f32>(
        &cfg.model,
        &d1.train.images,
        &d1.train.labels,
        &schema.option_counts(),
        &cfg.supervised,
    )?;
    let path = out.unwrap_or_else(|| cfg.output_dir.join("teacher.bin"));
    crate::teacher::save_teacher(&teacher, &cfg.model, &path)?;
    println!(
        "teacher saved to {} (held-out accuracy {:?})",
        path.display(),
        teacher.held_out_accuracy
    );
    Ok(())
}

pub fn cmd_train_probes(cfg: &RunConfig, out_a: Option<PathBuf>, out_b: Option<PathBuf>) -> Result<()> {
    echo_config(cfg)?;
    let (schema, d1, d2) = build_synthetic_sets(cfg)?;
    for (style, set, out, default_name) in [
        (StyleId::StyleA, &d1, out_a, "probe_a.bin"),
        (StyleId::StyleB, &d2, out_b, "probe_b.bin"),
    ] {
        let probe = evalkit::train_probe(
            &cfg.model,
            &set.train.images,
            &set.train.labels,
            &schema,
            style,
            &cfg.supervised,
        )?;
        let path = out.unwrap_or_else(|| cfg.output_dir.join(default_name));
        evalkit::save_probe(&probe, &cfg.model, &path)?;
        println!(
            "probe {style} saved to {} (held-out accuracy {:?})",
            path.display(),
            probe.held_out_accuracy
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_teacher_if_configured(cfg: &RunConfig) -> Result<Option<TeacherNet<f32>>> {
    match &cfg.teacher_path {
        None => Ok(None),
        Some(path) => {
            require_file(path, "teacher checkpoint")?;
            let (teacher, _) = crate::teacher::load_teacher(path)?;
            Ok(Some(teacher))
        }
    }
}

fn metrics_writer(path: &Path, append: bool) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| XganError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

pub fn write_metric_lines(w: &mut dyn Write, records: &[MetricRecord], path: &Path) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| XganError::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| XganError::io(path, e))?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume_from: Option<PathBuf>) -> Result<()> {
    echo_config(cfg)?;
    let teacher = load_teacher_if_configured(cfg)?;
    let (corpus1, corpus2) = training_corpora(cfg)?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let metrics_path = cfg.output_dir.join("metrics.jsonl");

    let mut on_checkpoint = |state: &TrainState<f32>| -> Result<()> {
        let path = ckpt_dir.join(format!("step_{:07}.bin", state.step));
        save_train_state(state, &path)
    };

    let final_path = cfg.output_dir.join("checkpoint_final.bin");
    let output = match resume_from {
        Some(path) => {
            require_file(&path, "checkpoint")?;
            let mut state = load_train_state(&path)?;
            if state.params.config != cfg.model {
                return Err(XganError::Checkpoint(format!(
                    "{}: checkpoint model configuration disagrees with the active config",
                    path.display()
                )));
            }
            let mut w = metrics_writer(&metrics_path, true)?;
            let out = trainer::resume(
                &mut state,
                &cfg.train,
                &corpus1,
                &corpus2,
                teacher.as_ref(),
                &mut on_checkpoint,
            )?;
            write_metric_lines(&mut w, &out.metrics, &metrics_path)?;
            out
        }
        None => {
            let mut w = metrics_writer(&metrics_path, false)?;
            let out = train(
                &cfg.model,
                &cfg.train,
                &corpus1,
                &corpus2,
                teacher.as_ref(),
                &mut on_checkpoint,
            )?;
            write_metric_lines(&mut w, &out.metrics, &metrics_path)?;
            out
        }
    };
    save_train_state(&output.state, &final_path)?;
    println!(
        "trained to step {} ({} metric records); final checkpoint {}",
        output.state.step,
        output.metrics.len(),
        final_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

pub fn parse_direction(s: &str) -> Result<DomainId> {
    match s {
        "1to2" => Ok(DomainId::D1),
        "2to1" => Ok(DomainId::D2),
        other => Err(XganError::Config(format!(
            "direction must be 1to2 or 2to1, got '{other}'"
        ))),
    }
}

pub fn cmd_translate(
    checkpoint: &Path,
    input_dir: &Path,
    direction: &str,
    out_dir: &Path,
    pairs_per_row: usize,
) -> Result<()> {
    let from = parse_direction(direction)?;
    require_file(checkpoint, "checkpoint")?;
    let state = load_train_state(checkpoint)?;
    let params = state.params;
    let (inputs, warnings) = domains::load_image_dir(input_dir, params.config.image_size)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    ensure_dir(out_dir)?;
    let translated = crate::model::translate(&params, &inputs, from)?;
    let plane = translated.h() * translated.w();
    for i in 0..translated.n() {
        let sample = translated.sample(i);
        let mut px = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                px[p * 3 + c] = crate::pngio::unit_to_u8(sample[c * plane + p]);
            }
        }
        crate::pngio::write_rgb8(
            &out_dir.join(format!("translated_{i:05}.png")),
            translated.w() as u32,
            translated.h() as u32,
            &px,
        )?;
    }
    let grid_path = out_dir.join("grid.png");
    evalkit::sample_grid(&params, &inputs, from, &grid_path, pairs_per_row)?;
    println!(
        "translated {} images to {} (grid {})",
        translated.n(),
        out_dir.display(),
        grid_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, probe_b: &Path, out: Option<PathBuf>) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(probe_b, "probe file")?;
    let state = load_train_state(checkpoint)?;
    if state.params.config != cfg.model {
        return Err(XganError::Checkpoint(format!(
            "{}: checkpoint model configuration disagrees with the active config",
            checkpoint.display()
        )));
    }
    let probe = evalkit::load_probe(probe_b, StyleId::StyleB)?;
    let (schema, d1, d2) = build_synthetic_sets(cfg)?;
    let fingerprint = evalkit::config_fingerprint(&render_config(cfg)?);
    let data = EvalData {
        schema: &schema,
        test1: &d1.test,
        test2: &d2.test,
        probe_d2: &probe,
    };
    let report = evalkit::evaluate(
        &state.params,
        &data,
        cfg.train.loss_cfg.sem_distance,
        cfg.train.mode.name(),
        cfg.train.seed,
        &fingerprint,
    )?;
    let out_path = out.unwrap_or_else(|| cfg.output_dir.join("results.jsonl"));
    ensure_dir(&cfg.output_dir)?;
    let mut w = metrics_writer(&out_path, true)?;
    let line = serde_json::to_string(&report).map_err(|e| XganError::Data(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| XganError::io(&out_path, e))?;
    println!(
        "macro preservation {:.4} (chance {:.4}), domain confusion {:.4}, sem {:.4}/{:.4}, rec {:.4}/{:.4}",
        report.preservation_1to2.macro_mean,
        report.chance_baseline.macro_mean,
        report.domain_confusion,
        report.sem_distance_1to2,
        report.sem_distance_2to1,
        report.rec_error_d1,
        report.rec_error_d2
    );
    println!("report appended to {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn parse_modes(spec: &str) -> Result<Vec<AblationMode>> {
    let mut modes = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mode = AblationMode::parse(name).ok_or_else(|| {
            XganError::Config(format!(
                "unknown mode '{name}'; valid modes: {}",
                AblationMode::valid_names().join(", ")
            ))
        })?;
        modes.push(mode);
    }
    if modes.is_empty() {
        return Err(XganError::Config("no modes requested".into()));
    }
    Ok(modes)
}

pub fn cmd_ablate(cfg: &RunConfig, modes_spec: &str, n_seeds: u64) -> Result<()> {
    let modes = parse_modes(modes_spec)?;
    echo_config(cfg)?;
    let (schema, d1, d2) = build_synthetic_sets(cfg)?;
    let teacher = load_teacher_if_configured(cfg)?;
    println!("training style-b probe for preservation scoring...");
    let probe = evalkit::train_probe(
        &cfg.model,
        &d2.train.images,
        &d2.train.labels,
        &schema,
        StyleId::StyleB,
        &cfg.supervised,
    )?;
    println!("probe held-out accuracy: {:?}", probe.held_out_accuracy);

    let inputs = SuiteInputs {
        schema: &schema,
        model: &cfg.model,
        base_train: &cfg.train,
        train1: &d1.train.images,
        train2: &d2.train.images,
        test1: &d1.test,
        test2: &d2.test,
        probe_d2: &probe,
        teacher: teacher.as_ref(),
        n_seeds,
        on_metrics: None,
    };
    let outcome = ablation_suite(&inputs, &modes)?;
    let table = evalkit::format_table(&outcome);
    print!("{table}");
    let table_path = cfg.output_dir.join("ablation_table.txt");
    std::fs::write(&table_path, &table).map_err(|e| XganError::io(&table_path, e))?;

    let results_path = cfg.output_dir.join("ablation_results.jsonl");
    let mut w = metrics_writer(&results_path, true)?;
    for (_, row) in &outcome.rows {
        if let Ok(summary) = row {
            for report in &summary.reports {
                let line = serde_json::to_string(report).map_err(|e| XganError::Data(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| XganError::io(&results_path, e))?;
            }
        }
    }
    println!("table written to {}", table_path.display());
    let failed: Vec<&String> = outcome
        .rows
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(n, _)| n)
        .collect();
    if !failed.is_empty() {
        return Err(XganError::Numeric(format!("modes failed: {failed:?}")));
    }
    Ok(())
}

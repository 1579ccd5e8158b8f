use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use proto_lab::attack::{
    correctly_classified, pgd_location_shift, receptive_field_mask, select_source_patch, susceptibility_on,
    susceptibility_rate, validate_record, AttackRecord, PatchSet, SusceptibilityConfig, SusceptibilityReport,
};
use proto_lab::compression::{
    compress_decompress, consistency_experiment, corrupt_dataset, summarize, top_similarity_histogram, CodecConfig,
    ConsistencyRecord,
};
use proto_lab::dataset::{generate, load_dataset, save_dataset, write_ppm, Dataset, LabeledImage, SynthConfig};
use proto_lab::geometry::PixelBox;
use proto_lab::gradcheck::run_suite;
use proto_lab::protopnet::{
    load_checkpoint, predict, save_checkpoint, upsample_activation, Heatmap, Model, ModelConfig,
};
use proto_lab::report::{blend_heatmap, crop, draw_box, paired_bars_svg, BarSeries, RunManifest, GREEN, YELLOW};
use proto_lab::tensor::{argmax, Tensor};
use proto_lab::training::{evaluate, train_schedule, write_metrics_csv, PgdEvalConfig, Regime};
use proto_lab::Error;

use crate::args::*;

pub const SUSCEPTIBILITY_HEADER: &str = "# proto-lab susceptibility v1";
pub const RECORDS_HEADER: &str = "# proto-lab consistency records v1";
pub const HISTOGRAM_HEADER: &str = "# proto-lab similarity histogram v1";

#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    Usage(String),
    GradcheckFailed(usize),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::GradcheckFailed(n) => write!(f, "{n} gradient checks failed"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::GradcheckFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e {
                Error::Divergence { .. } => 3,
                Error::Misclassified { .. } | Error::OverlappingPatchSets(_) => 4,
                Error::Format { .. } | Error::ArtifactMismatch(_) => 5,
                _ => 2,
            },
        }
    }
}

type CmdResult = Result<(), CliError>;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json output", e))?;
    write_text(path, &text)
}

fn manifest(cmd: &Command, resolved: serde_json::Value) -> RunManifest {
    RunManifest::start(cmd.name(), json!({ "args": cmd, "resolved": resolved }), cmd.seed())
}

pub fn run(cmd: Command) -> CmdResult {
    match &cmd {
        Command::GenData(a) => gen_data(&cmd, a),
        Command::Train(a) => train(&cmd, a),
        Command::Attack(a) => attack(&cmd, a),
        Command::Susceptibility(a) => susceptibility(&cmd, a),
        Command::JpegExp(a) => jpeg_exp(&cmd, a),
        Command::Gradcheck(a) => gradcheck(&cmd, a),
        Command::Replay(a) => replay(a),
    }
}

fn gen_data(cmd: &Command, a: &GenDataArgs) -> CmdResult {
    let cfg = SynthConfig {
        classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        image_size: a.image_size,
        seed: a.seed,
        noise_amplitude: a.noise,
        glyph_radius: (a.glyph_min, a.glyph_max),
    };
    let mut ds = generate(&cfg)?;
    if let Some(fraction) = a.corrupt_fraction {
        ds = corrupt_dataset(&ds, fraction, a.corrupt_quality, a.seed)?.0;
    }
    create_dir(&a.out)?;
    let mut m = manifest(cmd, json!({ "synth": cfg }));
    let files = save_dataset(&ds, &a.out)?;
    m.add_outputs(&a.out, &files);
    m.finish(&a.out)?;
    println!(
        "wrote {} train and {} test images to {} (corrupted classes {:?})",
        ds.train.len(),
        ds.test.len(),
        a.out.display(),
        ds.corrupted_classes
    );
    Ok(())
}

fn image_dims(ds: &Dataset) -> Result<(usize, usize), CliError> {
    let first = ds
        .train
        .first()
        .ok_or_else(|| CliError::Usage("dataset has no training images".into()))?;
    Ok((first.image.shape()[1], first.image.shape()[2]))
}

fn train(cmd: &Command, a: &TrainArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let regime = Regime::from(a.regime);
    let mut cfg = regime.config(a.seed);
    if let Some(e) = a.warmup_epochs {
        cfg.warmup_epochs = e;
    }
    if let Some(e) = a.joint_epochs {
        cfg.joint_epochs = e;
    }
    if let Some(e) = a.last_layer_iters {
        cfg.last_layer_iters = e;
    }
    let (h, w) = image_dims(&ds)?;
    let model_cfg = ModelConfig {
        image_height: h,
        image_width: w,
        prototypes_per_class: a.prototypes_per_class,
        distance_mode: a.distance.into(),
        ..ModelConfig::reference(ds.classes)
    };
    let model = Model::new(model_cfg.clone(), a.seed)?;
    create_dir(&a.out)?;
    let mut m = manifest(cmd, json!({ "train": cfg, "model": model_cfg }));
    let outcome = train_schedule(model, &ds, &cfg)?;
    let ckpt = a.out.join("model.plab");
    save_checkpoint(&outcome.model, &ckpt)?;
    let metrics = a.out.join("metrics.csv");
    write_metrics_csv(&outcome.metrics, &metrics)?;
    let summary = write_json(
        &a.out.join("summary.json"),
        &json!({
            "regime": regime.as_str(),
            "selected_iteration": outcome.selected_iteration,
            "selected_test_accuracy": outcome.selected_test_accuracy,
        }),
    )?;
    m.add_outputs(&a.out, [ckpt, metrics, summary]);
    m.finish(&a.out)?;
    println!(
        "{} model: test accuracy {:.4} (last-layer iteration {})",
        regime.as_str(),
        outcome.selected_test_accuracy,
        outcome.selected_iteration
    );
    Ok(())
}

fn find_image<'a>(ds: &'a Dataset, id: usize) -> Result<&'a LabeledImage, CliError> {
    ds.find(id)
        .ok_or_else(|| CliError::Usage(format!("no image with id {id}")))
}

/// The cell with the largest Chebyshev distance to `s`, lowest flat index
/// on ties.
fn far_cell(s: &PatchSet, h: usize, w: usize) -> (usize, usize) {
    let dist = |(r, c): (usize, usize)| {
        s.cells()
            .iter()
            .map(|&(sr, sc)| sr.abs_diff(r).max(sc.abs_diff(c)))
            .min()
            .unwrap_or(0)
    };
    let mut best = (0, 0);
    for r in 0..h {
        for c in 0..w {
            if dist((r, c)) > dist(best) {
                best = (r, c);
            }
        }
    }
    best
}

#[derive(Serialize)]
struct PrototypeSource {
    image_id: usize,
    row: usize,
    col: usize,
    rect: PixelBox,
}

#[derive(Serialize)]
struct AttackReport {
    record: AttackRecord,
    /// Yellow boxes of the clean and attacked overlays.
    clean_bbox: PixelBox,
    attacked_bbox: PixelBox,
    /// Green rectangles on the attacked overlay.
    noise_rects: Vec<PixelBox>,
    prototype_source: Option<PrototypeSource>,
}

fn overlay(image: &Tensor, heat: &Heatmap, noise: &[PixelBox]) -> Result<Tensor, CliError> {
    let mut out = blend_heatmap(image, heat, 0.5)?;
    for r in noise {
        draw_box(&mut out, r, GREEN);
    }
    draw_box(&mut out, &heat.bbox, YELLOW);
    Ok(out)
}

fn attack(cmd: &Command, a: &AttackArgs) -> CmdResult {
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let img = find_image(&ds, a.image_id)?;
    let config = a.pgd.attack_config();
    config.validate()?;
    let inf = predict(&model, &img.image)?;
    if inf.classification.class != img.label {
        return Err(Error::Misclassified {
            image_id: img.id,
            label: img.label,
            predicted: inf.classification.class,
        }
        .into());
    }
    let proto = a.prototype.unwrap_or_else(|| argmax(&inf.pooled.scores));
    let source = select_source_patch(&model, img, proto, config.source_rule)?;
    let (h, w, _) = model.config.latent_dims();
    let target = match a.target {
        TargetArg::FarCorner => PatchSet::new(vec![far_cell(&source, h, w)], h, w)?,
        TargetArg::Complement => source
            .complement(h, w)
            .ok_or_else(|| CliError::Usage("source set covers every latent cell".into()))?,
    };
    let result = pgd_location_shift(&model, &img.image, proto, &source, &target, &config)?;
    let record = AttackRecord::new(&result, img.id, img.label, model.prototype_class[proto], &config);
    validate_record(&record, &img.image)?;

    let (ih, iw) = (model.config.image_height, model.config.image_width);
    let attacked = result.attacked_image(&img.image);
    let after = predict(&model, &attacked)?;
    let clean_heat = upsample_activation(inf.map.slice(proto), h, w, ih, iw)?;
    let attacked_heat = upsample_activation(after.map.slice(proto), h, w, ih, iw)?;
    let noise_rects = result.mask.rects.clone();

    create_dir(&a.out)?;
    let mut m = manifest(cmd, json!({ "attack": config }));
    let clean_path = a.out.join("clean_overlay.ppm");
    write_ppm(&clean_path, &overlay(&img.image, &clean_heat, &[])?)?;
    let attacked_path = a.out.join("attacked_overlay.ppm");
    write_ppm(&attacked_path, &overlay(&attacked, &attacked_heat, &noise_rects)?)?;
    m.add_outputs(&a.out, [clean_path, attacked_path]);

    let prototype_source = match model.provenance[proto].as_ref() {
        Some(p) => {
            let cell = PatchSet::new(vec![(p.row, p.col)], h, w)?;
            let rect = receptive_field_mask(&cell, &model.config.backbone, ih, iw).rects[0];
            if let Some(src) = ds.find(p.image_id) {
                let path = a.out.join("prototype.ppm");
                write_ppm(&path, &crop(&src.image, &rect)?)?;
                m.add_outputs(&a.out, [path]);
            }
            Some(PrototypeSource {
                image_id: p.image_id,
                row: p.row,
                col: p.col,
                rect,
            })
        }
        None => None,
    };
    let report = AttackReport {
        clean_bbox: clean_heat.bbox,
        attacked_bbox: attacked_heat.bbox,
        noise_rects,
        prototype_source,
        record,
    };
    let json_path = write_json(&a.out.join("attack.json"), &report)?;
    m.add_outputs(&a.out, [json_path]);
    m.finish(&a.out)?;
    println!(
        "image {} prototype {}: success {} (S {:.4} -> {:.4}, S_noisy {:.4} -> {:.4}), predicted {} -> {}",
        img.id,
        proto,
        result.success,
        result.before.source_similarity,
        result.after.source_similarity,
        result.before.target_similarity,
        result.after.target_similarity,
        result.before.predicted,
        result.after.predicted
    );
    Ok(())
}

#[derive(Serialize)]
struct SusceptibilityRow {
    checkpoint: String,
    clean_accuracy: f64,
    adversarial_accuracy: Option<f64>,
    success_rate: f64,
    images: usize,
    successes: usize,
    successful_attacks: usize,
    still_correct_fraction: f64,
}

fn susceptibility(cmd: &Command, a: &SusceptibilityArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let config = SusceptibilityConfig {
        top_k: a.k,
        images: a.images,
        seed: a.seed,
        attack: a.pgd.attack_config(),
    };
    config.attack.validate()?;
    if a.k == 0 || a.images == 0 {
        return Err(CliError::Usage("--k and --images must be positive".into()));
    }
    create_dir(&a.out)?;
    let mut m = manifest(
        cmd,
        json!({ "susceptibility": config, "pgd_eval": PgdEvalConfig::default() }),
    );
    let records_dir = a.out.join("records");
    let mut rows = Vec::new();
    let mut shared: Option<Vec<usize>> = None;
    for (i, path) in a.checkpoint.iter().enumerate() {
        let model = load_checkpoint(path)?;
        let report = match &shared {
            None => {
                let r = susceptibility_rate(&model, &ds.test, &config)?;
                shared = Some(r.image_ids());
                r
            }
            Some(ids) => {
                let chosen: Vec<LabeledImage> = ids.iter().filter_map(|id| ds.find(*id).cloned()).collect();
                let ok = correctly_classified(&model, &chosen)?;
                if ok.is_empty() {
                    SusceptibilityReport::default()
                } else {
                    susceptibility_on(&model, &ok, &config)?
                }
            }
        };
        let eval = evaluate(&model, &ds.test, (!a.no_adv_eval).then(PgdEvalConfig::default).as_ref())?;
        create_dir(&records_dir)?;
        let stem = path
            .file_stem()
            .map_or("checkpoint".into(), |s| s.to_string_lossy().to_string());
        let rec_path = write_json(&records_dir.join(format!("{i:02}_{stem}.json")), &report)?;
        m.add_outputs(&a.out, [rec_path]);
        println!(
            "{}: clean {:.4}, success rate {:.4} over {} images",
            path.display(),
            eval.clean_accuracy,
            report.rate,
            report.images
        );
        rows.push(SusceptibilityRow {
            checkpoint: path.display().to_string(),
            clean_accuracy: eval.clean_accuracy,
            adversarial_accuracy: eval.adversarial_accuracy,
            success_rate: report.rate,
            images: report.images,
            successes: report.successes,
            successful_attacks: report.successful_attacks,
            still_correct_fraction: report.still_correct_fraction(),
        });
    }
    let csv_path = a.out.join("susceptibility.csv");
    write_csv(&csv_path, SUSCEPTIBILITY_HEADER, SUSCEPTIBILITY_COLUMNS, &rows)?;
    m.add_outputs(&a.out, [csv_path]);
    m.finish(&a.out)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, header: &str, columns: &[&str], rows: &[T]) -> Result<PathBuf, CliError> {
    let csv_err = |e: csv::Error| Error::format("csv output", e);
    let mut buffer = format!("{header}\n").into_bytes();
    {
        // Column names are written by hand so that empty tables still carry them.
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buffer);
        w.write_record(columns).map_err(csv_err)?;
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::format("csv output", e))?;
    }
    write_text(path, &String::from_utf8(buffer).expect("csv output is utf-8"))
}

const SUSCEPTIBILITY_COLUMNS: &[&str] = &[
    "checkpoint",
    "clean_accuracy",
    "adversarial_accuracy",
    "success_rate",
    "images",
    "successes",
    "successful_attacks",
    "still_correct_fraction",
];

const RECORD_COLUMNS: &[&str] = &[
    "image_id",
    "class",
    "prototype",
    "score_compressed",
    "score_clean",
    "rank_on_clean",
    "predicted_compressed",
    "predicted_clean",
    "relative_drop",
    "top1_changed",
];

const HISTOGRAM_COLUMNS: &[&str] = &["rank", "ranking", "prototype", "score_compressed", "score_clean"];

#[derive(Serialize)]
struct RecordRow {
    image_id: usize,
    class: usize,
    prototype: usize,
    score_compressed: f64,
    score_clean: f64,
    rank_on_clean: usize,
    predicted_compressed: usize,
    predicted_clean: usize,
    relative_drop: f64,
    top1_changed: bool,
}

impl From<&ConsistencyRecord> for RecordRow {
    fn from(r: &ConsistencyRecord) -> Self {
        RecordRow {
            image_id: r.image_id,
            class: r.class,
            prototype: r.prototype,
            score_compressed: r.score_compressed,
            score_clean: r.score_clean,
            rank_on_clean: r.rank_on_clean,
            predicted_compressed: r.predicted_compressed,
            predicted_clean: r.predicted_clean,
            relative_drop: r.relative_drop(),
            top1_changed: r.top1_changed(),
        }
    }
}

#[derive(Serialize)]
struct HistogramRow {
    rank: usize,
    ranking: &'static str,
    prototype: usize,
    score_compressed: f64,
    score_clean: f64,
}

fn jpeg_exp(cmd: &Command, a: &JpegExpArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    if model.corrupted_classes != ds.corrupted_classes {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint was trained with corrupted classes {:?}, dataset has {:?}",
            model.corrupted_classes, ds.corrupted_classes
        ))
        .into());
    }
    if ds.corrupted_classes.is_empty() {
        return Err(CliError::Usage("dataset has no corrupted classes".into()));
    }
    if !(1..=100).contains(&a.quality) {
        return Err(CliError::Usage("--quality must be in 1..=100".into()));
    }
    let codec = CodecConfig {
        quality: a.quality,
        chroma_subsampling: !a.no_subsampling,
    };
    create_dir(&a.out)?;
    let mut m = manifest(cmd, json!({ "codec": codec }));
    let records = consistency_experiment(&model, &ds.test, &ds.corrupted_classes, &codec)?;
    let summary = summarize(&records);
    let rows: Vec<RecordRow> = records.iter().map(RecordRow::from).collect();
    let rec_path = write_csv(&a.out.join("records.csv"), RECORDS_HEADER, RECORD_COLUMNS, &rows)?;
    let sum_path = write_json(
        &a.out.join("summary.json"),
        &json!({ "codec": codec, "summary": summary }),
    )?;
    m.add_outputs(&a.out, [rec_path, sum_path]);

    let mut order: Vec<&ConsistencyRecord> = records.iter().collect();
    order.sort_by(|x, y| {
        y.relative_drop()
            .total_cmp(&x.relative_drop())
            .then(x.image_id.cmp(&y.image_id))
    });
    for r in order.into_iter().take(a.examples) {
        let img = find_image(&ds, r.image_id)?;
        let clean = img.clean_image();
        let compressed = compress_decompress(clean, &codec)?;
        let hist = top_similarity_histogram(&model, &compressed, clean, a.n)?;
        let mut hist_rows = Vec::new();
        for (ranking, entries) in [
            ("compressed", &hist.ranked_on_compressed),
            ("clean", &hist.ranked_on_clean),
        ] {
            let cats: Vec<String> = entries.iter().map(|e| format!("p{}", e.prototype)).collect();
            let a_vals: Vec<f64> = entries.iter().map(|e| e.score_compressed).collect();
            let b_vals: Vec<f64> = entries.iter().map(|e| e.score_clean).collect();
            let svg = paired_bars_svg(
                &format!(
                    "image {} (class {}), prototypes ranked on the {ranking} image",
                    img.id, img.label
                ),
                &cats,
                &[
                    BarSeries {
                        label: "compressed",
                        values: &a_vals,
                        color: "#d0502a",
                    },
                    BarSeries {
                        label: "clean",
                        values: &b_vals,
                        color: "#2a6fd0",
                    },
                ],
            );
            let path = write_text(&a.out.join(format!("hist_{:05}_ranked_{ranking}.svg", img.id)), &svg)?;
            m.add_outputs(&a.out, [path]);
            hist_rows.extend(entries.iter().enumerate().map(|(i, e)| HistogramRow {
                rank: i + 1,
                ranking,
                prototype: e.prototype,
                score_compressed: e.score_compressed,
                score_clean: e.score_clean,
            }));
        }
        let path = write_csv(
            &a.out.join(format!("hist_{:05}.csv", img.id)),
            HISTOGRAM_HEADER,
            HISTOGRAM_COLUMNS,
            &hist_rows,
        )?;
        m.add_outputs(&a.out, [path]);
    }
    m.finish(&a.out)?;
    println!(
        "{} eligible images: median relative drop {:.4}, top-1 change fraction {:.4}",
        summary.count, summary.median_relative_drop, summary.top1_change_fraction
    );
    Ok(())
}

fn gradcheck(cmd: &Command, a: &GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let report = run_suite(a.seeds, a.inject_fault.as_deref())?;
    println!("{:<36} {:>14} {:>10}  result", "check", "max rel err", "tolerance");
    for e in report.worst() {
        println!(
            "{:<36} {:>14.3e} {:>10.0e}  {}",
            e.name,
            e.max_relative_error,
            e.tolerance,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut m = manifest(cmd, json!({ "seeds": a.seeds }));
        let path = write_json(&out.join("gradcheck.json"), &report)?;
        m.add_outputs(out, [path]);
        m.finish(out)?;
    }
    let failed = report.entries.iter().filter(|e| !e.passed).count();
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(())
}

fn replay(a: &ReplayArgs) -> CmdResult {
    let m = RunManifest::read(&a.manifest)?;
    let cmd: Command =
        serde_json::from_value(m.config["args"].clone()).map_err(|e| Error::format("run manifest", e))?;
    if matches!(cmd, Command::Replay(_)) {
        return Err(CliError::Usage("cannot replay a replay".into()));
    }
    run(cmd.with_out(a.out.clone()))
}

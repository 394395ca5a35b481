use std::fs;
use std::path::{Path, PathBuf};

use spectraleaf::annotation::{
    build_semantic_mask, class_statistics, class_statistics_csv, parse_labelme,
    split_dataset, SplitAssignment,
};
use spectraleaf::model::{transfer_weights, AdaptMode, Checkpoint, HeadKind, Model, ModelConfig};
use spectraleaf::raster_io::{load_image, read_mask, save_image, write_mask_tiff, SampleFormat};
use spectraleaf::spectral::{MultiSpectralImage, NormalizeMode, SemanticMask};
use spectraleaf::synth::{
    gen_dataset, DatasetEntry, DatasetManifest, DatasetOptions, BALANCE_FILE, MANIFEST_FILE,
};
use spectraleaf::train::evaluate::{comparison_table, evaluate, oracle_report, predict, MetricReport, PredictOptions};
use spectraleaf::train::{
    load_samples, overlay, plot_confusion, plot_history, plot_metric_bars, side_by_side, train_model,
    AugmentConfig, Sample, TrainConfig,
};
use spectraleaf::Error;

use crate::config;
use crate::{
    AdaptArg, Cli, Cmd, EvalArgs, Failure, GenDataArgs, HeadArg, IngestArgs, ModelArg, PredictArgs,
    SampleFormatArg, SubsetArg, TrainArgs,
};

pub const SPLIT_FILE: &str = "split.json";

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    let out = &cli.globals.out;
    let rendered = match &cli.command {
        Cmd::GenData(a) => config::render("gen-data", &cli.globals, a),
        Cmd::Ingest(a) => config::render("ingest", &cli.globals, a),
        Cmd::Train(a) => config::render("train", &cli.globals, a),
        Cmd::Eval(a) => config::render("eval", &cli.globals, a),
        Cmd::Predict(a) => config::render("predict", &cli.globals, a),
    };
    log::info!("{} -> {}", cli.command.name(), out.display());
    for line in rendered.lines() {
        log::debug!("  {line}");
    }
    let seed = cli.globals.seed;
    match &cli.command {
        Cmd::GenData(a) => gen_data(a, seed, out),
        Cmd::Ingest(a) => ingest(a, seed, out),
        Cmd::Train(a) => train(a, seed, out),
        Cmd::Eval(a) => eval(a, seed, out),
        Cmd::Predict(a) => predict_images(a, out),
    }?;
    config::write(out, &rendered).map_err(|e| Failure::Runtime(format!("writing run config: {e}")))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn check_fraction(f: f64) -> Outcome {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(Failure::Usage(format!("val-fraction must lie in [0, 1), got {f}")))
    }
}

fn write_split(dir: &Path, split: &SplitAssignment) -> Outcome {
    let json = serde_json::to_string_pretty(split).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(&dir.join(SPLIT_FILE), &(json + "\n"))
}

fn gen_data(a: &GenDataArgs, seed: u64, out: &Path) -> Outcome {
    check_fraction(a.val_fraction)?;
    if a.size == 0 || a.size % 32 != 0 {
        return Err(Failure::Usage(format!("size must be a positive multiple of 32, got {}", a.size)));
    }
    let mut opts = DatasetOptions::new(a.n as usize, a.size, seed);
    opts.chlorosis_rgb_contrast = a.contrast as f32;
    opts.format = match a.format {
        SampleFormatArg::F32 => SampleFormat::F32,
        SampleFormatArg::U16 => SampleFormat::U16,
    };
    if let Some(days) = &a.days {
        let parsed = days
            .split_once('-')
            .and_then(|(lo, hi)| Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?)))
            .filter(|(lo, hi)| lo <= hi);
        opts.days = Some(parsed.ok_or_else(|| Failure::Usage(format!("days must look like LO-HI, got {days:?}")))?);
    }
    let manifest = gen_dataset(&opts, out)?;
    if manifest.entries.len() >= 2 {
        write_split(out, &split_dataset(&manifest.ids(), a.val_fraction, seed)?)?;
    }
    log::info!("wrote {} plates to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn find_image(doc_dir: &Path, images: Option<&Path>, id: &str, doc: &str) -> Option<PathBuf> {
    if let Some(dir) = images {
        let p = dir.join(format!("{id}.tif"));
        return p.exists().then_some(p);
    }
    let rel = serde_json::from_str::<serde_json::Value>(doc)
        .ok()?
        .get("imagePath")?
        .as_str()?
        .to_string();
    let p = doc_dir.join(rel);
    p.exists().then_some(p)
}

fn ingest(a: &IngestArgs, seed: u64, out: &Path) -> Outcome {
    check_fraction(a.val_fraction)?;
    require(&a.annotations, "annotation directory")?;
    if let Some(dir) = &a.images {
        require(dir, "image directory")?;
    }
    let mut docs: Vec<PathBuf> = fs::read_dir(&a.annotations)
        .map_err(|e| io_failure(&a.annotations, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    docs.sort();
    if docs.is_empty() {
        return Err(Failure::Usage(format!("no .json files in {}", a.annotations.display())));
    }
    for sub in ["images", "masks", "annotations"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| io_failure(&d, e))?;
    }
    let mut manifest = DatasetManifest::default();
    let mut stats_in = Vec::new();
    for doc_path in &docs {
        let text = fs::read_to_string(doc_path).map_err(|e| io_failure(doc_path, e))?;
        let id = doc_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let ann = parse_labelme(&text, Some(&id)).map_err(|e| Failure::Runtime(format!("{}: {e}", doc_path.display())))?;
        let doc_dir = doc_path.parent().unwrap_or(Path::new("."));
        let img_path = find_image(doc_dir, a.images.as_deref(), &id, &text)
            .ok_or_else(|| Failure::Runtime(format!("{id}: image not found")))?;
        let img = load_image(&img_path, NormalizeMode::default())?;
        if (img.height(), img.width()) != ann.image_size {
            return Err(Failure::Runtime(format!(
                "{id}: image is {}x{} but annotation says {}x{}",
                img.height(),
                img.width(),
                ann.image_size.0,
                ann.image_size.1
            )));
        }
        let mask = build_semantic_mask(&ann);
        let entry = DatasetEntry {
            sample_id: id.clone(),
            image_path: PathBuf::from(format!("images/{id}.tif")),
            mask_path: PathBuf::from(format!("masks/{id}.tif")),
            annotation_path: PathBuf::from(format!("annotations/{id}.json")),
            seed: 0,
        };
        save_image(&out.join(&entry.image_path), &img, SampleFormat::F32)?;
        write_mask_tiff(&out.join(&entry.mask_path), &mask)?;
        write_text(&out.join(&entry.annotation_path), &ann.to_labelme(&format!("../images/{id}.tif")))?;
        manifest.entries.push(entry);
        stats_in.push((ann, mask));
    }
    let stats = class_statistics(stats_in.iter().map(|(a, m)| (a, m)));
    write_text(&out.join(BALANCE_FILE), &class_statistics_csv(&stats))?;
    write_text(&out.join(MANIFEST_FILE), &manifest.to_csv())?;
    if manifest.entries.len() >= 2 {
        write_split(out, &split_dataset(&manifest.ids(), a.val_fraction, seed)?)?;
    }
    log::info!("ingested {} samples into {}", manifest.entries.len(), out.display());
    Ok(())
}

/// Dataset manifest plus the train/val split stored next to it, or one
/// derived from `seed` when none is stored.
fn dataset_split(data: &Path, val_fraction: f64, seed: u64) -> Result<(DatasetManifest, SplitAssignment), Failure> {
    check_fraction(val_fraction)?;
    let manifest_path = data.join(MANIFEST_FILE);
    require(&manifest_path, "dataset manifest")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let split_path = data.join(SPLIT_FILE);
    let split = if split_path.exists() {
        let text = fs::read_to_string(&split_path).map_err(|e| io_failure(&split_path, e))?;
        serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", split_path.display())))?
    } else {
        split_dataset(&manifest.ids(), val_fraction, seed)?
    };
    Ok((manifest, split))
}

fn model_config(a: &TrainArgs, size: usize) -> ModelConfig {
    let head = match a.head {
        HeadArg::Conv => HeadKind::ConvBaseline,
        HeadArg::Transformer => HeadKind::Transformer,
    };
    match a.model {
        ModelArg::Tiny => ModelConfig::tiny(a.channels, head, size),
        ModelArg::Full => {
            let mut cfg = ModelConfig::proposed();
            cfg.in_channels = a.channels;
            cfg.head = head;
            cfg.input_size = size;
            cfg.anchors = spectraleaf::model::config::scaled_anchors(size);
            cfg
        }
    }
}

fn train(a: &TrainArgs, seed: u64, out: &Path) -> Outcome {
    let (manifest, split) = dataset_split(&a.data, a.val_fraction, seed)?;
    let train_set = load_samples(&a.data, &manifest, &split.train_ids, a.channels)?;
    let val_set = load_samples(&a.data, &manifest, &split.val_ids, a.channels)?;
    let size = train_set
        .first()
        .map(|s| s.size().0)
        .ok_or_else(|| Failure::Usage("training split is empty".into()))?;
    let cfg = model_config(a, size);
    let model = Model::new(&cfg, seed)?;
    if let Some(path) = &a.init_from {
        require(path, "checkpoint")?;
        let src = Checkpoint::load(path)?;
        let mode = match a.adapt_mode {
            AdaptArg::Replicate => AdaptMode::Replicate,
            AdaptArg::Average => AdaptMode::Average,
            AdaptArg::Zero => AdaptMode::Zero,
        };
        let report = transfer_weights(&src.weights, &model, mode, seed)?;
        log::info!(
            "initialized from {}: {} copied, {} adapted, {} kept",
            path.display(),
            report.copied.len(),
            report.adapted.len(),
            report.kept_init.len()
        );
    }
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        augment: if a.no_augment { AugmentConfig::none() } else { AugmentConfig::default() },
        seed,
        class_weighting: a.class_weighting,
        clip_norm: a.clip_norm,
        ..TrainConfig::default()
    };
    tc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let outcome = match train_model(&model, &tc, &train_set, &val_set, |_| {}) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, component, last_good }) => {
            let path = out.join("last_good.safetensors");
            last_good.save(&path)?;
            return Err(Failure::Runtime(format!(
                "training diverged at epoch {epoch} ({component} loss non-finite); last good weights saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.best.save(out.join("best.safetensors"))?;
    outcome.last.save(out.join("last.safetensors"))?;
    write_text(&out.join("history.csv"), &outcome.history.to_csv())?;
    plot_history(&outcome.history, &out.join("curves.png"))?;
    write_split(out, &split)?;

    let best = Model::from_checkpoint(&outcome.best)?;
    let scored = if val_set.is_empty() { &train_set } else { &val_set };
    let report = evaluate(&best, scored, &tc.predict)?;
    write_reports(out, "", &report)?;
    log::info!(
        "best epoch {}: mAP50 {:.4}, mean Dice {:.4}",
        outcome.best.epoch,
        report.map50,
        report.mean.dice
    );
    Ok(())
}

fn write_reports(out: &Path, prefix: &str, report: &MetricReport) -> Outcome {
    write_text(&out.join(format!("{prefix}report.csv")), &report.report_csv())?;
    write_text(&out.join(format!("{prefix}confusion.csv")), &report.confusion_csv())?;
    plot_confusion(&report.confusion, &out.join(format!("{prefix}confusion.png")))?;
    write_text(&out.join(format!("{prefix}map50.txt")), &format!("{:.6}\n", report.map50))?;
    Ok(())
}

fn subset_ids(split: &SplitAssignment, manifest: &DatasetManifest, subset: SubsetArg) -> Vec<String> {
    match subset {
        SubsetArg::Train => split.train_ids.clone(),
        SubsetArg::Val => split.val_ids.clone(),
        SubsetArg::All => manifest.ids(),
    }
}

fn score(path: &Path, data: &Path, manifest: &DatasetManifest, ids: &[String]) -> Result<MetricReport, Failure> {
    require(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let samples = load_samples(data, manifest, ids, ckpt.config.in_channels)?;
    Ok(evaluate(&model, &samples, &PredictOptions::default())?)
}

fn eval(a: &EvalArgs, seed: u64, out: &Path) -> Outcome {
    let modes = [a.oracle, a.checkpoint.is_some(), !a.compare.is_empty()];
    if modes.iter().filter(|&&m| m).count() != 1 {
        return Err(Failure::Usage("give exactly one of --checkpoint, --compare or --oracle".into()));
    }
    if !a.compare.is_empty() && a.compare.len() != 2 {
        return Err(Failure::Usage(format!("--compare takes two checkpoints, got {}", a.compare.len())));
    }
    let (manifest, split) = dataset_split(&a.data, a.val_fraction, seed)?;
    let ids = subset_ids(&split, &manifest, a.subset);
    if ids.is_empty() {
        return Err(Failure::Usage(format!("the {:?} subset is empty", a.subset)));
    }
    if a.oracle {
        let samples = load_samples(&a.data, &manifest, &ids, 9).or_else(|_| load_samples(&a.data, &manifest, &ids, 3))?;
        return write_reports(out, "", &oracle_report(&samples)?);
    }
    if let Some(path) = &a.checkpoint {
        let report = score(path, &a.data, &manifest, &ids)?;
        plot_metric_bars(&[("model", &report)], &out.join("metrics.png"))?;
        return write_reports(out, "", &report);
    }
    let names = compare_names(&a.compare);
    let ra = score(&a.compare[0], &a.data, &manifest, &ids)?;
    let rb = score(&a.compare[1], &a.data, &manifest, &ids)?;
    write_reports(out, &format!("{}_", names[0]), &ra)?;
    write_reports(out, &format!("{}_", names[1]), &rb)?;
    write_text(&out.join("comparison.csv"), &comparison_table(&ra, &rb, &names[0], &names[1]))?;
    plot_metric_bars(&[(&names[0], &ra), (&names[1], &rb)], &out.join("metrics.png"))?;
    log::info!(
        "mean Dice {} {:.4} vs {} {:.4}",
        names[0],
        ra.mean.dice,
        names[1],
        rb.mean.dice
    );
    Ok(())
}

/// Short distinct labels for two checkpoints: their parent directory names,
/// falling back to `a` and `b`.
fn compare_names(paths: &[PathBuf]) -> [String; 2] {
    let label = |p: &PathBuf| {
        p.parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().replace(',', "_"))
            .filter(|n| !n.is_empty())
    };
    match (label(&paths[0]), label(&paths[1])) {
        (Some(x), Some(y)) if x != y => [x, y],
        _ => ["a".into(), "b".into()],
    }
}

fn sample_for(img: &MultiSpectralImage, channels: usize) -> spectraleaf::Result<Sample> {
    let blank = SemanticMask::background(img.height(), img.width());
    Sample::from_image(img, blank, Vec::new(), channels)
}

fn segment(model: &Model, img: &MultiSpectralImage, opts: &PredictOptions) -> spectraleaf::Result<SemanticMask> {
    let sample = sample_for(img, model.config().in_channels)?;
    let pred = predict(model, std::slice::from_ref(&sample), opts)?;
    Ok(pred.into_iter().next().expect("one prediction per sample").semantic)
}

fn find_gt(dir: &Path, id: &str) -> Option<PathBuf> {
    ["tif", "tiff", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.exists())
}

fn predict_images(a: &PredictArgs, out: &Path) -> Outcome {
    let inputs: Vec<PathBuf> = glob::glob(&a.input)
        .map_err(|e| Failure::Usage(format!("bad input pattern {:?}: {e}", a.input)))?
        .filter_map(std::result::Result::ok)
        .collect();
    if inputs.is_empty() {
        return Err(Failure::Usage(format!("no images match {:?}", a.input)));
    }
    require(&a.checkpoint, "checkpoint")?;
    let model = Model::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let other = match &a.compare {
        Some(p) => {
            require(p, "checkpoint")?;
            Some(Model::from_checkpoint(&Checkpoint::load(p)?)?)
        }
        None => None,
    };
    if let Some(dir) = &a.gt {
        require(dir, "ground-truth directory")?;
    }
    let opts = PredictOptions {
        semantic_threshold: a.semantic_threshold,
        batch_size: 1,
        ..PredictOptions::default()
    };
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;

    let mut failed = 0usize;
    for path in &inputs {
        let result = (|| -> spectraleaf::Result<()> {
            let img = load_image(path, NormalizeMode::default())?;
            let id = img.sample_id.clone();
            let mask = segment(&model, &img, &opts)?;
            write_mask_tiff(&out.join(format!("{id}_mask.tif")), &mask)?;
            let pred_panel = overlay(&img, &mask)?;
            pred_panel.save(out.join(format!("{id}_overlay.png")))?;

            let mut panels = Vec::new();
            if let Some(dir) = &a.gt {
                match find_gt(dir, &id) {
                    Some(p) => panels.push(overlay(&img, &read_mask(&p)?)?),
                    None => log::warn!("{id}: no ground-truth mask in {}", dir.display()),
                }
            }
            panels.push(pred_panel);
            if let Some(m) = &other {
                panels.push(overlay(&img, &segment(m, &img, &opts)?)?);
            }
            if panels.len() == 3 {
                side_by_side(&panels)?.save(out.join(format!("{id}_triptych.png")))?;
            } else if panels.len() == 2 {
                side_by_side(&panels)?.save(out.join(format!("{id}_panels.png")))?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            log::error!("{}: {e}", path.display());
            failed += 1;
        }
    }
    log::info!("{} of {} images segmented", inputs.len() - failed, inputs.len());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} images failed", inputs.len())));
    }
    Ok(())
}

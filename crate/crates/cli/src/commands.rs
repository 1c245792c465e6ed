use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use dmem::data::{
    generate_synthetic, load_dataset, read_binary_mask, read_image, read_index, read_label_mask,
    resize_bilinear, resize_nearest, write_binary_mask, write_dataset, write_label_mask,
    MaskFormat, SynthSpec, INDEX_FILE,
};
use dmem::ensemble::{
    fuse_nuclei, stored_precision, train_bundle, BundlePlan, EnsembleBundle, EpochLog,
    TrainConfig,
};
use dmem::gradsuite;
use dmem::kv::KeyValues;
use dmem::metrics::{aggregate, comparison_table, MetricsReport, MetricsRow};
use dmem::network::{ArchConfig, Variant};
use dmem::{BinaryMask, Scalar};

use crate::config::{self, echo, get, layer};
use crate::{CliError, EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

fn set_opt<V: std::fmt::Display>(kv: &mut KeyValues, key: &str, v: &Option<V>) {
    if let Some(v) = v {
        kv.set(key, v);
    }
}

fn set_path(kv: &mut KeyValues, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        kv.set(key, v.display());
    }
}

/// An index file, or a directory holding `index.tsv`.
fn index_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(INDEX_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Files with one of `exts` directly inside `dir`, keyed by file stem.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?
            .path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && exts.contains(&ext) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn synth(a: &SynthArgs, file: Option<&KeyValues>, seed: Option<u64>) -> Result<(), CliError> {
    let mut defaults = KeyValues::new();
    SynthSpec::default().write_kv(&mut defaults);
    defaults.set("out", "");
    let mut flags = KeyValues::new();
    set_path(&mut flags, "out", &a.out);
    set_opt(&mut flags, "count", &a.count);
    set_opt(&mut flags, "size", &a.size);
    set_opt(&mut flags, "noise", &a.noise);
    set_opt(&mut flags, "nuclei_min", &a.nuclei_min);
    set_opt(&mut flags, "nuclei_max", &a.nuclei_max);
    set_opt(&mut flags, "channels", &a.channels);
    set_opt(&mut flags, "seed", &seed);
    let kv = layer(defaults, file, &flags);
    echo("synth", &kv);
    let spec = SynthSpec::default().overlay_kv(&kv).map_err(CliError::usage)?;
    spec.validate()?;
    let out = config::path(&kv, "out", "--out")?;
    let samples = generate_synthetic(&spec)?;
    create_dir(&out)?;
    write_dataset(&out, &samples)?;
    write_text(&out.join("synth.txt"), &kv.render())?;
    let mut hist = [0usize; 4];
    for s in &samples {
        for (h, c) in hist.iter_mut().zip(s.mask.histogram()) {
            *h += c;
        }
    }
    let total: usize = hist.iter().sum();
    println!("wrote {} samples to {}", samples.len(), out.display());
    for (name, n) in ["background", "cytoplasm", "normal nucleus", "abnormal nucleus"].iter().zip(hist) {
        println!("  {name:<16} {:>6.2}%", 100.0 * n as f64 / total as f64);
    }
    Ok(())
}

fn train_defaults() -> KeyValues {
    let mut kv = KeyValues::new();
    for key in ["data", "val", "out"] {
        kv.set(key, "");
    }
    kv.set("holdout", 0);
    kv.set("mask_format", "labels");
    kv.set("size_threshold", "auto");
    kv.set("precision", "f64");
    kv.set("parallel", false);
    kv.set("single_path", "none");
    kv.set("seed", 7);
    ArchConfig::default().write_kv(&mut kv);
    kv.remove("variant");
    TrainConfig::default().write_kv(&mut kv);
    kv
}

fn mask_format(kv: &KeyValues) -> Result<MaskFormat, CliError> {
    let threshold = match kv.get("size_threshold") {
        None | Some("auto") => None,
        Some(_) => Some(get::<usize>(kv, "size_threshold")?),
    };
    match kv.get("mask_format") {
        Some("labels") => Ok(MaskFormat::Labels),
        Some("raw") => Ok(MaskFormat::Raw { threshold }),
        other => Err(CliError::usage(format!(
            "mask_format must be labels or raw, got {other:?}"
        ))),
    }
}

pub fn train(a: &TrainArgs, file: Option<&KeyValues>, seed: Option<u64>) -> Result<(), CliError> {
    let mut flags = KeyValues::new();
    set_path(&mut flags, "data", &a.data);
    set_path(&mut flags, "val", &a.val);
    set_path(&mut flags, "out", &a.out);
    set_opt(&mut flags, "holdout", &a.holdout);
    set_opt(&mut flags, "single_path", &a.single_path);
    set_opt(&mut flags, "epochs", &a.epochs);
    set_opt(&mut flags, "batch_size", &a.batch_size);
    set_opt(&mut flags, "lr", &a.lr);
    set_opt(&mut flags, "optimizer", &a.optimizer);
    set_opt(&mut flags, "precision", &a.precision);
    set_opt(&mut flags, "mask_format", &a.mask_format);
    set_opt(&mut flags, "size_threshold", &a.size_threshold);
    set_opt(&mut flags, "stages", &a.stages);
    set_opt(&mut flags, "growth_rate", &a.growth_rate);
    set_opt(&mut flags, "layers_per_block", &a.layers_per_block);
    set_opt(&mut flags, "initial_channels", &a.initial_channels);
    set_opt(&mut flags, "seed", &seed);
    if a.parallel {
        flags.set("parallel", true);
    }
    let kv = layer(train_defaults(), file, &flags);
    echo("train", &kv);

    let arch = ArchConfig::default().overlay_kv(&kv).map_err(CliError::usage)?;
    arch.validate()?;
    let hp = TrainConfig::default().overlay_kv(&kv).map_err(CliError::usage)?;
    hp.validate()?;
    let plan = match kv.get("single_path") {
        None | Some("none") | Some("") => BundlePlan::Ensemble,
        Some(v) => BundlePlan::Single(v.parse::<Variant>().map_err(CliError::usage)?),
    };
    let seed: u64 = get(&kv, "seed")?;
    let parallel: bool = get(&kv, "parallel")?;
    let format = mask_format(&kv)?;
    let out = config::path(&kv, "out", "--out")?;
    let data = config::path(&kv, "data", "--data")?;

    let mut train = load_dataset(&index_path(&data), format)?;
    let mut val = match kv.get("val") {
        Some(v) if !v.is_empty() => load_dataset(&index_path(Path::new(v)), format)?,
        _ => Vec::new(),
    };
    let holdout: usize = get(&kv, "holdout")?;
    if holdout >= train.len() {
        return Err(CliError::usage(format!(
            "holdout {holdout} leaves no training samples out of {}",
            train.len()
        )));
    }
    val.splice(0..0, train.split_off(train.len() - holdout));
    eprintln!("training on {} samples, validating on {}", train.len(), val.len());

    let logs = Mutex::new(Vec::new());
    let start = Instant::now();
    let on_epoch = |i: usize, v: Variant, log: &EpochLog| {
        let zsi = log.val_zsi.map_or("-".to_string(), |z| format!("{z:.4}"));
        eprintln!(
            "[{:>8.1}s] path{i} {:<16} epoch {:>3}/{} loss {:.5} val_zsi {zsi}",
            start.elapsed().as_secs_f64(),
            v.as_str(),
            log.epoch,
            hp.epochs,
            log.loss
        );
        logs.lock().expect("log mutex").push((i, v, log.clone()));
    };
    match kv.get("precision") {
        Some("f32") => {
            let b = train_bundle::<f32>(&arch, &plan, &train, &val, &hp, seed, parallel, &on_epoch)?;
            b.save(&out)?;
        }
        Some("f64") => {
            let b = train_bundle::<f64>(&arch, &plan, &train, &val, &hp, seed, parallel, &on_epoch)?;
            b.save(&out)?;
        }
        other => return Err(CliError::usage(format!("precision must be f32 or f64, got {other:?}"))),
    }

    let mut logs = logs.into_inner().expect("log mutex");
    logs.sort_by_key(|(i, _, l)| (*i, l.epoch));
    let mut tsv = String::from("path\tvariant\tepoch\tloss\tval_zsi\n");
    for (i, v, l) in &logs {
        let zsi = l.val_zsi.map_or(String::new(), |z| format!("{z:.6}"));
        tsv.push_str(&format!("{i}\t{v}\t{}\t{:.6}\t{zsi}\n", l.epoch, l.loss));
    }
    write_text(&out.join("train_log.tsv"), &tsv)?;
    write_text(&out.join("train_config.txt"), &kv.render())?;
    println!("wrote bundle to {}", out.display());
    Ok(())
}

/// `(id, image path)` pairs from an index, a dataset directory or a
/// directory of images.
fn image_list(p: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if p.is_file() || p.join(INDEX_FILE).is_file() {
        Ok(read_index(&index_path(p))?
            .into_iter()
            .map(|e| (e.id, e.image))
            .collect())
    } else {
        list_files(p, &["png", "raw"])
    }
}

fn predict_with<T: Scalar>(
    bundle_dir: &Path,
    images: &[(String, PathBuf)],
    out: &Path,
    resize: bool,
) -> Result<(), CliError> {
    let bundle = EnsembleBundle::<T>::load(bundle_dir)?;
    let (h, w) = bundle.arch().input_size;
    eprintln!(
        "loaded {} bundle ({}) from {}",
        bundle.kind(),
        bundle.variants().iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", "),
        bundle_dir.display()
    );
    let mut total = 0.0;
    for (id, path) in images {
        let mut image = read_image(path)?;
        if resize {
            image = resize_bilinear(&image, h, w)?;
        }
        let start = Instant::now();
        let pred = bundle.predict(&image)?;
        let secs = start.elapsed().as_secs_f64();
        total += secs;
        eprintln!("{id}: {:.3}s", secs);
        write_label_mask(&out.join("labels").join(format!("{id}.png")), &pred.labels)?;
        write_binary_mask(&out.join("nuclei").join(format!("{id}.png")), &pred.nuclei)?;
    }
    println!(
        "predicted {} images into {} (mean {:.3}s per image)",
        images.len(),
        out.display(),
        total / images.len().max(1) as f64
    );
    Ok(())
}

pub fn predict(a: &PredictArgs, file: Option<&KeyValues>) -> Result<(), CliError> {
    let mut defaults = KeyValues::new();
    for key in ["bundle", "images", "out"] {
        defaults.set(key, "");
    }
    defaults.set("resize", false);
    let mut flags = KeyValues::new();
    set_path(&mut flags, "bundle", &a.bundle);
    set_path(&mut flags, "images", &a.images);
    set_path(&mut flags, "out", &a.out);
    if a.resize {
        flags.set("resize", true);
    }
    let kv = layer(defaults, file, &flags);
    echo("predict", &kv);
    let bundle = config::path(&kv, "bundle", "--bundle")?;
    let images = image_list(&config::path(&kv, "images", "--images")?)?;
    let out = config::path(&kv, "out", "--out")?;
    let resize: bool = get(&kv, "resize")?;
    match stored_precision(&bundle)?.as_str() {
        "f32" => predict_with::<f32>(&bundle, &images, &out, resize),
        _ => predict_with::<f64>(&bundle, &images, &out, resize),
    }
}

/// Ground-truth nucleus masks by id.
fn ground_truth(p: &Path) -> Result<Vec<(String, BinaryMask)>, CliError> {
    let files: Vec<(String, PathBuf)> = if p.is_file() || p.join(INDEX_FILE).is_file() {
        read_index(&index_path(p))?
            .into_iter()
            .map(|e| (e.id, e.mask))
            .collect()
    } else {
        list_files(p, &["png"])?
    };
    let mut out = files
        .into_iter()
        .map(|(id, path)| Ok((id, fuse_nuclei(&read_label_mask(&path)?))))
        .collect::<Result<Vec<_>, CliError>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn parse_pred(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, dir)) if !name.is_empty() => (name.to_string(), PathBuf::from(dir)),
        _ => {
            let dir = PathBuf::from(spec);
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or(spec)
                .to_string();
            (name, dir)
        }
    }
}

fn score_method(
    name: &str,
    dir: &Path,
    gt: &[(String, BinaryMask)],
) -> Result<MetricsReport, CliError> {
    let nuclei_dir = if dir.join("nuclei").is_dir() {
        dir.join("nuclei")
    } else {
        dir.to_path_buf()
    };
    let preds = list_files(&nuclei_dir, &["png"])?;
    let pred_ids: BTreeSet<&str> = preds.iter().map(|(id, _)| id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = gt.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<&str> = gt_ids.difference(&pred_ids).copied().collect();
    let extra: Vec<&str> = pred_ids.difference(&gt_ids).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = format!("{name}: ids differ from ground truth");
        if !missing.is_empty() {
            msg.push_str(&format!("\n  missing predictions: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("\n  no ground truth for: {}", extra.join(", ")));
        }
        return Err(CliError::mismatch(msg));
    }
    let mut rows = Vec::with_capacity(gt.len());
    for ((id, truth), (_, path)) in gt.iter().zip(&preds) {
        let pred = read_binary_mask(path)?;
        let truth = if pred.dims() == truth.dims() {
            truth.clone()
        } else {
            resize_binary(truth, pred.dims())?
        };
        rows.push(MetricsRow::score(id.clone(), &pred, &truth)?);
    }
    Ok(aggregate(rows)?)
}

/// Nearest-neighbour resize of a binary mask.
fn resize_binary(m: &BinaryMask, (h, w): (usize, usize)) -> Result<BinaryMask, CliError> {
    let (mh, mw) = m.dims();
    let labels = dmem::LabelMask::new(mh, mw, m.data().iter().map(|&v| v as u8).collect())?;
    let r = resize_nearest(&labels, h, w)?;
    Ok(BinaryMask::new(h, w, r.data().iter().map(|&v| v != 0).collect())?)
}

pub fn eval(a: &EvalArgs, file: Option<&KeyValues>) -> Result<(), CliError> {
    let mut defaults = KeyValues::new();
    defaults.set("gt", "");
    defaults.set("out", "");
    let mut flags = KeyValues::new();
    set_path(&mut flags, "gt", &a.gt);
    set_path(&mut flags, "out", &a.out);
    let kv = layer(defaults, file, &flags);
    echo("eval", &kv);
    let gt = ground_truth(&config::path(&kv, "gt", "--gt")?)?;
    if gt.is_empty() {
        return Err(CliError::usage("no ground-truth masks found"));
    }
    let mut reports = Vec::new();
    for spec in &a.preds {
        let (name, dir) = parse_pred(spec);
        let report = score_method(&name, &dir, &gt)?;
        reports.push((name, report));
    }
    let out = kv.get("out").filter(|o| !o.is_empty()).map(PathBuf::from);
    if let Some(out) = &out {
        create_dir(out)?;
    }
    let mut summary = String::new();
    for (name, r) in &reports {
        summary.push_str(&format!("== {name} ({} images) ==\n{}\n", r.rows.len(), r.summary_block()));
        if let Some(out) = &out {
            write_text(&out.join(format!("{name}.tsv")), &r.to_tsv())?;
        }
    }
    let columns: Vec<(&str, &MetricsReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    summary.push_str(&comparison_table(&columns));
    if let Some(out) = &out {
        write_text(&out.join("summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let outcomes = gradsuite::run(&a.op, a.corrupt_grad)?;
    print!("{}", gradsuite::format_table(&outcomes));
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(CliError::numeric(format!(
            "{failed} of {} gradient checks exceed {:e}",
            outcomes.len(),
            gradsuite::THRESHOLD
        )));
    }
    Ok(())
}

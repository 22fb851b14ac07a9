use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use intrinsic_autodiff::OpKind;
use intrinsic_core::io::{read_image, read_pfm, write_pfm, write_png_preview};
use intrinsic_core::metrics::{ImageScores, LmseMode, MetricReport, WindowSpec};
use intrinsic_core::retinex::{retinex_decompose, RetinexParams};
use intrinsic_core::synth::{
    dataset_gen, load_benchmark, load_manifest_samples, BenchmarkItem, Canvas, SceneParams, MANIFEST_FILE,
};
use intrinsic_core::{Image, IntrinsicSet};
use intrinsic_nets::data::{Padding, TrainSample};
use intrinsic_nets::model::{MODEL_FILE, Model};
use intrinsic_nets::verify::{run_all, VerifyOptions};
use intrinsic_nets::{Architecture, ModelKind, ModelSpec, SavedModel, TrainConfig, Trainer};
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::args::{DatasetArgs, DecomposeArgs, EvalArgs, Switch, TrainArgs, VerifyArgs};
use crate::{CmdResult, Failure};

pub const OUT_ENV: &str = "INTRINSIC_OUT";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn output_dir(explicit: Option<PathBuf>, sub: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("intrinsic-out"));
        root.join(sub)
    })
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_run_config(dir: &Path, value: serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(&value).expect("json value serializes");
    write_text(&dir.join(RUN_CONFIG_FILE), &(text + "\n"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset(a: DatasetArgs) -> CmdResult {
    let canvas = a
        .canvas
        .unwrap_or(if a.paper_scale { Canvas::PAPER } else { Canvas::DESK });
    let params = if a.smooth_shading {
        SceneParams::smooth_shading(canvas)
    } else {
        SceneParams::with_canvas(canvas)
    };
    let out = output_dir(a.out, "dataset");
    let manifest = dataset_gen(a.n, a.seed, &out, a.formation, &params)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| Failure::runtime(format!("{}: {e}", manifest_path.display())))?;
    write_run_config(
        &out,
        json!({
            "command": "dataset",
            "n": a.n,
            "seed": a.seed,
            "formation": a.formation.name(),
            "canvas": [canvas.height, canvas.width],
            "smooth_shading": a.smooth_shading,
        }),
    )?;
    println!(
        "dataset: count={} formation={} manifest={} sha256={}",
        manifest.count,
        a.formation.name(),
        manifest_path.display(),
        hex(&Sha256::digest(&bytes))
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    arch: Option<Architecture>,
    train: Option<TrainConfig>,
}

fn build_spec(a: &TrainArgs) -> Result<ModelSpec, Failure> {
    let mut spec = ModelSpec {
        arch: Architecture::preset(a.model, a.paper_scale),
        train: if a.paper_scale { TrainConfig::paper() } else { TrainConfig::desk() },
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        let cfg: ConfigFile =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        if let Some(arch) = cfg.arch {
            if arch.kind() != a.model {
                return Err(Failure::usage(format!(
                    "{} describes a {} model but --model is {}",
                    path.display(),
                    arch.kind(),
                    a.model
                )));
            }
            spec.arch = arch;
        }
        if let Some(train) = cfg.train {
            spec.train = train;
        }
    }
    apply_overrides(a, &mut spec)?;
    Ok(spec)
}

fn apply_overrides(a: &TrainArgs, spec: &mut ModelSpec) -> CmdResult {
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(s) = a.seed {
        spec.train.seed = s;
    }
    if let Some(b) = a.batch_size {
        spec.train.batch_size = b;
    }
    if let Some(aug) = a.augment {
        spec.train.augment = aug == Switch::On;
    }
    if let Some(imf) = a.imf {
        if a.model == ModelKind::RetinetS1 && imf == Switch::On {
            return Err(Failure::usage("retinet-s1 regresses gradients and has no IMF loss"));
        }
        spec.arch.set_imf(imf == Switch::On);
    }
    if a.gt_gradients {
        match &mut spec.arch {
            Architecture::RetinetS2 { gt_gradients, .. } => *gt_gradients = true,
            _ => return Err(Failure::usage("--gt-gradients applies to retinet-s2 only")),
        }
    }
    spec.validate()?;
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    if a.stage1.is_some() && a.model != ModelKind::RetinetS2 {
        return Err(Failure::usage("--stage1 applies to retinet-s2 only"));
    }
    let out = output_dir(a.out.clone(), a.model.name());
    let (spec, model) = if a.resume {
        let mut spec = ModelSpec::load(out.join(MODEL_FILE))?;
        if spec.arch.kind() != a.model {
            return Err(Failure::usage(format!(
                "{} holds a {} model but --model is {}",
                out.display(),
                spec.arch.kind(),
                a.model
            )));
        }
        if let Some(e) = a.epochs {
            spec.train.epochs = e;
        }
        let saved = SavedModel::load(&out)?;
        (spec, saved.model)
    } else {
        let mut spec = build_spec(&a)?;
        let gt = matches!(spec.arch, Architecture::RetinetS2 { gt_gradients: true, .. });
        if a.model == ModelKind::RetinetS2 && a.stage1.is_none() && !gt {
            return Err(Failure::usage(
                "retinet-s2 needs --stage1 <dir> with a trained retinet-s1 model, or --gt-gradients",
            ));
        }
        let stage1 = match &a.stage1 {
            Some(dir) => {
                let saved = SavedModel::load(dir)?;
                let Architecture::RetinetS1 { retinet: s1_cfg } = saved.spec.arch.clone() else {
                    return Err(Failure::usage(format!(
                        "{} holds a {} model, not retinet-s1",
                        dir.display(),
                        saved.spec.arch.kind()
                    )));
                };
                if let Architecture::RetinetS2 { retinet, .. } = &mut spec.arch {
                    *retinet = s1_cfg;
                }
                match saved.model {
                    Model::Stage1 { net, .. } => Some(net),
                    _ => unreachable!("retinet-s1 spec builds a stage-1 model"),
                }
            }
            None => None,
        };
        let mut model = Model::new(&spec.arch, spec.train.seed)?;
        if let Some(net) = stage1 {
            model.set_stage1(net)?;
        }
        (spec, model)
    };

    let (_, stored) = load_manifest_samples(&a.data)?;
    let samples: Vec<TrainSample> = stored.into_iter().map(TrainSample::from).collect();
    log::info!("training {} on {} samples into {}", a.model, samples.len(), out.display());
    create_dir(&out)?;
    write_run_config(
        &out,
        json!({
            "command": "train",
            "model": a.model.name(),
            "data": a.data,
            "stage1": a.stage1,
            "resume": a.resume,
            "spec": serde_json::to_value(&spec).expect("spec serializes"),
        }),
    )?;
    let mut trainer = Trainer::new(spec, model, samples)?.with_output(&out)?;
    if a.resume {
        trainer = trainer.resume(&out)?;
    }
    let log = trainer.run()?;
    match log.records.last() {
        Some(r) => println!("train: {}", r.line()),
        None => {
            if let Some(init) = log.initial() {
                println!(
                    "train: epoch=0 loss_cl={:.9e} loss_imf={:.9e} loss_total={:.9e}",
                    init.loss_cl, init.loss_imf, init.loss_total
                );
            }
        }
    }
    println!("train: model={}", out.display());
    Ok(())
}

/// One image to decompose, with ground truth when it came from a dataset.
struct Input {
    name: String,
    source: PathBuf,
    image: Image,
    truth: Option<IntrinsicSet>,
}

fn image_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_image").map(str::to_owned).unwrap_or(stem)
}

fn collect_inputs(paths: &[PathBuf], png_gamma: Option<f32>) -> Result<Vec<Input>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        let is_manifest = p.is_file() && p.file_name().is_some_and(|n| n == MANIFEST_FILE);
        if p.is_dir() || is_manifest {
            let items: Vec<BenchmarkItem> = load_benchmark(p, png_gamma)?;
            out.extend(items.into_iter().map(|it| Input {
                name: it.name,
                source: p.clone(),
                image: it.image,
                truth: Some(it.set),
            }));
        } else {
            out.push(Input {
                name: image_name(p),
                source: p.clone(),
                image: read_image(p, png_gamma)?,
                truth: None,
            });
        }
    }
    Ok(out)
}

pub fn decompose(a: DecomposeArgs) -> CmdResult {
    let inputs = collect_inputs(&a.input, a.png_gamma)?;
    let mut saved = match &a.model {
        Some(dir) => Some(SavedModel::load(dir)?),
        None => None,
    };
    let mut retinex = RetinexParams::default();
    if let Some(t) = a.threshold {
        retinex.threshold = t;
    }
    let out = output_dir(a.out.clone(), "decompose");
    create_dir(&out)?;
    let mut records = Vec::new();
    for input in &inputs {
        let (set, padding) = match saved.as_mut() {
            Some(m) => {
                let multiple = m.spec.arch.size_multiple();
                let gt_mode = matches!(m.spec.arch, Architecture::RetinetS2 { gt_gradients: true, .. });
                let truth = match (&input.truth, gt_mode) {
                    (Some(t), true) => Some((&t.reflectance, &t.shading)),
                    (None, true) => {
                        return Err(Failure::usage(format!(
                            "{}: this model consumes ground-truth gradients; pass a dataset directory",
                            input.source.display()
                        )))
                    }
                    _ => None,
                };
                let d = m.model.decompose_with_gradients(&input.image, truth, multiple)?;
                (d.set, d.padding)
            }
            None => (retinex_decompose(&input.image, &retinex)?.set, Padding::default()),
        };
        let base = out.join(&input.name);
        let path = |suffix: &str| PathBuf::from(format!("{}_{suffix}", base.display()));
        write_pfm(path("reflectance.pfm"), &set.reflectance)?;
        write_pfm(path("shading.pfm"), &set.shading)?;
        write_png_preview(path("reflectance.png"), &set.reflectance, a.gamma)?;
        write_png_preview(path("shading.png"), &set.shading, a.gamma)?;
        write_png_preview(path("reconstruction.png"), &set.compose()?, a.gamma)?;
        log::info!("decomposed {}", input.name);
        records.push(json!({
            "name": input.name,
            "source": input.source,
            "height": input.image.height(),
            "width": input.image.width(),
            "padding": padding,
        }));
    }
    let method = match &a.model {
        Some(dir) => json!({ "model": dir }),
        None => json!({ "retinex": retinex }),
    };
    write_text(
        &out.join("decompose.json"),
        &(serde_json::to_string_pretty(&json!({ "method": method, "images": records })).expect("json") + "\n"),
    )?;
    write_run_config(
        &out,
        json!({ "command": "decompose", "inputs": a.input, "gamma": a.gamma, "method": method }),
    )?;
    println!("decompose: images={} out={}", inputs.len(), out.display());
    Ok(())
}

fn prediction_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(name) = file.strip_suffix("_reflectance.pfm") {
            names.push(name.to_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let window = WindowSpec::new(a.k).map_err(|e| Failure::usage(format!("--k: {e}")))?;
    let gt: BTreeMap<String, BenchmarkItem> = load_benchmark(&a.gt, a.png_gamma)?
        .into_iter()
        .map(|it| (it.name.clone(), it))
        .collect();
    let preds = prediction_names(&a.pred)?;
    let mut unmatched: Vec<String> = preds
        .iter()
        .filter(|n| !gt.contains_key(*n) || !a.pred.join(format!("{n}_shading.pfm")).is_file())
        .map(|n| format!("prediction {n}"))
        .collect();
    unmatched.extend(
        gt.keys()
            .filter(|n| !preds.contains(n))
            .map(|n| format!("ground truth {n}")),
    );
    if !unmatched.is_empty() {
        return Err(Failure::runtime(format!(
            "{} unmatched item(s): {}",
            unmatched.len(),
            unmatched.join(", ")
        )));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for name in &preds {
        let item = &gt[name];
        let pred = IntrinsicSet::new(
            read_pfm(a.pred.join(format!("{name}_reflectance.pfm")))?,
            read_pfm(a.pred.join(format!("{name}_shading.pfm")))?,
        )?;
        let scores = ImageScores::compute_with(&pred, &item.set, window, LmseMode::Joint, item.mask.as_ref())?;
        rows.push((name.clone(), scores));
    }
    let report = MetricReport::from_rows(rows);
    let out = output_dir(a.out, "eval");
    create_dir(&out)?;
    report.write_csv(out.join("metrics.csv"))?;
    write_run_config(
        &out,
        json!({ "command": "eval", "pred": a.pred, "gt": a.gt, "k": a.k, "png_gamma": a.png_gamma }),
    )?;
    print!("{}", report.table());
    println!("eval: images={} csv={}", preds.len(), out.join("metrics.csv").display());
    Ok(())
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    if a.trials == 0 {
        return Err(Failure::usage("--trials must be at least 1"));
    }
    let inject_fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            Failure::usage(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
        })?),
        None => None,
    };
    let opts = VerifyOptions {
        seed: a.seed,
        trials: a.trials,
        inject_fault,
    };
    let outcomes = run_all(&opts)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    match outcomes.iter().find(|o| !o.passed) {
        Some(first) => Err(Failure {
            code: Failure::VERIFY,
            message: format!(
                "{failed} check(s) failed; first: op {} in check {} at seed {} with max relative error {:.3e} (tolerance {:.0e})",
                first.op, first.name, first.seed, first.max_error, first.tolerance
            ),
        }),
        None => {
            println!("verify: {} checks passed", outcomes.len());
            Ok(())
        }
    }
}

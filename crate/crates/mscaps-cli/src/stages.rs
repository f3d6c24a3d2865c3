use std::fs;
use std::path::{Path, PathBuf};

use mscaps_core::capsnet::{CapsConfig, MIN_PATCH};
use mscaps_core::evaluation::{
    confusion, infer_change_map_with_runner, metrics, ChangeMap, ConfusionCounts, Metrics,
};
use mscaps_core::preprocessing::{log_ratio_di, synth_scene, DifferenceImage, Rect, ScenePair};
use mscaps_core::pseudo_label::{sample_training_set, select_labels, Label, LabelMap};
use mscaps_core::training::{train_with_runner, Checkpoint, TrainConfig};

use crate::args::{
    Cmd, Common, DiArgs, EvalArgs, InferArgs, Knobs, RunArgs, SceneSource, SweepArgs, SweepAxis,
    SynthArgs, SynthKnobs, TrainArgs,
};
use crate::config::{parse_region, parse_size, parse_values, Settings};
use crate::error::{fail, usage, Result};
use crate::formats;
use crate::parallel::Exec;

pub fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Di(a) => cmd_di(a),
        Cmd::Label(a) => cmd_label(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Run(a) => cmd_run(a),
    }
}

/// Settings, output directory, seed, and runner shared by every command.
struct Env {
    settings: Settings,
    out: PathBuf,
    seed: u64,
    exec: Exec,
}

fn env(common: &Common) -> Result<Env> {
    let settings = Settings::load(common.config.as_deref())?;
    let out = settings
        .get_path("out", common.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let seed = settings.get("seed", common.seed, 0)?;
    let deterministic = settings.get_switch("deterministic", common.deterministic)?;
    fs::create_dir_all(&out)
        .map_err(|e| fail("setup", format!("cannot create {}: {e}", out.display())))?;
    Ok(Env { settings, out, seed, exec: Exec::new(deterministic) })
}

fn train_config(env: &Env, knobs: &Knobs) -> Result<TrainConfig> {
    let r = env.settings.get("patch-size", knobs.patch_size, 9)?;
    if r % 2 == 0 || r < MIN_PATCH {
        return Err(usage(format!(
            "patch size must be odd and at least {MIN_PATCH}, got {r}"
        )));
    }
    let cfg = TrainConfig {
        lr: env.settings.get("lr", knobs.lr, 1e-3)?,
        batch: env.settings.get("batch", knobs.batch, 64)?,
        epochs: env.settings.get("epochs", knobs.epochs, 50)?,
        iters: env.settings.get("routing-iters", knobs.routing_iters, 3)?,
        seed: env.seed,
        r,
        n: env.settings.get("samples", knobs.samples, 1000)?,
        loss: Default::default(),
        caps: CapsConfig::default(),
    };
    cfg.validate()
        .map_err(|e| usage(format!("invalid training configuration: {e}")))?;
    Ok(cfg)
}

fn required_path(env: &Env, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    env.settings
        .get_path(key, flag)
        .ok_or_else(|| usage(format!("missing --{key}")))
}

fn load_pair(stage: &str, img1: &Path, img2: &Path) -> Result<ScenePair> {
    let a = formats::read_gray(stage, img1)?;
    let b = formats::read_gray(stage, img2)?;
    if (a.h, a.w) != (b.h, b.w) {
        return Err(fail(
            stage,
            format!("image sizes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        ));
    }
    ScenePair::new(a.intensities(), b.intensities(), a.h, a.w).map_err(|e| fail(stage, e))
}

/// The float DI every stage computes: from the raw pair when given,
/// otherwise from a saved 8-bit DI rescaled to [0, 1].
fn resolve_di(
    stage: &str,
    env: &Env,
    img1: Option<PathBuf>,
    img2: Option<PathBuf>,
    di: Option<PathBuf>,
) -> Result<DifferenceImage> {
    let img1 = env.settings.get_path("img1", img1);
    let img2 = env.settings.get_path("img2", img2);
    let di = env.settings.get_path("di", di);
    match (img1, img2, di) {
        (Some(a), Some(b), None) => Ok(log_ratio_di(&load_pair(stage, &a, &b)?)),
        (None, None, Some(path)) => {
            let img = formats::read_gray(stage, &path)?;
            let maxval = f64::from(img.maxval);
            let values = img.data.iter().map(|&v| f64::from(v) / maxval).collect();
            DifferenceImage::from_values(values, img.h, img.w).map_err(|e| fail(stage, e))
        }
        (None, None, None) => Err(usage(format!("{stage} needs --img1/--img2 or --di"))),
        (_, _, Some(_)) => Err(usage("give either --img1/--img2 or --di, not both")),
        _ => Err(usage("--img1 and --img2 go together")),
    }
}

// Artifact file names, fixed so stages compose.
const IMG1: &str = "img1.pgm";
const IMG2: &str = "img2.pgm";
const TRUTH: &str = "truth.pgm";
const DI: &str = "di.pgm";
const LABELS: &str = "labels.pgm";
const MODEL: &str = "model.ckpt";
const CHANGEMAP: &str = "changemap.png";
const METRICS_TXT: &str = "metrics.txt";
const METRICS_KV: &str = "metrics.kv";
const SWEEP_CSV: &str = "sweep.csv";

fn write_di(stage: &str, out: &Path, di: &DifferenceImage) -> Result<()> {
    let (h, w) = di.dims();
    let bytes: Vec<u8> = di.values().iter().map(|&v| (v * 255.0).round() as u8).collect();
    formats::write_pgm8(stage, &out.join(DI), h, w, &bytes)
}

fn write_labels(stage: &str, out: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let bytes: Vec<u8> = labels
        .labels()
        .iter()
        .map(|l| match l {
            Label::Unchanged => 0,
            Label::Intermediate => 128,
            Label::Changed => 255,
        })
        .collect();
    formats::write_pgm8(stage, &out.join(LABELS), h, w, &bytes)
}

fn read_labels(stage: &str, path: &Path) -> Result<LabelMap> {
    let img = formats::read_gray(stage, path)?;
    let labels = img
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(Label::Unchanged),
            128 => Ok(Label::Intermediate),
            255 => Ok(Label::Changed),
            _ => Err(fail(
                stage,
                format!("{} is not a label map (sample {v})", path.display()),
            )),
        })
        .collect::<Result<Vec<Label>>>()?;
    LabelMap::from_labels(labels, img.h, img.w).map_err(|e| fail(stage, e))
}

fn write_changemap(stage: &str, out: &Path, map: &ChangeMap) -> Result<()> {
    let (h, w) = map.dims();
    let bytes: Vec<u8> = map.bits().iter().map(|&b| b * 255).collect();
    formats::write_png8(stage, &out.join(CHANGEMAP), h, w, &bytes)
}

fn write_metrics(stage: &str, out: &Path, c: &ConfusionCounts, m: &Metrics) -> Result<String> {
    let line = format!(
        "FP={} FN={} OE={} PCC={:.2} KC={:.2}",
        c.false_pos, c.false_neg, m.oe, m.pcc, m.kc
    );
    fs::write(out.join(METRICS_TXT), format!("{line}\n"))
        .map_err(|e| fail(stage, format!("cannot write {METRICS_TXT}: {e}")))?;
    let kv = format!(
        "fp={}\nfn={}\noe={}\npcc={}\nkc={}\n",
        c.false_pos, c.false_neg, m.oe, m.pcc, m.kc
    );
    fs::write(out.join(METRICS_KV), kv)
        .map_err(|e| fail(stage, format!("cannot write {METRICS_KV}: {e}")))?;
    Ok(line)
}

/// Quantizes both intensity images with one shared scale (so their ratio
/// structure survives) and writes the three scene files.
fn write_scene(stage: &str, out: &Path, scene: &ScenePair) -> Result<()> {
    let (h, w) = scene.dims();
    let peak = scene
        .img1()
        .iter()
        .chain(scene.img2())
        .fold(0.0f64, |acc, &v| acc.max(v));
    let scale = if peak > 0.0 { 65535.0 / peak } else { 1.0 };
    let quantize = |img: &[f64]| -> Vec<u16> {
        img.iter().map(|&v| (v * scale).round() as u16).collect()
    };
    formats::write_pgm16(stage, &out.join(IMG1), h, w, &quantize(scene.img1()))?;
    formats::write_pgm16(stage, &out.join(IMG2), h, w, &quantize(scene.img2()))?;
    let truth: Vec<u8> = scene
        .truth()
        .expect("synthesized scenes carry truth")
        .iter()
        .map(|&t| t * 255)
        .collect();
    formats::write_pgm8(stage, &out.join(TRUTH), h, w, &truth)
}

struct SynthSpec {
    h: usize,
    w: usize,
    regions: Vec<Rect>,
    looks: u32,
    contrast: f64,
}

fn synth_spec(env: &Env, knobs: &SynthKnobs) -> Result<SynthSpec> {
    let size = env
        .settings
        .get("size", knobs.size.clone(), "128x128".to_string())?;
    let (h, w) = parse_size(&size)?;
    let mut regions = Vec::new();
    if knobs.region.is_empty() {
        if let Some(spec) = env.settings.get_opt::<String>("region", None)? {
            regions.push(parse_region(&spec)?);
        }
    } else {
        for spec in &knobs.region {
            regions.push(parse_region(spec)?);
        }
    }
    if regions.is_empty() {
        return Err(usage("at least one --region is required"));
    }
    let looks = env.settings.get("looks", knobs.looks, 4)?;
    if looks == 0 {
        return Err(usage("looks must be at least 1"));
    }
    let contrast = env.settings.get("contrast", knobs.contrast, 3.0)?;
    Ok(SynthSpec { h, w, regions, looks, contrast })
}

fn synthesize(env: &Env, spec: &SynthSpec) -> Result<ScenePair> {
    // Every failure here traces back to a flag value, so it is a usage error.
    synth_scene(env.seed, spec.h, spec.w, &spec.regions, spec.looks, spec.contrast)
        .map_err(|e| usage(format!("synth: {e}")))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let env = env(&a.common)?;
    let spec = synth_spec(&env, &a.synth)?;
    let scene = synthesize(&env, &spec)?;
    write_scene("synth", &env.out, &scene)
}

fn cmd_di(a: DiArgs) -> Result<()> {
    let env = env(&a.common)?;
    let img1 = required_path(&env, "img1", a.img1)?;
    let img2 = required_path(&env, "img2", a.img2)?;
    let di = log_ratio_di(&load_pair("di", &img1, &img2)?);
    write_di("di", &env.out, &di)
}

fn cmd_label(a: DiArgs) -> Result<()> {
    let env = env(&a.common)?;
    let img1 = required_path(&env, "img1", a.img1)?;
    let img2 = required_path(&env, "img2", a.img2)?;
    let di = log_ratio_di(&load_pair("label", &img1, &img2)?);
    let labels = select_labels(&di).map_err(|e| fail("label", e))?;
    write_labels("label", &env.out, &labels)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let env = env(&a.common)?;
    let cfg = train_config(&env, &a.knobs)?;
    let di = resolve_di("train", &env, a.img1, a.img2, a.di)?;
    let labels = match env.settings.get_path("labels", a.labels) {
        Some(path) => read_labels("train", &path)?,
        None => select_labels(&di).map_err(|e| fail("train", e))?,
    };
    if labels.dims() != di.dims() {
        return Err(fail("train", "label map dimensions do not match the DI"));
    }
    let ckpt = run_training(&env, &cfg, &di, &labels)?;
    fs::write(env.out.join(MODEL), ckpt.encode())
        .map_err(|e| fail("train", format!("cannot write {MODEL}: {e}")))
}

fn run_training(
    env: &Env,
    cfg: &TrainConfig,
    di: &DifferenceImage,
    labels: &LabelMap,
) -> Result<Checkpoint> {
    let set = sample_training_set(labels, cfg.n, env.seed).map_err(|e| fail("train", e))?;
    let ckpt = train_with_runner(di, &set, cfg, &env.exec).map_err(|e| fail("train", e))?;
    eprintln!(
        "train: {} samples, {} epochs, final loss {:.6}",
        set.samples.len(),
        cfg.epochs,
        ckpt.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(ckpt)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let env = env(&a.common)?;
    let di = resolve_di("infer", &env, a.img1, a.img2, a.di)?;
    let model = required_path(&env, "model", a.model)?;
    let bytes =
        fs::read(&model).map_err(|e| fail("infer", format!("{}: {e}", model.display())))?;
    let ckpt = Checkpoint::decode(&bytes)
        .map_err(|e| fail("infer", format!("{}: {e}", model.display())))?;
    let map = infer_change_map_with_runner(&di, &ckpt, &env.exec).map_err(|e| fail("infer", e))?;
    write_changemap("infer", &env.out, &map)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let env = env(&a.common)?;
    let map_path = required_path(&env, "map", a.map)?;
    let truth_path = required_path(&env, "truth", a.truth)?;
    let map_img = formats::read_gray("eval", &map_path)?;
    let truth_img = formats::read_gray("eval", &truth_path)?;
    if (map_img.h, map_img.w) != (truth_img.h, truth_img.w) {
        return Err(fail(
            "eval",
            format!(
                "map is {}x{} but truth is {}x{}",
                map_img.h, map_img.w, truth_img.h, truth_img.w
            ),
        ));
    }
    let bits = map_img.as_mask("eval", &map_path)?;
    let truth = truth_img.as_mask("eval", &truth_path)?;
    let map = ChangeMap::from_bits(bits, map_img.h, map_img.w).map_err(|e| fail("eval", e))?;
    let c = confusion(&map, &truth).map_err(|e| fail("eval", e))?;
    let m = metrics(&c).map_err(|e| fail("eval", e))?;
    let line = write_metrics("eval", &env.out, &c, &m)?;
    println!("{line}");
    Ok(())
}

/// Scene files for `run`/`sweep`: either the user's pair or a synthesized
/// scene written to the output directory first, then consumed from disk so
/// the chained pipeline sees exactly what the staged commands would.
fn resolve_scene(env: &Env, scene: &SceneSource, stage: &str) -> Result<(PathBuf, PathBuf, Option<PathBuf>)> {
    let img1 = env.settings.get_path("img1", scene.img1.clone());
    let img2 = env.settings.get_path("img2", scene.img2.clone());
    let truth = env.settings.get_path("truth", scene.truth.clone());
    match (img1, img2) {
        (Some(a), Some(b)) => Ok((a, b, truth)),
        (None, None) => {
            let spec = synth_spec(env, &scene.synth)?;
            let pair = synthesize(env, &spec)?;
            write_scene(stage, &env.out, &pair)?;
            eprintln!(
                "{stage}: synthesized {}x{} scene (looks {}, contrast {})",
                spec.h, spec.w, spec.looks, spec.contrast
            );
            Ok((env.out.join(IMG1), env.out.join(IMG2), Some(env.out.join(TRUTH))))
        }
        _ => Err(usage("--img1 and --img2 go together")),
    }
}

fn read_truth(stage: &str, path: &Path, dims: (usize, usize)) -> Result<Vec<u8>> {
    let img = formats::read_gray(stage, path)?;
    if (img.h, img.w) != dims {
        return Err(fail(
            stage,
            format!(
                "truth is {}x{} but the scene is {}x{}",
                img.h, img.w, dims.0, dims.1
            ),
        ));
    }
    img.as_mask(stage, path)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let env = env(&a.common)?;
    let cfg = train_config(&env, &a.knobs)?;
    let (img1, img2, truth_path) = resolve_scene(&env, &a.scene, "run")?;

    let di = log_ratio_di(&load_pair("run", &img1, &img2)?);
    write_di("run", &env.out, &di)?;

    let labels = select_labels(&di).map_err(|e| fail("label", e))?;
    write_labels("run", &env.out, &labels)?;
    eprintln!(
        "run: {} changed / {} unchanged reliable pixels",
        labels.count(Label::Changed),
        labels.count(Label::Unchanged)
    );

    let ckpt = run_training(&env, &cfg, &di, &labels)?;
    fs::write(env.out.join(MODEL), ckpt.encode())
        .map_err(|e| fail("train", format!("cannot write {MODEL}: {e}")))?;

    let map = infer_change_map_with_runner(&di, &ckpt, &env.exec).map_err(|e| fail("infer", e))?;
    write_changemap("run", &env.out, &map)?;

    match truth_path {
        Some(path) => {
            let truth = read_truth("eval", &path, map.dims())?;
            let c = confusion(&map, &truth).map_err(|e| fail("eval", e))?;
            let m = metrics(&c).map_err(|e| fail("eval", e))?;
            let line = write_metrics("eval", &env.out, &c, &m)?;
            println!("{line}");
        }
        None => eprintln!("run: no ground truth given; skipping evaluation"),
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let env = env(&a.common)?;
    let axis = a.axis.ok_or_else(|| usage("missing --axis"))?;
    let spec = env
        .settings
        .get_opt("values", a.values)?
        .ok_or_else(|| usage("missing --values"))?;
    let values = parse_values(&spec)?;
    let base = train_config(&env, &a.knobs)?;
    let axis_name = match axis {
        SweepAxis::PatchSize => "patch-size",
        SweepAxis::Samples => "samples",
    };
    for &v in &values {
        match axis {
            SweepAxis::PatchSize if v % 2 == 0 || v < MIN_PATCH => {
                return Err(usage(format!(
                    "patch size must be odd and at least {MIN_PATCH}, got {v}"
                )));
            }
            SweepAxis::Samples if v == 0 => {
                return Err(usage("sample counts must be positive"));
            }
            _ => {}
        }
    }

    let (img1, img2, truth_path) = resolve_scene(&env, &a.scene, "sweep")?;
    let truth_path = truth_path.ok_or_else(|| usage("sweep needs --truth to score each run"))?;
    let di = log_ratio_di(&load_pair("sweep", &img1, &img2)?);
    let truth = read_truth("sweep", &truth_path, di.dims())?;
    let labels = select_labels(&di).map_err(|e| fail("label", e))?;

    let mut csv = String::from("value,fp,fn,oe,pcc,kc\n");
    for &v in &values {
        let mut cfg = base;
        match axis {
            SweepAxis::PatchSize => cfg.r = v,
            SweepAxis::Samples => cfg.n = v,
        }
        cfg.validate()
            .map_err(|e| usage(format!("invalid configuration at {axis_name}={v}: {e}")))?;
        let subdir = env.out.join(format!("{axis_name}-{v}"));
        fs::create_dir_all(&subdir)
            .map_err(|e| fail("sweep", format!("cannot create {}: {e}", subdir.display())))?;
        let ckpt = run_training(&env, &cfg, &di, &labels)?;
        fs::write(subdir.join(MODEL), ckpt.encode())
            .map_err(|e| fail("sweep", format!("cannot write {MODEL}: {e}")))?;
        let map =
            infer_change_map_with_runner(&di, &ckpt, &env.exec).map_err(|e| fail("infer", e))?;
        write_changemap("sweep", &subdir, &map)?;
        let c = confusion(&map, &truth).map_err(|e| fail("eval", e))?;
        let m = metrics(&c).map_err(|e| fail("eval", e))?;
        let row = format!(
            "{v},{},{},{},{:.2},{:.2}",
            c.false_pos, c.false_neg, m.oe, m.pcc, m.kc
        );
        eprintln!("sweep: {row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    fs::write(env.out.join(SWEEP_CSV), csv)
        .map_err(|e| fail("sweep", format!("cannot write {SWEEP_CSV}: {e}")))
}

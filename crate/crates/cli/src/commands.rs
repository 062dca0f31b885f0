use std::path::Path;

use avsurf::config::RunConfig;
use avsurf::dsp::{wav_read, wav_write, BitDepth};
use avsurf::eval::{evaluate, synthesize_model, Method};
use avsurf::model::{Model, ModelInput};
use avsurf::scene::{
    build_dataset, load_dataset, priors_for_pose, read_scene, write_dataset, CameraPose, SceneConfig, Split,
};
use avsurf::training::{
    format_loss_log, load_checkpoint, save_checkpoint, Example, ModelCheckpoint, Trainer,
};

use crate::{ConfigArgs, Failure, SplitArg, WavFormat};

type CmdResult = Result<(), Failure>;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(args.config.as_deref(), &args.overrides)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| avsurf::Error::io(dir, e).into())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| avsurf::Error::io(path, e).into())
}

/// Writes the resolved config next to a single-file output.
fn echo_beside(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.toml");
    write_file(Path::new(&name), &cfg.to_toml())
}

/// Parses `x,y,z,yaw_deg[,pitch_deg]`.
pub fn parse_pose(spec: &str) -> Result<CameraPose, Failure> {
    let vals: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("pose `{spec}` must be comma-separated numbers")))?;
    if vals.len() != 4 && vals.len() != 5 {
        return Err(Failure::usage(format!(
            "pose `{spec}` needs x,y,z,yaw_deg with an optional pitch_deg"
        )));
    }
    let pitch = vals.get(4).copied().unwrap_or(0.0);
    Ok(CameraPose::from_yaw_pitch([vals[0], vals[1], vals[2]], vals[3], pitch))
}

/// The checkpoint's architecture must equal the runtime one whenever the
/// user passes a config.
fn check_model_config(args: &ConfigArgs, cfg: &RunConfig, ckpt: &ModelCheckpoint, path: &Path) -> CmdResult {
    if args.given() && cfg.model_config() != ckpt.config.model {
        let show = |m: &avsurf::model::ModelConfig| toml::to_string(m).unwrap_or_else(|_| format!("{m:?}"));
        return Err(Failure {
            code: crate::EXIT_USAGE,
            message: format!(
                "model config of checkpoint {} differs from the runtime config\n--- checkpoint ---\n{}--- runtime ---\n{}",
                path.display(),
                show(&ckpt.config.model),
                show(&cfg.model_config())
            ),
        });
    }
    Ok(())
}

fn scene_for(cfg: &RunConfig, data: Option<&Path>) -> Result<SceneConfig, Failure> {
    Ok(match data {
        Some(d) => read_scene(d)?,
        None => cfg.scene.clone(),
    })
}

pub fn generate(args: &ConfigArgs, out: &Path) -> CmdResult {
    let cfg = load_config(args)?;
    create_dir(out)?;
    let ds = build_dataset(&cfg.scene)?;
    let records = write_dataset(out, &ds)?;
    cfg.echo(out)?;
    let val = ds.split(Split::Val).len();
    println!(
        "generated {} samples ({} train, {val} val) in {}",
        records.len(),
        records.len() - val,
        out.display()
    );
    Ok(())
}

pub fn train(args: &ConfigArgs, data: &Path, out: &Path, resume: Option<&Path>) -> CmdResult {
    let mut cfg = load_config(args)?;
    let ds = load_dataset(data)?;
    if args.given() && cfg.scene != ds.scene {
        log::warn!("config scene differs from the dataset's; training uses the dataset's scene");
    }
    cfg.scene = ds.scene.clone();
    let model_cfg = cfg.model_config();
    let train = Example::from_split(&model_cfg, &ds, Split::Train)?;
    let val = Example::from_split(&model_cfg, &ds, Split::Val)?;
    create_dir(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config.model != model_cfg {
                return Err(Failure::usage(format!(
                    "cannot resume {}: its model config differs from the runtime config",
                    path.display()
                )));
            }
            // Keep the best-so-far checkpoint alongside the resumed run.
            if let Some(src) = path.parent().map(|p| p.join(BEST_CHECKPOINT)) {
                let dst = out.join(BEST_CHECKPOINT);
                if src.exists() && src != dst {
                    std::fs::copy(&src, &dst).map_err(|e| avsurf::Error::io(&dst, e))?;
                }
            }
            Trainer::from_checkpoint(&ckpt, Some(&cfg.train))?
        }
        None => Trainer::new(&model_cfg, &cfg.train)?,
    };
    cfg.echo(out)?;
    let (last, best, log) = (out.join(LAST_CHECKPOINT), out.join(BEST_CHECKPOINT), out.join(LOSS_LOG));
    let report = trainer.fit(&train, &val, |t, _, improved| {
        let ckpt = t.checkpoint()?;
        let bytes = ckpt.to_bytes()?;
        avsurf::training::write_checkpoint(&last, &bytes)?;
        if improved {
            avsurf::training::write_checkpoint(&best, &bytes)?;
        }
        std::fs::write(&log, format_loss_log(&t.log)).map_err(|e| avsurf::Error::io(&log, e))
    })?;
    if report.log.is_empty() {
        // Nothing left to run; still leave a complete run directory.
        save_checkpoint(&last, &trainer.checkpoint()?)?;
        write_file(&log, &format_loss_log(&trainer.log))?;
    }
    let final_val = report.log.last().map(|r| r.val_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs: initial val loss {:.6e}, final {:.6e}, best {:.6e}",
        trainer.epoch, report.initial_val_loss, final_val, trainer.best_val_loss
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    args: &ConfigArgs,
    checkpoint: &Path,
    pose: &str,
    source: &Path,
    out: &Path,
    data: Option<&Path>,
    format: WavFormat,
) -> CmdResult {
    let cfg = load_config(args)?;
    let pose = parse_pose(pose)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_model_config(args, &cfg, &ckpt, checkpoint)?;
    let model = ckpt.to_model()?;
    let scene = scene_for(&cfg, data)?;
    let priors = priors_for_pose(&scene, &pose)?;
    let src = wav_read(source)?.to_mono();
    let input = ModelInput::from_audio(model.cfg(), &priors, &pose, scene.room.diagonal(), &src)?;
    let wave = synthesize_model(&model, &input, &src, cfg.eval.synthesis())?;
    let depth = match format {
        WavFormat::Pcm16 => BitDepth::Pcm16,
        WavFormat::Float32 => BitDepth::Float32,
    };
    wav_write(out, &wave, depth)?;
    echo_beside(&cfg, out)?;
    println!("rms left={:.6e} right={:.6e}", wave.rms(0), wave.rms(1));
    Ok(())
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    methods: Option<Vec<String>>,
    split: SplitArg,
) -> CmdResult {
    let cfg = load_config(args)?;
    let methods: Vec<Method> = match methods {
        Some(list) => list.iter().map(|m| m.trim().parse()).collect::<Result<_, _>>()?,
        None => cfg.eval.methods.clone(),
    };
    let model = match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            check_model_config(args, &cfg, &ckpt, p)?;
            Some(ckpt.to_model()?)
        }
        None if methods.contains(&Method::Model) => {
            return Err(Failure::usage("method `model` needs --checkpoint"));
        }
        None => None,
    };
    let ds = load_dataset(data)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let stft = model.as_ref().map(|m: &Model| m.cfg().stft).unwrap_or(cfg.stft);
    let report = evaluate(model.as_ref(), &ds, split, &methods, stft, cfg.eval.synthesis())?;
    write_file(out, &report.to_csv())?;
    echo_beside(&cfg, out)?;
    for m in report.methods() {
        let s = report.summary(&m);
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        println!("{m}: n={} mag={} env={}", s.samples, fmt(s.means[0]), fmt(s.means[1]));
    }
    Ok(())
}

pub const FEATURE_KINDS: [&str; 2] = ["frequency_embedding", "acoustic_feature"];

pub fn export_features(args: &ConfigArgs, checkpoint: &Path, pose: &str, out: &Path, data: Option<&Path>) -> CmdResult {
    let cfg = load_config(args)?;
    let pose = parse_pose(pose)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_model_config(args, &cfg, &ckpt, checkpoint)?;
    let model = ckpt.to_model()?;
    let scene = scene_for(&cfg, data)?;
    let priors = priors_for_pose(&scene, &pose)?;
    let (ff, fa) = model.features(&priors, &pose, scene.room.diagonal())?;
    let d = ff.shape()[1];
    let mut text = String::from("kind,bin");
    for j in 0..d {
        text.push_str(&format!(",d{j}"));
    }
    text.push('\n');
    for (kind, t) in FEATURE_KINDS.iter().zip([&ff, &fa]) {
        for b in 0..t.shape()[0] {
            text.push_str(&format!("{kind},{b}"));
            for v in t.row(b) {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
    }
    write_file(out, &text)?;
    echo_beside(&cfg, out)?;
    println!("wrote {} feature rows to {}", 2 * ff.shape()[0], out.display());
    Ok(())
}

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use cinetraj::align::{align_chunks, Chunk, DEFAULT_OVERLAP};
use cinetraj::caption::{
    build_llm_prompt, build_outline, camera_labels_from_caption, llm_caption, rule_based_caption, Caption,
    CaptionKind, Tokenizer,
};
use cinetraj::clatr::{train_clatr, ClatrConfig, ClatrModel, ClatrPair, ClatrTrainConfig};
use cinetraj::clean::{clean_shot, CleanConfig};
use cinetraj::director::{train_director, DiffusionConfig, DirectorModel, DirectorSample, NetConfig, TrainConfig};
use cinetraj::geom::{rot_to_6d, CharacterTrajectory};
use cinetraj::io::{atomic_write, load_etj, load_manifest, save_etj, Etj, ManifestEntry, Split, Tags};
use cinetraj::metrics::{clatr_score, classifier_metrics, classifier_metrics_frames, frechet_distance, prdc, MetricReport, DEFAULT_K};
use cinetraj::synth::{gen_dataset, SynthSpec};
use cinetraj::tagging::{reference_frame, tag_camera, tag_character, TagConfig, TagSegment};
use cinetraj::{par, Error};

#[derive(Debug, Parser)]
#[command(name = "cinetraj", version, about = "Camera trajectory toolkit")]
pub struct Cli {
    /// Cap on worker threads for internal parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge overlapping chunks listed in a manifest into one trajectory.
    Align {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop outlier frames, split, smooth and crop; one file per piece.
    Clean {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write camera and character motion tags into the file.
    Tag {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Caption from tags: rule-based, prompt only, or via an LLM endpoint.
    Caption {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: CaptionMode,
        /// Output file for rule/llm modes (defaults to the input file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tagging config used when the file carries no tags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "CINETRAJ_LLM_ENDPOINT")]
        llm_endpoint: Option<String>,
        #[arg(long, env = "CINETRAJ_LLM_KEY", hide_env_values = true)]
        llm_key: Option<String>,
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(value_enum)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a camera trajectory from a trained director.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        /// Character ETJ file, or "none".
        #[arg(long, default_value = "none")]
        character: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame count when no character is given.
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated trajectories against real ones.
    Eval {
        #[arg(long)]
        ckpt_clatr: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// Score per frame against the camera tags stored in each generated file.
        #[arg(long)]
        frame_level: bool,
        #[arg(long)]
        tag_config: Option<PathBuf>,
    },
    /// Per-frame CSV for plotting.
    ExportPlot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CaptionMode {
    Rule,
    Prompt,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Director,
    Clatr,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DirectorTrainFile {
    net: NetConfig,
    diffusion: DiffusionConfig,
    train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ClatrTrainFile {
    model: ClatrConfig,
    train: ClatrTrainConfig,
}

impl Default for ClatrTrainFile {
    fn default() -> Self {
        Self {
            model: ClatrConfig::desk(),
            train: ClatrTrainConfig::desk(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Config("--threads must be at least 1".into()));
        }
        par::init_global_threads(n);
    }
    match cli.command {
        Command::Align { chunks, out } => align(&chunks, &out),
        Command::Clean { input, out_dir, config } => clean(&input, &out_dir, config.as_deref()),
        Command::Tag { input, out, config } => tag(&input, &out, config.as_deref()),
        Command::Caption {
            input,
            mode,
            out,
            config,
            llm_endpoint,
            llm_key,
            timeout,
        } => caption(&input, mode, out.as_deref(), config.as_deref(), llm_endpoint, llm_key, timeout),
        Command::Synth { spec, out_dir } => synth(&spec, &out_dir),
        Command::Train { model, data, config, out } => match model {
            ModelKind::Director => train_director_cmd(&data, config.as_deref(), &out),
            ModelKind::Clatr => train_clatr_cmd(&data, config.as_deref(), &out),
        },
        Command::Sample {
            ckpt,
            caption,
            character,
            steps,
            guidance,
            seed,
            frames,
            fps,
            out,
        } => sample(&ckpt, &caption, &character, steps, guidance, seed, frames, fps, &out),
        Command::Eval {
            ckpt_clatr,
            real,
            gen,
            out,
            k,
            frame_level,
            tag_config,
        } => eval(&ckpt_clatr, &real, &gen, &out, k, frame_level, tag_config.as_deref()),
        Command::ExportPlot { input, out } => export_plot(&input, &out),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map(read_json).unwrap_or_else(|| Ok(T::default()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn align(manifest: &Path, out: &Path) -> Result<()> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        bail!(Error::Format {
            path: manifest.to_path_buf(),
            reason: "no chunks listed".into(),
        });
    }
    let files = entries.iter().map(|e| load_etj(&e.path)).collect::<cinetraj::Result<Vec<_>>>()?;
    let with_character = files.iter().all(|f| f.character.is_some());
    let chunks: Vec<Chunk> = files
        .iter()
        .zip(&entries)
        .map(|(f, e)| Chunk {
            character: match (&f.character, with_character) {
                (Some(c), true) => c.clone(),
                _ => CharacterTrajectory::new(f.camera.fps, vec![Default::default(); f.camera.len()]),
            },
            cameras: f.camera.clone(),
            overlap_len: e.overlap_len.unwrap_or(DEFAULT_OVERLAP),
        })
        .collect();
    let (camera, character) = align_chunks(&chunks)?;
    let mut etj = Etj::new(camera);
    if with_character {
        etj.character = Some(character);
    }
    save_etj(out, &etj)?;
    Ok(())
}

fn clean(input: &Path, out_dir: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: CleanConfig = read_config(config)?;
    let etj = load_etj(input)?;
    let pieces = clean_shot(&etj.camera, etj.character.as_ref(), &cfg)?;
    create_dir(out_dir)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("traj");
    for (i, (camera, character)) in pieces.into_iter().enumerate() {
        let mut piece = Etj::new(camera);
        piece.character = character;
        save_etj(&out_dir.join(format!("{stem}_{i:03}.etj")), &piece)?;
    }
    Ok(())
}

fn compute_tags(etj: &Etj, cfg: &TagConfig) -> Result<Tags> {
    let camera = tag_camera(&etj.camera, cfg)?;
    let character = match &etj.character {
        Some(c) => {
            let reference = reference_frame(&etj.camera.poses[0].rotation);
            tag_character(c, Some(&reference), cfg)?
        }
        None => Vec::new(),
    };
    Ok(Tags { camera, character })
}

fn tag(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: TagConfig = read_config(config)?;
    let mut etj = load_etj(input)?;
    etj.tags = Some(compute_tags(&etj, &cfg)?);
    save_etj(out, &etj)?;
    Ok(())
}

fn caption(
    input: &Path,
    mode: CaptionMode,
    out: Option<&Path>,
    config: Option<&Path>,
    endpoint: Option<String>,
    key: Option<String>,
    timeout: f64,
) -> Result<()> {
    let mut etj = load_etj(input)?;
    let tags = match &etj.tags {
        Some(t) => t.clone(),
        None => compute_tags(&etj, &read_config(config)?)?,
    };
    let n = etj.camera.len();
    let prompt = || -> Result<String> { Ok(build_llm_prompt(&build_outline(&tags.camera, &tags.character, n)?)) };
    let cap = match mode {
        CaptionMode::Prompt => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(prompt()?.as_bytes())?;
            stdout.flush()?;
            return Ok(());
        }
        CaptionMode::Rule => rule_based_caption(&tags.camera, &tags.character)?,
        CaptionMode::Llm => {
            let endpoint = endpoint
                .ok_or_else(|| Error::Config("llm mode needs --llm-endpoint or CINETRAJ_LLM_ENDPOINT".into()))?;
            let mut cap = llm_caption(&endpoint, key.as_deref(), &prompt()?, timeout)?;
            if etj.character.is_none() {
                cap.kind = CaptionKind::Camera;
            }
            cap
        }
    };
    etj.caption = Some(cap);
    etj.tags = Some(tags);
    save_etj(out.unwrap_or(input), &etj)?;
    Ok(())
}

fn synth(spec: &Path, out_dir: &Path) -> Result<()> {
    let spec: SynthSpec = read_json(spec)?;
    spec.validate()?;
    create_dir(out_dir)?;
    gen_dataset(&spec, out_dir)?;
    Ok(())
}

fn train_split(manifest: &Path) -> Result<Vec<(PathBuf, Etj)>> {
    let entries: Vec<ManifestEntry> = load_manifest(manifest)?;
    let train: Vec<(PathBuf, Etj)> = entries
        .into_iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| load_etj(&e.path).map(|f| (e.path, f)))
        .collect::<cinetraj::Result<_>>()?;
    if train.is_empty() {
        bail!(Error::Input(format!("{} lists no train entries", manifest.display())));
    }
    Ok(train)
}

fn caption_text<'a>(path: &Path, etj: &'a Etj) -> Result<&'a str> {
    etj.caption.as_ref().map(|c| c.text.as_str()).ok_or_else(|| {
        Error::Format {
            path: path.to_path_buf(),
            reason: "missing caption".into(),
        }
        .into()
    })
}

fn emit(line: serde_json::Value) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{line}");
    let _ = stdout.flush();
}

fn train_director_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: DirectorTrainFile = read_config(config)?;
    let tok = Tokenizer::default();
    let samples = train_split(data)?
        .iter()
        .map(|(p, f)| Ok(DirectorSample::new(&f.camera, f.character.as_ref(), caption_text(p, f)?, &tok)?))
        .collect::<Result<Vec<_>>>()?;
    let (model, _) = train_director(&samples, cfg.net, cfg.diffusion, &cfg.train, |log| {
        emit(serde_json::json!({
            "step": log.step,
            "loss": log.loss,
            "lr": log.lr,
            "grad_norm": log.grad_norm,
        }))
    })?;
    model.save(out)?;
    Ok(())
}

fn train_clatr_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: ClatrTrainFile = read_config(config)?;
    let tok = Tokenizer::default();
    let pairs = train_split(data)?
        .iter()
        .map(|(p, f)| Ok(ClatrPair::new(&f.camera, caption_text(p, f)?, &tok)?))
        .collect::<Result<Vec<_>>>()?;
    let (model, _) = train_clatr(&pairs, cfg.model, &cfg.train, |log| {
        emit(serde_json::json!({
            "step": log.step,
            "loss": log.loss.total,
            "lr": log.lr,
            "grad_norm": log.grad_norm,
            "components": log.loss.to_json(),
        }))
    })?;
    model.save(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    caption: &str,
    character: &str,
    steps: Option<usize>,
    guidance: Option<f64>,
    seed: u64,
    frames: usize,
    fps: f64,
    out: &Path,
) -> Result<()> {
    let model = DirectorModel::load(ckpt)?;
    let character = match character {
        "none" => None,
        path => {
            let etj = load_etj(Path::new(path))?;
            let c = etj.character.ok_or_else(|| Error::Format {
                path: path.into(),
                reason: "no character_hips".into(),
            })?;
            Some(c)
        }
    };
    let (n, fps) = match &character {
        Some(c) => (c.len(), c.fps),
        None => (frames, fps),
    };
    let tokens = Tokenizer::default().encode(caption);
    let steps = steps.unwrap_or(model.diffusion.steps);
    let w = guidance.unwrap_or(model.diffusion.guidance_w);
    let camera = model.sample(&tokens, character.as_ref(), n, fps, steps, w, seed)?;
    let kind = if character.is_some() { CaptionKind::CameraCharacter } else { CaptionKind::Camera };
    let mut etj = Etj::new(camera);
    etj.character = character;
    etj.caption = Some(Caption {
        text: caption.to_string(),
        kind,
    });
    save_etj(out, &etj)?;
    Ok(())
}

fn load_all(manifest: &Path) -> Result<Vec<(PathBuf, Etj)>> {
    Ok(load_manifest(manifest)?
        .into_iter()
        .map(|e| load_etj(&e.path).map(|f| (e.path, f)))
        .collect::<cinetraj::Result<_>>()?)
}

fn eval(
    ckpt: &Path,
    real: &Path,
    gen: &Path,
    out: &Path,
    k: usize,
    frame_level: bool,
    tag_config: Option<&Path>,
) -> Result<()> {
    let tag_cfg: TagConfig = read_config(tag_config)?;
    let model = ClatrModel::load(ckpt)?;
    let tok = Tokenizer::default();
    let real = load_all(real)?;
    let gen = load_all(gen)?;
    let traj_mu = |files: &[(PathBuf, Etj)]| -> Result<Vec<Vec<f64>>> {
        let pairs = files
            .iter()
            .map(|(_, f)| cinetraj::director::TrajFeature::from_camera(&f.camera))
            .collect::<cinetraj::Result<Vec<_>>>()?;
        Ok(par::map_slice(&pairs, |p| model.encode_traj(p).map(|d| d.mu))
            .into_iter()
            .collect::<cinetraj::Result<_>>()?)
    };
    let real_mu = traj_mu(&real)?;
    let gen_mu = traj_mu(&gen)?;
    let captions = gen.iter().map(|(p, f)| caption_text(p, f)).collect::<Result<Vec<_>>>()?;
    let token_ids: Vec<Vec<usize>> = captions.iter().map(|c| tok.encode(c)).collect();
    let text_mu = par::map_slice(&token_ids, |t| model.encode_text(t).map(|d| d.mu))
        .into_iter()
        .collect::<cinetraj::Result<Vec<_>>>()?;

    let fd = frechet_distance(&real_mu, &gen_mu)?;
    let p = prdc(&real_mu, &gen_mu, k)?;
    let (cs, _) = clatr_score(&text_mu, &gen_mu)?;
    let cams: Vec<_> = gen.iter().map(|(_, f)| f.camera.clone()).collect();
    let c = if frame_level {
        let segs = gen
            .iter()
            .map(|(path, f)| {
                f.tags.as_ref().map(|t| t.camera.clone()).ok_or_else(|| Error::Format {
                    path: path.clone(),
                    reason: "frame-level scoring needs camera tags".into(),
                })
            })
            .collect::<std::result::Result<Vec<Vec<TagSegment>>, Error>>()?;
        classifier_metrics_frames(&segs, &cams, &tag_cfg)?
    } else {
        let prompts: Vec<BTreeSet<String>> =
            captions.iter().map(|c| camera_labels_from_caption(c).into_iter().collect()).collect();
        classifier_metrics(&prompts, &cams, &tag_cfg)?
    };
    let report = MetricReport {
        fd,
        precision: p.precision,
        recall: p.recall,
        density: p.density,
        coverage: p.coverage,
        clatr_score: cs,
        c_p: c.precision,
        c_r: c.recall,
        c_f1: c.f1,
        k,
    };
    write_json(out, &report)
}

fn export_plot(input: &Path, out: &Path) -> Result<()> {
    let etj = load_etj(input)?;
    let segs = match &etj.tags {
        Some(t) if !t.camera.is_empty() => t.camera.clone(),
        _ => tag_camera(&etj.camera, &TagConfig::default())?,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "tx", "ty", "tz", "r0", "r1", "r2", "r3", "r4", "r5", "tag"])?;
    for (i, pose) in etj.camera.poses.iter().enumerate() {
        let r6 = rot_to_6d(&pose.rotation)?;
        let label = segs
            .iter()
            .find(|s| s.start <= i && i <= s.end)
            .map(|s| s.label.as_str())
            .ok_or_else(|| anyhow!("frame {i} not covered by tags"))?;
        let t = pose.translation;
        let mut row = vec![i.to_string(), t.x.to_string(), t.y.to_string(), t.z.to_string()];
        row.extend(r6.0.iter().map(|v| v.to_string()));
        row.push(label.to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!(e.to_string()))?;
    atomic_write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use singrav::apps::{
    animate, compose, edit_duplicate, edit_move, edit_remove, export_mesh, harmonize, obj_string, stl_bytes,
    write_frames, EditMask, EmptySample, HarmonizeOptions,
};
use singrav::camera::Camera;
use singrav::config::RunConfig;
use singrav::dataio::{cache_root, cached_pyramid, load_dataset, make_synthetic_scene, SceneKind, DEFAULT_DEPTH_SCALE};
use singrav::features::FeatureNet;
use singrav::io::{encode_depth_png, encode_rgb_png, write_atomic, write_json};
use singrav::metrics::evaluate;
use singrav::pyramid::{scale_schedule, GeneratorStack, NoiseStack};
use singrav::render::{render, RaySampleSpec};
use singrav::train::{train_all, TrainOptions};
use singrav::volume::{read_sgrv, sgrv_bytes, RadianceVolume};

#[derive(Parser)]
#[command(name = "singrav", version, about = "Train, sample, edit and serve generative radiance volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (.json or .toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Start from the small toy configuration instead of the reference one.
    #[arg(long, global = true)]
    toy: bool,
    /// Seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic dataset (or load one) and fill the pyramid cache.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        /// Existing manifest to cache instead of synthesising a scene.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Synthetic scene kind: empty, sphere, spheres, boxes, terrain-noise.
        #[arg(long)]
        kind: Option<SceneKind>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train every untrained scale, resuming from the checkpoint directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Stop after this scale.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Pretrained weights for the SWD feature extractor.
        #[arg(long)]
        feature_weights: Option<PathBuf>,
    },
    /// Sample scenes to SGRV1 volumes, noise stacks and preview renders.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a saved volume.
    Render {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Camera-to-world pose, 16 comma-separated row-major values.
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 33.40)]
        fov: f64,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Also write a 16-bit depth PNG here.
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Animate a generated scene by walking its noise.
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Noise stack written by `generate`.
        #[arg(long)]
        noise: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        start_scale: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
    },
    /// Remove, duplicate, move or compose box regions of a volume.
    Edit {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        op: EditOpArg,
        /// Source box `x0,y0,z0,x1,y1,z1`. Repeatable for compose and remove.
        #[arg(long = "src", value_parser = parse_box, allow_hyphen_values = true)]
        src: Vec<EditMask>,
        /// Destination box. Repeatable for compose.
        #[arg(long = "dst", value_parser = parse_box, allow_hyphen_values = true)]
        dst: Vec<EditMask>,
        /// Donor volume per `--src` for compose.
        #[arg(long = "source-volume")]
        source_volumes: Vec<PathBuf>,
        /// Point whose values fill removed voxels.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        empty_point: Option<[f64; 3]>,
        /// Harmonize the result with this checkpoint.
        #[arg(long)]
        harmonize_with: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Marching-cubes mesh of a volume as binary STL or OBJ (by extension).
    ExportMesh {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = singrav::apps::DEFAULT_DENSITY_THRESHOLD)]
        threshold: f64,
    },
    /// Multi-view SIFID and diversity of a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Number of views M.
        #[arg(long)]
        views: Option<usize>,
        /// Scenes per view J.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        feature_weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "scenes")]
        scenes: PathBuf,
        #[arg(long, env = "SINGRAV_PORT", default_value_t = singrav_service::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum EditOpArg {
    Remove,
    Duplicate,
    Move,
    Compose,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_box(s: &str) -> Result<EditMask, String> {
    let v = parse_floats::<6>(s)?;
    Ok(EditMask::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = if common.toy { RunConfig::toy() } else { RunConfig::default() };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::load(base, common.config.as_deref(), &overrides)?)
}

fn out_dir(path: &Path) -> Result<PathBuf> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_volume(path: &Path) -> Result<RadianceVolume> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_sgrv(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_stack(dir: &Path) -> Result<GeneratorStack> {
    GeneratorStack::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn camera(pose: Option<&str>, w: usize, h: usize, fov: f64) -> Result<Camera> {
    match pose {
        None => Ok(Camera::default_view(w, h)?),
        Some(p) => {
            let pose: [f64; 16] = parse_floats::<16>(p).map_err(anyhow::Error::msg).context("--pose")?;
            let d = (pose[3] * pose[3] + pose[7] * pose[7] + pose[11] * pose[11]).sqrt();
            Ok(Camera::new(fov, w, h, (d - 1.75).max(1e-3), d + 1.75, pose)?)
        }
    }
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Prepare {
            out,
            dataset,
            kind,
            cache,
        } => {
            ensure_dir(&out)?;
            cfg.snapshot(&out)?;
            let (ds, manifest) = match dataset {
                Some(m) => (load_dataset(&m)?, m),
                None => {
                    let mut synth = cfg.synthetic.clone();
                    if let Some(k) = kind {
                        synth.kind = k;
                    }
                    synth.seed = cfg.seed;
                    let (gt, ds) = make_synthetic_scene(&synth)?;
                    write_atomic(&out.join("ground_truth.sgrv"), &sgrv_bytes(&gt))?;
                    let manifest = ds.save(&out.join("dataset"))?;
                    (ds, manifest)
                }
            };
            let schedule = scale_schedule(&cfg.pyramid)?;
            let root = cache.unwrap_or_else(cache_root);
            cached_pyramid(&ds, &schedule, &root)?;
            print(json!({
                "manifest": manifest,
                "views": ds.len(),
                "has_depth": ds.has_depth(),
                "cache": root,
                "schedule": schedule,
            }));
        }
        Command::Train {
            dataset,
            checkpoint,
            log,
            cache,
            stop_after,
            feature_weights,
        } => {
            let ds = load_dataset(&dataset)?;
            ensure_dir(&checkpoint)?;
            cfg.snapshot(&checkpoint)?;
            let mut stack = GeneratorStack::new(cfg.pyramid.clone(), cfg.seed)?;
            let features = if cfg.train.weights.swd_weight > 0.0 {
                let w = FeatureNet::resolve_weights(feature_weights.as_deref(), "vgg19.safetensors");
                Some(FeatureNet::vgg19(w.as_deref(), cfg.seed)?)
            } else {
                None
            };
            let opts = TrainOptions {
                checkpoint_dir: Some(checkpoint.clone()),
                cache_root: Some(cache.unwrap_or_else(cache_root)),
                log_path: Some(log.unwrap_or_else(|| checkpoint.join("train_log.csv"))),
                features: features.as_ref(),
                stop_after,
            };
            let rows = train_all(&mut stack, &ds, &cfg.train, &opts)?;
            print(json!({
                "checkpoint": checkpoint,
                "trained": stack.trained,
                "steps": rows.len(),
                "last": rows.last(),
            }));
        }
        Command::Generate { checkpoint, count, out } => {
            let stack = load_stack(&checkpoint)?;
            ensure_dir(&out)?;
            cfg.snapshot(&out)?;
            let side = stack.schedule.image_side(stack.num_scales());
            let cam = Camera::default_view(side, side)?;
            let mut files = Vec::new();
            for i in 0..count as u64 {
                let seed = cfg.seed + i;
                let (volume, noise) = stack.sample_scene(seed)?;
                let stem = out.join(format!("scene_{seed:06}"));
                write_atomic(&stem.with_extension("sgrv"), &sgrv_bytes(&volume))?;
                noise.save(&stem.with_extension("noise.safetensors"))?;
                write_atomic(&stem.with_extension("png"), &encode_rgb_png(&stack.render_final(&volume, &cam)?)?)?;
                files.push(stem.with_extension("sgrv"));
            }
            print(json!({ "scenes": files }));
        }
        Command::Render {
            volume,
            out,
            pose,
            width,
            height,
            fov,
            samples,
            depth_out,
        } => {
            let v = read_volume(&volume)?;
            let cam = camera(pose.as_deref(), width, height, fov)?;
            let r = render(&v, &cam, RaySampleSpec::new(samples)?)?;
            cfg.snapshot(&out_dir(&out)?)?;
            write_atomic(&out, &encode_rgb_png(&r.color)?)?;
            if let Some(d) = &depth_out {
                write_atomic(d, &encode_depth_png(&r.depth, DEFAULT_DEPTH_SCALE)?)?;
            }
            print(json!({ "color": out, "depth": depth_out, "camera": cam }));
        }
        Command::Animate {
            checkpoint,
            noise,
            out,
            alpha,
            xi,
            steps,
            start_scale,
            pose,
        } => {
            let stack = load_stack(&checkpoint)?;
            let base = NoiseStack::load(&noise)?;
            let mut anim = cfg.animation.clone();
            anim.alpha = alpha.unwrap_or(anim.alpha);
            anim.xi = xi.unwrap_or(anim.xi);
            anim.steps = steps.unwrap_or(anim.steps);
            anim.start_scale = start_scale.unwrap_or(anim.start_scale);
            anim.seed = cfg.seed;
            let side = stack.schedule.image_side(stack.num_scales());
            let cam = camera(pose.as_deref(), side, side, 33.40)?;
            let frames = animate(&stack, &base, &anim, &cam)?;
            ensure_dir(&out)?;
            cfg.snapshot(&out)?;
            let index = write_frames(&out, &frames)?;
            print(json!({ "index": index, "frames": frames.len() }));
        }
        Command::Edit {
            volume,
            op,
            src,
            dst,
            source_volumes,
            empty_point,
            harmonize_with,
            out,
        } => {
            let v = read_volume(&volume)?;
            let empty = empty_point.map_or_else(EmptySample::default, |p| EmptySample::at(&v, p));
            let one = |xs: &[EditMask], flag: &str| -> Result<EditMask> {
                match xs {
                    [m] => Ok(*m),
                    _ => bail!("{op:?} needs exactly one {flag}"),
                }
            };
            let mut edited = match op {
                EditOpArg::Remove => {
                    if src.is_empty() {
                        bail!("remove needs at least one --src");
                    }
                    let mut e = v.clone();
                    for m in &src {
                        e = edit_remove(&e, m, empty)?;
                    }
                    e
                }
                EditOpArg::Duplicate => edit_duplicate(&v, &one(&src, "--src")?, &one(&dst, "--dst")?)?,
                EditOpArg::Move => edit_move(&v, &one(&src, "--src")?, &one(&dst, "--dst")?, empty)?,
                EditOpArg::Compose => {
                    if source_volumes.len() != src.len() {
                        bail!("compose needs one --source-volume per --src");
                    }
                    let donors = source_volumes.iter().map(|p| read_volume(p)).collect::<Result<Vec<_>>>()?;
                    let pairs: Vec<_> = donors.iter().zip(src.iter().copied()).collect();
                    compose(&pairs, &v, &dst)?
                }
            };
            if let Some(ckpt) = &harmonize_with {
                edited = harmonize(&load_stack(ckpt)?, &edited, &HarmonizeOptions::default())?;
            }
            cfg.snapshot(&out_dir(&out)?)?;
            write_atomic(&out, &sgrv_bytes(&edited))?;
            print(json!({ "volume": out, "dims": edited.dims(), "harmonized": harmonize_with.is_some() }));
        }
        Command::ExportMesh { volume, out, threshold } => {
            let mesh = export_mesh(&read_volume(&volume)?, threshold)?;
            cfg.snapshot(&out_dir(&out)?)?;
            let obj = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"));
            let bytes = if obj { obj_string(&mesh).into_bytes() } else { stl_bytes(&mesh) };
            write_atomic(&out, &bytes)?;
            print(json!({ "mesh": out, "vertices": mesh.vertices.len(), "triangles": mesh.triangles.len() }));
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            views,
            samples,
            feature_weights,
            out,
        } => {
            let stack = load_stack(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let mut mcfg = cfg.metrics.clone();
            mcfg.views_m = views.unwrap_or(mcfg.views_m);
            mcfg.scenes_j = samples.unwrap_or(mcfg.scenes_j);
            mcfg.seed = cfg.seed;
            let w = FeatureNet::resolve_weights(feature_weights.as_deref(), "inception_stem.safetensors");
            let net = FeatureNet::inception_stem(w.as_deref(), cfg.seed)?;
            let report = evaluate(&stack, &ds, &mcfg, &net)?;
            cfg.snapshot(&out_dir(&out)?)?;
            write_json(&out, &report)?;
            print(json!({
                "report": out,
                "sifid_mv": report.sifid_mv,
                "diversity_mv": report.diversity_mv,
            }));
        }
        Command::Serve {
            checkpoint,
            scenes,
            port,
            host,
        } => {
            let stack = checkpoint.as_deref().map(load_stack).transpose()?;
            if stack.is_none() {
                log::warn!("no checkpoint given; generation routes answer 503");
            }
            let state = singrav_service::AppState::new(stack, checkpoint.as_deref(), scenes)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(singrav_service::serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "code": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "code": "runtime", "message": format!("{e:#}") }));
            ExitCode::from(1)
        }
    }
}

//! Command-line pipeline: one subcommand per stage, each resolving the run
//! configuration, doing its work and writing a manifest beside its output.

pub mod config;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{Layer, RunConfig};
pub use manifest::{Manifest, MANIFEST_FILE};

use crate::bench::{bench_csv, bench_pruning, bench_text, BenchConfig};
use crate::curation::{self, condition_path, CurationStore, SOURCES_FILE, UNCONDITIONAL};
use crate::diffusion::{generate, read_latent_dir, train_ddpm, write_latent, DdpmModel, LatentRecord, LatentSample};
use crate::error::{Error, Result};
use crate::eval::{class_distribution, gap_csv, iou, mmd, FeatureSet};
use crate::labels;
use crate::lidar::{self, default_sensor, simulate, LidarCloud, RangeJitter};
use crate::map::scans::read_scan_dir;
use crate::map::{aggregate, auto_map_grid, crop_at_pose};
use crate::nn::{cancel, derive_seed};
use crate::scene::io::{list_scenes, load_scene, save_scene, save_scene_as};
use crate::scene::{voxelize, VoxelScene};
use crate::semseg::{
    evaluate_segmenter, mix_datasets, run_experiment, train_segmenter, ExperimentCell, MixSpec, Origin, SceneDir,
    ScenePool, Segmenter,
};
use crate::vae::{refine_decoder, train_vae, Vae};

/// Exit status of a run stopped by an interrupt after saving its state.
pub const EXIT_CANCELLED: i32 = 130;

#[derive(Debug, Parser)]
#[command(name = "voxdiff", version, about = "Semantic voxel scene generation pipeline")]
pub struct Cli {
    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Feature-space maximum mean discrepancy between two scene sets.
    Mmd,
    /// Per-class IoU of a segmenter.
    Miou,
    /// Class distribution of one or two scene sets.
    Dist,
    /// Per-class IoU difference between two scene sets.
    Gap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate posed labeled scans into a map, optionally cropping a
    /// training scene at every `map.every`-th scan pose.
    BuildMap {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Map scene file (`.vsc`).
        #[arg(long)]
        out: PathBuf,
        /// Class ids removed before aggregation; defaults to the moving
        /// classes when `map.remove_moving` is set.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        moving_classes: Option<Vec<u8>>,
        /// Directory for the per-pose crops.
        #[arg(long)]
        crops: Option<PathBuf>,
    },
    /// Train the pruning sparse autoencoder.
    TrainVae {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the decoder on noise-perturbed latents.
    RefineVae {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cache dense mean latents of every scene.
    EncodeLatents {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent denoiser.
    TrainDdpm {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<id>.lidar` condition clouds.
        #[arg(long)]
        conditions: Option<PathBuf>,
    },
    /// Sample and decode scenes.
    Generate {
        #[arg(long)]
        ddpm: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// A `.lidar` file or a directory of them, used in turn.
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Guidance weight; defaults to `diffusion.guidance_w`.
        #[arg(long, alias = "w")]
        guidance_w: Option<f64>,
    },
    /// Cast a simulated sensor through one scene (`--scene`, `--out` a
    /// file) or every scene of a directory (`--scenes`, `--out` a directory).
    #[command(group(clap::ArgGroup::new("input").required(true).args(["scene", "scenes"])))]
    SimulateLidar {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sensor profile; defaults to `lidar.profile`.
        #[arg(long)]
        profile: Option<String>,
        /// Also write the returns voxelized back onto the scene grid.
        #[arg(long)]
        voxelized: Option<PathBuf>,
    },
    /// Train a segmenter on a real/synthetic mix, or a grid of mixes.
    TrainSemseg {
        /// `real=F,mode=fill[,total=N][,source=S]` or
        /// `real=F,mode=extend,extra=E[,source=S]`; repeatable.
        #[arg(long, required = true)]
        mix: Vec<String>,
        #[arg(long)]
        real: PathBuf,
        /// `[NAME=]DIR` synthetic scene pool; repeatable.
        #[arg(long)]
        synth: Vec<String>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute an evaluation table; writes `<out>.txt` and `<out>.csv`.
    Evaluate {
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Segmenter checkpoint (mmd, miou, gap).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        /// Reference scene set (mmd, gap, optional for dist).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decoder feature memory with and without pruning.
    BenchPruning {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        forwards: Option<usize>,
        #[arg(long)]
        budget_mb: Option<usize>,
        /// Write `<out>.csv` and `<out>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve generated scenes for accept/reject review.
    ServeCuration {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Copy accepted scenes into a curated dataset.
    ExportCurated {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildMap { .. } => "build-map",
            Command::TrainVae { .. } => "train-vae",
            Command::RefineVae { .. } => "refine-vae",
            Command::EncodeLatents { .. } => "encode-latents",
            Command::TrainDdpm { .. } => "train-ddpm",
            Command::Generate { .. } => "generate",
            Command::SimulateLidar { .. } => "simulate-lidar",
            Command::TrainSemseg { .. } => "train-semseg",
            Command::Evaluate { .. } => "evaluate",
            Command::BenchPruning { .. } => "bench-pruning",
            Command::ServeCuration { .. } => "serve-curation",
            Command::ExportCurated { .. } => "export-curated",
        }
    }
}

fn split_kv(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {s:?}")))
}

impl Cli {
    /// Flag-level overrides in command-line order, `--seed` last.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut v: Vec<_> = self.set.iter().map(|s| split_kv(s)).collect::<Result<_>>()?;
        if let Some(seed) = self.seed {
            v.push(("run.seed".into(), seed.to_string()));
        }
        Ok(v)
    }

    pub fn resolve_config(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), std::env::vars(), &self.overrides()?)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 on usage errors, 1 on failures and
/// [`EXIT_CANCELLED`] after an interrupted training run saved its state.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match cli.resolve_config().and_then(|cfg| execute(&cli.command, &cfg, &recorded)) {
        Ok(Status::Done) => 0,
        Ok(Status::Cancelled) => {
            eprintln!("interrupted; state saved");
            EXIT_CANCELLED
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    Cancelled,
}

impl Status {
    fn from_cancelled(c: bool) -> Self {
        if c {
            Status::Cancelled
        } else {
            Status::Done
        }
    }
}

struct Ctx<'a> {
    command: &'static str,
    args: &'a [String],
    cfg: &'a RunConfig,
}

impl Ctx<'_> {
    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.run.seed, &format!("{}/{label}", self.command))
    }

    fn manifest(&self, inputs: &[&Path], outputs: &[&Path], out: &Path) -> Result<()> {
        let own = |v: &[&Path]| v.iter().map(|p| p.to_path_buf()).collect::<Vec<_>>();
        let m = Manifest::build(self.command, self.args, self.cfg, &own(inputs), &own(outputs))?;
        let path = m.write(out)?;
        log::info!("manifest {}", path.display());
        Ok(())
    }
}

fn load_scene_dir(dir: &Path) -> Result<Vec<(String, VoxelScene)>> {
    list_scenes(dir)?.into_iter().map(|(id, p)| Ok((id, load_scene(&p)?))).collect()
}

fn scenes_only(v: Vec<(String, VoxelScene)>) -> Vec<VoxelScene> {
    v.into_iter().map(|(_, s)| s).collect()
}

fn require(arg: &Option<PathBuf>, flag: &str, mode: &str) -> Result<PathBuf> {
    arg.clone().ok_or_else(|| Error::Config(format!("--{flag} is required for evaluate --mode {mode}")))
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn execute(cmd: &Command, cfg: &RunConfig, args: &[String]) -> Result<Status> {
    let ctx = Ctx { command: cmd.name(), args, cfg };
    log::info!("{} with configuration {}", ctx.command, cfg.fingerprint());
    match cmd {
        Command::BuildMap { scans, poses, out, moving_classes, crops } => {
            build_map(&ctx, scans, poses, out, moving_classes.as_deref(), crops.as_deref())
        }
        Command::TrainVae { scenes, out } => {
            let data = scenes_only(load_scene_dir(scenes)?);
            let (vae, log) = train_vae(&data, &cfg.vae, ctx.seed("train"))?;
            create_parent(out)?;
            vae.save(out, log.epochs.len() as u64)?;
            if let Some(e) = log.epochs.last() {
                println!("trained {} steps over {} epochs, final loss {:.5}", log.steps, log.epochs.len(), e.total);
            }
            ctx.manifest(&[scenes], &[out], out)?;
            Ok(Status::from_cancelled(log.cancelled))
        }
        Command::RefineVae { vae, scenes, out } => {
            let mut model = Vae::load(vae)?;
            let data = scenes_only(load_scene_dir(scenes)?);
            let log = refine_decoder(&mut model, &data, cfg.vae.refine_noise, ctx.seed("refine"))?;
            create_parent(out)?;
            model.save(out, log.epochs.len() as u64)?;
            println!("refined {} steps, encoder {}", log.steps, log.encoder_checksum);
            ctx.manifest(&[vae, scenes], &[out], out)?;
            Ok(Status::from_cancelled(log.cancelled))
        }
        Command::EncodeLatents { vae, scenes, out } => {
            let model = Vae::load(vae)?;
            let fingerprint = model.encoder_checksum()?;
            fs::create_dir_all(out)?;
            let mut n = 0;
            for (id, p) in list_scenes(scenes)? {
                let latent = model.dense_mean(&load_scene(&p)?)?;
                write_latent(out, &LatentRecord { id, fingerprint: fingerprint.clone(), latent })?;
                n += 1;
            }
            println!("encoded {n} latents with encoder {fingerprint}");
            ctx.manifest(&[vae, scenes], &[out], out)?;
            Ok(Status::Done)
        }
        Command::TrainDdpm { latents, vae, out, conditions } => train_ddpm_cmd(&ctx, latents, vae, out, conditions.as_deref()),
        Command::Generate { ddpm, vae, count, out, condition, guidance_w } => {
            generate_cmd(&ctx, ddpm, vae, *count, out, condition.as_deref(), *guidance_w)
        }
        Command::SimulateLidar { scene, scenes, out, profile, voxelized } => {
            simulate_cmd(&ctx, scene.as_deref(), scenes.as_deref(), out, profile.as_deref(), voxelized.as_deref())
        }
        Command::TrainSemseg { mix, real, synth, val, out } => semseg_cmd(&ctx, mix, real, synth, val.as_deref(), out),
        Command::Evaluate { mode, model, scenes, reference, out } => evaluate_cmd(&ctx, *mode, model, scenes, reference, out),
        Command::BenchPruning { sizes, forwards, budget_mb, out } => {
            let b = &cfg.bench;
            let bench = BenchConfig {
                vae: crate::vae::VaeConfig::toy(),
                forwards: forwards.unwrap_or(b.forwards),
                occupancy: b.occupancy,
                budget_bytes: budget_mb.unwrap_or(b.budget_mb) << 20,
                seed: cfg.run.seed,
            };
            let rows = bench_pruning(sizes.as_deref().unwrap_or(&b.sizes), &bench)?;
            let text = bench_text(&rows);
            print!("{text}");
            if let Some(out) = out {
                create_parent(out)?;
                let (csv, txt) = (with_suffix(out, "csv"), with_suffix(out, "txt"));
                fs::write(&csv, bench_csv(&rows))?;
                fs::write(&txt, &text)?;
                ctx.manifest(&[], &[&csv, &txt], out)?;
            }
            Ok(Status::Done)
        }
        Command::ServeCuration { generated, records, bind } => {
            let store = Arc::new(CurationStore::open(generated, records)?);
            println!("serving {} scenes on http://{bind}", store.len());
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(curation::serve(store, *bind, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
            Ok(Status::Done)
        }
        Command::ExportCurated { records, scenes, out } => {
            let s = curation::export_curated(records, scenes, out)?;
            println!("exported {} scenes", s.total);
            for (source, n) in &s.per_source {
                println!("  {source}: {n}");
            }
            ctx.manifest(&[records, scenes], &[out], out)?;
            Ok(Status::Done)
        }
    }
}

fn build_map(
    ctx: &Ctx,
    scans: &Path,
    poses: &Path,
    out: &Path,
    moving_classes: Option<&[u8]>,
    crops: Option<&Path>,
) -> Result<Status> {
    let m = &ctx.cfg.map;
    let scans_v = read_scan_dir(scans, poses)?;
    let moving: BTreeSet<_> = match moving_classes {
        Some(ids) => ids.iter().copied().collect(),
        None if m.remove_moving => labels::MOVING_CLASSES.into_iter().collect(),
        None => BTreeSet::new(),
    };
    if let Some(bad) = moving.iter().find(|&&c| c == 0 || c > m.num_classes) {
        return Err(Error::Config(format!("moving class {bad} outside 1..={}", m.num_classes)));
    }
    let grid = auto_map_grid(&scans_v, &moving, m.resolution)?;
    let map = aggregate(&scans_v, &grid, &moving, m.num_classes)?;
    create_parent(out)?;
    save_scene(map.scene(), out)?;
    let mut outputs = vec![out];
    let mut n = 0;
    if let Some(dir) = crops {
        let crop_grid = m.crop_grid()?;
        for scan in scans_v.iter().step_by(m.every) {
            save_scene_as(&crop_at_pose(&map, &scan.pose, &crop_grid)?, dir, &scan.id)?;
            n += 1;
        }
        outputs.push(dir);
    }
    println!("map with {} voxels from {} scans, {n} crops", map.scene().len(), scans_v.len());
    ctx.manifest(&[scans, poses], &outputs, out)?;
    Ok(Status::Done)
}

fn train_ddpm_cmd(ctx: &Ctx, latents: &Path, vae: &Path, out: &Path, conditions: Option<&Path>) -> Result<Status> {
    let model = Vae::load(vae)?;
    let fingerprint = model.encoder_checksum()?;
    let records = read_latent_dir(latents)?;
    if let Some(stale) = records.iter().find(|r| r.fingerprint != fingerprint) {
        return Err(Error::RejectedInput(format!(
            "latent {} was encoded by encoder {}, not {fingerprint}; re-run encode-latents",
            stale.id, stale.fingerprint
        )));
    }
    let samples: Vec<LatentSample> = records
        .into_iter()
        .map(|r| {
            let cloud = match conditions {
                Some(dir) => Some(LidarCloud::load(dir.join(format!("{}.{}", r.id, lidar::EXTENSION)))?),
                None => None,
            };
            Ok(LatentSample { id: r.id, latent: r.latent, cloud })
        })
        .collect::<Result<_>>()?;
    let mut dcfg = ctx.cfg.diffusion.clone();
    if conditions.is_some() && !dcfg.conditioning {
        return Err(Error::Config("--conditions needs diffusion.conditioning = true".into()));
    }
    dcfg.conditioning &= conditions.is_some();
    let (ddpm, log) = train_ddpm(&samples, &dcfg, model.grid(), model.config().levels, &fingerprint, ctx.seed("train"))?;
    create_parent(out)?;
    ddpm.save(out, log.epochs.len() as u64)?;
    if let Some(e) = log.epochs.last() {
        println!("trained {} steps, final loss {:.5}", log.steps, e.loss);
    }
    let mut inputs = vec![latents, vae];
    inputs.extend(conditions);
    ctx.manifest(&inputs, &[out], out)?;
    Ok(Status::from_cancelled(log.cancelled))
}

fn lidar_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == lidar::EXTENSION) && !p.to_string_lossy().ends_with(".cond.lidar"))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::NotFound(format!("no .{} files in {}", lidar::EXTENSION, path.display())));
    }
    Ok(v)
}

fn generate_cmd(
    ctx: &Ctx,
    ddpm: &Path,
    vae: &Path,
    count: usize,
    out: &Path,
    condition: Option<&Path>,
    w: Option<f64>,
) -> Result<Status> {
    let model = DdpmModel::load(ddpm)?;
    let decoder = Vae::load(vae)?;
    let checksum = decoder.encoder_checksum()?;
    if model.fingerprint() != checksum {
        log::warn!("denoiser was trained on latents of encoder {}, decoder has {checksum}", model.fingerprint());
    }
    let conds: Vec<(String, LidarCloud)> = match condition {
        Some(p) => lidar_files(p)?
            .into_iter()
            .map(|f| Ok((f.file_stem().unwrap_or_default().to_string_lossy().into_owned(), LidarCloud::load(&f)?)))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let w = w.unwrap_or(ctx.cfg.diffusion.guidance_w);
    fs::create_dir_all(out)?;
    let mut sources = BTreeMap::new();
    let mut empty = 0;
    for i in 0..count {
        if cancel::requested() {
            break;
        }
        let id = format!("gen_{i:05}");
        let cond = (!conds.is_empty()).then(|| &conds[i % conds.len()]);
        let g = generate(&model, &decoder, derive_seed(ctx.cfg.run.seed, &format!("generate/{i}")), cond.map(|c| &c.1), w)?;
        empty += g.empty as usize;
        save_scene_as(&g.scene, out, &id)?;
        let source = match cond {
            Some((name, cloud)) => {
                cloud.save(condition_path(out, &id))?;
                name.clone()
            }
            None => UNCONDITIONAL.to_string(),
        };
        sources.insert(id, source);
    }
    fs::write(out.join(SOURCES_FILE), serde_json::to_vec_pretty(&sources)?)?;
    println!("generated {} scenes ({empty} empty)", sources.len());
    let mut inputs = vec![ddpm, vae];
    inputs.extend(condition);
    ctx.manifest(&inputs, &[out], out)?;
    Ok(Status::from_cancelled(sources.len() < count))
}

fn simulate_cmd(
    ctx: &Ctx,
    scene: Option<&Path>,
    scenes: Option<&Path>,
    out: &Path,
    profile: Option<&str>,
    voxelized: Option<&Path>,
) -> Result<Status> {
    let l = &ctx.cfg.lidar;
    let jitter = (l.jitter_std > 0.0).then(|| RangeJitter { std_m: l.jitter_std, seed: ctx.seed("jitter") });
    let sensor = default_sensor(profile.unwrap_or(&l.profile))?.with_origin(l.origin).with_jitter(jitter);
    let (jobs, input): (Vec<(String, PathBuf, PathBuf)>, &Path) = match (scene, scenes) {
        (Some(file), _) => {
            let id = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            create_parent(out)?;
            (vec![(id, file.to_path_buf(), out.to_path_buf())], file)
        }
        (None, Some(dir)) => {
            fs::create_dir_all(out)?;
            let jobs = list_scenes(dir)?
                .into_iter()
                .map(|(id, p)| {
                    let dest = out.join(format!("{id}.{}", lidar::EXTENSION));
                    (id, p, dest)
                })
                .collect();
            (jobs, dir)
        }
        (None, None) => return Err(Error::Config("simulate-lidar needs --scene or --scenes".into())),
    };
    for (id, src, dest) in &jobs {
        let scene = load_scene(src)?;
        let cloud = simulate(&scene, &sensor)?;
        cloud.save(dest)?;
        if let Some(v) = voxelized {
            let vox = voxelize(&cloud.points, &cloud.labels, scene.grid(), scene.num_classes())?;
            save_scene_as(&vox, v, id)?;
        }
    }
    println!("simulated {} scans", jobs.len());
    let mut outputs = vec![out];
    outputs.extend(voxelized);
    ctx.manifest(&[input], &outputs, out)?;
    Ok(Status::Done)
}

fn parse_synth(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((name, dir)) => (name.to_string(), PathBuf::from(dir)),
        None => ("synthetic".to_string(), PathBuf::from(s)),
    }
}

fn semseg_cmd(ctx: &Ctx, mixes: &[String], real: &Path, synth: &[String], val: Option<&Path>, out: &Path) -> Result<Status> {
    let cfg = &ctx.cfg.semseg;
    let specs: Vec<MixSpec> = mixes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let pools: BTreeMap<String, SceneDir> = synth.iter().map(|s| parse_synth(s)).map(|(n, d)| (n, SceneDir(d))).collect();
    let val_scenes = match val {
        Some(v) => scenes_only(load_scene_dir(v)?),
        None => Vec::new(),
    };
    let real_pool = SceneDir(real.to_path_buf());
    fs::create_dir_all(out)?;
    let mut inputs: Vec<&Path> = vec![real];
    inputs.extend(pools.values().map(|d| d.0.as_path()));
    inputs.extend(val);
    if specs.len() == 1 {
        let spec = &specs[0];
        let empty = SceneDir(PathBuf::new());
        let pool = match pools.get(&spec.source) {
            Some(p) => p,
            None if spec.counts(real_pool.ids()?.len())?.1 == 0 => &empty,
            None => return Err(Error::NotFound(format!("synthetic source {} (pass --synth {}=DIR)", spec.source, spec.source))),
        };
        let synth_ids = if pool.0.as_os_str().is_empty() { Vec::new() } else { pool.ids()? };
        let set = mix_datasets(&real_pool.ids()?, &synth_ids, spec, ctx.cfg.run.seed)?;
        let scenes: Vec<VoxelScene> = set
            .entries
            .iter()
            .map(|e| match e.origin {
                Origin::Real => real_pool.load(&e.id),
                Origin::Synthetic => pool.load(&e.id),
            })
            .collect::<Result<_>>()?;
        println!("training on {} real + {} synthetic scenes ({})", set.real, set.synthetic, spec.label());
        let (model, log) = train_segmenter(&scenes, &val_scenes, cfg, ctx.seed("train"))?;
        let ckpt = out.join("model.ckpt");
        model.save(&ckpt, log.epochs.len() as u64)?;
        fs::write(out.join("mix.json"), serde_json::to_vec_pretty(&set)?)?;
        fs::write(out.join("log.json"), serde_json::to_vec_pretty(&log)?)?;
        let report = iou(&log.final_confusion);
        fs::write(out.join("iou.csv"), report.to_csv())?;
        println!("mIoU {}", report.miou.map_or("n/a".into(), |m| format!("{:.2}", 100.0 * m)));
        ctx.manifest(&inputs, &[out], out)?;
        return Ok(Status::from_cancelled(log.cancelled));
    }
    let cells: Vec<ExperimentCell> =
        specs.iter().map(|s| ExperimentCell { id: format!("{}/{}", s.source, s.label()), spec: s.clone() }).collect();
    let dyn_pools: BTreeMap<String, &dyn ScenePool> = pools.iter().map(|(k, v)| (k.clone(), v as &dyn ScenePool)).collect();
    let name = format!("semseg-{}", ctx.cfg.run.seed);
    let report = run_experiment(&name, &cells, &real_pool, &dyn_pools, &val_scenes, cfg)?;
    fs::write(out.join("experiment.csv"), report.to_csv())?;
    let table = report.to_table();
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    ctx.manifest(&inputs, &[out], out)?;
    Ok(Status::from_cancelled(cancel::requested()))
}

fn evaluate_cmd(
    ctx: &Ctx,
    mode: EvalMode,
    model: &Option<PathBuf>,
    scenes: &Path,
    reference: &Option<PathBuf>,
    out: &Path,
) -> Result<Status> {
    use std::fmt::Write as _;
    let name = format!("{mode:?}").to_lowercase();
    let mut inputs: Vec<PathBuf> = vec![scenes.to_path_buf()];
    let (text, csv) = match mode {
        EvalMode::Mmd => {
            let (m, r) = (require(model, "model", &name)?, require(reference, "reference", &name)?);
            let seg = Segmenter::load(&m)?;
            let feats = |dir: &Path| -> Result<FeatureSet> {
                let rows: Vec<Vec<f64>> =
                    load_scene_dir(dir)?.iter().map(|(_, s)| seg.features(s)).collect::<Result<_>>()?;
                FeatureSet::new(&rows)
            };
            let (a, b) = (feats(scenes)?, feats(&r)?);
            let (kernel, estimator) = (ctx.cfg.eval.kernel()?, ctx.cfg.eval.estimator()?);
            let value = mmd(&a, &b, kernel, estimator)?;
            inputs.extend([r, m]);
            (
                format!("MMD {value:.6} ({} vs {} scenes, {kernel:?}, {estimator:?})\n", a.len(), b.len()),
                format!("kernel,estimator,n_scenes,n_reference,mmd\n{kernel:?},{estimator:?},{},{},{value:.6}\n", a.len(), b.len()),
            )
        }
        EvalMode::Miou => {
            let m = require(model, "model", &name)?;
            let seg = Segmenter::load(&m)?;
            let report = iou(&evaluate_segmenter(&seg, &scenes_only(load_scene_dir(scenes)?))?);
            inputs.push(m);
            let miou = report.miou.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v));
            (format!("mIoU {miou}\n"), report.to_csv())
        }
        EvalMode::Dist => {
            let a = class_distribution(&scenes_only(load_scene_dir(scenes)?))?;
            let b = match reference {
                Some(r) => {
                    inputs.push(r.clone());
                    Some(class_distribution(&scenes_only(load_scene_dir(r)?))?)
                }
                None => None,
            };
            if b.as_ref().is_some_and(|b| b.len() != a.len()) {
                return Err(Error::ShapeMismatch("scene sets disagree on class count".into()));
            }
            let full = a.len() == labels::NUM_CLASSES as usize;
            let mut csv = String::from(if b.is_some() { "class,name,scenes,reference\n" } else { "class,name,scenes\n" });
            let mut text = String::new();
            for (i, x) in a.iter().enumerate() {
                let c = i as u8 + 1;
                let n = if full { labels::class_name(c).unwrap_or("-") } else { "-" };
                let _ = write!(csv, "{c},{n},{:.4}", 100.0 * x);
                let _ = write!(text, "{c:>3} {n:<14} {:>8.3}%", 100.0 * x);
                if let Some(b) = &b {
                    let _ = write!(csv, ",{:.4}", 100.0 * b[i]);
                    let _ = write!(text, " {:>8.3}%", 100.0 * b[i]);
                }
                csv.push('\n');
                text.push('\n');
            }
            (text, csv)
        }
        EvalMode::Gap => {
            let (m, r) = (require(model, "model", &name)?, require(reference, "reference", &name)?);
            let seg = Segmenter::load(&m)?;
            let pct = |dir: &Path| -> Result<BTreeMap<u8, f64>> {
                let rep = iou(&evaluate_segmenter(&seg, &scenes_only(load_scene_dir(dir)?))?);
                Ok(rep.class_map().into_iter().map(|(c, v)| (c, 100.0 * v)).collect())
            };
            let (synth, real) = (pct(scenes)?, pct(&r)?);
            let common: BTreeSet<u8> = synth.keys().filter(|c| real.contains_key(c)).copied().collect();
            let keep = |m: &BTreeMap<u8, f64>| m.iter().filter(|(c, _)| common.contains(c)).map(|(&c, &v)| (c, v)).collect();
            let csv = gap_csv(&keep(&real), &keep(&synth))?;
            inputs.extend([r, m]);
            (format!("per-class IoU gap (synthetic - reference) over {} classes\n{csv}", common.len()), csv)
        }
    };
    create_parent(out)?;
    let (txt_path, csv_path) = (with_suffix(out, "txt"), with_suffix(out, "csv"));
    fs::write(&txt_path, &text)?;
    fs::write(&csv_path, &csv)?;
    print!("{text}");
    let inputs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    ctx.manifest(&inputs, &[&txt_path, &csv_path], out)?;
    Ok(Status::Done)
}

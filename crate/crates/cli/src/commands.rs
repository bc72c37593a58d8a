//! Argument definitions and command implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use motionfield::baselines::BONE_COUNT;
use motionfield::baselines::BONE_SIGMA;
use motionfield::eval::{alignment_metrics, test_epe, warp_vertices};
use motionfield::geometry::{load_mesh, load_point_set, save_mesh_with_normals, save_point_set, tensor_to_points};
use motionfield::losses::LossWeights;
use motionfield::motion::{MotionModel, Network, Variant};
use motionfield::synth::{
    gen_alignment_sequence, gen_elemental, gen_image2d, load_trajectories, save_trajectories, AlignmentConfig,
    GuidePair, Motion, MotionKind,
};
use motionfield::train::{fit_alignment, fit_trajectories, AlignmentData, RegMode, TrainConfig};
use motionfield::PointSet;

use crate::report::{write_metrics, MetricsRow};
use crate::{checkpoint, usage, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "motionfield", version, about = "Fit and evaluate spatiotemporal motion fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence.
    Gen(GenArgs),
    /// Fit a motion field to trajectories.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Align a template mesh to a scan sequence.
    Align(AlignArgs),
    /// Describe a checkpoint.
    Info(InfoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Elemental,
    Image2d,
    Alignment,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub kind: GenKind,
    /// translation, rotation, scaling or shearing.
    #[arg(long)]
    pub motion: Option<String>,
    /// Points (elemental), grid side (image2d) or scan samples per frame
    /// (alignment).
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Motion strength; for alignment the final bend angle in degrees.
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (elemental, image2d) or directory (alignment).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// trans, se3, scaled-se3, affinity, dpf, relu, relu-pe6 or bonecloud.
    #[arg(long, default_value = "affinity")]
    pub variant: String,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// none, h, h-homog, e, a or ah.
    #[arg(long, default_value = "none")]
    pub reg: String,
    #[arg(long, default_value_t = 0.1)]
    pub reg_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub aiap_weight: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Final learning rate as a fraction of --lr (geometric decay).
    #[arg(long, default_value_t = 1.0)]
    pub lr_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows per iteration; all rows when omitted.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = BONE_COUNT)]
    pub bones: usize,
    /// Checkpoint path; the loss trace goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Seed recorded in the metrics row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub template: PathBuf,
    /// Directory of per-frame PLY scans, read in file-name order.
    #[arg(long)]
    pub scans: PathBuf,
    #[arg(long)]
    pub guidance: PathBuf,
    #[arg(long, default_value = "affinity")]
    pub variant: String,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1e3)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha3: f64,
    #[arg(long, default_value_t = 0.001)]
    pub alpha4: f64,
    /// Use `Ψ(s²) = s²` in the smoothness term.
    #[arg(long)]
    pub homogeneous: bool,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Final learning rate as a fraction of --lr (geometric decay).
    #[arg(long, default_value_t = 1.0)]
    pub lr_end: f64,
    /// Source points used per iteration; all when omitted.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Ok(threads) = std::env::var("MOTIONFIELD_THREADS") {
        info!("MOTIONFIELD_THREADS={threads}; commands run on one thread");
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Align(a) => cmd_align(a),
        Command::Info(a) => cmd_info(a),
    }
}

fn manifest(path: &Path) -> CliResult<()> {
    let len = std::fs::metadata(path)?.len();
    println!("wrote {} ({len} bytes)", path.display());
    Ok(())
}

fn positive(name: &str, v: Option<usize>, default: usize) -> CliResult<usize> {
    match v {
        Some(0) => usage(format!("--{name} must be positive")),
        Some(v) => Ok(v),
        None => Ok(default),
    }
}

fn parse_motion(a: &GenArgs) -> CliResult<Motion> {
    let Some(name) = &a.motion else {
        return usage("--motion is required");
    };
    let kind: MotionKind = name.parse().map_err(|_| CliError::Usage(format!("unknown motion '{name}'")))?;
    let magnitude = a.magnitude.unwrap_or(kind.default_magnitude());
    if !magnitude.is_finite() {
        return usage("--magnitude must be finite");
    }
    Ok(Motion { kind, magnitude })
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    match a.kind {
        GenKind::Elemental => {
            let motion = parse_motion(a)?;
            let n = positive("points", a.points, 3000)?;
            let frames = positive("frames", a.frames, 20)?;
            let dim = a.dim.unwrap_or(3);
            if frames < 2 || !(dim == 2 || dim == 3) {
                return usage("elemental needs --frames ≥ 2 and --dim 2 or 3");
            }
            save_trajectories(&gen_elemental(&motion, n, frames, dim, a.seed)?, &a.out)?;
            manifest(&a.out)
        }
        GenKind::Image2d => {
            let motion = parse_motion(a)?;
            let side = positive("points", a.points, 512)?;
            let frames = positive("frames", a.frames, 30)?;
            if frames < 2 || side < 2 || a.dim.is_some_and(|d| d != 2) {
                return usage("image2d needs --frames ≥ 2, --points ≥ 2 and is always 2D");
            }
            save_trajectories(&gen_image2d(side, &motion, frames, a.seed)?, &a.out)?;
            manifest(&a.out)
        }
        GenKind::Alignment => {
            if a.motion.is_some() || a.dim.is_some_and(|d| d != 3) {
                return usage("alignment takes no --motion and is always 3D");
            }
            let defaults = AlignmentConfig::default();
            let cfg = AlignmentConfig {
                scan_points: positive("points", a.points, defaults.scan_points)?,
                frames: positive("frames", a.frames, defaults.frames)?,
                max_angle_deg: a.magnitude.unwrap_or(defaults.max_angle_deg),
                ..defaults
            };
            if cfg.frames < 2 || !cfg.max_angle_deg.is_finite() {
                return usage("alignment needs --frames ≥ 2 and a finite --magnitude");
            }
            let seq = gen_alignment_sequence(&cfg, a.seed)?;
            std::fs::create_dir_all(&a.out)?;
            let template = a.out.join("template.obj");
            let (normals, _) = seq.template.vertex_normals();
            save_mesh_with_normals(&seq.template, &normals, &template)?;
            manifest(&template)?;
            for (k, scan) in seq.scans.iter().enumerate() {
                let p = a.out.join(format!("scan_{k:03}.ply"));
                save_point_set(scan, &p)?;
                manifest(&p)?;
            }
            let g = a.out.join("guidance.dtrj");
            save_trajectories(&seq.guidance_set()?, &g)?;
            manifest(&g)
        }
    }
}

/// A model family as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelChoice {
    pub variant: Variant,
    pub pe_levels: usize,
}

impl std::str::FromStr for ModelChoice {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        let (variant, pe_levels) = match s {
            "relu" => (Variant::ReluPe, 0),
            "relu-pe6" => (Variant::ReluPe, 6),
            "relu-pe" => return usage("give the encoding depth, e.g. relu-pe6"),
            other => match other.strip_prefix("relu-pe") {
                Some(l) => (Variant::ReluPe, l.parse().map_err(|_| CliError::Usage(format!("unknown variant '{s}'")))?),
                None => (other.parse().map_err(|_| CliError::Usage(format!("unknown variant '{s}'")))?, 0),
            },
        };
        Ok(Self { variant, pe_levels })
    }
}

/// Name used on the command line and in metric rows.
pub fn model_name(m: &MotionModel<f64>) -> String {
    match &m.net {
        Network::ReluPe(p) if p.pe_levels == 0 => "relu".into(),
        Network::ReluPe(p) => format!("relu-pe{}", p.pe_levels),
        _ => m.variant.name().into(),
    }
}

pub fn build_model(
    choice: ModelChoice,
    dim: usize,
    hidden: usize,
    layers: usize,
    frames: usize,
    bone_points: &[[f64; 3]],
    bones: usize,
    seed: u64,
) -> CliResult<MotionModel<f64>> {
    if hidden < 2 || layers == 0 {
        return usage("--hidden must be ≥ 2 and --layers ≥ 1");
    }
    if choice.variant.out_dim(dim).is_none() {
        return usage(format!("{} is not available for {dim}D data", choice.variant));
    }
    Ok(match choice.variant {
        Variant::ReluPe => MotionModel::relu_pe(dim, choice.pe_levels, frames, seed)?,
        Variant::BoneCloud => {
            if bones == 0 {
                return usage("--bones must be positive");
            }
            MotionModel::bone_cloud(bone_points, bones, frames, BONE_SIGMA, seed)?
        }
        v => MotionModel::siren(v, dim, hidden, layers, frames, seed)?,
    })
}

fn parse_reg(s: &str) -> CliResult<RegMode> {
    s.parse().map_err(|_| CliError::Usage(format!("unknown regularizer '{s}'")))
}

fn check_schedule(batch: Option<usize>, iters: usize, lr: f64, lr_end: f64) -> CliResult<()> {
    if batch == Some(0) || iters == 0 {
        return usage("--batch and --iters must be positive");
    }
    if !(lr > 0.0 && lr.is_finite() && lr_end > 0.0 && lr_end <= 1.0) {
        return usage("need --lr > 0 and --lr-end in (0, 1]");
    }
    Ok(())
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.loss.csv"))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let choice: ModelChoice = a.variant.parse()?;
    let reg = parse_reg(&a.reg)?;
    if reg.needs_jacobian() && !choice.variant.has_jacobian() {
        return usage(format!("--reg {reg} needs a variant with a motion Jacobian"));
    }
    check_schedule(a.batch, a.iters, a.lr, a.lr_end)?;
    let data = load_trajectories(&a.data)?;
    let (canon, _) = data.subset(&data.train_indices());
    let bone_points = if data.dim() == 3 { tensor_to_points(&canon) } else { Vec::new() };
    let mut m = build_model(choice, data.dim(), a.hidden, a.layers, data.n_frames(), &bone_points, a.bones, a.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        lr_end_ratio: a.lr_end,
        iters: a.iters,
        seed: a.seed,
        batch_points: a.batch,
        reg_mode: reg,
        reg_weight: a.reg_weight,
        aiap_weight: a.aiap_weight,
        ..TrainConfig::default()
    };
    let report = fit_trajectories(&mut m, &data, &cfg)?;
    info!("final loss {:e}", report.final_loss());
    m.round_to_f32();
    checkpoint::save(&m, &a.out)?;
    manifest(&a.out)?;
    let csv = loss_csv_path(&a.out);
    std::fs::write(&csv, report.to_csv())?;
    manifest(&csv)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let m = checkpoint::load(&a.ckpt)?;
    let data = load_trajectories(&a.data)?;
    if data.dim() != m.spatial_dim || data.n_frames() != m.frames() {
        return Err(motionfield::Error::Contract(format!(
            "checkpoint expects {} frames in {}D, data has {} in {}D",
            m.frames(),
            m.spatial_dim,
            data.n_frames(),
            data.dim()
        ))
        .into());
    }
    let row = MetricsRow {
        variant: model_name(&m),
        epe: Some(test_epe(&m, &data)?),
        params: m.param_count(),
        seed: a.seed,
        ..Default::default()
    };
    write_metrics(&[row], &a.out)?;
    manifest(&a.out)
}

fn load_scans(dir: &Path) -> CliResult<Vec<PointSet>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    files.sort();
    if files.is_empty() {
        return usage(format!("no scans in {}", dir.display()));
    }
    files.iter().map(|p| Ok(load_point_set(p)?)).collect()
}

pub fn cmd_align(a: &AlignArgs) -> CliResult<()> {
    let choice: ModelChoice = a.variant.parse()?;
    let w = LossWeights {
        alpha1: a.alpha1,
        alpha2: a.alpha2,
        alpha3: a.alpha3,
        alpha4: a.alpha4,
    };
    if w.validate().is_err() {
        return usage("loss weights must be finite and non-negative");
    }
    if w.alpha4 > 0.0 && !choice.variant.has_jacobian() {
        return usage("--alpha4 needs a variant with a motion Jacobian");
    }
    check_schedule(a.batch, a.iters, a.lr, a.lr_end)?;
    let template = load_mesh(&a.template)?;
    let scans = load_scans(&a.scans)?;
    let guide = load_trajectories(&a.guidance)?;
    if guide.dim() != 3 {
        return usage("guidance must be 3D");
    }
    let frames = scans.len();
    if guide.n_frames() != frames {
        return Err(motionfield::Error::Contract(format!(
            "{frames} scans but {} guidance frames",
            guide.n_frames()
        ))
        .into());
    }
    let canonical = tensor_to_points(&guide.canonical);
    let guidance: Vec<GuidePair> = (0..frames)
        .map(|k| GuidePair {
            canonical: canonical.clone(),
            target: tensor_to_points(&guide.frame(k)),
        })
        .collect();
    let source = scans[0].points.clone();
    let mut m = build_model(choice, 3, a.hidden, a.layers, frames, &source, BONE_COUNT, a.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        lr_end_ratio: a.lr_end,
        iters: a.iters,
        seed: a.seed,
        batch_points: a.batch,
        ..TrainConfig::default()
    };
    let data = AlignmentData {
        source: &source,
        scans: &scans,
        guidance: &guidance,
        times_norm: &guide.times_norm,
    };
    let report = fit_alignment(&mut m, &data, &cfg, &w, !a.homogeneous)?;
    m.round_to_f32();

    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.doma");
    checkpoint::save(&m, &ckpt)?;
    manifest(&ckpt)?;
    let loss = a.out.join("loss.csv");
    std::fs::write(&loss, report.to_csv())?;
    manifest(&loss)?;
    let warped = warp_vertices(&m, &template.vertices, &guide.times_norm)?;
    for (k, verts) in warped.iter().enumerate() {
        let mesh = template.with_vertices(verts.clone())?;
        let (normals, _) = mesh.vertex_normals();
        let p = a.out.join(format!("frame_{k:03}.obj"));
        save_mesh_with_normals(&mesh, &normals, &p)?;
        manifest(&p)?;
    }
    let metrics = alignment_metrics(&template, &warped, &scans)?;
    let row = MetricsRow {
        variant: model_name(&m),
        epe: None,
        cd: Some(metrics.cd),
        cdn: metrics.cdn.is_finite().then_some(metrics.cdn),
        std_e: Some(metrics.std_e),
        std_v: Some(metrics.std_v),
        params: m.param_count(),
        seed: a.seed,
    };
    let csv = a.out.join("metrics.csv");
    write_metrics(&[row], &csv)?;
    manifest(&csv)
}

pub fn describe(m: &MotionModel<f64>, bytes: u64) -> String {
    let arch = match &m.net {
        Network::Siren(p) => format!(
            "sine MLP {} -> {} x {} -> {}, omega {}",
            p.in_dim, p.hidden_dim, p.n_hidden, p.out_dim, p.omega_first
        ),
        Network::PerFrame(ps) => format!(
            "{} per-frame sine MLPs {} -> {} x {} -> {}",
            ps.len(),
            ps[0].in_dim,
            ps[0].hidden_dim,
            ps[0].n_hidden,
            ps[0].out_dim
        ),
        Network::ReluPe(p) => format!(
            "ReLU MLP {} (encoding depth {}) -> {} x {} -> {}",
            p.in_dim, p.pe_levels, p.width, p.n_hidden, p.out_dim
        ),
        Network::BoneCloud(p) => format!("{} bones over {} frames, sigma {}", p.bone_count(), p.frames(), p.sigma),
    };
    format!(
        "variant: {}\narchitecture: {arch}\nframes: {}\nparams: {}\nbytes: {bytes}\n",
        model_name(m),
        m.frames(),
        m.param_count()
    )
}

pub fn cmd_info(a: &InfoArgs) -> CliResult<()> {
    let m = checkpoint::load(&a.ckpt)?;
    let bytes = std::fs::metadata(&a.ckpt)?.len();
    print!("{}", describe(&m, bytes));
    Ok(())
}

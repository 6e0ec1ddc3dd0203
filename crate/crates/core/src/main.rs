use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use regnet::config::{Precision, RunConfig};
use regnet::data::{load_dataset, write_dataset, Role};
use regnet::engine::{
    check_ops, dice_table, endpoint_error, load_model, mean_dice, register_volume, CheckpointHeader, DiceRow,
    EndpointError, RunOutputs, Trainer,
};
use regnet::model::Model;
use regnet::netcore::checkpoint::Checkpoint;
use regnet::netcore::Real;
use regnet::volume::mvol::{read_field, read_labels, read_volume, write_field, write_volume, Dtype};
use regnet::volume::{warp_labels_nearest, DisplacementField3};
use regnet::{par, Error, Result};

#[derive(Parser)]
#[command(name = "regnet", version, about = "Dual-supervised hierarchical registration of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a phantom dataset with exact ground-truth fields.
    MakeData(MakeData),
    /// Train a registration network on a dataset.
    Train(Train),
    /// Register a subject volume to the template with a trained model.
    Register(Register),
    /// Dice and endpoint-error tables for a registration result.
    Evaluate(Evaluate),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; 1 selects the deterministic sequential path.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct MakeData {
    #[arg(long)]
    out: PathBuf,
    /// Training pairs (each is augmented with every fraction).
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    val_pairs: Option<usize>,
    /// Cubic volume edge length.
    #[arg(long)]
    dims: Option<usize>,
    /// Maximum displacement norm in voxels.
    #[arg(long)]
    max_disp: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Max norm of a smooth perturbation added to the training supervision only.
    #[arg(long)]
    noise_gt: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_similarity: bool,
    #[arg(long)]
    plain_unet: bool,
    #[arg(long)]
    no_gap_fill: bool,
    #[arg(long)]
    no_hierarchical: bool,
    /// Seed for initialisation, patch sampling and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Register {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    subject: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Evaluate {
    /// Directory written by `register`.
    #[arg(long)]
    result: PathBuf,
    /// Subject labels; warped by the result's field before comparison.
    #[arg(long)]
    labels_a: PathBuf,
    /// Template labels.
    #[arg(long)]
    labels_b: PathBuf,
    #[arg(long)]
    gt_field: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// `all` or one operation name.
    #[arg(long, default_value = "all")]
    ops: String,
    #[arg(long, default_value = "double")]
    precision: String,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Randomized shapes per operation.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        c.apply_assignment(kv)?;
    }
    Ok(c)
}

fn set_threads(c: &mut RunConfig, flag: Option<usize>) {
    c.threads = match flag {
        Some(n) => n,
        None if c.train.deterministic => 1,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    if c.threads == 1 {
        c.train.deterministic = true;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(path, s + "\n")?;
    Ok(())
}

fn make_data(a: MakeData) -> Result<()> {
    let mut c = resolve(&a.common)?;
    if let Some(v) = a.pairs {
        c.data.train_pairs = v;
    }
    if let Some(v) = a.val_pairs {
        c.data.val_pairs = v;
    }
    if let Some(v) = a.dims {
        c.data.dims = [v; 3];
    }
    if let Some(v) = a.max_disp {
        c.data.max_magnitude = v;
    }
    if let Some(v) = a.seed {
        c.data.seed = v;
    }
    if let Some(v) = a.noise_gt {
        c.data.supervision_noise = v;
    }
    set_threads(&mut c, a.common.threads);
    c.validate()?;
    par::configure_threads(c.threads);
    let m = write_dataset(&c.data, &a.out)?;
    std::fs::write(a.out.join("config.txt"), c.to_text())?;
    let train = m.entries(Role::Train).count();
    let val = m.entries(Role::Validation).count();
    println!("wrote {} samples ({train} training, {val} validation) to {}", m.samples.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut c = resolve(&a.common)?;
    if let Some(s) = a.seed {
        c.train.seed = s;
        c.model.seed = s;
    }
    c.train.no_similarity |= a.no_similarity;
    c.train.plain_unet |= a.plain_unet;
    if a.no_gap_fill {
        c.model.gap_fill = false;
    }
    if a.no_hierarchical {
        c.model.hierarchical = false;
    }
    let t = c.train.clone();
    t.apply_ablation(&mut c.model);
    set_threads(&mut c, a.common.threads);
    c.validate()?;
    par::configure_threads(c.threads);
    let ds = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.txt"), c.to_text())?;
    let out = RunOutputs { dir: a.out.clone() };
    match c.precision {
        Precision::Single => run_training::<f32>(&c, &ds, &out, a.resume.as_deref()),
        Precision::Double => run_training::<f64>(&c, &ds, &out, a.resume.as_deref()),
    }
}

fn run_training<T: Real>(c: &RunConfig, ds: &regnet::data::Dataset, out: &RunOutputs, resume: Option<&Path>) -> Result<()> {
    let mut t = match resume {
        Some(p) => Trainer::<T>::resume(p, ds)?,
        None => Trainer::new(Model::<T>::build(c.model.clone())?, c.train.clone(), ds)?,
    };
    eprintln!(
        "training {} parameters ({}) on {} patches, {} validation patches",
        t.model.parameter_count(),
        T::NAME,
        t.train_patch_count(),
        t.val_patch_count()
    );
    t.run(Some(out), |s| {
        let val = match (s.val_loss_phi, s.val_loss_m) {
            (Some(p), Some(m)) => format!(" | val loss_phi {p:.5} loss_m {m:.5}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {} (stage {}) iter {} | train loss_phi {:.5} loss_m {:.5} combined {:.4}{val}",
            s.epoch, s.stage, s.iterations, s.train_loss_phi, s.train_loss_m, s.train_combined
        );
    })?;
    println!("wrote {}", out.final_checkpoint().display());
    Ok(())
}

#[derive(Serialize)]
struct RegistrationSummary {
    model: String,
    precision: String,
    dims: [usize; 3],
    tiles: usize,
    tiles_per_axis: [usize; 3],
    min_coverage: u32,
    max_overlap_disagreement: f64,
    mean_displacement: f64,
    max_displacement: f64,
    seconds: f64,
}

fn register(a: Register) -> Result<()> {
    par::configure_threads(a.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())));
    let header = CheckpointHeader::parse(&Checkpoint::read(&a.model)?)?;
    let template = read_volume(&a.template)?;
    let subject = read_volume(&a.subject)?;
    let r = match header.precision.as_str() {
        "f32" => register_volume(&load_model::<f32>(&a.model)?.0, &template, &subject)?,
        "f64" => register_volume(&load_model::<f64>(&a.model)?.0, &template, &subject)?,
        p => return Err(Error::Checkpoint(format!("unsupported precision `{p}`"))),
    };
    std::fs::create_dir_all(&a.out)?;
    write_field(a.out.join("field.mvol"), &r.field, Dtype::F32)?;
    write_volume(a.out.join("warped.mvol"), &r.warped, Dtype::F32)?;
    let summary = RegistrationSummary {
        model: a.model.display().to_string(),
        precision: header.precision,
        dims: template.dims(),
        tiles: r.report.tiles,
        tiles_per_axis: r.report.tiles_per_axis,
        min_coverage: r.report.min_coverage,
        max_overlap_disagreement: r.report.max_overlap_disagreement,
        mean_displacement: r.field.mean_norm(),
        max_displacement: r.field.max_norm(),
        seconds: r.report.seconds,
    };
    write_json(&a.out.join("registration.json"), &summary)?;
    println!(
        "{} tiles, mean |field| {:.4} voxels, {:.2} s; wrote {}",
        summary.tiles,
        summary.mean_displacement,
        summary.seconds,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationSummary {
    rois: usize,
    mean_dice: Option<f64>,
    identity_mean_dice: Option<f64>,
    dice: Vec<DiceRow>,
    endpoint: Option<EndpointError>,
    identity_endpoint: Option<EndpointError>,
}

fn evaluate(a: Evaluate) -> Result<()> {
    let field = read_field(a.result.join("field.mvol"))?;
    let la = read_labels(&a.labels_a)?;
    let lb = read_labels(&a.labels_b)?;
    let warped = warp_labels_nearest(&la, &field)?;
    let dice = dice_table(&warped, &lb)?;
    let identity = dice_table(&la, &lb)?;
    let (endpoint, identity_endpoint) = match &a.gt_field {
        Some(p) => {
            let gt = read_field(p)?;
            (
                Some(endpoint_error(&field, &gt, None)?),
                Some(endpoint_error(&DisplacementField3::zeros(gt.dims()), &gt, None)?),
            )
        }
        None => (None, None),
    };
    let mut csv = String::from("roi,dice,voxels_a,voxels_b\n");
    for r in &dice {
        csv += &format!("{},{},{},{}\n", r.roi, r.dice.map_or(String::new(), |d| d.to_string()), r.voxels_a, r.voxels_b);
    }
    std::fs::write(a.result.join("dice.csv"), csv)?;
    let s = EvaluationSummary {
        rois: dice.len(),
        mean_dice: mean_dice(&dice),
        identity_mean_dice: mean_dice(&identity),
        dice,
        endpoint,
        identity_endpoint,
    };
    write_json(&a.result.join("metrics.json"), &s)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("{} ROIs, mean Dice {} (identity {})", s.rois, fmt(s.mean_dice), fmt(s.identity_mean_dice));
    if let (Some(e), Some(i)) = (s.endpoint, s.identity_endpoint) {
        println!("endpoint error mean {:.4} max {:.4} (identity mean {:.4} max {:.4})", e.mean, e.max, i.mean, i.max);
    }
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let checks = match Precision::parse(&a.precision).map_err(|e| Error::InvalidInput(e.to_string()))? {
        Precision::Double => check_ops::<f64>(&a.ops, &seeds, a.tol)?,
        Precision::Single => check_ops::<f32>(&a.ops, &seeds, a.tol)?,
    };
    let mut failed = Vec::new();
    for c in &checks {
        let div = c.scheme_divergence.map_or(String::new(), |d| format!("  analytic vs voxel-shift divergence {d:.3e}"));
        println!(
            "{:<20} seed {} {} max rel err {:.3e} ({} coords, {} at kinks) {}{div}",
            c.op,
            c.seed,
            c.precision,
            c.max_rel_err,
            c.checked,
            c.excluded,
            if c.passed { "ok" } else { "FAIL" }
        );
        if !c.passed {
            failed.push(format!("{} (seed {})", c.op, c.seed));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("tolerance {:.1e} exceeded by {}", a.tol, failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::MakeData(a) => make_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Register(a) => register(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

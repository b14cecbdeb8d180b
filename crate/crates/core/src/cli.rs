use airnet::decoder::{DecoderConfig, DecoderKind};
use airnet::encoder::{EncoderConfig, ModelError, SetAbsMode};
use airnet::extraction::{ExtractConfig, ExtractError, TriangleMesh};
use airnet::geometry::{self, PointCloud};
use airnet::gradcheck;
use airnet::metrics::{EvalReport, EvalSettings};
use airnet::model::ModelConfig;
use airnet::pipeline::{self, PipelineError};
use airnet::synthdata::{self, DatasetSpec, Regime, ShapeRecord};
use airnet::tensor::checkpoint::Checkpoint;
use airnet::tensor::{Fault, TensorError};
use airnet::training::{FitOutputs, TrainConfig, TrainError};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "airnet", version, about = "Point-cloud to occupancy-field reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Reconstruct meshes from input clouds with a trained model.
    Reconstruct(ReconstructArgs),
    /// Score meshes (or a model) against the analytic shapes of a dataset.
    Eval(EvalArgs),
    /// Train and evaluate several model variants under one budget.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
struct GenDataArgs {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Regime::NearSurface)]
    regime: Regime,
    /// Gaussian noise on the input clouds.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Input points per shape (300 sparse, 3000 dense).
    #[arg(long, default_value_t = 300)]
    points: usize,
    /// Supervision queries per shape.
    #[arg(long, default_value_t = 10_000)]
    supervision: usize,
}

#[derive(Args, Serialize, Clone)]
struct ModelArgs {
    /// Feature width of the encoder.
    #[arg(long, default_value_t = 256)]
    d: usize,
    /// Number of anchors.
    #[arg(long, default_value_t = 100)]
    m: usize,
    /// Point counts after each downsampling layer; the last equals m.
    #[arg(long, value_delimiter = ',', default_values_t = vec![200usize, 100])]
    cardinalities: Vec<usize>,
    /// Full-attention layers over the anchors.
    #[arg(long, default_value_t = 3)]
    l2: usize,
    #[arg(long, default_value_t = 16)]
    k_enc: usize,
    #[arg(long, default_value = "attentive", value_parser = ["attentive", "maxpool"])]
    set_abs: String,
    #[arg(long, default_value = "attentive", value_parser = ["attentive", "interp"])]
    decoder: String,
    #[arg(long, default_value_t = 7)]
    k_dec: usize,
    #[arg(long, default_value_t = 200)]
    d_dec: usize,
    #[arg(long, default_value_t = 128)]
    head_width: usize,
    #[arg(long, default_value_t = 5)]
    head_blocks: usize,
    /// Seed of the parameter initialization.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: self.d,
                m: self.m,
                cardinalities: self.cardinalities.clone(),
                l2: self.l2,
                k_enc: self.k_enc,
                set_abs: if self.set_abs == "maxpool" { SetAbsMode::Maxpool } else { SetAbsMode::Attentive },
            },
            decoder: DecoderConfig {
                k_dec: self.k_dec,
                d_dec: self.d_dec,
                head_blocks: self.head_blocks,
                head_width: self.head_width,
                kind: if self.decoder == "interp" { DecoderKind::Interp } else { DecoderKind::Attentive },
                ..DecoderConfig::default()
            },
        }
    }
}

#[derive(Args, Serialize, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    points_per_shape: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    lr_decay: f64,
    /// Epochs between learning-rate decays (0 disables decay).
    #[arg(long, default_value_t = 200)]
    decay_every: usize,
    /// Epochs without validation improvement before stopping (0 disables).
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Seed of batch order and query sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            points_per_shape: self.points_per_shape,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Start from these parameters; the model layout is taken from the
    /// checkpoint.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitArgs,
}

#[derive(Args, Serialize, Clone)]
struct ExtractArgs {
    /// Initial grid resolution.
    #[arg(long, default_value_t = 32)]
    res0: usize,
    /// Refinement steps; the final resolution is res0 * 2^upsample.
    #[arg(long, default_value_t = 2)]
    upsample: u32,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Inflation of the input bounding box.
    #[arg(long, default_value_t = 0.1)]
    padding: f64,
}

impl ExtractArgs {
    fn config(&self) -> ExtractConfig {
        ExtractConfig {
            r0: self.res0,
            upsample: self.upsample,
            tau: self.threshold,
            padding: self.padding,
        }
    }
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
struct ReconstructArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset directory or a single point-cloud file.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    extract: ExtractArgs,
}

#[derive(Args, Serialize, Clone)]
struct ScoreArgs {
    #[arg(long, default_value_t = 100_000)]
    iou_samples: usize,
    #[arg(long, default_value_t = 100_000)]
    surface_samples: usize,
    /// F-score distance threshold.
    #[arg(long, default_value_t = 0.01)]
    f_tau: f64,
    /// Seed of the metric samplers.
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

impl ScoreArgs {
    fn settings(&self) -> EvalSettings {
        EvalSettings {
            iou_samples: self.iou_samples,
            surface_samples: self.surface_samples,
            tau_f: self.f_tau,
            seed: self.eval_seed,
        }
    }
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
    /// Dataset with the ground-truth shapes.
    #[arg(long)]
    data: PathBuf,
    /// Directory of `shape_NNNNN.obj` meshes, one per dataset shape.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    meshes: Option<PathBuf>,
    /// Reconstruct with this model instead of reading meshes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    extract: ExtractArgs,
    #[command(flatten)]
    #[serde(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for evaluation.
    #[arg(long)]
    test_data: PathBuf,
    /// Comma-separated `encoder:full:decoder` labels, or `all`.
    #[arg(long, value_delimiter = ',', default_values_t = ["ours:3full:ours".to_string(), "PT:3full:ours".to_string(), "ours:3full:interp".to_string(), "ours::ours".to_string()])]
    variants: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    extract: ExtractArgs,
    #[command(flatten)]
    #[serde(flatten)]
    score: ScoreArgs,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultArg {
    ReluLeak,
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Optional directory for the report.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    force: bool,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, value_enum, hide = true)]
    #[serde(skip)]
    inject_fault: Option<FaultArg>,
}

/// Marker for failures that map to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericFailure(String);

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<NumericFailure>()
            || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
            || matches!(cause.downcast_ref::<ExtractError>(), Some(ExtractError::BadValues(_)))
            || matches!(cause.downcast_ref::<TensorError>(), Some(TensorError::NonFinite { .. }))
        {
            return 2;
        }
        if let Some(ModelError::Tensor(TensorError::NonFinite { .. })) = cause.downcast_ref::<ModelError>() {
            return 2;
        }
    }
    1
}

/// Moves the contents of `--config FILE` in front of the other flags of the
/// subcommand, so that explicit flags override file entries.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    let head: Vec<String> = it.by_ref().take(2).collect();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let mut out = head;
    if let Some(p) = path {
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {p}"))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(usage(format!("{p}:{}: expected key=value", n + 1)));
            };
            let (k, v) = (k.trim().replace('_', "-"), v.trim());
            if k == "config" {
                bail!(usage(format!("{p}:{}: nested config files are not supported", n + 1)));
            }
            match v {
                "true" => out.push(format!("--{k}")),
                "false" => {}
                _ => out.push(format!("--{k}={v}")),
            }
        }
    }
    out.extend(rest);
    Ok(out)
}

fn usage(msg: String) -> clap::Error {
    clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{msg}\n"))
}

/// Effective settings as sorted `key=value` lines.
fn config_text(args: &impl Serialize) -> String {
    let v = serde_json::to_value(args).expect("arguments serialize");
    let mut s = String::new();
    if let serde_json::Value::Object(map) = v {
        for (k, v) in map {
            let val = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(x) => x,
                serde_json::Value::Array(xs) => xs
                    .iter()
                    .map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()))
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            s.push_str(&format!("{}={}\n", k.replace('_', "-"), val));
        }
    }
    s
}

fn prepare_out(out: &Path, force: bool, args: &impl Serialize) -> Result<()> {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        bail!(usage(format!("output directory {} is not empty (use --force)", out.display())));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), config_text(args))?;
    Ok(())
}

pub fn run(args: Vec<String>) -> Result<()> {
    if let Ok(n) = std::env::var("AIRNET_THREADS") {
        let n: usize = n.parse().map_err(|_| usage(format!("AIRNET_THREADS={n} is not a number")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let cli = Cli::try_parse_from(expand_config(args)?)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Reconstruct(a) => reconstruct(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        count: a.count,
        seed: a.seed,
        regime: a.regime,
        noise_sigma: a.noise_sigma,
        points: a.points,
        supervision: a.supervision,
    };
    if a.points == 0 {
        bail!(usage("--points must be positive".into()));
    }
    prepare_out(&a.out, a.force, a)?;
    let recs = synthdata::make_dataset(&spec)?;
    synthdata::write_dataset(&a.out, &spec, &recs)?;
    eprintln!("wrote {} shapes to {}", recs.len(), a.out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Vec<ShapeRecord>> {
    let (_, recs) = synthdata::read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(recs)
}

fn train(a: &TrainArgs) -> Result<()> {
    let recs = load_data(&a.data)?;
    if recs.is_empty() {
        bail!(usage(format!("dataset {} is empty", a.data.display())));
    }
    let (cfg, init) = match &a.init_checkpoint {
        Some(p) => {
            let (m, params, _) = pipeline::load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            (m.cfg, Some(params))
        }
        None => (a.model.config(), None),
    };
    prepare_out(&a.out, a.force, a)?;
    std::fs::write(a.out.join("model.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let mut log = std::fs::File::create(a.out.join("train_log.tsv"))?;
    let ck = a.out.join("best.ckpt");
    let meta = pipeline::checkpoint_meta(&cfg, a.model.model_seed);
    let out = FitOutputs {
        log: Some(&mut log),
        checkpoint: Some((&ck, meta.clone())),
    };
    let (_, fit) = pipeline::train_model(&cfg, a.model.model_seed, init, &recs, &a.fit.config(), out)?;
    if fit.best_epoch.is_none() {
        Checkpoint::from_store(&fit.best, meta).save(&ck)?;
    }
    eprintln!(
        "trained {} epochs; best validation loss {:.5} at epoch {:?}",
        fit.log.len(),
        fit.best_val,
        fit.best_epoch
    );
    Ok(())
}

fn mesh_name(i: usize) -> String {
    format!("shape_{i:05}.obj")
}

fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (model, params, _) = pipeline::load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cfg = a.extract.config();
    let inputs: Vec<(String, PointCloud)> = if a.input.is_dir() {
        load_data(&a.input)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| (mesh_name(i), r.cloud))
            .collect()
    } else {
        let cloud = geometry::load_cloud(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
        vec![(format!("{stem}.obj"), cloud)]
    };
    prepare_out(&a.out, a.force, a)?;
    for (name, cloud) in &inputs {
        let mesh = airnet::extraction::reconstruct(&model, &params, cloud, &cfg)?;
        mesh.save_obj(&a.out.join(name))?;
        eprintln!("{name}: {} vertices, {} faces", mesh.vertices.len(), mesh.faces.len());
    }
    Ok(())
}

fn write_reports(out: &Path, stem: &str, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut table = pipeline::format_table(rows);
    let mut kv = String::new();
    for (label, r) in rows {
        for line in r.key_values().lines() {
            kv.push_str(&format!("{label}.{line}\n"));
        }
    }
    let reports: Vec<EvalReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    if let Some(mean) = EvalReport::mean(&reports) {
        table.push_str(&pipeline::format_table(&[("mean".to_string(), mean.clone())]).lines().skip(1).collect::<Vec<_>>().join("\n"));
        table.push('\n');
        for line in mean.key_values().lines() {
            kv.push_str(&format!("mean.{line}\n"));
        }
    }
    print!("{table}");
    std::fs::write(out.join(format!("{stem}.txt")), table)?;
    std::fs::write(out.join(format!("{stem}_kv.txt")), kv)?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let recs = load_data(&a.data)?;
    let meshes: Vec<TriangleMesh> = match (&a.meshes, &a.checkpoint) {
        (Some(dir), _) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "obj"))
                .collect();
            files.sort();
            if files.len() != recs.len() {
                bail!(usage(format!("{} meshes for {} shapes", files.len(), recs.len())));
            }
            files
                .iter()
                .map(|p| TriangleMesh::load_obj(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<_>>()?
        }
        (None, Some(ck)) => {
            let (model, params, _) = pipeline::load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
            pipeline::reconstruct_all(&model, &params, &recs, &a.extract.config())?
        }
        (None, None) => bail!(usage("either --meshes or --checkpoint is required".into())),
    };
    prepare_out(&a.out, a.force, a)?;
    let reports = pipeline::evaluate_all(&meshes, &recs, &a.score.settings())?;
    let rows: Vec<(String, EvalReport)> = reports
        .into_iter()
        .enumerate()
        .map(|(i, r)| (format!("shape_{i:05}"), r))
        .collect();
    write_reports(&a.out, "eval", &rows)
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let variants = if a.variants.iter().any(|v| v == "all") {
        pipeline::all_variants()
    } else {
        a.variants.clone()
    };
    let base = a.model.config();
    let cfgs: Vec<ModelConfig> = variants
        .iter()
        .map(|v| pipeline::apply_variant(&base, v))
        .collect::<std::result::Result<_, PipelineError>>()
        .map_err(|e| usage(e.to_string()))?;
    let train = load_data(&a.data)?;
    let test = load_data(&a.test_data)?;
    prepare_out(&a.out, a.force, a)?;
    let mut rows = Vec::new();
    for (name, cfg) in variants.iter().zip(&cfgs) {
        let dir = a.out.join(name.replace(':', "_"));
        std::fs::create_dir_all(&dir)?;
        let mut log = std::fs::File::create(dir.join("train_log.tsv"))?;
        let ck = dir.join("best.ckpt");
        let meta = pipeline::checkpoint_meta(cfg, a.model.model_seed);
        let out = FitOutputs {
            log: Some(&mut log),
            checkpoint: Some((&ck, meta.clone())),
        };
        let (model, fit) = pipeline::train_model(cfg, a.model.model_seed, None, &train, &a.fit.config(), out)?;
        if fit.best_epoch.is_none() {
            Checkpoint::from_store(&fit.best, meta).save(&ck)?;
        }
        let meshes = pipeline::reconstruct_all(&model, &fit.best, &test, &a.extract.config())?;
        let reports = pipeline::evaluate_all(&meshes, &test, &a.score.settings())?;
        let mean = EvalReport::mean(&reports).context("empty test set")?;
        eprintln!("{name}: IoU {:.4}", mean.iou);
        rows.push((name.clone(), mean));
    }
    let table = pipeline::format_table(&rows);
    print!("{table}");
    std::fs::write(a.out.join("ablation.txt"), &table)?;
    let mut kv = String::new();
    for (label, r) in &rows {
        for line in r.key_values().lines() {
            kv.push_str(&format!("{label}.{line}\n"));
        }
    }
    std::fs::write(a.out.join("ablation_kv.txt"), kv)?;
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if let Some(out) = &a.out {
        prepare_out(out, a.force, a)?;
    }
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::ReluLeak => Fault::ReluBackwardLeak,
    });
    let (model, params, batch) = gradcheck::tiny_problem(a.seed)?;
    let rep = gradcheck::check_model(&model, &params, &batch, a.h, a.tolerance, fault)?;
    let mut text = String::new();
    for g in &rep.groups {
        text.push_str(&format!("{:<40} {:>6} {:.3e}\n", g.name, g.size, g.max_rel_err));
    }
    let verdict = if rep.passed() { "PASS" } else { "FAIL" };
    text.push_str(&format!("max_rel_err {:.3e} tolerance {:.1e} {verdict}\n", rep.max_rel_err(), rep.tolerance));
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out.join("gradcheck.txt"), &text)?;
    }
    if !rep.passed() {
        return Err(NumericFailure(format!("gradient check failed: max relative error {:.3e}", rep.max_rel_err())).into());
    }
    Ok(())
}

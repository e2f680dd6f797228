//! The `tsgb` command line. Every command computes all of its outputs in memory
//! and only then writes them, so a failing run leaves no partial artifacts.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tsgb_core::attribution::{run_attribution, AttributionRequest, AvgPoolPolicy, Rule, RuleSet};
use tsgb_core::eval::deletion::{deletion_report, DeletionConfig};
use tsgb_core::eval::loc::{loc_error, loc_error_search, LocConfig, THRESHOLD_GRID};
use tsgb_core::eval::pointing::{pointing_game, PointingConfig};
use tsgb_core::eval::sanity::{sanity_check, SanityMode};
use tsgb_core::eval::synthetic::{detector_model, generate, SyntheticSpec, NUM_CLASSES};
use tsgb_core::eval::{label_maps, Dataset, EvalReport};
use tsgb_core::forward::{run_forward, top_k};
use tsgb_core::model::ModelGraph;
use tsgb_core::saliency::{self, encode_pnm, ExportMode};
use tsgb_core::Tensor;

use crate::config::{PartialConfig, RunConfig, Target};
use crate::{dataset, nnsm, pnm, report};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Data = 3,
    Internal = 4,
}

#[derive(Debug)]
pub struct AppError {
    pub kind: ExitKind,
    pub message: String,
}

impl AppError {
    fn usage(m: impl fmt::Display) -> Self {
        AppError {
            kind: ExitKind::Usage,
            message: m.to_string(),
        }
    }

    fn data(m: impl fmt::Display) -> Self {
        AppError {
            kind: ExitKind::Data,
            message: m.to_string(),
        }
    }

    fn internal(m: impl fmt::Display) -> Self {
        AppError {
            kind: ExitKind::Internal,
            message: m.to_string(),
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<tsgb_core::Error> for AppError {
    fn from(e: tsgb_core::Error) -> Self {
        match e {
            tsgb_core::Error::ClassOutOfRange { .. } => AppError::usage(e),
            e => AppError::data(e),
        }
    }
}

type Result<T> = std::result::Result<T, AppError>;

#[derive(Debug, Parser)]
#[command(name = "tsgb", version, about = "Target-selective gradient saliency maps for CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write saliency maps and JSON sidecars for single images.
    Explain(ExplainArgs),
    /// Run evaluation protocols over a dataset directory.
    Eval(EvalArgs),
    /// Pointing Game accuracy for a list of alpha values.
    SweepAlpha(SweepArgs),
    /// Write the synthetic suite and its detector model.
    Synth(SynthArgs),
    /// Print a model's layers and output shapes.
    Inspect {
        model: PathBuf,
    },
}

fn parse_rule_set(s: &str) -> std::result::Result<RuleSet, String> {
    RuleSet::ALL
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| format!("expected one of tsgb, vanilla, guided, tsgb_fc_only, tsgb_conv_only; got {s:?}"))
}

fn parse_avg_pool(s: &str) -> std::result::Result<AvgPoolPolicy, String> {
    match s {
        "auto" => Ok(AvgPoolPolicy::Auto),
        "ratio" => Ok(AvgPoolPolicy::Ratio),
        "passthrough" => Ok(AvgPoolPolicy::Passthrough),
        _ => Err(format!("expected auto, ratio or passthrough; got {s:?}")),
    }
}

fn parse_export_mode(s: &str) -> std::result::Result<ExportMode, String> {
    match s {
        "grayscale" => Ok(ExportMode::Grayscale),
        "signed-diverging" => Ok(ExportMode::SignedDiverging),
        _ => Err(format!("expected grayscale or signed-diverging; got {s:?}")),
    }
}

/// Flags shared by every model-driven command.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON file with defaults; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Defaults to 0.8, or 0.9 for ResNet-like models.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long, value_parser = parse_rule_set)]
    pub rule_set: Option<RuleSet>,
    #[arg(long)]
    pub threshold_fraction: Option<f32>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub erase_baseline: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stop_layer: Option<u32>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            model: self.model.clone(),
            alpha: self.alpha,
            rule_set: self.rule_set,
            threshold_fraction: self.threshold_fraction,
            margin: self.margin,
            erase_baseline: self.erase_baseline,
            seed: self.seed,
            stop_layer: self.stop_layer,
            out: self.out.clone(),
            ..PartialConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    /// PGM or PPM images; repeat or separate with commas.
    #[arg(long, short, value_delimiter = ',')]
    pub input: Vec<PathBuf>,
    /// Class indices or `predicted`; repeat or separate with commas.
    #[arg(long, short, value_delimiter = ',')]
    pub target: Vec<Target>,
    #[arg(long, value_parser = parse_avg_pool)]
    pub avg_pool: Option<AvgPoolPolicy>,
    #[arg(long, value_parser = parse_export_mode)]
    pub export_mode: Option<ExportMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Metric {
    Pointing,
    Deletion,
    Loc,
    Sanity,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding `ground_truth.json` and the images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Metric::Pointing, Metric::Deletion, Metric::Loc])]
    pub metrics: Vec<Metric>,
    /// k for top-k localisation error.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub step_fraction: Option<f32>,
    /// Use the signed map's argmax in the Pointing Game.
    #[arg(long)]
    pub no_truncate: bool,
    /// Search the localisation threshold over 0.05..=0.5 instead of using one fraction.
    #[arg(long)]
    pub loc_search: bool,
    /// `all`, `cascading`, or `layers=ID,ID,...`.
    #[arg(long, default_value = "all")]
    pub sanity_mode: String,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to 0.5, 0.6, ..., 1.3.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f32>,
    #[arg(long)]
    pub no_truncate: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// What a successful command prints and writes.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub stderr: String,
    /// Output directory and files relative to it.
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

fn resolve(file_and_flags: PartialConfig, config: &Option<PathBuf>) -> Result<RunConfig> {
    let base = match config {
        Some(p) => PartialConfig::from_file(p).map_err(AppError::usage)?,
        None => PartialConfig::default(),
    };
    RunConfig::resolve(file_and_flags.over(base)).map_err(AppError::usage)
}

fn load_graph(cfg: &RunConfig) -> Result<ModelGraph> {
    let path = cfg.model.as_ref().ok_or_else(|| AppError::usage("--model is required"))?;
    nnsm::load_model(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

fn alpha_for(cfg: &RunConfig, g: &ModelGraph) -> f32 {
    cfg.alpha.unwrap_or_else(|| g.family.default_alpha())
}

fn check_stop_layer(cfg: &RunConfig, g: &ModelGraph) -> Result<()> {
    if let Some(id) = cfg.stop_layer {
        if g.position(id).is_none() {
            let ids: Vec<String> = g.layers.iter().map(|l| l.id.to_string()).collect();
            return Err(AppError::usage(format!(
                "stop layer {id} is not in the model; layer ids are {}",
                ids.join(", ")
            )));
        }
    }
    Ok(())
}

fn load_data(path: &Option<PathBuf>, g: &ModelGraph) -> Result<Dataset> {
    let path = path.as_ref().ok_or_else(|| AppError::usage("--data is required"))?;
    let (data, classes) = dataset::load_dataset(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    if classes != g.num_classes {
        return Err(AppError::data(format!(
            "dataset has {classes} classes but the model has {}",
            g.num_classes
        )));
    }
    if data.is_empty() {
        return Err(AppError::data("dataset is empty"));
    }
    for s in &data.samples {
        if s.image.shape() != g.input_shape {
            return Err(AppError::data(format!(
                "image {} is {}, the model expects {}",
                s.id,
                s.image.shape(),
                g.input_shape
            )));
        }
    }
    Ok(data)
}

#[derive(Serialize)]
struct AppliedRule {
    layer: u32,
    rule: Rule,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: String,
    map: String,
    model: &'a str,
    requested_target: String,
    target: usize,
    predicted: usize,
    alpha: f32,
    rule_set: RuleSet,
    avg_pool: AvgPoolPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_layer: Option<u32>,
    height: usize,
    width: usize,
    min: f32,
    max: f32,
    scores: &'a [f32],
    guarded_cells: usize,
    warnings: &'a [String],
    rules: Vec<AppliedRule>,
}

fn explain(args: &ExplainArgs) -> Result<Outcome> {
    let partial = PartialConfig {
        inputs: (!args.input.is_empty()).then(|| args.input.clone()),
        targets: (!args.target.is_empty()).then(|| args.target.clone()),
        avg_pool: args.avg_pool,
        export_mode: args.export_mode,
        ..args.common.partial()
    };
    let cfg = resolve(partial, &args.common.config)?;
    if cfg.inputs.is_empty() {
        return Err(AppError::usage("at least one --input is required"));
    }
    let g = load_graph(&cfg)?;
    check_stop_layer(&cfg, &g)?;
    let alpha = alpha_for(&cfg, &g);
    for t in &cfg.targets {
        if let Target::Class(c) = *t {
            if c >= g.num_classes {
                return Err(AppError::usage(format!(
                    "target {c} out of range: valid classes are 0..{}",
                    g.num_classes
                )));
            }
        }
    }
    let mut stems = BTreeSet::new();
    let mut images: Vec<(String, &Path, Tensor)> = Vec::with_capacity(cfg.inputs.len());
    for p in &cfg.inputs {
        let img = pnm::read_image(p).map_err(|e| AppError::data(format!("{}: {e}", p.display())))?;
        if img.shape() != g.input_shape {
            return Err(AppError::data(format!(
                "{} is {}, the model expects {}",
                p.display(),
                img.shape(),
                g.input_shape
            )));
        }
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        if !stems.insert(stem.clone()) {
            return Err(AppError::usage(format!("two inputs share the file name {stem:?}")));
        }
        images.push((stem, p, img));
    }

    let start = Instant::now();
    let ext = match cfg.export_mode {
        ExportMode::Grayscale => "pgm",
        ExportMode::SignedDiverging => "ppm",
    };
    let mut out = Outcome::default();
    for (stem, path, img) in &images {
        let trace = run_forward(&g, img)?;
        let predicted = top_k(&trace.scores, 1)?[0];
        let mut done = BTreeSet::new();
        for t in &cfg.targets {
            let target = match *t {
                Target::Class(c) => c,
                Target::Predicted => predicted,
            };
            if !done.insert(target) {
                continue;
            }
            let mut req = AttributionRequest::new(target, alpha, cfg.rule_set).with_avg_pool_policy(cfg.avg_pool);
            if let Some(id) = cfg.stop_layer {
                req = req.with_stop_layer(id);
            }
            let state = run_attribution(&g, &trace, &req)?;
            let map = match cfg.stop_layer {
                Some(id) => saliency::assemble_at(&g, &state, &trace, &req, id)?,
                None => saliency::assemble(&state, &trace, &req, &g.name)?,
            };
            if map.values().iter().any(|v| !v.is_finite()) {
                return Err(AppError::internal(format!(
                    "non-finite saliency for {} target {target}",
                    path.display()
                )));
            }
            let map_name = format!("{stem}_{target}.{ext}");
            let sidecar = Sidecar {
                image: path.display().to_string(),
                map: map_name.clone(),
                model: &g.name,
                requested_target: t.to_string(),
                target,
                predicted,
                alpha,
                rule_set: cfg.rule_set,
                avg_pool: cfg.avg_pool,
                stop_layer: cfg.stop_layer,
                height: map.height(),
                width: map.width(),
                min: map.min(),
                max: map.max(),
                scores: &trace.scores,
                guarded_cells: state.diagnostics.guarded_cells,
                warnings: &state.diagnostics.warnings,
                rules: state
                    .applied
                    .iter()
                    .map(|&(layer, rule)| AppliedRule { layer, rule })
                    .collect(),
            };
            let mut json = serde_json::to_vec_pretty(&sidecar).map_err(AppError::internal)?;
            json.push(b'\n');
            out.files.push((PathBuf::from(&map_name), encode_pnm(&map, cfg.export_mode)));
            out.files.push((PathBuf::from(format!("{stem}_{target}.json")), json));
            out.stdout.push_str(&format!(
                "{} target {target} (score {:.6}) -> {map_name}\n",
                path.display(),
                trace.scores[target]
            ));
            for w in &state.diagnostics.warnings {
                out.stderr.push_str(&format!("warning: {}: {w}\n", path.display()));
            }
        }
    }
    let maps = out.files.len() / 2;
    let secs = start.elapsed().as_secs_f64();
    out.stderr
        .push_str(&format!("{maps} map(s) in {secs:.3} s ({:.1} maps/s)\n", maps as f64 / secs.max(1e-9)));
    finish(out, &cfg.out)
}

fn parse_sanity_mode(s: &str) -> Result<SanityMode> {
    match s {
        "all" => Ok(SanityMode::AllAtOnce),
        "cascading" => Ok(SanityMode::Cascading),
        _ => {
            let list = s
                .strip_prefix("layers=")
                .ok_or_else(|| AppError::usage(format!("unknown sanity mode {s:?}")))?;
            list.split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.trim().parse().map_err(|_| AppError::usage(format!("bad layer id {p:?}"))))
                .collect::<Result<Vec<u32>>>()
                .map(SanityMode::Layers)
        }
    }
}

fn eval(args: &EvalArgs) -> Result<Outcome> {
    let partial = PartialConfig {
        data: args.data.clone(),
        k: args.k,
        step_fraction: args.step_fraction,
        truncate: args.no_truncate.then_some(false),
        ..args.common.partial()
    };
    let cfg = resolve(partial, &args.common.config)?;
    let mode = parse_sanity_mode(&args.sanity_mode)?;
    let metrics: BTreeSet<Metric> = args.metrics.iter().copied().collect();
    if metrics.is_empty() {
        return Err(AppError::usage("no metrics selected"));
    }
    let g = load_graph(&cfg)?;
    if let SanityMode::Layers(ids) = &mode {
        for &id in ids {
            if g.position(id).is_none() {
                return Err(AppError::usage(format!("sanity layer {id} is not in the model")));
            }
        }
    }
    let data = load_data(&cfg.data, &g)?;
    let alpha = alpha_for(&cfg, &g);

    let mut reports: Vec<EvalReport> = Vec::new();
    for m in &metrics {
        match m {
            Metric::Pointing => reports.push(pointing(&g, &data, alpha, &cfg)?),
            Metric::Deletion => {
                let dc = DeletionConfig {
                    step_fraction: cfg.step_fraction,
                    erase_baseline: cfg.erase_baseline,
                };
                reports.push(deletion_report(&g, &data, alpha, cfg.rule_set, &dc)?);
            }
            Metric::Loc => {
                let lc = LocConfig {
                    k: cfg.k,
                    alpha,
                    rule_set: cfg.rule_set,
                };
                reports.push(if args.loc_search {
                    loc_error_search(&g, &data, &THRESHOLD_GRID, &lc)?
                } else {
                    loc_error(&g, &data, cfg.threshold_fraction, &lc)?
                });
            }
            Metric::Sanity => {
                let stages = sanity_check(&g, &data, alpha, cfg.rule_set, &mode, cfg.seed)?;
                let staged = stages.len() > 1;
                for (i, s) in stages.into_iter().enumerate() {
                    for mut r in [s.truncated, s.absolute] {
                        if staged {
                            r.metric = format!("{}_stage{}", r.metric, i + 1);
                        }
                        reports.push(r);
                    }
                }
            }
        }
    }

    let mut out = Outcome::default();
    for r in &reports {
        if r.records.iter().any(|x| !x.value.is_finite()) {
            return Err(AppError::internal(format!("{} produced a non-finite record", r.metric)));
        }
        out.files.push((PathBuf::from(format!("{}.jsonl", r.metric)), report::to_jsonl(r)));
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    let table = report::summary_table(&refs);
    out.files.push((PathBuf::from("summary.json"), report::summary_json(&refs)));
    out.files.push((PathBuf::from("summary.txt"), table.clone().into_bytes()));
    out.stdout = table;
    finish(out, &cfg.out)
}

fn pointing(g: &ModelGraph, data: &Dataset, alpha: f32, cfg: &RunConfig) -> Result<EvalReport> {
    let maps = label_maps(g, data, alpha, cfg.rule_set)?;
    let pc = PointingConfig {
        margin: cfg.margin,
        truncate: cfg.truncate,
    };
    let mut rep = pointing_game(&maps, data, &pc)?;
    rep.config.alpha = Some(alpha);
    rep.config.rule_set = Some(cfg.rule_set);
    Ok(rep)
}

/// The default sweep, 0.5 to 1.3 in steps of 0.1.
pub fn default_alphas() -> Vec<f32> {
    (5..=13).map(|i| i as f32 / 10.0).collect()
}

#[derive(Serialize)]
struct SweepRow {
    alpha: f32,
    pointing_game: f64,
    std: f64,
    records: usize,
}

fn sweep(args: &SweepArgs) -> Result<Outcome> {
    let partial = PartialConfig {
        data: args.data.clone(),
        truncate: args.no_truncate.then_some(false),
        ..args.common.partial()
    };
    let cfg = resolve(partial, &args.common.config)?;
    let requested = if args.alphas.is_empty() {
        default_alphas()
    } else {
        args.alphas.clone()
    };
    let mut out = Outcome::default();
    let mut alphas: Vec<f32> = Vec::with_capacity(requested.len());
    for a in requested {
        if !(a > 0.0 && a.is_finite()) {
            return Err(AppError::usage(format!("alpha must be positive, got {a}")));
        }
        if alphas.iter().any(|b| b.to_bits() == a.to_bits()) {
            out.stderr.push_str(&format!("warning: duplicate alpha {a} ignored\n"));
        } else {
            alphas.push(a);
        }
    }
    let g = load_graph(&cfg)?;
    let data = load_data(&cfg.data, &g)?;

    let mut rows = Vec::with_capacity(alphas.len());
    let mut table = format!("{:>6}  {:>13}  {:>8}\n", "alpha", "pointing_game", "std");
    for &a in &alphas {
        let r = pointing(&g, &data, a, &cfg)?;
        table.push_str(&format!("{a:>6.2}  {:>13.4}  {:>8.4}\n", r.mean, r.std));
        rows.push(SweepRow {
            alpha: a,
            pointing_game: r.mean,
            std: r.std,
            records: r.records.len(),
        });
    }
    let mut json = serde_json::to_vec_pretty(&rows).map_err(AppError::internal)?;
    json.push(b'\n');
    out.files.push((PathBuf::from("sweep_alpha.json"), json));
    out.files.push((PathBuf::from("sweep_alpha.txt"), table.clone().into_bytes()));
    out.stdout = table;
    finish(out, &cfg.out)
}

fn synth(args: &SynthArgs) -> Result<Outcome> {
    if args.n == 0 {
        return Err(AppError::usage("--n must be positive"));
    }
    let spec = SyntheticSpec::default();
    let data = generate(&spec, args.n, args.seed);
    let model = detector_model(&spec);
    let mut out = Outcome::default();
    for (name, bytes) in dataset::encode_dataset(&data, NUM_CLASSES).map_err(AppError::internal)? {
        out.files.push((PathBuf::from(name), bytes));
    }
    out.files
        .push((PathBuf::from("detector.nnsm"), nnsm::to_bytes(&model).map_err(AppError::internal)?));
    out.stdout = format!("wrote {} images, {} and detector.nnsm\n", data.len(), dataset::INDEX);
    finish(out, &args.out)
}

fn inspect(path: &Path) -> Result<Outcome> {
    let g = nnsm::load_model(path).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    let shapes = g.infer_shapes()?;
    let mut s = format!(
        "{} ({}), input {}, {} classes\n",
        g.name,
        g.family.as_str(),
        g.input_shape,
        g.num_classes
    );
    for (l, shape) in g.layers.iter().zip(&shapes) {
        let ins: Vec<String> = l.inputs.iter().map(|i| i.to_string()).collect();
        s.push_str(&format!("{:>4}  {:<16} <- [{}]  {}\n", l.id, l.kind.tag(), ins.join(", "), shape));
    }
    Ok(Outcome {
        stdout: s,
        ..Outcome::default()
    })
}

/// Attaches the output directory to the collected files.
fn finish(mut out: Outcome, dir: &Path) -> Result<Outcome> {
    for (p, _) in &mut out.files {
        *p = dir.join(&*p);
    }
    Ok(out)
}

fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, bytes) in files {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| AppError::data(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(path, bytes).map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Runs a parsed command, computing everything before writing anything.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let out = match &cli.command {
        Command::Explain(a) => explain(a)?,
        Command::Eval(a) => eval(a)?,
        Command::SweepAlpha(a) => sweep(a)?,
        Command::Synth(a) => synth(a)?,
        Command::Inspect { model } => inspect(model)?,
    };
    write_all(&out.files)?;
    Ok(out)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = std::panic::catch_unwind(|| execute(&cli))
        .unwrap_or_else(|_| Err(AppError::internal("internal error (panic); this is a bug")));
    match result {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.stdout.as_bytes());
            let _ = std::io::stderr().write_all(out.stderr.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.kind as i32
        }
    }
}

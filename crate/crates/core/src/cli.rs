//! The `ua3d` command line: argument parsing, logging, thread pool setup and
//! one function per subcommand. Every run records itself in `run.json`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::alignment::sinkhorn::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::alignment::{sinkhorn, uniform_marginal};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_view_strategies, corrupt_views, embed_samples, gap_from_forwards, pca_2d, top1_accuracy, write_pca_csv,
    GapReport, ViewStrategy,
};
use crate::model::io::{load_checkpoint, load_knowledge, save_checkpoint, Checkpoint};
use crate::model::Variant;
use crate::numerics::ops::argmax;
use crate::numerics::Matrix;
use crate::pointcloud::{
    generate_benchmark, load_benchmark, load_pointset, normalize_unit_sphere, write_benchmark, Benchmark, HalfSpace,
    ShiftSpec,
};
use crate::projection::{project_all, Rig, DEFAULT_DISTANCE};
use crate::training::{prepare_samples, train, Sample, TrainConfig};

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(name = "ua3d", version, about = "Uncertainty-aware domain adaptation for point clouds")]
pub struct Cli {
    /// Worker threads (0 = all cores); outputs do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    /// Log level for the stderr log (off, error, warn, info, debug, trace)
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded source/target benchmark with a manifest
    Synth(SynthArgs),
    /// Render a point cloud into depth maps (PGM)
    Project(ProjectArgs),
    /// Train on a manifest; writes a checkpoint and the training report
    Train(TrainArgs),
    /// Accuracy, domain-gap metrics and optional ablations for a checkpoint
    Eval(EvalArgs),
    /// Surrogate generalization-bound terms for a checkpoint
    Bound(BoundArgs),
    /// Entropic optimal transport on a cost matrix in CSV
    Sinkhorn(SinkhornArgs),
    /// Per-view entropies and view selection for one point cloud, as CSV
    Inspect(InspectArgs),
    /// Re-run an invocation recorded in a run.json
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of classes (2 to 10)
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Samples per class in each domain
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Points per sample
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target rotation about the z axis, radians
    #[arg(long, default_value_t = ShiftSpec::standard().angle)]
    pub rotate: f64,
    /// Target jitter standard deviation
    #[arg(long, default_value_t = ShiftSpec::standard().jitter_sigma)]
    pub jitter: f64,
    /// Fraction of target points dropped
    #[arg(long, default_value_t = ShiftSpec::standard().dropout_ratio)]
    pub dropout: f64,
    /// Remove target points with x above this offset
    #[arg(long)]
    pub occlude: Option<f64>,
    /// Target equals source (ignores the shift flags)
    #[arg(long)]
    pub zero_shift: bool,
    /// Output directory
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

impl SynthArgs {
    fn shift(&self) -> ShiftSpec {
        if self.zero_shift {
            return ShiftSpec::identity();
        }
        ShiftSpec {
            angle: self.rotate,
            jitter_sigma: self.jitter,
            dropout_ratio: self.dropout,
            occlusion: self.occlude.map(|offset| HalfSpace {
                normal: [1.0, 0.0, 0.0],
                offset,
            }),
            ..ShiftSpec::identity()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProjectArgs {
    /// Point cloud (`x y z` per line); normalized to the unit sphere first
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub views: usize,
    #[arg(long, default_value_t = DEFAULT_DISTANCE)]
    pub distance: f64,
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Benchmark manifest written by `synth`
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file of training keys; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Knowledge embeddings (EMB1); per-class fallback vectors when absent
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub set: TrainOverrides,
}

/// One optional flag per training key. Unset flags fall back to the config
/// file, then to the built-in defaults shown in brackets.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// Labelled source samples per class [default: 16]
    #[arg(long)]
    pub shots: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 0.00001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient clipping threshold on the global norm, 0 disables [default: 0]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Weight of the auxiliary losses [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fraction of lowest-entropy views kept [default: 0.5]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Entropic regularization of the transport loss [default: 0.05]
    #[arg(long)]
    pub epsilon_ot: Option<f64>,
    /// Adapter sets to train: T, V or B [default: B]
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Depth views per cloud [default: 10]
    #[arg(long)]
    pub views: Option<usize>,
    /// Camera distance from the origin [default: 2]
    #[arg(long)]
    pub distance: Option<f64>,
    /// Adapter rank [default: 4]
    #[arg(long)]
    pub rank: Option<usize>,
    /// Initial softmax temperature [default: 0.07]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Multiplier on the orthogonality term [default: 1]
    #[arg(long)]
    pub w_ortho: Option<f64>,
    /// Multiplier on the prototype term [default: 1]
    #[arg(long)]
    pub w_proto: Option<f64>,
    /// Multiplier on the transport term [default: 1]
    #[arg(long)]
    pub w_ot: Option<f64>,
    /// Multiplier on the entropy term [default: 1]
    #[arg(long)]
    pub w_conf: Option<f64>,
    /// Record domain-gap metrics after every epoch [default: false]
    #[arg(long)]
    pub track_gap: Option<bool>,
    /// Prototype weight in the bound [default: 1]
    #[arg(long)]
    pub beta: Option<f64>,
}

fn parse_variant(s: &str) -> Result<Variant> {
    s.parse()
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set! {
            shots => shots_per_class,
            epochs => epochs,
            batch_size => batch_size,
            lr => lr,
            momentum => momentum,
            weight_decay => weight_decay,
            clip_norm => clip_norm,
            alpha => alpha,
            rho => rho,
            epsilon_ot => epsilon_ot,
            variant => variant,
            seed => seed,
            views => m_views,
            distance => camera_distance,
            rank => rank,
            tau => tau,
            w_ortho => loss_weights.ortho,
            w_proto => loss_weights.proto,
            w_ot => loss_weights.ot,
            w_conf => loss_weights.conf,
            track_gap => track_gap,
            beta => beta,
        }
    }
}

/// Training invocation with every key resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub manifest: PathBuf,
    pub knowledge: Option<PathBuf>,
    pub out: PathBuf,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Target accuracy under each view aggregation rule
    Views,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Entropic regularization for the bound's transport term
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    /// Write 2-D PCA coordinates of all cloud embeddings to this CSV
    #[arg(long)]
    pub export_pca: Option<PathBuf>,
    /// Blank this fraction of every target sample's views before evaluating
    #[arg(long, default_value_t = 0.0)]
    pub corrupt: f64,
    /// Seed for view corruption and the random-view strategy
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BoundArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SinkhornArgs {
    /// Cost matrix, one comma-separated row per line
    #[arg(long)]
    pub cost: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Two CSV rows: row marginal a, then column marginal b (uniform when absent)
    #[arg(long)]
    pub marginals: Option<PathBuf>,
    /// Directory for plan.csv
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    /// Point cloud (`x y z` per line)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Directory for run.json
    #[arg(short, long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// A run.json written by an earlier invocation
    pub run: PathBuf,
    /// Write outputs here instead of the recorded directory
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// A fully resolved invocation, as stored in `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "lowercase")]
pub enum Invocation {
    Synth(SynthArgs),
    Project(ProjectArgs),
    Train(TrainRun),
    Eval(EvalArgs),
    Bound(BoundArgs),
    Sinkhorn(SinkhornArgs),
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    #[serde(flatten)]
    pub invocation: Invocation,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn absolute_opt(p: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.as_deref().map(absolute).transpose()
}

fn config_from_file(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Invocation {
    fn resolve(cmd: Command) -> Result<Self> {
        Ok(match cmd {
            Command::Synth(mut a) => {
                a.out = absolute(&a.out)?;
                Invocation::Synth(a)
            }
            Command::Project(mut a) => {
                a.input = absolute(&a.input)?;
                a.out = absolute(&a.out)?;
                Invocation::Project(a)
            }
            Command::Train(a) => {
                let mut config = match &a.config {
                    Some(p) => config_from_file(p)?,
                    None => TrainConfig::default(),
                };
                a.set.apply(&mut config);
                config.validate()?;
                Invocation::Train(TrainRun {
                    manifest: absolute(&a.manifest)?,
                    knowledge: absolute_opt(&a.knowledge)?,
                    out: absolute(&a.out)?,
                    config,
                })
            }
            Command::Eval(mut a) => {
                a.manifest = absolute(&a.manifest)?;
                a.checkpoint = absolute(&a.checkpoint)?;
                a.export_pca = absolute_opt(&a.export_pca)?;
                a.out = absolute(&a.out)?;
                Invocation::Eval(a)
            }
            Command::Bound(mut a) => {
                a.manifest = absolute(&a.manifest)?;
                a.checkpoint = absolute(&a.checkpoint)?;
                a.out = absolute(&a.out)?;
                Invocation::Bound(a)
            }
            Command::Sinkhorn(mut a) => {
                a.cost = absolute(&a.cost)?;
                a.marginals = absolute_opt(&a.marginals)?;
                a.out = absolute(&a.out)?;
                Invocation::Sinkhorn(a)
            }
            Command::Inspect(mut a) => {
                a.input = absolute(&a.input)?;
                a.checkpoint = absolute(&a.checkpoint)?;
                a.out = absolute(&a.out)?;
                Invocation::Inspect(a)
            }
            Command::Replay(a) => {
                let text = std::fs::read_to_string(&a.run).map_err(|e| Error::io(&a.run, e))?;
                let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Json {
                    path: a.run.clone(),
                    source: e,
                })?;
                let mut inv = rec.invocation;
                if let Some(out) = &a.out {
                    *inv.out_mut() = absolute(out)?;
                }
                inv
            }
        })
    }

    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Invocation::Synth(a) => &mut a.out,
            Invocation::Project(a) => &mut a.out,
            Invocation::Train(a) => &mut a.out,
            Invocation::Eval(a) => &mut a.out,
            Invocation::Bound(a) => &mut a.out,
            Invocation::Sinkhorn(a) => &mut a.out,
            Invocation::Inspect(a) => &mut a.out,
        }
    }

    fn out(&self) -> &Path {
        match self {
            Invocation::Synth(a) => &a.out,
            Invocation::Project(a) => &a.out,
            Invocation::Train(a) => &a.out,
            Invocation::Eval(a) => &a.out,
            Invocation::Bound(a) => &a.out,
            Invocation::Sinkhorn(a) => &a.out,
            Invocation::Inspect(a) => &a.out,
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Synth(a) => Some(a.seed),
            Invocation::Train(a) => Some(a.config.seed),
            Invocation::Eval(a) => Some(a.seed),
            _ => None,
        }
    }

    fn execute(&self) -> Result<()> {
        match self {
            Invocation::Synth(a) => run_synth(a),
            Invocation::Project(a) => run_project(a),
            Invocation::Train(a) => run_train(a),
            Invocation::Eval(a) => run_eval(a),
            Invocation::Bound(a) => run_bound(a),
            Invocation::Sinkhorn(a) => run_sinkhorn(a),
            Invocation::Inspect(a) => run_inspect(a),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let bench = generate_benchmark(a.classes, a.shots, a.points, &a.shift(), a.seed)?;
    let manifest = write_benchmark(&a.out, &bench)?;
    info!(
        "wrote {} source and {} target samples, manifest {}",
        bench.source.len(),
        bench.target.len(),
        manifest.display()
    );
    Ok(())
}

fn run_project(a: &ProjectArgs) -> Result<()> {
    let ps = normalize_unit_sphere(&load_pointset(&a.input)?);
    let rig = Rig {
        views: a.views,
        distance: a.distance,
    };
    let vs = project_all(&ps, &rig.cameras()?)?;
    for (i, dm) in vs.views.iter().enumerate() {
        dm.save_pgm(a.out.join(format!("view_{i:02}.pgm")))?;
    }
    info!("wrote {} depth maps", vs.len());
    Ok(())
}

fn run_train(a: &TrainRun) -> Result<()> {
    let bench = load_benchmark(&a.manifest)?;
    let d = a.config.model_config(bench.classes.len()).d;
    let knowledge = load_knowledge(a.knowledge.as_deref(), &bench.classes, d)?;
    let (state, mut report) = train(&bench.source, &bench.target, &bench.classes, knowledge, &a.config)?;
    let rig = Rig {
        views: a.config.m_views,
        distance: a.config.camera_distance,
    };
    save_checkpoint(a.out.join(CHECKPOINT_FILE), &state, &bench.classes, Some(&rig))?;
    report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    report.write(&a.out.join("report.jsonl"), &a.out.join("summary.json"))?;
    if let Some(last) = report.final_epoch() {
        info!("final epoch: loss {:.4}, source accuracy {:.3}", last.total, last.source_accuracy);
    }
    Ok(())
}

/// Benchmark samples projected with the checkpoint's cameras.
struct Loaded {
    ck: Checkpoint,
    bench: Benchmark,
    src: Vec<Sample>,
    src_labels: Vec<usize>,
    tgt: Vec<Sample>,
}

fn load_for_eval(manifest: &Path, checkpoint: &Path) -> Result<Loaded> {
    let ck = load_checkpoint(checkpoint)?;
    let bench = load_benchmark(manifest)?;
    if bench.classes != ck.classes {
        return Err(Error::Dataset(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            ck.classes, bench.classes
        )));
    }
    let cams = checkpoint_rig(&ck).cameras()?;
    let src = prepare_samples(&bench.source, &cams, &ck.state.config)?;
    let tgt = prepare_samples(bench.target.clouds(), &cams, &ck.state.config)?;
    let src_labels = bench.source.iter().map(|p| p.label.expect("source samples are labelled")).collect();
    Ok(Loaded {
        ck,
        bench,
        src,
        src_labels,
        tgt,
    })
}

fn checkpoint_rig(ck: &Checkpoint) -> Rig {
    ck.rig.unwrap_or_else(|| {
        let d = TrainConfig::default();
        warn!("checkpoint has no camera rig; using {} views at distance {}", d.m_views, d.camera_distance);
        Rig {
            views: d.m_views,
            distance: d.camera_distance,
        }
    })
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    source_accuracy: f64,
    /// Absent when the manifest has no target ground truth.
    target_accuracy: Option<f64>,
    corrupted_fraction: f64,
    gap: GapReport,
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let l = load_for_eval(&a.manifest, &a.checkpoint)?;
    let state = &l.ck.state;
    let tgt = if a.corrupt > 0.0 {
        corrupt_views(&l.tgt, a.corrupt, a.seed)
    } else {
        l.tgt.clone()
    };
    let fs = embed_samples(state, &l.src, a.rho)?;
    let ft = embed_samples(state, &tgt, a.rho)?;
    let gap = gap_from_forwards(&fs, &l.src_labels, &ft, state.config.classes, a.beta, a.epsilon)?;
    let source_accuracy = top1_accuracy(&fs.iter().map(|f| argmax(&f.probs)).collect::<Vec<_>>(), &l.src_labels)?;

    // Ground truth for evaluation only.
    let truth: Option<Vec<usize>> = l.bench.target.hidden.reveal().iter().copied().collect();
    let target_accuracy = match &truth {
        Some(t) => Some(top1_accuracy(&ft.iter().map(|f| argmax(&f.probs)).collect::<Vec<_>>(), t)?),
        None => {
            warn!("manifest has no target labels; target accuracy not computed");
            None
        }
    };
    write_json(&a.out.join("gap.json"), &gap)?;
    write_json(
        &a.out.join("eval.json"),
        &EvalSummary {
            source_accuracy,
            target_accuracy,
            corrupted_fraction: a.corrupt,
            gap,
        },
    )?;
    info!("source accuracy {source_accuracy:.3}, target accuracy {target_accuracy:?}");

    if a.ablation == Some(Ablation::Views) {
        let t = truth.as_ref().ok_or_else(|| Error::Dataset("view ablation needs target labels".into()))?;
        let rows = ablation_view_strategies(state, &tgt, t, a.rho, a.seed)?;
        let mut csv = String::new();
        let names: Vec<String> = rows.iter().map(|(s, _)| s.to_string()).collect();
        let accs: Vec<String> = rows.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(csv, "{}\n{}", names.join(","), accs.join(",")).expect("string write");
        write_text(&a.out.join("ablation_views.csv"), &csv)?;
        let eg = rows.iter().find(|r| r.0 == ViewStrategy::EntropyGuided).map(|r| r.1);
        info!("view ablation written; entropy-guided accuracy {eg:?}");
    }

    if let Some(path) = &a.export_pca {
        let emb: Vec<Vec<f64>> = fs.iter().chain(&ft).map(|f| f.embedding.clone()).collect();
        let xy = pca_2d(&emb)?;
        let tl = l.bench.target.hidden.reveal();
        let rows: Vec<(&str, Option<usize>, [f64; 2])> = xy
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i < fs.len() {
                    ("source", Some(l.src_labels[i]), *p)
                } else {
                    ("target", tl[i - fs.len()], *p)
                }
            })
            .collect();
        write_pca_csv(path, &rows)?;
    }
    Ok(())
}

fn run_bound(a: &BoundArgs) -> Result<()> {
    let l = load_for_eval(&a.manifest, &a.checkpoint)?;
    let fs = embed_samples(&l.ck.state, &l.src, a.rho)?;
    let ft = embed_samples(&l.ck.state, &l.tgt, a.rho)?;
    let gap = gap_from_forwards(&fs, &l.src_labels, &ft, l.ck.state.config.classes, a.beta, a.epsilon)?;
    write_json(&a.out.join("bound.json"), &gap)?;
    info!(
        "bound {:.4} = risk {:.4} + ot/2 {:.4} + beta*proto {:.4}",
        gap.bound_total,
        gap.bound_source_risk,
        0.5 * gap.bound_ot_term,
        gap.beta * gap.bound_proto_term
    );
    Ok(())
}

/// Rows of comma-separated reals; blank lines are skipped.
pub fn parse_csv_rows(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("not a finite number: {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_rows(&text, path)
}

pub fn format_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct SinkhornSummary {
    cost: f64,
    entropic_objective: f64,
    entropy: f64,
    iterations: usize,
    converged: bool,
    marginal_error: f64,
}

fn run_sinkhorn(a: &SinkhornArgs) -> Result<()> {
    let rows = read_csv(&a.cost)?;
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: empty cost matrix", a.cost.display())));
    }
    let c = Matrix::from_rows(&rows)?;
    let (ra, rb) = match &a.marginals {
        Some(p) => {
            let m = read_csv(p)?;
            if m.len() != 2 {
                return Err(Error::Input(format!("{}: expected 2 rows, found {}", p.display(), m.len())));
            }
            (m[0].clone(), m[1].clone())
        }
        None => (uniform_marginal(c.rows()), uniform_marginal(c.cols())),
    };
    let tp = sinkhorn(&c, a.epsilon, &ra, &rb, a.tol, a.max_iter)?;
    if !tp.converged {
        warn!("no convergence after {} iterations (marginal error {:e})", tp.iterations, tp.marginal_error);
    }
    write_text(&a.out.join("plan.csv"), &format_csv(&tp.plan))?;
    let summary = SinkhornSummary {
        cost: tp.cost,
        entropic_objective: tp.entropic_objective,
        entropy: tp.entropy,
        iterations: tp.iterations,
        converged: tp.converged,
        marginal_error: tp.marginal_error,
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string(&summary).expect("summary serializes"))
        .map_err(|e| Error::io("<stdout>", e))
}

fn run_inspect(a: &InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ps = normalize_unit_sphere(&load_pointset(&a.input)?);
    let cams = checkpoint_rig(&ck).cameras()?;
    let sample = Sample::new(&ps, &cams, &ck.state.config)?;
    let f = embed_samples(&ck.state, std::slice::from_ref(&sample), a.rho)?.remove(0);
    let mut csv = String::from("view,entropy,selected,predicted\n");
    for (m, (h, q)) in f.entropies.iter().zip(&f.view_probs).enumerate() {
        let sel = f.selected.contains(&m);
        writeln!(csv, "{m},{h},{sel},{}", ck.classes[argmax(q)]).expect("string write");
    }
    info!("aggregated prediction: {}", ck.classes[argmax(&f.probs)]);
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn init_logging(level: log::LevelFilter) {
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, rec| {
            writeln!(
                buf,
                "{} {} {} {}",
                rec.level(),
                buf.timestamp_millis(),
                rec.module_path().unwrap_or("-"),
                rec.args()
            )
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Resolves, records and executes one invocation.
pub fn execute(cmd: Command, threads: usize) -> Result<()> {
    let inv = Invocation::resolve(cmd)?;
    create_dir(inv.out())?;
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: inv.seed(),
        threads,
        invocation: inv,
    };
    write_json(&record.invocation.out().join(RUN_FILE), &record)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| record.invocation.execute())
}

/// Entry point for the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.log_level);
    match execute(cli.command, cli.threads) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

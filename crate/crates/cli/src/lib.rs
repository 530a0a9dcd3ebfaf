//! `latsim` command-line driver.
//!
//! Session commands read and write `<session>/session.lss`, where `<session>`
//! comes from `--session` or the `LATSIM_SESSION` environment variable.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | I/O or internal error |
//! | 2 | usage error (bad flags, no session directory) |
//! | 3 | bundle or session file is malformed, corrupt or of another version |
//! | 4 | unknown object or cluster id |
//! | 5 | session not ready for the command, or a conflicting state |
//! | 6 | invalid parameters |
//! | 7 | cluster weights cannot be computed |
//! | 8 | numeric failure (non-convergence, training divergence) |

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use latsim_core::extraction::{ExtractOptions, ExtractionMode, LayerGroup, RegionReduce};
use latsim_core::sparse::{train_toy, SparsityConfig, ToyDataset, ToyNet, TrainOptions};
use latsim_store::session::session_file;
use latsim_store::synth::{synth_bundle, SynthOptions};
use latsim_store::{
    ClusterOp, MembershipKind, QueryRequest, QueryResponse, ReportGrouping, Session, StoreError, WeightMethod, WeightMode,
};

pub const SESSION_ENV: &str = "LATSIM_SESSION";

#[derive(Debug, Parser)]
#[command(name = "latsim", version, about = "Activation-magnitude similarity search")]
pub struct Cli {
    /// Session directory.
    #[arg(long, global = true, env = SESSION_ENV)]
    pub session: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a feature bundle and start a session on it.
    Ingest {
        bundle: PathBuf,
        /// Replace an existing session.
        #[arg(long)]
        force: bool,
    },
    /// Build the activation matrix.
    Extract {
        #[arg(long, value_enum, default_value_t = ModeArg::Masked)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = ReduceArg::Mask)]
        reduce: ReduceArg,
    },
    /// Keep the features carrying a share of the activation energy.
    Prune {
        #[arg(long, default_value_t = 0.99)]
        variance: f64,
    },
    /// Rank objects against one query object.
    Query {
        #[arg(long)]
        id: u64,
        #[arg(long, value_enum, default_value_t = MfArg::Gaussian)]
        mf: MfArg,
        #[command(flatten)]
        opts: QueryArgs,
    },
    /// Rank objects against a query set.
    QueryMulti {
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        #[arg(long, value_enum, default_value_t = MfArg::Trapezoid)]
        mf: MfArg,
        #[command(flatten)]
        opts: QueryArgs,
    },
    /// Feature weights.
    Weights {
        #[command(subcommand)]
        command: WeightsCommand,
    },
    /// Reports over the current session.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// Curate object clusters.
    Cluster {
        #[command(subcommand)]
        command: ClusterCommand,
    },
    /// Show the session state.
    Status,
    /// Train the toy network with the channel-sparsity objective and print its history as CSV.
    SparsityDemo(SparsityArgs),
    /// Serve the session over HTTP.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
    /// Write a synthetic bundle with planted clusters.
    SynthBundle {
        #[arg(long)]
        objects: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Masked,
    FullMap,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReduceArg {
    /// Mean over mask-positive pixels.
    Mask,
    /// Mean over the whole bounding box.
    Box,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MfArg {
    Gaussian,
    #[value(alias = "trapezoidal")]
    Trapezoid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightsArg {
    Uniform,
    #[value(alias = "cluster-diff")]
    Cluster,
    Svd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GroupArg {
    Encoder,
    Bottleneck,
    Decoder,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = WeightsArg::Uniform)]
    weights: WeightsArg,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Score only features from one layer group.
    #[arg(long, value_enum)]
    layer_group: Option<GroupArg>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Also write the ranking as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum WeightsCommand {
    Recompute {
        #[arg(long, value_enum, default_value_t = MethodArg::Eq5)]
        method: MethodArg,
    },
    Show,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    /// Cluster mean differences.
    Eq5,
    /// Leading singular vector loadings.
    Svd,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Share of cluster mean differences per layer or layer group.
    MagnitudeChange {
        #[arg(long, value_enum, default_value_t = ByArg::Group)]
        by: ByArg,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ByArg {
    Layer,
    Group,
}

#[derive(Debug, Subcommand)]
pub enum ClusterCommand {
    List,
    Add { name: String },
    Remove { name: String },
    Rename { from: String, to: String },
    Assign {
        name: String,
        #[arg(required = true)]
        ids: Vec<u64>,
    },
    Unassign {
        name: String,
        #[arg(required = true)]
        ids: Vec<u64>,
    },
    /// Minimum cluster size for weights and the empty-cluster policy.
    Policy {
        #[arg(long)]
        min_size: Option<usize>,
        #[arg(long)]
        keep_empty: Option<bool>,
    },
}

#[derive(Debug, Args)]
pub struct SparsityArgs {
    /// Target ratio of active channels.
    #[arg(long, conflicts_with = "target_sparsity", required_unless_present = "target_sparsity")]
    beta: Option<f64>,
    /// Target ratio of inactive channels; sets beta to 1 minus this value.
    #[arg(long)]
    target_sparsity: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    images: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 0.9)]
    noise: f64,
    /// Seed for the toy images.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Seed for the network initialization.
    #[arg(long, default_value_t = 7)]
    net_seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Core(#[from] latsim_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io { .. } => 1,
            Self::Usage(_) => 2,
            Self::Store(e) => match e {
                StoreError::Io { .. } => 1,
                StoreError::Manifest(_)
                | StoreError::BundleFormat(_)
                | StoreError::Version { .. }
                | StoreError::Integrity(_) => 3,
                StoreError::NotFound(_) => 4,
                StoreError::Stage(_) | StoreError::Conflict(_) => 5,
                StoreError::Invalid(_) => 6,
                StoreError::Core(c) => core_code(c),
            },
            Self::Core(c) => core_code(c),
        }
    }
}

fn core_code(e: &latsim_core::Error) -> u8 {
    use latsim_core::Error as C;
    match e {
        C::Ingestion(_) | C::BundleFormat(_) | C::EmptyBundle | C::EmptyRegion | C::Bounds(_) => 3,
        C::Query(_) => 4,
        C::Shape(_) | C::Config(_) | C::ContractViolation(_) => 6,
        C::InsufficientClusters(_) | C::ClusterTooSmall { .. } | C::DegenerateWeights(_) => 7,
        C::Numeric(_) | C::Training { .. } => 8,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn session_dir(cli_session: &Option<PathBuf>) -> Result<&Path> {
    cli_session
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("no session directory; pass --session or set {SESSION_ENV}")))
}

fn load(dir: &Path) -> Result<Session> {
    Ok(Session::load(session_file(dir))?)
}

fn save(dir: &Path, s: &Session) -> Result<()> {
    Ok(s.save(session_file(dir))?)
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::Io {
        context: "writing output".into(),
        source: e,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::SynthBundle {
            objects,
            seed,
            out: dir,
            clusters,
        } => {
            let mut opts = SynthOptions::new(objects, seed);
            opts.clusters = clusters;
            let b = synth_bundle(&dir, &opts)?;
            writeln!(out, "wrote {} objects to {}", b.object_ids().len(), dir.display()).map_err(out_err)
        }
        Command::SparsityDemo(args) => sparsity_demo(args, out),
        Command::Ingest { bundle, force } => {
            let dir = session_dir(&cli.session)?;
            let file = session_file(dir);
            if file.exists() && !force {
                return Err(CliError::Store(StoreError::Conflict(format!(
                    "session exists at {}; pass --force to replace it",
                    file.display()
                ))));
            }
            let s = Session::ingest(&bundle)?;
            fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
            save(dir, &s)?;
            let m = s.manifest();
            writeln!(
                out,
                "ingested {} objects, {} layers, {} channels",
                m.objects.len(),
                m.layers.len(),
                m.layers.iter().map(|l| l.channels).sum::<usize>()
            )
            .map_err(out_err)
        }
        Command::Extract { mode, reduce } => {
            let dir = session_dir(&cli.session)?;
            let mut s = load(dir)?;
            let opts = ExtractOptions {
                mode: match mode {
                    ModeArg::Masked => ExtractionMode::Masked,
                    ModeArg::FullMap => ExtractionMode::FullMap,
                },
                reduce: match reduce {
                    ReduceArg::Mask => RegionReduce::MaskPositive,
                    ReduceArg::Box => RegionReduce::BoundingBox,
                },
            };
            s.extract(opts)?;
            save(dir, &s)?;
            let (r, c) = s.activation_matrix().expect("just extracted").shape();
            writeln!(out, "activation matrix {r} x {c}").map_err(out_err)
        }
        Command::Prune { variance } => {
            let dir = session_dir(&cli.session)?;
            let mut s = load(dir)?;
            let width = s.activation_matrix().map_or(0, |m| m.cols());
            let p = s.prune(variance)?.clone();
            save(dir, &s)?;
            writeln!(
                out,
                "retained {} of {} features, {:.6} of energy",
                p.retained.len(),
                width,
                p.variance_retained
            )
            .map_err(out_err)
        }
        Command::Query { id, mf, opts } => {
            let s = load(session_dir(&cli.session)?)?;
            query(&s, mf, vec![id], opts, out)
        }
        Command::QueryMulti { ids, mf, opts } => {
            let s = load(session_dir(&cli.session)?)?;
            query(&s, mf, ids, opts, out)
        }
        Command::Weights { command } => {
            let dir = session_dir(&cli.session)?;
            let mut s = load(dir)?;
            match command {
                WeightsCommand::Recompute { method } => {
                    let method = match method {
                        MethodArg::Eq5 => WeightMethod::Eq5,
                        MethodArg::Svd => WeightMethod::Svd,
                    };
                    let w = s.recompute_weights_or_uniform(method)?.clone();
                    save(dir, &s)?;
                    if let Some(msg) = &w.warning {
                        eprintln!("warning: {msg}");
                    }
                    writeln!(
                        out,
                        "weights {} at revision {} over {} features",
                        w.vector.provenance().as_str(),
                        w.revision,
                        w.vector.len()
                    )
                    .map_err(out_err)
                }
                WeightsCommand::Show => {
                    let w = s
                        .weights()
                        .ok_or_else(|| StoreError::Stage("no weights; run prune first".into()))?;
                    let p = s.pruning().expect("weights imply pruning");
                    writeln!(out, "feature,weight").map_err(out_err)?;
                    for (&j, v) in p.retained.iter().zip(w.vector.as_slice()) {
                        writeln!(out, "{j},{v:.9}").map_err(out_err)?;
                    }
                    Ok(())
                }
            }
        }
        Command::Report {
            command: ReportCommand::MagnitudeChange { by, format },
        } => {
            let s = load(session_dir(&cli.session)?)?;
            let grouping = match by {
                ByArg::Layer => ReportGrouping::Layer,
                ByArg::Group => ReportGrouping::Group,
            };
            let rep = s.magnitude_report(grouping)?;
            match format {
                Format::Json => {
                    writeln!(out, "{}", serde_json::to_string_pretty(&rep).expect("report serializes")).map_err(out_err)
                }
                Format::Csv => {
                    writeln!(out, "tag,features,raw_sum,percent").map_err(out_err)?;
                    for g in &rep.groups {
                        writeln!(out, "{},{},{:.9},{:.6}", g.tag, g.features, g.raw_sum, g.percent).map_err(out_err)?;
                    }
                    Ok(())
                }
                Format::Table => {
                    writeln!(out, "{:<16} {:>8} {:>14} {:>9}", "tag", "features", "raw_sum", "percent").map_err(out_err)?;
                    for g in &rep.groups {
                        writeln!(out, "{:<16} {:>8} {:>14.6} {:>8.2}%", g.tag, g.features, g.raw_sum, g.percent)
                            .map_err(out_err)?;
                    }
                    writeln!(out, "\nhistogram of per-feature sums / max").map_err(out_err)?;
                    let h = &rep.histogram;
                    for (k, (f, c)) in h.frequency.iter().zip(&h.cumulative).enumerate() {
                        writeln!(out, "[{:.1}, {:.1}) {:>6} {:>6}", h.edges[k], h.edges[k + 1], f, c).map_err(out_err)?;
                    }
                    Ok(())
                }
            }
        }
        Command::Cluster { command } => {
            let dir = session_dir(&cli.session)?;
            let mut s = load(dir)?;
            let op = match command {
                ClusterCommand::List => {
                    for c in s.cluster_views() {
                        let ids: Vec<String> = c.members.iter().map(u64::to_string).collect();
                        writeln!(out, "{}\t{}\t{}", c.name, c.members.len(), ids.join(",")).map_err(out_err)?;
                    }
                    return Ok(());
                }
                ClusterCommand::Policy { min_size, keep_empty } => {
                    let cur = s.clusters();
                    let (m, k) = (min_size.unwrap_or(cur.min_size), keep_empty.unwrap_or(cur.keep_empty));
                    s.set_cluster_policy(m, k);
                    save(dir, &s)?;
                    return writeln!(out, "min_size {} keep_empty {}", s.clusters().min_size, k).map_err(out_err);
                }
                ClusterCommand::Add { name } => ClusterOp::Add { name },
                ClusterCommand::Remove { name } => ClusterOp::Remove { name },
                ClusterCommand::Rename { from, to } => ClusterOp::Rename { from, to },
                ClusterCommand::Assign { name, ids } => ClusterOp::Assign { name, objects: ids },
                ClusterCommand::Unassign { name, ids } => ClusterOp::Unassign { name, objects: ids },
            };
            let rev = s.apply_cluster_op(&op)?;
            save(dir, &s)?;
            writeln!(out, "cluster revision {rev}").map_err(out_err)
        }
        Command::Status => {
            let s = load(session_dir(&cli.session)?)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&s.status()).expect("status serializes")).map_err(out_err)
        }
        Command::Serve { port, host } => {
            let dir = session_dir(&cli.session)?;
            let s = load(dir)?;
            let state = latsim_service::AppState::new(Some(s), Some(session_file(dir)));
            let rt = tokio::runtime::Runtime::new().map_err(CliError::io("starting runtime"))?;
            rt.block_on(latsim_service::serve(state, SocketAddr::new(host, port)))
                .map_err(CliError::io("serving"))
        }
    }
}

/// The request the `query`/`query-multi` flags describe.
pub fn build_request(mf: MfArg, ids: Vec<u64>, opts: &QueryArgs) -> QueryRequest {
    QueryRequest {
        membership: match mf {
            MfArg::Gaussian => MembershipKind::Gaussian,
            MfArg::Trapezoid => MembershipKind::Trapezoidal,
        },
        tau: opts.tau,
        query_ids: ids,
        weights: match opts.weights {
            WeightsArg::Uniform => WeightMode::Uniform,
            WeightsArg::Cluster => WeightMode::ClusterDiff,
            WeightsArg::Svd => WeightMode::Svd,
        },
        top_k: opts.top_k,
        layer_group: opts.layer_group.map(|g| match g {
            GroupArg::Encoder => LayerGroup::Encoder,
            GroupArg::Bottleneck => LayerGroup::Bottleneck,
            GroupArg::Decoder => LayerGroup::Decoder,
        }),
    }
}

fn query(s: &Session, mf: MfArg, ids: Vec<u64>, opts: QueryArgs, out: &mut dyn Write) -> Result<()> {
    let req = build_request(mf, ids, &opts);
    let resp = s.query(&req)?;
    if let Some(path) = &opts.csv {
        fs::write(path, resp.to_csv()).map_err(CliError::io(format!("writing {}", path.display())))?;
    }
    if let Some(w) = &resp.warning {
        eprintln!("warning: {w}");
    }
    if resp.stale {
        eprintln!("warning: cluster weights predate the latest cluster edit");
    }
    match opts.format {
        Format::Csv => write!(out, "{}", resp.to_csv()),
        Format::Json => writeln!(out, "{}", resp.to_json()),
        Format::Table => write!(out, "{}", table(&resp)),
    }
    .map_err(out_err)
}

fn table(resp: &QueryResponse) -> String {
    let mut s = format!("{:>5}  {:>12}  {:>11}\n", "rank", "object_id", "score");
    for r in &resp.results {
        s.push_str(&format!("{:>5}  {:>12}  {:>11.9}\n", r.rank, r.object_id, r.score));
    }
    s.push_str(&format!(
        "weights: {}{}, features: {}\n",
        resp.weights.as_str(),
        if resp.stale { " (stale)" } else { "" },
        resp.features
    ));
    s
}

fn sparsity_demo(a: SparsityArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match (a.beta, a.target_sparsity) {
        (Some(beta), _) => SparsityConfig {
            beta,
            alpha: a.alpha,
            lambda: a.lambda,
        },
        (None, Some(t)) => SparsityConfig::from_target_sparsity(t, a.alpha, a.lambda),
        (None, None) => return Err(CliError::Usage("pass --beta or --target-sparsity".into())),
    };
    let data = ToyDataset::<f64>::blobs(a.images, a.size, a.noise, a.seed);
    let net = ToyNet::new(1, a.hidden, a.net_seed);
    let opts = TrainOptions {
        epochs: a.epochs,
        learning_rate: a.lr,
    };
    let (_, history) = train_toy(&data, net, &cfg, opts)?;
    let csv = history.to_csv();
    match &a.out {
        Some(p) => fs::write(p, &csv).map_err(CliError::io(format!("writing {}", p.display())))?,
        None => write!(out, "{csv}").map_err(out_err)?,
    }
    if let (Some(f), Some(l)) = (history.first(), history.last()) {
        eprintln!(
            "epochs {}: L_task {:.6} -> {:.6}, R_sp0 {:.4} -> {:.4}",
            history.epochs.len(),
            f.task_loss,
            l.task_loss,
            f.r_sp0,
            l.r_sp0
        );
    }
    Ok(())
}

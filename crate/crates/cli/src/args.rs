use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geodiag::controls::{ControlConfig, FeatureShuffleMode, RewireWeights};
use geodiag::{AnalysisConfig, Method, Solver};

#[derive(Debug, Parser)]
#[command(name = "geodiag", version, about = "Label-free geometry diagnostics for model checkpoints")]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Treat partial failures as fatal (exit code 2).
    #[arg(long, global = true)]
    pub strict: bool,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute per-checkpoint diagnostics for every entry of a run manifest.
    Analyze(AnalyzeArgs),
    /// Rank checkpoints and report the selection of each criterion.
    Rank(RankArgs),
    /// Rank-correlate every metric with accuracy.
    Correlate(CorrelateArgs),
    /// Re-run tau and curvature correlations under structure-breaking controls.
    Controls(ControlsArgs),
    /// Generate a synthetic run with increasing class coherence.
    Synth(SynthArgs),
    /// Write x, y, colour triples for scatter plots.
    PlotData(PlotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SolverArg {
    Exact,
    Sinkhorn,
}

/// Knobs shared by `analyze` and `controls`.
#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Neighbours per node of the mutual k-NN graph.
    #[arg(long, default_value_t = geodiag::graph::DEFAULT_K)]
    pub k: usize,

    /// Samples kept per class.
    #[arg(long = "subsample", default_value_t = geodiag::ingest::DEFAULT_N_PER_CLASS)]
    pub n_per_class: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// PCA-whiten after l2 normalization.
    #[arg(long, overrides_with = "no_whiten")]
    pub whiten: bool,

    #[arg(long = "no-whiten", overrides_with = "whiten")]
    pub no_whiten: bool,

    #[arg(long)]
    pub whiten_dim: Option<usize>,

    /// Entropic regularization; default 0.01 x median positive cost per edge.
    #[arg(long)]
    pub sinkhorn_eps: Option<f64>,

    #[arg(long, value_enum, default_value_t = SolverArg::Sinkhorn)]
    pub solver: SolverArg,

    /// Heat-trace times, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = geodiag::spectral::DEFAULT_HEAT_TIMES)]
    pub heat_ts: Vec<f64>,

    /// Points per class used for H1.
    #[arg(long, default_value_t = geodiag::topology::DEFAULT_H1_POINT_BUDGET)]
    pub h1_budget: usize,

    /// PCA dimension applied before H1.
    #[arg(long)]
    pub h1_dim: Option<usize>,

    /// Skip persistent homology.
    #[arg(long)]
    pub no_topology: bool,

    #[arg(long)]
    pub layer_tag: Option<String>,

    /// Keep Laplacian eigenvalues in the report.
    #[arg(long)]
    pub keep_eigenvalues: bool,
}

impl AnalysisArgs {
    pub fn config(&self) -> AnalysisConfig {
        let mut cfg = AnalysisConfig {
            k: self.k,
            n_per_class: self.n_per_class,
            seed: self.seed,
            whiten: self.whiten && !self.no_whiten,
            whiten_dim: self.whiten_dim,
            heat_times: self.heat_ts.clone(),
            layer_tag: self.layer_tag.clone(),
            keep_eigenvalues: self.keep_eigenvalues,
            ..Default::default()
        };
        cfg.curvature.sinkhorn_eps = self.sinkhorn_eps;
        cfg.curvature.solver = match self.solver {
            SolverArg::Exact => Solver::Exact,
            SolverArg::Sinkhorn => Solver::Sinkhorn,
        };
        cfg.topology = if self.no_topology {
            None
        } else {
            cfg.topology.map(|mut t| {
                t.h1_point_budget = self.h1_budget;
                t.h1_projection_dim = self.h1_dim;
                t.seed = self.seed;
                t
            })
        };
        cfg
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    /// Metrics JSON destination.
    #[arg(long)]
    pub out: PathBuf,

    /// Also write per-edge curvature as CSV (checkpoint_id, class_id, i, j, kappa).
    #[arg(long)]
    pub edge_csv: Option<PathBuf>,

    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    TorsionOnly,
    CurvatureOnly,
    Geoscore,
    Oracle,
    /// Every criterion; oracle only when accuracies are present.
    All,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Metrics JSON written by `analyze`.
    #[arg(long)]
    pub metrics: PathBuf,

    #[arg(long, value_enum, default_value_t = CriterionArg::All)]
    pub criterion: CriterionArg,

    /// Print machine-readable JSON instead of tables.
    #[arg(long)]
    pub json: bool,

    /// Write the output here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Spearman,
    Kendall,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Spearman => Method::Spearman,
            MethodArg::Kendall => Method::Kendall,
        }
    }
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub metrics: PathBuf,

    /// CSV with header `checkpoint_id,ood_accuracy`; defaults to the accuracies in the metrics file.
    #[arg(long)]
    pub accuracy: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = MethodArg::Spearman)]
    pub method: MethodArg,

    #[arg(long)]
    pub json: bool,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeatureShuffleArg {
    Columns,
    Rows,
    Entries,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RewireWeightsArg {
    Carry,
    Recompute,
}

#[derive(Debug, Args)]
pub struct ControlsArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    /// identity, label-shuffle, feature-shuffle, rewire, rotate, project-<dim>, or all.
    #[arg(long, default_value = "all")]
    pub control: String,

    /// What feature-shuffle permutes.
    #[arg(long, value_enum, default_value_t = FeatureShuffleArg::Columns)]
    pub feature_shuffle: FeatureShuffleArg,

    /// Edge weights after rewiring: carried with the edge or recomputed by the kernel.
    #[arg(long, value_enum, default_value_t = RewireWeightsArg::Carry)]
    pub rewire_weights: RewireWeightsArg,

    #[arg(long)]
    pub json: bool,

    #[arg(long)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

impl ControlsArgs {
    pub fn control_config(&self) -> ControlConfig {
        ControlConfig {
            feature_shuffle: match self.feature_shuffle {
                FeatureShuffleArg::Columns => FeatureShuffleMode::Columns,
                FeatureShuffleArg::Rows => FeatureShuffleMode::Rows,
                FeatureShuffleArg::Entries => FeatureShuffleMode::Entries,
            },
            rewire_weights: match self.rewire_weights {
                RewireWeightsArg::Carry => RewireWeights::Carry,
                RewireWeightsArg::Recompute => RewireWeights::Recompute,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for NPY files and manifest.json.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 10)]
    pub checkpoints: usize,

    #[arg(long)]
    pub classes: Option<usize>,

    #[arg(long)]
    pub per_class: Option<usize>,

    #[arg(long)]
    pub dim: Option<usize>,

    #[arg(long)]
    pub separation: Option<f64>,

    /// Coherence per checkpoint, comma separated; default evenly spaced in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<f64>>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics: PathBuf,

    /// Metric on the horizontal axis.
    #[arg(long, default_value = "tau")]
    pub x: String,

    #[arg(long, default_value = "mean_kappa")]
    pub y: String,

    /// Metric used for colour; `ood_accuracy` and `epoch` are also accepted.
    #[arg(long, default_value = "ood_accuracy")]
    pub color: String,

    /// CSV destination.
    #[arg(long)]
    pub out: PathBuf,
}

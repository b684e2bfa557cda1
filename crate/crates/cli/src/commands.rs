use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pdl_core::clustering::{dbscan, k_reciprocal_jaccard, pairwise_euclidean};
use pdl_core::data::{generate_synthetic, StyleShift};
use pdl_core::eval::{evaluate, meta_from, DEFAULT_RANKS};
use pdl_core::format::{clusters_to_text, distance_to_text, load_embeddings, save_embeddings};
use pdl_core::trainer::extract_all_features;
use pdl_core::{
    Dataset, Domain, EmbeddingTable, EncoderParams, EnhanceConfig, JaccardMode, LossKind, LrSchedule, PdlError, Result,
    SynthConfig, TrainConfig, Trainer,
};

/// Prototype dictionary learning: synthetic data, training, clustering and
/// retrieval evaluation.
#[derive(Debug, Parser)]
#[command(name = "pdl", version, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled source domain and a style-shifted target domain.
    Synth(SynthArgs),
    /// Train the encoder and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Score query embeddings against a gallery (mAP and CMC).
    Eval(EvalArgs),
    /// Pseudo-label a set with k-reciprocal Jaccard distances and DBSCAN.
    Cluster(ClusterArgs),
    /// Encode raw inputs with a checkpoint into an embedding file.
    Extract(ExtractArgs),
}

impl Command {
    pub fn threads(&self) -> Option<usize> {
        let common = match self {
            Command::Synth(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Cluster(a) => &a.common,
            Command::Extract(a) => &a.common,
        };
        common.threads
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run file of `key = value` lines; explicit flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap on worker threads for data-parallel sections.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory receiving `source.emb` and `target.emb`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().n_identities_source)]
    pub n_identities_source: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_identities_target)]
    pub n_identities_target: usize,
    #[arg(long, default_value_t = SynthConfig::default().samples_per_identity)]
    pub samples_per_identity: usize,
    #[arg(long, default_value_t = SynthConfig::default().input_dim)]
    pub input_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().cluster_spread)]
    pub cluster_spread: f64,
    #[arg(long, default_value_t = SynthConfig::default().camera_shift)]
    pub camera_shift: f64,
    #[arg(long, default_value_t = SynthConfig::default().n_cameras)]
    pub n_cameras: usize,
    /// Leave the target domain unshifted.
    #[arg(long)]
    pub no_style_shift: bool,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    /// Iterations per epoch [default: one pass over the usable samples].
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::default().eps)]
    pub eps: f64,
    #[arg(long, default_value_t = TrainConfig::default().min_pts)]
    pub min_pts: usize,
    #[arg(long, default_value_t = TrainConfig::default().k_reciprocal)]
    pub k_reciprocal: usize,
    #[arg(long, default_value_t = TrainConfig::default().jaccard_mode)]
    pub jaccard_mode: JaccardMode,
    /// Prototype momentum.
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    pub momentum: f64,
    /// Softmax temperature.
    #[arg(long, default_value_t = TrainConfig::default().tau)]
    pub tau: f64,
    /// Local-enhance coefficient.
    #[arg(long, default_value_t = TrainConfig::default().enhance.alpha)]
    pub alpha: f64,
    #[arg(long)]
    pub no_enhance: bool,
    /// Identities per batch.
    #[arg(long, default_value_t = TrainConfig::default().batch_p)]
    pub batch_p: usize,
    /// Instances per identity.
    #[arg(long, default_value_t = TrainConfig::default().batch_k)]
    pub batch_k: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = TrainConfig::default().lr.base)]
    pub lr: f64,
    /// Epochs between tenfold learning-rate drops.
    #[arg(long, default_value_t = TrainConfig::default().lr.step_epochs)]
    pub lr_step: usize,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss)]
    pub loss: LossKind,
    /// Negatives per query for `--loss infonce`.
    #[arg(long, default_value_t = TrainConfig::default().infonce_negatives)]
    pub infonce_negatives: usize,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
}

impl TrainFlags {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            iterations_per_epoch: self.iterations,
            batch_p: self.batch_p,
            batch_k: self.batch_k,
            lr: LrSchedule {
                base: self.lr,
                step_epochs: self.lr_step,
            },
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            tau: self.tau,
            eps: self.eps,
            min_pts: self.min_pts,
            k_reciprocal: self.k_reciprocal,
            jaccard_mode: self.jaccard_mode,
            enhance: EnhanceConfig {
                alpha: self.alpha,
                enabled: !self.no_enhance,
                ..EnhanceConfig::default()
            },
            loss: self.loss,
            infonce_negatives: self.infonce_negatives,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Labelled source embedding file.
    #[arg(long)]
    pub source: PathBuf,
    /// Target embedding file; its identity column is ignored.
    #[arg(long)]
    pub target: PathBuf,
    /// Directory receiving `model.ckpt` and `history.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write `epoch-<e>.ckpt` every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Encode both files with this checkpoint first; without it the files
    /// already hold embeddings.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery file [default: the query file].
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Also write the metrics line here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    /// Encode the input with this checkpoint first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Destination of the `PDL-CLUS` dump.
    #[arg(long)]
    pub out: PathBuf,
    /// Destination of the `PDL-DIST` Jaccard matrix dump.
    #[arg(long)]
    pub dist_out: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().eps)]
    pub eps: f64,
    #[arg(long, default_value_t = TrainConfig::default().min_pts)]
    pub min_pts: usize,
    #[arg(long, default_value_t = TrainConfig::default().k_reciprocal)]
    pub k_reciprocal: usize,
    #[arg(long, default_value_t = TrainConfig::default().jaccard_mode)]
    pub jaccard_mode: JaccardMode,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        PdlError::Io(io) => PdlError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        PdlError::Parse { line, msg } => PdlError::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn load(path: &Path) -> Result<EmbeddingTable> {
    with_path(path, load_embeddings(path))
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let text = with_path(path, fs::read_to_string(path).map_err(PdlError::from))?;
    with_path(path, EncoderParams::from_checkpoint(&text))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    with_path(path, fs::write(path, contents).map_err(PdlError::from))
}

fn encode(params: &EncoderParams, table: &EmbeddingTable) -> Result<EmbeddingTable> {
    let rows: Vec<&[f64]> = table
        .matrix
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major table"))
        .collect();
    Ok(EmbeddingTable {
        matrix: extract_all_features(params, &rows)?,
        ..table.clone()
    })
}

fn maybe_encode(checkpoint: Option<&Path>, table: EmbeddingTable) -> Result<EmbeddingTable> {
    match checkpoint {
        Some(path) => encode(&load_checkpoint(path)?, &table),
        None => Ok(table),
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_identities_source: a.n_identities_source,
        n_identities_target: a.n_identities_target,
        samples_per_identity: a.samples_per_identity,
        input_dim: a.input_dim,
        cluster_spread: a.cluster_spread,
        camera_shift: a.camera_shift,
        style_shift: if a.no_style_shift {
            StyleShift::identity(a.input_dim)
        } else {
            StyleShift::default_for(a.input_dim)
        },
        n_cameras: a.n_cameras,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (source, target) = generate_synthetic(&config)?;
    with_path(&a.out_dir, fs::create_dir_all(&a.out_dir).map_err(PdlError::from))?;
    for (name, set) in [("source", &source), ("target", &target)] {
        let path = a.out_dir.join(format!("{name}.emb"));
        with_path(&path, save_embeddings(&path, &set.to_table()))?;
        println!(
            "{name}: {} samples, {} identities -> {}",
            set.len(),
            set.n_identities(),
            path.display()
        );
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = a.train.to_config();
    config.validate()?;
    if a.checkpoint_every == Some(0) {
        return Err(PdlError::Config("--checkpoint-every must be >= 1".into()));
    }
    let source = Dataset::from_table(Domain::Source, &load(&a.source)?)?;
    let target = Dataset::from_table(Domain::Target, &load(&a.target)?)?.training_view();
    with_path(&a.out_dir, fs::create_dir_all(&a.out_dir).map_err(PdlError::from))?;

    let epochs = config.epochs;
    let mut trainer = Trainer::new(config, &source, &target)?;
    let model = a.out_dir.join("model.ckpt");
    if epochs == 0 {
        write(&model, &trainer.checkpoint())?;
        println!("epochs=0: initial checkpoint -> {}", model.display());
        return Ok(());
    }

    let history_path = a.out_dir.join("history.txt");
    let mut history = with_path(&history_path, File::create(&history_path).map_err(PdlError::from))?;
    for e in 1..=epochs {
        let line = trainer.run_epoch()?.to_string();
        println!("{line}");
        with_path(&history_path, writeln!(history, "{line}").map_err(PdlError::from))?;
        if a.checkpoint_every.is_some_and(|n| e % n == 0) {
            write(&a.out_dir.join(format!("epoch-{e:03}.ckpt")), &trainer.checkpoint())?;
        }
    }
    write(&model, &trainer.checkpoint())?;
    println!("checkpoint -> {}", model.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = a.checkpoint.as_deref();
    let query = maybe_encode(ckpt, load(&a.query)?)?;
    let gallery = match &a.gallery {
        Some(path) => maybe_encode(ckpt, load(path)?)?,
        None => query.clone(),
    };
    let result = evaluate(
        query.matrix.view(),
        gallery.matrix.view(),
        &meta_from(&query.identities, &query.camera_ids),
        &meta_from(&gallery.identities, &gallery.camera_ids),
        &DEFAULT_RANKS,
    )?;
    let line = result.to_string();
    println!("{line}");
    if let Some(out) = &a.out {
        write(out, &format!("{line}\n"))?;
    }
    Ok(())
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let JaccardMode::Plain = a.jaccard_mode;
    let table = maybe_encode(a.checkpoint.as_deref(), load(&a.input)?)?;
    let n = table.len();
    if n < 2 {
        return Err(PdlError::Config(format!("clustering needs at least 2 rows, found {n}")));
    }
    let base = pairwise_euclidean(table.matrix.view())?;
    let jaccard = k_reciprocal_jaccard(&base, a.k_reciprocal.min(n - 1))?;
    let assignment = dbscan(&jaccard, a.eps, a.min_pts)?;
    write(&a.out, &clusters_to_text(&assignment))?;
    if let Some(path) = &a.dist_out {
        write(path, &distance_to_text(&jaccard))?;
    }
    println!("clusters={} noise={}", assignment.n_clusters(), assignment.n_noise());
    Ok(())
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    let table = encode(&load_checkpoint(&a.checkpoint)?, &load(&a.input)?)?;
    with_path(&a.out, save_embeddings(&a.out, &table))?;
    println!(
        "{} embeddings of dimension {} -> {}",
        table.len(),
        table.dim(),
        a.out.display()
    );
    Ok(())
}

//! Command-line surface: dataset generation, meta-training, deployment,
//! compression benchmarks, and memory reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use lifelong::compress::{BitmapCompressed, CompressedSample, PQCodebook};
use lifelong::data::{Dataset, DatasetSpec, SourceKind};
use lifelong::io;
use lifelong::memory::memory_report;
use lifelong::meta::{
    continual_learn, meta_train, CLRunReport, ContinualOptions, MetaTrainConfig, ReplayCodec,
};
use lifelong::model::{ArchitectureConfig, ModelState};
use lifelong::rng::stream;
use lifelong::tensor::Tensor;
use lifelong::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lifelong",
    about = "Rehearsal-based meta continual learning with compressed latent replay",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Root seed; all randomness derives from it.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// key=value overrides for the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Blobs,
    Images,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CodecArg {
    Raw,
    Bitmap,
    Bitpq,
}

impl From<CodecArg> for ReplayCodec {
    fn from(value: CodecArg) -> Self {
        match value {
            CodecArg::Raw => ReplayCodec::Raw,
            CodecArg::Bitmap => ReplayCodec::Bitmap,
            CodecArg::Bitpq => ReplayCodec::BitPq,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_enum, default_value_t = SourceArg::Blobs)]
        source: SourceArg,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 5)]
        meta_train_classes: usize,
        #[arg(long, default_value_t = 30)]
        train_per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        /// Sample shape as channels,height,width.
        #[arg(long, default_value = "1,16,16")]
        shape: String,
        /// Class-mean separation in noise sigmas (blobs).
        #[arg(long, default_value_t = 5.0)]
        separation: f32,
        /// Output file name within --out.
        #[arg(long, default_value = "data.llds")]
        file: String,
    },
    /// Meta-train on the dataset's meta-train classes; writes a checkpoint
    /// and PQ codebooks.
    MetaTrain {
        #[command(flatten)]
        shared: Shared,
        /// Dataset file produced by gen-data (defaults to the toy preset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Built-in preset when --data is not given.
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        outer_steps: Option<usize>,
        /// Comma-separated PQ sub-vector lengths; one codebook per value.
        #[arg(long, default_value = "8")]
        subvec_len: String,
        /// PQ centroids per column (clamped to the corpus size).
        #[arg(long, default_value_t = 256)]
        centroids: usize,
        /// Network width multiplier.
        #[arg(long, default_value_t = 0.25)]
        width: f32,
    },
    /// Continually learn the dataset's meta-test classes from a checkpoint.
    Deploy {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        preset: String,
        /// Number of meta-test classes to learn (0 = all).
        #[arg(long, default_value_t = 0)]
        classes: usize,
        /// Training samples per class (0 = all available).
        #[arg(long, default_value_t = 30)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 2)]
        replay_epochs: usize,
        #[arg(long, value_enum, default_value_t = CodecArg::Bitpq)]
        codec: CodecArg,
        /// Quantize the frozen extractor to int8 before deployment.
        #[arg(long, default_value_t = false)]
        quantize: bool,
        /// Try 10 log-spaced learning rates and keep the best run.
        #[arg(long, default_value_t = false)]
        lr_sweep: bool,
        /// Run the hyperparameter grid (samples x epochs x sub-vector len).
        #[arg(long, default_value_t = false)]
        sweep: bool,
    },
    /// Compression ratio / reconstruction error over a sparsity x L grid.
    BenchCompress {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value = "0.9")]
        sparsity: String,
        #[arg(long, default_value = "32")]
        subvec_len: String,
        #[arg(long, default_value_t = 2304)]
        latent_dim: usize,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 256)]
        centroids: usize,
    },
    /// Footprint breakdown for a checkpoint (and optional buffer).
    ReportMemory {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        buffer: Option<PathBuf>,
        /// Codebook that encoded the buffer (needed to parse it).
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            shared,
            source,
            classes,
            meta_train_classes,
            train_per_class,
            test_per_class,
            shape,
            separation,
            file,
        } => {
            let spec = DatasetSpec {
                source: match source {
                    SourceArg::Blobs => SourceKind::Blobs,
                    SourceArg::Images => SourceKind::Images,
                },
                num_classes: classes,
                samples_per_class_train: train_per_class,
                samples_per_class_test: test_per_class,
                input_shape: parse_shape(&shape)?,
                seed: shared.seed,
                meta_train_classes,
                separation,
            };
            let data = Dataset::generate(&spec)?;
            fs::create_dir_all(&shared.out)?;
            let path = shared.out.join(file);
            io::save_dataset(&path, &data)?;
            println!("wrote {} ({} samples)", path.display(), data.total_samples());
            Ok(())
        }
        Command::MetaTrain { shared, data, preset, outer_steps, subvec_len, centroids, width } => {
            let dataset = load_or_preset(data.as_deref(), &preset, shared.seed)?;
            let mut cfg = MetaTrainConfig::desk_preset(shared.seed);
            if let Some(path) = &shared.config {
                io::apply_config_file(path, &mut cfg)?;
            }
            cfg.seed = shared.seed;
            if let Some(steps) = outer_steps {
                cfg.outer_steps = steps;
            }
            let subvec_lens = parse_usize_list(&subvec_len)?;

            let mut arch =
                ArchitectureConfig::desk_default(dataset.input_shape, dataset.classes.len());
            arch.width_multiplier = width;
            let mut init_rng = stream(cfg.seed, "model-init");
            let mut model = ModelState::init(arch, &mut init_rng)?;

            let outcome = meta_train(&mut model, dataset.meta_train_split(), &cfg)?;
            fs::create_dir_all(&shared.out)?;
            let ckpt = shared.out.join("model.llck");
            io::save_checkpoint(&ckpt, &model)?;
            println!("wrote {}", ckpt.display());

            let nonzeros: Vec<Vec<f32>> = outcome
                .latent_corpus
                .iter()
                .map(|l| Ok(BitmapCompressed::compress(l)?.into_nonzeros()))
                .collect::<Result<_>>()?;
            let k = centroids.min(nonzeros.len()).max(1);
            for (i, &l) in subvec_lens.iter().enumerate() {
                let cb = PQCodebook::train(&nonzeros, l, k, 25, cfg.seed)?;
                let path = shared.out.join(format!("codebook_l{l}.llpq"));
                io::save_codebook(&path, &cb)?;
                if i == 0 {
                    io::save_codebook(&shared.out.join("codebook.llpq"), &cb)?;
                }
                println!("wrote {} ({} columns, {} centroids)", path.display(), cb.columns(), k);
            }

            let mut summary = String::new();
            for (key, value) in cfg.to_key_values() {
                summary.push_str(&format!("config.{key}={value}\n"));
            }
            summary.push_str(&format!("final_loss={:.6}\n", outcome.final_loss));
            summary.push_str(&format!("latent_corpus={}\n", outcome.latent_corpus.len()));
            summary.push_str(&format!("pq_centroids={k}\n"));
            fs::write(shared.out.join("metatrain.txt"), summary)?;
            Ok(())
        }
        Command::Deploy {
            shared,
            ckpt,
            codebook,
            data,
            preset,
            classes,
            samples_per_class,
            replay_epochs,
            codec,
            quantize,
            lr_sweep,
            sweep,
        } => {
            let dataset = load_or_preset(data.as_deref(), &preset, shared.seed)?;
            let mut cfg = MetaTrainConfig::desk_preset(shared.seed);
            if let Some(path) = &shared.config {
                io::apply_config_file(path, &mut cfg)?;
            }
            cfg.seed = shared.seed;
            let ckpt_bytes = fs::read(&ckpt)?;
            fs::create_dir_all(&shared.out)?;

            if sweep {
                return run_grid_sweep(
                    &shared,
                    &ckpt_bytes,
                    codebook.as_deref(),
                    &dataset,
                    &cfg,
                    quantize,
                );
            }

            let codec: ReplayCodec = codec.into();
            let cb = match (&codebook, codec) {
                (Some(path), _) => Some(io::load_codebook(path)?),
                (None, ReplayCodec::BitPq) => {
                    return Err(Error::Config("--codebook is required with the bitpq codec".into()))
                }
                (None, _) => None,
            };

            let stream_classes = deployment_stream(&dataset, classes, samples_per_class, cfg.seed)?;
            let options = ContinualOptions { replay_epochs, codec };

            let lrs: Vec<f32> =
                if lr_sweep { log_spaced(1e-4, 1e-2, 10) } else { vec![cfg.inner_lr] };
            let mut best: Option<(f32, CLRunReport)> = None;
            for lr in lrs {
                let mut run_cfg = cfg.clone();
                if lr_sweep {
                    run_cfg.inner_lr = lr;
                    run_cfg.outer_lr = lr;
                }
                let mut model = prepare_model(&ckpt_bytes, quantize, &dataset, run_cfg.seed)?;
                let report =
                    continual_learn(&mut model, &stream_classes, cb.as_ref(), &run_cfg, &options)?;
                let better = match &best {
                    Some((acc, _)) => report.final_accuracy > *acc,
                    None => true,
                };
                if better {
                    best = Some((report.final_accuracy, report));
                }
            }
            let (_, report) = best.expect("at least one learning-rate run");

            fs::write(shared.out.join("report.txt"), report.to_text())?;
            fs::write(shared.out.join("report.csv"), report.to_csv())?;
            println!(
                "final accuracy {:.4} over {} classes ({} bytes of rehearsal)",
                report.final_accuracy,
                report.steps.len(),
                report.buffer_bytes
            );
            Ok(())
        }
        Command::BenchCompress { shared, sparsity, subvec_len, latent_dim, samples, centroids } => {
            let sparsities = parse_f64_list(&sparsity)?;
            let lens = parse_usize_list(&subvec_len)?;
            fs::create_dir_all(&shared.out)?;
            let mut csv = String::from(
                "sparsity,subvec_len,latent_dim,mean_nnz,sample_bytes,dense_bytes,ratio,recon_mse\n",
            );
            for &sp in &sparsities {
                for &l in &lens {
                    let row = bench_one(sp, l, latent_dim, samples, centroids, shared.seed)?;
                    csv.push_str(&row);
                    print!("{row}");
                }
            }
            let path = shared.out.join("bench.csv");
            fs::write(&path, csv)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::ReportMemory { shared, ckpt, buffer, codebook, batch } => {
            let model = io::load_checkpoint(&ckpt)?;
            let cb = codebook.as_deref().map(io::load_codebook).transpose()?;
            let buf = match buffer {
                Some(path) => {
                    let cb = cb.as_ref().ok_or_else(|| {
                        Error::Config("--codebook is required to parse a buffer file".into())
                    })?;
                    Some(io::load_buffer(&path, cb.subvec_len(), usize::MAX)?)
                }
                None => None,
            };
            let report = memory_report(&model, buf.as_ref(), batch)?;
            fs::create_dir_all(&shared.out)?;
            fs::write(shared.out.join("memory.txt"), report.to_string())?;
            print!("{report}");
            Ok(())
        }
    }
}

fn parse_shape(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| Error::Validation(format!("bad shape '{text}': {e}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Validation(format!("shape '{text}' must be channels,height,width")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| p.trim().parse().map_err(|e| Error::Validation(format!("bad list '{text}': {e}"))))
        .collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| p.trim().parse().map_err(|e| Error::Validation(format!("bad list '{text}': {e}"))))
        .collect()
}

fn log_spaced(lo: f32, hi: f32, count: usize) -> Vec<f32> {
    let (l, h) = (lo.ln(), hi.ln());
    (0..count).map(|i| (l + (h - l) * i as f32 / (count - 1) as f32).exp()).collect()
}

fn load_or_preset(data: Option<&Path>, preset: &str, seed: u64) -> Result<Dataset> {
    if let Some(path) = data {
        return io::load_dataset(path);
    }
    let spec = match preset {
        "toy" => DatasetSpec::blobs(10, 5, seed),
        "toy-images" => {
            DatasetSpec { source: SourceKind::Images, ..DatasetSpec::blobs(10, 5, seed) }
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown preset '{other}' (expected toy or toy-images)"
            )))
        }
    };
    Dataset::generate(&spec)
}

/// Build the deployment model: load, freeze, optionally quantize with
/// calibration batches drawn from the meta-train split.
fn prepare_model(
    ckpt_bytes: &[u8],
    quantize: bool,
    dataset: &Dataset,
    seed: u64,
) -> Result<ModelState> {
    let mut model = io::checkpoint_from_bytes(ckpt_bytes)?;
    model.freeze_extractor();
    if quantize && !model.is_quantized() {
        let calib_classes = if dataset.meta_train_classes > 0 {
            dataset.meta_train_split()
        } else {
            &dataset.classes
        };
        let mut rng = stream(seed, "calibration");
        let mut batches = Vec::new();
        for _ in 0..4 {
            let refs: Vec<&Tensor> = (0..16)
                .map(|_| {
                    let class = &calib_classes[rng.gen_range(0..calib_classes.len())];
                    &class.train[rng.gen_range(0..class.train.len())]
                })
                .collect();
            batches.push(Tensor::stack(&refs)?);
        }
        model = model.quantize_extractor(&batches)?;
    }
    Ok(model)
}

/// Select and trim the deployment class stream.
fn deployment_stream(
    dataset: &Dataset,
    classes: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<lifelong::data::ClassData>> {
    let split = dataset.meta_test_split();
    if split.is_empty() {
        return Err(Error::Validation("dataset has no meta-test classes".into()));
    }
    let take = if classes == 0 { split.len() } else { classes.min(split.len()) };
    let mut rng = stream(seed, "deploy-trim");
    Ok(split[..take]
        .iter()
        .map(|c| {
            let mut train = c.train.clone();
            if samples_per_class > 0 && samples_per_class < train.len() {
                // deterministic subset
                for i in 0..samples_per_class {
                    let j = rng.gen_range(i..train.len());
                    train.swap(i, j);
                }
                train.truncate(samples_per_class);
            }
            lifelong::data::ClassData { class_id: c.class_id, train, test: c.test.clone() }
        })
        .collect())
}

/// The hyperparameter grid: samples per class x replay epochs x sub-vector
/// length, one continual-learning run per cell.
fn run_grid_sweep(
    shared: &Shared,
    ckpt_bytes: &[u8],
    codebook: Option<&Path>,
    dataset: &Dataset,
    cfg: &MetaTrainConfig,
    quantize: bool,
) -> Result<()> {
    let codebook_dir = codebook
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| shared.out.clone());
    let mut csv =
        String::from("samples_per_class,replay_epochs,subvec_len,final_accuracy,buffer_bytes\n");
    for &samples in &[10usize, 20, 30] {
        for replay_epochs in 0..=5usize {
            for &l in &[8usize, 32, 128] {
                let cb_path = codebook_dir.join(format!("codebook_l{l}.llpq"));
                let cb = io::load_codebook(&cb_path)?;
                let stream_classes = deployment_stream(dataset, 0, samples, cfg.seed)?;
                let mut model = prepare_model(ckpt_bytes, quantize, dataset, cfg.seed)?;
                let options = ContinualOptions { replay_epochs, codec: ReplayCodec::BitPq };
                let report =
                    continual_learn(&mut model, &stream_classes, Some(&cb), cfg, &options)?;
                csv.push_str(&format!(
                    "{samples},{replay_epochs},{l},{:.6},{}\n",
                    report.final_accuracy, report.buffer_bytes
                ));
            }
        }
    }
    fs::create_dir_all(&shared.out)?;
    let path = shared.out.join("sweep.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// One benchmark cell: random sparse vectors, a codebook trained on them,
/// measured size and reconstruction error on a held-out draw.
fn bench_one(
    sparsity: f64,
    subvec_len: usize,
    latent_dim: usize,
    samples: usize,
    centroids: usize,
    seed: u64,
) -> Result<String> {
    let mut rng = stream(seed, &format!("bench-{sparsity}-{subvec_len}"));
    let make = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
        (0..latent_dim)
            .map(|_| if rng.gen::<f64>() < sparsity { 0.0 } else { rng.gen_range(0.05f32..2.0) })
            .collect()
    };
    let train: Vec<Vec<f32>> = (0..samples).map(|_| make(&mut rng)).collect();
    let held: Vec<Vec<f32>> = (0..samples.min(128)).map(|_| make(&mut rng)).collect();

    let nonzeros: Vec<Vec<f32>> = train
        .iter()
        .map(|l| Ok(BitmapCompressed::compress(l)?.into_nonzeros()))
        .collect::<Result<_>>()?;
    let k = centroids.min(nonzeros.len()).max(1);
    let cb = PQCodebook::train(&nonzeros, subvec_len, k, 25, seed)?;

    let mut total_bytes = 0usize;
    let mut total_nnz = 0usize;
    let mut sq_err = 0.0f64;
    let mut count = 0usize;
    for latent in &held {
        let sample = CompressedSample::compress(latent, &cb, 0)?;
        total_bytes += sample.serialized_len();
        total_nnz += sample.nnz();
        let back = sample.decompress(&cb)?;
        for (a, b) in latent.iter().zip(&back) {
            sq_err += f64::from(a - b).powi(2);
            count += 1;
        }
    }
    let mean_bytes = total_bytes as f64 / held.len() as f64;
    let dense = (4 * latent_dim) as f64;
    Ok(format!(
        "{sparsity},{subvec_len},{latent_dim},{:.1},{:.1},{dense},{:.3},{:.6}\n",
        total_nnz as f64 / held.len() as f64,
        mean_bytes,
        dense / mean_bytes,
        sq_err / count as f64,
    ))
}

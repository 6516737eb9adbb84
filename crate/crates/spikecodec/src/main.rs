//! Command-line driver: encode images into spike trains, train and evaluate
//! spike-driven classifiers, report temporal dynamics, and estimate
//! inference energy. Exit codes: 0 ok, 2 usage/config, 3 io/format,
//! 4 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use spikecodec::analysis::{
    duration_map, empirical_entropy, DurationScheme, DynamicsReport, FiringPeriod,
};
use spikecodec::coding::{
    default_reduction, encode, EncoderSpec, GauParams, Scheme, StemParams, DEFAULT_SCA_KERNEL_SIZE,
};
use spikecodec::data::{load_idx, load_manifest, synth_dataset, verify_manifest, Dataset, SYNTH_NOISE_SIGMA};
use spikecodec::energy::{estimate_energy, gau_overhead_row, measure_firing_rates, network_layer_costs};
use spikecodec::error::{Error, Result};
use spikecodec::network::{build, load_checkpoint, save_checkpoint, NetworkSpec};
use spikecodec::neuron::LifConfig;
use spikecodec::svg::write_line_plot;
use spikecodec::tensor::{load_t4sn, save_t4sn};
use spikecodec::training::{evaluate, train, TrainConfig, LOSS_CSV_HEADER};
use spikecodec::Tensor;

#[derive(Parser)]
#[command(name = "spikecodec", version, about = "Spiking neural network coding toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode an image tensor into a spike (or analog) sequence
    Encode(EncodeArgs),
    /// Train a spike-driven classifier
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Firing-period / duration / entropy report for a value tensor
    Dynamics(DynamicsArgs),
    /// FLOP counting and MAC/AC energy estimate for a checkpoint
    Energy(EnergyArgs),
}

#[derive(Args)]
struct EncodeArgs {
    /// direct | gac | rate | phase | ttfs
    #[arg(long)]
    scheme: String,
    /// Number of time steps T
    #[arg(long)]
    steps: usize,
    /// Input tensor file ([B,C,H,W] or [C,H,W])
    #[arg(long)]
    input: PathBuf,
    /// Output tensor file ([T,B,C,H,W])
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (IDX files) or synth:seed=S,n=N,classes=K,size=Z
    #[arg(long)]
    data: String,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Loss-record CSV output path
    #[arg(long)]
    records: Option<PathBuf>,
    /// Loss-curve SVG output path
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DynamicsArgs {
    /// direct | gac | rate | repeat
    #[arg(long)]
    scheme: String,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Tensor of input values (any shape)
    #[arg(long)]
    input: PathBuf,
    /// CSV report output path
    #[arg(long)]
    report: Option<PathBuf>,
    /// Entropy-curve SVG output path
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Quantization bins for real-valued sequences
    #[arg(long, default_value_t = 16)]
    bins: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Batch tensor file [B,C,H,W] used to measure firing rates
    #[arg(long)]
    batch: PathBuf,
    /// CSV report output path (stdout when omitted)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Bill the analog coding layer once per time step instead of once
    #[arg(long)]
    mac_per_step: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EncoderSection {
    scheme: Option<String>,
    steps: Option<usize>,
    lif: Option<LifConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnalysisSection {
    bins: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EnergySection {
    mac_per_step: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    encoder: EncoderSection,
    network: Option<NetworkSpec>,
    train: Option<TrainConfig>,
    analysis: AnalysisSection,
    energy: EnergySection,
}

fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    match path {
        None => Ok(CliConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("SPIKECODEC_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Usage(format!("SPIKECODEC_SEED must be an integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

/// Accepts [B,C,H,W] directly, promotes [C,H,W] to a batch of one.
fn load_images(path: &Path) -> Result<Tensor> {
    let t = load_t4sn(path)?;
    match t.ndim() {
        4 => Ok(t),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        }
        _ => Err(Error::Input(format!(
            "expected [B,C,H,W] or [C,H,W] image tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn load_dataset(spec: &str, split: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let (mut seed, mut n, mut classes, mut size) = (0u64, 64usize, 2usize, 8usize);
        for part in rest.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("bad synth spec fragment '{part}'")))?;
            let parse_err = |k: &str, v: &str| Error::Usage(format!("bad synth value {k}={v}"));
            match k {
                "seed" => seed = v.parse().map_err(|_| parse_err(k, v))?,
                "n" => n = v.parse().map_err(|_| parse_err(k, v))?,
                "classes" => classes = v.parse().map_err(|_| parse_err(k, v))?,
                "size" => size = v.parse().map_err(|_| parse_err(k, v))?,
                _ => return Err(Error::Usage(format!("unknown synth key '{k}'"))),
            }
        }
        // eval splits draw from an offset seed so they are disjoint from train
        let seed = if split == "test" { seed.wrapping_add(0x5eed) } else { seed };
        return synth_dataset(seed, n, classes, size, SYNTH_NOISE_SIGMA);
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        return Err(Error::Usage(format!("data path '{spec}' is not a directory")));
    }
    let manifest_path = dir.join("manifest.txt");
    if manifest_path.is_file() {
        verify_manifest(dir, &load_manifest(&manifest_path)?)?;
    }
    let (images, labels) = if split == "test" {
        (dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))
    } else {
        (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
    };
    let mut ds = load_idx(&images, &labels)?;
    ds.split = split.to_string();
    Ok(ds)
}

fn write_sidecar(out: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut meta = String::new();
    for (k, v) in entries {
        meta.push_str(&format!("{k}={v}\n"));
    }
    let path = out.with_extension(format!(
        "{}.meta",
        out.extension().and_then(|e| e.to_str()).unwrap_or("t4sn")
    ));
    std::fs::write(&path, meta).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let scheme = Scheme::parse(&args.scheme)?;
    let config = load_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed)?;
    if args.steps == 0 {
        return Err(Error::Usage("--steps must be positive".into()));
    }
    let images = load_images(&args.input)?;
    let channels = images.shape()[1];
    let lif = config.encoder.lif.unwrap_or_default();
    // no learned weights in this context: the stem is an exact passthrough
    let stem = match scheme {
        Scheme::Direct | Scheme::Gac => Some(StemParams::identity(channels)?),
        _ => None,
    };
    let gau = if scheme == Scheme::Gac {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(GauParams::random(
            args.steps,
            default_reduction(args.steps),
            channels,
            DEFAULT_SCA_KERNEL_SIZE.min(images.shape()[2]).min(images.shape()[3]),
            &mut rng,
        )?)
    } else {
        None
    };
    let mut spec = EncoderSpec { scheme, t: args.steps, stem, gau, lif };
    let (seq, _) = encode(&images, &mut spec, seed)?;
    save_t4sn(&args.out, &seq.data)?;
    write_sidecar(
        &args.out,
        &[
            ("scheme", scheme.name().to_string()),
            ("steps", args.steps.to_string()),
            ("binary", seq.binary.to_string()),
            ("seed", seed.to_string()),
            ("input", args.input.display().to_string()),
            ("shape", format!("{:?}", seq.data.shape())),
        ],
    )?;
    println!(
        "encoded scheme={} steps={} shape={:?} binary={}",
        scheme.name(),
        args.steps,
        seq.data.shape(),
        seq.binary
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let mut cfg = config.train.clone().unwrap_or_default();
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr0 {
        cfg.lr0 = lr;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    } else if args.seed.is_none() && config.train.is_none() {
        cfg.seed = resolve_seed(None)?;
    }
    cfg.validate()?;

    let train_set = load_dataset(&args.data, "train")?;
    if train_set.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let eval_set = load_dataset(&args.data, "test").ok();

    let mut spec = match &config.network {
        Some(s) => s.clone(),
        None => {
            let shape = train_set.images.shape();
            NetworkSpec::tiny(Scheme::Gac, 4, shape[1], train_set.n_classes)
        }
    };
    if let Some(name) = &args.scheme {
        spec.scheme = Scheme::parse(name)?;
    }
    if let Some(t) = args.steps {
        spec.t = t;
    }
    spec.validate()?;
    let mut net = build(&spec, cfg.seed)?;

    let outcome = train(
        &mut net,
        &train_set,
        eval_set.as_ref(),
        &cfg,
        eval_set.is_some().then_some(args.out.as_path()),
    )?;
    if eval_set.is_none() {
        save_checkpoint(&args.out, &net)?;
    }
    if let Some(rp) = &args.records {
        let mut csv = String::from(LOSS_CSV_HEADER);
        csv.push('\n');
        for r in &outcome.records {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(rp, csv).map_err(|e| Error::io(rp.display().to_string(), e))?;
    }
    if let Some(sp) = &args.svg {
        let pts: Vec<(f64, f64)> = outcome
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (i as f64, r.loss))
            .collect();
        if !pts.is_empty() {
            write_line_plot(sp, "training loss", &[("loss".to_string(), pts)])?;
        }
    }
    match outcome.best_eval_accuracy {
        Some(acc) => println!(
            "trained epochs={} best_eval_acc={} best_epoch={}",
            cfg.epochs,
            acc,
            outcome.best_epoch.unwrap_or(0)
        ),
        None => println!("trained epochs={} (no eval split)", cfg.epochs),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let mut net = load_checkpoint(&args.ckpt)?;
    let ds = load_dataset(&args.data, "test").or_else(|_| load_dataset(&args.data, "train"))?;
    let acc = evaluate(&mut net, &ds, args.batch_size, seed)?;
    println!("accuracy={acc}");
    Ok(())
}

fn dynamics_scheme(name: &str) -> Result<DurationScheme> {
    match name {
        "direct" => Ok(DurationScheme::Direct),
        "gac" => Ok(DurationScheme::Gac),
        "rate" => Ok(DurationScheme::Rate),
        "repeat" => Ok(DurationScheme::Repeat),
        other => Err(Error::Usage(format!(
            "unknown dynamics scheme '{other}' (expected direct|gac|rate|repeat)"
        ))),
    }
}

/// Builds the encoded sequence whose entropy the report measures.
fn dynamics_sequence(
    scheme: DurationScheme,
    values: &Tensor,
    t: usize,
    lif: LifConfig,
    seed: u64,
) -> Result<(Tensor, bool)> {
    let n = values.len();
    let images = values.reshape(&[1, 1, 1, n])?;
    let enc_scheme = match scheme {
        DurationScheme::Direct => Scheme::Direct,
        DurationScheme::Gac => Scheme::Gac,
        DurationScheme::Rate => Scheme::Rate,
        DurationScheme::Repeat => {
            // the raw frame repeated each step: zero entropy after step 1
            let mut data = Vec::with_capacity(t * n);
            for _ in 0..t {
                data.extend_from_slice(values.data());
            }
            return Ok((Tensor::new(vec![t, n], data)?, false));
        }
    };
    let stem = match enc_scheme {
        Scheme::Direct | Scheme::Gac => Some(StemParams::identity(1)?),
        _ => None,
    };
    let gau = if enc_scheme == Scheme::Gac {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(GauParams::random(t, default_reduction(t), 1, 1, &mut rng)?)
    } else {
        None
    };
    let mut spec = EncoderSpec { scheme: enc_scheme, t, stem, gau, lif };
    let (seq, _) = encode(&images, &mut spec, seed)?;
    let flat = seq.data.reshape(&[t, n])?;
    Ok((flat, seq.binary))
}

fn cmd_dynamics(args: &DynamicsArgs) -> Result<()> {
    let scheme = dynamics_scheme(&args.scheme)?;
    if args.steps == 0 {
        return Err(Error::Usage("--steps must be positive".into()));
    }
    if args.bins < 2 {
        return Err(Error::Usage("--bins must be at least 2".into()));
    }
    let seed = resolve_seed(args.seed)?;
    let values = load_t4sn(&args.input)?;
    let lif = LifConfig::default();
    let (periods, duration) = duration_map(scheme, &values, &lif, args.steps)?;
    let (seq, binary) = dynamics_sequence(scheme, &values, args.steps, lif, seed)?;
    let entropy_curve = empirical_entropy(&seq, binary, args.bins)?;
    let report = DynamicsReport {
        scheme: args.scheme.clone(),
        t: args.steps,
        periods,
        dynamics_duration: duration,
        entropy_curve,
        bins: args.bins,
    };
    println!("T_duration={}", report.dynamics_duration);
    if let Some(rp) = &args.report {
        let mut csv = String::from("t,entropy_bits\n");
        for &(t, h) in &report.entropy_curve {
            csv.push_str(&format!("{t},{h}\n"));
        }
        csv.push_str(&format!("scheme,{}\n", report.scheme));
        csv.push_str(&format!("steps,{}\n", report.t));
        csv.push_str(&format!("duration,{}\n", report.dynamics_duration));
        csv.push_str(&format!("bins,{}\n", report.bins));
        let never = report
            .periods
            .iter()
            .filter(|p| matches!(p, FiringPeriod::NeverFires))
            .count();
        csv.push_str(&format!("never_fires,{never}\n"));
        std::fs::write(rp, csv).map_err(|e| Error::io(rp.display().to_string(), e))?;
    }
    if let Some(sp) = &args.svg {
        let pts: Vec<(f64, f64)> = report
            .entropy_curve
            .iter()
            .map(|&(t, h)| (t as f64, h))
            .collect();
        write_line_plot(sp, "conditional entropy per step", &[("entropy".to_string(), pts)])?;
    }
    Ok(())
}

fn cmd_energy(args: &EnergyArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let mut net = load_checkpoint(&args.ckpt)?;
    let batch = load_images(&args.batch)?;
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    let rates = measure_firing_rates(&mut net, &batch, seed)?;
    let costs = network_layer_costs(&net, (h, w), &rates)?;
    let mut report = estimate_energy(&costs, net.spec.t, args.mac_per_step)?;
    report.informational.extend(gau_overhead_row(&net, (h, w))?);
    let csv = report.to_csv();
    match &args.report {
        Some(rp) => std::fs::write(rp, csv).map_err(|e| Error::io(rp.display().to_string(), e))?,
        None => print!("{csv}"),
    }
    println!("total_pj={}", report.total_pj());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Dynamics(a) => cmd_dynamics(a),
        Cmd::Energy(a) => cmd_energy(a),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

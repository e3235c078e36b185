use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use deep_rnn::checkpoint::Checkpoint;
use deep_rnn::config::{DatasetPreset, RunConfig};
use deep_rnn::data::{iter_subsequences, load_pianoroll, load_text_splits, symbol_frames, TextLevel, Vocabulary, PIANO_KEYS};
use deep_rnn::eval::{evaluate, MetricReport};
use deep_rnn::grad::{bptt, compare, finite_difference_grad, GradCheckReport};
use deep_rnn::init::{init_model, warm_start};
use deep_rnn::math::softmax_in_place;
use deep_rnn::model::{build, Network};
use deep_rnn::optimize::{sgd_train_with, TrainData};
use deep_rnn::{Architecture, Frame, HiddenState, ModelConfig, OutputHead, ParamSet, Rng};

/// Stream used for initialization so it never overlaps the per-update
/// weight-noise streams.
const INIT_STREAM: u64 = u64::MAX;
const GRADCHECK_MAX_PARAMS: usize = 5_000;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "drnn", version, about = "Train and evaluate deep recurrent sequence models")]
struct Cli {
    /// Run configuration (key=value file)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and resolved config
    Train,
    /// Score a dataset with a checkpoint
    Eval(EvalArgs),
    /// Compare backpropagated gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Generate symbols from a text model
    Sample(SampleArgs),
    /// Print the parameter count of a model
    Params(ParamsArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to model.ckpt in the configured output directory
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset file; overrides --split
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which configured split to score
    #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
    split: String,
    /// Subsequence length for the forward pass
    #[arg(long, default_value_t = 200)]
    chunk: usize,
    /// Print JSON instead of key=value lines
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Architecture for the built-in toy model
    #[arg(long, default_value = "rnn")]
    arch: Architecture,
    /// Check every architecture at toy size
    #[arg(long)]
    all: bool,
    /// Output head for the built-in toy model
    #[arg(long, default_value = "softmax")]
    head: OutputHead,
    /// Sequence length
    #[arg(long, default_value_t = 8)]
    length: usize,
    /// Perturb the analytic gradient of this parameter
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// 0 picks the most likely symbol at every step
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Text fed to the model before sampling; defaults to the first symbol
    #[arg(long)]
    prime: Option<String>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Used when no --config is given
    #[arg(long)]
    preset: Option<DatasetPreset>,
    #[arg(long, default_value = "rnn")]
    arch: Architecture,
    /// Input/output width for text presets
    #[arg(long)]
    vocab: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli, a),
        Command::Sample(a) => cmd_sample(&cli, a),
        Command::Params(a) => cmd_params(&cli, a),
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_deref().ok_or_else(|| anyhow!("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("`{key}` is not set in the config"))
}

struct Corpus {
    train: Vec<Vec<Frame>>,
    valid: Vec<Vec<Frame>>,
    vocab: Option<Vocabulary>,
}

fn music_frames(path: &Path) -> Result<Vec<Vec<Frame>>> {
    Ok(load_pianoroll(path)?.iter().map(|s| s.to_frames()).collect())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let train = required(&cfg.train, "train")?;
    let valid = required(&cfg.valid, "valid")?;
    if cfg.preset.is_music() {
        return Ok(Corpus {
            train: music_frames(train)?,
            valid: music_frames(valid)?,
            vocab: None,
        });
    }
    let level = if cfg.preset == DatasetPreset::Word {
        TextLevel::Word
    } else {
        TextLevel::Char
    };
    let text = load_text_splits(train, valid, None, level)?;
    Ok(Corpus {
        train: vec![symbol_frames(&text.train)],
        valid: vec![symbol_frames(&text.valid)],
        vocab: Some(text.vocab),
    })
}

fn cmd_train(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = load_run_config(cli)?;
    let corpus = load_corpus(&cfg)?;
    let width = corpus.vocab.as_ref().map_or(PIANO_KEYS, Vocabulary::size);
    cfg.model.input_dim = width;
    cfg.model.output_dim = width;
    cfg.validate()?;

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let resolved = cfg.out_dir.join("config.resolved");
    fs::write(&resolved, cfg.to_resolved_text()).with_context(|| format!("writing {}", resolved.display()))?;

    let fresh = init_model(&cfg.model, cfg.preset.init_preset(), &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
    let params = match &cfg.parent {
        None => fresh,
        Some(path) => {
            let parent = Checkpoint::load(path)?;
            if parent.vocab != corpus.vocab {
                bail!("{}: vocabulary differs from the training corpus", path.display());
            }
            warm_start(&cfg.model, &fresh, &parent.config, &parent.params)?
        }
    };

    let data = TrainData {
        train: iter_subsequences(&corpus.train, cfg.seq_len).collect(),
        valid: &corpus.valid,
        valid_chunk_len: cfg.seq_len,
    };
    let plan = cfg.plan()?;
    eprintln!(
        "training {} ({} parameters) on {} chunks",
        cfg.model.architecture,
        params.scalar_count(),
        data.train.len()
    );
    let result = sgd_train_with(&cfg.model, params, &data, &plan, |r| {
        eprintln!(
            "update {:>8}  lr {:.5}  train {:.5}  valid {:.5}",
            r.update, r.lr, r.train_nll, r.valid_nll
        )
    });
    let log_path = cfg.out_dir.join("train_log.csv");
    match result {
        Ok(outcome) => {
            fs::write(&log_path, outcome.log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
            let ckpt = cfg.out_dir.join("model.ckpt");
            Checkpoint::new(cfg.model.clone(), outcome.params, corpus.vocab).save(&ckpt)?;
            let best = outcome.log.best().map_or(f64::NAN, |r| r.valid_nll);
            eprintln!(
                "stopped ({}); best valid nll {best:.5}; wrote {}",
                outcome.log.terminal.map_or("-".to_string(), |t| t.to_string()),
                ckpt.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            fs::write(&log_path, failure.log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
            Err(failure.into())
        }
    }
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<ExitCode> {
    let cfg = if args.data.is_none() || args.checkpoint.is_none() {
        Some(load_run_config(cli)?)
    } else {
        None
    };
    let ckpt_path = match (&args.checkpoint, &cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.out_dir.join("model.ckpt"),
        (None, None) => unreachable!(),
    };
    let data_path = match (&args.data, &cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => {
            let split = match args.split.as_str() {
                "train" => &c.train,
                "valid" => &c.valid,
                _ => &c.test,
            };
            required(split, &args.split)?.to_path_buf()
        }
        (None, None) => unreachable!(),
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let seqs = match (&ckpt.vocab, ckpt.config.output_head) {
        (Some(vocab), _) => {
            let text = fs::read_to_string(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
            let encoded = vocab
                .encode(&text)
                .with_context(|| format!("encoding {}", data_path.display()))?;
            vec![symbol_frames(&encoded)]
        }
        (None, OutputHead::Bernoulli) => music_frames(&data_path)?,
        (None, OutputHead::Softmax) => bail!("{}: text checkpoint without a vocabulary", ckpt_path.display()),
    };
    let report = evaluate(&ckpt.params, &ckpt.config, &seqs, args.chunk)?;
    print_report(&report, args.json);
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.json"), report.to_json())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &MetricReport, json: bool) {
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_key_value());
    }
}

fn toy_config(arch: Architecture, head: OutputHead) -> ModelConfig {
    let c = ModelConfig::new(arch, 4, 4, 5).with_head(head);
    match arch {
        Architecture::Rnn => c,
        Architecture::Dt | Architecture::Dts => c.with_transition_inter(4),
        Architecture::Dot | Architecture::Dots => c.with_transition_inter(4).with_output_inter(3),
        Architecture::Srnn => c.with_levels(2),
    }
}

fn random_frames(rng: &mut Rng, config: &ModelConfig, len: usize) -> Vec<Frame> {
    (0..len)
        .map(|_| match config.output_head {
            OutputHead::Softmax => Frame::Symbol(rng.below(config.output_dim)),
            OutputHead::Bernoulli => {
                let k = 1 + rng.below(config.output_dim.min(3));
                let mut on = rng.sample_indices(config.output_dim, k);
                on.sort_unstable();
                Frame::MultiHot(on)
            }
        })
        .collect()
}

fn random_params(config: &ModelConfig, rng: &mut Rng) -> Result<ParamSet> {
    let (mut ps, _) = build(config)?;
    for p in ps.iter_mut() {
        p.value.as_mut_slice().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    }
    Ok(ps)
}

fn gradcheck_one(config: &ModelConfig, seed: u64, length: usize, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let (_, count) = build(config)?;
    if count > GRADCHECK_MAX_PARAMS {
        bail!("{count} parameters exceed the gradient-check limit of {GRADCHECK_MAX_PARAMS}");
    }
    if length < 2 {
        bail!("sequence length must be at least 2");
    }
    let mut rng = Rng::new(seed);
    let params = random_params(config, &mut rng)?;
    let frames = random_frames(&mut rng, config, length + 1);
    let h0 = HiddenState::zeros(config);
    let inputs = &frames[..length];
    let targets = &frames[1..];
    let mut analytic = bptt(&params, config, inputs, targets, &h0)?.grads;
    if let Some(name) = corrupt {
        let g = analytic
            .get_mut(name)
            .ok_or_else(|| anyhow!("no parameter `{name}` in {}", config.architecture))?;
        let v = g.get(0, 0);
        g.set(0, 0, v * 1.1 + 1e-3);
    }
    let numeric = finite_difference_grad(&params, config, inputs, targets, &h0, GRADCHECK_EPS)?;
    Ok(compare(&analytic, &numeric)?)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let configs: Vec<ModelConfig> = if let Some(path) = &cli.config {
        vec![RunConfig::load(path)?.model]
    } else if args.all {
        Architecture::ALL.iter().map(|&a| toy_config(a, args.head)).collect()
    } else {
        vec![toy_config(args.arch, args.head)]
    };
    let mut ok = true;
    for config in &configs {
        let report = gradcheck_one(config, seed, args.length, args.corrupt.as_deref())?;
        let pass = report.passes(GRADCHECK_TOL);
        ok &= pass;
        for p in &report.params {
            println!("{:<6} {:<8} max_rel_error={:.3e}", config.architecture, p.name, p.max_rel_error);
        }
        match (pass, report.worst()) {
            (true, _) => println!("{}: PASS (max {:.3e})", config.architecture, report.max_rel_error()),
            (false, Some(w)) => println!(
                "{}: FAIL in `{}` (max {:.3e} at entry {})",
                config.architecture, w.name, w.max_rel_error, w.worst_index
            ),
            (false, None) => println!("{}: FAIL", config.architecture),
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Index drawn from `probs` sharpened or flattened by `temperature`.
fn draw(probs: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature == 0.0 {
        return probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
    }
    let mut logits: Vec<f64> = probs.iter().map(|p| p.ln() / temperature).collect();
    softmax_in_place(&mut logits);
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in logits.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    logits.len() - 1
}

fn cmd_sample(cli: &Cli, args: &SampleArgs) -> Result<ExitCode> {
    if !(args.temperature >= 0.0) {
        bail!("temperature must be non-negative");
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if ckpt.config.output_head != OutputHead::Softmax {
        bail!("sampling needs a softmax-head (text) model");
    }
    let prime: Vec<usize> = match (&args.prime, &ckpt.vocab) {
        (Some(text), Some(v)) => v.encode(text)?,
        (Some(_), None) => bail!("--prime needs a checkpoint with a vocabulary"),
        (None, _) => vec![0],
    };
    if prime.is_empty() {
        bail!("--prime is empty");
    }
    let net = Network::new(&ckpt.config, &ckpt.params)?;
    let mut rng = Rng::new(cli.seed.unwrap_or(0));
    let mut h = HiddenState::zeros(&ckpt.config);
    for &s in &prime {
        h = net.step_transition(&Frame::Symbol(s), &h)?;
    }
    let mut out = Vec::with_capacity(args.length);
    for _ in 0..args.length {
        let probs = net.step_output(&h)?;
        let s = draw(&probs, args.temperature, &mut rng);
        out.push(s);
        h = net.step_transition(&Frame::Symbol(s), &h)?;
    }
    match &ckpt.vocab {
        Some(v) => println!("{}", v.decode(&out)),
        None => println!("{}", out.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_params(cli: &Cli, args: &ParamsArgs) -> Result<ExitCode> {
    let model = match (&cli.config, args.preset) {
        (Some(_), _) => load_run_config(cli)?.model,
        (None, Some(preset)) => {
            let mut m = preset.model(args.arch);
            if let Some(v) = args.vocab {
                m.input_dim = v;
                m.output_dim = v;
            }
            m
        }
        (None, None) => bail!("give --config or --preset"),
    };
    let (params, total) = build(&model)?;
    println!("architecture {}", model.architecture);
    for p in &params {
        let (r, c) = p.value.shape();
        println!("  {:<8} {:>6} x {:<6} {:>10}", p.name, r, c, r * c);
    }
    println!("total {total}");
    Ok(ExitCode::SUCCESS)
}

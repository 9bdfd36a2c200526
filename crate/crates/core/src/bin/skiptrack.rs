use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use skiptrack::backbone::ForwardMode;
use skiptrack::bench::{bench_forward, forward, ForwardInput, ForwardReport};
use skiptrack::config::ModelConfig;
use skiptrack::mask::{generate_mask, mask_statistics, MaskConfig, MaskMode, MaskSimReport};
use skiptrack::model::{ModelWeights, NamedTensors};
use skiptrack::rng::SeededRng;
use skiptrack::select::{
    gradient_check, train_selector, GradCheckConfig, SelectorMlp, SyntheticTask, TrainConfig, TrainReport,
};
use skiptrack::tracker::{track_sequence, SequenceManifest, TrackerConfig};
use skiptrack::weights::{load_dataset, load_weights, save_dataset, save_weights};
use skiptrack::Error;

#[derive(Parser)]
#[command(name = "skiptrack", version, about = "Layer-skipping ViT tracker engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random weight file for a configuration.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one forward pass and print what it decided.
    Forward {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "skip")]
        mode: ForwardMode,
        /// Weight-format file holding `template` and `search` image tensors.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time forwards in full or skip mode.
    Bench {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "skip")]
        mode: ForwardMode,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Track a frame sequence described by a JSON manifest; writes JSON lines.
    Track {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte-Carlo statistics of block masks.
    MaskSim {
        #[arg(long, default_value = "cox")]
        mode: MaskMode,
        #[arg(long, default_value = "8x8", value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        bandwidth: f64,
        /// Per-cell mask frequencies.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// The pattern drawn with `--seed`, 16 pixels per block.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Train a layer selector on a dataset file.
    SelectTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 160)]
        hidden: usize,
        /// Minibatch size; full batch when omitted.
        #[arg(long)]
        batch: Option<usize>,
        /// Place output rows between class-conditional hidden means before training.
        #[arg(long)]
        warm_start: bool,
    },
    /// Write a synthetic selector dataset from a random linear labeller.
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        input: usize,
        #[arg(long, default_value_t = 4)]
        choices: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the selector gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// List the tensors in a weight file.
    InspectWeights {
        #[arg(long)]
        path: PathBuf,
        /// Also check completeness against this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("grid sides must be positive".into());
    }
    Ok((h, w))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ModelConfig> {
    Ok(match path {
        Some(p) => ModelConfig::from_json_file(p)?,
        None => ModelConfig::default(),
    })
}

fn load_model(path: Option<&Path>, cfg: &ModelConfig, seed: u64) -> anyhow::Result<ModelWeights> {
    Ok(match path {
        Some(p) => ModelWeights::from_named(cfg, &load_weights(p)?)
            .with_context(|| format!("{} does not fit the configuration", p.display()))?,
        None => ModelWeights::init(cfg, seed)?,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::InitWeights { seed, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let model = ModelWeights::init(&cfg, seed)?;
            save_weights(&out, &model.to_named())?;
            print_json(&serde_json::json!({
                "tensors": model.named().len(),
                "parameters": model.param_count(),
                "config_fingerprint": cfg.fingerprint(),
            }))
        }
        Command::Forward { weights, config, mode, input, seed } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(weights.as_deref(), &cfg, seed)?;
            let input = match input {
                Some(p) => read_input(&load_weights(&p)?)?,
                None => ForwardInput::random(&cfg, seed),
            };
            let out = forward(&input, &model, &cfg, mode)?;
            print_json(&ForwardReport::new(mode, &out))
        }
        Command::Bench { weights, config, mode, iters, warmup, seed, json } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(weights.as_deref(), &cfg, seed)?;
            let r = bench_forward(&cfg, &model, mode, iters, warmup, seed)?;
            if json {
                print_json(&r)
            } else {
                println!(
                    "{} x{}: mean {:.1} us, median {:.1} us, p95 {:.1} us, {:.2} fwd/s, {:.3} GFLOP",
                    r.mode,
                    r.iterations,
                    r.mean_us,
                    r.median_us,
                    r.p95_us,
                    r.throughput,
                    r.flops as f64 / 1e9
                );
                Ok(())
            }
        }
        Command::Track { weights, config, manifest, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(weights.as_deref(), &cfg, seed)?;
            let text = std::fs::read_to_string(&manifest)?;
            let seq: SequenceManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", manifest.display())))?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let frames = (0..seq.frames.len()).map(|i| seq.load_frame(base, i));
            let records = track_sequence(frames, seq.initial_box()?, &model, &cfg, &TrackerConfig::default())?;
            let mut sink: Box<dyn Write> = match out {
                Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            for r in &records {
                writeln!(sink, "{}", serde_json::to_string(r)?)?;
            }
            sink.flush()?;
            Ok(())
        }
        Command::MaskSim { mode, grid, ratio, trials, seed, bandwidth, csv, pgm } => {
            let cfg = MaskConfig {
                mode,
                mask_ratio: ratio,
                seed,
                cox_bandwidth_frac: bandwidth,
                ..MaskConfig::with_grid(grid.0, grid.1, MaskConfig::default().block_side)
            };
            cfg.validate().map_err(|e| Error::Argument(e.to_string()))?;
            let stats = mask_statistics(&cfg, trials)?;
            if let Some(p) = csv {
                std::fs::write(p, stats.to_csv())?;
            }
            if let Some(p) = pgm {
                std::fs::write(p, generate_mask(&cfg)?.to_pgm(16))?;
            }
            print_json(&MaskSimReport::new(&cfg, &stats))
        }
        Command::SelectTrain { dataset, out, lr, epochs, seed, hidden, batch, warm_start } => {
            let data = load_dataset(&dataset)?;
            let mut rng = SeededRng::new(seed);
            let mut mlp = SelectorMlp::init(data.input_dim(), hidden, data.choices(), &mut rng);
            if warm_start {
                mlp.warm_start_head(&data, 4.0)?;
            }
            let tcfg = TrainConfig { lr, epochs, seed, batch_size: batch };
            let trained = train_selector(&data, &mlp, &tcfg)?;
            let named: NamedTensors = trained
                .mlp
                .named()
                .into_iter()
                .map(|(n, t)| (format!("selector.{n}"), t.clone()))
                .collect();
            save_weights(&out, &named)?;
            print_json(&TrainReport::new(&data, &tcfg, &mlp, &trained.mlp)?)
        }
        Command::SynthDataset { out, samples, input, choices, seed } => {
            if samples == 0 || input == 0 || choices == 0 {
                bail!(Error::Argument("samples, input and choices must be positive".into()));
            }
            let data = SyntheticTask::new(input, choices, seed).sample(samples, seed.wrapping_add(1));
            save_dataset(&out, &data)?;
            print_json(&serde_json::json!({ "samples": samples, "input_dim": input, "choices": choices }))
        }
        Command::Gradcheck { seed, points } => {
            let r = gradient_check(&GradCheckConfig { seed, points, ..GradCheckConfig::default() })?;
            println!("max relative error: {:e}", r.max_rel_error);
            print_json(&r)?;
            if r.max_rel_error >= 1e-4 {
                bail!(Error::Degenerate(format!("gradient mismatch {:e}", r.max_rel_error)));
            }
            Ok(())
        }
        Command::InspectWeights { path, config } => {
            let named = load_weights(&path)?;
            let mut total = 0usize;
            for (name, t) in &named {
                println!("{name}\t{:?}\t{}", t.dims(), t.len());
                total += t.len();
            }
            println!("{} tensors, {total} values", named.len());
            if let Some(c) = config {
                let cfg = ModelConfig::from_json_file(&c)?;
                let missing: Vec<_> = ModelWeights::expected(&cfg)?
                    .into_iter()
                    .filter(|(n, d)| named.get(n).map_or(true, |t| t.dims() != d.as_slice()))
                    .map(|(n, _)| n)
                    .collect();
                if !missing.is_empty() {
                    bail!(Error::MissingTensor(missing.join(", ")));
                }
                println!("complete for config {}", cfg.fingerprint());
            }
            Ok(())
        }
    }
}

fn read_input(named: &NamedTensors) -> anyhow::Result<ForwardInput> {
    let get = |k: &str| named.get(k).cloned().ok_or_else(|| Error::MissingTensor(k.into()));
    Ok(ForwardInput {
        template: get("template")?,
        search: get("search")?,
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Argument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

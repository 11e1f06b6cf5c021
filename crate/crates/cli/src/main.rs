use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use q8llama::checkpoint::{load_fp32_checkpoint, load_model, write_quantized_checkpoint};
use q8llama::eval::{perplexity, read_token_stream, Session};
use q8llama::perf::{fpga_latency_ms, CycleTable, Device, DeviceRun, EnergyProfile, Mode};
use q8llama::quant::DEFAULT_GROUP_SIZE;
use q8llama::sampler::{Sampler, SamplerConfig};
use q8llama::tokenizer::{Tokenizer, BOS};
use q8llama::{ModelConfig, Transformer};

#[derive(Parser)]
#[command(name = "q8llama", version, about = "Int8 Llama 2 inference and FPGA latency/energy estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Kv,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimateMode {
    Table,
    Compose,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an fp32 checkpoint to the grouped int8 format.
    Quantize {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
    },
    /// Sample text from a model.
    Generate {
        model: PathBuf,
        tokenizer: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Number of positions to run; 0 or anything past the context means the full context.
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long, default_value_t = 1.0)]
        top_p: f32,
        /// RNG seed; defaults to the current time.
        #[arg(long)]
        seed: Option<u64>,
        /// Group size used when quantizing an fp32 checkpoint on load.
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
    },
    /// Perplexity of a model on a text file.
    Perplexity {
        model: PathBuf,
        tokenizer: PathBuf,
        text: PathBuf,
        /// Treat the text file as little-endian i32 token ids.
        #[arg(long)]
        pretokenized: bool,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Estimate FPGA latency and energy and compare against CPU/GPU baselines.
    Estimate {
        /// `builtin` or a path to a cycle table file.
        #[arg(long, default_value = "builtin")]
        table: String,
        #[arg(long, default_value_t = 256)]
        tokens: usize,
        #[arg(long, value_enum, default_value_t = EstimateMode::Table)]
        mode: EstimateMode,
        #[arg(long, default_value_t = 9.0)]
        power_fpga: f64,
        /// Defaults to the published figure for --tokens.
        #[arg(long)]
        power_cpu: Option<f64>,
        #[arg(long)]
        power_gpu: Option<f64>,
        /// Per-token latency in ms; defaults to the published figure for --tokens.
        #[arg(long)]
        latency_cpu: Option<f64>,
        #[arg(long)]
        latency_gpu: Option<f64>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Quantize { input, output, group_size } => quantize(&input, &output, group_size),
        Command::Generate { model, tokenizer, prompt, steps, temperature, top_p, seed, group_size } => {
            let rng_seed =
                seed.unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
            let sampler = SamplerConfig { temperature, top_p, rng_seed };
            generate(&model, &tokenizer, &prompt, steps, sampler, group_size)
        }
        Command::Perplexity { model, tokenizer, text, pretokenized, group_size, format } => {
            eval_perplexity(&model, &tokenizer, &text, pretokenized, group_size, format)
        }
        Command::Estimate {
            table,
            tokens,
            mode,
            power_fpga,
            power_cpu,
            power_gpu,
            latency_cpu,
            latency_gpu,
            format,
        } => {
            let baseline = |d: Device, power: Option<f64>, latency: Option<f64>| -> Result<DeviceRun> {
                let published = DeviceRun::published(d, tokens);
                let power = match (power, &published) {
                    (Some(p), _) => p,
                    (None, Ok(r)) => r.profile.avg_power_watts,
                    (None, Err(e)) => bail!("{e}; pass --power-{}", d.name()),
                };
                let latency_ms = match (latency, &published) {
                    (Some(l), _) => l,
                    (None, Ok(r)) => r.latency_ms,
                    (None, Err(e)) => bail!("{e}; pass --latency-{}", d.name()),
                };
                Ok(DeviceRun { profile: EnergyProfile::new(d.name(), power)?, latency_ms })
            };
            let cpu = baseline(Device::Cpu, power_cpu, latency_cpu)?;
            let gpu = baseline(Device::Gpu, power_gpu, latency_gpu)?;
            estimate(&table, tokens, mode, power_fpga, cpu, gpu, format)
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn quantize(input: &Path, output: &Path, group_size: usize) -> Result<()> {
    let (config, fp) = load_fp32_checkpoint(&read(input)?).with_context(|| format!("loading {}", input.display()))?;
    let (weights, stats) = fp.quantize(&config, group_size)?;
    let bytes = write_quantized_checkpoint(&config, &weights)?;
    std::fs::write(output, &bytes).with_context(|| format!("cannot write {}", output.display()))?;
    println!("wrote {} ({} bytes, group size {group_size})", output.display(), bytes.len());
    println!("elements={}", stats.count);
    println!("max_abs_error={:e}", stats.max_abs_error);
    println!("rmse={:e}", stats.rmse);
    println!("max_scale={:e}", stats.max_scale);
    Ok(())
}

fn load(model: &Path, tokenizer: &Path, group_size: usize) -> Result<(Transformer, Tokenizer)> {
    let model = load_model(model, group_size).with_context(|| format!("loading {}", model.display()))?;
    let tok = Tokenizer::load(&read(tokenizer)?, model.config().vocab_size)
        .with_context(|| format!("loading {}", tokenizer.display()))?;
    Ok((model, tok))
}

fn generate(
    model_path: &Path,
    tok_path: &Path,
    prompt: &str,
    steps: usize,
    sampler: SamplerConfig,
    group_size: usize,
) -> Result<()> {
    let mut sampler = Sampler::new(sampler)?;
    let (model, tok) = load(model_path, tok_path, group_size)?;
    let seq_len = model.config().seq_len;
    let steps = if steps == 0 || steps > seq_len { seq_len } else { steps };
    let prompt_tokens = tok.encode(prompt.as_bytes(), true, false);
    if prompt_tokens.len() > steps {
        bail!("prompt is {} tokens but only {steps} steps are available", prompt_tokens.len());
    }

    let mut state = model.new_state();
    let mut out = std::io::stdout().lock();
    let mut token = prompt_tokens[0];
    let mut timer: Option<Instant> = None;
    let mut pos = 0;
    while pos < steps {
        let logits = model.forward(&mut state, token as usize, pos)?;
        let next = match prompt_tokens.get(pos + 1) {
            Some(&t) => t,
            None => sampler.sample(logits)? as u32,
        };
        pos += 1;
        if next == BOS {
            break;
        }
        out.write_all(tok.decode(token, next)?)?;
        out.flush()?;
        token = next;
        // First token is warm-up.
        timer.get_or_insert_with(Instant::now);
    }
    writeln!(out)?;
    if let Some(t) = timer {
        let timed = pos.saturating_sub(1);
        if timed > 0 {
            let secs = t.elapsed().as_secs_f64();
            eprintln!("achieved tok/s: {:.2} ({timed} tokens in {:.3} s)", timed as f64 / secs, secs);
        }
    }
    Ok(())
}

fn eval_perplexity(
    model_path: &Path,
    tok_path: &Path,
    text: &Path,
    pretokenized: bool,
    group_size: usize,
    format: Format,
) -> Result<()> {
    let (model, tok) = load(model_path, tok_path, group_size)?;
    let bytes = read(text)?;
    let tokens = if pretokenized {
        read_token_stream(&bytes, model.config().vocab_size)?
    } else {
        tok.encode(&bytes, false, false)
    };
    let p = perplexity(&mut Session::new(&model), &tokens)?;
    match format {
        Format::Text => println!("perplexity {:.4} over {} tokens in {} windows", p.ppl, p.count, p.windows),
        Format::Kv => {
            println!("ppl={:.6}", p.ppl);
            println!("mean_nll={:.6}", p.mean_nll);
            println!("tokens={}", p.count);
            println!("windows={}", p.windows);
        }
    }
    Ok(())
}

fn estimate(
    table: &str,
    tokens: usize,
    mode: EstimateMode,
    power_fpga: f64,
    cpu: DeviceRun,
    gpu: DeviceRun,
    format: Format,
) -> Result<()> {
    let table = if table == "builtin" {
        CycleTable::builtin()
    } else {
        let text = String::from_utf8(read(Path::new(table))?).context("cycle table is not UTF-8")?;
        CycleTable::parse(&text).with_context(|| format!("parsing {table}"))?
    };
    let config = ModelConfig::STORIES_110M;
    if tokens == 0 || tokens > config.seq_len {
        bail!("--tokens must be between 1 and {}", config.seq_len);
    }
    let mode = match mode {
        EstimateMode::Table => Mode::Table,
        EstimateMode::Compose => Mode::Compose,
    };
    let fpga = DeviceRun {
        profile: EnergyProfile::new("fpga", power_fpga)?,
        latency_ms: fpga_latency_ms(&config, &table, mode, tokens)?,
    };
    let report = q8llama::perf::efficiency_report(&[fpga, cpu, gpu], "fpga")?;
    let mode_name = match mode {
        Mode::Table => "table",
        Mode::Compose => "compose",
    };
    match format {
        Format::Text => {
            println!("fpga latency model: {mode_name}, {tokens} tokens, {} ns clock", table.clock_period_ns());
            print!("{}", report.to_text());
        }
        Format::Kv => {
            println!("mode={mode_name}");
            println!("tokens={tokens}");
            println!("clock_period_ns={}", table.clock_period_ns());
            print!("{}", report.to_kv());
        }
    }
    Ok(())
}

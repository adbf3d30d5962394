use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use armd::corpus::{
    detokenize, load_bytes, synthetic_markov_corpus, tokenize, CorpusSplit, MarkovChain,
};
use armd::evalcli::{
    eval_perplexity, mean_unigram_entropy, run_invariant_suite_with, timed, unigram_entropy,
    EvalReport, SuiteOptions,
};
use armd::masks::build_masks;
use armd::model::{flops_estimate, DEFAULT_FFN_EXPANSION};
use armd::sampler::{generate_with_plan, GenerationOutput, GenerationPlan};
use armd::schedule::{make_plan_from_tau, strided_permutation, BlockPlan};
use armd::trainer::{load_checkpoint, train, Checkpoint, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Block-causal masked diffusion language models: training, decoding and checks.
#[derive(Parser)]
#[command(name = "armd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and checkpoints into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training text: one file, or a directory read in filename order.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line to stderr every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Sample one or more sequences from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        length: usize,
        /// Parallel streams; 1 decodes one token per call.
        #[arg(long, default_value_t = 1)]
        streams: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Also print the decoding plan (`n T` header, then tau values) to stderr.
        #[arg(long)]
        dump_plan: bool,
    },
    /// Validation perplexity, optionally with sample entropy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Window length; defaults to the checkpoint's training length.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        validation_fraction: Option<f64>,
        /// Number of samples for the entropy column (0 skips sampling).
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        streams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Unigram entropy of generated samples, or of the bytes of a file.
    Entropy {
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        streams: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Print a block plan.
    DumpPlan {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        csv: bool,
        /// Print the `n T` / tau text form instead of JSON.
        #[arg(long, conflicts_with = "csv")]
        text: bool,
    },
    /// Print the causal and strict masks of a block plan.
    DumpMask {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        csv: bool,
        /// Render rows of `0`/`1` characters instead of JSON.
        #[arg(long, conflicts_with = "csv")]
        render: bool,
    },
    /// Forward FLOPs of a two-stream stack against a standard one.
    Flops {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        two_stream_layers: usize,
        #[arg(long, default_value_t = DEFAULT_FFN_EXPANSION)]
        expansion: f64,
        #[arg(long)]
        csv: bool,
    },
    /// Run the invariant suite; exits nonzero naming any failed invariant.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fault injection: open one same-block entry of the strict mask.
        #[arg(long)]
        corrupt_strict_mask: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Write a synthetic corpus sampled from the built-in 16-symbol Markov chain.
    Markov {
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

/// Exactly one way of describing a plan.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct PlanArgs {
    /// Comma-separated masking timesteps, one per position.
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<usize>>,
    /// Left-to-right plan of this length.
    #[arg(long)]
    identity: Option<usize>,
    /// Strided plan as `N,S`.
    #[arg(long, value_delimiter = ',')]
    strided: Option<Vec<usize>>,
    /// Plan file in the `n T` / tau text form.
    #[arg(long)]
    plan_file: Option<PathBuf>,
}

impl PlanArgs {
    fn build(&self) -> Result<BlockPlan> {
        Ok(if let Some(tau) = &self.tau {
            let t = tau.iter().copied().max().unwrap_or(0);
            make_plan_from_tau(tau, t)?
        } else if let Some(n) = self.identity {
            BlockPlan::identity(n)?
        } else if let Some(ns) = &self.strided {
            let [n, s] = ns[..] else {
                bail!("--strided takes N,S")
            };
            strided_permutation(n, s)?
        } else if let Some(path) = &self.plan_file {
            BlockPlan::from_text(&fs::read_to_string(path)?)?
        } else {
            bail!("no plan given")
        })
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn print_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn emit<T: Serialize>(value: &T, csv: bool) -> Result<()> {
    if csv {
        print_csv([value])
    } else {
        print_json(value)
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn generation_plan(length: usize, streams: usize) -> Result<GenerationPlan> {
    if streams <= 1 {
        Ok(GenerationPlan::sequential(length)?)
    } else {
        Ok(GenerationPlan::strided(length, streams)?)
    }
}

fn sample_many(
    ck: &Checkpoint,
    count: usize,
    length: usize,
    streams: usize,
    temperature: f64,
    seed: u64,
) -> Result<(Vec<GenerationOutput>, f64)> {
    let gen = generation_plan(length, streams)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (outs, secs) = timed(|| {
        (0..count)
            .map(|_| generate_with_plan(&ck.params, &ck.model, &gen, temperature, &mut rng))
            .collect::<armd::Result<Vec<_>>>()
    });
    Ok((outs?, secs))
}

fn split_for(
    ck: &Checkpoint,
    data: &Path,
    seq_len: Option<usize>,
    fraction: Option<f64>,
) -> Result<CorpusSplit> {
    let defaults = ck.train.clone().unwrap_or_default();
    let seq_len = seq_len.unwrap_or(defaults.seq_len);
    let fraction = fraction.unwrap_or(defaults.validation_fraction);
    Ok(CorpusSplit::new(
        tokenize(&load_bytes(data)?),
        fraction,
        seq_len,
        seq_len,
    )?)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: f64,
    validation_nll: Option<f64>,
    perplexity: Option<f64>,
    out: String,
}

#[derive(Serialize)]
struct EntropyReport {
    sequences: usize,
    mean_unigram_entropy: f64,
    model_calls: Option<usize>,
}

#[derive(Serialize)]
struct PlanRow {
    slot: usize,
    position: usize,
    block: usize,
    tau: usize,
}

#[derive(Serialize)]
struct PlanDump {
    n: usize,
    t_blocks: usize,
    tau: Vec<usize>,
    pi: Vec<usize>,
    block_of: Vec<usize>,
    block_sizes: Vec<usize>,
}

#[derive(Serialize)]
struct MaskDump {
    n: usize,
    causal: Vec<String>,
    strict: Vec<String>,
}

#[derive(Serialize)]
struct MaskRow {
    mask: &'static str,
    row: usize,
    bits: String,
}

#[derive(Serialize)]
struct FlopsRow {
    n: usize,
    d: usize,
    layers: usize,
    two_stream_layers: usize,
    expansion: f64,
    c_std: f64,
    c_extra: f64,
    total: f64,
    ratio: f64,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            log_every,
        } => {
            let cfg = TrainConfig::from_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let tokens = tokenize(&load_bytes(&data)?);
            let split = CorpusSplit::new(tokens, cfg.validation_fraction, cfg.seq_len, cfg.stride)?;
            let outcome = train(&cfg, &split, Some(&out), |m| {
                if log_every > 0 && m.step % log_every == 0 {
                    eprintln!(
                        "step {:>6}  loss {:.4}  grad {:.3}  perm {:>3}  lr {:.2e}  {:.0} tok/s",
                        m.step, m.loss, m.grad_norm, m.perm_count, m.lr, m.tokens_per_second
                    );
                }
            })?;
            let validation = if split.validation_windows().is_empty() {
                None
            } else {
                Some(eval_perplexity(&outcome.params, &cfg.model, &split)?)
            };
            print_json(&TrainSummary {
                steps: outcome.metrics.len(),
                final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
                validation_nll: validation.map(|v| v.0),
                perplexity: validation.map(|v| v.1),
                out: out.display().to_string(),
            })?;
        }
        Command::Generate {
            checkpoint,
            length,
            streams,
            temperature,
            seed,
            format,
            dump_plan,
        } => {
            let ck = load(&checkpoint)?;
            let gen = generation_plan(length, streams)?;
            if dump_plan {
                eprint!("{}", gen.plan.to_text());
            }
            let out = generate_with_plan(
                &ck.params,
                &ck.model,
                &gen,
                temperature,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )?;
            match format {
                Format::Json => print_json(&out)?,
                Format::Text => {
                    let mut stdout = io::stdout().lock();
                    stdout.write_all(&detokenize(&out.tokens)?)?;
                    writeln!(stdout)?;
                }
            }
        }
        Command::Eval {
            checkpoint,
            data,
            seq_len,
            validation_fraction,
            samples,
            streams,
            seed,
            csv,
        } => {
            let ck = load(&checkpoint)?;
            let split = split_for(&ck, &data, seq_len, validation_fraction)?;
            let (nll, _) = eval_perplexity(&ck.params, &ck.model, &split)?;
            let mut report = EvalReport::from_nll(nll, split.validation_windows().len());
            if samples > 0 {
                let (outs, secs) = sample_many(&ck, samples, split.seq_len, streams, 1.0, seed)?;
                let seqs: Vec<Vec<usize>> = outs.iter().map(|o| o.tokens.clone()).collect();
                report.mean_unigram_entropy = Some(mean_unigram_entropy(&seqs)?);
                report.model_calls = outs.first().map(|o| o.model_calls);
                report.seconds_per_sequence = Some(secs / samples as f64);
            }
            emit(&report, csv)?;
        }
        Command::Entropy {
            checkpoint,
            data,
            samples,
            length,
            streams,
            temperature,
            seed,
            csv,
        } => {
            let report = match (checkpoint, data) {
                (Some(path), _) => {
                    let ck = load(&path)?;
                    let (outs, _) = sample_many(&ck, samples, length, streams, temperature, seed)?;
                    let seqs: Vec<Vec<usize>> = outs.iter().map(|o| o.tokens.clone()).collect();
                    EntropyReport {
                        sequences: seqs.len(),
                        mean_unigram_entropy: mean_unigram_entropy(&seqs)?,
                        model_calls: outs.first().map(|o| o.model_calls),
                    }
                }
                (None, Some(path)) => EntropyReport {
                    sequences: 1,
                    mean_unigram_entropy: unigram_entropy(&tokenize(&load_bytes(&path)?))?,
                    model_calls: None,
                },
                (None, None) => bail!("give --checkpoint or --data"),
            };
            emit(&report, csv)?;
        }
        Command::DumpPlan { plan, csv, text } => {
            let plan = plan.build()?;
            if text {
                print!("{}", plan.to_text());
            } else if csv {
                print_csv((0..plan.n()).map(|slot| PlanRow {
                    slot,
                    position: plan.pi()[slot],
                    block: plan.block_of()[slot],
                    tau: plan.tau()[plan.pi()[slot]],
                }))?;
            } else {
                print_json(&PlanDump {
                    n: plan.n(),
                    t_blocks: plan.t_blocks(),
                    tau: plan.tau().to_vec(),
                    pi: plan.pi().to_vec(),
                    block_of: plan.block_of().to_vec(),
                    block_sizes: plan.block_sizes().to_vec(),
                })?;
            }
        }
        Command::DumpMask { plan, csv, render } => {
            let plan = plan.build()?;
            let masks = build_masks(&plan);
            let rows = |m: &armd::masks::MaskMatrix| -> Vec<String> {
                m.render().lines().map(String::from).collect()
            };
            if render {
                println!(
                    "causal\n{}\nstrict\n{}",
                    masks.causal.render().trim_end(),
                    masks.strict.render().trim_end()
                );
            } else if csv {
                let named = [
                    ("causal", rows(&masks.causal)),
                    ("strict", rows(&masks.strict)),
                ];
                print_csv(named.iter().flat_map(|(mask, rs)| {
                    rs.iter().enumerate().map(move |(row, bits)| MaskRow {
                        mask,
                        row,
                        bits: bits.clone(),
                    })
                }))?;
            } else {
                print_json(&MaskDump {
                    n: plan.n(),
                    causal: rows(&masks.causal),
                    strict: rows(&masks.strict),
                })?;
            }
        }
        Command::Flops {
            n,
            d,
            layers,
            two_stream_layers,
            expansion,
            csv,
        } => {
            let f = flops_estimate(n, d, layers, two_stream_layers, expansion)?;
            emit(
                &FlopsRow {
                    n,
                    d,
                    layers,
                    two_stream_layers,
                    expansion,
                    c_std: f.c_std,
                    c_extra: f.c_extra,
                    total: f.total,
                    ratio: f.ratio,
                },
                csv,
            )?;
        }
        Command::Verify {
            seed,
            corrupt_strict_mask,
            csv,
        } => {
            let report = run_invariant_suite_with(
                seed,
                &SuiteOptions {
                    corrupt_strict_mask,
                },
            );
            if csv {
                print_csv(&report.results)?;
            } else {
                print_json(&report)?;
            }
            let failed = report.failures();
            if !failed.is_empty() {
                for f in failed {
                    eprintln!("FAILED {}::{}: {}", f.module, f.name, f.detail);
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Markov { length, seed, out } => {
            let chain = MarkovChain::toy();
            let bytes = synthetic_markov_corpus(
                chain.symbols().to_vec(),
                chain.table().to_vec(),
                length,
                seed,
            )?;
            fs::write(&out, bytes)?;
            eprintln!("entropy rate {:.6} nats/token", chain.entropy_rate());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}

//! Command-line runner for QCBM-WGAN experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qcbm_wgan::data::{self, EbsdBatch, Phase};
use qcbm_wgan::harness::{self, Comparison, TrainConfig};
use qcbm_wgan::metrics;
use qcbm_wgan::nn::Checkpoint;
use qcbm_wgan::quantum_sim::{self, Circuit, Connectivity};
use qcbm_wgan::transpile::{self, T_1Q, T_2Q};
use qcbm_wgan::{Error, Result};

#[derive(Parser)]
#[command(name = "qcbm-wgan", version, about = "QCBM-WGAN experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file or a preset name.
    Train {
        config: String,
        /// Output directory (default `runs/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. `--set epochs=50`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Relative improvement of `log_q` over `log_b` on tail-averaged MMD.
    Compare {
        log_b: PathBuf,
        log_q: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
    /// Run a config once per seed and write aggregate curves.
    Suite {
        config: String,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a synthetic EBSD1 dataset.
    GenData {
        n: usize,
        size: usize,
        phase: Phase,
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate images from a checkpoint into an EBSD1 container.
    Sample {
        checkpoint: PathBuf,
        n: usize,
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write one grayscale PNG per image and channel here.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Print a circuit in CNOT-decomposed or native form.
    ///
    /// `circuit` is a circuit text file or `ansatz:<qubits>,<layers>,<full|reduced>`.
    Transpile {
        circuit: String,
        #[arg(long, conflicts_with = "cnot")]
        native: bool,
        #[arg(long)]
        cnot: bool,
        /// Comma-separated parameter values for `--native`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        /// Seed for the near-identity start when `--theta` is absent.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(spec: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut config = if Path::new(spec).is_file() {
        TrainConfig::load(spec)?
    } else if harness::PRESETS.contains(&spec) {
        harness::preset(spec)?
    } else {
        return Err(Error::config(
            "config",
            format!("{spec:?} is neither a file nor a preset ({})", harness::PRESETS.join(", ")),
        ));
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::parse("override", o.as_str()))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn load_circuit(spec: &str) -> Result<Circuit> {
    if let Some(args) = spec.strip_prefix("ansatz:") {
        let parts: Vec<&str> = args.split(',').collect();
        let [n, layers, conn] = parts.as_slice() else {
            return Err(Error::parse("ansatz", args));
        };
        let n = n.parse().map_err(|_| Error::parse("qubits", *n))?;
        let layers = layers.parse().map_err(|_| Error::parse("layers", *layers))?;
        let conn: Connectivity = conn.parse()?;
        return quantum_sim::build_qcbm_ansatz(n, layers, conn);
    }
    transpile::read_circuit(&std::fs::read_to_string(spec)?)
}

fn write_pngs(batch: &EbsdBatch, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..batch.len() {
        for c in 0..qcbm_wgan::nn::CHANNELS {
            let img = image::GrayImage::from_raw(
                batch.width as u32,
                batch.height as u32,
                batch.channel(i, c).to_vec(),
            )
            .ok_or_else(|| Error::invalid("channel buffer does not match image size"))?;
            img.save(dir.join(format!("img{i:04}_ch{c}.png")))
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            overrides,
        } => {
            let config = load_config(&config, &overrides)?;
            let out = out.unwrap_or_else(|| Path::new("runs").join(&config.name));
            let result = harness::run_training(&config, Some(&out))?;
            let last = result.records.last().expect("at least one epoch");
            println!(
                "{}: {} epochs, final mmd {:.6e}, theta updates {}, executions {}+{}, output {}",
                config.name,
                result.records.len(),
                last.mmd,
                result.theta_updates,
                result.executions.0,
                result.executions.1,
                out.display()
            );
        }
        Command::Compare {
            log_b,
            log_q,
            window,
        } => {
            let b = metrics::load_log(&log_b)?;
            let q = metrics::load_log(&log_q)?;
            let cmp = harness::compare_runs(&b, &q, window)?;
            println!("{}", Comparison::HEADER);
            println!("{}", cmp.row());
        }
        Command::Suite {
            config,
            seeds,
            out,
            overrides,
        } => {
            let config = load_config(&config, &overrides)?;
            let out = out.unwrap_or_else(|| Path::new("runs").join(format!("{}-suite", config.name)));
            let report = harness::run_suite(&config, &seeds, Some(&out))?;
            let last = report.mean.len() - 1;
            println!(
                "{}: {} seeds, final mean mmd {:.6e} ± {:.3e}, output {}",
                config.name,
                seeds.len(),
                report.mean[last],
                report.std[last],
                out.display()
            );
            if let Some(f) = report.positive_fraction {
                println!("positive improvement fraction {f:.3}");
            }
        }
        Command::GenData {
            n,
            size,
            phase,
            out,
            seed,
        } => {
            let batch = data::synth_dataset(n, size, phase, seed)?;
            data::save_dataset(&batch, &out)?;
            println!("wrote {n} {phase} images of {size}x{size} to {}", out.display());
        }
        Command::Sample {
            checkpoint,
            n,
            out,
            seed,
            png,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let batch = harness::sample_from_checkpoint(&ck, n, seed)?;
            data::save_dataset(&batch, &out)?;
            if let Some(dir) = png {
                write_pngs(&batch, &dir)?;
            }
            println!("wrote {n} images to {}", out.display());
        }
        Command::Transpile {
            circuit,
            native,
            cnot,
            theta,
            seed,
        } => {
            let c = load_circuit(&circuit)?;
            if native {
                let theta = theta.unwrap_or_else(|| quantum_sim::init_theta(c.n_params, seed));
                let n = transpile::to_native(&c, &theta)?;
                print!("{}", transpile::write_native(&n));
                eprintln!(
                    "{} ops, {} MS, estimated runtime {:?}",
                    n.ops.len(),
                    transpile::two_qubit_count(&n),
                    transpile::estimate_runtime(&n, T_1Q, T_2Q)
                );
            } else {
                let out = if cnot { transpile::to_cnot_form(&c)? } else { c };
                print!("{}", transpile::write_circuit(&out));
                eprintln!(
                    "{} ops, {} two-qubit, {} params",
                    out.ops.len(),
                    transpile::two_qubit_count(&out),
                    out.n_params
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}

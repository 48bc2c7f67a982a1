//! Command-line front end for the drift estimation pipeline.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use driftnet::eval::{write_irreducible_csv, Overlay};
use driftnet::experiment::{cell_path, run_replicate, write_manifest, GridStatus};
use driftnet::seed::{derive_seed, StreamRole};
use driftnet::simulate::Simulator;
use driftnet::{
    benchmark_model, convert_to_unit_weights, irreducible_error_grid, path_overlay, run_experiment, slice_profile,
    subsample, ClassCertificate, Error, ExperimentConfig, ReluNetwork,
};

#[derive(Parser)]
#[command(name = "driftnet", version, about = "Neural drift estimation for ergodic diffusions")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed, overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Sort records before aggregation.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Args, Clone, Copy)]
struct Cell {
    #[arg(long, default_value_t = 20)]
    skip: usize,
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one fine path and its subsampled version.
    Simulate {
        #[command(flatten)]
        cell: Cell,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        /// Also write the fine trajectory.
        #[arg(long)]
        fine: bool,
    },
    /// Train one network on one replicate of one cell.
    Train {
        #[command(flatten)]
        cell: Cell,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Run the full Monte Carlo grid.
    Experiment,
    /// Loss of the true drift on the difference quotients at every skip.
    Irreducible {
        #[arg(long)]
        n_mc: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Rescale a network to unit-bounded parameters.
    Convert {
        #[arg(long)]
        network: PathBuf,
        /// Output head to extract first (1-based), needed for multi-output
        /// networks with parameters above 1.
        #[arg(long)]
        head: Option<usize>,
    },
    /// Replicate mean and bands along a slice of the unit square.
    Slice {
        /// Replicate networks; trained from the config when absent.
        #[arg(long = "network")]
        networks: Vec<PathBuf>,
        #[command(flatten)]
        cell: Cell,
        /// Drift component (1-based).
        #[arg(long, default_value_t = 2)]
        component: usize,
        /// Coordinate held fixed (1-based).
        #[arg(long, default_value_t = 2)]
        fixed_index: usize,
        #[arg(long, default_value_t = 0.5)]
        fixed_value: f64,
        #[arg(long, default_value_t = 101)]
        grid_size: usize,
        #[arg(long, default_value_t = 2.0)]
        band_multiplier: f64,
    },
    /// True and fitted drift along a test path.
    Overlay {
        /// Fitted network; trained from the config when absent.
        #[arg(long)]
        network: Option<PathBuf>,
        #[command(flatten)]
        cell: Cell,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        /// Drift component (1-based).
        #[arg(long, default_value_t = 1)]
        component: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { 2 } else { 1 })
        }
    }
}

fn resolve_config(global: &Global) -> driftnet::Result<ExperimentConfig> {
    let mut config = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &global.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = global.seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn writer(dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> driftnet::Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    files.push(PathBuf::from(name));
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn one_based(i: usize, d: usize, what: &str) -> driftnet::Result<usize> {
    if i == 0 || i > d {
        return Err(Error::InvalidParameter(format!("{what} must be in 1..={d}, got {i}")));
    }
    Ok(i - 1)
}

fn run(cli: Cli) -> driftnet::Result<u8> {
    let config = resolve_config(&cli.global)?;
    let out = config.output_dir.clone();
    let model = benchmark_model(config.model)?;
    fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    let name = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Train { .. } => "train",
        Command::Experiment => "experiment",
        Command::Irreducible { .. } => "irreducible",
        Command::Convert { .. } => "convert",
        Command::Slice { .. } => "slice",
        Command::Overlay { .. } => "overlay",
    };

    let details = match cli.command {
        Command::Simulate { cell, replicate, fine } => {
            let seed = derive_seed(config.master_seed, cell.skip, cell.horizon, replicate, StreamRole::TrainPath);
            let traj = Simulator::new(config.mesh).simulate(&model, cell.horizon, &config.initial_state, seed)?;
            if fine {
                traj.write_csv(writer(&out, "trajectory.csv", &mut files)?)?;
            }
            let path = subsample(&traj, cell.skip)?;
            path.write_csv(writer(&out, "path.csv", &mut files)?)?;
            json!({ "skip": cell.skip, "horizon": cell.horizon, "replicate": replicate, "path_seed": seed })
        }
        Command::Train { cell, replicate } => {
            let o = run_replicate(&config, &model, cell.skip, cell.horizon, replicate)?;
            o.network.save(out.join("network.json"))?;
            files.push("network.json".into());
            o.report.write_csv(writer(&out, "train_loss.csv", &mut files)?)?;
            let cert = ClassCertificate::of(&o.network);
            fs::write(out.join("certificate.json"), serde_json::to_string_pretty(&cert)?)?;
            files.push("certificate.json".into());
            println!(
                "test_mse={:.6e} train_mse={:.6e} quotients_mse={:.6e}",
                o.record.test_mse.mean, o.record.train_mse.mean, o.record.quotients_mse.mean
            );
            json!({ "record": o.record, "projection_events": o.report.projection_event_count, "updates": o.report.updates })
        }
        Command::Experiment => {
            let outcome = run_experiment(&config, cli.global.workers, cli.global.deterministic)?;
            for f in &outcome.failures {
                eprintln!("replicate failed: skip={} T={} r={}: {}", f.skip, f.horizon, f.replicate, f.error);
            }
            return Ok(match outcome.status() {
                GridStatus::Complete => 0,
                GridStatus::Diverged => 2,
                GridStatus::PartialFailure => 3,
            });
        }
        Command::Irreducible { n_mc, horizon } => {
            let n_mc = n_mc.unwrap_or(config.irreducible.n_mc);
            let horizon = horizon.unwrap_or(config.irreducible.horizon);
            let seed = derive_seed(config.master_seed, 0, horizon, 0, StreamRole::Irreducible);
            let estimates = irreducible_error_grid(
                &model,
                &config.skip_list,
                horizon,
                config.mesh,
                n_mc,
                &config.initial_state,
                seed,
            )?;
            write_irreducible_csv(writer(&out, "irreducible.csv", &mut files)?, &estimates)?;
            for e in &estimates {
                println!("skip={} irreducible_x1e3={:.3} (se {:.3})", e.skip, 1e3 * e.value.mean, 1e3 * e.value.std_error);
            }
            json!({ "n_mc": n_mc, "horizon": horizon, "estimates": estimates })
        }
        Command::Convert { network, head } => {
            let mut net = ReluNetwork::load(&network)?;
            if let Some(h) = head {
                net = net.head(one_based(h, net.out_dim(), "head")?)?;
            }
            let (converted, cert) = convert_to_unit_weights(&net)?;
            converted.save(out.join("converted.json"))?;
            files.push("converted.json".into());
            fs::write(out.join("certificate.json"), serde_json::to_string_pretty(&cert)?)?;
            files.push("certificate.json".into());
            json!({ "source": network, "head": head, "certificate": cert })
        }
        Command::Slice {
            networks,
            cell,
            component,
            fixed_index,
            fixed_value,
            grid_size,
            band_multiplier,
        } => {
            let nets: Vec<ReluNetwork> = if networks.is_empty() {
                (0..config.n_mc)
                    .map(|r| run_replicate(&config, &model, cell.skip, cell.horizon, r).map(|o| o.network))
                    .collect::<driftnet::Result<_>>()?
            } else {
                networks.iter().map(ReluNetwork::load).collect::<driftnet::Result<_>>()?
            };
            let profile = slice_profile(
                &nets,
                &model,
                one_based(component, 2, "component")?,
                one_based(fixed_index, 2, "fixed_index")?,
                fixed_value,
                grid_size,
                band_multiplier,
            )?;
            profile.write_csv(writer(&out, "slice.csv", &mut files)?)?;
            json!({ "networks": networks, "replicates": nets.len(), "uncovered_fraction": profile.uncovered_fraction() })
        }
        Command::Overlay {
            network,
            cell,
            replicate,
            component,
        } => {
            let net = match &network {
                Some(p) => ReluNetwork::load(p)?,
                None => run_replicate(&config, &model, cell.skip, cell.horizon, replicate)?.network,
            };
            let path = cell_path(&config, &model, cell.skip, cell.horizon, replicate, StreamRole::TestPath)?;
            let overlay: Overlay = path_overlay(&net, &path, &model, one_based(component, 2, "component")?)?;
            overlay.write_csv(writer(&out, "overlay.csv", &mut files)?)?;
            json!({ "network": network, "mean_squared_gap": overlay.mean_squared_gap() })
        }
    };
    write_manifest(&out, name, &config, &files, details)?;
    Ok(0)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use batforge_core::checkpoint::{random_latent_checkpoint, split_checkpoint};
use batforge_core::config::ConfigFile;
use batforge_core::dse::write_artifacts;
use batforge_core::formats::{self, DATASET_MAGIC, TENSOR_MAGIC};
use batforge_core::refmodel::{encoder_forward, random_input, ModelConfig, ModelKind, Sample};
use batforge_core::simulator::{self, inter_layer_total, simulate_timing, SimReport};
use batforge_core::{Error, Rng};
use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde_json::json;

#[derive(Parser)]
#[command(name = "batforge", version, about = "Binarized Transformer reference model, accelerator simulator and DSE")]
struct Cli {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split a latent checkpoint (BATL) into binarized weights (BATW).
    Split { input: PathBuf, output: PathBuf },
    /// Run the encoder on a tensor batch (BATX) or dataset (BATD).
    Infer {
        weights: PathBuf,
        input: PathBuf,
        /// Output tensors; defaults to `<out>/output.batx`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also run the bit-serial datapath and require identical outputs.
        #[arg(long)]
        check_sim: bool,
    },
    /// Time the configured model on the configured engines.
    Simulate {
        /// Report the closed-form prediction next to the event simulation.
        #[arg(long)]
        analytic: bool,
    },
    /// Sweep the design space and select a configuration.
    Dse {
        /// Worker threads; defaults to `dse.workers`, then logical cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize the artifacts in a directory written by `simulate` or `dse`.
    Report { dir: Option<PathBuf> },
    /// Write a small random latent checkpoint, inputs and dataset.
    Toy {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        d_hid: usize,
        #[arg(long, default_value_t = 64)]
        d_inter: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

/// Exit code for usage errors and an empty selection.
const EXIT_USAGE: u8 = 2;

/// Bad input from the user; exits with [`EXIT_USAGE`].
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BATFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    match cli.cmd {
        Cmd::Split { input, output } => cmd_split(&input, &output),
        Cmd::Infer {
            weights,
            input,
            output,
            check_sim,
        } => {
            let output = output.unwrap_or_else(|| cfg.paths.out.join("output.batx"));
            cmd_infer(&cfg, &weights, &input, &output, check_sim)
        }
        Cmd::Simulate { analytic } => cmd_simulate(&cfg, analytic),
        Cmd::Dse { workers } => cmd_dse(&cfg, workers),
        Cmd::Report { dir } => cmd_report(&dir.unwrap_or_else(|| cfg.paths.out.clone())),
        Cmd::Toy {
            layers,
            d_hid,
            d_inter,
            heads,
            seq_len,
            bits,
            samples,
        } => {
            let kind = if bits == 1 { ModelKind::BiT } else { ModelKind::BMT };
            let model = ModelConfig {
                layers,
                d_hid,
                d_inter,
                num_head: heads,
                b_act: bits,
                model_kind: kind,
                seq_len,
            };
            cmd_toy(&cfg, &model, samples)
        }
    }
}

fn cmd_split(input: &Path, output: &Path) -> Result<ExitCode> {
    let ck = formats::decode_latent(&formats::read_file(input)?).with_context(|| format!("reading {}", input.display()))?;
    let (weights, report) = split_checkpoint(&ck)?;
    for r in &report.records {
        match (r.a, r.b) {
            (Some(a), Some(b)) => println!(
                "layer {} {:<4} split a={a:.6} b={b:.6e} residual={:.3e}{}",
                r.layer,
                r.linear,
                r.residual,
                if r.no_zeros { " (no zeros, b=0)" } else { "" }
            ),
            _ => println!("layer {} {:<4} binarized", r.layer, r.linear),
        }
    }
    println!("identity residual: {:.3e}", report.max_residual);
    if report.max_residual >= 1e-12 {
        bail!("identity residual {:.3e} exceeds 1e-12", report.max_residual);
    }
    formats::write_file(output, &formats::encode_weights(&ck.cfg, &weights)?)?;
    println!("wrote {}", output.display());
    Ok(ExitCode::SUCCESS)
}

/// Input tensors and, for a dataset, their labels.
type Inputs = (Vec<Array2<batforge_core::F16>>, Option<Vec<u32>>);

fn read_inputs(path: &Path) -> Result<Inputs> {
    let bytes = formats::read_file(path)?;
    match formats::sniff(&bytes) {
        Some(m) if &m == TENSOR_MAGIC => Ok((formats::decode_tensors(&bytes)?, None)),
        Some(m) if &m == DATASET_MAGIC => {
            let samples = formats::decode_dataset(&bytes)?;
            let labels = samples.iter().map(|s| s.label).collect();
            Ok((samples.into_iter().map(|s| s.x).collect(), Some(labels)))
        }
        _ => Err(UsageError(format!("{} is neither a BATX nor a BATD file", path.display())).into()),
    }
}

fn cmd_infer(cfg: &ConfigFile, weights: &Path, input: &Path, output: &Path, check_sim: bool) -> Result<ExitCode> {
    let (model, w) = formats::decode_weights(&formats::read_file(weights)?)?;
    let (xs, labels) = read_inputs(input)?;
    if xs.is_empty() {
        return Err(UsageError(format!("{} holds no input tensors", input.display())).into());
    }
    let outs = xs
        .iter()
        .map(|x| encoder_forward(x, &w, &model))
        .collect::<batforge_core::Result<Vec<_>>>()?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    formats::write_file(output, &formats::encode_tensors(&outs)?)?;
    println!("wrote {} outputs to {}", outs.len(), output.display());
    if let (Some(labels), Some(head)) = (&labels, &w.head) {
        let mut correct = 0;
        for (o, &l) in outs.iter().zip(labels) {
            if head.predict(o)? == l as usize {
                correct += 1;
            }
        }
        println!("accuracy: {:.4} ({correct}/{})", correct as f64 / outs.len() as f64, outs.len());
    }
    if check_sim {
        let mut matches = true;
        for (x, o) in xs.iter().zip(&outs) {
            let run = simulator::simulate(&model, &w, &cfg.hw.mha, x)?;
            matches &= run.output.iter().zip(o.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
        println!("simulator matches: {matches}");
        if !matches {
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sim_csv(report: &SimReport, analytic: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["module", "phase", "start", "end", "rows", "preload_cycles", "event_cycles"];
    if analytic {
        header.extend(["analytic_cycles", "gap"]);
    }
    w.write_record(&header)?;
    for m in [&report.mha, &report.ffn] {
        let module = format!("{:?}", m.module).to_lowercase();
        for p in &m.phases {
            let event = p.end - p.start;
            let mut row = vec![
                module.clone(),
                p.name.clone(),
                p.start.to_string(),
                p.end.to_string(),
                p.rows.to_string(),
                p.preload_cycles.to_string(),
                event.to_string(),
            ];
            if analytic {
                row.push(p.analytic_cycles.to_string());
                row.push(format!("{:.6}", rel_gap(event, p.analytic_cycles)));
            }
            w.write_record(&row)?;
        }
    }
    let mut total = vec![
        "total".to_string(),
        String::new(),
        "0".into(),
        report.total_cycles.to_string(),
        String::new(),
        String::new(),
        report.total_cycles.to_string(),
    ];
    if analytic {
        total.push(report.analytic_cycles.to_string());
        total.push(format!("{:.6}", report.analytic_gap()));
    }
    w.write_record(&total)?;
    w.into_inner().context("flushing CSV")
}

fn rel_gap(event: u64, analytic: u64) -> f64 {
    (event as f64 - analytic as f64).abs() / event.max(1) as f64
}

fn cmd_simulate(cfg: &ConfigFile, analytic: bool) -> Result<ExitCode> {
    let report = match simulate_timing(&cfg.model, &cfg.hw.mha, &cfg.hw.ffn, cfg.sim.batch) {
        Err(e @ Error::ConfigInfeasible(_)) => bail!("infeasible buffer configuration: {e}"),
        r => r?,
    };
    let out = &cfg.paths.out;
    std::fs::create_dir_all(out)?;
    let mut value = serde_json::to_value(&report)?;
    if analytic {
        value["analytic_gap"] = json!(report.analytic_gap());
    }
    std::fs::write(out.join("sim_report.json"), serde_json::to_vec_pretty(&value)?)?;
    std::fs::write(out.join("sim_report.csv"), sim_csv(&report, analytic)?)?;

    println!(
        "model {} d_hid={} d_inter={} b_act={} layers={} seq={} batch={}",
        cfg.model.model_kind, cfg.model.d_hid, cfg.model.d_inter, cfg.model.b_act, cfg.model.layers, cfg.model.seq_len, report.batch
    );
    println!("mha cycles/layer: {}", report.mha.cycles);
    println!("ffn cycles/layer: {}", report.ffn.cycles);
    println!("total cycles: {}", report.total_cycles);
    println!("latency: {:.4} ms", report.latency_ms);
    println!("throughput: {:.2} GOPS", report.gops);
    let closed = inter_layer_total(report.mha.cycles, report.ffn.cycles, (report.batch * report.layers) as u64);
    let verdict = if closed == report.total_cycles { "exact" } else { "differs" };
    println!("inter-layer closed form: {closed} vs pipeline {}: {verdict}", report.total_cycles);
    if analytic {
        println!("analytic cycles: {}", report.analytic_cycles);
        println!("analytic gap: {:.4}%", 100.0 * report.analytic_gap());
    }
    let r = &report.resources;
    println!(
        "resources: LUT {:.0} FF {:.0} BRAM {:.1} DSP {:.0} ({})",
        r.lut,
        r.ff,
        r.bram,
        r.dsp,
        if r.fits() { "fits" } else { "exceeds the utilization cap" }
    );
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_dse(cfg: &ConfigFile, workers: Option<usize>) -> Result<ExitCode> {
    let workers = workers
        .or(cfg.dse.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(UsageError("--workers must be positive".into()).into());
    }
    let provider = cfg.provider();
    let out = &cfg.paths.out;
    let outcome = write_artifacts(out, &cfg.dse.space, provider.as_ref(), &cfg.dse.constraints, workers)?;
    println!(
        "evaluated {} points, {} feasible, {} on the Pareto front",
        outcome.points_evaluated,
        outcome.feasible_points,
        outcome.pareto.len()
    );
    println!("accuracy floor: {:.4}", outcome.accuracy_floor);
    match outcome.robustness_threshold {
        Some(t) => println!("robustness threshold: {t:.4}"),
        None => println!("robustness threshold: none"),
    }
    println!("wrote {}", out.display());
    match &outcome.selection {
        Some(p) => {
            println!(
                "selected: <{}, {}, {}, {}> mha <{}, {}, {}, {}> ffn <{}, {}, {}, {}>",
                p.model.model_kind,
                p.model.d_hid,
                p.model.d_inter,
                p.model.b_act,
                p.mha.p_dpu,
                p.mha.p_quan,
                p.mha.p_vu,
                p.mha.p_ln,
                p.ffn.p_dpu,
                p.ffn.p_quan,
                p.ffn.p_vu,
                p.ffn.p_ln
            );
            Ok(ExitCode::SUCCESS)
        }
        None => {
            eprintln!("no feasible point: {}", outcome.diagnostics);
            Ok(ExitCode::from(EXIT_USAGE))
        }
    }
}

fn cmd_report(dir: &Path) -> Result<ExitCode> {
    let mut found = false;
    let sim = dir.join("sim_report.json");
    if sim.exists() {
        found = true;
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&sim)?)?;
        println!("simulation ({})", sim.display());
        for key in ["total_cycles", "analytic_cycles", "latency_ms", "gops"] {
            println!("  {key}: {}", v[key]);
        }
        for m in ["mha", "ffn"] {
            println!("  {m} cycles/layer: {}", v[m]["cycles"]);
            if let Some(phases) = v[m]["phases"].as_array() {
                for p in phases {
                    println!(
                        "    {}: {} cycles, {} rows, window {}",
                        p["name"].as_str().unwrap_or("?"),
                        p["end"].as_u64().unwrap_or(0) - p["start"].as_u64().unwrap_or(0),
                        p["rows"],
                        p["row_window"]
                    );
                }
            }
        }
    }
    let sel = dir.join("selection.json");
    if sel.exists() {
        found = true;
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&sel)?)?;
        println!("design space exploration ({})", sel.display());
        for key in ["points_evaluated", "feasible_points", "pareto_points", "accuracy_floor", "robustness_threshold"] {
            println!("  {key}: {}", v[key]);
        }
        if v["selected"].as_bool() == Some(true) {
            println!("  algorithmic: {}", v["algorithmic"]);
            println!("  mha: {}", v["mha"]);
            println!("  ffn: {}", v["ffn"]);
            println!("  latency_ms: {}", v["point"]["latency_ms"]);
        } else {
            println!("  no selection: {}", v["diagnostics"].as_str().unwrap_or(""));
        }
    }
    if !found {
        return Err(UsageError(format!("no sim_report.json or selection.json in {}", dir.display())).into());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_toy(cfg: &ConfigFile, model: &ModelConfig, samples: usize) -> Result<ExitCode> {
    let mut rng = Rng::new(cfg.seed);
    let ck = random_latent_checkpoint(model, &mut rng, Some(2))?;
    let xs = (0..samples)
        .map(|_| random_input(model, &mut rng))
        .collect::<batforge_core::Result<Vec<_>>>()?;
    let dataset: Vec<Sample> = xs
        .iter()
        .map(|x| Sample {
            x: x.clone(),
            label: rng.coin() as u32,
        })
        .collect();
    let out = &cfg.paths.out;
    std::fs::create_dir_all(out)?;
    formats::write_file(&out.join("latent.batl"), &formats::encode_latent(&ck)?)?;
    formats::write_file(&out.join("inputs.batx"), &formats::encode_tensors(&xs)?)?;
    formats::write_file(&out.join("dataset.batd"), &formats::encode_dataset(&dataset)?)?;
    println!("wrote latent.batl, inputs.batx and dataset.batd to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

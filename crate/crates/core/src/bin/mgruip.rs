//! Command-line surface: analyze | train | eval | stream | gradcheck.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure. Failures
//! print one machine-parseable line: error: class=<class> message="...".

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use mgruip_core::config::ConfigFile;
use mgruip_core::error::{Error, Result};
use mgruip_core::model_io::{
    file_checksum, load_model, read_frames, save_model, write_frames_binary, write_frames_text,
    FramesFormat, ModelMeta,
};
use mgruip_core::network::{
    compute_latency, count_parameters, CellKind, NetworkParams, NetworkTopology,
};
use mgruip_core::streaming::{measure_latency, stream_open};
use mgruip_core::tensor::{BnMode, Real};
use mgruip_core::training::{
    generate_task, grad_check, gradcheck_probe, train, FdSettings, TaskKind,
    GRAD_CHECK_PARAM_GUARD,
};

#[derive(Parser)]
#[command(name = "mgruip", version, about = "mGRUIP recurrent networks: analysis, training, and streaming inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Worker threads; 1 is the deterministic path (and the only one used by
    /// the current compute kernels, which are sequential either way).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// f32 runs production precision; f64-check re-runs the gradient check
    /// harness at 64-bit. gradcheck runs both when the flag is omitted.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    #[value(name = "f64-check")]
    F64Check,
}

#[derive(Subcommand)]
enum Cmd {
    /// Prints per-layer and total parameter counts and the latency report.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Trains on the config's task and writes a model file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Metrics file (line-delimited JSON); default: <model>.metrics.jsonl
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Frame accuracy and confusion counts on freshly generated splits.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Frame-incremental inference over a frames file.
    Stream {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Output file; format follows the input (binary or text).
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: class=validation message=\"--threads must be >= 1\"");
        std::process::exit(2);
    }
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: class={} message=\"{}\"", e.class(), e);
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.precision == Some(Precision::F64Check) && !matches!(cli.cmd, Cmd::Gradcheck { .. }) {
        return Err(Error::Validation(
            "--precision f64-check applies to the gradcheck subcommand only".into(),
        ));
    }
    match &cli.cmd {
        Cmd::Analyze { config } => cmd_analyze(config),
        Cmd::Train {
            config,
            model,
            metrics,
        } => cmd_train(config, model, metrics.as_deref(), cli.seed),
        Cmd::Eval { model, config } => cmd_eval(model, config, cli.seed),
        Cmd::Stream {
            model,
            frames,
            output,
        } => cmd_stream(model, frames, output),
        Cmd::Gradcheck { config } => cmd_gradcheck(config, cli.seed, cli.precision),
    }
}

fn fmt_ms(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x:.1}")
    }
}

fn cell_name(c: CellKind) -> &'static str {
    match c {
        CellKind::Gru => "gru",
        CellKind::Mgru => "mgru",
        CellKind::Mgruip => "mgruip",
    }
}

fn print_analysis(topology: &NetworkTopology) -> Result<()> {
    let report = count_parameters(topology)?;
    let latency = compute_latency(topology)?;
    println!(
        "topology: {} layers, input {} (spliced {}), bottleneck {}, output {}",
        topology.layers.len(),
        topology.input_dim,
        topology.spliced_dim(),
        topology.bottleneck_dim,
        topology.output_dim
    );
    println!("parameters:");
    for (i, lc) in report.layers.iter().enumerate() {
        let np = lc.n_p.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let spec = &topology.layers[i];
        let ctx = match spec.context.kind {
            mgruip_core::context::ContextKind::None => "none".to_string(),
            mgruip_core::context::ContextKind::Encoding => format!(
                "encoding K={} s={}",
                spec.context.order, spec.context.stride
            ),
            mgruip_core::context::ContextKind::Convolution => format!(
                "convolution K={} s={}",
                spec.context.order, spec.context.stride
            ),
        };
        println!(
            "  layer {} {} n_in={} n_c={} n_p={} ctx={}: weights {} + context {} (biases {})",
            i + 1,
            cell_name(lc.cell),
            lc.input_dim,
            lc.n_c,
            np,
            ctx,
            lc.cell_weights,
            lc.context_weights,
            lc.cell_biases
        );
    }
    println!(
        "  head: bottleneck+softmax weights {} (biases {})",
        report.head_weights, report.head_biases
    );
    println!("  bias-free total (recurrent + context weights): {}", report.bias_free_total);
    println!("  with-bias total (all trainables incl. head): {}", report.with_bias_total);
    // the closed-form ratio N_mgruip/N_mgru = n_p/n_c holds per layer with
    // n_i = n_c; printed when the stack is uniform mgruip
    let all_mgruip = topology.layers.iter().all(|l| l.cell == CellKind::Mgruip);
    if all_mgruip {
        let n_c = topology.layers[0].n_c;
        let n_p = topology.layers[0].n_p.unwrap();
        if topology
            .layers
            .iter()
            .all(|l| l.n_c == n_c && l.n_p == Some(n_p))
        {
            println!(
                "  mgruip/mgru parameter ratio (n_p/n_c): {:.4}",
                n_p as f64 / n_c as f64
            );
        }
    }
    println!("latency:");
    println!(
        "  splice lookahead: {} frames ({} ms)",
        latency.splice_frames,
        fmt_ms(latency.splice_ms)
    );
    for (i, frames) in latency.context_frames.iter().enumerate() {
        if *frames > 0 {
            println!(
                "  layer {} context lookahead: {} frames ({} ms)",
                i + 1,
                frames,
                fmt_ms(latency.context_ms[i])
            );
        }
    }
    println!("  output delay: {} ms", fmt_ms(latency.output_delay_ms));
    println!(
        "total latency: {} ms ({} lookahead frames + {} ms output delay)",
        fmt_ms(latency.total_ms),
        latency.lookahead_frames,
        fmt_ms(latency.output_delay_ms)
    );
    Ok(())
}

fn cmd_analyze(config: &Path) -> Result<()> {
    let cfg = ConfigFile::load(config)?;
    print_analysis(&cfg.network)
}

fn task_name(k: TaskKind) -> &'static str {
    match k {
        TaskKind::LookaheadParity => "lookahead-parity",
        TaskKind::DelayedCopy => "delayed-copy",
        TaskKind::ContextWindowClass => "context-window-class",
    }
}

fn cmd_train(config: &Path, model: &Path, metrics: Option<&Path>, seed_override: Option<u64>) -> Result<()> {
    let cfg = ConfigFile::load(config)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let section = cfg
        .task
        .as_ref()
        .ok_or_else(|| Error::Validation("train needs a [task] section".into()))?;
    let train_cfg = cfg
        .training
        .as_ref()
        .ok_or_else(|| Error::Validation("train needs a [training] section".into()))?;
    let mut task = cfg.to_task()?;
    task.seed = seed;
    let dataset = generate_task::<f32>(&task, section.n_sequences)?;
    let params = NetworkParams::<f32>::init(&cfg.network, seed)?;
    let metrics_path = metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| model.with_extension("metrics.jsonl"));
    let mut metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::Io(format!("{}: {e}", metrics_path.display())))?;
    let outcome = train(&cfg.network, params, &dataset, train_cfg, seed, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        println!("{line}");
        let _ = writeln!(metrics_file, "{line}");
    })?;
    let meta = ModelMeta {
        seed,
        epochs: train_cfg.epochs,
        final_train_loss: outcome.metrics.last().map(|m| m.train_loss).unwrap_or(f64::NAN),
        final_eval_accuracy: outcome.final_eval_accuracy,
        task_name: Some(task_name(section.name).into()),
    };
    save_model(model, &cfg.network, &outcome.params, &meta)?;
    println!("final eval accuracy: {:.4}", outcome.final_eval_accuracy);
    println!("model written: {} (sha256 {})", model.display(), file_checksum(model)?);
    Ok(())
}

fn cmd_eval(model: &Path, config: &Path, seed_override: Option<u64>) -> Result<()> {
    let cfg = ConfigFile::load(config)?;
    let (topology, params, _meta) = load_model(model)?;
    if topology.input_dim != cfg.network.input_dim || topology.output_dim != cfg.network.output_dim {
        return Err(Error::Validation(format!(
            "model expects input {} / output {}, config says {} / {}",
            topology.input_dim, topology.output_dim, cfg.network.input_dim, cfg.network.output_dim
        )));
    }
    let section = cfg
        .task
        .as_ref()
        .ok_or_else(|| Error::Validation("eval needs a [task] section".into()))?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let mut task = cfg.to_task()?;
    task.seed = seed;
    let train_seed_data = generate_task::<f32>(&task, section.n_sequences)?;
    task.seed = seed.wrapping_add(1_000_003);
    let heldout_data = generate_task::<f32>(&task, section.n_sequences)?;
    let acc_train = mgruip_core::training::evaluate_accuracy(&topology, &params, &train_seed_data)?;
    let acc_held = mgruip_core::training::evaluate_accuracy(&topology, &params, &heldout_data)?;
    println!("train-seed accuracy: {acc_train:.4} (n={})", train_seed_data.len());
    println!("held-out accuracy: {acc_held:.4} (n={})", heldout_data.len());
    let confusion = mgruip_core::training::confusion_counts(&topology, &params, &heldout_data)?;
    println!("confusion (held-out), rows = actual, cols = predicted:");
    for (actual, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("  class {actual}: {}", cells.join(" "));
    }
    Ok(())
}

fn cmd_stream(model: &Path, frames_path: &Path, output: &Path) -> Result<()> {
    let (topology, params, _meta) = load_model(model)?;
    let (frames, format) = read_frames(frames_path)?;
    if let Some(first) = frames.first() {
        if first.len() != topology.input_dim {
            return Err(Error::dimension(
                "stream",
                format!("frames have dim {}, model expects {}", first.len(), topology.input_dim),
            ));
        }
    }
    let topology = Arc::new(topology);
    let params = Arc::new(params);
    let mut stream = stream_open(topology.clone(), params.clone())?;
    let mut outputs: Vec<Vec<f32>> = Vec::new();
    for f in &frames {
        outputs.extend(stream.push(f)?);
    }
    outputs.extend(stream.flush()?);
    match format {
        FramesFormat::Binary => write_frames_binary(output, topology.output_dim, &outputs)?,
        FramesFormat::Text => write_frames_text(output, &outputs)?,
    }
    let latency = compute_latency(&topology)?;
    let probe = measure_latency(topology.clone(), params, &frames)?;
    println!(
        "empirical latency: {} ms ({} lookahead frames + {} ms output delay)",
        fmt_ms(probe.max_delay_frames as f64 * latency.base_frame_period_ms + latency.output_delay_ms),
        probe.max_delay_frames,
        fmt_ms(latency.output_delay_ms)
    );
    println!("outputs written: {} ({} frames)", output.display(), outputs.len());
    if frames.len() > latency.lookahead_frames {
        if probe.max_delay_frames != latency.lookahead_frames {
            return Err(Error::Numeric(format!(
                "empirical lookahead {} frames disagrees with the analytical {}",
                probe.max_delay_frames, latency.lookahead_frames
            )));
        }
    } else {
        println!(
            "note: stream shorter than the lookahead ({} frames); empirical latency not asserted",
            latency.lookahead_frames
        );
    }
    Ok(())
}

fn gradcheck_at<R: Real>(topology: &NetworkTopology, seed: u64) -> Result<bool> {
    let params = NetworkParams::<R>::init(topology, seed)?;
    let (frames, labels) = gradcheck_probe::<R>(topology, seed, 6);
    let labels_ref: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
    let report = grad_check(
        topology,
        &params,
        &frames,
        &labels_ref,
        BnMode::Train,
        FdSettings::for_bits(R::BITS),
    )?;
    println!(
        "gradcheck f{}: params={} max_rel={:.3e} mean_rel={:.3e} worst={} step={:.0e} tol={:.0e} -> {}",
        R::BITS,
        report.params_checked,
        report.max_rel_error,
        report.mean_rel_error,
        report.worst_param,
        report.step,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(report.passed)
}

fn cmd_gradcheck(config: &Path, seed_override: Option<u64>, precision: Option<Precision>) -> Result<()> {
    let cfg = ConfigFile::load(config)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let probe_params = NetworkParams::<f32>::init(&cfg.network, seed)?;
    let n = probe_params.param_count();
    if n > GRAD_CHECK_PARAM_GUARD {
        return Err(Error::Validation(format!(
            "config has {n} parameters; gradcheck is limited to {GRAD_CHECK_PARAM_GUARD}. Shrink n_c/n_p or use the shipped gradcheck-* configs."
        )));
    }
    let mut all_pass = true;
    if precision != Some(Precision::F64Check) {
        all_pass &= gradcheck_at::<f32>(&cfg.network, seed)?;
    }
    if precision != Some(Precision::F32) {
        all_pass &= gradcheck_at::<f64>(&cfg.network, seed)?;
    }
    if !all_pass {
        return Err(Error::Numeric("gradient check failed".into()));
    }
    println!("gradcheck: PASS");
    Ok(())
}

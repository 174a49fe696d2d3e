use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use edgeflow::bridge::{parse_config, BridgeConfig, BridgeNode, ConfigError, DEFAULT_QUEUE_SIZE};
use edgeflow::broker::{BrokerConfig, BrokerConfigError, BrokerServer, BrokerServerError};
use edgeflow::bus::{BusMessage, LocalBus};
use edgeflow::harness::{
    apply_override, preset, read_breakdowns_csv, run_scenario, spawn_detector, summary_of,
    sweep_throughput, write_report, DetectorSettings, PresetPlan, Report, ScenarioConfig,
    ScenarioError,
};
use edgeflow::scanmodel::{load_scan, reference_scan, save_scan, COMPACT_TYPE_TAG};
use edgeflow::trace::{Clock, ClockId, HostClock, ProbeKind, TracingBlock};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "edgeflow",
    version,
    about = "Edge-cloud offloading latency benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the MQTT broker.
    Broker {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the vehicle-side bridge, optionally publishing a scan file.
    Vehicle(VehicleArgs),
    /// Run the cloud-side bridge with the detector.
    Cloud(CloudArgs),
    /// Run a scenario preset and write its report files.
    Bench(BenchArgs),
    /// Summarize a per-sample report CSV.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write a scan file.
    GenScan {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct VehicleArgs {
    #[arg(long)]
    config: PathBuf,
    /// Scan file published on the first bus-to-MQTT rule.
    #[arg(long)]
    scan: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    rate_hz: f64,
    /// Stop after this many scans (runs until interrupted otherwise).
    #[arg(long)]
    count: Option<u64>,
}

#[derive(Args)]
struct CloudArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 43.4)]
    detector_delay_ms: f64,
    /// Forward scans unchanged instead of running the detector.
    #[arg(long)]
    loop_through: bool,
    /// Constant added to every cloud timestamp.
    #[arg(long, default_value_t = 0.0)]
    clock_offset_ms: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    preset: String,
    /// `key=value`, nested keys joined by dots (e.g. `shaper.one_way_delay_ms=5`).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

/// A problem with the user's input rather than with a run.
#[derive(Debug)]
struct BadInput(String);

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(BadInput(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<BadInput>() || cause.is::<BrokerConfigError>() || cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(BrokerServerError::Config(_) | BrokerServerError::Tls(_)) = cause.downcast_ref()
        {
            return 2;
        }
        if let Some(s) = cause.downcast_ref::<ScenarioError>() {
            if s.is_config() {
                return 2;
            }
            if matches!(s, ScenarioError::Aborted(_)) {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Broker { config } => broker(&config),
        Command::Vehicle(a) => vehicle(a),
        Command::Cloud(a) => cloud(a),
        Command::Bench(a) => bench(a),
        Command::Analyze { input } => analyze(&input),
        Command::GenScan { preset, out } => gen_scan(&preset, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

fn broker(config: &Path) -> Result<()> {
    let cfg = BrokerConfig::parse(&read_text(config)?)?;
    runtime()?.block_on(async {
        let server = BrokerServer::start(&cfg).await?;
        let line = json!({
            "listening": server.local_addr().to_string(),
            "tls": server.tls_addr().map(|a| a.to_string()),
        });
        println!("{line}");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = server.wait() => {}
        }
        Ok(())
    })
}

fn bridge_config(path: &Path) -> Result<BridgeConfig> {
    parse_config(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

/// Prints the node status as one JSON line every second until `stop` resolves.
async fn report_status(node: &BridgeNode, stop: impl std::future::Future<Output = ()>) {
    tokio::pin!(stop);
    let mut every = tokio::time::interval(Duration::from_secs(1));
    every.tick().await;
    loop {
        tokio::select! {
            _ = &mut stop => break,
            _ = every.tick() => {
                println!("{}", serde_json::to_string(&node.status()).unwrap_or_default());
            }
        }
    }
    println!(
        "{}",
        serde_json::to_string(&node.status()).unwrap_or_default()
    );
}

fn vehicle(a: VehicleArgs) -> Result<()> {
    let cfg = bridge_config(&a.config)?;
    if !(a.rate_hz > 0.0 && a.rate_hz.is_finite()) {
        return Err(bad("--rate-hz must be positive"));
    }
    let scan = match &a.scan {
        Some(p) => Some(load_scan(p).map_err(|e| bad(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let topic = cfg
        .bus2mqtt
        .first()
        .map(|r| r.source_topic.clone())
        .ok_or_else(|| bad("the vehicle needs at least one bus-to-MQTT rule"))?;
    let clock: Arc<dyn Clock> = Arc::new(HostClock::new(ClockId::VEHICLE, Instant::now(), 0));
    let bus = LocalBus::new();
    // per-sample round trip of everything coming back
    let mut sinks = Vec::new();
    for rule in &cfg.mqtt2bus {
        let clock = clock.clone();
        sinks.push(
            bus.subscribe_with(&rule.target_topic, DEFAULT_QUEUE_SIZE, move |m| {
                let Some(trace) = &m.trace else { return };
                let source = trace
                    .probes
                    .iter()
                    .find(|p| p.kind() == Some(ProbeKind::Source) && p.clock() == ClockId::VEHICLE);
                if let Some(s) = source {
                    let ms = clock.now_ns().saturating_sub(s.t_ns) as f64 / 1e6;
                    println!(
                        "{}",
                        json!({"sample_id": trace.sample_id, "round_trip_ms": ms})
                    );
                }
            })?,
        );
    }
    runtime()?.block_on(async move {
        let node = BridgeNode::start(cfg, bus.clone(), clock.clone()).await?;
        let publish = async {
            let Some(scan) = scan else {
                let _ = tokio::signal::ctrl_c().await;
                return;
            };
            let value = scan.to_bytes();
            let period = Duration::from_secs_f64(1.0 / a.rate_hz);
            let mut every = tokio::time::interval(period);
            let mut k = 0u64;
            loop {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => return,
                    _ = every.tick() => {}
                }
                if a.count.is_some_and(|n| k >= n) {
                    break;
                }
                let trace =
                    TracingBlock::new(k).with(ProbeKind::Source, clock.now_ns(), clock.id());
                bus.publish(
                    BusMessage::new(&topic, COMPACT_TYPE_TAG, value.clone()).with_trace(trace),
                );
                k += 1;
            }
            // let the last replies come back
            tokio::time::sleep(Duration::from_secs(2)).await;
        };
        report_status(&node, publish).await;
        node.shutdown().await;
        drop(sinks);
        Ok(())
    })
}

fn cloud(a: CloudArgs) -> Result<()> {
    let cfg = bridge_config(&a.config)?;
    if !(a.detector_delay_ms >= 0.0 && a.clock_offset_ms >= 0.0) {
        return Err(bad("delays and offsets must be >= 0"));
    }
    let offset = (a.clock_offset_ms * 1e6).round() as u64;
    let clock: Arc<dyn Clock> = Arc::new(HostClock::new(ClockId::CLOUD, Instant::now(), offset));
    let bus = LocalBus::new();
    let settings = DetectorSettings {
        compute_delay_ms: a.detector_delay_ms,
        loop_through: a.loop_through,
        ..Default::default()
    };
    let detector = spawn_detector(&settings, &bus, clock.clone())?;
    runtime()?.block_on(async move {
        let node = BridgeNode::start(cfg, bus, clock).await?;
        report_status(&node, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
        node.shutdown().await;
        drop(detector);
        Ok(())
    })
}

fn bench_seed() -> Result<Option<u64>> {
    match std::env::var("BENCH_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| bad(format!("BENCH_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn stem(name: &str) -> String {
    name.replace('/', "-")
}

fn print_report(r: &Report) {
    let m = |k: &str| r.mean(k).unwrap_or(f64::NAN);
    println!(
        "{}: {} samples, total {:.2} ms, interfaces {:.2} ms, comm {:.2} ms, detection {:.2} ms, missing {}",
        r.config.name,
        r.samples_reported,
        m("total"),
        m("interfaces"),
        m("comm"),
        m("detection"),
        r.samples_missing
    );
}

fn run_and_write(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let report = run_scenario(cfg)?;
    print_report(&report);
    let files = write_report(&report, out, &stem(&cfg.name))?;
    println!("  wrote {}", files.json.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let seed = bench_seed()?;
    let plan = preset(&a.preset)?.map_configs(|mut cfg| {
        for o in &a.overrides {
            cfg = apply_override(&cfg, o)?;
        }
        if let Some(s) = seed {
            cfg.reseed(s);
        }
        Ok(cfg)
    })?;
    match plan {
        PresetPlan::Single(cfg) => run_and_write(&cfg, &a.out)?,
        PresetPlan::Series(runs) => {
            for (_, cfg) in &runs {
                run_and_write(cfg, &a.out)?;
            }
        }
        PresetPlan::Throughput {
            base,
            rates,
            window_s,
        } => {
            let sweep = sweep_throughput(&base, &rates, window_s)?;
            for p in &sweep.points {
                println!(
                    "{:>6.1} Hz: mean {:.2} ms, p95 {:.2} ms, growing {:.2}{}",
                    p.rate_hz,
                    p.mean_ms,
                    p.p95_ms,
                    p.growing_fraction,
                    if p.saturated { " (saturated)" } else { "" }
                );
            }
            match sweep.saturation_hz {
                Some(hz) => println!("saturation at {hz} Hz"),
                None => println!("no saturation in the swept range"),
            }
            if let Some(s) = &sweep.slope {
                println!(
                    "slope below saturation: {:.4} ms/Hz, p = {:.3}",
                    s.slope_ms_per_hz, s.p_value
                );
            }
            std::fs::create_dir_all(&a.out)?;
            let path = a.out.join(format!("{}.json", stem(&base.name)));
            std::fs::write(&path, serde_json::to_string_pretty(&sweep)? + "\n")?;
            println!("  wrote {}", path.display());
        }
    }
    Ok(())
}

fn analyze(input: &Path) -> Result<()> {
    if !input.is_file() {
        return Err(bad(format!("no such report: {}", input.display())));
    }
    let rows = read_breakdowns_csv(input).map_err(|e| bad(format!("{}: {e}", input.display())))?;
    if rows.is_empty() {
        return Err(bad(format!("{} has no samples", input.display())));
    }
    println!("{}", serde_json::to_string_pretty(&summary_of(&rows)?)?);
    Ok(())
}

fn gen_scan(name: &str, out: &Path) -> Result<()> {
    let scan = match name {
        "paper-ref" => reference_scan(),
        other => {
            return Err(bad(format!(
                "unknown scan preset `{other}` (known: paper-ref)"
            )))
        }
    };
    save_scan(&scan, out).map_err(|e| anyhow!("writing {}: {e}", out.display()))?;
    println!(
        "{}: {} bytes, {} valid returns",
        out.display(),
        scan.serialized_len(),
        scan.valid_returns()
    );
    Ok(())
}

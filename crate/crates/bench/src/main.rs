use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use oot_core::device::{Device, SensorScript};
use oot_core::monitor::{BreakpointPolicy, DumpMode};
use oot_core::vm::StackLimits;
use oot_net::{listen, master_sink, MasterNode};

use oot_bench::node::{local_vm, parse, program_source, remote_vm, RemoteOptions};
use oot_bench::report::ScenarioResult;
use oot_bench::scenarios::{hooks, network, proxy, resume, scaling, tma};

#[derive(Parser)]
#[command(name = "oot", about = "Out-of-things debugging: device VMs, local VMs and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a benchmark scenario and print CSV.
    Bench {
        #[command(subcommand)]
        which: Bench,
        /// Write the CSV here instead of stdout.
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
    /// Serve a VM until interrupted.
    Vm(VmArgs),
    /// Log readings from device sinks.
    Master {
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum Bench {
    SessionScaling {
        /// Countdown arguments, comma separated.
        #[arg(long, value_delimiter = ',')]
        args: Option<Vec<i64>>,
        #[arg(long, default_value_t = 25)]
        reps: usize,
        /// Call depth limit of the reconstructing VM.
        #[arg(long)]
        local_call_depth: Option<usize>,
    },
    Network {
        #[arg(long, default_value_t = 2)]
        arg: i64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    Proxy {
        #[arg(long, default_value_t = 30)]
        n: usize,
    },
    Tma {
        /// Both sensors online: no bug to find.
        #[arg(long, conflicts_with = "corrupt_commit")]
        control: bool,
        /// Commit a truncated module blob.
        #[arg(long)]
        corrupt_commit: bool,
    },
    Hooks,
    Resume,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Remote,
    Local,
}

#[derive(Clone, Copy, ValueEnum)]
enum Payload {
    Session,
    Remote,
}

#[derive(Args)]
struct VmArgs {
    #[arg(long, value_enum)]
    role: Role,
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// A .wat file or a corpus program name.
    #[arg(long)]
    program: String,
    /// Sensor script for the device.
    #[arg(long)]
    sensors: Option<PathBuf>,
    /// Device to proxy to, as host:port (local role).
    #[arg(long)]
    remote: Option<String>,
    /// Imports that start proxied, comma separated (local role).
    #[arg(long, value_delimiter = ',')]
    proxy: Vec<String>,
    /// pause, single-stop or remove-and-proceed.
    #[arg(long)]
    policy: Option<String>,
    /// Master node for the device sink, as host:port (remote role).
    #[arg(long)]
    master: Option<String>,
    /// What breakpoint events carry (remote role).
    #[arg(long, value_enum, default_value_t = Payload::Session)]
    event_payload: Payload,
}

fn host_port(s: &str) -> Result<(String, u16)> {
    let (h, p) = s.rsplit_once(':').with_context(|| format!("{s:?} is not host:port"))?;
    Ok((h.to_string(), p.parse().with_context(|| format!("bad port in {s:?}"))?))
}

fn emit(r: &ScenarioResult, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => r.write_csv(File::create(p).with_context(|| format!("creating {}", p.display()))?)?,
        None => r.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

/// Returns whether the scenario's own checks passed.
fn bench(which: Bench, out: &Option<PathBuf>) -> Result<bool> {
    match which {
        Bench::SessionScaling { args, reps, local_call_depth } => {
            let mut cfg = scaling::ScalingConfig { reps, ..Default::default() };
            if let Some(a) = args {
                cfg.args = a;
            }
            if let Some(d) = local_call_depth {
                cfg.local_limits.max_call_depth = d;
            }
            emit(&scaling::to_result(&scaling::session_scaling(&cfg)?), out)?;
            Ok(true)
        }
        Bench::Network { arg, steps } => {
            let r = network::network_overhead(&network::NetworkConfig { arg, steps })?;
            emit(&r.to_result(), out)?;
            Ok(true)
        }
        Bench::Proxy { n } => {
            let r = proxy::proxy_overhead(&proxy::ProxyConfig { samples: n })?;
            emit(&r.to_result(), out)?;
            Ok(true)
        }
        Bench::Tma { control, corrupt_commit } => {
            let variant = match (control, corrupt_commit) {
                (true, _) => tma::Variant::Control,
                (_, true) => tma::Variant::CorruptCommit,
                _ => tma::Variant::Bug,
            };
            let t = tma::tma_walkthrough(&tma::TmaConfig { variant, ..Default::default() })?;
            let mut w: Box<dyn Write> = match out {
                Some(p) => Box::new(File::create(p)?),
                None => Box::new(io::stdout().lock()),
            };
            for l in t.lines() {
                writeln!(w, "{l}")?;
            }
            Ok(t.passed())
        }
        Bench::Hooks => {
            let r = hooks::hooks_overhead(&hooks::HooksConfig::default())?;
            emit(&r.to_result(), out)?;
            Ok(true)
        }
        Bench::Resume => {
            let r = resume::resume_equivalence(&resume::ResumeConfig::default())?;
            let mut res = ScenarioResult::default();
            res.push("checked", 0, r.checked as f64);
            res.push("mismatches", 0, r.mismatches.len() as f64);
            res.push("elapsed_s", 0, r.elapsed.as_secs_f64());
            emit(&res, out)?;
            for m in &r.mismatches {
                eprintln!("{m}");
            }
            Ok(r.mismatches.is_empty())
        }
    }
}

fn serve(a: VmArgs) -> Result<()> {
    let m = parse(&program_source(&a.program)?)?;
    let script = match &a.sensors {
        Some(p) => SensorScript::from_json(&std::fs::read_to_string(p)?)?,
        None => SensorScript::default(),
    };
    let policy = match a.policy.as_deref() {
        Some(n) => Some(BreakpointPolicy::from_name(n).with_context(|| format!("unknown policy {n:?}"))?),
        None => None,
    };
    let server = match a.role {
        Role::Remote => {
            let dev = Device::new(&script);
            if let Some(mst) = &a.master {
                let (h, p) = host_port(mst)?;
                dev.set_sink(master_sink(&h, p)?);
            }
            let event_payload = match a.event_payload {
                Payload::Session => DumpMode::Session,
                Payload::Remote => DumpMode::Remote,
            };
            remote_vm(m, &dev, RemoteOptions { port: a.port, limits: StackLimits::default(), event_payload })?
        }
        Role::Local => {
            let link = a.remote.as_deref().map(host_port).transpose()?;
            if link.is_none() && !a.proxy.is_empty() {
                bail!("--proxy needs --remote");
            }
            let device = link.as_ref().map(|(h, p)| (h.as_str(), *p));
            local_vm(m, device, &a.proxy, a.port, StackLimits::default())?
        }
    };
    if let Some(p) = policy {
        server.exec(move |mon| mon.ctx.policy = p);
    }
    println!("listening on 127.0.0.1:{}", server.port());
    loop {
        std::thread::park();
    }
}

fn master(port: u16) -> Result<()> {
    let node = MasterNode::spawn(listen(port)?);
    println!("listening on 127.0.0.1:{}", node.port());
    let mut seen = 0;
    loop {
        node.wait_for(seen + 1, std::time::Duration::from_secs(3600));
        let log = node.log();
        for r in &log[seen..] {
            println!("{:.3},{}", r.at_ms, r.value);
        }
        seen = log.len();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Bench { which, out } => bench(which, &out),
        Cmd::Vm(a) => serve(a).map(|_| true),
        Cmd::Master { port } => master(port).map(|_| true),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("oot: {e:#}");
            ExitCode::from(2)
        }
    }
}

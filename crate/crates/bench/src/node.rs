//! Starting the VM roles: the device (remote) VM and the local
//! reconstruction VM, each behind its own server.

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use oot_core::corpus;
use oot_core::device::{Device, SensorScript};
use oot_core::monitor::{DumpMode, Monitor};
use oot_core::proxy::{AccessStrategy, ProxyBridge, RemoteLink};
use oot_core::vm::StackLimits;
use oot_core::wat::parse_module;
use oot_core::SourceModule;
use oot_net::{listen, spawn_server, DeviceLink, ServerConfig, ServerHandle};

/// Program text from a file, or one of the corpus programs by name.
pub fn program_source(spec: &str) -> Result<String> {
    Ok(match spec {
        "countdown" => corpus::COUNTDOWN.to_string(),
        "temp_broadcast" => corpus::TEMP_BROADCAST.to_string(),
        "temp_monitor" => corpus::TEMP_MONITOR.to_string(),
        "temp_monitor_fixed" => corpus::TEMP_MONITOR_FIXED.to_string(),
        path => std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
    })
}

pub fn parse(src: &str) -> Result<SourceModule> {
    parse_module(src).map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Debug, Clone, Copy)]
pub struct RemoteOptions {
    pub port: u16,
    pub limits: StackLimits,
    pub event_payload: DumpMode,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions { port: 0, limits: StackLimits::default(), event_payload: DumpMode::Session }
    }
}

/// A device VM on simulated hardware. A crash reboots it, which costs the
/// device's reboot delay.
pub fn remote_vm(m: SourceModule, dev: &Device, opts: RemoteOptions) -> Result<ServerHandle> {
    let mut mon = Monitor::new_remote(m, dev.primitives(), opts.limits)?;
    let d = dev.clone();
    mon.ctx.on_restart = Some(Arc::new(move || d.reboot_delay()));
    mon.ctx.event_payload = opts.event_payload;
    Ok(spawn_server(mon, listen(opts.port)?, ServerConfig::default()))
}

pub fn remote_from_script(src: &str, script: &SensorScript, opts: RemoteOptions) -> Result<(ServerHandle, Device)> {
    let dev = Device::new(script);
    Ok((remote_vm(parse(src)?, &dev, opts)?, dev))
}

/// A local VM; with a device link its imports can be proxied. `proxied`
/// lists imports, by `$name`, that start on the Remote strategy.
pub fn local_vm(
    m: SourceModule,
    device: Option<(&str, u16)>,
    proxied: &[String],
    port: u16,
    limits: StackLimits,
) -> Result<ServerHandle> {
    let link: Option<Arc<dyn RemoteLink>> = match device {
        Some((host, p)) => Some(Arc::new(DeviceLink::connect(host, p)?)),
        None => None,
    };
    let mut bridge = ProxyBridge::new(&m, link);
    for name in proxied {
        let Some(f) = bridge.import_index(name) else { bail!("no import named {name}") };
        bridge.set_strategy(f, AccessStrategy::Remote)?;
    }
    let mon = Monitor::new_local(m, bridge.shared(), limits)?;
    Ok(spawn_server(mon, listen(port)?, ServerConfig::default()))
}

//! The debugger configuration file: which program, which imports to proxy,
//! and the devices to talk to.

use anyhow::{Context, Result};
use oot_core::monitor::BreakpointPolicy;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DeviceEntry {
    pub name: String,
    #[serde(default)]
    pub host: Option<String>,
    pub port: u16,
    #[serde(default)]
    pub policy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DebuggerConfig {
    pub program: String,
    #[serde(default)]
    pub proxy: Vec<String>,
    pub devices: Vec<DeviceEntry>,
}

impl DebuggerConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("debugger config")
    }

    /// The first device with a breakpoint policy is the remote one.
    pub fn remote(&self) -> Option<&DeviceEntry> {
        self.devices.iter().find(|d| d.policy.is_some())
    }

    pub fn remote_policy(&self) -> Result<BreakpointPolicy> {
        let name = self.remote().and_then(|d| d.policy.as_deref()).unwrap_or("pause");
        BreakpointPolicy::from_name(name).with_context(|| format!("unknown breakpoint policy {name:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use oot_core::corpus;

    #[test]
    fn corpus_config_loads() {
        let c = DebuggerConfig::from_json(corpus::DEBUGGER_CONFIG).unwrap();
        assert_eq!(c.program, "temp_monitor.wast");
        assert_eq!(c.proxy, ["$isConnected", "$reqTemp"]);
        assert_eq!(c.devices.len(), 2);
        assert_eq!(c.remote().unwrap().port, 80);
        assert_eq!(c.devices[1].policy, None);
        assert_eq!(c.remote_policy().unwrap(), BreakpointPolicy::SingleStop);
    }

    #[test]
    fn unknown_policy_is_an_error() {
        let c = DebuggerConfig::from_json(r#"{"program": "p", "devices": [{"name": "d", "port": 1, "policy": "halt"}]}"#)
            .unwrap();
        assert!(c.remote_policy().is_err());
    }
}

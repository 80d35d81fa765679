//! Local-side handling of calls to device-only functions: forward them to the
//! device, answer from the cache, or synthesize a value.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::module::{CodeOffset, SourceModule, TypeSig};
use crate::value::{Value, ValueKind};
use crate::vm::{HostFailure, PrimitiveTable, Trap, TrapKind, VmState};
use crate::wire::{ByteReader, ByteWriter, DecodeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessStrategy {
    Remote,
    Cache,
    /// A fixed value, or the zero value of the result kind.
    Mock(Option<Value>),
}

impl AccessStrategy {
    pub fn encode(&self, w: &mut ByteWriter) {
        match self {
            AccessStrategy::Remote => {
                w.u8(0);
            }
            AccessStrategy::Cache => {
                w.u8(1);
            }
            AccessStrategy::Mock(None) => {
                w.u8(2).u8(0);
            }
            AccessStrategy::Mock(Some(v)) => {
                w.u8(2).u8(1).value(v);
            }
        }
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(AccessStrategy::Remote),
            1 => Ok(AccessStrategy::Cache),
            2 => match r.u8()? {
                0 => Ok(AccessStrategy::Mock(None)),
                1 => Ok(AccessStrategy::Mock(Some(r.value()?))),
                b => Err(DecodeError::new(format!("bad presence byte {b}"))),
            },
            s => Err(DecodeError::new(format!("bad strategy {s}"))),
        }
    }
}

/// The device's answer to a proxy call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProxyReply {
    Value(Value),
    /// The function returned nothing.
    Unit,
    Trap(Trap),
}

impl ProxyReply {
    pub fn from_result(r: Result<Option<Value>, Trap>) -> Self {
        match r {
            Ok(Some(v)) => ProxyReply::Value(v),
            Ok(None) => ProxyReply::Unit,
            Err(t) => ProxyReply::Trap(t),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        match self {
            ProxyReply::Value(v) => {
                w.u8(0).value(v);
            }
            ProxyReply::Trap(t) => {
                w.u8(1).u8(t.kind.code()).offset(t.at).str(&t.message);
            }
            ProxyReply::Unit => {
                w.u8(2);
            }
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = ByteReader::new(bytes);
        let reply = match r.u8()? {
            0 => ProxyReply::Value(r.value()?),
            1 => {
                let code = r.u8()?;
                let kind = TrapKind::from_code(code).ok_or_else(|| DecodeError::new(format!("bad trap kind {code}")))?;
                let at: CodeOffset = r.offset()?;
                ProxyReply::Trap(Trap { kind, at, message: r.str()? })
            }
            2 => ProxyReply::Unit,
            s => return Err(DecodeError::new(format!("bad proxy reply status {s}"))),
        };
        r.finish()?;
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProxyError {
    #[error("remote link unavailable: {0}")]
    LinkUnavailable(String),
    #[error("no cached result for function {0} with these arguments")]
    CacheMiss(u32),
    #[error("remote trap: {0}")]
    RemoteTrap(Trap),
    #[error("function {0} is not an import")]
    NotAnImport(u32),
    #[error("function {0} has no cached results")]
    CacheEmpty(u32),
    #[error("mock value kind does not match the result of function {0}")]
    MockKind(u32),
}

/// Synchronous channel to the device VM.
pub trait RemoteLink: Send + Sync {
    fn proxy_call(&self, fidx: u32, args: &[Value]) -> Result<ProxyReply, String>;
}

/// Per-strategy call counts; each intercepted call bumps exactly one.
#[derive(Debug, Default)]
pub struct ProxyCounters {
    pub remote: AtomicU64,
    pub cache: AtomicU64,
    pub mock: AtomicU64,
}

impl ProxyCounters {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (self.remote.load(Ordering::SeqCst), self.cache.load(Ordering::SeqCst), self.mock.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone)]
struct ImportInfo {
    symbol: (String, String),
    name: Option<String>,
    sig: TypeSig,
}

pub struct ProxyBridge {
    imports: BTreeMap<u32, ImportInfo>,
    strategies: BTreeMap<u32, AccessStrategy>,
    cache: HashMap<(u32, Vec<Value>), Option<Value>>,
    link: Option<Arc<dyn RemoteLink>>,
    pub counters: Arc<ProxyCounters>,
}

fn imports_of(m: &SourceModule) -> BTreeMap<u32, ImportInfo> {
    m.funcs
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let symbol = f.import.clone()?;
            let sig = m.types.get(f.type_index as usize)?.clone();
            Some((i as u32, ImportInfo { symbol, name: f.name.clone(), sig }))
        })
        .collect()
}

impl ProxyBridge {
    pub fn new(m: &SourceModule, link: Option<Arc<dyn RemoteLink>>) -> Self {
        ProxyBridge {
            imports: imports_of(m),
            strategies: BTreeMap::new(),
            cache: HashMap::new(),
            link,
            counters: Arc::default(),
        }
    }

    pub fn shared(self) -> Arc<Mutex<ProxyBridge>> {
        Arc::new(Mutex::new(self))
    }

    pub fn set_link(&mut self, link: Option<Arc<dyn RemoteLink>>) {
        self.link = link;
    }

    /// Marked strategy, or the local default for unmarked imports.
    pub fn strategy(&self, fidx: u32) -> AccessStrategy {
        self.strategies.get(&fidx).copied().unwrap_or(AccessStrategy::Mock(None))
    }

    pub fn marked(&self) -> &BTreeMap<u32, AccessStrategy> {
        &self.strategies
    }

    pub fn set_strategy(&mut self, fidx: u32, s: AccessStrategy) -> Result<(), ProxyError> {
        let info = self.imports.get(&fidx).ok_or(ProxyError::NotAnImport(fidx))?;
        match s {
            AccessStrategy::Cache if !self.cache.keys().any(|(f, _)| *f == fidx) => {
                return Err(ProxyError::CacheEmpty(fidx));
            }
            AccessStrategy::Mock(Some(v)) if info.sig.result() != Some(v.kind()) => {
                return Err(ProxyError::MockKind(fidx));
            }
            _ => {}
        }
        self.strategies.insert(fidx, s);
        Ok(())
    }

    /// Checks a batch of strategy changes, then applies all or none.
    pub fn set_strategies(&mut self, changes: &[(u32, AccessStrategy)]) -> Result<(), ProxyError> {
        let saved = self.strategies.clone();
        for (f, s) in changes {
            if let Err(e) = self.set_strategy(*f, *s) {
                self.strategies = saved;
                return Err(e);
            }
        }
        Ok(())
    }

    /// Resolves `$name` or `name` against the imports.
    pub fn import_index(&self, name: &str) -> Option<u32> {
        let name = name.strip_prefix('$').unwrap_or(name);
        self.imports.iter().find(|(_, i)| i.name.as_deref() == Some(name)).map(|(f, _)| *f)
    }

    pub fn cached(&self, fidx: u32, args: &[Value]) -> Option<Option<Value>> {
        self.cache.get(&(fidx, args.to_vec())).copied()
    }

    pub fn intercept(&mut self, fidx: u32, args: &[Value]) -> Result<Option<Value>, ProxyError> {
        let info = self.imports.get(&fidx).ok_or(ProxyError::NotAnImport(fidx))?;
        match self.strategy(fidx) {
            AccessStrategy::Remote => {
                self.counters.remote.fetch_add(1, Ordering::SeqCst);
                let link = self.link.as_ref().ok_or_else(|| ProxyError::LinkUnavailable("no device link".into()))?;
                let out = match link.proxy_call(fidx, args).map_err(ProxyError::LinkUnavailable)? {
                    ProxyReply::Value(v) => Some(v),
                    ProxyReply::Unit => None,
                    ProxyReply::Trap(t) => return Err(ProxyError::RemoteTrap(t)),
                };
                self.cache.insert((fidx, args.to_vec()), out);
                Ok(out)
            }
            AccessStrategy::Cache => {
                self.counters.cache.fetch_add(1, Ordering::SeqCst);
                self.cache.get(&(fidx, args.to_vec())).copied().ok_or(ProxyError::CacheMiss(fidx))
            }
            AccessStrategy::Mock(v) => {
                self.counters.mock.fetch_add(1, Ordering::SeqCst);
                Ok(v.or_else(|| info.sig.result().map(ValueKind::zero)))
            }
        }
    }

    /// Follows a module update: strategies and cache entries survive for
    /// imports whose symbol and signature are unchanged (matched by symbol,
    /// since indices may shift).
    pub fn retarget(&mut self, m: &SourceModule) {
        let new = imports_of(m);
        let by_symbol: HashMap<(&(String, String), &TypeSig), u32> =
            new.iter().map(|(f, i)| ((&i.symbol, &i.sig), *f)).collect();
        let map = |old: u32| -> Option<u32> {
            let i = self.imports.get(&old)?;
            by_symbol.get(&(&i.symbol, &i.sig)).copied()
        };
        let strategies = self.strategies.iter().filter_map(|(f, s)| Some((map(*f)?, *s))).collect();
        let cache = self.cache.iter().filter_map(|((f, a), v)| Some(((map(*f)?, a.clone()), *v))).collect();
        self.strategies = strategies;
        self.cache = cache;
        self.imports = new;
    }
}

/// Binds every import of `m` to the bridge.
pub fn proxy_primitives(bridge: &Arc<Mutex<ProxyBridge>>, m: &SourceModule) -> PrimitiveTable {
    let mut t = PrimitiveTable::new();
    for (fidx, info) in imports_of(m) {
        let b = bridge.clone();
        t.insert(&info.symbol.0, &info.symbol.1, info.sig.clone(), move |args| {
            b.lock().unwrap().intercept(fidx, args).map_err(|e| HostFailure::new(e.to_string()))
        });
    }
    t
}

/// Device side of a proxy call: run the function without disturbing the
/// application.
pub fn serve_proxy_call(vm: &mut VmState, fidx: u32, args: &[Value]) -> ProxyReply {
    ProxyReply::from_result(vm.invoke_isolated(fidx, args))
}

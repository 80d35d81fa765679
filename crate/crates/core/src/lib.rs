//! Out-of-things debugging core: a WAT-subset stack machine whose paused
//! state can be shipped to another VM, resumed there, and driven through an
//! interrupt-based debug monitor.

pub mod corpus;
pub mod device;
pub mod module;
pub mod monitor;
pub mod proxy;
pub mod session;
pub mod value;
pub mod vm;
pub mod wat;
pub mod wire;

pub use module::{CodeOffset, FuncDef, GlobalDef, Instr, Op, SourceModule, TypeSig};
pub use value::{Value, ValueKind};
pub use vm::{Frame, PrimitiveTable, RunExit, StackLimits, Status, StepOutcome, Trap, TrapKind, VmState};

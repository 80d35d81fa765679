//! Frontend for the WebAssembly-text subset: parsing, validation, printing,
//! the module blob codec and line-based breakpoint resolution.

mod blob;
mod parser;
mod printer;
mod sexpr;
mod validate;

pub use blob::{decode_module, encode_module, module_hash, ModuleBlob};
pub use parser::parse_module;
pub use printer::print_module;
pub use validate::{validate_module, Finding, ValidationReport};

use thiserror::Error;

use crate::module::{CodeOffset, SourceModule};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WatError {
    #[error("line {line}: {message}")]
    Parse { line: u32, message: String },
    #[error("line {line}: unknown symbol {symbol}")]
    Resolve { line: u32, symbol: String },
}

impl WatError {
    pub(crate) fn parse(line: u32, message: impl Into<String>) -> Self {
        WatError::Parse { line, message: message.into() }
    }

    pub(crate) fn resolve(line: u32, symbol: impl Into<String>) -> Self {
        WatError::Resolve { line, symbol: symbol.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no code at line {0}")]
pub struct NoCodeAtLine(pub u32);

/// The first instruction (lowest offset, first function) attributed to `line`.
pub fn resolve_breakpoint(m: &SourceModule, line: u32) -> Result<CodeOffset, NoCodeAtLine> {
    m.line_table
        .get(&line)
        .and_then(|offsets| offsets.iter().min().copied())
        .ok_or(NoCodeAtLine(line))
}

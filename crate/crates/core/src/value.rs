//! Runtime scalars.

use std::fmt;

/// The four Wasm number types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueKind {
    I32,
    I64,
    F32,
    F64,
}

impl ValueKind {
    /// Wasm binary type code, reused by the wire encodings.
    pub const fn code(self) -> u8 {
        match self {
            ValueKind::I32 => 0x7F,
            ValueKind::I64 => 0x7E,
            ValueKind::F32 => 0x7D,
            ValueKind::F64 => 0x7C,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0x7F => Some(ValueKind::I32),
            0x7E => Some(ValueKind::I64),
            0x7D => Some(ValueKind::F32),
            0x7C => Some(ValueKind::F64),
            _ => None,
        }
    }

    /// Payload width in bytes.
    pub const fn width(self) -> usize {
        match self {
            ValueKind::I32 | ValueKind::F32 => 4,
            ValueKind::I64 | ValueKind::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueKind::I32 => "i32",
            ValueKind::I64 => "i64",
            ValueKind::F32 => "f32",
            ValueKind::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "i32" => Some(ValueKind::I32),
            "i64" => Some(ValueKind::I64),
            "f32" => Some(ValueKind::F32),
            "f64" => Some(ValueKind::F64),
            _ => None,
        }
    }

    /// The zero value of this kind.
    pub fn zero(self) -> Value {
        match self {
            ValueKind::I32 => Value::I32(0),
            ValueKind::I64 => Value::I64(0),
            ValueKind::F32 => Value::F32(0),
            ValueKind::F64 => Value::F64(0),
        }
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A tagged runtime value. Floats are held as raw bits so that values compare
/// and hash bit-exactly (NaN payloads included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Value {
    I32(i32),
    I64(i64),
    F32(u32),
    F64(u64),
}

impl Value {
    pub fn f32(v: f32) -> Self {
        Value::F32(v.to_bits())
    }

    pub fn f64(v: f64) -> Self {
        Value::F64(v.to_bits())
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Value::I32(_) => ValueKind::I32,
            Value::I64(_) => ValueKind::I64,
            Value::F32(_) => ValueKind::F32,
            Value::F64(_) => ValueKind::F64,
        }
    }

    pub fn as_i32(&self) -> Option<i32> {
        match *self {
            Value::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<f32> {
        match *self {
            Value::F32(bits) => Some(f32::from_bits(bits)),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::F64(bits) => Some(f64::from_bits(bits)),
            _ => None,
        }
    }

    /// Little-endian payload bytes (width given by the kind).
    pub fn payload_le(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        match *self {
            Value::I32(v) => out[..4].copy_from_slice(&v.to_le_bytes()),
            Value::I64(v) => out.copy_from_slice(&v.to_le_bytes()),
            Value::F32(b) => out[..4].copy_from_slice(&b.to_le_bytes()),
            Value::F64(b) => out.copy_from_slice(&b.to_le_bytes()),
        }
        out
    }

    pub fn from_payload_le(kind: ValueKind, bytes: &[u8]) -> Option<Self> {
        let v = match kind {
            ValueKind::I32 => Value::I32(i32::from_le_bytes(bytes.get(..4)?.try_into().ok()?)),
            ValueKind::I64 => Value::I64(i64::from_le_bytes(bytes.get(..8)?.try_into().ok()?)),
            ValueKind::F32 => Value::F32(u32::from_le_bytes(bytes.get(..4)?.try_into().ok()?)),
            ValueKind::F64 => Value::F64(u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?)),
        };
        Some(v)
    }

    /// Parses a typed literal such as `7i64`, `21.5f32` or `0i32`.
    pub fn parse_typed(text: &str) -> Option<Self> {
        for kind in [ValueKind::I32, ValueKind::I64, ValueKind::F32, ValueKind::F64] {
            if let Some(num) = text.strip_suffix(kind.name()) {
                let num = num.strip_suffix('_').unwrap_or(num);
                return match kind {
                    ValueKind::I32 => num.parse().ok().map(Value::I32),
                    ValueKind::I64 => num.parse().ok().map(Value::I64),
                    ValueKind::F32 => num.parse().ok().map(Value::f32),
                    ValueKind::F64 => num.parse().ok().map(Value::f64),
                };
            }
        }
        None
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Value::I32(v) => write!(f, "{v}i32"),
            Value::I64(v) => write!(f, "{v}i64"),
            Value::F32(b) => write!(f, "{:?}f32", f32::from_bits(b)),
            Value::F64(b) => write!(f, "{:?}f64", f64::from_bits(b)),
        }
    }
}

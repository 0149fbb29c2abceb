//! Element types carried by [`Tensor`](crate::Tensor).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Storage type of a tensor element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementType {
    #[serde(rename = "fp32")]
    Fp32,
    #[serde(rename = "fp16")]
    Fp16,
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "int16")]
    Int16,
    #[serde(rename = "int32")]
    Int32,
}

impl ElementType {
    pub const ALL: [ElementType; 5] = [
        ElementType::Fp32,
        ElementType::Fp16,
        ElementType::Int8,
        ElementType::Int16,
        ElementType::Int32,
    ];

    pub const fn byte_width(self) -> usize {
        match self {
            ElementType::Fp32 | ElementType::Int32 => 4,
            ElementType::Fp16 | ElementType::Int16 => 2,
            ElementType::Int8 => 1,
        }
    }

    pub const fn is_float(self) -> bool {
        matches!(self, ElementType::Fp32 | ElementType::Fp16)
    }

    pub const fn is_integer(self) -> bool {
        !self.is_float()
    }

    /// Tag byte used by the TNSR1 file format.
    pub const fn tag(self) -> u8 {
        match self {
            ElementType::Fp32 => 0,
            ElementType::Fp16 => 1,
            ElementType::Int8 => 2,
            ElementType::Int16 => 3,
            ElementType::Int32 => 4,
        }
    }

    pub const fn from_tag(tag: u8) -> Option<ElementType> {
        match tag {
            0 => Some(ElementType::Fp32),
            1 => Some(ElementType::Fp16),
            2 => Some(ElementType::Int8),
            3 => Some(ElementType::Int16),
            4 => Some(ElementType::Int32),
            _ => None,
        }
    }

    /// Inclusive integer range, `None` for floating types.
    pub const fn int_range(self) -> Option<(i64, i64)> {
        match self {
            ElementType::Int8 => Some((i8::MIN as i64, i8::MAX as i64)),
            ElementType::Int16 => Some((i16::MIN as i64, i16::MAX as i64)),
            ElementType::Int32 => Some((i32::MIN as i64, i32::MAX as i64)),
            _ => None,
        }
    }

    /// Bytes occupied by `elements` values of this type.
    pub const fn bytes(self, elements: u64) -> u64 {
        elements * self.byte_width() as u64
    }

    pub const fn name(self) -> &'static str {
        match self {
            ElementType::Fp32 => "fp32",
            ElementType::Fp16 => "fp16",
            ElementType::Int8 => "int8",
            ElementType::Int16 => "int16",
            ElementType::Int32 => "int32",
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ElementType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown element type `{s}`"))
    }
}

//! FP8 E4M3 codec for sparse-code coefficients.
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits, following
//! the OCP convention: no infinities, a single NaN pattern per sign
//! (S.1111.111), subnormals supported, max finite value 448. Encoding uses
//! round-to-nearest-even and saturates finite overflow to +-448; the NaN
//! pattern is never produced for finite input.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const NAN_PATTERN: u8 = 0x7F;
const SIGN_BIT: u8 = 0x80;
/// Largest encodable magnitude (S.1111.110).
pub const MAX_FINITE: f32 = 448.0;
/// Byte pattern of +448.
pub const MAX_FINITE_BYTE: u8 = 0x7E;

/// Exact value of a non-negative byte pattern (0x00..=0x7E), NaN for 0x7F.
fn magnitude_of(pattern: u8) -> f32 {
    debug_assert!(pattern & SIGN_BIT == 0);
    let exp = (pattern >> 3) & 0xF;
    let mant = (pattern & 0x7) as f32;
    if exp == 0 {
        // subnormal: mant/8 * 2^-6
        mant * (1.0 / 512.0)
    } else if pattern == NAN_PATTERN {
        f32::NAN
    } else {
        (1.0 + mant / 8.0) * 2f32.powi(exp as i32 - 7)
    }
}

/// The 127 non-negative finite magnitudes, ascending (index = byte pattern).
fn magnitude_table() -> &'static [f32; 127] {
    static TABLE: OnceLock<[f32; 127]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 127];
        for (p, slot) in t.iter_mut().enumerate() {
            *slot = magnitude_of(p as u8);
        }
        t
    })
}

/// Full decode table; the two NaN patterns hold f32::NAN and must be
/// screened off before lookup.
pub(crate) fn decode_table() -> &'static [f32; 256] {
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 256];
        for (b, slot) in t.iter_mut().enumerate() {
            let mag = magnitude_of(b as u8 & !SIGN_BIT);
            *slot = if b as u8 & SIGN_BIT != 0 { -mag } else { mag };
        }
        t
    })
}

/// Decode one E4M3 byte to its exact f32 value.
///
/// The NaN patterns (0x7F, 0xFF) are rejected: they never occur in data this
/// crate produced.
pub fn decode_fp8(b: u8) -> Result<f32> {
    if b & !SIGN_BIT == NAN_PATTERN {
        return Err(Error::InvalidEncoding(format!("fp8 NaN pattern {b:#04x}")));
    }
    Ok(decode_table()[b as usize])
}

/// Encode a finite f32 to the nearest E4M3 byte (ties to even mantissa).
pub fn encode_fp8(x: f32) -> Result<u8> {
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("fp8 encode of non-finite {x}")));
    }
    let sign = if x.is_sign_negative() { SIGN_BIT } else { 0 };
    let mag = x.abs();
    if mag >= MAX_FINITE {
        return Ok(sign | MAX_FINITE_BYTE);
    }
    let table = magnitude_table();
    // Largest pattern whose value is <= mag.
    let lo = match table.partition_point(|v| *v <= mag) {
        0 => 0, // mag < smallest subnormal step handled below via midpoint
        p => p - 1,
    };
    let pattern = if lo + 1 < table.len() {
        // Midpoints are exact in f64 (values are short dyadics).
        let mid = (table[lo] as f64 + table[lo + 1] as f64) / 2.0;
        match (mag as f64).partial_cmp(&mid).unwrap() {
            std::cmp::Ordering::Less => lo,
            std::cmp::Ordering::Greater => lo + 1,
            std::cmp::Ordering::Equal => {
                if lo % 2 == 0 {
                    lo
                } else {
                    lo + 1
                }
            }
        }
    } else {
        lo
    };
    Ok(sign | pattern as u8)
}

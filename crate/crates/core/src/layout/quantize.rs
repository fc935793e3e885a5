use crate::error::{Error, Result};

/// Largest supported quantization precision.
pub const MAX_BITS: u32 = 16;

const TOLERANCE: f64 = 1e-6;

fn check_bits(bits: u32) -> Result<u32> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(1 << bits)
    } else {
        Err(Error::InvalidBits(bits))
    }
}

/// Maps a unit-interval value to one of `2^bits` uniform bins.
pub fn quantize(v: f64, bits: u32) -> Result<u32> {
    let n = check_bits(bits)?;
    if !v.is_finite() || !(-TOLERANCE..=1.0 + TOLERANCE).contains(&v) {
        return Err(Error::InvalidCoordinate(v));
    }
    let bin = (v.clamp(0.0, 1.0) * f64::from(n)).floor() as u32;
    Ok(bin.min(n - 1))
}

/// Center of `bin` on the unit interval.
pub fn dequantize(bin: u32, bits: u32) -> Result<f64> {
    let n = check_bits(bits)?;
    if bin >= n {
        return Err(Error::InvalidBin { bin, bits });
    }
    Ok((f64::from(bin) + 0.5) / f64::from(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.5, 8).unwrap(), 128);
        assert_eq!(quantize(1.0, 8).unwrap(), 255);
        assert_eq!(quantize(0.3, 3).unwrap(), 2);
        assert_eq!(quantize(0.0, 1).unwrap(), 0);
    }

    #[test]
    fn quantize_tolerates_tiny_excursions() {
        assert_eq!(quantize(-5e-7, 8).unwrap(), 0);
        assert_eq!(quantize(1.0 + 5e-7, 8).unwrap(), 255);
        assert!(matches!(quantize(-1e-3, 8), Err(Error::InvalidCoordinate(_))));
        assert!(matches!(quantize(f64::NAN, 8), Err(Error::InvalidCoordinate(_))));
    }

    #[test]
    fn bits_out_of_range() {
        assert!(matches!(quantize(0.5, 0), Err(Error::InvalidBits(0))));
        assert!(matches!(dequantize(0, 17), Err(Error::InvalidBits(17))));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(0, 1).unwrap(), 0.25);
        assert_eq!(dequantize(255, 8).unwrap(), 0.998046875);
        assert!(matches!(dequantize(256, 8), Err(Error::InvalidBin { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(v in 0.0f64..=1.0, bits in 1u32..=16) {
            let back = dequantize(quantize(v, bits).unwrap(), bits).unwrap();
            prop_assert!((back - v).abs() <= 0.5 / f64::from(1u32 << bits) + 1e-15);
        }

        #[test]
        fn bin_centers_are_fixed_points(bits in 1u32..=16, frac in 0.0f64..1.0) {
            let n = 1u32 << bits;
            let bin = ((frac * f64::from(n)) as u32).min(n - 1);
            prop_assert_eq!(quantize(dequantize(bin, bits).unwrap(), bits).unwrap(), bin);
        }
    }
}

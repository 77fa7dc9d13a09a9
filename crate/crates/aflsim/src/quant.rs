//! Unbiased 8-bit stochastic quantization of cached gradients.
//!
//! The affine map sends [min(v), max(v)] onto the 0..=255 code range;
//! stochastic rounding keeps every coordinate unbiased, so a cache of
//! quantized gradients aggregates to the same expectation as the
//! full-precision cache.

use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub codes: Vec<u8>,
    pub scale: f64,
    pub zero_point: f64,
}

/// Quantize with stochastic rounding. A constant vector degenerates to
/// scale 0 and encodes exactly.
pub fn quantize8(v: &[f64], rng: &mut RngStream) -> QuantizedVector {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() || hi == lo {
        return QuantizedVector {
            codes: vec![0; v.len()],
            scale: 0.0,
            zero_point: if lo.is_finite() { lo } else { 0.0 },
        };
    }
    let scale = (hi - lo) / 255.0;
    let codes = v
        .iter()
        .map(|&x| {
            let rel = ((x - lo) / scale).clamp(0.0, 255.0);
            let floor = rel.floor();
            let frac = rel - floor;
            let mut code = floor as u16;
            if frac > 0.0 && rng.gen_uniform() < frac {
                code += 1;
            }
            code.min(255) as u8
        })
        .collect();
    QuantizedVector {
        codes,
        scale,
        zero_point: lo,
    }
}

/// Deterministic inverse of the affine map.
pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    q.codes
        .iter()
        .map(|&c| q.zero_point + q.scale * c as f64)
        .collect()
}

impl QuantizedVector {
    /// Bytes held by one cached entry: one byte per coordinate plus the two
    /// affine parameters.
    pub fn size_bytes(&self) -> usize {
        self.codes.len() + 2 * std::mem::size_of::<f64>()
    }
}

/// Bytes held by a full-precision cached entry of dimension `d`.
pub fn dense_entry_bytes(d: usize) -> usize {
    d * std::mem::size_of::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngFactory;

    fn stream(seed: u64) -> crate::rng::RngStream {
        RngFactory::new(seed).stream("quant")
    }

    #[test]
    fn zero_vector_round_trips_exactly() {
        let q = quantize8(&[0.0; 7], &mut stream(1));
        assert_eq!(dequantize(&q), vec![0.0; 7]);
    }

    #[test]
    fn constant_vector_round_trips_exactly() {
        let q = quantize8(&[3.7; 5], &mut stream(2));
        assert_eq!(q.scale, 0.0);
        assert_eq!(dequantize(&q), vec![3.7; 5]);
    }

    #[test]
    fn endpoints_encode_exactly() {
        // v = (0, 1, 2): scale = 2/255, zero_point = 0. The endpoints have
        // zero fractional part, so their codes are forced; the midpoint sits
        // at 127.5 and rounds stochastically.
        let q = quantize8(&[0.0, 1.0, 2.0], &mut stream(3));
        assert_eq!(q.zero_point, 0.0);
        assert!((q.scale - 2.0 / 255.0).abs() <= 1e-18);
        assert_eq!(q.codes[0], 0);
        assert!(q.codes[1] == 127 || q.codes[1] == 128);
        assert_eq!(q.codes[2], 255);
    }

    #[test]
    fn stochastic_rounding_is_unbiased() {
        let v = [0.13, -0.91, 0.42, 0.0, 1.37];
        let mut rng = stream(4);
        let cycles = 100_000;
        let mut sums = vec![0.0; v.len()];
        let mut sq_sums = vec![0.0; v.len()];
        for _ in 0..cycles {
            let back = dequantize(&quantize8(&v, &mut rng));
            for (k, b) in back.iter().enumerate() {
                sums[k] += b;
                sq_sums[k] += b * b;
            }
        }
        for k in 0..v.len() {
            let mean = sums[k] / cycles as f64;
            let var = (sq_sums[k] / cycles as f64 - mean * mean).max(0.0);
            let se = (var / cycles as f64).sqrt();
            // Exactly-encoded endpoints have zero variance; allow for the
            // test's own summation rounding there.
            assert!(
                (mean - v[k]).abs() <= 3.0 * se + 1e-9,
                "coordinate {k}: mean {mean} vs {}",
                v[k]
            );
        }
    }

    #[test]
    fn size_accounting() {
        let q = quantize8(&vec![0.5; 32], &mut stream(5));
        assert_eq!(q.size_bytes(), 32 + 16);
        assert_eq!(dense_entry_bytes(32), 256);
    }
}

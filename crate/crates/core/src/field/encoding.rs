use serde::{Deserialize, Serialize};

/// Frequency counts for the sinusoidal input encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub pos_frequencies: usize,
    pub dir_frequencies: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pos_frequencies: 6,
            dir_frequencies: 2,
        }
    }
}

impl EncodingConfig {
    pub fn pos_dim(&self) -> usize {
        encoded_dim(self.pos_frequencies)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_dim(self.dir_frequencies)
    }
}

pub const fn encoded_dim(frequencies: usize) -> usize {
    3 + 6 * frequencies
}

/// `(x, sin(2^0 π x), cos(2^0 π x), ..., sin(2^(L-1) π x), cos(2^(L-1) π x))`.
pub fn encode(x: &[f64; 3], frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_dim(frequencies)];
    encode_into(x, frequencies, &mut out);
    out
}

pub fn encode_into(x: &[f64; 3], frequencies: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_dim(frequencies));
    out[..3].copy_from_slice(x);
    let mut scale = std::f64::consts::PI;
    for k in 0..frequencies {
        let base = 3 + 6 * k;
        for j in 0..3 {
            let (s, c) = (scale * x[j]).sin_cos();
            out[base + j] = s;
            out[base + 3 + j] = c;
        }
        scale *= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_encodes_to_zero_sines_unit_cosines() {
        let e = encode(&[0.0; 3], 4);
        assert_eq!(e.len(), 27);
        for k in 0..4 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
    }

    #[test]
    fn zero_frequencies_is_identity() {
        assert_eq!(encode(&[0.3, -1.0, 2.5], 0), vec![0.3, -1.0, 2.5]);
    }

    #[test]
    fn dimension_for_six_frequencies() {
        assert_eq!(encoded_dim(6), 39);
        assert_eq!(EncodingConfig::default().pos_dim(), 39);
        assert_eq!(EncodingConfig::default().dir_dim(), 15);
    }

    #[test]
    fn frequencies_double() {
        let e = encode(&[0.25, 0.0, 0.0], 2);
        assert!((e[3] - (std::f64::consts::PI * 0.25).sin()).abs() < 1e-15);
        assert!((e[9] - (std::f64::consts::PI * 0.5).sin()).abs() < 1e-15);
    }
}

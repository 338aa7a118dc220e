//! Counter-based random numbers: Philox4x32-10 with Box–Muller normals.
//!
//! The stream is fully specified, so golden vectors are portable:
//!
//! * key = `(seed & 0xffff_ffff, seed >> 32)`
//! * block `b` uses counter `(b & 0xffff_ffff, b >> 32, 0, 0)` and yields
//!   two `u64` words `w0 | w1 << 32` and `w2 | w3 << 32`
//! * uniform in the open interval (0, 1): `((u >> 11) + 0.5) · 2⁻⁵³`
//! * normals come in Box–Muller pairs from two consecutive uniforms
//!   `(u1, u2)`: `r·cos(2πu2)`, `r·sin(2πu2)` with `r = √(−2 ln u1)`;
//!   the second value of the final pair is dropped for odd counts
//!
//! Transcendentals go through `libm`, which is pure Rust and gives the
//! same bits on every target.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds, as published with Random123.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut key = key;
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// Seeded position in the Philox stream. Single-owner: advance it from one
/// thread only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    /// Index of the next `u64` word in the stream.
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        let block = self.position / 2;
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        let w = philox4x32_10([block as u32, (block >> 32) as u32, 0, 0], key);
        let word = if self.position.is_multiple_of(2) {
            u64::from(w[0]) | (u64::from(w[1]) << 32)
        } else {
            u64::from(w[2]) | (u64::from(w[3]) << 32)
        };
        self.position += 1;
        word
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// One Box–Muller pair of standard normals.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// `n` standard normals.
    pub fn standard_normals(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.next_normal_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    }
}

/// I.i.d. draws from N(mean, sd²). `sd == 0` yields exactly `mean` everywhere
/// but still advances the stream.
pub fn sample_normal(rng: &mut RngState, shape: Vec<usize>, mean: f64, sd: f64) -> Result<Tensor> {
    if !(sd.is_finite() && sd >= 0.0) {
        return Err(Error::Parameter(format!(
            "standard deviation must be finite and >= 0, got {sd}"
        )));
    }
    let n = shape.iter().product();
    let z = rng.standard_normals(n);
    let data = if sd == 0.0 {
        vec![mean; n]
    } else {
        z.into_iter().map(|z| mean + sd * z).collect()
    };
    Tensor::new(shape, data)
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for corruption run `run` of sample `sample_id`:
/// `mix64(mix64(base_seed ^ fnv1a64(sample_id)) ^ run)`.
///
/// Depends only on the sample id, never on its position in a dataset.
pub fn derive_seed(base_seed: u64, sample_id: &str, run: u64) -> u64 {
    mix64(mix64(base_seed ^ fnv1a64(sample_id.as_bytes())) ^ run)
}

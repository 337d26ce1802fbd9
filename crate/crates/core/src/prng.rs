//! Counter-based deterministic generator, "CBG-1".
//!
//! Every value is a pure function of `(seed, stream, counter)`, so any
//! element of any stream can be regenerated independently and in parallel.
//! The construction is fixed and versioned so fixtures are reproducible:
//!
//! * `mix` is the SplitMix64 finalizer (a 64-bit permutation);
//! * `subseed(seed, stream) = mix(seed + (stream + 1) * GOLDEN)`;
//! * `raw(seed, stream, k) = mix(subseed ^ ((k + 1) * GOLDEN))`;
//! * uniforms are `((raw >> 11) + 1) * 2^-53`, in `(0, 1]`;
//! * standard normals come from the Box-Muller transform applied to the
//!   uniform pair at counters `(2k, 2k+1)`.
//!
//! Identical `(seed, stream, counter)` triples produce identical bits on a
//! given platform; the integer pipeline is platform-independent, and the
//! normal transform depends only on `sqrt`, `ln`, `sin`, `cos` of `f64`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn subseed(seed: u64, stream: u64) -> u64 {
    mix(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// The raw 64-bit value at `(seed, stream, counter)`.
#[inline]
pub fn raw_u64(seed: u64, stream: u64, counter: u64) -> u64 {
    mix(subseed(seed, stream) ^ counter.wrapping_add(1).wrapping_mul(GOLDEN))
}

/// Uniform draw in `(0, 1]` at `(seed, stream, counter)`.
#[inline]
pub fn uniform_open01(seed: u64, stream: u64, counter: u64) -> f64 {
    let bits = raw_u64(seed, stream, counter) >> 11;
    (bits + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// The Box-Muller pair at `pair_index`, consuming counters
/// `2*pair_index` and `2*pair_index + 1`.
#[inline]
pub fn normal_pair(seed: u64, stream: u64, pair_index: u64) -> (f64, f64) {
    let u1 = uniform_open01(seed, stream, 2 * pair_index);
    let u2 = uniform_open01(seed, stream, 2 * pair_index + 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Standard normal draw number `i` of a stream.
#[inline]
pub fn normal_at(seed: u64, stream: u64, i: u64) -> f64 {
    let (a, b) = normal_pair(seed, stream, i / 2);
    if i.is_multiple_of(2) {
        a
    } else {
        b
    }
}

/// The first `count` standard normals of a stream.
pub fn standard_normals(seed: u64, stream: u64, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    let mut pair = 0u64;
    while out.len() < count {
        let (a, b) = normal_pair(seed, stream, pair);
        out.push(a);
        if out.len() < count {
            out.push(b);
        }
        pair += 1;
    }
    out
}

/// Sequential view over one stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            seed,
            stream,
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = raw_u64(self.seed, self.stream, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `(0, 1]`.
    pub fn next_uniform(&mut self) -> f64 {
        let v = uniform_open01(self.seed, self.stream, self.counter);
        self.counter += 1;
        v
    }

    /// `usize` in `[0, bound)` by rejection-free modulo; fine for test fixtures.
    pub fn below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }
}

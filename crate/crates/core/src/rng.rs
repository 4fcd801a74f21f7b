//! Counter-based deterministic random numbers.
//!
//! Every draw is a pure function of `(seed, counter)`: a SplitMix64 finalizer
//! over `seed + (counter+1) * GOLDEN`. There is no sequential state to share,
//! so parallel runs get independent streams by deriving child seeds, and any
//! sample can be regenerated in isolation. Normal variates use Box-Muller on
//! two 53-bit uniforms; the trig happens in f64 and the result is stored f32.

use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn bits_at(seed: u64, counter: u64) -> u64 {
    mix(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Uniform in (0, 1], from the top 53 bits of the mixed counter.
pub fn uniform_at(seed: u64, counter: u64) -> f64 {
    (((bits_at(seed, counter) >> 11) + 1) as f64) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw for one (seed, counter) pair.
pub fn normal_at(seed: u64, counter: u64) -> f32 {
    let u1 = uniform_at(seed, counter.wrapping_mul(2));
    let u2 = uniform_at(seed, counter.wrapping_mul(2).wrapping_add(1));
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Derive an independent child stream, e.g. per modality or per step.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_add(GOLDEN)))
}

/// Tensor of iid standard normals, deterministic in (shape, seed).
pub fn gaussian_noise(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| normal_at(seed, i as u64)).collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent by construction")
}

/// Sequential convenience wrapper over the counter stream.
pub struct Stream {
    seed: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_uniform(&mut self) -> f64 {
        let u = uniform_at(self.seed, self.counter);
        self.counter += 1;
        u
    }

    pub fn next_normal(&mut self) -> f32 {
        // own counter space: interleaving with uniforms must not collide
        let z = normal_at(derive_seed(self.seed, 1), self.counter);
        self.counter += 1;
        z
    }

    pub fn next_u64(&mut self) -> u64 {
        let b = bits_at(self.seed, self.counter);
        self.counter += 1;
        b
    }

    /// Split off an independent child stream.
    pub fn split(&mut self) -> Stream {
        Stream::new(derive_seed(self.seed, self.next_u64()))
    }
}

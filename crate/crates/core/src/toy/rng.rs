use rand_core::RngCore;
use rand_pcg::Pcg32;

/// PCG-XSH-RR 64/32 with a 64-bit state (`rand_pcg::Pcg32`). All draws are
/// integer or basic IEEE arithmetic, so streams are bit-identical across
/// platforms.
pub struct ToyRng(Pcg32);

/// Stream selectors keep weight, corpus and prompt draws independent.
pub(crate) const WEIGHT_STREAM: u64 = 0x5eed_0001;
pub(crate) const CORPUS_STREAM: u64 = 0x5eed_0002;
pub(crate) const PROMPT_STREAM: u64 = 0x5eed_0003;

impl ToyRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self(Pcg32::new(seed, stream))
    }

    pub fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        let hi = (self.next_u32() >> 5) as u64;
        let lo = (self.next_u32() >> 6) as u64;
        ((hi << 26) | lo) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-shift, slight bias is fine here).
    pub fn next_below(&mut self, n: u32) -> u32 {
        ((self.next_u32() as u64 * n as u64) >> 32) as u32
    }

    /// Uniform on `[-a, a)` with standard deviation `std`, i.e. `a = std * sqrt(3)`.
    pub fn symmetric(&mut self, std: f32) -> f32 {
        let a = std * 3.0f32.sqrt();
        (2.0 * self.next_f32() - 1.0) * a
    }
}

use super::rng::{ToyRng, CORPUS_STREAM, PROMPT_STREAM};

/// Zipf-distributed token stream (`P(rank r) ∝ 1/(r+1)`) over a seeded
/// shuffle of the vocabulary.
struct ZipfSampler {
    cumulative: Vec<f64>,
    rank_to_token: Vec<u32>,
}

impl ZipfSampler {
    fn new(vocab: usize, rng: &mut ToyRng) -> Self {
        let mut acc = 0.0f64;
        let cumulative = (0..vocab)
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        let mut rank_to_token: Vec<u32> = (0..vocab as u32).collect();
        for i in (1..vocab).rev() {
            let j = rng.next_below(i as u32 + 1) as usize;
            rank_to_token.swap(i, j);
        }
        Self {
            cumulative,
            rank_to_token,
        }
    }

    fn sample(&self, rng: &mut ToyRng) -> u32 {
        let total = *self.cumulative.last().expect("non-empty vocabulary");
        let u = rng.next_f64() * total;
        let rank = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1);
        self.rank_to_token[rank]
    }
}

/// A deterministic evaluation corpus of `len` tokens.
pub fn synthetic_corpus(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ToyRng::new(seed, CORPUS_STREAM);
    let sampler = ZipfSampler::new(vocab, &mut rng);
    (0..len).map(|_| sampler.sample(&mut rng)).collect()
}

/// `samples` calibration prompts of `len` tokens each, drawn from the same
/// distribution as [`synthetic_corpus`] but from an independent stream.
pub fn calibration_prompts(seed: u64, samples: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut shuffle_rng = ToyRng::new(seed, CORPUS_STREAM);
    let sampler = ZipfSampler::new(vocab, &mut shuffle_rng);
    let mut rng = ToyRng::new(seed, PROMPT_STREAM);
    (0..samples)
        .map(|_| (0..len).map(|_| sampler.sample(&mut rng)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let a = synthetic_corpus(11, 500, 64);
        assert_eq!(a, synthetic_corpus(11, 500, 64));
        assert_ne!(a, synthetic_corpus(12, 500, 64));
        assert!(a.iter().all(|&t| t < 64));
    }

    #[test]
    fn corpus_is_skewed() {
        let c = synthetic_corpus(5, 20_000, 256);
        let mut counts = vec![0usize; 256];
        for &t in &c {
            counts[t as usize] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        // Harmonic weights over 256 ranks: the top token carries ~16% of mass.
        let top = counts[0] as f64 / c.len() as f64;
        assert!((0.13..0.19).contains(&top), "{top}");
        assert!(counts[0] > 10 * counts[100]);
    }

    #[test]
    fn prompts_shape() {
        let p = calibration_prompts(3, 4, 16, 256);
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|s| s.len() == 16));
        assert_ne!(p[0], p[1]);
    }
}

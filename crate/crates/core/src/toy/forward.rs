use super::{ToyConfig, ToyError, ToyWeights};
use crate::bundle::{BundleError, CalibrationBundle};

const RMS_EPS: f32 = 1e-5;

/// Result of one forward pass over a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    /// Next-token logits at the last position, length `V`.
    pub logits: Vec<f32>,
    /// Residual stream entering each layer at the last position.
    pub x_in: Vec<Vec<f32>>,
    /// Residual stream leaving each layer at the last position.
    pub x_out: Vec<Vec<f32>>,
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// `W x` for row-major `W` of shape `[out, x.len()]`.
fn matvec(w: &[f32], x: &[f32]) -> Vec<f32> {
    w.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).fold(0.0f32, |acc, (a, b)| acc + a * b))
        .collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn check_tokens(config: &ToyConfig, tokens: &[u32]) -> Result<(), ToyError> {
    if tokens.is_empty() {
        return Err(ToyError::EmptySequence);
    }
    if tokens.len() > config.max_seq {
        return Err(ToyError::SequenceTooLong {
            len: tokens.len(),
            max_seq: config.max_seq,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= config.vocab) {
        return Err(ToyError::TokenOutOfRange {
            id,
            vocab: config.vocab,
        });
    }
    Ok(())
}

/// Causal multi-head attention over `normed` (one vector per position).
/// Returns the per-position head outputs concatenated, before `wo`, and the
/// attention probabilities `[head][query][key]` (zero above the diagonal).
pub(crate) fn causal_attention(
    config: &ToyConfig,
    wq: &[f32],
    wk: &[f32],
    wv: &[f32],
    normed: &[Vec<f32>],
) -> (Vec<Vec<f32>>, Vec<Vec<Vec<f32>>>) {
    let seq = normed.len();
    let hd = config.head_dim();
    let q: Vec<Vec<f32>> = normed.iter().map(|x| matvec(wq, x)).collect();
    let k: Vec<Vec<f32>> = normed.iter().map(|x| matvec(wk, x)).collect();
    let v: Vec<Vec<f32>> = normed.iter().map(|x| matvec(wv, x)).collect();
    let scale = 1.0 / (hd as f32).sqrt();

    let mut out = vec![vec![0.0f32; config.d_model]; seq];
    let mut probs = vec![vec![vec![0.0f32; seq]; seq]; config.n_heads];
    for h in 0..config.n_heads {
        let span = h * hd..(h + 1) * hd;
        for i in 0..seq {
            let qi = &q[i][span.clone()];
            let scores: Vec<f32> = (0..=i)
                .map(|j| {
                    qi.iter()
                        .zip(&k[j][span.clone()])
                        .fold(0.0f32, |acc, (a, b)| acc + a * b)
                        * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f32 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                let p = e / denom;
                probs[h][i][j] = p;
                for (o, vv) in out[i][span.clone()].iter_mut().zip(&v[j][span.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

struct Trace {
    /// Final-normed hidden state at every position.
    final_hidden: Vec<Vec<f32>>,
    x_in: Vec<Vec<f32>>,
    x_out: Vec<Vec<f32>>,
    attn: Vec<Vec<Vec<Vec<f32>>>>,
}

fn run(weights: &ToyWeights, tokens: &[u32]) -> Result<Trace, ToyError> {
    let c = &weights.config;
    check_tokens(c, tokens)?;
    let d = c.d_model;
    let last = tokens.len() - 1;

    let mut h: Vec<Vec<f32>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let e = &weights.embed[id as usize * d..(id as usize + 1) * d];
            let p = &weights.pos[t * d..(t + 1) * d];
            e.iter().zip(p).map(|(a, b)| a + b).collect()
        })
        .collect();

    let mut x_in = Vec::with_capacity(c.n_layers);
    let mut x_out = Vec::with_capacity(c.n_layers);
    let mut attn = Vec::with_capacity(c.n_layers);
    for layer in &weights.layers {
        x_in.push(h[last].clone());

        let normed: Vec<Vec<f32>> = h.iter().map(|x| rms_norm(x, &layer.norm1)).collect();
        let (heads, probs) = causal_attention(c, &layer.wq, &layer.wk, &layer.wv, &normed);
        for (x, o) in h.iter_mut().zip(&heads) {
            for (xi, delta) in x.iter_mut().zip(matvec(&layer.wo, o)) {
                *xi += delta;
            }
        }
        attn.push(probs);

        for x in h.iter_mut() {
            let m = rms_norm(x, &layer.norm2);
            let hidden: Vec<f32> = matvec(&layer.w1, &m).into_iter().map(silu).collect();
            for (xi, delta) in x.iter_mut().zip(matvec(&layer.w2, &hidden)) {
                *xi += delta;
            }
        }

        x_out.push(h[last].clone());
    }

    let final_hidden = h.iter().map(|x| rms_norm(x, &weights.final_norm)).collect();
    Ok(Trace {
        final_hidden,
        x_in,
        x_out,
        attn,
    })
}

/// Runs the model over `tokens` and records the last-position residual
/// stream around every layer.
pub fn forward_capture(weights: &ToyWeights, tokens: &[u32]) -> Result<Capture, ToyError> {
    let trace = run(weights, tokens)?;
    let last = trace.final_hidden.last().expect("non-empty sequence");
    Ok(Capture {
        logits: matvec(&weights.embed, last),
        x_in: trace.x_in,
        x_out: trace.x_out,
    })
}

/// Attention probabilities of every layer, indexed `[layer][head][query][key]`.
pub fn attention_maps(
    weights: &ToyWeights,
    tokens: &[u32],
) -> Result<Vec<Vec<Vec<Vec<f32>>>>, ToyError> {
    Ok(run(weights, tokens)?.attn)
}

/// Captures every prompt and packs the results into a calibration bundle.
pub fn capture_bundle(
    weights: &ToyWeights,
    prompts: &[Vec<u32>],
) -> Result<CalibrationBundle, ToyError> {
    let l = weights.config.n_layers;
    let mut x_in = vec![Vec::with_capacity(prompts.len()); l];
    let mut x_out = vec![Vec::with_capacity(prompts.len()); l];
    for prompt in prompts {
        let cap = forward_capture(weights, prompt)?;
        for (layer, (i, o)) in cap.x_in.into_iter().zip(cap.x_out).enumerate() {
            x_in[layer].push(i);
            x_out[layer].push(o);
        }
    }
    CalibrationBundle::new(x_in, x_out, weights.embed.clone(), weights.config.vocab).map_err(|e| {
        match e {
            BundleError::Store(s) => ToyError::Store(s),
            other => ToyError::InvalidConfig(other.to_string()),
        }
    })
}

/// Teacher-forced perplexity over `corpus`.
///
/// The corpus is split into windows of `max_seq` tokens that overlap by one,
/// so every token after the first is predicted exactly once.
pub fn perplexity(weights: &ToyWeights, corpus: &[u32]) -> Result<f64, ToyError> {
    if corpus.len() < 2 {
        return Err(ToyError::CorpusTooShort(corpus.len()));
    }
    let max_seq = weights.config.max_seq;
    if max_seq < 2 {
        return Err(ToyError::InvalidConfig(
            "perplexity needs max_seq >= 2".into(),
        ));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < corpus.len() {
        let end = (start + max_seq).min(corpus.len());
        let window = &corpus[start..end];
        let trace = run(weights, window)?;
        for (pos, hidden) in trace.final_hidden[..window.len() - 1].iter().enumerate() {
            let logits = matvec(&weights.embed, hidden);
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
            let target = window[pos + 1] as usize;
            nll += max + sum.ln() - logits[target] as f64;
            count += 1;
        }
        start = end - 1;
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::super::{init_toy, synthetic_corpus, ToyConfig};
    use super::*;
    use crate::importance::{score_layers, Metric};

    fn tokens(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 37 + 5) % 256).collect()
    }

    #[test]
    fn zero_layers_are_residual_identity() {
        let mut w = init_toy(ToyConfig::with_seed(3)).unwrap();
        w.zero_layers();
        let cap = forward_capture(&w, &tokens(10)).unwrap();
        assert_eq!(cap.x_in, cap.x_out);
        let bundle = capture_bundle(&w, &[tokens(10), tokens(3)]).unwrap();
        let report = score_layers(&bundle, Metric::Jaccard, 10).unwrap();
        assert!(report.scores.iter().all(|s| s.score == 0.0));
        assert_eq!(report.ordering, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_token_shapes() {
        let w = init_toy(ToyConfig::with_seed(1)).unwrap();
        let cap = forward_capture(&w, &[42]).unwrap();
        assert_eq!(cap.logits.len(), 256);
        assert_eq!(cap.x_in.len(), 4);
        assert!(cap.x_out.iter().all(|v| v.len() == 32));
    }

    #[test]
    fn consecutive_layers_chain() {
        let w = init_toy(ToyConfig::with_seed(8)).unwrap();
        let cap = forward_capture(&w, &tokens(20)).unwrap();
        for i in 0..3 {
            assert_eq!(cap.x_out[i], cap.x_in[i + 1]);
        }
        assert_ne!(cap.x_in[0], cap.x_out[0]);
    }

    #[test]
    fn deterministic() {
        let w = init_toy(ToyConfig::with_seed(8)).unwrap();
        assert_eq!(
            forward_capture(&w, &tokens(17)).unwrap(),
            forward_capture(&w, &tokens(17)).unwrap()
        );
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let w = init_toy(ToyConfig::with_seed(2)).unwrap();
        for layer in &attention_maps(&w, &tokens(12)).unwrap() {
            for head in layer {
                for (i, row) in head.iter().enumerate() {
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
                    assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                    assert!(row[..=i].iter().all(|&p| p > 0.0));
                }
            }
        }
    }

    #[test]
    fn input_validation() {
        let w = init_toy(ToyConfig::with_seed(1)).unwrap();
        assert!(matches!(
            forward_capture(&w, &[]),
            Err(ToyError::EmptySequence)
        ));
        assert!(matches!(
            forward_capture(&w, &tokens(65)),
            Err(ToyError::SequenceTooLong {
                len: 65,
                max_seq: 64
            })
        ));
        assert!(matches!(
            forward_capture(&w, &[256]),
            Err(ToyError::TokenOutOfRange {
                id: 256,
                vocab: 256
            })
        ));
        assert!(matches!(
            perplexity(&w, &[1]),
            Err(ToyError::CorpusTooShort(1))
        ));
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut w = init_toy(ToyConfig::with_seed(1)).unwrap();
        w.zero_layers();
        w.embed.iter_mut().for_each(|v| *v = 0.0);
        let corpus = synthetic_corpus(1, 300, 256);
        let ppl = perplexity(&w, &corpus).unwrap();
        assert!((ppl / 256.0 - 1.0).abs() < 1e-6, "{ppl}");
    }

    #[test]
    fn perplexity_counts_every_prediction_once() {
        // Windows overlap by one token: a corpus of max_seq + 1 tokens needs
        // two windows and yields max_seq predictions.
        let w = init_toy(ToyConfig::with_seed(5)).unwrap();
        let corpus = synthetic_corpus(2, 65, 256);
        let ppl = perplexity(&w, &corpus).unwrap();
        let mut nll = 0.0f64;
        for t in 1..corpus.len() {
            let ctx_start = if t < 64 { 0 } else { 63 };
            let cap = forward_capture(&w, &corpus[ctx_start..t]).unwrap();
            let max = cap.logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + cap
                    .logits
                    .iter()
                    .map(|&l| (l as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            nll += lse - cap.logits[corpus[t] as usize] as f64;
        }
        let expected = (nll / 64.0).exp();
        assert!(
            (ppl - expected).abs() / expected < 1e-9,
            "{ppl} vs {expected}"
        );
        assert!(ppl >= 1.0);
    }
}

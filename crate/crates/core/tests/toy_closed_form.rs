use cpam_core::attention::FeatureMatrix;
use cpam_core::backend::{
    AttentionCall, AttentionHook, DiffusionBackend, HookError, NoHooks, ToyBackend, ToyBlock,
};
use cpam_core::control::AttentionKind;
use cpam_core::inversion::{ddim_invert, source_features};
use cpam_core::tensor::LatentTensor;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(a: &[Vec<f64>], b: &Array2<f64>) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b.ncols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[[k, j]]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn attention_head(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], lo: usize, hi: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / ((hi - lo) as f64).sqrt();
    q.iter()
        .map(|qr| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kr| (lo..hi).map(|d| qr[d] * kr[d]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (lo..hi)
                .map(|d| w.iter().zip(v).map(|(wi, vr)| wi / z * vr[d]).sum())
                .collect()
        })
        .collect()
}

fn attention_layer(
    x: &[Vec<f64>],
    ctx: &[Vec<f64>],
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    wo: &Array2<f64>,
    zero: bool,
) -> Vec<Vec<f64>> {
    if zero {
        return vec![vec![0.0; wo.ncols()]; x.len()];
    }
    let (q, k, v) = (matmul(x, wq), matmul(ctx, wk), matmul(ctx, wv));
    let dim = wq.ncols();
    let h0 = attention_head(&q, &k, &v, 0, dim / 2);
    let h1 = attention_head(&q, &k, &v, dim / 2, dim);
    let cat: Vec<Vec<f64>> = h0.into_iter().zip(h1).map(|(a, b)| [a, b].concat()).collect();
    matmul(&cat, wo)
}

fn block(b: &ToyBlock, h: &[Vec<f64>], text: &[Vec<f64>], zero_self: bool) -> Vec<Vec<f64>> {
    let a = add(h, &attention_layer(h, h, &b.self_q, &b.self_k, &b.self_v, &b.self_o, zero_self));
    let c = add(&a, &attention_layer(&a, text, &b.cross_q, &b.cross_k, &b.cross_v, &b.cross_o, false));
    let f: Vec<Vec<f64>> = matmul(&c, &b.ff).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
    add(&c, &f)
}

/// Toy forward written from its parameters; optionally drops the output of
/// self-attention layer `zero_layer`.
fn closed_form(backend: &ToyBackend, z: &LatentTensor, t: usize, prompt: &str, zero_layer: Option<usize>) -> Vec<f64> {
    let p = backend.params();
    let text: Vec<Vec<f64>> = backend
        .tokenize(prompt)
        .0
        .iter()
        .map(|tok| backend.token_embedding(tok).to_vec())
        .collect();
    let tokens: Vec<Vec<f64>> = (0..64)
        .map(|i| (0..12).map(|c| z.data[[0, c, i / 8, i % 8]]).collect())
        .collect();
    let feats: Vec<f64> = (0..16)
        .map(|i| {
            let f = std::f64::consts::PI / 2000.0 * (i / 2 + 1) as f64;
            if i % 2 == 0 {
                (t as f64 * f).sin()
            } else {
                (t as f64 * f).cos()
            }
        })
        .collect();
    let time = &matmul(&[feats], &p.w_time)[0];
    let h: Vec<Vec<f64>> = matmul(&tokens, &p.w_in)
        .into_iter()
        .map(|r| r.iter().zip(time).map(|(a, b)| a + b).collect())
        .collect();
    let h = block(&p.blocks[0], &h, &text, zero_layer == Some(0));
    let pooled: Vec<Vec<f64>> = (0..16)
        .map(|i| {
            let (y, x) = (i / 4, i % 4);
            (0..16)
                .map(|c| {
                    [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| h[(2 * y + dy) * 8 + 2 * x + dx][c])
                        .sum::<f64>()
                        / 4.0
                })
                .collect()
        })
        .collect();
    let deep = block(&p.blocks[1], &pooled, &text, zero_layer == Some(1));
    let out: Vec<Vec<f64>> = (0..64)
        .map(|i| {
            let cell = (i / 8 / 2) * 4 + (i % 8) / 2;
            (0..16).map(|c| h[i][c] + deep[cell][c] - pooled[cell][c]).collect()
        })
        .collect();
    let gain = p.out_scale * (std::f64::consts::FRAC_PI_2 * t as f64 / 1000.0).cos();
    let eps = matmul(&out, &p.w_out);
    let mut flat = vec![0.0; 12 * 64];
    for (i, row) in eps.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            flat[c * 64 + i] = v * gain;
        }
    }
    flat
}

struct ZeroSelf(usize);

impl AttentionHook for ZeroSelf {
    fn on_attention(&mut self, call: &AttentionCall<'_>) -> Result<Option<Vec<FeatureMatrix>>, HookError> {
        if call.site.kind == AttentionKind::SelfAttention && call.site.layer_index == self.0 {
            let zeros = call
                .heads
                .iter()
                .map(|h| FeatureMatrix::new(Array2::zeros((h.q.n_tokens(), h.v.dim()))))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Some(zeros));
        }
        Ok(None)
    }
}

fn latent(seed: u64) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentTensor::new(Array4::from_shape_fn((1, 12, 8, 8), |_| rng.random_range(-1.0..1.0)), 0)
}

fn max_diff(a: &LatentTensor, b: &[f64]) -> f64 {
    a.data.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_closed_form() {
    let b = ToyBackend::default();
    for (seed, t) in [(1, 1), (2, 401), (3, 981)] {
        let z = latent(seed);
        let cond = b.encode_text("a red fox", Some("fox")).unwrap();
        let eps = b.predict_noise(&z, t, &cond, &[], &mut NoHooks).unwrap().eps;
        assert!(max_diff(&eps, &closed_form(&b, &z, t, "a red fox", None)) < 1e-9);
    }
}

#[test]
fn zeroed_self_site_follows_closed_form() {
    let b = ToyBackend::default();
    let z = latent(4);
    let cond = b.encode_text("a cat", None).unwrap();
    let plain = b.predict_noise(&z, 301, &cond, &[], &mut NoHooks).unwrap().eps;
    for layer in [0, 1] {
        let hooked = b.predict_noise(&z, 301, &cond, &[], &mut ZeroSelf(layer)).unwrap().eps;
        let expected = closed_form(&b, &z, 301, "a cat", Some(layer));
        assert!(max_diff(&hooked, &expected) < 1e-9);
        assert!(max_diff(&plain, &expected) > 1e-6);
    }
}

#[test]
fn source_keys_are_input_projections() {
    let b = ToyBackend::default();
    let trace = ddim_invert(&latent(5), &b, 10).unwrap();
    let feats = source_features(&trace, 3, &b).unwrap();
    let z = &trace.latents()[3];
    let t = trace.timesteps()[3];
    let p = b.params();
    let tokens: Vec<Vec<f64>> = (0..64)
        .map(|i| (0..12).map(|c| z.data[[0, c, i / 8, i % 8]]).collect())
        .collect();
    let feats_t: Vec<f64> = (0..16)
        .map(|i| {
            let f = std::f64::consts::PI / 2000.0 * (i / 2 + 1) as f64;
            if i % 2 == 0 {
                (t as f64 * f).sin()
            } else {
                (t as f64 * f).cos()
            }
        })
        .collect();
    let time = &matmul(&[feats_t], &p.w_time)[0];
    let h: Vec<Vec<f64>> = matmul(&tokens, &p.w_in)
        .into_iter()
        .map(|r| r.iter().zip(time).map(|(a, b)| a + b).collect())
        .collect();
    let k = matmul(&h, &p.blocks[0].self_k);
    let v = matmul(&h, &p.blocks[0].self_v);
    let site = &feats[&0];
    for head in 0..2 {
        for tok in 0..64 {
            for d in 0..8 {
                assert!((site.keys[head].data()[[tok, d]] - k[tok][head * 8 + d]).abs() < 1e-9);
                assert!((site.values[head].data()[[tok, d]] - v[tok][head * 8 + d]).abs() < 1e-9);
            }
        }
    }
}

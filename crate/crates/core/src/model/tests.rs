use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{classify, encoder_forward, loss, make_memory_tokens};
use super::params::names;
use super::*;
use crate::autodiff::{Graph, NamedTensors};
use crate::gradcheck::{finite_difference_grad, max_relative_error};
use crate::tokenizer::{TokenSequence, PAD};

type M = Vec<Vec<f64>>;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 11,
        seq_len: 5,
        d_features: 16,
        n_memory: 2,
        n_class: 2,
        n_mlp_layers: 2,
        pool: PoolMode::AllPositions,
    }
}

/// Parameters with entries of order 0.5 so every nonlinearity is exercised.
fn spread(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

fn seq(ids: &[u32], len: usize) -> TokenSequence {
    let mut full = ids.to_vec();
    full.resize(len, PAD);
    let mask = (0..len).map(|i| i < ids.len()).collect();
    TokenSequence {
        ids: full,
        mask,
        original_length: ids.len(),
    }
}

fn features(d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..d).map(|i| if i % 3 == 0 { rng.gen_range(0.0..1.0) } else { 0.0 }).collect();
    Tensor::vector(data).unwrap()
}

// ---- independent scalar oracle --------------------------------------------

fn mat(p: &NamedTensors, name: &str) -> M {
    let t = p.get(name).unwrap();
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecp(p: &NamedTensors, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ln(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-6).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn oracle(cfg: &ModelConfig, p: &NamedTensors, s: &TokenSequence, xf: Option<&Tensor>) -> Vec<f64> {
    let tok = mat(p, "embed.token");
    let pos = mat(p, "embed.position");
    let mut h: M = Vec::new();
    let mut valid = Vec::new();
    for (i, (&id, &m)) in s.ids.iter().zip(&s.mask).enumerate() {
        h.push(tok[id as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect());
        valid.push(m);
    }
    let nq = h.len();
    if cfg.variant == Variant::Vsi {
        let x = xf.unwrap().data();
        for i in 0..cfg.n_memory {
            let w = mat(p, &format!("memory.{i}.weight"));
            let b = vecp(p, &format!("memory.{i}.bias"));
            h.push(
                (0..cfg.d_model)
                    .map(|j| (x.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>() + b[j]).max(0.0))
                    .collect(),
            );
            valid.push(true);
        }
    }
    let n = h.len();
    let hd = cfg.d_model / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let pre = |s: &str| format!("layers.{l}.{s}");
        let x = ln(&h, &vecp(p, &pre("attn_norm.gain")), &vecp(p, &pre("attn_norm.bias")));
        let q = mm(&x, &mat(p, &pre("attn.query")));
        let k = mm(&x, &mat(p, &pre("attn.key")));
        let v = mm(&x, &mat(p, &pre("attn.value")));
        let mut cat = vec![vec![0.0; cfg.d_model]; n];
        for head in 0..cfg.n_heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = (0..n).filter(|&j| valid[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
                let e: Vec<f64> = (0..n).map(|j| if valid[j] { (scores[j] - mx).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    cat[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let o = mm(&cat, &mat(p, &pre("attn.output")));
        for i in 0..n {
            for j in 0..cfg.d_model {
                h[i][j] += o[i][j];
            }
        }
        let x = ln(&h, &vecp(p, &pre("ffn_norm.gain")), &vecp(p, &pre("ffn_norm.bias")));
        let a = mm(&x, &mat(p, &pre("ffn.gate")));
        let b = mm(&x, &mat(p, &pre("ffn.linear")));
        let mixed: M = a
            .iter()
            .zip(&b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| gelu(*x) * y).collect())
            .collect();
        let o = mm(&mixed, &mat(p, &pre("ffn.output")));
        for i in 0..n {
            for j in 0..cfg.d_model {
                h[i][j] += o[i][j];
            }
        }
    }
    let h = ln(&h, &vecp(p, "final_norm.gain"), &vecp(p, "final_norm.bias"));
    let rows: Vec<usize> = (0..n)
        .filter(|&i| valid[i] && (cfg.pool == PoolMode::AllPositions || i < nq))
        .collect();
    let mut z: Vec<f64> = (0..cfg.d_model)
        .map(|j| rows.iter().map(|&i| h[i][j]).sum::<f64>() / rows.len() as f64)
        .collect();
    if cfg.variant == Variant::LateFusion {
        z.extend_from_slice(xf.unwrap().data());
    }
    for j in 0..cfg.n_mlp_layers {
        let w = mat(p, &format!("head.hidden.{j}.weight"));
        let b = vecp(p, &format!("head.hidden.{j}.bias"));
        z = mm(&vec![z], &w)[0].iter().zip(&b).map(|(x, y)| gelu(x + y)).collect();
    }
    let w = mat(p, "head.output.weight");
    let b = vecp(p, "head.output.bias");
    mm(&vec![z], &w)[0].iter().zip(&b).map(|(x, y)| x + y).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- tests -----------------------------------------------------------------

#[test]
fn memory_token_hand_example() {
    // Map W = [[1, -1], [2, 0]] applied as W x; stored input-major.
    let mut p = Params::new();
    p.insert("memory.0.weight", Tensor::from_rows(&[[1.0, 2.0], [-1.0, 0.0]]).unwrap());
    p.insert("memory.0.bias", Tensor::vector(vec![-0.5, 0.0]).unwrap());
    let cfg = ModelConfig {
        d_model: 2,
        n_heads: 1,
        d_features: 2,
        n_memory: 1,
        ..Default::default()
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.5]).unwrap());
    let m = make_memory_tokens(&mut g, x, &cfg, &p).unwrap();
    assert_eq!(g.value(m).data(), &[0.0, 2.0]);
}

#[test]
fn forward_matches_scalar_oracle() {
    for variant in [Variant::QueryOnly, Variant::LateFusion, Variant::Vsi] {
        for pool in [PoolMode::AllPositions, PoolMode::QueryPositions] {
            let cfg = ModelConfig { pool, ..small(variant) };
            let mut m = Model::new(&cfg, 3).unwrap();
            spread(&mut m, 4);
            let xf = features(cfg.d_features, 5);
            for ids in [&[2u32, 7, 3][..], &[5], &[1, 2, 3, 4, 10]] {
                let s = seq(ids, cfg.seq_len);
                let want = oracle(&m.config, &m.params, &s, Some(&xf));
                let got = m.logits_padded(&s, Some(&xf)).unwrap();
                assert!(max_diff(&got, &want) < 1e-10, "{variant} {pool:?}: {got:?} vs {want:?}");
                let compact = m.logits(&s, Some(&xf)).unwrap();
                assert!(max_diff(&compact, &want) < 1e-10);
            }
        }
    }
}

#[test]
fn zero_memory_tokens_equal_query_only_bitwise() {
    let vsi = Model::new(&ModelConfig { n_memory: 0, ..small(Variant::Vsi) }, 8).unwrap();
    let q = Model::new(&small(Variant::QueryOnly), 8).unwrap();
    assert_eq!(vsi.params, q.params);
    let xf = features(16, 1);
    let s = seq(&[3, 4, 9], 5);
    let a = vsi.logits_padded(&s, Some(&xf)).unwrap();
    let b = q.logits_padded(&s, None).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn padding_gets_zero_attention_and_rows_normalize() {
    let cfg = small(Variant::Vsi);
    let mut m = Model::new(&cfg, 2).unwrap();
    spread(&mut m, 2);
    let s = seq(&[4, 6], cfg.seq_len);
    let xf = features(16, 3);
    let mut g = Graph::new();
    encoder_forward(&mut g, &s, Some(&xf), &m.config, &m.params).unwrap();
    let attn = g.softmax_outputs();
    assert_eq!(attn.len(), cfg.n_layers * cfg.n_heads);
    for a in attn {
        assert_eq!(a.cols(), cfg.seq_len + cfg.n_memory);
        for r in 0..a.rows() {
            let row = a.row(r);
            for j in 2..cfg.seq_len {
                assert_eq!(row[j], 0.0);
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn padded_content_does_not_reach_logits() {
    let cfg = small(Variant::Vsi);
    let mut m = Model::new(&cfg, 6).unwrap();
    spread(&mut m, 6);
    let xf = features(16, 6);
    let s = seq(&[3, 8], cfg.seq_len);
    let base = m.logits_padded(&s, Some(&xf)).unwrap();
    let mut noisy = s.clone();
    noisy.ids[3] = 9;
    noisy.ids[4] = 2;
    assert_eq!(m.logits_padded(&noisy, Some(&xf)).unwrap(), base);
}

#[test]
fn classifier_head_hand_case() {
    let cfg = ModelConfig {
        variant: Variant::QueryOnly,
        d_model: 2,
        n_heads: 1,
        n_mlp_layers: 1,
        ..Default::default()
    };
    let mut p = Params::new();
    p.insert(names::head_hidden_weight(0), Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    p.insert(names::head_hidden_bias(0), Tensor::vector(vec![0.0, 0.0]).unwrap());
    p.insert(names::HEAD_OUTPUT_WEIGHT, Tensor::from_rows(&[[2.0, 0.0], [0.0, -1.0]]).unwrap());
    p.insert(names::HEAD_OUTPUT_BIAS, Tensor::vector(vec![0.0, 0.5]).unwrap());
    let mut g = Graph::new();
    let pooled = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
    let z = classify(&mut g, pooled, None, &cfg, &p).unwrap();
    // gelu(1) = 0.841192, gelu(-1) = -0.158808
    let want = [2.0 * 0.841_191_990_607_5, 0.158_808_009_392_5 + 0.5];
    assert!(max_diff(g.value(z).data(), &want) < 1e-9, "{:?}", g.value(z).data());
}

#[test]
fn cross_entropy_values() {
    let cases = [
        ([0.0, 0.0], 0u8, std::f64::consts::LN_2),
        ([20.0, -20.0], 0, (-40.0f64).exp().ln_1p()),
        ([20.0, -20.0], 1, 40.0 + (-40.0f64).exp().ln_1p()),
        ([1.0, -0.5], 1, 1.5 + (-1.5f64).exp().ln_1p()),
    ];
    for (z, y, want) in cases {
        let mut g = Graph::new();
        let n = g.constant(Tensor::matrix(1, 2, z.to_vec()).unwrap());
        let l = loss(&mut g, n, y).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12, "{z:?} {y}");
    }
    let mut g = Graph::new();
    let n = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    assert!(loss(&mut g, n, 2).is_err());
}

#[test]
fn permuting_heads_leaves_logits_unchanged() {
    let cfg = ModelConfig { n_heads: 2, ..small(Variant::Vsi) };
    let mut m = Model::new(&cfg, 12).unwrap();
    spread(&mut m, 12);
    let hd = cfg.head_dim();
    let swap_cols = |t: &mut Tensor| {
        let c = t.cols();
        for r in 0..t.rows() {
            let row = &mut t.data_mut()[r * c..(r + 1) * c];
            for j in 0..hd {
                row.swap(j, j + hd);
            }
        }
    };
    let mut p = m.params.clone();
    for l in 0..cfg.n_layers {
        for w in ["attn.query", "attn.key", "attn.value"] {
            swap_cols(p.get_mut(&names::layer(l, w)).unwrap());
        }
        let o = p.get_mut(&names::layer(l, "attn.output")).unwrap();
        let c = o.cols();
        for j in 0..hd {
            for k in 0..c {
                o.data_mut().swap(j * c + k, (j + hd) * c + k);
            }
        }
    }
    let permuted = Model::from_params(&cfg, p).unwrap();
    let xf = features(16, 1);
    let s = seq(&[2, 5, 7, 1], 5);
    let a = m.logits(&s, Some(&xf)).unwrap();
    let b = permuted.logits(&s, Some(&xf)).unwrap();
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn variants_need_or_ignore_features() {
    let s = seq(&[2, 3], 5);
    let vsi = Model::new(&small(Variant::Vsi), 1).unwrap();
    assert!(matches!(vsi.logits(&s, None), Err(crate::Error::Data(_))));
    assert!(vsi.logits(&s, Some(&features(15, 1))).is_err());
    let q = Model::new(&small(Variant::QueryOnly), 1).unwrap();
    assert_eq!(q.logits(&s, None).unwrap(), q.logits(&s, Some(&features(16, 1))).unwrap());
    let empty = seq(&[], 5);
    assert!(matches!(q.logits(&empty, None), Err(crate::Error::InvalidMask(_))));
    // memory tokens alone are enough to attend to
    assert!(vsi.logits(&empty, Some(&features(16, 1))).is_ok());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in [Variant::QueryOnly, Variant::LateFusion, Variant::Vsi] {
        let cfg = ModelConfig {
            variant,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 6,
            seq_len: 4,
            d_features: 16,
            n_memory: 1,
            n_class: 2,
            n_mlp_layers: 1,
            pool: PoolMode::AllPositions,
        };
        let mut m = Model::new(&cfg, 21).unwrap();
        spread(&mut m, 22);
        let s = seq(&[2, 5, 3], 4);
        let xf = features(16, 23);
        let loss_of = |p: &NamedTensors| {
            let mut g = Graph::new();
            let z = forward::example_logits(&mut g, &s, Some(&xf), &m.config, p, false, &mut None).unwrap();
            let l = loss(&mut g, z, 1).unwrap();
            g.value(l).item().unwrap()
        };
        let mut g = Graph::new();
        let z = forward::example_logits(&mut g, &s, Some(&xf), &m.config, &m.params, false, &mut None).unwrap();
        let l = loss(&mut g, z, 1).unwrap();
        let analytic = g.backward(l).unwrap();
        let numeric = finite_difference_grad(loss_of, &m.params, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{variant}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compact_path_equals_padded_path(ids in prop::collection::vec(0u32..11, 1..=5), seed in 0u64..50) {
        let cfg = small(Variant::Vsi);
        let mut m = Model::new(&cfg, seed).unwrap();
        spread(&mut m, seed);
        let s = seq(&ids, cfg.seq_len);
        let xf = features(16, seed);
        let a = m.logits(&s, Some(&xf)).unwrap();
        let b = m.logits_padded(&s, Some(&xf)).unwrap();
        prop_assert!(max_diff(&a, &b) < 1e-12);
        let p = m.probabilities(&s, Some(&xf)).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        prop_assert_eq!(m.predict(&s, Some(&xf)).unwrap(), u8::from(a[1] > a[0]));
    }
}

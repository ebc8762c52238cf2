use super::*;
use crate::tensor::{check_graph_gradients, sample_coordinates};
use crate::tokenizer::{embed_sets, tokenize_set};
use crate::triplet::{encode_table, encode_timeseries};
use rand::seq::SliceRandom;

fn tiny() -> ModelConfig {
    ModelConfig {
        token_dim: 12,
        hidden_dim: 8,
        n_heads: 2,
        intermediate_dim: 10,
        part_capacity: 20,
        topology_capacity: 300,
        vocab_size: 30,
        pre_embed_dim: 6,
        point_hidden: 4,
        init_std: 0.3,
        ..ModelConfig::desk()
    }
}

fn random_tokens(n: usize, width: usize, seed: u64) -> Vec<TripletToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TripletToken {
            vector: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            global_index: i.checked_sub(1),
        })
        .collect()
}

// ---- straight-line reference ------------------------------------------

fn mat(m: &ModelState, id: ParamId) -> (Vec<f64>, usize) {
    let t = m.store.value(id);
    (t.data().to_vec(), t.dims().cols)
}

fn matmul(x: &[Vec<f64>], (w, cols): &(Vec<f64>, usize)) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| (0..*cols).map(|c| row.iter().enumerate().map(|(i, v)| v * w[i * cols + c]).sum()).collect())
        .collect()
}

fn rms(x: &[Vec<f64>], gain: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn reference_forward(m: &ModelState, tokens: &[TripletToken], with_attention: bool) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let x: Vec<Vec<f64>> = tokens.iter().map(|t| t.vector.clone()).collect();
    let bias = m.store.value(m.input_proj.bias).data().to_vec();
    let mut h: Vec<Vec<f64>> = matmul(&x, &mat(m, m.input_proj.weight))
        .into_iter()
        .map(|r| r.iter().zip(&bias).map(|(a, b)| a + b).collect())
        .collect();
    let n = tokens.len();
    let hd = cfg.head_dim();
    for b in &m.blocks {
        if with_attention {
            let xn = rms(&h, m.store.value(b.attn_norm).data(), cfg.norm_eps);
            let (q, k, v) = (matmul(&xn, &mat(m, b.wq)), matmul(&xn, &mat(m, b.wk)), matmul(&xn, &mat(m, b.wv)));
            let mut o = vec![vec![0.0; cfg.hidden_dim]; n];
            for head in 0..cfg.n_heads {
                let cut = |rows: &[Vec<f64>], i: usize| -> Vec<f64> {
                    let mut r = rows[i][head * hd..(head + 1) * hd].to_vec();
                    if cfg.global_topology == GlobalTopology::Rotary {
                        let p = tokens[i].position() as f64;
                        for j in 0..hd / 2 {
                            let th = p * cfg.rope_base.powf(-2.0 * j as f64 / hd as f64);
                            let (a, c) = (r[j], r[j + hd / 2]);
                            r[j] = a * th.cos() - c * th.sin();
                            r[j + hd / 2] = a * th.sin() + c * th.cos();
                        }
                    }
                    r
                };
                for i in 0..n {
                    let qi = cut(&q, i);
                    let s: Vec<f64> = (0..n)
                        .map(|j| cut(&k, j).iter().zip(&qi).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..n {
                        for c in 0..hd {
                            o[i][head * hd + c] += e[j] / z * v[j][head * hd + c];
                        }
                    }
                }
            }
            let proj = matmul(&o, &mat(m, b.wo));
            for (hr, pr) in h.iter_mut().zip(proj) {
                hr.iter_mut().zip(pr).for_each(|(a, b)| *a += b);
            }
        }
        let xn = rms(&h, m.store.value(b.ffn_norm).data(), cfg.norm_eps);
        let gate = matmul(&xn, &mat(m, b.w_gate));
        let up = matmul(&xn, &mat(m, b.w_up));
        let act: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let down = matmul(&act, &mat(m, b.w_down));
        for (hr, dr) in h.iter_mut().zip(down) {
            hr.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
        }
    }
    rms(&h, m.store.value(m.final_norm).data(), cfg.norm_eps)
}

fn assert_close(t: &Tensor, rows: &[Vec<f64>], tol: f64) {
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let got = t.get(r, c);
            assert!((got - v).abs() < tol, "({r},{c}): {got} vs {v}");
        }
    }
}

// ---- tests ---------------------------------------------------------------

#[test]
fn rope_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert_eq!(rope_rotate(&v, 0, 1e4).unwrap(), v);
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    for p in [1, 7, 300] {
        assert!((norm(&rope_rotate(&v, p, 1e4).unwrap()) - norm(&v)).abs() < 1e-12);
    }
    let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dot = |p1: usize, p2: usize| {
        let (a, b) = (rope_rotate(&v, p1, 1e4).unwrap(), rope_rotate(&k, p2, 1e4).unwrap());
        a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
    };
    for _ in 0..20 {
        let p1 = rng.random_range(0..200);
        let p2 = rng.random_range(0..200);
        let shift = rng.random_range(0..200);
        assert!((dot(p1, p2) - dot(p1 + shift, p2 + shift)).abs() < 1e-10);
    }
    assert!(matches!(rope_rotate(&v[..5], 1, 1e4), Err(crate::Error::Config(_))));
}

#[test]
fn forward_matches_reference() {
    for topology in [GlobalTopology::Rotary, GlobalTopology::Additive] {
        let m = ModelState::new(ModelConfig { global_topology: topology, ..tiny() }, 3).unwrap();
        let toks = random_tokens(6, 12, 9);
        let out = forward(&toks, &m).unwrap();
        assert_eq!(out.shape(), [6, 8]);
        assert_close(&out, &reference_forward(&m, &toks, true), 1e-10);
    }
}

#[test]
fn single_token_is_finite_and_deterministic() {
    let m = ModelState::new(tiny(), 3).unwrap();
    let toks = random_tokens(1, 12, 2);
    let a = forward(&toks, &m).unwrap();
    assert!(a.data().iter().all(|v| v.is_finite()));
    assert_eq!(a, forward(&toks, &m).unwrap());
    let (_, maps) = forward_with_attention(&toks, &m).unwrap();
    assert!(maps.weights.iter().all(|&w| w == 1.0));
}

#[test]
fn zero_output_projection_leaves_the_feed_forward_path() {
    let mut m = ModelState::new(tiny(), 4).unwrap();
    for b in m.blocks.clone() {
        m.store.replace(b.wo, Tensor::zeros(8, 8));
    }
    let toks = random_tokens(5, 12, 1);
    assert_close(&forward(&toks, &m).unwrap(), &reference_forward(&m, &toks, false), 1e-12);
}

#[test]
fn permutation_equivariance() {
    let m = ModelState::new(tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [1, 8, 32] {
        let toks = random_tokens(n + 1, 12, n as u64);
        let out = forward(&toks, &m).unwrap();
        let mut perm: Vec<usize> = (1..=n).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = vec![toks[0].clone()];
        shuffled.extend(perm.iter().map(|&i| toks[i].clone()));
        let out2 = forward(&shuffled, &m).unwrap();
        for (slot, &src) in core::iter::once(&0).chain(&perm).enumerate() {
            for (a, b) in out.row(src).iter().zip(out2.row(slot)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let m = ModelState::new(tiny(), 6).unwrap();
    let (_, maps) = forward_with_attention(&random_tokens(7, 12, 3), &m).unwrap();
    assert_eq!((maps.layers, maps.heads, maps.tokens), (2, 2, 7));
    for row in maps.weights.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mean = maps.head_mean(1);
    assert!((mean[3] - 0.5 * (maps.get(1, 0, 0, 3) + maps.get(1, 1, 0, 3))).abs() < 1e-15);
}

#[test]
fn batched_segments_match_separate_forwards() {
    let m = ModelState::new(tiny(), 7).unwrap();
    let a = encode_table(&[0.5, -1.0, 2.0, 0.0, 1.5], 3).unwrap();
    let b = encode_table(&[1.0, 1.0, -2.0], 3).unwrap();
    let mut g = Graph::with_params(&m.store);
    let batch = embed_sets(&mut g, &m, &[&a, &b], None).unwrap();
    let h = m.encode(&mut g, &batch).unwrap();
    let joint = g.tensor(h);
    let sa = forward(&tokenize_set(&a, &m).unwrap(), &m).unwrap();
    let sb = forward(&tokenize_set(&b, &m).unwrap(), &m).unwrap();
    for r in 0..6 {
        for (x, y) in joint.row(r).iter().zip(sa.row(r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for r in 0..4 {
        for (x, y) in joint.row(6 + r).iter().zip(sb.row(r)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn decoding_heads() {
    let mut m = ModelState::new(tiny(), 8).unwrap();
    m.attach_head("id", HeadSpec::linear(8), HeadInit::Random, 1).unwrap();
    let id = m.heads["id"].layers[0].weight;
    m.store.replace(id, Tensor::identity(8));
    let toks = random_tokens(4, 12, 4);
    let hidden = forward(&toks, &m).unwrap();
    let mut g = Graph::with_params(&m.store);
    let x = g.constant(&hidden);
    let seg = [Segment { offset: 0, positions: vec![0, 1, 2, 3] }];
    let out = m.decode_recon(&mut g, x, &seg, "id").unwrap();
    assert_eq!(g.value(out), hidden.row(0));

    m.attach_head("ts", HeadSpec::mlp(256, 8), HeadInit::Random, 2).unwrap();
    let mut g = Graph::with_params(&m.store);
    let x = g.constant(&hidden);
    let out = m.decode_recon(&mut g, x, &seg, "ts").unwrap();
    assert_eq!(g.dims(out).cols, 256);
    assert!(matches!(m.decode_recon(&mut g, x, &seg, "missing"), Err(crate::Error::Contract(_))));
    assert!(matches!(m.decode_per_token(&mut g, x, &[], "ts"), Err(crate::Error::Contract(_))));

    // per-row decoding equals the batched rows
    m.attach_head("img", HeadSpec::mlp(768, 8), HeadInit::Random, 3).unwrap();
    let mut g = Graph::with_params(&m.store);
    let x = g.constant(&hidden);
    let batched = m.decode_per_token(&mut g, x, &[1, 3], "img").unwrap();
    assert_eq!(g.dims(batched).cols, 768);
    let batched = g.value(batched).to_vec();
    let again = m.decode_per_token(&mut g, x, &[1, 3], "img").unwrap();
    assert_eq!(g.value(again), batched.as_slice());
    for (i, r) in [1, 3].into_iter().enumerate() {
        let single = m.decode_per_token(&mut g, x, &[r], "img").unwrap();
        assert_eq!(g.value(single), &batched[i * 768..(i + 1) * 768]);
    }
}

#[test]
fn decode_gradient_reaches_input_tokens() {
    let mut m = ModelState::new(tiny(), 9).unwrap();
    m.attach_head("r", HeadSpec::mlp(5, 8), HeadInit::Random, 1).unwrap();
    let toks = random_tokens(3, 12, 5);
    let mut g = Graph::with_params(&m.store);
    let data: Vec<f64> = toks.iter().flat_map(|t| t.vector.clone()).collect();
    let x = g.leaf(&Tensor::matrix(3, 12, data).unwrap(), true);
    let batch = TokenBatch { tokens: x, segments: vec![Segment { offset: 0, positions: vec![0, 1, 2] }] };
    let h = m.encode(&mut g, &batch).unwrap();
    let out = m.decode_recon(&mut g, h, &batch.segments, "r").unwrap();
    let loss = g.sum(out);
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for r in 0..3 {
        assert!(grad[r * 12..(r + 1) * 12].iter().any(|v| v.abs() > 1e-8), "row {r}");
    }
}

#[test]
fn reinitialized_heads_keep_their_parameters() {
    let mut m = ModelState::new(tiny(), 10).unwrap();
    m.attach_head("h", HeadSpec::mlp(3, 8), HeadInit::Random, 1).unwrap();
    let n = m.store.len();
    m.attach_head("h", HeadSpec::mlp(6, 8), HeadInit::ZeroFinal, 2).unwrap();
    assert_eq!(m.store.len(), n);
    let last = m.heads["h"].layers[1].weight;
    assert_eq!(m.store.value(last).shape(), [8, 6]);
    assert!(m.store.value(last).data().iter().all(|&v| v == 0.0));
    assert!(m.attach_head("h", HeadSpec::linear(6), HeadInit::Random, 2).is_err());
}

#[test]
fn parameter_counts() {
    let cfg = ModelConfig { n_blocks: 0, ..ModelConfig::desk() };
    let m = ModelState::new(cfg, 0).unwrap();
    let c = count_parameters(&m);
    assert_eq!(c.tokenizer, 768 * 512 + 512 + 1000 * 512 + 2 * 512);
    assert_eq!(c.pre_embed, 4096 * 256 + (3 * 64 + 64) + (64 * 256 + 256));
    assert_eq!(c.body, 512 * 64 + 64 + 64);
    assert_eq!(c.heads, 0);
    assert_eq!(c.total, c.tokenizer + c.pre_embed + c.body);

    let mut m = ModelState::new(ModelConfig::desk(), 0).unwrap();
    m.attach_head("recon", HeadSpec::mlp(256, 64), HeadInit::Random, 0).unwrap();
    let c = count_parameters(&m);
    let (h, i) = (64, 128);
    let block = 4 * h * h + 3 * h * i + 2 * h;
    assert_eq!(c.body, 512 * h + h + 2 * block + h);
    assert_eq!(c.heads, h * 64 + 64 + 64 * 256 + 256);
    assert_eq!(c.total, m.store.scalar_count());

    let block_count = |hidden: usize| {
        let m = ModelState::new(ModelConfig { n_blocks: 1, hidden_dim: hidden, intermediate_dim: 2 * hidden, ..ModelConfig::desk() }, 0).unwrap();
        let c = count_parameters(&m);
        c.body - (512 * hidden + hidden + hidden)
    };
    let (b1, b2) = (block_count(32), block_count(64));
    assert!(b2 > 2 * b1);
}

#[test]
fn config_validation() {
    assert!(ModelState::new(ModelConfig { n_heads: 3, ..ModelConfig::desk() }, 0).is_err());
    assert!(ModelState::new(ModelConfig { hidden_dim: 12, n_heads: 4, ..ModelConfig::desk() }, 0).is_err());
    ModelConfig::paper().validate().unwrap();
    assert_eq!(ModelConfig::paper().head_dim(), 32);
}

#[test]
fn tokenizer_and_one_block_gradients() {
    let mut m = ModelState::new(ModelConfig { n_blocks: 1, ..tiny() }, 12).unwrap();
    m.attach_head("recon", HeadSpec::mlp(256, 8), HeadInit::Random, 3).unwrap();
    let series: Vec<f64> = (0..256).map(|i| (i as f64 * 0.2).sin()).collect();
    let set = encode_timeseries(&series.iter().map(|v| v * 0.1).collect::<Vec<_>>()).unwrap();
    // keep the numeric parts within the tiny part capacity
    let set = crate::triplet::TripletSet {
        triplets: set
            .triplets
            .into_iter()
            .map(|mut t| {
                t.local_indices.truncate(4);
                t
            })
            .collect(),
        ..set
    };
    let target = Tensor::matrix(1, 256, series).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let coords = sample_coordinates(&m.store, 200, &mut rng);
    let model = m.clone();
    let report = check_graph_gradients(
        &mut m.store,
        |g| {
            let batch = embed_sets(g, &model, &[&set], None)?;
            let h = model.encode(g, &batch)?;
            let out = model.decode_recon(g, h, &batch.segments, "recon")?;
            let t = g.constant(&target);
            g.mse(out, t)
        },
        &coords,
        1e-5,
        1e-4,
    )
    .unwrap();
    let bad: Vec<_> = report.failures().cloned().collect();
    assert!(bad.is_empty(), "{bad:?}");
}

use super::*;
use crate::transformer::HeadInit;
use crate::Error;
use alloc::vec;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        token_dim: 16,
        hidden_dim: 8,
        n_heads: 2,
        intermediate_dim: 12,
        vocab_size: 40,
        pre_embed_dim: 8,
        point_hidden: 4,
        ..ModelConfig::desk()
    }
}

fn table_batch(n: usize, d: usize, seed: u64) -> ModalityBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModalityBatch {
        modality: ModalityKind::Table,
        head: "recon/table".into(),
        samples: (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        encode_seed: 7,
    }
}

fn ts_batch(n: usize, seed: u64) -> ModalityBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModalityBatch {
        modality: ModalityKind::TimeSeries,
        head: "recon/timeseries".into(),
        samples: (0..n)
            .map(|_| {
                let f = rng.random_range(0.02..0.2);
                let p = rng.random_range(0.0..6.0);
                (0..256).map(|t| libm::sin(f * t as f64 + p)).collect()
            })
            .collect(),
        encode_seed: 0,
    }
}

fn model_with_heads(cfg: ModelConfig, heads: &[(ModalityKind, usize)]) -> ModelState {
    let mut m = ModelState::new(cfg, 1).unwrap();
    for &(k, len) in heads {
        let spec = recon_head_spec(k, len, &m.config).unwrap();
        m.attach_head(&alloc::format!("recon/{k}"), spec, HeadInit::Random, 2).unwrap();
    }
    m
}

#[test]
fn imputation_examples() {
    let d = impute_missing(&[Some(1.0), None, Some(1.0), Some(2.0)], ColumnKind::Discrete).unwrap();
    assert_eq!(d, [1.0, 1.0, 1.0, 2.0]);
    let c = impute_missing(&[Some(2.0), None, Some(4.0)], ColumnKind::Continuous).unwrap();
    assert_eq!(c, [2.0, 3.0, 4.0]);
    let t = impute_missing(&[None, Some(5.0)], ColumnKind::TimeSeries).unwrap();
    assert_eq!(t, [0.0, 5.0]);
    let tie = impute_missing(&[Some(3.0), Some(2.0), None], ColumnKind::Discrete).unwrap();
    assert_eq!(tie[2], 2.0);
    assert!(matches!(impute_missing(&[None, None], ColumnKind::Discrete), Err(Error::Imputation(_))));
    assert!(matches!(impute_missing(&[None], ColumnKind::Continuous), Err(Error::Imputation(_))));
    assert_eq!(impute_missing(&[None, None], ColumnKind::TimeSeries).unwrap(), [0.0, 0.0]);
}

#[test]
fn normalization() {
    let img = ImageNorm::default();
    let (out, stats) = normalize(&[vec![4.0; 256]], ModalityKind::TimeSeries, &img).unwrap();
    assert!(out[0].iter().all(|&v| v == 0.0));
    assert!(stats.any_degenerate());

    let graph = vec![vec![1.0, -3.0, 7.5]];
    assert_eq!(normalize(&graph, ModalityKind::Graph, &img).unwrap().0, graph);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(-100.0..0.0), 2.0]).collect();
    let (z, stats) = normalize(&rows, ModalityKind::Table, &img).unwrap();
    for c in 0..2 {
        let mean = z.iter().map(|r| r[c]).sum::<f64>() / 50.0;
        let var = z.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
    }
    assert_eq!(stats.degenerate, [false, false, true]);
    assert!(z.iter().all(|r| r[2] == 0.0));

    let (px, _) = normalize(&[vec![0.485, 0.456, 0.406, 1.0, 1.0, 1.0]], ModalityKind::Image, &img).unwrap();
    assert_eq!(&px[0][..3], &[0.0, 0.0, 0.0]);
    assert!((px[0][3] - (1.0 - 0.485) / 0.229).abs() < 1e-15);
}

#[test]
fn corruption_identity_and_honesty() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..200).map(|i| i as f64 + 1.0).collect();
    let none = CorruptionSpec { mask_fraction: 0.0, noise_variance: 0.0, ..CorruptionSpec::default_for(ModalityKind::Table).unwrap() };
    let (y, masked) = corrupt_values(&x, &none, &mut rng).unwrap();
    assert_eq!(y, x);
    assert!(masked.is_empty());

    let mask_only = CorruptionSpec { noise_variance: 0.0, mask_fraction: 0.3, ..none };
    let (y, masked) = corrupt_values(&x, &mask_only, &mut rng).unwrap();
    for (i, (a, b)) in x.iter().zip(&y).enumerate() {
        if masked.contains(&i) {
            assert_eq!(*b, 0.0);
        } else {
            assert_eq!(a, b);
        }
    }
    let bad = CorruptionSpec { mask_fraction: 1.5, ..none };
    assert!(matches!(corrupt_values(&x, &bad, &mut rng), Err(Error::Config(_))));
    let text = CorruptionSpec::default_for(ModalityKind::Text).unwrap();
    assert!(matches!(corrupt_values(&x, &text, &mut rng), Err(Error::Config(_))));
}

#[test]
fn corruption_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let spec = CorruptionSpec::default_for(ModalityKind::TimeSeries).unwrap();
    let x = vec![0.0; 100_000];
    let (y, masked) = corrupt_values(&x, &spec, &mut rng).unwrap();
    let rate = masked.len() as f64 / 1e5;
    assert!((rate - 0.10).abs() < 0.005, "{rate}");
    let noise: Vec<f64> = y.iter().enumerate().filter(|(i, _)| masked.binary_search(i).is_err()).map(|(_, v)| *v).collect();
    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64;
    assert!((var - 0.1).abs() < 0.005, "{var}");

    let text = CorruptionSpec::default_for(ModalityKind::Text).unwrap();
    let (ids, masked) = corrupt_ids(&vec![3; 100_000], &text, 39, &mut rng).unwrap();
    assert!((masked.len() as f64 / 1e5 - 0.15).abs() < 0.005);
    assert!(masked.iter().all(|&i| ids[i] == 39));

    let image = CorruptionSpec::default_for(ModalityKind::Image).unwrap();
    for _ in 0..20 {
        let m = choose_masked_tokens(196, &image, &mut rng).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 147);
    }
}

#[test]
fn reconstruction_losses() {
    let mut g = Graph::new();
    let p = g.constant_rows(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let zero = recon_loss(&mut g, ModalityKind::Table, p, &ReconTarget::Full(vec![1.0, 2.0, 3.0])).unwrap();
    assert_eq!(g.scalar(zero), 0.0);
    let s = g.constant_rows(1, 1, vec![2.5]).unwrap();
    let l = recon_loss(&mut g, ModalityKind::TimeSeries, s, &ReconTarget::Full(vec![-0.5])).unwrap();
    assert_eq!(g.scalar(l), 9.0);

    let v = 40;
    let logits = g.zeros(3, 2 * v);
    let l = recon_loss(&mut g, ModalityKind::Text, logits, &ReconTarget::MaskedIds(vec![[0, 1], [5, 5], [39, 2]])).unwrap();
    assert!((g.scalar(l) - libm::log(v as f64)).abs() < 1e-12);

    let empty = recon_loss(&mut g, ModalityKind::Image, p, &ReconTarget::MaskedPatches(vec![]));
    assert!(matches!(empty, Err(Error::Contract(_))));
    let wrong = recon_loss(&mut g, ModalityKind::Image, p, &ReconTarget::Full(vec![0.0; 3]));
    assert!(matches!(wrong, Err(Error::Contract(_))));
}

#[test]
fn schedule() {
    let s = ScheduleConfig { total_steps: 1000, warmup_ratio: 0.03, cycles: 1 };
    assert_eq!(s.warmup_steps(), 30);
    assert_eq!(lr_at(0, &s, 2e-4), 0.0);
    assert_eq!(lr_at(30, &s, 2e-4), 2e-4);
    assert!((lr_at(15, &s, 2e-4) - 1e-4).abs() < 1e-18);
    assert!((lr_at(515, &s, 2e-4) - 1e-4).abs() < 1e-15);
    assert_eq!(lr_at(1000, &s, 2e-4), 0.0);
    let max = (0..=1000).map(|k| lr_at(k, &s, 2e-4)).fold(0.0, f64::max);
    assert_eq!(max, 2e-4);
    assert!((0..=1000).all(|k| (0.0..=2e-4).contains(&lr_at(k, &s, 2e-4))));

    let two = ScheduleConfig { total_steps: 2000, warmup_ratio: 0.03, cycles: 2 };
    let (w, span) = (60, 1940);
    assert_eq!(two.warmup_steps(), w);
    assert!((lr_at(w + span / 4, &two, 1.0) - 0.5).abs() < 1e-12);
    assert!((lr_at(w + span / 2, &two, 1.0) - 1.0).abs() < 1e-12);
    assert!(lr_at(w + span / 2 - 1, &two, 1.0) < 1e-4);
}

#[test]
fn adamw_matches_hand_update() {
    use crate::tensor::{ParamStore, Tensor};
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, -2.0]).unwrap(), true);
    let b = store.add("b", Tensor::vector(vec![0.5]).unwrap(), false);
    let f = store.add("f", Tensor::vector(vec![3.0]).unwrap(), true);
    store.set_trainable(f, false);
    let mut g = Graph::with_params(&store);
    let (wv, bv, fv) = (g.param(w), g.param(b), g.param(f));
    let wsq = g.mul(wv, wv).unwrap();
    let s1 = g.sum(wsq);
    let s2 = g.sum(bv);
    let s3 = g.sum(fv);
    let t = g.add(s1, s2).unwrap();
    let t = g.add(t, s3).unwrap();
    g.backward(t).unwrap();
    let grads = g.into_param_grads();
    let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.5, ..OptimizerConfig::default() };
    let mut adam = AdamState::default();
    adam.step(&mut store, &grads, &cfg, 0.1);
    // first step: m̂ = g, v̂ = g², so the update is sign(g)·|g|/(|g|+eps)
    let hand = |p: f64, g: f64, decay: bool| {
        let d = if decay { 1.0 - 0.1 * 0.5 } else { 1.0 };
        p * d - 0.1 * g / (g.abs() + 1e-8)
    };
    let wv = store.value(w).data();
    assert!((wv[0] - hand(1.0, 2.0, true)).abs() < 1e-15);
    assert!((wv[1] - hand(-2.0, -4.0, true)).abs() < 1e-15);
    assert!((store.value(b).data()[0] - hand(0.5, 1.0, false)).abs() < 1e-15);
    assert_eq!(store.value(f).data()[0], 3.0);
}

#[test]
fn parallel_step_uses_the_mean_gradient() {
    let mut m = model_with_heads(tiny(), &[(ModalityKind::Table, 6), (ModalityKind::TimeSeries, 256)]);
    let batches = vec![table_batch(4, 6, 1), ts_batch(3, 2)];
    let cfg = PretrainConfig::default();
    let mut state = TrainState::new(5);
    let jobs = plan_jobs(&mut state.clone(), &batches, &cfg, &m.config).unwrap();
    let (l_joint, g_joint) = joint_gradients(&m, &jobs).unwrap();
    let (l_sep, g_sep) = separate_mean_gradients(&m, &jobs).unwrap();
    assert_eq!(l_joint, l_sep);
    assert!(g_joint.max_abs_diff(&g_sep) < 1e-10);
    assert!(g_sep.max_abs_diff(&g_joint) < 1e-10);

    let rec = pretrain_step_parallel(&mut m, &mut state, &batches, &cfg).unwrap();
    assert_eq!(rec.losses.iter().map(|l| l.0).collect::<Vec<_>>(), [ModalityKind::Table, ModalityKind::TimeSeries]);
    assert_eq!(rec.losses[0].1, l_joint[0]);
    assert_eq!(state.step, 1);
    assert_eq!(state.loss_history[&ModalityKind::Table].len(), 1);
    assert!(matches!(pretrain_step_parallel(&mut m, &mut state, &[], &cfg), Err(Error::Contract(_))));
}

#[test]
fn single_modality_parallel_equals_plain_step() {
    let base = model_with_heads(tiny(), &[(ModalityKind::Table, 5)]);
    let batches = vec![table_batch(3, 5, 4)];
    let cfg = PretrainConfig { optimizer: OptimizerConfig { lr: 1e-2, ..Default::default() }, schedule: ScheduleConfig { total_steps: 10, ..Default::default() }, ..Default::default() };

    let (mut a, mut sa) = (base.clone(), TrainState::new(3));
    let (mut b, mut sb) = (base.clone(), TrainState::new(3));
    for _ in 0..3 {
        pretrain_step_parallel(&mut a, &mut sa, &batches, &cfg).unwrap();
        pretrain_step_ct(&mut b, &mut sb, &batches, &cfg).unwrap();
    }
    assert_eq!(sa.step, sb.step);
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn ct_takes_one_step_per_modality_and_diverges() {
    let base = model_with_heads(tiny(), &[(ModalityKind::Table, 6), (ModalityKind::TimeSeries, 256)]);
    let batches = vec![table_batch(4, 6, 1), ts_batch(3, 2)];
    let cfg = PretrainConfig { schedule: ScheduleConfig { total_steps: 20, ..Default::default() }, optimizer: OptimizerConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
    let (mut p, mut sp) = (base.clone(), TrainState::new(1));
    let (mut c, mut sc) = (base.clone(), TrainState::new(1));
    pretrain_step_parallel(&mut p, &mut sp, &batches, &cfg).unwrap();
    let recs = pretrain_step_ct(&mut c, &mut sc, &batches, &cfg).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(sc.step, 2);
    // the CT call's second update already runs at a non-zero rate
    assert_eq!(sp.step, 1);
    let moved = |m: &ModelState| m.store.value(m.input_proj.weight).data() != base.store.value(base.input_proj.weight).data();
    assert!(!moved(&p) && moved(&c));
    pretrain_step_parallel(&mut p, &mut sp, &batches, &cfg).unwrap();
    pretrain_step_ct(&mut c, &mut sc, &batches, &cfg).unwrap();
    let w = p.input_proj.weight;
    let diff = p.store.value(w).data().iter().zip(c.store.value(w).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn text_and_image_objectives_run() {
    let cfg = ModelConfig { part_capacity: 384, pre_embed_dim: 8, ..tiny() };
    let m = model_with_heads(cfg, &[(ModalityKind::Text, 0), (ModalityKind::Image, 0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let text = ModalityBatch {
        modality: ModalityKind::Text,
        head: "recon/text".into(),
        samples: vec![(0..512).map(|_| rng.random_range(0..39) as f64).collect()],
        encode_seed: 0,
    };
    let image = ModalityBatch {
        modality: ModalityKind::Image,
        head: "recon/image".into(),
        samples: vec![(0..224 * 224 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()],
        encode_seed: 0,
    };
    let pcfg = PretrainConfig::default();
    let mut state = TrainState::new(0);
    let batches = [text, image];
    let jobs = plan_jobs(&mut state, &batches, &pcfg, &m.config).unwrap();
    let (losses, grads) = joint_gradients(&m, &jobs).unwrap();
    // untrained logits are near uniform over the vocabulary
    assert!((losses[0] - libm::log(40.0)).abs() < 0.5, "{}", losses[0]);
    assert!(losses[1] > 0.0 && losses[1].is_finite());
    assert!(grads.get(m.tokenizer.mask_token).is_some());
    assert!(grads.get(m.tokenizer.word_table).is_some());
}

#[test]
fn short_run_reduces_loss() {
    let mut m = model_with_heads(tiny(), &[(ModalityKind::Table, 6)]);
    let batches = vec![table_batch(8, 6, 9)];
    let cfg = PretrainConfig {
        optimizer: OptimizerConfig { lr: 1e-2, ..Default::default() },
        schedule: ScheduleConfig { total_steps: 60, ..Default::default() },
        ..Default::default()
    };
    let mut state = TrainState::new(0);
    let first = pretrain_step_parallel(&mut m, &mut state, &batches, &cfg).unwrap().mean_loss();
    let mut last = first;
    for _ in 1..60 {
        last = pretrain_step_parallel(&mut m, &mut state, &batches, &cfg).unwrap().mean_loss();
    }
    assert!(last < 0.7 * first, "{first} -> {last}");
}

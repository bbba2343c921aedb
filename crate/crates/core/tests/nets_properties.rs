use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use surfelflow::autodiff::{grad_check, Tape, Tensor};
use surfelflow::nets::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>(),
    )
    .unwrap()
}

/// Moves every parameter off its initial value so zero-initialized
/// projections do not make the checks trivial.
fn jitter(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += std * e;
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(t.len());
    for &i in perm {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(t.shape(), data).unwrap()
}

fn unit_anchors(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    use rand::Rng;
    Tensor::new(&[n, 3], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config(in_width: usize, stage2: bool) -> DenoiserConfig {
    DenoiserConfig {
        in_width,
        width: 16,
        layers: 2,
        heads: 4,
        cond_width: 8,
        num_classes: 3,
        anchor_bands: stage2.then_some(3),
        ..DenoiserConfig::default()
    }
}

fn run_denoiser(
    net: &Denoiser,
    store: &ParamStore,
    z: &Tensor,
    t: f64,
    label: Option<usize>,
    anchors: Option<&Tensor>,
) -> Tensor {
    let tape = Tape::new();
    let p = store.bind(&tape);
    net.forward(&p, tape.constant(z.clone()), t, label, anchors)
        .unwrap()
        .value()
}

#[test]
fn denoisers_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (in_width, stage2) in [(3, false), (4, true)] {
        let mut store = ParamStore::new();
        let net = Denoiser::new(&mut store, &small_config(in_width, stage2), "den", 7).unwrap();
        jitter(&mut store, 8, 0.05);
        let n = 12;
        let z = randn(&mut rng, &[n, in_width], 1.0);
        let anchors = unit_anchors(&mut rng, n);
        let anchors = stage2.then_some(&anchors);
        let base = run_denoiser(&net, &store, &z, 0.4, Some(1), anchors);
        assert_eq!(base.shape(), z.shape());
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pa = anchors.map(|a| permute_rows(a, &perm));
            let out = run_denoiser(&net, &store, &permute_rows(&z, &perm), 0.4, Some(1), pa.as_ref());
            worst = worst.max(out.max_abs_diff(&permute_rows(&base, &perm)));
        }
        assert!(worst < 1e-8, "stage2={stage2}: {worst}");
    }
}

#[test]
fn read_cross_attention_ignores_context_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let mut init = Init::new(3);
    let read = ReadCrossAttention::new(&mut store, &mut init, "read", 3, 16, 16, 4, 8).unwrap();
    let anchors = unit_anchors(&mut rng, 6);
    let ctx = randn(&mut rng, &[10, 16], 1.0);
    let eval = |a: &Tensor, c: &Tensor| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        read.forward(&p, a, tape.constant(c.clone())).unwrap().value()
    };
    let base = eval(&anchors, &ctx);
    let mut worst_ctx: f64 = 0.0;
    let mut worst_q: f64 = 0.0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng);
        worst_ctx = worst_ctx.max(eval(&anchors, &permute_rows(&ctx, &perm)).max_abs_diff(&base));
        let mut qperm: Vec<usize> = (0..6).collect();
        qperm.shuffle(&mut rng);
        worst_q = worst_q.max(eval(&permute_rows(&anchors, &qperm), &ctx).max_abs_diff(&permute_rows(&base, &qperm)));
    }
    assert!(worst_ctx < 1e-9, "{worst_ctx}");
    assert!(worst_q < 1e-9, "{worst_q}");

    // a single context token is read identically by every query
    let one = eval(&anchors, &randn(&mut rng, &[1, 16], 1.0));
    for i in 1..6 {
        for (a, b) in one.row(0).iter().zip(one.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let empty = tape.constant(Tensor::zeros(&[0, 16]));
    assert!(matches!(read.forward(&p, &anchors, empty), Err(NetError::EmptyContext)));
}

#[test]
fn zero_initialized_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let mut init = Init::new(5);
    let block = SelfAttentionBlock::new(&mut store, &mut init, "b", 8, 2, true, true, true).unwrap();
    let x = randn(&mut rng, &[5, 8], 1.0);
    let shared = randn(&mut rng, &[48], 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = block
        .forward(&p, tape.constant(x.clone()), Some(tape.constant(shared)))
        .unwrap();
    assert_eq!(y.value(), x);

    let mut store = ParamStore::new();
    let cfg = DenoiserConfig {
        zero_init: true,
        ..small_config(3, false)
    };
    let net = Denoiser::new(&mut store, &cfg, "d", 1).unwrap();
    let z = randn(&mut rng, &[4, 3], 1.0);
    assert_eq!(run_denoiser(&net, &store, &z, 0.5, None, None), Tensor::zeros(&[4, 3]));
}

#[test]
fn qk_norm_bounds_logits_by_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let mut init = Init::new(7);
    let block = SelfAttentionBlock::new(&mut store, &mut init, "b", 16, 4, true, false, false).unwrap();
    let x = randn(&mut rng, &[9, 16], 30.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (q, k) = block.queries_keys(&p, tape.constant(x)).unwrap();
    let tau = block.temperature(&p).unwrap().unwrap();
    let logits = attention_logits(q, k, 4, Some(tau)).unwrap().value();
    let bound = tau.item().abs();
    assert!(logits.data().iter().all(|l| l.abs() <= bound + 1e-12));
    assert!(logits.data().iter().any(|l| l.abs() > 0.5 * bound));
}

#[test]
fn upsampler_counts_and_group_locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let mut init = Init::new(9);
    let head = GaussianHeadConfig {
        ratios: vec![3],
        out_dim: 13,
    };
    let up = TokenUpsampler::new(&mut store, &mut init, "up", &head, 8, 2).unwrap();
    let x = randn(&mut rng, &[2, 8], 1.0);
    let eval = |x: &Tensor| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        up.level(&p, tape.constant(x.clone()), 0).unwrap().value()
    };
    let y = eval(&x);
    assert_eq!(y.shape(), &[6, 8]);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[8..16] {
        *v += 1.0;
    }
    let y2 = eval(&x2);
    assert_eq!(&y.data()[..24], &y2.data()[..24]);
    assert_ne!(&y.data()[24..], &y2.data()[24..]);

    let tape = Tape::new();
    let p = store.bind(&tape);
    assert!(matches!(
        up.level(&p, tape.constant(x), 1),
        Err(NetError::Level { level: 1, levels: 1 })
    ));

    let full_scale = GaussianHeadConfig {
        ratios: vec![8, 4, 3],
        out_dim: 13,
    };
    assert_eq!(768 * full_scale.expansion(), 73_728);
}

#[test]
fn kl_hand_values() {
    let eval = |mu: f64, logvar: f64| {
        let tape = Tape::new();
        kl_divergence(
            tape.constant(Tensor::full(&[3, 2], mu)),
            tape.constant(Tensor::full(&[3, 2], logvar)),
        )
        .unwrap()
        .item()
    };
    assert_eq!(eval(0.0, 0.0), 0.0);
    assert_eq!(eval(1.0, 0.0), 0.5);
    // σ² = e, log σ² = 1: ½ (e − 2)
    assert!((eval(0.0, 1.0) - 0.5 * (1f64.exp() - 2.0)).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let mu = randn(&mut rng, &[4], 2.0);
        let lv = randn(&mut rng, &[4], 2.0);
        let tape = Tape::new();
        assert!(kl_divergence(tape.constant(mu), tape.constant(lv)).unwrap().item() >= 0.0);
    }
    let tape = Tape::new();
    let raw = tape.constant(Tensor::new(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
    let lat = vae_latent(raw, 3).unwrap();
    assert_eq!(lat.mu.shape(), vec![2, 2]);
    assert!((lat.kl.item() - 0.25).abs() < 1e-15);
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = DenoiserConfig {
        width: 8,
        heads: 2,
        cond_width: 4,
        ..small_config(3, false)
    };
    let net = Denoiser::new(&mut store, &cfg, "d", 2).unwrap();
    jitter(&mut store, 13, 0.1);
    let z = randn(&mut rng, &[4, 3], 1.0);
    let w = randn(&mut rng, &[4, 3], 1.0);
    let to_ad = |e: NetError| match e {
        NetError::Autodiff(a) => a,
        other => panic!("{other}"),
    };
    let err = grad_check(
        |tape, x| {
            let p = store.bind(tape);
            let y = net.forward(&p, x, 0.3, Some(2), None).map_err(to_ad)?;
            Ok(y.mul(tape.constant(w.clone()))?.sum_all())
        },
        &z,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "input grad {err}");
    for name in [
        "d.block0.qkv.w",
        "d.block1.temperature",
        "d.cross0.kv.w",
        "d.time_out.w",
        "d.labels",
        "d.output.w",
    ] {
        let value = store.get(name).unwrap().clone();
        let err = grad_check(
            |tape, x| {
                let mut p = store.bind(tape);
                p.replace(name, x).map_err(to_ad)?;
                let y = net
                    .forward(&p, tape.constant(z.clone()), 0.3, Some(2), None)
                    .map_err(to_ad)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum_all())
            },
            &value,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn view_encoding_token_count_and_view_order_invariance() {
    use surfelflow::geometry::{assemble_view_tensor, Aabb};
    use surfelflow::synthetic::sphere_dataset;

    let ds = sphere_dataset(16);
    let cfg = VaeConfig {
        patch: 8,
        width: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        anchors: 8,
        latent_width: 4,
        pe_bands: 2,
        head: GaussianHeadConfig {
            ratios: vec![2],
            out_dim: 13,
        },
    };
    let mut store = ParamStore::new();
    let vae = SurfelVae::new(&mut store, &cfg, 1).unwrap();
    let views: Vec<Tensor> = ds.train.iter().map(assemble_view_tensor).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let anchors = unit_anchors(&mut rng, 8);

    let read_with = |vs: &[Tensor]| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let zz = vae.encode_views(&p, &tape, vs).unwrap();
        (zz.shape(), vae.read(&p, &anchors, zz).unwrap().value())
    };
    let (shape, base) = read_with(&views[..1]);
    assert_eq!(shape, vec![4, 16]);
    let (_, all) = read_with(&views);
    let mut shuffled = views.clone();
    shuffled.reverse();
    shuffled.swap(0, 1);
    let (_, sh) = read_with(&shuffled);
    assert!(sh.max_abs_diff(&all) < 1e-6);
    assert_ne!(base.data(), all.data());

    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = vae.forward(&p, &tape, &views, &anchors, 5).unwrap();
    assert_eq!(out.raw.shape(), vec![16, 13]);
    let bounds = Aabb::unit();
    let scene = vae.splats(&out.raw.value(), &bounds, &anchors).unwrap();
    assert_eq!(scene.len(), 16);

    let bad = Tensor::zeros(&[12, 16, 15]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    assert!(matches!(
        vae.encode_views(&p, &tape, &[bad]),
        Err(NetError::Patch { .. })
    ));
}

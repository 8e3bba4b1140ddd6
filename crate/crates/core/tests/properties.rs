mod common;

use proptest::prelude::*;
use sdpoint::checkpoint::{Checkpoint, CheckpointMeta};
use sdpoint::cost::{instance_cost, param_count};
use sdpoint::data::{
    augment, batch_iter, bilinear_resize, hflip, AugmentPolicy, Dataset, Normalization, Split,
};
use sdpoint::downsample::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, pool_windows, target_size,
};
use sdpoint::eval::{
    cost_error_curve, is_strictly_improving, min_cost_grouping, min_cost_histogram, BnMode,
    CurvePoint, EvalResult, MinCost,
};
use sdpoint::layers::{BlockSpec, HeadSpec, StemSpec};
use sdpoint::{enumerate_instances, LayerStack, NetworkSpec, Rng, SDPointInstance, Tensor4};

/// Random valid networks of one to four blocks.
fn spec_strategy() -> impl Strategy<Value = NetworkSpec> {
    (
        1usize..=3,
        3usize..=11,
        3usize..=11,
        proptest::option::of(1usize..=4),
        any::<bool>(),
        1usize..=4,
        proptest::collection::vec((any::<bool>(), 1usize..=5, 1usize..=2), 1..=4),
    )
        .prop_map(|(c_in, h, w, stem, pre, classes, raw)| {
            let mut spec = NetworkSpec::empty(c_in, (h, w));
            spec.stem = stem.map(|c| StemSpec {
                out_channels: c,
                kernel: 3,
            });
            let mut c = stem.unwrap_or(c_in);
            for (residual, c_out, stride) in raw {
                spec.blocks.push(if residual {
                    BlockSpec::Residual {
                        in_channels: c,
                        out_channels: c_out,
                        stride,
                    }
                } else {
                    BlockSpec::Plain {
                        in_channels: c,
                        out_channels: c_out,
                        stride,
                    }
                });
                c = c_out;
            }
            spec.head = Some(HeadSpec {
                pre_activation: pre,
                classes,
            });
            spec
        })
}

fn ratio_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(0.25),
        Just(0.5),
        Just(0.75),
        (1u32..=100).prop_map(|p| p as f64 / 100.0)
    ]
}

fn tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = Rng::new(seed);
    let len = shape.iter().product();
    Tensor4::from_vec(shape, (0..len).map(|_| rng.normal() as f32).collect()).unwrap()
}

proptest! {
    #[test]
    fn pool_windows_tile_the_axis(len in 1usize..80, frac in 0.0f64..1.0) {
        let out = 1 + ((len - 1) as f64 * frac) as usize;
        let w = pool_windows(len, out).unwrap();
        prop_assert_eq!(w.len(), out);
        prop_assert_eq!(w[0].start, 0);
        prop_assert_eq!(w[out - 1].end, len);
        for win in &w {
            prop_assert!(!win.is_empty());
            prop_assert!(win.len() <= len.div_ceil(out) + 1);
        }
        for pair in w.windows(2) {
            prop_assert!(pair[0].start <= pair[1].start);
            prop_assert!(pair[0].end <= pair[1].end);
            // no gap between consecutive windows
            prop_assert!(pair[1].start <= pair[0].end);
        }
    }

    #[test]
    fn pooling_never_upsamples(len in 1usize..40, extra in 1usize..10) {
        prop_assert!(pool_windows(len, len + extra).is_err());
        prop_assert!(pool_windows(len, 0).is_err());
    }

    #[test]
    fn constant_maps_pool_to_the_same_constant(
        h in 1usize..20, w in 1usize..20, fh in 0.0f64..1.0, fw in 0.0f64..1.0, v in -50.0f32..50.0,
    ) {
        let oh = 1 + ((h - 1) as f64 * fh) as usize;
        let ow = 1 + ((w - 1) as f64 * fw) as usize;
        let x = Tensor4::full([2, 3, h, w], v).unwrap();
        let (y, _) = adaptive_avg_pool_forward(&x, oh, ow).unwrap();
        prop_assert_eq!(y.dims(), [2, 3, oh, ow]);
        prop_assert!(y.data().iter().all(|&o| o == v));
    }

    #[test]
    fn pooling_backward_conserves_gradient_mass(
        h in 1usize..16, w in 1usize..16, fh in 0.0f64..1.0, fw in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let oh = 1 + ((h - 1) as f64 * fh) as usize;
        let ow = 1 + ((w - 1) as f64 * fw) as usize;
        let x = tensor([1, 2, h, w], seed).cast::<f64>();
        let (_, cache) = adaptive_avg_pool_forward(&x, oh, ow).unwrap();
        let g = tensor([1, 2, oh, ow], seed ^ 1).cast::<f64>();
        let dx = adaptive_avg_pool_backward(&cache, &g).unwrap();
        let scale = g.data().iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((dx.sum() - g.sum()).abs() <= 1e-12 * scale);
    }

    #[test]
    fn target_size_rounds_to_nearest(len in 1usize..200, r in ratio_strategy()) {
        let t = target_size(len, r);
        prop_assert!(t >= 1 && t <= len);
        let exact = len as f64 * r;
        if t > 1 {
            prop_assert!((t as f64 - exact).abs() <= 0.5 + 1e-9);
        } else {
            prop_assert!(exact < 1.5 + 1e-9);
        }
        prop_assert!(target_size(len, r) <= target_size(len, (r + 0.01).min(1.0)));
    }

    #[test]
    fn pareto_filter_matches_brute_force(
        raw in proptest::collection::vec((0u64..12, 0u32..10), 0..30),
    ) {
        let points: Vec<CurvePoint> = raw
            .iter()
            .enumerate()
            .map(|(i, &(f, e))| CurvePoint { id: format!("x{i}"), flops: f, error_pct: e as f64 })
            .collect();
        let curve = cost_error_curve(points);
        prop_assert!(curve.filtered);
        prop_assert!(is_strictly_improving(&curve.points));

        // A (cost, error) pair survives iff it has the lowest error at its cost
        // and every strictly cheaper point has a strictly larger error.
        let mut expected: Vec<(u64, u32)> = raw
            .iter()
            .copied()
            .filter(|&(f, e)| {
                raw.iter().all(|&(f2, e2)| (f2 != f || e2 >= e) && (f2 >= f || e2 > e))
            })
            .collect();
        expected.sort();
        expected.dedup();
        let got: Vec<(u64, u32)> =
            curve.points.iter().map(|p| (p.flops, p.error_pct as u32)).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn batches_cover_every_sample_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>()) {
        let ds = Dataset::new(
            Tensor4::full([n, 1, 2, 2], 0.0).unwrap(),
            (0..n).map(|i| i % 10).collect(),
            Split::Train,
        )
        .unwrap();
        let it = batch_iter(&ds, bs, Some(seed)).unwrap();
        prop_assert_eq!(it.num_batches(), n.div_ceil(bs));
        let batches: Vec<_> = it.collect::<Result<Vec<_>, _>>().unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        for b in &batches[..batches.len() - 1] {
            prop_assert_eq!(b.indices.len(), bs);
        }
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_shapes_and_flips(
        c in 1usize..4, h in 2usize..10, w in 2usize..10, pad in 0usize..4, seed in any::<u64>(),
    ) {
        let img: Vec<f32> = tensor([1, c, h, w], seed).into_vec();
        prop_assert_eq!(hflip(&hflip(&img, c, h, w), c, h, w), img.clone());

        let crop = h.min(w);
        let policy = AugmentPolicy { pad, crop, hflip_prob: 0.5, enabled: true };
        let mut rng = Rng::new(seed);
        let out = augment(&img, c, h, w, &policy, &mut rng).unwrap();
        prop_assert_eq!(out.len(), c * crop * crop);

        let still = AugmentPolicy { pad: 0, crop: h, hflip_prob: 0.0, enabled: true };
        if h == w {
            prop_assert_eq!(augment(&img, c, h, w, &still, &mut rng).unwrap(), img.clone());
        }
        prop_assert_eq!(augment(&img, c, h, w, &AugmentPolicy::disabled(), &mut rng).unwrap(), img);
    }

    #[test]
    fn bilinear_keeps_constants(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, v in -5.0f32..5.0) {
        let y = bilinear_resize(&Tensor4::full([1, 2, h, w], v).unwrap(), oh, ow).unwrap();
        prop_assert_eq!(y.dims(), [1, 2, oh, ow]);
        prop_assert!(y.data().iter().all(|&o| (o - v).abs() <= 1e-5));
    }

    #[test]
    fn normalisation_inverts(seed in any::<u64>(), m in -2.0f32..2.0, s in 0.1f32..3.0) {
        let x = tensor([3, 2, 4, 4], seed);
        let norm = Normalization::new(vec![m, -m], vec![s, 1.0 / s]).unwrap();
        let back = norm.invert(&norm.apply(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn instance_ids_round_trip(p in 1usize..64, pct in 1u32..=100) {
        let inst = SDPointInstance::new(p, pct as f64 / 100.0).unwrap();
        let parsed: SDPointInstance = inst.id().parse().unwrap();
        prop_assert_eq!(parsed, inst);
        prop_assert_eq!(parsed.id(), format!("p{p}_r{pct}"));
    }

    #[test]
    fn min_cost_histogram_partitions_samples(
        preds in proptest::collection::vec(proptest::collection::vec(0usize..3, 25), 1..5),
        labels in proptest::collection::vec(0usize..3, 25),
        costs in proptest::collection::vec(1u64..1000, 5),
    ) {
        let results: Vec<EvalResult> = preds
            .iter()
            .enumerate()
            .map(|(i, p)| EvalResult {
                id: format!("v{i}"),
                bn_mode: BnMode::InstanceSpecific,
                error_pct: 0.0,
                samples: p.len(),
                predictions: p.clone(),
            })
            .collect();
        let pairs: Vec<(u64, &EvalResult)> =
            results.iter().enumerate().map(|(i, r)| (costs[i], r)).collect();
        let mins = min_cost_grouping(&pairs, &labels).unwrap();
        for (s, m) in mins.iter().enumerate() {
            let best = pairs
                .iter()
                .filter(|(_, r)| r.predictions[s] == labels[s])
                .map(|(c, _)| *c)
                .min();
            prop_assert_eq!(*m, best.map_or(MinCost::Uncorrectable, MinCost::Flops));
        }
        let hist = min_cost_histogram(&mins);
        prop_assert_eq!(hist.iter().map(|(_, n)| n).sum::<usize>(), labels.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_cost_matches_simulation(spec in spec_strategy(), r in ratio_strategy()) {
        let n = spec.downsampling_points();
        let catalog = enumerate_instances(n, &[r]).unwrap();
        for inst in catalog.instances() {
            let analytic = instance_cost(&spec, *inst).unwrap().flops;
            prop_assert_eq!(analytic, common::oracle::flops_oracle(&spec, *inst), "{}", inst.id());
        }
        prop_assert!(instance_cost(&spec, SDPointInstance::new(n + 1, r).unwrap()).is_err());
    }

    #[test]
    fn parameter_count_matches_built_network(spec in spec_strategy(), seed in any::<u64>()) {
        let stack: LayerStack = LayerStack::new(spec.clone(), &mut Rng::new(seed)).unwrap();
        let from_dims: usize = stack
            .params()
            .iter()
            .map(|(_, dims, p)| {
                assert_eq!(dims.iter().product::<usize>(), p.value.len());
                p.value.len()
            })
            .sum();
        prop_assert_eq!(param_count(&spec) as usize, from_dims);
        prop_assert_eq!(stack.param_count(), from_dims);
    }

    #[test]
    fn checkpoints_round_trip(spec in spec_strategy(), seed in any::<u64>(), epoch in 0u32..100) {
        let stack = LayerStack::new(spec, &mut Rng::new(seed)).unwrap();
        let ckpt = Checkpoint::new(
            stack,
            Some(Normalization::identity(3)),
            CheckpointMeta { seed, epoch, mode: "sdpoint".into() },
        );
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.meta, &ckpt.meta);
        prop_assert_eq!(back.stack.spec(), ckpt.stack.spec());
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

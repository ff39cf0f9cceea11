//! Property tests for contracts that hold over whole input families:
//! filter linearity, concat/slice round trips, grid identities, vote
//! covariance, shuffle partitioning, and tape gradient additivity.

use proptest::prelude::*;

use ferkit::data::{self, shuffle_batches};
use ferkit::filters::{self, NormMode};
use ferkit::tape::Tape;
use ferkit::tensor::Tensor;
use ferkit::zoo::Variant;

fn int_image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0u8..=255, h * w)
        .prop_map(move |v| Tensor::new(vec![h, w], v.into_iter().map(f64::from).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // sobel and laplacian are linear maps; exact on integer inputs at 64-bit
    #[test]
    fn filters_are_linear_on_integer_images(
        f in int_image(7, 9),
        g in int_image(7, 9),
        a in -4i64..=4,
        b in -4i64..=4,
    ) {
        let combo = Tensor::from_fn(&[7, 9], |i| a as f64 * f.at(i) + b as f64 * g.at(i));
        let lap_combo = filters::laplacian(&combo).unwrap();
        let lap_f = filters::laplacian(&f).unwrap();
        let lap_g = filters::laplacian(&g).unwrap();
        for k in 0..lap_combo.numel() {
            prop_assert_eq!(
                lap_combo.data()[k],
                a as f64 * lap_f.data()[k] + b as f64 * lap_g.data()[k]
            );
        }
        let (gx_combo, _) = filters::sobel(&combo).unwrap();
        let (gx_f, _) = filters::sobel(&f).unwrap();
        let (gx_g, _) = filters::sobel(&g).unwrap();
        for k in 0..gx_combo.numel() {
            prop_assert_eq!(
                gx_combo.data()[k],
                a as f64 * gx_f.data()[k] + b as f64 * gx_g.data()[k]
            );
        }
    }

    #[test]
    fn concat_then_channel_slice_recovers_inputs(
        a in int_image(5, 6),
        b in int_image(5, 6),
        c in int_image(5, 6),
    ) {
        let stacked = filters::concat_channels(&[&a, &b, &c]).unwrap();
        prop_assert_eq!(stacked.shape(), &[5, 6, 3]);
        for (ch, src) in [&a, &b, &c].into_iter().enumerate() {
            for i in 0..5 {
                for j in 0..6 {
                    prop_assert_eq!(stacked.at(&[i, j, ch]).to_bits(), src.at(&[i, j]).to_bits());
                }
            }
        }
    }

    #[test]
    fn resize_preserves_constant_images(
        v in 0u8..=255,
        oh in 1usize..=9,
        ow in 1usize..=9,
    ) {
        let img = Tensor::<f64>::from_fn(&[4, 7], |_| f64::from(v));
        let out = filters::resize_bilinear(&img, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[oh, ow]);
        for &p in out.data() {
            prop_assert_eq!(p, f64::from(v));
        }
    }

    #[test]
    fn normalize_stays_in_range_with_exact_endpoints(img in int_image(4, 5)) {
        let unit = filters::normalize(&img, NormMode::Unit);
        let signed = filters::normalize(&img, NormMode::Signed);
        for k in 0..img.numel() {
            let raw = img.data()[k];
            prop_assert!((0.0..=1.0).contains(&unit.data()[k]));
            prop_assert!((-1.0..=1.0).contains(&signed.data()[k]));
            if raw == 0.0 {
                prop_assert_eq!(unit.data()[k], 0.0);
                prop_assert_eq!(signed.data()[k], -1.0);
            }
            if raw == 255.0 {
                prop_assert_eq!(unit.data()[k], 1.0);
                prop_assert_eq!(signed.data()[k], 1.0);
            }
        }
    }

    #[test]
    fn relu6_output_lies_in_band(vals in prop::collection::vec(-20.0f64..20.0, 1..32)) {
        let n = vals.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], vals).unwrap());
        let y = tape.relu6(x).unwrap();
        for &v in tape.value(y).data() {
            prop_assert!((0.0..=6.0).contains(&v));
        }
    }

    // grid(a*t1 + b*t2) == a*grid(t1) + b*grid(t2) - (a+b-1)*grid(0): the map
    // is affine in theta with grid(0) as the offset
    #[test]
    fn affine_grid_is_affine_in_theta(
        t1 in prop::collection::vec(-1.5f64..1.5, 6),
        t2 in prop::collection::vec(-1.5f64..1.5, 6),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let grid_of = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let th = tape.constant(Tensor::new(vec![1, 2, 3], vals).unwrap());
            let g = tape.affine_grid(th, (3, 4), (5, 6)).unwrap();
            tape.value(g).clone()
        };
        let combo: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| a * x + b * y).collect();
        let lhs = grid_of(combo);
        let g1 = grid_of(t1);
        let g2 = grid_of(t2);
        let g0 = grid_of(vec![0.0; 6]);
        for k in 0..lhs.numel() {
            let rhs = a * g1.data()[k] + b * g2.data()[k] - (a + b - 1.0) * g0.data()[k];
            prop_assert!((lhs.data()[k] - rhs).abs() < 1e-9);
        }
    }

    // permuting emotion columns permutes the winner; reject columns stay put.
    // Restricted to unique maxima because ties break toward the lowest index.
    #[test]
    fn majority_vote_is_permutation_covariant(
        mut emotions in prop::collection::vec(0u32..40, 8),
        rejects in prop::collection::vec(0u32..40, 2),
        perm_seed in 0u64..1000,
    ) {
        let top = *emotions.iter().max().unwrap();
        prop_assume!(emotions.iter().filter(|&&v| v == top).count() == 1);

        let mut votes = [0u32; 10];
        votes[..8].copy_from_slice(&emotions);
        votes[8] = rejects[0];
        votes[9] = rejects[1];
        let base = data::majority_vote(&votes);

        // fisher-yates on column indices
        let mut perm: Vec<usize> = (0..8).collect();
        let mut state = perm_seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for i in (1..8).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            perm.swap(i, j);
            emotions.swap(i, j);
        }
        let mut permuted = votes;
        permuted[..8].copy_from_slice(&emotions);
        let moved = data::majority_vote(&permuted);

        match base {
            None => prop_assert_eq!(moved, None),
            Some(i) => {
                let expect = perm.iter().position(|&p| p == i).unwrap();
                prop_assert_eq!(moved, Some(expect));
            }
        }
    }

    #[test]
    fn assembled_channel_counts_match_variant(
        img in int_image(9, 9),
        which in 0usize..5,
    ) {
        let variant = Variant::all()[which];
        let img32 = Tensor::from_fn(&[9, 9], |i| img.at(i) as f32);
        let streams = data::assemble_variant(&img32, variant, (8, 8), NormMode::Unit).unwrap();
        let widths: Vec<usize> = streams.iter().map(|s| s.shape()[2]).collect();
        prop_assert_eq!(widths, variant.stream_channels());
        for s in &streams {
            prop_assert_eq!(&s.shape()[..2], &[8, 8]);
        }
    }

    #[test]
    fn shuffle_batches_partitions_every_index_once(
        n in 1usize..200,
        batch in 1usize..40,
        seed in 0u64..500,
    ) {
        let batches = shuffle_batches(n, batch, seed);
        let mut seen = vec![false; n];
        for b in &batches {
            prop_assert!(b.len() <= batch && !b.is_empty());
            for &i in b {
                prop_assert!(!seen[i], "index {} twice", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
        prop_assert_eq!(shuffle_batches(n, batch, seed), batches);
    }

    #[test]
    fn parse_pixels_round_trips(rows in prop::collection::vec(0u8..=255, 12)) {
        let text = rows.iter().map(u8::to_string).collect::<Vec<_>>().join(" ");
        let img = data::parse_pixels(&text, 3, 4).unwrap();
        for (got, want) in img.data().iter().zip(&rows) {
            prop_assert_eq!(*got, f32::from(*want));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // a tensor consumed by several ops accumulates the sum of branch grads
    #[test]
    fn multi_consumer_gradient_is_branch_sum(
        vals in prop::collection::vec(-2.0f64..2.0, 6),
        w1 in prop::collection::vec(-2.0f64..2.0, 6),
        w2 in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let grad_of = |use_first: bool, use_second: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![6], vals.clone()).unwrap(), true);
            let c1 = tape.constant(Tensor::new(vec![6], w1.clone()).unwrap());
            let c2 = tape.constant(Tensor::new(vec![6], w2.clone()).unwrap());
            let mut parts = Vec::new();
            if use_first {
                let p = tape.mul(x, c1).unwrap();
                parts.push(tape.sum(p, &[], false).unwrap());
            }
            if use_second {
                let p = tape.mul(x, c2).unwrap();
                let e = tape.exp(p).unwrap();
                parts.push(tape.sum(e, &[], false).unwrap());
            }
            let loss = match parts.len() {
                1 => parts[0],
                _ => tape.add(parts[0], parts[1]).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().clone()
        };
        let both = grad_of(true, true);
        let first = grad_of(true, false);
        let second = grad_of(false, true);
        for k in 0..6 {
            let sum = first.data()[k] + second.data()[k];
            prop_assert!((both.data()[k] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }

    // record + backward must not disturb the values stored on the tape
    #[test]
    fn backward_leaves_leaf_buffers_unmodified(
        vals in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 4], vals.clone()).unwrap(), true);
        let y = tape.exp(x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum(z, &[], false).unwrap();
        let _ = tape.backward(loss).unwrap();
        prop_assert_eq!(tape.value(x).data(), &vals[..]);
    }

    // identity theta hits every source pixel exactly (pixel-space grid)
    #[test]
    fn identity_theta_grid_is_the_pixel_lattice(
        h in 2usize..7,
        w in 2usize..7,
    ) {
        let mut tape = Tape::new();
        let theta = tape.constant(
            Tensor::new(vec![1, 2, 3], vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        let grid = tape.affine_grid(theta, (h, w), (h, w)).unwrap();
        let g = tape.value(grid);
        for i in 0..h {
            for j in 0..w {
                prop_assert_eq!(g.at(&[0, i, j, 0]).to_bits(), (j as f64).to_bits());
                prop_assert_eq!(g.at(&[0, i, j, 1]).to_bits(), (i as f64).to_bits());
            }
        }
    }
}

// residual output equals the non-residual branch plus the input, bit-exact,
// because the skip connection is a single elementwise add
#[test]
fn bottleneck_residual_adds_input_exactly() {
    use ferkit::layers::{self, BatchNormState, BottleneckParams, Phase};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut p = BottleneckParams::<f64> {
        expand: layers::he_uniform(&mut rng, &[1, 1, 4, 8], 4),
        bn1: BatchNormState::new(8),
        depthwise: layers::he_uniform(&mut rng, &[3, 3, 8], 9),
        bn2: BatchNormState::new(8),
        project: layers::he_uniform(&mut rng, &[1, 1, 8, 4], 8),
        bn3: BatchNormState::new(4),
        stride: 1,
        residual: true,
    };
    let x = Tensor::<f64>::from_fn(&[1, 6, 6, 4], |i| ((i[1] * 7 + i[2]) % 5) as f64 * 0.3 - 0.6);

    let run = |p: &mut layers::BottleneckParams<f64>| {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let mut binds = Vec::new();
        let out = layers::inverted_bottleneck(&mut tape, xi, p, Phase::Train, false, &mut binds)
            .unwrap();
        tape.value(out).clone()
    };
    let with_res = run(&mut p);
    p.residual = false;
    let branch = run(&mut p);
    for k in 0..with_res.numel() {
        let want = branch.data()[k] + x.data()[k];
        assert_eq!(with_res.data()[k].to_bits(), want.to_bits());
    }
}

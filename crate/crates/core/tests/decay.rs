use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdt_core::decay::*;
use sdt_core::gradcheck::{self, GradCheckConfig};
use sdt_core::reference;
use sdt_core::Tensor;

fn draw_gates(rng: &mut ChaCha8Rng, b: usize, l: usize, n: usize) -> GateField<f64> {
    let f = Tensor::randn(vec![b, l, 1, n], 2.0, rng);
    gates_from_logits(&f).unwrap()
}

prop_compose! {
    fn case()(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8, b in 1usize..=2, n in 1usize..=4, alpha in 0.001f64..=1.0)
        -> (u64, Grid, usize, usize, f64) {
        (seed, Grid::new(h, w).unwrap(), b, n, alpha)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fused_masks_are_bounded_symmetric_and_zero_on_diagonal((seed, grid, b, n, alpha) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=6);
        let x = Tensor::<f64>::randn(vec![b, grid.height(), grid.width(), d], 1.0, &mut rng);
        let w_g = Tensor::<f64>::randn(vec![d, n], 1.5, &mut rng);
        let gates = gates_from_logits(&gate_logits(&x, &w_g).unwrap()).unwrap();
        let m = fused_mask(&gates, grid, alpha).unwrap().bias;
        let l = grid.len();
        prop_assert!(m.data().iter().all(|v| *v <= 0.0));
        for blk in m.data().chunks(l * l) {
            for i in 0..l {
                prop_assert_eq!(blk[i * l + i], 0.0);
                for j in 0..l {
                    prop_assert_eq!(blk[i * l + j].to_bits(), blk[j * l + i].to_bits());
                }
            }
        }
    }

    #[test]
    fn abs_is_redundant_when_gates_are_valid((seed, grid, b, n, alpha) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gates = draw_gates(&mut rng, b, grid.len(), n);
        let fused = fused_mask(&gates, grid, alpha).unwrap().bias;
        let combined = combined_mask(&gates, grid, alpha).unwrap().bias;
        for (f, c) in fused.data().iter().zip(combined.data()) {
            // -|c| and c agree bit for bit, up to the sign of zero
            prop_assert!(f.to_bits() == c.to_bits() || (*f == 0.0 && *c == 0.0));
        }
    }

    #[test]
    fn uniform_gates_decay_monotonically_with_distance((seed, grid, _b, n, alpha) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: f64 = -rng.gen_range(0.01..6.0);
        let gates = GateField::new(Tensor::full(vec![1, grid.len(), n], g)).unwrap();
        let m = fused_mask(&gates, grid, alpha).unwrap().bias;
        let l = grid.len();
        for h in 0..n {
            for i in 0..l {
                for j in 0..l {
                    for k in 0..l {
                        if grid.manhattan(i, j) > grid.manhattan(i, k) {
                            let (mj, mk) = (m.at(&[0, h, i, j]).abs(), m.at(&[0, h, i, k]).abs());
                            prop_assert!(mj >= mk);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn opening_a_gate_never_strengthens_its_decay((seed, grid, b, n, alpha) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::<f64>::randn(vec![b, grid.len(), 1, n], 2.0, &mut rng);
        let (bi, i, hi) = (rng.gen_range(0..b), rng.gen_range(0..grid.len()), rng.gen_range(0..n));
        let mut raised = f.clone();
        let at = [bi, i, 0, hi];
        raised.set(&at, f.at(&at) + rng.gen_range(0.0..5.0));
        let before = fused_mask(&gates_from_logits(&f).unwrap(), grid, alpha).unwrap().bias;
        let after = fused_mask(&gates_from_logits(&raised).unwrap(), grid, alpha).unwrap().bias;
        for j in 0..grid.len() {
            if j != i {
                let idx = [bi, hi, i, j];
                prop_assert!(after.at(&idx).abs() <= before.at(&idx).abs());
            }
        }
    }

    #[test]
    fn every_mask_variant_matches_the_oracle((seed, grid, b, n, alpha) in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, l) = (grid.height(), grid.width(), grid.len());
        let gates = draw_gates(&mut rng, b, l, n);
        let g = gates.values();
        let close = |a: &Tensor<f64>, o: &Tensor<f64>| a.shape() == o.shape() && a.max_abs_diff(o) <= 1e-15;

        prop_assert!(close(&fused_mask(&gates, grid, alpha).unwrap().bias, &reference::oracle_fused_mask(g, h, w, alpha)));
        let lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let fixed = fixed_spatial_mask(grid, &Tensor::new(vec![n], lambdas.clone()).unwrap()).unwrap().bias;
        prop_assert!(close(&fixed, &reference::oracle_fixed_mask(h, w, &lambdas)));
        prop_assert!(close(&mask_1d(g, Direction::Forward).unwrap().bias, &reference::oracle_mask_1d(g, false)));
        prop_assert!(close(&mask_1d(g, Direction::Bidirectional).unwrap().bias, &reference::oracle_mask_1d(g, true)));

        let d = rng.gen_range(1..=5);
        let x = Tensor::<f64>::randn(vec![b, h, w, d], 1.0, &mut rng);
        let (w_gh, w_gw) = (Tensor::randn(vec![d, n], 1.0, &mut rng), Tensor::randn(vec![d, n], 1.0, &mut rng));
        let masks = decomposed_masks(&x, &w_gh, &w_gw).unwrap();
        let (oh, ow) = reference::oracle_axis_masks(&reference::oracle_gates(&x, &w_gh), &reference::oracle_gates(&x, &w_gw), h, w);
        prop_assert!(close(&masks.height, &oh));
        prop_assert!(close(&masks.width, &ow));
        prop_assert!(masks.height.data().iter().chain(masks.width.data()).all(|v| *v <= 0.0));
    }
}

#[test]
fn gate_logits_match_the_oracle_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(vec![1, 2, 2, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
    let g = gates_from_logits(&gate_logits(&x, &w).unwrap()).unwrap();
    assert!(g.values().max_abs_diff(&reference::oracle_gates(&x, &w)) < 1e-15);
}

#[test]
fn manhattan_matrix_matches_brute_force() {
    let grid = Grid::new(3, 4).unwrap();
    let m = manhattan_matrix::<f64>(grid);
    for i in 0..12 {
        for j in 0..12 {
            let (a, b) = ((i / 4) as i64, (i % 4) as i64);
            let (c, d) = ((j / 4) as i64, (j % 4) as i64);
            assert_eq!(m.at(&[i, j]), ((a - c).abs() + (b - d).abs()) as f64);
        }
    }
}

#[test]
fn fused_mask_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = Grid::new(3, 3).unwrap();
    let inputs = vec![
        ("x".to_string(), Tensor::randn(vec![2, 3, 3, 4], 1.0, &mut rng)),
        ("w_g".to_string(), Tensor::randn(vec![4, 2], 1.0, &mut rng)),
    ];
    let reports = gradcheck::check(
        &inputs,
        |g, v| {
            let f = g.matmul(v[0], v[1])?;
            let f = g.reshape(f, &[2, 9, 2])?;
            let gates = g.log_sigmoid(f)?;
            let m = fused_mask_on(g, gates, grid, 0.4)?;
            g.sum(m)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(gradcheck::worst(&reports) < 1e-4, "{reports:?}");
}

#[test]
fn footprints_follow_the_closed_forms() {
    let g8 = Grid::new(8, 8).unwrap();
    assert_eq!(mask_memory_footprint(MaskLayout::Full, g8, 1), 4096);
    assert_eq!(mask_memory_footprint(MaskLayout::Decomposed, g8, 1), 1024);
    let line = Grid::new(1, 9).unwrap();
    assert_eq!(mask_memory_footprint(MaskLayout::Decomposed, line, 1), 81 + 9);
    let g32 = Grid::new(32, 32).unwrap();
    let ratio = mask_memory_footprint(MaskLayout::Full, g32, 4) / mask_memory_footprint(MaskLayout::Decomposed, g32, 4);
    assert!(ratio >= 32 * 32 / 64);
}

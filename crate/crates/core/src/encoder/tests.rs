use super::*;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

fn small() -> EncoderModel {
    EncoderModel::new(EncoderConfig::with_depths(&[2, 2, 2, 2], 4, 4, 8), 11).unwrap()
}

fn random_grid(rows: usize, cols: usize, d: usize, seed: u64) -> TokenGrid {
    let mut rng = Rng::new(seed);
    TokenGrid::new(rows, cols, Matrix::uniform(rows * cols, d, 1.0, &mut rng)).unwrap()
}

fn random_probs(n: usize, seed: u64) -> ProbabilityMap {
    let mut rng = Rng::new(seed);
    ProbabilityMap::new((0..n).map(|_| rng.next_f64()).collect()).unwrap()
}

/// Content only in the top-left quadrant, so whole windows are empty.
fn quadrant_probs(rows: usize, cols: usize) -> ProbabilityMap {
    ProbabilityMap::from_mask(
        &(0..rows * cols)
            .map(|i| i / cols < rows / 2 && i % cols < cols / 2)
            .collect::<Vec<_>>(),
    )
}

#[test]
fn window_slots_cover_grid_once() {
    for (rows, cols, w, shifted) in [
        (8, 8, 4, false),
        (8, 8, 4, true),
        (10, 7, 4, true),
        (3, 3, 8, true),
    ] {
        let g = WindowGeometry::new(rows, cols, w, shifted);
        let mut seen = vec![0; rows * cols];
        let mut pads = 0;
        for win in 0..g.window_count() {
            for s in g.window_slots(win) {
                match s {
                    Some(i) => seen[i] += 1,
                    None => pads += 1,
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(pads, g.padded_rows * g.padded_cols - rows * cols);
    }
}

#[test]
fn small_grid_is_one_unshifted_window() {
    let g = WindowGeometry::new(2, 2, 8, true);
    assert_eq!((g.window, g.shift, g.window_count()), (2, 0, 1));
}

#[test]
fn shifted_window_groups_neighbours_across_boundary() {
    let g = WindowGeometry::new(8, 8, 4, true);
    assert_eq!(g.shift, 2);
    // First window of a shifted pass starts at (2, 2).
    let slots = g.window_slots(0);
    assert_eq!(slots[0], Some(2 * 8 + 2));
    assert_eq!(slots[15], Some(5 * 8 + 5));
}

#[test]
fn bypass_is_exact() {
    let m = small();
    let grid = random_grid(16, 16, 8, 1);
    let p = quadrant_probs(16, 16);
    let sched = ThresholdSchedule::uniform(4, 0.5, 0.5);
    let on = m
        .encode(&grid, &p, &sched, EncodeOptions::default())
        .unwrap();
    let off = m
        .encode(
            &grid,
            &p,
            &sched,
            EncodeOptions {
                bypass: false,
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(on.grid.tokens.data(), off.grid.tokens.data());
    assert_eq!(on.kept, off.kept);
    assert!(on.trace.total_flops() < off.trace.total_flops());
    assert!(on.trace.stages[0].windows.bypassed > 0);
}

#[test]
fn inactive_tokens_pass_through_unchanged() {
    let m = small();
    let grid = random_grid(16, 16, 8, 2);
    let p = random_probs(256, 3);
    let gates = binarize(&p, 0.5);
    let (out, _) = window_pass(
        &grid,
        gates.values(),
        &m.stages[0].blocks,
        4,
        EncodeOptions::default(),
    )
    .unwrap();
    for i in 0..256 {
        if gates.values()[i] == 0.0 {
            assert_eq!(out.row(i), grid.tokens.row(i));
        } else {
            assert_ne!(out.row(i), grid.tokens.row(i));
        }
    }
}

#[test]
fn zero_thresholds_match_reference() {
    let m = small();
    let grid = random_grid(16, 16, 8, 4);
    let p = random_probs(256, 5);
    let out = m
        .encode(
            &grid,
            &p,
            &ThresholdSchedule::zero(4),
            EncodeOptions::default(),
        )
        .unwrap();
    let reference = m.forward_reference(&grid).unwrap();
    assert_eq!(out.kept.len(), 4);
    assert!(out.grid.tokens.max_rel_diff(&reference) <= 1e-9);
}

#[test]
fn compute_never_grows_with_threshold() {
    let m = small();
    let grid = random_grid(16, 16, 8, 6);
    let p = random_probs(256, 7);
    let mut last = u64::MAX;
    for eps in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let out = m
            .encode(
                &grid,
                &p,
                &ThresholdSchedule::uniform(4, eps, 0.5),
                EncodeOptions::default(),
            )
            .unwrap();
        let f = out.trace.total_flops();
        assert!(f <= last, "eps {eps}: {f} > {last}");
        last = f;
    }
}

#[test]
fn probabilities_propagate_by_max_of_raw_values() {
    let p = ProbabilityMap::new(vec![
        0.1, 0.2, 0.0, 0.0, //
        0.3, 0.4, 0.0, 0.9, //
        0.0, 0.0, 0.5, 0.5, //
        0.0, 0.0, 0.5, 0.5,
    ])
    .unwrap();
    let merged = merge_probs(&p, 4, 4).unwrap();
    assert_eq!(merged.values(), &[0.4, 0.9, 0.0, 0.5]);
    assert!(!merged.is_binarized());

    // Stage 2 binarizes the raw max, not the stage-1 binarized value.
    let m = small();
    let mut rng = Rng::new(0);
    let p = ProbabilityMap::new((0..256).map(|_| 0.3 * rng.next_f64()).collect()).unwrap();
    let sched = ThresholdSchedule {
        eps_c: vec![0.25, 0.25, 0.25, 0.25],
        eps_i: 0.5,
    };
    let out = m
        .encode(
            &random_grid(16, 16, 8, 1),
            &p,
            &sched,
            EncodeOptions::default(),
        )
        .unwrap();
    let s2 = &out.trace.stages[1];
    assert_eq!(s2.entry_probs, merge_probs(&p, 16, 16).unwrap());
    assert_eq!(s2.gates, binarize(&s2.entry_probs, 0.25));
}

#[test]
fn merge_concatenation_order() {
    // Token value at (r, c) is 10r + c; with an identity-like weight the
    // merged token is the concatenation itself.
    let d = 1;
    let tokens = Matrix::from_vec(4, 1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
    let grid = TokenGrid::new(2, 2, tokens).unwrap();
    let mut w = Matrix::zeros(4 * d, 2 * d);
    w.set(0, 0, 1.0);
    w.set(1, 0, 100.0);
    w.set(2, 1, 1.0);
    w.set(3, 1, 100.0);
    let (m, p) =
        merge_patches(&grid, &ProbabilityMap::ones(4), &w, &mut FlopCounter::new()).unwrap();
    // children (0,0)=0, (1,0)=10, (0,1)=1, (1,1)=11
    assert_eq!(m.tokens.row(0), &[0.0 + 1000.0, 1.0 + 1100.0]);
    assert_eq!((m.rows, m.cols, m.dim()), (1, 1, 2));
    assert_eq!(p.values(), &[1.0]);
}

#[test]
fn odd_grid_rejected() {
    let grid = random_grid(3, 4, 2, 0);
    let w = Matrix::zeros(8, 4);
    let err = merge_patches(
        &grid,
        &ProbabilityMap::ones(12),
        &w,
        &mut FlopCounter::new(),
    );
    assert!(matches!(err, Err(Error::OddGrid { rows: 3, cols: 4 })));
}

#[test]
fn flop_bookkeeping() {
    let m = small();
    let grid = random_grid(16, 16, 8, 8);
    let p = random_probs(256, 9);
    let sched = ThresholdSchedule::uniform(4, 0.5, 0.5);
    for bypass in [true, false] {
        let out = m
            .encode(
                &grid,
                &p,
                &sched,
                EncodeOptions {
                    bypass,
                    ..Default::default()
                },
            )
            .unwrap();
        for (rec, cfg) in out.trace.stages.iter().zip(&m.config.stages) {
            let w = WindowGeometry::new(rec.rows, rec.cols, cfg.window, false);
            let n = w.window * w.window;
            let ws = rec.windows;
            assert_eq!(ws.computed + ws.bypassed, ws.total);
            assert_eq!(
                ws.attention_flops,
                ws.computed as u64 * window_attention_flops(n, rec.dim)
            );
            let ffn_rows = if bypass {
                rec.active * cfg.depth
            } else {
                ws.computed * n
            };
            assert_eq!(ws.ffn_flops, ffn_flops(ffn_rows, rec.dim, 4 * rec.dim));
            if !bypass {
                assert_eq!(ws.bypassed, 0);
            }
        }
    }
}

#[test]
fn soft_gate_blends() {
    let h = 3.0;
    assert_eq!(gate(0.5, 2.0 * h, h, GatingMode::Soft), 1.5 * h);
    assert_eq!(gate(0.0, 2.0 * h, h, GatingMode::Hard), h);
    assert_eq!(gate(1.0, 2.0 * h, h, GatingMode::Hard), 2.0 * h);
}

#[test]
fn soft_gating_runs_and_respects_threshold() {
    let m = small();
    let p = random_probs(256, 10);
    let g = stage_gates(&p, 0.4, GatingMode::Soft);
    for (&raw, &v) in p.values().iter().zip(g.values()) {
        assert_eq!(v, if raw >= 0.4 { raw } else { 0.0 });
    }
    let sched = ThresholdSchedule::uniform(4, 0.4, 0.5);
    let opts = EncodeOptions {
        gating: GatingMode::Soft,
        bypass: true,
    };
    let a = m
        .encode(&random_grid(16, 16, 8, 3), &p, &sched, opts)
        .unwrap();
    let b = m
        .encode(
            &random_grid(16, 16, 8, 3),
            &p,
            &sched,
            EncodeOptions {
                bypass: false,
                ..opts
            },
        )
        .unwrap();
    assert_eq!(a.grid.tokens.data(), b.grid.tokens.data());
}

#[test]
fn profile_geometry() {
    let desk = EncoderConfig::desk();
    assert_eq!(desk.stage_grids(256).unwrap(), vec![64, 32, 16, 8]);
    assert_eq!(desk.stage_dims(), vec![32, 64, 128, 256]);
    let large = EncoderConfig::paper_scale();
    assert_eq!(large.stage_grids(1536).unwrap(), vec![384, 192, 96, 48]);
    assert_eq!(
        large.stages.iter().map(|s| s.depth).collect::<Vec<_>>(),
        vec![2, 2, 18, 2]
    );
    assert!(matches!(
        desk.stage_grids(250),
        Err(Error::Indivisible { .. })
    ));
}

#[test]
fn kept_positions_follow_final_gate() {
    let m = small();
    let p = quadrant_probs(16, 16);
    let out = m
        .encode(
            &random_grid(16, 16, 8, 2),
            &p,
            &ThresholdSchedule::default(),
            EncodeOptions::default(),
        )
        .unwrap();
    // 2×2 final grid, only the top-left position carries content.
    assert_eq!(out.kept, vec![0]);
    assert_eq!(out.tokens.rows(), 1);
    assert_eq!(out.tokens.row(0), out.grid.tokens.row(0));
    assert_eq!(out.tokens.cols(), m.output_dim());
}

#[test]
fn schedule_length_must_match() {
    let m = small();
    let err = m.encode(
        &random_grid(16, 16, 8, 0),
        &ProbabilityMap::ones(256),
        &ThresholdSchedule::zero(3),
        EncodeOptions::default(),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(proptest::test_runner::Config::with_cases(16))]

    #[test]
    fn window_order_does_not_matter(seed in 0u64..10_000) {
        let m = small();
        let grid = random_grid(16, 16, 8, seed);
        let gates = binarize(&random_probs(256, seed + 1), 0.5);
        let geom = WindowGeometry::new(16, 16, 4, seed % 2 == 0);
        let block = &m.stages[0].blocks[0];
        let mut order: Vec<usize> = (0..geom.window_count()).collect();
        Rng::new(seed).shuffle(&mut order);
        let opts = EncodeOptions::default();
        let (a, sa) = gated_block(&grid.tokens, &geom, gates.values(), block, opts).unwrap();
        let (b, sb) = gated_block_ordered(&grid.tokens, &geom, gates.values(), block, opts, &order).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn bypass_exact_for_random_masks(seed in 0u64..10_000, density in 0.0f64..0.3) {
        let m = small();
        let grid = random_grid(16, 16, 8, seed);
        let mut rng = Rng::new(seed ^ 0xabc);
        let mask: Vec<bool> = (0..256).map(|_| rng.next_f64() < density).collect();
        let p = ProbabilityMap::from_mask(&mask);
        let sched = ThresholdSchedule::default();
        let a = m.encode(&grid, &p, &sched, EncodeOptions::default()).unwrap();
        let b = m.encode(&grid, &p, &sched, EncodeOptions { bypass: false, ..Default::default() }).unwrap();
        prop_assert_eq!(a.grid.tokens.data(), b.grid.tokens.data());
        prop_assert!(a.trace.total_flops() <= b.trace.total_flops());
    }
}

#[test]
fn block_backward_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let block = BlockWeights::new(6, 2, &mut rng);
    let x = Matrix::uniform(5, 6, 1.0, &mut rng);
    let c = Matrix::uniform(5, 6, 1.0, &mut rng);
    let (z, cache) = block.forward_cached(&x).unwrap();
    let fc = &mut FlopCounter::disabled();
    let plain = block
        .ffn_sublayer(&block.attention_sublayer(&x, fc).unwrap(), fc)
        .unwrap();
    assert_eq!(z, plain);
    let (dx, dp) = block.backward(&cache, &c).unwrap();
    let loss = |b: &BlockWeights, x: &Matrix| {
        let (z, _) = b.forward_cached(x).unwrap();
        z.data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let h = 1e-6;
    let base = block.flat_params();
    assert_eq!(dp.len(), base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        let mut b = block.clone();
        p[i] += h;
        b.set_flat_params(&p).unwrap();
        let up = loss(&b, &x);
        p[i] -= 2.0 * h;
        b.set_flat_params(&p).unwrap();
        let down = loss(&b, &x);
        let num = (up - down) / (2.0 * h);
        assert!(
            (num - dp[i]).abs() < 1e-6 * num.abs().max(1.0),
            "param {i}: {num} vs {}",
            dp[i]
        );
    }
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = loss(&block, &xp);
        xp.data_mut()[i] -= 2.0 * h;
        let down = loss(&block, &xp);
        let num = (up - down) / (2.0 * h);
        assert!((num - dx.data()[i]).abs() < 1e-6 * num.abs().max(1.0));
    }
}

use proptest::prelude::*;
use regnet::data::{sample_smooth_field, FieldFamily};
use regnet::losses::*;
use regnet::netcore::{probe_weights, Tape, Tensor};
use regnet::volume::{gradient_magnitude, DisplacementField3, Volume3};
use regnet::Error;

fn random_field(n: usize, seed: u64, scale: f64) -> DisplacementField3 {
    let w: Tensor<f64> = probe_weights([1, 3, n, n, n], seed);
    let k = scale * ((3 * n * n * n) as f64).sqrt();
    DisplacementField3::new([n; 3], w.data().iter().map(|v| v * k).collect()).unwrap()
}

fn smooth_volume(n: usize, phase: f64) -> Volume3 {
    Volume3::from_fn([n; 3], |x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        0.5 + 0.2 * (0.21 * x + phase).sin() * (0.17 * y).cos() + 0.15 * (0.13 * z + 0.05 * x - phase).sin()
    })
    .unwrap()
}

/// Clamp-to-edge trilinear interpolation, written out independently of the library.
fn trilinear_oracle(v: &Volume3, p: [f64; 3]) -> f64 {
    let d = v.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, (d[a] - 1) as f64);
        let f = c.floor().min((d[a] - 2) as f64);
        base[a] = f as usize;
        frac[a] = c - f;
    }
    let mut s = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
        s += w * v.get(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
    }
    s
}

fn loss_m_oracle(pred: &DisplacementField3, s: &Volume3, t: &Volume3) -> f64 {
    let n = pred.dims()[0];
    let o = (s.dims()[0] - n) / 2;
    let mut acc = 0.0;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let d = pred.vector(i, j, k);
                let u = [i + o, j + o, k + o];
                let sv = trilinear_oracle(s, [u[0] as f64 + d[0], u[1] as f64 + d[1], u[2] as f64 + d[2]]);
                acc += (sv - t.get(u[0], u[1], u[2])).powi(2);
            }
        }
    }
    acc / (n * n * n) as f64
}

#[test]
fn level_patches_follow_the_index_mapping() {
    let phi = random_field(64, 1, 1.0);
    let g = extract_gt_level_patches(&phi).unwrap();
    assert_eq!(g.high.vector(0, 0, 0), phi.vector(20, 20, 20));
    assert_eq!(g.mid.vector(13, 13, 13), phi.vector(44, 44, 44).map(|v| v / 2.0));
    assert_eq!(g.low.vector(8, 8, 8), phi.vector(46, 46, 46).map(|v| v / 4.0));
    for k in 0..24 {
        for j in 0..24 {
            for i in 0..24 {
                assert_eq!(g.high.vector(i, j, k), phi.vector(i + 20, j + 20, k + 20));
            }
        }
    }
    for k in 0..14 {
        for j in 0..14 {
            for i in 0..14 {
                assert_eq!(g.mid.vector(i, j, k), phi.vector(2 * i + 18, 2 * j + 18, 2 * k + 18).map(|v| v / 2.0));
            }
        }
    }
    for k in 0..9 {
        for j in 0..9 {
            for i in 0..9 {
                assert_eq!(g.low.vector(i, j, k), phi.vector(4 * i + 14, 4 * j + 14, 4 * k + 14).map(|v| v / 4.0));
            }
        }
    }
}

#[test]
fn constant_field_levels_scale_by_resolution() {
    let c = [1.2, -0.8, 3.0];
    let g = extract_gt_level_patches(&DisplacementField3::constant([64; 3], c)).unwrap();
    for (f, s) in [(&g.high, 1.0), (&g.mid, 2.0), (&g.low, 4.0)] {
        for i in 0..f.voxel_count() {
            assert_eq!(f.vector_at(i), c.map(|v| v / s));
        }
    }
    assert!(extract_gt_level_patches(&DisplacementField3::zeros([63; 3])).is_err());
    assert!(extract_gt_level_patches(&DisplacementField3::zeros([64, 64, 68])).is_err());
}

#[test]
fn low_level_upsampled_approximates_high_on_smooth_fields() {
    for (seed, family) in [(0, FieldFamily::A), (1, FieldFamily::B), (2, FieldFamily::A)] {
        let big = sample_smooth_field([96; 3], 3.0, 4.0, family, seed).unwrap();
        let phi = regnet::volume::ExtractPatch::extract_patch(&big, [16; 3], [64; 3]).unwrap();
        let g = extract_gt_level_patches(&phi).unwrap();
        let low = |c: usize| Volume3::new([9; 3], g.low.component(c).to_vec()).unwrap();
        let lows = [low(0), low(1), low(2)];
        let mut worst = 0.0f64;
        for k in 0..24 {
            for j in 0..24 {
                for i in 0..24 {
                    // input coordinate 20 + i sits at low index (6 + i) / 4
                    let p = [i, j, k].map(|v| (6 + v) as f64 / 4.0);
                    let h = g.high.vector(i, j, k);
                    for c in 0..3 {
                        worst = worst.max((4.0 * trilinear_oracle(&lows[c], p) - h[c]).abs());
                    }
                }
            }
        }
        assert!(worst < 0.5, "seed {seed}: {worst}");
    }
}

fn tensor(f: &DisplacementField3) -> Tensor<f64> {
    field_to_tensor(f)
}

#[test]
fn displacement_losses_examples_and_oracle() {
    let plan = regnet::model::plan_sizes(64).unwrap();
    let gt = extract_gt_for_plan(&random_field(64, 3, 2.0), &plan).unwrap();
    let gts = (tensor(&gt.high), tensor(&gt.mid), tensor(&gt.low));
    let eval = |pred: (&DisplacementField3, &DisplacementField3, &DisplacementField3)| {
        let mut t = Tape::<f64>::new();
        let p = (t.param(tensor(pred.0)), t.param(tensor(pred.1)), t.param(tensor(pred.2)));
        let l = loss_phi_levels(&mut t, (p.0, Some(p.1), Some(p.2)), (&gts.0, Some(&gts.1), Some(&gts.2))).unwrap();
        let total = loss_phi_total(&mut t, &l).unwrap();
        let v = |x| t.value(x).item();
        ((v(l.high), v(l.mid.unwrap()), v(l.low.unwrap())), v(total))
    };
    let (levels, total) = eval((&gt.high, &gt.mid, &gt.low));
    assert_eq!(levels, (0.0, 0.0, 0.0));
    assert_eq!(total, 0.0);
    let shift = |f: &DisplacementField3| f.add(&DisplacementField3::constant(f.dims(), [1.0, -1.0, 1.0])).unwrap();
    let (levels, total) = eval((&shift(&gt.high), &shift(&gt.mid), &shift(&gt.low)));
    for v in [levels.0, levels.1, levels.2] {
        assert!((v - 1.0).abs() < 1e-12);
    }
    assert!((total - 3.0).abs() < 1e-12);
    let preds = (random_field(24, 4, 1.0), random_field(14, 5, 1.0), random_field(9, 6, 1.0));
    let (levels, total) = eval((&preds.0, &preds.1, &preds.2));
    let oracle = |a: &DisplacementField3, b: &DisplacementField3| {
        let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
        s / (3 * a.voxel_count()) as f64
    };
    let expect = (oracle(&preds.0, &gt.high), oracle(&preds.1, &gt.mid), oracle(&preds.2, &gt.low));
    assert!((levels.0 - expect.0).abs() < 1e-12 && (levels.1 - expect.1).abs() < 1e-12);
    assert!((levels.2 - expect.2).abs() < 1e-12);
    assert!((total - (expect.0 + expect.1 + expect.2)).abs() < 1e-12);
    assert!((field_mse(&preds.0, &gt.high).unwrap() - expect.0).abs() < 1e-12);
}

#[test]
fn single_level_total_is_the_high_loss() {
    let gt = random_field(24, 1, 1.0);
    let pred = random_field(24, 2, 1.0);
    let mut t = Tape::<f64>::new();
    let p = t.param(tensor(&pred));
    let l = loss_phi_levels(&mut t, (p, None, None), (&tensor(&gt), None, None)).unwrap();
    let total = loss_phi_total(&mut t, &l).unwrap();
    assert_eq!(t.value(total).item(), t.value(l.high).item());
    let mut t = Tape::<f64>::new();
    let p = t.param(tensor(&pred));
    let m = t.param(tensor(&random_field(14, 3, 1.0)));
    let err = loss_phi_levels(&mut t, (p, Some(m), None), (&tensor(&gt), None, None)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn similarity_trivial_cases() {
    let s = smooth_volume(64, 0.3);
    assert_eq!(loss_m(&DisplacementField3::zeros([24; 3]), &s, &s, false).unwrap(), 0.0);
    assert_eq!(loss_m(&DisplacementField3::zeros([24; 3]), &s, &s, true).unwrap(), 0.0);
    let ramp = Volume3::from_fn([64; 3], |x, _, _| x as f64).unwrap();
    let v = loss_m(&DisplacementField3::constant([24; 3], [1.0, 0.0, 0.0]), &ramp, &ramp, false).unwrap();
    assert!((v - 1.0).abs() < 1e-12);
    assert!(matches!(loss_m(&DisplacementField3::zeros([25; 3]), &s, &s, false), Err(Error::Shape(_))));
    assert!(loss_m(&DisplacementField3::zeros([24; 3]), &s, &Volume3::zeros([60; 3]), false).is_err());
}

#[test]
fn similarity_matches_direct_warp_oracle() {
    let (s, t) = (smooth_volume(64, 0.0), smooth_volume(64, 0.9));
    let pred = random_field(24, 7, 1.5);
    let v = loss_m(&pred, &s, &t, false).unwrap();
    let want = loss_m_oracle(&pred, &s, &t);
    assert!((v - want).abs() < 1e-12 * want.max(1.0), "{v} vs {want}");
    let (gs, gt) = (gradient_magnitude(&s).unwrap(), gradient_magnitude(&t).unwrap());
    let v2 = loss_m(&pred, &s, &t, true).unwrap();
    let want2 = 0.5 * want + 0.5 * loss_m_oracle(&pred, &gs, &gt);
    assert!((v2 - want2).abs() < 1e-12 * want2.max(1.0));
}

#[test]
fn constant_subject_has_zero_gradient_under_both_schemes() {
    let s = Volume3::filled([64; 3], 0.4);
    let t = smooth_volume(64, 0.2);
    let pred = random_field(24, 2, 1.0);
    for use_grad in [false, true] {
        let patch = SimilarityPatch::new(s.clone(), t.clone(), use_grad).unwrap();
        for scheme in [SimilarityScheme::Analytic, SimilarityScheme::VoxelShift] {
            let (_, g) = loss_m_gradient(scheme, &pred, &patch).unwrap();
            assert!(g.as_slice().iter().all(|&v| v == 0.0), "{scheme:?}");
        }
    }
    let same = SimilarityPatch::new(t.clone(), t.clone(), true).unwrap();
    let (v, g) = loss_m_gradient(SimilarityScheme::Analytic, &DisplacementField3::zeros([24; 3]), &same).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let (s, t) = (smooth_volume(64, 0.4), smooth_volume(64, 1.1));
    // displacements kept away from integer offsets so no probe crosses a cell boundary
    let pred = DisplacementField3::from_fn([24; 3], |x, y, z| {
        let f = |a: usize, b: f64| 0.25 + 0.5 * (((a * 7 + 3) % 10) as f64 / 10.0) * b;
        [f(x + y, 1.0) + 1.0, -f(y + z, 0.9), f(z + 2 * x, 0.8)]
    })
    .unwrap();
    for use_grad in [false, true] {
        let patch = SimilarityPatch::new(s.clone(), t.clone(), use_grad).unwrap();
        let (v0, g) = loss_m_gradient(SimilarityScheme::Analytic, &pred, &patch).unwrap();
        assert_eq!(v0, loss_m(&pred, &s, &t, use_grad).unwrap());
        // the per-voxel term is quadratic inside a cell, so a wide step adds no truncation error
        let h = 1e-3;
        let mut worst = 0.0f64;
        for (i, c) in [(0usize, 0usize), (1000, 1), (5000, 2), (13823, 0), (7777, 1), (4321, 2)] {
            let bump = |delta: f64| {
                let mut data = pred.as_slice().to_vec();
                data[c * 13824 + i] += delta;
                let p = DisplacementField3::new([24; 3], data).unwrap();
                loss_m(&p, &s, &t, use_grad).unwrap()
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let a = g.as_slice()[c * 13824 + i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-12));
        }
        assert!(worst < 1e-6, "use_grad {use_grad}: {worst}");
    }
}

#[test]
fn voxel_shift_is_the_one_voxel_absolute_difference() {
    let (s, t) = (smooth_volume(64, 0.1), smooth_volume(64, 0.7));
    let pred = random_field(24, 9, 1.0);
    let raw = voxel_shift_raw(&pred, &s, &t).unwrap();
    for (i, j, k) in [(0, 0, 0), (5, 17, 3), (23, 23, 23)] {
        let d = pred.vector(i, j, k);
        let u = [i + 20, j + 20, k + 20].map(|v| v as f64);
        let tv = t.get(i + 20, j + 20, k + 20);
        let e0 = (trilinear_oracle(&s, [u[0] + d[0], u[1] + d[1], u[2] + d[2]]) - tv).abs();
        for a in 0..3 {
            let mut p = [u[0] + d[0], u[1] + d[1], u[2] + d[2]];
            p[a] += 1.0;
            let want = (trilinear_oracle(&s, p) - tv).abs() - e0;
            assert!((raw.vector(i, j, k)[a] - want).abs() < 1e-12);
        }
    }
    let patch = SimilarityPatch::new(s.clone(), t.clone(), false).unwrap();
    let (v, g) = loss_m_gradient(SimilarityScheme::VoxelShift, &pred, &patch).unwrap();
    assert_eq!(v, loss_m(&pred, &s, &t, false).unwrap());
    for (gi, ri) in g.as_slice().iter().zip(raw.as_slice()) {
        assert!((gi - ri / 13824.0).abs() < 1e-15);
    }
    assert_eq!(SimilarityScheme::parse("voxel_shift").unwrap(), SimilarityScheme::VoxelShift);
    assert!(SimilarityScheme::parse("other").is_err());
}

#[test]
fn batch_similarity_is_the_item_mean() {
    let patches: Vec<_> = (0..2)
        .map(|b| SimilarityPatch::new(smooth_volume(64, b as f64), smooth_volume(64, 0.5), true).unwrap())
        .collect();
    let preds = [random_field(24, 1, 1.0), random_field(24, 2, 1.0)];
    let mut data = preds[0].as_slice().to_vec();
    data.extend_from_slice(preds[1].as_slice());
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new([2, 3, 24, 24, 24], data).unwrap());
    let (l, values) = loss_m_batch(&mut t, x, &patches, SimilarityScheme::Analytic).unwrap();
    let items: Vec<_> = (0..2).map(|b| loss_m_gradient(SimilarityScheme::Analytic, &preds[b], &patches[b]).unwrap()).collect();
    assert_eq!(values, vec![items[0].0, items[1].0]);
    assert!((t.value(l).item() - 0.5 * (items[0].0 + items[1].0)).abs() < 1e-15);
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap();
    for b in 0..2 {
        let want = items[b].1.as_slice();
        let got = &g.data()[b * want.len()..(b + 1) * want.len()];
        assert!(got.iter().zip(want).all(|(a, w)| (a - w / 2.0).abs() < 1e-15));
    }
    assert!(loss_m_batch(&mut t, x, &patches[..1], SimilarityScheme::Analytic).is_err());
}

#[test]
fn schedule_weights_by_epoch() {
    let s = LossSchedule::default();
    assert_eq!(s.weights(1), StageWeights { alpha: 0.8, beta: 0.2 });
    assert_eq!(s.weights(5), StageWeights { alpha: 0.8, beta: 0.2 });
    assert_eq!(s.weights(6), StageWeights { alpha: 0.5, beta: 0.5 });
    assert_eq!((s.stage(5), s.stage(6)), (1, 2));
    let wos = LossSchedule::default().without_similarity();
    for e in [1, 6, 10] {
        assert_eq!(wos.weights(e), StageWeights { alpha: 1.0, beta: 0.0 });
    }
    assert!(StageWeights::new(0.7, 0.2).is_err());
    assert!(StageWeights::new(1.2, -0.2).is_err());
    assert!(StageWeights::new(0.3, 0.7).is_ok());
}

#[test]
fn combination_requires_observations_and_uses_constants() {
    let mut s = LossSchedule::default();
    assert!(matches!(s.combine_values(1.0, 1.0, 1), Err(Error::NotInitialized(_))));
    s.normalizer.observe(2.0, 0.5);
    s.normalizer.observe(4.0, 1.5);
    assert_eq!(s.normalizer.constants().unwrap(), (3.0, 1.0));
    let v = s.combine_values(3.0, 2.0, 1).unwrap();
    assert!((v - (0.8 * 1.0 + 0.2 * 2.0)).abs() < 1e-12);
    let mut t = Tape::<f64>::new();
    let a = t.param(Tensor::scalar(3.0));
    let b = t.param(Tensor::scalar(2.0));
    let c = s.combine(&mut t, a, b, 7).unwrap();
    assert!((t.value(c).item() - (0.5 + 1.0)).abs() < 1e-12);
    let wos = s.clone().without_similarity();
    assert!((wos.combine_values(3.0, 1e9, 2).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn normalizer_freezes_after_warmup_and_floors() {
    let mut n = Normalizer::new(3);
    for v in [1.0, 2.0, 3.0, 100.0, 200.0] {
        n.observe(v, 0.0);
    }
    assert!(n.frozen());
    let (cp, cm) = n.constants().unwrap();
    assert_eq!(cp, 2.0);
    assert_eq!(cm, 1e-12);
    assert_eq!(NORMALIZER_WARMUP, 50);
}

proptest! {
    #[test]
    fn combination_is_invariant_to_common_rescaling(
        phis in prop::collection::vec(0.01f64..10.0, 1..60),
        ms in prop::collection::vec(0.01f64..10.0, 60),
        k in 0.001f64..1000.0,
        epoch in 1usize..12,
    ) {
        let mut a = LossSchedule::default();
        let mut b = LossSchedule::default();
        for (p, m) in phis.iter().zip(&ms) {
            a.normalizer.observe(*p, *m);
            b.normalizer.observe(k * p, k * m);
        }
        let va = a.combine_values(phis[0], ms[0], epoch).unwrap();
        let vb = b.combine_values(k * phis[0], k * ms[0], epoch).unwrap();
        prop_assert!((va - vb).abs() <= 1e-9 * va.abs().max(1.0));
    }

    #[test]
    fn similarity_is_non_negative(seed in 0u64..500, phase in 0.0f64..3.0) {
        let pred = random_field(8, seed, 2.0);
        let v = loss_m(&pred, &smooth_volume(16, phase), &smooth_volume(16, 0.0), true).unwrap();
        prop_assert!(v >= 0.0);
    }
}

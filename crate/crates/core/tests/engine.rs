use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use proptest::prelude::*;
use rand::Rng;
use regnet::data::{load_dataset, write_dataset, Dataset, DatasetSpec, Role};
use regnet::engine::*;
use regnet::model::{Mode, Model, ModelConfig};
use regnet::netcore::{probe_weights, seeded_rng, Tape, Tensor};
use regnet::volume::mvol::{write_volume, Dtype};
use regnet::volume::{pad_edge, DisplacementField3, ExtractPatch, LabelVolume3, Volume3};
use regnet::{par, Error};

/// Training tests share the process-wide thread mode, so they run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn labels(dims: [usize; 3], ids: &[u16]) -> LabelVolume3 {
    LabelVolume3::new(dims, ids.to_vec()).unwrap()
}

#[test]
fn dice_examples() {
    let d = [4, 1, 1];
    let a = labels(d, &[1, 1, 2, 0]);
    assert_eq!(dice(&a, &a, 1).unwrap(), Some(1.0));
    let b = labels(d, &[0, 0, 1, 1]);
    assert_eq!(dice(&labels(d, &[1, 1, 0, 0]), &b, 1).unwrap(), Some(0.0));
    // |A| = |B| = 2 sharing one voxel
    let c = labels(d, &[0, 1, 1, 0]);
    assert_eq!(dice(&labels(d, &[1, 1, 0, 0]), &c, 1).unwrap(), Some(0.5));
    assert_eq!(dice(&a, &b, 7).unwrap(), None);
    assert!(matches!(dice(&a, &labels([2, 2, 1], &[0; 4]), 1), Err(Error::DimMismatch(_))));
}

#[test]
fn dice_table_lists_present_regions_and_mean_skips_undefined() {
    let d = [6, 1, 1];
    let a = labels(d, &[1, 1, 2, 2, 0, 0]);
    let b = labels(d, &[1, 1, 0, 0, 3, 0]);
    let rows = dice_table(&a, &b).unwrap();
    let ids: Vec<u16> = rows.iter().map(|r| r.roi).collect();
    assert_eq!(ids, [1, 2, 3]);
    assert_eq!(rows[0].dice, Some(1.0));
    assert_eq!(rows[1].dice, Some(0.0));
    assert_eq!((rows[1].voxels_a, rows[1].voxels_b), (2, 0));
    assert_eq!(mean_dice(&rows), Some(1.0 / 3.0));
    let empty = labels(d, &[0; 6]);
    assert!(dice_table(&empty, &empty).unwrap().is_empty());
    assert_eq!(mean_dice(&[]), None);
}

fn random_field(dims: [usize; 3], scale: f64, seed: u64) -> DisplacementField3 {
    let mut rng = seeded_rng(seed);
    let n = 3 * dims.iter().product::<usize>();
    DisplacementField3::new(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn endpoint_error_examples() {
    let d = [5, 4, 3];
    let gt = random_field(d, 2.0, 1);
    let e = endpoint_error(&gt, &gt, None).unwrap();
    assert_eq!((e.mean, e.max, e.voxels), (0.0, 0.0, 60));
    let shifted = gt.add(&DisplacementField3::constant(d, [1.0, 0.0, 0.0])).unwrap();
    let e = endpoint_error(&shifted, &gt, None).unwrap();
    assert!((e.mean - 1.0).abs() < 1e-12 && (e.max - 1.0).abs() < 1e-12, "{e:?}");
    assert!(endpoint_error(&gt, &random_field([5, 4, 2], 1.0, 0), None).is_err());
    assert!(endpoint_error(&gt, &gt, Some(&[false; 60])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn endpoint_error_matches_loop_oracle(seed: u64, nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, keep in 0.2f64..1.0) {
        let d = [nx, ny, nz];
        let a = random_field(d, 3.0, seed);
        let b = random_field(d, 3.0, seed ^ 0xabc);
        let mut rng = seeded_rng(seed.wrapping_add(1));
        let mut mask: Vec<bool> = (0..nx * ny * nz).map(|_| rng.random::<f64>() < keep).collect();
        mask[0] = true;
        let (mut sum, mut max, mut n) = (0.0f64, 0.0f64, 0usize);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !mask[x + nx * (y + ny * z)] {
                        continue;
                    }
                    let (p, q) = (a.vector(x, y, z), b.vector(x, y, z));
                    let e = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                    sum += e;
                    max = max.max(e);
                    n += 1;
                }
            }
        }
        let got = endpoint_error(&a, &b, Some(&mask)).unwrap();
        prop_assert_eq!(got.voxels, n);
        prop_assert!((got.mean - sum / n as f64).abs() < 1e-12);
        prop_assert!((got.max - max).abs() < 1e-12);
    }
}

#[test]
fn tile_origins_cover_axis() {
    assert_eq!(tile_origins(96, 24).unwrap(), [0, 24, 48, 72]);
    assert_eq!(tile_origins(100, 24).unwrap(), [0, 24, 48, 72, 76]);
    assert_eq!(tile_origins(24, 24).unwrap(), [0]);
    assert!(matches!(tile_origins(23, 24), Err(Error::Shape(_))));
    for n in 24..200 {
        let o = tile_origins(n, 24).unwrap();
        assert_eq!(*o.last().unwrap() + 24, n);
        assert!(o.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 24));
    }
}

#[test]
fn stitcher_averages_with_equal_weights() {
    let mut s = Stitcher::new([3, 1, 1]);
    s.add([0, 0, 0], &DisplacementField3::constant([2, 1, 1], [1.0, 0.0, 2.0])).unwrap();
    assert!(matches!(s.finish(), Err(Error::Shape(_))));
    s.add([1, 0, 0], &DisplacementField3::constant([2, 1, 1], [3.0, 0.0, 2.0])).unwrap();
    assert_eq!(s.counts(), [1, 2, 1]);
    assert_eq!(s.max_overlap_disagreement(), 2.0);
    let f = s.finish().unwrap();
    assert_eq!(f.vector(0, 0, 0), [1.0, 0.0, 2.0]);
    assert_eq!(f.vector(1, 0, 0), [2.0, 0.0, 2.0]);
    assert_eq!(f.vector(2, 0, 0), [3.0, 0.0, 2.0]);
    assert!(s.add([2, 0, 0], &DisplacementField3::zeros([2, 1, 1])).is_err());
}

fn tiny_model(zero_heads: bool, seed: u64) -> Model<f32> {
    let cfg = ModelConfig { base_channels: 2, zero_init_heads: zero_heads, seed, ..ModelConfig::default() };
    let mut m = Model::build(cfg).unwrap();
    // one training-mode pass to initialise the batch-norm running statistics
    let mut tape = Tape::new();
    let x: Tensor<f32> = probe_weights::<f64>([1, 3, 64, 64, 64], seed).cast();
    let x = Tensor::new(x.shape(), x.data().iter().map(|v| v * 512.0).collect()).unwrap();
    let xv = tape.constant(x);
    let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
    m.update_running_stats(&out.stats).unwrap();
    m
}

fn blob(n: usize, shift: f64) -> Volume3 {
    let c = n as f64 / 2.0;
    Volume3::from_fn([n; 3], |x, y, z| {
        let r2 = (x as f64 - c - shift).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
        (-r2 / (2.0 * (n as f64 / 5.0).powi(2))).exp()
    })
    .unwrap()
}

#[test]
fn identity_model_registration_uses_64_tiles_and_returns_zero_field() {
    let m = tiny_model(true, 1);
    let t = blob(96, 0.0);
    let r = register_volume(&m, &t, &blob(96, 2.0)).unwrap();
    assert_eq!(r.report.tiles, 64);
    assert_eq!(r.report.tiles_per_axis, [4, 4, 4]);
    assert_eq!(r.report.min_coverage, 1);
    assert_eq!(r.field.dims(), [96; 3]);
    assert_eq!(r.field.max_norm(), 0.0);
    assert_eq!(r.warped, blob(96, 2.0));
    assert!(matches!(register_volume(&m, &blob(23, 0.0), &blob(23, 0.0)), Err(Error::Shape(_))));
    assert!(matches!(register_volume(&m, &t, &blob(64, 0.0)), Err(Error::DimMismatch(_))));
}

#[test]
fn stitched_tiles_equal_direct_window_predictions() {
    let m = tiny_model(false, 2);
    // tiles 72 and 74 overlap with a shift that is not a multiple of the pooling
    // stride, so their predictions on the shared band differ
    let (t, s) = (blob(98, 0.0), blob(98, 1.5));
    let r = register_volume(&m, &t, &s).unwrap();
    assert_eq!(r.report.tiles, 125);
    assert!(r.report.min_coverage >= 1);
    assert!(r.report.max_overlap_disagreement > 0.0);
    let (pt, ps) = (pad_edge(&t, 20), pad_edge(&s, 20));
    // the tile at 24 along every axis is covered by no other tile
    let o = [24; 3];
    let x = regnet::model::assemble_input::<f32>(
        &ps.extract_patch(o, [64; 3]).unwrap(),
        &pt.extract_patch(o, [64; 3]).unwrap(),
        &m.config().input_channels,
    )
    .unwrap();
    let tile = regnet::losses::tensor_to_field(&m.predict(&x).unwrap().high, 0).unwrap();
    let got = r.field.extract_patch(o, [24; 3]).unwrap();
    assert_eq!(got, tile);
}

fn tiny_spec(seed: u64, magnitude: f64) -> DatasetSpec {
    DatasetSpec {
        dims: [64; 3],
        n_rois: 5,
        max_magnitude: magnitude,
        smoothness: 4.0,
        train_pairs: 2,
        val_pairs: 1,
        fractions: vec![0.5],
        seed,
        ..DatasetSpec::default()
    }
}

fn tiny_dataset() -> &'static (PathBuf, Dataset) {
    static DS: OnceLock<(PathBuf, Dataset)> = OnceLock::new();
    DS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        write_dataset(&tiny_spec(11, 2.0), &dir).unwrap();
        let ds = load_dataset(&dir).unwrap();
        (dir, ds)
    })
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_stage1: 1,
        epochs_stage2: 1,
        lr_stage2: 1e-4,
        batch_size: 2,
        patches_per_sample: 1,
        val_patches_per_sample: 2,
        normalizer_warmup: 2,
        seed,
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig { base_channels: 2, zero_init_heads: false, seed, ..ModelConfig::default() }
}

#[test]
fn default_schedule_switches_after_epoch_five() {
    let c = TrainConfig::default();
    c.validate().unwrap();
    let s = c.schedule();
    assert_eq!((s.stage(5), s.stage(6)), (1, 2));
    assert_eq!((s.weights(5).alpha, s.weights(5).beta), (0.8, 0.2));
    assert_eq!((s.weights(6).alpha, s.weights(6).beta), (0.5, 0.5));
    assert_eq!((c.lr(5), c.lr(6)), (1e-3, 1e-8));
    let wos = TrainConfig { no_similarity: true, ..c.clone() }.schedule();
    assert!((1..=10).all(|e| wos.weights(e).beta == 0.0 && wos.weights(e).alpha == 1.0));
    assert!(TrainConfig { epochs_stage2: 0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { lr_stage2: 0.0, ..c.clone() }.validate().is_err());
    let plain = TrainConfig { plain_unet: true, ..c };
    assert!(plain.check_model(&ModelConfig::default()).is_err());
    let mut mc = ModelConfig::default();
    plain.apply_ablation(&mut mc);
    assert!(!mc.gap_fill && !mc.hierarchical);
    plain.check_model(&mc).unwrap();
}

fn csv_rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn training_logs_stage_transition_and_validation() {
    let _g = serial();
    let (_, ds) = tiny_dataset();
    let t = train::<f32>(tiny_model_config(3), ds, tiny_train_config(3), None).unwrap();
    // 2 training samples x (1 + 1 fraction) x 1 patch at batch 2 -> 2 iterations per epoch
    assert_eq!(t.train_patch_count(), 4);
    assert_eq!(t.val_patch_count(), 2);
    let rows = csv_rows(&t.log.to_csv());
    assert_eq!(rows.len(), 6);
    let iters: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(iters.windows(2).all(|w| w[1] >= w[0]), "{iters:?}");
    for r in &rows {
        let epoch: usize = r[1].parse().unwrap();
        let want = if epoch == 1 { ["1", "0.8", "0.2", "0.001"] } else { ["2", "0.5", "0.5", "0.0001"] };
        assert_eq!(&r[2..6], want, "{r:?}");
    }
    let splits: Vec<&str> = rows.iter().map(|r| r[11].as_str()).collect();
    assert_eq!(splits, ["train", "train", "validation", "train", "train", "validation"]);
    assert_eq!(t.log.epochs.len(), 2);
    assert!(t.log.epochs.iter().all(|e| e.val_combined.is_some_and(f64::is_finite)));
    assert!(t.log.records.iter().all(|r| r.loss_phi_mid.is_some() && r.loss_phi_low.is_some()));
}

#[test]
fn no_similarity_keeps_beta_zero() {
    let _g = serial();
    let (_, ds) = tiny_dataset();
    let c = TrainConfig { no_similarity: true, ..tiny_train_config(4) };
    let t = train::<f32>(tiny_model_config(4), ds, c, None).unwrap();
    assert!(t.log.records.iter().all(|r| r.beta == 0.0 && r.alpha == 1.0 && r.loss_m.is_finite()));
}

#[test]
fn plain_unet_logs_only_the_high_level() {
    let _g = serial();
    let (_, ds) = tiny_dataset();
    let c = TrainConfig { plain_unet: true, epochs_stage2: 1, ..tiny_train_config(5) };
    let mut mc = tiny_model_config(5);
    assert!(matches!(train::<f32>(mc.clone(), ds, c.clone(), None), Err(Error::Config(_))));
    c.apply_ablation(&mut mc);
    let t = train::<f32>(mc, ds, c, None).unwrap();
    assert!(t.log.records.iter().all(|r| r.loss_phi_mid.is_none() && r.loss_phi_low.is_none()));
}

#[test]
fn deterministic_runs_and_resume_are_bitwise_identical() {
    let _g = serial();
    par::set_sequential(true);
    let (_, ds) = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| RunOutputs { dir: dir.path().join(name) };
    let (a, b, c) = (out("a"), out("b"), out("c"));
    train::<f32>(tiny_model_config(6), ds, tiny_train_config(6), Some(&a)).unwrap();
    train::<f32>(tiny_model_config(6), ds, tiny_train_config(6), Some(&b)).unwrap();
    let mut first = Trainer::new(Model::<f32>::build(tiny_model_config(6)).unwrap(), tiny_train_config(6), ds).unwrap();
    first.run_until(1, Some(&c), |_| {}).unwrap();
    drop(first);
    let mut resumed = Trainer::<f32>::resume(&c.checkpoint(1), ds).unwrap();
    assert_eq!(resumed.epochs_done, 1);
    resumed.run(Some(&c), |_| {}).unwrap();
    par::set_sequential(false);
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    for o in [&b, &c] {
        assert_eq!(read(a.metrics()), read(o.metrics()));
        assert_eq!(read(a.final_checkpoint()), read(o.final_checkpoint()));
        assert_eq!(read(a.checkpoint(1)), read(o.checkpoint(1)));
    }
    let (m, h) = load_model::<f32>(&a.final_checkpoint()).unwrap();
    assert_eq!(h.train.unwrap().epochs_done, 2);
    assert_eq!(m.config(), &tiny_model_config(6));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.dnck");
    let m = tiny_model(false, 7);
    save_model(&p, &m).unwrap();
    let (back, h) = load_model::<f32>(&p).unwrap();
    assert!(h.train.is_none());
    for (a, b) in m.params().iter().zip(back.params()) {
        assert_eq!(a.value, b.value);
    }
    assert_eq!(back.running_stats(), m.running_stats());
    assert!(matches!(load_model::<f64>(&p), Err(Error::Checkpoint(_))));
    // a header claiming a wider network than the stored records
    let mut ck = regnet::netcore::checkpoint::Checkpoint::read(&p).unwrap();
    ck.header = ck.header.replace("\"base_channels\":2", "\"base_channels\":3");
    ck.write(&p).unwrap();
    match load_model::<f32>(&p) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("architecture"), "{msg}"),
        other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
    }
    assert!(matches!(load_model::<f32>(&dir.path().join("missing.dnck")), Err(Error::Io(_))));
    let (_, ds) = tiny_dataset();
    assert!(matches!(Trainer::<f32>::resume(&p, ds), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_loss_names_the_batch() {
    let _g = serial();
    let (root, _) = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    for e in std::fs::read_dir(root).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), dir.path().join(e.file_name())).unwrap();
    }
    let ds = load_dataset(dir.path()).unwrap();
    let victim = ds.entries(Role::Train)[0].clone();
    write_volume(dir.path().join(&victim.subject), &Volume3::filled([64; 3], 3.0e38), Dtype::F32).unwrap();
    let err = train::<f32>(tiny_model_config(8), &ds, tiny_train_config(8), None).err().unwrap();
    match err {
        Error::NonFiniteLoss(msg) => assert!(msg.contains(&victim.id), "{msg}"),
        other => panic!("{other}"),
    }
}

#[test]
fn identity_pairs_train_to_negligible_validation_loss() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&tiny_spec(12, 0.0), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let mc = ModelConfig { base_channels: 2, ..ModelConfig::default() };
    let c = TrainConfig { epochs_stage1: 2, ..tiny_train_config(12) };
    let t = train::<f32>(mc, &ds, c, None).unwrap();
    let v = t.log.last_validation().unwrap();
    assert!(v.combined < 1e-4, "{v:?}");
    let r = register_volume(&t.model, &ds.template, &ds.template).unwrap();
    assert!(r.field.mean_norm() < 0.2);
}

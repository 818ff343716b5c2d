use super::*;
use crate::phantom::{generate_case, PhantomParams};
use crate::volume::slice_axial;

fn tiny_phantom_params(seed: u64) -> PhantomParams {
    PhantomParams {
        volume_shape: [8, 32, 32],
        spacing: [1.5, 1.0, 1.0],
        vs_radius_range: (2.5, 4.0),
        cochlea_radius_range: (1.4, 2.0),
        seed,
        ..Default::default()
    }
}

/// 8 slices per domain from one 32x32 phantom case.
fn phantom_slices(seed: u64) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let (vol_s, vol_t, _) = generate_case(&tiny_phantom_params(seed), 0).unwrap();
    let to_f64 = |v: &Volume| {
        slice_axial(v)
            .into_iter()
            .map(|s| s.data.mapv(|x| x as f64))
            .collect::<Vec<_>>()
    };
    (to_f64(&vol_s), to_f64(&vol_t))
}

fn tiny_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        image_size: 32,
        image_pool_size: 8,
        gen: NetSpec::generator(6, 2, 1),
        dis: NetSpec::discriminator(6),
        n_neg: 15,
        ..Default::default()
    }
}

#[test]
fn pool_capacity_zero_passes_through() {
    let mut pool = ImagePool::new(0, 1);
    let img = Array2::from_elem((2, 2), 0.5);
    for _ in 0..5 {
        let out = image_pool_push(&mut pool, &img);
        assert_eq!(out, img);
    }
    assert!(pool.is_empty());
}

#[test]
fn pool_fill_phase_returns_inputs() {
    let mut pool = ImagePool::new(3, 2);
    for i in 0..3 {
        let img = Array2::from_elem((2, 2), i as f64);
        let out = image_pool_push(&mut pool, &img);
        assert_eq!(out, img);
    }
    assert_eq!(pool.len(), 3);
}

#[test]
fn pool_swap_frequency_is_near_half() {
    let mut pool = ImagePool::new(10, 3);
    for i in 0..10 {
        image_pool_push(&mut pool, &Array2::from_elem((1, 1), -(i as f64) - 1.0));
    }
    let n = 1000;
    let mut returned_input = 0;
    for i in 0..n {
        let img = Array2::from_elem((1, 1), i as f64);
        let out = image_pool_push(&mut pool, &img);
        if out == img {
            returned_input += 1;
        }
    }
    // Binomial(1000, 0.5): 3 sigma ~ 47.4.
    let dev = (returned_input as f64 - 500.0).abs();
    assert!(dev < 47.5, "returned-input count {returned_input}");
}

#[test]
fn zero_epochs_yields_init_checkpoint() {
    let (s, t) = phantom_slices(1);
    let ck = train_cyclegan(&s, &t, &tiny_cfg(1, 0)).unwrap();
    assert_eq!(ck.manifest.epoch, 0);
    assert!(ck.manifest.loss_history.is_empty());
    assert!(ck.has_array("g_s2t.stem.w"));

    let ck = train_qsattn(&s, &t, &tiny_cfg(1, 0)).unwrap();
    assert_eq!(ck.manifest.epoch, 0);
    assert!(ck.manifest.loss_history.is_empty());
}

#[test]
fn empty_dataset_is_rejected() {
    let (s, _) = phantom_slices(2);
    assert!(matches!(
        train_cyclegan(&s, &[], &tiny_cfg(2, 1)),
        Err(Error::EmptyDataset(_))
    ));
    assert!(matches!(
        train_qsattn(&[], &s, &tiny_cfg(2, 1)),
        Err(Error::EmptyDataset(_))
    ));
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (s, t) = phantom_slices(3);
    let s = &s[..4];
    let t = &t[..4];
    let a = train_cyclegan(s, t, &tiny_cfg(7, 2)).unwrap();
    let b = train_cyclegan(s, t, &tiny_cfg(7, 2)).unwrap();
    assert_eq!(a.manifest.loss_history, b.manifest.loss_history);
    assert_eq!(a, b);

    let a = train_qsattn(s, t, &tiny_cfg(7, 2)).unwrap();
    let b = train_qsattn(s, t, &tiny_cfg(7, 2)).unwrap();
    assert_eq!(a.manifest.loss_history, b.manifest.loss_history);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_resume_reproduces_uninterrupted_run() {
    let (s, t) = phantom_slices(4);
    let s = &s[..4];
    let t = &t[..4];

    let cfg = tiny_cfg(11, 4);
    let full = train_cyclegan(s, t, &cfg).unwrap();

    // Stop at epoch 2 under the same config, round-trip through the file
    // format, then resume to the configured total.
    let dir = tempfile::tempdir().unwrap();
    let half = {
        let mut tr = CycleGanTrainer::new(&cfg).unwrap();
        tr.train_until(s, t, 2).unwrap();
        tr.to_checkpoint()
    };
    let p = dir.path().join("half.ckpt");
    half.save(&p).unwrap();
    let half = Checkpoint::load(&p).unwrap();
    let resumed = resume_cyclegan(&half, s, t, 4).unwrap();
    assert_eq!(resumed.manifest.loss_history, full.manifest.loss_history);
    assert_eq!(resumed, full);

    let full = train_qsattn(s, t, &cfg).unwrap();
    let half = {
        let mut tr = QsAttnTrainer::new(&cfg).unwrap();
        tr.train_until(s, t, 2).unwrap();
        tr.to_checkpoint()
    };
    let p = dir.path().join("half_qs.ckpt");
    half.save(&p).unwrap();
    let half = Checkpoint::load(&p).unwrap();
    let resumed = resume_qsattn(&half, s, t, 4).unwrap();
    assert_eq!(resumed.manifest.loss_history, full.manifest.loss_history);
    assert_eq!(resumed, full);
}

#[test]
fn cycle_component_trends_down_for_majority_of_seeds() {
    let mut wins = 0;
    for seed in 0..3u64 {
        let (s, t) = phantom_slices(100 + seed);
        let ck = train_cyclegan(&s, &t, &tiny_cfg(seed, 2)).unwrap();
        let h = &ck.manifest.loss_history;
        if h[1]["cycle"] < h[0]["cycle"] {
            wins += 1;
        }
    }
    assert!(wins >= 2, "cycle loss decreased for only {wins}/3 seeds");
}

#[test]
fn nce_component_trends_down_for_majority_of_seeds() {
    let mut wins = 0;
    for seed in 0..3u64 {
        let (s, t) = phantom_slices(200 + seed);
        let ck = train_qsattn(&s, &t, &tiny_cfg(seed, 2)).unwrap();
        let h = &ck.manifest.loss_history;
        if h[1]["nce"] < h[0]["nce"] {
            wins += 1;
        }
    }
    assert!(wins >= 2, "nce loss decreased for only {wins}/3 seeds");
}

#[test]
fn nce_block_delegates_to_patchnce_on_identical_features() {
    // With feat_trans == feat_src every patch set has q == k+; the block's
    // value must equal the mean of the losses module's patchnce over the
    // same sets.
    use crate::losses::patchnce_loss;
    use crate::qsattn::{build_patch_sets, global_attention, row_entropy, select_queries};
    let mut r = SeedStream::new(5);
    let f = FeatureMap::new(
        ndarray::Array3::from_shape_simple_fn((4, 4, 4), || r.normal()),
        0,
    )
    .unwrap();
    let (k, tau, n_neg, seed) = (6usize, 0.07, 3usize, 17u64);
    let block = nce_loss_with_grads(&f, &f, k, tau, n_neg, seed).unwrap();
    let a = global_attention(&f).unwrap();
    let h = row_entropy(&a);
    let sel = select_queries(&a, &h, k).unwrap();
    let sets = build_patch_sets(&f, &f, &sel, tau, n_neg, seed).unwrap();
    let mean: f64 =
        sets.iter().map(|ps| patchnce_loss(ps).unwrap().value).sum::<f64>() / sets.len() as f64;
    assert!((block.value - mean).abs() < 1e-12);
    for ps in &sets {
        assert_eq!(ps.q, ps.k_pos);
    }
}

#[test]
fn translate_volume_contract() {
    let (vol_s, _, _) = generate_case(&tiny_phantom_params(6), 0).unwrap();
    let (s, t) = phantom_slices(6);
    let ck = train_cyclegan(&s[..2], &t[..2], &tiny_cfg(3, 0)).unwrap();

    let out1 = translate_volume(&ck, &vol_s, Direction::SToT).unwrap();
    let out2 = translate_volume(&ck, &vol_s, Direction::SToT).unwrap();
    assert_eq!(out1.data, out2.data);
    assert_eq!(out1.shape(), vol_s.shape());
    assert_eq!(out1.spacing, vol_s.spacing);
    assert!(out1.data.iter().all(|v| (-1.0..=1.0).contains(v)));

    // Wrong image size.
    let small = Volume::new(
        ndarray::Array3::zeros((2, 16, 16)),
        [1.0; 3],
        "small",
    )
    .unwrap();
    assert!(matches!(
        translate_volume(&ck, &small, Direction::SToT),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn multi_view_outputs_share_geometry() {
    let (vol_s, _, _) = generate_case(&tiny_phantom_params(8), 0).unwrap();
    let (s, t) = phantom_slices(8);
    let cg = train_cyclegan(&s[..2], &t[..2], &tiny_cfg(4, 0)).unwrap();
    let qs = train_qsattn(&s[..2], &t[..2], &tiny_cfg(4, 0)).unwrap();
    let out_cg = translate_volume(&cg, &vol_s, Direction::SToT).unwrap();
    let out_qs = translate_volume(&qs, &vol_s, Direction::SToT).unwrap();
    assert_eq!(out_cg.shape(), out_qs.shape());
    assert_eq!(out_cg.spacing, out_qs.spacing);
    assert_ne!(out_cg.data, out_qs.data);
}

#[test]
fn divergence_returns_last_finite_checkpoint() {
    let (s, t) = phantom_slices(9);
    let s = &s[..2];
    let t = &t[..2];
    let cfg = tiny_cfg(5, 1);
    let mut ck = train_cyclegan(s, t, &cfg).unwrap();
    // Poison one weight; the next epoch's losses go non-finite.
    let mut w = ck.get_array("g_s2t.stem.w").unwrap();
    w[[0, 0, 0, 0]] = f64::INFINITY;
    ck.put_array("g_s2t.stem.w", &w);
    match resume_cyclegan(&ck, s, t, 2) {
        Err(Error::DivergenceDetected { epoch, last_finite }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_finite.manifest.epoch, 1);
            assert!(last_finite
                .manifest
                .loss_history
                .iter()
                .all(|m| m.values().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

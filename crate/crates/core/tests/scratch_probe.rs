//! Temporary probe (deleted before ship): can the segmenter learn phantom
//! blobs directly, without translation in the loop?

use xmoda::metrics::dice;
use xmoda::phantom::{generate_case, PhantomParams};
use xmoda::segmenter::{predict, train_segmenter, SegConfig, SegMode};

#[test]
#[ignore]
fn probe_direct_segmentation() {
    let params = PhantomParams {
        seed: 123,
        ..Default::default()
    };
    let cases: Vec<_> = (0..8)
        .map(|i| {
            let (_, t, m) = generate_case(&params, i).unwrap();
            (t, m)
        })
        .collect();
    let (val_t, val_mask) = {
        let (_, t, m) = generate_case(&params, 100).unwrap();
        (t, m)
    };

    for (name, cfg) in [
        (
            "2d lr1e-3 it8",
            SegConfig {
                seed: 1,
                ..SegConfig::default_2d()
            },
        ),
        (
            "2d lr3e-3 it8",
            SegConfig {
                seed: 1,
                lr: 3e-3,
                ..SegConfig::default_2d()
            },
        ),
        (
            "2d lr1e-2 it8",
            SegConfig {
                seed: 1,
                lr: 1e-2,
                ..SegConfig::default_2d()
            },
        ),
        (
            "2d lr3e-3 it16",
            SegConfig {
                seed: 1,
                lr: 3e-3,
                iters_per_case: 16,
                ..SegConfig::default_2d()
            },
        ),
        (
            "3d lr3e-3 it4",
            SegConfig {
                seed: 1,
                lr: 3e-3,
                iters_per_case: 4,
                ..SegConfig::default_3d()
            },
        ),
        (
            "3d lr1e-2 it4",
            SegConfig {
                seed: 1,
                lr: 1e-2,
                iters_per_case: 4,
                ..SegConfig::default_3d()
            },
        ),
    ] {
        let t0 = std::time::Instant::now();
        let ck = train_segmenter(&cases, &cfg).unwrap();
        let train_time = t0.elapsed();
        let h = &ck.manifest.loss_history;
        let (mask, _) = predict(&ck, &val_t).unwrap();
        let d1 = dice(&mask, &val_mask, 1).unwrap();
        let d2 = dice(&mask, &val_mask, 2).unwrap();
        println!(
            "{name}: loss {:.3}->{:.3}, dice vs {:.3} cochlea {:.3}, train {:.1}s",
            h[0]["dice_ce"],
            h.last().unwrap()["dice_ce"],
            d1,
            d2,
            train_time.as_secs_f64()
        );
    }
}

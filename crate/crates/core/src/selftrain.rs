//! Pseudo-label self-training: train on labeled data, pseudo-label the
//! unlabeled target volumes with the current model, retrain from scratch on
//! the union, repeat. Each round keeps a full audit trail so every
//! pseudo-label is reproducible from the previous round's checkpoint.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::segmenter::{predict, train_segmenter, SegConfig};
use crate::volume::{LabelMask, Volume};

#[derive(Debug, Clone)]
pub struct RoundRecord {
    /// 0 is the base model trained on labeled data alone.
    pub round: usize,
    pub checkpoint: Checkpoint,
    /// One entry per unlabeled volume, `(origin_id, mask)`, in input order.
    /// Empty for round 0.
    pub pseudo_labels: Vec<(String, LabelMask)>,
}

/// Run `rounds` self-training iterations after the base training. Voxels
/// whose confidence falls below `confidence_floor` are reset to background
/// before retraining. Every round retrains from scratch: round 0 uses
/// exactly `cfg.seed` (so `rounds = 0` is identical to plain
/// `train_segmenter`), round r >= 1 derives its seed from `cfg.seed` and r.
pub fn self_train(
    labeled: &[(Volume, LabelMask)],
    unlabeled: &[Volume],
    cfg: &SegConfig,
    rounds: usize,
    confidence_floor: f64,
) -> Result<(Checkpoint, Vec<RoundRecord>)> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    if !(0.0..=1.0).contains(&confidence_floor) {
        return Err(Error::ConfigInvalid(format!(
            "confidence_floor {confidence_floor} outside [0, 1]"
        )));
    }
    let base = train_segmenter(labeled, cfg)?;
    let mut records = vec![RoundRecord {
        round: 0,
        checkpoint: base,
        pseudo_labels: Vec::new(),
    }];

    for r in 1..=rounds {
        let prev = &records.last().unwrap().checkpoint;
        let mut pseudo = Vec::with_capacity(unlabeled.len());
        for vol in unlabeled {
            let (mut mask, conf) = predict(prev, vol)?;
            if confidence_floor > 0.0 {
                for (m, &c) in mask.data.iter_mut().zip(conf.iter()) {
                    if (c as f64) < confidence_floor {
                        *m = 0;
                    }
                }
            }
            pseudo.push((vol.origin_id.clone(), mask));
        }

        // Pseudo-labels replace the previous round's; the training set is
        // always |labeled| + |unlabeled|.
        let mut train_set: Vec<(Volume, LabelMask)> = labeled.to_vec();
        for (vol, (_, mask)) in unlabeled.iter().zip(pseudo.iter()) {
            train_set.push((vol.clone(), mask.clone()));
        }
        let round_cfg = SegConfig {
            seed: derive_seed(cfg.seed, &format!("selftrain/round{r}")),
            ..cfg.clone()
        };
        let ck = train_segmenter(&train_set, &round_cfg)?;
        records.push(RoundRecord {
            round: r,
            checkpoint: ck,
            pseudo_labels: pseudo,
        });
    }
    let final_ck = records.last().unwrap().checkpoint.clone();
    Ok((final_ck, records))
}

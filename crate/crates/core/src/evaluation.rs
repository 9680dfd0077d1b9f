//! Speaker-stratified cross-validation and ROC-AUC.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};
use crate::s2ap::{self, FramePair, TrainConfig};
use crate::signal_io::Label;
use crate::{Error, Result};

/// All analysed frames of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingFrames {
    pub recording_id: String,
    pub speaker_id: String,
    pub label: Label,
    pub frames: Vec<FramePair>,
}

/// Speaker → fold mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub speaker_fold: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, speaker: &str) -> Option<usize> {
        self.speaker_fold.get(speaker).copied()
    }

    pub fn speakers_in(&self, fold: usize) -> Vec<&str> {
        self.speaker_fold
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Recording indices `(train, test)` for `fold`. Speakers missing from the
    /// assignment are treated as training-only.
    pub fn split<'a, I>(&self, fold: usize, speakers: I) -> (Vec<usize>, Vec<usize>)
    where
        I: IntoIterator<Item = &'a str>,
    {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in speakers.into_iter().enumerate() {
            if self.fold_of(s) == Some(fold) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Shuffle speakers with `seed`, then hand each one to the fold holding the
/// fewest speakers of its majority label (ties: fewest speakers overall,
/// then lowest index).
pub fn speaker_stratified_folds<'a, I>(recordings: I, k: usize, seed: u64) -> Result<FoldAssignment>
where
    I: IntoIterator<Item = (&'a str, Label)>,
{
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut votes: BTreeMap<&str, i64> = BTreeMap::new();
    for (speaker, label) in recordings {
        let v = match label {
            Label::Positive => 1,
            Label::Negative => -1,
            Label::Unknown => 0,
        };
        *votes.entry(speaker).or_default() += v;
    }
    if votes.len() < k {
        return Err(Error::TooFewSpeakers {
            needed: k,
            found: votes.len(),
        });
    }
    let mut speakers: Vec<(&str, bool)> = votes.into_iter().map(|(s, v)| (s, v > 0)).collect();
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut counts = vec![[0usize; 2]; k];
    let mut speaker_fold = BTreeMap::new();
    for (speaker, positive) in speakers {
        let class = positive as usize;
        let fold = (0..k)
            .min_by_key(|&f| (counts[f][class], counts[f][0] + counts[f][1], f))
            .expect("k >= 2");
        counts[fold][class] += 1;
        speaker_fold.insert(speaker.to_string(), fold);
    }
    Ok(FoldAssignment { k, speaker_fold })
}

/// Mann–Whitney ROC-AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut neg_below) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
            j += 1;
        }
        wins += pos * neg_below + 0.5 * pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Per-fold values with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub per_fold: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

impl AucSummary {
    pub fn new(per_fold: Vec<f64>) -> Self {
        let n = per_fold.len() as f64;
        let mean_auc = per_fold.iter().sum::<f64>() / n;
        let var = per_fold.iter().map(|a| (a - mean_auc).powi(2)).sum::<f64>() / n;
        AucSummary {
            per_fold,
            mean_auc,
            std_auc: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_speakers: Vec<String>,
    pub train_frames: usize,
    pub test_frames: usize,
    pub frame_auc: f64,
    pub recording_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    pub frame: AucSummary,
    pub recording: AucSummary,
}

/// Fails if any speaker contributes recordings to both sides.
pub fn check_no_leakage(fold: usize, train: &[&RecordingFrames], test: &[&RecordingFrames]) -> Result<()> {
    let train_speakers: BTreeSet<&str> = train.iter().map(|r| r.speaker_id.as_str()).collect();
    match test.iter().find(|r| train_speakers.contains(r.speaker_id.as_str())) {
        Some(r) => Err(Error::SpeakerLeakage {
            fold,
            speaker: r.speaker_id.clone(),
        }),
        None => Ok(()),
    }
}

/// Train one model per speaker fold and score the held-out speakers at frame
/// and recording level.
pub fn cross_validate(
    dataset: &[RecordingFrames],
    config: &TrainConfig,
    k: usize,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    let folds = speaker_stratified_folds(
        dataset.iter().map(|r| (r.speaker_id.as_str(), r.label)),
        k,
        seed,
    )?;
    let reports = exec::map_range(exec, k, |fold| {
        run_fold(dataset, &folds, fold, config, exec).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })
    });
    let folds: Vec<FoldReport> = reports.into_iter().collect::<Result<_>>()?;
    Ok(EvalReport {
        k,
        seed,
        config: *config,
        frame: AucSummary::new(folds.iter().map(|f| f.frame_auc).collect()),
        recording: AucSummary::new(folds.iter().map(|f| f.recording_auc).collect()),
        folds,
    })
}

fn run_fold(
    dataset: &[RecordingFrames],
    folds: &FoldAssignment,
    fold: usize,
    config: &TrainConfig,
    exec: Exec,
) -> Result<FoldReport> {
    let (train_idx, test_idx) = folds.split(fold, dataset.iter().map(|r| r.speaker_id.as_str()));
    let train: Vec<&RecordingFrames> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let test: Vec<&RecordingFrames> = test_idx.iter().map(|&i| &dataset[i]).collect();
    check_no_leakage(fold, &train, &test)?;

    let train_frames: Vec<FramePair> = train.iter().flat_map(|r| r.frames.iter().cloned()).collect();
    let model = s2ap::train(&train_frames, config, exec)?;

    let (mut frame_scores, mut frame_labels) = (Vec::new(), Vec::new());
    let (mut rec_scores, mut rec_labels) = (Vec::new(), Vec::new());
    for rec in &test {
        if rec.frames.is_empty() {
            continue;
        }
        let positive = match rec.label {
            Label::Positive => true,
            Label::Negative => false,
            Label::Unknown => {
                return Err(Error::InvalidArgument(format!(
                    "recording {} has no label",
                    rec.recording_id
                )))
            }
        };
        let pred = s2ap::predict(&model, &rec.frames, exec)?;
        frame_labels.extend(std::iter::repeat_n(positive, pred.frame_probabilities.len()));
        frame_scores.extend(pred.frame_probabilities);
        rec_scores.push(pred.recording_score);
        rec_labels.push(positive);
    }
    Ok(FoldReport {
        fold,
        test_speakers: folds.speakers_in(fold).into_iter().map(String::from).collect(),
        train_frames: train_frames.len(),
        test_frames: frame_scores.len(),
        frame_auc: roc_auc(&frame_scores, &frame_labels)?,
        recording_auc: roc_auc(&rec_scores, &rec_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::s2ap::Architecture;
    use proptest::prelude::*;
    use rand::RngExt;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            for (t, &m) in scores.iter().zip(labels) {
                if l && !m {
                    pairs += 1.0;
                    if s > t {
                        wins += 1.0;
                    } else if s == t {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn labelled(n: usize, positives: usize) -> Vec<(String, Label)> {
        (0..n)
            .map(|i| {
                let label = if i < positives { Label::Positive } else { Label::Negative };
                (format!("spk{i:02}"), label)
            })
            .collect()
    }

    fn as_refs(v: &[(String, Label)]) -> impl Iterator<Item = (&str, Label)> {
        v.iter().map(|(s, l)| (s.as_str(), *l))
    }

    #[test]
    fn auc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = 200;
            // Coarse scores so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(roc_auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
        }
    }

    #[test]
    fn one_speaker_per_fold() {
        let spk = labelled(3, 1);
        let folds = speaker_stratified_folds(as_refs(&spk), 3, 0).unwrap();
        let mut used: Vec<usize> = folds.speaker_fold.values().copied().collect();
        used.sort();
        assert_eq!(used, vec![0, 1, 2]);
    }

    #[test]
    fn greedy_balance_spreads_positives() {
        let spk = labelled(19, 9);
        for seed in 0..20 {
            let folds = speaker_stratified_folds(as_refs(&spk), 3, seed).unwrap();
            for f in 0..3 {
                let pos = folds
                    .speakers_in(f)
                    .iter()
                    .filter(|s| spk.iter().any(|(n, l)| n == *s && *l == Label::Positive))
                    .count();
                assert!((2..=4).contains(&pos), "fold {f}: {pos}");
                assert!(folds.speakers_in(f).len() >= 6);
            }
        }
    }

    #[test]
    fn folds_are_seeded() {
        let spk = labelled(12, 6);
        let a = speaker_stratified_folds(as_refs(&spk), 3, 7).unwrap();
        assert_eq!(a, speaker_stratified_folds(as_refs(&spk), 3, 7).unwrap());
        let differs = (0..10).any(|s| speaker_stratified_folds(as_refs(&spk), 3, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn fold_preconditions() {
        let spk = labelled(4, 2);
        assert!(speaker_stratified_folds(as_refs(&spk), 1, 0).is_err());
        assert!(matches!(
            speaker_stratified_folds(as_refs(&spk), 5, 0),
            Err(Error::TooFewSpeakers { needed: 5, found: 4 })
        ));
    }

    #[test]
    fn recordings_of_one_speaker_stay_together() {
        let mut recs = Vec::new();
        for s in 0..6 {
            for r in 0..3 {
                let label = if s % 2 == 0 { Label::Positive } else { Label::Negative };
                recs.push((format!("s{s}"), format!("s{s}_r{r}"), label));
            }
        }
        let folds = speaker_stratified_folds(recs.iter().map(|(s, _, l)| (s.as_str(), *l)), 3, 1).unwrap();
        for f in 0..3 {
            let (train, test) = folds.split(f, recs.iter().map(|(s, _, _)| s.as_str()));
            let tr: BTreeSet<&str> = train.iter().map(|&i| recs[i].0.as_str()).collect();
            assert!(test.iter().all(|&i| !tr.contains(recs[i].0.as_str())));
            assert_eq!(train.len() + test.len(), recs.len());
        }
    }

    #[test]
    fn leakage_is_detected() {
        let rec = |s: &str| RecordingFrames {
            recording_id: format!("{s}_r"),
            speaker_id: s.into(),
            label: Label::Negative,
            frames: Vec::new(),
        };
        let (a, b, c) = (rec("a"), rec("b"), rec("a"));
        assert!(check_no_leakage(0, &[&a], &[&b]).is_ok());
        assert!(matches!(
            check_no_leakage(2, &[&a, &b], &[&c]),
            Err(Error::SpeakerLeakage { fold: 2, .. })
        ));
    }

    #[test]
    fn summary_uses_population_std() {
        let s = AucSummary::new(vec![0.7, 0.8, 0.9]);
        assert!((s.mean_auc - 0.8).abs() < 1e-15);
        let hand = ((0.01 + 0.0 + 0.01) / 3.0f64).sqrt();
        assert!((s.std_auc - hand).abs() < 1e-15);
    }

    fn separable_cohort(rng: &mut ChaCha8Rng, speakers: usize, t_len: usize) -> Vec<RecordingFrames> {
        use std::f64::consts::{FRAC_PI_2, TAU};
        (0..speakers)
            .map(|s| {
                let positive = s % 2 == 0;
                let label = if positive { Label::Positive } else { Label::Negative };
                let id = format!("spk{s:02}");
                let frames = (0..6)
                    .map(|f| {
                        let period = rng.random_range(10.0..20.0);
                        let phase = rng.random_range(0.0..TAU);
                        let wave = |shift: f64| -> Vec<f64> {
                            (0..t_len).map(|t| (TAU * t as f64 / period + phase + shift).sin()).collect()
                        };
                        let u_model = wave(if positive { FRAC_PI_2 } else { 0.0 });
                        FramePair::new(wave(0.0), u_model, label, id.clone(), f).unwrap()
                    })
                    .collect();
                RecordingFrames {
                    recording_id: id.clone(),
                    speaker_id: id,
                    label,
                    frames,
                }
            })
            .collect()
    }

    #[test]
    fn separable_cohort_cross_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = separable_cohort(&mut rng, 9, 40);
        let cfg = TrainConfig {
            architecture: Architecture::new(1, 3, 8),
            epochs: 15,
            ..TrainConfig::default()
        };
        let report = cross_validate(&data, &cfg, 3, 0, Exec::Parallel).unwrap();
        assert!(report.frame.mean_auc >= 0.9, "{report:?}");
        assert_eq!(report.folds.len(), 3);
        assert_eq!(report.frame.per_fold.len(), 3);
        let again = cross_validate(&data, &cfg, 3, 0, Exec::Sequential).unwrap();
        assert_eq!(report, again);
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["frame"]["mean_auc"].is_number() && json["recording"]["std_auc"].is_number());
    }

    #[test]
    fn cross_validate_rejects_single_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = separable_cohort(&mut rng, 4, 8);
        assert!(cross_validate(&data, &TrainConfig::default(), 1, 0, Exec::Sequential).is_err());
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(scores in proptest::collection::vec(-5.0f64..5.0, 2..60), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = roc_auc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(a, roc_auc(&mapped, &labels).unwrap());
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((roc_auc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }
}

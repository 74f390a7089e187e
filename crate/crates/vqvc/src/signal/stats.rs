//! Per-speaker normalization statistics.

use crate::error::{Error, Result};

use super::{F0Contour, FeatureSeq, SpeakerStats};

const STD_FLOOR: f64 = 1e-8;

/// Means and population standard deviations of a speaker's features and
/// voiced log-F0 values, with standard deviations floored at 1e-8.
pub fn compute_speaker_stats(
    speaker_index: usize,
    speaker_name: &str,
    features: &[&FeatureSeq],
    contours: &[&F0Contour],
) -> Result<SpeakerStats> {
    if features.is_empty() {
        return Err(Error::Corpus(format!("speaker {speaker_name}: no utterances for statistics")));
    }
    let dim = features[0].dim();

    let mut count = 0usize;
    let mut sum = vec![0.0f64; dim];
    let mut sumsq = vec![0.0f64; dim];
    for feats in features {
        for row in feats.data.rows() {
            for (d, &v) in row.iter().enumerate() {
                sum[d] += v as f64;
                sumsq[d] += (v as f64) * (v as f64);
            }
            count += 1;
        }
    }
    let feat_mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let feat_std: Vec<f64> = sumsq
        .iter()
        .zip(&feat_mean)
        .map(|(sq, m)| ((sq / count as f64 - m * m).max(0.0)).sqrt().max(STD_FLOOR))
        .collect();

    let voiced_lnf0: Vec<f64> = contours
        .iter()
        .flat_map(|c| (0..c.len()).filter(|&t| c.voiced[t]).map(|t| c.f0_hz[t].ln()))
        .collect();
    if voiced_lnf0.is_empty() {
        return Err(Error::Corpus(format!(
            "speaker {speaker_name}: no voiced frames in any utterance, cannot compute log-F0 statistics"
        )));
    }
    let n = voiced_lnf0.len() as f64;
    let lcf0_mean = voiced_lnf0.iter().sum::<f64>() / n;
    let var = voiced_lnf0.iter().map(|v| (v - lcf0_mean).powi(2)).sum::<f64>() / n;
    let lcf0_std = var.sqrt().max(STD_FLOOR);

    Ok(SpeakerStats { speaker_index, lcf0_mean, lcf0_std, feat_mean, feat_std })
}

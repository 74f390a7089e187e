//! Objective measures: DTW-aligned mel-cepstral distortion between
//! converted and reference utterances, plus a pluggable external scorer
//! hook for MOS predictors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::signal::{mel_cepstrum, F0Contour, FeatureSeq, SpeakerStats};
use crate::vqmodel::{convert, Model};

/// Monotone alignment path between two sequences; steps are (1,0), (0,1)
/// or (1,1), from (0,0) to (T1-1, T2-1).
#[derive(Debug, Clone, PartialEq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

fn sq_euclidean(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0f64;
    for d in 0..a.ncols() {
        let diff = a[[i, d]] as f64 - b[[j, d]] as f64;
        acc += diff * diff;
    }
    acc
}

/// Globally minimal cumulative squared-Euclidean cost; ties prefer the
/// diagonal predecessor, then (1,0).
pub fn dtw(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<DtwPath> {
    let (t1, t2) = (a.nrows(), b.nrows());
    if t1 == 0 || t2 == 0 {
        return Err(Error::Eval("dtw: empty sequence".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Eval(format!(
            "dtw: dimension mismatch ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    // predecessor codes: 0 diagonal, 1 up (i-1, j), 2 left (i, j-1)
    let mut cost = vec![f64::INFINITY; t1 * t2];
    let mut pred = vec![0u8; t1 * t2];
    for i in 0..t1 {
        for j in 0..t2 {
            let local = sq_euclidean(a, b, i, j);
            let (best, code) = match (i, j) {
                (0, 0) => (0.0, 0),
                (0, _) => (cost[j - 1], 2),
                (_, 0) => (cost[(i - 1) * t2], 1),
                _ => {
                    let diag = cost[(i - 1) * t2 + j - 1];
                    let up = cost[(i - 1) * t2 + j];
                    let left = cost[i * t2 + j - 1];
                    let mut best = diag;
                    let mut code = 0u8;
                    if up < best {
                        best = up;
                        code = 1;
                    }
                    if left < best {
                        best = left;
                        code = 2;
                    }
                    (best, code)
                }
            };
            cost[i * t2 + j] = best + local;
            pred[i * t2 + j] = code;
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (t1 - 1, t2 - 1);
    loop {
        pairs.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        match pred[i * t2 + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
    }
    pairs.reverse();
    Ok(DtwPath { pairs, cost: cost[(t1 - 1) * t2 + (t2 - 1)] })
}

/// Mel-cepstral distortion in dB between two 35-coefficient sequences.
/// The power coefficient c0 is excluded; alignment and distance both use
/// dimensions 1..34. Per aligned pair: `(10 / ln 10) * sqrt(2 * sum
/// (delta c_d)^2)`, averaged over the path.
pub fn mel_cd(converted: &FeatureSeq, reference: &FeatureSeq) -> Result<f64> {
    const DIM: usize = 35;
    if converted.dim() != DIM || reference.dim() != DIM {
        return Err(Error::Eval(format!(
            "mel_cd expects {DIM}-dimensional mel-cepstra, got {} and {}",
            converted.dim(),
            reference.dim()
        )));
    }
    let a = converted.data.slice(ndarray::s![.., 1..]);
    let b = reference.data.slice(ndarray::s![.., 1..]);
    let path = dtw(a, b)?;
    let scale = 10.0 / std::f64::consts::LN_10;
    let mut acc = 0.0f64;
    for &(i, j) in &path.pairs {
        let mut sq = 0.0f64;
        for d in 0..a.ncols() {
            let diff = a[[i, d]] as f64 - b[[j, d]] as f64;
            sq += diff * diff;
        }
        acc += scale * (2.0 * sq).sqrt();
    }
    Ok(acc / path.pairs.len() as f64)
}

/// One conversion to score: source utterance, reference utterance of the
/// target speaker with the same text id, and the statistics for both ends.
pub struct ConversionEvalItem {
    pub source_spk: String,
    pub target_spk: String,
    pub utt_id: String,
    pub source_feats: FeatureSeq,
    pub source_f0: F0Contour,
    pub reference_feats: FeatureSeq,
    pub src_stats: SpeakerStats,
    pub tgt_stats: SpeakerStats,
    pub target_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McdRow {
    pub source_spk: String,
    pub target_spk: String,
    pub utt_id: String,
    pub mcd_db: f64,
    pub mos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McdReport {
    pub rows: Vec<McdRow>,
    pub pair_means: BTreeMap<(String, String), f64>,
    pub corpus_mean: f64,
}

impl McdReport {
    fn from_rows(rows: Vec<McdRow>) -> McdReport {
        let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        let mut total = 0.0;
        for row in &rows {
            let e = sums.entry((row.source_spk.clone(), row.target_spk.clone())).or_insert((0.0, 0));
            e.0 += row.mcd_db;
            e.1 += 1;
            total += row.mcd_db;
        }
        let pair_means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let corpus_mean = if rows.is_empty() { 0.0 } else { total / rows.len() as f64 };
        McdReport { rows, pair_means, corpus_mean }
    }

    /// CSV with convention notes in comment lines:
    /// `source_spk,target_spk,utt_id,mcd_db[,mos]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# mel-cepstral distortion, dB; c0 excluded (dims 1..34)").unwrap();
        writeln!(out, "# alignment: DTW, squared-Euclidean on dims 1..34, ties prefer diagonal").unwrap();
        writeln!(out, "# distortion per aligned pair: (10/ln10) * sqrt(2 * sum dc^2)").unwrap();
        let has_mos = self.rows.iter().any(|r| r.mos.is_some());
        if has_mos {
            writeln!(out, "source_spk,target_spk,utt_id,mcd_db,mos").unwrap();
        } else {
            writeln!(out, "source_spk,target_spk,utt_id,mcd_db").unwrap();
        }
        for row in &self.rows {
            if has_mos {
                let mos = row.mos.map_or(String::from("NA"), |m| format!("{m}"));
                writeln!(out, "{},{},{},{},{}", row.source_spk, row.target_spk, row.utt_id, row.mcd_db, mos).unwrap();
            } else {
                writeln!(out, "{},{},{},{}", row.source_spk, row.target_spk, row.utt_id, row.mcd_db).unwrap();
            }
        }
        writeln!(out, "# corpus_mean,{}", self.corpus_mean).unwrap();
        fsutil::atomic_write(path, &out)
    }
}

/// Convert every item and score it against its reference by Mel-CD.
pub fn evaluate_conversion(model: &Model, items: &[ConversionEvalItem], mcep_order: usize) -> Result<McdReport> {
    let rows: Result<Vec<McdRow>> = items
        .iter()
        .map(|item| {
            let out = convert(
                model,
                &item.source_feats,
                &item.source_f0,
                &item.src_stats,
                &item.tgt_stats,
                item.target_index,
            )?;
            let conv_cep = mel_cepstrum(&out.features, mcep_order)?;
            let ref_cep = mel_cepstrum(&item.reference_feats, mcep_order)?;
            let mcd_db = mel_cd(&conv_cep, &ref_cep)?;
            Ok(McdRow {
                source_spk: item.source_spk.clone(),
                target_spk: item.target_spk.clone(),
                utt_id: item.utt_id.clone(),
                mcd_db,
                mos: None,
            })
        })
        .collect();
    Ok(McdReport::from_rows(rows?))
}

/// Invoke an external scorer executable with the WAV paths as arguments;
/// it must print one float per input line. Any protocol failure logs a
/// warning and yields None (the MOS column is marked unavailable).
pub fn external_scorer(cmd: &str, wav_paths: &[PathBuf]) -> Option<Vec<f64>> {
    if wav_paths.is_empty() {
        return Some(Vec::new());
    }
    let output = match Command::new(cmd).args(wav_paths).output() {
        Ok(o) => o,
        Err(e) => {
            log::warn!("external scorer {cmd}: failed to launch: {e}");
            return None;
        }
    };
    if !output.status.success() {
        log::warn!("external scorer {cmd}: exited with {}", output.status);
        return None;
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let scores: Vec<f64> = stdout
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| l.trim().parse::<f64>().ok())
        .collect();
    let expected = wav_paths.len();
    if scores.len() != expected
        || stdout.lines().filter(|l| !l.trim().is_empty()).count() != expected
    {
        log::warn!(
            "external scorer {cmd}: expected {expected} numeric lines, got {} parsable of {}",
            scores.len(),
            stdout.lines().filter(|l| !l.trim().is_empty()).count()
        );
        return None;
    }
    Some(scores)
}

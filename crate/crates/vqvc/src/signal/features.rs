//! Binary feature files: magic "CRNK", version, kind code, T, D, then
//! float32 little-endian row-major data. F0 contours are stored in the same
//! container as T-by-2 (f0_hz, voiced) with a dedicated kind code.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fsutil;

use super::{F0Contour, FeatureKind, FeatureSeq};

const MAGIC: &[u8; 4] = b"CRNK";
const VERSION: u8 = 1;
const KIND_F0: u8 = 3;

fn encode(kind_code: u8, t: usize, d: usize, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 8 + t * d * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(kind_code);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(u8, usize, usize, Vec<f32>)> {
    if bytes.len() < 14 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("{}: missing CRNK magic", path.display())));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {}", path.display(), bytes[4])));
    }
    let kind_code = bytes[5];
    let t = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let d = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let expected = 14 + t * d * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes for {t}x{d} float32, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((kind_code, t, d, values))
}

pub fn save_feature_seq(path: impl AsRef<Path>, feats: &FeatureSeq) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(
        feats.kind as u8,
        feats.n_frames(),
        feats.dim(),
        feats.data.iter().copied(),
    );
    fsutil::atomic_write(path, &bytes)
}

pub fn load_feature_seq(path: impl AsRef<Path>) -> Result<FeatureSeq> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind_code, t, d, values) = decode(path, &bytes)?;
    let kind = FeatureKind::from_code(kind_code)
        .ok_or_else(|| Error::Format(format!("{}: unknown feature kind code {kind_code}", path.display())))?;
    let data = Array2::from_shape_vec((t, d), values)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(FeatureSeq::new(data, kind))
}

pub fn save_f0(path: impl AsRef<Path>, f0: &F0Contour) -> Result<()> {
    let path = path.as_ref();
    let t = f0.len();
    let values = (0..t).flat_map(|i| {
        [f0.f0_hz[i] as f32, if f0.voiced[i] { 1.0 } else { 0.0 }].into_iter()
    });
    let bytes = encode(KIND_F0, t, 2, values);
    fsutil::atomic_write(path, &bytes)
}

pub fn load_f0(path: impl AsRef<Path>) -> Result<F0Contour> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind_code, t, d, values) = decode(path, &bytes)?;
    if kind_code != KIND_F0 || d != 2 {
        return Err(Error::Format(format!(
            "{}: not an F0 contour (kind {kind_code}, dim {d})",
            path.display()
        )));
    }
    let mut f0_hz = Vec::with_capacity(t);
    let mut voiced = Vec::with_capacity(t);
    for i in 0..t {
        f0_hz.push(values[2 * i] as f64);
        voiced.push(values[2 * i + 1] != 0.0);
    }
    Ok(F0Contour { f0_hz, voiced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("vqvc-feat-tests-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn bad_magic_rejected() {
        let p = tmp("garbage.crnk");
        std::fs::write(&p, b"NOPEnope").unwrap();
        assert!(load_feature_seq(&p).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let p = tmp("trunc.crnk");
        let feats = FeatureSeq::new(Array2::from_elem((3, 4), 1.0f32), FeatureKind::Latent);
        save_feature_seq(&p, &feats).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_feature_seq(&p).is_err());
    }

    #[test]
    fn f0_roundtrip() {
        let p = tmp("contour.crnk");
        let f0 = F0Contour {
            f0_hz: vec![0.0, 220.5, 221.0, 0.0],
            voiced: vec![false, true, true, false],
        };
        save_f0(&p, &f0).unwrap();
        let back = load_f0(&p).unwrap();
        assert_eq!(back.voiced, f0.voiced);
        for (a, b) in back.f0_hz.iter().zip(&f0.f0_hz) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn feature_roundtrip_is_bit_exact(
            t in 1usize..20,
            d in 1usize..12,
            seed in any::<u64>(),
            kind in 0u8..3,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((t, d), |_| rng.gen_range(-100.0f32..100.0));
            let feats = FeatureSeq::new(data, FeatureKind::from_code(kind).unwrap());
            let p = tmp(&format!("prop-{t}-{d}-{seed}.crnk"));
            save_feature_seq(&p, &feats).unwrap();
            let back = load_feature_seq(&p).unwrap();
            prop_assert_eq!(back.kind, feats.kind);
            prop_assert_eq!(back.data, feats.data);
        }
    }
}

//! Binary feature file.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "T2IF" | u16 version=1 | u32 n_samples | u32 C | u32 D | u32 N
//! per sample: C × u8 label (0/1) | D × f32 global | N·D × f32 local (row-major)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::wire::ByteReader;

pub const FEATURE_MAGIC: &[u8; 4] = b"T2IF";
pub const FEATURE_VERSION: u16 = 1;

pub fn write_feature_file<T: Scalar>(samples: &[FeatureSet<T>], path: impl AsRef<Path>) -> Result<()> {
    let (c, d, n) = samples
        .first()
        .map_or((0, 0, 0), |s| (s.num_classes(), s.dim(), s.slots()));
    for (i, s) in samples.iter().enumerate() {
        if (s.num_classes(), s.dim(), s.slots(), s.local.cols()) != (c, d, n, d) {
            return Err(Error::Consistency(format!(
                "sample {i} has C={}, D={}, N={} but sample 0 has C={c}, D={d}, N={n}",
                s.num_classes(),
                s.dim(),
                s.slots()
            )));
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    for v in [samples.len(), c, d, n] {
        out.write_all(&dim_u32(v)?.to_le_bytes())?;
    }
    for s in samples {
        let labels: Vec<u8> = s.labels.iter().map(|&l| u8::from(l)).collect();
        out.write_all(&labels)?;
        for &x in s.global.iter().chain(s.local.data()) {
            out.write_all(&x.to_f32_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} does not fit in u32")))
}

pub fn read_feature_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<FeatureSet<T>>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(FEATURE_MAGIC)?;
    r.expect_version(FEATURE_VERSION)?;
    let n_samples = r.u32()? as usize;
    let c = r.u32()? as usize;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n_samples > 0 && (c == 0 || d == 0 || n == 0) {
        return Err(Error::Format { offset: 10, message: format!("zero dimension in header: C={c}, D={d}, N={n}") });
    }
    let mut samples = Vec::with_capacity(n_samples.min(1 << 16));
    for _ in 0..n_samples {
        let mut labels = Vec::with_capacity(c);
        for _ in 0..c {
            let at = r.offset();
            match r.u8()? {
                0 => labels.push(false),
                1 => labels.push(true),
                other => return Err(Error::Format { offset: at, message: format!("label byte {other} is not 0/1") }),
            }
        }
        let global: Vec<T> = r.f32s(d)?.into_iter().map(|x| T::lit(x as f64)).collect();
        let local: Vec<T> = r.f32s(n * d)?.into_iter().map(|x| T::lit(x as f64)).collect();
        samples.push(FeatureSet { global, local: Tensor::matrix(n, d, local)?, labels });
    }
    r.expect_end()?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_samples(count: usize) -> Vec<FeatureSet<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        (0..count)
            .map(|_| FeatureSet {
                global: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                local: Tensor::matrix(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                labels: (0..4).map(|_| rng.random_bool(0.5)).collect(),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.t2if");
        let samples: Vec<FeatureSet<f32>> = random_samples(10).iter().map(FeatureSet::cast).collect();
        write_feature_file(&samples, &path).unwrap();
        let back: Vec<FeatureSet<f32>> = read_feature_file(&path).unwrap();
        assert_eq!(back, samples);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 16 + 10 * (4 + 4 * (5 + 15)));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.t2if");
        write_feature_file(&random_samples(2), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature_file::<f64>(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.t2if");
        write_feature_file(&random_samples(5), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let per_sample = 4 + 4 * 20;
        fs::write(&path, &bytes[..bytes.len() - per_sample]).unwrap();
        match read_feature_file::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, 22 + 4 * per_sample),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_dimensions_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = random_samples(2);
        samples[1].labels.push(true);
        assert!(matches!(
            write_feature_file(&samples, dir.path().join("f")),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn empty_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.t2if");
        write_feature_file::<f64>(&[], &path).unwrap();
        assert!(read_feature_file::<f64>(&path).unwrap().is_empty());
    }
}

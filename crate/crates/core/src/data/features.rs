use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spatial::BoxMatrix;
use crate::visual_relation::ObjectSet;

pub const FEATURE_MAGIC: &[u8; 4] = b"PARF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub objects: ObjectSet,
}

/// Per-image object features and boxes sharing one feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub d_v: usize,
    pub images: Vec<ImageRecord>,
}

/// Values are stored as 32-bit reals; anything not exactly representable
/// is rounded on write.
pub fn write_features(set: &FeatureSet, path: &Path) -> Result<()> {
    let d_v = u32::try_from(set.d_v).map_err(|_| Error::invalid("d_v too large"))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&(set.images.len() as u64).to_le_bytes())?;
    out.write_all(&d_v.to_le_bytes())?;
    for img in &set.images {
        let objects = &img.objects;
        if objects.dim() != set.d_v {
            return Err(Error::shape("write_features", objects.features.shape(), &[objects.len(), set.d_v]));
        }
        out.write_all(&img.id.to_le_bytes())?;
        out.write_all(&(objects.len() as u32).to_le_bytes())?;
        for &v in objects.features.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for b in objects.boxes.rows() {
            for &v in b {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.bytes.len() as u64,
                reason: format!(
                    "truncated {what}: needed {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn reals(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.corrupt("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt { offset: self.pos as u64, reason: reason.to_string() }
    }
}

/// Parses a feature container. `expected_d_v` rejects files whose feature
/// width disagrees with the model configuration.
pub fn read_features(bytes: &[u8], expected_d_v: Option<usize>) -> Result<FeatureSet> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("header")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let count = r.u64("header")?;
    let d_v = r.u32("header")? as usize;
    if let Some(want) = expected_d_v {
        if want != d_v {
            return Err(Error::Config(format!(
                "feature file has d_v {d_v}, configuration expects {want}"
            )));
        }
    }
    if d_v == 0 {
        return Err(r.corrupt("d_v is zero"));
    }
    let mut images = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let id = r.u64("image id")?;
        let n = r.u32("object count")? as usize;
        if n == 0 {
            return Err(Error::Corrupt { offset: start as u64, reason: format!("image {id} has no objects") });
        }
        let v = r.reals(n * d_v, "feature matrix")?;
        let p = r.reals(n * 4, "box matrix")?;
        let boxes = BoxMatrix::new(p.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
            .map_err(|e| Error::Corrupt { offset: start as u64, reason: format!("image {id}: {e}") })?;
        let objects = ObjectSet::new(Tensor::matrix(n, d_v, v), boxes)?;
        images.push(ImageRecord { id, objects });
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes after last image"));
    }
    Ok(FeatureSet { d_v, images })
}

pub fn load_features(path: &Path, expected_d_v: Option<usize>) -> Result<FeatureSet> {
    read_features(&fs::read(path)?, expected_d_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSet {
        let img = |id, n: usize| ImageRecord {
            id,
            objects: ObjectSet::new(
                Tensor::matrix(n, 3, (0..n * 3).map(|i| i as f64 * 0.25 - 1.0).collect()),
                BoxMatrix::new((0..n).map(|i| [0.25 * i as f64, 0.5, 0.25, 0.375]).collect()).unwrap(),
            )
            .unwrap(),
        };
        FeatureSet { d_v: 3, images: vec![img(7, 2), img(9, 3)] }
    }

    #[test]
    fn write_then_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.parf");
        let set = sample();
        write_features(&set, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PARF");
        let back = load_features(&path, Some(3)).unwrap();
        assert_eq!(back, set);
        write_features(&back, &dir.path().join("g.parf")).unwrap();
        assert_eq!(fs::read(dir.path().join("g.parf")).unwrap(), bytes);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.parf");
        write_features(&sample(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_features(&bad, None), Err(Error::Format(_))));

        let cut = &bytes[..bytes.len() - 6];
        match read_features(cut, None) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected corruption error, got {other:?}"),
        }
        assert!(matches!(read_features(&bytes[..10], None), Err(Error::Corrupt { .. })));
        assert!(matches!(read_features(&bytes, Some(4)), Err(Error::Config(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_features(&extra, None), Err(Error::Corrupt { .. })));
    }
}

//! Binary triplet file.
//!
//! ```text
//! magic "TAMM" | version u32 | flags u32 (bit 0: synthetic) | seed u64
//! classes, heldout_classes, samples_per_class, eval_seen_per_class,
//! views, latent_dim, feature_dim, points, n            (u32 each)
//! shift_strength, overlap, private_scale, instance_noise, view_noise,
//! point_jitter, geometry_scale                          (f64 each)
//! points        n × points × 3   f32
//! images        views × n × d    f32
//! texts         n × d            f32
//! labels        n                u32
//! splits        n                u8
//! class bank    classes × d      f32
//! ```
//! Everything is little-endian.

use std::fs;
use std::path::Path;

use crate::encoders::PointCloud;
use crate::error::{Result, TammError};
use crate::numkit::Matrix;

use super::{DatasetHeader, Split, TripletSet};

pub const MAGIC: &[u8; 4] = b"TAMM";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| TammError::config(format!("{v} does not fit the u32 header field")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(TammError::format(
                self.offset(),
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count.saturating_mul(8), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count.saturating_mul(4), what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(TammError::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_triplets(set: &TripletSet) -> Result<Vec<u8>> {
    set.validate()?;
    let h = &set.header;
    let n = set.len();
    let d = set.feature_dim();
    let points = set.clouds.first().map_or(h.points, PointCloud::len);
    if set.clouds.iter().any(|c| c.len() != points) {
        return Err(TammError::shape("all clouds must have the same number of points"));
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(usize::from(h.synthetic))?;
    w.buf.extend_from_slice(&h.seed.to_le_bytes());
    for v in [
        set.class_bank.rows(),
        h.heldout_classes,
        h.samples_per_class,
        h.eval_seen_per_class,
        set.views(),
        h.latent_dim,
        d,
        points,
        n,
    ] {
        w.u32(v)?;
    }
    for v in [
        h.shift_strength,
        h.overlap,
        h.private_scale,
        h.instance_noise,
        h.view_noise,
        h.point_jitter,
        h.geometry_scale,
    ] {
        w.f64(v);
    }
    for c in &set.clouds {
        for p in c.points() {
            w.f32s(p);
        }
    }
    for view in &set.images {
        w.f32s(view.as_slice());
    }
    w.f32s(set.texts.as_slice());
    for &l in &set.labels {
        w.buf.extend_from_slice(&l.to_le_bytes());
    }
    w.buf.extend(set.splits.iter().map(|s| s.tag()));
    w.f32s(set.class_bank.as_slice());
    Ok(w.buf)
}

pub fn decode_triplets(bytes: &[u8]) -> Result<TripletSet> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(TammError::format(0, format!("bad magic {magic:?}, expected \"TAMM\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(TammError::UnsupportedVersion {
            what: "triplet file",
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let flags = r.u32("flags")?;
    let seed = r.u64("seed")?;
    let mut dims = [0usize; 9];
    for (slot, name) in dims.iter_mut().zip([
        "classes",
        "heldout_classes",
        "samples_per_class",
        "eval_seen_per_class",
        "views",
        "latent_dim",
        "feature_dim",
        "points",
        "sample count",
    ]) {
        *slot = r.u32(name)? as usize;
    }
    let [classes, heldout_classes, samples_per_class, eval_seen_per_class, views, latent_dim, d, points, n] =
        dims;
    let mut reals = [0f64; 7];
    for r_slot in reals.iter_mut() {
        *r_slot = r.f64("header parameter")?;
    }
    let [shift_strength, overlap, private_scale, instance_noise, view_noise, point_jitter, geometry_scale] = reals;
    if views == 0 || d == 0 {
        return Err(TammError::format(r.offset(), "views and feature dim must be ≥ 1"));
    }

    let cloud_start = r.offset();
    let raw = r.f32s(n.saturating_mul(points).saturating_mul(3), "points")?;
    let mut clouds = Vec::with_capacity(n);
    for (i, chunk) in raw.chunks_exact(points * 3).enumerate() {
        let pts = chunk.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        clouds.push(PointCloud::new(pts).map_err(|e| {
            TammError::format(cloud_start, format!("cloud {i}: {e}"))
        })?);
    }
    let mut images = Vec::with_capacity(views);
    for _ in 0..views {
        images.push(Matrix::new(n, d, r.f32s(n * d, "image features")?)?);
    }
    let texts = Matrix::new(n, d, r.f32s(n * d, "text features")?)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32("labels")?);
    }
    let mut splits = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let tag = r.u8("splits")?;
        splits.push(
            Split::from_tag(tag)
                .ok_or_else(|| TammError::format(at, format!("unknown split tag {tag}")))?,
        );
    }
    let class_bank = Matrix::new(classes, d, r.f32s(classes * d, "class bank")?)?;
    r.finish()?;

    let set = TripletSet {
        header: DatasetHeader {
            synthetic: flags & 1 == 1,
            seed,
            classes,
            heldout_classes,
            samples_per_class,
            eval_seen_per_class,
            views,
            latent_dim,
            feature_dim: d,
            points,
            shift_strength,
            overlap,
            private_scale,
            instance_noise,
            view_noise,
            point_jitter,
            geometry_scale,
        },
        clouds,
        images,
        texts,
        labels,
        splits,
        class_bank,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_triplets(set: &TripletSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_triplets(set)?)?;
    Ok(())
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<TripletSet> {
    decode_triplets(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec, ShiftSetting};

    fn tiny() -> TripletSet {
        generate(&DatasetSpec {
            classes: 3,
            heldout_classes: 1,
            samples_per_class: 6,
            eval_seen_per_class: 2,
            views: 2,
            latent_dim: 4,
            feature_dim: 8,
            points: 8,
            shift: ShiftSetting::Fixed(0.2),
            seed: 1,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let set = tiny();
        let bytes = encode_triplets(&set).unwrap();
        let back = decode_triplets(&bytes).unwrap();
        assert_eq!(set, back);
        assert_eq!(encode_triplets(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_triplets(&tiny()).unwrap();
        for cut in [0, 3, 10, 60, bytes.len() / 2, bytes.len() - 1] {
            match decode_triplets(&bytes[..cut]) {
                Err(TammError::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_triplets(&tiny()).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_triplets(&wrong), Err(TammError::Format { offset: 0, .. })));
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_triplets(&bytes),
            Err(TammError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_triplets(&tiny()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_triplets(&bytes), Err(TammError::Format { .. })));
    }
}

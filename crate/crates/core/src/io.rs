//! On-disk formats. Binary containers are little-endian and start with their
//! name as magic bytes; ground truth is line-oriented text.
//!
//! | magic   | contents                                                   |
//! |---------|------------------------------------------------------------|
//! | `DSC1`  | `u32 dim_bits, u32 images`, per image `id, u32 n, n rows of u64 words` |
//! | `GVEC1` | `u32 dim, u8 kind, u32 count`, per row `id, dim x f32`       |
//! | `VOC1`  | `u8 method, u32 k, u32 dim`, then u64 words or f64 values    |
//! | `BMM1`  | `u32 k, u32 dim`, weights, means (f64)                      |
//! | `GMM1`  | `u32 k, u32 dim`, weights, means, variances (f64)           |
//! | `PCA1`  | `u32 in, u32 out`, mean, explained variance, components (f64) |
//! | `GT1`   | text: `query`, `positive`, `junk`, `exclude-query` lines     |
//!
//! Ids are a `u32` byte length followed by UTF-8. Writers go through a
//! temporary file in the destination directory and rename it into place.

use std::io::Write;
use std::path::Path;

use crate::clustering::{Centroids, LearningMethod, Vocabulary};
use crate::descriptor::{tail_mask, words_for, PackedDescriptorSet, RealMatrix};
use crate::encode::{VectorKind, VectorSet};
use crate::error::{Error, Result};
use crate::mixture::{BernoulliMixture, GaussianMixture};
use crate::postproc::PcaModel;
use crate::retrieval::{GroundTruth, QueryTruth};

pub const DSC_MAGIC: &[u8] = b"DSC1";
pub const GVEC_MAGIC: &[u8] = b"GVEC1";
pub const VOC_MAGIC: &[u8] = b"VOC1";
pub const BMM_MAGIC: &[u8] = b"BMM1";
pub const GMM_MAGIC: &[u8] = b"GMM1";
pub const PCA_MAGIC: &[u8] = b"PCA1";
pub const GT_MAGIC: &str = "GT1";

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], label: &'a Path) -> Self {
        Reader { bytes, pos: 0, label }
    }

    fn fail<T>(&self, offset: usize, expected: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            file: self.label.to_path_buf(),
            offset: offset as u64,
            expected: expected.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(self.pos, format!("{what} ({n} bytes), found end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.pos;
        if self.bytes.len() < magic.len() || &self.bytes[..magic.len()] != magic {
            return self.fail(at, format!("magic `{}`", String::from_utf8_lossy(magic)));
        }
        self.pos += magic.len();
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Ensures `count` items of `size` bytes remain before allocating.
    fn reserve(&self, count: usize, size: usize, what: &str) -> Result<()> {
        match count.checked_mul(size) {
            Some(n) if n <= self.bytes.len() - self.pos => Ok(()),
            _ => self.fail(self.pos, format!("{count} {what}, found end of file")),
        }
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        self.reserve(n, 8, what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn id(&mut self) -> Result<String> {
        let len = self.u32("id length")? as usize;
        let at = self.pos;
        let raw = self.take(len, "id bytes")?;
        match std::str::from_utf8(raw) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail(at, "UTF-8 id"),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(self.pos, "end of file");
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("format", format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_id(out: &mut Vec<u8>, id: &str) -> Result<()> {
    put_u32(out, id.len(), "id length")?;
    out.extend_from_slice(id.as_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes `bytes` to `path` via a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_descriptors(dim_bits: usize, images: &[PackedDescriptorSet]) -> Result<Vec<u8>> {
    let mut out = DSC_MAGIC.to_vec();
    put_u32(&mut out, dim_bits, "dim_bits")?;
    put_u32(&mut out, images.len(), "image count")?;
    for img in images {
        crate::error::check_dim(dim_bits, img.dim_bits())?;
        put_id(&mut out, img.image_id())?;
        put_u32(&mut out, img.len(), "descriptor count")?;
        for w in img.raw_words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8], label: &Path) -> Result<(usize, Vec<PackedDescriptorSet>)> {
    let mut r = Reader::new(bytes, label);
    r.magic(DSC_MAGIC)?;
    let at = r.pos;
    let dim_bits = r.u32("dim_bits")? as usize;
    if dim_bits == 0 {
        return r.fail(at, "positive dim_bits");
    }
    let wpr = words_for(dim_bits);
    let pad = !tail_mask(dim_bits);
    let n_images = r.u32("image count")? as usize;
    let mut images = Vec::new();
    for _ in 0..n_images {
        let id = r.id()?;
        let count = r.u32("descriptor count")? as usize;
        r.reserve(count, wpr * 8, "descriptors")?;
        let mut data = Vec::with_capacity(count * wpr);
        for _ in 0..count {
            for w in 0..wpr {
                let at = r.pos;
                let word = r.u64("descriptor word")?;
                if w == wpr - 1 && word & pad != 0 {
                    return r.fail(at, "zero padding bits");
                }
                data.push(word);
            }
        }
        images.push(PackedDescriptorSet::from_words(id, dim_bits, data)?);
    }
    r.finish()?;
    Ok((dim_bits, images))
}

pub fn write_descriptors(path: &Path, dim_bits: usize, images: &[PackedDescriptorSet]) -> Result<()> {
    write_atomic(path, &encode_descriptors(dim_bits, images)?)
}

pub fn read_descriptors(path: &Path) -> Result<(usize, Vec<PackedDescriptorSet>)> {
    decode_descriptors(&read_file(path)?, path)
}

/// Values are stored as f32.
pub fn encode_vectors(set: &VectorSet) -> Result<Vec<u8>> {
    let mut out = GVEC_MAGIC.to_vec();
    put_u32(&mut out, set.dim(), "dim")?;
    out.push(set.kind().tag());
    put_u32(&mut out, set.len(), "vector count")?;
    for (id, row) in set.iter() {
        put_id(&mut out, id)?;
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vectors(bytes: &[u8], label: &Path) -> Result<VectorSet> {
    let mut r = Reader::new(bytes, label);
    r.magic(GVEC_MAGIC)?;
    let dim = r.u32("dim")? as usize;
    let at = r.pos;
    let tag = r.u8("kind tag")?;
    let Some(kind) = VectorKind::from_tag(tag) else {
        return r.fail(at, format!("vector kind tag 0..=5, found {tag}"));
    };
    let count = r.u32("vector count")? as usize;
    let mut set = VectorSet::new(kind, dim);
    let mut row = vec![0.0; dim];
    for _ in 0..count {
        let id = r.id()?;
        r.reserve(dim, 4, "f32 values")?;
        for v in row.iter_mut() {
            let at = r.pos;
            let x = f32::from_le_bytes(r.take(4, "f32 value")?.try_into().expect("4 bytes"));
            if !x.is_finite() {
                return r.fail(at, "finite f32 value");
            }
            *v = x as f64;
        }
        set.push(id, &row)?;
    }
    r.finish()?;
    Ok(set)
}

pub fn write_vectors(path: &Path, set: &VectorSet) -> Result<()> {
    write_atomic(path, &encode_vectors(set)?)
}

pub fn read_vectors(path: &Path) -> Result<VectorSet> {
    decode_vectors(&read_file(path)?, path)
}

fn method_tag(m: LearningMethod) -> u8 {
    match m {
        LearningMethod::KMeans => 0,
        LearningMethod::KMajority => 1,
        LearningMethod::KMedoids => 2,
    }
}

pub fn encode_vocabulary(v: &Vocabulary) -> Result<Vec<u8>> {
    let mut out = VOC_MAGIC.to_vec();
    out.push(method_tag(v.method()));
    put_u32(&mut out, v.k(), "k")?;
    put_u32(&mut out, v.dim(), "dim")?;
    match v.centroids() {
        Centroids::Real(m) => put_f64s(&mut out, m.as_slice()),
        Centroids::Binary(s) => {
            for w in s.raw_words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_vocabulary(bytes: &[u8], label: &Path) -> Result<Vocabulary> {
    let mut r = Reader::new(bytes, label);
    r.magic(VOC_MAGIC)?;
    let at = r.pos;
    let method = match r.u8("method tag")? {
        0 => LearningMethod::KMeans,
        1 => LearningMethod::KMajority,
        2 => LearningMethod::KMedoids,
        t => return r.fail(at, format!("method tag 0..=2, found {t}")),
    };
    let at = r.pos;
    let k = r.u32("k")? as usize;
    let dim = r.u32("dim")? as usize;
    if k == 0 || dim == 0 {
        return r.fail(at, "positive k and dim");
    }
    let centroids = if method.is_binary() {
        let wpr = words_for(dim);
        r.reserve(k, wpr * 8, "centroids")?;
        let pad = !tail_mask(dim);
        let mut data = Vec::with_capacity(k * wpr);
        for _ in 0..k {
            for w in 0..wpr {
                let at = r.pos;
                let word = r.u64("centroid word")?;
                if w == wpr - 1 && word & pad != 0 {
                    return r.fail(at, "zero padding bits");
                }
                data.push(word);
            }
        }
        Centroids::Binary(PackedDescriptorSet::from_words("vocabulary", dim, data)?)
    } else {
        let values = r.f64s(k * dim, "centroid values")?;
        let rows: Vec<&[f64]> = values.chunks_exact(dim).collect();
        Centroids::Real(RealMatrix::from_rows(&rows)?)
    };
    r.finish()?;
    Vocabulary::new(method, centroids)
}

pub fn write_vocabulary(path: &Path, v: &Vocabulary) -> Result<()> {
    write_atomic(path, &encode_vocabulary(v)?)
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    decode_vocabulary(&read_file(path)?, path)
}

fn mixture_header(r: &mut Reader<'_>, magic: &[u8]) -> Result<(usize, usize)> {
    r.magic(magic)?;
    let at = r.pos;
    let k = r.u32("k")? as usize;
    let dim = r.u32("dim")? as usize;
    if k == 0 || dim == 0 {
        return r.fail(at, "positive k and dim");
    }
    Ok((k, dim))
}

fn model_error(label: &Path, e: Error) -> Error {
    match e {
        Error::InvalidParameter { reason, .. } => Error::Parse {
            file: label.to_path_buf(),
            offset: 0,
            expected: format!("valid model parameters ({reason})"),
        },
        other => other,
    }
}

pub fn encode_bmm(m: &BernoulliMixture) -> Result<Vec<u8>> {
    let mut out = BMM_MAGIC.to_vec();
    put_u32(&mut out, m.k(), "k")?;
    put_u32(&mut out, m.dim(), "dim")?;
    put_f64s(&mut out, m.weights());
    put_f64s(&mut out, m.means());
    Ok(out)
}

pub fn decode_bmm(bytes: &[u8], label: &Path) -> Result<BernoulliMixture> {
    let mut r = Reader::new(bytes, label);
    let (k, dim) = mixture_header(&mut r, BMM_MAGIC)?;
    let weights = r.f64s(k, "weights")?;
    let means = r.f64s(k * dim, "means")?;
    r.finish()?;
    BernoulliMixture::new(weights, means, dim).map_err(|e| model_error(label, e))
}

pub fn write_bmm(path: &Path, m: &BernoulliMixture) -> Result<()> {
    write_atomic(path, &encode_bmm(m)?)
}

pub fn read_bmm(path: &Path) -> Result<BernoulliMixture> {
    decode_bmm(&read_file(path)?, path)
}

pub fn encode_gmm(m: &GaussianMixture) -> Result<Vec<u8>> {
    let mut out = GMM_MAGIC.to_vec();
    put_u32(&mut out, m.k(), "k")?;
    put_u32(&mut out, m.dim(), "dim")?;
    put_f64s(&mut out, m.weights());
    put_f64s(&mut out, m.means());
    put_f64s(&mut out, m.variances());
    Ok(out)
}

pub fn decode_gmm(bytes: &[u8], label: &Path) -> Result<GaussianMixture> {
    let mut r = Reader::new(bytes, label);
    let (k, dim) = mixture_header(&mut r, GMM_MAGIC)?;
    let weights = r.f64s(k, "weights")?;
    let means = r.f64s(k * dim, "means")?;
    let variances = r.f64s(k * dim, "variances")?;
    r.finish()?;
    GaussianMixture::new(weights, means, variances, dim).map_err(|e| model_error(label, e))
}

pub fn write_gmm(path: &Path, m: &GaussianMixture) -> Result<()> {
    write_atomic(path, &encode_gmm(m)?)
}

pub fn read_gmm(path: &Path) -> Result<GaussianMixture> {
    decode_gmm(&read_file(path)?, path)
}

pub fn encode_pca(p: &PcaModel) -> Result<Vec<u8>> {
    let mut out = PCA_MAGIC.to_vec();
    put_u32(&mut out, p.input_dim(), "input dim")?;
    put_u32(&mut out, p.output_dim(), "output dim")?;
    put_f64s(&mut out, p.mean());
    put_f64s(&mut out, p.explained_variance());
    put_f64s(&mut out, p.components());
    Ok(out)
}

pub fn decode_pca(bytes: &[u8], label: &Path) -> Result<PcaModel> {
    let mut r = Reader::new(bytes, label);
    r.magic(PCA_MAGIC)?;
    let at = r.pos;
    let input = r.u32("input dim")? as usize;
    let output = r.u32("output dim")? as usize;
    if input == 0 || output == 0 || output > input {
        return r.fail(at, "0 < output dim <= input dim");
    }
    let mean = r.f64s(input, "mean")?;
    let explained = r.f64s(output, "explained variance")?;
    let components = r.f64s(input * output, "components")?;
    r.finish()?;
    PcaModel::new(mean, components, explained).map_err(|e| model_error(label, e))
}

pub fn write_pca(path: &Path, p: &PcaModel) -> Result<()> {
    write_atomic(path, &encode_pca(p)?)
}

pub fn read_pca(path: &Path) -> Result<PcaModel> {
    decode_pca(&read_file(path)?, path)
}

/// Ground truth text:
///
/// ```text
/// GT1
/// # comment
/// query q1
/// positive a
/// junk j
/// exclude-query
/// ```
///
/// `positive`, `junk` and `exclude-query` apply to the latest `query`.
pub fn parse_ground_truth(text: &str, label: &Path) -> Result<GroundTruth> {
    let fail = |offset: usize, expected: &str| Error::Parse {
        file: label.to_path_buf(),
        offset: offset as u64,
        expected: expected.to_string(),
    };
    let mut queries: Vec<QueryTruth> = Vec::new();
    let mut seen_magic = false;
    let mut offset = 0usize;
    for raw in text.split_inclusive('\n') {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_magic {
            if line != GT_MAGIC {
                return Err(fail(line_start, "magic line `GT1`"));
            }
            seen_magic = true;
            continue;
        }
        let mut parts = line.split_whitespace();
        let keyword = parts.next().expect("line is not blank");
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(fail(line_start, "one id per line"));
        }
        match (keyword, arg) {
            ("query", Some(id)) => queries.push(QueryTruth {
                query: id.to_string(),
                positives: Default::default(),
                junk: Default::default(),
                exclude_query: false,
            }),
            (kw @ ("positive" | "junk"), Some(id)) => {
                let Some(q) = queries.last_mut() else {
                    return Err(fail(line_start, "`query <id>` before positives or junk"));
                };
                if kw == "positive" {
                    q.positives.insert(id.to_string());
                } else {
                    q.junk.insert(id.to_string());
                }
            }
            ("exclude-query", None) => match queries.last_mut() {
                Some(q) => q.exclude_query = true,
                None => return Err(fail(line_start, "`query <id>` before exclude-query")),
            },
            _ => return Err(fail(line_start, "`query <id>`, `positive <id>`, `junk <id>` or `exclude-query`")),
        }
    }
    if !seen_magic {
        return Err(fail(0, "magic line `GT1`"));
    }
    GroundTruth::new(queries).map_err(|e| match e {
        Error::InvalidParameter { reason, .. } => fail(0, &format!("consistent ground truth ({reason})")),
        other => other,
    })
}

pub fn format_ground_truth(gt: &GroundTruth) -> String {
    let mut out = format!("{GT_MAGIC}\n");
    for q in gt.queries() {
        out.push_str(&format!("query {}\n", q.query));
        for p in &q.positives {
            out.push_str(&format!("positive {p}\n"));
        }
        for j in &q.junk {
            out.push_str(&format!("junk {j}\n"));
        }
        if q.exclude_query {
            out.push_str("exclude-query\n");
        }
    }
    out
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        offset: e.valid_up_to() as u64,
        expected: "UTF-8 text".into(),
    })?;
    parse_ground_truth(text, path)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_atomic(path, format_ground_truth(gt).as_bytes())
}

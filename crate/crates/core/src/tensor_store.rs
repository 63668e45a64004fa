//! NCT1 binary tensor files and the bundle manifest that groups them.
//!
//! Layout of one tensor file (all integers little-endian):
//!
//! ```text
//! "NCT1" | version u8 = 1 | dtype u8 | ndim u8 | ndim x u64 extents | payload
//! ```
//!
//! The payload holds the scalars in row-major order, IEEE-754 little-endian for
//! floats and two's-complement little-endian for `i64`.
//!
//! A bundle is a directory holding one tensor file per role plus a
//! `manifest.txt` of `key = value` lines. Tensor entries are written as
//! `tensor.<role> = <relative path>`; `dataset_name` names the data set and
//! every other key is carried through as free metadata.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCT1";
pub const FORMAT_VERSION: u8 = 1;
pub const MAX_NDIM: usize = 8;
pub const MANIFEST_FILE: &str = "manifest.txt";

const ENTRY_PREFIX: &str = "tensor.";
const CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    I64 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::I64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }
}

/// Dtype-tagged, shaped, row-major array.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(Error::Contract(format!(
                "tensor rank must be in 1..={MAX_NDIM}, got {}",
                shape.len()
            )));
        }
        let expected = element_count(&shape)
            .ok_or_else(|| Error::Contract(format!("shape {shape:?} overflows usize")))?;
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major f64 matrix as a 2-D f64 tensor.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(m.row(r).iter().copied());
        }
        Tensor {
            shape: vec![rows, cols],
            data: TensorData::F64(data),
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: TensorData::F64(v.iter().copied().collect()),
        }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        Tensor {
            shape: vec![labels.len()],
            data: TensorData::I64(labels.iter().map(|&l| l as i64).collect()),
        }
    }

    /// All elements widened to f64. Integer tensors are rejected.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::I64(_) => Err(Error::Contract(
                "expected a floating-point tensor, found i64".into(),
            )),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "expected a 2-D tensor, found shape {:?}",
                self.shape
            )));
        }
        let values = self.to_f64_vec()?;
        Ok(DMatrix::from_row_slice(
            self.shape[0],
            self.shape[1],
            &values,
        ))
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a 1-D tensor, found shape {:?}",
                self.shape
            )));
        }
        Ok(DVector::from_vec(self.to_f64_vec()?))
    }

    /// Non-negative class indices from an i64 tensor.
    pub fn to_labels(&self) -> Result<Vec<usize>> {
        match &self.data {
            TensorData::I64(v) if self.shape.len() == 1 => v
                .iter()
                .map(|&l| {
                    usize::try_from(l)
                        .map_err(|_| Error::Contract(format!("negative class label {l}")))
                })
                .collect(),
            TensorData::I64(_) => Err(Error::Contract(format!(
                "labels must be 1-D, found shape {:?}",
                self.shape
            ))),
            _ => Err(Error::Contract("labels must be stored as i64".into())),
        }
    }

    /// Equality on shape, dtype and raw element bits (NaN payloads included).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .map(|x| x.to_bits())
                .eq(b.iter().map(|x| x.to_bits())),
            (TensorData::F64(a), TensorData::F64(b)) => a
                .iter()
                .map(|x| x.to_bits())
                .eq(b.iter().map(|x| x.to_bits())),
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn header_len(ndim: usize) -> usize {
    MAGIC.len() + 3 + 8 * ndim
}

struct OffsetWriter<W> {
    inner: W,
    offset: u64,
}

impl<W: Write> OffsetWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Write {
            offset: self.offset,
            source,
        })?;
        self.offset += bytes.len() as u64;
        Ok(())
    }
}

/// Serialize `t` to `sink`, returning the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: W) -> Result<u64> {
    let mut w = OffsetWriter {
        inner: sink,
        offset: 0,
    };
    let mut header = Vec::with_capacity(header_len(t.shape.len()));
    header.extend_from_slice(MAGIC);
    header.push(FORMAT_VERSION);
    header.push(t.dtype() as u8);
    header.push(t.shape.len() as u8);
    for &extent in &t.shape {
        header.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    w.put(&header)?;

    let mut buf = Vec::with_capacity(CHUNK);
    macro_rules! emit {
        ($values:expr) => {
            for v in $values.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
                if buf.len() >= CHUNK {
                    w.put(&buf)?;
                    buf.clear();
                }
            }
        };
    }
    match &t.data {
        TensorData::F32(v) => emit!(v),
        TensorData::F64(v) => emit!(v),
        TensorData::I64(v) => emit!(v),
    }
    w.put(&buf)?;
    w.inner.flush().map_err(|source| Error::Write {
        offset: w.offset,
        source,
    })?;
    Ok(w.offset)
}

fn read_header_bytes<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated header".into()),
        _ => Error::Format(format!("reading header: {e}")),
    })
}

pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor> {
    let mut fixed = [0u8; 7];
    read_header_bytes(&mut source, &mut fixed)?;
    if &fixed[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"NCT1\"",
            String::from_utf8_lossy(&fixed[..4])
        )));
    }
    if fixed[4] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", fixed[4])));
    }
    let dtype = DType::from_code(fixed[5])?;
    let ndim = fixed[6] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format(format!("rank {ndim} outside 1..={MAX_NDIM}")));
    }
    let mut extents = vec![0u8; 8 * ndim];
    read_header_bytes(&mut source, &mut extents)?;
    let shape = extents
        .chunks_exact(8)
        .map(|c| {
            let e = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))
        })
        .collect::<Result<Vec<_>>>()?;
    let count =
        element_count(&shape).ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let expected = count
        .checked_mul(dtype.size_of())
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?
        as u64;

    let mut payload = Vec::with_capacity(expected.min(1 << 28) as usize);
    source
        .by_ref()
        .take(expected)
        .read_to_end(&mut payload)
        .map_err(|e| Error::Format(format!("reading payload: {e}")))?;
    if payload.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            actual: payload.len() as u64,
        });
    }

    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
        DType::I64 => TensorData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
    };
    Ok(Tensor { shape, data })
}

pub fn write_tensor_file(t: &Tensor, path: &Path) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::io(path, None, e))?;
    write_tensor(t, BufWriter::new(file))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, None, e))?;
    read_tensor(BufReader::new(file))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BundleManifest {
    /// Role name to tensor path, relative to the manifest's directory.
    pub entries: BTreeMap<String, PathBuf>,
    pub dataset_name: String,
    pub metadata: BTreeMap<String, String>,
}

impl BundleManifest {
    pub fn new(dataset_name: impl Into<String>) -> Self {
        BundleManifest {
            dataset_name: dataset_name.into(),
            ..Default::default()
        }
    }

    /// Manifest with one `<role>.nct` entry per given role.
    pub fn for_roles<'a>(
        dataset_name: impl Into<String>,
        roles: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut m = Self::new(dataset_name);
        for role in roles {
            m.entries
                .insert(role.to_owned(), PathBuf::from(format!("{role}.nct")));
        }
        m
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    fn render(&self) -> Result<String> {
        let mut out = String::from("# NCT1 bundle manifest\n");
        check_value("dataset_name", &self.dataset_name)?;
        out.push_str(&format!("dataset_name = {}\n", self.dataset_name));
        for (role, path) in &self.entries {
            check_key(role)?;
            let rel = path.to_str().ok_or_else(|| {
                Error::Consistency(format!("path for role {role:?} is not UTF-8"))
            })?;
            if path.is_absolute() {
                return Err(Error::Consistency(format!(
                    "path for role {role:?} must be relative, got {rel}"
                )));
            }
            check_value(role, rel)?;
            out.push_str(&format!("{ENTRY_PREFIX}{role} = {rel}\n"));
        }
        for (key, value) in &self.metadata {
            check_key(key)?;
            if key == "dataset_name" || key.starts_with(ENTRY_PREFIX) {
                return Err(Error::Consistency(format!(
                    "metadata key {key:?} collides with a reserved key"
                )));
            }
            check_value(key, value)?;
            out.push_str(&format!("{key} = {value}\n"));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BundleManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "manifest line {}: expected `key = value`",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Format(format!(
                    "manifest line {}: empty key",
                    lineno + 1
                )));
            }
            if key == "dataset_name" {
                m.dataset_name = value.to_owned();
            } else if let Some(role) = key.strip_prefix(ENTRY_PREFIX) {
                m.entries.insert(role.to_owned(), PathBuf::from(value));
            } else {
                m.metadata.insert(key.to_owned(), value.to_owned());
            }
        }
        Ok(m)
    }
}

fn check_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains(['=', '\n', '\r', '#']) || key.trim() != key {
        return Err(Error::Consistency(format!("invalid manifest key {key:?}")));
    }
    Ok(())
}

fn check_value(key: &str, value: &str) -> Result<()> {
    if value.contains(['\n', '\r']) || value.trim() != value {
        return Err(Error::Consistency(format!(
            "invalid manifest value for {key:?}: {value:?}"
        )));
    }
    Ok(())
}

fn check_label_extent(tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(labels) = tensors.get("labels") {
        let features = tensors
            .get("features")
            .ok_or_else(|| Error::Consistency("bundle has labels but no features".into()))?;
        let n = features.shape()[0];
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "labels length {} does not match features extent {n}",
                labels.len()
            )));
        }
    }
    Ok(())
}

/// Write every manifest entry's tensor plus the manifest into `dir`.
pub fn write_bundle(
    manifest: &BundleManifest,
    tensors: &BTreeMap<String, Tensor>,
    dir: &Path,
) -> Result<PathBuf> {
    for role in manifest.entries.keys() {
        if !tensors.contains_key(role) {
            return Err(Error::Consistency(format!(
                "no tensor supplied for role {role:?}"
            )));
        }
    }
    if let Some(extra) = tensors.keys().find(|r| !manifest.entries.contains_key(*r)) {
        return Err(Error::Consistency(format!(
            "tensor for role {extra:?} is not named in the manifest"
        )));
    }
    check_label_extent(tensors)?;
    let text = manifest.render()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, None, e))?;
    for (role, rel) in &manifest.entries {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, Some(role), e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, Some(role), e))?;
        write_tensor(&tensors[role], BufWriter::new(file))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, None, e))?;
    Ok(manifest_path)
}

/// Accepts either the manifest file itself or the bundle directory.
pub fn read_bundle(path: &Path) -> Result<(BundleManifest, BTreeMap<String, Tensor>)> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, None, e))?;
    let manifest = BundleManifest::parse(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut tensors = BTreeMap::new();
    for (role, rel) in &manifest.entries {
        let p = base.join(rel);
        let file = File::open(&p).map_err(|e| Error::io(&p, Some(role), e))?;
        tensors.insert(role.clone(), read_tensor(BufReader::new(file))?);
    }
    check_label_extent(&tensors)?;
    Ok((manifest, tensors))
}

//! Tensor interchange: NPY v1.0 files, the activation manifest and
//! per-layer activation stacks.
//!
//! Only little-endian `f4`/`f8` C-order arrays are written. Big-endian float
//! descriptors are accepted on read and byte-swapped; integer, complex and
//! object arrays are rejected.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ModelGraph;

/// The npy magic string.
pub const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Header (magic + version + length + dict) is padded to a multiple of this.
const HEADER_ALIGN: usize = 64;

pub const MANIFEST_FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?}: only float32 and float64 tensors are accepted")]
    UnsupportedDtype(String),
    #[error("truncated data: header implies {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("{0} trailing bytes after tensor data")]
    TrailingData(usize),
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("cannot parse {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl TensorIoError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            TensorIoError::MissingFile(path.to_path_buf())
        } else {
            TensorIoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub type Result<T, E = TensorIoError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }
}

/// Element buffer of a [`TensorFile`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }
}

/// A dense row-major float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorIoError::InvalidShape {
                shape,
                reason: format!("holds {} elements, data has {}", expected, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Widens to f64. Exact for both dtypes.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Keeps only `indices` (in the given order) along `axis`.
    pub fn select_axis(&self, axis: usize, indices: &[usize]) -> Result<TensorFile> {
        if axis >= self.shape.len() {
            return Err(TensorIoError::ShapeMismatch(format!(
                "axis {} out of range for rank {}",
                axis,
                self.shape.len()
            )));
        }
        let dim = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(TensorIoError::ShapeMismatch(format!(
                "index {bad} out of range for axis {axis} of size {dim}"
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();

        fn gather<T: Copy>(src: &[T], outer: usize, dim: usize, inner: usize, idx: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(outer * idx.len() * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                for &i in idx {
                    out.extend_from_slice(&src[base + i * inner..base + (i + 1) * inner]);
                }
            }
            out
        }

        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(gather(v, outer, dim, inner, indices)),
            TensorData::F64(v) => TensorData::F64(gather(v, outer, dim, inner, indices)),
        };
        TensorFile::new(shape, data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorIoError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorIoError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// NPY encoding
// ---------------------------------------------------------------------------

fn header_dict(dtype: Dtype, shape: &[usize]) -> String {
    let dims = match shape {
        [single] => format!("{single},"),
        _ => shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "),
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}), }}",
        dtype.descr(),
        dims
    )
}

/// Serializes `tensor` as an NPY v1.0 byte stream.
pub fn write_npy<W: Write>(writer: &mut W, tensor: &TensorFile) -> io::Result<()> {
    let mut dict = header_dict(tensor.dtype(), &tensor.shape).into_bytes();
    // magic(6) + version(2) + u16 length(2) + dict + '\n'
    let unpadded = NPY_MAGIC.len() + 2 + 2 + dict.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(b' ', padding));
    dict.push(b'\n');
    let header_len = u16::try_from(dict.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "npy header too long for v1.0"))?;

    writer.write_all(NPY_MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&header_len.to_le_bytes())?;
    writer.write_all(&dict)?;

    match &tensor.data {
        TensorData::F32(v) => {
            let mut buf = Vec::with_capacity(v.len() * 4);
            v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            writer.write_all(&buf)
        }
        TensorData::F64(v) => {
            let mut buf = Vec::with_capacity(v.len() * 8);
            v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            writer.write_all(&buf)
        }
    }
}

/// Parses an NPY byte stream.
pub fn read_npy(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(TensorIoError::MalformedHeader("missing \\x93NUMPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, dict_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 => {
            if bytes.len() < 12 {
                return Err(TensorIoError::MalformedHeader("header length truncated".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => {
            return Err(TensorIoError::MalformedHeader(format!(
                "unsupported format version {major}.{minor}"
            )))
        }
    };
    let data_start = dict_start + header_len;
    if bytes.len() < data_start {
        return Err(TensorIoError::MalformedHeader(format!(
            "header declares {header_len} bytes, file has {}",
            bytes.len() - dict_start
        )));
    }
    let text = std::str::from_utf8(&bytes[dict_start..data_start])
        .map_err(|_| TensorIoError::MalformedHeader("header is not ASCII".into()))?;
    let header = HeaderDict::parse(text)?;

    if header.fortran_order {
        return Err(TensorIoError::MalformedHeader(
            "fortran_order arrays are not supported".into(),
        ));
    }
    let (dtype, big_endian) = parse_descr(&header.descr)?;
    check_shape(&header.shape).map_err(|_| {
        TensorIoError::MalformedHeader(format!(
            "shape {:?} must be non-empty with positive dimensions",
            header.shape
        ))
    })?;

    let count: usize = header.shape.iter().product();
    let expected = count * dtype.size();
    let body = &bytes[data_start..];
    if body.len() < expected {
        return Err(TensorIoError::TruncatedData {
            expected,
            actual: body.len(),
        });
    }
    if body.len() > expected {
        return Err(TensorIoError::TrailingData(body.len() - expected));
    }

    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            body.chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    if big_endian {
                        f32::from_be_bytes(b)
                    } else {
                        f32::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            body.chunks_exact(8)
                .map(|c| {
                    let b: [u8; 8] = c.try_into().expect("chunk of 8");
                    if big_endian {
                        f64::from_be_bytes(b)
                    } else {
                        f64::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
    };
    TensorFile::new(header.shape, data)
}

fn parse_descr(descr: &str) -> Result<(Dtype, bool)> {
    let (order, kind) = match descr.as_bytes().first() {
        Some(b'<') | Some(b'=') => (false, &descr[1..]),
        Some(b'>') => (true, &descr[1..]),
        Some(b'|') => (false, &descr[1..]),
        _ => (false, descr),
    };
    match kind {
        "f4" => Ok((Dtype::F32, order)),
        "f8" => Ok((Dtype::F64, order)),
        _ => Err(TensorIoError::UnsupportedDtype(descr.to_string())),
    }
}

/// The three keys of an npy header dictionary.
#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

#[derive(Debug)]
enum PyValue {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut p = LiteralParser {
            src: text.trim_end().as_bytes(),
            pos: 0,
        };
        let entries = p.dict()?;
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        for (key, value) in entries {
            match (key.as_str(), value) {
                ("descr", PyValue::Str(s)) => descr = Some(s),
                ("fortran_order", PyValue::Bool(b)) => fortran_order = Some(b),
                ("shape", PyValue::Tuple(t)) => shape = Some(t),
                (k, v) => {
                    return Err(TensorIoError::MalformedHeader(format!(
                        "unexpected header entry {k:?}: {v:?}"
                    )))
                }
            }
        }
        match (descr, fortran_order, shape) {
            (Some(descr), Some(fortran_order), Some(shape)) => Ok(Self {
                descr,
                fortran_order,
                shape,
            }),
            _ => Err(TensorIoError::MalformedHeader(
                "header must define descr, fortran_order and shape".into(),
            )),
        }
    }
}

/// Minimal parser for the Python literal subset used in npy headers.
struct LiteralParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl LiteralParser<'_> {
    fn err<T>(&self, what: &str) -> Result<T> {
        Err(TensorIoError::MalformedHeader(format!(
            "{what} at byte {} of header dict",
            self.pos
        )))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn dict(&mut self) -> Result<Vec<(String, PyValue)>> {
        if !self.eat(b'{') {
            return self.err("expected '{'");
        }
        let mut out = Vec::new();
        loop {
            if self.eat(b'}') {
                break;
            }
            let key = self.string()?;
            if !self.eat(b':') {
                return self.err("expected ':'");
            }
            let value = self.value()?;
            out.push((key, value));
            if !self.eat(b',') {
                if self.eat(b'}') {
                    break;
                }
                return self.err("expected ',' or '}'");
            }
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("unexpected trailing characters");
        }
        Ok(out)
    }

    fn string(&mut self) -> Result<String> {
        self.skip_ws();
        let quote = match self.src.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return self.err("expected string"),
        };
        let start = self.pos + 1;
        let end = match self.src[start..].iter().position(|&c| c == quote) {
            Some(off) => start + off,
            None => return self.err("unterminated string"),
        };
        self.pos = end + 1;
        Ok(String::from_utf8_lossy(&self.src[start..end]).into_owned())
    }

    fn value(&mut self) -> Result<PyValue> {
        self.skip_ws();
        match self.src.get(self.pos) {
            Some(b'\'' | b'"') => self.string().map(PyValue::Str),
            Some(b'(') => self.tuple().map(PyValue::Tuple),
            _ => {
                let rest = &self.src[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(PyValue::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(PyValue::Bool(false))
                } else {
                    self.err("expected value")
                }
            }
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.eat(b'(');
        let mut dims = Vec::new();
        loop {
            if self.eat(b')') {
                break;
            }
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return self.err("expected integer");
            }
            // Python 2 headers may carry an `L` suffix.
            let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
            if self.src.get(self.pos) == Some(&b'L') {
                self.pos += 1;
            }
            match digits.parse() {
                Ok(d) => dims.push(d),
                Err(_) => return self.err("dimension overflows usize"),
            }
            if !self.eat(b',') {
                if self.eat(b')') {
                    break;
                }
                return self.err("expected ',' or ')'");
            }
        }
        Ok(dims)
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TensorIoError::io(path, e))?;
    read_npy(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_npy(&mut buf, tensor).map_err(|e| TensorIoError::io(path, e))?;
    atomic_write(path, &buf).map_err(|e| TensorIoError::io(path, e))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Feature maps of one layer for `T` samples, stored as `(T, N, H, W)`.
///
/// Values are widened to f64 on load; every statistic accumulates in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    layer_id: String,
    samples: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ActivationSet {
    pub fn new(layer_id: impl Into<String>, shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let [samples, channels, height, width] = shape;
        if samples * channels * height * width != data.len() {
            return Err(TensorIoError::ShapeMismatch(format!(
                "activation shape {:?} holds {} elements, data has {}",
                shape,
                samples * channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            samples,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(layer_id: impl Into<String>, tensor: &TensorFile) -> Result<Self> {
        let layer_id = layer_id.into();
        let shape: [usize; 4] = tensor.shape().try_into().map_err(|_| {
            TensorIoError::ShapeMismatch(format!(
                "activations for {layer_id:?} must have rank 4 (T, N, H, W), got shape {:?}",
                tensor.shape()
            ))
        })?;
        Self::new(layer_id, shape, tensor.to_f64_vec())
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    /// Sample count `T`.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flattened spatial size `H * W`.
    pub fn map_len(&self) -> usize {
        self.height * self.width
    }

    /// Flattened feature map of `channel` in `sample`.
    pub fn map(&self, sample: usize, channel: usize) -> &[f64] {
        let len = self.map_len();
        let start = (sample * self.channels + channel) * len;
        &self.data[start..start + len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer_id: String,
    pub tensor: PathBuf,
    pub samples: usize,
}

/// Binds activation tensors to model-graph layers.
///
/// Relative paths are resolved against the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub model_graph: PathBuf,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TensorIoError::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|source| TensorIoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(TensorIoError::Manifest(format!(
                "unsupported format_version {:?}",
                self.format_version
            )));
        }
        if self.entries.is_empty() {
            return Err(TensorIoError::Manifest("no entries".into()));
        }
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.layer_id.as_str()) {
                return Err(TensorIoError::Manifest(format!(
                    "duplicate layer_id {:?}",
                    entry.layer_id
                )));
            }
            if entry.samples == 0 {
                return Err(TensorIoError::Manifest(format!(
                    "entry {:?} declares zero samples",
                    entry.layer_id
                )));
            }
        }
        let first = self.entries[0].samples;
        if let Some(e) = self.entries.iter().find(|e| e.samples != first) {
            return Err(TensorIoError::ShapeMismatch(format!(
                "inconsistent sample count: {:?} has {}, {:?} has {}",
                self.entries[0].layer_id, first, e.layer_id, e.samples
            )));
        }
        Ok(())
    }

    /// Checks that every entry names a layer of `graph`.
    pub fn validate_against(&self, graph: &ModelGraph) -> Result<()> {
        for entry in &self.entries {
            if graph.layer(&entry.layer_id).is_none() {
                return Err(TensorIoError::Manifest(format!(
                    "layer_id {:?} does not exist in the model graph",
                    entry.layer_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn model_graph_path(&self) -> PathBuf {
        self.resolve(&self.model_graph)
    }
}

/// Loads every manifest entry as an [`ActivationSet`], in parallel.
pub fn load_activations(manifest: &Manifest) -> Result<BTreeMap<String, ActivationSet>> {
    manifest.check()?;
    let sets = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let tensor = read_tensor(manifest.resolve(&entry.tensor))?;
            let acts = ActivationSet::from_tensor(entry.layer_id.clone(), &tensor)?;
            if acts.samples() != entry.samples {
                return Err(TensorIoError::ShapeMismatch(format!(
                    "{:?}: manifest declares {} samples, tensor holds {}",
                    entry.layer_id,
                    entry.samples,
                    acts.samples()
                )));
            }
            Ok(acts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sets.into_iter().map(|a| (a.layer_id().to_string(), a)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &TensorFile) -> TensorFile {
        let mut buf = Vec::new();
        write_npy(&mut buf, t).unwrap();
        read_npy(&buf).unwrap()
    }

    #[test]
    fn singleton_roundtrip() {
        let t = TensorFile::from_f64(vec![1], vec![0.0]).unwrap();
        let back = roundtrip(&t);
        assert_eq!(back.shape(), &[1]);
        assert_eq!(back.data(), &TensorData::F64(vec![0.0]));
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let t = TensorFile::from_f64(vec![2, 3], vec![0.5; 6]).unwrap();
        let mut buf = Vec::new();
        write_npy(&mut buf, &t).unwrap();
        // 10-byte preamble + 57-byte dict + newline, padded to 128; then 6 * 8 data bytes.
        assert_eq!(buf.len(), 128 + 48);
        assert_eq!(&buf[..8], b"\x93NUMPY\x01\x00");
        assert_eq!(u16::from_le_bytes([buf[8], buf[9]]), 118);
        assert_eq!(buf[127], b'\n');
        let dict = std::str::from_utf8(&buf[10..128]).unwrap();
        assert!(dict.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }"));
    }

    #[test]
    fn one_dim_shape_uses_trailing_comma() {
        assert_eq!(
            header_dict(Dtype::F32, &[5]),
            "{'descr': '<f4', 'fortran_order': False, 'shape': (5,), }"
        );
    }

    #[test]
    fn truncated_data_is_reported() {
        let t = TensorFile::from_f64(vec![2, 2], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_npy(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 8);
        match read_npy(&buf) {
            Err(TensorIoError::TruncatedData { expected, actual }) => {
                assert_eq!((expected, actual), (32, 24));
            }
            other => panic!("expected TruncatedData, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(
            read_npy(b"\x93NUMPZ\x01\x00\x00\x00"),
            Err(TensorIoError::MalformedHeader(_))
        ));
        let t = TensorFile::from_f32(vec![1], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        write_npy(&mut buf, &t).unwrap();
        buf[6] = 9;
        assert!(matches!(read_npy(&buf), Err(TensorIoError::MalformedHeader(_))));
    }

    fn raw_npy(dict: &str, body: &[u8]) -> Vec<u8> {
        let mut d = dict.as_bytes().to_vec();
        d.push(b'\n');
        let mut buf = NPY_MAGIC.to_vec();
        buf.extend_from_slice(&[1, 0]);
        buf.extend_from_slice(&(d.len() as u16).to_le_bytes());
        buf.extend_from_slice(&d);
        buf.extend_from_slice(body);
        buf
    }

    #[test]
    fn integer_dtype_rejected() {
        let buf = raw_npy("{'descr': '<i4', 'fortran_order': False, 'shape': (2,), }", &[0; 8]);
        assert!(matches!(read_npy(&buf), Err(TensorIoError::UnsupportedDtype(d)) if d == "<i4"));
    }

    #[test]
    fn big_endian_floats_are_swapped() {
        let body: Vec<u8> = [1.5f64, -2.0].iter().flat_map(|x| x.to_be_bytes()).collect();
        let buf = raw_npy("{'shape': (2,), 'fortran_order': False, 'descr': '>f8'}", &body);
        let t = read_npy(&buf).unwrap();
        assert_eq!(t.data(), &TensorData::F64(vec![1.5, -2.0]));
    }

    #[test]
    fn fortran_order_rejected() {
        let buf = raw_npy("{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }", &[0; 4]);
        assert!(matches!(read_npy(&buf), Err(TensorIoError::MalformedHeader(_))));
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(matches!(
            TensorFile::from_f64(vec![], vec![1.0]),
            Err(TensorIoError::InvalidShape { .. })
        ));
        assert!(TensorFile::from_f64(vec![2, 0], vec![]).is_err());
        let buf = raw_npy("{'descr': '<f8', 'fortran_order': False, 'shape': (), }", &[0; 8]);
        assert!(matches!(read_npy(&buf), Err(TensorIoError::MalformedHeader(_))));
    }

    #[test]
    fn select_axis_gathers_slices() {
        // (2, 3, 2) with value = flat index
        let t = TensorFile::from_f64(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let s = t.select_axis(1, &[0, 2]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.to_f64_vec(), vec![0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0]);
        assert!(t.select_axis(1, &[3]).is_err());
        assert!(t.select_axis(3, &[0]).is_err());
    }

    #[test]
    fn activation_rank_checked() {
        let t = TensorFile::from_f64(vec![2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(
            ActivationSet::from_tensor("a", &t),
            Err(TensorIoError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn activation_map_indexing() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(f64::from).collect();
        let a = ActivationSet::new("l", [2, 3, 2, 2], data).unwrap();
        assert_eq!(a.map(0, 0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(a.map(1, 2), &[20.0, 21.0, 22.0, 23.0]);
    }
}

//! Volume files, the pipeline configuration document and case directories.
//!
//! A volume file is a UTF-8 text header of `Key = Value` lines followed by a
//! little-endian raw payload (x-fastest, component-interleaved). The last
//! header line is `DataOffsetBytes`, the byte offset of the payload.

use crate::biomech::{DEFAULT_ENERGY_FLOOR, DEFAULT_MODULI_WINDOW};
use crate::classify::{CardiacClass, ClassifierSpec};
use crate::error::{Error, Result};
use crate::phantom::PhantomCase;
use crate::propagation::{CineSequence, DEFAULT_LWV_WINDOW, DEFAULT_N_ADJACENT};
use crate::registration::RegConfig;
use crate::scalar::Real;
use crate::selection::CvSpec;
use crate::volgrid::{DisplacementField, Grid, LabelMap, Volume};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Payload element encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Uint8,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Uint8 => 1,
        }
    }

    fn token(self) -> &'static str {
        match self {
            ElementType::Float32 => "FLOAT32",
            ElementType::Uint8 => "UINT8",
        }
    }
}

/// Kind of object stored in a volume file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectType {
    Image,
    VectorField,
    LabelMap,
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectType::Image => "Image",
            ObjectType::VectorField => "VectorField",
            ObjectType::LabelMap => "LabelMap",
        })
    }
}

impl ObjectType {
    fn expected(self) -> (ElementType, usize) {
        match self {
            ObjectType::Image => (ElementType::Float32, 1),
            ObjectType::VectorField => (ElementType::Float32, 3),
            ObjectType::LabelMap => (ElementType::Uint8, 1),
        }
    }
}

/// Parsed header.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub object_type: ObjectType,
    pub grid: Grid,
    pub element_type: ElementType,
    pub channels: usize,
    pub data_offset: usize,
}

impl VolumeHeader {
    pub fn payload_len(&self) -> usize {
        self.grid.len() * self.channels * self.element_type.size()
    }
}

/// Contents of a volume file. Float payloads are held as `f32` so a
/// read-write cycle is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Image(Volume<f32>),
    VectorField(DisplacementField<f32>),
    Labels(LabelMap),
}

impl VolumeFile {
    pub fn object_type(&self) -> ObjectType {
        match self {
            VolumeFile::Image(_) => ObjectType::Image,
            VolumeFile::VectorField(_) => ObjectType::VectorField,
            VolumeFile::Labels(_) => ObjectType::LabelMap,
        }
    }

    pub fn grid(&self) -> Grid {
        match self {
            VolumeFile::Image(v) => v.grid,
            VolumeFile::VectorField(f) => f.grid,
            VolumeFile::Labels(l) => l.grid,
        }
    }
}

fn join3<T: fmt::Debug>(v: &[T; 3]) -> String {
    format!("{:?} {:?} {:?}", v[0], v[1], v[2])
}

fn header_text(object_type: ObjectType, grid: &Grid) -> String {
    let (et, ch) = object_type.expected();
    let body = format!(
        "ObjectType = {object_type}\nNDims = 3\nDimSize = {}\nElementSpacing = {}\nOffset = {}\nElementType = {}\nChannels = {ch}\n",
        join3(&grid.dims),
        join3(&grid.spacing),
        join3(&grid.origin),
        et.token()
    );
    // the offset line counts itself; iterate until the digit count settles
    let mut offset = body.len();
    loop {
        let line = format!("DataOffsetBytes = {offset}\n");
        let total = body.len() + line.len();
        if total == offset {
            return body + &line;
        }
        offset = total;
    }
}

/// Serializes a volume file to bytes.
pub fn encode_volume(v: &VolumeFile) -> Vec<u8> {
    let mut out = header_text(v.object_type(), &v.grid()).into_bytes();
    match v {
        VolumeFile::Image(img) => img.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeFile::VectorField(f) => f.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeFile::Labels(l) => out.extend_from_slice(&l.data),
    }
    out
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::MalformedHeader(format!("{key} needs three values, got `{value}`")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| Error::MalformedHeader(format!("{key}: cannot parse `{p}`")))?);
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Parses the header at the start of `bytes`.
pub fn parse_header(bytes: &[u8]) -> Result<VolumeHeader> {
    let mut pos = 0;
    let mut fields: Vec<(String, String)> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("header ends before DataOffsetBytes".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
        pos += end + 1;
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::MalformedHeader(format!("line `{line}` is not `Key = Value`")))?;
        let key = k.trim().to_string();
        if fields.iter().any(|(f, _)| *f == key) {
            return Err(Error::MalformedHeader(format!("duplicate key {key}")));
        }
        fields.push((key.clone(), v.trim().to_string()));
        if key == "DataOffsetBytes" {
            break;
        }
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::MalformedHeader(format!("missing key {key}")))
    };
    const KEYS: [&str; 8] = ["ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "Channels", "DataOffsetBytes"];
    if let Some((k, _)) = fields.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
        return Err(Error::MalformedHeader(format!("unknown key {k}")));
    }
    let object_type = match get("ObjectType")? {
        "Image" => ObjectType::Image,
        "VectorField" => ObjectType::VectorField,
        "LabelMap" => ObjectType::LabelMap,
        other => return Err(Error::MalformedHeader(format!("unknown ObjectType `{other}`"))),
    };
    if get("NDims")? != "3" {
        return Err(Error::MalformedHeader(format!("NDims must be 3, got {}", get("NDims")?)));
    }
    let dims: [usize; 3] = parse_triple("DimSize", get("DimSize")?)?;
    let spacing: [f64; 3] = parse_triple("ElementSpacing", get("ElementSpacing")?)?;
    let origin: [f64; 3] = parse_triple("Offset", get("Offset")?)?;
    let element_type = match get("ElementType")? {
        "FLOAT32" => ElementType::Float32,
        "UINT8" => ElementType::Uint8,
        other => return Err(Error::UnknownElementType(other.to_string())),
    };
    let channels: usize = get("Channels")?
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("Channels: cannot parse `{}`", get("Channels").unwrap_or(""))))?;
    let data_offset: usize = get("DataOffsetBytes")?
        .parse()
        .map_err(|_| Error::MalformedHeader("DataOffsetBytes is not an integer".into()))?;
    let (want_et, want_ch) = object_type.expected();
    if channels != want_ch {
        return Err(Error::Schema(format!("ObjectType {object_type} requires Channels = {want_ch}, got {channels}")));
    }
    if element_type != want_et {
        return Err(Error::Schema(format!("ObjectType {object_type} requires ElementType {}", want_et.token())));
    }
    if data_offset != pos {
        return Err(Error::MalformedHeader(format!("DataOffsetBytes is {data_offset} but the header ends at byte {pos}")));
    }
    let grid = Grid::new(dims, spacing, origin).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(VolumeHeader { object_type, grid, element_type, channels, data_offset })
}

/// Parses a complete volume file.
pub fn decode_volume(bytes: &[u8]) -> Result<VolumeFile> {
    let h = parse_header(bytes)?;
    let payload = &bytes[h.data_offset..];
    let expected = h.payload_len();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, actual: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::Schema(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    let floats = || payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<f32>>();
    Ok(match h.object_type {
        ObjectType::Image => VolumeFile::Image(Volume::new(h.grid, floats())?),
        ObjectType::VectorField => VolumeFile::VectorField(DisplacementField::new(h.grid, floats())?),
        ObjectType::LabelMap => VolumeFile::Labels(LabelMap::new(h.grid, payload.to_vec())?),
    })
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_volume_file(path: &Path) -> Result<VolumeFile> {
    decode_volume(&std::fs::read(path).map_err(|e| io_context(path, e))?)
}

pub fn write_volume_file(path: &Path, v: &VolumeFile) -> Result<()> {
    std::fs::write(path, encode_volume(v)).map_err(|e| io_context(path, e))
}

fn to_f32<T: Real>(data: &[T]) -> Vec<f32> {
    data.iter().map(|v| v.to_f64_lossy() as f32).collect()
}

fn from_f32<T: Real>(data: &[f32]) -> Vec<T> {
    data.iter().map(|&v| T::lit(v as f64)).collect()
}

fn wrong_kind(path: &Path, want: ObjectType, got: ObjectType) -> Error {
    Error::Schema(format!("{}: expected ObjectType {want}, found {got}", path.display()))
}

/// Writes an image; values are stored as FLOAT32.
pub fn write_image<T: Real>(path: &Path, v: &Volume<T>) -> Result<()> {
    write_volume_file(path, &VolumeFile::Image(Volume { grid: v.grid, data: to_f32(&v.data) }))
}

pub fn write_field<T: Real>(path: &Path, f: &DisplacementField<T>) -> Result<()> {
    write_volume_file(path, &VolumeFile::VectorField(DisplacementField { grid: f.grid, data: to_f32(&f.data) }))
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    write_volume_file(path, &VolumeFile::Labels(l.clone()))
}

pub fn read_image<T: Real>(path: &Path) -> Result<Volume<T>> {
    match read_volume_file(path)? {
        VolumeFile::Image(v) => Ok(Volume { grid: v.grid, data: from_f32(&v.data) }),
        other => Err(wrong_kind(path, ObjectType::Image, other.object_type())),
    }
}

pub fn read_field<T: Real>(path: &Path) -> Result<DisplacementField<T>> {
    match read_volume_file(path)? {
        VolumeFile::VectorField(f) => Ok(DisplacementField { grid: f.grid, data: from_f32(&f.data) }),
        other => Err(wrong_kind(path, ObjectType::VectorField, other.object_type())),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_volume_file(path)? {
        VolumeFile::Labels(l) => Ok(l),
        other => Err(wrong_kind(path, ObjectType::LabelMap, other.object_type())),
    }
}

/// Every tunable of the pipeline in one strict JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Registration, similarity and material parameters.
    pub registration: RegConfig,
    pub moduli_window: usize,
    pub energy_floor: f64,
    pub lwv_window: usize,
    pub n_adjacent: usize,
    pub classifier: ClassifierSpec,
    pub cv: CvSpec,
    /// Seed for fold assignment in selection, evaluation and curves.
    pub seed: u64,
    pub curve_repeats: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            registration: RegConfig::default(),
            moduli_window: DEFAULT_MODULI_WINDOW,
            energy_floor: DEFAULT_ENERGY_FLOOR,
            lwv_window: DEFAULT_LWV_WINDOW,
            n_adjacent: DEFAULT_N_ADJACENT,
            classifier: ClassifierSpec::default(),
            cv: CvSpec::default(),
            seed: 0,
            curve_repeats: 50,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        for (w, name) in [(self.moduli_window, "moduli_window"), (self.lwv_window, "lwv_window")] {
            if w == 0 || w % 2 == 0 {
                return Err(Error::invalid(format!("{name} must be a positive odd integer, got {w}")));
            }
        }
        if !(self.energy_floor > 0.0 && self.energy_floor.is_finite()) {
            return Err(Error::invalid("energy_floor must be positive"));
        }
        if self.n_adjacent == 0 {
            return Err(Error::invalid("n_adjacent must be at least 1"));
        }
        if self.cv.folds < 2 {
            return Err(Error::invalid("cv.folds must be at least 2"));
        }
        if self.curve_repeats == 0 {
            return Err(Error::invalid("curve_repeats must be at least 1"));
        }
        if let ClassifierSpec::Knn { k } = self.classifier {
            if k == 0 {
                return Err(Error::invalid("knn k must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| io_context(path, e))?)
    }
}

/// `case.json` of a case directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub case_id: String,
    pub class: CardiacClass,
    pub n_frames: usize,
    pub ed_index: usize,
    pub es_index: usize,
}

pub const MANIFEST_FILE: &str = "case.json";
pub const LABELS_ED_FILE: &str = "labels_ed.vol";
pub const LABELS_ES_FILE: &str = "labels_es.vol";

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.vol")
}

/// A case directory loaded into memory.
#[derive(Clone, Debug)]
pub struct CaseData {
    pub manifest: CaseManifest,
    pub sequence: CineSequence<f64>,
}

/// Writes frames, ED/ES labels and the manifest into `dir` (created if
/// missing).
pub fn write_case_dir(dir: &Path, case_id: &str, class: CardiacClass, seq: &CineSequence<f64>) -> Result<()> {
    seq.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_image(&dir.join(frame_file(t)), f)?;
    }
    write_labels(&dir.join(LABELS_ED_FILE), &seq.labels_ed)?;
    write_labels(&dir.join(LABELS_ES_FILE), &seq.labels_es)?;
    let manifest =
        CaseManifest { case_id: case_id.to_string(), class, n_frames: seq.len(), ed_index: seq.ed_index, es_index: seq.es_index };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| io_context(&path, e))
}

pub fn write_phantom_case(dir: &Path, case: &PhantomCase) -> Result<()> {
    write_case_dir(dir, &case.case_id, case.class, &case.sequence)
}

pub fn read_case_dir(dir: &Path) -> Result<CaseData> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: CaseManifest = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| io_context(&path, e))?)?;
    let frames = (0..manifest.n_frames).map(|t| read_image(&dir.join(frame_file(t)))).collect::<Result<Vec<_>>>()?;
    let labels_ed = read_labels(&dir.join(LABELS_ED_FILE))?;
    let labels_es = read_labels(&dir.join(LABELS_ES_FILE))?;
    let sequence = CineSequence::new(frames, manifest.ed_index, manifest.es_index, labels_ed, labels_es)?;
    Ok(CaseData { manifest, sequence })
}

/// Case directories directly under `root` (those holding a manifest), in
/// name order.
pub fn list_case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| io_context(root, e))? {
        let p = entry?.path();
        if p.join(MANIFEST_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

//! Self-describing array container and training-block export.
//!
//! File layout:
//!
//! ```text
//! magic    8 bytes   "DCEPKCTR"
//! hlen     u64 LE    header length in bytes
//! header   hlen      UTF-8 JSON (see `Header`)
//! payload  ...       little-endian elements, x fastest
//! ```
//!
//! `float32` and `complex64` (interleaved re/im `f32`) are the regular
//! element types; `float64` is used where exported values must survive
//! exact arithmetic.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::error::PkError;
use crate::kspace::{KSpaceSeries, SamplingMask};
use crate::model::{AcquisitionContext, PkMaps, VascularInputFunction};
use crate::scalar::Real;
use crate::volume::{Dims3, DynamicSeries, SeriesKind, Volume};

pub const MAGIC: &[u8; 8] = b"DCEPKCTR";
pub const SCHEMA_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "pkc";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("container holds {found}, expected {expected}")]
    WrongContent { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] PkError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ContainerError {
    /// Stable numeric code, used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            Self::BadMagic => 10,
            Self::CorruptHeader(_) => 11,
            Self::LengthMismatch { .. } => 12,
            Self::UnsupportedVersion(_) => 13,
            Self::UnsupportedFormat(_) => 14,
            Self::WrongContent { .. } => 15,
            Self::Model(_) => 16,
            Self::Io(_) => 17,
        }
    }
}

pub type IoResult<T> = std::result::Result<T, ContainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Float32,
    Complex64,
    Float64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            Self::Float32 => 4,
            Self::Complex64 | Self::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub spec: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub name: String,
    pub dims: Vec<usize>,
    pub element_type: String,
    pub byte_order: String,
    pub units: String,
    pub frame_times: Option<Vec<f64>>,
    pub provenance: Provenance,
    #[serde(default)]
    pub attrs: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    Float32(Vec<f32>),
    Complex64(Vec<Complex<f32>>),
    Float64(Vec<f64>),
}

impl ArrayData {
    pub fn element_type(&self) -> ElementType {
        match self {
            Self::Float32(_) => ElementType::Float32,
            Self::Complex64(_) => ElementType::Complex64,
            Self::Float64(_) => ElementType::Float64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Float32(v) => v.len(),
            Self::Complex64(v) => v.len(),
            Self::Float64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real payload widened to `T`; complex payloads are rejected.
    pub fn to_real<T: Real>(&self) -> IoResult<Vec<T>> {
        match self {
            Self::Float32(v) => Ok(v.iter().map(|&x| T::lit(x as f64)).collect()),
            Self::Float64(v) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
            Self::Complex64(_) => Err(ContainerError::WrongContent {
                expected: "real array".into(),
                found: "complex64".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub data: ArrayData,
}

impl Container {
    pub fn new(name: &str, dims: Vec<usize>, units: &str, data: ArrayData) -> Self {
        let element_type = match data.element_type() {
            ElementType::Float32 => "float32",
            ElementType::Complex64 => "complex64",
            ElementType::Float64 => "float64",
        };
        Self {
            header: Header {
                schema_version: SCHEMA_VERSION,
                name: name.to_string(),
                dims,
                element_type: element_type.to_string(),
                byte_order: "little".to_string(),
                units: units.to_string(),
                frame_times: None,
                provenance: Provenance::default(),
                attrs: Map::new(),
            },
            data,
        }
    }

    pub fn with_frame_times<T: Real>(mut self, times: &[T]) -> Self {
        self.header.frame_times = Some(times.iter().map(|t| t.as_f64()).collect());
        self
    }

    pub fn with_attr(mut self, key: &str, value: Value) -> Self {
        self.header.attrs.insert(key.to_string(), value);
        self
    }

    pub fn with_provenance(mut self, seed: Option<u64>, spec: Option<Value>) -> Self {
        self.header.provenance = Provenance { seed, spec };
        self
    }

    pub fn to_bytes(&self) -> IoResult<Vec<u8>> {
        let expected: usize = self.header.dims.iter().product();
        if expected != self.data.len() {
            return Err(ContainerError::LengthMismatch {
                expected: expected * self.data.element_type().size(),
                found: self.data.len() * self.data.element_type().size(),
            });
        }
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| ContainerError::CorruptHeader(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            ArrayData::Float32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::Float64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::Complex64(v) => v.iter().for_each(|c| {
                out.extend_from_slice(&c.re.to_le_bytes());
                out.extend_from_slice(&c.im.to_le_bytes());
            }),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> IoResult<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(ContainerError::CorruptHeader(format!(
                "header length {hlen} exceeds file size"
            )));
        }
        let raw: Value = serde_json::from_slice(&body[..hlen])
            .map_err(|e| ContainerError::CorruptHeader(e.to_string()))?;
        match raw.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(ContainerError::UnsupportedVersion(v as u32)),
            None => {
                return Err(ContainerError::CorruptHeader(
                    "missing schema_version".into(),
                ))
            }
        }
        let header: Header = serde_json::from_value(raw)
            .map_err(|e| ContainerError::CorruptHeader(e.to_string()))?;
        if header.byte_order != "little" {
            return Err(ContainerError::UnsupportedFormat(format!(
                "byte order '{}' (only little-endian payloads are supported)",
                header.byte_order
            )));
        }
        let et = match header.element_type.as_str() {
            "float32" => ElementType::Float32,
            "complex64" => ElementType::Complex64,
            "float64" => ElementType::Float64,
            other => {
                return Err(ContainerError::UnsupportedFormat(format!(
                    "element type '{other}'"
                )))
            }
        };
        let payload = &body[hlen..];
        let count: usize = header.dims.iter().product();
        let expected = count * et.size();
        if payload.len() != expected {
            return Err(ContainerError::LengthMismatch {
                expected,
                found: payload.len(),
            });
        }
        let data = match et {
            ElementType::Float32 => ArrayData::Float32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            ElementType::Float64 => ArrayData::Float64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            ElementType::Complex64 => ArrayData::Complex64(
                payload
                    .chunks_exact(8)
                    .map(|b| {
                        Complex::new(
                            f32::from_le_bytes(b[..4].try_into().unwrap()),
                            f32::from_le_bytes(b[4..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
        };
        Ok(Self { header, data })
    }

    pub fn attr_f64(&self, key: &str) -> IoResult<f64> {
        self.header
            .attrs
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| {
                ContainerError::CorruptHeader(format!("missing numeric attribute '{key}'"))
            })
    }

    fn expect_name(&self, name: &str) -> IoResult<()> {
        if self.header.name != name {
            return Err(ContainerError::WrongContent {
                expected: name.into(),
                found: self.header.name.clone(),
            });
        }
        Ok(())
    }

    fn dims_rank(&self, rank: usize) -> IoResult<&[usize]> {
        if self.header.dims.len() != rank {
            return Err(ContainerError::CorruptHeader(format!(
                "'{}' needs {rank} dims, header has {:?}",
                self.header.name, self.header.dims
            )));
        }
        Ok(&self.header.dims)
    }

    fn frame_times<T: Real>(&self) -> IoResult<Vec<T>> {
        self.header
            .frame_times
            .as_ref()
            .map(|v| v.iter().map(|&t| T::lit(t)).collect())
            .ok_or_else(|| ContainerError::CorruptHeader("missing frame_times".into()))
    }
}

pub fn save(path: impl AsRef<Path>, c: &Container) -> IoResult<()> {
    fs::write(path, c.to_bytes()?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> IoResult<Container> {
    Container::from_bytes(&fs::read(path)?)
}

fn f32s<T: Real>(v: impl IntoIterator<Item = T>) -> ArrayData {
    ArrayData::Float32(
        v.into_iter()
            .map(|x| x.to_f32().unwrap_or(f32::NAN))
            .collect(),
    )
}

// ---- typed conversions ---------------------------------------------------

pub fn pk_to_container<T: Real>(pk: &PkMaps<T>) -> Container {
    let d = pk.dims();
    let values = pk
        .ktrans()
        .as_slice()
        .iter()
        .chain(pk.vp().as_slice())
        .copied();
    Container::new(
        "pk",
        vec![d.nx, d.ny, d.nz, 2],
        "ktrans: 1/min; vp: 1",
        f32s(values),
    )
}

pub fn pk_from_container<T: Real>(c: &Container) -> IoResult<PkMaps<T>> {
    c.expect_name("pk")?;
    let d = c.dims_rank(4)?;
    if d[3] != 2 {
        return Err(ContainerError::CorruptHeader("pk needs 2 channels".into()));
    }
    let dims = Dims3::new(d[0], d[1], d[2]);
    let mut v = c.data.to_real::<T>()?;
    let vp = v.split_off(dims.len());
    Ok(PkMaps::new(
        Volume::from_vec(dims, v)?,
        Volume::from_vec(dims, vp)?,
    )?)
}

pub fn vif_to_container<T: Real>(vif: &VascularInputFunction<T>) -> Container {
    Container::new("vif", vec![vif.len()], "mM", f32s(vif.cp().iter().copied()))
        .with_frame_times(vif.times())
}

pub fn vif_from_container<T: Real>(c: &Container) -> IoResult<VascularInputFunction<T>> {
    c.expect_name("vif")?;
    c.dims_rank(1)?;
    Ok(VascularInputFunction::new(
        c.frame_times()?,
        c.data.to_real()?,
    )?)
}

pub fn ctx_to_container<T: Real>(ctx: &AcquisitionContext<T>) -> Container {
    let d = ctx.dims();
    let values = ctx
        .t10
        .as_slice()
        .iter()
        .chain(ctx.m0.as_slice())
        .chain(ctx.s0.as_slice())
        .copied();
    Container::new(
        "ctx",
        vec![d.nx, d.ny, d.nz, 3],
        "t10: s; m0: a.u.; s0: a.u.",
        f32s(values),
    )
    .with_frame_times(&ctx.frame_times)
    .with_attr("tr", json!(ctx.tr.as_f64()))
    .with_attr("flip", json!(ctx.flip.as_f64()))
    .with_attr("r1", json!(ctx.r1.as_f64()))
}

pub fn ctx_from_container<T: Real>(c: &Container) -> IoResult<AcquisitionContext<T>> {
    c.expect_name("ctx")?;
    let d = c.dims_rank(4)?;
    if d[3] != 3 {
        return Err(ContainerError::CorruptHeader("ctx needs 3 channels".into()));
    }
    let dims = Dims3::new(d[0], d[1], d[2]);
    let v = c.data.to_real::<T>()?;
    let n = dims.len();
    Ok(AcquisitionContext::new(
        T::lit(c.attr_f64("tr")?),
        T::lit(c.attr_f64("flip")?),
        T::lit(c.attr_f64("r1")?),
        Volume::from_vec(dims, v[..n].to_vec())?,
        Volume::from_vec(dims, v[n..2 * n].to_vec())?,
        Volume::from_vec(dims, v[2 * n..].to_vec())?,
        c.frame_times()?,
    )?)
}

pub fn series_to_container<T: Real>(s: &DynamicSeries<T>) -> Container {
    let d = s.dims();
    let (name, units) = match s.kind() {
        SeriesKind::Image => ("image", "a.u."),
        SeriesKind::Concentration => ("concentration", "mM"),
    };
    Container::new(
        name,
        vec![d.nx, d.ny, d.nz, s.nt()],
        units,
        f32s(s.as_slice().iter().copied()),
    )
    .with_frame_times(s.frame_times())
}

pub fn series_from_container<T: Real>(c: &Container) -> IoResult<DynamicSeries<T>> {
    let kind = match c.header.name.as_str() {
        "image" => SeriesKind::Image,
        "concentration" => SeriesKind::Concentration,
        other => {
            return Err(ContainerError::WrongContent {
                expected: "image or concentration series".into(),
                found: other.into(),
            })
        }
    };
    let d = c.dims_rank(4)?;
    Ok(DynamicSeries::from_vec(
        Dims3::new(d[0], d[1], d[2]),
        c.frame_times()?,
        kind,
        c.data.to_real()?,
    )?)
}

pub fn kspace_to_container<T: Real>(k: &KSpaceSeries<T>) -> Container {
    let d = k.dims();
    let data = k
        .as_slice()
        .iter()
        .map(|v| {
            Complex::new(
                v.re.to_f32().unwrap_or(f32::NAN),
                v.im.to_f32().unwrap_or(f32::NAN),
            )
        })
        .collect();
    Container::new(
        "kspace",
        vec![d.nx, d.ny, d.nz, k.nt()],
        "a.u.",
        ArrayData::Complex64(data),
    )
    .with_frame_times(k.frame_times())
    .with_attr("accel_target", json!(k.mask().accel_target()))
}

/// Loads k-space; with no explicit mask the pattern is taken from the nonzero samples.
pub fn kspace_from_container<T: Real>(
    c: &Container,
    mask: Option<&SamplingMask>,
) -> IoResult<KSpaceSeries<T>> {
    c.expect_name("kspace")?;
    let d = c.dims_rank(4)?;
    let dims = Dims3::new(d[0], d[1], d[2]);
    let ArrayData::Complex64(raw) = &c.data else {
        return Err(ContainerError::WrongContent {
            expected: "complex64".into(),
            found: c.header.element_type.clone(),
        });
    };
    let data = raw
        .iter()
        .map(|v| Complex::new(T::lit(v.re as f64), T::lit(v.im as f64)))
        .collect();
    let times = c.frame_times()?;
    Ok(match mask {
        Some(m) => KSpaceSeries::new(dims, times, data, m.clone())?,
        None => KSpaceSeries::from_data_infer_mask(dims, times, data)?,
    })
}

pub fn mask_to_container(m: &SamplingMask) -> Container {
    let data = ArrayData::Float32(m.pattern().iter().map(|&v| v as f32).collect());
    Container::new("mask", vec![m.nkx(), m.nky(), m.nt()], "binary", data)
        .with_attr("accel_target", json!(m.accel_target()))
}

pub fn mask_from_container(c: &Container) -> IoResult<SamplingMask> {
    c.expect_name("mask")?;
    let d = c.dims_rank(3)?;
    let values = c.data.to_real::<f64>()?;
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ContainerError::CorruptHeader(
            "mask values must be 0 or 1".into(),
        ));
    }
    let pattern = values.into_iter().map(|v| v as u8).collect();
    let accel = c
        .header
        .attrs
        .get("accel_target")
        .and_then(Value::as_f64)
        .unwrap_or(f64::NAN);
    Ok(SamplingMask::new(d[0], d[1], d[2], pattern, accel)?)
}

pub fn volume_to_container<T: Real>(name: &str, v: &Volume<T>, units: &str) -> Container {
    let d = v.dims();
    Container::new(
        name,
        vec![d.nx, d.ny, d.nz],
        units,
        f32s(v.as_slice().iter().copied()),
    )
}

pub fn volume_from_container<T: Real>(c: &Container) -> IoResult<Volume<T>> {
    let d = c.dims_rank(3)?;
    Ok(Volume::from_vec(
        Dims3::new(d[0], d[1], d[2]),
        c.data.to_real()?,
    )?)
}

// ---- training-block export ---------------------------------------------

/// Fixed-point grid for exported PK maps. On this grid every value below
/// 2^20 in magnitude is an exact `f64`, so `θ_u − θ_t` and its inverse are exact.
pub const PK_EXPORT_QUANTUM: f64 = 1.0 / 4_294_967_296.0; // 2^-32
const PK_EXPORT_LIMIT: f64 = 1_048_576.0; // 2^20

fn snap(v: f64) -> f64 {
    (v / PK_EXPORT_QUANTUM).round() * PK_EXPORT_QUANTUM
}

fn exact_pk_container(name: &str, dims: Dims3, kt: &[f64], vp: &[f64]) -> Container {
    let values = kt.iter().chain(vp).copied().collect();
    Container::new(
        name,
        vec![dims.nx, dims.ny, dims.nz, 2],
        "ktrans: 1/min; vp: 1",
        ArrayData::Float64(values),
    )
}

/// Number of non-overlapping blocks along each axis (partial edge blocks dropped).
pub fn block_grid(volume: Dims3, block: Dims3) -> IoResult<[usize; 3]> {
    let (v, b) = (volume.as_array(), block.as_array());
    if b.contains(&0) {
        return Err(PkError::InvalidInput("block dims must be positive".into()).into());
    }
    if (0..3).any(|a| b[a] > v[a]) {
        return Err(PkError::InvalidInput(format!("block {b:?} exceeds volume {v:?}")).into());
    }
    Ok([v[0] / b[0], v[1] / b[1], v[2] / b[2]])
}

/// Optional companions written next to the blocks, needed to evaluate the
/// signal-domain loss term.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExportExtras<'a, T> {
    pub s_full: Option<&'a DynamicSeries<T>>,
    pub vif: Option<&'a VascularInputFunction<T>>,
    pub ctx: Option<&'a AcquisitionContext<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub id: usize,
    pub dir: String,
    pub origin: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub volume_dims: [usize; 3],
    pub block_dims: [usize; 3],
    pub grid: [usize; 3],
    pub augmentation_copies: usize,
    pub frame_times: Vec<f64>,
    pub pk_quantum: f64,
    /// Per-volume intensity maxima used to scale series into [0, 1].
    pub normalization: Map<String, Value>,
    pub files: Map<String, Value>,
    pub blocks: Vec<BlockEntry>,
}

/// Writes non-overlapping blocks of the corrupted series `S_u` (input) and the
/// residual `θ_r = θ_u − θ_t` (target), plus `θ_u`, `θ_t` and any extras, with a
/// `manifest.json` listing them.
pub fn export_training_blocks<T: Real>(
    su: &DynamicSeries<T>,
    theta_u: &PkMaps<T>,
    theta_t: &PkMaps<T>,
    block: Dims3,
    out_dir: impl AsRef<Path>,
    extras: ExportExtras<'_, T>,
) -> IoResult<Manifest> {
    let dims = su.dims();
    if theta_u.dims() != dims || theta_t.dims() != dims {
        return Err(PkError::InvalidInput("series and PK map dimensions differ".into()).into());
    }
    if let Some(s) = extras.s_full {
        if s.dims() != dims || s.frame_times() != su.frame_times() {
            return Err(PkError::InvalidInput("reference series does not match S_u".into()).into());
        }
    }
    if let Some(c) = extras.ctx {
        if c.dims() != dims {
            return Err(PkError::InvalidInput("context does not match S_u".into()).into());
        }
    }
    let grid = block_grid(dims, block)?;

    let snapped = |v: &Volume<T>| -> IoResult<Vec<f64>> {
        v.as_slice()
            .iter()
            .map(|x| {
                let x = x.as_f64();
                if x.abs() >= PK_EXPORT_LIMIT {
                    Err(PkError::InvalidInput(format!("PK value {x} too large to export")).into())
                } else {
                    Ok(snap(x))
                }
            })
            .collect()
    };
    let (u_kt, u_vp) = (snapped(theta_u.ktrans())?, snapped(theta_u.vp())?);
    let (t_kt, t_vp) = (snapped(theta_t.ktrans())?, snapped(theta_t.vp())?);
    let r_kt: Vec<f64> = u_kt.iter().zip(&t_kt).map(|(u, t)| u - t).collect();
    let r_vp: Vec<f64> = u_vp.iter().zip(&t_vp).map(|(u, t)| u - t).collect();

    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let file = |stem: &str| format!("{stem}.{FILE_EXTENSION}");
    let crop_f64 = |v: &[f64], origin: [usize; 3]| -> IoResult<Vec<f64>> {
        Ok(Volume::from_vec(dims, v.to_vec())?
            .crop(origin, block)?
            .into_vec())
    };

    let mut normalization = Map::new();
    let max_abs = |s: &DynamicSeries<T>| {
        s.as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    };
    normalization.insert("su_max".into(), json!(max_abs(su)));
    if let Some(s) = extras.s_full {
        normalization.insert("s_full_max".into(), json!(max_abs(s)));
    }

    let mut files = Map::new();
    files.insert("su".into(), json!(file("su")));
    files.insert("theta_r".into(), json!(file("theta_r")));
    files.insert("theta_u".into(), json!(file("theta_u")));
    files.insert("theta_t".into(), json!(file("theta_t")));
    if extras.s_full.is_some() {
        files.insert("s_full".into(), json!(file("s_full")));
    }
    if extras.ctx.is_some() {
        files.insert("ctx".into(), json!(file("ctx")));
    }
    if let Some(vif) = extras.vif {
        save(out.join(file("vif")), &vif_to_container(vif))?;
        files.insert("vif".into(), json!(file("vif")));
    }

    let mut blocks = Vec::new();
    for bz in 0..grid[2] {
        for by in 0..grid[1] {
            for bx in 0..grid[0] {
                let id = blocks.len();
                let origin = [bx * block.nx, by * block.ny, bz * block.nz];
                let dir = format!("block_{id:04}");
                let bdir: PathBuf = out.join(&dir);
                fs::create_dir_all(&bdir)?;
                save(
                    bdir.join(file("su")),
                    &series_to_container(&su.crop(origin, block)?),
                )?;
                for (stem, kt, vp) in [
                    ("theta_r", &r_kt, &r_vp),
                    ("theta_u", &u_kt, &u_vp),
                    ("theta_t", &t_kt, &t_vp),
                ] {
                    let c = exact_pk_container(
                        stem,
                        block,
                        &crop_f64(kt, origin)?,
                        &crop_f64(vp, origin)?,
                    );
                    save(bdir.join(file(stem)), &c)?;
                }
                if let Some(s) = extras.s_full {
                    save(
                        bdir.join(file("s_full")),
                        &series_to_container(&s.crop(origin, block)?),
                    )?;
                }
                if let Some(c) = extras.ctx {
                    save(
                        bdir.join(file("ctx")),
                        &ctx_to_container(&c.crop(origin, block)?),
                    )?;
                }
                blocks.push(BlockEntry { id, dir, origin });
            }
        }
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        volume_dims: dims.as_array(),
        block_dims: block.as_array(),
        grid,
        augmentation_copies: 1,
        frame_times: su.frame_times().iter().map(|t| t.as_f64()).collect(),
        pk_quantum: PK_EXPORT_QUANTUM,
        normalization,
        files,
        blocks,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ContainerError::CorruptHeader(e.to_string()))?;
    fs::write(out.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Reads an exported float64 PK block as `(ktrans, vp)` flat vectors.
pub fn load_exact_pk(path: impl AsRef<Path>) -> IoResult<(Dims3, Vec<f64>, Vec<f64>)> {
    let c = load(path)?;
    let d = c.dims_rank(4)?.to_vec();
    let ArrayData::Float64(v) = c.data else {
        return Err(ContainerError::WrongContent {
            expected: "float64".into(),
            found: c.header.element_type,
        });
    };
    let dims = Dims3::new(d[0], d[1], d[2]);
    let (kt, vp) = v.split_at(dims.len());
    Ok((dims, kt.to_vec(), vp.to_vec()))
}

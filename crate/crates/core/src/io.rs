//! Volume, mask and field files.
//!
//! Two containers are supported:
//!
//! * NIfTI-1 single files (`.nii`, `.nii.gz`), read and written through the
//!   `nifti` crate.
//! * A raw container: a little-endian payload (`.raw`) next to a `key = value`
//!   text header (`.vhdr`) that lists dtype, shape, channel count, spacing and
//!   origin. Deformation fields are always stored this way, tagged with the
//!   `normalized-displacement` convention.
//!
//! Either file of a raw pair may be passed as the path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayView3, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, NiftiVolume, ReaderOptions};

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};
use crate::volume::{LabelMask, Shape3, Volume};
use crate::warp::DeformationField;

pub const FIELD_CONVENTION: &str = "normalized-displacement";
const RAW_MAGIC: &str = "stagereg-raw";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

pub fn detect_format(path: &Path) -> Result<VolumeFormat> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(VolumeFormat::Nifti)
    } else if name.ends_with(".raw") || name.ends_with(".vhdr") {
        Ok(VolumeFormat::Raw)
    } else {
        Err(Error::format(
            "extension",
            format!("unsupported volume file {}", path.display()),
        ))
    }
}

/// `(header, payload)` paths of a raw container.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("vhdr"), path.with_extension("raw"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

struct RawHeader {
    dtype: Dtype,
    shape: Shape3,
    channels: usize,
    spacing: [f64; 3],
    origin: [f64; 3],
    convention: Option<String>,
}

fn join3(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn write_raw(path: &Path, header: &RawHeader, payload: &[u8]) -> Result<()> {
    let (hdr_path, raw_path) = raw_paths(path);
    let mut text = format!(
        "# {RAW_MAGIC} v1\nformat = {RAW_MAGIC}\ndtype = {}\nshape = {},{},{}\nchannels = {}\nspacing = {}\norigin = {}\n",
        header.dtype.tag(),
        header.shape.d,
        header.shape.h,
        header.shape.w,
        header.channels,
        join3(header.spacing),
        join3(header.origin),
    );
    if let Some(conv) = &header.convention {
        text.push_str(&format!("convention = {conv}\n"));
    }
    let payload_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    text.push_str(&format!("data = {payload_name}\n"));
    fs::write(&hdr_path, text).map_err(|e| Error::io(&hdr_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

fn parse_list<const N: usize, V: std::str::FromStr>(key: &str, s: &str) -> Result<[V; N]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::format(
            key,
            format!("expected {N} comma-separated values, got `{s}`"),
        ));
    }
    let mut out = Vec::with_capacity(N);
    for p in parts {
        out.push(
            p.parse::<V>()
                .map_err(|_| Error::format(key, format!("cannot parse `{p}`")))?,
        );
    }
    out.try_into()
        .map_err(|_| Error::format(key, "wrong number of values"))
}

fn read_raw(path: &Path) -> Result<(RawHeader, Vec<u8>)> {
    let (hdr_path, raw_path) = raw_paths(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("header", format!("malformed line `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(k, "missing from header"))
    };
    if get("format")? != RAW_MAGIC {
        return Err(Error::format("format", format!("expected `{RAW_MAGIC}`")));
    }
    let dtype = match get("dtype")? {
        "f32" => Dtype::F32,
        "u8" => Dtype::U8,
        other => {
            return Err(Error::format(
                "dtype",
                format!("unsupported dtype `{other}`"),
            ))
        }
    };
    let shape_str = get("shape")?;
    let dims: Vec<&str> = shape_str.split(',').collect();
    if dims.len() != 3 {
        return Err(Error::format(
            "shape",
            format!("expected a 3D shape, got {} dimensions", dims.len()),
        ));
    }
    let [d, h, w] = parse_list::<3, usize>("shape", shape_str)?;
    let channels: usize = get("channels")?
        .parse()
        .map_err(|_| Error::format("channels", "not an integer"))?;
    let spacing = parse_list::<3, f64>("spacing", get("spacing")?)?;
    let origin = parse_list::<3, f64>("origin", get("origin")?)?;
    let header = RawHeader {
        dtype,
        shape: Shape3::new(d, h, w),
        channels,
        spacing,
        origin,
        convention: kv.get("convention").cloned(),
    };
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expect = channels * header.shape.len() * dtype.size();
    if payload.len() != expect {
        return Err(Error::format(
            "data",
            format!(
                "payload has {} bytes, header implies {expect}",
                payload.len()
            ),
        ));
    }
    Ok((header, payload))
}

fn f32_payload<T: Scalar>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * data.len());
    for &v in data {
        out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
    }
    out
}

fn from_f32_payload<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).expect("f32 to scalar"))
        .collect()
}

struct NiftiPayload {
    shape: Shape3,
    data: Vec<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

fn nifti_err(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::format("nifti", other.to_string()),
    }
}

fn read_nifti(path: &Path) -> Result<NiftiPayload> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let volume = obj.into_volume();
    let dims: Vec<usize> = volume.dim().iter().map(|&d| d as usize).collect();
    let effective: Vec<usize> = match dims.len() {
        3 => dims.clone(),
        n if n > 3 && dims[3..].iter().all(|&d| d == 1) => dims[..3].to_vec(),
        n => {
            return Err(Error::format(
                "dim",
                format!("expected a 3D payload, found {n} dimension(s) {dims:?}"),
            ))
        }
    };
    let arr = volume
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(path, e))?;
    let (nx, ny, nz) = (effective[0], effective[1], effective[2]);
    let shape = Shape3::new(nz, ny, nx);
    let mut data = Vec::with_capacity(shape.len());
    let mut idx = vec![0usize; dims.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                idx[0] = x;
                idx[1] = y;
                idx[2] = z;
                data.push(arr[IxDyn(&idx)]);
            }
        }
    }
    let spacing = [1, 2, 3].map(|i| {
        let p = header.pixdim[i].abs() as f64;
        if p > 0.0 {
            p
        } else {
            1.0
        }
    });
    let origin = if header.qform_code > 0 {
        [header.quatern_x, header.quatern_y, header.quatern_z].map(|v| v as f64)
    } else if header.sform_code > 0 {
        [header.srow_x[3], header.srow_y[3], header.srow_z[3]].map(|v| v as f64)
    } else {
        [0.0; 3]
    };
    Ok(NiftiPayload {
        shape,
        data,
        spacing,
        origin,
    })
}

fn write_nifti<A>(
    path: &Path,
    shape: Shape3,
    data: &[A],
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<()>
where
    A: nifti::DataElement + bytemuck::Pod,
{
    let mut header = nifti::NiftiHeader::default();
    header.pixdim = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    header.xyzt_units = 2; // mm
    header.qform_code = 1;
    header.quatern_x = origin[0] as f32;
    header.quatern_y = origin[1] as f32;
    header.quatern_z = origin[2] as f32;
    let view = ArrayView3::from_shape((shape.d, shape.h, shape.w), data)
        .map_err(|e| Error::shape(e.to_string()))?
        .reversed_axes();
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&view)
        .map_err(|e| nifti_err(path, e))
}

pub fn load_volume<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    match detect_format(path)? {
        VolumeFormat::Nifti => {
            let p = read_nifti(path)?;
            let data = p
                .data
                .into_iter()
                .map(|v| T::from_f32(v).expect("f32"))
                .collect();
            Ok(Volume::new(p.shape, data)?.with_geometry(p.spacing, p.origin))
        }
        VolumeFormat::Raw => {
            let (h, payload) = read_raw(path)?;
            if h.channels != 1 {
                return Err(Error::format(
                    "channels",
                    format!("expected 1, got {}", h.channels),
                ));
            }
            let data = match h.dtype {
                Dtype::F32 => from_f32_payload(&payload),
                Dtype::U8 => payload
                    .iter()
                    .map(|&b| T::from_u8(b).expect("u8"))
                    .collect(),
            };
            Ok(Volume::new(h.shape, data)?.with_geometry(h.spacing, h.origin))
        }
    }
}

pub fn save_volume<T: Scalar>(v: &Volume<T>, path: &Path) -> Result<()> {
    match detect_format(path)? {
        VolumeFormat::Nifti => {
            let data: Vec<f32> = v.data.iter().map(|&x| to_f64(x) as f32).collect();
            write_nifti(path, v.shape, &data, v.spacing, v.origin)
        }
        VolumeFormat::Raw => write_raw(
            path,
            &RawHeader {
                dtype: Dtype::F32,
                shape: v.shape,
                channels: 1,
                spacing: v.spacing,
                origin: v.origin,
                convention: None,
            },
            &f32_payload(&v.data),
        ),
    }
}

fn labels_from_f32(values: Vec<f32>) -> Result<Vec<u8>> {
    values
        .into_iter()
        .map(|v| {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                Err(Error::format(
                    "data",
                    format!("non-integer label value {v}"),
                ))
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let (shape, data, spacing, origin) = match detect_format(path)? {
        VolumeFormat::Nifti => {
            let p = read_nifti(path)?;
            (p.shape, labels_from_f32(p.data)?, p.spacing, p.origin)
        }
        VolumeFormat::Raw => {
            let (h, payload) = read_raw(path)?;
            if h.channels != 1 {
                return Err(Error::format(
                    "channels",
                    format!("expected 1, got {}", h.channels),
                ));
            }
            let data = match h.dtype {
                Dtype::U8 => payload,
                Dtype::F32 => labels_from_f32(from_f32_payload::<f32>(&payload))?,
            };
            (h.shape, data, h.spacing, h.origin)
        }
    };
    Ok(LabelMask::new(shape, data)?.with_geometry(spacing, origin))
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    match detect_format(path)? {
        VolumeFormat::Nifti => write_nifti(path, mask.shape, &mask.data, mask.spacing, mask.origin),
        VolumeFormat::Raw => write_raw(
            path,
            &RawHeader {
                dtype: Dtype::U8,
                shape: mask.shape,
                channels: 1,
                spacing: mask.spacing,
                origin: mask.origin,
                convention: None,
            },
            &mask.data,
        ),
    }
}

/// Writes a field as a 3-channel f32 raw container. The path's extension is
/// replaced by `.vhdr`/`.raw`.
pub fn save_field<T: Scalar>(field: &DeformationField<T>, path: &Path) -> Result<()> {
    write_raw(
        path,
        &RawHeader {
            dtype: Dtype::F32,
            shape: field.shape(),
            channels: 3,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            convention: Some(FIELD_CONVENTION.to_string()),
        },
        &f32_payload(field.data()),
    )
}

pub fn load_field<T: Scalar>(path: &Path) -> Result<DeformationField<T>> {
    let (h, payload) = read_raw(path)?;
    if h.channels != 3 {
        return Err(Error::format(
            "channels",
            format!("a field needs 3, got {}", h.channels),
        ));
    }
    if h.dtype != Dtype::F32 {
        return Err(Error::format("dtype", "fields are stored as f32"));
    }
    match h.convention.as_deref() {
        Some(FIELD_CONVENTION) => {}
        other => {
            return Err(Error::format(
                "convention",
                format!("expected `{FIELD_CONVENTION}`, found {other:?}"),
            ))
        }
    }
    DeformationField::new(h.shape, from_f32_payload(&payload))
}

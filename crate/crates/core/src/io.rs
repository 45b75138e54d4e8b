//! File formats: the binary `FGPC1` scene format, 16-bit PGM depth with a
//! JSON intrinsics sidecar, 8-bit PGM masks and JSON grasp lists.
//!
//! Scene layout (all little-endian, no padding):
//!
//! ```text
//! "FGPC1" | u32 point_count | u32 flags
//! per point: f32 x, y, z | [f32 nx, ny, nz if bit0] | [u32 object_id if bit1]
//! [if bit2: f32 raw[N] | f32 instance_norm[N] | f32 final[N]]
//! ```
//!
//! PGM samples follow the Netpbm convention (16-bit samples most significant
//! byte first).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_rotation, DepthImage, GraspPose, Intrinsics, Mask, Mat3, Scene, Vec3};
use crate::graspness::GraspnessField;

pub const SCENE_MAGIC: &[u8; 5] = b"FGPC1";
pub const SCENE_HEADER_LEN: usize = 13;

pub const FLAG_NORMALS: u32 = 1;
pub const FLAG_OBJECT_IDS: u32 = 1 << 1;
pub const FLAG_GRASPNESS: u32 = 1 << 2;

/// Rotation orthonormality tolerance accepted when reading grasp files.
pub const GRASP_ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneFileHeader {
    pub point_count: u32,
    pub flags: u32,
}

/// Scene together with the optional graspness block.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene: Scene,
    pub graspness: Option<GraspnessField>,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_scene(scene: &Scene, graspness: Option<&GraspnessField>) -> Result<Vec<u8>> {
    scene.validate()?;
    let n = scene.len();
    let count = u32::try_from(n).map_err(|_| Error::InvalidArgument("too many points".into()))?;
    let mut flags = FLAG_OBJECT_IDS;
    if scene.normals.is_some() {
        flags |= FLAG_NORMALS;
    }
    if let Some(g) = graspness {
        if g.raw.len() != n || g.instance_norm.len() != n || g.final_score.len() != n {
            return Err(Error::Shape("graspness length differs from point count".into()));
        }
        flags |= FLAG_GRASPNESS;
    }
    let mut out = Vec::with_capacity(SCENE_HEADER_LEN + n * 28);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    let put = |out: &mut Vec<u8>, v: &Vec3| {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    };
    for i in 0..n {
        put(&mut out, &scene.points[i]);
        if let Some(normals) = &scene.normals {
            put(&mut out, &normals[i]);
        }
        out.extend_from_slice(&scene.object_ids[i].to_le_bytes());
    }
    if let Some(g) = graspness {
        for arr in [&g.raw, &g.instance_norm, &g.final_score] {
            for v in arr.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn f32(&mut self, what: &str) -> Result<f64> {
        let v = f32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        if !v.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(v as f64)
    }

    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn vec3(&mut self, what: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f32(what)?, self.f32(what)?, self.f32(what)?))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<SceneFileHeader> {
    if bytes.len() < SCENE_HEADER_LEN {
        if !SCENE_MAGIC.starts_with(&bytes[..bytes.len().min(5)]) {
            return Err(Error::BadMagic {
                found: bytes[..bytes.len().min(5)].to_vec(),
            });
        }
        return Err(Error::Truncated {
            expected: SCENE_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..5] != SCENE_MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..5].to_vec(),
        });
    }
    let point_count = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let flags = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    if flags & !(FLAG_NORMALS | FLAG_OBJECT_IDS | FLAG_GRASPNESS) != 0 {
        return Err(Error::Format(format!("unknown scene flags {flags:#x}")));
    }
    Ok(SceneFileHeader { point_count, flags })
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneFile> {
    let header = decode_header(bytes)?;
    let n = header.point_count as usize;
    let mut stride = 12;
    if header.flags & FLAG_NORMALS != 0 {
        stride += 12;
    }
    if header.flags & FLAG_OBJECT_IDS != 0 {
        stride += 4;
    }
    let mut expected = SCENE_HEADER_LEN + n * stride;
    if header.flags & FLAG_GRASPNESS != 0 {
        expected += n * 12;
    }
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: SCENE_HEADER_LEN,
    };
    let mut points = Vec::with_capacity(n);
    let mut normals = (header.flags & FLAG_NORMALS != 0).then(|| Vec::with_capacity(n));
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        points.push(cur.vec3(&format!("point {i}"))?);
        if let Some(normals) = normals.as_mut() {
            normals.push(cur.vec3(&format!("normal {i}"))?);
        }
        ids.push(if header.flags & FLAG_OBJECT_IDS != 0 { cur.u32() } else { 0 });
    }
    let graspness = if header.flags & FLAG_GRASPNESS != 0 {
        let mut read = |name: &str| -> Result<Vec<f64>> { (0..n).map(|_| cur.f32(name)).collect() };
        let raw = read("raw graspness")?;
        let instance_norm = read("instance graspness")?;
        let final_score = read("final graspness")?;
        Some(GraspnessField {
            raw,
            instance_norm,
            final_score,
            object_ids: ids.clone(),
        })
    } else {
        None
    };
    let scene = Scene {
        points,
        object_ids: ids,
        normals,
        features: None,
    };
    scene.validate()?;
    Ok(SceneFile { scene, graspness })
}

pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_scene(scene, None)?)
}

pub fn write_scene_file(file: &SceneFile, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_scene(&file.scene, file.graspness.as_ref())?)
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    Ok(read_scene_file(path)?.scene)
}

pub fn read_scene_file(path: impl AsRef<Path>) -> Result<SceneFile> {
    decode_scene(&read_file(path.as_ref())?)
}

/// Intrinsics sidecar written next to every depth PGM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMeta {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per raw unit.
    pub depth_scale: f64,
}

impl DepthMeta {
    pub fn new(k: Intrinsics, depth_scale: f64) -> Self {
        DepthMeta {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            depth_scale,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

struct Pgm {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let kind = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!("expected binary PGM (P5), found {kind:?}")));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PGM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("malformed PGM header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    Ok(Pgm {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos + 1,
    })
}

fn pgm_payload<'a>(bytes: &'a [u8], pgm: &Pgm, sample_bytes: usize) -> Result<&'a [u8]> {
    let expected = pgm.width * pgm.height * sample_bytes;
    let payload = &bytes[pgm.data_offset..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(&payload[..expected])
}

/// Raw 16-bit samples of a P5 PGM with maxval 65535.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let pgm = parse_pgm_header(bytes)?;
    if pgm.maxval != 65535 {
        return Err(Error::Format(format!(
            "depth PGM must have maxval 65535, found {}",
            pgm.maxval
        )));
    }
    let raw = pgm_payload(bytes, &pgm, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((pgm.width, pgm.height, raw))
}

pub fn encode_pgm16(width: usize, height: usize, raw: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(raw.len() * 2);
    for v in raw {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn read_depth_meta(path: impl AsRef<Path>) -> Result<DepthMeta> {
    let bytes = read_file(path.as_ref())?;
    let meta: DepthMeta = serde_json::from_slice(&bytes)?;
    if !(meta.depth_scale > 0.0 && meta.depth_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("depth_scale {}", meta.depth_scale)));
    }
    meta.intrinsics().validate()?;
    Ok(meta)
}

pub fn depth_from_raw(width: usize, height: usize, raw: &[u16], meta: &DepthMeta) -> Result<DepthImage> {
    let depth = raw.iter().map(|r| *r as f64 * meta.depth_scale).collect();
    DepthImage::new(width, height, depth, meta.intrinsics())
}

/// Quantizes depth to raw units; values that do not fit in 16 bits are rejected.
pub fn depth_to_raw(d: &DepthImage, depth_scale: f64) -> Result<Vec<u16>> {
    d.depth
        .iter()
        .map(|z| {
            let r = (z / depth_scale).round();
            if (0.0..=65535.0).contains(&r) {
                Ok(r as u16)
            } else {
                Err(Error::InvalidArgument(format!(
                    "depth {z} m does not fit 16 bits at scale {depth_scale}"
                )))
            }
        })
        .collect()
}

pub fn read_depth(pgm_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<DepthImage> {
    let meta = read_depth_meta(meta_path)?;
    let (w, h, raw) = decode_pgm16(&read_file(pgm_path.as_ref())?)?;
    depth_from_raw(w, h, &raw, &meta)
}

pub fn write_depth(
    d: &DepthImage,
    depth_scale: f64,
    pgm_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<()> {
    let raw = depth_to_raw(d, depth_scale)?;
    write_file(pgm_path.as_ref(), &encode_pgm16(d.width, d.height, &raw))?;
    let meta = DepthMeta::new(d.intrinsics, depth_scale);
    write_file(meta_path.as_ref(), &serde_json::to_vec_pretty(&meta)?)
}

/// 8-bit P5 mask; any nonzero sample is inside.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let pgm = parse_pgm_header(bytes)?;
    if pgm.maxval > 255 {
        return Err(Error::Format(format!(
            "mask PGM must be 8-bit, found maxval {}",
            pgm.maxval
        )));
    }
    let data = pgm_payload(bytes, &pgm, 1)?.iter().map(|b| *b != 0).collect();
    Ok(Mask {
        width: pgm.width,
        height: pgm.height,
        data,
    })
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|b| if *b { 255u8 } else { 0 }));
    out
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask(&read_file(path.as_ref())?)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(mask))
}

/// JSON record for one grasp; rotation is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspRecord {
    pub center: [f64; 3],
    pub rotation: [f64; 9],
    pub width: f64,
    pub depth: f64,
    pub score: f64,
    pub object_id: Option<u32>,
}

impl From<&GraspPose> for GraspRecord {
    fn from(g: &GraspPose) -> Self {
        let r = &g.rotation;
        GraspRecord {
            center: [g.center.x, g.center.y, g.center.z],
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            width: g.width,
            depth: g.depth,
            score: g.score,
            object_id: g.object_id,
        }
    }
}

impl TryFrom<GraspRecord> for GraspPose {
    type Error = Error;

    fn try_from(r: GraspRecord) -> Result<Self> {
        let rotation = Mat3::from_row_slice(&r.rotation);
        check_rotation(&rotation, GRASP_ROTATION_TOLERANCE)?;
        let scalars = [r.width, r.depth, r.score];
        if r.center.iter().chain(&scalars).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grasp record".into()));
        }
        Ok(GraspPose {
            center: Vec3::from(r.center),
            rotation,
            width: r.width,
            depth: r.depth,
            score: r.score,
            object_id: r.object_id,
        })
    }
}

pub fn grasps_to_json(grasps: &[GraspPose]) -> Result<String> {
    let records: Vec<GraspRecord> = grasps.iter().map(GraspRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn grasps_from_json(text: &str) -> Result<Vec<GraspPose>> {
    let records: Vec<GraspRecord> = serde_json::from_str(text)?;
    records.into_iter().map(GraspPose::try_from).collect()
}

pub fn read_grasps(path: impl AsRef<Path>) -> Result<Vec<GraspPose>> {
    let bytes = read_file(path.as_ref())?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    grasps_from_json(text)
}

pub fn write_grasps(grasps: &[GraspPose], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), grasps_to_json(grasps)?.as_bytes())
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(value)?)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

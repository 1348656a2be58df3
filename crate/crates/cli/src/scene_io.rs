//! JSONL scene files.
//!
//! Each scene is a header line followed by its records. Box and detection
//! records alternate while both remain. A file may hold several scenes; every
//! header starts a new one.

use std::io::{self, BufRead, Write};
use std::path::Path;

use bevmine_core::synth::{Provenance, Range};
use bevmine_core::{Box3D, CameraRig, Detection, PointImage, SceneSample, SceneSpec};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT_VERSION: u64 = 1;

/// Writes every finite float as `{:.16e}` (17 significant digits).
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactFloatFormatter;

impl serde_json::ser::Formatter for ExactFloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

/// Serializes `value` as one compact JSON document with exact floats.
pub fn to_exact_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloatFormatter);
    value.serialize(&mut ser).expect("in-memory serialization cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
}

impl RigRecord {
    pub fn from_rig(rig: &CameraRig) -> Self {
        let r = rig.rotation();
        Self {
            fx: rig.fx(),
            fy: rig.fy(),
            cx: rig.cx(),
            cy: rig.cy(),
            r: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            t: std::array::from_fn(|k| rig.translation()[k]),
        }
    }

    pub fn to_rig(&self) -> Result<CameraRig, String> {
        CameraRig::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Matrix3::from_row_slice(&self.r),
            Vector3::from(self.t),
        )
        .map_err(|e| e.to_string())
    }
}

/// Scene layout parameters other than the rig and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub n_objects: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub image_width: f64,
    pub image_height: f64,
    pub ground_bump_amplitude: f64,
}

impl SpecRecord {
    pub fn from_spec(s: &SceneSpec) -> Self {
        let pair = |r: Range| [r.lo, r.hi];
        Self {
            n_objects: s.n_objects,
            x_range: pair(s.x_range),
            y_range: pair(s.y_range),
            length_range: pair(s.length_range),
            width_range: pair(s.width_range),
            height_range: pair(s.height_range),
            image_width: s.image_width,
            image_height: s.image_height,
            ground_bump_amplitude: s.ground_bump_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u64,
    pub rig: RigRecord,
    pub seed: u64,
    pub spec_hash: u64,
    /// Absent when the scene did not come from the generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SpecRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub lwh: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetRecord {
    pub class_id: u32,
    pub score: f64,
    pub bbox: [f64; 4],
    pub kp: [[f64; 2]; 5],
    pub depth: f64,
    pub lwh: [f64; 3],
    pub yaw: f64,
    pub sigma: f64,
    pub gt_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Record {
    Box(BoxRecord),
    Det(DetRecord),
}

impl BoxRecord {
    fn from_box(b: &Box3D) -> Self {
        Self {
            center: [b.center.x, b.center.y, b.center.z],
            lwh: [b.length, b.width, b.height],
            yaw: b.yaw,
        }
    }

    fn to_box(&self) -> Result<Box3D, String> {
        let [l, w, h] = self.lwh;
        let center = Vector3::from(self.center);
        // Validate through the constructor but keep the stored yaw bits.
        Box3D::new(center, l, w, h, self.yaw).map_err(|e| e.to_string())?;
        if !(self.yaw > -std::f64::consts::PI && self.yaw <= std::f64::consts::PI) {
            return Err(format!("yaw {} outside (-pi, pi]", self.yaw));
        }
        Ok(Box3D {
            center,
            length: l,
            width: w,
            height: h,
            yaw: self.yaw,
        })
    }
}

impl DetRecord {
    fn from_detection(d: &Detection, gt_index: usize) -> Self {
        Self {
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox2d,
            kp: d.keypoints.map(|k| [k.u, k.v]),
            depth: d.depth,
            lwh: d.size,
            yaw: d.yaw,
            sigma: d.sigma,
            gt_index,
        }
    }

    fn to_detection(&self) -> Result<Detection, String> {
        let det = Detection {
            class_id: self.class_id,
            score: self.score,
            bbox2d: self.bbox,
            keypoints: self.kp.map(|[u, v]| PointImage::new(u, v)),
            depth: self.depth,
            size: self.lwh,
            yaw: self.yaw,
            sigma: self.sigma,
        };
        det.validate().map_err(|e| e.to_string())?;
        Ok(det)
    }
}

/// Writes `scenes` as JSONL. `specs[i]`, when given, is recorded in the
/// header of scene `i`.
pub fn write_scenes<W: Write>(
    mut out: W,
    scenes: &[SceneSample],
    specs: Option<&[SceneSpec]>,
) -> io::Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        let header = Header {
            format_version: FORMAT_VERSION,
            rig: RigRecord::from_rig(&s.rig),
            seed: s.provenance.seed,
            spec_hash: s.provenance.spec_hash,
            spec: specs.map(|sp| SpecRecord::from_spec(&sp[i])),
        };
        writeln!(out, "{}", to_exact_json(&header))?;
        let n = s.boxes.len().max(s.detections.len());
        for k in 0..n {
            if let Some(b) = s.boxes.get(k) {
                writeln!(out, "{}", to_exact_json(&Record::Box(BoxRecord::from_box(b))))?;
            }
            if let Some(d) = s.detections.get(k) {
                let rec = DetRecord::from_detection(d, s.gt_match[k]);
                writeln!(out, "{}", to_exact_json(&Record::Det(rec)))?;
            }
        }
    }
    out.flush()
}

pub fn write_scene_file(path: &Path, scenes: &[SceneSample], specs: Option<&[SceneSpec]>) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_scenes(io::BufWriter::new(file), scenes, specs).map_err(|e| CliError::io(path, e))
}

struct Partial {
    header: Header,
    rig: CameraRig,
    boxes: Vec<Box3D>,
    detections: Vec<Detection>,
    gt_match: Vec<usize>,
}

impl Partial {
    fn finish(self, origin: &str, line: usize) -> Result<SceneSample, CliError> {
        if let Some(&bad) = self.gt_match.iter().find(|&&g| g >= self.boxes.len()) {
            return Err(CliError::Parse {
                path: origin.to_string(),
                line,
                message: format!("gt_index {bad} but scene has {} boxes", self.boxes.len()),
            });
        }
        Ok(SceneSample {
            boxes: self.boxes,
            detections: self.detections,
            rig: self.rig,
            provenance: Provenance {
                seed: self.header.seed,
                spec_hash: self.header.spec_hash,
            },
            gt_match: self.gt_match,
        })
    }
}

/// Parses a JSONL scene stream. `origin` names the source in errors.
pub fn read_scenes<R: BufRead>(input: R, origin: &str) -> Result<Vec<SceneSample>, CliError> {
    let parse_err = |line: usize, message: String| CliError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut scenes = Vec::new();
    let mut current: Option<(Partial, usize)> = None;
    for (idx, text) in input.lines().enumerate() {
        let lineno = idx + 1;
        let text = text.map_err(|e| CliError::Io {
            path: origin.to_string(),
            source: e,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(version) = value.get("format_version") {
            let version = version
                .as_u64()
                .ok_or_else(|| parse_err(lineno, "format_version must be an integer".into()))?;
            if version != FORMAT_VERSION {
                return Err(CliError::UnsupportedVersion(version));
            }
            // Re-parse from text so floats keep their exact decimal form.
            let header: Header = serde_json::from_str(&text).map_err(|e| parse_err(lineno, e.to_string()))?;
            let rig = header.rig.to_rig().map_err(|e| parse_err(lineno, e))?;
            if let Some((done, start)) = current.take() {
                scenes.push(done.finish(origin, start)?);
            }
            current = Some((
                Partial {
                    header,
                    rig,
                    boxes: Vec::new(),
                    detections: Vec::new(),
                    gt_match: Vec::new(),
                },
                lineno,
            ));
            continue;
        }
        let Some((scene, _)) = current.as_mut() else {
            return Err(parse_err(lineno, "record before the first header".into()));
        };
        let record: Record = serde_json::from_str(&text).map_err(|e| parse_err(lineno, e.to_string()))?;
        match record {
            Record::Box(b) => scene.boxes.push(b.to_box().map_err(|e| parse_err(lineno, e))?),
            Record::Det(d) => {
                scene.detections.push(d.to_detection().map_err(|e| parse_err(lineno, e))?);
                scene.gt_match.push(d.gt_index);
            }
        }
    }
    if let Some((done, start)) = current {
        scenes.push(done.finish(origin, start)?);
    }
    Ok(scenes)
}

pub fn read_scene_file(path: &Path) -> Result<Vec<SceneSample>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_scenes(io::BufReader::new(file), &path.display().to_string())
}

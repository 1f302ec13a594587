//! Annotation records, OBJ meshes and the on-disk dataset layout.
//!
//! A dataset is a directory holding one annotation document
//! (`annotations.json`, a JSON array of [`AnnotationRecord`]s) plus the
//! images, masks, meshes and voxel grids it references by relative path.
//! The schema is written out in `docs/annotation.schema.json`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{
    compose, project, GeometryError, ImageSize, KeypointSet3D, Point3, RigidPose, TriangleMesh,
};
use crate::pose::AnnotationTriple;
use crate::silhouette::{BinaryMask, RenderError};

/// File name of the annotation document inside a dataset root.
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Environment variable consulted when no dataset root is given explicitly.
pub const DATASET_ROOT_ENV: &str = "SHAPEALIGN_DATASET_ROOT";

/// Keypoint counts outside this range draw a warning.
pub const KEYPOINT_RANGE: std::ops::RangeInclusive<usize> = 8..=24;

/// Fraction of the image size by which projected keypoints may leave the
/// frame before a warning is raised.
pub const PROJECTION_MARGIN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("record {record}: field '{field}': {message}")]
    Schema {
        record: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: vertex index {index} out of range ({count} vertices)")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        count: usize,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no dataset root given and {DATASET_ROOT_ENV} is not set")]
    NoRoot,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] RenderError),
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::Parse { .. } => "ParseError",
            DatasetError::Schema { .. } => "SchemaError",
            DatasetError::IndexOutOfRange { .. } => "IndexOutOfRange",
            DatasetError::Io { .. } => "IoError",
            DatasetError::NoRoot => "NoRoot",
            DatasetError::Geometry(_) => "GeometryError",
            DatasetError::Mask(_) => "MaskError",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One annotated image: which model it shows, where its keypoints are, and
/// (once aligned) the camera that projects the model onto it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub model_path: String,
    pub category: String,
    pub keypoints_3d: KeypointSet3D,
    /// One to three annotators. A single set may be written without the
    /// enclosing array.
    pub keypoint_annotations: AnnotationTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<RigidPose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    pub image_size: ImageSize,
    pub truncated: bool,
    pub occluded: bool,
    /// Bumped on every committed edit.
    #[serde(default)]
    pub version: u64,
}

const REQUIRED_FIELDS: [&str; 10] = [
    "id",
    "image_path",
    "mask_path",
    "model_path",
    "category",
    "keypoints_3d",
    "keypoint_annotations",
    "image_size",
    "truncated",
    "occluded",
];

impl AnnotationRecord {
    /// Projection of the stored camera, if the record has one.
    pub fn projection(&self) -> Option<Result<crate::geometry::ProjectionMatrix, GeometryError>> {
        let (pose, focal) = (self.pose?, self.focal?);
        Some(
            self.image_size
                .intrinsics(focal)
                .map(|k| compose(&k, &pose)),
        )
    }

    /// Reprojection error of the stored camera against the per-keypoint
    /// median of the annotations.
    pub fn pose_error(&self) -> Option<Result<f64, GeometryError>> {
        let p = self.projection()?;
        Some(p.and_then(|p| {
            crate::geometry::reprojection_error(
                &p,
                &self.keypoints_3d,
                &self.keypoint_annotations.consensus_all(),
            )
        }))
    }

    /// Soft invariants; violations are reported, not rejected.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.keypoints_3d.len();
        if !KEYPOINT_RANGE.contains(&n) {
            out.push(format!(
                "{n} keypoints, expected {} to {}",
                KEYPOINT_RANGE.start(),
                KEYPOINT_RANGE.end()
            ));
        }
        if let Some(p) = self.projection() {
            match p {
                Err(e) => out.push(format!("stored camera is invalid: {e}")),
                Ok(p) => {
                    let (w, h) = (self.image_size.width as f64, self.image_size.height as f64);
                    let (mx, my) = (PROJECTION_MARGIN * w, PROJECTION_MARGIN * h);
                    let visible: HashSet<usize> = self
                        .keypoint_annotations
                        .sets()
                        .iter()
                        .flat_map(|s| s.visible_indices())
                        .collect();
                    let mut outside: Vec<usize> = visible
                        .into_iter()
                        .filter(|&i| match project(&p, &self.keypoints_3d.points()[i]) {
                            Ok(uv) => uv.x < -mx || uv.x > w + mx || uv.y < -my || uv.y > h + my,
                            Err(_) => true,
                        })
                        .collect();
                    outside.sort_unstable();
                    if !outside.is_empty() {
                        out.push(format!("keypoints {outside:?} project outside the image"));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationWarning {
    pub record: usize,
    pub id: String,
    pub message: String,
}

/// Parses an annotation document. Hard schema violations fail the whole
/// document; soft ones come back as warnings (and are logged).
pub fn parse_annotations(
    text: &str,
) -> Result<(Vec<AnnotationRecord>, Vec<ValidationWarning>), DatasetError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Value::Array(items) = doc else {
        return Err(DatasetError::Parse {
            line: 1,
            column: 1,
            message: "annotation document must be a JSON array".into(),
        });
    };
    let mut records = Vec::with_capacity(items.len());
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    for (index, item) in items.into_iter().enumerate() {
        let record = parse_record(index, item)?;
        if !ids.insert(record.id.clone()) {
            return Err(schema(index, "id", format!("duplicate id '{}'", record.id)));
        }
        for message in record.warnings() {
            log::warn!("record {index} ({}): {message}", record.id);
            warnings.push(ValidationWarning {
                record: index,
                id: record.id.clone(),
                message,
            });
        }
        records.push(record);
    }
    Ok((records, warnings))
}

fn schema(record: usize, field: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        record,
        field: field.into(),
        message: message.into(),
    }
}

fn parse_record(index: usize, item: Value) -> Result<AnnotationRecord, DatasetError> {
    let Value::Object(map) = &item else {
        return Err(schema(index, "", "record must be an object"));
    };
    if let Some(missing) = REQUIRED_FIELDS.iter().find(|f| !map.contains_key(**f)) {
        return Err(schema(index, missing, "missing required field"));
    }
    // Deserialize field by field so errors name the offending field.
    for (key, value) in map {
        let check =
            |r: Result<(), serde_json::Error>| r.map_err(|e| schema(index, key, e.to_string()));
        match key.as_str() {
            "keypoints_3d" => {
                check(serde_json::from_value::<KeypointSet3D>(value.clone()).map(drop))?
            }
            "keypoint_annotations" => {
                check(serde_json::from_value::<AnnotationTriple>(value.clone()).map(drop))?
            }
            "pose" => check(serde_json::from_value::<Option<RigidPose>>(value.clone()).map(drop))?,
            "image_size" => check(serde_json::from_value::<ImageSize>(value.clone()).map(drop))?,
            "focal" => {
                if let Some(f) = value.as_f64() {
                    if !(f > 0.0) {
                        return Err(schema(
                            index,
                            key,
                            format!("focal must be positive, got {f}"),
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    let record: AnnotationRecord = serde_json::from_value(item).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
            .unwrap_or("")
            .to_string();
        DatasetError::Schema {
            record: index,
            field,
            message: msg,
        }
    })?;
    let n = record.keypoints_3d.len();
    if record.keypoint_annotations.n_keypoints() != n {
        return Err(schema(
            index,
            "keypoint_annotations",
            format!(
                "{} annotated keypoints for {n} 3D keypoints",
                record.keypoint_annotations.n_keypoints()
            ),
        ));
    }
    if record.image_size.width == 0 || record.image_size.height == 0 {
        return Err(schema(
            index,
            "image_size",
            "image dimensions must be positive",
        ));
    }
    Ok(record)
}

pub fn load_annotations(
    path: &Path,
) -> Result<(Vec<AnnotationRecord>, Vec<ValidationWarning>), DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_annotations(&text)
}

pub fn annotations_to_string(records: &[AnnotationRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("records always serialize");
    s.push('\n');
    s
}

/// Writes `contents` next to `path` and renames it into place, so readers
/// never see a partially written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), DatasetError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DatasetError::io(dir, e))?;
    tmp.write_all(contents)
        .map_err(|e| DatasetError::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| DatasetError::io(tmp.path(), e))?;
    tmp.persist(path)
        .map_err(|e| DatasetError::io(path, e.error))?;
    Ok(())
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DatasetError> {
    write_atomic(path, annotations_to_string(records).as_bytes())
}

/// Parses the `v` and `f` records of a Wavefront OBJ. Polygons are
/// fan-triangulated; texture and normal references (`f 1/2/3`) are
/// ignored, as are all other record types. Triangles that collapse to a
/// repeated vertex are dropped.
pub fn parse_obj(text: &str) -> Result<TriangleMesh, DatasetError> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut it = content.split_whitespace();
        let bad = |message: String| DatasetError::Parse {
            line,
            column: 1,
            message,
        };
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| bad(format!("bad coordinate '{t}'")))
                    })
                    .collect::<Result<_, _>>()?;
                if c.len() < 3 || !c.iter().all(|v| v.is_finite()) {
                    return Err(bad("vertex needs three finite coordinates".into()));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|_| bad(format!("bad face index '{t}'")))?;
                        let n = vertices.len() as i64;
                        let resolved = if i > 0 { i - 1 } else { n + i };
                        if i == 0 || resolved < 0 || resolved >= n {
                            return Err(DatasetError::IndexOutOfRange {
                                line,
                                index: i,
                                count: vertices.len(),
                            });
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(bad(format!("face with {} vertices", idx.len())));
                }
                for k in 1..idx.len() - 1 {
                    let f = [idx[0], idx[k], idx[k + 1]];
                    if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                        faces.push(f);
                    }
                }
            }
            _ => {}
        }
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

pub fn obj_to_string(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh, DatasetError> {
    parse_obj(&std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?)
}

pub fn save_mesh(path: &Path, mesh: &TriangleMesh) -> Result<(), DatasetError> {
    write_atomic(path, obj_to_string(mesh).as_bytes())
}

/// Record selection by category and attribute flags; unset fields match
/// everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordFilter {
    pub category: Option<String>,
    pub truncated: Option<bool>,
    pub occluded: Option<bool>,
}

impl RecordFilter {
    /// Untruncated, unoccluded records of one category.
    pub fn clean(category: &str) -> Self {
        Self {
            category: Some(category.into()),
            truncated: Some(false),
            occluded: Some(false),
        }
    }

    pub fn matches(&self, r: &AnnotationRecord) -> bool {
        self.category.as_ref().is_none_or(|c| *c == r.category)
            && self.truncated.is_none_or(|t| t == r.truncated)
            && self.occluded.is_none_or(|o| o == r.occluded)
    }
}

/// Order-preserving filter.
pub fn filter<'a, I, P>(records: I, predicate: P) -> Vec<AnnotationRecord>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
    P: Fn(&AnnotationRecord) -> bool,
{
    records
        .into_iter()
        .filter(|r| predicate(r))
        .cloned()
        .collect()
}

/// Explicit root if given, otherwise [`DATASET_ROOT_ENV`].
pub fn resolve_root(explicit: Option<&Path>) -> Result<PathBuf, DatasetError> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(DATASET_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .ok_or(DatasetError::NoRoot),
    }
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<AnnotationRecord>,
    pub warnings: Vec<ValidationWarning>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let (records, warnings) = load_annotations(&root.join(ANNOTATION_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            records,
            warnings,
        })
    }

    pub fn annotation_path(&self) -> PathBuf {
        self.root.join(ANNOTATION_FILE)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn get(&self, id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load_mesh(&self, record: &AnnotationRecord) -> Result<TriangleMesh, DatasetError> {
        load_mesh(&self.resolve(&record.model_path))
    }

    pub fn load_mask(&self, record: &AnnotationRecord) -> Result<BinaryMask, DatasetError> {
        let path = self.resolve(&record.mask_path);
        BinaryMask::load(&path).map_err(|e| match e {
            RenderError::Io(source) => DatasetError::Io { path, source },
            other => other.into(),
        })
    }

    pub fn save(&self) -> Result<(), DatasetError> {
        save_annotations(&self.annotation_path(), &self.records)
    }
}

//! On-disk dataset: one manifest plus per-record view binaries and a JSON
//! sidecar. Everything is a pure function of (seed, split, count, noise), so
//! two writes of the same configuration are byte-identical — the manifest
//! carries no timestamp on purpose.
//!
//! Layout under the dataset directory:
//! ```text
//! manifest.json
//! records/000000.natural.bin      64*64*3 little-endian f32, row-major HWC
//! records/000000.structure.bin
//! records/000000.stylized.bin
//! records/000000.meta.json        boxes, RLE masks, attributes, proposals
//! ```
//!
//! The split decides ground-truth exposure: train records list only known
//! (red + checker) objects in `objects`, val records list everything. The
//! pixels and the proposals always cover every object.

use super::proposals::{oracle_proposals, Proposal, ProposalNoise};
use super::render::{render_views, ViewSet, VIEW_LEN};
use super::scene::{sample_scene, Color, Material, SceneSpec, Shape, CANVAS};
use crate::geom::{BBox, BitMask, Rle};
use crate::util::{stream_rng, Stream};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: Split,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub proposal_noise: ProposalNoise,
}

/// One annotated object as consumers see it. For train records these are
/// known-class only; for val records the full population.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub shape: Shape,
    pub color: Color,
    pub material: Material,
    pub center: [f64; 2],
    pub size: f64,
    pub z: i64,
    pub known: bool,
    pub bbox: BBox,
    pub mask: BitMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub index: usize,
    pub views: ViewSet,
    pub gt: Vec<GtObject>,
    pub proposals: Vec<Proposal>,
}

/// Flattens a scene into evaluation-ready annotations, deriving each
/// object's known flag from its attributes.
pub fn gt_objects(scene: &SceneSpec) -> Vec<GtObject> {
    scene
        .objects
        .iter()
        .map(|o| GtObject {
            shape: o.spec.shape,
            color: o.spec.color,
            material: o.spec.material,
            center: o.spec.center,
            size: o.spec.size,
            z: o.spec.z,
            known: o.spec.known(),
            bbox: o.bbox,
            mask: o.mask.clone(),
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad json at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("corrupt dataset file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("manifest promises {manifest} records but the directory holds {found}")]
    CountMismatch { manifest: usize, found: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// serialized sidecar shapes

#[derive(Serialize, Deserialize)]
struct MetaObject {
    shape: Shape,
    color: Color,
    material: Material,
    center: [f64; 2],
    size: f64,
    z: i64,
    known: bool,
    bbox: BBox,
    rle: Rle,
}

#[derive(Serialize, Deserialize)]
struct MetaProposal {
    confidence: f64,
    bbox: BBox,
    rle: Rle,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    index: usize,
    objects: Vec<MetaObject>,
    proposals: Vec<MetaProposal>,
}

/// Stream index for record `i` of `split`. The splits occupy disjoint index
/// ranges so that one seed never produces the same scene in both train and
/// val.
fn record_stream_index(split: Split, i: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1 << 32,
    };
    offset + i as u64
}

/// Generate `count` records under `dir`. Record `i` derives all its
/// randomness from `(seed, split, i)` substreams, so any record can be
/// regenerated in isolation and generation order never matters.
pub fn write_dataset(
    dir: &Path,
    split: Split,
    count: usize,
    seed: u64,
    noise: &ProposalNoise,
) -> Result<Manifest, DatasetError> {
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir).map_err(io_err(&records_dir))?;

    for i in 0..count {
        let si = record_stream_index(split, i);
        let scene = sample_scene(&mut stream_rng(seed, Stream::SceneLayout, si));
        let views = render_views(&scene, &mut stream_rng(seed, Stream::Stylize, si));
        let proposals = oracle_proposals(
            &scene,
            &mut stream_rng(seed, Stream::ProposalNoise, si),
            noise,
        );

        for (name, buf) in [
            ("natural", &views.natural),
            ("structure", &views.structure),
            ("stylized", &views.stylized),
        ] {
            let path = records_dir.join(format!("{i:06}.{name}.bin"));
            let mut bytes = Vec::with_capacity(buf.len() * 4);
            for v in buf {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }

        let objects = scene
            .objects
            .iter()
            .filter(|o| split == Split::Val || o.spec.known())
            .map(|o| MetaObject {
                shape: o.spec.shape,
                color: o.spec.color,
                material: o.spec.material,
                center: o.spec.center,
                size: o.spec.size,
                z: o.spec.z,
                known: o.spec.known(),
                bbox: o.bbox,
                rle: Rle::encode(&o.mask),
            })
            .collect();
        let proposals = proposals
            .iter()
            .map(|p| MetaProposal {
                confidence: p.confidence,
                bbox: p.bbox,
                rle: Rle::encode(&p.mask),
            })
            .collect();
        let meta = MetaFile {
            index: i,
            objects,
            proposals,
        };
        let path = records_dir.join(format!("{i:06}.meta.json"));
        let body = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        fs::write(&path, body).map_err(io_err(&path))?;
    }

    let manifest = Manifest {
        version: FORMAT_VERSION,
        split,
        seed,
        count,
        image_size: CANVAS,
        proposal_noise: *noise,
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, body).map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Debug)]
pub struct DatasetReader {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<DatasetReader, DatasetError> {
        let manifest_path = dir.join("manifest.json");
        let body = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest =
            serde_json::from_slice(&body).map_err(|source| DatasetError::Json {
                path: manifest_path.clone(),
                source,
            })?;
        if manifest.image_size != CANVAS {
            return Err(DatasetError::Corrupt {
                path: manifest_path,
                reason: format!("unsupported image size {}", manifest.image_size),
            });
        }

        let records_dir = dir.join("records");
        let mut found = 0usize;
        for entry in fs::read_dir(&records_dir).map_err(io_err(&records_dir))? {
            let entry = entry.map_err(io_err(&records_dir))?;
            if entry.file_name().to_string_lossy().ends_with(".meta.json") {
                found += 1;
            }
        }
        if found != manifest.count {
            return Err(DatasetError::CountMismatch {
                manifest: manifest.count,
                found,
            });
        }

        Ok(DatasetReader {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn record(&self, index: usize) -> Result<Record, DatasetError> {
        let records_dir = self.dir.join("records");
        let read_view = |name: &str| -> Result<Vec<f32>, DatasetError> {
            let path = records_dir.join(format!("{index:06}.{name}.bin"));
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.len() != VIEW_LEN * 4 {
                return Err(DatasetError::Corrupt {
                    path,
                    reason: format!("expected {} bytes, found {}", VIEW_LEN * 4, bytes.len()),
                });
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let views = ViewSet {
            natural: read_view("natural")?,
            structure: read_view("structure")?,
            stylized: read_view("stylized")?,
        };

        let meta_path = records_dir.join(format!("{index:06}.meta.json"));
        let body = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let meta: MetaFile = serde_json::from_slice(&body).map_err(|source| DatasetError::Json {
            path: meta_path.clone(),
            source,
        })?;

        let corrupt = |reason: String| DatasetError::Corrupt {
            path: meta_path.clone(),
            reason,
        };
        if meta.index != index {
            return Err(corrupt(format!("sidecar claims index {}", meta.index)));
        }
        let mut gt = Vec::with_capacity(meta.objects.len());
        for o in meta.objects {
            if o.known != (o.color == Color::Red && o.material == Material::Checker) {
                return Err(corrupt("known flag contradicts attributes".into()));
            }
            let mask = o
                .rle
                .decode()
                .map_err(|e| corrupt(format!("object mask: {e}")))?;
            gt.push(GtObject {
                shape: o.shape,
                color: o.color,
                material: o.material,
                center: o.center,
                size: o.size,
                z: o.z,
                known: o.known,
                bbox: o.bbox,
                mask,
            });
        }
        let mut proposals = Vec::with_capacity(meta.proposals.len());
        for p in meta.proposals {
            let mask = p
                .rle
                .decode()
                .map_err(|e| corrupt(format!("proposal mask: {e}")))?;
            proposals.push(Proposal {
                confidence: p.confidence,
                bbox: p.bbox,
                mask,
            });
        }

        Ok(Record {
            index,
            views,
            gt,
            proposals,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Record>, DatasetError> {
        (0..self.len()).map(|i| self.record(i)).collect()
    }
}

/// Open and fully load one split directory.
pub fn load_split(dir: &Path) -> Result<Vec<Record>, DatasetError> {
    DatasetReader::open(dir)?.load_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk_sorted(dir: &Path) -> Vec<PathBuf> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let noise = ProposalNoise::default();
        let manifest = write_dataset(dir.path(), Split::Val, 4, 77, &noise).unwrap();
        assert_eq!(manifest.count, 4);

        let reader = DatasetReader::open(dir.path()).unwrap();
        assert_eq!(reader.manifest, manifest);
        for i in 0..4 {
            let rec = reader.record(i).unwrap();
            let si = (1u64 << 32) + i as u64;
            let scene = sample_scene(&mut stream_rng(77, Stream::SceneLayout, si));
            let views = render_views(&scene, &mut stream_rng(77, Stream::Stylize, si));
            let props = oracle_proposals(
                &scene,
                &mut stream_rng(77, Stream::ProposalNoise, si),
                &noise,
            );
            assert_eq!(rec.views, views);
            assert_eq!(rec.proposals, props);
            assert_eq!(rec.gt.len(), scene.objects.len());
            for (g, o) in rec.gt.iter().zip(&scene.objects) {
                assert_eq!(g.mask, o.mask);
                assert_eq!(g.bbox, o.bbox);
                assert_eq!(g.known, o.spec.known());
            }
        }
    }

    #[test]
    fn identical_seeds_write_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let noise = ProposalNoise::default();
        write_dataset(a.path(), Split::Train, 3, 5, &noise).unwrap();
        write_dataset(b.path(), Split::Train, 3, 5, &noise).unwrap();
        let fa = walk_sorted(a.path());
        let fb = walk_sorted(b.path());
        assert_eq!(fa.len(), fb.len());
        for (pa, pb) in fa.iter().zip(&fb) {
            assert_eq!(
                pa.strip_prefix(a.path()).unwrap(),
                pb.strip_prefix(b.path()).unwrap()
            );
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap(), "{pa:?}");
        }
    }

    #[test]
    fn train_split_exposes_known_objects_only() {
        let train = tempfile::tempdir().unwrap();
        let val = tempfile::tempdir().unwrap();
        let noise = ProposalNoise::none();
        write_dataset(train.path(), Split::Train, 12, 9, &noise).unwrap();
        write_dataset(val.path(), Split::Val, 12, 9, &noise).unwrap();
        let train_recs = load_split(train.path()).unwrap();
        let val_recs = load_split(val.path()).unwrap();

        // Unknown objects are hidden from train labels, not removed from the
        // scene: they still show up in pixels and proposals.
        let mut train_has_hidden = false;
        for t in &train_recs {
            assert!(t.gt.iter().all(|g| g.known));
            train_has_hidden |= t.proposals.len() > t.gt.len();
        }
        assert!(train_has_hidden, "12 train scenes had no unlabeled object");

        let val_has_unknown = val_recs
            .iter()
            .any(|v| v.gt.iter().any(|g| !g.known));
        assert!(val_has_unknown, "12 val scenes produced no unknown object");

        // One seed must not leak scenes across splits.
        for (t, v) in train_recs.iter().zip(&val_recs) {
            assert_ne!(t.views.natural, v.views.natural);
        }
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Val, 3, 1, &ProposalNoise::none()).unwrap();
        fs::remove_file(dir.path().join("records/000002.meta.json")).unwrap();
        match DatasetReader::open(dir.path()) {
            Err(DatasetError::CountMismatch { manifest, found }) => {
                assert_eq!((manifest, found), (3, 2));
            }
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_view_binary_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), Split::Val, 1, 2, &ProposalNoise::none()).unwrap();
        let path = dir.path().join("records/000000.structure.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        match reader.record(0) {
            Err(DatasetError::Corrupt { .. }) => {}
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }
}

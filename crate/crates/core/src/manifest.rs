//! Dataset manifests: one JSON header line (hierarchy + feature dims +
//! embedding-table path) followed by one JSON object per video record.
//! All file references are relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchySpec, LabelHierarchy};
use crate::kft;
use crate::knowledge::{KnowledgeStore, TokenRole};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Default for Split {
    fn default() -> Self {
        Split::Train
    }
}

/// Feature widths and per-video counts shared by every record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct DimsSpec {
    pub d2d: usize,
    pub d3d: usize,
    pub d_text: usize,
    pub d_region: usize,
    pub d_kg: usize,
    pub n_f: usize,
    pub max_keywords: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub hierarchy: HierarchySpec,
    pub dims: DimsSpec,
    /// Embedding-table path, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_2d: String,
    pub clip_3d: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub labels: Vec<(String, String)>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug)]
pub struct Manifest {
    pub dir: PathBuf,
    pub dims: DimsSpec,
    pub hierarchy: LabelHierarchy,
    pub embeddings_path: Option<PathBuf>,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> Vec<&VideoRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_knowledge<S: Scalar>(&self) -> Result<KnowledgeStore<S>> {
        match &self.embeddings_path {
            Some(p) => crate::knowledge::load_embedding_table(p, self.dims.d_kg),
            None => Ok(KnowledgeStore::new(self.dims.d_kg)),
        }
    }
}

/// Expected dims of one tensor file, derived from the header.
fn expected_dims(record: &VideoRecord, field: &str, dims: &DimsSpec) -> Vec<Option<usize>> {
    match field {
        "frame_2d" => vec![Some(dims.n_f), Some(dims.d2d)],
        "clip_3d" => vec![Some(dims.n_f), Some(dims.d3d)],
        "text" => vec![Some(dims.d_text)],
        // Regions per frame (M) varies per video; only the frame count and
        // the feature width are pinned.
        "regions" => vec![Some(dims.n_f), None, Some(dims.d_region)],
        _ => unreachable!("unknown field {field} for {}", record.video_id),
    }
}

fn check_tensor_file(
    cache: &mut HashMap<PathBuf, Vec<usize>>,
    dir: &Path,
    record: &VideoRecord,
    field: &str,
    rel: &str,
    dims: &DimsSpec,
) -> Result<()> {
    let path = dir.join(rel);
    let actual = match cache.get(&path) {
        Some(d) => d.clone(),
        None => {
            let (d, _) = kft::peek_dims(&path).map_err(|e| {
                Error::validation(
                    format!("record {}", record.video_id),
                    format!("{field} file {rel:?}: {e}"),
                )
            })?;
            cache.insert(path.clone(), d.clone());
            d
        }
    };
    let expected = expected_dims(record, field, dims);
    let ok = actual.len() == expected.len()
        && actual
            .iter()
            .zip(&expected)
            .all(|(&a, e)| e.map_or(true, |v| v == a));
    if !ok {
        return Err(Error::validation(
            format!("record {}", record.video_id),
            format!("{field} file {rel:?} has dims {actual:?}, expected {expected:?}"),
        ));
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            detail: "empty manifest".into(),
        })
        .and_then(|(i, l)| l.map(|l| (i, l)).map_err(Error::Io))?;
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        detail: format!("header: {e}"),
    })?;
    let hierarchy = LabelHierarchy::from_spec(&header.hierarchy)?;

    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut dim_cache: HashMap<PathBuf, Vec<usize>> = HashMap::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VideoRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if !seen_ids.insert(record.video_id.clone()) {
            return Err(Error::validation(
                format!("record {}", record.video_id),
                "duplicate video_id",
            ));
        }
        for (parent, child) in &record.labels {
            hierarchy.validate_path(parent, child).map_err(|e| {
                Error::validation(format!("record {}", record.video_id), e.to_string())
            })?;
        }
        if record.keywords.len() > header.dims.max_keywords {
            return Err(Error::validation(
                format!("record {}", record.video_id),
                format!(
                    "{} keywords exceed max_keywords {}",
                    record.keywords.len(),
                    header.dims.max_keywords
                ),
            ));
        }
        check_tensor_file(&mut dim_cache, &dir, &record, "frame_2d", &record.frame_2d, &header.dims)?;
        check_tensor_file(&mut dim_cache, &dir, &record, "clip_3d", &record.clip_3d, &header.dims)?;
        check_tensor_file(&mut dim_cache, &dir, &record, "text", &record.text, &header.dims)?;
        if let Some(rel) = &record.regions {
            check_tensor_file(&mut dim_cache, &dir, &record, "regions", rel, &header.dims)?;
        }
        records.push(record);
    }

    let embeddings_path = header.embeddings.as_ref().map(|rel| dir.join(rel));
    if let Some(p) = &embeddings_path {
        if !p.exists() {
            return Err(Error::validation(
                "manifest",
                format!("embedding table {p:?} does not exist"),
            ));
        }
    }

    Ok(Manifest {
        dir,
        dims: header.dims,
        hierarchy,
        embeddings_path,
        records,
    })
}

/// One video's features materialized as leaf tensors, ready for the model.
pub struct VideoFeatures<S: Scalar> {
    pub video_id: String,
    /// `n_f x d2d`
    pub frame_2d: DenseTensor<S>,
    /// `n_f x d3d`
    pub clip_3d: DenseTensor<S>,
    /// `d_text`
    pub text: DenseTensor<S>,
    /// Per-frame `M x d_region` region features; `None` when the video has
    /// no detected regions.
    pub regions: Option<Vec<DenseTensor<S>>>,
    /// Resolved keyword embeddings (unmatched tokens already skipped).
    pub keyword_embeddings: Vec<DenseTensor<S>>,
    pub keyword_tokens: Vec<String>,
}

/// Splits a rank-3 `n_f x M x d` tensor into per-frame rank-2 leaves.
fn split_frames<S: Scalar>(t: &DenseTensor<S>) -> Result<Vec<DenseTensor<S>>> {
    let dims = t.dims();
    let (n_f, m, d) = (dims[0], dims[1], dims[2]);
    let data = t.data();
    (0..n_f)
        .map(|j| {
            DenseTensor::new(vec![m, d], data[j * m * d..(j + 1) * m * d].to_vec())
        })
        .collect()
}

pub fn load_video_features<S: Scalar>(
    record: &VideoRecord,
    dir: &Path,
    dims: &DimsSpec,
    kstore: &mut KnowledgeStore<S>,
    params: &mut ParameterStore<S>,
) -> Result<VideoFeatures<S>> {
    let frame_2d = kft::load_tensor_file::<S>(&dir.join(&record.frame_2d))?;
    let clip_3d = kft::load_tensor_file::<S>(&dir.join(&record.clip_3d))?;
    let text = kft::load_tensor_file::<S>(&dir.join(&record.text))?;
    let regions = match &record.regions {
        Some(rel) => Some(split_frames(&kft::load_tensor_file::<S>(&dir.join(rel))?)?),
        None => None,
    };
    let mut keyword_embeddings = Vec::new();
    let mut keyword_tokens = Vec::new();
    for token in &record.keywords {
        if let Some(e) = kstore.lookup(params, token, TokenRole::Keyword)? {
            keyword_embeddings.push(e);
            keyword_tokens.push(token.clone());
        }
    }
    if frame_2d.dims() != [dims.n_f, dims.d2d] {
        return Err(Error::validation(
            format!("record {}", record.video_id),
            format!("frame_2d dims {:?}", frame_2d.dims()),
        ));
    }
    Ok(VideoFeatures {
        video_id: record.video_id.clone(),
        frame_2d,
        clip_3d,
        text,
        regions,
        keyword_embeddings,
        keyword_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{ChildLabelSpec, LabelSpec};

    fn write_feature_files(dir: &Path, dims: &DimsSpec) {
        let f2d = DenseTensor::<f32>::zeros(vec![dims.n_f, dims.d2d]).unwrap();
        let f3d = DenseTensor::<f32>::zeros(vec![dims.n_f, dims.d3d]).unwrap();
        let txt = DenseTensor::<f32>::zeros(vec![dims.d_text]).unwrap();
        let reg = DenseTensor::<f32>::zeros(vec![dims.n_f, 2, dims.d_region]).unwrap();
        kft::save_tensor_file(&f2d, &dir.join("f2d.kft")).unwrap();
        kft::save_tensor_file(&f3d, &dir.join("f3d.kft")).unwrap();
        kft::save_tensor_file(&txt, &dir.join("txt.kft")).unwrap();
        kft::save_tensor_file(&reg, &dir.join("reg.kft")).unwrap();
    }

    fn header_json() -> String {
        let header = ManifestHeader {
            hierarchy: HierarchySpec {
                level1: vec![LabelSpec {
                    name: "food".into(),
                    kg_token: None,
                }],
                level2: vec![
                    ChildLabelSpec {
                        name: "noodles".into(),
                        parent: "food".into(),
                        kg_token: None,
                    },
                    ChildLabelSpec {
                        name: "hotpot".into(),
                        parent: "food".into(),
                        kg_token: None,
                    },
                ],
            },
            dims: DimsSpec {
                d2d: 4,
                d3d: 3,
                d_text: 5,
                d_region: 2,
                d_kg: 2,
                n_f: 2,
                max_keywords: 3,
            },
            embeddings: None,
        };
        serde_json::to_string(&header).unwrap()
    }

    fn record_json(id: &str, labels: &str) -> String {
        format!(
            r#"{{"video_id":"{id}","frame_2d":"f2d.kft","clip_3d":"f3d.kft","text":"txt.kft","regions":"reg.kft","keywords":["kw1"],"labels":{labels},"split":"train"}}"#
        )
    }

    #[test]
    fn well_formed_manifest_loads_all_records() {
        let dir = tempfile::tempdir().unwrap();
        let dims = DimsSpec {
            d2d: 4,
            d3d: 3,
            d_text: 5,
            d_region: 2,
            d_kg: 2,
            n_f: 2,
            max_keywords: 3,
        };
        write_feature_files(dir.path(), &dims);
        let manifest = format!(
            "{}\n{}\n{}\n{}\n",
            header_json(),
            record_json("v1", r#"[["food","noodles"]]"#),
            record_json("v2", r#"[["food","hotpot"]]"#),
            record_json("v3", r#"[["food","noodles"],["food","hotpot"]]"#),
        );
        let mpath = dir.path().join("manifest.jsonl");
        std::fs::write(&mpath, manifest).unwrap();
        let m = load_manifest(&mpath).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.hierarchy.n_level2(), 2);
    }

    #[test]
    fn unknown_child_label_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let dims = DimsSpec {
            d2d: 4,
            d3d: 3,
            d_text: 5,
            d_region: 2,
            d_kg: 2,
            n_f: 2,
            max_keywords: 3,
        };
        write_feature_files(dir.path(), &dims);
        let manifest = format!(
            "{}\n{}\n",
            header_json(),
            record_json("v1", r#"[["food","pizza"]]"#)
        );
        let mpath = dir.path().join("manifest.jsonl");
        std::fs::write(&mpath, manifest).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("v1"), "{err}");
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let dims = DimsSpec {
            d2d: 4,
            d3d: 3,
            d_text: 5,
            d_region: 2,
            d_kg: 2,
            n_f: 2,
            max_keywords: 3,
        };
        write_feature_files(dir.path(), &dims);
        let manifest = format!("{}\n{}\nnot json\n", header_json(), record_json("v1", "[]"));
        let mpath = dir.path().join("manifest.jsonl");
        std::fs::write(&mpath, manifest).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_video_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dims = DimsSpec {
            d2d: 4,
            d3d: 3,
            d_text: 5,
            d_region: 2,
            d_kg: 2,
            n_f: 2,
            max_keywords: 3,
        };
        write_feature_files(dir.path(), &dims);
        let manifest = format!(
            "{}\n{}\n{}\n",
            header_json(),
            record_json("v1", "[]"),
            record_json("v1", "[]")
        );
        let mpath = dir.path().join("manifest.jsonl");
        std::fs::write(&mpath, manifest).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("duplicate video_id"), "{err}");
    }

    #[test]
    fn wrong_feature_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dims = DimsSpec {
            d2d: 4,
            d3d: 3,
            d_text: 5,
            d_region: 2,
            d_kg: 2,
            n_f: 2,
            max_keywords: 3,
        };
        write_feature_files(dir.path(), &dims);
        // Overwrite frame_2d with the wrong width.
        let bad = DenseTensor::<f32>::zeros(vec![2, 9]).unwrap();
        kft::save_tensor_file(&bad, &dir.path().join("f2d.kft")).unwrap();
        let manifest = format!("{}\n{}\n", header_json(), record_json("v1", "[]"));
        let mpath = dir.path().join("manifest.jsonl");
        std::fs::write(&mpath, manifest).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("frame_2d"), "{err}");
    }

    #[test]
    fn too_many_keywords_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dims = DimsSpec {
            d2d: 4,
            d3d: 3,
            d_text: 5,
            d_region: 2,
            d_kg: 2,
            n_f: 2,
            max_keywords: 3,
        };
        write_feature_files(dir.path(), &dims);
        let record = r#"{"video_id":"v1","frame_2d":"f2d.kft","clip_3d":"f3d.kft","text":"txt.kft","keywords":["a","b","c","d"],"labels":[]}"#;
        let manifest = format!("{}\n{record}\n", header_json());
        let mpath = dir.path().join("manifest.jsonl");
        std::fs::write(&mpath, manifest).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        assert!(err.to_string().contains("max_keywords"), "{err}");
    }
}

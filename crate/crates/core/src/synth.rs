//! Synthetic planted-structure corpus for desk-scale verification.
//!
//! Every level-2 label owns a low-dimensional latent; all of its feature
//! centers (2D, 3D, text, regions) and its knowledge-graph embedding are
//! fixed linear images of that latent. Frame features are label-conditioned
//! Gaussian draws around the centers, so labels are recoverable from
//! features by construction and the embedding-to-feature relation is
//! learnable (and extrapolates to a held-out label).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{ChildLabelSpec, HierarchySpec, LabelSpec};
use crate::kft;
use crate::manifest::{DimsSpec, ManifestHeader, Split, VideoRecord};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub n_parents: usize,
    pub children_per_parent: usize,
    pub dims: DimsSpec,
    pub regions_per_frame: usize,
    /// Vocabulary size of each label's keyword pool.
    pub keywords_per_label: usize,
    /// Keywords attached per video and label.
    pub keywords_per_video_label: usize,
    pub noise: f64,
    pub seed: u64,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Fraction of videos carrying two label paths.
    pub two_label_frac: f64,
    /// When set, the last child of the first parent is held out: its videos
    /// go to the test split only and its token is omitted from the
    /// embedding table (the scalability check registers it by hand).
    pub holdout: bool,
    /// Fraction of videos drawn for the held-out label.
    pub holdout_frac: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_videos: 600,
            n_parents: 3,
            children_per_parent: 4,
            dims: DimsSpec {
                d2d: 32,
                d3d: 32,
                d_text: 32,
                d_region: 32,
                d_kg: 32,
                n_f: 12,
                max_keywords: 10,
            },
            regions_per_frame: 3,
            keywords_per_label: 5,
            keywords_per_video_label: 2,
            noise: 0.5,
            seed: 0,
            val_frac: 0.1,
            test_frac: 0.1,
            two_label_frac: 0.35,
            holdout: false,
            holdout_frac: 0.08,
        }
    }
}

/// Ground truth of a generated corpus: per-child centers in every feature
/// space plus the exact knowledge-graph centers. The centroid oracle and
/// the label-scalability check consume this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorDescription {
    pub spec: SynthSpec,
    pub child_names: Vec<String>,
    pub parent_names: Vec<String>,
    pub centers_2d: Vec<Vec<f64>>,
    pub centers_3d: Vec<Vec<f64>>,
    pub centers_text: Vec<Vec<f64>>,
    pub centers_region: Vec<Vec<f64>>,
    pub kg_centers_children: Vec<Vec<f64>>,
    pub kg_centers_parents: Vec<Vec<f64>>,
    /// Name and exact embedding of the held-out child, when holdout is on.
    pub holdout_child: Option<String>,
}

impl GeneratorDescription {
    pub fn holdout_embedding(&self) -> Option<(&str, &[f64])> {
        self.holdout_child.as_deref().map(|name| {
            let idx = self
                .child_names
                .iter()
                .position(|n| n == name)
                .expect("holdout child exists");
            (name, self.kg_centers_children[idx].as_slice())
        })
    }
}

/// Intrinsic dimension of the planted class structure. Kept well below
/// the number of level-2 labels so the embedding-to-feature association
/// is overdetermined and a matching network must generalize to represent
/// it (the label-scalability property depends on this).
const LATENT_DIM: usize = 6;

/// Per-entry standard deviation of every class center, independent of the
/// latent dimension.
const CENTER_STD: f64 = 2.8;

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..rows)
        .map(|_| (0..cols).map(|_| normal.sample(rng)).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn noisy<S: Scalar>(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<S> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    center
        .iter()
        .map(|&c| S::from_f64(c + noise * normal.sample(rng)))
        .collect()
}

/// Generates the corpus on disk: `manifest.jsonl`, `embeddings.txt`,
/// `generator.json`, and the KFT1 feature files under `tensors/`.
/// A fixed spec (including the seed) reproduces the corpus byte for byte.
pub fn generate_synthetic_dataset<S: Scalar>(
    spec: &SynthSpec,
    out_dir: &Path,
) -> Result<GeneratorDescription> {
    if spec.n_videos == 0 {
        return Err(Error::Config("synthetic corpus needs at least one video".into()));
    }
    if spec.n_parents == 0 || spec.children_per_parent == 0 {
        return Err(Error::Config("synthetic hierarchy needs at least one class".into()));
    }
    if spec.holdout && spec.children_per_parent < 2 {
        return Err(Error::Config("holdout requires at least two children per parent".into()));
    }
    std::fs::create_dir_all(out_dir.join("tensors"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = &spec.dims;
    let n_children = spec.n_parents * spec.children_per_parent;

    // Shared linear maps from the latent space into every feature space,
    // scaled so center entries come out at CENTER_STD regardless of the
    // latent dimension.
    let proj_std = CENTER_STD / (LATENT_DIM as f64).sqrt();
    let proj_2d = sample_matrix(&mut rng, dims.d2d, LATENT_DIM, proj_std);
    let proj_3d = sample_matrix(&mut rng, dims.d3d, LATENT_DIM, proj_std);
    let proj_text = sample_matrix(&mut rng, dims.d_text, LATENT_DIM, proj_std);
    let proj_region = sample_matrix(&mut rng, dims.d_region, LATENT_DIM, proj_std);
    let proj_kg = sample_matrix(&mut rng, dims.d_kg, LATENT_DIM, proj_std);

    let child_latents: Vec<Vec<f64>> = (0..n_children)
        .map(|_| sample_matrix(&mut rng, 1, LATENT_DIM, 1.0).pop().unwrap())
        .collect();

    let parent_names: Vec<String> = (0..spec.n_parents).map(|p| format!("parent_{p}")).collect();
    let child_names: Vec<String> = (0..n_children)
        .map(|c| format!("child_{}_{}", c / spec.children_per_parent, c % spec.children_per_parent))
        .collect();
    let parent_of = |c: usize| c / spec.children_per_parent;

    let parent_latents: Vec<Vec<f64>> = (0..spec.n_parents)
        .map(|p| {
            let mut acc = vec![0.0; LATENT_DIM];
            for c in 0..n_children {
                if parent_of(c) == p {
                    for (a, v) in acc.iter_mut().zip(&child_latents[c]) {
                        *a += v;
                    }
                }
            }
            acc.iter().map(|v| v / spec.children_per_parent as f64).collect()
        })
        .collect();

    let centers_2d: Vec<Vec<f64>> = child_latents.iter().map(|u| mat_vec(&proj_2d, u)).collect();
    let centers_3d: Vec<Vec<f64>> = child_latents.iter().map(|u| mat_vec(&proj_3d, u)).collect();
    let centers_text: Vec<Vec<f64>> = child_latents.iter().map(|u| mat_vec(&proj_text, u)).collect();
    let centers_region: Vec<Vec<f64>> =
        child_latents.iter().map(|u| mat_vec(&proj_region, u)).collect();
    let kg_children: Vec<Vec<f64>> = child_latents.iter().map(|u| mat_vec(&proj_kg, u)).collect();
    let kg_parents: Vec<Vec<f64>> = parent_latents.iter().map(|u| mat_vec(&proj_kg, u)).collect();

    let holdout_child_idx = spec.holdout.then_some(spec.children_per_parent - 1);
    let holdout_name = holdout_child_idx.map(|c| child_names[c].clone());

    // Embedding table: label tokens at the exact centers, keyword tokens
    // nearby. The held-out child's label token is omitted on purpose.
    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    for p in 0..spec.n_parents {
        table.push((format!("tok_{}", parent_names[p]), kg_parents[p].clone()));
    }
    for c in 0..n_children {
        if Some(c) != holdout_child_idx {
            table.push((format!("tok_{}", child_names[c]), kg_children[c].clone()));
        }
    }
    let kw_noise = 0.2 * spec.noise;
    let mut keyword_vocab: Vec<Vec<String>> = Vec::with_capacity(n_children);
    for c in 0..n_children {
        let mut vocab = Vec::with_capacity(spec.keywords_per_label);
        for t in 0..spec.keywords_per_label {
            let token = format!("kw_{}_{t}", child_names[c]);
            let emb: Vec<f64> = noisy::<f64>(&mut rng, &kg_children[c], kw_noise);
            table.push((token.clone(), emb));
            vocab.push(token);
        }
        keyword_vocab.push(vocab);
    }
    table.sort_by(|a, b| a.0.cmp(&b.0));
    {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(out_dir.join("embeddings.txt"))?);
        for (token, emb) in &table {
            write!(out, "{token}")?;
            for v in emb {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
    }

    let hierarchy = HierarchySpec {
        level1: parent_names
            .iter()
            .map(|n| LabelSpec {
                name: n.clone(),
                kg_token: Some(format!("tok_{n}")),
            })
            .collect(),
        level2: (0..n_children)
            .map(|c| ChildLabelSpec {
                name: child_names[c].clone(),
                parent: parent_names[parent_of(c)].clone(),
                kg_token: Some(format!("tok_{}", child_names[c])),
            })
            .collect(),
    };
    let header = ManifestHeader {
        hierarchy,
        dims: *dims,
        embeddings: Some("embeddings.txt".into()),
    };

    let mut manifest_lines = vec![serde_json::to_string(&header).expect("header serializes")];
    let mut records = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let video_id = format!("v{v:05}");
        // Label assignment: a holdout draw yields exactly the held child.
        let is_holdout_video =
            spec.holdout && rng.random::<f64>() < spec.holdout_frac;
        let labels: Vec<usize> = if is_holdout_video {
            vec![holdout_child_idx.unwrap()]
        } else {
            let pick_regular = |rng: &mut ChaCha8Rng| -> usize {
                loop {
                    let c = rng.random_range(0..n_children);
                    if Some(c) != holdout_child_idx {
                        return c;
                    }
                }
            };
            let first = pick_regular(&mut rng);
            if rng.random::<f64>() < spec.two_label_frac {
                let mut second = pick_regular(&mut rng);
                while second == first {
                    second = pick_regular(&mut rng);
                }
                vec![first, second]
            } else {
                vec![first]
            }
        };
        let split = if is_holdout_video {
            Split::Test
        } else {
            let r = rng.random::<f64>();
            if r < spec.val_frac {
                Split::Val
            } else if r < spec.val_frac + spec.test_frac {
                Split::Test
            } else {
                Split::Train
            }
        };

        // Frames round-robin over the video's labels, so every label owns
        // at least floor(n_f / labels) frames.
        let frame_labels: Vec<usize> = (0..dims.n_f).map(|j| labels[j % labels.len()]).collect();
        let mut f2d = Vec::with_capacity(dims.n_f * dims.d2d);
        let mut f3d = Vec::with_capacity(dims.n_f * dims.d3d);
        let mut freg = Vec::with_capacity(dims.n_f * spec.regions_per_frame * dims.d_region);
        for &c in &frame_labels {
            f2d.extend(noisy::<S>(&mut rng, &centers_2d[c], spec.noise));
            f3d.extend(noisy::<S>(&mut rng, &centers_3d[c], spec.noise));
            for _ in 0..spec.regions_per_frame {
                freg.extend(noisy::<S>(&mut rng, &centers_region[c], spec.noise));
            }
        }
        let text_center: Vec<f64> = (0..dims.d_text)
            .map(|i| labels.iter().map(|&c| centers_text[c][i]).sum::<f64>() / labels.len() as f64)
            .collect();
        let ftext = noisy::<S>(&mut rng, &text_center, spec.noise);

        let paths: Vec<(String, String)> = labels
            .iter()
            .map(|&c| (parent_names[parent_of(c)].clone(), child_names[c].clone()))
            .collect();
        let mut keywords = Vec::new();
        for &c in &labels {
            for _ in 0..spec.keywords_per_video_label {
                let pick = rng.random_range(0..spec.keywords_per_label);
                let token = keyword_vocab[c][pick].clone();
                if !keywords.contains(&token) {
                    keywords.push(token);
                }
            }
        }
        keywords.truncate(dims.max_keywords);

        let rel_2d = format!("tensors/{video_id}_2d.kft");
        let rel_3d = format!("tensors/{video_id}_3d.kft");
        let rel_text = format!("tensors/{video_id}_text.kft");
        let rel_reg = format!("tensors/{video_id}_reg.kft");
        kft::save_tensor_file(
            &DenseTensor::new(vec![dims.n_f, dims.d2d], f2d)?,
            &out_dir.join(&rel_2d),
        )?;
        kft::save_tensor_file(
            &DenseTensor::new(vec![dims.n_f, dims.d3d], f3d)?,
            &out_dir.join(&rel_3d),
        )?;
        kft::save_tensor_file(
            &DenseTensor::new(vec![dims.d_text], ftext)?,
            &out_dir.join(&rel_text),
        )?;
        kft::save_tensor_file(
            &DenseTensor::new(
                vec![dims.n_f, spec.regions_per_frame, dims.d_region],
                freg,
            )?,
            &out_dir.join(&rel_reg),
        )?;

        let record = VideoRecord {
            video_id,
            frame_2d: rel_2d,
            clip_3d: rel_3d,
            text: rel_text,
            regions: Some(rel_reg),
            keywords,
            labels: paths,
            split,
        };
        manifest_lines.push(serde_json::to_string(&record).expect("record serializes"));
        records.push(record);
    }
    std::fs::write(out_dir.join("manifest.jsonl"), manifest_lines.join("\n") + "\n")?;

    let description = GeneratorDescription {
        spec: spec.clone(),
        child_names,
        parent_names,
        centers_2d,
        centers_3d,
        centers_text,
        centers_region,
        kg_centers_children: kg_children,
        kg_centers_parents: kg_parents,
        holdout_child: holdout_name,
    };
    std::fs::write(
        out_dir.join("generator.json"),
        serde_json::to_string_pretty(&description).expect("description serializes"),
    )?;
    Ok(description)
}

/// Independent nearest-centroid oracle: votes each frame for the child
/// whose (2D ++ 3D) center is closest, then selects every child with at
/// least a quarter of the frames. Operates on the raw feature tensors and
/// the generator's ground-truth centers only.
pub fn centroid_oracle_predict<S: Scalar>(
    desc: &GeneratorDescription,
    frame_2d: &DenseTensor<S>,
    clip_3d: &DenseTensor<S>,
) -> Vec<usize> {
    let n_f = frame_2d.dims()[0];
    let d2d = frame_2d.last_dim();
    let d3d = clip_3d.last_dim();
    let n_children = desc.child_names.len();
    let mut votes = vec![0usize; n_children];
    let f2d = frame_2d.to_f64_vec();
    let f3d = clip_3d.to_f64_vec();
    for j in 0..n_f {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..n_children {
            let mut dist = 0.0;
            for (a, b) in f2d[j * d2d..(j + 1) * d2d].iter().zip(&desc.centers_2d[c]) {
                dist += (a - b) * (a - b);
            }
            for (a, b) in f3d[j * d3d..(j + 1) * d3d].iter().zip(&desc.centers_3d[c]) {
                dist += (a - b) * (a - b);
            }
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        votes[best] += 1;
    }
    let threshold = (n_f / 4).max(1);
    (0..n_children).filter(|&c| votes[c] >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;
    use crate::metrics::micro_f1;

    fn small_spec(noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_videos: 40,
            n_parents: 2,
            children_per_parent: 3,
            dims: DimsSpec {
                d2d: 8,
                d3d: 8,
                d_text: 8,
                d_region: 8,
                d_kg: 8,
                n_f: 4,
                max_keywords: 6,
            },
            regions_per_frame: 2,
            keywords_per_label: 3,
            keywords_per_video_label: 2,
            noise,
            seed,
            ..Default::default()
        }
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            for entry in std::fs::read_dir(dir).unwrap() {
                let entry = entry.unwrap();
                let path = entry.path();
                if path.is_dir() {
                    walk(base, &path, out);
                } else {
                    let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                    out.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        walk(dir, dir, &mut files);
        files.sort_by(|a, b| a.0.cmp(&b.0));
        files
    }

    #[test]
    fn fixed_seed_reproduces_corpus_byte_for_byte() {
        let spec = small_spec(0.3, 7);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_dataset::<f32>(&spec, d1.path()).unwrap();
        generate_synthetic_dataset::<f32>(&spec, d2.path()).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn generated_manifest_passes_validation() {
        let spec = small_spec(0.5, 3);
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset::<f32>(&spec, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m.records.len(), 40);
        assert_eq!(m.hierarchy.n_level2(), 6);
        assert!(m.embeddings_path.is_some());
        let ks = m.load_knowledge::<f32>().unwrap();
        assert!(ks.n_pretrained() > 0);
    }

    #[test]
    fn zero_noise_oracle_is_perfect() {
        let spec = small_spec(0.0, 1);
        let dir = tempfile::tempdir().unwrap();
        let desc = generate_synthetic_dataset::<f64>(&spec, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for r in &m.records {
            let f2d = kft::load_tensor_file::<f64>(&m.dir.join(&r.frame_2d)).unwrap();
            let f3d = kft::load_tensor_file::<f64>(&m.dir.join(&r.clip_3d)).unwrap();
            predicted.push(centroid_oracle_predict(&desc, &f2d, &f3d));
            truth.push(
                r.labels
                    .iter()
                    .map(|(_, c)| m.hierarchy.level2_index(c).unwrap())
                    .collect::<Vec<_>>(),
            );
        }
        let (f1, _, _) = micro_f1(&predicted, &truth);
        assert_eq!(f1, 1.0, "oracle must be perfect at zero noise");
    }

    #[test]
    fn moderate_noise_oracle_stays_strong() {
        let spec = small_spec(0.5, 2);
        let dir = tempfile::tempdir().unwrap();
        let desc = generate_synthetic_dataset::<f64>(&spec, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for r in &m.records {
            let f2d = kft::load_tensor_file::<f64>(&m.dir.join(&r.frame_2d)).unwrap();
            let f3d = kft::load_tensor_file::<f64>(&m.dir.join(&r.clip_3d)).unwrap();
            predicted.push(centroid_oracle_predict(&desc, &f2d, &f3d));
            truth.push(
                r.labels
                    .iter()
                    .map(|(_, c)| m.hierarchy.level2_index(c).unwrap())
                    .collect::<Vec<_>>(),
            );
        }
        let (f1, _, _) = micro_f1(&predicted, &truth);
        assert!(f1 > 0.9, "oracle micro-F1 {f1} at noise 0.5");
    }

    #[test]
    fn holdout_videos_land_in_test_and_token_is_withheld() {
        let mut spec = small_spec(0.2, 9);
        spec.holdout = true;
        spec.holdout_frac = 0.3;
        spec.n_videos = 60;
        let dir = tempfile::tempdir().unwrap();
        let desc = generate_synthetic_dataset::<f32>(&spec, dir.path()).unwrap();
        let held = desc.holdout_child.clone().unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let mut held_count = 0;
        for r in &m.records {
            if r.labels.iter().any(|(_, c)| c == &held) {
                held_count += 1;
                assert_eq!(r.split, Split::Test, "held-out video outside test split");
            }
        }
        assert!(held_count > 0, "no held-out videos generated");
        let ks = m.load_knowledge::<f32>().unwrap();
        assert!(ks.get(&format!("tok_{held}")).is_none());
        let (name, emb) = desc.holdout_embedding().unwrap();
        assert_eq!(name, held);
        assert_eq!(emb.len(), spec.dims.d_kg);
    }

    #[test]
    fn zero_videos_is_spec_error() {
        let mut spec = small_spec(0.1, 0);
        spec.n_videos = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_dataset::<f32>(&spec, dir.path()).is_err());
    }
}

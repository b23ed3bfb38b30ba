//! The two-level scene label taxonomy with its parent map.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized form carried in the manifest header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub level1: Vec<LabelSpec>,
    pub level2: Vec<ChildLabelSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_token: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChildLabelSpec {
    pub name: String,
    pub parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_token: Option<String>,
}

/// Validated hierarchy: unique labels, a total parent map on level 2.
#[derive(Debug, Clone)]
pub struct LabelHierarchy {
    level1: Vec<String>,
    level2: Vec<String>,
    parent_index: Vec<usize>,
    kg_tokens_l1: Vec<Option<String>>,
    kg_tokens_l2: Vec<Option<String>>,
    l1_lookup: HashMap<String, usize>,
    l2_lookup: HashMap<String, usize>,
}

impl LabelHierarchy {
    pub fn from_spec(spec: &HierarchySpec) -> Result<Self> {
        if spec.level1.is_empty() {
            return Err(Error::validation("hierarchy", "level 1 is empty"));
        }
        if spec.level2.is_empty() {
            return Err(Error::validation("hierarchy", "level 2 is empty"));
        }
        let mut l1_lookup = HashMap::new();
        for (i, l) in spec.level1.iter().enumerate() {
            if l1_lookup.insert(l.name.clone(), i).is_some() {
                return Err(Error::validation(
                    "hierarchy",
                    format!("duplicate level-1 label {:?}", l.name),
                ));
            }
        }
        let mut l2_lookup = HashMap::new();
        let mut parent_index = Vec::with_capacity(spec.level2.len());
        for (i, l) in spec.level2.iter().enumerate() {
            if l2_lookup.insert(l.name.clone(), i).is_some() {
                return Err(Error::validation(
                    "hierarchy",
                    format!("duplicate level-2 label {:?}", l.name),
                ));
            }
            let parent = l1_lookup.get(&l.parent).copied().ok_or_else(|| {
                Error::validation(
                    "hierarchy",
                    format!("orphan child {:?}: parent {:?} does not exist", l.name, l.parent),
                )
            })?;
            parent_index.push(parent);
        }
        Ok(LabelHierarchy {
            level1: spec.level1.iter().map(|l| l.name.clone()).collect(),
            level2: spec.level2.iter().map(|l| l.name.clone()).collect(),
            parent_index,
            kg_tokens_l1: spec.level1.iter().map(|l| l.kg_token.clone()).collect(),
            kg_tokens_l2: spec.level2.iter().map(|l| l.kg_token.clone()).collect(),
            l1_lookup,
            l2_lookup,
        })
    }

    pub fn to_spec(&self) -> HierarchySpec {
        HierarchySpec {
            level1: self
                .level1
                .iter()
                .zip(&self.kg_tokens_l1)
                .map(|(name, tok)| LabelSpec {
                    name: name.clone(),
                    kg_token: tok.clone(),
                })
                .collect(),
            level2: self
                .level2
                .iter()
                .enumerate()
                .map(|(i, name)| ChildLabelSpec {
                    name: name.clone(),
                    parent: self.level1[self.parent_index[i]].clone(),
                    kg_token: self.kg_tokens_l2[i].clone(),
                })
                .collect(),
        }
    }

    pub fn n_level1(&self) -> usize {
        self.level1.len()
    }

    pub fn n_level2(&self) -> usize {
        self.level2.len()
    }

    pub fn level1_names(&self) -> &[String] {
        &self.level1
    }

    pub fn level2_names(&self) -> &[String] {
        &self.level2
    }

    /// Parent (level-1) index of each level-2 label.
    pub fn parent_indices(&self) -> &[usize] {
        &self.parent_index
    }

    pub fn level1_index(&self, name: &str) -> Option<usize> {
        self.l1_lookup.get(name).copied()
    }

    pub fn level2_index(&self, name: &str) -> Option<usize> {
        self.l2_lookup.get(name).copied()
    }

    /// Knowledge-graph token for a level-1 label; falls back to the label
    /// name itself when the manifest declares none.
    pub fn kg_token_l1(&self, index: usize) -> &str {
        self.kg_tokens_l1[index]
            .as_deref()
            .unwrap_or(&self.level1[index])
    }

    pub fn kg_token_l2(&self, index: usize) -> &str {
        self.kg_tokens_l2[index]
            .as_deref()
            .unwrap_or(&self.level2[index])
    }

    /// Checks that a (parent, child) label path exists in the hierarchy.
    pub fn validate_path(&self, parent: &str, child: &str) -> Result<(usize, usize)> {
        let child_idx = self
            .level2_index(child)
            .ok_or_else(|| Error::validation("label path", format!("unknown level-2 label {child:?}")))?;
        let parent_idx = self
            .level1_index(parent)
            .ok_or_else(|| Error::validation("label path", format!("unknown level-1 label {parent:?}")))?;
        if self.parent_index[child_idx] != parent_idx {
            return Err(Error::validation(
                "label path",
                format!(
                    "path ({parent:?}, {child:?}) disagrees with hierarchy parent {:?}",
                    self.level1[self.parent_index[child_idx]]
                ),
            ));
        }
        Ok((parent_idx, child_idx))
    }

    /// Per-level positive index sets derived from a video's label paths.
    pub fn path_indices(&self, paths: &[(String, String)]) -> Result<PathIndices> {
        let mut level1 = Vec::new();
        let mut level2 = Vec::new();
        for (parent, child) in paths {
            let (p, c) = self.validate_path(parent, child)?;
            if !level1.contains(&p) {
                level1.push(p);
            }
            if !level2.contains(&c) {
                level2.push(c);
            }
        }
        level1.sort_unstable();
        level2.sort_unstable();
        Ok(PathIndices { level1, level2 })
    }

    /// A copy of the hierarchy with one level-2 label removed; used to train
    /// against a reduced label set while scoring against the full one.
    pub fn without_child(&self, child: &str) -> Result<LabelHierarchy> {
        if self.level2_index(child).is_none() {
            return Err(Error::validation(
                "hierarchy",
                format!("cannot remove unknown level-2 label {child:?}"),
            ));
        }
        if self.level2.len() == 1 {
            return Err(Error::validation("hierarchy", "cannot remove the only level-2 label"));
        }
        let mut spec = self.to_spec();
        spec.level2.retain(|l| l.name != child);
        LabelHierarchy::from_spec(&spec)
    }
}

/// Sorted, deduplicated per-level positive indices for one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathIndices {
    pub level1: Vec<usize>,
    pub level2: Vec<usize>,
}

/// Standalone validation entry point: `from_spec` performs the checks, so
/// a constructed hierarchy is valid by construction.
pub fn validate_hierarchy(spec: &HierarchySpec) -> Result<LabelHierarchy> {
    LabelHierarchy::from_spec(spec)
}

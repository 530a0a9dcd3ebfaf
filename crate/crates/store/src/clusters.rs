//! Named object clusters with a revision counter.

use std::collections::{BTreeMap, BTreeSet};

use latsim_core::similarity::{Cluster, ClusterSet};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ClusterOp {
    Add { name: String },
    Remove { name: String },
    Rename { from: String, to: String },
    /// Creates the cluster if it does not exist yet.
    Assign { name: String, objects: Vec<u64> },
    Unassign { name: String, objects: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterStore {
    /// Members are object ids, not matrix rows.
    clusters: BTreeMap<String, BTreeSet<u64>>,
    /// Session revision of the last mutation; 0 if never mutated.
    pub revision: u64,
    /// Minimum members per cluster when computing weights.
    pub min_size: usize,
    /// Keep a cluster around once its last member is unassigned.
    pub keep_empty: bool,
}

impl Default for ClusterStore {
    fn default() -> Self {
        Self {
            clusters: BTreeMap::new(),
            revision: 0,
            min_size: 1,
            keep_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterView {
    pub name: String,
    pub members: Vec<u64>,
}

impl ClusterStore {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&BTreeSet<u64>> {
        self.clusters.get(name)
    }

    pub fn views(&self) -> Vec<ClusterView> {
        self.clusters
            .iter()
            .map(|(name, m)| ClusterView {
                name: name.clone(),
                members: m.iter().copied().collect(),
            })
            .collect()
    }

    /// Applies `op` atomically: on error nothing changes. `known` tells
    /// whether an object id exists in the bundle.
    pub fn apply(&mut self, op: &ClusterOp, revision: u64, known: impl Fn(u64) -> bool) -> Result<()> {
        let mut next = self.clusters.clone();
        match op {
            ClusterOp::Add { name } => {
                check_name(name)?;
                if next.contains_key(name) {
                    return Err(StoreError::Conflict(format!("cluster `{name}` already exists")));
                }
                next.insert(name.clone(), BTreeSet::new());
            }
            ClusterOp::Remove { name } => {
                next.remove(name).ok_or_else(|| missing(name))?;
            }
            ClusterOp::Rename { from, to } => {
                check_name(to)?;
                if from != to && next.contains_key(to) {
                    return Err(StoreError::Conflict(format!("cluster `{to}` already exists")));
                }
                let members = next.remove(from).ok_or_else(|| missing(from))?;
                next.insert(to.clone(), members);
            }
            ClusterOp::Assign { name, objects } => {
                check_name(name)?;
                check_objects(objects, &known)?;
                next.entry(name.clone()).or_default().extend(objects.iter().copied());
            }
            ClusterOp::Unassign { name, objects } => {
                check_objects(objects, &known)?;
                let members = next.get_mut(name).ok_or_else(|| missing(name))?;
                for id in objects {
                    if !members.remove(id) {
                        return Err(StoreError::NotFound(format!("object {id} is not in cluster `{name}`")));
                    }
                }
                if members.is_empty() && !self.keep_empty {
                    next.remove(name);
                }
            }
        }
        self.clusters = next;
        self.revision = revision;
        Ok(())
    }

    /// Clusters with members translated to matrix rows.
    pub fn to_cluster_set(&self, row_of: impl Fn(u64) -> Option<usize>) -> Result<ClusterSet> {
        let clusters = self
            .clusters
            .iter()
            .map(|(name, ids)| {
                let rows = ids
                    .iter()
                    .map(|&id| row_of(id).ok_or_else(|| StoreError::NotFound(format!("object {id}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Cluster::new(name.clone(), rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterSet::new(clusters))
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.trim().is_empty() {
        return Err(StoreError::Invalid("cluster name is empty".into()));
    }
    Ok(())
}

fn check_objects(objects: &[u64], known: &impl Fn(u64) -> bool) -> Result<()> {
    if objects.is_empty() {
        return Err(StoreError::Invalid("no objects given".into()));
    }
    match objects.iter().find(|&&id| !known(id)) {
        Some(id) => Err(StoreError::NotFound(format!("object {id}"))),
        None => Ok(()),
    }
}

fn missing(name: &str) -> StoreError {
    StoreError::NotFound(format!("cluster `{name}`"))
}

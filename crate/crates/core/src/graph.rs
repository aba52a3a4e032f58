//! Per-frame Variable Graph construction.
//!
//! A Variable Graph holds every node detected in one frame: the skeleton
//! nodes of all persons followed by all object nodes, grouped by category.
//! Skeleton nodes are fully connected in both directions; object nodes send a
//! single directed edge to every skeleton node and receive none, so object
//! features are never overwritten by aggregation.

use crate::attributes::ObjectAttributes;
use crate::batching::PaddedLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// One human joint keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonNode {
    /// Image-plane position, normalized to the unit square at ingestion.
    pub position: [f64; 2],
    /// Detection confidence in [0, 1].
    pub score: f64,
    pub person_index: usize,
    /// Joint slot in the skeleton standard, `0 <= joint_index < J`.
    pub joint_index: usize,
}

/// One interactive object node.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub attributes: ObjectAttributes,
    pub category_index: usize,
}

/// All nodes of one frame in canonical order: person blocks (each exactly `J`
/// joints in standard order) before object groups (ascending category; within
/// a group descending score, ties by ascending x then y).
#[derive(Debug, Clone, PartialEq)]
pub struct VariableGraph {
    pub j: usize,
    pub persons: Vec<Vec<SkeletonNode>>,
    pub object_groups: Vec<Vec<ObjectNode>>,
    pub frame_index: usize,
}

impl VariableGraph {
    pub fn empty(j: usize, frame_index: usize) -> Self {
        VariableGraph {
            j,
            persons: Vec::new(),
            object_groups: Vec::new(),
            frame_index,
        }
    }

    pub fn person_count(&self) -> usize {
        self.persons.len()
    }

    pub fn skeleton_count(&self) -> usize {
        self.persons.len() * self.j
    }

    pub fn object_count(&self) -> usize {
        self.object_groups.iter().map(|g| g.len()).sum()
    }

    pub fn node_count(&self) -> usize {
        self.skeleton_count() + self.object_count()
    }

    /// Object nodes flattened in canonical order.
    pub fn objects(&self) -> impl Iterator<Item = &ObjectNode> {
        self.object_groups.iter().flatten()
    }

    /// Per-category object counts in canonical order.
    pub fn category_counts(&self) -> Vec<usize> {
        self.object_groups.iter().map(|g| g.len()).collect()
    }
}

/// Slot kind in a padded layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Skeleton,
    Object,
    Empty,
}

/// Edge sets of one Variable Graph over canonical node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    /// Skeleton-skeleton edges; both directions of every pair, no self-pairs.
    pub skeleton_edges: BTreeSet<(usize, usize)>,
    /// Object-to-skeleton edges; exactly one direction per pair.
    pub object_edges: BTreeSet<(usize, usize)>,
}

impl EdgeSet {
    pub fn total(&self) -> usize {
        self.skeleton_edges.len() + self.object_edges.len()
    }
}

/// Arrange unordered detections into a canonical Variable Graph.
///
/// Persons are ordered by ascending `person_index`; each must contribute
/// exactly one joint per slot `0..J`. Object groups are ordered by ascending
/// category; within a group by descending score, ties by ascending x then y.
/// The result is a function of the detection multiset only, independent of
/// input order.
pub fn order_nodes(
    skeleton: &[SkeletonNode],
    objects: &[ObjectNode],
    j: usize,
    frame_index: usize,
) -> Result<VariableGraph> {
    let mut person_ids: Vec<usize> = skeleton.iter().map(|n| n.person_index).collect();
    person_ids.sort_unstable();
    person_ids.dedup();

    let mut persons = Vec::with_capacity(person_ids.len());
    for &pid in &person_ids {
        let mut slots: Vec<Option<&SkeletonNode>> = vec![None; j];
        let mut count = 0usize;
        for node in skeleton.iter().filter(|n| n.person_index == pid) {
            count += 1;
            if node.joint_index >= j {
                return Err(Error::MalformedInput(format!(
                    "person {pid}: joint index {} out of range for J={j}",
                    node.joint_index
                )));
            }
            if slots[node.joint_index].replace(node).is_some() {
                return Err(Error::MalformedInput(format!(
                    "person {pid}: duplicate joint index {}",
                    node.joint_index
                )));
            }
        }
        if count != j || slots.iter().any(|s| s.is_none()) {
            return Err(Error::MalformedInput(format!(
                "person {pid} has {count} joints, expected exactly J={j}"
            )));
        }
        persons.push(slots.into_iter().map(|s| s.unwrap().clone()).collect());
    }

    let mut categories: Vec<usize> = objects.iter().map(|o| o.category_index).collect();
    categories.sort_unstable();
    categories.dedup();
    let mut object_groups = Vec::with_capacity(categories.len());
    for &cat in &categories {
        let mut group: Vec<ObjectNode> = objects
            .iter()
            .filter(|o| o.category_index == cat)
            .cloned()
            .collect();
        group.sort_by(|a, b| {
            b.attributes
                .prob
                .total_cmp(&a.attributes.prob)
                .then(a.attributes.pos[0].total_cmp(&b.attributes.pos[0]))
                .then(a.attributes.pos[1].total_cmp(&b.attributes.pos[1]))
        });
        object_groups.push(group);
    }

    Ok(VariableGraph {
        j,
        persons,
        object_groups,
        frame_index,
    })
}

/// Enumerate the edge sets of a Variable Graph over canonical node indices.
pub fn build_edge_sets(vg: &VariableGraph) -> EdgeSet {
    let s = vg.skeleton_count();
    let k = vg.object_count();
    let mut skeleton_edges = BTreeSet::new();
    for u in 0..s {
        for v in 0..s {
            if u != v {
                skeleton_edges.insert((u, v));
            }
        }
    }
    let mut object_edges = BTreeSet::new();
    for o in s..s + k {
        for v in 0..s {
            object_edges.insert((o, v));
        }
    }
    EdgeSet {
        skeleton_edges,
        object_edges,
    }
}

/// Closed-form edge count: `(mJ)(mJ - 1) + mJ * sum(K_i)`.
pub fn edge_count(m: usize, j: usize, k_list: &[usize]) -> usize {
    let s = m * j;
    if s == 0 {
        return 0;
    }
    s * (s - 1) + s * k_list.iter().sum::<usize>()
}

/// Place a Variable Graph's nodes into a padded slot layout, producing the
/// per-slot validity and kind masks.
pub fn validity_masks(vg: &VariableGraph, layout: &PaddedLayout) -> Result<(Vec<bool>, Vec<NodeKind>)> {
    if vg.j != layout.j {
        return Err(Error::Capacity(format!(
            "graph J={} does not match layout J={}",
            vg.j, layout.j
        )));
    }
    if vg.person_count() > layout.max_persons || vg.object_count() > layout.max_objects {
        return Err(Error::Capacity(format!(
            "graph with {} persons / {} objects exceeds layout {}x{}",
            vg.person_count(),
            vg.object_count(),
            layout.max_persons,
            layout.max_objects
        )));
    }
    let slots = layout.slot_count();
    let mut valid = vec![false; slots];
    let mut kind = vec![NodeKind::Empty; slots];
    for p in 0..vg.person_count() {
        for jj in 0..vg.j {
            let slot = p * vg.j + jj;
            valid[slot] = true;
            kind[slot] = NodeKind::Skeleton;
        }
    }
    let base = layout.object_region_start();
    for (i, _) in vg.objects().enumerate() {
        valid[base + i] = true;
        kind[base + i] = NodeKind::Object;
    }
    Ok((valid, kind))
}

/// Row-normalized dense adjacency over layout slots.
///
/// Every valid node gets a self-loop. Valid skeleton slots additionally
/// receive edges from all other valid skeleton slots and from all valid
/// object slots; valid object slots keep only their self-loop. Rows with
/// nonzero in-degree are normalized to sum to 1; empty-slot rows are zero.
pub fn adjacency_from_masks(node_valid: &[bool], node_kind: &[NodeKind]) -> Result<Tensor> {
    if node_valid.len() != node_kind.len() {
        return Err(Error::shape(
            "adjacency_from_masks",
            format!("{} kinds", node_valid.len()),
            format!("{} kinds", node_kind.len()),
        ));
    }
    let v = node_valid.len();
    let mut adj = Tensor::zeros(&[v, v]);
    let data = adj.data_mut();
    for row in 0..v {
        if !node_valid[row] {
            continue;
        }
        match node_kind[row] {
            NodeKind::Object => {
                data[row * v + row] = 1.0;
            }
            NodeKind::Skeleton => {
                let mut degree = 0usize;
                for col in 0..v {
                    if !node_valid[col] {
                        continue;
                    }
                    // self-loop, other skeletons, and object -> skeleton edges
                    data[row * v + col] = 1.0;
                    degree += 1;
                }
                let w = 1.0 / degree as f64;
                for col in 0..v {
                    data[row * v + col] *= w;
                }
            }
            NodeKind::Empty => unreachable!("valid slot with empty kind"),
        }
    }
    Ok(adj)
}

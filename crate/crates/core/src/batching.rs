//! Node Padding: rectangular feature tensors over variable-size graphs.
//!
//! Inter-frame padding sizes a slot layout to the per-instance maxima and
//! embeds every frame at its canonical positions; intra-batch padding grows
//! layouts to the batch maxima, region-aligned, and appends all-empty
//! trailing frames. Padded slots carry all-zero features and are flagged by
//! the validity and kind masks, which is what keeps them inert downstream.

use crate::attributes::ClassAttributeDictionary;
use crate::error::{Error, Result};
use crate::graph::{validity_masks, NodeKind, VariableGraph};
use crate::tensor::Tensor;

/// Rectangular slot layout: person blocks of `J` slots each, then a flat
/// object region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddedLayout {
    pub max_persons: usize,
    pub max_objects: usize,
    pub j: usize,
}

impl PaddedLayout {
    pub fn new(max_persons: usize, max_objects: usize, j: usize) -> Self {
        PaddedLayout {
            max_persons,
            max_objects,
            j,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.max_persons * self.j + self.max_objects
    }

    pub fn object_region_start(&self) -> usize {
        self.max_persons * self.j
    }
}

/// One padded instance: features `(T, slots, C_in)` plus per-slot masks.
///
/// Channel layout per slot: `(x, y, score)` then `C_CA` class-attribute
/// channels; skeleton nodes carry zeros there.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedInstance {
    pub features: Tensor,
    pub node_valid: Vec<bool>,
    pub node_kind: Vec<NodeKind>,
    pub layout: PaddedLayout,
    pub label: usize,
}

impl PaddedInstance {
    pub fn t(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn mask_index(&self, t: usize, slot: usize) -> usize {
        t * self.slots() + slot
    }

    /// A frame is valid when any of its slots holds a real node.
    pub fn frame_valid(&self) -> Vec<bool> {
        let slots = self.slots();
        (0..self.t())
            .map(|t| self.node_valid[t * slots..(t + 1) * slots].iter().any(|&v| v))
            .collect()
    }
}

/// A batch of padded instances sharing one layout: features
/// `(N, T, slots, C_in)` plus masks indexed `(n, t, slot)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub features: Tensor,
    pub node_valid: Vec<bool>,
    pub node_kind: Vec<NodeKind>,
    pub layout: PaddedLayout,
    pub labels: Vec<usize>,
}

impl PaddedBatch {
    pub fn n(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn t(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn slots(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.features.shape()[3]
    }

    pub fn mask_index(&self, n: usize, t: usize, slot: usize) -> usize {
        (n * self.t() + t) * self.slots() + slot
    }

    pub fn frame_valid(&self) -> Vec<bool> {
        let slots = self.slots();
        (0..self.n() * self.t())
            .map(|nt| self.node_valid[nt * slots..(nt + 1) * slots].iter().any(|&v| v))
            .collect()
    }
}

/// Inter-frame padding: size the layout to the instance maxima and embed all
/// frames. `C_in` is `3 + C_CA` from the dictionary.
pub fn pad_frames(
    frames: &[VariableGraph],
    dict: &ClassAttributeDictionary,
    label: usize,
) -> Result<PaddedInstance> {
    if frames.is_empty() {
        return Err(Error::MalformedInput("instance with no frames".into()));
    }
    let j = frames[0].j;
    if frames.iter().any(|f| f.j != j) {
        return Err(Error::MalformedInput("frames disagree on J".into()));
    }
    let layout = PaddedLayout::new(
        frames.iter().map(|f| f.person_count()).max().unwrap_or(0),
        frames.iter().map(|f| f.object_count()).max().unwrap_or(0),
        j,
    );
    let c_in = 3 + dict.c_ca();
    let t = frames.len();
    let slots = layout.slot_count();
    let mut features = Tensor::zeros(&[t, slots, c_in]);
    let mut node_valid = vec![false; t * slots];
    let mut node_kind = vec![NodeKind::Empty; t * slots];
    for (ti, frame) in frames.iter().enumerate() {
        let (valid, kind) = validity_masks(frame, &layout)?;
        node_valid[ti * slots..(ti + 1) * slots].copy_from_slice(&valid);
        node_kind[ti * slots..(ti + 1) * slots].copy_from_slice(&kind);
        let data = features.data_mut();
        for (p, block) in frame.persons.iter().enumerate() {
            for (jj, node) in block.iter().enumerate() {
                let base = (ti * slots + p * j + jj) * c_in;
                data[base] = node.position[0];
                data[base + 1] = node.position[1];
                data[base + 2] = node.score;
            }
        }
        let region = layout.object_region_start();
        for (i, obj) in frame.objects().enumerate() {
            if obj.attributes.class_attr.len() != dict.c_ca() {
                return Err(Error::shape(
                    "pad_frames",
                    format!("class_attr of {} dims", dict.c_ca()),
                    format!("{} dims", obj.attributes.class_attr.len()),
                ));
            }
            let base = (ti * slots + region + i) * c_in;
            data[base] = obj.attributes.pos[0];
            data[base + 1] = obj.attributes.pos[1];
            data[base + 2] = obj.attributes.prob;
            data[base + 3..base + 3 + dict.c_ca()].copy_from_slice(&obj.attributes.class_attr);
        }
    }
    Ok(PaddedInstance {
        features,
        node_valid,
        node_kind,
        layout,
        label,
    })
}

/// Intra-batch padding: grow every instance to the batch maxima. Skeleton
/// regions align at slot 0, object regions shift together to the batch-wide
/// object region start; trailing frames are all-empty.
pub fn pad_batch(instances: &[PaddedInstance]) -> Result<PaddedBatch> {
    if instances.is_empty() {
        return Err(Error::MalformedInput("empty batch".into()));
    }
    let c_in = instances[0].c_in();
    if instances.iter().any(|i| i.c_in() != c_in) {
        return Err(Error::MalformedInput(format!(
            "instances disagree on channel count (expected {c_in})"
        )));
    }
    let j = instances[0].layout.j;
    if instances.iter().any(|i| i.layout.j != j) {
        return Err(Error::MalformedInput("instances disagree on J".into()));
    }
    let layout = PaddedLayout::new(
        instances.iter().map(|i| i.layout.max_persons).max().unwrap(),
        instances.iter().map(|i| i.layout.max_objects).max().unwrap(),
        j,
    );
    let t_max = instances.iter().map(|i| i.t()).max().unwrap();
    let n = instances.len();
    let slots = layout.slot_count();
    let mut features = Tensor::zeros(&[n, t_max, slots, c_in]);
    let mut node_valid = vec![false; n * t_max * slots];
    let mut node_kind = vec![NodeKind::Empty; n * t_max * slots];
    let region = layout.object_region_start();
    for (ni, inst) in instances.iter().enumerate() {
        let src_slots = inst.slots();
        let src_region = inst.layout.object_region_start();
        let data = features.data_mut();
        for t in 0..inst.t() {
            for s in 0..src_slots {
                let dst_slot = if s < src_region { s } else { region + (s - src_region) };
                let src_idx = inst.mask_index(t, s);
                let dst_idx = (ni * t_max + t) * slots + dst_slot;
                node_valid[dst_idx] = inst.node_valid[src_idx];
                node_kind[dst_idx] = inst.node_kind[src_idx];
                let src_base = src_idx * c_in;
                let dst_base = dst_idx * c_in;
                data[dst_base..dst_base + c_in]
                    .copy_from_slice(&inst.features.data()[src_base..src_base + c_in]);
            }
        }
    }
    Ok(PaddedBatch {
        features,
        node_valid,
        node_kind,
        layout,
        labels: instances.iter().map(|i| i.label).collect(),
    })
}

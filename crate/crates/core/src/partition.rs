//! Splitting the upper layers of a network into an old-task and a new-task
//! branch, cutting the weights between them, and reconnecting them.
//!
//! Layers are 0-based. With `split_start = S`, layers `0..S` form the shared
//! trunk and layers `S..L` are divided into node groups; the old group of a
//! layer always occupies its low output indices.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{DenseNet, Layer, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Old,
    New,
}

/// Output-node allocation of one layer in the split region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSplit {
    pub layer: usize,
    pub width: usize,
    pub old_size: usize,
    pub new_size: usize,
    /// Set when the layer stays in the shared trunk instead of being divided.
    pub shared: bool,
}

impl LayerSplit {
    pub fn old_out(&self) -> Range<usize> {
        0..self.old_size
    }

    pub fn new_out(&self) -> Range<usize> {
        self.old_size..self.old_size + self.new_size
    }

    fn side(&self, side: Side) -> Range<usize> {
        match side {
            Side::Old => self.old_out(),
            Side::New => self.new_out(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// Index of the first layer of the split region (`S` trunk layers precede it).
    pub split_start: usize,
    pub num_layers: usize,
    pub rho: f64,
    pub c_old: usize,
    pub c_new: usize,
    /// One entry per layer in `split_start..num_layers`.
    pub layers: Vec<LayerSplit>,
}

impl PartitionPlan {
    pub fn last_layer(&self) -> usize {
        self.num_layers - 1
    }

    pub fn split(&self, layer: usize) -> Option<&LayerSplit> {
        layer
            .checked_sub(self.split_start)
            .and_then(|k| self.layers.get(k))
    }

    pub fn shared_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.shared)
            .map(|l| l.layer)
            .collect()
    }

    /// Node groups feeding `layer`, or `None` when its input is shared.
    pub fn input_groups(&self, layer: usize) -> Option<&LayerSplit> {
        if layer <= self.split_start {
            return None;
        }
        self.split(layer - 1).filter(|s| !s.shared)
    }

    fn check_net(&self, net: &DenseNet) -> Result<()> {
        if net.num_layers() != self.num_layers {
            return Err(Error::shape(
                "partition plan layer count",
                self.num_layers,
                net.num_layers(),
            ));
        }
        for s in &self.layers {
            let out = net.layers()[s.layer].spec.out_dim;
            if out != s.width || s.old_size + s.new_size != s.width {
                return Err(Error::shape(
                    format!("partition plan layer {}", s.layer),
                    out,
                    s.width,
                ));
            }
        }
        Ok(())
    }
}

/// New-group size of a hidden layer under the adaptive ratio
/// `rho * C_old : (1 - rho) * C_old + C_new`, rounded half up.
/// A negative new share counts as zero.
pub fn new_group_size(width: usize, c_old: usize, c_new: usize, rho: f64) -> usize {
    let new_share = ((1.0 - rho) * c_old as f64 + c_new as f64).max(0.0);
    let old_share = rho * c_old as f64;
    (width as f64 * new_share / (old_share + new_share) + 0.5).floor() as usize
}

/// Builds the split plan for a network whose output layer already holds
/// `c_old + c_new` logits.
pub fn make_plan(
    net: &DenseNet,
    split_start: usize,
    c_old: usize,
    c_new: usize,
    rho: f64,
) -> Result<PartitionPlan> {
    let num_layers = net.num_layers();
    if split_start >= num_layers {
        return Err(Error::invalid(format!(
            "split start {split_start} must be below the layer count {num_layers}"
        )));
    }
    if c_old == 0 || c_new == 0 {
        return Err(Error::invalid(
            "splitting needs at least one old and one new class",
        ));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    if net.num_classes() != c_old + c_new {
        return Err(Error::shape(
            "output width",
            c_old + c_new,
            net.num_classes(),
        ));
    }
    let mut layers = Vec::with_capacity(num_layers - split_start);
    for layer in split_start..num_layers {
        let width = net.layers()[layer].spec.out_dim;
        if width == 0 {
            return Err(Error::invalid(format!("layer {layer} has zero width")));
        }
        let split = if layer + 1 == num_layers {
            LayerSplit {
                layer,
                width,
                old_size: c_old,
                new_size: c_new,
                shared: false,
            }
        } else {
            let n = new_group_size(width, c_old, c_new, rho);
            if n < 1 || width < 2 {
                shared_split(layer, width)
            } else {
                let n = n.min(width - 1);
                LayerSplit {
                    layer,
                    width,
                    old_size: width - n,
                    new_size: n,
                    shared: false,
                }
            }
        };
        layers.push(split);
    }
    // a shared layer above a divided one would merge the branches again, so
    // everything beneath the topmost shared layer joins the trunk
    if let Some(top) = layers.iter().rposition(|s| s.shared) {
        for s in &mut layers[..top] {
            *s = shared_split(s.layer, s.width);
        }
    }
    Ok(PartitionPlan {
        split_start,
        num_layers,
        rho,
        c_old,
        c_new,
        layers,
    })
}

fn shared_split(layer: usize, width: usize) -> LayerSplit {
    LayerSplit {
        layer,
        width,
        old_size: width,
        new_size: 0,
        shared: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossDirection {
    /// Old input nodes feeding new output nodes (`W_on`).
    OldToNew,
    /// New input nodes feeding old output nodes (`W_no`).
    NewToOld,
}

/// Rectangular block of weights `weight[outputs, inputs]` joining the two
/// partitions in one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossBlock {
    pub layer: usize,
    pub direction: CrossDirection,
    pub inputs: Range<usize>,
    pub outputs: Range<usize>,
}

impl CrossBlock {
    pub fn len(&self) -> usize {
        self.inputs.len() * self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, input: usize, output: usize) -> bool {
        self.inputs.contains(&input) && self.outputs.contains(&output)
    }

    /// Frobenius norm of this block of `weight`.
    pub fn norm(&self, weight: &Matrix) -> f64 {
        let mut s = 0.0;
        for j in self.outputs.clone() {
            for &w in &weight.row(j)[self.inputs.clone()] {
                s += w * w;
            }
        }
        s.sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CrossGroups {
    blocks: Vec<CrossBlock>,
}

impl CrossGroups {
    pub fn blocks(&self) -> &[CrossBlock] {
        &self.blocks
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Every cross weight as `(layer, input, output)`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.blocks.iter().flat_map(|b| {
            b.outputs
                .clone()
                .flat_map(move |j| b.inputs.clone().map(move |i| (b.layer, i, j)))
        })
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(CrossBlock::len).sum()
    }

    /// Sum of the Frobenius norms of all blocks.
    pub fn total_norm(&self, net: &DenseNet) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.norm(&net.layers()[b.layer].weight))
            .sum()
    }
}

/// Enumerates the weights joining opposite partitions. The first split layer
/// reads the shared trunk and contributes nothing.
pub fn cross_groups(plan: &PartitionPlan, net: &DenseNet) -> Result<CrossGroups> {
    plan.check_net(net)?;
    let mut blocks = Vec::new();
    for out in &plan.layers {
        if out.shared {
            continue;
        }
        let Some(inp) = plan.input_groups(out.layer) else {
            continue;
        };
        for (direction, inputs, outputs) in [
            (CrossDirection::OldToNew, inp.old_out(), out.new_out()),
            (CrossDirection::NewToOld, inp.new_out(), out.old_out()),
        ] {
            if !inputs.is_empty() && !outputs.is_empty() {
                blocks.push(CrossBlock {
                    layer: out.layer,
                    direction,
                    inputs,
                    outputs,
                });
            }
        }
    }
    Ok(CrossGroups { blocks })
}

fn check_blocks(net: &DenseNet, groups: &CrossGroups) -> Result<()> {
    for b in &groups.blocks {
        let layer = net
            .layers()
            .get(b.layer)
            .ok_or_else(|| Error::shape("cross group layer", net.num_layers(), b.layer))?;
        if b.outputs.end > layer.spec.out_dim || b.inputs.end > layer.spec.in_dim {
            return Err(Error::shape(
                format!("cross group in layer {}", b.layer),
                format!("{:?}", layer.weight.shape()),
                format!("{:?}", (b.outputs.end, b.inputs.end)),
            ));
        }
    }
    Ok(())
}

/// Zeroes every cross weight and clears its mask bit, turning the network
/// into the branched form. Idempotent.
pub fn disconnect(net: &mut DenseNet, groups: &CrossGroups) -> Result<()> {
    check_blocks(net, groups)?;
    for b in &groups.blocks {
        let layer = &mut net.layers_mut()[b.layer];
        let (rows, cols) = layer.weight.shape();
        let mask = layer
            .mask
            .get_or_insert_with(|| Matrix::filled(rows, cols, 1.0));
        for j in b.outputs.clone() {
            for i in b.inputs.clone() {
                mask.set(j, i, 0.0);
            }
        }
        layer.apply_mask();
    }
    Ok(())
}

/// Re-enables the cross weights removed by [`disconnect`], starting from zero.
pub fn bridge_reconnect(net: &mut DenseNet, groups: &CrossGroups) -> Result<()> {
    check_blocks(net, groups)?;
    for b in &groups.blocks {
        let layer = &net.layers()[b.layer];
        let disconnected = layer.mask.as_ref().is_some_and(|m| {
            b.outputs
                .clone()
                .all(|j| m.row(j)[b.inputs.clone()].iter().all(|&v| v == 0.0))
        });
        if !disconnected {
            return Err(Error::invalid(format!(
                "layer {} has cross weights that were never disconnected",
                b.layer
            )));
        }
    }
    for b in &groups.blocks {
        let layer = &mut net.layers_mut()[b.layer];
        let mask = layer.mask.as_mut().expect("checked above");
        for j in b.outputs.clone() {
            for i in b.inputs.clone() {
                mask.set(j, i, 1.0);
            }
        }
        if mask.as_slice().iter().all(|&m| m == 1.0) {
            layer.mask = None;
        }
    }
    Ok(())
}

/// Row/column index sets of each layer of one branch.
fn branch_indices(
    net: &DenseNet,
    plan: &PartitionPlan,
    side: Side,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let all_rows: Vec<usize> = (0..layer.spec.out_dim).collect();
            let all_cols: Vec<usize> = (0..layer.spec.in_dim).collect();
            let rows = match plan.split(l) {
                Some(s) if !s.shared => s.side(side).collect(),
                _ => all_rows,
            };
            let cols = match plan.input_groups(l) {
                Some(s) => s.side(side).collect(),
                None => all_cols,
            };
            (rows, cols)
        })
        .collect()
}

/// Standalone copy of the trunk followed by one branch, producing only that
/// branch's logits. Run it on a disconnected network.
pub fn extract_subnet(net: &DenseNet, plan: &PartitionPlan, side: Side) -> Result<DenseNet> {
    plan.check_net(net)?;
    let layers = net
        .layers()
        .iter()
        .zip(branch_indices(net, plan, side))
        .map(|(layer, (rows, cols))| {
            let mut spec = layer.spec;
            spec.in_dim = cols.len();
            spec.out_dim = rows.len();
            let mask = layer
                .mask
                .as_ref()
                .map(|m| m.submatrix(&rows, &cols))
                .filter(|m| m.as_slice().contains(&0.0));
            Layer {
                spec,
                weight: layer.weight.submatrix(&rows, &cols),
                bias: rows.iter().map(|&j| layer.bias[j]).collect(),
                mask,
            }
        })
        .collect();
    DenseNet::from_layers(layers)
}

/// Copies the parameters of an extracted branch back into its parent.
pub fn write_back_subnet(
    parent: &mut DenseNet,
    sub: &DenseNet,
    plan: &PartitionPlan,
    side: Side,
) -> Result<()> {
    plan.check_net(parent)?;
    let indices = branch_indices(parent, plan, side);
    if sub.num_layers() != parent.num_layers() {
        return Err(Error::shape(
            "subnet layer count",
            parent.num_layers(),
            sub.num_layers(),
        ));
    }
    for ((dst, src), (rows, cols)) in parent
        .layers_mut()
        .iter_mut()
        .zip(sub.layers())
        .zip(indices)
    {
        if src.weight.shape() != (rows.len(), cols.len()) {
            return Err(Error::shape(
                "subnet layer",
                format!("{:?}", (rows.len(), cols.len())),
                format!("{:?}", src.weight.shape()),
            ));
        }
        for (sj, &j) in rows.iter().enumerate() {
            dst.bias[j] = src.bias[sj];
            for (si, &i) in cols.iter().enumerate() {
                dst.weight.set(j, i, src.weight.get(sj, si));
            }
        }
        dst.apply_mask();
    }
    Ok(())
}

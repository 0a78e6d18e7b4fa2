//! Receptive-field arithmetic over a sequential layer list.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Layer {
    Conv { k: usize, stride: usize },
    Pool { k: usize, stride: usize },
    /// Transposed convolution. Each output voxel reads `ceil(k / stride)`
    /// consecutive input voxels per axis.
    Deconv { k: usize, stride: usize },
}

/// Extent and jump after each layer, in input-voxel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RfStep {
    pub layer: Layer,
    pub extent: f64,
    pub jump: f64,
}

pub fn receptive_field_trace(layers: &[Layer]) -> Vec<RfStep> {
    let (mut extent, mut jump) = (1.0f64, 1.0f64);
    layers
        .iter()
        .map(|&layer| {
            match layer {
                Layer::Conv { k, stride } | Layer::Pool { k, stride } => {
                    extent += (k as f64 - 1.0) * jump;
                    jump *= stride as f64;
                }
                Layer::Deconv { k, stride } => {
                    extent += (k.div_ceil(stride) as f64 - 1.0) * jump;
                    jump /= stride as f64;
                }
            }
            RfStep { layer, extent, jump }
        })
        .collect()
}

/// Side of the input cube that one output voxel depends on along the
/// longest path.
pub fn receptive_field_of(layers: &[Layer]) -> usize {
    receptive_field_trace(layers).last().map_or(1, |s| s.extent.round() as usize)
}

/// The fusion network's deepest path: three conv-conv-pool stages, three
/// deconvs, and the 1x1x1 output conv. Highway paths skip layers and
/// therefore see strictly less.
pub fn canonical_layers() -> Vec<Layer> {
    let mut v = Vec::new();
    for _ in 0..3 {
        v.push(Layer::Conv { k: 3, stride: 1 });
        v.push(Layer::Conv { k: 3, stride: 1 });
        v.push(Layer::Pool { k: 2, stride: 2 });
    }
    for _ in 0..3 {
        v.push(Layer::Deconv { k: 4, stride: 2 });
    }
    v.push(Layer::Conv { k: 1, stride: 1 });
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_stacks() {
        assert_eq!(receptive_field_of(&[Layer::Conv { k: 3, stride: 1 }]), 3);
        assert_eq!(receptive_field_of(&[Layer::Conv { k: 3, stride: 1 }; 2]), 5);
        assert_eq!(receptive_field_of(&[]), 1);
    }

    #[test]
    fn canonical_is_fifty() {
        let trace = receptive_field_trace(&canonical_layers());
        assert_eq!(trace[8].extent, 36.0);
        assert_eq!(trace[8].jump, 8.0);
        assert_eq!(trace.last().unwrap().jump, 1.0);
        assert_eq!(receptive_field_of(&canonical_layers()), 50);
    }
}

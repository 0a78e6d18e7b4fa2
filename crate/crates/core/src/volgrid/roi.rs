use super::{Dims, LabelMask};
use crate::error::{shape_err, Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned box with inclusive voxel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Roi {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(shape_err!("roi lo {lo:?} exceeds hi {hi:?}"));
        }
        Ok(Self { lo, hi })
    }

    pub fn whole(dims: Dims) -> Self {
        Self { lo: [0; 3], hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1] }
    }

    pub fn side(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.side().iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn check_inside(&self, dims: Dims) -> Result<()> {
        if (0..3).any(|a| self.hi[a] >= dims[a]) {
            return Err(shape_err!("roi {:?}..={:?} exceeds volume dims {dims:?}", self.lo, self.hi));
        }
        Ok(())
    }
}

/// Minimal box containing every foreground voxel of `m`.
pub fn bounding_box(m: &LabelMask) -> Result<Roi> {
    let [w, h, l] = m.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let data = m.data();
    for z in 0..l {
        for y in 0..h {
            let row = &data[w * (y + h * z)..w * (y + h * z) + w];
            let Some(first) = row.iter().position(|&v| v != 0) else {
                continue;
            };
            let last = row.iter().rposition(|&v| v != 0).unwrap_or(first);
            for (a, (f, s)) in [(first, last), (y, y), (z, z)].into_iter().enumerate() {
                lo[a] = lo[a].min(f);
                hi[a] = hi[a].max(s);
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::EmptyForeground);
    }
    Ok(Roi { lo, hi })
}

/// Moves every face of `r` outward by `pad` voxels, clamped to the volume.
pub fn pad_roi(r: &Roi, pad: usize, dims: Dims) -> Roi {
    Roi {
        lo: [0, 1, 2].map(|a| r.lo[a].saturating_sub(pad)),
        hi: [0, 1, 2].map(|a| r.hi[a].saturating_add(pad).min(dims[a] - 1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bbox_examples() {
        let mut m = LabelMask::empty([10, 10, 10]).unwrap();
        m.set(5, 6, 7, 1);
        assert_eq!(bounding_box(&m).unwrap(), Roi::new([5, 6, 7], [5, 6, 7]).unwrap());

        let full = LabelMask::filled([4, 5, 6], crate::volgrid::VolumeKind::Mask, 1).unwrap();
        assert_eq!(bounding_box(&full).unwrap(), Roi::whole([4, 5, 6]));

        let mut two = LabelMask::empty([5, 12, 4]).unwrap();
        two.set(1, 1, 1, 1);
        two.set(3, 9, 2, 1);
        assert_eq!(bounding_box(&two).unwrap(), Roi::new([1, 1, 1], [3, 9, 2]).unwrap());
    }

    #[test]
    fn bbox_empty_is_error() {
        let m = LabelMask::empty([3, 3, 3]).unwrap();
        assert!(matches!(bounding_box(&m), Err(Error::EmptyForeground)));
    }

    #[test]
    fn pad_examples() {
        let r = Roi::new([40, 40, 40], [50, 50, 50]).unwrap();
        let p = pad_roi(&r, 32, [512, 512, 200]);
        assert_eq!(p, Roi::new([8, 8, 8], [82, 82, 82]).unwrap());
        assert_eq!(pad_roi(&r, 0, [512, 512, 200]), r);
        let edge = Roi::new([0, 0, 0], [3, 3, 3]).unwrap();
        assert_eq!(pad_roi(&edge, 32, [20, 20, 20]), Roi::new([0, 0, 0], [19, 19, 19]).unwrap());
    }

    proptest! {
        #[test]
        fn bbox_is_minimal(bits in proptest::collection::vec(0u8..2, 4 * 3 * 5)) {
            prop_assume!(bits.contains(&1));
            let m = LabelMask::mask([4, 3, 5], bits).unwrap();
            let r = bounding_box(&m).unwrap();
            let mut on_face = [[false; 2]; 3];
            for z in 0..5 {
                for y in 0..3 {
                    for x in 0..4 {
                        if m.get(x, y, z) == 1 {
                            let p = [x, y, z];
                            prop_assert!(r.contains(p));
                            for a in 0..3 {
                                on_face[a][0] |= p[a] == r.lo[a];
                                on_face[a][1] |= p[a] == r.hi[a];
                            }
                        }
                    }
                }
            }
            // shrinking any face would drop a voxel lying on it
            prop_assert!(on_face.iter().flatten().all(|&f| f));
        }
    }
}

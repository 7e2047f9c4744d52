//! Stripe partitioning and per-part average pooling.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::features::{FeatureMap, MapDims};
use crate::tensor::{normalized, Region, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Contiguous stripe bounds over `extent` rows. Each stripe is
/// `extent / parts` tall; the last one absorbs the remainder.
pub fn stripe_bounds(extent: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 {
        return Err(Error::Config("part count must be at least 1".into()));
    }
    if parts > extent {
        return Err(Error::Config(format!(
            "cannot cut {extent} rows into {parts} stripes"
        )));
    }
    let step = extent / parts;
    Ok((0..parts)
        .map(|k| {
            let end = if k + 1 == parts { extent } else { (k + 1) * step };
            k * step..end
        })
        .collect())
}

/// Cuts a map into `parts` horizontal stripes along its height.
pub fn partition(fm: &FeatureMap, parts: usize) -> Result<Vec<FeatureMap>> {
    let bounds = stripe_bounds(fm.height, parts)?;
    let row = fm.width * fm.channels;
    let src = fm.data.data();
    bounds
        .into_iter()
        .map(|rows| {
            let mut data = Vec::with_capacity(fm.batch * rows.len() * row);
            for b in 0..fm.batch {
                let base = b * fm.height * row;
                data.extend_from_slice(&src[base + rows.start * row..base + rows.end * row]);
            }
            FeatureMap::new(Tensor::new(
                vec![fm.batch, rows.len(), fm.width, fm.channels],
                data,
            )?)
        })
        .collect()
}

/// Spatial mean of every stripe; one `[batch, C]` tensor per stripe.
pub fn pool_parts(stripes: &[FeatureMap]) -> Vec<Tensor> {
    stripes
        .iter()
        .map(|s| {
            let area = (s.height * s.width) as f64;
            let mut out = vec![0.0; s.batch * s.channels];
            for b in 0..s.batch {
                let acc = &mut out[b * s.channels..(b + 1) * s.channels];
                for i in 0..s.height {
                    for j in 0..s.width {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += s.at(b, i, j, c);
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a /= area;
                }
            }
            Tensor::new(vec![s.batch, s.channels], out).expect("batch x channels")
        })
        .collect()
}

/// Ordered part descriptors of one sample, horizontal parts first.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatureSet {
    pub sample_id: String,
    pub parts: Vec<Vec<f64>>,
    pub orientations: Vec<Orientation>,
}

impl PartFeatureSet {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// All parts laid end to end.
    pub fn concatenated(&self) -> Vec<f64> {
        self.parts.iter().flatten().copied().collect()
    }
}

/// Joins the two branches' pooled vectors, L2-normalizing each part.
pub fn assemble(
    sample_id: impl Into<String>,
    horizontal: &[Vec<f64>],
    vertical: &[Vec<f64>],
    p1: usize,
    p2: usize,
) -> Result<PartFeatureSet> {
    if horizontal.len() != p1 || vertical.len() != p2 {
        return Err(Error::Config(format!(
            "expected {p1} horizontal and {p2} vertical parts, got {} and {}",
            horizontal.len(),
            vertical.len()
        )));
    }
    let parts = horizontal.iter().chain(vertical).map(|v| normalized(v)).collect();
    let orientations = std::iter::repeat_n(Orientation::Horizontal, p1)
        .chain(std::iter::repeat_n(Orientation::Vertical, p2))
        .collect();
    Ok(PartFeatureSet {
        sample_id: sample_id.into(),
        parts,
        orientations,
    })
}

/// Differentiable pooling of one branch. `map` is a `[1, H, W, C]` node of
/// the horizontal view; vertical parts are the width-stripes of that same
/// node, which equal the height-stripes of its transpose. Returns the raw
/// (unnormalized) pooled vectors.
pub fn pool_branch(
    tape: &mut Tape,
    map: Var,
    dims: MapDims,
    orientation: Orientation,
    parts: usize,
) -> Result<Vec<Var>> {
    if parts == 0 {
        return Ok(Vec::new());
    }
    let regions: Vec<Region> = match orientation {
        Orientation::Horizontal => stripe_bounds(dims.height, parts)?
            .into_iter()
            .map(|rows| Region {
                rows,
                cols: 0..dims.width,
            })
            .collect(),
        Orientation::Vertical => stripe_bounds(dims.width, parts)?
            .into_iter()
            .map(|cols| Region {
                rows: 0..dims.height,
                cols,
            })
            .collect(),
    };
    regions
        .iter()
        .map(|r| tape.mean_over_region(map, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::duplicate_branches;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        FeatureMap::new(Tensor::new(vec![h, w, c], data).unwrap()).unwrap()
    }

    #[test]
    fn six_stripes_of_two() {
        let b = stripe_bounds(12, 6).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|r| r.len() == 2));
    }

    #[test]
    fn remainder_goes_to_last_stripe() {
        let b = stripe_bounds(7, 6).unwrap();
        let heights: Vec<usize> = b.iter().map(|r| r.len()).collect();
        assert_eq!(heights, vec![1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn single_stripe_is_whole_map() {
        let fm = map(5, 3, 2, |i, j, k| (i * 7 + j * 3 + k) as f64);
        let s = partition(&fm, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0], fm);
    }

    #[test]
    fn too_many_parts_rejected() {
        assert!(stripe_bounds(4, 5).is_err());
        assert!(stripe_bounds(4, 0).is_err());
    }

    #[test]
    fn pooling_means() {
        let ones = map(2, 2, 3, |_, _, _| 1.0);
        assert_eq!(pool_parts(&[ones])[0].data(), &[1.0, 1.0, 1.0]);
        let alternating = map(2, 2, 1, |i, j, _| if (i + j) % 2 == 0 { 0.0 } else { 2.0 });
        assert_eq!(pool_parts(&[alternating])[0].data(), &[1.0]);
    }

    #[test]
    fn constant_map_gives_equal_parts() {
        let fm = map(12, 12, 4, |_, _, k| k as f64 + 0.5);
        let pooled = pool_parts(&partition(&fm, 5).unwrap());
        assert!(pooled.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn assemble_counts() {
        let v = vec![vec![1.0, 0.0]; 6];
        let set = assemble("a", &v, &v, 6, 6).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.orientations[5], Orientation::Horizontal);
        assert_eq!(set.orientations[6], Orientation::Vertical);
        let one = assemble("a", &v, &[], 6, 0).unwrap();
        assert_eq!(one.len(), 6);
        assert!(assemble("a", &v, &v[..5], 6, 6).is_err());
    }

    #[test]
    fn zero_map_gives_zero_parts() {
        let fm = map(12, 12, 3, |_, _, _| 0.0);
        let (t, tt) = duplicate_branches(&fm);
        let h: Vec<Vec<f64>> = pool_parts(&partition(&t, 6).unwrap())
            .into_iter()
            .map(Tensor::into_data)
            .collect();
        let v: Vec<Vec<f64>> = pool_parts(&partition(&tt, 6).unwrap())
            .into_iter()
            .map(Tensor::into_data)
            .collect();
        let set = assemble("z", &h, &v, 6, 6).unwrap();
        assert!(set.parts.iter().all(|p| p.iter().all(|&x| x == 0.0)));
    }

    proptest! {
        #[test]
        fn stripes_tile_exactly(extent in 1usize..64, parts in 1usize..64) {
            prop_assume!(parts <= extent);
            let b = stripe_bounds(extent, parts).unwrap();
            prop_assert_eq!(b[0].start, 0);
            prop_assert_eq!(b.last().unwrap().end, extent);
            for w in b.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
                prop_assert!(!w[0].is_empty());
            }
        }

        #[test]
        fn weighted_part_mean_is_global_mean(
            h in 1usize..10, w in 1usize..6, p in 1usize..10,
            values in proptest::collection::vec(-5.0f64..5.0, 10 * 6 * 2),
        ) {
            prop_assume!(p <= h);
            let fm = map(h, w, 2, |i, j, k| values[(i * 6 + j) * 2 + k]);
            let stripes = partition(&fm, p).unwrap();
            let pooled = pool_parts(&stripes);
            let global = &pool_parts(&[fm.clone()])[0];
            for k in 0..2 {
                let weighted: f64 = stripes.iter().zip(&pooled)
                    .map(|(s, v)| s.height as f64 * v.data()[k]).sum::<f64>() / h as f64;
                prop_assert!((weighted - global.data()[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn vertical_parts_are_width_stripes(
            values in proptest::collection::vec(-1.0f64..1.0, 6 * 8 * 3),
            p in 1usize..7,
        ) {
            let fm = map(6, 8, 3, |i, j, k| values[(i * 8 + j) * 3 + k]);
            let (_, tt) = duplicate_branches(&fm);
            let via_transpose = pool_parts(&partition(&tt, p).unwrap());

            let mut tape = Tape::new();
            let node = tape.constant(fm.data.clone());
            let vars = pool_branch(&mut tape, node, fm.dims(), Orientation::Vertical, p).unwrap();
            for (a, v) in via_transpose.iter().zip(vars) {
                for (x, y) in a.data().iter().zip(tape.value(v).data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

//! The fake-mask operation: pastes the proposed fake region onto the real
//! target ("masked fake") and crops matching regions for the local L1 term.
//!
//! Boxes are closed-open, `[x0, x0 + side) × [y0, y0 + side)`, and pasting is
//! a hard per-pixel select with no blending.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::region_proposal::Region;
use crate::tensor::{Scalar, Tensor};

/// Result of compositing one batch.
#[derive(Clone, Debug)]
pub struct MaskedPair<T> {
    /// Real outside each region, fake inside, `(N, C, H, W)`.
    pub masked_fake: Tensor<T>,
    pub regions: Vec<Region>,
    /// `(N, C, side, side)` crops of the real target.
    pub real_crop: Tensor<T>,
    /// `(N, C, side, side)` crops of the generated image.
    pub fake_crop: Tensor<T>,
}

fn check_regions(shape: &[usize], regions: &[Region]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected (N, C, H, W), got {shape:?}")));
    }
    if regions.len() != shape[0] {
        return Err(Error::Shape(format!(
            "{} regions for a batch of {}",
            regions.len(),
            shape[0]
        )));
    }
    for r in regions {
        if !r.fits(shape[3], shape[2]) {
            return Err(Error::OutOfBounds(format!(
                "[{}, {}) x [{}, {}) in {}x{}",
                r.x0,
                r.x0 + r.side,
                r.y0,
                r.y0 + r.side,
                shape[3],
                shape[2]
            )));
        }
    }
    Ok(())
}

/// 0/1 tensor of `shape` that is 1 inside each sample's region box.
pub fn region_mask<T: Scalar>(shape: &[usize], regions: &[Region]) -> Result<Tensor<T>> {
    check_regions(shape, regions)?;
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut mask = Tensor::zeros(shape);
    let data = mask.data_mut();
    for (n, r) in regions.iter().enumerate() {
        for ch in 0..c {
            for y in r.y0..r.y0 + r.side {
                let row = ((n * c + ch) * h + y) * w;
                data[row + r.x0..row + r.x0 + r.side].fill(T::one());
            }
        }
    }
    Ok(mask)
}

/// Differentiable masked fake: gradients reach `fake` only inside the regions.
pub fn composite_var<T: Scalar>(real: &Var<T>, fake: &Var<T>, regions: &[Region]) -> Result<Var<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let mask = region_mask(real.shape(), regions)?;
    Ok(Var::select(&mask, fake, real))
}

/// Differentiable per-sample crops, stacked to `(N, C, side, side)`.
pub fn crop_var<T: Scalar>(image: &Var<T>, regions: &[Region]) -> Result<Var<T>> {
    check_regions(image.shape(), regions)?;
    let side = regions[0].side;
    if regions.iter().any(|r| r.side != side) {
        return Err(Error::Shape("regions in one batch must share a side".into()));
    }
    let c = image.shape()[1];
    let parts: Vec<Var<T>> = regions
        .iter()
        .enumerate()
        .map(|(n, r)| image.slice(&[n, 0, r.y0, r.x0], &[1, c, side, side]))
        .collect();
    Ok(Var::concat(&parts, 0))
}

pub fn composite<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, regions: &[Region]) -> Result<MaskedPair<T>> {
    let masked = composite_var(
        &Var::constant(real.clone()),
        &Var::constant(fake.clone()),
        regions,
    )?;
    Ok(MaskedPair {
        masked_fake: masked.value().clone(),
        regions: regions.to_vec(),
        real_crop: crop(real, regions)?,
        fake_crop: crop(fake, regions)?,
    })
}

pub fn crop<T: Scalar>(image: &Tensor<T>, regions: &[Region]) -> Result<Tensor<T>> {
    Ok(crop_var(&Var::constant(image.clone()), regions)?.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use proptest::prelude::*;

    fn filled(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    #[test]
    fn full_cover_region_yields_fake() {
        let real = filled(&[1, 3, 8, 8], -0.5);
        let fake = filled(&[1, 3, 8, 8], 0.25);
        let m = composite(&real, &fake, &[Region::from_box(0, 0, 8)]).unwrap();
        assert_eq!(m.masked_fake, fake);
        assert_eq!(crop(&fake, &[Region::from_box(0, 0, 8)]).unwrap(), fake);
    }

    #[test]
    fn top_left_two_by_two_paste() {
        let real = filled(&[1, 2, 4, 4], 0.0);
        let fake = filled(&[1, 2, 4, 4], 1.0);
        let m = composite(&real, &fake, &[Region::from_box(0, 0, 2)]).unwrap();
        for ch in 0..2 {
            let plane = &m.masked_fake.data()[ch * 16..(ch + 1) * 16];
            assert_eq!(plane.iter().filter(|&&v| v == 1.0).count(), 4);
            for y in 0..4 {
                for x in 0..4 {
                    let expect = if y < 2 && x < 2 { 1.0 } else { 0.0 };
                    assert_eq!(plane[y * 4 + x], expect);
                }
            }
        }
        assert_eq!(m.fake_crop.shape(), &[1, 2, 2, 2]);
        assert_eq!(m.real_crop, filled(&[1, 2, 2, 2], 0.0));
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = filled(&[2, 3, 16, 16], 0.7);
        let r = [Region::from_box(3, 5, 6), Region::from_box(10, 0, 6)];
        assert_eq!(crop(&img, &r).unwrap(), filled(&[2, 3, 6, 6], 0.7));
    }

    #[test]
    fn out_of_bounds_and_shape_errors() {
        let a = filled(&[1, 1, 8, 8], 0.0);
        let b = filled(&[1, 1, 8, 9], 0.0);
        assert!(matches!(
            composite(&a, &a, &[Region::from_box(4, 0, 5)]),
            Err(Error::OutOfBounds(_))
        ));
        assert!(matches!(crop(&a, &[Region::from_box(0, 7, 2)]), Err(Error::OutOfBounds(_))));
        assert!(matches!(
            composite(&a, &b, &[Region::from_box(0, 0, 2)]),
            Err(Error::Shape(_))
        ));
        assert!(composite(&a, &a, &[]).is_err());
    }

    #[test]
    fn gradient_reaches_fake_only_inside_region() {
        let real = Var::constant(filled(&[1, 1, 6, 6], 0.3));
        let fake = Var::leaf(filled(&[1, 1, 6, 6], -0.2));
        let region = Region::from_box(1, 2, 3);
        let masked = composite_var(&real, &fake, &[region]).unwrap();
        let g = grad(&masked.square().sum_all(), &[&fake], false).remove(0);
        for y in 0..6 {
            for x in 0..6 {
                let v = g.value().data()[y * 6 + x];
                if region.contains(x, y) {
                    assert_eq!(v, -0.4);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, usize, usize)> {
        (1usize..8).prop_flat_map(|side| {
            (
                prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8),
                prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8),
                0..=8 - side,
                0..=8 - side,
                Just(side),
            )
        })
    }

    proptest! {
        #[test]
        fn composite_is_idempotent_and_crop_returns_paste((r, f, x0, y0, side) in triple()) {
            let real = Tensor::from_vec(vec![1, 2, 8, 8], r).unwrap();
            let fake = Tensor::from_vec(vec![1, 2, 8, 8], f).unwrap();
            let region = [Region::from_box(x0, y0, side)];
            let once = composite(&real, &fake, &region).unwrap();
            let twice = composite(&real, &once.masked_fake, &region).unwrap();
            prop_assert_eq!(&once.masked_fake, &twice.masked_fake);
            prop_assert_eq!(crop(&once.masked_fake, &region).unwrap(), crop(&fake, &region).unwrap());
            // difference from real is supported only inside the box
            for (i, (m, rv)) in once.masked_fake.data().iter().zip(real.data()).enumerate() {
                let (y, x) = ((i % 64) / 8, i % 8);
                if !region[0].contains(x, y) {
                    prop_assert_eq!(m, rv);
                }
            }
        }
    }
}

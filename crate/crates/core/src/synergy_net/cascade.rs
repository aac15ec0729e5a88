use crate::error::{Error, Result};
use crate::nn::{sigmoid, Real};
use crate::volume::{resample_grid, Grid3, Shape3};

use super::SynergyUNet;

/// Anything that turns whole-volume input channels into whole-volume logits.
pub trait LogitPredictor {
    fn input_channels(&self) -> usize;

    fn predict_logits(&self, channels: &[&Grid3<f32>]) -> Result<Grid3<f32>>;
}

/// Two networks: the full-resolution one sees the image plus the upsampled
/// low-resolution probability map.
#[derive(Clone, Debug)]
pub struct CascadeModel<F: Real> {
    pub lowres: SynergyUNet<F>,
    pub fullres: SynergyUNet<F>,
    pub lowres_scale: [usize; 3],
}

impl<F: Real> CascadeModel<F> {
    pub fn new(lowres: SynergyUNet<F>, fullres: SynergyUNet<F>, lowres_scale: [usize; 3]) -> Result<Self> {
        if fullres.config.in_channels != lowres.config.in_channels + 1 {
            return Err(Error::ShapeIncompatible(format!(
                "full-resolution net needs {} input channels, has {}",
                lowres.config.in_channels + 1,
                fullres.config.in_channels
            )));
        }
        if lowres_scale.contains(&0) {
            return Err(Error::InvalidArgument("lowres_scale entries must be positive".into()));
        }
        Ok(CascadeModel {
            lowres,
            fullres,
            lowres_scale,
        })
    }
}

pub fn lowres_shape(shape: Shape3, scale: [usize; 3]) -> Shape3 {
    [0, 1, 2].map(|a| shape[a].div_ceil(scale[a]).max(1))
}

fn resize(g: &Grid3<f32>, shape: Shape3) -> Grid3<f32> {
    if g.shape() == shape {
        g.clone()
    } else {
        resample_grid(g, shape)
    }
}

/// Stage one of the cascade: the low-resolution probability map brought back
/// to the volume's grid.
pub fn cascade_prior(lowres: &dyn LogitPredictor, scale: [usize; 3], volume: &Grid3<f32>) -> Result<Grid3<f32>> {
    if lowres.input_channels() != 1 {
        return Err(Error::ShapeIncompatible(format!(
            "low-resolution net must take 1 channel, takes {}",
            lowres.input_channels()
        )));
    }
    let small = resize(volume, lowres_shape(volume.shape(), scale));
    let prob = lowres.predict_logits(&[&small])?.map(sigmoid);
    Ok(resize(&prob, volume.shape()))
}

/// Full cascade on one volume; returns full-resolution logits.
pub fn forward_cascade(
    lowres: &dyn LogitPredictor,
    fullres: &dyn LogitPredictor,
    scale: [usize; 3],
    volume: &Grid3<f32>,
) -> Result<Grid3<f32>> {
    if fullres.input_channels() != 2 {
        return Err(Error::ShapeIncompatible(format!(
            "full-resolution net must take 2 channels, takes {}",
            fullres.input_channels()
        )));
    }
    let prior = cascade_prior(lowres, scale, volume)?;
    fullres.predict_logits(&[volume, &prior])
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const(f32, usize);

    impl LogitPredictor for Const {
        fn input_channels(&self) -> usize {
            self.1
        }
        fn predict_logits(&self, ch: &[&Grid3<f32>]) -> Result<Grid3<f32>> {
            Ok(Grid3::filled(ch[0].shape(), self.0))
        }
    }

    /// Returns its second channel unchanged.
    struct Echo;

    impl LogitPredictor for Echo {
        fn input_channels(&self) -> usize {
            2
        }
        fn predict_logits(&self, ch: &[&Grid3<f32>]) -> Result<Grid3<f32>> {
            Ok(ch[1].clone())
        }
    }

    /// Records the shape it was called with and echoes the input as logits.
    struct Spy(std::cell::Cell<Shape3>);

    impl LogitPredictor for Spy {
        fn input_channels(&self) -> usize {
            1
        }
        fn predict_logits(&self, ch: &[&Grid3<f32>]) -> Result<Grid3<f32>> {
            self.0.set(ch[0].shape());
            Ok(ch[0].clone())
        }
    }

    #[test]
    fn identity_refinement_returns_prior() {
        let v = Grid3::from_fn([6, 4, 2], |x, y, z| (x + y + z) as f32);
        let out = forward_cascade(&Const(0.0, 1), &Echo, [2, 2, 1], &v).unwrap();
        assert_eq!(out.shape(), [6, 4, 2]);
        assert!(out.as_slice().iter().all(|&p| (p - 0.5).abs() < 1e-7));
    }

    #[test]
    fn unit_scale_passes_volume_through() {
        let v = Grid3::from_fn([4, 4, 2], |x, y, z| x as f32 - y as f32 + z as f32 * 0.5);
        let spy = Spy(std::cell::Cell::new([0; 3]));
        let out = forward_cascade(&spy, &Echo, [1, 1, 1], &v).unwrap();
        assert_eq!(spy.0.get(), [4, 4, 2]);
        let expect = v.map(sigmoid);
        assert_eq!(out, expect);
    }

    #[test]
    fn shapes_trace_through_down_and_up_sampling() {
        assert_eq!(lowres_shape([32, 32, 16], [2, 2, 2]), [16, 16, 8]);
        let v = Grid3::filled([32, 32, 16], 1.0);
        let spy = Spy(std::cell::Cell::new([0; 3]));
        let out = forward_cascade(&spy, &Echo, [2, 2, 2], &v).unwrap();
        assert_eq!(spy.0.get(), [16, 16, 8]);
        assert_eq!(out.shape(), [32, 32, 16]);
    }

    #[test]
    fn rejects_single_channel_refiner() {
        let v = Grid3::filled([4, 4, 4], 0.0);
        assert!(forward_cascade(&Const(0.0, 1), &Const(0.0, 1), [1, 1, 1], &v).is_err());
    }
}

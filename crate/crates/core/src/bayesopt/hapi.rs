use crate::dataset::preprocess;
use crate::error::Result;
use crate::face::{ActuatorVector, FaceImage, FaceSim};
use crate::prefmodel::PreferenceModel;

/// Target-emotion score of the face rendered from `x`. The render is
/// quantized to 8 bits first, matching the stored PNGs the model trains on.
pub fn hapi_value(model: &PreferenceModel, sim: &FaceSim, x: &[f64]) -> Result<f64> {
    let img = sim.render(&ActuatorVector::new(x.to_vec())?)?;
    let captured = FaceImage::from_u8(img.width(), img.height(), &img.to_u8())?;
    model.target_score(&preprocess(&captured)?)
}

/// `v ↦ score(preprocess(render(v)))[target]`. Invalid inputs map to NaN,
/// which [`optimize`](super::optimize) reports as an aborted run.
pub fn hapi_objective<'a>(model: &'a PreferenceModel, sim: &'a FaceSim) -> impl Fn(&[f64]) -> f64 + 'a {
    move |x| hapi_value(model, sim, x).unwrap_or(f64::NAN)
}

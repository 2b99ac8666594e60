//! Synthetic data, losses and metrics for the three demos.
//!
//! Generators are pure functions of `(seed, index)`: sample `i` draws from
//! its own ChaCha stream, so any subset can be regenerated independently.

pub mod cells;
pub mod classify;
pub mod metrics;
pub mod register;
pub mod yolo;

pub use cells::{check_cells_consistency, gen_cells, iou_ellipse, CellClass, CellImage, Ellipse, Iou};
pub use classify::{gen_classification, LabeledImage};
pub use metrics::{
    accuracy, evaluate_classification, evaluate_detection, evaluate_registration, mse_affine, orientation_consistency,
    worst_case_accuracy, ClassifyEval, DetectEval, RegisterEval,
};
pub use register::{gen_registration, registration_consistency, AffineLabel, RegistrationSample};
pub use yolo::{decode_detections, encode_truth, yolo_loss, Detected, YoloConfig, YoloLoss};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::TensorField;
use crate::kernels::ChannelSpec;
use crate::network::FieldStack;
use crate::scalar::{cast_vec, Real};

pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Batch of single-channel scalar images.
pub fn stack_images<T: Real>(images: &[TensorField<f64>]) -> Result<FieldStack<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("no images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data().len());
    for im in images {
        if im.shape() != first.shape() || im.rank() != 0 {
            return Err(Error::Shape("images differ in shape or are not scalar".into()));
        }
        data.extend(cast_vec::<f64, T>(im.data()));
    }
    FieldStack::new(first.shape().clone(), ChannelSpec::scalars(1), images.len(), data)
}

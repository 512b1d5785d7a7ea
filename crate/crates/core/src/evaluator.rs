//! Landmark regression from part centroids, the pointing game, accuracy.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grouping::{argmax_first, AssignmentMap};
use crate::head::attribute_pixels;
use crate::model::Model;
use crate::synthetic::{BBox, Sample};
use crate::tensor::Tensor;

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Assignment-weighted center `(row, col)` of every part channel, in map
/// coordinates. A channel without mass falls back to the map center.
pub fn centroids(map: &AssignmentMap) -> Vec<(f64, f64)> {
    let (h, w) = (map.height(), map.width());
    let q = map.values().data();
    (0..map.parts())
        .map(|k| {
            let ch = &q[k * h * w..(k + 1) * h * w];
            let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
            for (p, &v) in ch.iter().enumerate() {
                m += v;
                r += v * (p / w) as f64;
                c += v * (p % w) as f64;
            }
            if m > 0.0 {
                (r / m, c / m)
            } else {
                ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
            }
        })
        .collect()
}

/// Maps a feature-map coordinate to the image, treating each cell as a
/// `stride × stride` block addressed by its center.
pub fn to_image(point: (f64, f64), stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((point.0 + 0.5) * s - 0.5, (point.1 + 0.5) * s - 0.5)
}

/// Affine map from `2K` centroid coordinates to `2L` landmark coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRegressor {
    /// `2L×2K`, row-major.
    pub weight: Tensor,
    pub offset: Vec<f64>,
}

fn flatten(points: &[(f64, f64)]) -> Vec<f64> {
    points.iter().flat_map(|&(r, c)| [r, c]).collect()
}

/// Least-squares fit, one output coordinate at a time over the samples
/// where that landmark is present. Rank-deficient designs get the
/// minimum-norm solution.
pub fn fit_regressor(centroid_sets: &[Vec<(f64, f64)>], landmark_sets: &[Vec<Option<(f64, f64)>>]) -> Result<LandmarkRegressor> {
    if centroid_sets.len() != landmark_sets.len() || centroid_sets.is_empty() {
        return Err(Error::invalid("need matching, non-empty centroid and landmark sets"));
    }
    let k2 = 2 * centroid_sets[0].len();
    let l = landmark_sets[0].len();
    if centroid_sets.iter().any(|c| 2 * c.len() != k2) || landmark_sets.iter().any(|s| s.len() != l) {
        return Err(Error::invalid("inconsistent part or landmark counts"));
    }
    let inputs: Vec<Vec<f64>> = centroid_sets.iter().map(|c| flatten(c)).collect();
    let mut weight = vec![0.0; 2 * l * k2];
    let mut offset = vec![0.0; 2 * l];
    for lm in 0..l {
        let rows: Vec<usize> = (0..inputs.len()).filter(|&i| landmark_sets[i][lm].is_some()).collect();
        if rows.len() < k2 + 1 {
            return Err(Error::invalid(format!(
                "landmark {lm} has {} samples for {} unknowns",
                rows.len(),
                k2 + 1
            )));
        }
        let a = DMatrix::from_fn(rows.len(), k2 + 1, |r, c| if c < k2 { inputs[rows[r]][c] } else { 1.0 });
        let svd = a.svd(true, true);
        let cutoff = RANK_TOLERANCE * svd.singular_values.max();
        for axis in 0..2 {
            let b = DVector::from_fn(rows.len(), |r, _| {
                let (row, col) = landmark_sets[rows[r]][lm].expect("filtered");
                if axis == 0 { row } else { col }
            });
            let x = svd.solve(&b, cutoff).map_err(|e| Error::NoConvergence(e.to_string()))?;
            let out = 2 * lm + axis;
            weight[out * k2..(out + 1) * k2].copy_from_slice(&x.as_slice()[..k2]);
            offset[out] = x[k2];
        }
    }
    Ok(LandmarkRegressor {
        weight: Tensor::new(&[2 * l, k2], weight)?,
        offset,
    })
}

impl LandmarkRegressor {
    pub fn predict(&self, centroids: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        let x = flatten(centroids);
        let &[out, k2] = self.weight.shape() else { unreachable!("weight is rank 2") };
        if x.len() != k2 {
            return Err(Error::shape("predict", self.weight.shape(), &[x.len()]));
        }
        let w = self.weight.data();
        let v: Vec<f64> = (0..out)
            .map(|o| self.offset[o] + (0..k2).map(|i| w[o * k2 + i] * x[i]).sum::<f64>())
            .collect();
        Ok(v.chunks(2).map(|p| (p[0], p[1])).collect())
    }
}

/// Mean over samples and present landmarks of `‖pred − gt‖ / normalizer`.
pub fn landmark_error(
    regressor: &LandmarkRegressor,
    centroid_sets: &[Vec<(f64, f64)>],
    landmark_sets: &[Vec<Option<(f64, f64)>>],
    normalizers: &[f64],
) -> Result<f64> {
    if centroid_sets.len() != landmark_sets.len() || centroid_sets.len() != normalizers.len() {
        return Err(Error::invalid("landmark_error inputs differ in length"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for ((c, gt), &norm) in centroid_sets.iter().zip(landmark_sets).zip(normalizers) {
        if !(norm > 0.0) {
            return Err(Error::invalid(format!("normalizer {norm} must be positive")));
        }
        for (p, g) in regressor.predict(c)?.iter().zip(gt) {
            if let Some(g) = g {
                total += (p.0 - g.0).hypot(p.1 - g.1) / norm;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("no present landmarks to score"));
    }
    Ok(total / count as f64)
}

/// Image position of the first maximum after nearest-neighbour upsampling
/// by `stride`: the top-left pixel of the first peak cell.
pub fn attribution_peak(map: &Tensor, stride: usize) -> (usize, usize) {
    let w = map.shape()[1];
    let at = argmax_first(map.data());
    ((at / w) * stride, (at % w) * stride)
}

/// Fraction of samples whose attribution peak falls outside the bbox.
pub fn pointing_game(attribution_maps: &[Tensor], bboxes: &[BBox], stride: usize) -> Result<f64> {
    if attribution_maps.len() != bboxes.len() || bboxes.is_empty() {
        return Err(Error::invalid("need one bbox per attribution map"));
    }
    let misses = attribution_maps
        .iter()
        .zip(bboxes)
        .filter(|(m, b)| {
            let (r, c) = attribution_peak(m, stride);
            !b.contains(r as f64, c as f64)
        })
        .count();
    Ok(misses as f64 / bboxes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub landmark_error: f64,
    pub pointing_error: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "accuracy,landmark_error,pointing_error";

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "accuracy={}", self.accuracy).unwrap();
        writeln!(s, "landmark_error={}", self.landmark_error).unwrap();
        writeln!(s, "pointing_error={}", self.pointing_error).unwrap();
        s
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.accuracy, self.landmark_error, self.pointing_error)
    }
}

/// Image-space centroids of every sample's assignment map.
pub fn image_centroids(maps: &[AssignmentMap], stride: usize) -> Vec<Vec<(f64, f64)>> {
    maps.iter()
        .map(|m| centroids(m).into_iter().map(|p| to_image(p, stride)).collect())
        .collect()
}

/// Fits the landmark regressor on `fit` and scores everything on `test`.
pub fn evaluate(model: &mut Model, fit: &[Sample], test: &[Sample], batch: usize) -> Result<EvalReport> {
    let stride = model.stride();
    let run = |model: &mut Model, data: &[Sample]| {
        let images: Vec<&Tensor> = data.iter().map(|s| &s.image).collect();
        model.infer(&images, batch)
    };
    let fit_out = run(model, fit)?;
    let test_out = run(model, test)?;

    let fit_maps: Vec<AssignmentMap> = fit_out.iter().map(|o| o.assignment.clone()).collect();
    let test_maps: Vec<AssignmentMap> = test_out.iter().map(|o| o.assignment.clone()).collect();
    let fit_landmarks: Vec<_> = fit.iter().map(|s| s.landmarks.clone()).collect();
    let test_landmarks: Vec<_> = test.iter().map(|s| s.landmarks.clone()).collect();
    let regressor = fit_regressor(&image_centroids(&fit_maps, stride), &fit_landmarks)?;
    let normalizers: Vec<f64> = test.iter().map(|s| s.bbox.diagonal()).collect();
    let landmark_error = landmark_error(&regressor, &image_centroids(&test_maps, stride), &test_landmarks, &normalizers)?;

    let correct = test_out
        .iter()
        .zip(test)
        .filter(|(o, s)| argmax_first(&o.probabilities) == s.label)
        .count();
    let attributions = test_out
        .iter()
        .map(|o| attribute_pixels(&o.assignment, &o.attention[0]).map(|a| a.0))
        .collect::<Result<Vec<_>>>()?;
    let bboxes: Vec<BBox> = test.iter().map(|s| s.bbox).collect();
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        landmark_error,
        pointing_error: pointing_game(&attributions, &bboxes, stride)?,
    })
}

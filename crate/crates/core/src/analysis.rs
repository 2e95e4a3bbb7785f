//! Recording a stage's activations and projecting them onto principal
//! components, one trajectory per video.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{write_tensor_file, Model};
use crate::tensor::Tensor;
use crate::training::center_crop;

/// Activations of one stage over the `T + d` steps of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub sample_id: String,
    pub labels: Vec<usize>,
    /// `rows[t]` is the flattened activation at step `t`.
    pub rows: Vec<Vec<f64>>,
}

pub fn record_activations(
    model: &Model,
    dataset: &Dataset,
    stage: usize,
    delay: usize,
    margin: usize,
) -> Result<Vec<ActivationMatrix>> {
    if model.recorded_width(stage).is_none() {
        return Err(Error::config(format!(
            "unknown stage {stage}: the model has stages 0..={}",
            model.spec().stages.len()
        )));
    }
    dataset
        .samples
        .iter()
        .map(|s| {
            let frames = center_crop(&s.frames, margin)?;
            let trace = model.forward_sequence(&frames, delay, Some(stage))?;
            let rows = trace.recorded.expect("recording requested");
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("activations of {} at stage {stage}", s.id)));
            }
            Ok(ActivationMatrix {
                sample_id: s.id.clone(),
                labels: s.labels.clone(),
                rows,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Unit-length principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Sample variances along each component (denominator `n − 1`).
    pub eigenvalues: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors (as rows), unsorted.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let total: f64 = a.iter().flatten().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

/// PCA of the rows of `data` via the covariance matrix. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_fit(data: &[Vec<f64>]) -> Result<PcaBasis> {
    if data.len() < 2 {
        return Err(Error::shape("PCA needs at least two rows"));
    }
    let dim = data[0].len();
    if dim == 0 || data.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("PCA rows must share a nonzero width"));
    }
    let n = data.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in data {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; dim]; dim];
    let mut centered = vec![0.0; dim];
    for r in data {
        for (c, (x, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[i][j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let components = order
        .iter()
        .map(|&i| {
            let mut v = vectors[i].clone();
            let lead = (0..dim).fold(0, |best, k| if v[k].abs() > v[best].abs() { k } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let eigenvalues = order.iter().map(|&i| values[i].max(0.0)).collect();
    Ok(PcaBasis {
        mean,
        components,
        eigenvalues,
    })
}

/// Coordinates of each row on the first `k` components.
pub fn pca_project(data: &[Vec<f64>], basis: &PcaBasis, k: usize) -> Result<Vec<Vec<f64>>> {
    if k > basis.components.len() {
        return Err(Error::shape(format!(
            "{k} components requested, the basis has {}",
            basis.components.len()
        )));
    }
    data.iter()
        .map(|r| {
            if r.len() != basis.mean.len() {
                return Err(Error::shape(format!(
                    "row has {} columns, the basis expects {}",
                    r.len(),
                    basis.mean.len()
                )));
            }
            Ok(basis.components[..k]
                .iter()
                .map(|c| c.iter().zip(r.iter().zip(&basis.mean)).map(|(w, (x, m))| w * (x - m)).sum())
                .collect())
        })
        .collect()
}

/// Mean distance between points of different groups divided by the mean
/// distance between points of the same group.
pub fn separation_statistic(points: &[(usize, Vec<f64>)]) -> Result<f64> {
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for (i, (gi, pi)) in points.iter().enumerate() {
        for (gj, pj) in &points[i + 1..] {
            let d = pi.iter().zip(pj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if gi == gj {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_inter == 0 || n_intra == 0 {
        return Err(Error::shape("separation needs two groups and a group with two points"));
    }
    Ok((inter / n_inter as f64) / (intra / n_intra as f64).max(f64::MIN_POSITIVE))
}

/// [`separation_statistic`] of the last trajectory points, grouped by
/// `group(labels)`.
pub fn final_step_separation(export: &TrajectoryExport, group: impl Fn(&[usize]) -> usize) -> Result<f64> {
    let points: Vec<(usize, Vec<f64>)> = export
        .trajectories
        .iter()
        .map(|(_, labels, coords)| (group(labels), coords.last().cloned().unwrap_or_default()))
        .collect();
    separation_statistic(&points)
}

/// Metadata written next to exported trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub model: String,
    pub stage: usize,
    pub stage_label: String,
    pub units: usize,
    pub steps: Vec<usize>,
    pub delay: usize,
    /// The basis is fitted once on the pooled rows of every exported video.
    pub fit: String,
    pub explained_variance: [f64; 2],
    pub samples: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryExport {
    pub basis: PcaBasis,
    pub meta: TrajectoryMeta,
    /// `(sample id, labels, [pc1, pc2] per step)`.
    pub trajectories: Vec<(String, Vec<usize>, Vec<Vec<f64>>)>,
}

pub const TRAJECTORY_HEADER: &str = "sample_id,t,pc1,pc2";

/// Records `stage` for every sample, fits PCA on all rows together and
/// writes `<sample_id>.csv`, `basis.bin` (mean, components, eigenvalues)
/// and `trajectories.json` under `out_dir`.
pub fn export_trajectories(
    model: &Model,
    dataset: &Dataset,
    stage: usize,
    delay: usize,
    margin: usize,
    out_dir: &Path,
) -> Result<TrajectoryExport> {
    let mats = record_activations(model, dataset, stage, delay, margin)?;
    let pooled: Vec<Vec<f64>> = mats.iter().flat_map(|m| m.rows.iter().cloned()).collect();
    let basis = pca_fit(&pooled)?;
    let k = basis.components.len().min(2);
    if k < 2 {
        return Err(Error::shape(format!("stage {stage} has a single unit, nothing to project")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trajectories = Vec::with_capacity(mats.len());
    for m in &mats {
        let coords = pca_project(&m.rows, &basis, 2)?;
        let mut csv = String::from(TRAJECTORY_HEADER);
        csv.push('\n');
        for (t, c) in coords.iter().enumerate() {
            writeln!(csv, "{},{t},{},{}", m.sample_id, c[0], c[1]).unwrap();
        }
        let p = out_dir.join(format!("{}.csv", m.sample_id));
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        trajectories.push((m.sample_id.clone(), m.labels.clone(), coords));
    }
    let dim = basis.mean.len();
    let comps: Vec<f64> = basis.components.iter().flatten().copied().collect();
    let tensors = [
        Tensor::vector(basis.mean.clone()),
        Tensor::from_vec(&[basis.components.len(), dim], comps)?,
        Tensor::vector(basis.eigenvalues.clone()),
    ];
    write_tensor_file(&out_dir.join("basis.bin"), &model.spec().digest(), &tensors)?;
    let total: f64 = basis.eigenvalues.iter().sum();
    let frac = |i: usize| if total > 0.0 { basis.eigenvalues[i] / total } else { 0.0 };
    let meta = TrajectoryMeta {
        model: model.spec().kind.to_string(),
        stage,
        stage_label: model
            .spec()
            .stages
            .get(stage)
            .map_or("heads", |s| s.label())
            .to_string(),
        units: dim,
        steps: mats.iter().map(|m| m.rows.len()).collect(),
        delay,
        fit: "pooled over all exported videos".into(),
        explained_variance: [frac(0), frac(1)],
        samples: mats.iter().map(|m| m.sample_id.clone()).collect(),
    };
    let p = out_dir.join("trajectories.json");
    let mut text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    text.push('\n');
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(TrajectoryExport {
        basis,
        meta,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes_small_matrix() {
        let (vals, vecs) = jacobi_eigen(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut v = vals.clone();
        v.sort_by(f64::total_cmp);
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 3.0).abs() < 1e-14);
        for (val, vec) in vals.iter().zip(&vecs) {
            let av = [2.0 * vec[0] + vec[1], vec[0] + 2.0 * vec[1]];
            assert!((av[0] - val * vec[0]).abs() < 1e-14);
            assert!((av[1] - val * vec[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn line_through_origin_has_one_component() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let b = pca_fit(&data).unwrap();
        let total: f64 = b.eigenvalues.iter().sum();
        assert!((b.eigenvalues[0] / total - 1.0).abs() < 1e-12);
        assert!(b.components[0][1] > 0.0);
    }

    #[test]
    fn projection_basics() {
        let data = vec![vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -0.5], vec![2.0, 1.0]];
        let b = pca_fit(&data).unwrap();
        let origin = pca_project(std::slice::from_ref(&b.mean), &b, 2).unwrap();
        assert!(origin[0].iter().all(|v| v.abs() < 1e-15));
        let shifted: Vec<f64> = b.mean.iter().zip(&b.components[1]).map(|(m, c)| m + c).collect();
        let unit = pca_project(&[shifted], &b, 2).unwrap();
        assert!(unit[0][0].abs() < 1e-12 && (unit[0][1] - 1.0).abs() < 1e-12);
        assert!(pca_project(&data, &b, 3).is_err());
        assert!(pca_project(&[vec![1.0]], &b, 1).is_err());
    }

    #[test]
    fn separation_of_clusters() {
        let pts = vec![
            (0, vec![0.0, 0.0]),
            (0, vec![0.1, 0.0]),
            (1, vec![5.0, 0.0]),
            (1, vec![5.1, 0.0]),
        ];
        assert!(separation_statistic(&pts).unwrap() > 10.0);
        assert!(separation_statistic(&pts[..2]).is_err());
    }
}

//! Reconstruction targets and their losses.

use log::{debug, warn};

use super::model::encode_points;
use crate::config::{MspConfig, Target};
use crate::error::{MspError, Result};
use crate::neural::ParamStore;
use crate::scene::{Point, PointCloud};
use crate::shape_context::compute_multiscale_sc;
use crate::spatial::RadiusIndex;
use crate::tensor::{Tape, Tensor, Var};

/// Targets for the supervised points, rows in the order they were requested.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetBundle {
    pub sc: Option<Tensor>,
    pub dsf: Option<Tensor>,
    pub color: Option<Tensor>,
    pub pointset: Option<Vec<Vec<[f64; 3]>>>,
}

/// Up to `k` neighbors of each center within the open ball of `radius`
/// (center excluded), nearest first with index tie-break, as offsets.
pub fn pointset_targets(positions: &[Point], centers: &[usize], radius: f64, k: usize) -> Vec<Vec<[f64; 3]>> {
    let index = RadiusIndex::new(positions, radius);
    centers
        .iter()
        .map(|&c| {
            let p = positions[c];
            let mut near: Vec<(f64, usize)> = index
                .within(&p, radius)
                .into_iter()
                .filter(|&j| j != c)
                .map(|j| ((positions[j] - p).norm_squared(), j))
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(k);
            near.into_iter()
                .map(|(_, j)| {
                    let d = positions[j] - p;
                    [d.x, d.y, d.z]
                })
                .collect()
        })
        .collect()
}

/// EMA-branch encoder features of the whole cloud, no gradient.
pub fn dsf_features(cfg: &MspConfig, shadow: &ParamStore, cloud: &PointCloud) -> Result<Tensor> {
    let mut tape = Tape::with_precision(cfg.precision);
    let bound = shadow.bind(&mut tape, false);
    let all: Vec<usize> = (0..cloud.len()).collect();
    let f = encode_points(cfg, &mut tape, &bound, cloud, &all)?;
    Ok(tape.value(f).clone())
}

/// Build every enabled target for the cloud points `points`. `cloud` is the
/// full augmented cloud; `shadow` holds the EMA encoder weights.
pub fn compute_targets(
    cfg: &MspConfig,
    cloud: &PointCloud,
    points: &[usize],
    shadow: &ParamStore,
) -> Result<TargetBundle> {
    if cfg.targets.is_empty() {
        return Err(MspError::Config("no targets enabled".into()));
    }
    let mut out = TargetBundle::default();
    if cfg.targets.has(Target::Sc) {
        let centers: Vec<Point> = points.iter().map(|&i| cloud.positions()[i]).collect();
        let m = compute_multiscale_sc(&centers, cloud.positions(), &cfg.sc_partitions)?;
        out.sc = Some(Tensor::matrix(m.rows, m.width, m.to_f64())?);
    }
    if cfg.targets.has(Target::Dsf) {
        let all = dsf_features(cfg, shadow, cloud)?;
        out.dsf = Some(all.gather_rows(points));
    }
    if cfg.targets.has(Target::Color) {
        let rgb = cloud
            .colors()
            .ok_or_else(|| MspError::Config("color target requested on a cloud without colors".into()))?;
        let data = points.iter().flat_map(|&i| rgb[i]).collect();
        out.color = Some(Tensor::matrix(points.len(), 3, data)?);
    }
    if cfg.targets.has(Target::PointSet) {
        out.pointset = Some(pointset_targets(cloud.positions(), points, cfg.pointset_radius, cfg.pointset_k));
    }
    Ok(out)
}

/// Mean binary cross-entropy over points and bins.
pub fn loss_sc(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, targets)
}

/// Mean `1 - cos` over rows; zero rows are excluded with a warning.
pub fn loss_dsf(tape: &mut Tape, pred: Var, targets: &Tensor) -> Result<Var> {
    let (loss, skipped) = tape.cosine_loss(pred, targets)?;
    if skipped > 0 {
        warn!("DSF loss: {skipped} zero-norm rows excluded");
    }
    Ok(loss)
}

/// Mean squared error over points and channels.
pub fn loss_color(tape: &mut Tape, pred: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(pred) != targets.shape() {
        return Err(MspError::shape("loss_color", tape.shape(pred), targets.shape()));
    }
    let t = tape.constant(targets.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Symmetric Chamfer loss; points with empty target sets are skipped.
pub fn loss_chamfer(tape: &mut Tape, pred: Var, targets: &[Vec<[f64; 3]>]) -> Result<Var> {
    let (loss, skipped) = tape.chamfer(pred, targets)?;
    if skipped > 0 {
        debug!("point-set loss: {skipped} points without neighbors skipped");
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_loss_values() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2, 3]));
        let l = loss_color(&mut tape, p, &Tensor::full(&[2, 3], 1.0)).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let q = tape.param(Tensor::full(&[2, 3], 0.4));
        let l = loss_color(&mut tape, q, &Tensor::full(&[2, 3], 0.4)).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert!(loss_color(&mut tape, q, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn sc_loss_symmetry_point() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[1, 2]));
        let a = loss_sc(&mut tape, z, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!((tape.scalar(a) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pointset_excludes_center_and_caps() {
        let pts: Vec<Point> = (0..6).map(|i| Point::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let t = pointset_targets(&pts, &[0], 0.15, 3);
        assert_eq!(t[0].len(), 3);
        assert!((t[0][0][0] - 0.01).abs() < 1e-15);
        assert!((t[0][2][0] - 0.03).abs() < 1e-15);
        let far = vec![Point::origin(), Point::new(1.0, 0.0, 0.0)];
        assert!(pointset_targets(&far, &[0], 0.15, 200)[0].is_empty());
    }
}

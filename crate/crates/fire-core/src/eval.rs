//! Registration quality metrics and reports: Dice overlap before/after
//! affine-only and full registration, inverse-consistency residuals,
//! Jacobian positivity, and a timing harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    apply_ground_truth_warp, is_binary, pair_seed, random_perturbation_rng, PerturbationSpec,
    Volume,
};
use crate::error::{FireError, Result};
use crate::model::{Direction, FireModel, RegisterMode};
use crate::tensor::Tensor;
use crate::warp::{
    affine_grid, compose, jacobian_det_map, sample, sample_nearest, AffineMatrix, Border,
    DisplacementField, SampleGrid,
};

/// Dice overlap `2|A n B| / (|A| + |B|)` of two strictly binary masks;
/// defined as 1 when both masks are empty.
pub fn dice(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FireError::ShapeMismatch {
            op: "dice",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if !is_binary(a) || !is_binary(b) {
        return Err(FireError::InvalidArgument(
            "dice requires strictly binary masks".into(),
        ));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x == 1.0, *y == 1.0);
        inter += (x && y) as u64;
        total += x as u64 + y as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// RMS residual of the round trip `x -> x o fwd o bwd` against `x`,
/// evaluated on an interior crop (fractional `margin` per border) so
/// border-policy artifacts do not dominate. Not differentiable.
pub fn inverse_consistency_residual(
    x: &Tensor<f32>,
    fwd: &SampleGrid<f32>,
    bwd: &SampleGrid<f32>,
    margin: f64,
) -> Result<f64> {
    let once = sample(x, fwd, Border::Clamp)?;
    let round = sample(&once, bwd, Border::Clamp)?;
    let sp = &x.shape()[1..];
    let channels = x.shape()[0];
    let nsp: usize = sp.iter().product();
    let strides = crate::tensor::strides_of(sp);
    let lo: Vec<usize> = sp.iter().map(|e| (*e as f64 * margin).ceil() as usize).collect();
    let hi: Vec<usize> = sp
        .iter()
        .zip(&lo)
        .map(|(e, l)| e.saturating_sub(*l))
        .collect();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    let mut idx: Vec<usize> = lo.clone();
    if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
        return Err(FireError::InvalidArgument(
            "interior crop is empty at this margin".into(),
        ));
    }
    'outer: loop {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for c in 0..channels {
            let d = (x.data()[c * nsp + off] - round.data()[c * nsp + off]) as f64;
            acc += d * d;
            count += 1;
        }
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < hi[a] {
                continue 'outer;
            }
            idx[a] = lo[a];
            if a == 0 {
                break 'outer;
            }
        }
    }
    Ok((acc / count as f64).sqrt())
}

/// Fraction of interior points whose Jacobian determinant is positive.
pub fn jacobian_positive_fraction(grid: &SampleGrid<f32>) -> Result<f64> {
    let map = jacobian_det_map(grid)?;
    if map.values.is_empty() {
        return Err(FireError::InvalidArgument(
            "grid has no interior points".into(),
        ));
    }
    let pos = map.values.iter().filter(|v| **v > 0.0).count();
    Ok(pos as f64 / map.values.len() as f64)
}

/// Register a moving volume onto a fixed one: warps the image linearly and
/// every mask nearest-neighbor; the result carries the fixed volume's
/// spacing.
pub fn register_volume(
    model: &FireModel<f32>,
    moving: &Volume,
    fixed: &Volume,
    direction: Direction,
    mode: RegisterMode,
) -> Result<(AffineMatrix<f32>, DisplacementField<f32>, Volume)> {
    let (aff, u, warped_img) = model.register(&moving.image, &fixed.image, direction, mode)?;
    let sp = moving.spatial_shape().to_vec();
    let grid = compose(&aff, &u, &sp)?;
    let labels = moving
        .labels
        .iter()
        .map(|(name, mask)| {
            let mut msh = vec![1usize];
            msh.extend(&sp);
            let warped = sample_nearest(&mask.reshape(&msh)?, &grid)?;
            Ok((name.clone(), warped.reshape(&sp)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let vol = Volume::new(warped_img, fixed.spacing_mm.clone(), labels)?;
    Ok((aff, u, vol))
}

/// One (case, repeat, structure) measurement.
#[derive(Debug, Clone)]
pub struct CaseRow {
    pub case: usize,
    pub repeat: usize,
    pub structure: String,
    pub dice_unaligned: f64,
    pub dice_affine_only: f64,
    pub dice_full: f64,
    pub ic_residual: f64,
    pub jacobian_positive_fraction: f64,
    pub mean_abs_displacement: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Aggregate { n, mean, std }
}

/// Full evaluation report: per-(case x repeat x structure) rows plus
/// aggregates. Standard deviations are sample deviations taken across all
/// case x repeat rows.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<CaseRow>,
    pub per_structure: BTreeMap<String, [Aggregate; 3]>,
    pub overall: [Aggregate; 3],
    pub ic_residual: Aggregate,
    pub jacobian_positive_fraction: Aggregate,
    pub mean_abs_displacement: Aggregate,
    pub wall_clock_register_s: Aggregate,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "case,repeat,structure,dice_unaligned,dice_affine_only,dice_full,ic_residual,jacobian_positive_fraction,mean_abs_displacement\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.case,
                r.repeat,
                r.structure,
                r.dice_unaligned,
                r.dice_affine_only,
                r.dice_full,
                r.ic_residual,
                r.jacobian_positive_fraction,
                r.mean_abs_displacement
            ));
        }
        out
    }

    pub fn text_summary(&self) -> String {
        let mut out = String::new();
        out.push_str("# Dice by structure; mean (std) across all case x repeat rows\n");
        out.push_str(&format!(
            "{:<10} {:>6} {:>18} {:>18} {:>18}\n",
            "structure", "n", "unaligned", "affine-only", "full"
        ));
        let fmt = |a: &Aggregate| format!("{:.4} ({:.4})", a.mean, a.std);
        for (name, aggs) in &self.per_structure {
            out.push_str(&format!(
                "{:<10} {:>6} {:>18} {:>18} {:>18}\n",
                name,
                aggs[0].n,
                fmt(&aggs[0]),
                fmt(&aggs[1]),
                fmt(&aggs[2])
            ));
        }
        out.push_str(&format!(
            "{:<10} {:>6} {:>18} {:>18} {:>18}\n",
            "overall",
            self.overall[0].n,
            fmt(&self.overall[0]),
            fmt(&self.overall[1]),
            fmt(&self.overall[2])
        ));
        out.push_str(&format!(
            "inverse-consistency residual: {:.6} ({:.6})\n",
            self.ic_residual.mean, self.ic_residual.std
        ));
        out.push_str(&format!(
            "jacobian-positive fraction:   {:.6} ({:.6})\n",
            self.jacobian_positive_fraction.mean, self.jacobian_positive_fraction.std
        ));
        out.push_str(&format!(
            "mean |displacement|:          {:.6} ({:.6})\n",
            self.mean_abs_displacement.mean, self.mean_abs_displacement.std
        ));
        out.push_str(&format!(
            "register wall clock [s]:      {:.4} ({:.4})\n",
            self.wall_clock_register_s.mean, self.wall_clock_register_s.std
        ));
        out
    }
}

struct RepeatOutcome {
    rows: Vec<CaseRow>,
    register_s: f64,
}

/// Evaluate one case at one repeat:
/// perturb the moving side with a fresh seeded ground-truth transform,
/// register, and measure. The `ic_residual` composes the ground-truth
/// perturbation with the model's estimated map, so an untrained (identity)
/// model scores the full unaligned mismatch.
fn eval_one(
    model: &FireModel<f32>,
    a: &Volume,
    b: &Volume,
    spec: &PerturbationSpec,
    case: usize,
    repeat: usize,
    seed: u64,
) -> Result<RepeatOutcome> {
    let sp = a.spatial_shape().to_vec();
    let dim = sp.len();
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, case * 10_007 + repeat));
    let warp = random_perturbation_rng(spec, dim, &sp, &mut rng)?;
    let moving = apply_ground_truth_warp(a, &warp)?;

    let t0 = Instant::now();
    let (aff, u, registered) = register_volume(model, &moving, b, Direction::AB, RegisterMode::Full)?;
    let register_s = t0.elapsed().as_secs_f64();

    let grid_full = compose(&aff, &u, &sp)?;
    let grid_affine = affine_grid(&aff, &sp)?;
    let ic = inverse_consistency_residual(&a.image, &warp.grid(&sp)?, &grid_full, 0.1)?;
    let jac = jacobian_positive_fraction(&grid_full)?;
    let mean_u = u.mean_abs();

    let mut rows = Vec::new();
    for (name, fixed_mask) in &b.labels {
        let moving_mask = moving.labels.get(name).ok_or_else(|| {
            FireError::InvalidArgument(format!("case {case} is missing mask `{name}`"))
        })?;
        let mut msh = vec![1usize];
        msh.extend(&sp);
        let affine_warped = sample_nearest(&moving_mask.reshape(&msh)?, &grid_affine)?
            .reshape(&sp)?;
        rows.push(CaseRow {
            case,
            repeat,
            structure: name.clone(),
            dice_unaligned: dice(moving_mask, fixed_mask)?,
            dice_affine_only: dice(&affine_warped, fixed_mask)?,
            dice_full: dice(&registered.labels[name], fixed_mask)?,
            ic_residual: ic,
            jacobian_positive_fraction: jac,
            mean_abs_displacement: mean_u,
        });
    }
    Ok(RepeatOutcome { rows, register_s })
}

/// Evaluate a trained model over test cases: each case is perturbed
/// `repeat` times and registered back. Deterministic given (model, cases,
/// seed). `workers > 1` spreads cases over threads.
pub fn evaluate(
    model: &FireModel<f32>,
    cases: &[(Volume, Volume)],
    spec: &PerturbationSpec,
    repeat: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(FireError::InvalidArgument("no evaluation cases".into()));
    }
    for (i, (a, b)) in cases.iter().enumerate() {
        if a.labels.is_empty() || b.labels.is_empty() {
            return Err(FireError::InvalidArgument(format!(
                "case {i} has no label masks"
            )));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..repeat).map(move |r| (c, r)))
        .collect();

    let run = |&(c, r): &(usize, usize)| -> Result<RepeatOutcome> {
        eval_one(model, &cases[c].0, &cases[c].1, spec, c, r, seed)
    };

    let outcomes: Vec<RepeatOutcome> = if workers <= 1 {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunks: Vec<&[(usize, usize)]> = jobs.chunks(jobs.len().div_ceil(workers)).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| scope.spawn(move || chunk.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("eval worker panicked")?);
            }
            Ok::<_, FireError>(all)
        })?
    };

    let mut rows = Vec::new();
    let mut times = Vec::new();
    for o in outcomes {
        rows.extend(o.rows);
        times.push(o.register_s);
    }
    rows.sort_by(|a, b| {
        (a.case, a.repeat, &a.structure).cmp(&(b.case, b.repeat, &b.structure))
    });

    let mut per_structure = BTreeMap::new();
    let structures: Vec<String> = cases[0].1.labels.keys().cloned().collect();
    for name in &structures {
        let sel: Vec<&CaseRow> = rows.iter().filter(|r| &r.structure == name).collect();
        let unal: Vec<f64> = sel.iter().map(|r| r.dice_unaligned).collect();
        let aff: Vec<f64> = sel.iter().map(|r| r.dice_affine_only).collect();
        let full: Vec<f64> = sel.iter().map(|r| r.dice_full).collect();
        per_structure.insert(
            name.clone(),
            [aggregate(&unal), aggregate(&aff), aggregate(&full)],
        );
    }
    let overall = [
        aggregate(&rows.iter().map(|r| r.dice_unaligned).collect::<Vec<_>>()),
        aggregate(&rows.iter().map(|r| r.dice_affine_only).collect::<Vec<_>>()),
        aggregate(&rows.iter().map(|r| r.dice_full).collect::<Vec<_>>()),
    ];
    // per (case x repeat), not per structure row
    let dedup = |f: fn(&CaseRow) -> f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.structure == structures[0])
            .map(f)
            .collect()
    };
    Ok(EvalReport {
        per_structure,
        overall,
        ic_residual: aggregate(&dedup(|r| r.ic_residual)),
        jacobian_positive_fraction: aggregate(&dedup(|r| r.jacobian_positive_fraction)),
        mean_abs_displacement: aggregate(&dedup(|r| r.mean_abs_displacement)),
        wall_clock_register_s: aggregate(&times),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Timing harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub dataset: String,
    pub mode: &'static str,
    pub n: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("dataset,mode,n,mean_s,std_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.dataset, r.mode, r.n, r.mean_s, r.std_s
            ));
        }
        out
    }

    pub fn text_summary(&self) -> String {
        let mut out = String::from("# mean (std) registration wall clock, seconds\n");
        out.push_str(&format!(
            "{:<16} {:<10} {:>6} {:>12} {:>12}\n",
            "dataset", "mode", "n", "mean_s", "std_s"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<10} {:>6} {:>12.4} {:>12.4}\n",
                r.dataset, r.mode, r.n, r.mean_s, r.std_s
            ));
        }
        out
    }
}

/// Time `register` over the cases, once per (case, repeat), for both the
/// affine-only and full modes. No numeric targets: wall clock is hardware
/// dependent.
pub fn bench(
    model: &FireModel<f32>,
    cases: &[(Volume, Volume)],
    dataset_name: &str,
    repeat: usize,
) -> Result<BenchReport> {
    if cases.is_empty() {
        return Err(FireError::InvalidArgument("no bench cases".into()));
    }
    let mut rows = Vec::new();
    for (mode, label) in [(RegisterMode::AffineOnly, "affine"), (RegisterMode::Full, "nonrigid")] {
        let mut times = Vec::new();
        for _ in 0..repeat {
            for (a, b) in cases {
                let t0 = Instant::now();
                let _ = model.register(&a.image, &b.image, Direction::AB, mode)?;
                times.push(t0.elapsed().as_secs_f64());
            }
        }
        let agg = aggregate(&times);
        rows.push(BenchRow {
            dataset: dataset_name.to_string(),
            mode: label,
            n: agg.n,
            mean_s: agg.mean,
            std_s: agg.std,
        });
    }
    Ok(BenchReport { rows })
}

/// Convenience: write both report files.
pub fn write_report(report: &EvalReport, csv_path: &Path, txt_path: &Path) -> Result<()> {
    std::fs::write(csv_path, report.csv())
        .map_err(|e| FireError::io(csv_path.display().to_string(), e))?;
    std::fs::write(txt_path, report.text_summary())
        .map_err(|e| FireError::io(txt_path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_pair, GroundTruthWarp, ModalityStyle};
    use crate::model::ModelConfig;
    use crate::warp::{displacement_grid, identity_grid};

    fn mask(shape: &[usize], pred: impl Fn(usize) -> bool) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|i| if pred(i) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[4, 4], |i| i < 8);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);

        let b = mask(&[4, 4], |i| i >= 8);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);

        // two 16-pixel squares overlapping in 8 pixels
        let p = mask(&[8, 8], |i| (i / 8) < 4 && (i % 8) < 4);
        let q = mask(&[8, 8], |i| (i / 8) < 4 && (2..6).contains(&(i % 8)));
        assert_eq!(dice(&p, &q).unwrap(), 0.5);

        // both empty -> vacuous match
        let e = mask(&[4, 4], |_| false);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_symmetric_and_rejects_non_binary() {
        let a = mask(&[5, 5], |i| i % 3 == 0);
        let b = mask(&[5, 5], |i| i % 2 == 0);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());

        let bad = Tensor::new(&[2], vec![0.5, 1.0]).unwrap();
        let ok = mask(&[2], |_| true);
        assert!(dice(&bad, &ok).is_err());
    }

    #[test]
    fn ic_residual_identity_is_zero() {
        let x = Tensor::full(&[1, 20, 20], 0.3);
        let id = identity_grid::<f32>(&[20, 20]).unwrap();
        assert_eq!(inverse_consistency_residual(&x, &id, &id, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn ic_residual_mutually_inverse_translations_vanish_inside() {
        let n = 32;
        let (a, _) =
            generate_phantom_pair(3, 2, n, ModalityStyle::Plain, ModalityStyle::Plain).unwrap();
        let t = 4.0 / (n as f64 - 1.0) * 2.0; // 4 cells, in normalized units
        let shift = |v: f64| {
            let mut e = AffineMatrix::<f32>::identity(2).entries().data().to_vec();
            e[2] = v as f32;
            AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap()
        };
        let fwd = affine_grid(&shift(t), &[n, n]).unwrap();
        let bwd = affine_grid(&shift(-t), &[n, n]).unwrap();
        let r = inverse_consistency_residual(&a.image, &fwd, &bwd, 0.25).unwrap();
        assert!(r <= 1e-6, "residual {r}");
    }

    #[test]
    fn ic_residual_with_identity_backward_is_plain_mismatch() {
        let n = 24;
        let (a, _) =
            generate_phantom_pair(5, 2, n, ModalityStyle::Plain, ModalityStyle::Plain).unwrap();
        let mut e = AffineMatrix::<f32>::identity(2).entries().data().to_vec();
        e[5] = 0.2;
        let fwd = affine_grid(
            &AffineMatrix::from_tensor(Tensor::new(&[2, 3], e).unwrap()).unwrap(),
            &[n, n],
        )
        .unwrap();
        let id = identity_grid::<f32>(&[n, n]).unwrap();
        let r = inverse_consistency_residual(&a.image, &fwd, &id, 0.1).unwrap();
        // equals the direct RMS between x and its shifted version (interior)
        let shifted = sample(&a.image, &fwd, Border::Clamp).unwrap();
        let direct = inverse_consistency_residual(&shifted, &id, &id, 0.1).unwrap();
        assert_eq!(direct, 0.0);
        assert!(r > 0.01, "shift must cost something, got {r}");
    }

    #[test]
    fn jacobian_fraction_examples() {
        let id = identity_grid::<f32>(&[10, 10]).unwrap();
        assert_eq!(jacobian_positive_fraction(&id).unwrap(), 1.0);

        // constructed 1-D fold
        let idg = identity_grid::<f32>(&[15]).unwrap();
        let u = DisplacementField::from_tensor(idg.tensor().scale(-2.0)).unwrap();
        let folded = displacement_grid(&u, &[15]).unwrap();
        assert!(jacobian_positive_fraction(&folded).unwrap() < 1.0);
    }

    #[test]
    fn ground_truth_inverse_restores_masks() {
        // harness self-check: warping with a transform and back with its
        // exact inverse keeps Dice near 1 (nearest-neighbor bound)
        let (a, _) = generate_phantom_pair(
            21,
            2,
            64,
            ModalityStyle::Plain,
            ModalityStyle::InvertedGamma,
        )
        .unwrap();
        let spec = PerturbationSpec {
            include_nonrigid: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let aff = crate::data::random_affine_rng(&spec, 2, &mut rng);
        let fwd = GroundTruthWarp {
            affine: aff.clone(),
            field: None,
        };
        let bwd = GroundTruthWarp {
            affine: aff.inverse().unwrap(),
            field: None,
        };
        let warped = apply_ground_truth_warp(&a, &fwd).unwrap();
        let back = apply_ground_truth_warp(&warped, &bwd).unwrap();
        for (name, m) in &a.labels {
            let d = dice(&back.labels[name], m).unwrap();
            assert!(d >= 0.97, "{name}: dice {d}");
        }
    }

    #[test]
    fn untrained_model_full_dice_equals_unaligned() {
        let cfg = ModelConfig {
            dim: 2,
            base_channels: 4,
            resnet_blocks: 1,
            ..Default::default()
        };
        let model = FireModel::new(cfg, 9).unwrap();
        let cases: Vec<(Volume, Volume)> = (0..2)
            .map(|i| {
                generate_phantom_pair(
                    40 + i,
                    2,
                    32,
                    ModalityStyle::Plain,
                    ModalityStyle::InvertedGamma,
                )
                .unwrap()
            })
            .collect();
        let spec = PerturbationSpec {
            strength: [0.1, 0.3],
            include_nonrigid: false,
            ..Default::default()
        };
        let report = evaluate(&model, &cases, &spec, 3, 5, 1).unwrap();
        for r in &report.rows {
            assert_eq!(r.dice_full, r.dice_unaligned, "{:?}", r);
            assert_eq!(r.jacobian_positive_fraction, 1.0);
        }
        // aggregates recompute from rows
        let manual: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.structure == "body")
            .map(|r| r.dice_full)
            .collect();
        let agg = aggregate(&manual);
        assert!((report.per_structure["body"][2].mean - agg.mean).abs() < 1e-12);
        assert_eq!(report.per_structure["body"][2].n, manual.len());
    }

    #[test]
    fn evaluate_is_deterministic_and_thread_invariant() {
        let cfg = ModelConfig {
            dim: 2,
            base_channels: 4,
            resnet_blocks: 1,
            ..Default::default()
        };
        let model = FireModel::new(cfg, 10).unwrap();
        let cases: Vec<(Volume, Volume)> = (0..2)
            .map(|i| {
                generate_phantom_pair(
                    60 + i,
                    2,
                    32,
                    ModalityStyle::Plain,
                    ModalityStyle::InvertedGamma,
                )
                .unwrap()
            })
            .collect();
        let spec = PerturbationSpec::default();
        let r1 = evaluate(&model, &cases, &spec, 2, 7, 1).unwrap();
        let r2 = evaluate(&model, &cases, &spec, 2, 7, 2).unwrap();
        assert_eq!(r1.csv(), r2.csv());
    }

    #[test]
    fn bench_emits_a_row_per_mode_with_finite_stats() {
        let cfg = ModelConfig {
            dim: 2,
            base_channels: 4,
            resnet_blocks: 1,
            ..Default::default()
        };
        let model = FireModel::new(cfg, 11).unwrap();
        let cases = vec![generate_phantom_pair(
            99,
            2,
            32,
            ModalityStyle::Plain,
            ModalityStyle::InvertedGamma,
        )
        .unwrap()];
        let report = bench(&model, &cases, "toy-2d", 5).unwrap();
        assert_eq!(report.rows.len(), 2);
        for r in &report.rows {
            assert_eq!(r.n, 5);
            assert!(r.mean_s.is_finite() && r.mean_s > 0.0);
            assert!(r.std_s.is_finite() && r.std_s >= 0.0);
        }
        let modes: Vec<&str> = report.rows.iter().map(|r| r.mode).collect();
        assert_eq!(modes, vec!["affine", "nonrigid"]);
    }
}

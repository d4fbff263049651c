//! `dualsdf eval`: per-shape reconstruction metrics and their aggregates.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use dualsdf_core::geometry::{make_oracle_shape, OracleShape, Point3};
use dualsdf_core::manipulate::encode_for_editing;
use dualsdf_core::metrics::{
    chamfer, emd, mesh_accuracy, primitive_labels, semantic_consistency, volumetric_iou, PointSet, Provenance,
    EMD_MAX_POINTS, IOU_BOUNDS,
};
use dualsdf_core::nn::Decoders;
use dualsdf_core::render::{marching_cubes, DEFAULT_MC_BOUNDS};
use dualsdf_core::sampling::{analytic_surface_point, sample_surface_points, MeshSdf, TriMesh};
use dualsdf_core::vad::{derive_seed, load_checkpoint, Dataset, ShapeData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::commands::load_normalized;
use crate::EvalArgs;

/// Exact or mesh-derived ground truth for one shape.
enum Truth {
    Oracle(OracleShape),
    Mesh(MeshSdf, TriMesh),
}

impl Truth {
    fn of(shape: &ShapeData) -> Result<Option<Self>> {
        if let Some(spec) = &shape.oracle {
            return Ok(Some(Truth::Oracle(make_oracle_shape(spec)?)));
        }
        if let Some(src) = &shape.source {
            let mesh = load_normalized(src.as_ref())?;
            return Ok(Some(Truth::Mesh(MeshSdf::new(&mesh), mesh)));
        }
        Ok(None)
    }

    fn sdf(&self, p: Point3) -> f64 {
        match self {
            Truth::Oracle(o) => o.sdf(p),
            Truth::Mesh(m, _) => m.signed_distance(p),
        }
    }

    fn surface(&self, n: usize, seed: u64) -> Result<Vec<Point3>> {
        match self {
            Truth::Oracle(o) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = |p| o.sdf(p);
                (0..n).map(|_| Ok(analytic_surface_point(&f, &mut rng)?)).collect()
            }
            Truth::Mesh(_, mesh) => Ok(sample_surface_points(mesh, n, seed)?),
        }
    }

    fn mesh(&self, res: usize) -> Result<TriMesh> {
        match self {
            Truth::Oracle(o) => Ok(marching_cubes(&|p| o.sdf(p), res, DEFAULT_MC_BOUNDS)?),
            Truth::Mesh(_, mesh) => Ok(mesh.clone()),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run(a: EvalArgs) -> Result<()> {
    anyhow::ensure!(a.emd_points <= EMD_MAX_POINTS, "--emd-points is limited to {EMD_MAX_POINTS}");
    anyhow::ensure!(a.emd_points <= a.points, "--emd-points cannot exceed --points");
    let state = load_checkpoint(&a.checkpoint)?;
    let net = &state.config.net;
    let decoders = Decoders::new(net, &state.params)?;
    let data = Dataset::load(&a.data)?;

    let mut report: BTreeMap<String, Value> = BTreeMap::new();
    let mut columns: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut labels = Vec::new();
    for (i, shape) in data.shapes.iter().enumerate() {
        let seed = derive_seed(a.seed, i as u64);
        let z = match state.latent_for(&shape.id) {
            Some(l) => l.mu.clone(),
            None => encode_for_editing(shape, &state.params, net, &state.config.hp, a.encode_steps, seed)?.1,
        };
        let coarse = decoders.coarse_field(&z)?;
        let fine = decoders.fine_field(&z)?;
        let mut row: BTreeMap<&'static str, f64> = BTreeMap::new();
        row.insert("iou_fine_coarse", volumetric_iou(&fine, &coarse, a.iou_res, IOU_BOUNDS)?);

        if let Some(truth) = Truth::of(shape).with_context(|| format!("ground truth for `{}`", shape.id))? {
            let gt = |p| truth.sdf(p);
            row.insert("iou_coarse", volumetric_iou(&gt, &coarse, a.iou_res, IOU_BOUNDS)?);
            row.insert("iou_fine", volumetric_iou(&gt, &fine, a.iou_res, IOU_BOUNDS)?);

            let recon_mesh = marching_cubes(&fine, a.mc_res, DEFAULT_MC_BOUNDS)?;
            if !recon_mesh.triangles.is_empty() {
                let recon = PointSet::new(
                    sample_surface_points(&recon_mesh, a.points, seed)?,
                    Provenance::MarchingCubesSample,
                )?;
                let target = PointSet::new(truth.surface(a.points, seed ^ 1)?, Provenance::MeshSurfaceSample)?;
                row.insert("chamfer_x1e3", 1e3 * chamfer(&recon, &target));
                let head = |s: &PointSet| PointSet::new(s.points[..a.emd_points].to_vec(), s.provenance);
                row.insert("emd", emd(&head(&recon)?, &head(&target)?)?);
                row.insert("accuracy_90", mesh_accuracy(&recon, &truth.mesh(a.mc_res)?, 0.9)?);
            }
            if let Truth::Oracle(o) = &truth {
                let pts = truth.surface(a.points.min(512), seed ^ 2)?;
                let labelled: Vec<(Point3, String)> = pts.iter().map(|&p| (p, o.label_at(p).to_string())).collect();
                labels.push(primitive_labels(&coarse.set, &labelled)?);
            }
        }
        for (k, v) in &row {
            columns.entry(k).or_default().push(*v);
        }
        eprintln!("{}: {}", shape.id, serde_json::to_string(&row)?);
        report.insert(shape.id.clone(), json!(row));
    }

    let mut aggregate: BTreeMap<String, Value> = columns
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k.to_string(), json!({ "mean": mean, "median": median(v) }))
        })
        .collect();
    if labels.len() > 1 {
        let scores = semantic_consistency(&labels)?;
        for k in 0..3 {
            let per: Vec<f64> = scores.per_primitive.iter().map(|s| s[k]).collect();
            aggregate.insert(
                format!("semantic_top{}", k + 1),
                json!({ "mean": scores.mean[k], "median": median(per) }),
            );
        }
    }
    report.insert("aggregate".into(), json!(aggregate));
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

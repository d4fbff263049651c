use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualsdf_core::geometry::{procedural_dataset, to_geometric_attributes};
use dualsdf_core::manipulate::{
    interpolate_controlled, interpolate_latent, manipulate as run_manipulation, ManipulationObjective, RegConfig,
};
use dualsdf_core::render::{marching_cubes, render_image, RenderSettings, DEFAULT_MC_BOUNDS};
use dualsdf_core::sampling::{load_mesh, normalize_to_unit_sphere};
use dualsdf_core::vad::{load_checkpoint, train as run_training, Dataset, TrainConfig, TrainState};
use dualsdf_service::{encode_png, view_camera, Model, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{
    InterpolateArgs, LatentSource, Level, ManipulateArgs, PrepareArgs, RenderArgs, ServeArgs, TrainArgs,
};

/// Sorted `.obj` files in `dir`.
pub(crate) fn obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a mesh and maps it into the unit sphere.
pub(crate) fn load_normalized(path: &Path) -> Result<dualsdf_core::sampling::TriMesh> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mesh = load_mesh(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(normalize_to_unit_sphere(&mesh)?.0)
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let dataset = if let Some(m) = a.source.procedural {
        if m == 0 {
            bail!("--procedural needs at least one shape");
        }
        Dataset::from_oracles(&procedural_dataset(m, a.seed), a.fine, a.coarse, a.seed)?
    } else {
        let dir = a.source.input.expect("clap enforces one source");
        let files = obj_files(&dir)?;
        if files.is_empty() {
            bail!("no .obj files in {}", dir.display());
        }
        let mut meshes = Vec::new();
        for f in &files {
            let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            meshes.push((id, f.display().to_string(), load_normalized(f)?));
        }
        Dataset::from_meshes(&meshes, a.fine, a.coarse, a.seed)?
    };
    let manifest = dataset.write(&a.out, a.seed)?;
    eprintln!("prepared {} shapes in {}", manifest.shapes.len(), a.out.display());
    Ok(())
}

fn read_train_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // Files override the chosen base field by field.
    let mut value = serde_json::to_value(&base)?;
    let patch: serde_json::Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    merge(&mut value, patch);
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut state = if let Some(ckpt) = &a.resume {
        load_checkpoint(ckpt)?
    } else {
        let base = if a.desk { TrainConfig::desk(0) } else { TrainConfig::default() };
        let mut cfg = match &a.config {
            Some(p) => read_train_config(p, base)?,
            None => base,
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(n) = a.checkpoint_every {
            cfg.checkpoint_every = n;
        }
        TrainState::new(cfg, &data)?
    };
    if let Some(e) = a.epochs {
        state.config.hp.epochs = e;
    }
    let state = run_training(&data, state, Some(&a.out), |l| {
        eprintln!(
            "epoch {:>5}  coarse {:.6}  fine {:.6}  kl {:.4}  lr {:.2e}",
            l.epoch, l.coarse_loss, l.fine_loss, l.kl, l.lr
        );
    })?;
    eprintln!("finished {} epochs; wrote {}", state.epoch, a.out.join("final.dsdc").display());
    Ok(())
}

fn pick_latent(model: &Model, source: &LatentSource) -> Result<Vec<f64>> {
    let l = model.config.latent_dim;
    if let Some(id) = &source.shape {
        return model
            .latent(id)
            .map(<[f64]>::to_vec)
            .with_context(|| format!("unknown shape `{id}`"));
    }
    if let Some(seed) = source.random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok((0..l).map(|_| rng.sample(rand_distr::StandardNormal)).collect());
    }
    let path = source.latent.as_ref().expect("clap enforces one source");
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let z: Vec<f64> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if z.len() != l {
        bail!("latent in {} has {} values, the model expects {l}", path.display(), z.len());
    }
    Ok(z)
}

pub fn render(a: RenderArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let z = pick_latent(&model, &a.source)?;
    let camera = view_camera(a.width, a.height);
    let settings = RenderSettings::default().with_steps(a.steps);
    let image = match a.level {
        Level::Coarse => render_image(&model.decoders.coarse_field(&z)?, &camera, &settings)?,
        Level::Fine => render_image(&model.decoders.fine_field(&z)?, &camera, &settings.for_neural_field())?,
    };
    let bytes = if a.out.extension().is_some_and(|e| e == "ppm") {
        image.to_ppm()
    } else {
        encode_png(&image)
    };
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(mesh_path) = &a.mesh {
        let mesh = match a.level {
            Level::Coarse => marching_cubes(&model.decoders.coarse_field(&z)?, a.mc_res, DEFAULT_MC_BOUNDS)?,
            Level::Fine => marching_cubes(&model.decoders.fine_field(&z)?, a.mc_res, DEFAULT_MC_BOUNDS)?,
        };
        fs::write(mesh_path, mesh.to_obj()).with_context(|| format!("writing {}", mesh_path.display()))?;
    }
    Ok(())
}

pub fn manipulate(a: ManipulateArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let z0 = pick_latent(&model, &a.source)?;
    let text = fs::read_to_string(&a.objective).with_context(|| format!("reading {}", a.objective.display()))?;
    let objective: ManipulationObjective =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.objective.display()))?;
    let mut cfg = RegConfig::for_latent_dim(model.config.latent_dim);
    cfg.max_steps = a.steps;
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    let (session, outcome) = run_manipulation(&model.decoders, z0, &objective, &cfg)?;
    if let Some(p) = &a.trace {
        fs::write(p, session.trace_jsonl(model.config.primitive_kind)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.out_latent {
        fs::write(p, serde_json::to_string(session.z())?).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

pub fn interpolate(a: InterpolateArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let za = model.latent(&a.from).with_context(|| format!("unknown shape `{}`", a.from))?;
    let zb = model.latent(&a.to).with_context(|| format!("unknown shape `{}`", a.to))?;
    let kind = model.config.primitive_kind;
    let mut out = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if a.slots.is_empty() {
        if a.count < 2 {
            bail!("--count must be at least 2");
        }
        for i in 0..a.count {
            let t = i as f64 / (a.count - 1) as f64;
            let z = interpolate_latent(za, zb, t)?;
            let alpha = to_geometric_attributes(kind, &model.decoders.coarse_attributes(&z)?);
            writeln!(out, "{}", json!({ "t": t, "z": z, "alpha": alpha }))?;
        }
    } else {
        let arity = kind.arity();
        if let Some(&bad) = a.slots.iter().find(|&&s| s >= arity) {
            bail!("slot {bad} out of range for {kind} primitives ({arity} slots)");
        }
        let dim = model.config.attribute_dim();
        let mask: Vec<bool> = (0..dim).map(|i| a.slots.contains(&(i % arity))).collect();
        let target = to_geometric_attributes(kind, &model.decoders.coarse_attributes(zb)?);
        let mut cfg = RegConfig::for_latent_dim(model.config.latent_dim);
        cfg.max_steps = a.steps;
        let (session, outcome) = interpolate_controlled(&model.decoders, za.to_vec(), &target, &mask, &cfg)?;
        out.write_all(session.trace_jsonl(kind)?.as_bytes())?;
        eprintln!("{}", serde_json::to_string(&outcome)?);
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::from_toml_file(p)?,
        None => ServiceConfig::default(),
    }
    .with_env();
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    if let Some(d) = a.ui_dir {
        cfg.ui_dir = Some(d);
    }
    if let Some(n) = a.max_sessions {
        cfg.max_sessions = n;
    }
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(dualsdf_service::serve(cfg))?;
    Ok(())
}

//! Training shapes and their on-disk sample caches.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_oracle_shape, OracleSpec};
use crate::sampling::{
    read_sample_cache_file, sample_sdf_analytic, sample_sdf_coarse, sample_sdf_fine, write_sample_cache_file,
    SamplingStrategy, SdfSampleSet, TriMesh,
};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Mixes a stream index into a base seed (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub fine: String,
    pub coarse: String,
    /// Source mesh file, for shapes prepared from meshes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Exact description, for procedural shapes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub fine_n: usize,
    pub coarse_n: usize,
    pub shapes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(seed: u64, fine_n: usize, coarse_n: usize) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            seed,
            fine_n,
            coarse_n,
            shapes: Vec::new(),
        }
    }

    pub fn cache_names(id: &str) -> (String, String) {
        (format!("{id}.fine.dsdf"), format!("{id}.coarse.dsdf"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeData {
    pub id: String,
    pub fine: SdfSampleSet,
    pub coarse: SdfSampleSet,
    pub oracle: Option<OracleSpec>,
    /// Mesh file the samples came from.
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub shapes: Vec<ShapeData>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.shapes.iter().map(|s| s.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.shapes.iter().position(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::invalid("dataset has no shapes"));
        }
        for s in &self.shapes {
            if s.fine.is_empty() || s.coarse.is_empty() {
                return Err(Error::invalid(format!("shape `{}` has an empty sample cache", s.id)));
            }
        }
        Ok(())
    }

    /// Samples every oracle shape analytically. Shape `i` uses seeds derived
    /// from `(seed, i)`.
    pub fn from_oracles(specs: &[(String, OracleSpec)], fine_n: usize, coarse_n: usize, seed: u64) -> Result<Self> {
        let shapes = specs
            .iter()
            .enumerate()
            .map(|(i, (id, spec))| {
                let shape = make_oracle_shape(spec)?;
                let f = |p| shape.sdf(p);
                let s = derive_seed(seed, i as u64);
                Ok(ShapeData {
                    id: id.clone(),
                    fine: sample_sdf_analytic(&f, id, SamplingStrategy::FineSurfaceBiased, fine_n, s)?,
                    coarse: sample_sdf_analytic(&f, id, SamplingStrategy::CoarseUniform, coarse_n, s ^ 1)?,
                    oracle: Some(spec.clone()),
                    source: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { shapes })
    }

    /// Samples normalised meshes; `(id, source, mesh)` per shape, seeded
    /// like [`Dataset::from_oracles`].
    pub fn from_meshes(meshes: &[(String, String, TriMesh)], fine_n: usize, coarse_n: usize, seed: u64) -> Result<Self> {
        let shapes = meshes
            .iter()
            .enumerate()
            .map(|(i, (id, source, mesh))| {
                let s = derive_seed(seed, i as u64);
                Ok(ShapeData {
                    id: id.clone(),
                    fine: sample_sdf_fine(mesh, id, fine_n, s)?,
                    coarse: sample_sdf_coarse(mesh, id, coarse_n, s ^ 1)?,
                    oracle: None,
                    source: Some(source.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { shapes })
    }

    /// Writes caches and the manifest into `dir` (created if missing).
    pub fn write(&self, dir: &Path, seed: u64) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::new(
            seed,
            self.shapes.first().map_or(0, |s| s.fine.len()),
            self.shapes.first().map_or(0, |s| s.coarse.len()),
        );
        for s in &self.shapes {
            let (fine, coarse) = Manifest::cache_names(&s.id);
            write_sample_cache_file(&s.fine, &dir.join(&fine))?;
            write_sample_cache_file(&s.coarse, &dir.join(&coarse))?;
            manifest.shapes.push(ManifestEntry {
                id: s.id.clone(),
                fine,
                coarse,
                source: s.source.clone(),
                oracle: s.oracle.clone(),
            });
        }
        manifest.write(dir)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let shapes = manifest
            .shapes
            .into_iter()
            .map(|e| {
                let fine = read_sample_cache_file(&dir.join(&e.fine), &e.id)?;
                let coarse = read_sample_cache_file(&dir.join(&e.coarse), &e.id)?;
                if fine.strategy != SamplingStrategy::FineSurfaceBiased || coarse.strategy != SamplingStrategy::CoarseUniform {
                    return Err(Error::Format(format!("cache strategies for `{}` are swapped", e.id)));
                }
                Ok(ShapeData {
                    id: e.id,
                    fine,
                    coarse,
                    oracle: e.oracle,
                    source: e.source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { shapes };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::procedural_dataset;

    #[test]
    fn write_then_load_round_trips_at_f32_precision() {
        let specs = procedural_dataset(3, 1);
        let ds = Dataset::from_oracles(&specs, 64, 32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path(), 5).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.ids(), ds.ids());
        for (a, b) in ds.shapes.iter().zip(&back.shapes) {
            assert_eq!(a.oracle, b.oracle);
            for (x, y) in a.fine.samples.iter().zip(&b.fine.samples) {
                assert!((x.sdf - y.sdf).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}

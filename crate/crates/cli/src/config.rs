//! Run configuration: one JSON document with a section per subcommand.

use anyhow::{anyhow, bail, Context};
use ewhomog::chain::ChainConfig;
use ewhomog::fk::{PdeGrid, TestFunction};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    pub lambda: f64,
    pub n_substeps: usize,
    pub ensemble_size: usize,
    /// Lower coupling constant; the certified value when absent.
    pub gamma: Option<f64>,
    pub master_seed: u64,
    /// Radial grid points of the mollifier tables.
    pub mollifier_grid: usize,
    pub eigen_max_iters: usize,
    pub eigen_tol: f64,
    pub kernels: KernelsSection,
    pub field: FieldSection,
    pub diffusivity: DiffusivitySection,
    pub zeta_fit: ZetaSection,
    pub nu_eff: NuEffSection,
    pub nu_eff_white: WhiteSection,
    pub nearby_tail: NearbySection,
    pub mean_check: MeanCheckSection,
    pub ew_experiment: EwSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dimension: 3,
            lambda: 0.2,
            n_substeps: 32,
            ensemble_size: 1024,
            gamma: None,
            master_seed: 20_240_601,
            mollifier_grid: 64,
            eigen_max_iters: 200,
            eigen_tol: 1e-12,
            kernels: KernelsSection::default(),
            field: FieldSection::default(),
            diffusivity: DiffusivitySection::default(),
            zeta_fit: ZetaSection::default(),
            nu_eff: NuEffSection::default(),
            nu_eff_white: WhiteSection::default(),
            nearby_tail: NearbySection::default(),
            mean_check: MeanCheckSection::default(),
            ew_experiment: EwSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelsSection {
    /// Points per axis of the exported (t, |x|) grid of R.
    pub r_grid_points: usize,
}

impl Default for KernelsSection {
    fn default() -> Self {
        Self { r_grid_points: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub t_lo: f64,
    pub t_hi: f64,
    pub half_width: f64,
    pub dt: f64,
    pub dx: f64,
    /// Index of the realization; its seed is derived from the master seed.
    pub realization: u64,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self { t_lo: 0.0, t_hi: 2.0, half_width: 3.0, dt: 0.125, dx: 0.25, realization: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusivitySection {
    pub blocks: usize,
}

impl Default for DiffusivitySection {
    fn default() -> Self {
        Self { blocks: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZetaSection {
    pub times: Vec<f64>,
    pub samples: usize,
}

impl Default for ZetaSection {
    fn default() -> Self {
        Self { times: vec![2.0, 4.0, 6.0, 8.0, 10.0], samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuEffSection {
    pub m: f64,
    pub n_outer: usize,
    pub n_inner: usize,
}

impl Default for NuEffSection {
    fn default() -> Self {
        Self { m: 16.0, n_outer: 2000, n_inner: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteSection {
    pub n_paths: usize,
    pub horizon: f64,
}

impl Default for WhiteSection {
    fn default() -> Self {
        Self { n_paths: 20_000, horizon: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NearbySection {
    pub samples: usize,
    pub horizon: f64,
}

impl Default for NearbySection {
    fn default() -> Self {
        Self { samples: 10_000, horizon: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanCheckSection {
    pub eps: f64,
    pub t: f64,
    /// Evaluation point; the origin when absent.
    pub x: Option<Vec<f64>>,
    pub n_paths: usize,
    pub u0: TestFunction,
    pub pde_grid: PdeGrid,
}

impl Default for MeanCheckSection {
    fn default() -> Self {
        Self {
            eps: 0.1,
            t: 1.0,
            x: None,
            n_paths: 20_000,
            u0: TestFunction::Gaussian { center: vec![0.0; 3], variance: 0.5, amplitude: 1.0 },
            pde_grid: PdeGrid { n: 48, half_width: 6.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwSection {
    pub eps: f64,
    pub t: f64,
    pub n_realizations: usize,
    pub n_walkers: usize,
    pub quad_nodes: usize,
    pub quad_half_width: f64,
    pub dt: f64,
    pub dx: f64,
    pub u0: TestFunction,
    pub g: TestFunction,
    pub pde_grid: PdeGrid,
    pub n_time_nodes: usize,
}

impl Default for EwSection {
    fn default() -> Self {
        let gaussian = TestFunction::Gaussian { center: vec![0.0; 3], variance: 0.5, amplitude: 1.0 };
        Self {
            eps: 0.5,
            t: 1.0,
            n_realizations: 200,
            n_walkers: 2000,
            quad_nodes: 32,
            quad_half_width: 2.5,
            dt: 0.125,
            dx: 0.25,
            u0: gaussian.clone(),
            g: gaussian,
            pde_grid: PdeGrid { n: 48, half_width: 6.0 },
            n_time_nodes: 21,
        }
    }
}

/// Set `path` (dotted keys) in a JSON document to `raw`, read as JSON when
/// it parses and as a string otherwise.
pub fn set_path(doc: &mut Value, path: &str, raw: &str) -> anyhow::Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed override path '{path}'");
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| anyhow!("override '{path}' descends into a non-object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| anyhow!("override '{path}' descends into a non-object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Resolve the configuration: defaults, then the file, then overrides in order.
pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
        let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?;
        serde_json::from_value::<RunConfig>(user.clone()).with_context(|| format!("config {path}"))?;
        merge(&mut doc, user);
    }
    for (k, v) in overrides {
        set_path(&mut doc, k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).context("config overrides")?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            lambda: self.lambda,
            dimension: self.dimension,
            n_substeps: self.n_substeps,
            ensemble_size: self.ensemble_size,
            gamma: self.gamma,
            master_seed: self.master_seed,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.chain_config().validate()?;
        if self.mollifier_grid < 16 {
            bail!("mollifier_grid must be at least 16");
        }
        if self.zeta_fit.times.len() < 4 {
            bail!("zeta_fit.times needs at least 4 values");
        }
        if self.diffusivity.blocks < 1000 {
            bail!("diffusivity.blocks must be at least 1000");
        }
        if let Some(x) = &self.mean_check.x {
            if x.len() != self.dimension {
                bail!("mean_check.x has {} coordinates, expected {}", x.len(), self.dimension);
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = resolve(None, &[("nu_eff.m".into(), "8".into()), ("lambda".into(), "0.1".into())]).unwrap();
        assert_eq!(cfg.nu_eff.m, 8.0);
        assert_eq!(cfg.lambda, 0.1);
        assert!(resolve(None, &[("nu_eff.bogus".into(), "1".into())]).is_err());
        assert!(resolve(None, &[("lambda".into(), "-1".into())]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.master_seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

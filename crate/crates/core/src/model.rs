//! The full cooperative tracking model: one extractor and decoder per agent
//! plus the fusion stack, with checkpoint helpers.

use std::path::{Path, PathBuf};

use cooptrack_numerics::{ParamId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::fusion::FusionModel;
use crate::mdfe::Mdfe;
use crate::sim::AgentKind;
use crate::tracker::DecodeHeads;

#[derive(Clone, Debug)]
pub struct AgentModel {
    pub kind: AgentKind,
    pub mdfe: Mdfe,
    pub heads: DecodeHeads,
}

impl AgentModel {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.mdfe.params();
        p.extend(self.heads.params());
        p
    }

    /// Parameter-name prefix shared by everything this agent owns.
    pub fn prefix(&self) -> String {
        format!("{}.", self.kind.name())
    }
}

#[derive(Clone, Debug)]
pub struct CoopModel {
    pub d: usize,
    pub vehicle: AgentModel,
    pub infra: AgentModel,
    pub fusion: FusionModel,
}

impl CoopModel {
    /// Builds the architecture described by `cfg` with weights drawn from
    /// `cfg.seed`.
    pub fn new(cfg: &Config) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_3A11);
        let mut ps = ParamStore::new();
        let mut agent = |ps: &mut ParamStore, kind: AgentKind| AgentModel {
            kind,
            mdfe: Mdfe::new(ps, &format!("{}.mdfe", kind.name()), cfg.d, cfg.tau, cfg.heads, cfg.ffn_mult, cfg.gate_radius, &mut rng),
            heads: DecodeHeads::new(ps, &format!("{}.heads", kind.name()), cfg.d, cfg.n_classes, &mut rng),
        };
        let vehicle = agent(&mut ps, AgentKind::Vehicle);
        let infra = agent(&mut ps, AgentKind::Infrastructure);
        let fusion = FusionModel::new(&mut ps, cfg.d, cfg.caa_block, &mut rng)?;
        Ok((
            Self {
                d: cfg.d,
                vehicle,
                infra,
                fusion,
            },
            ps,
        ))
    }

    pub fn agent(&self, kind: AgentKind) -> &AgentModel {
        match kind {
            AgentKind::Vehicle => &self.vehicle,
            AgentKind::Infrastructure => &self.infra,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.vehicle.params();
        p.extend(self.infra.params());
        p.extend(self.fusion.params());
        p
    }
}

/// Writes the whole store, optimizer moments and step counter included.
pub fn save_checkpoint(ps: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CoopError::io(dir, e))?;
        }
    }
    ps.save(path)?;
    Ok(())
}

/// Copies the values of every same-named parameter starting with `prefix`
/// from the checkpoint at `path`. Returns the number of tensors copied.
pub fn load_prefix(ps: &mut ParamStore, path: &Path, prefix: &str) -> Result<usize> {
    require_files(&[path.to_path_buf()])?;
    let ckpt = ParamStore::load(path)?;
    copy_prefix(ps, &ckpt, prefix).map_err(|e| CoopError::Runtime(format!("{}: {e}", path.display())))
}

/// In-memory form of [`load_prefix`].
pub fn copy_prefix(ps: &mut ParamStore, src: &ParamStore, prefix: &str) -> Result<usize> {
    let mut n = 0;
    for id in ps.ids().collect::<Vec<_>>() {
        let name = ps.name(id).to_string();
        if !name.starts_with(prefix) {
            continue;
        }
        let Some(sid) = src.id(&name) else {
            return Err(CoopError::Runtime(format!("missing parameter {name}")));
        };
        if src.value(sid).shape() != ps.value(id).shape() {
            return Err(CoopError::Runtime(format!("shape mismatch for {name}")));
        }
        *ps.value_mut(id) = src.value(sid).clone();
        n += 1;
    }
    Ok(n)
}

/// Restores values, moments and the step counter from a checkpoint of the
/// same architecture.
pub fn resume_from(ps: &mut ParamStore, path: &Path) -> Result<()> {
    require_files(&[path.to_path_buf()])?;
    let ckpt = ParamStore::load(path)?;
    ps.restore_from(&ckpt)?;
    Ok(())
}

/// Fails with every missing path listed.
pub fn require_files(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CoopError::MissingCheckpoint(missing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agents_own_disjoint_named_parameters() {
        let cfg = Config {
            d: 8,
            heads: 2,
            caa_block: 4,
            ..Config::default()
        };
        let (m, ps) = CoopModel::new(&cfg).unwrap();
        let v = m.vehicle.params();
        assert!(v.iter().all(|&id| ps.name(id).starts_with("vehicle.")));
        assert!(m.infra.params().iter().all(|&id| ps.name(id).starts_with("infrastructure.")));
        assert_eq!(m.params().len(), ps.len());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = Config {
            d: 8,
            heads: 2,
            caa_block: 4,
            ..Config::default()
        };
        let (_, a) = CoopModel::new(&cfg).unwrap();
        let (_, b) = CoopModel::new(&cfg).unwrap();
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
        }
    }

    #[test]
    fn prefix_checkpoints_round_trip() {
        let cfg = Config {
            d: 8,
            heads: 2,
            caa_block: 4,
            ..Config::default()
        };
        let (m, mut ps) = CoopModel::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/v.ckpt");
        let id = m.vehicle.heads.params()[0];
        let other = m.infra.heads.params()[0];
        ps.value_mut(id).data_mut()[0] = 42.0;
        ps.value_mut(other).data_mut()[0] = 43.0;
        ps.set_step(17);
        save_checkpoint(&ps, &path).unwrap();
        let (_, mut fresh) = CoopModel::new(&cfg).unwrap();
        let n = load_prefix(&mut fresh, &path, "vehicle.").unwrap();
        assert_eq!(n, m.vehicle.params().len());
        assert_eq!(fresh.value(id).data()[0], 42.0);
        assert_ne!(fresh.value(other).data()[0], 43.0);
        resume_from(&mut fresh, &path).unwrap();
        assert_eq!(fresh.value(other).data()[0], 43.0);
        assert_eq!(fresh.step(), 17);
        let missing = dir.path().join("nope.ckpt");
        match load_prefix(&mut fresh, &missing, "") {
            Err(CoopError::MissingCheckpoint(p)) => assert_eq!(p, vec![missing]),
            other => panic!("{other:?}"),
        }
    }
}

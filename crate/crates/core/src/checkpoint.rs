//! Model checkpoints: `config.json`, `params/*.mart`, `meta.json` and an
//! optional `optim/` directory with Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Marmamba, NetConfig};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{read_mart, write_mart, StoreDtype};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed optimisation steps.
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Marmamba,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(
    dir: &Path,
    config: &NetConfig,
    params: &ParamStore,
    optimizer: Option<&AdamState>,
    meta: &CheckpointMeta,
    dtype: StoreDtype,
) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    write_json(&dir.join("config.json"), config)?;
    for (_, name, t) in params.iter() {
        write_mart(&pdir.join(format!("{name}.mart")), t, dtype)?;
    }
    if let Some(opt) = optimizer {
        opt.save(params, &dir.join("optim"))?;
    }
    write_json(&dir.join("meta.json"), meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config: NetConfig = read_json(&dir.join("config.json"))?;
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let (net, mut params) = Marmamba::new(config, meta.seed)?;
    let pdir = dir.join("params");
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let path = pdir.join(format!("{}.mart", params.name(id)));
        let t = read_mart(&path)?;
        params.set(id, t).map_err(|e| format_err(&path, e.to_string()))?;
    }
    let listed = fs::read_dir(&pdir).map_err(|e| Error::io(&pdir, e))?.count();
    if listed != params.len() {
        return Err(format_err(
            &pdir,
            format!("{listed} parameter files, network has {}", params.len()),
        ));
    }
    let odir = dir.join("optim");
    let optimizer = if odir.exists() { Some(AdamState::load(&params, &odir)?) } else { None };
    Ok(Checkpoint {
        net,
        params,
        optimizer,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed_micro() -> (Marmamba, ParamStore) {
        let (net, mut ps) = Marmamba::new(NetConfig::micro(), 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let noise = Tensor::randn(ps.get(id).shape(), &mut r);
            let v = ps.get(id).zip_map(&noise, |a, b| a + 0.01 * b).unwrap();
            ps.set(id, v).unwrap();
        }
        (net, ps)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, mut ps) = perturbed_micro();
        let mut opt = AdamState::new(&ps, Default::default());
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let g = vec![0.5; ps.get(id).len()];
            ps.get_mut(id).accumulate_grad(&g);
        }
        opt.step(&mut ps, 1e-3).unwrap();
        let meta = CheckpointMeta { iteration: 17, seed: 3 };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net.config, &ps, Some(&opt), &meta, StoreDtype::F64).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.net.config, net.config);
        for (id, name, t) in ps.iter() {
            let u = ck.params.get(id);
            assert_eq!(ck.params.name(id), name);
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(ck.optimizer.unwrap(), opt);
    }

    #[test]
    fn f32_storage_rounds_once() {
        let (net, ps) = perturbed_micro();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta { iteration: 0, seed: 3 };
        save_checkpoint(dir.path(), &net.config, &ps, None, &meta, StoreDtype::F32).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert!(ck.optimizer.is_none());
        for (id, _, t) in ps.iter() {
            for (a, b) in t.data().iter().zip(ck.params.get(id).data()) {
                assert_eq!(*b, *a as f32 as f64);
            }
        }
    }

    #[test]
    fn missing_or_extra_files_are_rejected() {
        let (net, ps) = perturbed_micro();
        let meta = CheckpointMeta { iteration: 0, seed: 3 };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net.config, &ps, None, &meta, StoreDtype::F64).unwrap();
        fs::write(dir.path().join("params/extra.mart"), b"").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
        fs::remove_file(dir.path().join("params/extra.mart")).unwrap();
        fs::remove_file(dir.path().join("params/head.bias.mart")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}

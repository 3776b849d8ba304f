//! Binary checkpoints of the actor, critic and their Adam state.
//!
//! Layout, all integers little-endian:
//!
//! | field          | encoding                                   |
//! |----------------|--------------------------------------------|
//! | magic          | 8 bytes `FLOCKCKP`                         |
//! | version        | u32, currently 1                           |
//! | config digest  | 32 bytes, SHA-256 of the config text       |
//! | config text    | u32 length + UTF-8 TOML of the `RunConfig` |
//! | episode        | u64 episodes completed                     |
//! | adam steps     | u64 actor, u64 critic                      |
//! | array count    | u32                                        |
//! | arrays         | see below, repeated                        |
//!
//! Each array is a u16 name length, the UTF-8 name, a u8 rank, one u32 per
//! dimension and then the values as f64. Names are `actor.<param>`,
//! `critic.<param>`, and `adam_m.` / `adam_v.` prefixed copies for the moments.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{digest_text, RunConfig};
use crate::error::{FlockError, Result};
use crate::networks::{NetworkConfig, PolicyNet, PolicyNetworks};
use crate::nn::{AdamConfig, AdamState, Parameterized};
use crate::scalar::Scalar;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"FLOCKCKP";
pub const VERSION: u32 = 1;

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub episode: usize,
    pub networks: PolicyNetworks<T>,
    pub actor_opt: AdamState<T>,
    pub critic_opt: AdamState<T>,
}

struct Array {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of a trainer. Gradient buffers are transient and stored as zeros.
    pub fn from_trainer(trainer: &Trainer<T>, config: &RunConfig) -> Self {
        let mut networks = trainer.networks.clone();
        networks.actor.zero_grad();
        networks.critic.zero_grad();
        Checkpoint {
            config: config.clone(),
            episode: trainer.episode,
            networks,
            actor_opt: trainer.actor_opt.clone(),
            critic_opt: trainer.critic_opt.clone(),
        }
    }

    /// Resumes training from this checkpoint (replay memory starts empty).
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        Trainer::restore(
            self.config.trainer.clone(),
            self.config.env(),
            self.networks,
            self.actor_opt,
            self.critic_opt,
            self.episode,
            self.config.seed,
        )
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let text = self.config.to_toml_string()?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&digest_text(&text))?;
        let len = u32::try_from(text.len()).map_err(|_| FlockError::Checkpoint("config text too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.episode as u64).to_le_bytes())?;
        w.write_all(&self.actor_opt.step.to_le_bytes())?;
        w.write_all(&self.critic_opt.step.to_le_bytes())?;

        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (prefix, net, opt) in [
            ("actor", &self.networks.actor, &self.actor_opt),
            ("critic", &self.networks.critic, &self.critic_opt),
        ] {
            let mut idx = 0;
            net.visit_params(prefix, &mut |name, shape, values| {
                arrays.push((name.to_string(), shape.to_vec(), to_f64(values)));
                arrays.push((format!("adam_m.{name}"), shape.to_vec(), to_f64(&opt.first_moment[idx])));
                arrays.push((format!("adam_v.{name}"), shape.to_vec(), to_f64(&opt.second_moment[idx])));
                idx += 1;
            });
        }
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for (name, shape, values) in arrays {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[shape.len() as u8])?;
            for d in &shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint whose networks match its own embedded config.
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        Self::read_with(r, None)
    }

    /// Reads a checkpoint and loads its parameters into networks built from `network`,
    /// failing with the name of the first layer whose shape disagrees.
    pub fn read_for<R: Read>(r: R, network: &NetworkConfig) -> Result<Self> {
        Self::read_with(r, Some(network))
    }

    fn read_with<R: Read>(mut r: R, network: Option<&NetworkConfig>) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(FlockError::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(FlockError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut digest = [0u8; 32];
        read_exact(&mut r, &mut digest, "config digest")?;
        let len = read_u32(&mut r, "config length")? as usize;
        let mut text = vec![0u8; len];
        read_exact(&mut r, &mut text, "config text")?;
        let text = String::from_utf8(text).map_err(|_| FlockError::Checkpoint("config text is not UTF-8".into()))?;
        if digest_text(&text) != digest {
            return Err(FlockError::Checkpoint("config digest mismatch".into()));
        }
        let mut config = RunConfig::from_toml_str(&text)
            .map_err(|e| FlockError::Checkpoint(format!("embedded config invalid: {e}")))?;
        let episode = read_u64(&mut r, "episode")? as usize;
        let actor_steps = read_u64(&mut r, "actor adam step")?;
        let critic_steps = read_u64(&mut r, "critic adam step")?;

        let count = read_u32(&mut r, "array count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r, "array name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "array name")?;
            let name = String::from_utf8(name).map_err(|_| FlockError::Checkpoint("array name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "array rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, "array dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            read_exact(&mut r, &mut bytes, "array values")?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(name, Array { shape, values });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(FlockError::Checkpoint("trailing bytes after last array".into()));
        }

        if let Some(net) = network {
            config.network = net.clone();
        }
        // Parameters are overwritten below; the init stream only fixes shapes.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut networks = PolicyNetworks::init(&config.network, &mut rng)?;
        let mut actor_opt = AdamState::new(AdamConfig::with_learning_rate(config.trainer.lr_actor), &networks.actor);
        let mut critic_opt = AdamState::new(AdamConfig::with_learning_rate(config.trainer.lr_critic), &networks.critic);
        actor_opt.step = actor_steps;
        critic_opt.step = critic_steps;
        fill("actor", &mut networks.actor, &mut actor_opt, &mut arrays)?;
        fill("critic", &mut networks.critic, &mut critic_opt, &mut arrays)?;
        if let Some(name) = arrays.keys().next() {
            return Err(FlockError::TopologyMismatch {
                layer: name.clone(),
                reason: "present in checkpoint but not in the network".into(),
            });
        }
        Ok(Checkpoint {
            config,
            episode,
            networks,
            actor_opt,
            critic_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so a crash never leaves a truncated checkpoint behind.
        let tmp = path.with_extension("tmp");
        {
            let file = fs::File::create(&tmp)?;
            self.write_to(io::BufWriter::new(file))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(io::BufReader::new(open(path)?))
    }

    pub fn load_for(path: &Path, network: &NetworkConfig) -> Result<Self> {
        Self::read_for(io::BufReader::new(open(path)?), network)
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| FlockError::Checkpoint(format!("{}: {e}", path.display())))
}

fn to_f64<T: Scalar>(values: &[T]) -> Vec<f64> {
    values.iter().map(|v| v.to_f64_lossy()).collect()
}

fn fill<T: Scalar>(
    prefix: &str,
    net: &mut PolicyNet<T>,
    opt: &mut AdamState<T>,
    arrays: &mut BTreeMap<String, Array>,
) -> Result<()> {
    // Shapes first, so a mismatch is reported before anything is written.
    let mut shapes = Vec::new();
    net.visit_params(prefix, &mut |name, shape, _| shapes.push((name.to_string(), shape.to_vec())));
    let mut taken = Vec::with_capacity(shapes.len());
    for (name, shape) in &shapes {
        let mut group = Vec::with_capacity(3);
        for key in [name.clone(), format!("adam_m.{name}"), format!("adam_v.{name}")] {
            let array = arrays.remove(&key).ok_or_else(|| FlockError::TopologyMismatch {
                layer: key.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if &array.shape != shape {
                return Err(FlockError::TopologyMismatch {
                    layer: key,
                    reason: format!("checkpoint shape {:?}, network expects {:?}", array.shape, shape),
                });
            }
            group.push(array.values);
        }
        taken.push(group);
    }
    let mut idx = 0;
    net.visit_params_mut(prefix, &mut |_, values, _| {
        for (v, x) in values.iter_mut().zip(&taken[idx][0]) {
            *v = T::lit(*x);
        }
        idx += 1;
    });
    for (i, group) in taken.iter().enumerate() {
        opt.first_moment[i] = group[1].iter().map(|&x| T::lit(x)).collect();
        opt.second_moment[i] = group[2].iter().map(|&x| T::lit(x)).collect();
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FlockError::Checkpoint(format!("truncated while reading {what}")),
        _ => FlockError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

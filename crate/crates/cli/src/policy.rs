use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use agrolearn::eval::GreedyPolicy;
use agrolearn::trainer::Manifest;
use agrolearn::{ActionChoice, Error, FixedManagement, Policy, PolicyNet, Result};

/// A policy named on the command line.
#[derive(Debug, Clone)]
pub enum AnyPolicy {
    Fixed(FixedManagement),
    Net(GreedyPolicy),
}

impl Policy for AnyPolicy {
    fn decide(&mut self, observation: &[f64]) -> Result<ActionChoice> {
        match self {
            AnyPolicy::Fixed(p) => p.decide(observation),
            AnyPolicy::Net(p) => p.decide(observation),
        }
    }
}

/// The checkpoint a path refers to: the file itself, or for a training
/// seed directory the top-ranked ensemble member (else `final.ckpt`).
pub fn checkpoint_path(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let manifest = path.join("manifest.json");
    if manifest.exists() {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(&manifest)?))?;
        let file = m.ensemble.first().map(|e| e.file.clone()).unwrap_or(m.final_policy);
        return Ok(path.join(file));
    }
    Ok(path.join("final.ckpt"))
}

fn load_file(path: &Path) -> Result<AnyPolicy> {
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let net = PolicyNet::load(&mut BufReader::new(file))?;
    Ok(AnyPolicy::Net(GreedyPolicy::new(net)))
}

/// The ensemble members of a training seed directory, labelled by rank and
/// episode, and its final policy.
pub fn load_members(dir: &Path) -> Result<(Vec<(String, AnyPolicy)>, AnyPolicy)> {
    let manifest = dir.join("manifest.json");
    let file = File::open(&manifest)
        .map_err(|e| Error::Checkpoint(format!("{} is not a training seed directory: {e}", dir.display())))?;
    let m: Manifest = serde_json::from_reader(BufReader::new(file))?;
    let members = m
        .ensemble
        .iter()
        .map(|e| {
            Ok((
                format!("#{} (episode {})", e.rank, e.episode),
                load_file(&dir.join(&e.file))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((members, load_file(&dir.join(&m.final_policy))?))
}

/// `"fixed"` or a checkpoint location.
pub fn load(source: &str) -> Result<AnyPolicy> {
    if source == "fixed" {
        return Ok(AnyPolicy::Fixed(FixedManagement::default()));
    }
    load_file(&checkpoint_path(Path::new(source))?)
}

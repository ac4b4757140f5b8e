use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Policy, PolicyModel};
use crate::error::{Error, Result};
use crate::param::ParamVector;

const FORMAT_VERSION: u32 = 1;

/// A policy together with its parameters. θ is stored as raw doubles;
/// JSON round-trips are bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub policy: PolicyModel,
    pub theta: ParamVector,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(policy: PolicyModel, theta: ParamVector, seed: u64) -> Result<Self> {
        policy.check_theta(&theta)?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            policy,
            theta,
            seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        ckpt.policy.check_theta(&ckpt.theta)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

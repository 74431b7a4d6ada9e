//! Versioned binary checkpoints.
//!
//! A file is a bincode record `(magic, kind, version, payload)`. bincode
//! stores `f32` bit patterns verbatim, so weights round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use odeadv_autograd::{ParamSet, Scalar};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"ODAV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Classifier,
    Generator,
    Discriminator,
}

#[derive(Serialize, Deserialize)]
struct Envelope<P> {
    magic: [u8; 4],
    kind: Kind,
    format_version: u32,
    payload: P,
}

pub fn save<P: Serialize>(path: &Path, kind: Kind, payload: &P) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let env = Envelope { magic: MAGIC, kind, format_version: FORMAT_VERSION, payload };
    let w = BufWriter::new(File::create(path)?);
    bincode::serialize_into(w, &env).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load<P: DeserializeOwned>(path: &Path, kind: Kind) -> Result<P> {
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let env: Envelope<P> = bincode::deserialize_from(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    if env.kind != kind {
        return Err(Error::Checkpoint(format!("{} holds a {:?}, expected a {kind:?}", path.display(), env.kind)));
    }
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {}, this build reads {FORMAT_VERSION}",
            path.display(),
            env.format_version
        )));
    }
    Ok(env.payload)
}

/// Checks that a loaded parameter set matches the layout a config builds.
pub fn check_layout<T: Scalar>(expected: &ParamSet<T>, loaded: &ParamSet<T>) -> Result<()> {
    let (a, b) = (expected.entries(), loaded.entries());
    if a.len() != b.len() {
        return Err(Error::Checkpoint(format!("expected {} parameter entries, found {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.kind != y.kind || x.value.shape() != y.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match {} {:?}",
                y.name,
                y.value.shape(),
                x.name,
                x.value.shape()
            )));
        }
    }
    Ok(())
}

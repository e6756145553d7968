//! JSON checkpoints: a small header plus the model itself, which carries its
//! own config and named parameter arrays.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const FORMAT: &str = "seqregen-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    kind: String,
    model: M,
}

pub fn save<M: Serialize>(path: impl AsRef<Path>, kind: &str, model: &M) -> Result<()> {
    let path = path.as_ref();
    let env = Envelope { format: FORMAT.to_string(), kind: kind.to_string(), model };
    let text = serde_json::to_string(&env)?;
    std::fs::write(path, text).map_err(io_err(path))
}

/// Loads a checkpoint written by [`save`] with the same `kind`.
pub fn load<M: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<M> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let env: Envelope<M> = serde_json::from_str(&text)?;
    if env.format != FORMAT {
        return Err(Error::Config(format!("{}: unsupported checkpoint format `{}`", path.display(), env.format)));
    }
    if env.kind != kind {
        return Err(Error::Config(format!("{}: expected a {kind} checkpoint, found {}", path.display(), env.kind)));
    }
    Ok(env.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personalizer::Personalizer;

    #[test]
    fn round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = Personalizer::new(4, 0.5, 9).unwrap();
        save(&path, "personalizer", &p).unwrap();
        let back: Personalizer = load(&path, "personalizer").unwrap();
        assert_eq!(back, p);
        assert!(load::<Personalizer>(&path, "target").is_err());
    }
}

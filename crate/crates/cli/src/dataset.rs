//! On-disk dataset: `world.toml`, `train/lap_NNN.jsonl`, `eval/lap_NNN.jsonl`.

use std::path::{Path, PathBuf};

use lace_core::learn::PreparedSession;
use lace_core::world::{read_jsonl, WorldConfig};
use lace_core::{ReferenceTrack, SessionRecord};

use crate::error::{CliError, CliResult};

pub const WORLD_FILE: &str = "world.toml";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";

/// Generator seed of lap `index` in a dataset generated with `seed`.
pub fn lap_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(index as u64)
}

pub fn lap_file(index: usize) -> String {
    format!("lap_{index:03}.jsonl")
}

pub struct Session {
    pub path: PathBuf,
    pub records: Vec<SessionRecord>,
    pub prepared: PreparedSession,
}

pub struct Dataset {
    pub world_path: PathBuf,
    pub world: WorldConfig,
    pub train: Vec<Session>,
    pub eval: Vec<Session>,
}

impl Dataset {
    pub fn load(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("dataset directory {} does not exist", dir.display())));
        }
        let world_path = dir.join(WORLD_FILE);
        let world = WorldConfig::load(&world_path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", world_path.display())))?;
        let track = world.track.build()?;
        let train = load_split(&dir.join(TRAIN_DIR), &track)?;
        let eval = load_split(&dir.join(EVAL_DIR), &track)?;
        if train.is_empty() {
            return Err(CliError::Usage(format!("{} holds no training sessions", dir.display())));
        }
        Ok(Dataset {
            world_path,
            world,
            train,
            eval,
        })
    }

    pub fn prepared_train(&self) -> Vec<PreparedSession> {
        self.train.iter().map(|s| s.prepared.clone()).collect()
    }

    /// The eval split, or the training split when no eval sessions exist.
    pub fn test_sessions(&self) -> &[Session] {
        if self.eval.is_empty() {
            &self.train
        } else {
            &self.eval
        }
    }

    pub fn delta_t(&self) -> f64 {
        self.train[0].prepared.delta_t
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        std::iter::once(self.world_path.clone())
            .chain(self.train.iter().chain(&self.eval).map(|s| s.path.clone()))
            .collect()
    }
}

/// Session files of one split in name order; a missing split is empty.
pub fn session_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_split(dir: &Path, track: &ReferenceTrack) -> CliResult<Vec<Session>> {
    session_files(dir)?
        .into_iter()
        .map(|path| {
            let records = read_jsonl(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let prepared = PreparedSession::new(&records, track)?;
            Ok(Session {
                path,
                records,
                prepared,
            })
        })
        .collect()
}

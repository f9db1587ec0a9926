//! Run configuration.
//!
//! A config file is a partial JSON object merged over the defaults of its
//! task, so `{"task": "scene-det"}` alone is a complete detection run. The
//! merged object is then parsed strictly: any key that is not a field is an
//! error. `--override a.b.c=value` edits the same tree before the merge;
//! `value` is read as JSON when it parses and as a string otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vcforge::engine::EngineConfig;
use vcforge::synthdata::{GridTaskSpec, SceneTaskSpec};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    GridSeg,
    SceneDet,
}

/// A fully resolved run. `seed` is the single source of randomness: it is
/// copied into `engine.seed` and into the task spec before validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Directory for metrics and summary; `--out` takes precedence.
    pub output: Option<PathBuf>,
    pub engine: EngineConfig,
    /// Present iff `task` is `grid-seg`.
    pub grid: Option<GridTaskSpec>,
    /// Present iff `task` is `scene-det`.
    pub scene: Option<SceneTaskSpec>,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let seed = 0;
        match task {
            Task::GridSeg => RunConfig {
                task,
                seed,
                output: None,
                engine: EngineConfig::segmentation(),
                grid: Some(GridTaskSpec::desk_default(seed)),
                scene: None,
            },
            Task::SceneDet => RunConfig {
                task,
                seed,
                output: None,
                engine: EngineConfig::detection(),
                grid: None,
                scene: Some(SceneTaskSpec::desk_default(seed)),
            },
        }
    }

    /// Merges `user` over the defaults of its task, parses strictly, then
    /// propagates the seed and validates.
    pub fn from_value(user: Value) -> Result<Self> {
        if !user.is_object() {
            return Err(CliError::Config("top level must be a JSON object".into()));
        }
        let task = match user.get("task") {
            None => Task::default(),
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| CliError::Config(format!("task: {e}")))?,
        };
        let mut merged = serde_json::to_value(Self::defaults(task))?;
        merge(&mut merged, user);
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file, applies overrides and an optional seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        if let Some(s) = seed {
            set_path(&mut user, "seed", Value::from(s))?;
        }
        Self::from_value(user)
    }

    fn propagate_seed(&mut self) {
        self.engine.seed = self.seed;
        if let Some(g) = self.grid.as_mut() {
            g.seed = self.seed;
        }
        if let Some(s) = self.scene.as_mut() {
            s.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        match (self.task, &self.grid, &self.scene) {
            (Task::GridSeg, Some(g), None) => g.validate()?,
            (Task::SceneDet, None, Some(s)) => s.validate()?,
            (task, _, _) => {
                return Err(CliError::Config(format!(
                    "task {} needs exactly its own spec block",
                    serde_json::to_value(task)?
                )))
            }
        }
        if self.engine.seed != self.seed {
            return Err(CliError::Config("engine.seed must equal seed".into()));
        }
        Ok(())
    }

    /// Same run with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.propagate_seed();
        cfg
    }
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value` and writes it into `tree`.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(tree, key.trim(), value)
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut node = tree;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("override `{key}` descends into a non-object")));
        };
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

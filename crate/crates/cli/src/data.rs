//! Dataset materialisation for `gen`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vcforge::synthdata::{gen_grid, gen_scene, write_records, Scene, Split};

use crate::config::{RunConfig, Task};
use crate::error::{CliError, Result};
use crate::io::write_atomic;

pub const DATASET_FILE: &str = "dataset.jsonl";

/// One scene per line of a scene dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub split: Split,
    pub scene: Scene,
}

/// Serialises the task's dataset as line-delimited JSON.
pub fn dataset_lines(cfg: &RunConfig) -> Result<(Vec<u8>, usize)> {
    let mut buf = Vec::new();
    let n = match cfg.task {
        Task::GridSeg => {
            let data = gen_grid(cfg.grid.as_ref().expect("validated grid spec"))?;
            write_records(&mut buf, data.records()).map_err(|e| CliError::io(DATASET_FILE, e))?
        }
        Task::SceneDet => {
            let data = gen_scene(cfg.scene.as_ref().expect("validated scene spec"))?;
            let tagged = [
                (Split::Labelled, &data.labelled),
                (Split::Unlabelled, &data.unlabelled),
                (Split::Test, &data.test),
            ];
            let mut n = 0;
            for (split, scenes) in tagged {
                for scene in scenes {
                    serde_json::to_writer(
                        &mut buf,
                        &SceneRecord {
                            split,
                            scene: scene.clone(),
                        },
                    )?;
                    buf.push(b'\n');
                    n += 1;
                }
            }
            n
        }
    };
    Ok((buf, n))
}

/// Writes `dataset.jsonl` into `out`; returns the line count.
pub fn write_dataset(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let (bytes, n) = dataset_lines(cfg)?;
    write_atomic(&out.join(DATASET_FILE), &bytes)?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcforge::synthdata::read_records;

    #[test]
    fn grid_dataset_reads_back() {
        let mut cfg = RunConfig::defaults(Task::GridSeg);
        let g = cfg.grid.as_mut().unwrap();
        g.height = 8;
        g.width = 8;
        g.label_budget = 2;
        let (bytes, n) = dataset_lines(&cfg).unwrap();
        let records = read_records(bytes.as_slice()).unwrap();
        assert_eq!(records.len(), n);
        assert_eq!(n, 8 * 8 * 2);
        assert!(records
            .iter()
            .all(|r| (r.split == Split::Unlabelled) == r.label.is_none()));
    }

    #[test]
    fn scene_dataset_lines_parse() {
        let mut cfg = RunConfig::defaults(Task::SceneDet);
        let s = cfg.scene.as_mut().unwrap();
        (s.labelled_scenes, s.unlabelled_scenes, s.test_scenes) = (1, 2, 1);
        let (bytes, n) = dataset_lines(&cfg).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let parsed: Vec<SceneRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!((n, parsed.len()), (4, 4));
        assert_eq!(parsed[0].split, Split::Labelled);
    }
}

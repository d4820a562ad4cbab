use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::world::{Scene, World};
use crate::error::Result;

/// Stored replay scenes, keyed by the class they were selected for.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub per_class: BTreeMap<usize, Vec<Scene>>,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    /// Every stored scene once, ordered by id.
    pub fn scenes(&self) -> Vec<&Scene> {
        let mut by_id: BTreeMap<u64, &Scene> = BTreeMap::new();
        for scenes in self.per_class.values() {
            for s in scenes {
                by_id.entry(s.id).or_insert(s);
            }
        }
        by_id.into_values().collect()
    }
}

/// Stores, for every class introduced at `task`, the first
/// `exemplars_per_class` of `scenes` that contain it.
pub fn update_exemplars(
    store: &mut ExemplarStore,
    world: &World,
    task: usize,
    scenes: &[Scene],
) -> Result<()> {
    world.schedule.check_task(task)?;
    let n = world.config.exemplars_per_class;
    for class_id in world.schedule.current(task) {
        if store.per_class.contains_key(&class_id) {
            continue;
        }
        let chosen: Vec<Scene> = scenes
            .iter()
            .filter(|s| s.contains_class(class_id))
            .take(n)
            .cloned()
            .collect();
        store.per_class.insert(class_id, chosen);
    }
    Ok(())
}

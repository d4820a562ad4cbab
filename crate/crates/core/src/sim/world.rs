use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::matching::GroundTruth;

const PROTOTYPE_TAG: u64 = 1;
const TRAIN_SCENE_TAG: u64 = 2;
const TEST_SCENE_TAG: u64 = 3;
const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;
/// Objects occupy distinct corners of the image, so at most four per scene.
const MAX_OBJECTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Dimension of the raw appearance vector.
    pub d_in: usize,
    /// Norm of every class prototype.
    pub prototype_norm: f64,
    /// Per-coordinate standard deviation of the appearance noise.
    pub noise: f64,
    /// Per-coordinate standard deviation of background appearance vectors.
    pub background_scale: f64,
    pub background_per_scene: usize,
    /// Share of background proposals drawn with a large box.
    pub large_background_fraction: f64,
    pub max_known_per_scene: usize,
    pub max_unknown_per_scene: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Standard deviation of the corner jitter of object proposals.
    pub box_jitter: f64,
    pub scenes_per_task: usize,
    pub test_scenes: usize,
    pub exemplars_per_class: usize,
    pub min_prototype_angle_deg: f64,
    /// Master seed; experiment configs set it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            classes_per_task: 5,
            d_in: 32,
            prototype_norm: 3.0,
            noise: 0.4,
            background_scale: 0.4,
            background_per_scene: 12,
            large_background_fraction: 0.1,
            max_known_per_scene: 2,
            max_unknown_per_scene: 2,
            min_object_size: 0.5,
            max_object_size: 0.65,
            box_jitter: 0.02,
            scenes_per_task: 200,
            test_scenes: 100,
            exemplars_per_class: 4,
            min_prototype_angle_deg: 60.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.d_in == 0 {
            return bad("num_tasks, classes_per_task and d_in must be positive");
        }
        if self.max_known_per_scene == 0 {
            return bad("scenes need at least one known object");
        }
        if self.max_known_per_scene + self.max_unknown_per_scene > MAX_OBJECTS {
            return bad("at most four objects fit in a scene");
        }
        if !(0.0 < self.min_object_size
            && self.min_object_size <= self.max_object_size
            && self.max_object_size <= 0.95)
        {
            return bad("object sizes must satisfy 0 < min <= max <= 0.95");
        }
        if !(0.0..=1.0).contains(&self.large_background_fraction) {
            return bad("large_background_fraction must lie in [0, 1]");
        }
        if !(self.prototype_norm.is_finite() && self.prototype_norm > 0.0) {
            return bad("prototype_norm must be positive");
        }
        if self.noise < 0.0 || self.background_scale < 0.0 || self.box_jitter < 0.0 {
            return bad("noise scales must be non-negative");
        }
        if self.scenes_per_task == 0 || self.test_scenes == 0 {
            return bad("scene counts must be positive");
        }
        if !(0.0..90.0).contains(&self.min_prototype_angle_deg) {
            return bad("min_prototype_angle_deg must lie in [0, 90)");
        }
        Ok(())
    }
}

/// Class bookkeeping for the incremental schedule. Tasks are 1-based and
/// task `t` introduces classes `(t-1)*n .. t*n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskSchedule {
    pub num_tasks: usize,
    pub classes_per_task: usize,
}

impl TaskSchedule {
    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn current(&self, task: usize) -> std::ops::Range<usize> {
        (task - 1) * self.classes_per_task..task * self.classes_per_task
    }

    pub fn previous(&self, task: usize) -> std::ops::Range<usize> {
        0..(task - 1) * self.classes_per_task
    }

    /// Known classes `K_t`.
    pub fn known(&self, task: usize) -> std::ops::Range<usize> {
        0..task * self.classes_per_task
    }

    /// Unknown classes `U_t`.
    pub fn unknown(&self, task: usize) -> std::ops::Range<usize> {
        task * self.classes_per_task..self.total_classes()
    }

    pub fn is_known(&self, task: usize, class_id: usize) -> bool {
        class_id < task * self.classes_per_task
    }

    /// Task (1-based) that introduces `class_id`.
    pub fn task_of(&self, class_id: usize) -> usize {
        class_id / self.classes_per_task + 1
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.num_tasks {
            return Err(Error::invalid(format!(
                "task {task} outside 1..={}",
                self.num_tasks
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub observation: Vec<f64>,
    pub bbox: BBox,
    /// Index into the scene's objects, `None` for background.
    pub object: Option<usize>,
}

/// One synthetic image: every object it contains and the proposals drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<Proposal>,
}

impl Scene {
    /// Annotations visible at `task`: objects whose class is known then.
    pub fn annotations(&self, schedule: &TaskSchedule, task: usize) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .filter(|o| schedule.is_known(task, o.class_id))
            .map(|o| GroundTruth {
                class_id: o.class_id,
                bbox: o.bbox,
            })
            .collect()
    }

    /// Unlabelled objects at `task`, kept by the simulator for evaluation only.
    pub fn unknown_objects(&self, schedule: &TaskSchedule, task: usize) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .filter(|o| !schedule.is_known(task, o.class_id))
            .map(|o| GroundTruth {
                class_id: o.class_id,
                bbox: o.bbox,
            })
            .collect()
    }

    pub fn all_objects(&self) -> Vec<GroundTruth> {
        self.objects
            .iter()
            .map(|o| GroundTruth {
                class_id: o.class_id,
                bbox: o.bbox,
            })
            .collect()
    }

    pub fn contains_class(&self, class_id: usize) -> bool {
        self.objects.iter().any(|o| o.class_id == class_id)
    }

    pub fn observations(&self) -> DMatrix<f64> {
        let n = self.proposals.len();
        let d = self.proposals.first().map_or(0, |p| p.observation.len());
        DMatrix::from_fn(n, d, |i, j| self.proposals[i].observation[j])
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub schedule: TaskSchedule,
    /// One unit-norm prototype direction per class.
    pub prototypes: Vec<Vec<f64>>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Samples class prototypes on the unit sphere with a minimum pairwise angle.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, PROTOTYPE_TAG));
    let max_cos = config.min_prototype_angle_deg.to_radians().cos();
    let total = config.total_classes();
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut attempts = 0;
    while prototypes.len() < total {
        attempts += 1;
        if attempts > MAX_PROTOTYPE_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {total} prototypes {}° apart in dimension {}",
                config.min_prototype_angle_deg, config.d_in
            )));
        }
        let v = unit_vector(&mut rng, config.d_in);
        let crowded = prototypes
            .iter()
            .any(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() > max_cos);
        if !crowded {
            prototypes.push(v);
        }
    }
    Ok(World {
        config: config.clone(),
        schedule: TaskSchedule {
            num_tasks: config.num_tasks,
            classes_per_task: config.classes_per_task,
        },
        prototypes,
    })
}

impl World {
    pub fn obs_dim(&self) -> usize {
        self.config.d_in
    }

    fn object_observation<R: Rng>(&self, rng: &mut R, class_id: usize) -> Vec<f64> {
        let noise = gaussian_vec(rng, self.config.d_in, self.config.noise);
        self.prototypes[class_id]
            .iter()
            .zip(noise)
            .map(|(p, n)| self.config.prototype_norm * p + n)
            .collect()
    }

    fn background_observation<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        gaussian_vec(rng, self.config.d_in, self.config.background_scale)
    }

    fn object_box<R: Rng>(&self, rng: &mut R, corner: usize) -> BBox {
        let c = &self.config;
        let w = rng.gen_range(c.min_object_size..=c.max_object_size);
        let h = rng.gen_range(c.min_object_size..=c.max_object_size);
        let inset_x = rng.gen_range(0.0..=(1.0 - w).min(0.05));
        let inset_y = rng.gen_range(0.0..=(1.0 - h).min(0.05));
        let (x1, x2) = if corner.is_multiple_of(2) {
            (inset_x, inset_x + w)
        } else {
            (1.0 - inset_x - w, 1.0 - inset_x)
        };
        let (y1, y2) = if corner / 2 == 0 {
            (inset_y, inset_y + h)
        } else {
            (1.0 - inset_y - h, 1.0 - inset_y)
        };
        BBox::new(x1, y1, x2, y2)
    }

    fn jittered<R: Rng>(&self, rng: &mut R, b: &BBox) -> BBox {
        let j = self.config.box_jitter;
        let mut v = b.0;
        for c in v.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *c = (*c + j * e).clamp(0.0, 1.0);
        }
        let out = BBox(v);
        if out.is_valid() && out.width() > 0.01 && out.height() > 0.01 {
            out
        } else {
            *b
        }
    }

    fn background_box<R: Rng>(&self, rng: &mut R) -> BBox {
        let (lo, hi) = if rng.gen_bool(self.config.large_background_fraction) {
            (0.5, 0.9)
        } else {
            (0.05, 0.3)
        };
        let w: f64 = rng.gen_range(lo..=hi);
        let h: f64 = rng.gen_range(lo..=hi);
        let x1 = rng.gen_range(0.0..=1.0 - w);
        let y1 = rng.gen_range(0.0..=1.0 - h);
        BBox::new(x1, y1, x1 + w, y1 + h)
    }

    fn build_scene<R: Rng>(&self, rng: &mut R, id: u64, classes: &[usize]) -> Scene {
        let mut corners: Vec<usize> = (0..MAX_OBJECTS).collect();
        corners.shuffle(rng);
        let objects: Vec<SceneObject> = classes
            .iter()
            .zip(&corners)
            .map(|(&class_id, &corner)| SceneObject {
                class_id,
                bbox: self.object_box(rng, corner),
            })
            .collect();
        let mut proposals: Vec<Proposal> = objects
            .iter()
            .enumerate()
            .map(|(i, o)| Proposal {
                observation: self.object_observation(rng, o.class_id),
                bbox: self.jittered(rng, &o.bbox),
                object: Some(i),
            })
            .collect();
        for _ in 0..self.config.background_per_scene {
            proposals.push(Proposal {
                observation: self.background_observation(rng),
                bbox: self.background_box(rng),
                object: None,
            });
        }
        proposals.shuffle(rng);
        Scene {
            id,
            objects,
            proposals,
        }
    }

    /// Draws a training scene for `task`: current-task known objects plus
    /// objects of still-unknown classes, which carry no annotation.
    pub fn generate_scene<R: Rng>(&self, task: usize, rng: &mut R, id: u64) -> Result<Scene> {
        self.schedule.check_task(task)?;
        let current = self.schedule.current(task);
        let unknown = self.schedule.unknown(task);
        let n_known = rng.gen_range(1..=self.config.max_known_per_scene);
        let n_unknown = if unknown.is_empty() {
            0
        } else {
            rng.gen_range(0..=self.config.max_unknown_per_scene)
        };
        let mut classes: Vec<usize> = (0..n_known)
            .map(|_| rng.gen_range(current.clone()))
            .collect();
        classes.extend((0..n_unknown).map(|_| rng.gen_range(unknown.clone())));
        Ok(self.build_scene(rng, id, &classes))
    }

    /// The fixed training set of `task`.
    pub fn task_scenes(&self, task: usize) -> Result<Vec<Scene>> {
        self.schedule.check_task(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            TRAIN_SCENE_TAG + 16 * task as u64,
        ));
        (0..self.config.scenes_per_task)
            .map(|i| self.generate_scene(task, &mut rng, (task * 1_000_000 + i) as u64))
            .collect()
    }

    /// Shared evaluation set: objects of every class, labelled or not depending on the task.
    pub fn test_scenes(&self) -> Vec<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, TEST_SCENE_TAG));
        let total = self.schedule.total_classes();
        let max_objects =
            (self.config.max_known_per_scene + self.config.max_unknown_per_scene).max(2);
        (0..self.config.test_scenes)
            .map(|i| {
                let n = rng.gen_range(2..=max_objects);
                let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..total)).collect();
                self.build_scene(&mut rng, (i + 1) as u64, &classes)
            })
            .collect()
    }
}

//! Full incremental runs, the EUS x EKD ablation grid and hyperparameter sweeps.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::etf::{build_simplex_etf, EtfFrame};
use crate::eval::{evaluate_task, Detection, EvalReport};
use crate::head::HeadParams;
use crate::sim::{
    generate_world, init_head, train_task, update_exemplars, Ablation, ExemplarStore, LogRow,
    Scene, TrainSetup, World,
};

/// Results of one task: its evaluation, raw detections and training log.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub frame: EtfFrame,
    pub tasks: Vec<TaskOutcome>,
    pub params: HeadParams,
    pub test_scenes: Vec<Scene>,
    pub world: World,
}

pub fn setup_of(cfg: &ExperimentConfig) -> TrainSetup {
    TrainSetup {
        weights: cfg.losses,
        pseudo: cfg.pseudo,
        train: cfg.train,
        ablation: cfg.ablation,
    }
}

/// Runs tasks `1..=last_task` of the configured schedule.
pub fn run_tasks(cfg: &ExperimentConfig, last_task: usize) -> Result<RunResult> {
    cfg.validate()?;
    if last_task == 0 || last_task > cfg.world.num_tasks {
        return Err(Error::Config(format!(
            "cannot stop after task {last_task} of {}",
            cfg.world.num_tasks
        )));
    }
    let world = generate_world(&cfg.world_config())?;
    let frame = build_simplex_etf(cfg.frame.k, cfg.frame.d, cfg.frame_seed())?;
    let setup = setup_of(cfg);
    let test_scenes = world.test_scenes();
    let mut params = init_head(&world, &frame)?;
    let mut store = ExemplarStore::new();
    let mut tasks = Vec::with_capacity(last_task);
    for task in 1..=last_task {
        let scenes = world.task_scenes(task)?;
        let log = train_task(&world, task, &mut params, &frame, &setup, &scenes, &store)?;
        update_exemplars(&mut store, &world, task, &scenes)?;
        let (report, detections) = evaluate_task(
            &params,
            &frame,
            &world.schedule,
            task,
            &test_scenes,
            &cfg.inference,
            cfg.ablation.eus_enabled,
        )?;
        tasks.push(TaskOutcome {
            report,
            detections,
            log,
        });
    }
    Ok(RunResult {
        config: cfg.clone(),
        frame,
        tasks,
        params,
        test_scenes,
        world,
    })
}

/// Runs every task of the schedule.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_tasks(cfg, cfg.world.num_tasks)
}

/// A named variant of a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: ExperimentConfig,
}

/// The 2 x 2 EUS x EKD grid over a shared base config, in the order
/// (off, off), (off, on), (on, off), (on, on).
pub fn ablation_cells(base: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(4);
    for eus in [false, true] {
        for ekd in [false, true] {
            let mut config = base.clone();
            config.ablation = Ablation {
                eus_enabled: eus,
                ekd_enabled: ekd,
            };
            let flag = |b: bool| if b { "on" } else { "off" };
            cells.push(Cell {
                name: format!("eus_{}_ekd_{}", flag(eus), flag(ekd)),
                config,
            });
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Energy margin values.
    Margin(Vec<f64>),
    /// Frame sizes; the feature dimension grows to fit when needed.
    FrameK(Vec<usize>),
}

impl Sweep {
    /// Parses `m=0.25,0.5,1.0` or `k=32,64,128`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep '{spec}' is not axis=v1,v2,...")))?;
        let items: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            return Err(Error::Config(format!("sweep '{spec}' lists no values")));
        }
        let bad = |v: &str| Error::Config(format!("bad sweep value '{v}'"));
        match axis.trim() {
            "m" => items
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(v)))
                .collect::<Result<_>>()
                .map(Sweep::Margin),
            "k" => items
                .iter()
                .map(|v| v.parse::<usize>().map_err(|_| bad(v)))
                .collect::<Result<_>>()
                .map(Sweep::FrameK),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}', expected m or k"
            ))),
        }
    }

    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<Cell>> {
        let cells: Vec<Cell> = match self {
            Sweep::Margin(ms) => ms
                .iter()
                .map(|&m| {
                    let mut config = base.clone();
                    config.losses.margin = m;
                    Cell {
                        name: format!("m_{m}"),
                        config,
                    }
                })
                .collect(),
            Sweep::FrameK(ks) => ks
                .iter()
                .map(|&k| {
                    let mut config = base.clone();
                    config.frame.k = k;
                    config.frame.d = config.frame.d.max(k);
                    Cell {
                        name: format!("k_{k}"),
                        config,
                    }
                })
                .collect(),
        };
        for c in &cells {
            c.config.validate()?;
        }
        Ok(cells)
    }
}

/// Runs independent cells on up to `workers` threads; results keep cell order.
pub fn run_cells(cells: &[Cell], workers: usize) -> Vec<Result<RunResult>> {
    let workers = workers.clamp(1, cells.len().max(1));
    if workers == 1 {
        return cells.iter().map(|c| run_experiment(&c.config)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunResult>>> = (0..cells.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let out = run_experiment(&cells[i].config);
                done.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every cell ran"))
        .collect()
}

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use super::results::{digest_hex, Method, ResultRow, ResultTable};
use crate::adapt::evofa_test;
use crate::backbone::Model;
use crate::data::{make_inter_split, make_intra_split, DatasetIndex, Role, SplitKind, SplitSpec};
use crate::error::{Error, Result};
use crate::fsl::{meta_train, supervised_accuracy, train_supervised_baseline, TrainConfig, TrainOutcome};
use crate::tensor::Fnv1a;

const SPLIT_SALT: u64 = 0x5911_7000;
const EVAL_SALT: u64 = 0xe7a1_0000;
const SUPERVISED_SALT: u64 = 0x50be_0000;

/// One protocol cell: a test subject, plus the session for the inter protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub subject: u32,
    pub session: Option<u32>,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.session {
            Some(s) => write!(f, "subject {}, session {s}", self.subject),
            None => write!(f, "subject {}", self.subject),
        }
    }
}

impl Cell {
    /// File-name stem such as `subject3` or `session2-subject3`.
    pub fn stem(&self) -> String {
        match self.session {
            Some(s) => format!("session{s}-subject{}", self.subject),
            None => format!("subject{}", self.subject),
        }
    }

    /// Seed derived from the master seed and the cell coordinates.
    pub fn seed(&self, master: u64) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(master);
        h.write_u64(u64::from(self.subject));
        h.write_u64(self.session.map_or(0, |s| u64::from(s) + 1));
        h.finish()
    }
}

/// Cells of the configured protocol, in (session, subject) order.
pub fn protocol_cells(cfg: &ExperimentConfig, ds: &DatasetIndex) -> Result<Vec<Cell>> {
    let wanted = |s: u32| cfg.subjects.as_ref().is_none_or(|list| list.contains(&s));
    if let Some(list) = &cfg.subjects {
        let present = ds.subjects();
        if let Some(s) = list.iter().find(|s| !present.contains(s)) {
            return Err(Error::config(format!("subject {s} is not in the dataset")));
        }
    }
    let cells: Vec<Cell> = match cfg.protocol {
        SplitKind::Intra => ds
            .subjects()
            .into_iter()
            .filter(|&s| wanted(s))
            .map(|subject| Cell { subject, session: None })
            .collect(),
        SplitKind::Inter => {
            let sessions = cfg.sessions.clone().unwrap_or_else(|| ds.all_sessions());
            let mut out = Vec::new();
            for session in sessions {
                for subject in ds.subjects() {
                    if wanted(subject) && ds.sessions_of(subject).contains(&session) {
                        out.push(Cell {
                            subject,
                            session: Some(session),
                        });
                    }
                }
            }
            out
        }
    };
    if cells.is_empty() {
        return Err(Error::config("the protocol selects no cells"));
    }
    Ok(cells)
}

pub fn cell_split(cfg: &ExperimentConfig, ds: &DatasetIndex, cell: Cell) -> Result<SplitSpec> {
    let split = match (cfg.protocol, cell.session) {
        (SplitKind::Intra, None) => make_intra_split(ds, cell.subject)?,
        (SplitKind::Inter, Some(session)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cell.seed(cfg.seed) ^ SPLIT_SALT);
            make_inter_split(ds, session, cell.subject, &mut rng)?
        }
        _ => return Err(Error::Protocol(format!("{cell} does not fit the {:?} protocol", cfg.protocol))),
    };
    split.check_disjoint()?;
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub cell: Cell,
    pub split: SplitSpec,
    pub fsl: TrainOutcome,
    pub supervised: Option<TrainOutcome>,
}

/// Meta-trains the few-shot model (and the supervised baseline when enabled) for one cell.
pub fn train_cell(cfg: &ExperimentConfig, ds: &DatasetIndex, cell: Cell) -> Result<TrainedCell> {
    let run = || -> Result<TrainedCell> {
        let split = cell_split(cfg, ds, cell)?;
        let train = split.select(ds, Role::Train);
        let val = split.select(ds, Role::Val);
        let backbone = cfg.backbone_config(ds)?;
        let seed = cell.seed(cfg.seed);
        let tc = TrainConfig {
            rng_seed: seed,
            ..cfg.train.clone()
        };
        let fsl = meta_train(&train, &val, &backbone, &tc)?;
        let supervised = if cfg.supervised {
            let sc = TrainConfig {
                rng_seed: seed ^ SUPERVISED_SALT,
                ..tc
            };
            Some(train_supervised_baseline(&train, &val, &backbone, &sc)?)
        } else {
            None
        };
        Ok(TrainedCell {
            cell,
            split,
            fsl,
            supervised,
        })
    };
    run().map_err(|e| e.context(cell.to_string()))
}

/// Few-shot rows for every shot count: plain FSL, then FSL+EvoFA on the same
/// episodes when `adapt` is set.
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    ds: &DatasetIndex,
    cell: Cell,
    model: &Model,
    shots: &[usize],
    adapt: bool,
) -> Result<Vec<ResultRow>> {
    let run = || -> Result<Vec<ResultRow>> {
        if shots.is_empty() {
            return Err(Error::config("shots list is empty"));
        }
        let split = cell_split(cfg, ds, cell)?;
        let test = split.select(ds, Role::Test);
        let train = split.select(ds, Role::Train);
        let seed = cell.seed(cfg.seed) ^ EVAL_SALT;
        let mut rows = Vec::new();
        for &shot in shots {
            let ec = cfg.eval.eval_config(shot, seed);
            let methods: &[Method] = if adapt { &[Method::Fsl, Method::FslEvofa] } else { &[Method::Fsl] };
            for &method in methods {
                let t0 = Instant::now();
                let adapt_cfg = (method == Method::FslEvofa).then_some(&cfg.adapt);
                let summary = evofa_test(model, &test, &train, cfg.protocol, &ec, adapt_cfg)?;
                rows.push(ResultRow {
                    protocol: cfg.protocol,
                    subject: cell.subject,
                    session: cell.session,
                    method,
                    shots: shot,
                    mean_accuracy: summary.mean,
                    std: summary.std,
                    episodes: summary.episodes(),
                    episode_digest: digest_hex(&summary.digests),
                    wall_clock_secs: t0.elapsed().as_secs_f64(),
                });
            }
        }
        Ok(rows)
    };
    run().map_err(|e| e.context(cell.to_string()))
}

/// Whole-test-set accuracy of a supervised model.
pub fn supervised_row(cfg: &ExperimentConfig, ds: &DatasetIndex, cell: Cell, model: &Model) -> Result<ResultRow> {
    let t0 = Instant::now();
    let split = cell_split(cfg, ds, cell).map_err(|e| e.context(cell.to_string()))?;
    let test = split.select(ds, Role::Test);
    let acc = supervised_accuracy(model, &test).map_err(|e| e.context(cell.to_string()))?;
    Ok(ResultRow {
        protocol: cfg.protocol,
        subject: cell.subject,
        session: cell.session,
        method: Method::Supervised,
        shots: 0,
        mean_accuracy: acc,
        std: 0.0,
        episodes: test.len(),
        episode_digest: String::new(),
        wall_clock_secs: t0.elapsed().as_secs_f64(),
    })
}

/// Evaluates one model at each shot count; every point uses `cfg.eval.episodes` episodes.
pub fn shot_sweep(
    cfg: &ExperimentConfig,
    ds: &DatasetIndex,
    cell: Cell,
    model: &Model,
    shots: &[usize],
    adapt: bool,
) -> Result<ResultTable> {
    Ok(ResultTable::new(evaluate_cell(cfg, ds, cell, model, shots, adapt)?))
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub table: ResultTable,
    pub cells: Vec<TrainedCell>,
}

/// Trains and evaluates every cell of the configured protocol at each of
/// `cfg.shots`, cells in parallel.
pub fn run_protocol(cfg: &ExperimentConfig, ds: &DatasetIndex) -> Result<ProtocolRun> {
    cfg.validate_for(ds)?;
    let cells = protocol_cells(cfg, ds)?;
    let outcomes: Vec<(TrainedCell, Vec<ResultRow>)> = cells
        .par_iter()
        .map(|&cell| {
            let trained = train_cell(cfg, ds, cell)?;
            let mut rows = evaluate_cell(cfg, ds, cell, &trained.fsl.model, &cfg.shots, true)?;
            if let Some(sup) = &trained.supervised {
                rows.push(supervised_row(cfg, ds, cell, &sup.model)?);
            }
            Ok((trained, rows))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut trained = Vec::new();
    for (t, r) in outcomes {
        trained.push(t);
        rows.extend(r);
    }
    let table = ResultTable::new(rows);
    table.validate()?;
    Ok(ProtocolRun { table, cells: trained })
}

/// Checkpoint metadata identifying the cell a model was trained for.
pub fn checkpoint_meta(cfg: &ExperimentConfig, cell: Cell, outcome: &TrainOutcome, method: Method) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("protocol".to_string(), json!(cfg.protocol)),
        ("subject".to_string(), json!(cell.subject)),
        ("session".to_string(), json!(cell.session)),
        ("seed".to_string(), json!(cfg.seed)),
        ("method".to_string(), json!(method)),
        ("best_epoch".to_string(), json!(outcome.best_epoch)),
        ("best_val_accuracy".to_string(), json!(outcome.best_val_accuracy)),
    ])
}

/// Reads the cell and method back from checkpoint metadata.
pub fn cell_from_meta(meta: &BTreeMap<String, serde_json::Value>) -> Result<(Cell, Method)> {
    let subject = meta
        .get("subject")
        .and_then(|v| v.as_u64())
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| Error::config("checkpoint metadata lacks a subject"))?;
    let session = match meta.get("session") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| Error::config("checkpoint session is not an integer"))?,
        ),
    };
    let method = match meta.get("method") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Method::Fsl,
    };
    Ok((Cell { subject, session }, method))
}

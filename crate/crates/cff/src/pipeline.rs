//! Layer-pipelined one-forward contrastive training.
//!
//! Stage `l` owns layer `l` and its optimizer. It consumes detached
//! activations from stage `l − 1` over a bounded channel, performs the same
//! local update as the sequential trainer, and forwards its own detached
//! output. With `W < L` workers, stage `s` runs on worker `s mod W`; a worker
//! multiplexes its stages with a select over their channels, so no stage
//! waits on a sibling sharing its thread.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;

use cff_core::models::LayerParams;
use cff_core::optim::AdamW;
use cff_core::training::{cff_layer_step, CffBatchConfig};
use cff_core::Tensor;
use crossbeam_channel::{bounded, Receiver, Select, Sender};

/// Capacity of every inter-stage channel.
pub const CHANNEL_CAPACITY: usize = 2;

/// What flows from one stage to the next.
#[derive(Clone, Debug)]
pub struct StageMessage {
    pub batch_id: u64,
    /// Detached activations; no gradient linkage survives the channel.
    pub activations: Arc<Tensor<f32>>,
    pub labels: Arc<Vec<usize>>,
    pub end_of_epoch: bool,
    /// Earliest logical step at which the receiver may process it.
    pub ready_step: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageStats {
    pub busy: u64,
    pub idle: u64,
}

/// Step accounting of one pipelined epoch. A step is one time slot in which
/// every stage may perform one local update; stage `l` can update on batch
/// `b` once stage `l − 1` has and once it has finished batch `b − 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineStats {
    pub steps: u64,
    pub batches: u64,
    pub layers: usize,
    pub workers: usize,
    pub stages: Vec<StageStats>,
    pub wall_seconds: f64,
}

/// `(T_pipeline, T_sequential)` in steps for `L` layers and `N` batches.
pub fn step_count_model(layers: u64, batches: u64) -> (u64, u64) {
    assert!(layers >= 1 && batches >= 1, "step count model needs L >= 1 and N >= 1");
    (layers + batches - 1, layers * batches)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} failed on batch {batch}: {msg}")]
    StageFailed { stage: usize, batch: u64, msg: String },
    #[error("stage {stage}: {msg}")]
    Protocol { stage: usize, msg: String },
    #[error("invalid pipeline setup: {0}")]
    Setup(String),
}

/// One layer with its optimizer, moved into a stage for the epoch.
pub type StageState = (LayerParams<f32>, AdamW<f32>);

struct Stage {
    index: usize,
    state: StageState,
    input: Receiver<StageMessage>,
    output: Option<Sender<StageMessage>>,
    pending: Option<StageMessage>,
    last_step: Option<u64>,
    next_batch: u64,
    busy: u64,
    done: bool,
}

impl Stage {
    fn process(&mut self, msg: StageMessage, cfg: &CffBatchConfig) -> Result<(), PipelineError> {
        if msg.end_of_epoch {
            self.pending = Some(msg);
            return Ok(());
        }
        if msg.batch_id != self.next_batch {
            return Err(PipelineError::Protocol {
                stage: self.index,
                msg: format!("expected batch {}, received {}", self.next_batch, msg.batch_id),
            });
        }
        let step = self.last_step.map_or(msg.ready_step, |s| msg.ready_step.max(s + 1));
        let margin = cfg.margins.as_ref().map(|m| m[self.index]);
        let (layer, opt) = &mut self.state;
        let result = catch_unwind(AssertUnwindSafe(|| {
            cff_layer_step(layer, opt, &msg.activations, &msg.labels, cfg.tau, margin, cfg.normalize_between)
        }));
        let out = match result {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                return Err(PipelineError::StageFailed {
                    stage: self.index,
                    batch: msg.batch_id,
                    msg: e.to_string(),
                })
            }
            Err(panic) => {
                let msg_text = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into());
                return Err(PipelineError::StageFailed {
                    stage: self.index,
                    batch: msg.batch_id,
                    msg: format!("panicked: {msg_text}"),
                });
            }
        };
        self.last_step = Some(step);
        self.busy += 1;
        self.next_batch += 1;
        if self.output.is_some() {
            self.pending = Some(StageMessage {
                batch_id: msg.batch_id,
                activations: Arc::new(out.next),
                labels: msg.labels,
                end_of_epoch: false,
                ready_step: step + 1,
            });
        }
        Ok(())
    }
}

struct WorkerResult {
    stages: Vec<(usize, StageState, u64, Option<u64>)>,
}

fn run_worker(mut stages: Vec<Stage>, cfg: &CffBatchConfig) -> Result<WorkerResult, PipelineError> {
    enum Op {
        Send(Sender<StageMessage>),
        Recv(Receiver<StageMessage>),
    }
    while stages.iter().any(|s| !s.done) {
        // A stage with a pending output waits to send it; every other live
        // stage waits for input.
        let ops: Vec<(usize, Op)> = stages
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.done)
            .map(|(i, s)| match (&s.pending, &s.output) {
                (Some(_), Some(tx)) => (i, Op::Send(tx.clone())),
                _ => (i, Op::Recv(s.input.clone())),
            })
            .collect();
        let mut sel = Select::new();
        for (_, op) in &ops {
            match op {
                Op::Send(tx) => sel.send(tx),
                Op::Recv(rx) => sel.recv(rx),
            };
        }
        let oper = sel.select();
        let (i, op) = &ops[oper.index()];
        let stage = &mut stages[*i];
        match op {
            Op::Send(tx) => {
                let msg = stage.pending.take().expect("send selected with a pending message");
                let end = msg.end_of_epoch;
                oper.send(tx, msg).map_err(|_| PipelineError::Protocol {
                    stage: stage.index,
                    msg: "downstream stage disconnected".into(),
                })?;
                if end {
                    stage.done = true;
                }
            }
            Op::Recv(rx) => {
                let msg = oper.recv(rx).map_err(|_| PipelineError::Protocol {
                    stage: stage.index,
                    msg: "upstream stage disconnected".into(),
                })?;
                let end = msg.end_of_epoch;
                stage.process(msg, cfg)?;
                // The last stage has nobody to forward to.
                if stage.output.is_none() {
                    stage.pending = None;
                    if end {
                        stage.done = true;
                    }
                }
            }
        }
    }
    Ok(WorkerResult {
        stages: stages
            .into_iter()
            .map(|s| (s.index, s.state, s.busy, s.last_step))
            .collect(),
    })
}

/// Runs one epoch of pre-materialized first-layer inputs through the layer
/// pipeline. Returns the updated layers and the step accounting.
pub fn run_pipeline_epoch(
    layers: Vec<StageState>,
    batches: Vec<(Tensor<f32>, Vec<usize>)>,
    cfg: &CffBatchConfig,
    workers: usize,
) -> Result<(Vec<StageState>, PipelineStats), PipelineError> {
    let l = layers.len();
    if l == 0 {
        return Err(PipelineError::Setup("no layers".into()));
    }
    if cfg.margins.as_ref().is_some_and(|m| m.len() != l) {
        return Err(PipelineError::Setup("one margin per layer required".into()));
    }
    let workers = workers.clamp(1, l);
    let start = std::time::Instant::now();
    let n = batches.len() as u64;

    let mut senders = Vec::with_capacity(l + 1);
    let mut receivers = Vec::with_capacity(l + 1);
    for _ in 0..l {
        let (tx, rx) = bounded::<StageMessage>(CHANNEL_CAPACITY);
        senders.push(tx);
        receivers.push(rx);
    }
    let feeder = senders[0].clone();
    let mut per_worker: Vec<Vec<Stage>> = (0..workers).map(|_| Vec::new()).collect();
    for (idx, (state, input)) in layers.into_iter().zip(receivers).enumerate() {
        per_worker[idx % workers].push(Stage {
            index: idx,
            state,
            input,
            output: senders.get(idx + 1).cloned(),
            pending: None,
            last_step: None,
            next_batch: 0,
            busy: 0,
            done: false,
        });
    }
    drop(senders);

    let results = thread::scope(|scope| {
        let handles: Vec<_> = per_worker
            .into_iter()
            .map(|stages| scope.spawn(move || run_worker(stages, cfg)))
            .collect();
        let mut feed_error = None;
        for (b, (x, labels)) in batches.into_iter().enumerate() {
            let msg = StageMessage {
                batch_id: b as u64,
                activations: Arc::new(x),
                labels: Arc::new(labels),
                end_of_epoch: false,
                ready_step: 0,
            };
            if feeder.send(msg).is_err() {
                feed_error = Some(b as u64);
                break;
            }
        }
        if feed_error.is_none() {
            let _ = feeder.send(StageMessage {
                batch_id: n,
                activations: Arc::new(Tensor::zeros(&[0])),
                labels: Arc::new(Vec::new()),
                end_of_epoch: true,
                ready_step: 0,
            });
        }
        drop(feeder);
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(PipelineError::Protocol {
                        stage: usize::MAX,
                        msg: "worker thread panicked".into(),
                    })
                })
            })
            .collect::<Vec<_>>()
    });

    // Report the root cause rather than the disconnections it triggered.
    let mut first_protocol = None;
    let mut collected = Vec::new();
    for r in results {
        match r {
            Ok(w) => collected.extend(w.stages),
            Err(e @ PipelineError::StageFailed { .. }) => return Err(e),
            Err(e) => {
                first_protocol.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_protocol {
        return Err(e);
    }
    collected.sort_by_key(|s| s.0);
    let steps = collected.iter().filter_map(|s| s.3).max().map_or(0, |s| s + 1);
    let stats = PipelineStats {
        steps,
        batches: n,
        layers: l,
        workers,
        stages: collected
            .iter()
            .map(|s| StageStats {
                busy: s.2,
                idle: steps - s.2,
            })
            .collect(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((collected.into_iter().map(|s| s.1).collect(), stats))
}

fn same_bits(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Path of the first parameter or optimizer moment whose bytes differ,
/// layers numbered from 1.
pub fn first_difference(a: &[StageState], b: &[StageState]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("layer count {} vs {}", a.len(), b.len()));
    }
    for (l, ((la, oa), (lb, ob))) in a.iter().zip(b).enumerate() {
        let prefix = format!("layer{}", l + 1);
        let (ma, va) = oa.moments();
        let (mb, vb) = ob.moments();
        for (i, (path, name)) in la.paths(&prefix).into_iter().zip(la.names()).enumerate() {
            if !same_bits(&la.tensors()[i], &lb.tensors()[i]) {
                return Some(path);
            }
            if !same_bits(&ma[i], &mb[i]) {
                return Some(format!("{prefix}.adam_m.{name}"));
            }
            if !same_bits(&va[i], &vb[i]) {
                return Some(format!("{prefix}.adam_v.{name}"));
            }
        }
        if oa.steps() != ob.steps() {
            return Some(format!("{prefix}.adam_steps"));
        }
    }
    None
}

//! Chain-edge client. Owns the front sub-model, drives rounds in lockstep:
//! forward the local layers, ship the activation, wait for the gradient
//! (training) or the logits (inference), then begin the next round.

use log::warn;

use crate::netsim::{Action, App, ComputeKind, ConnId, MsgKind};
use crate::nn::{lr_schedule, Dataset, SubModel, Tensor, TrainConfig};
use crate::nsf::frame::{FrameKind, MessageFrame, ReassemblyBuffer};
use crate::nsf::RunMode;
use crate::srv6::Sid;

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub server_addr: Sid,
    pub server_port: u16,
    pub mode: RunMode,
    /// Stop after this many completed rounds; 0 means no count limit.
    pub rounds: u32,
    /// Do not begin another round at or after this simulation time.
    pub stop_at_ns: Option<u64>,
    pub round_timeout_ns: u64,
    pub train: TrainConfig,
    pub shuffle_seed: u64,
}

#[derive(Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    FwdCompute,
    WaitReply,
    BwdCompute,
    Done,
}

pub struct ClientApp {
    cfg: ClientConfig,
    front: SubModel<f32>,
    dataset: Dataset<f32>,
    conn: Option<ConnId>,
    rx: ReassemblyBuffer,
    phase: Phase,
    round: u32,
    completed: u32,
    epoch: u32,
    order: Vec<usize>,
    order_epoch: u32,
    batch_x: Option<Tensor<f32>>,
    batch_labels: Vec<u32>,
    grad: Option<Tensor<f32>>,
    results: Vec<(u32, Tensor<f32>)>,
}

impl ClientApp {
    pub fn new(cfg: ClientConfig, front: SubModel<f32>, dataset: Dataset<f32>) -> ClientApp {
        assert_eq!(front.in_dim(), dataset.dim(), "dataset width vs front sub-model");
        ClientApp {
            cfg,
            front,
            dataset,
            conn: None,
            rx: ReassemblyBuffer::new(),
            phase: Phase::Idle,
            round: 0,
            completed: 0,
            epoch: 1,
            order: Vec::new(),
            order_epoch: 0,
            batch_x: None,
            batch_labels: Vec::new(),
            grad: None,
            results: Vec::new(),
        }
    }

    pub fn completed_rounds(&self) -> u32 {
        self.completed
    }

    pub fn front(&self) -> &SubModel<f32> {
        &self.front
    }

    /// Logits received per inference round, in arrival order.
    pub fn results(&self) -> &[(u32, Tensor<f32>)] {
        &self.results
    }

    fn batch_for_round(&mut self) -> (Tensor<f32>, Vec<u32>) {
        let n = self.dataset.len();
        let b = self.cfg.train.batch_size;
        match self.cfg.mode {
            RunMode::Train => {
                // Whole batches per epoch, remainder dropped.
                let per_epoch = (n / b).max(1) as u32;
                let epoch = (self.round - 1) / per_epoch + 1;
                if epoch != self.order_epoch {
                    self.order = self.dataset.shuffled_indices(self.cfg.shuffle_seed, epoch);
                    self.order_epoch = epoch;
                }
                self.epoch = epoch;
                let start = ((self.round - 1) % per_epoch) as usize * b;
                let idx: Vec<usize> = (0..b).map(|i| self.order[(start + i) % n]).collect();
                self.dataset.gather(&idx)
            }
            RunMode::Infer => {
                self.epoch = 1;
                let start = (self.round as usize - 1) * b;
                let idx: Vec<usize> = (0..b).map(|i| (start + i) % n).collect();
                self.dataset.gather(&idx)
            }
        }
    }

    fn start_round(&mut self) -> Vec<Action> {
        self.round += 1;
        let (x, labels) = self.batch_for_round();
        let flops = self.front.forward_flops(x.rows());
        self.batch_x = Some(x);
        self.batch_labels = labels;
        self.phase = Phase::FwdCompute;
        vec![Action::Compute {
            flops,
            token: u64::from(self.round),
            round: self.round,
            epoch: self.epoch,
            kind: ComputeKind::Forward,
        }]
    }

    fn finish_round(&mut self, now: u64) -> Vec<Action> {
        self.completed = self.round;
        let count_done = self.cfg.rounds > 0 && self.completed >= self.cfg.rounds;
        let time_done = self.cfg.stop_at_ns.is_some_and(|t| now >= t);
        if count_done || time_done {
            self.phase = Phase::Done;
            vec![Action::Finished]
        } else {
            self.start_round()
        }
    }
}

impl App for ClientApp {
    fn on_start(&mut self, _now: u64) -> Vec<Action> {
        vec![Action::Open {
            dst: (self.cfg.server_addr, self.cfg.server_port),
            rekey_from: None,
        }]
    }

    fn on_connected(&mut self, _now: u64, conn: ConnId) -> Vec<Action> {
        self.conn = Some(conn);
        self.start_round()
    }

    fn on_bytes(&mut self, now: u64, conn: ConnId, bytes: &[u8], arrived_ns: u64) -> Vec<Action> {
        if self.conn != Some(conn) {
            warn!("client: bytes on unknown conn {conn:?}");
            return Vec::new();
        }
        self.rx.push(bytes, arrived_ns);
        let mut actions = Vec::new();
        loop {
            let (frame, first_ns, last_ns) = match self.rx.pop_frame() {
                Ok(Some(hit)) => hit,
                Ok(None) => break,
                Err(e) => {
                    warn!("client: bad frame: {e}");
                    actions.push(Action::Abort {
                        reason: format!("client frame decode: {e}"),
                    });
                    return actions;
                }
            };
            actions.push(Action::FrameDelivered {
                conn,
                round: frame.round,
                epoch: frame.epoch,
                kind: frame.kind.msg_kind(),
                bytes: frame.encoded_len(),
                first_byte_ns: first_ns,
                last_byte_ns: last_ns,
            });
            if self.phase != Phase::WaitReply || frame.round != self.round {
                warn!(
                    "client: unexpected {:?} for round {} in phase {:?}",
                    frame.kind, frame.round, self.phase
                );
                continue;
            }
            match (frame.kind, self.cfg.mode) {
                (FrameKind::Grad, RunMode::Train) => {
                    match frame.tensor() {
                        Ok(dy) => self.grad = Some(dy),
                        Err(e) => {
                            actions.push(Action::Abort {
                                reason: format!("client gradient shape: {e}"),
                            });
                            return actions;
                        }
                    }
                    self.phase = Phase::BwdCompute;
                    actions.push(Action::Compute {
                        flops: self.front.backward_flops(frame.batch()),
                        token: u64::from(self.round),
                        round: self.round,
                        epoch: self.epoch,
                        kind: ComputeKind::Backward,
                    });
                }
                (FrameKind::Result, RunMode::Infer) => {
                    if let Ok(t) = frame.tensor() {
                        self.results.push((frame.round, t));
                    }
                    actions.extend(self.finish_round(now));
                }
                (FrameKind::Result, RunMode::Train) => {
                    warn!(
                        "client: round {} answered with logits instead of gradients; \
                         no update applied",
                        frame.round
                    );
                    if let Ok(t) = frame.tensor() {
                        self.results.push((frame.round, t));
                    }
                    actions.extend(self.finish_round(now));
                }
                (kind, mode) => {
                    warn!("client: ignoring {kind:?} frame in {mode:?} mode");
                }
            }
        }
        actions
    }

    fn on_compute_done(&mut self, now: u64, _token: u64) -> Vec<Action> {
        match self.phase {
            Phase::FwdCompute => {
                let x = self.batch_x.take().expect("batch staged");
                let act = match self.cfg.mode {
                    RunMode::Train => self.front.forward(&x),
                    RunMode::Infer => self.front.forward_inference(&x),
                };
                let act = match act {
                    Ok(a) => a,
                    Err(e) => {
                        return vec![Action::Abort {
                            reason: format!("client forward: {e}"),
                        }]
                    }
                };
                let labels = match self.cfg.mode {
                    RunMode::Train => self.batch_labels.clone(),
                    RunMode::Infer => Vec::new(),
                };
                let frame =
                    MessageFrame::new(FrameKind::Act, self.round, self.epoch, &act, labels);
                self.phase = Phase::WaitReply;
                vec![
                    Action::SendFrame {
                        conn: self.conn.expect("connected"),
                        bytes: frame.encode(),
                        round: self.round,
                        epoch: self.epoch,
                        kind: MsgKind::Act,
                    },
                    Action::Timer {
                        delay_ns: self.cfg.round_timeout_ns,
                        token: u64::from(self.round),
                    },
                ]
            }
            Phase::BwdCompute => {
                let dy = self.grad.take().expect("gradient staged");
                let lr = lr_schedule(&self.cfg.train, self.epoch);
                self.front.backward_and_update(
                    &dy,
                    lr,
                    self.cfg.train.momentum,
                    self.cfg.train.weight_decay,
                );
                self.finish_round(now)
            }
            _ => {
                warn!("client: compute finished in phase {:?}", self.phase);
                Vec::new()
            }
        }
    }

    fn on_timer(&mut self, _now: u64, token: u64) -> Vec<Action> {
        if token == u64::from(self.round) && self.phase == Phase::WaitReply {
            return vec![Action::Abort {
                reason: format!("round {} reply timed out", self.round),
            }];
        }
        Vec::new()
    }

    fn as_any(&mut self) -> Option<&mut dyn std::any::Any> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{split_model, BlobSpec, GlobalModel};

    fn small_parts() -> (SubModel<f32>, Dataset<f32>) {
        let model = GlobalModel::new(&[6, 5, 4, 3], 11);
        let parts = split_model(&model, &[1]).unwrap();
        let data = Dataset::blobs(&BlobSpec {
            samples: 10,
            dim: 6,
            classes: 3,
            center_scale: 2.0,
            noise: 0.3,
            seed: 5,
        });
        (parts[0].clone(), data)
    }

    fn cfg(mode: RunMode, rounds: u32, batch: usize) -> ClientConfig {
        ClientConfig {
            server_addr: "fd00::8".parse().unwrap(),
            server_port: 9000,
            mode,
            rounds,
            stop_at_ns: None,
            round_timeout_ns: 1_000_000_000,
            train: TrainConfig {
                batch_size: batch,
                ..TrainConfig::default()
            },
            shuffle_seed: 3,
        }
    }

    #[test]
    fn round_flow_emits_act_then_waits() {
        let (front, data) = small_parts();
        let mut app = ClientApp::new(cfg(RunMode::Infer, 2, 4), front, data);
        let open = app.on_start(0);
        assert!(matches!(open[0], Action::Open { rekey_from: None, .. }));

        let acts = app.on_connected(0, ConnId(1));
        assert!(matches!(
            acts[0],
            Action::Compute {
                kind: ComputeKind::Forward,
                round: 1,
                ..
            }
        ));

        let sent = app.on_compute_done(10, 1);
        let Action::SendFrame { bytes, kind, .. } = &sent[0] else {
            panic!("expected a frame send");
        };
        assert_eq!(*kind, MsgKind::Act);
        let frame = MessageFrame::decode(bytes).unwrap();
        assert_eq!(frame.kind, FrameKind::Act);
        assert_eq!(frame.dims, vec![4, 5]);
        assert!(frame.labels.is_empty());
        assert!(matches!(sent[1], Action::Timer { token: 1, .. }));
    }

    #[test]
    fn training_epoch_advances_and_reshuffles() {
        let (front, data) = small_parts();
        // 10 samples, batch 5: two rounds per epoch.
        let mut app = ClientApp::new(cfg(RunMode::Train, 0, 5), front, data);
        app.round = 1;
        let (x1, _) = app.batch_for_round();
        assert_eq!(app.epoch, 1);
        app.round = 2;
        let _ = app.batch_for_round();
        assert_eq!(app.epoch, 1);
        app.round = 3;
        let (x3, _) = app.batch_for_round();
        assert_eq!(app.epoch, 2);
        assert_eq!(x1.shape(), &[5, 6]);
        assert_eq!(x3.shape(), &[5, 6]);
    }

    #[test]
    fn stale_timer_is_ignored_and_live_timer_aborts() {
        let (front, data) = small_parts();
        let mut app = ClientApp::new(cfg(RunMode::Infer, 3, 2), front, data);
        app.on_connected(0, ConnId(1));
        app.on_compute_done(10, 1);
        assert_eq!(app.phase, Phase::WaitReply);

        assert!(app.on_timer(50, 0).is_empty());
        let fired = app.on_timer(60, 1);
        assert!(matches!(fired[0], Action::Abort { .. }));
    }

    #[test]
    fn result_during_training_skips_update_and_moves_on() {
        let (front, data) = small_parts();
        let mut app = ClientApp::new(cfg(RunMode::Train, 2, 4), front, data);
        app.on_connected(0, ConnId(1));
        app.on_compute_done(10, 1);

        let logits = Tensor::from_vec(&[4, 3], vec![0.0f32; 12]).unwrap();
        let reply = MessageFrame::new(FrameKind::Result, 1, 1, &logits, Vec::new());
        let actions = app.on_bytes(20, ConnId(1), &reply.encode(), 20);
        assert!(matches!(actions[0], Action::FrameDelivered { .. }));
        // Round 2 starts immediately: the reply ended round 1 without a
        // backward pass.
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Compute { round: 2, .. })));
        assert_eq!(app.completed_rounds(), 1);
    }
}

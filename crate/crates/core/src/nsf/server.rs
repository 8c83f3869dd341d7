//! Chain tail. Runs the last sub-model; in training it also owns the loss
//! and answers with the gradient at its input, in inference it answers
//! with the logits.

use std::collections::{BTreeMap, VecDeque};

use log::warn;

use crate::netsim::{Action, App, ComputeKind, ConnId, MsgKind};
use crate::nn::{loss_and_grad, lr_schedule, SubModel, Tensor, TrainConfig};
use crate::nsf::frame::{FrameKind, MessageFrame, ReassemblyBuffer};
use crate::nsf::RunMode;
use crate::srv6::Sid;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub mode: RunMode,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Work {
    Fwd,
    Bwd,
}

struct Inflight {
    work: Work,
    conn: ConnId,
    round: u32,
    epoch: u32,
    labels: Vec<u32>,
    tensor: Tensor<f32>,
}

pub struct ServerApp {
    cfg: ServerConfig,
    tail: SubModel<f32>,
    conns: BTreeMap<ConnId, ReassemblyBuffer>,
    pending: VecDeque<(ConnId, MessageFrame)>,
    inflight: Option<Inflight>,
}

impl ServerApp {
    pub fn new(cfg: ServerConfig, tail: SubModel<f32>) -> ServerApp {
        ServerApp {
            cfg,
            tail,
            conns: BTreeMap::new(),
            pending: VecDeque::new(),
            inflight: None,
        }
    }

    pub fn tail(&self) -> &SubModel<f32> {
        &self.tail
    }

    fn zero_result(&self, conn: ConnId, round: u32, epoch: u32, batch: usize) -> Action {
        let zeros = Tensor::zeros(&[batch, self.tail.out_dim()]);
        let frame = MessageFrame::new(FrameKind::Result, round, epoch, &zeros, Vec::new());
        Action::SendFrame {
            conn,
            bytes: frame.encode(),
            round,
            epoch,
            kind: MsgKind::Result,
        }
    }

    fn maybe_start(&mut self, actions: &mut Vec<Action>) {
        if self.inflight.is_some() {
            return;
        }
        let Some((conn, frame)) = self.pending.pop_front() else {
            return;
        };
        let tensor = match frame.tensor() {
            Ok(t) => t,
            Err(e) => {
                actions.push(Action::Abort {
                    reason: format!("server activation shape: {e}"),
                });
                return;
            }
        };
        actions.push(Action::Compute {
            flops: self.tail.forward_flops(tensor.rows()),
            token: u64::from(frame.round),
            round: frame.round,
            epoch: frame.epoch,
            kind: ComputeKind::Forward,
        });
        self.inflight = Some(Inflight {
            work: Work::Fwd,
            conn,
            round: frame.round,
            epoch: frame.epoch,
            labels: frame.labels,
            tensor,
        });
    }

    fn accept_frame(&mut self, conn: ConnId, frame: MessageFrame, actions: &mut Vec<Action>) {
        if frame.kind != FrameKind::Act {
            warn!("server: unexpected {:?} frame", frame.kind);
            return;
        }
        let batch = frame.batch();
        if frame.dims.len() != 2 || frame.width() != self.tail.in_dim() {
            warn!(
                "server: activation width {} does not fit the local model \
                 (expects {}); answering with zero logits",
                frame.width(),
                self.tail.in_dim()
            );
            actions.push(self.zero_result(conn, frame.round, frame.epoch, batch));
            return;
        }
        if self.cfg.mode == RunMode::Train && frame.labels.len() != batch {
            warn!(
                "server: {} labels for a batch of {batch}; cannot train, \
                 answering with zero logits",
                frame.labels.len()
            );
            actions.push(self.zero_result(conn, frame.round, frame.epoch, batch));
            return;
        }
        self.pending.push_back((conn, frame));
        self.maybe_start(actions);
    }
}

impl App for ServerApp {
    fn on_accepted(
        &mut self,
        _now: u64,
        conn: ConnId,
        _local: (Sid, u16),
        _peer: (Sid, u16),
    ) -> Vec<Action> {
        self.conns.insert(conn, ReassemblyBuffer::new());
        Vec::new()
    }

    fn on_bytes(&mut self, _now: u64, conn: ConnId, bytes: &[u8], arrived_ns: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        let Some(rx) = self.conns.get_mut(&conn) else {
            warn!("server: bytes on unknown conn {conn:?}");
            return actions;
        };
        rx.push(bytes, arrived_ns);
        loop {
            let rx = self.conns.get_mut(&conn).expect("buffer exists");
            let (frame, first_ns, last_ns) = match rx.pop_frame() {
                Ok(Some(hit)) => hit,
                Ok(None) => break,
                Err(e) => {
                    warn!("server: bad frame: {e}");
                    actions.push(Action::Abort {
                        reason: format!("server frame decode: {e}"),
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
            self.accept_frame(conn, frame, &mut actions);
        }
        actions
    }

    fn on_compute_done(&mut self, _now: u64, _token: u64) -> Vec<Action> {
        let Some(job) = self.inflight.take() else {
            warn!("server: compute finished with nothing in flight");
            return Vec::new();
        };
        let mut actions = Vec::new();
        match job.work {
            Work::Fwd => match self.cfg.mode {
                RunMode::Infer => {
                    let logits = match self.tail.forward_inference(&job.tensor) {
                        Ok(l) => l,
                        Err(e) => {
                            return vec![Action::Abort {
                                reason: format!("server forward: {e}"),
                            }]
                        }
                    };
                    let frame =
                        MessageFrame::new(FrameKind::Result, job.round, job.epoch, &logits, Vec::new());
                    actions.push(Action::SendFrame {
                        conn: job.conn,
                        bytes: frame.encode(),
                        round: job.round,
                        epoch: job.epoch,
                        kind: MsgKind::Result,
                    });
                }
                RunMode::Train => {
                    let logits = match self.tail.forward(&job.tensor) {
                        Ok(l) => l,
                        Err(e) => {
                            return vec![Action::Abort {
                                reason: format!("server forward: {e}"),
                            }]
                        }
                    };
                    let (loss, dlogits) = match loss_and_grad(&logits, &job.labels) {
                        Ok(pair) => pair,
                        Err(e) => {
                            return vec![Action::Abort {
                                reason: format!("server loss: {e}"),
                            }]
                        }
                    };
                    if !loss.is_finite() {
                        return vec![Action::Abort {
                            reason: format!("training diverged: loss {loss} in round {}", job.round),
                        }];
                    }
                    let correct = (0..logits.rows())
                        .filter(|&r| {
                            let row = logits.row(r);
                            let mut best = 0;
                            for (c, &v) in row.iter().enumerate() {
                                if v > row[best] {
                                    best = c;
                                }
                            }
                            best as u32 == job.labels[r]
                        })
                        .count();
                    actions.push(Action::Metric {
                        name: "loss".into(),
                        round: job.round,
                        epoch: job.epoch,
                        value: f64::from(loss),
                    });
                    actions.push(Action::Metric {
                        name: "accuracy".into(),
                        round: job.round,
                        epoch: job.epoch,
                        value: correct as f64 / logits.rows() as f64,
                    });
                    actions.push(Action::Compute {
                        flops: self.tail.backward_flops(job.tensor.rows()),
                        token: u64::from(job.round),
                        round: job.round,
                        epoch: job.epoch,
                        kind: ComputeKind::Backward,
                    });
                    self.inflight = Some(Inflight {
                        work: Work::Bwd,
                        conn: job.conn,
                        round: job.round,
                        epoch: job.epoch,
                        labels: Vec::new(),
                        tensor: dlogits,
                    });
                }
            },
            Work::Bwd => {
                let lr = lr_schedule(&self.cfg.train, job.epoch);
                let dx = self.tail.backward_and_update(
                    &job.tensor,
                    lr,
                    self.cfg.train.momentum,
                    self.cfg.train.weight_decay,
                );
                let frame = MessageFrame::new(FrameKind::Grad, job.round, job.epoch, &dx, Vec::new());
                actions.push(Action::SendFrame {
                    conn: job.conn,
                    bytes: frame.encode(),
                    round: job.round,
                    epoch: job.epoch,
                    kind: MsgKind::Grad,
                });
            }
        }
        self.maybe_start(&mut actions);
        actions
    }

    fn as_any(&mut self) -> Option<&mut dyn std::any::Any> {
        Some(self)
    }
}

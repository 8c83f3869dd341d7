//! Mid-chain neural service function. Accepts the upstream stream, runs its
//! slice of the model on each activation, and opens its own connection
//! toward the original destination for the rest of the chain; the flow
//! state inherited via rekey keeps that new connection on the same path.

use std::collections::VecDeque;

use log::warn;

use crate::netsim::{Action, App, ComputeKind, ConnId, MsgKind};
use crate::nn::{lr_schedule, SubModel, Tensor, TrainConfig};
use crate::nsf::frame::{FrameKind, MessageFrame, ReassemblyBuffer};
use crate::nsf::RunMode;
use crate::srv6::{FiveTuple, Sid};

#[derive(Clone, Debug)]
pub struct NsfConfig {
    /// Where the chain is ultimately headed, as the client addressed it.
    pub dst_addr: Sid,
    pub dst_port: u16,
    pub mode: RunMode,
    pub train: TrainConfig,
    /// Inherit the upstream flow's routing state when opening downstream.
    /// Off when no interception is in play and opens route normally.
    pub rekey: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Work {
    Fwd,
    Bwd,
}

struct Inflight {
    work: Work,
    round: u32,
    epoch: u32,
    labels: Vec<u32>,
    tensor: Tensor<f32>,
}

pub struct NsfApp {
    cfg: NsfConfig,
    sub: SubModel<f32>,
    upstream: Option<ConnId>,
    downstream: Option<ConnId>,
    up_rx: ReassemblyBuffer,
    down_rx: ReassemblyBuffer,
    rekey_from: Option<FiveTuple>,
    opening: bool,
    queued_down: VecDeque<(Vec<u8>, u32, u32, MsgKind)>,
    pending_acts: VecDeque<MessageFrame>,
    inflight: Option<Inflight>,
    /// A forward cache is staged for a gradient still to come; starting
    /// another forward would clobber it.
    awaiting_grad: bool,
    forward_count: u64,
}

impl NsfApp {
    pub fn new(cfg: NsfConfig, sub: SubModel<f32>) -> NsfApp {
        NsfApp {
            cfg,
            sub,
            upstream: None,
            downstream: None,
            up_rx: ReassemblyBuffer::new(),
            down_rx: ReassemblyBuffer::new(),
            rekey_from: None,
            opening: false,
            queued_down: VecDeque::new(),
            pending_acts: VecDeque::new(),
            inflight: None,
            awaiting_grad: false,
            forward_count: 0,
        }
    }

    pub fn sub(&self) -> &SubModel<f32> {
        &self.sub
    }

    /// How many activations this function has run through its layers.
    pub fn forward_count(&self) -> u64 {
        self.forward_count
    }

    fn send_down(
        &mut self,
        bytes: Vec<u8>,
        round: u32,
        epoch: u32,
        kind: MsgKind,
        actions: &mut Vec<Action>,
    ) {
        if let Some(conn) = self.downstream {
            actions.push(Action::SendFrame {
                conn,
                bytes,
                round,
                epoch,
                kind,
            });
            return;
        }
        self.queued_down.push_back((bytes, round, epoch, kind));
        if !self.opening {
            self.opening = true;
            actions.push(Action::Open {
                dst: (self.cfg.dst_addr, self.cfg.dst_port),
                rekey_from: if self.cfg.rekey {
                    self.rekey_from.clone()
                } else {
                    None
                },
            });
        }
    }

    fn maybe_start(&mut self, actions: &mut Vec<Action>) {
        if self.inflight.is_some() || self.awaiting_grad {
            return;
        }
        let Some(frame) = self.pending_acts.pop_front() else {
            return;
        };
        let tensor = match frame.tensor() {
            Ok(t) => t,
            Err(e) => {
                actions.push(Action::Abort {
                    reason: format!("service activation shape: {e}"),
                });
                return;
            }
        };
        actions.push(Action::Compute {
            flops: self.sub.forward_flops(tensor.rows()),
            token: u64::from(frame.round),
            round: frame.round,
            epoch: frame.epoch,
            kind: ComputeKind::Forward,
        });
        self.inflight = Some(Inflight {
            work: Work::Fwd,
            round: frame.round,
            epoch: frame.epoch,
            labels: frame.labels,
            tensor,
        });
    }

    fn from_upstream(&mut self, frame: MessageFrame, actions: &mut Vec<Action>) {
        match frame.kind {
            FrameKind::Act => {
                self.pending_acts.push_back(frame);
                self.maybe_start(actions);
            }
            kind => warn!("service: unexpected {kind:?} from upstream"),
        }
    }

    fn from_downstream(&mut self, frame: MessageFrame, actions: &mut Vec<Action>) {
        match frame.kind {
            FrameKind::Grad => {
                if !self.awaiting_grad {
                    warn!("service: gradient without a pending forward");
                    return;
                }
                let tensor = match frame.tensor() {
                    Ok(t) => t,
                    Err(e) => {
                        actions.push(Action::Abort {
                            reason: format!("service gradient shape: {e}"),
                        });
                        return;
                    }
                };
                actions.push(Action::Compute {
                    flops: self.sub.backward_flops(tensor.rows()),
                    token: u64::from(frame.round),
                    round: frame.round,
                    epoch: frame.epoch,
                    kind: ComputeKind::Backward,
                });
                self.inflight = Some(Inflight {
                    work: Work::Bwd,
                    round: frame.round,
                    epoch: frame.epoch,
                    labels: Vec::new(),
                    tensor,
                });
            }
            FrameKind::Result => {
                // Replies pass through untouched on their way back.
                let Some(conn) = self.upstream else {
                    warn!("service: result with no upstream");
                    return;
                };
                actions.push(Action::SendFrame {
                    conn,
                    bytes: frame.encode(),
                    round: frame.round,
                    epoch: frame.epoch,
                    kind: MsgKind::Result,
                });
            }
            FrameKind::Act => warn!("service: activation from downstream"),
        }
    }

    fn drain(
        &mut self,
        conn: ConnId,
        from_up: bool,
        actions: &mut Vec<Action>,
    ) {
        loop {
            let rx = if from_up {
                &mut self.up_rx
            } else {
                &mut self.down_rx
            };
            let (frame, first_ns, last_ns) = match rx.pop_frame() {
                Ok(Some(hit)) => hit,
                Ok(None) => return,
                Err(e) => {
                    warn!("service: bad frame: {e}");
                    actions.push(Action::Abort {
                        reason: format!("service frame decode: {e}"),
                    });
                    return;
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
            if from_up {
                self.from_upstream(frame, actions);
            } else {
                self.from_downstream(frame, actions);
            }
        }
    }
}

impl App for NsfApp {
    fn on_accepted(
        &mut self,
        _now: u64,
        conn: ConnId,
        local: (Sid, u16),
        peer: (Sid, u16),
    ) -> Vec<Action> {
        if self.upstream.is_some() {
            warn!("service: second upstream connection ignored");
            return Vec::new();
        }
        self.upstream = Some(conn);
        // The flow entry left by interception is keyed by the tuple as the
        // client sent it: peer is the original source, local the original
        // destination.
        self.rekey_from = Some(FiveTuple::new(peer.0, local.0, peer.1, local.1));
        Vec::new()
    }

    fn on_connected(&mut self, _now: u64, conn: ConnId) -> Vec<Action> {
        self.downstream = Some(conn);
        self.opening = false;
        let mut actions = Vec::new();
        while let Some((bytes, round, epoch, kind)) = self.queued_down.pop_front() {
            actions.push(Action::SendFrame {
                conn,
                bytes,
                round,
                epoch,
                kind,
            });
        }
        actions
    }

    fn on_bytes(&mut self, _now: u64, conn: ConnId, bytes: &[u8], arrived_ns: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        if Some(conn) == self.upstream {
            self.up_rx.push(bytes, arrived_ns);
            self.drain(conn, true, &mut actions);
        } else if Some(conn) == self.downstream {
            self.down_rx.push(bytes, arrived_ns);
            self.drain(conn, false, &mut actions);
        } else {
            warn!("service: bytes on unknown conn {conn:?}");
        }
        actions
    }

    fn on_compute_done(&mut self, _now: u64, _token: u64) -> Vec<Action> {
        let Some(job) = self.inflight.take() else {
            warn!("service: compute finished with nothing in flight");
            return Vec::new();
        };
        let mut actions = Vec::new();
        match job.work {
            Work::Fwd => {
                let out = match self.cfg.mode {
                    RunMode::Train => self.sub.forward(&job.tensor),
                    RunMode::Infer => self.sub.forward_inference(&job.tensor),
                };
                let out = match out {
                    Ok(o) => o,
                    Err(e) => {
                        return vec![Action::Abort {
                            reason: format!("service forward: {e}"),
                        }]
                    }
                };
                self.forward_count += 1;
                if self.cfg.mode == RunMode::Train {
                    self.awaiting_grad = true;
                }
                let frame =
                    MessageFrame::new(FrameKind::Act, job.round, job.epoch, &out, job.labels);
                self.send_down(frame.encode(), job.round, job.epoch, MsgKind::Act, &mut actions);
            }
            Work::Bwd => {
                let lr = lr_schedule(&self.cfg.train, job.epoch);
                let dx = self.sub.backward_and_update(
                    &job.tensor,
                    lr,
                    self.cfg.train.momentum,
                    self.cfg.train.weight_decay,
                );
                self.awaiting_grad = false;
                let frame = MessageFrame::new(FrameKind::Grad, job.round, job.epoch, &dx, Vec::new());
                let Some(conn) = self.upstream else {
                    return vec![Action::Abort {
                        reason: "service gradient with no upstream".into(),
                    }];
                };
                actions.push(Action::SendFrame {
                    conn,
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

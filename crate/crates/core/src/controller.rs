//! Control plane: periodic link monitoring and a one-shot reroute of a
//! source node's steering policy when a watched link stays degraded for a
//! full observation window.

use std::collections::VecDeque;

use log::{debug, info, warn};
use serde::Serialize;

use crate::netsim::{NetError, NodeId, SteeringPolicy, Topology, World};
use crate::srv6::Sid;

#[derive(Clone, Debug)]
pub struct ControllerConfig {
    /// Sampling period.
    pub interval_ns: u64,
    /// How long a link must stay at or under the threshold before the
    /// chain is moved.
    pub window_ns: u64,
    pub threshold_mbps: f64,
    /// Links to sample, by node name.
    pub watch: Vec<(String, String)>,
    /// Node whose steering policy is rewritten on detection.
    pub steer_node: String,
    /// Replacement policy installed on detection.
    pub fallback: SteeringPolicy,
    /// Put the original policy back once the link reports healthy again
    /// for a full window.
    pub revert_on_recovery: bool,
}

impl ControllerConfig {
    pub fn new(steer_node: &str, fallback: SteeringPolicy, threshold_mbps: f64) -> Self {
        ControllerConfig {
            interval_ns: 1_000_000_000,
            window_ns: 10_000_000_000,
            threshold_mbps,
            watch: Vec::new(),
            steer_node: steer_node.to_string(),
            fallback,
            revert_on_recovery: false,
        }
    }
}

/// One steering rewrite, kept for the run report.
#[derive(Clone, Debug, Serialize)]
pub struct ReconfigEvent {
    pub t_ns: u64,
    pub node: String,
    pub link: (String, String),
    /// The window of samples (in Mbps) that triggered the rewrite.
    pub samples: Vec<f64>,
    pub old_traversal: Vec<Sid>,
    pub new_traversal: Vec<Sid>,
    /// False for a revert back to the original policy.
    pub degraded: bool,
}

struct WatchState {
    a: NodeId,
    b: NodeId,
    names: (String, String),
    samples: VecDeque<f64>,
}

pub struct Controller {
    cfg: ControllerConfig,
    steer_id: NodeId,
    watches: Vec<WatchState>,
    window_len: usize,
    last_sample_ns: Option<u64>,
    rerouted: bool,
    original: Option<SteeringPolicy>,
    events: Vec<ReconfigEvent>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, topo: &Topology) -> Result<Controller, NetError> {
        let steer_id = topo.node_id(&cfg.steer_node)?;
        let mut watches = Vec::new();
        for (a, b) in &cfg.watch {
            let ai = topo.node_id(a)?;
            let bi = topo.node_id(b)?;
            if topo.link_between(ai, bi).is_none() {
                return Err(NetError::BadLink(
                    a.clone(),
                    b.clone(),
                    "not adjacent".to_string(),
                ));
            }
            watches.push(WatchState {
                a: ai,
                b: bi,
                names: (a.clone(), b.clone()),
                samples: VecDeque::new(),
            });
        }
        let window_len = (cfg.window_ns / cfg.interval_ns.max(1)).max(1) as usize;
        Ok(Controller {
            cfg,
            steer_id,
            watches,
            window_len,
            last_sample_ns: None,
            rerouted: false,
            original: None,
            events: Vec::new(),
        })
    }

    pub fn events(&self) -> &[ReconfigEvent] {
        &self.events
    }

    pub fn rerouted(&self) -> bool {
        self.rerouted
    }

    /// Samples the watched links if an interval has elapsed and applies
    /// the reroute decision. Call from the run loop between engine slices.
    pub fn poll(&mut self, world: &mut World) {
        let now = world.now();
        if let Some(last) = self.last_sample_ns {
            if now < last + self.cfg.interval_ns {
                return;
            }
        }
        self.last_sample_ns = Some(now);

        for w in &mut self.watches {
            let Some(mbps) = world.link_bw_mbps(w.a, w.b) else {
                continue;
            };
            if w.samples.len() == self.window_len {
                w.samples.pop_front();
            }
            w.samples.push_back(mbps);
        }

        let threshold = self.cfg.threshold_mbps;
        let full = |w: &WatchState| w.samples.len() == self.window_len;
        if !self.rerouted {
            let hit = self
                .watches
                .iter()
                .find(|w| full(w) && w.samples.iter().all(|&s| s <= threshold));
            if let Some((names, samples)) =
                hit.map(|w| (w.names.clone(), Vec::from(w.samples.clone())))
            {
                self.apply(world, now, names, samples, true);
            }
        } else if self.cfg.revert_on_recovery {
            let recovered = self
                .watches
                .iter()
                .all(|w| full(w) && w.samples.iter().all(|&s| s > threshold));
            if recovered && self.original.is_some() {
                let first = &self.watches[0];
                let trigger = (first.names.clone(), first.samples.iter().copied().collect());
                self.apply(world, now, trigger.0, trigger.1, false);
            }
        }
    }

    fn apply(
        &mut self,
        world: &mut World,
        now: u64,
        link: (String, String),
        samples: Vec<f64>,
        degraded: bool,
    ) {
        let target = if degraded {
            self.cfg.fallback.clone()
        } else {
            self.original.take().expect("revert requires an original")
        };
        let current = world
            .steering(self.steer_id)
            .iter()
            .find(|p| p.dst_addr == target.dst_addr && p.dst_port == target.dst_port)
            .cloned();
        let Some(current) = current else {
            warn!(
                "controller: no steering for {} on {}; nothing to rewrite",
                target.dst_addr, self.cfg.steer_node
            );
            return;
        };
        if current.traversal == target.traversal {
            debug!("controller: policy already in place; leaving it");
            self.rerouted = degraded;
            return;
        }
        if degraded {
            self.original = Some(current.clone());
        }
        info!(
            "controller: rewriting chain at {} after {} samples on {}-{}",
            self.cfg.steer_node,
            samples.len(),
            link.0,
            link.1
        );
        world.set_steering(self.steer_id, target.clone());
        self.events.push(ReconfigEvent {
            t_ns: now,
            node: self.cfg.steer_node.clone(),
            link,
            samples,
            old_traversal: current.traversal,
            new_traversal: target.traversal,
            degraded,
        });
        self.rerouted = degraded;
    }
}

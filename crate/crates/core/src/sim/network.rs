use alloc::vec;
use alloc::vec::Vec;

use super::config::LinkLatency;
use super::event::Actor;
use crate::time::{SimDuration, SimTime};

/// Link latencies between the compute nodes, the storage and the monitor,
/// with per-link FIFO delivery.
#[derive(Clone, Debug)]
pub struct Network {
    nodes: u32,
    latency: Vec<SimDuration>,
    last_delivery: Vec<SimTime>,
}

impl Network {
    pub fn new(nodes: u32, default: SimDuration, links: &[LinkLatency]) -> Self {
        let a = nodes as usize + 2;
        let mut net = Network { nodes, latency: vec![default; a * a], last_delivery: vec![SimTime::ZERO; a * a] };
        for l in links {
            if let Some(i) = net.link(l.from, l.to) {
                net.latency[i] = l.latency;
            }
        }
        net
    }

    fn index(&self, actor: Actor) -> Option<usize> {
        match actor {
            Actor::Node(n) if n < self.nodes => Some(n as usize),
            Actor::Storage => Some(self.nodes as usize),
            Actor::Monitor => Some(self.nodes as usize + 1),
            _ => None,
        }
    }

    fn link(&self, from: Actor, to: Actor) -> Option<usize> {
        Some(self.index(from)? * (self.nodes as usize + 2) + self.index(to)?)
    }

    pub fn latency(&self, from: Actor, to: Actor) -> SimDuration {
        self.link(from, to).map_or(SimDuration::ZERO, |i| self.latency[i])
    }

    /// Delivery time of a message sent now; never earlier than the previous
    /// delivery on the same link.
    pub fn delivery_time(&mut self, from: Actor, to: Actor, sent: SimTime) -> SimTime {
        let Some(i) = self.link(from, to) else {
            return sent;
        };
        let t = (sent + self.latency[i]).max(self.last_delivery[i]);
        self.last_delivery[i] = t;
        t
    }
}

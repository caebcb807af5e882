use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use super::mailbox::{Frame, Mailbox};
use super::{check_peer, Counters, Result, Tag, Transport, TransportError, TAG_STRIDE};
use crate::sched::Rank;

/// One message as seen by a [`Tap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: Rank,
    pub dst: Rank,
    pub tag: Tag,
    pub payload: Vec<u8>,
}

/// Shared log of every envelope sent through a tapped in-process group.
#[derive(Debug, Clone, Default)]
pub struct Tap(Arc<Mutex<Vec<Envelope>>>);

impl Tap {
    pub fn envelopes(&self) -> Vec<Envelope> {
        self.0.lock().expect("tap poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("tap poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().expect("tap poisoned").clear();
    }

    fn record(&self, env: Envelope) {
        self.0.lock().expect("tap poisoned").push(env);
    }
}

/// Endpoint of an in-process group; one per rank, moved into its thread.
pub struct InProcEndpoint {
    rank: Rank,
    size: usize,
    outboxes: Vec<Option<Sender<Frame>>>,
    mailbox: Mailbox,
    counters: Counters,
    epoch: Tag,
    tap: Option<Tap>,
}

/// Factory for fully connected in-process groups backed by unbounded channels.
pub struct InProcess;

impl InProcess {
    pub fn create(size: usize) -> Vec<InProcEndpoint> {
        Self::build(size, None)
    }

    pub fn with_tap(size: usize) -> (Vec<InProcEndpoint>, Tap) {
        let tap = Tap::default();
        (Self::build(size, Some(tap.clone())), tap)
    }

    fn build(size: usize, tap: Option<Tap>) -> Vec<InProcEndpoint> {
        // links[src][dst]
        let mut senders: Vec<Vec<Option<Sender<Frame>>>> = (0..size).map(|_| Vec::new()).collect();
        let mut receivers: Vec<Vec<Option<_>>> = (0..size).map(|_| Vec::new()).collect();
        for src in 0..size {
            for dst in 0..size {
                if src == dst {
                    senders[src].push(None);
                    receivers[dst].push(None);
                } else {
                    let (tx, rx) = channel();
                    senders[src].push(Some(tx));
                    receivers[dst].push(Some(rx));
                }
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (outboxes, inboxes))| InProcEndpoint {
                rank,
                size,
                outboxes,
                mailbox: Mailbox::new(inboxes),
                counters: Counters::new(size),
                epoch: 0,
                tap: tap.clone(),
            })
            .collect()
    }

    /// Runs `body` once per rank on its own thread and returns the results
    /// in rank order.
    pub fn run<R, F>(size: usize, body: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&mut InProcEndpoint) -> R + Sync,
    {
        Self::run_endpoints(Self::create(size), body)
    }

    pub fn run_endpoints<R, F>(endpoints: Vec<InProcEndpoint>, body: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&mut InProcEndpoint) -> R + Sync,
    {
        let body = &body;
        thread::scope(|s| {
            let handles: Vec<_> = endpoints
                .into_iter()
                .map(|mut ep| s.spawn(move || body(&mut ep)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        })
    }
}

impl InProcEndpoint {
    /// Drops every outbound link; peers blocked on us see a peer failure.
    pub fn close(&mut self) {
        self.outboxes.iter_mut().for_each(|o| *o = None);
    }
}

impl Transport for InProcEndpoint {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        check_peer(self.rank, self.size, dst)?;
        let outbox = self.outboxes[dst].as_ref().ok_or(TransportError::PeerFailure(dst))?;
        outbox
            .send(Frame { tag, payload: payload.to_vec() })
            .map_err(|_| TransportError::PeerFailure(dst))?;
        self.counters.record(dst, payload.len());
        if let Some(tap) = &self.tap {
            tap.record(Envelope { src: self.rank, dst, tag, payload: payload.to_vec() });
        }
        Ok(())
    }

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        check_peer(self.rank, self.size, src)?;
        self.mailbox.take(src, tag)
    }

    fn next_tag(&mut self) -> Tag {
        let tag = self.epoch.wrapping_mul(TAG_STRIDE);
        self.epoch = self.epoch.wrapping_add(1);
        tag
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }
}

use std::collections::VecDeque;
use std::sync::mpsc::Receiver;

use super::{Result, Tag, TransportError};
use crate::sched::Rank;

#[derive(Debug)]
pub(crate) struct Frame {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

/// Per-source inbound queues with tag matching.
///
/// Frames that arrive with a tag nobody asked for yet are parked in a
/// per-source stash and handed out in arrival order when their tag is
/// requested.
pub(crate) struct Mailbox {
    inboxes: Vec<Option<Receiver<Frame>>>,
    stash: Vec<VecDeque<Frame>>,
}

impl Mailbox {
    pub fn new(inboxes: Vec<Option<Receiver<Frame>>>) -> Self {
        let stash = inboxes.iter().map(|_| VecDeque::new()).collect();
        Self { inboxes, stash }
    }

    pub fn take(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        let parked = &mut self.stash[src];
        if let Some(pos) = parked.iter().position(|f| f.tag == tag) {
            return Ok(parked.remove(pos).expect("position is in bounds").payload);
        }
        let inbox = self.inboxes[src]
            .as_ref()
            .ok_or(TransportError::PeerFailure(src))?;
        loop {
            let frame = inbox.recv().map_err(|_| TransportError::PeerFailure(src))?;
            if frame.tag == tag {
                return Ok(frame.payload);
            }
            self.stash[src].push_back(frame);
        }
    }
}

use super::{Counters, Result, Tag, Transport};
use crate::sched::Rank;

/// Debug tap that flips one bit in the `nth` non-empty payload this
/// endpoint sends. Used to prove that verification catches corruption.
pub struct CorruptingTransport<T> {
    inner: T,
    remaining: Option<usize>,
}

impl<T: Transport> CorruptingTransport<T> {
    pub fn new(inner: T, nth: usize) -> Self {
        Self { inner, remaining: Some(nth) }
    }

    pub fn into_inner(self) -> T {
        self.inner
    }

    fn maybe_corrupt<'p>(&mut self, payload: &'p [u8]) -> std::borrow::Cow<'p, [u8]> {
        if payload.is_empty() {
            return payload.into();
        }
        match self.remaining {
            Some(0) => {
                self.remaining = None;
                let mut bad = payload.to_vec();
                bad[0] ^= 0x01;
                bad.into()
            }
            Some(n) => {
                self.remaining = Some(n - 1);
                payload.into()
            }
            None => payload.into(),
        }
    }
}

impl<T: Transport> Transport for CorruptingTransport<T> {
    fn rank(&self) -> Rank {
        self.inner.rank()
    }

    fn size(&self) -> usize {
        self.inner.size()
    }

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        let payload = self.maybe_corrupt(payload);
        self.inner.send(dst, tag, &payload)
    }

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        self.inner.recv(src, tag)
    }

    fn sendrecv(&mut self, dst: Rank, payload: &[u8], src: Rank, tag: Tag) -> Result<Vec<u8>> {
        let payload = self.maybe_corrupt(payload);
        self.inner.sendrecv(dst, &payload, src, tag)
    }

    fn next_tag(&mut self) -> Tag {
        self.inner.next_tag()
    }

    fn counters(&self) -> &Counters {
        self.inner.counters()
    }
}

//! IPC message layout and endpoint objects.

use std::collections::VecDeque;

use super::ObjId;

/// Longest message body, in 32-bit words, carried inline by IPC.
pub const MAX_MSG_WORDS: usize = 64;

/// Descriptor of a buffer mapped at the same virtual address in both parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedBuf {
    pub base: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Message {
    pub label: u32,
    pub words: Vec<u32>,
    pub shared_buf: Option<SharedBuf>,
}

impl Message {
    pub fn new(label: u32, words: Vec<u32>) -> Self {
        Self {
            label,
            words,
            shared_buf: None,
        }
    }

    pub fn with_shared(mut self, buf: SharedBuf) -> Self {
        self.shared_buf = Some(buf);
        self
    }
}

/// A message as observed by its receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub msg: Message,
    /// Badge of the sender's capability; the IRQ number for notifications.
    pub badge: u32,
    pub kind: SenderKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenderKind {
    Thread,
    Reply,
    Interrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QueuedSender {
    Thread { tcb: ObjId, badge: u32, is_call: bool },
    Interrupt { irq: u32, badge: u32 },
}

/// Rendezvous point: either senders wait for a receiver or receivers wait
/// for a sender, never both.
#[derive(Debug, Clone, Default)]
pub struct EndpointObject {
    pub(crate) send_queue: VecDeque<QueuedSender>,
    pub(crate) recv_queue: VecDeque<ObjId>,
}

impl EndpointObject {
    pub fn send_queue_len(&self) -> usize {
        self.send_queue.len()
    }

    pub fn recv_queue_len(&self) -> usize {
        self.recv_queue.len()
    }

    pub(crate) fn remove_thread(&mut self, tcb: ObjId) {
        self.recv_queue.retain(|t| *t != tcb);
        self.send_queue
            .retain(|s| !matches!(s, QueuedSender::Thread { tcb: t, .. } if *t == tcb));
    }
}

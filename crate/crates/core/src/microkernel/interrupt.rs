//! Interrupt lines routed to user-level handlers.

use super::ObjId;

#[derive(Debug, Clone)]
pub struct IrqLine {
    pub(crate) endpoint: ObjId,
    pub(crate) badge: u32,
    pub pending: bool,
    pub deliveries: u64,
    pub acks: u64,
    pub suppressed: u64,
}

impl IrqLine {
    pub(crate) fn new(endpoint: ObjId, badge: u32) -> Self {
        Self {
            endpoint,
            badge,
            pending: false,
            deliveries: 0,
            acks: 0,
            suppressed: 0,
        }
    }
}

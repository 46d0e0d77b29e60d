//! Service requests and responses as IPC messages.
//!
//! Both directions use the same layout: the label carries the service ID
//! (request) or status (response), `words[0]` the payload length and
//! `words[1]` flags. Payloads up to [`INLINE_BYTES`] travel inline in the
//! remaining words; larger ones go through a shared buffer that is mapped
//! at the same address in client and service.

use thiserror::Error;

use crate::microkernel::{CPtr, KernelError, Message, SharedBuf, MAX_MSG_WORDS};
use crate::runtime::{CallError, IpcPort, Task, TaskCtx, TaskError, UserMemory};

use super::{ServiceHandler, ServiceRequest, ServiceResponse, Status};

pub const INLINE_BYTES: usize = (MAX_MSG_WORDS - 2) * 4;
pub const FLAG_SHARED: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed message")]
    Malformed,
    #[error("payload does not fit the transport")]
    TooLarge,
    #[error("shared buffer access: {0}")]
    Memory(#[from] KernelError),
}

pub fn pack_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks(4)
        .map(|c| {
            let mut w = [0u8; 4];
            w[..c.len()].copy_from_slice(c);
            u32::from_le_bytes(w)
        })
        .collect()
}

pub fn unpack_bytes(words: &[u32], len: usize) -> Vec<u8> {
    let mut out: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    out.truncate(len);
    out
}

/// Build a message carrying `payload`, staging it in `buffer` if needed.
pub fn encode(
    label: u32,
    payload: &[u8],
    buffer: Option<SharedBuf>,
    mem: &mut dyn UserMemory,
) -> Result<Message, WireError> {
    if payload.len() <= INLINE_BYTES {
        let mut words = vec![payload.len() as u32, 0];
        words.extend(pack_bytes(payload));
        // The buffer still travels along so the peer can answer with a
        // payload larger than ours.
        let msg = Message::new(label, words);
        return Ok(match buffer {
            Some(b) => msg.with_shared(b),
            None => msg,
        });
    }
    let buf = buffer.ok_or(WireError::TooLarge)?;
    if payload.len() > buf.len as usize {
        return Err(WireError::TooLarge);
    }
    mem.write(buf.base, payload)?;
    Ok(Message::new(label, vec![payload.len() as u32, FLAG_SHARED]).with_shared(buf))
}

/// Extract the payload of a message built by [`encode`].
pub fn decode(msg: &Message, mem: &mut dyn UserMemory) -> Result<Vec<u8>, WireError> {
    let [len, flags, rest @ ..] = msg.words.as_slice() else {
        return Err(WireError::Malformed);
    };
    let len = *len as usize;
    if flags & FLAG_SHARED != 0 {
        let buf = msg.shared_buf.ok_or(WireError::Malformed)?;
        if len > buf.len as usize {
            return Err(WireError::Malformed);
        }
        Ok(mem.read(buf.base, len)?)
    } else {
        if len > rest.len() * 4 {
            return Err(WireError::Malformed);
        }
        Ok(unpack_bytes(rest, len))
    }
}

/// Runs a [`ServiceHandler`] as a kernel task.
pub struct ServiceTask<H> {
    handler: H,
}

impl<H: ServiceHandler> ServiceTask<H> {
    pub fn new(handler: H) -> Self {
        Self { handler }
    }
}

impl<H: ServiceHandler> Task for ServiceTask<H> {
    fn handle(&mut self, ctx: &mut TaskCtx<'_>, req: crate::microkernel::Received) -> Result<Message, TaskError> {
        let buffer = req.msg.shared_buf;
        let resp = match decode(&req.msg, ctx) {
            Ok(payload) => self.handler.handle_request(&ServiceRequest {
                service_id: req.msg.label,
                payload,
            }),
            Err(_) => ServiceResponse::error(Status::BadRequest),
        };
        ctx.observe_response(&resp.payload);
        if resp.status != Status::Ok {
            ctx.log(format!(
                "{}: request {:#x} failed with {:?}",
                self.handler.name(),
                req.msg.label,
                resp.status
            ));
        }
        match encode(resp.status as u32, &resp.payload, buffer, ctx) {
            Ok(m) => Ok(m),
            Err(WireError::TooLarge) => Ok(Message::new(Status::TooLarge as u32, vec![0, 0])),
            Err(e) => Err(TaskError::Abort(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("{0}")]
    Call(#[from] CallError),
    #[error("{0}")]
    Wire(#[from] WireError),
    #[error("unknown status word {0:#x}")]
    UnknownStatus(u32),
    #[error("service returned {0:?}")]
    Service(Status),
}

impl From<ClientError> for TaskError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Call(c) => TaskError::Call(c),
            ClientError::Wire(WireError::Memory(k)) => TaskError::Kernel(k),
            other => TaskError::Abort(other.to_string()),
        }
    }
}

/// Client side of a service connection: a send capability plus an optional
/// shared buffer for large payloads.
#[derive(Debug, Clone, Copy)]
pub struct ServiceClient {
    pub endpoint: CPtr,
    pub buffer: Option<SharedBuf>,
}

impl ServiceClient {
    pub fn new(endpoint: CPtr, buffer: Option<SharedBuf>) -> Self {
        Self { endpoint, buffer }
    }

    pub fn request(&self, port: &mut dyn IpcPort, req: &ServiceRequest) -> Result<ServiceResponse, ClientError> {
        let msg = encode(req.service_id, &req.payload, self.buffer, port)?;
        let reply = port.call(self.endpoint, msg)?;
        let status = Status::from_u32(reply.msg.label).ok_or(ClientError::UnknownStatus(reply.msg.label))?;
        let payload = decode(&reply.msg, port)?;
        Ok(ServiceResponse { status, payload })
    }

    /// Like [`request`](Self::request) but turns a non-OK status into an error.
    pub fn invoke(&self, port: &mut dyn IpcPort, req: &ServiceRequest) -> Result<Vec<u8>, ClientError> {
        let resp = self.request(port, req)?;
        match resp.status {
            Status::Ok => Ok(resp.payload),
            s => Err(ClientError::Service(s)),
        }
    }
}
